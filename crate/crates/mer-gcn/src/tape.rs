//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding the output tensor plus enough
//! saved state to run its backward rule. Nodes reference their inputs by
//! index, so the tape is topologically ordered by construction; `backward`
//! walks it once in reverse, accumulating gradients into each node that
//! requires them. Two runs over the same tape produce bitwise-identical
//! gradients.

use thiserror::Error;

use crate::conv::{conv3d_backward_input, conv3d_backward_kernel, conv3d_forward, ConvGeometry};
use crate::linalg::{accumulate_lhs_transposed, axpy, dot, matmul, matmul_rhs_transposed};
use crate::tensor::{fmt_shape, Tensor, TensorError};

pub type TensorId = usize;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("conv3d output dimension on axis {axis} is not positive (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    NonPositiveConvDim {
        axis: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("target class {target} out of range for {n_classes} classes")]
    TargetOutOfRange { target: usize, n_classes: usize },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error("non-finite {what} encountered")]
    NonFinite { what: String },
    #[error("closure is not deterministic: repeated evaluations gave {first} and {second}")]
    NonDeterministicClosure { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Conv3d {
        input: TensorId,
        kernel: TensorId,
        geometry: ConvGeometry,
    },
    /// Adds a per-channel bias to a C×T×H×W tensor.
    ChannelBias {
        x: TensorId,
        bias: TensorId,
    },
    LeakyRelu {
        x: TensorId,
        slope: f64,
    },
    GlobalAvgPool3d {
        x: TensorId,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        target: usize,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<f64>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    corrupt_leaky_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test and diagnostics hook: plants a wrong backward rule for
    /// leaky_relu so gradient checking has a negative control.
    pub fn corrupt_leaky_backward(&mut self) {
        self.corrupt_leaky_backward = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of a node after `backward`; None when the node was not
    /// reached (or does not require grad).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].value.grad.as_deref()
    }

    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].value.requires_grad)
    }

    /// Registers an input tensor; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let rg = value.requires_grad;
        self.push(value, rg, Op::Leaf)
    }

    /// Registers a read-only constant.
    pub fn constant(&mut self, mut value: Tensor) -> TensorId {
        value.requires_grad = false;
        self.push(value, false, Op::Leaf)
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// 2-D matrix product `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: fmt_shape(sa),
                rhs: fmt_shape(sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_op(vec![m, n], data), rg, Op::MatMul { a, b }))
    }

    /// Space-time cross-correlation of `input (C_in×T×H×W)` with
    /// `kernel (C_out×C_in×kT×kH×kW)`.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId, AutodiffError> {
        let geometry = ConvGeometry::resolve(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let data = conv3d_forward(&geometry, self.value(input).data(), self.value(kernel).data());
        let rg = self.needs_grad(&[input, kernel]);
        Ok(self.push(
            Tensor::from_op(geometry.output_shape(), data),
            rg,
            Op::Conv3d {
                input,
                kernel,
                geometry,
            },
        ))
    }

    /// Per-channel bias add over a 4-D activation map.
    pub fn channel_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, AutodiffError> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "channel_bias",
                lhs: fmt_shape(sx),
                rhs: fmt_shape(sb),
            });
        }
        let plane = sx[1] * sx[2] * sx[3];
        let mut data = self.value(x).data().to_vec();
        for (c, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let b = self.value(bias).data()[c];
            for v in chunk {
                *v += b;
            }
        }
        let shape = sx.to_vec();
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(Tensor::from_op(shape, data), rg, Op::ChannelBias { x, bias }))
    }

    /// Elementwise `max(x, slope*x)`; `slope = 0` is the plain rectifier.
    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId, AutodiffError> {
        assert!(
            (0.0..1.0).contains(&slope),
            "leaky_relu slope must lie in [0, 1), got {slope}"
        );
        let src = self.value(x);
        let data: Vec<f64> = src
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = src.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_op(shape, data), rg, Op::LeakyRelu { x, slope }))
    }

    /// Per-channel mean over the T, H, W axes: C×T×H×W → C.
    pub fn global_avg_pool3d(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "global_avg_pool3d",
                lhs: fmt_shape(sx),
                rhs: "[C, T, H, W]".to_string(),
            });
        }
        let c = sx[0];
        let plane = sx[1] * sx[2] * sx[3];
        let src = self.value(x).data();
        let mut data = vec![0.0; c];
        for (ch, slot) in data.iter_mut().enumerate() {
            let mut lanes = [0.0f64; 4];
            let chunk = &src[ch * plane..(ch + 1) * plane];
            let it = chunk.chunks_exact(4);
            let rem = it.remainder();
            for q in it {
                lanes[0] += q[0];
                lanes[1] += q[1];
                lanes[2] += q[2];
                lanes[3] += q[3];
            }
            let mut tail = 0.0;
            for &v in rem {
                tail += v;
            }
            *slot = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail) / plane as f64;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_op(vec![c], data), rg, Op::GlobalAvgPool3d { x }))
    }

    /// Fully-connected layer `w (out×d) · x (d) + b (out)`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] || sb.len() != 1 || sb[0] != sw[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                lhs: fmt_shape(sw),
                rhs: format!("x {} b {}", fmt_shape(sx), fmt_shape(sb)),
            });
        }
        let (out, d) = (sw[0], sw[1]);
        let mut data = vec![0.0; out];
        for (o, slot) in data.iter_mut().enumerate() {
            *slot = dot(&self.value(w).data()[o * d..(o + 1) * d], self.value(x).data())
                + self.value(b).data()[o];
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(Tensor::from_op(vec![out], data), rg, Op::Linear { x, w, b }))
    }

    /// Stabilized `-log softmax(logits)[target]`, a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        target: usize,
    ) -> Result<TensorId, AutodiffError> {
        let sl = self.value(logits).shape();
        if sl.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: fmt_shape(sl),
                rhs: "[n_classes]".to_string(),
            });
        }
        let n = sl[0];
        if target >= n {
            return Err(AutodiffError::TargetOutOfRange {
                target,
                n_classes: n,
            });
        }
        let src = self.value(logits).data();
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = src.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        // loss = log(sum exp(l - max)) - (l_target - max); non-negative.
        let loss = z.ln() - (src[target] - max);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::from_op(Vec::new(), vec![loss]),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: fmt_shape(sa),
                rhs: fmt_shape(sb),
            });
        }
        let shape = sa.to_vec();
        let mut data = self.value(a).data().to_vec();
        axpy(1.0, self.value(b).data(), &mut data);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_op(shape, data), rg, Op::Add { a, b }))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: fmt_shape(self.value(x).shape()),
                rhs: fmt_shape(&shape),
            });
        }
        let data = self.value(x).data().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_op(shape, data), rg, Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_op(Vec::new(), vec![total]), rg, Op::Sum { x }))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Seeds the scalar `loss` with gradient 1 and accumulates gradients
    /// into every node with `requires_grad` reachable below it. Leaves that
    /// require gradients but sit off the path keep a zero gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        let loss_node = &self.nodes[loss].value;
        if !loss_node.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: fmt_shape(loss_node.shape()),
            });
        }
        // Zero-fill every grad slot at or below the loss so untouched leaves
        // report zeros rather than absence.
        for node in &mut self.nodes[..=loss] {
            if node.value.requires_grad {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            } else {
                node.value.grad = None;
            }
        }
        if !self.nodes[loss].value.requires_grad {
            return Ok(());
        }
        self.nodes[loss].value.grad = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.nodes[id].value.grad.is_none() {
                continue;
            }
            let upstream = self.nodes[id].value.grad.take().expect("checked above");
            self.propagate(id, &upstream);
            self.nodes[id].value.grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if let Some(g) = self.nodes[id].value.grad.as_deref_mut() {
            axpy(1.0, delta, g);
        }
    }

    fn propagate(&mut self, id: TensorId, upstream: &[f64]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].value.requires_grad {
                    let da = matmul_rhs_transposed(upstream, self.nodes[b].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].value.requires_grad {
                    let mut db = vec![0.0; k * n];
                    accumulate_lhs_transposed(
                        self.nodes[a].value.data(),
                        upstream,
                        m,
                        k,
                        n,
                        &mut db,
                    );
                    self.accumulate(b, &db);
                }
            }
            Op::Conv3d {
                input,
                kernel,
                geometry,
            } => {
                let (input, kernel, geometry) = (*input, *kernel, *geometry);
                if self.nodes[input].value.requires_grad {
                    let di =
                        conv3d_backward_input(&geometry, upstream, self.nodes[kernel].value.data());
                    self.accumulate(input, &di);
                }
                if self.nodes[kernel].value.requires_grad {
                    let dk =
                        conv3d_backward_kernel(&geometry, upstream, self.nodes[input].value.data());
                    self.accumulate(kernel, &dk);
                }
            }
            &Op::ChannelBias { x, bias } => {
                if self.nodes[x].value.requires_grad {
                    self.accumulate(x, upstream);
                }
                if self.nodes[bias].value.requires_grad {
                    let c = self.nodes[bias].value.numel();
                    let plane = upstream.len() / c;
                    let mut db = vec![0.0; c];
                    for (ch, slot) in db.iter_mut().enumerate() {
                        *slot = upstream[ch * plane..(ch + 1) * plane].iter().sum();
                    }
                    self.accumulate(bias, &db);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                if self.nodes[x].value.requires_grad {
                    let negative_factor = if self.corrupt_leaky_backward {
                        // Deliberately wrong rule for the negative branch.
                        slope + 0.35
                    } else {
                        slope
                    };
                    let dx: Vec<f64> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(upstream)
                        .map(|(&v, &g)| if v > 0.0 { g } else { negative_factor * g })
                        .collect();
                    self.accumulate(x, &dx);
                }
            }
            &Op::GlobalAvgPool3d { x } => {
                if self.nodes[x].value.requires_grad {
                    let sx = self.nodes[x].value.shape();
                    let plane = sx[1] * sx[2] * sx[3];
                    let scale = 1.0 / plane as f64;
                    let mut dx = vec![0.0; self.nodes[x].value.numel()];
                    for (ch, chunk) in dx.chunks_exact_mut(plane).enumerate() {
                        let g = upstream[ch] * scale;
                        for v in chunk {
                            *v = g;
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            &Op::Linear { x, w, b } => {
                let (out, d) = {
                    let s = self.nodes[w].value.shape();
                    (s[0], s[1])
                };
                if self.nodes[x].value.requires_grad {
                    let mut dx = vec![0.0; d];
                    for o in 0..out {
                        axpy(upstream[o], &self.nodes[w].value.data()[o * d..(o + 1) * d], &mut dx);
                    }
                    self.accumulate(x, &dx);
                }
                if self.nodes[w].value.requires_grad {
                    let mut dw = vec![0.0; out * d];
                    for o in 0..out {
                        axpy(upstream[o], self.nodes[x].value.data(), &mut dw[o * d..(o + 1) * d]);
                    }
                    self.accumulate(w, &dw);
                }
                if self.nodes[b].value.requires_grad {
                    self.accumulate(b, upstream);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let (logits, target, mut dl) = (*logits, *target, probs.clone());
                if self.nodes[logits].value.requires_grad {
                    let g = upstream[0];
                    for (i, v) in dl.iter_mut().enumerate() {
                        let indicator = if i == target { 1.0 } else { 0.0 };
                        *v = (*v - indicator) * g;
                    }
                    self.accumulate(logits, &dl);
                }
            }
            &Op::Add { a, b } => {
                if self.nodes[a].value.requires_grad {
                    self.accumulate(a, upstream);
                }
                if self.nodes[b].value.requires_grad {
                    self.accumulate(b, upstream);
                }
            }
            &Op::Reshape { x } => {
                if self.nodes[x].value.requires_grad {
                    self.accumulate(x, upstream);
                }
            }
            &Op::Sum { x } => {
                if self.nodes[x].value.requires_grad {
                    let dx = vec![upstream[0]; self.nodes[x].value.numel()];
                    self.accumulate(x, &dx);
                }
            }
        }
    }
}
