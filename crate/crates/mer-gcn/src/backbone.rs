//! Configurable-width 3D residual backbone: a space-time stem convolution,
//! four two-block residual stages, and global space-time average pooling
//! down to one feature vector per sequence.
//!
//! Stage plan at width scale 1 for a C×T×112×112 input:
//!
//! ```text
//! stem    3×7×7/64, stride 1×2×2, pad 1×3×3   ->  64×T×56×56
//! stage1  [3×3×3, 64] x2 blocks, stride 1     ->  64×T×56×56
//! stage2  [3×3×3, 128] x2, first block /2     -> 128×T/2×28×28
//! stage3  [3×3×3, 256] x2, first block /2     -> 256×T/4×14×14
//! stage4  [3×3×3, 512] x2, first block /2     -> 512×T/8×7×7
//! pool    global average                      -> 512
//! ```
//!
//! Strided stages use a 1×1×1 strided projection on the skip path. There is
//! no batch normalization: batches are single sequences, where batch
//! statistics degenerate. Blocks are plain conv+bias+rectifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conv::conv_out_dim;
use crate::optim::{he_normal, Parameter};
use crate::tape::{AutodiffError, Tape, TensorId};
use crate::tensor::Tensor;

/// Unscaled channel plan: stem then the four stages.
pub const BASE_CHANNELS: [usize; 5] = [64, 64, 128, 256, 512];

/// Rectifier slope for the backbone activation (0 = plain ReLU, which keeps
/// the zeroed-residual identity exact on the nonnegative stage inputs).
pub const BACKBONE_SLOPE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("width scale must lie in (0, 1], got {0}")]
    InvalidWidthScale(f64),
    #[error("sequence has {t} frames but the backbone needs at least {min_t}")]
    SequenceTooShort { t: usize, min_t: usize },
    #[error("input has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input spatial size {got_h}x{got_w} does not match the required {h}x{w}")]
    SpatialMismatch {
        h: usize,
        w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("input must be a C×T×H×W tensor, got shape {0}")]
    NotASequence(String),
    #[error("infeasible {axis} axis in the shape plan: input {input} with kernel {kernel}, stride {stride}, padding {padding}")]
    InfeasibleAxis {
        axis: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Uniform multiplier on the channel plan, in (0, 1].
    pub width_scale: f64,
    /// Fixed at 112×112; the stage plan is specified for this size.
    pub input_hw: (usize, usize),
    pub min_t: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            width_scale: 1.0,
            input_hw: (112, 112),
            min_t: 8,
        }
    }
}

impl BackboneConfig {
    pub fn with_width_scale(mut self, s: f64) -> Self {
        self.width_scale = s;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// Scaled channel plan, every entry at least 1.
    pub fn channel_plan(&self) -> Result<[usize; 5], BackboneError> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(BackboneError::InvalidWidthScale(self.width_scale));
        }
        let mut plan = [0usize; 5];
        for (slot, base) in plan.iter_mut().zip(BASE_CHANNELS) {
            *slot = ((base as f64 * self.width_scale).round() as usize).max(1);
        }
        Ok(plan)
    }

    pub fn feature_dim(&self) -> Result<usize, BackboneError> {
        Ok(self.channel_plan()?[4])
    }
}

/// One convolution with its per-channel bias.
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: Parameter,
    bias: Parameter,
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvUnit {
    fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_out: usize,
        c_in: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
        let weight = he_normal(
            rng,
            vec![c_out, c_in, kernel[0], kernel[1], kernel[2]],
            fan_in,
        );
        ConvUnit {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
            stride,
            padding,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        ids: &mut IdCursor,
        x: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let w = ids.next();
        let b = ids.next();
        let y = tape.conv3d(x, w, self.stride, self.padding)?;
        tape.channel_bias(y, b)
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two 3×3×3 convolutions plus the skip path; strided first blocks project
/// the shortcut with a strided 1×1×1 convolution.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    projection: Option<ConvUnit>,
}

impl BasicBlock {
    fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        stride: [usize; 3],
    ) -> Self {
        let conv1 = ConvUnit::new(
            &format!("{name}.conv1"),
            rng,
            c_out,
            c_in,
            [3, 3, 3],
            stride,
            [1, 1, 1],
        );
        let conv2 = ConvUnit::new(
            &format!("{name}.conv2"),
            rng,
            c_out,
            c_out,
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
        );
        let needs_projection = stride != [1, 1, 1] || c_in != c_out;
        let projection = needs_projection.then(|| {
            ConvUnit::new(
                &format!("{name}.proj"),
                rng,
                c_out,
                c_in,
                [1, 1, 1],
                stride,
                [0, 0, 0],
            )
        });
        BasicBlock {
            conv1,
            conv2,
            projection,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        ids: &mut IdCursor,
        x: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let h = self.conv1.forward(tape, ids, x)?;
        let h = tape.leaky_relu(h, BACKBONE_SLOPE)?;
        let h = self.conv2.forward(tape, ids, h)?;
        let shortcut = match &self.projection {
            Some(proj) => proj.forward(tape, ids, x)?,
            None => x,
        };
        let joined = tape.add(h, shortcut)?;
        tape.leaky_relu(joined, BACKBONE_SLOPE)
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Parameter)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        if let Some(p) = &self.projection {
            p.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut Parameter)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(f);
        }
    }
}

/// Walks bound tape ids in the same order `parameters()` lists them.
struct IdCursor<'a> {
    ids: &'a [TensorId],
    pos: usize,
}

impl<'a> IdCursor<'a> {
    fn new(ids: &'a [TensorId]) -> Self {
        IdCursor { ids, pos: 0 }
    }

    fn next(&mut self) -> TensorId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    channel_plan: [usize; 5],
    stem: ConvUnit,
    stages: Vec<[BasicBlock; 2]>,
}

/// Deterministically initialized backbone; the same seed yields bitwise
/// identical parameters.
pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<BackboneModel, BackboneError> {
    let plan = config.channel_plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = ConvUnit::new(
        "backbone.stem",
        &mut rng,
        plan[0],
        config.in_channels,
        [3, 7, 7],
        [1, 2, 2],
        [1, 3, 3],
    );
    let mut stages = Vec::with_capacity(4);
    let mut c_in = plan[0];
    for (k, &c_out) in plan.iter().enumerate().skip(1) {
        let stride = if k == 1 { [1, 1, 1] } else { [2, 2, 2] };
        let block1 = BasicBlock::new(
            &format!("backbone.stage{k}.block1"),
            &mut rng,
            c_in,
            c_out,
            stride,
        );
        let block2 = BasicBlock::new(
            &format!("backbone.stage{k}.block2"),
            &mut rng,
            c_out,
            c_out,
            [1, 1, 1],
        );
        stages.push([block1, block2]);
        c_in = c_out;
    }
    Ok(BackboneModel {
        config,
        channel_plan: plan,
        stem,
        stages,
    })
}

impl BackboneModel {
    pub fn feature_dim(&self) -> usize {
        self.channel_plan[4]
    }

    pub fn channel_plan(&self) -> [usize; 5] {
        self.channel_plan
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Parameter)) {
        self.stem.visit(f);
        for stage in &self.stages {
            for block in stage {
                block.visit(f);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut Parameter)) {
        self.stem.visit_mut(f);
        for stage in &mut self.stages {
            for block in stage {
                block.visit_mut(f);
            }
        }
    }

    /// Parameters in stable traversal order (stem, then stages in order,
    /// blocks in order, conv1/conv2/projection, weight before bias).
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |p| out.push(p));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.visit_mut(&mut |p| out.push(p));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), BackboneError> {
        if shape.len() != 4 {
            return Err(BackboneError::NotASequence(format!("{shape:?}")));
        }
        if shape[0] != self.config.in_channels {
            return Err(BackboneError::ChannelMismatch {
                expected: self.config.in_channels,
                got: shape[0],
            });
        }
        if shape[1] < self.config.min_t {
            return Err(BackboneError::SequenceTooShort {
                t: shape[1],
                min_t: self.config.min_t,
            });
        }
        let (h, w) = self.config.input_hw;
        if shape[2] != h || shape[3] != w {
            return Err(BackboneError::SpatialMismatch {
                h,
                w,
                got_h: shape[2],
                got_w: shape[3],
            });
        }
        Ok(())
    }

    /// Runs the backbone on an already-registered input given bound
    /// parameter ids; returns the pooled feature id plus the output id of
    /// the stem and of each stage.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        input: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>), BackboneError> {
        self.check_input(tape.value(input).shape())?;
        assert_eq!(param_ids.len(), self.param_count());
        let mut ids = IdCursor::new(param_ids);
        let mut taps = Vec::with_capacity(5);
        let stem = self.stem.forward(tape, &mut ids, input)?;
        let mut x = tape.leaky_relu(stem, BACKBONE_SLOPE)?;
        taps.push(x);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(tape, &mut ids, x)?;
            }
            taps.push(x);
        }
        let feature = tape.global_avg_pool3d(x)?;
        Ok((feature, taps))
    }

    /// Convenience forward over plain tensors (no gradients).
    pub fn forward(&self, seq: &Tensor) -> Result<Tensor, BackboneError> {
        Ok(self.forward_trace(seq)?.0)
    }

    /// Forward pass that also reports the stem/stage output shapes actually
    /// produced, for checking against [`shape_plan`].
    pub fn forward_trace(&self, seq: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>), BackboneError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = self
            .parameters()
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let input = tape.constant(seq.clone());
        let (feature, taps) = self.forward_on_tape(&mut tape, &ids, input)?;
        let shapes = taps
            .iter()
            .map(|&id| tape.value(id).shape().to_vec())
            .collect();
        Ok((tape.value(feature).clone(), shapes))
    }
}

/// Computes the stem and per-stage output shapes `(C, T, H, W)` for a
/// `t`-frame input without allocating any tensors, using the convolution
/// floor formula with the fixed strides and paddings above.
pub fn shape_plan(
    config: &BackboneConfig,
    t: usize,
) -> Result<Vec<(usize, usize, usize, usize)>, BackboneError> {
    let plan = config.channel_plan()?;
    let dim = |axis: &'static str, input: usize, kernel: usize, stride: usize, padding: usize| {
        conv_out_dim(input, kernel, stride, padding).ok_or(BackboneError::InfeasibleAxis {
            axis,
            input,
            kernel,
            stride,
            padding,
        })
    };
    let (h_in, w_in) = config.input_hw;
    let mut shapes = Vec::with_capacity(5);
    // Stem: 3×7×7, stride 1×2×2, padding 1×3×3.
    let mut t_cur = dim("t", t, 3, 1, 1)?;
    let mut h_cur = dim("h", h_in, 7, 2, 3)?;
    let mut w_cur = dim("w", w_in, 7, 2, 3)?;
    shapes.push((plan[0], t_cur, h_cur, w_cur));
    for (k, &c) in plan.iter().enumerate().skip(1) {
        if k >= 2 {
            // First block of stages 2-4 halves every axis (3×3×3, stride 2,
            // padding 1); everything else preserves sizes.
            t_cur = dim("t", t_cur, 3, 2, 1)?;
            h_cur = dim("h", h_cur, 3, 2, 1)?;
            w_cur = dim("w", w_cur, 3, 2, 1)?;
        }
        shapes.push((c, t_cur, h_cur, w_cur));
    }
    Ok(shapes)
}
