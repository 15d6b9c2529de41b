//! Direct 3-D cross-correlation: forward pass and both backward passes,
//! plus the output-size arithmetic shared with the shape planner.
//!
//! Layout conventions: input `C_in×T×H×W`, kernel `C_out×C_in×kT×kH×kW`,
//! output `C_out×T'×H'×W'`, all row-major. The innermost loops run along W:
//! with unit W-stride each kernel tap is a contiguous axpy/dot over the
//! row; with a strided W the rows are regrouped once per call by index
//! residue so the taps stay contiguous.

use crate::linalg::{axpy, dot};
use crate::tape::AutodiffError;
use crate::tensor::fmt_shape;

/// `floor((in + 2*pad - k)/stride) + 1`, or None when that is not positive.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Validated geometry of one conv3d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub t_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub t_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self, AutodiffError> {
        if input_shape.len() != 4 || kernel_shape.len() != 5 || kernel_shape[1] != input_shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3d",
                lhs: fmt_shape(input_shape),
                rhs: fmt_shape(kernel_shape),
            });
        }
        assert!(
            stride.iter().all(|&s| s >= 1),
            "conv3d stride components must be >= 1"
        );
        let (t_in, h_in, w_in) = (input_shape[1], input_shape[2], input_shape[3]);
        let (kt, kh, kw) = (kernel_shape[2], kernel_shape[3], kernel_shape[4]);
        let axes = [
            ("t", t_in, kt, stride[0], padding[0]),
            ("h", h_in, kh, stride[1], padding[1]),
            ("w", w_in, kw, stride[2], padding[2]),
        ];
        let mut out = [0usize; 3];
        for (i, (axis, dim, k, s, p)) in axes.into_iter().enumerate() {
            out[i] = conv_out_dim(dim, k, s, p).ok_or(AutodiffError::NonPositiveConvDim {
                axis,
                input: dim,
                kernel: k,
                stride: s,
                padding: p,
            })?;
        }
        Ok(ConvGeometry {
            c_in: input_shape[0],
            t_in,
            h_in,
            w_in,
            c_out: kernel_shape[0],
            kt,
            kh,
            kw,
            stride,
            padding,
            t_out: out[0],
            h_out: out[1],
            w_out: out[2],
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.t_out, self.h_out, self.w_out]
    }

    fn output_numel(&self) -> usize {
        self.c_out * self.t_out * self.h_out * self.w_out
    }

    fn input_numel(&self) -> usize {
        self.c_in * self.t_in * self.h_in * self.w_in
    }

    /// Valid output range `[lo, hi)` along W for kernel tap `kw`, i.e. the
    /// `ow` for which `iw = ow*sw + kw - pw` lands inside the input row,
    /// plus that tap's shift `kw - pw`.
    #[inline]
    fn w_range(&self, kw: usize) -> (usize, usize, isize) {
        let sw = self.stride[2];
        let shift = kw as isize - self.padding[2] as isize;
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) as usize).div_ceil(sw)
        };
        let hi_num = self.w_in as isize - 1 - shift;
        if hi_num < 0 {
            return (1, 0, shift); // empty
        }
        let hi = (hi_num as usize / sw + 1).min(self.w_out);
        (lo, hi, shift)
    }
}

/// Residue-class regrouping of W rows for strided kernels: element `iw` of
/// a row moves to class `iw % sw`, position `iw / sw`, classes stored
/// back-to-back. Consecutive outputs of one tap then read consecutive
/// entries of one class.
struct WClasses {
    sw: usize,
    w: usize,
    /// Start offset of each class within a row; `starts[sw] == w`.
    starts: Vec<usize>,
}

impl WClasses {
    fn new(w: usize, sw: usize) -> Self {
        let mut starts = Vec::with_capacity(sw + 1);
        let mut acc = 0;
        for r in 0..sw {
            starts.push(acc);
            acc += if r < w { (w - r).div_ceil(sw) } else { 0 };
        }
        starts.push(acc);
        debug_assert_eq!(acc, w);
        WClasses { sw, w, starts }
    }

    /// Class slice offset for the first input index `iw0` of a tap.
    #[inline]
    fn offset(&self, iw0: usize) -> usize {
        self.starts[iw0 % self.sw] + iw0 / self.sw
    }

    fn regroup(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len() % self.w, 0);
        for (srow, drow) in src.chunks_exact(self.w).zip(dst.chunks_exact_mut(self.w)) {
            for r in 0..self.sw {
                let out = &mut drow[self.starts[r]..self.starts[r + 1]];
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = srow[r + j * self.sw];
                }
            }
        }
    }

    fn scatter_back(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len() % self.w, 0);
        for (srow, drow) in src.chunks_exact(self.w).zip(dst.chunks_exact_mut(self.w)) {
            for r in 0..self.sw {
                let grouped = &srow[self.starts[r]..self.starts[r + 1]];
                for (j, &v) in grouped.iter().enumerate() {
                    drow[r + j * self.sw] = v;
                }
            }
        }
    }
}

/// Shared loop skeleton: calls `body(orow_start, irow_d_start, krow_start)`
/// for every (oc, ot, oh, ic, valid kt, valid kh) combination.
#[inline]
fn for_each_row_pair(g: &ConvGeometry, mut body: impl FnMut(usize, usize, usize)) {
    let k_chan = g.kt * g.kh * g.kw;
    for oc in 0..g.c_out {
        for ot in 0..g.t_out {
            for oh in 0..g.h_out {
                let o_start = ((oc * g.t_out + ot) * g.h_out + oh) * g.w_out;
                for ic in 0..g.c_in {
                    let k_base = (oc * g.c_in + ic) * k_chan;
                    for kt in 0..g.kt {
                        let it = (ot * g.stride[0] + kt) as isize - g.padding[0] as isize;
                        if it < 0 || it >= g.t_in as isize {
                            continue;
                        }
                        for kh in 0..g.kh {
                            let ih = (oh * g.stride[1] + kh) as isize - g.padding[1] as isize;
                            if ih < 0 || ih >= g.h_in as isize {
                                continue;
                            }
                            let i_start = ((ic * g.t_in + it as usize) * g.h_in + ih as usize)
                                * g.w_in;
                            let k_start = k_base + (kt * g.kh + kh) * g.kw;
                            body(o_start, i_start, k_start);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.output_numel()];
    let sw = g.stride[2];
    if sw == 1 {
        for_each_row_pair(g, |o_start, i_start, k_start| {
            let orow = &mut out[o_start..o_start + g.w_out];
            let irow = &input[i_start..i_start + g.w_in];
            for (kw, &wgt) in kernel[k_start..k_start + g.kw].iter().enumerate() {
                let (lo, hi, shift) = g.w_range(kw);
                if lo < hi {
                    let ibase = (lo as isize + shift) as usize;
                    axpy(wgt, &irow[ibase..ibase + (hi - lo)], &mut orow[lo..hi]);
                }
            }
        });
    } else {
        let classes = WClasses::new(g.w_in, sw);
        let mut grouped = vec![0.0; g.input_numel()];
        classes.regroup(input, &mut grouped);
        for_each_row_pair(g, |o_start, i_start, k_start| {
            let orow = &mut out[o_start..o_start + g.w_out];
            let irow = &grouped[i_start..i_start + g.w_in];
            for (kw, &wgt) in kernel[k_start..k_start + g.kw].iter().enumerate() {
                let (lo, hi, shift) = g.w_range(kw);
                if lo < hi {
                    let iw0 = (lo as isize * sw as isize + shift) as usize;
                    let start = classes.offset(iw0);
                    axpy(wgt, &irow[start..start + (hi - lo)], &mut orow[lo..hi]);
                }
            }
        });
    }
    out
}

/// Gradient with respect to the input: scatters `grad_out` back through the taps.
pub fn conv3d_backward_input(g: &ConvGeometry, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let sw = g.stride[2];
    if sw == 1 {
        let mut grad_in = vec![0.0; g.input_numel()];
        for_each_row_pair(g, |o_start, i_start, k_start| {
            let orow = &grad_out[o_start..o_start + g.w_out];
            let irow = &mut grad_in[i_start..i_start + g.w_in];
            for (kw, &wgt) in kernel[k_start..k_start + g.kw].iter().enumerate() {
                let (lo, hi, shift) = g.w_range(kw);
                if lo < hi {
                    let ibase = (lo as isize + shift) as usize;
                    axpy(wgt, &orow[lo..hi], &mut irow[ibase..ibase + (hi - lo)]);
                }
            }
        });
        grad_in
    } else {
        let classes = WClasses::new(g.w_in, sw);
        let mut grouped = vec![0.0; g.input_numel()];
        for_each_row_pair(g, |o_start, i_start, k_start| {
            let orow = &grad_out[o_start..o_start + g.w_out];
            let irow = &mut grouped[i_start..i_start + g.w_in];
            for (kw, &wgt) in kernel[k_start..k_start + g.kw].iter().enumerate() {
                let (lo, hi, shift) = g.w_range(kw);
                if lo < hi {
                    let iw0 = (lo as isize * sw as isize + shift) as usize;
                    let start = classes.offset(iw0);
                    axpy(wgt, &orow[lo..hi], &mut irow[start..start + (hi - lo)]);
                }
            }
        });
        let mut grad_in = vec![0.0; g.input_numel()];
        classes.scatter_back(&grouped, &mut grad_in);
        grad_in
    }
}

/// Gradient with respect to the kernel.
pub fn conv3d_backward_kernel(g: &ConvGeometry, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let mut grad_k = vec![0.0; g.c_out * g.c_in * g.kt * g.kh * g.kw];
    let sw = g.stride[2];
    if sw == 1 {
        for_each_row_pair(g, |o_start, i_start, k_start| {
            let orow = &grad_out[o_start..o_start + g.w_out];
            let irow = &input[i_start..i_start + g.w_in];
            let krow = &mut grad_k[k_start..k_start + g.kw];
            for (kw, kslot) in krow.iter_mut().enumerate() {
                let (lo, hi, shift) = g.w_range(kw);
                if lo < hi {
                    let ibase = (lo as isize + shift) as usize;
                    *kslot += dot(&orow[lo..hi], &irow[ibase..ibase + (hi - lo)]);
                }
            }
        });
    } else {
        let classes = WClasses::new(g.w_in, sw);
        let mut grouped = vec![0.0; g.input_numel()];
        classes.regroup(input, &mut grouped);
        for_each_row_pair(g, |o_start, i_start, k_start| {
            let orow = &grad_out[o_start..o_start + g.w_out];
            let irow = &grouped[i_start..i_start + g.w_in];
            let krow = &mut grad_k[k_start..k_start + g.kw];
            for (kw, kslot) in krow.iter_mut().enumerate() {
                let (lo, hi, shift) = g.w_range(kw);
                if lo < hi {
                    let iw0 = (lo as isize * sw as isize + shift) as usize;
                    let start = classes.offset(iw0);
                    *kslot += dot(&orow[lo..hi], &irow[start..start + (hi - lo)]);
                }
            }
        });
    }
    grad_k
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal six-nested-loop reference, independent of the production path.
    fn conv3d_reference(
        input: &[f64],
        kernel: &[f64],
        (c_in, t_in, h_in, w_in): (usize, usize, usize, usize),
        (c_out, kt, kh, kw): (usize, usize, usize, usize),
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let t_out = (t_in + 2 * padding[0] - kt) / stride[0] + 1;
        let h_out = (h_in + 2 * padding[1] - kh) / stride[1] + 1;
        let w_out = (w_in + 2 * padding[2] - kw) / stride[2] + 1;
        let mut out = vec![0.0; c_out * t_out * h_out * w_out];
        for oc in 0..c_out {
            for ot in 0..t_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0;
                        for ic in 0..c_in {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it =
                                            (ot * stride[0] + dt) as isize - padding[0] as isize;
                                        let ih =
                                            (oh * stride[1] + dh) as isize - padding[1] as isize;
                                        let iw =
                                            (ow * stride[2] + dw) as isize - padding[2] as isize;
                                        if it < 0
                                            || ih < 0
                                            || iw < 0
                                            || it >= t_in as isize
                                            || ih >= h_in as isize
                                            || iw >= w_in as isize
                                        {
                                            continue;
                                        }
                                        let iv = input[((ic * t_in + it as usize) * h_in
                                            + ih as usize)
                                            * w_in
                                            + iw as usize];
                                        let kv = kernel[(((oc * c_in + ic) * kt + dt) * kh + dh)
                                            * kw
                                            + dw];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        out[((oc * t_out + ot) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        (out, (t_out, h_out, w_out))
    }

    fn geometry(
        ins: (usize, usize, usize, usize),
        ks: (usize, usize, usize, usize),
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> ConvGeometry {
        ConvGeometry::resolve(
            &[ins.0, ins.1, ins.2, ins.3],
            &[ks.0, ins.0, ks.1, ks.2, ks.3],
            stride,
            padding,
        )
        .unwrap()
    }

    #[test]
    fn all_ones_counts_kernel_volume() {
        // 1x4x4x4 ones through a 1x1x3x3x3 ones kernel: every output is 27.
        let g = geometry((1, 4, 4, 4), (1, 3, 3, 3), [1, 1, 1], [0, 0, 0]);
        assert_eq!(g.output_shape(), vec![1, 2, 2, 2]);
        let out = conv3d_forward(&g, &vec![1.0; 64], &vec![1.0; 27]);
        assert!(out.iter().all(|&v| v == 27.0));
    }

    #[test]
    fn stem_shape_matches_backbone_table() {
        // 3x8x112x112 through 64x3x3x7x7, stride (1,2,2), padding (1,3,3).
        let g = ConvGeometry::resolve(&[3, 8, 112, 112], &[64, 3, 3, 7, 7], [1, 2, 2], [1, 3, 3])
            .unwrap();
        assert_eq!(g.output_shape(), vec![64, 8, 56, 56]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let err = ConvGeometry::resolve(&[3, 4, 4, 4], &[2, 4, 1, 1, 1], [1, 1, 1], [0, 0, 0])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4, 4, 4]") && msg.contains("[2, 4, 1, 1, 1]"), "{msg}");
    }

    #[test]
    fn non_positive_output_names_the_axis() {
        let err = ConvGeometry::resolve(&[1, 2, 8, 8], &[1, 1, 5, 3, 3], [1, 1, 1], [0, 1, 1])
            .unwrap_err();
        match err {
            AutodiffError::NonPositiveConvDim { axis, .. } => assert_eq!(axis, "t"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn pseudo_random(n: usize, mut state: u64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    fn case_list() -> Vec<((usize, usize, usize, usize), (usize, usize, usize, usize), [usize; 3], [usize; 3])>
    {
        vec![
            ((1, 2, 3, 3), (1, 2, 2, 2), [1, 1, 1], [0, 0, 0]),
            ((2, 3, 4, 5), (3, 2, 3, 3), [1, 1, 1], [1, 1, 1]),
            ((2, 4, 6, 6), (2, 3, 3, 3), [2, 2, 2], [1, 1, 1]),
            ((1, 5, 5, 7), (2, 3, 1, 4), [1, 2, 3], [1, 0, 2]),
            ((3, 2, 4, 4), (1, 1, 2, 2), [1, 2, 1], [0, 1, 0]),
            ((1, 8, 10, 11), (2, 3, 7, 7), [1, 2, 2], [1, 3, 3]),
            ((2, 2, 5, 9), (1, 1, 3, 5), [1, 1, 4], [0, 1, 2]),
        ]
    }

    #[test]
    fn forward_matches_reference_on_varied_cases() {
        for (seed, (ins, ks, stride, padding)) in case_list().into_iter().enumerate() {
            let g = geometry(ins, ks, stride, padding);
            let input = pseudo_random(ins.0 * ins.1 * ins.2 * ins.3, 0x9e37 + seed as u64);
            let kernel = pseudo_random(ks.0 * ins.0 * ks.1 * ks.2 * ks.3, 0x1234 + seed as u64);
            let got = conv3d_forward(&g, &input, &kernel);
            let (want, dims) = conv3d_reference(&input, &kernel, ins, ks, stride, padding);
            assert_eq!((g.t_out, g.h_out, g.w_out), dims);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} in case {seed}");
            }
        }
    }

    #[test]
    fn backward_input_matches_transposed_reference() {
        // dX[i] = sum over outputs of dY * K taps; check against a literal
        // loop built directly from the forward definition.
        for (seed, (ins, ks, stride, padding)) in case_list().into_iter().enumerate() {
            let g = geometry(ins, ks, stride, padding);
            let n_out = g.output_numel();
            let kernel = pseudo_random(ks.0 * ins.0 * ks.1 * ks.2 * ks.3, 7 + seed as u64);
            let grad_out = pseudo_random(n_out, 99 + seed as u64);
            let got = conv3d_backward_input(&g, &grad_out, &kernel);
            // Reference: accumulate per output position.
            let mut want = vec![0.0; g.input_numel()];
            let (c_in, t_in, h_in, w_in) = ins;
            let (c_out, kt, kh, kw) = ks;
            for oc in 0..c_out {
                for ot in 0..g.t_out {
                    for oh in 0..g.h_out {
                        for ow in 0..g.w_out {
                            let gval = grad_out
                                [((oc * g.t_out + ot) * g.h_out + oh) * g.w_out + ow];
                            for ic in 0..c_in {
                                for dt in 0..kt {
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            let it = (ot * stride[0] + dt) as isize
                                                - padding[0] as isize;
                                            let ih = (oh * stride[1] + dh) as isize
                                                - padding[1] as isize;
                                            let iw = (ow * stride[2] + dw) as isize
                                                - padding[2] as isize;
                                            if it < 0
                                                || ih < 0
                                                || iw < 0
                                                || it >= t_in as isize
                                                || ih >= h_in as isize
                                                || iw >= w_in as isize
                                            {
                                                continue;
                                            }
                                            want[((ic * t_in + it as usize) * h_in
                                                + ih as usize)
                                                * w_in
                                                + iw as usize] += gval
                                                * kernel[(((oc * c_in + ic) * kt + dt) * kh
                                                    + dh)
                                                    * kw
                                                    + dw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_kernel_matches_reference() {
        for (seed, (ins, ks, stride, padding)) in case_list().into_iter().enumerate() {
            let g = geometry(ins, ks, stride, padding);
            let input = pseudo_random(ins.0 * ins.1 * ins.2 * ins.3, 3 + seed as u64);
            let grad_out = pseudo_random(g.output_numel(), 5 + seed as u64);
            let got = conv3d_backward_kernel(&g, &grad_out, &input);
            let mut want = vec![0.0; ks.0 * ins.0 * ks.1 * ks.2 * ks.3];
            let (c_in, t_in, h_in, w_in) = ins;
            let (c_out, kt, kh, kw) = ks;
            for oc in 0..c_out {
                for ot in 0..g.t_out {
                    for oh in 0..g.h_out {
                        for ow in 0..g.w_out {
                            let gval = grad_out
                                [((oc * g.t_out + ot) * g.h_out + oh) * g.w_out + ow];
                            for ic in 0..c_in {
                                for dt in 0..kt {
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            let it = (ot * stride[0] + dt) as isize
                                                - padding[0] as isize;
                                            let ih = (oh * stride[1] + dh) as isize
                                                - padding[1] as isize;
                                            let iw = (ow * stride[2] + dw) as isize
                                                - padding[2] as isize;
                                            if it < 0
                                                || ih < 0
                                                || iw < 0
                                                || it >= t_in as isize
                                                || ih >= h_in as isize
                                                || iw >= w_in as isize
                                            {
                                                continue;
                                            }
                                            want[(((oc * c_in + ic) * kt + dt) * kh + dh) * kw
                                                + dw] += gval
                                                * input[((ic * t_in + it as usize) * h_in
                                                    + ih as usize)
                                                    * w_in
                                                    + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn out_dim_floor_formula() {
        assert_eq!(conv_out_dim(112, 7, 2, 3), Some(56));
        assert_eq!(conv_out_dim(9, 3, 2, 1), Some(5));
        assert_eq!(conv_out_dim(1, 3, 2, 1), Some(1));
        assert_eq!(conv_out_dim(2, 5, 1, 1), None);
    }

    #[test]
    fn regroup_and_scatter_are_inverses() {
        for (w, sw) in [(7, 2), (8, 2), (11, 3), (5, 4), (6, 6)] {
            let classes = WClasses::new(w, sw);
            let src: Vec<f64> = (0..2 * w).map(|i| i as f64).collect();
            let mut grouped = vec![0.0; src.len()];
            classes.regroup(&src, &mut grouped);
            let mut back = vec![0.0; src.len()];
            classes.scatter_back(&grouped, &mut back);
            assert_eq!(src, back, "w={w} sw={sw}");
        }
    }
}
