use rayon::prelude::*;

use super::matmul::{mm_nn, mm_nt, mm_tn};
use super::{debug_check_finite, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    c_in_g: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }
    fn cols_rows(&self) -> usize {
        self.c_in_g * self.kh * self.kw
    }
}

/// Unfold one group of one image into `[c_in_g·kh·kw, oh·ow]` columns.
fn im2col(x_plane: &[f64], d: ConvDims, cols: &mut [f64]) {
    let (h, w, s, p) = (d.h, d.w, d.stride, d.padding);
    let ohw = d.oh * d.ow;
    debug_assert_eq!(cols.len(), d.cols_rows() * ohw);
    for cl in 0..d.c_in_g {
        let src = &x_plane[cl * h * w..(cl + 1) * h * w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = &mut cols[((cl * d.kh + kh) * d.kw + kw) * ohw..][..ohw];
                for oh in 0..d.oh {
                    let ih = oh * s + kh;
                    let dst = &mut row[oh * d.ow..][..d.ow];
                    if ih < p || ih - p >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(ih - p) * w..][..w];
                    if s == 1 {
                        // contiguous copy of the valid span, zeros at the rim
                        let shift = kw as isize - p as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).clamp(0, d.ow as isize) as usize;
                        dst[..lo].fill(0.0);
                        if hi > lo {
                            dst[lo..hi]
                                .copy_from_slice(&src_row[(lo as isize + shift) as usize..][..hi - lo]);
                        }
                        dst[hi.max(lo)..].fill(0.0);
                    } else {
                        for (ow, o) in dst.iter_mut().enumerate() {
                            let iw = ow * s + kw;
                            *o = if iw < p || iw - p >= w { 0.0 } else { src_row[iw - p] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `[c_in_g·kh·kw, oh·ow]` columns back onto the input plane.
fn col2im_add(cols: &[f64], d: ConvDims, x_plane: &mut [f64]) {
    let (h, w, s, p) = (d.h, d.w, d.stride, d.padding);
    let ohw = d.oh * d.ow;
    for cl in 0..d.c_in_g {
        let dst = &mut x_plane[cl * h * w..(cl + 1) * h * w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = &cols[((cl * d.kh + kh) * d.kw + kw) * ohw..][..ohw];
                for oh in 0..d.oh {
                    let ih = oh * s + kh;
                    if ih < p || ih - p >= h {
                        continue;
                    }
                    let dst_row = &mut dst[(ih - p) * w..][..w];
                    let src_row = &row[oh * d.ow..][..d.ow];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = ow * s + kw;
                        if iw >= p && iw - p < w {
                            dst_row[iw - p] += v;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], d: ConvDims, out: &mut [f64]) {
    let body = |idx: usize, o_plane: &mut [f64]| {
        let c = idx % d.c_out;
        let x_plane = &x[idx * d.h * d.w..][..d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let wv = w[(c * d.kh + kh) * d.kw + kw];
                if wv == 0.0 {
                    continue;
                }
                for oh in 0..d.oh {
                    let ih = oh * d.stride + kh;
                    if ih < d.padding || ih - d.padding >= d.h {
                        continue;
                    }
                    let x_row = &x_plane[(ih - d.padding) * d.w..][..d.w];
                    let o_row = &mut o_plane[oh * d.ow..][..d.ow];
                    if d.stride == 1 {
                        let shift = kw as isize - d.padding as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (d.w as isize - shift).clamp(0, d.ow as isize) as usize;
                        for ow in lo..hi {
                            o_row[ow] += wv * x_row[(ow as isize + shift) as usize];
                        }
                    } else {
                        for ow in 0..d.ow {
                            let iw = ow * d.stride + kw;
                            if iw >= d.padding && iw - d.padding < d.w {
                                o_row[ow] += wv * x_row[iw - d.padding];
                            }
                        }
                    }
                }
            }
        }
    };
    out.par_chunks_mut(d.oh * d.ow)
        .with_min_len(d.batch.max(1))
        .enumerate()
        .for_each(|(i, p)| body(i, p));
}

fn depthwise_backward_input(g: &[f64], w: &[f64], d: ConvDims, dx: &mut [f64]) {
    let body = |idx: usize, dx_plane: &mut [f64]| {
        let c = idx % d.c_in;
        let g_plane = &g[idx * d.oh * d.ow..][..d.oh * d.ow];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let wv = w[(c * d.kh + kh) * d.kw + kw];
                if wv == 0.0 {
                    continue;
                }
                for oh in 0..d.oh {
                    let ih = oh * d.stride + kh;
                    if ih < d.padding || ih - d.padding >= d.h {
                        continue;
                    }
                    let dx_row = &mut dx_plane[(ih - d.padding) * d.w..][..d.w];
                    let g_row = &g_plane[oh * d.ow..][..d.ow];
                    for ow in 0..d.ow {
                        let iw = ow * d.stride + kw;
                        if iw >= d.padding && iw - d.padding < d.w {
                            dx_row[iw - d.padding] += wv * g_row[ow];
                        }
                    }
                }
            }
        }
    };
    dx.par_chunks_mut(d.h * d.w)
        .with_min_len(d.batch.max(1))
        .enumerate()
        .for_each(|(i, p)| body(i, p));
}

fn depthwise_backward_weight(x: &[f64], g: &[f64], d: ConvDims, dw: &mut [f64]) {
    for c in 0..d.c_out {
        for b in 0..d.batch {
            let x_plane = &x[(b * d.c_in + c) * d.h * d.w..][..d.h * d.w];
            let g_plane = &g[(b * d.c_out + c) * d.oh * d.ow..][..d.oh * d.ow];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let mut acc = 0.0;
                    for oh in 0..d.oh {
                        let ih = oh * d.stride + kh;
                        if ih < d.padding || ih - d.padding >= d.h {
                            continue;
                        }
                        let x_row = &x_plane[(ih - d.padding) * d.w..][..d.w];
                        let g_row = &g_plane[oh * d.ow..][..d.ow];
                        for ow in 0..d.ow {
                            let iw = ow * d.stride + kw;
                            if iw >= d.padding && iw - d.padding < d.w {
                                acc += g_row[ow] * x_row[iw - d.padding];
                            }
                        }
                    }
                    dw[(c * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
}

/// The general path: per image and group, unfold and multiply.
const CONV_PAR_MACS: usize = 2_000_000;

fn conv_forward(x: &[f64], w: &[f64], d: ConvDims, out: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let hw = d.h * d.w;
    let macs = d.batch * d.c_out * ohw * d.cols_rows();
    if d.is_pointwise() {
        // y[b] = W[c_out × c_in] · x[b][c_in × hw]
        let body = |b: usize, o: &mut [f64]| {
            mm_nn(w, &x[b * d.c_in * hw..][..d.c_in * hw], d.c_out, d.c_in, hw, o)
        };
        if macs >= CONV_PAR_MACS && d.batch > 1 {
            out.par_chunks_mut(d.c_out * hw)
                .with_min_len(1)
                .enumerate()
                .for_each(|(b, o)| body(b, o));
        } else {
            for (b, o) in out.chunks_mut(d.c_out * hw).enumerate() {
                body(b, o);
            }
        }
        return;
    }
    if d.is_depthwise() {
        depthwise_forward(x, w, d, out);
        return;
    }
    let cog = d.c_out / d.groups;
    let rows = d.cols_rows();
    let body = |b: usize, o: &mut [f64]| {
        let mut cols = vec![0.0; rows * ohw];
        for g in 0..d.groups {
            im2col(&x[(b * d.c_in + g * d.c_in_g) * hw..][..d.c_in_g * hw], d, &mut cols);
            mm_nn(
                &w[g * cog * rows..][..cog * rows],
                &cols,
                cog,
                rows,
                ohw,
                &mut o[g * cog * ohw..][..cog * ohw],
            );
        }
    };
    if macs >= CONV_PAR_MACS && d.batch > 1 {
        out.par_chunks_mut(d.c_out * ohw)
            .with_min_len(1)
            .enumerate()
            .for_each(|(b, o)| body(b, o));
    } else {
        for (b, o) in out.chunks_mut(d.c_out * ohw).enumerate() {
            body(b, o);
        }
    }
}

fn conv_backward_input(g: &[f64], w: &[f64], d: ConvDims, dx: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let hw = d.h * d.w;
    let macs = d.batch * d.c_out * ohw * d.cols_rows();
    if d.is_pointwise() {
        let body = |b: usize, p: &mut [f64]| {
            mm_tn(w, &g[b * d.c_out * hw..][..d.c_out * hw], d.c_out, d.c_in, hw, p)
        };
        if macs >= CONV_PAR_MACS && d.batch > 1 {
            dx.par_chunks_mut(d.c_in * hw)
                .with_min_len(1)
                .enumerate()
                .for_each(|(b, p)| body(b, p));
        } else {
            for (b, p) in dx.chunks_mut(d.c_in * hw).enumerate() {
                body(b, p);
            }
        }
        return;
    }
    if d.is_depthwise() {
        depthwise_backward_input(g, w, d, dx);
        return;
    }
    let cog = d.c_out / d.groups;
    let rows = d.cols_rows();
    let body = |b: usize, p: &mut [f64]| {
        let mut dcols = vec![0.0; rows * ohw];
        for gi in 0..d.groups {
            dcols.fill(0.0);
            mm_tn(
                &w[gi * cog * rows..][..cog * rows],
                &g[(b * d.c_out + gi * cog) * ohw..][..cog * ohw],
                cog,
                rows,
                ohw,
                &mut dcols,
            );
            col2im_add(&dcols, d, &mut p[gi * d.c_in_g * hw..][..d.c_in_g * hw]);
        }
    };
    if macs >= CONV_PAR_MACS && d.batch > 1 {
        dx.par_chunks_mut(d.c_in * hw)
            .with_min_len(1)
            .enumerate()
            .for_each(|(b, p)| body(b, p));
    } else {
        for (b, p) in dx.chunks_mut(d.c_in * hw).enumerate() {
            body(b, p);
        }
    }
}

fn conv_backward_weight(x: &[f64], g: &[f64], d: ConvDims, dw: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let hw = d.h * d.w;
    if d.is_pointwise() {
        // dW += Σ_b g[b][c_out × hw] · x[b][c_in × hw]ᵀ; fixed batch order
        for b in 0..d.batch {
            mm_nt(
                &g[b * d.c_out * hw..][..d.c_out * hw],
                &x[b * d.c_in * hw..][..d.c_in * hw],
                d.c_out,
                hw,
                d.c_in,
                dw,
            );
        }
        return;
    }
    if d.is_depthwise() {
        depthwise_backward_weight(x, g, d, dw);
        return;
    }
    let cog = d.c_out / d.groups;
    let rows = d.cols_rows();
    let mut cols = vec![0.0; rows * ohw];
    for b in 0..d.batch {
        for gi in 0..d.groups {
            im2col(&x[(b * d.c_in + gi * d.c_in_g) * hw..][..d.c_in_g * hw], d, &mut cols);
            mm_nt(
                &g[(b * d.c_out + gi * cog) * ohw..][..cog * ohw],
                &cols,
                cog,
                ohw,
                rows,
                &mut dw[gi * cog * rows..][..cog * rows],
            );
        }
    }
}

/// 2D convolution over `[B, C_in, H, W]` with kernel
/// `[C_out, C_in/groups, kh, kw]`, optional `[C_out]` bias.
///
/// Output spatial size is `floor((len + 2*padding - k) / stride) + 1`.
/// The depth-wise case is `groups == C_in == C_out`.
pub fn conv2d(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    let (batch, c_in, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, c_in_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_in_g {
        return Err(Error::Config(format!(
            "conv2d: invalid groups={groups} for c_in={c_in}, c_out={c_out}, kernel expects c_in/groups={c_in_g}"
        )));
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(Error::Config(format!(
            "conv2d: stride ({stride}) and kernel ({kh}x{kw}) must be >= 1"
        )));
    }
    if h + 2 * padding < kh || win + 2 * padding < kw {
        return Err(Error::invalid(
            "conv2d",
            x.shape(),
            format!("kernel {kh}x{kw} larger than padded input"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape("conv2d(bias)", b.shape(), w.shape()));
        }
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (win + 2 * padding - kw) / stride + 1;
    let d = ConvDims {
        batch,
        c_in,
        h,
        w: win,
        c_out,
        c_in_g,
        kh,
        kw,
        stride,
        padding,
        groups,
        oh,
        ow,
    };

    let mut data = vec![0.0; batch * c_out * oh * ow];
    conv_forward(x.data(), w.data(), d, &mut data);
    if let Some(b) = bias {
        for (plane, idx) in data.chunks_mut(oh * ow).zip(0..) {
            let bv = b.data()[idx % c_out];
            for v in plane.iter_mut() {
                *v += bv;
            }
        }
    }
    debug_check_finite("conv2d", &data);
    let macs = (batch * c_out * oh * ow * c_in_g * kh * kw) as u64;
    tape.add_flops(2 * macs + if bias.is_some() { (batch * c_out * oh * ow) as u64 } else { 0 });

    let out = Tensor::leaf(data, vec![batch, c_out, oh, ow], false);
    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    let inputs: Vec<&Tensor> = match bias {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    tape.record(
        &out,
        &inputs,
        Box::new(move |g, sink| {
            let mut dx = vec![0.0; xc.len()];
            conv_backward_input(g, wc.data(), d, &mut dx);
            sink(0, dx);
            let mut dw = vec![0.0; wc.len()];
            conv_backward_weight(xc.data(), g, d, &mut dw);
            sink(1, dw);
            if has_bias {
                let mut db = vec![0.0; d.c_out];
                for (plane, idx) in g.chunks(d.oh * d.ow).zip(0..) {
                    db[idx % d.c_out] += plane.iter().sum::<f64>();
                }
                sink(2, db);
            }
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    /// Six-nested-loop reference convolution.
    pub(crate) fn conv_oracle(
        x: &[f64],
        w: &[f64],
        (b_, ci, h, wi): (usize, usize, usize, usize),
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Vec<f64> {
        let cig = ci / groups;
        let cog = co / groups;
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wi + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; b_ * co * oh * ow];
        for b in 0..b_ {
            for o in 0..co {
                let g = o / cog;
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for cl in 0..cig {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - padding as isize;
                                    let ix = (xo * stride + dx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                        continue;
                                    }
                                    let c = g * cig + cl;
                                    acc += x[((b * ci + c) * h + iy as usize) * wi + ix as usize]
                                        * w[((o * cig + cl) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out[((b * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let tape = Tape::new();
        let x = Tensor::new((0..2 * 3 * 4 * 4).map(|v| v as f64 * 0.1).collect(), &[2, 3, 4, 4])
            .unwrap();
        // identity weights: w[o][i] = 1 iff o == i
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let y = conv2d(&tape, &x, &Tensor::new(w, &[3, 3, 1, 1]).unwrap(), None, 1, 0, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_three_by_three_sums_to_nine() {
        let tape = Tape::new();
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&tape, &x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn random_conv_matches_nested_loop_oracle() {
        let mut rng = CounterRng::new(21);
        for &(stride, padding, groups) in &[(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 1, 4), (1, 2, 1), (3, 1, 1)] {
            let tape = Tape::new();
            let (b, ci, h, wi) = (2, 4, 9, 9);
            let (co, kh, kw) = (4, 3, 3);
            let x: Vec<f64> = (0..b * ci * h * wi).map(|_| rng.range(-1.0, 1.0)).collect();
            let w: Vec<f64> = (0..co * (ci / groups) * kh * kw)
                .map(|_| rng.range(-1.0, 1.0))
                .collect();
            let want = conv_oracle(&x, &w, (b, ci, h, wi), (co, kh, kw), stride, padding, groups);
            let got = conv2d(
                &tape,
                &Tensor::new(x, &[b, ci, h, wi]).unwrap(),
                &Tensor::new(w, &[co, ci / groups, kh, kw]).unwrap(),
                None,
                stride,
                padding,
                groups,
            )
            .unwrap();
            assert_eq!(got.data().len(), want.len());
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride={stride} pad={padding} g={groups}");
            }
        }
    }

    #[test]
    fn depthwise_identity_center_kernel() {
        let tape = Tape::new();
        let c = 3;
        let x = Tensor::new((0..c * 25).map(|v| (v as f64).sin()).collect(), &[1, c, 5, 5]).unwrap();
        let mut w = vec![0.0; c * 9];
        for ch in 0..c {
            w[ch * 9 + 4] = 1.0; // center tap
        }
        let y = conv2d(&tape, &x, &Tensor::new(w, &[c, 1, 3, 3]).unwrap(), None, 1, 1, c).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn invalid_group_count_is_config_error() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[4, 1, 3, 3]);
        assert!(matches!(
            conv2d(&tape, &x, &w, None, 1, 1, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn strided_output_size_follows_floor_formula() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 7, 7]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv2d(&tape, &x, &w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn grouped_and_depthwise_gradients_match_finite_differences() {
        use crate::tensor::gradcheck;
        let mut rng = CounterRng::new(22);
        for &(stride, padding, groups, ci, co) in
            &[(1usize, 1usize, 2usize, 4usize, 4usize), (2, 1, 4, 4, 4), (1, 0, 1, 2, 3)]
        {
            let n = 2 * ci * 5 * 5;
            let x = Tensor::new((0..n).map(|_| rng.range(-1.0, 1.0)).collect(), &[2, ci, 5, 5]).unwrap();
            let wn = co * (ci / groups) * 9;
            let w = Tensor::new((0..wn).map(|_| rng.range(-1.0, 1.0)).collect(), &[co, ci / groups, 3, 3])
                .unwrap();
            let oh = (5 + 2 * padding - 3) / stride + 1;
            let probe = Tensor::new(
                (0..2 * co * oh * oh).map(|_| rng.range(-1.0, 1.0)).collect(),
                &[2, co, oh, oh],
            )
            .unwrap();
            let report = gradcheck::check_fn(&[x, w], gradcheck::DEFAULT_EPS, &|t, ins| {
                let y = conv2d(t, &ins[0], &ins[1], None, stride, padding, groups)?;
                Ok(super::super::sum_all(t, &super::super::mul(t, &y, &probe)?))
            })
            .unwrap();
            assert!(report.passes(1e-4), "g={groups} err {}", report.max_rel_err);
        }
    }
}
