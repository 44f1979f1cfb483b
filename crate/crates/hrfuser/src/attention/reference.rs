//! Scalar-loop reference evaluators for the fusion math.
//!
//! These re-derive the window attention from plain f64 loops — their own
//! layer norm, their own exp/sum softmax, their own matrix products — and
//! share no code with the tensor ops. The oracle checks in the test suites
//! and the `oracle-check` CLI command compare the production paths against
//! these.

use super::mwca::{AttnProjWeights, FusionVariant, MwcaBlock};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plain-vector copy of one projection set.
pub struct RawProj {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bq: Option<Vec<f64>>,
    pub bk: Option<Vec<f64>>,
    pub bv: Option<Vec<f64>>,
    pub bo: Option<Vec<f64>>,
    pub d: usize,
    pub heads: usize,
}

impl From<&AttnProjWeights> for RawProj {
    fn from(w: &AttnProjWeights) -> Self {
        let grab = |p: &Option<crate::nn::Param>| p.as_ref().map(|p| p.get().data().to_vec());
        RawProj {
            wq: w.wq.get().data().to_vec(),
            wk: w.wk.get().data().to_vec(),
            wv: w.wv.get().data().to_vec(),
            wo: w.wo.get().data().to_vec(),
            bq: grab(&w.bq),
            bk: grab(&w.bk),
            bv: grab(&w.bv),
            bo: grab(&w.bo),
            d: w.channels,
            heads: w.heads,
        }
    }
}

/// Project `x[t, :]` by the block-column slice of `w` belonging to `head`.
fn project_head(
    x: &[f64],
    t: usize,
    d: usize,
    dh: usize,
    head: usize,
    w: &[f64],
    b: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; t * dh];
    for ti in 0..t {
        for j in 0..dh {
            let col = head * dh + j;
            let mut acc = b.map_or(0.0, |b| b[col]);
            for e in 0..d {
                acc += x[ti * d + e] * w[e * d + col];
            }
            out[ti * dh + j] = acc;
        }
    }
    out
}

/// One attention head on one window, evaluated with explicit loops.
/// `x` and `y` are `[T × D]` row-major; output is `[T × D/H]`.
pub fn head(x: &[f64], y: &[f64], t: usize, proj: &RawProj, head_idx: usize) -> Vec<f64> {
    let d = proj.d;
    let dh = d / proj.heads;
    let q = project_head(x, t, d, dh, head_idx, &proj.wq, proj.bq.as_deref());
    let k = project_head(y, t, d, dh, head_idx, &proj.wk, proj.bk.as_deref());
    let v = project_head(y, t, d, dh, head_idx, &proj.wv, proj.bv.as_deref());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * dh];
    for ti in 0..t {
        // scores for query ti against every key, direct exp/sum softmax
        let mut scores = vec![0.0; t];
        for u in 0..t {
            let mut s = 0.0;
            for j in 0..dh {
                s += q[ti * dh + j] * k[u * dh + j];
            }
            scores[u] = s * scale;
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = s.exp();
            total += *s;
        }
        for u in 0..t {
            let a = scores[u] / total;
            for j in 0..dh {
                out[ti * dh + j] += a * v[u * dh + j];
            }
        }
    }
    out
}

/// Parallel cross-attention on one window: concatenated heads, output
/// projection, optional secondary skip, summed over modalities onto `x`.
pub fn parallel(x: &[f64], ys: &[&[f64]], t: usize, projs: &[RawProj], skip: bool) -> Vec<f64> {
    let mut out = x.to_vec();
    for (y, proj) in ys.iter().zip(projs) {
        let d = proj.d;
        let dh = d / proj.heads;
        // concat of heads in block-column order
        let mut mh = vec![0.0; t * d];
        for h in 0..proj.heads {
            let ho = head(x, y, t, proj, h);
            for ti in 0..t {
                for j in 0..dh {
                    mh[ti * d + h * dh + j] = ho[ti * dh + j];
                }
            }
        }
        for ti in 0..t {
            for e in 0..d {
                let mut acc = proj.bo.as_ref().map_or(0.0, |b| b[e]);
                for f in 0..d {
                    acc += mh[ti * d + f] * proj.wo[f * d + e];
                }
                out[ti * d + e] += acc + if skip { y[ti * d + e] } else { 0.0 };
            }
        }
    }
    out
}

fn layer_norm_channels_ref(x: &[f64], c: usize, hw: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let eps = 1e-5;
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += x[ch * hw + p];
        }
        mean /= c as f64;
        let mut var = 0.0;
        for ch in 0..c {
            let d = x[ch * hw + p] - mean;
            var += d * d;
        }
        var /= c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for ch in 0..c {
            out[ch * hw + p] = (x[ch * hw + p] - mean) * rs * gamma[ch] + beta[ch];
        }
    }
    out
}

/// Extract window `p` of a `[C × H × W]` map as `[T × D]` tokens, zero at
/// padded positions.
fn extract_window(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    cols: usize,
    p: usize,
) -> Vec<f64> {
    let t = k * k;
    let mut out = vec![0.0; t * c];
    let (wi, wj) = (p / cols, p % cols);
    for ti in 0..t {
        let (y, xx) = (wi * k + ti / k, wj * k + ti % k);
        if y >= h || xx >= w {
            continue;
        }
        for ch in 0..c {
            out[ti * c + ch] = x[(ch * h + y) * w + xx];
        }
    }
    out
}

/// Naive evaluation of the pre-FFN fusion output of a block on a batch-1
/// map: own layer norms, own window partition, explicit per-window parallel
/// cross-attention, own merge. Returns data in `[1, C, H, W]` order.
pub fn block_pre_ffn(block: &MwcaBlock, x: &Tensor, ys: &[Tensor]) -> Result<Vec<f64>> {
    if x.rank() != 4 || x.shape()[0] != 1 {
        return Err(Error::invalid("reference::block_pre_ffn", x.shape(), "expects [1,C,H,W]"));
    }
    let skip = match block.cfg.variant {
        FusionVariant::Mwca => true,
        FusionVariant::MwcaNoSecondarySkip => false,
        other => {
            return Err(Error::Config(format!(
                "reference covers the MWCA variants, got {other}"
            )))
        }
    };
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let k = block.cfg.window;
    let rows = h.div_ceil(k);
    let cols = w.div_ceil(k);
    let t = k * k;

    if ys.is_empty() {
        return Ok(x.data().to_vec());
    }

    let xn = layer_norm_channels_ref(
        x.data(),
        c,
        hw,
        block.norm_x.gamma.get().data(),
        block.norm_x.beta.get().data(),
    );
    let yns: Vec<Vec<f64>> = ys
        .iter()
        .zip(&block.cross.per_modality)
        .map(|(y, f)| {
            layer_norm_channels_ref(y.data(), c, hw, f.norm.gamma.get().data(), f.norm.beta.get().data())
        })
        .collect();
    let projs: Vec<RawProj> = block.cross.per_modality.iter().map(|f| RawProj::from(&f.proj)).collect();

    let mut out = vec![0.0; c * hw];
    for p in 0..rows * cols {
        let x_raw_w = extract_window(x.data(), c, h, w, k, cols, p);
        let xn_w = extract_window(&xn, c, h, w, k, cols, p);
        let yn_ws: Vec<Vec<f64>> = yns
            .iter()
            .map(|yn| extract_window(yn, c, h, w, k, cols, p))
            .collect();
        let yn_refs: Vec<&[f64]> = yn_ws.iter().map(|v| v.as_slice()).collect();
        // Eq. 3 sum against the normalized maps, residual from the raw map
        let ca = parallel(&xn_w, &yn_refs, t, &projs, skip);
        let (wi, wj) = (p / cols, p % cols);
        for ti in 0..t {
            let (y, xx) = (wi * k + ti / k, wj * k + ti % k);
            if y >= h || xx >= w {
                continue;
            }
            for ch in 0..c {
                // residual x + (ca - xn): `parallel` added the normalized
                // primary token, the block adds the raw one
                out[(ch * h + y) * w + xx] =
                    x_raw_w[ti * c + ch] + ca[ti * c + ch] - xn_w[ti * c + ch];
            }
        }
    }
    Ok(out)
}
