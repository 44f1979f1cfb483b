//! Multi-window cross-attention: per-window multi-head attention with
//! queries from the primary stream and keys/values from each secondary
//! modality, fused in parallel and followed by a depth-wise-conv FFN.

use serde::{Deserialize, Serialize};

use super::window::{window_merge, window_split};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, zeros_param, Conv2d, LayerNorm, Param, ParamSet};
use crate::rng::CounterRng;
use crate::tensor::{ops, Tape, Tensor};

/// How secondary modalities enter the primary stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Full multi-window cross-attention with secondary skip connections.
    Mwca,
    /// MWCA without the secondary skip term.
    MwcaNoSecondarySkip,
    /// Plain elementwise addition of the aligned secondary maps.
    Addition,
    /// Fusion disabled; the block passes the primary map through untouched.
    None,
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mwca" => Ok(FusionVariant::Mwca),
            "mwca_no_secondary_skip" => Ok(FusionVariant::MwcaNoSecondarySkip),
            "addition" => Ok(FusionVariant::Addition),
            "none" => Ok(FusionVariant::None),
            other => Err(Error::Config(format!("unknown fusion variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionVariant::Mwca => "mwca",
            FusionVariant::MwcaNoSecondarySkip => "mwca_no_secondary_skip",
            FusionVariant::Addition => "addition",
            FusionVariant::None => "none",
        };
        f.write_str(s)
    }
}

/// Static description of one fusion block.
#[derive(Debug, Clone, Copy)]
pub struct MwcaBlockConfig {
    /// Channel count D of the stream being fused into.
    pub channels: usize,
    /// Head count H; D must divide evenly.
    pub heads: usize,
    /// Window side K.
    pub window: usize,
    /// Number of secondary modalities M.
    pub modalities: usize,
    pub variant: FusionVariant,
    /// FFN expansion ratio.
    pub ffn_ratio: usize,
    /// Projection biases; identity tests run bias-free.
    pub bias: bool,
}

impl MwcaBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn expansion ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Query/key/value/output projections for one attention unit.
///
/// Per-head matrices are stored block-column: head h of `wq` is the
/// `[D, D/H]` column slice starting at `h·D/H`, so concatenating head
/// outputs along the channel axis reproduces the packed layout.
pub struct AttnProjWeights {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub bq: Option<Param>,
    pub bk: Option<Param>,
    pub bv: Option<Param>,
    pub bo: Option<Param>,
    pub channels: usize,
    pub heads: usize,
}

impl AttnProjWeights {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut CounterRng,
        channels: usize,
        heads: usize,
        bias: bool,
    ) -> Self {
        let d = channels;
        let mk = |ps: &mut ParamSet, rng: &mut CounterRng, name: &str| {
            ps.register(format!("{prefix}.{name}"), trunc_normal(rng, &[d, d], 0.02))
        };
        let wq = mk(ps, rng, "wq");
        let wk = mk(ps, rng, "wk");
        let wv = mk(ps, rng, "wv");
        let wo = mk(ps, rng, "wo");
        let mkb = |ps: &mut ParamSet, name: &str| {
            bias.then(|| ps.register(format!("{prefix}.{name}"), zeros_param(&[d])))
        };
        AttnProjWeights {
            wq,
            wk,
            wv,
            wo,
            bq: mkb(ps, "bq"),
            bk: mkb(ps, "bk"),
            bv: mkb(ps, "bv"),
            bo: mkb(ps, "bo"),
            channels,
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Weights of one parallel cross-attention unit: per secondary modality a
/// projection set plus that modality's pre-attention layer norm.
pub struct CrossAttentionWeights {
    pub per_modality: Vec<ModalityFusion>,
    pub channels: usize,
    pub heads: usize,
}

pub struct ModalityFusion {
    pub norm: LayerNorm,
    pub proj: AttnProjWeights,
}

impl CrossAttentionWeights {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut CounterRng,
        channels: usize,
        heads: usize,
        modalities: usize,
        bias: bool,
    ) -> Self {
        let per_modality = (0..modalities)
            .map(|m| ModalityFusion {
                norm: LayerNorm::init(ps, &format!("{prefix}.mod{m}.norm"), channels),
                proj: AttnProjWeights::init(
                    ps,
                    &format!("{prefix}.mod{m}"),
                    rng,
                    channels,
                    heads,
                    bias,
                ),
            })
            .collect();
        CrossAttentionWeights {
            per_modality,
            channels,
            heads,
        }
    }
}

fn check_tokens(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// One cross-attention head on a single window (Softmax[QKᵀ/√(D/H)]·V),
/// queries from `xp`, keys and values from `yp`, both `[K², D]`.
/// Returns `[K², D/H]`.
pub fn cross_attention_head(
    tape: &Tape,
    xp: &Tensor,
    yp: &Tensor,
    w: &AttnProjWeights,
    head: usize,
) -> Result<Tensor> {
    check_tokens("cross_attention_head", xp, yp)?;
    let d = w.channels;
    if xp.rank() != 2 || xp.shape()[1] != d {
        return Err(Error::invalid(
            "cross_attention_head",
            xp.shape(),
            format!("expected [K², {d}]"),
        ));
    }
    if head >= w.heads {
        return Err(Error::Config(format!(
            "head {head} out of range for {} heads",
            w.heads
        )));
    }
    let dh = w.head_dim();
    let col = head * dh;
    let slice_head = |tape: &Tape, m: &Param| ops::slice(tape, &m.get(), &[0, col], &[d, dh]);
    let slice_bias = |tape: &Tape, b: &Option<Param>| -> Result<Option<Tensor>> {
        b.as_ref()
            .map(|b| ops::slice(tape, &b.get(), &[col], &[dh]))
            .transpose()
    };
    let bq = slice_bias(tape, &w.bq)?;
    let bk = slice_bias(tape, &w.bk)?;
    let bv = slice_bias(tape, &w.bv)?;
    let q = ops::linear(tape, xp, &slice_head(tape, &w.wq)?, bq.as_ref())?;
    let k = ops::linear(tape, yp, &slice_head(tape, &w.wk)?, bk.as_ref())?;
    let v = ops::linear(tape, yp, &slice_head(tape, &w.wv)?, bv.as_ref())?;
    let kt = ops::permute(tape, &k, &[1, 0])?;
    let scores = ops::mul_scalar(tape, &ops::matmul(tape, &q, &kt)?, 1.0 / (dh as f64).sqrt());
    let attn = ops::softmax(tape, &scores)?;
    ops::matmul(tape, &attn, &v)
}

/// Parallel cross-attention on one window set: heads concatenated, projected
/// by the per-modality output matrix, the secondary skip added (unless
/// disabled), and everything summed onto the primary window. An empty
/// modality list returns `xp` exactly.
pub fn parallel_cross_attention(
    tape: &Tape,
    xp: &Tensor,
    yps: &[Tensor],
    w: &CrossAttentionWeights,
    secondary_skip: bool,
) -> Result<Tensor> {
    if yps.len() != w.per_modality.len() {
        return Err(Error::Config(format!(
            "parallel_cross_attention: {} secondary inputs but weights for {}",
            yps.len(),
            w.per_modality.len()
        )));
    }
    if yps.is_empty() {
        return Ok(xp.clone());
    }
    let mut acc = xp.clone();
    for (yp, fusion) in yps.iter().zip(&w.per_modality) {
        check_tokens("parallel_cross_attention", xp, yp)?;
        let heads: Vec<Tensor> = (0..w.heads)
            .map(|h| cross_attention_head(tape, xp, yp, &fusion.proj, h))
            .collect::<Result<_>>()?;
        let head_refs: Vec<&Tensor> = heads.iter().collect();
        let mh = ops::concat(tape, &head_refs, 1)?;
        let bo = fusion.proj.bo.as_ref().map(|b| b.get());
        let projected = ops::linear(tape, &mh, &fusion.proj.wo.get(), bo.as_ref())?;
        let term = if secondary_skip {
            ops::add(tape, yp, &projected)?
        } else {
            projected
        };
        acc = ops::add(tape, &acc, &term)?;
    }
    Ok(acc)
}

/// Batched multi-head attention over all windows at once: `q_src` and
/// `kv_src` are `[N, T, D]` (N windows of T tokens). Returns the projected
/// output `[N, T, D]` and the attention weights `[N·H, T, T]`.
pub fn window_attention(
    tape: &Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    w: &AttnProjWeights,
) -> Result<(Tensor, Tensor)> {
    check_tokens("window_attention", q_src, kv_src)?;
    if q_src.rank() != 3 || q_src.shape()[2] != w.channels {
        return Err(Error::invalid(
            "window_attention",
            q_src.shape(),
            format!("expected [N, T, {}]", w.channels),
        ));
    }
    let (n, t, d) = (q_src.shape()[0], q_src.shape()[1], q_src.shape()[2]);
    let (h, dh) = (w.heads, w.head_dim());

    let to_heads = |tape: &Tape, x: &Tensor| -> Result<Tensor> {
        let x = ops::reshape(tape, x, &[n, t, h, dh])?;
        let x = ops::permute(tape, &x, &[0, 2, 1, 3])?;
        ops::reshape(tape, &x, &[n * h, t, dh])
    };
    let q = to_heads(tape, &ops::linear(tape, q_src, &w.wq.get(), w.bq.as_ref().map(|b| b.get()).as_ref())?)?;
    let k = to_heads(tape, &ops::linear(tape, kv_src, &w.wk.get(), w.bk.as_ref().map(|b| b.get()).as_ref())?)?;
    let v = to_heads(tape, &ops::linear(tape, kv_src, &w.wv.get(), w.bv.as_ref().map(|b| b.get()).as_ref())?)?;

    let scores = ops::mul_scalar(tape, &ops::bmm_t(tape, &q, &k)?, 1.0 / (dh as f64).sqrt());
    let attn = ops::softmax(tape, &scores)?;
    let ctx = ops::bmm(tape, &attn, &v)?;

    let ctx = ops::reshape(tape, &ctx, &[n, h, t, dh])?;
    let ctx = ops::permute(tape, &ctx, &[0, 2, 1, 3])?;
    let ctx = ops::reshape(tape, &ctx, &[n, t, d])?;
    let out = ops::linear(tape, &ctx, &w.wo.get(), w.bo.as_ref().map(|b| b.get()).as_ref())?;
    Ok((out, attn))
}

/// Feed-forward tail of a block: channel norm, 1×1 expansion, 3×3
/// depth-wise conv, GELU, 1×1 reduction, residual.
pub struct ConvFfn {
    pub norm: LayerNorm,
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub reduce: Conv2d,
}

impl ConvFfn {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut CounterRng,
        channels: usize,
        ratio: usize,
        bias: bool,
    ) -> Self {
        let hidden = channels * ratio;
        ConvFfn {
            norm: LayerNorm::init(ps, &format!("{prefix}.norm"), channels),
            expand: Conv2d::init(ps, &format!("{prefix}.expand"), rng, channels, hidden, 1, 1, 0, 1, bias),
            depthwise: Conv2d::init(
                ps,
                &format!("{prefix}.dw"),
                rng,
                hidden,
                hidden,
                3,
                1,
                1,
                hidden,
                bias,
            ),
            reduce: Conv2d::init(ps, &format!("{prefix}.reduce"), rng, hidden, channels, 1, 1, 0, 1, bias),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward_channels(tape, x)?;
        let h = self.expand.forward(tape, &h)?;
        let h = self.depthwise.forward(tape, &h)?;
        let h = ops::gelu(tape, &h);
        let h = self.reduce.forward(tape, &h)?;
        ops::add(tape, x, &h)
    }
}

/// The MWCA fusion block: pre-norm, identical window partition for the
/// primary map and every secondary map, parallel cross-attention per window,
/// merge, then the conv FFN.
pub struct MwcaBlock {
    pub cfg: MwcaBlockConfig,
    pub norm_x: LayerNorm,
    pub cross: CrossAttentionWeights,
    pub ffn: ConvFfn,
}

impl MwcaBlock {
    pub fn init(ps: &mut ParamSet, prefix: &str, rng: &mut CounterRng, cfg: MwcaBlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MwcaBlock {
            cfg,
            norm_x: LayerNorm::init(ps, &format!("{prefix}.norm_x"), cfg.channels),
            cross: CrossAttentionWeights::init(
                ps,
                &format!("{prefix}.cross"),
                rng,
                cfg.channels,
                cfg.heads,
                cfg.modalities,
                cfg.bias,
            ),
            ffn: ConvFfn::init(ps, &format!("{prefix}.ffn"), rng, cfg.channels, cfg.ffn_ratio, cfg.bias),
        })
    }

    fn check_inputs(&self, x: &Tensor, ys: &[Tensor]) -> Result<()> {
        if ys.len() != self.cross.per_modality.len() {
            return Err(Error::Config(format!(
                "block built for {} modalities, got {} secondary maps",
                self.cross.per_modality.len(),
                ys.len()
            )));
        }
        for y in ys {
            if y.shape() != x.shape() {
                return Err(Error::shape("mwca_block", x.shape(), y.shape()));
            }
        }
        Ok(())
    }

    /// Fusion output before the FFN. For the `Mwca` variants this is
    /// Split → parallel CA per window → Merge, with the raw primary map as
    /// the residual; padding participates as zero-key tokens.
    pub fn fuse_pre_ffn(&self, tape: &Tape, x: &Tensor, ys: &[Tensor]) -> Result<Tensor> {
        self.check_inputs(x, ys)?;
        match self.cfg.variant {
            FusionVariant::None => Ok(x.clone()),
            FusionVariant::Addition => {
                let mut acc = x.clone();
                for y in ys {
                    acc = ops::add(tape, &acc, y)?;
                }
                Ok(acc)
            }
            FusionVariant::Mwca | FusionVariant::MwcaNoSecondarySkip => {
                if ys.is_empty() {
                    return Ok(x.clone());
                }
                let skip = self.cfg.variant == FusionVariant::Mwca;
                let xn = self.norm_x.forward_channels(tape, x)?;
                let (x_raw_w, grid) = window_split(tape, x, self.cfg.window)?;
                let (xn_w, _) = window_split(tape, &xn, self.cfg.window)?;
                let mut acc = x_raw_w;
                for (y, fusion) in ys.iter().zip(&self.cross.per_modality) {
                    let yn = fusion.norm.forward_channels(tape, y)?;
                    let (yn_w, gy) = window_split(tape, &yn, self.cfg.window)?;
                    debug_assert_eq!(gy, grid);
                    let (attended, _) = window_attention(tape, &xn_w, &yn_w, &fusion.proj)?;
                    let term = if skip {
                        ops::add(tape, &yn_w, &attended)?
                    } else {
                        attended
                    };
                    acc = ops::add(tape, &acc, &term)?;
                }
                window_merge(tape, &acc, &grid)
            }
        }
    }

    /// Full block: fusion then FFN. The `None` variant returns the input.
    pub fn forward(&self, tape: &Tape, x: &Tensor, ys: &[Tensor]) -> Result<Tensor> {
        if self.cfg.variant == FusionVariant::None {
            self.check_inputs(x, ys)?;
            return Ok(x.clone());
        }
        let fused = self.fuse_pre_ffn(tape, x, ys)?;
        self.ffn.forward(tape, &fused)
    }

    /// Per-modality attention-mass maps: for every secondary token position,
    /// the softmax weight it receives summed over queries and averaged over
    /// heads. Each window's mass therefore totals K². Input batch must be 1.
    pub fn attention_mass(&self, tape: &Tape, x: &Tensor, ys: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_inputs(x, ys)?;
        if x.shape()[0] != 1 {
            return Err(Error::invalid(
                "attention_mass",
                x.shape(),
                "expects batch size 1",
            ));
        }
        if !matches!(
            self.cfg.variant,
            FusionVariant::Mwca | FusionVariant::MwcaNoSecondarySkip
        ) {
            return Err(Error::Config(format!(
                "attention maps require an MWCA variant, got {}",
                self.cfg.variant
            )));
        }
        let (h_map, w_map) = (x.shape()[2], x.shape()[3]);
        let xn = self.norm_x.forward_channels(tape, x)?;
        let (xn_w, grid) = window_split(tape, &xn, self.cfg.window)?;
        let heads = self.cfg.heads;
        let t = grid.tokens();
        let mut maps = Vec::with_capacity(ys.len());
        for (y, fusion) in ys.iter().zip(&self.cross.per_modality) {
            let yn = fusion.norm.forward_channels(tape, y)?;
            let (yn_w, _) = window_split(tape, &yn, self.cfg.window)?;
            let (_, attn) = window_attention(tape, &xn_w, &yn_w, &fusion.proj)?;
            // attn is [P·H, T, T]: sum over queries, average over heads
            let mut map = vec![0.0; h_map * w_map];
            let a = attn.data();
            for p in 0..grid.windows() {
                for tk in 0..t {
                    let mut mass = 0.0;
                    for hh in 0..heads {
                        let base = ((p * heads + hh) * t) * t;
                        for tq in 0..t {
                            mass += a[base + tq * t + tk];
                        }
                    }
                    if let Some((yy, xx)) = grid.position(p, tk) {
                        map[yy * w_map + xx] = mass / heads as f64;
                    }
                }
            }
            maps.push(Tensor::new(map, &[h_map, w_map])?);
        }
        Ok(maps)
    }
}
