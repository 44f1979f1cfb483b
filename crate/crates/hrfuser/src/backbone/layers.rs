//! Building blocks of the branches: stems, bottleneck residual blocks, and
//! the windowed self-attention transformer block.

use crate::attention::{window_attention, window_merge, window_split, AttnProjWeights, ConvFfn};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, LayerNorm, ParamSet};
use crate::rng::CounterRng;
use crate::tensor::{ops, Tape, Tensor};

/// Two stride-2 3×3 convs with norm and activation; quarters the resolution.
pub struct Stem {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl Stem {
    pub fn init(ps: &mut ParamSet, prefix: &str, rng: &mut CounterRng, c_in: usize, width: usize) -> Self {
        Stem {
            conv1: Conv2d::init(ps, &format!("{prefix}.conv1"), rng, c_in, width, 3, 2, 1, 1, false),
            bn1: BatchNorm2d::init(ps, &format!("{prefix}.bn1"), width),
            conv2: Conv2d::init(ps, &format!("{prefix}.conv2"), rng, width, width, 3, 2, 1, 1, false),
            bn2: BatchNorm2d::init(ps, &format!("{prefix}.bn2"), width),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::invalid("stem", x.shape(), "expects [B,C,H,W]"));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "stem",
                x.shape(),
                "input height and width must be divisible by 4",
            ));
        }
        let x = ops::relu(tape, &self.bn1.forward(tape, &self.conv1.forward(tape, x)?, training)?);
        let x = ops::relu(tape, &self.bn2.forward(tape, &self.conv2.forward(tape, &x)?, training)?);
        Ok(x)
    }
}

/// Classic bottleneck residual block: 1×1 reduce, 3×3, 1×1 expand, with a
/// projection shortcut when the channel counts differ.
pub struct Bottleneck {
    reduce: Conv2d,
    bn1: BatchNorm2d,
    conv: Conv2d,
    bn2: BatchNorm2d,
    expand: Conv2d,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut CounterRng,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
    ) -> Self {
        let shortcut = (c_in != c_out).then(|| {
            (
                Conv2d::init(ps, &format!("{prefix}.short"), rng, c_in, c_out, 1, 1, 0, 1, false),
                BatchNorm2d::init(ps, &format!("{prefix}.short_bn"), c_out),
            )
        });
        Bottleneck {
            reduce: Conv2d::init(ps, &format!("{prefix}.reduce"), rng, c_in, c_mid, 1, 1, 0, 1, false),
            bn1: BatchNorm2d::init(ps, &format!("{prefix}.bn1"), c_mid),
            conv: Conv2d::init(ps, &format!("{prefix}.conv"), rng, c_mid, c_mid, 3, 1, 1, 1, false),
            bn2: BatchNorm2d::init(ps, &format!("{prefix}.bn2"), c_mid),
            expand: Conv2d::init(ps, &format!("{prefix}.expand"), rng, c_mid, c_out, 1, 1, 0, 1, false),
            bn3: BatchNorm2d::init(ps, &format!("{prefix}.bn3"), c_out),
            shortcut,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = ops::relu(tape, &self.bn1.forward(tape, &self.reduce.forward(tape, x)?, training)?);
        let h = ops::relu(tape, &self.bn2.forward(tape, &self.conv.forward(tape, &h)?, training)?);
        let h = self.bn3.forward(tape, &self.expand.forward(tape, &h)?, training)?;
        let identity = match &self.shortcut {
            Some((conv, bn)) => bn.forward(tape, &conv.forward(tape, x)?, training)?,
            None => x.clone(),
        };
        Ok(ops::relu(tape, &ops::add(tape, &identity, &h)?))
    }
}

/// Transformer block used in stages 2–4: pre-norm local-window
/// self-attention followed by the depth-wise-conv FFN.
pub struct TransformerBlock {
    norm: LayerNorm,
    attn: AttnProjWeights,
    ffn: ConvFfn,
    window: usize,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut CounterRng,
        channels: usize,
        heads: usize,
        window: usize,
        ffn_ratio: usize,
        bias: bool,
    ) -> Self {
        TransformerBlock {
            norm: LayerNorm::init(ps, &format!("{prefix}.norm"), channels),
            attn: AttnProjWeights::init(ps, &format!("{prefix}.attn"), rng, channels, heads, bias),
            ffn: ConvFfn::init(ps, &format!("{prefix}.ffn"), rng, channels, ffn_ratio, bias),
            window,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let xn = self.norm.forward_channels(tape, x)?;
        let (win, grid) = window_split(tape, &xn, self.window)?;
        let (attended, _) = window_attention(tape, &win, &win, &self.attn)?;
        let merged = window_merge(tape, &attended, &grid)?;
        let x = ops::add(tape, x, &merged)?;
        self.ffn.forward(tape, &x)
    }
}

/// Nearest upsample by an integer factor, then crop bottom/right to the
/// exact target size (resolutions on the ladder are ceil-divided, so the
/// doubled size can overshoot by one).
pub fn upsample_to(
    tape: &Tape,
    x: &Tensor,
    factor: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor> {
    let up = ops::nearest_upsample(tape, x, factor)?;
    let (b, c, h, w) = (up.shape()[0], up.shape()[1], up.shape()[2], up.shape()[3]);
    if h == target_h && w == target_w {
        return Ok(up);
    }
    if h < target_h || w < target_w {
        return Err(Error::invalid(
            "upsample_to",
            up.shape(),
            format!("cannot reach {target_h}x{target_w}"),
        ));
    }
    ops::slice(tape, &up, &[0, 0, 0, 0], &[b, c, target_h, target_w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_quarters_resolution() {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(1);
        let stem = Stem::init(&mut ps, "stem", &mut rng, 3, 8);
        let tape = Tape::inference();
        let x = Tensor::zeros(&[1, 3, 640, 360]);
        let y = stem.forward(&tape, &x, false).unwrap();
        assert_eq!(y.shape(), &[1, 8, 160, 90]);

        let x = Tensor::zeros(&[1, 3, 1248, 360]);
        let y = stem.forward(&tape, &x, false).unwrap();
        assert_eq!(y.shape(), &[1, 8, 312, 90]);
    }

    #[test]
    fn stem_rejects_indivisible_input() {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(1);
        let stem = Stem::init(&mut ps, "stem", &mut rng, 3, 8);
        let tape = Tape::inference();
        assert!(stem.forward(&tape, &Tensor::zeros(&[1, 3, 30, 40]), false).is_err());
    }

    #[test]
    fn stem_zero_input_gives_uniform_finite_channels() {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(2);
        let stem = Stem::init(&mut ps, "stem", &mut rng, 3, 4);
        let tape = Tape::inference();
        let y = stem.forward(&tape, &Tensor::zeros(&[1, 3, 16, 16]), false).unwrap();
        assert!(y.all_finite());
        // per channel the map is constant away from the padding-affected rim
        let (h, w) = (4usize, 4usize);
        for c in 0..4 {
            let center = y.at(&[0, c, 1, 1]);
            assert_eq!(y.at(&[0, c, 1, 2]), center);
            assert_eq!(y.at(&[0, c, 2, 1]), center);
        }
    }

    #[test]
    fn bottleneck_preserves_shape() {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(3);
        let block = Bottleneck::init(&mut ps, "b", &mut rng, 8, 4, 16);
        let tape = Tape::inference();
        let x = Tensor::new((0..8 * 36).map(|v| (v as f64).sin()).collect(), &[1, 8, 6, 6]).unwrap();
        let y = block.forward(&tape, &x, false).unwrap();
        assert_eq!(y.shape(), &[1, 16, 6, 6]);
    }

    #[test]
    fn transformer_block_keeps_shape_and_is_deterministic() {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(4);
        let block = TransformerBlock::init(&mut ps, "t", &mut rng, 8, 2, 7, 4, true);
        let tape = Tape::inference();
        let x = Tensor::new((0..8 * 13 * 10).map(|v| (v as f64 * 0.37).cos()).collect(), &[1, 8, 13, 10]).unwrap();
        let y1 = block.forward(&tape, &x).unwrap();
        let y2 = block.forward(&tape, &x).unwrap();
        assert_eq!(y1.shape(), x.shape());
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn upsample_to_crops_the_overshoot() {
        let tape = Tape::inference();
        let x = Tensor::ones(&[1, 2, 12, 12]);
        let y = upsample_to(&tape, &x, 2, 23, 23).unwrap();
        assert_eq!(y.shape(), &[1, 2, 23, 23]);
    }
}
