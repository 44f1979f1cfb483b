//! The full network: a multi-stream camera branch with one lightweight
//! high-resolution branch per secondary sensor, fused at stages 2–4 across
//! every camera resolution, finished by a concat neck.

use crate::attention::{MwcaBlock, MwcaBlockConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::rng::CounterRng;
use crate::tensor::{ops, Tape, Tensor};

use super::config::ModelConfig;
use super::layers::{upsample_to, Bottleneck, Stem, TransformerBlock};

/// Which sensor a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityId {
    Primary,
    Secondary(usize),
}

/// A tensor tagged with its origin and stream index.
#[derive(Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub modality: ModalityId,
    /// 1-based stream index inside the owning branch.
    pub stream: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Rasterized sensor images entering one forward pass, `[B, C, H, W]` each.
pub struct ModelInputs {
    pub primary: Tensor,
    pub secondaries: Vec<Tensor>,
}

/// Per-branch feature maps between stages.
pub struct BranchState {
    pub camera: Vec<FeatureMap>,
    pub secondary: Vec<FeatureMap>,
    /// Last completed stage (1..=4).
    pub stage: usize,
}

// ── multi-resolution exchange ────────────────────────────────────────

enum Resample {
    Up { conv: Conv2d, factor: usize },
    Down { convs: Vec<Conv2d> },
}

/// All-to-all resample-and-sum across the camera streams, ReLU after the
/// sum. A single stream passes through untouched.
pub struct Exchange {
    /// paths[i][j]: stream j resampled to the resolution/width of stream i.
    paths: Vec<Vec<Option<Resample>>>,
}

impl Exchange {
    fn init(ps: &mut ParamSet, prefix: &str, rng: &mut CounterRng, widths: &[usize]) -> Self {
        let n = widths.len();
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                let path = if i == j {
                    None
                } else if j > i {
                    // lower-resolution source: nearest upsample, then a
                    // zero-initialized 1×1 conv so exchange starts as
                    // identity-plus-zero
                    Some(Resample::Up {
                        conv: Conv2d::init_zeroed(
                            ps,
                            &format!("{prefix}.to{i}.from{j}"),
                            widths[j],
                            widths[i],
                            1,
                            1,
                            0,
                            1,
                            true,
                        ),
                        factor: 1 << (j - i),
                    })
                } else {
                    // higher-resolution source: repeated stride-2 3×3 convs;
                    // only the last is zero-initialized so the inner convs
                    // still receive gradient once the path opens up
                    let steps = i - j;
                    let convs = (0..steps)
                        .map(|t| {
                            let c_in = if t == 0 { widths[j] } else { widths[i] };
                            let name = format!("{prefix}.to{i}.from{j}.step{t}");
                            if t + 1 == steps {
                                Conv2d::init_zeroed(ps, &name, c_in, widths[i], 3, 2, 1, 1, true)
                            } else {
                                Conv2d::init(ps, &name, rng, c_in, widths[i], 3, 2, 1, 1, true)
                            }
                        })
                        .collect();
                    Some(Resample::Down { convs })
                };
                row.push(path);
            }
            paths.push(row);
        }
        Exchange { paths }
    }

    pub fn forward(&self, tape: &Tape, streams: &[Tensor]) -> Result<Vec<Tensor>> {
        let n = streams.len();
        if n == 0 {
            return Err(Error::Config("exchange needs at least one stream".into()));
        }
        if n == 1 {
            return Ok(vec![streams[0].clone()]);
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (th, tw) = (streams[i].shape()[2], streams[i].shape()[3]);
            let mut acc = streams[i].clone();
            for j in 0..n {
                let Some(path) = &self.paths[i][j] else { continue };
                let resampled = match path {
                    Resample::Up { conv, factor } => {
                        let up = upsample_to(tape, &streams[j], *factor, th, tw)?;
                        conv.forward(tape, &up)?
                    }
                    Resample::Down { convs } => {
                        let mut h = streams[j].clone();
                        for conv in convs {
                            h = conv.forward(tape, &h)?;
                        }
                        h
                    }
                };
                acc = ops::add(tape, &acc, &resampled)?;
            }
            out.push(ops::relu(tape, &acc));
        }
        Ok(out)
    }
}

// ── per-stage fusion ─────────────────────────────────────────────────

/// Fusion of all secondary maps into one camera stream: per-modality
/// alignment chains (stride-2 3×3 convs walking the channel ladder) feeding
/// one MWCA block.
pub struct StreamFusion {
    pub stream: usize,
    aligns: Vec<Vec<Conv2d>>,
    pub block: MwcaBlock,
}

impl StreamFusion {
    pub fn align(&self, tape: &Tape, modality: usize, y: &Tensor) -> Result<Tensor> {
        let mut h = y.clone();
        for conv in &self.aligns[modality] {
            h = conv.forward(tape, &h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, secondaries: &[Tensor]) -> Result<Tensor> {
        let ys = secondaries
            .iter()
            .enumerate()
            .map(|(m, y)| {
                let aligned = self.align(tape, m, y)?;
                if aligned.shape()[2..] != x.shape()[2..] {
                    return Err(Error::shape("fuse_secondaries", x.shape(), aligned.shape()));
                }
                Ok(aligned)
            })
            .collect::<Result<Vec<_>>>()?;
        self.block.forward(tape, x, &ys)
    }
}

/// One fusion level (stage 2, 3 or 4): a [`StreamFusion`] per fused stream.
pub struct FusionLevel {
    pub stage: usize,
    pub per_stream: Vec<StreamFusion>,
}

impl FusionLevel {
    /// Fuse the secondary maps into every configured camera stream,
    /// leaving the rest untouched.
    pub fn forward(&self, tape: &Tape, state: &mut BranchState) -> Result<()> {
        let secondaries: Vec<Tensor> = state.secondary.iter().map(|f| f.tensor.clone()).collect();
        for fusion in &self.per_stream {
            let idx = fusion.stream - 1;
            let fused = fusion.forward(tape, &state.camera[idx].tensor, &secondaries)?;
            state.camera[idx].tensor = fused;
        }
        Ok(())
    }
}

// ── branches ─────────────────────────────────────────────────────────

struct CameraStage {
    exchange: Exchange,
    /// Strided conv creating the new lowest-resolution stream.
    new_stream: Conv2d,
    /// Transformer blocks per stream (streams 1..=s).
    blocks: Vec<Vec<TransformerBlock>>,
}

struct CameraBranch {
    stem: Stem,
    stage1: Vec<Bottleneck>,
    to_stream: Conv2d,
    stages: Vec<CameraStage>,
}

struct SecondaryBranch {
    stem: Stem,
    stage1: Vec<Bottleneck>,
    to_stream: Conv2d,
    /// Transformer blocks for stages 2 and 3 (the branch runs three stages).
    stage2: Vec<TransformerBlock>,
    stage3: Vec<TransformerBlock>,
}

/// Concat neck: every stream upsampled to stream-1 resolution, channel
/// concat, 1×1 conv to the configured width.
pub struct Neck {
    project: Conv2d,
}

impl Neck {
    pub fn forward(&self, tape: &Tape, streams: &[FeatureMap]) -> Result<Tensor> {
        if streams.len() != 4 {
            return Err(Error::Config(format!(
                "neck expects 4 streams, got {}",
                streams.len()
            )));
        }
        let (th, tw) = (streams[0].height(), streams[0].width());
        let mut upsampled = vec![streams[0].tensor.clone()];
        for (i, fm) in streams.iter().enumerate().skip(1) {
            upsampled.push(upsample_to(tape, &fm.tensor, 1 << i, th, tw)?);
        }
        let refs: Vec<&Tensor> = upsampled.iter().collect();
        let cat = ops::concat(tape, &refs, 1)?;
        self.project.forward(tape, &cat)
    }
}

// ── the model ────────────────────────────────────────────────────────

pub struct HrFuser {
    pub cfg: ModelConfig,
    camera: CameraBranch,
    secondaries: Vec<SecondaryBranch>,
    fusions: Vec<FusionLevel>,
    pub neck: Neck,
}

impl HrFuser {
    /// Build the network, registering every parameter into `ps`. All
    /// initialization randomness comes from `cfg.seed`.
    pub fn build(cfg: &ModelConfig, ps: &mut ParamSet) -> Result<Self> {
        cfg.validate()?;
        let mut rng = CounterRng::new(cfg.seed).derive("model-init");
        let k = cfg.window;
        let d = cfg.camera_channels;

        let camera = {
            let stem = Stem::init(ps, "camera.stem", &mut rng, cfg.stem_input_channels(), cfg.stem_channels);
            let mut stage1 = Vec::new();
            for b in 0..cfg.stage1_blocks {
                let c_in = if b == 0 { cfg.stem_channels } else { cfg.stage1_out_channels };
                stage1.push(Bottleneck::init(
                    ps,
                    &format!("camera.stage1.b{b}"),
                    &mut rng,
                    c_in,
                    cfg.stage1_mid_channels,
                    cfg.stage1_out_channels,
                ));
            }
            let to_stream = Conv2d::init(
                ps,
                "camera.to_stream",
                &mut rng,
                cfg.stage1_out_channels,
                d[0],
                3,
                1,
                1,
                1,
                true,
            );
            let mut stages = Vec::new();
            for s in 2..=4usize {
                let exchange = Exchange::init(
                    ps,
                    &format!("camera.stage{s}.exchange"),
                    &mut rng,
                    &d[..s - 1],
                );
                let new_stream = Conv2d::init(
                    ps,
                    &format!("camera.stage{s}.new_stream"),
                    &mut rng,
                    d[s - 2],
                    d[s - 1],
                    3,
                    2,
                    1,
                    1,
                    true,
                );
                let mut blocks = Vec::new();
                for stream in 0..s {
                    let per_stream = (0..cfg.stage_blocks)
                        .map(|b| {
                            TransformerBlock::init(
                                ps,
                                &format!("camera.stage{s}.stream{}.b{b}", stream + 1),
                                &mut rng,
                                d[stream],
                                cfg.camera_heads[stream],
                                k,
                                cfg.ffn_ratio,
                                cfg.bias,
                            )
                        })
                        .collect();
                    blocks.push(per_stream);
                }
                stages.push(CameraStage {
                    exchange,
                    new_stream,
                    blocks,
                });
            }
            CameraBranch {
                stem,
                stage1,
                to_stream,
                stages,
            }
        };

        let mut secondaries = Vec::new();
        let mut fusions = Vec::new();
        if cfg.has_fusion() {
            for m in &cfg.modalities {
                let prefix = format!("secondary.{}", m.name);
                let stem = Stem::init(ps, &format!("{prefix}.stem"), &mut rng, m.channels, cfg.stem_channels);
                let mut stage1 = Vec::new();
                for b in 0..cfg.stage1_blocks {
                    let c_in = if b == 0 { cfg.stem_channels } else { cfg.stage1_out_channels };
                    stage1.push(Bottleneck::init(
                        ps,
                        &format!("{prefix}.stage1.b{b}"),
                        &mut rng,
                        c_in,
                        cfg.stage1_mid_channels,
                        cfg.stage1_out_channels,
                    ));
                }
                let to_stream = Conv2d::init(
                    ps,
                    &format!("{prefix}.to_stream"),
                    &mut rng,
                    cfg.stage1_out_channels,
                    cfg.secondary_channels,
                    3,
                    1,
                    1,
                    1,
                    true,
                );
                let mk_blocks = |ps: &mut ParamSet, rng: &mut CounterRng, stage: usize| {
                    (0..cfg.stage_blocks)
                        .map(|b| {
                            TransformerBlock::init(
                                ps,
                                &format!("{prefix}.stage{stage}.b{b}"),
                                rng,
                                cfg.secondary_channels,
                                cfg.secondary_heads,
                                k,
                                cfg.ffn_ratio,
                                cfg.bias,
                            )
                        })
                        .collect()
                };
                let stage2 = mk_blocks(ps, &mut rng, 2);
                let stage3 = mk_blocks(ps, &mut rng, 3);
                secondaries.push(SecondaryBranch {
                    stem,
                    stage1,
                    to_stream,
                    stage2,
                    stage3,
                });
            }

            for s in 2..=4usize {
                let mut per_stream = Vec::new();
                for stream in 1..=cfg.fused_streams(s) {
                    let prefix = format!("fusion.stage{s}.stream{stream}");
                    // alignment: (stream-1) stride-2 convs climbing the
                    // channel ladder D_1 → ... → D_stream, per modality
                    let aligns = cfg
                        .modalities
                        .iter()
                        .map(|m| {
                            (0..stream - 1)
                                .map(|t| {
                                    Conv2d::init(
                                        ps,
                                        &format!("{prefix}.align.{}.step{t}", m.name),
                                        &mut rng,
                                        d[t],
                                        d[t + 1],
                                        3,
                                        2,
                                        1,
                                        1,
                                        true,
                                    )
                                })
                                .collect()
                        })
                        .collect();
                    let block = MwcaBlock::init(
                        ps,
                        &format!("{prefix}.block"),
                        &mut rng,
                        MwcaBlockConfig {
                            channels: d[stream - 1],
                            heads: cfg.camera_heads[stream - 1],
                            window: k,
                            modalities: cfg.modalities.len(),
                            variant: cfg.fusion_variant,
                            ffn_ratio: cfg.ffn_ratio,
                            bias: cfg.bias,
                        },
                    )?;
                    per_stream.push(StreamFusion {
                        stream,
                        aligns,
                        block,
                    });
                }
                fusions.push(FusionLevel { stage: s, per_stream });
            }
        }

        let neck = Neck {
            project: Conv2d::init(
                ps,
                "neck.project",
                &mut rng,
                d.iter().sum(),
                cfg.neck_channels,
                1,
                1,
                0,
                1,
                true,
            ),
        };

        Ok(HrFuser {
            cfg: cfg.clone(),
            camera,
            secondaries,
            fusions,
            neck,
        })
    }

    /// The fusion level inserted at the given stage (2..=4), if any.
    pub fn fusion_level(&self, stage: usize) -> Option<&FusionLevel> {
        self.fusions.iter().find(|f| f.stage == stage)
    }

    /// Number of MWCA blocks and per-modality cross-attention units built.
    pub fn fusion_block_count(&self) -> (usize, usize) {
        let blocks: usize = self.fusions.iter().map(|f| f.per_stream.len()).sum();
        let units: usize = self
            .fusions
            .iter()
            .flat_map(|f| &f.per_stream)
            .map(|sf| sf.block.cross.per_modality.len())
            .sum();
        (blocks, units)
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        if inputs.primary.rank() != 4 || inputs.primary.shape()[1] != self.cfg.primary.channels {
            return Err(Error::invalid(
                "forward",
                inputs.primary.shape(),
                format!("primary input must be [B, {}, H, W]", self.cfg.primary.channels),
            ));
        }
        if inputs.secondaries.len() != self.cfg.modalities.len() {
            return Err(Error::Config(format!(
                "model configured for {} secondary modalities, got {}",
                self.cfg.modalities.len(),
                inputs.secondaries.len()
            )));
        }
        for (m, y) in self.cfg.modalities.iter().zip(&inputs.secondaries) {
            if y.rank() != 4 || y.shape()[1] != m.channels {
                return Err(Error::invalid(
                    "forward",
                    y.shape(),
                    format!("{} input must be [B, {}, H, W]", m.name, m.channels),
                ));
            }
            if y.shape()[0] != inputs.primary.shape()[0]
                || y.shape()[2..] != inputs.primary.shape()[2..]
            {
                return Err(Error::shape("forward", inputs.primary.shape(), y.shape()));
            }
        }
        Ok(())
    }

    /// Stage 1: stems plus bottleneck blocks on every branch.
    pub fn stage1_forward(&self, tape: &Tape, inputs: &ModelInputs, training: bool) -> Result<BranchState> {
        self.check_inputs(inputs)?;
        let primary_in = if self.cfg.early_fusion {
            let mut all = vec![&inputs.primary];
            all.extend(inputs.secondaries.iter());
            ops::concat(tape, &all, 1)?
        } else {
            inputs.primary.clone()
        };
        let mut x = self.camera.stem.forward(tape, &primary_in, training)?;
        for block in &self.camera.stage1 {
            x = block.forward(tape, &x, training)?;
        }
        x = self.camera.to_stream.forward(tape, &x)?;
        let camera = vec![FeatureMap {
            tensor: x,
            modality: ModalityId::Primary,
            stream: 1,
        }];

        let mut secondary = Vec::new();
        for (i, branch) in self.secondaries.iter().enumerate() {
            let mut y = branch.stem.forward(tape, &inputs.secondaries[i], training)?;
            for block in &branch.stage1 {
                y = block.forward(tape, &y, training)?;
            }
            y = branch.to_stream.forward(tape, &y)?;
            secondary.push(FeatureMap {
                tensor: y,
                modality: ModalityId::Secondary(i),
                stream: 1,
            });
        }
        Ok(BranchState {
            camera,
            secondary,
            stage: 1,
        })
    }

    /// One of stages 2–4: exchange, grow a stream, fuse the secondaries,
    /// then run the transformer blocks of every branch.
    pub fn stage_forward(&self, tape: &Tape, mut state: BranchState, stage: usize, _training: bool) -> Result<BranchState> {
        if !(2..=4).contains(&stage) {
            return Err(Error::Config(format!("stage {stage} out of range (2..=4)")));
        }
        if state.stage + 1 != stage {
            return Err(Error::Config(format!(
                "stage {stage} cannot follow completed stage {}",
                state.stage
            )));
        }
        let cam_stage = &self.camera.stages[stage - 2];

        // multi-resolution exchange over the existing streams
        let tensors: Vec<Tensor> = state.camera.iter().map(|f| f.tensor.clone()).collect();
        let exchanged = cam_stage.exchange.forward(tape, &tensors)?;
        for (fm, t) in state.camera.iter_mut().zip(exchanged) {
            fm.tensor = t;
        }

        // the branch gains one lower-resolution stream via strided conv
        let lowest = &state.camera.last().unwrap().tensor;
        let new = cam_stage.new_stream.forward(tape, lowest)?;
        state.camera.push(FeatureMap {
            tensor: new,
            modality: ModalityId::Primary,
            stream: stage,
        });

        // fuse the secondary modalities into the camera streams
        if let Some(level) = self.fusions.get(stage - 2).filter(|_| self.cfg.has_fusion()) {
            debug_assert_eq!(level.stage, stage);
            level.forward(tape, &mut state)?;
        }

        // transformer blocks per camera stream
        for (idx, fm) in state.camera.iter_mut().enumerate() {
            for block in &cam_stage.blocks[idx] {
                fm.tensor = block.forward(tape, &fm.tensor)?;
            }
        }

        // secondary branches continue for three stages: blocks at 2 and 3
        if stage <= 3 {
            for (i, branch) in self.secondaries.iter().enumerate() {
                let blocks = if stage == 2 { &branch.stage2 } else { &branch.stage3 };
                for block in blocks {
                    state.secondary[i].tensor = block.forward(tape, &state.secondary[i].tensor)?;
                }
            }
        }

        state.stage = stage;
        Ok(state)
    }

    /// Backbone forward: the four camera streams after stage 4.
    pub fn forward_streams(&self, tape: &Tape, inputs: &ModelInputs, training: bool) -> Result<Vec<FeatureMap>> {
        let mut state = self.stage1_forward(tape, inputs, training)?;
        for stage in 2..=4 {
            state = self.stage_forward(tape, state, stage, training)?;
        }
        Ok(state.camera)
    }

    /// Full forward to the neck map `[B, neck_channels, H/4, W/4]`.
    pub fn forward(&self, tape: &Tape, inputs: &ModelInputs, training: bool) -> Result<Tensor> {
        let streams = self.forward_streams(tape, inputs, training)?;
        self.neck.forward(tape, &streams)
    }
}

impl Exchange {
    /// Naive re-evaluation of the exchange with scalar-loop convolution and
    /// upsampling; the oracle the fast path is checked against.
    pub fn forward_naive(&self, streams: &[Tensor]) -> Result<Vec<Tensor>> {
        use super::reference::{naive_conv2d, naive_upsample_crop};
        if streams.len() == 1 {
            return Ok(vec![streams[0].clone()]);
        }
        let mut out = Vec::new();
        for i in 0..streams.len() {
            let (th, tw) = (streams[i].shape()[2], streams[i].shape()[3]);
            let mut acc = streams[i].data().to_vec();
            for j in 0..streams.len() {
                let Some(path) = &self.paths[i][j] else { continue };
                let contrib = match path {
                    Resample::Up { conv, factor } => {
                        let up = naive_upsample_crop(&streams[j], *factor, th, tw);
                        naive_conv2d(&up, conv)
                    }
                    Resample::Down { convs } => {
                        let mut h = streams[j].clone();
                        for conv in convs {
                            h = naive_conv2d(&h, conv);
                        }
                        h
                    }
                };
                for (a, &v) in acc.iter_mut().zip(contrib.data()) {
                    *a += v;
                }
            }
            for v in acc.iter_mut() {
                *v = v.max(0.0);
            }
            out.push(Tensor::new(acc, streams[i].shape())?);
        }
        Ok(out)
    }
}
