//! Command-line front end: training, evaluation, verification commands,
//! profiling and scene tooling.
//!
//! Exit codes: 0 on success, 2 on validation/configuration failure, 3 on
//! numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrfuser::attention::{dump_attention_maps, FusionVariant, MwcaBlock, MwcaBlockConfig};
use hrfuser::backbone::{profile, HrFuser, ModalityConfig, ModelConfig, Variant};
use hrfuser::detection::reference as det_reference;
use hrfuser::detection::{average_precision, Detection, GroundTruthBox};
use hrfuser::error::{Error, Result};
use hrfuser::harness::{
    self, build_dataset, evaluate, generate_scene, load_checkpoint, render_camera,
    ExperimentConfig, ReportRow,
};
use hrfuser::imgio;
use hrfuser::nn::ParamSet;
use hrfuser::rng::CounterRng;
use hrfuser::sensing::scene::Scene;
use hrfuser::sensing::{rasterize_lidar, rasterize_radar_pillars, Box2D};
use hrfuser::tensor::{gradcheck, Tape, Tensor};

#[derive(Parser)]
#[command(name = "hrfuser", about = "Multi-resolution multi-modal fusion detector", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set seed=1 --set fusion_variant=addition.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' must be KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic benchmark and write checkpoint + metric log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for model.mwca/model.json/metrics.log.
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a freshly generated eval split.
    Eval {
        /// Checkpoint base path (without extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the eval scene count.
        #[arg(long)]
        scenes: Option<usize>,
        /// Optional CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks: per-op suite + tiny end-to-end model.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Sampled elements per parameter in the end-to-end check.
        #[arg(long, default_value_t = 1)]
        elements: usize,
    },
    /// Compare fast paths against the naive reference evaluators.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Parameter/flop tables and per-modality deltas for a variant.
    Profile {
        #[arg(long, default_value = "T")]
        variant: String,
        /// Secondary modalities, e.g. lidar:3,radar:3,gated:1.
        #[arg(long, default_value = "lidar:3,radar:3,gated:1")]
        modalities: String,
        /// Input size WxH for the flop measurement.
        #[arg(long, default_value = "224x112")]
        input: String,
    },
    /// Rasterize a scene file into PGM/PPM images per modality.
    Project {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "projected")]
        out: PathBuf,
    },
    /// Write MWCA attention-mass maps for a scene.
    DumpAttn {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint base path; a fresh seeded model is used if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file; scene 0 of the configured generator if omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value = "attn")]
        out: PathBuf,
    },
    /// Generate synthetic scene files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size '{s}' must be WxH")))?;
    Ok((
        w.parse().map_err(|_| Error::Config(format!("bad width '{w}'")))?,
        h.parse().map_err(|_| Error::Config(format!("bad height '{h}'")))?,
    ))
}

fn parse_modalities(s: &str) -> Result<Vec<ModalityConfig>> {
    if s.trim().is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            let (name, ch) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("modality '{p}' must be name:channels")))?;
            Ok(ModalityConfig::new(
                name,
                ch.parse().map_err(|_| Error::Config(format!("bad channels in '{p}'")))?,
            ))
        })
        .collect()
}

fn cmd_train(config: &ConfigArgs, out: &PathBuf) -> Result<()> {
    let exp = config.build()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), exp.to_text())?;
    let det = harness::Detector::build(&exp)?;
    println!(
        "training {} ({} params, fusion {})",
        out.display(),
        det.params.num_values(),
        exp.model.fusion_variant
    );
    let report = harness::train(&det, Some(out))?;
    if let Some(line) = report.log.last() {
        println!("{line}");
    }
    println!(
        "best ap50 {:.4} at epoch {}; checkpoint {}",
        report.best_ap50,
        report.best_epoch,
        out.join("model.mwca").display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &PathBuf, scenes: Option<usize>, csv: Option<&PathBuf>) -> Result<()> {
    let (det, stats) = load_checkpoint(checkpoint)?;
    let exp = det.exp.clone();
    let count = scenes.unwrap_or(exp.train.eval_scenes);
    let ds = harness::Dataset {
        scenes: (0..count)
            .map(|i| generate_scene(&exp.scene, 1_000_000 + i as u64))
            .collect::<Result<_>>()?,
        stats,
    };
    let result = evaluate(&det, &ds)?;
    let flops = profile::profile_forward(&det.backbone, exp.scene.image_height, exp.scene.image_width)?;
    let rows = vec![ReportRow {
        label: format!("{}", exp.model.fusion_variant),
        result,
        params: det.params.num_values(),
        flops: flops.total,
    }];
    print!("{}", harness::render_table(&rows));
    if let Some(path) = csv {
        let f = std::fs::File::create(path)?;
        harness::write_csv(std::io::BufWriter::new(f), &rows)?;
        // the CSV must parse back identically
        let back = harness::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if back != rows {
            return Err(Error::Format("csv did not round-trip".into()));
        }
    }
    Ok(())
}

fn cmd_gradcheck(instances: usize, elements: usize) -> Result<()> {
    let mut failures = 0;
    println!("per-op finite-difference suite ({instances} instances each):");
    for (name, rep) in gradcheck::op_suite(0, instances, gradcheck::DEFAULT_EPS)? {
        let ok = rep.passes(1e-4);
        println!(
            "  {:<20} max_rel_err {:>10.3e} over {:>5} elements  {}",
            name,
            rep.max_rel_err,
            rep.checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
        }
    }
    let e2e = harness::gradcheck::end_to_end_gradcheck(0, elements)?;
    let ok = e2e.max_rel_err < 1e-4;
    println!(
        "end-to-end tiny model: max_rel_err {:.3e} over {} params / {} elements (worst: {}) {}",
        e2e.max_rel_err,
        e2e.params_checked,
        e2e.elements_checked,
        e2e.worst_param,
        if ok { "ok" } else { "FAIL" }
    );
    if !ok {
        failures += 1;
    }
    if failures > 0 {
        return Err(Error::Diverged(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn cmd_oracle_check(instances: usize) -> Result<()> {
    use hrfuser::attention::reference as attn_reference;
    let mut rng = CounterRng::new(123);
    let mut worst_block = 0.0f64;
    for i in 0..instances {
        let m = 1 + (i % 3);
        let ch = [4, 6, 8][i % 3];
        let heads = 1 + (i % 2);
        let mut ps = ParamSet::new();
        let block = MwcaBlock::init(
            &mut ps,
            "blk",
            &mut rng,
            MwcaBlockConfig {
                channels: ch,
                heads,
                window: 7,
                modalities: m,
                variant: FusionVariant::Mwca,
                ffn_ratio: 4,
                bias: true,
            },
        )?;
        let h = 5 + (i * 3) % 24;
        let w = 5 + (i * 5) % 24;
        let mk = |rng: &mut CounterRng| {
            Tensor::new(
                (0..ch * h * w).map(|_| rng.range(-1.0, 1.0)).collect(),
                &[1, ch, h, w],
            )
            .unwrap()
        };
        let x = mk(&mut rng);
        let ys: Vec<Tensor> = (0..m).map(|_| mk(&mut rng)).collect();
        let tape = Tape::inference();
        let fast = block.fuse_pre_ffn(&tape, &x, &ys)?;
        let naive = attn_reference::block_pre_ffn(&block, &x, &ys)?;
        for (a, b) in fast.data().iter().zip(&naive) {
            worst_block = worst_block.max((a - b).abs());
        }
    }
    println!("mwca block vs naive reference: max abs diff {worst_block:.3e} ({instances} instances)");

    // AP evaluator vs brute force on random small instances
    let mut worst_ap = 0.0f64;
    for _ in 0..instances {
        let n_gt = rng.below(4) as usize;
        let n_det = rng.below(5) as usize;
        let mk_box = |rng: &mut CounterRng| {
            let x = rng.range(0.0, 80.0);
            let y = rng.range(0.0, 80.0);
            Box2D::new(x, y, x + rng.range(5.0, 50.0), y + rng.range(5.0, 50.0))
        };
        let gts = vec![(0..n_gt)
            .map(|k| GroundTruthBox { rect: mk_box(&mut rng), class: k % 2 })
            .collect::<Vec<_>>()];
        let dets = vec![(0..n_det)
            .map(|k| Detection {
                rect: mk_box(&mut rng),
                class: k % 2,
                score: rng.range(0.1, 1.0),
            })
            .collect::<Vec<_>>()];
        let fast = average_precision(&dets, &gts, &[0.5])?;
        let brute = det_reference::ap_mean(&dets, &gts, 0.5);
        worst_ap = worst_ap.max((fast.ap - brute).abs());
    }
    println!("ap evaluator vs brute force:   max abs diff {worst_ap:.3e} ({instances} instances)");

    if worst_block > 1e-10 || worst_ap > 1e-12 {
        return Err(Error::Diverged("oracle comparison out of tolerance".into()));
    }
    Ok(())
}

fn cmd_profile(variant: &str, modalities: &str, input: &str) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let mods = parse_modalities(modalities)?;
    let (w, h) = parse_size(input)?;
    let cfg = ModelConfig::preset(variant, ModalityConfig::new("camera", 3), mods.clone());
    let mut ps = ParamSet::new();
    let model = HrFuser::build(&cfg, &mut ps)?;
    println!("parameters by component:");
    for (name, count) in profile::param_table(&ps) {
        println!("  {name:<24} {count:>12}");
    }
    println!("  {:<24} {:>12}", "total", ps.num_values());

    let fwd = profile::profile_forward(&model, h, w)?;
    println!("forward flops at {w}x{h} (batch 1):");
    for (name, f) in &fwd.phases {
        println!("  {name:<24} {:>12.3} Mflop", *f as f64 / 1e6);
    }
    println!("  {:<24} {:>12.3} Mflop", "total", fwd.total as f64 / 1e6);

    if !mods.is_empty() {
        let params = profile::params_per_modality_count(&cfg)?;
        let flops = profile::flops_per_modality_count(&cfg, h, w)?;
        println!("per added modality (cumulative):");
        for m in 0..params.len() {
            println!(
                "  M={m}: {:>12} params  {:>12.3} Mflop",
                params[m],
                flops[m] as f64 / 1e6
            );
        }
        let dp = profile::deltas(&params);
        let df = profile::deltas(&flops);
        for m in 0..dp.len() {
            println!(
                "  +{}: {:>+12} params  {:>+12.3} Mflop",
                mods[m].name,
                dp[m] as i64,
                df[m] as f64 / 1e6
            );
        }
    }
    Ok(())
}

fn cmd_project(scene_path: &PathBuf, out: &PathBuf) -> Result<()> {
    let scene = Scene::load(scene_path)?;
    std::fs::create_dir_all(out)?;
    let cam = render_camera(&scene);
    let (h, w) = (scene.camera.height, scene.camera.width);
    // camera as PPM
    let mut rgb = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            rgb[p * 3 + c] = (cam.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    imgio::write_ppm(&out.join("camera.ppm"), w, h, &rgb)?;
    // secondary modalities as per-channel PGMs
    let lidar = rasterize_lidar(&scene.lidar, &scene.camera)?;
    let radar = rasterize_radar_pillars(&scene.radar, &scene.camera, true)?;
    for (name, img) in [("lidar", &lidar), ("radar", &radar)] {
        let hw = img.height() * img.width();
        for (c, ch_name) in img.channel_names.iter().enumerate() {
            let grey = imgio::to_grey(&img.data.data()[c * hw..(c + 1) * hw]);
            imgio::write_pgm(
                &out.join(format!("{name}_{ch_name}.pgm")),
                img.width(),
                img.height(),
                &grey,
            )?;
        }
    }
    println!("wrote camera.ppm + lidar/radar channel PGMs to {}", out.display());
    Ok(())
}

fn reshape_batch(t: &Tensor) -> Tensor {
    let mut shape = vec![1usize];
    shape.extend_from_slice(t.shape());
    Tensor::new(t.data().to_vec(), &shape).unwrap()
}

fn cmd_dump_attn(
    config: &ConfigArgs,
    checkpoint: Option<&PathBuf>,
    scene: Option<&PathBuf>,
    out: &PathBuf,
) -> Result<()> {
    let (det, stats) = match checkpoint {
        Some(base) => load_checkpoint(base)?,
        None => {
            let exp = config.build()?;
            let det = harness::Detector::build(&exp)?;
            let ds = build_dataset(&exp.scene, &exp, 16, 0, None)?;
            (det, ds.stats)
        }
    };
    let exp = det.exp.clone();
    if !exp.model.has_fusion() {
        return Err(Error::Config(
            "attention dumps need an MWCA fusion configuration".into(),
        ));
    }
    let scene = match scene {
        Some(path) => Scene::load(path)?,
        None => generate_scene(&exp.scene, 0)?,
    };
    let sample = harness::make_sample(&scene, &exp, &stats)?;
    std::fs::create_dir_all(out)?;

    // run stages 1-2, then dump the attention mass of the stage-2
    // high-resolution fusion block on its aligned inputs
    let tape = Tape::inference();
    let inputs = hrfuser::backbone::ModelInputs {
        primary: reshape_batch(&sample.primary),
        secondaries: sample.secondaries.iter().map(reshape_batch).collect(),
    };
    let state = det.backbone.stage1_forward(&tape, &inputs, false)?;
    let state = det.backbone.stage_forward(&tape, state, 2, false)?;
    let level = det
        .backbone
        .fusion_level(2)
        .ok_or_else(|| Error::Config("model has no stage-2 fusion level".into()))?;
    let fusion = &level.per_stream[0];
    let x = &state.camera[0].tensor;
    let ys: Vec<Tensor> = state
        .secondary
        .iter()
        .enumerate()
        .map(|(m, f)| fusion.align(&tape, m, &f.tensor))
        .collect::<Result<_>>()?;
    let names: Vec<String> = exp.model.modalities.iter().map(|m| m.name.clone()).collect();
    let files = dump_attention_maps(&fusion.block, x, &ys, &names, out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_gen_data(config: &ConfigArgs, count: usize, offset: u64, out: &PathBuf) -> Result<()> {
    let exp = config.build()?;
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let scene = generate_scene(&exp.scene, offset + i as u64)?;
        scene.save(&out.join(format!("scene_{:05}.json", offset + i as u64)))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval { checkpoint, scenes, csv } => cmd_eval(checkpoint, *scenes, csv.as_ref()),
        Command::Gradcheck { instances, elements } => cmd_gradcheck(*instances, *elements),
        Command::OracleCheck { instances } => cmd_oracle_check(*instances),
        Command::Profile { variant, modalities, input } => cmd_profile(variant, modalities, input),
        Command::Project { scene, out } => cmd_project(scene, out),
        Command::DumpAttn { config, checkpoint, scene, out } => {
            cmd_dump_attn(config, checkpoint.as_ref(), scene.as_ref(), out)
        }
        Command::GenData { config, count, offset, out } => cmd_gen_data(config, *count, *offset, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
