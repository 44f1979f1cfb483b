//! Experiment configuration: training hyperparameters plus the flat
//! `key = value` text format the CLI reads.
//!
//! Recognized keys (one per line, `#` comments allowed):
//!
//! ```text
//! variant            = custom | T | S | B
//! modalities         = lidar:3,radar:3        # secondary sensors
//! primary            = camera:3
//! fusion_variant     = mwca | mwca_no_secondary_skip | addition | none
//! window_size        = 7
//! fuse_only_high_res = false
//! early_fusion       = false
//! neck_channels      = 32
//! classes            = 2
//! head_width         = 24
//! seed               = 0
//! lr                 = 0.002
//! weight_decay       = 0.01
//! beta1              = 0.9
//! beta2              = 0.999
//! warmup_steps       = 100
//! warmup_ratio       = 0.001
//! decay_epochs       = 3,4
//! decay_factor       = 0.1
//! epochs             = 5
//! batch_size         = 4
//! sensor_dropout     = 0.2
//! train_scenes       = 512
//! eval_scenes        = 128
//! image_size         = 112
//! ```

use serde::{Deserialize, Serialize};

use crate::backbone::{ModalityConfig, ModelConfig, Variant};
use crate::error::{Error, Result};

use super::synth::SyntheticSceneSpec;

/// Optimization schedule (AdamW with warmup and step decay).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub warmup_ratio: f64,
    /// 0-based epochs at whose start the LR is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sensor_dropout: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            warmup_steps: 100,
            warmup_ratio: 1e-3,
            decay_epochs: vec![3, 4],
            decay_factor: 0.1,
            epochs: 5,
            batch_size: 4,
            sensor_dropout: 0.2,
            seed: 0,
            train_scenes: 512,
            eval_scenes: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sensor_dropout) {
            return Err(Error::Config("sensor_dropout must be in [0,1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a global step: linear warmup from `lr·warmup_ratio`
    /// to `lr` over `warmup_steps`, then a `decay_factor` multiplication at
    /// the start of each listed epoch.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let base = if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps.max(1) as f64;
            self.lr * (self.warmup_ratio + (1.0 - self.warmup_ratio) * t)
        } else {
            self.lr
        };
        let epoch = if steps_per_epoch == 0 { 0 } else { step / steps_per_epoch };
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        base * self.decay_factor.powi(drops as i32)
    }
}

/// Everything one run needs: architecture, schedule, data generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SyntheticSceneSpec,
    pub classes: usize,
    pub head_width: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(
            ModalityConfig::new("camera", 3),
            vec![ModalityConfig::new("lidar", 3), ModalityConfig::new("radar", 3)],
        );
        ExperimentConfig {
            model,
            train: TrainConfig::default(),
            scene: SyntheticSceneSpec::default(),
            classes: 2,
            head_width: 24,
        }
    }
}

fn parse_modalities(s: &str) -> Result<Vec<ModalityConfig>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let (name, ch) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("modality '{part}' must be name:channels")))?;
            Ok(ModalityConfig::new(
                name.trim(),
                ch.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad channel count in '{part}'")))?,
            ))
        })
        .collect()
}

fn modalities_to_string(mods: &[ModalityConfig]) -> String {
    mods.iter()
        .map(|m| format!("{}:{}", m.name, m.channels))
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad integer '{v}' for {key}")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("bad number '{v}' for {key}")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
            }
        };
        match key {
            "variant" => {
                let variant: Variant = v.parse()?;
                let primary = self.model.primary.clone();
                let mods = self.model.modalities.clone();
                let mut fresh = ModelConfig::preset(variant, primary, mods);
                fresh.fusion_variant = self.model.fusion_variant;
                fresh.fuse_only_high_res = self.model.fuse_only_high_res;
                fresh.early_fusion = self.model.early_fusion;
                fresh.seed = self.model.seed;
                self.model = fresh;
            }
            "modalities" => self.model.modalities = parse_modalities(v)?,
            "primary" => {
                let list = parse_modalities(v)?;
                self.model.primary = list
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Config("primary needs name:channels".into()))?;
            }
            "fusion_variant" => self.model.fusion_variant = v.parse()?,
            "window_size" => self.model.window = parse_usize(v)?,
            "fuse_only_high_res" => self.model.fuse_only_high_res = parse_bool(v)?,
            "early_fusion" => self.model.early_fusion = parse_bool(v)?,
            "neck_channels" => self.model.neck_channels = parse_usize(v)?,
            "classes" => {
                self.classes = parse_usize(v)?;
                self.scene.classes = self.classes;
            }
            "head_width" => self.head_width = parse_usize(v)?,
            "seed" => {
                let s: u64 = v.parse().map_err(|_| Error::Config(format!("bad seed '{v}'")))?;
                self.model.seed = s;
                self.train.seed = s;
                self.scene.seed = s;
            }
            "lr" => self.train.lr = parse_f64(v)?,
            "weight_decay" => self.train.weight_decay = parse_f64(v)?,
            "beta1" => self.train.betas.0 = parse_f64(v)?,
            "beta2" => self.train.betas.1 = parse_f64(v)?,
            "warmup_steps" => self.train.warmup_steps = parse_usize(v)?,
            "warmup_ratio" => self.train.warmup_ratio = parse_f64(v)?,
            "decay_epochs" => {
                self.train.decay_epochs = if v.is_empty() {
                    vec![]
                } else {
                    v.split(',')
                        .map(|p| parse_usize(p.trim()))
                        .collect::<Result<_>>()?
                };
            }
            "decay_factor" => self.train.decay_factor = parse_f64(v)?,
            "epochs" => self.train.epochs = parse_usize(v)?,
            "batch_size" => self.train.batch_size = parse_usize(v)?,
            "sensor_dropout" => self.train.sensor_dropout = parse_f64(v)?,
            "train_scenes" => self.train.train_scenes = parse_usize(v)?,
            "eval_scenes" => self.train.eval_scenes = parse_usize(v)?,
            "image_size" => {
                let size = parse_usize(v)?;
                self.scene.image_width = size;
                self.scene.image_height = size;
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse the flat key-value text format.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Render back to the flat text format.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        format!(
            "variant = {}\nprimary = {}:{}\nmodalities = {}\nfusion_variant = {}\nwindow_size = {}\nfuse_only_high_res = {}\nearly_fusion = {}\nneck_channels = {}\nclasses = {}\nhead_width = {}\nseed = {}\nlr = {}\nweight_decay = {}\nbeta1 = {}\nbeta2 = {}\nwarmup_steps = {}\nwarmup_ratio = {}\ndecay_epochs = {}\ndecay_factor = {}\nepochs = {}\nbatch_size = {}\nsensor_dropout = {}\ntrain_scenes = {}\neval_scenes = {}\nimage_size = {}\n",
            match m.variant {
                Variant::T => "T",
                Variant::S => "S",
                Variant::B => "B",
                Variant::Custom => "custom",
            },
            m.primary.name,
            m.primary.channels,
            modalities_to_string(&m.modalities),
            m.fusion_variant,
            m.window,
            m.fuse_only_high_res,
            m.early_fusion,
            m.neck_channels,
            self.classes,
            self.head_width,
            t.seed,
            t.lr,
            t.weight_decay,
            t.betas.0,
            t.betas.1,
            t.warmup_steps,
            t.warmup_ratio,
            t.decay_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
            t.decay_factor,
            t.epochs,
            t.batch_size,
            t.sensor_dropout,
            t.train_scenes,
            t.eval_scenes,
            self.scene.image_width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.classes == 0 || self.head_width == 0 {
            return Err(Error::Config("classes and head_width must be >= 1".into()));
        }
        if self.scene.classes != self.classes {
            return Err(Error::Config(format!(
                "scene classes ({}) and detector classes ({}) disagree",
                self.scene.classes, self.classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionVariant;

    #[test]
    fn lr_schedule_is_warmup_then_step_decay() {
        let tc = TrainConfig {
            lr: 1.0,
            warmup_steps: 500,
            warmup_ratio: 1e-3,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            ..Default::default()
        };
        let spe = 100; // steps per epoch
        assert!((tc.lr_at(0, spe) - 1e-3).abs() < 1e-12);
        // linear ramp: halfway up at step 250
        let mid = tc.lr_at(250, spe);
        assert!((mid - (1e-3 + (1.0 - 1e-3) * 0.5)).abs() < 1e-12);
        assert!((tc.lr_at(500, spe) - 1.0).abs() < 1e-12);
        assert!((tc.lr_at(799, spe) - 1.0).abs() < 1e-12);
        // first decay at epoch 8 (step 800)
        assert!((tc.lr_at(800, spe) - 0.1).abs() < 1e-12);
        assert!((tc.lr_at(1099, spe) - 0.1).abs() < 1e-12);
        assert!((tc.lr_at(1100, spe) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", "42").unwrap();
        cfg.set("fusion_variant", "addition").unwrap();
        cfg.set("modalities", "lidar:3").unwrap();
        cfg.set("epochs", "2").unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back.train.seed, 42);
        assert_eq!(back.model.fusion_variant, FusionVariant::Addition);
        assert_eq!(back.model.modalities.len(), 1);
        assert_eq!(back.train.epochs, 2);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let ok = ExperimentConfig::from_text("# comment\nseed = 9\n\nepochs = 1 # inline\n").unwrap();
        assert_eq!(ok.train.seed, 9);
        assert_eq!(ok.train.epochs, 1);
        assert!(ExperimentConfig::from_text("no_such_key = 1\n").is_err());
        assert!(ExperimentConfig::from_text("seed 9\n").is_err());
    }
}
