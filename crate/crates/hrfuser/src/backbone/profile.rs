//! Parameter and flop accounting.
//!
//! Parameters are counted from the registry, grouped by component prefix.
//! Flops are measured: every tensor op adds its cost (multiply-accumulates
//! × 2 for conv/matmul, per-element costs elsewhere) to the tape while a
//! real forward pass runs.

use crate::error::Result;
use crate::nn::ParamSet;
use crate::tensor::{Tape, Tensor};

use super::config::ModelConfig;
use super::model::{HrFuser, ModelInputs};

/// Parameter counts grouped by top-level component (`camera`,
/// `secondary.<name>`, `fusion`, `neck`, ...), in first-seen order.
pub fn param_table(ps: &ParamSet) -> Vec<(String, usize)> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (name, p) in ps.params() {
        let mut parts = name.splitn(3, '.');
        let first = parts.next().unwrap_or("");
        let key = if first == "secondary" {
            format!("secondary.{}", parts.next().unwrap_or(""))
        } else {
            first.to_string()
        };
        if !counts.contains_key(&key) {
            order.push(key.clone());
        }
        *counts.entry(key).or_insert(0) += p.get().len();
    }
    order.into_iter().map(|k| (k.clone(), counts[&k])).collect()
}

fn zero_inputs(cfg: &ModelConfig, h: usize, w: usize) -> ModelInputs {
    ModelInputs {
        primary: Tensor::zeros(&[1, cfg.primary.channels, h, w]),
        secondaries: cfg
            .modalities
            .iter()
            .map(|m| Tensor::zeros(&[1, m.channels, h, w]))
            .collect(),
    }
}

/// Per-stage flop breakdown of one forward pass.
pub struct ForwardProfile {
    pub phases: Vec<(String, u64)>,
    pub total: u64,
}

/// Measure flops of a batch-1 forward at the given input size.
pub fn profile_forward(model: &HrFuser, h: usize, w: usize) -> Result<ForwardProfile> {
    let tape = Tape::inference();
    let inputs = zero_inputs(&model.cfg, h, w);
    let mut phases = Vec::new();
    let mut last = 0u64;
    let snap = |tape: &Tape, name: &str, phases: &mut Vec<(String, u64)>, last: &mut u64| {
        let now = tape.flops();
        phases.push((name.to_string(), now - *last));
        *last = now;
    };
    let mut state = model.stage1_forward(&tape, &inputs, false)?;
    snap(&tape, "stage1", &mut phases, &mut last);
    for stage in 2..=4 {
        state = model.stage_forward(&tape, state, stage, false)?;
        snap(&tape, &format!("stage{stage}"), &mut phases, &mut last);
    }
    model.neck.forward(&tape, &state.camera)?;
    snap(&tape, "neck", &mut phases, &mut last);
    Ok(ForwardProfile {
        phases,
        total: tape.flops(),
    })
}

/// Build the config restricted to its first `m` modalities.
fn truncated(cfg: &ModelConfig, m: usize) -> ModelConfig {
    let mut c = cfg.clone();
    c.modalities.truncate(m);
    c
}

/// Total parameters for each modality count 0..=M.
pub fn params_per_modality_count(cfg: &ModelConfig) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for m in 0..=cfg.modalities.len() {
        let mut ps = ParamSet::new();
        HrFuser::build(&truncated(cfg, m), &mut ps)?;
        out.push(ps.num_values());
    }
    Ok(out)
}

/// Measured forward flops for each modality count 0..=M at the given size.
pub fn flops_per_modality_count(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for m in 0..=cfg.modalities.len() {
        let mut ps = ParamSet::new();
        let model = HrFuser::build(&truncated(cfg, m), &mut ps)?;
        out.push(profile_forward(&model, h, w)?.total);
    }
    Ok(out)
}

/// Successive differences of a cumulative series.
pub fn deltas<T: Copy + std::ops::Sub<Output = T>>(series: &[T]) -> Vec<T> {
    series.windows(2).map(|w| w[1] - w[0]).collect()
}
