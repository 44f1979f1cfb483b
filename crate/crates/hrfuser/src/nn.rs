//! Parameter registry and the small layers shared by the attention blocks
//! and the backbone.
//!
//! Every trainable tensor is registered once, by hierarchical name, in a
//! [`ParamSet`]. Layers keep cheap [`Param`] handles and read the current
//! value at forward time; the optimizer rebinds values through the same
//! handles. Running statistics (batch norm) live in [`Buffer`]s, which are
//! checkpointed but not trained.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{ops, Tape, Tensor};

/// Shared handle to one trainable tensor.
#[derive(Clone)]
pub struct Param {
    slot: Rc<RefCell<Tensor>>,
}

impl Param {
    fn new(t: Tensor) -> Self {
        debug_assert!(t.requires_grad());
        Param {
            slot: Rc::new(RefCell::new(t)),
        }
    }

    /// Current value (cheap clone of the handle).
    pub fn get(&self) -> Tensor {
        self.slot.borrow().clone()
    }

    /// Rebind to a new value, preserving `requires_grad`.
    pub fn set(&self, data: Vec<f64>) {
        let shape = self.slot.borrow().shape().to_vec();
        *self.slot.borrow_mut() = Tensor::param(data, &shape).unwrap();
    }

    pub fn zero_grad(&self) {
        self.slot.borrow().zero_grad();
    }
}

/// Non-trainable per-layer state (running statistics).
#[derive(Clone)]
pub struct Buffer {
    slot: Rc<RefCell<Vec<f64>>>,
}

impl Buffer {
    fn new(values: Vec<f64>) -> Self {
        Buffer {
            slot: Rc::new(RefCell::new(values)),
        }
    }

    pub fn get(&self) -> Vec<f64> {
        self.slot.borrow().clone()
    }

    pub fn set(&self, values: Vec<f64>) {
        *self.slot.borrow_mut() = values;
    }
}

/// Ordered registry of every parameter and buffer in a model.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<(String, Param)>,
    buffers: Vec<(String, Buffer, Vec<usize>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, t: Tensor) -> Param {
        debug_assert!(
            !self.params.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        let p = Param::new(t);
        self.params.push((name, p.clone()));
        p
    }

    pub fn register_buffer(&mut self, name: String, values: Vec<f64>, shape: Vec<usize>) -> Buffer {
        let b = Buffer::new(values);
        self.buffers.push((name, b.clone(), shape));
        b
    }

    pub fn params(&self) -> &[(String, Param)] {
        &self.params
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|(_, p)| p.get().len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Parameters plus buffers, in registration order, for checkpointing.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.get().detach()))
            .collect();
        for (n, b, shape) in &self.buffers {
            out.push((n.clone(), Tensor::new(b.get(), shape).unwrap()));
        }
        out
    }

    /// Restore every parameter and buffer from a checkpoint snapshot.
    pub fn restore(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, p) in &self.params {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
            if t.shape() != p.get().shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, model wants {:?}",
                    t.shape(),
                    p.get().shape()
                )));
            }
            p.set(t.data().to_vec());
        }
        for (name, b, shape) in &self.buffers {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing buffer {name}")))?;
            if t.shape() != &shape[..] {
                return Err(Error::Format(format!(
                    "checkpoint buffer {name} has shape {:?}, model wants {:?}",
                    t.shape(),
                    shape
                )));
            }
            b.set(t.data().to_vec());
        }
        Ok(())
    }
}

// ── initializers ─────────────────────────────────────────────────────

/// Truncated normal (±2σ), the init used for attention and linear weights.
pub fn trunc_normal(rng: &mut CounterRng, shape: &[usize], sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.trunc_normal(sigma)).collect(), shape).unwrap()
}

/// Kaiming-normal init for conv kernels: N(0, sqrt(2 / fan_in)).
pub fn kaiming_conv(rng: &mut CounterRng, c_out: usize, c_in_g: usize, k: usize) -> Tensor {
    let fan_in = (c_in_g * k * k) as f64;
    let sigma = (2.0 / fan_in).sqrt();
    let n = c_out * c_in_g * k * k;
    Tensor::param(
        (0..n).map(|_| rng.normal() * sigma).collect(),
        &[c_out, c_in_g, k, k],
    )
    .unwrap()
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![0.0; shape.iter().product()], shape).unwrap()
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![1.0; shape.iter().product()], shape).unwrap()
}

// ── shared layers ────────────────────────────────────────────────────

/// Layer norm parameters; the two forward flavours pick the axis.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(ps: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.register(format!("{prefix}.gamma"), ones_param(&[dim])),
            beta: ps.register(format!("{prefix}.beta"), zeros_param(&[dim])),
            eps: 1e-5,
        }
    }

    /// Normalize the last axis of `[..., D]`.
    pub fn forward_last(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_last(tape, x, &self.gamma.get(), &self.beta.get(), self.eps)
    }

    /// Normalize the channel axis of `[B, C, H, W]`.
    pub fn forward_channels(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_channels(tape, x, &self.gamma.get(), &self.beta.get(), self.eps)
    }
}

/// Convolution layer with optional bias.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut CounterRng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.register(
            format!("{prefix}.weight"),
            kaiming_conv(rng, c_out, c_in / groups, k),
        );
        let bias = bias.then(|| ps.register(format!("{prefix}.bias"), zeros_param(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    /// Same layout but zero-filled weights; exchange units start as identity-plus-zero.
    #[allow(clippy::too_many_arguments)]
    pub fn init_zeroed(
        ps: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.register(
            format!("{prefix}.weight"),
            zeros_param(&[c_out, c_in / groups, k, k]),
        );
        let bias = bias.then(|| ps.register(format!("{prefix}.bias"), zeros_param(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(|b| b.get());
        ops::conv2d(
            tape,
            x,
            &self.weight.get(),
            bias.as_ref(),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// Batch norm over `[B, C, H, W]` with running statistics (momentum 0.1).
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn init(ps: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        BatchNorm2d {
            gamma: ps.register(format!("{prefix}.gamma"), ones_param(&[dim])),
            beta: ps.register(format!("{prefix}.beta"), zeros_param(&[dim])),
            running_mean: ps.register_buffer(
                format!("{prefix}.running_mean"),
                vec![0.0; dim],
                vec![dim],
            ),
            running_var: ps.register_buffer(
                format!("{prefix}.running_var"),
                vec![1.0; dim],
                vec![dim],
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            let (y, mean, var) =
                ops::batch_norm_train(tape, x, &self.gamma.get(), &self.beta.get(), self.eps)?;
            let mut rm = self.running_mean.get();
            let mut rv = self.running_var.get();
            for i in 0..rm.len() {
                rm[i] = (1.0 - self.momentum) * rm[i] + self.momentum * mean[i];
                rv[i] = (1.0 - self.momentum) * rv[i] + self.momentum * var[i];
            }
            self.running_mean.set(rm);
            self.running_var.set(rv);
            Ok(y)
        } else {
            ops::batch_norm_eval(
                tape,
                x,
                &self.gamma.get(),
                &self.beta.get(),
                &self.running_mean.get(),
                &self.running_var.get(),
                self.eps,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_set_roundtrips_through_snapshot() {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(1);
        let w = ps.register("w".into(), trunc_normal(&mut rng, &[2, 3], 0.02));
        ps.register_buffer("stats".into(), vec![1.0, 2.0], vec![2]);
        let snap = ps.snapshot();
        assert_eq!(snap.len(), 2);
        w.set(vec![9.0; 6]);
        ps.restore(&snap).unwrap();
        assert_eq!(w.get().data(), snap[0].1.data());
    }

    #[test]
    fn batch_norm_running_stats_update_with_momentum() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm2d::init(&mut ps, "bn", 1);
        let tape = Tape::new();
        let x = Tensor::new(vec![2.0, 2.0, 2.0, 2.0], &[1, 1, 2, 2]).unwrap();
        bn.forward(&tape, &x, true).unwrap();
        let rm = bn.running_mean.get();
        assert!((rm[0] - 0.2).abs() < 1e-12); // 0.9*0 + 0.1*2
        let rv = bn.running_var.get();
        assert!((rv[0] - 0.9).abs() < 1e-12); // 0.9*1 + 0.1*0
    }

    #[test]
    fn eval_mode_is_deterministic_and_leaves_stats_alone() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm2d::init(&mut ps, "bn", 2);
        let tape = Tape::inference();
        let x = Tensor::new((0..8).map(|v| v as f64).collect(), &[1, 2, 2, 2]).unwrap();
        let y1 = bn.forward(&tape, &x, false).unwrap();
        let y2 = bn.forward(&tape, &x, false).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(bn.running_mean.get(), vec![0.0, 0.0]);
    }
}
