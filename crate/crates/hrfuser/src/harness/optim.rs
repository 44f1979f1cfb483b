//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(ps: &ParamSet, betas: (f64, f64), weight_decay: f64) -> Self {
        let m = ps.params().iter().map(|(_, p)| vec![0.0; p.get().len()]).collect();
        let v = ps.params().iter().map(|(_, p)| vec![0.0; p.get().len()]).collect();
        AdamW {
            m,
            v,
            t: 0,
            betas,
            weight_decay,
            eps: 1e-8,
        }
    }

    /// One update over every parameter. Parameters without a gradient this
    /// step are treated as zero-gradient (they still decay).
    pub fn step(&mut self, ps: &ParamSet, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, (name, p)) in ps.params().iter().enumerate() {
            let value = p.get();
            let grad = value.grad();
            let g = match &grad {
                Some(g) => g.data(),
                None => &[],
            };
            if !g.is_empty() && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient in {name}")));
            }
            let mut data = value.data().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for e in 0..data.len() {
                let ge = if g.is_empty() { 0.0 } else { g[e] };
                m[e] = b1 * m[e] + (1.0 - b1) * ge;
                v[e] = b2 * v[e] + (1.0 - b2) * ge * ge;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                data[e] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[e]);
            }
            p.set(data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tape, Tensor};

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let w = ps.register("w".into(), Tensor::param(vec![3.0, -2.0], &[2]).unwrap());
        let mut opt = AdamW::new(&ps, (0.9, 0.999), 0.0);
        for _ in 0..400 {
            let tape = Tape::new();
            let x = w.get();
            let loss = ops::sum_all(&tape, &ops::mul(&tape, &x, &x).unwrap());
            tape.backward(&loss).unwrap();
            opt.step(&ps, 0.05).unwrap();
            ps.zero_grad();
        }
        assert!(w.get().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.register("w".into(), Tensor::param(vec![1.0], &[1]).unwrap());
        let mut opt = AdamW::new(&ps, (0.9, 0.999), 0.1);
        opt.step(&ps, 0.5).unwrap();
        let v = w.get().data()[0];
        assert!((v - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }
}
