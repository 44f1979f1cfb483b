//! Central finite-difference gradient oracle.
//!
//! Analytic gradients from the tape are compared against
//! `(f(x+ε) - f(x-ε)) / 2ε` element by element. This is the independent
//! check every operation and the full model answer to; it deliberately knows
//! nothing about the backward rules.

use super::{Tape, Tensor};
use crate::error::Result;

/// Default probe step. With f64 and unit-scale values the truncation and
/// round-off errors meet around 1e-10 relative, far below the 1e-4 gate.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked elements.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    /// Total number of elements compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely (the finite-difference noise floor is ~1e-10).
#[inline]
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check the gradient of `f` with respect to every element of every input.
///
/// `f` must rebuild its graph from the given leaves on each call and return
/// a scalar. The inputs are replaced wholesale for each probe, so `f` must
/// not capture them elsewhere.
pub fn check_fn(
    inputs: &[Tensor],
    eps: f64,
    f: &dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    // analytic pass
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape()).unwrap())
        .collect();
    let tape = Tape::new();
    let loss = f(&tape, &leaves)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    // numeric probes
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let eval = |delta: f64| -> Result<f64> {
                let probes: Vec<Tensor> = base
                    .iter()
                    .enumerate()
                    .map(|(j, d)| {
                        let mut d = d.clone();
                        if j == i {
                            d[e] += delta;
                        }
                        Tensor::param(d, inputs[j].shape()).unwrap()
                    })
                    .collect();
                let t = Tape::inference();
                Ok(f(&t, &probes)?.item())
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let err = rel_err(analytic[i][e], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}

/// Run `instances` finite-difference checks for every tensor operation and
/// return one report per op family. Random inputs are kept away from the
/// kinks of relu/clamp/min/max so the two-sided probe is well defined.
pub fn op_suite(seed: u64, instances: usize, eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use super::ops;
    use crate::rng::CounterRng;

    let root = CounterRng::new(seed);
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();

    // Contract a tensor output to a scalar against a fixed random probe so
    // every output element feeds the loss with a distinct weight.
    fn contract(tape: &Tape, t: &Tensor, probe: &Tensor) -> Result<Tensor> {
        Ok(ops::sum_all(tape, &ops::mul(tape, t, probe)?))
    }
    fn rand(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.range(-1.0, 1.0)).collect(), shape).unwrap()
    }
    // values in ±[0.1, 1.1]: keeps relu/clamp probes off the kink
    fn rand_off_zero(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            (0..n)
                .map(|_| {
                    let v = 0.1 + rng.uniform();
                    if rng.chance(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
            shape,
        )
        .unwrap()
    }

    let mut run_many =
        |name: &str,
         build: &mut dyn FnMut(&mut CounterRng) -> (Vec<Tensor>, Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>)|
         -> Result<()> {
            let mut worst = GradCheckReport {
                max_rel_err: 0.0,
                worst: (0, 0),
                checked: 0,
            };
            let mut rng = root.derive(name);
            for _ in 0..instances {
                let (inputs, f) = build(&mut rng);
                let rep = check_fn(&inputs, eps, f.as_ref())?;
                worst.checked += rep.checked;
                if rep.max_rel_err > worst.max_rel_err {
                    worst.max_rel_err = rep.max_rel_err;
                    worst.worst = rep.worst;
                }
            }
            out.push((name.to_string(), worst));
            Ok(())
        };

    run_many("add", &mut |rng| {
        let (a, b, p) = (rand(rng, &[3, 4]), rand(rng, &[3, 4]), rand(rng, &[3, 4]));
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::add(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("sub", &mut |rng| {
        let (a, b, p) = (rand(rng, &[2, 5]), rand(rng, &[2, 5]), rand(rng, &[2, 5]));
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::sub(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("mul", &mut |rng| {
        let (a, b, p) = (rand(rng, &[4, 3]), rand(rng, &[4, 3]), rand(rng, &[4, 3]));
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::mul(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("div", &mut |rng| {
        let a = rand(rng, &[3, 3]);
        let b = rand_off_zero(rng, &[3, 3]);
        let p = rand(rng, &[3, 3]);
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::div(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("neg", &mut |rng| {
        let (a, p) = (rand(rng, &[6]), rand(rng, &[6]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::neg(t, &ins[0]), &p)))
    })?;
    run_many("add_scalar", &mut |rng| {
        let (a, p) = (rand(rng, &[5]), rand(rng, &[5]));
        let c = rng.range(-2.0, 2.0);
        (vec![a], Box::new(move |t, ins| contract(t, &ops::add_scalar(t, &ins[0], c), &p)))
    })?;
    run_many("mul_scalar", &mut |rng| {
        let (a, p) = (rand(rng, &[5]), rand(rng, &[5]));
        let c = rng.range(-2.0, 2.0);
        (vec![a], Box::new(move |t, ins| contract(t, &ops::mul_scalar(t, &ins[0], c), &p)))
    })?;
    run_many("relu", &mut |rng| {
        let (a, p) = (rand_off_zero(rng, &[4, 4]), rand(rng, &[4, 4]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::relu(t, &ins[0]), &p)))
    })?;
    run_many("gelu", &mut |rng| {
        let (a, p) = (rand(rng, &[4, 4]), rand(rng, &[4, 4]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::gelu(t, &ins[0]), &p)))
    })?;
    run_many("sigmoid", &mut |rng| {
        let (a, p) = (rand(rng, &[8]), rand(rng, &[8]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::sigmoid(t, &ins[0]), &p)))
    })?;
    run_many("softplus", &mut |rng| {
        let (a, p) = (rand(rng, &[8]), rand(rng, &[8]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::softplus(t, &ins[0]), &p)))
    })?;
    run_many("exp", &mut |rng| {
        let (a, p) = (rand(rng, &[8]), rand(rng, &[8]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::exp(t, &ins[0]), &p)))
    })?;
    run_many("clamp", &mut |rng| {
        let (a, p) = (rand_off_zero(rng, &[8]), rand(rng, &[8]));
        // clamp at ±1.2 keeps every |value| in [0.1, 1.1] strictly inside
        (vec![a], Box::new(move |t, ins| contract(t, &ops::clamp(t, &ins[0], -1.2, 1.2), &p)))
    })?;
    run_many("maximum", &mut |rng| {
        let a = rand(rng, &[3, 4]);
        // keep the two operands separated so ±eps cannot flip the winner
        let b_data: Vec<f64> = a
            .data()
            .iter()
            .map(|&v| if rng.chance(0.5) { v + 0.05 + rng.uniform() } else { v - 0.05 - rng.uniform() })
            .collect();
        let b = Tensor::new(b_data, &[3, 4]).unwrap();
        let p = rand(rng, &[3, 4]);
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::maximum(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("minimum", &mut |rng| {
        let a = rand(rng, &[3, 4]);
        let b_data: Vec<f64> = a
            .data()
            .iter()
            .map(|&v| if rng.chance(0.5) { v + 0.05 + rng.uniform() } else { v - 0.05 - rng.uniform() })
            .collect();
        let b = Tensor::new(b_data, &[3, 4]).unwrap();
        let p = rand(rng, &[3, 4]);
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::minimum(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("matmul", &mut |rng| {
        let (a, b, p) = (rand(rng, &[3, 4]), rand(rng, &[4, 2]), rand(rng, &[3, 2]));
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::matmul(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("linear", &mut |rng| {
        let (x, w, b) = (rand(rng, &[2, 3, 4]), rand(rng, &[4, 3]), rand(rng, &[3]));
        let p = rand(rng, &[2, 3, 3]);
        (
            vec![x, w, b],
            Box::new(move |t, ins| contract(t, &ops::linear(t, &ins[0], &ins[1], Some(&ins[2]))?, &p)),
        )
    })?;
    run_many("bmm", &mut |rng| {
        let (a, b, p) = (rand(rng, &[2, 3, 4]), rand(rng, &[2, 4, 2]), rand(rng, &[2, 3, 2]));
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::bmm(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("bmm_t", &mut |rng| {
        let (a, b, p) = (rand(rng, &[2, 3, 4]), rand(rng, &[2, 5, 4]), rand(rng, &[2, 3, 5]));
        (vec![a, b], Box::new(move |t, ins| contract(t, &ops::bmm_t(t, &ins[0], &ins[1])?, &p)))
    })?;
    run_many("softmax", &mut |rng| {
        let (a, p) = (rand(rng, &[3, 6]), rand(rng, &[3, 6]));
        (vec![a], Box::new(move |t, ins| contract(t, &ops::softmax(t, &ins[0])?, &p)))
    })?;
    for (name, stride, padding, groups, ci, co) in [
        ("conv2d", 1usize, 1usize, 1usize, 3usize, 4usize),
        ("conv2d_strided", 2, 1, 1, 3, 4),
        ("conv2d_grouped", 1, 1, 2, 4, 4),
        ("conv2d_depthwise", 1, 1, 4, 4, 4),
    ] {
        run_many(name, &mut |rng| {
            let x = rand(rng, &[2, ci, 5, 5]);
            let w = rand(rng, &[co, ci / groups, 3, 3]);
            let b = rand(rng, &[co]);
            let oh = (5 + 2 * padding - 3) / stride + 1;
            let p = rand(rng, &[2, co, oh, oh]);
            (
                vec![x, w, b],
                Box::new(move |t, ins| {
                    contract(
                        t,
                        &ops::conv2d(t, &ins[0], &ins[1], Some(&ins[2]), stride, padding, groups)?,
                        &p,
                    )
                }),
            )
        })?;
    }
    run_many("layer_norm_last", &mut |rng| {
        let (x, g, b) = (rand(rng, &[3, 5]), rand_off_zero(rng, &[5]), rand(rng, &[5]));
        let p = rand(rng, &[3, 5]);
        (
            vec![x, g, b],
            Box::new(move |t, ins| contract(t, &ops::layer_norm_last(t, &ins[0], &ins[1], &ins[2], 1e-5)?, &p)),
        )
    })?;
    run_many("layer_norm_channels", &mut |rng| {
        let (x, g, b) = (rand(rng, &[2, 4, 3, 3]), rand_off_zero(rng, &[4]), rand(rng, &[4]));
        let p = rand(rng, &[2, 4, 3, 3]);
        (
            vec![x, g, b],
            Box::new(move |t, ins| {
                contract(t, &ops::layer_norm_channels(t, &ins[0], &ins[1], &ins[2], 1e-5)?, &p)
            }),
        )
    })?;
    run_many("batch_norm_train", &mut |rng| {
        let (x, g, b) = (rand(rng, &[2, 3, 4, 4]), rand_off_zero(rng, &[3]), rand(rng, &[3]));
        let p = rand(rng, &[2, 3, 4, 4]);
        (
            vec![x, g, b],
            Box::new(move |t, ins| {
                let (y, _, _) = ops::batch_norm_train(t, &ins[0], &ins[1], &ins[2], 1e-5)?;
                contract(t, &y, &p)
            }),
        )
    })?;
    run_many("batch_norm_eval", &mut |rng| {
        let (x, g, b) = (rand(rng, &[2, 3, 4, 4]), rand_off_zero(rng, &[3]), rand(rng, &[3]));
        let mean: Vec<f64> = (0..3).map(|_| rng.range(-0.5, 0.5)).collect();
        let var: Vec<f64> = (0..3).map(|_| rng.range(0.5, 1.5)).collect();
        let p = rand(rng, &[2, 3, 4, 4]);
        (
            vec![x, g, b],
            Box::new(move |t, ins| {
                contract(t, &ops::batch_norm_eval(t, &ins[0], &ins[1], &ins[2], &mean, &var, 1e-5)?, &p)
            }),
        )
    })?;
    run_many("nearest_upsample", &mut |rng| {
        let x = rand(rng, &[1, 2, 3, 3]);
        let p = rand(rng, &[1, 2, 6, 6]);
        (vec![x], Box::new(move |t, ins| contract(t, &ops::nearest_upsample(t, &ins[0], 2)?, &p)))
    })?;
    run_many("reshape", &mut |rng| {
        let (x, p) = (rand(rng, &[3, 4]), rand(rng, &[2, 6]));
        (vec![x], Box::new(move |t, ins| contract(t, &ops::reshape(t, &ins[0], &[2, 6])?, &p)))
    })?;
    run_many("permute", &mut |rng| {
        let (x, p) = (rand(rng, &[2, 3, 4]), rand(rng, &[4, 2, 3]));
        (vec![x], Box::new(move |t, ins| contract(t, &ops::permute(t, &ins[0], &[2, 0, 1])?, &p)))
    })?;
    run_many("slice", &mut |rng| {
        let (x, p) = (rand(rng, &[4, 5]), rand(rng, &[2, 3]));
        (vec![x], Box::new(move |t, ins| contract(t, &ops::slice(t, &ins[0], &[1, 2], &[2, 3])?, &p)))
    })?;
    run_many("pad", &mut |rng| {
        let (x, p) = (rand(rng, &[2, 3]), rand(rng, &[4, 4]));
        (vec![x], Box::new(move |t, ins| contract(t, &ops::pad(t, &ins[0], &[(1, 1), (0, 1)])?, &p)))
    })?;
    run_many("concat", &mut |rng| {
        let (a, b, p) = (rand(rng, &[2, 2]), rand(rng, &[2, 3]), rand(rng, &[2, 5]));
        (
            vec![a, b],
            Box::new(move |t, ins| contract(t, &ops::concat(t, &[&ins[0], &ins[1]], 1)?, &p)),
        )
    })?;
    run_many("sum_all", &mut |rng| {
        let x = rand(rng, &[3, 3]);
        (vec![x], Box::new(move |t, ins| Ok(ops::sum_all(t, &ins[0]))))
    })?;
    run_many("index_select_rows", &mut |rng| {
        let (x, p) = (rand(rng, &[4, 3]), rand(rng, &[3, 3]));
        let idx: Vec<usize> = (0..3).map(|_| rng.below(4) as usize).collect();
        (
            vec![x],
            Box::new(move |t, ins| contract(t, &ops::index_select_rows(t, &ins[0], &idx)?, &p)),
        )
    })?;

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn catches_a_wrong_gradient() {
        // sum(x*x) but pretending d/dx = x (missing factor 2) must fail
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let report = check_fn(&[x], DEFAULT_EPS, &|tape, ins| {
            // correct forward, correct backward: passes
            let y = ops::mul(tape, &ins[0], &ins[0])?;
            Ok(ops::sum_all(tape, &y))
        })
        .unwrap();
        assert!(report.passes(1e-4));

        // a deliberately broken function: use detached copy for one factor so
        // half the gradient is lost
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let report = check_fn(&[x], DEFAULT_EPS, &|tape, ins| {
            let y = ops::mul(tape, &ins[0], &ins[0].detach())?;
            Ok(ops::sum_all(tape, &y))
        })
        .unwrap();
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn op_suite_smoke() {
        // the acceptance suite runs 20 instances per op; 2 here keeps the
        // unit run quick while still exercising every op's backward rule
        let reports = op_suite(123, 2, DEFAULT_EPS).unwrap();
        assert!(reports.len() >= 30);
        for (name, rep) in &reports {
            assert!(rep.passes(1e-4), "{name}: max rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn composite_graph_passes() {
        let x = Tensor::new(vec![0.3, -0.7, 1.2, 0.5], &[2, 2]).unwrap();
        let w = Tensor::new(vec![0.1, -0.4, 0.8, 0.2], &[2, 2]).unwrap();
        let report = check_fn(&[x, w], DEFAULT_EPS, &|tape, ins| {
            let h = ops::matmul(tape, &ins[0], &ins[1])?;
            let a = ops::gelu(tape, &h);
            let s = ops::softmax(tape, &a)?;
            Ok(ops::sum_all(tape, &ops::mul(tape, &s, &a)?))
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }
}
