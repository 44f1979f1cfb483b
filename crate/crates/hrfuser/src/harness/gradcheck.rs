//! Whole-pipeline gradient checks: every parameter of a tiny end-to-end
//! model (backbone, fusion, neck, head, loss) against central finite
//! differences on sampled elements.

use crate::detection::{compute_loss, GroundTruthBox};
use crate::error::Result;
use crate::rng::CounterRng;
use crate::sensing::Box2D;
use crate::tensor::{gradcheck, Tape, Tensor};

use super::config::ExperimentConfig;
use super::train::Detector;
use crate::backbone::ModelInputs;

/// Result of the end-to-end check.
pub struct ModelGradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub elements_checked: usize,
}

/// FD-check the tiny (4,8,16,32) model on a 28×28 camera+lidar input:
/// `elements_per_param` sampled elements of every parameter, plus a sample
/// of input pixels.
pub fn end_to_end_gradcheck(seed: u64, elements_per_param: usize) -> Result<ModelGradReport> {
    let mut exp = ExperimentConfig::default();
    exp.set("seed", &seed.to_string())?;
    exp.set("modalities", "lidar:3")?;
    exp.set("image_size", "28")?;
    exp.set("head_width", "8")?;
    exp.set("neck_channels", "16")?;
    let det = Detector::build(&exp)?;

    let mut rng = CounterRng::new(seed).derive("e2e-gradcheck");
    let mk = |rng: &mut CounterRng, c: usize| {
        Tensor::new(
            (0..c * 28 * 28).map(|_| rng.range(-1.0, 1.0)).collect(),
            &[1, c, 28, 28],
        )
        .unwrap()
    };
    let primary = mk(&mut rng, 3);
    let lidar = mk(&mut rng, 3);
    let gts = vec![vec![
        GroundTruthBox {
            rect: Box2D::new(3.0, 4.0, 17.0, 20.0),
            class: 0,
        },
        GroundTruthBox {
            rect: Box2D::new(18.0, 14.0, 27.0, 26.0),
            class: 1,
        },
    ]];

    let loss_of = |det: &Detector, tape: &Tape| -> Result<Tensor> {
        let inputs = ModelInputs {
            primary: primary.clone(),
            secondaries: vec![lidar.clone()],
        };
        let out = det.forward(tape, &inputs, true)?;
        compute_loss(tape, &det.head, &out, &gts)
    };

    // analytic gradients
    let tape = Tape::new();
    let loss = loss_of(&det, &tape)?;
    tape.backward(&loss)?;

    let eps = gradcheck::DEFAULT_EPS;
    let mut report = ModelGradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        params_checked: 0,
        elements_checked: 0,
    };
    for (name, p) in det.params.params() {
        let analytic = match p.get().grad() {
            Some(g) => g,
            None => continue, // parameter unused under this configuration
        };
        let base = p.get().data().to_vec();
        let mut pick = rng.derive(name);
        report.params_checked += 1;
        for _ in 0..elements_per_param.min(base.len()) {
            let e = pick.below(base.len() as u64) as usize;
            let eval = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[e] += delta;
                p.set(d);
                let t = Tape::inference();
                let l = loss_of(&det, &t)?;
                Ok(l.item())
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            p.set(base.clone());
            let err = gradcheck::rel_err(analytic.data()[e], fd);
            report.elements_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_end_to_end_model_passes_finite_differences() {
        let report = end_to_end_gradcheck(0, 1).unwrap();
        assert!(report.params_checked > 100);
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
