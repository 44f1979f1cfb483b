use super::{debug_check_finite, Tape, Tensor};
use crate::error::{Error, Result};

/// Softmax over the last axis, stabilized by row-max subtraction.
pub fn softmax(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let n = match x.shape().last() {
        Some(&n) if n > 0 => n,
        _ => {
            return Err(Error::invalid(
                "softmax",
                x.shape(),
                "needs a non-empty last axis",
            ))
        }
    };
    let mut data = vec![0.0; x.len()];
    for (row_in, row_out) in x.data().chunks(n).zip(data.chunks_mut(n)) {
        let m = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in row_out.iter_mut() {
            *o *= inv;
        }
    }
    debug_check_finite("softmax", &data);
    tape.add_flops(5 * x.len() as u64);
    let out = Tensor::leaf(data, x.shape().to_vec(), false);
    let yc = out.clone();
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            // dx = y ⊙ (g − ⟨g, y⟩) per row
            let mut dx = vec![0.0; g.len()];
            for ((gr, yr), dr) in g.chunks(n).zip(yc.data().chunks(n)).zip(dx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            sink(0, dx);
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn uniform_row() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[4]);
        let y = softmax(&tape, &x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1000.0, 0.0], &[2]).unwrap();
        let y = softmax(&tape, &x).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn matches_direct_exp_sum_oracle() {
        let mut rng = CounterRng::new(3);
        let tape = Tape::new();
        let vals: Vec<f64> = (0..8).map(|_| rng.range(-3.0, 3.0)).collect();
        let y = softmax(&tape, &Tensor::new(vals.clone(), &[8]).unwrap()).unwrap();
        let sum: f64 = vals.iter().map(|v| v.exp()).sum();
        for (&got, &v) in y.data().iter().zip(&vals) {
            assert!((got - v.exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one_and_stay_in_unit_interval() {
        let mut rng = CounterRng::new(5);
        let tape = Tape::new();
        for _ in 0..20 {
            let vals: Vec<f64> = (0..3 * 7).map(|_| rng.range(-50.0, 50.0)).collect();
            let y = softmax(&tape, &Tensor::new(vals, &[3, 7]).unwrap()).unwrap();
            for row in y.data().chunks(7) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn empty_axis_is_a_shape_error() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[3, 0]);
        assert!(softmax(&tape, &x).is_err());
    }
}
