use super::{check_same_shape, debug_check_finite, Tape, Tensor};
use crate::error::Result;

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

fn unary(
    tape: &Tape,
    name: &'static str,
    x: &Tensor,
    flops_per_elem: u64,
    f: impl Fn(f64) -> f64,
    // derivative dy/dx as a function of the input value
    df: impl Fn(f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    debug_check_finite(name, &data);
    tape.add_flops(flops_per_elem * x.len() as u64);
    let out = Tensor::leaf(data, x.shape().to_vec(), false);
    let xc = x.clone();
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let ig: Vec<f64> = xc
                .data()
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| gv * df(xv))
                .collect();
            sink(0, ig);
        }),
    );
    out
}

pub fn neg(tape: &Tape, x: &Tensor) -> Tensor {
    unary(tape, "neg", x, 1, |v| -v, |_| -1.0)
}

pub fn relu(tape: &Tape, x: &Tensor) -> Tensor {
    unary(
        tape,
        "relu",
        x,
        1,
        |v| v.max(0.0),
        |v| if v > 0.0 { 1.0 } else { 0.0 },
    )
}

pub fn exp(tape: &Tape, x: &Tensor) -> Tensor {
    unary(tape, "exp", x, 4, f64::exp, f64::exp)
}

pub fn sigmoid(tape: &Tape, x: &Tensor) -> Tensor {
    fn sig(v: f64) -> f64 {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    }
    unary(tape, "sigmoid", x, 4, sig, |v| {
        let s = sig(v);
        s * (1.0 - s)
    })
}

/// Numerically stable `ln(1 + e^x)`; derivative is the sigmoid.
pub fn softplus(tape: &Tape, x: &Tensor) -> Tensor {
    unary(
        tape,
        "softplus",
        x,
        4,
        |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
        |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        },
    )
}

/// tanh(u) through a single exp; saturates exactly beyond |u| > 20 where
/// tanh is 1 to f64 precision.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u > 20.0 {
        1.0
    } else if u < -20.0 {
        -1.0
    } else {
        let e = (2.0 * u).exp();
        (e - 1.0) / (e + 1.0)
    }
}

/// Tanh-form GELU; the backward rule differentiates the same approximation.
pub fn gelu(tape: &Tape, x: &Tensor) -> Tensor {
    unary(
        tape,
        "gelu",
        x,
        8,
        |v| {
            let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
            0.5 * v * (1.0 + fast_tanh(u))
        },
        |v| {
            let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
            let t = fast_tanh(u);
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        },
    )
}

/// Clamp to `[lo, hi]`; gradient passes through strictly inside the range.
pub fn clamp(tape: &Tape, x: &Tensor, lo: f64, hi: f64) -> Tensor {
    unary(
        tape,
        "clamp",
        x,
        1,
        move |v| v.clamp(lo, hi),
        move |v| if v > lo && v < hi { 1.0 } else { 0.0 },
    )
}

pub fn add_scalar(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    unary(tape, "add_scalar", x, 1, move |v| v + c, |_| 1.0)
}

pub fn mul_scalar(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    unary(tape, "mul_scalar", x, 1, move |v| v * c, move |_| c)
}

fn binary(
    tape: &Tape,
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    flops_per_elem: u64,
    f: impl Fn(f64, f64) -> f64,
    // (da, db) as functions of the two input values
    df: impl Fn(f64, f64) -> (f64, f64) + 'static,
) -> Result<Tensor> {
    check_same_shape(name, a, b)?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    debug_check_finite(name, &data);
    tape.add_flops(flops_per_elem * a.len() as u64);
    let out = Tensor::leaf(data, a.shape().to_vec(), false);
    let (ac, bc) = (a.clone(), b.clone());
    tape.record(
        &out,
        &[a, b],
        Box::new(move |g, sink| {
            let n = g.len();
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..n {
                let (da, db) = df(ac.data()[i], bc.data()[i]);
                ga[i] = g[i] * da;
                gb[i] = g[i] * db;
            }
            sink(0, ga);
            sink(1, gb);
        }),
    );
    Ok(out)
}

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "add", a, b, 1, |x, y| x + y, |_, _| (1.0, 1.0))
}

pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "sub", a, b, 1, |x, y| x - y, |_, _| (1.0, -1.0))
}

pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "mul", a, b, 1, |x, y| x * y, |x, y| (y, x))
}

pub fn div(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        tape,
        "div",
        a,
        b,
        1,
        |x, y| x / y,
        |x, y| (1.0 / y, -x / (y * y)),
    )
}

/// Elementwise max; on ties the gradient goes to the first operand.
pub fn maximum(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        tape,
        "maximum",
        a,
        b,
        1,
        f64::max,
        |x, y| if x >= y { (1.0, 0.0) } else { (0.0, 1.0) },
    )
}

/// Elementwise min; on ties the gradient goes to the first operand.
pub fn minimum(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        tape,
        "minimum",
        a,
        b,
        1,
        f64::min,
        |x, y| if x <= y { (1.0, 0.0) } else { (0.0, 1.0) },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_requires_matching_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = add(&tape, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1000.0, -1000.0, 0.0], &[3]).unwrap();
        let y = sigmoid(&tape, &x);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[2], 0.5);
    }

    #[test]
    fn softplus_large_inputs_stay_finite() {
        let tape = Tape::new();
        let x = Tensor::new(vec![800.0, -800.0], &[2]).unwrap();
        let y = softplus(&tape, &x);
        assert!((y.data()[0] - 800.0).abs() < 1e-9);
        assert!(y.data()[1].abs() < 1e-9);
    }

    #[test]
    fn clamp_gradient_zero_outside_range() {
        let tape = Tape::new();
        let x = Tensor::param(vec![-2.0, 0.5, 2.0], &[3]).unwrap();
        let y = clamp(&tape, &x, -1.0, 1.0);
        let s = super::super::sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
