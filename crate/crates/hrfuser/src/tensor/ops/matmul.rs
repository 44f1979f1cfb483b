use rayon::prelude::*;

use super::{debug_check_finite, Tape, Tensor};
use crate::error::{Error, Result};

/// Below this many multiplies a kernel runs single-threaded; the rayon
/// dispatch overhead dominates otherwise.
const PAR_THRESHOLD: usize = 4_000_000;

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// out[m×n] += a[m×k] · b[k×n]; `out` must be zeroed by the caller.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let row = |i: usize, or: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (l, &av) in ar.iter().enumerate() {
            if av != 0.0 {
                axpy(or, av, &b[l * n..(l + 1) * n]);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .with_min_len(m.div_ceil(8).max(1))
            .enumerate()
            .for_each(|(i, or)| row(i, or));
    } else {
        for (i, or) in out.chunks_mut(n).enumerate() {
            row(i, or);
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ (dot products over contiguous rows).
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let row = |i: usize, or: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in or.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .with_min_len(m.div_ceil(8).max(1))
            .enumerate()
            .for_each(|(i, or)| row(i, or));
    } else {
        for (i, or) in out.chunks_mut(n).enumerate() {
            row(i, or);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n].
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let row = |l: usize, or: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + l];
            if av != 0.0 {
                axpy(or, av, &b[i * n..(i + 1) * n]);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n)
            .with_min_len(k.div_ceil(8).max(1))
            .enumerate()
            .for_each(|(l, or)| row(l, or));
    } else {
        for (l, or) in out.chunks_mut(n).enumerate() {
            row(l, or);
        }
    }
}

/// Matrix product of two rank-2 tensors: `[m×k] · [k×n] -> [m×n]`.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut data = vec![0.0; m * n];
    mm_nn(a.data(), b.data(), m, k, n, &mut data);
    debug_check_finite("matmul", &data);
    tape.add_flops(2 * (m * k * n) as u64);
    let out = Tensor::leaf(data, vec![m, n], false);
    let (ac, bc) = (a.clone(), b.clone());
    tape.record(
        &out,
        &[a, b],
        Box::new(move |g, sink| {
            // da = g · bᵀ ; db = aᵀ · g
            let mut da = vec![0.0; m * k];
            mm_nt(g, bc.data(), m, n, k, &mut da);
            sink(0, da);
            let mut db = vec![0.0; k * n];
            mm_tn(ac.data(), g, m, k, n, &mut db);
            sink(1, db);
        }),
    );
    Ok(out)
}

/// `x[..., d_in] · w[d_in, d_out] (+ bias)` with all leading axes folded.
pub fn linear(tape: &Tape, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() < 1 || *x.shape().last().unwrap() != w.shape()[0] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let d_in = w.shape()[0];
    let d_out = w.shape()[1];
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape("linear(bias)", b.shape(), w.shape()));
        }
    }
    let rows = x.len() / d_in;
    let mut data = vec![0.0; rows * d_out];
    mm_nn(x.data(), w.data(), rows, d_in, d_out, &mut data);
    if let Some(b) = bias {
        for r in data.chunks_mut(d_out) {
            for (o, &bv) in r.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    debug_check_finite("linear", &data);
    tape.add_flops(2 * (rows * d_in * d_out) as u64 + if bias.is_some() { (rows * d_out) as u64 } else { 0 });

    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    let out = Tensor::leaf(data, out_shape, false);

    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    let inputs: Vec<&Tensor> = match bias {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    tape.record(
        &out,
        &inputs,
        Box::new(move |g, sink| {
            let mut dx = vec![0.0; rows * d_in];
            mm_nt(g, wc.data(), rows, d_out, d_in, &mut dx);
            sink(0, dx);
            let mut dw = vec![0.0; d_in * d_out];
            mm_tn(xc.data(), g, rows, d_in, d_out, &mut dw);
            sink(1, dw);
            if has_bias {
                let mut db = vec![0.0; d_out];
                for r in g.chunks(d_out) {
                    for (o, &gv) in db.iter_mut().zip(r) {
                        *o += gv;
                    }
                }
                sink(2, db);
            }
        }),
    );
    Ok(out)
}

fn check_bmm(op: &'static str, a: &Tensor, b: &Tensor, transposed: bool) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let inner_ok = if transposed {
        b.shape()[2] == k
    } else {
        b.shape()[1] == k
    };
    if !inner_ok {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let n = if transposed { b.shape()[1] } else { b.shape()[2] };
    Ok((bs, m, k, n))
}

fn batched(
    bs: usize,
    per_batch_work: usize,
    a: &[f64],
    b: &[f64],
    a_stride: usize,
    b_stride: usize,
    o_stride: usize,
    out: &mut [f64],
    kernel: impl Fn(&[f64], &[f64], &mut [f64]) + Sync,
) {
    let body = |p: usize, o: &mut [f64]| {
        kernel(
            &a[p * a_stride..(p + 1) * a_stride],
            &b[p * b_stride..(p + 1) * b_stride],
            o,
        )
    };
    if bs * per_batch_work >= PAR_THRESHOLD && bs > 1 {
        out.par_chunks_mut(o_stride)
            .with_min_len(bs.div_ceil(8).max(1))
            .enumerate()
            .for_each(|(p, o)| body(p, o));
    } else {
        for (p, o) in out.chunks_mut(o_stride).enumerate() {
            body(p, o);
        }
    }
}

/// Per-batch transpose of the trailing matrix, for kernel selection.
fn transpose_batched(x: &[f64], bs: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..bs {
        let src = &x[p * rows * cols..][..rows * cols];
        let dst = &mut out[p * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Batched matmul: `[B,m,k] · [B,k,n] -> [B,m,n]`.
pub fn bmm(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, m, k, n) = check_bmm("bmm", a, b, false)?;
    let mut data = vec![0.0; bs * m * n];
    if n < 8 && k >= 2 * n {
        // short output rows starve the axpy kernel; dot against bT instead
        let bt = transpose_batched(b.data(), bs, k, n);
        batched(bs, m * k * n, a.data(), &bt, m * k, k * n, m * n, &mut data, |x, y, o| {
            mm_nt(x, y, m, k, n, o)
        });
    } else {
        batched(bs, m * k * n, a.data(), b.data(), m * k, k * n, m * n, &mut data, |x, y, o| {
            mm_nn(x, y, m, k, n, o)
        });
    }
    debug_check_finite("bmm", &data);
    tape.add_flops(2 * (bs * m * k * n) as u64);
    let out = Tensor::leaf(data, vec![bs, m, n], false);
    let (ac, bc) = (a.clone(), b.clone());
    tape.record(
        &out,
        &[a, b],
        Box::new(move |g, sink| {
            let mut da = vec![0.0; bs * m * k];
            batched(bs, m * n * k, g, bc.data(), m * n, k * n, m * k, &mut da, |gp, bp, o| {
                mm_nt(gp, bp, m, n, k, o)
            });
            sink(0, da);
            let mut db = vec![0.0; bs * k * n];
            batched(bs, m * k * n, ac.data(), g, m * k, m * n, k * n, &mut db, |ap, gp, o| {
                mm_tn(ap, gp, m, k, n, o)
            });
            sink(1, db);
        }),
    );
    Ok(out)
}

/// Batched matmul with the second operand transposed:
/// `[B,m,k] · [B,n,k]ᵀ -> [B,m,n]`. Used for attention scores.
pub fn bmm_t(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, m, k, n) = check_bmm("bmm_t", a, b, true)?;
    let mut data = vec![0.0; bs * m * n];
    if k < 8 && n >= 2 * k {
        // short dot products starve the mm_nt kernel; transpose to axpy form
        let bt = transpose_batched(b.data(), bs, n, k);
        batched(bs, m * k * n, a.data(), &bt, m * k, n * k, m * n, &mut data, |x, y, o| {
            mm_nn(x, y, m, k, n, o)
        });
    } else {
        batched(bs, m * k * n, a.data(), b.data(), m * k, n * k, m * n, &mut data, |x, y, o| {
            mm_nt(x, y, m, k, n, o)
        });
    }
    debug_check_finite("bmm_t", &data);
    tape.add_flops(2 * (bs * m * k * n) as u64);
    let out = Tensor::leaf(data, vec![bs, m, n], false);
    let (ac, bc) = (a.clone(), b.clone());
    tape.record(
        &out,
        &[a, b],
        Box::new(move |g, sink| {
            // c = a·bᵀ  =>  da = g·b, db = gᵀ·a (per batch)
            let mut da = vec![0.0; bs * m * k];
            batched(bs, m * n * k, g, bc.data(), m * n, n * k, m * k, &mut da, |gp, bp, o| {
                mm_nn(gp, bp, m, n, k, o)
            });
            sink(0, da);
            let mut db = vec![0.0; bs * n * k];
            batched(bs, m * n * k, g, ac.data(), m * n, m * k, n * k, &mut db, |gp, ap, o| {
                mm_tn(gp, ap, m, n, k, o)
            });
            sink(1, db);
        }),
    );
    Ok(out)
}
