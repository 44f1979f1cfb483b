use super::{debug_check_finite, Tape, Tensor};
use crate::error::{Error, Result};

/// Same data, new shape. Element count must be preserved.
pub fn reshape(tape: &Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.len() {
        return Err(Error::invalid(
            "reshape",
            x.shape(),
            format!("cannot reshape {} values to {shape:?}", x.len()),
        ));
    }
    let out = x.view(shape.to_vec());
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| sink(0, g.to_vec())),
    );
    Ok(out)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    // nested-loop fast paths for the common ranks (the generic walk below
    // pays a division per axis per element)
    match axes.len() {
        2 | 3 | 4 => {
            let mut os = out_shape.clone();
            let mut ax = axes.to_vec();
            while os.len() < 4 {
                os.insert(0, 1);
                for a in ax.iter_mut() {
                    *a += 1;
                }
                ax.insert(0, 0);
            }
            let mut st = vec![0usize; 4];
            let pad = 4 - in_strides.len();
            for (i, &a) in ax.iter().enumerate() {
                st[i] = if a < pad { 0 } else { in_strides[a - pad] };
            }
            let mut o = 0;
            for i0 in 0..os[0] {
                for i1 in 0..os[1] {
                    for i2 in 0..os[2] {
                        let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                        for i3 in 0..os[3] {
                            out[o] = data[base + i3 * st[3]];
                            o += 1;
                        }
                    }
                }
            }
        }
        _ => {
            let out_strides = strides_of(&out_shape);
            let rank = shape.len();
            for (o, slot) in out.iter_mut().enumerate() {
                let mut rem = o;
                let mut src = 0;
                for d in 0..rank {
                    let q = rem / out_strides[d];
                    rem %= out_strides[d];
                    src += q * in_strides[axes[d]];
                }
                *slot = data[src];
            }
        }
    }
    (out, out_shape)
}

/// Reorder axes; `axes` must be a permutation of `0..rank`.
pub fn permute(tape: &Tape, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || !axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(
            "permute",
            x.shape(),
            format!("axes {axes:?} is not a permutation of 0..{rank}"),
        ));
    }
    let (data, out_shape) = permute_copy(x.data(), x.shape(), axes);
    let out = Tensor::leaf(data, out_shape.clone(), false);
    let mut inverse = vec![0usize; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let (gi, _) = permute_copy(g, &out_shape, &inverse);
            sink(0, gi);
        }),
    );
    Ok(out)
}

/// Rectangular slice: `out[i...] = x[starts + i...]`, one `(start, len)` per axis.
pub fn slice(tape: &Tape, x: &Tensor, starts: &[usize], lens: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    if starts.len() != rank || lens.len() != rank {
        return Err(Error::invalid("slice", x.shape(), "starts/lens rank mismatch"));
    }
    for a in 0..rank {
        if lens[a] == 0 || starts[a] + lens[a] > x.shape()[a] {
            return Err(Error::invalid(
                "slice",
                x.shape(),
                format!("range {}..{} out of bounds on axis {a}", starts[a], starts[a] + lens[a]),
            ));
        }
    }
    let in_strides = strides_of(x.shape());
    let out_strides = strides_of(lens);
    let numel: usize = lens.iter().product();
    let mut data = vec![0.0; numel];
    let xs = x.data();
    for (o, slot) in data.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0;
        for d in 0..rank {
            let q = rem / out_strides[d];
            rem %= out_strides[d];
            src += (q + starts[d]) * in_strides[d];
        }
        *slot = xs[src];
    }
    let out = Tensor::leaf(data, lens.to_vec(), false);
    let starts = starts.to_vec();
    let lens_v = lens.to_vec();
    let in_shape = x.shape().to_vec();
    let in_len = x.len();
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let in_strides = strides_of(&in_shape);
            let out_strides = strides_of(&lens_v);
            let mut gi = vec![0.0; in_len];
            for (o, &gv) in g.iter().enumerate() {
                let mut rem = o;
                let mut dst = 0;
                for d in 0..in_shape.len() {
                    let q = rem / out_strides[d];
                    rem %= out_strides[d];
                    dst += (q + starts[d]) * in_strides[d];
                }
                gi[dst] = gv;
            }
            sink(0, gi);
        }),
    );
    Ok(out)
}

/// Zero-pad with `(before, after)` amounts per axis.
pub fn pad(tape: &Tape, x: &Tensor, amounts: &[(usize, usize)]) -> Result<Tensor> {
    let rank = x.rank();
    if amounts.len() != rank {
        return Err(Error::invalid("pad", x.shape(), "amounts rank mismatch"));
    }
    let out_shape: Vec<usize> = x
        .shape()
        .iter()
        .zip(amounts)
        .map(|(&d, &(b, a))| d + b + a)
        .collect();
    let in_strides = strides_of(x.shape());
    let out_strides = strides_of(&out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    let xs = x.data();
    // copy the interior; everything else stays zero
    for (i, &v) in xs.iter().enumerate() {
        let mut rem = i;
        let mut dst = 0;
        for d in 0..rank {
            let q = rem / in_strides[d];
            rem %= in_strides[d];
            dst += (q + amounts[d].0) * out_strides[d];
        }
        data[dst] = v;
    }
    let out = Tensor::leaf(data, out_shape, false);
    let starts: Vec<usize> = amounts.iter().map(|&(b, _)| b).collect();
    let lens: Vec<usize> = x.shape().to_vec();
    let out_shape_c = out.shape().to_vec();
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let out_strides = strides_of(&out_shape_c);
            let in_strides = strides_of(&lens);
            let numel: usize = lens.iter().product();
            let mut gi = vec![0.0; numel];
            for (i, slot) in gi.iter_mut().enumerate() {
                let mut rem = i;
                let mut src = 0;
                for d in 0..lens.len() {
                    let q = rem / in_strides[d];
                    rem %= in_strides[d];
                    src += (q + starts[d]) * out_strides[d];
                }
                *slot = g[src];
            }
            sink(0, gi);
        }),
    );
    Ok(out)
}

/// Concatenate along `axis`; all other dimensions must match.
pub fn concat(tape: &Tape, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat: empty input".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::invalid("concat", first.shape(), format!("axis {axis} out of range")));
    }
    let mut cat_dim = 0;
    for p in parts {
        if p.rank() != rank {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        cat_dim += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = cat_dim;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * cat_dim * inner];
    let row = cat_dim * inner;
    let mut off = 0;
    let mut part_rows = Vec::with_capacity(parts.len());
    for p in parts {
        let pr = p.shape()[axis] * inner;
        for o in 0..outer {
            data[o * row + off..o * row + off + pr].copy_from_slice(&p.data()[o * pr..(o + 1) * pr]);
        }
        part_rows.push((off, pr));
        off += pr;
    }
    let out = Tensor::leaf(data, out_shape, false);
    let refs: Vec<&Tensor> = parts.to_vec();
    tape.record(
        &out,
        &refs,
        Box::new(move |g, sink| {
            for (i, &(off, pr)) in part_rows.iter().enumerate() {
                let mut gp = vec![0.0; outer * pr];
                for o in 0..outer {
                    gp[o * pr..(o + 1) * pr].copy_from_slice(&g[o * row + off..o * row + off + pr]);
                }
                sink(i, gp);
            }
        }),
    );
    Ok(out)
}

/// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
pub fn nearest_upsample(tape: &Tape, x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid("nearest_upsample", x.shape(), "expects [B,C,H,W]"));
    }
    if factor == 0 {
        return Err(Error::Config("nearest_upsample: factor must be >= 1".into()));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut data = vec![0.0; b * c * oh * ow];
    let xs = x.data();
    for plane in 0..b * c {
        let src = &xs[plane * h * w..][..h * w];
        let dst = &mut data[plane * oh * ow..][..oh * ow];
        for y in 0..oh {
            let sy = y / factor;
            for xo in 0..ow {
                dst[y * ow + xo] = src[sy * w + xo / factor];
            }
        }
    }
    let out = Tensor::leaf(data, vec![b, c, oh, ow], false);
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let mut gi = vec![0.0; b * c * h * w];
            for plane in 0..b * c {
                let gsrc = &g[plane * oh * ow..][..oh * ow];
                let gdst = &mut gi[plane * h * w..][..h * w];
                for y in 0..oh {
                    for xo in 0..ow {
                        gdst[(y / factor) * w + xo / factor] += gsrc[y * ow + xo];
                    }
                }
            }
            sink(0, gi);
        }),
    );
    Ok(out)
}

/// Sum of all elements as a 0-d tensor.
pub fn sum_all(tape: &Tape, x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    tape.add_flops(x.len() as u64);
    let out = Tensor::leaf(vec![s], vec![], false);
    let n = x.len();
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| sink(0, vec![g[0]; n])),
    );
    out
}

/// Select rows (axis 0): `out[i] = x[indices[i]]`. Indices may repeat; the
/// backward pass scatter-adds.
pub fn index_select_rows(tape: &Tape, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.rank() < 1 {
        return Err(Error::invalid("index_select_rows", x.shape(), "rank must be >= 1"));
    }
    let rows = x.shape()[0];
    let stride: usize = x.shape()[1..].iter().product();
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(Error::invalid(
            "index_select_rows",
            x.shape(),
            format!("index {bad} out of range for {rows} rows"),
        ));
    }
    let mut data = vec![0.0; indices.len() * stride];
    for (o, &src) in indices.iter().enumerate() {
        data[o * stride..(o + 1) * stride].copy_from_slice(&x.data()[src * stride..(src + 1) * stride]);
    }
    debug_check_finite("index_select_rows", &data);
    let mut out_shape = x.shape().to_vec();
    out_shape[0] = indices.len();
    let out = Tensor::leaf(data, out_shape, false);
    let idx = indices.to_vec();
    let in_len = x.len();
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let mut gi = vec![0.0; in_len];
            for (o, &src) in idx.iter().enumerate() {
                for k in 0..stride {
                    gi[src * stride + k] += g[o * stride + k];
                }
            }
            sink(0, gi);
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn reshape_roundtrip_preserves_data() {
        let tape = Tape::new();
        let x = Tensor::new((0..24).map(|v| v as f64).collect(), &[2, 3, 4]).unwrap();
        let y = reshape(&tape, &x, &[4, 6]).unwrap();
        let z = reshape(&tape, &y, &[2, 3, 4]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn double_permute_is_identity() {
        let tape = Tape::new();
        let mut rng = CounterRng::new(1);
        let x = Tensor::new((0..30).map(|_| rng.range(-1.0, 1.0)).collect(), &[2, 3, 5]).unwrap();
        let y = permute(&tape, &x, &[2, 0, 1]).unwrap();
        let z = permute(&tape, &y, &[1, 2, 0]).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn pad_then_slice_recovers_input() {
        let tape = Tape::new();
        let x = Tensor::new((0..6).map(|v| v as f64 + 1.0).collect(), &[2, 3]).unwrap();
        let p = pad(&tape, &x, &[(1, 0), (0, 2)]).unwrap();
        assert_eq!(p.shape(), &[3, 5]);
        assert_eq!(p.data()[0], 0.0);
        let s = slice(&tape, &p, &[1, 0], &[2, 3]).unwrap();
        assert_eq!(s.data(), x.data());
    }

    #[test]
    fn concat_blocks_along_middle_axis() {
        let tape = Tape::new();
        let a = Tensor::full(&[2, 1, 2], 1.0);
        let b = Tensor::full(&[2, 2, 2], 2.0);
        let c = concat(&tape, &[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(&c.data()[0..2], &[1.0, 1.0]);
        assert_eq!(&c.data()[2..6], &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample_repeats_and_backward_pools() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = nearest_upsample(&tape, &x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(y.at(&[0, 0, 3, 1]), 3.0);
        assert_eq!(y.at(&[0, 0, 3, 2]), 4.0);
        let s = sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn index_select_gathers_and_scatters() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let y = index_select_rows(&tape, &x, &[2, 0, 2]).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
