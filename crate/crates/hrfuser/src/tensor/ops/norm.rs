use super::{debug_check_finite, Tape, Tensor};
use crate::error::{Error, Result};

/// Layer norm over the last axis: per row, `(x - mean) / sqrt(var + eps)`
/// scaled by `gamma` and shifted by `beta` (both `[D]`).
pub fn layer_norm_last(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("layer_norm", x.shape(), "rank must be >= 1"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", gamma.shape(), &[d]));
    }
    let rows = x.len() / d;
    let mut data = vec![0.0; x.len()];
    let mut mu = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    for (r, (row_in, row_out)) in x.data().chunks(d).zip(data.chunks_mut(d)).enumerate() {
        let mean = row_in.iter().sum::<f64>() / d as f64;
        let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        mu[r] = mean;
        rstd[r] = rs;
        for ((o, &v), (&g, &b)) in row_out
            .iter_mut()
            .zip(row_in)
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *o = (v - mean) * rs * g + b;
        }
    }
    debug_check_finite("layer_norm", &data);
    tape.add_flops(8 * x.len() as u64);
    let out = Tensor::leaf(data, x.shape().to_vec(), false);
    let (xc, gc) = (x.clone(), gamma.clone());
    tape.record(
        &out,
        &[x, gamma, beta],
        Box::new(move |g, sink| {
            let mut dx = vec![0.0; xc.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (r, (row_x, (row_g, row_dx))) in xc
                .data()
                .chunks(d)
                .zip(g.chunks(d).zip(dx.chunks_mut(d)))
                .enumerate()
            {
                let rs = rstd[r];
                let mean = mu[r];
                // dxhat = g * gamma; dx = rs*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for i in 0..d {
                    let xhat = (row_x[i] - mean) * rs;
                    let dxhat = row_g[i] * gc.data()[i];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                    dgamma[i] += row_g[i] * xhat;
                    dbeta[i] += row_g[i];
                }
                s1 /= d as f64;
                s2 /= d as f64;
                for i in 0..d {
                    let xhat = (row_x[i] - mean) * rs;
                    let dxhat = row_g[i] * gc.data()[i];
                    row_dx[i] = rs * (dxhat - s1 - xhat * s2);
                }
            }
            sink(0, dx);
            sink(1, dgamma);
            sink(2, dbeta);
        }),
    );
    Ok(out)
}

/// Layer norm over the channel axis of an `[B, C, H, W]` map: each spatial
/// position is normalized across its C values.
pub fn layer_norm_channels(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid("layer_norm_channels", x.shape(), "expects [B,C,H,W]"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm_channels", gamma.shape(), &[c]));
    }
    let hw = h * w;
    let xs = x.data();
    let mut data = vec![0.0; x.len()];
    let mut mu = vec![0.0; b * hw];
    let mut rstd = vec![0.0; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let base = bi * c * hw + p;
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xs[base + ch * hw];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let dv = xs[base + ch * hw] - mean;
                var += dv * dv;
            }
            var /= c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mu[bi * hw + p] = mean;
            rstd[bi * hw + p] = rs;
            for ch in 0..c {
                data[base + ch * hw] =
                    (xs[base + ch * hw] - mean) * rs * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    debug_check_finite("layer_norm_channels", &data);
    tape.add_flops(8 * x.len() as u64);
    let out = Tensor::leaf(data, x.shape().to_vec(), false);
    let (xc, gc) = (x.clone(), gamma.clone());
    tape.record(
        &out,
        &[x, gamma, beta],
        Box::new(move |g, sink| {
            let xs = xc.data();
            let mut dx = vec![0.0; xc.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for p in 0..hw {
                    let base = bi * c * hw + p;
                    let rs = rstd[bi * hw + p];
                    let mean = mu[bi * hw + p];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for ch in 0..c {
                        let xhat = (xs[base + ch * hw] - mean) * rs;
                        let dxhat = g[base + ch * hw] * gc.data()[ch];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgamma[ch] += g[base + ch * hw] * xhat;
                        dbeta[ch] += g[base + ch * hw];
                    }
                    s1 /= c as f64;
                    s2 /= c as f64;
                    for ch in 0..c {
                        let xhat = (xs[base + ch * hw] - mean) * rs;
                        let dxhat = g[base + ch * hw] * gc.data()[ch];
                        dx[base + ch * hw] = rs * (dxhat - s1 - xhat * s2);
                    }
                }
            }
            sink(0, dx);
            sink(1, dgamma);
            sink(2, dbeta);
        }),
    );
    Ok(out)
}

/// Training-mode batch norm over `[B, C, H, W]`: normalizes with batch
/// statistics (population variance, fixed reduction order) and returns them
/// so the owning layer can update its running buffers.
pub fn batch_norm_train(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if x.rank() != 4 {
        return Err(Error::invalid("batch_norm", x.shape(), "expects [B,C,H,W]"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", gamma.shape(), &[c]));
    }
    let hw = h * w;
    let n = (b * hw) as f64;
    let xs = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut m = 0.0;
        for bi in 0..b {
            let plane = &xs[(bi * c + ch) * hw..][..hw];
            m += plane.iter().sum::<f64>();
        }
        m /= n;
        let mut v = 0.0;
        for bi in 0..b {
            let plane = &xs[(bi * c + ch) * hw..][..hw];
            v += plane.iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    let mut data = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let rs = 1.0 / (var[ch] + eps).sqrt();
            let (g, bta) = (gamma.data()[ch], beta.data()[ch]);
            let src = &xs[(bi * c + ch) * hw..][..hw];
            let dst = &mut data[(bi * c + ch) * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean[ch]) * rs * g + bta;
            }
        }
    }
    debug_check_finite("batch_norm", &data);
    tape.add_flops(6 * x.len() as u64);
    let out = Tensor::leaf(data, x.shape().to_vec(), false);
    let (xc, gc) = (x.clone(), gamma.clone());
    let (mc, vc) = (mean.clone(), var.clone());
    tape.record(
        &out,
        &[x, gamma, beta],
        Box::new(move |g, sink| {
            let xs = xc.data();
            let mut dx = vec![0.0; xc.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let rs = 1.0 / (vc[ch] + eps).sqrt();
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for p in 0..hw {
                        let xhat = (xs[base + p] - mc[ch]) * rs;
                        sum_g += g[base + p];
                        sum_gx += g[base + p] * xhat;
                    }
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let scale = gc.data()[ch] * rs;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for p in 0..hw {
                        let xhat = (xs[base + p] - mc[ch]) * rs;
                        dx[base + p] = scale * (g[base + p] - sum_g / n - xhat * sum_gx / n);
                    }
                }
            }
            sink(0, dx);
            sink(1, dgamma);
            sink(2, dbeta);
        }),
    );
    Ok((out, mean, var))
}

/// Eval-mode batch norm: normalizes with the provided running statistics,
/// which are constants as far as the tape is concerned.
pub fn batch_norm_eval(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid("batch_norm", x.shape(), "expects [B,C,H,W]"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(Error::shape("batch_norm", gamma.shape(), &[c]));
    }
    let hw = h * w;
    let xs = x.data();
    let mut data = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let rs = 1.0 / (var[ch] + eps).sqrt();
            let (g, bta) = (gamma.data()[ch], beta.data()[ch]);
            let src = &xs[(bi * c + ch) * hw..][..hw];
            let dst = &mut data[(bi * c + ch) * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean[ch]) * rs * g + bta;
            }
        }
    }
    debug_check_finite("batch_norm_eval", &data);
    tape.add_flops(4 * x.len() as u64);
    let out = Tensor::leaf(data, x.shape().to_vec(), false);
    let (xc, gc) = (x.clone(), gamma.clone());
    let mean = mean.to_vec();
    let var = var.to_vec();
    tape.record(
        &out,
        &[x, gamma, beta],
        Box::new(move |g, sink| {
            let xs = xc.data();
            let mut dx = vec![0.0; xc.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let rs = 1.0 / (var[ch] + eps).sqrt();
                    let base = (bi * c + ch) * hw;
                    let scale = gc.data()[ch] * rs;
                    for p in 0..hw {
                        dx[base + p] = g[base + p] * scale;
                        dgamma[ch] += g[base + p] * (xs[base + p] - mean[ch]) * rs;
                        dbeta[ch] += g[base + p];
                    }
                }
            }
            sink(0, dx);
            sink(1, dgamma);
            sink(2, dbeta);
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let y = layer_norm_last(&tape, &x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-9).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_preserves_zero_rows_with_default_params() {
        // the zero-secondary identity of the fusion block leans on this
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 3]);
        let y = layer_norm_last(&tape, &x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let tape = Tape::new();
        let x = Tensor::new((0..2 * 2 * 2 * 2).map(|v| v as f64).collect(), &[2, 2, 2, 2]).unwrap();
        let (y, mean, var) =
            batch_norm_train(&tape, &x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-9).unwrap();
        assert_eq!(mean.len(), 2);
        for ch in 0..2 {
            let mut m = 0.0;
            let mut count = 0;
            for bi in 0..2 {
                for p in 0..4 {
                    m += y.data()[(bi * 2 + ch) * 4 + p];
                    count += 1;
                }
            }
            assert!((m / count as f64).abs() < 1e-12);
        }
        assert!(var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn batch_norm_eval_uses_given_stats() {
        let tape = Tape::new();
        let x = Tensor::full(&[1, 1, 2, 2], 3.0);
        let y = batch_norm_eval(
            &tape,
            &x,
            &Tensor::ones(&[1]),
            &Tensor::zeros(&[1]),
            &[1.0],
            &[4.0],
            0.0,
        )
        .unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-12); // (3-1)/2
        }
    }
}
