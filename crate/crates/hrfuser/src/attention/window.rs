//! Window partitioning: `[B, C, H, W]` maps into `[B·P, K², C]` token
//! batches and back.
//!
//! The map is zero-padded at the bottom and right until both sides are
//! multiples of K, then tiled row-major into P = rows·cols windows of K×K
//! tokens (row-major within each window). Merging is the exact inverse on
//! the unpadded region; padded positions are dropped.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Geometry of one partitioning, shared by every map fused in a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    /// Tokens per window side.
    pub k: usize,
    /// Window grid dimensions.
    pub rows: usize,
    pub cols: usize,
    /// Zero padding added before splitting.
    pub pad_bottom: usize,
    pub pad_right: usize,
    /// Unpadded map size.
    pub h: usize,
    pub w: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("window size K must be >= 1".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("window_split", &[h, w], "empty map"));
        }
        let rows = h.div_ceil(k);
        let cols = w.div_ceil(k);
        Ok(WindowGrid {
            k,
            rows,
            cols,
            pad_bottom: rows * k - h,
            pad_right: cols * k - w,
            h,
            w,
        })
    }

    /// Number of windows P.
    pub fn windows(&self) -> usize {
        self.rows * self.cols
    }

    /// Tokens per window, K².
    pub fn tokens(&self) -> usize {
        self.k * self.k
    }

    /// Spatial position of token `t` of window `p`, or `None` if it falls in
    /// the padding.
    pub fn position(&self, p: usize, t: usize) -> Option<(usize, usize)> {
        let (wi, wj) = (p / self.cols, p % self.cols);
        let (ti, tj) = (t / self.k, t % self.k);
        let (y, x) = (wi * self.k + ti, wj * self.k + tj);
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn split_kernel(
    x: &[f64],
    b: usize,
    c: usize,
    grid: &WindowGrid,
    out: &mut [f64],
) {
    let (h, w, k) = (grid.h, grid.w, grid.k);
    let p_count = grid.windows();
    let t_count = grid.tokens();
    for bi in 0..b {
        for p in 0..p_count {
            let (wi, wj) = (p / grid.cols, p % grid.cols);
            for t in 0..t_count {
                let (y, xx) = (wi * k + t / k, wj * k + t % k);
                if y >= h || xx >= w {
                    continue; // padded token stays zero
                }
                let dst = ((bi * p_count + p) * t_count + t) * c;
                for ch in 0..c {
                    out[dst + ch] = x[((bi * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
}

fn merge_kernel(
    windows: &[f64],
    b: usize,
    c: usize,
    grid: &WindowGrid,
    out: &mut [f64],
) {
    let (h, w, k) = (grid.h, grid.w, grid.k);
    let p_count = grid.windows();
    let t_count = grid.tokens();
    for bi in 0..b {
        for p in 0..p_count {
            let (wi, wj) = (p / grid.cols, p % grid.cols);
            for t in 0..t_count {
                let (y, xx) = (wi * k + t / k, wj * k + t % k);
                if y >= h || xx >= w {
                    continue; // padded token is discarded
                }
                let src = ((bi * p_count + p) * t_count + t) * c;
                for ch in 0..c {
                    out[((bi * c + ch) * h + y) * w + xx] = windows[src + ch];
                }
            }
        }
    }
}

/// Partition `[B, C, H, W]` into `[B·P, K², C]` window tokens.
pub fn window_split(tape: &Tape, x: &Tensor, k: usize) -> Result<(Tensor, WindowGrid)> {
    if x.rank() != 4 {
        return Err(Error::invalid("window_split", x.shape(), "expects [B,C,H,W]"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let grid = WindowGrid::new(h, w, k)?;
    let mut data = vec![0.0; b * grid.windows() * grid.tokens() * c];
    split_kernel(x.data(), b, c, &grid, &mut data);
    let out = Tensor::leaf(data, vec![b * grid.windows(), grid.tokens(), c], false);
    let g2 = grid;
    tape.record(
        &out,
        &[x],
        Box::new(move |g, sink| {
            let mut gi = vec![0.0; b * c * g2.h * g2.w];
            merge_kernel(g, b, c, &g2, &mut gi);
            sink(0, gi);
        }),
    );
    Ok((out, grid))
}

/// Inverse of [`window_split`]: `[B·P, K², C]` back to `[B, C, H, W]`.
pub fn window_merge(tape: &Tape, windows: &Tensor, grid: &WindowGrid) -> Result<Tensor> {
    if windows.rank() != 3 || windows.shape()[1] != grid.tokens() {
        return Err(Error::invalid(
            "window_merge",
            windows.shape(),
            format!("inconsistent with grid (P={}, K²={})", grid.windows(), grid.tokens()),
        ));
    }
    let p_count = grid.windows();
    if windows.shape()[0] % p_count != 0 {
        return Err(Error::invalid(
            "window_merge",
            windows.shape(),
            format!("leading axis not a multiple of P={p_count}"),
        ));
    }
    let b = windows.shape()[0] / p_count;
    let c = windows.shape()[2];
    let mut data = vec![0.0; b * c * grid.h * grid.w];
    merge_kernel(windows.data(), b, c, grid, &mut data);
    let out = Tensor::leaf(data, vec![b, c, grid.h, grid.w], false);
    let g2 = *grid;
    tape.record(
        &out,
        &[windows],
        Box::new(move |g, sink| {
            let mut gi = vec![0.0; b * g2.windows() * g2.tokens() * c];
            split_kernel(g, b, c, &g2, &mut gi);
            sink(0, gi);
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::ops;

    fn random_map(rng: &mut CounterRng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(
            (0..b * c * h * w).map(|_| rng.range(-2.0, 2.0)).collect(),
            &[b, c, h, w],
        )
        .unwrap()
    }

    #[test]
    fn single_window_is_the_vectorized_map() {
        let tape = Tape::new();
        let mut rng = CounterRng::new(2);
        let x = random_map(&mut rng, 1, 3, 7, 7);
        let (win, grid) = window_split(&tape, &x, 7).unwrap();
        assert_eq!(grid.windows(), 1);
        assert_eq!(win.shape(), &[1, 49, 3]);
        for t in 0..49 {
            let (y, xx) = (t / 7, t % 7);
            for c in 0..3 {
                assert_eq!(win.at(&[0, t, c]), x.at(&[0, c, y, xx]));
            }
        }
    }

    #[test]
    fn fourteen_by_fourteen_gives_four_windows() {
        let tape = Tape::new();
        let mut rng = CounterRng::new(3);
        let x = random_map(&mut rng, 1, 2, 14, 14);
        let (win, grid) = window_split(&tape, &x, 7).unwrap();
        assert_eq!(grid.windows(), 4);
        assert_eq!((grid.rows, grid.cols), (2, 2));
        // window 0 holds rows 0..7, cols 0..7
        for t in 0..49 {
            let (y, xx) = (t / 7, t % 7);
            assert_eq!(win.at(&[0, t, 0]), x.at(&[0, 0, y, xx]));
        }
    }

    #[test]
    fn ninety_by_onesixty_pads_to_multiples_of_seven() {
        let grid = WindowGrid::new(90, 160, 7).unwrap();
        assert_eq!((grid.rows, grid.cols), (13, 23)); // 91 × 161 padded
        assert_eq!(grid.windows(), 299);
        assert_eq!((grid.pad_bottom, grid.pad_right), (1, 1));

        // padded tokens are zeros, and the round trip is exact
        let tape = Tape::new();
        let mut rng = CounterRng::new(4);
        let x = random_map(&mut rng, 1, 2, 90, 160);
        let (win, grid) = window_split(&tape, &x, 7).unwrap();
        let last_row_token = 6 * 7; // token row 6 of a bottom window
        let p_bottom = (grid.rows - 1) * grid.cols; // bottom-left window
        assert_eq!(win.at(&[p_bottom, last_row_token, 0]), 0.0);
        let back = window_merge(&tape, &win, &grid).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn merge_split_roundtrip_exact() {
        let tape = Tape::new();
        let mut rng = CounterRng::new(5);
        for &(h, w, c) in &[(13usize, 21usize, 4usize), (10, 9, 2), (7, 7, 1), (1, 1, 3), (28, 28, 8)] {
            let x = random_map(&mut rng, 2, c, h, w);
            let (win, grid) = window_split(&tape, &x, 7).unwrap();
            let back = window_merge(&tape, &win, &grid).unwrap();
            assert_eq!(back.data(), x.data(), "h={h} w={w}");
        }
    }

    #[test]
    fn window_order_matters_for_nonconstant_maps() {
        // build a map whose windows have distinct means, permute the windows,
        // merge, and confirm the result differs from the original
        let tape = Tape::new();
        let mut x = vec![0.0; 14 * 14];
        for y in 0..14 {
            for xx in 0..14 {
                let p = (y / 7) * 2 + xx / 7;
                x[y * 14 + xx] = p as f64 + 0.01 * (y * 14 + xx) as f64;
            }
        }
        let x = Tensor::new(x, &[1, 1, 14, 14]).unwrap();
        let (win, grid) = window_split(&tape, &x, 7).unwrap();
        // swap windows 0 and 3
        let mut permuted = win.data().to_vec();
        let stride = 49;
        for t in 0..stride {
            permuted.swap(t, 3 * stride + t);
        }
        let permuted = Tensor::new(permuted, win.shape()).unwrap();
        let merged = window_merge(&tape, &permuted, &grid).unwrap();
        assert_ne!(merged.data(), x.data());
    }

    #[test]
    fn zero_window_size_rejected() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(window_split(&tape, &x, 0).is_err());
    }

    #[test]
    fn split_and_merge_gradients_pass_finite_differences() {
        use crate::tensor::gradcheck;
        let mut rng = CounterRng::new(6);
        let x = random_map(&mut rng, 1, 2, 5, 6);
        let probe = random_map(&mut rng, 1, 2, 5, 6);
        let report = gradcheck::check_fn(&[x], gradcheck::DEFAULT_EPS, &|tape, ins| {
            let (win, grid) = window_split(tape, &ins[0], 4)?;
            let scaled = ops::mul_scalar(tape, &win, 1.5);
            let back = window_merge(tape, &scaled, &grid)?;
            Ok(ops::sum_all(tape, &ops::mul(tape, &back, &probe)?))
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }
}
