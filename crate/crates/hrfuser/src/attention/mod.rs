//! Multi-window cross-attention fusion.
//!
//! [`window_split`]/[`window_merge`] tile feature maps into non-overlapping
//! K×K windows; [`MwcaBlock`] runs parallel per-window cross-attention from
//! the primary stream onto every secondary modality and finishes with a
//! depth-wise-conv FFN. [`reference`] holds the independent scalar-loop
//! evaluators the oracle checks compare against.

mod dump;
mod mwca;
pub mod reference;
mod window;

pub use dump::{argmax_2d, dump_attention_maps};
pub use mwca::{
    cross_attention_head, parallel_cross_attention, window_attention, AttnProjWeights, ConvFfn,
    CrossAttentionWeights, FusionVariant, ModalityFusion, MwcaBlock, MwcaBlockConfig,
};
pub use window::{window_merge, window_split, WindowGrid};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::rng::CounterRng;
    use crate::tensor::{gradcheck, ops, Tape, Tensor};

    fn rand_map(rng: &mut CounterRng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(
            (0..c * h * w).map(|_| rng.range(-1.0, 1.0)).collect(),
            &[1, c, h, w],
        )
        .unwrap()
    }

    fn build_block(rng: &mut CounterRng, cfg: MwcaBlockConfig) -> (MwcaBlock, ParamSet) {
        let mut ps = ParamSet::new();
        let block = MwcaBlock::init(&mut ps, "blk", rng, cfg).unwrap();
        (block, ps)
    }

    fn cfg(channels: usize, heads: usize, window: usize, modalities: usize, bias: bool) -> MwcaBlockConfig {
        MwcaBlockConfig {
            channels,
            heads,
            window,
            modalities,
            variant: FusionVariant::Mwca,
            ffn_ratio: 4,
            bias,
        }
    }

    #[test]
    fn head_on_zero_secondary_without_bias_is_zero() {
        let mut rng = CounterRng::new(10);
        let mut ps = ParamSet::new();
        let w = AttnProjWeights::init(&mut ps, "w", &mut rng, 4, 2, false);
        let tape = Tape::new();
        let xp = Tensor::new((0..16 * 4).map(|v| (v as f64).cos()).collect(), &[16, 4]).unwrap();
        let yp = Tensor::zeros(&[16, 4]);
        let out = cross_attention_head(&tape, &xp, &yp, &w, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_head_with_identity_weights_returns_value() {
        // K=1, H=1, D=1: softmax over one key is 1, so the output is y's value
        let mut ps = ParamSet::new();
        let w = AttnProjWeights {
            wq: ps.register("wq".into(), Tensor::param(vec![1.0], &[1, 1]).unwrap()),
            wk: ps.register("wk".into(), Tensor::param(vec![1.0], &[1, 1]).unwrap()),
            wv: ps.register("wv".into(), Tensor::param(vec![1.0], &[1, 1]).unwrap()),
            wo: ps.register("wo".into(), Tensor::param(vec![1.0], &[1, 1]).unwrap()),
            bq: None,
            bk: None,
            bv: None,
            bo: None,
            channels: 1,
            heads: 1,
        };
        let tape = Tape::new();
        let xp = Tensor::new(vec![0.37], &[1, 1]).unwrap();
        let yp = Tensor::new(vec![-2.5], &[1, 1]).unwrap();
        let out = cross_attention_head(&tape, &xp, &yp, &w, 0).unwrap();
        assert!((out.item() + 2.5).abs() < 1e-15);
    }

    #[test]
    fn head_matches_scalar_loop_oracle() {
        let mut rng = CounterRng::new(11);
        let mut ps = ParamSet::new();
        let w = AttnProjWeights::init(&mut ps, "w", &mut rng, 2, 1, true);
        let tape = Tape::new();
        let t = 16; // K=4 window
        let xp = Tensor::new((0..t * 2).map(|_| rng.range(-1.0, 1.0)).collect(), &[t, 2]).unwrap();
        let yp = Tensor::new((0..t * 2).map(|_| rng.range(-1.0, 1.0)).collect(), &[t, 2]).unwrap();
        let got = cross_attention_head(&tape, &xp, &yp, &w, 0).unwrap();
        let raw = reference::RawProj::from(&w);
        let want = reference::head(xp.data(), yp.data(), t, &raw, 0);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_with_no_modalities_is_exact_identity() {
        let tape = Tape::new();
        let xp = Tensor::new((0..49 * 3).map(|v| v as f64 * 0.01).collect(), &[49, 3]).unwrap();
        let w = CrossAttentionWeights {
            per_modality: vec![],
            channels: 3,
            heads: 1,
        };
        let out = parallel_cross_attention(&tape, &xp, &[], &w, true).unwrap();
        assert_eq!(out.data(), xp.data());
    }

    #[test]
    fn parallel_with_zero_secondaries_and_no_bias_is_exact_identity() {
        let mut rng = CounterRng::new(12);
        let mut ps = ParamSet::new();
        let w = CrossAttentionWeights::init(&mut ps, "w", &mut rng, 4, 2, 2, false);
        let tape = Tape::new();
        let xp = Tensor::new((0..9 * 4).map(|v| (v as f64).sin()).collect(), &[9, 4]).unwrap();
        let ys = vec![Tensor::zeros(&[9, 4]), Tensor::zeros(&[9, 4])];
        let out = parallel_cross_attention(&tape, &xp, &ys, &w, true).unwrap();
        assert_eq!(out.data(), xp.data());
    }

    #[test]
    fn parallel_matches_direct_formula_oracle() {
        let mut rng = CounterRng::new(13);
        let mut ps = ParamSet::new();
        let w = CrossAttentionWeights::init(&mut ps, "w", &mut rng, 4, 2, 2, true);
        let tape = Tape::new();
        let t = 49;
        let xp = Tensor::new((0..t * 4).map(|_| rng.range(-1.0, 1.0)).collect(), &[t, 4]).unwrap();
        let ys: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::new((0..t * 4).map(|_| rng.range(-1.0, 1.0)).collect(), &[t, 4]).unwrap()
            })
            .collect();
        let got = parallel_cross_attention(&tape, &xp, &ys, &w, true).unwrap();
        let projs: Vec<reference::RawProj> = w
            .per_modality
            .iter()
            .map(|f| reference::RawProj::from(&f.proj))
            .collect();
        let y_refs: Vec<&[f64]> = ys.iter().map(|t| t.data()).collect();
        let want = reference::parallel(xp.data(), &y_refs, t, &projs, true);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_window_attention_agrees_with_per_window_ops() {
        let mut rng = CounterRng::new(14);
        let mut ps = ParamSet::new();
        let w = AttnProjWeights::init(&mut ps, "w", &mut rng, 6, 2, true);
        let tape = Tape::new();
        let (n, t) = (3, 9);
        let q = Tensor::new((0..n * t * 6).map(|_| rng.range(-1.0, 1.0)).collect(), &[n, t, 6]).unwrap();
        let kv = Tensor::new((0..n * t * 6).map(|_| rng.range(-1.0, 1.0)).collect(), &[n, t, 6]).unwrap();
        let (out, attn) = window_attention(&tape, &q, &kv, &w).unwrap();
        assert_eq!(attn.shape(), &[n * 2, t, t]);
        for p in 0..n {
            let qp = ops::slice(&tape, &q, &[p, 0, 0], &[1, t, 6]).unwrap();
            let qp = ops::reshape(&tape, &qp, &[t, 6]).unwrap();
            let kp = ops::slice(&tape, &kv, &[p, 0, 0], &[1, t, 6]).unwrap();
            let kp = ops::reshape(&tape, &kp, &[t, 6]).unwrap();
            let heads: Vec<Tensor> = (0..2)
                .map(|h| cross_attention_head(&tape, &qp, &kp, &w, h).unwrap())
                .collect();
            let refs: Vec<&Tensor> = heads.iter().collect();
            let mh = ops::concat(&tape, &refs, 1).unwrap();
            let bo = w.bo.as_ref().map(|b| b.get());
            let want = ops::linear(&tape, &mh, &w.wo.get(), bo.as_ref()).unwrap();
            for i in 0..t * 6 {
                let got = out.data()[p * t * 6 + i];
                assert!((got - want.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_variant_none_returns_input() {
        let mut rng = CounterRng::new(15);
        let mut c = cfg(4, 1, 7, 1, true);
        c.variant = FusionVariant::None;
        let (block, _ps) = build_block(&mut rng, c);
        let tape = Tape::new();
        let x = rand_map(&mut rng, 4, 10, 9);
        let y = rand_map(&mut rng, 4, 10, 9);
        let out = block.forward(&tape, &x, &[y]).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn block_zero_secondaries_bias_free_zero_ffn_is_identity() {
        let mut rng = CounterRng::new(16);
        let (block, _ps) = build_block(&mut rng, cfg(4, 2, 7, 2, false));
        // zero the FFN convs so the whole block composes to the identity
        for conv in [&block.ffn.expand, &block.ffn.depthwise, &block.ffn.reduce] {
            let n = conv.weight.get().len();
            conv.weight.set(vec![0.0; n]);
        }
        let tape = Tape::new();
        let x = rand_map(&mut rng, 4, 9, 11);
        let ys = vec![Tensor::zeros(&[1, 4, 9, 11]), Tensor::zeros(&[1, 4, 9, 11])];
        let pre = block.fuse_pre_ffn(&tape, &x, &ys).unwrap();
        assert_eq!(pre.data(), x.data());
        let out = block.forward(&tape, &x, &ys).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn block_pre_ffn_matches_naive_reference() {
        let mut rng = CounterRng::new(17);
        for (m, heads, ch, h, w) in [(1usize, 1usize, 4usize, 9usize, 12usize), (2, 2, 6, 14, 7), (3, 2, 8, 11, 10)] {
            let (block, _ps) = build_block(&mut rng, cfg(ch, heads, 7, m, true));
            let tape = Tape::new();
            let x = rand_map(&mut rng, ch, h, w);
            let ys: Vec<Tensor> = (0..m).map(|_| rand_map(&mut rng, ch, h, w)).collect();
            let got = block.fuse_pre_ffn(&tape, &x, &ys).unwrap();
            let want = reference::block_pre_ffn(&block, &x, &ys).unwrap();
            let mut max = 0.0f64;
            for (a, b) in got.data().iter().zip(&want) {
                max = max.max((a - b).abs());
            }
            assert!(max < 1e-10, "m={m} max diff {max}");
        }
    }

    #[test]
    fn perturbing_one_secondary_pixel_stays_in_its_window() {
        let mut rng = CounterRng::new(18);
        let (block, _ps) = build_block(&mut rng, cfg(4, 2, 7, 1, true));
        let tape = Tape::new();
        let (h, w) = (13, 16); // pads to 14×21: 2×3 windows
        let x = rand_map(&mut rng, 4, h, w);
        let y = rand_map(&mut rng, 4, h, w);
        let clean = block.fuse_pre_ffn(&tape, &x, &[y.clone()]).unwrap();

        // bump one pixel inside window (row 1, col 2)
        let (py, px) = (9, 15);
        let mut y2 = y.data().to_vec();
        y2[(2 * h + py) * w + px] += 0.75;
        let y2 = Tensor::new(y2, y.shape()).unwrap();
        let dirty = block.fuse_pre_ffn(&tape, &x, &[y2]).unwrap();

        let grid = WindowGrid::new(h, w, 7).unwrap();
        let target_window = (py / 7) * grid.cols + px / 7;
        let mut changed_windows = std::collections::BTreeSet::new();
        for ch in 0..4 {
            for yy in 0..h {
                for xx in 0..w {
                    let i = (ch * h + yy) * w + xx;
                    if (clean.data()[i] - dirty.data()[i]).abs() > 1e-12 {
                        changed_windows.insert((yy / 7) * grid.cols + xx / 7);
                    }
                }
            }
        }
        assert_eq!(changed_windows.into_iter().collect::<Vec<_>>(), vec![target_window]);
    }

    #[test]
    fn block_gradients_pass_finite_differences() {
        let mut rng = CounterRng::new(19);
        let (block, ps) = build_block(&mut rng, cfg(4, 2, 4, 1, true));
        let x0 = rand_map(&mut rng, 4, 5, 6);
        let y0 = rand_map(&mut rng, 4, 5, 6);
        let probe = rand_map(&mut rng, 4, 5, 6);

        // input gradients through the full block (params held fixed)
        let report = gradcheck::check_fn(&[x0.clone(), y0.clone()], gradcheck::DEFAULT_EPS, &|tape, ins| {
            let out = block.forward(tape, &ins[0], &[ins[1].clone()])?;
            Ok(ops::sum_all(tape, &ops::mul(tape, &out, &probe)?))
        })
        .unwrap();
        assert!(report.passes(1e-4), "inputs: max err {}", report.max_rel_err);

        // parameter gradients via manual central differences on sampled
        // elements; the input check above already backpropagated into the
        // block's params, so clear them first
        ps.zero_grad();
        let tape = Tape::new();
        let out = block.forward(&tape, &x0, &[y0.clone()]).unwrap();
        let loss = ops::sum_all(&tape, &ops::mul(&tape, &out, &probe).unwrap());
        tape.backward(&loss).unwrap();
        let mut worst = 0.0f64;
        for (name, p) in ps.params() {
            let analytic = p.get().grad().expect(name);
            let base = p.get().data().to_vec();
            for &e in &[0usize, base.len() / 2, base.len() - 1] {
                let eval = |delta: f64| {
                    let mut d = base.clone();
                    d[e] += delta;
                    p.set(d);
                    let t = Tape::inference();
                    let out = block.forward(&t, &x0, &[y0.clone()]).unwrap();
                    out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
                };
                let eps = gradcheck::DEFAULT_EPS;
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                p.set(base.clone());
                worst = worst.max(gradcheck::rel_err(analytic.data()[e], fd));
            }
        }
        assert!(worst < 1e-4, "params: max err {worst}");
    }

    #[test]
    fn attention_mass_is_uniform_for_uniform_inputs_and_sums_to_tokens() {
        let mut rng = CounterRng::new(20);
        let (block, _ps) = build_block(&mut rng, cfg(4, 2, 7, 1, true));
        let tape = Tape::inference();
        let x = Tensor::full(&[1, 4, 14, 14], 0.3);
        let y = Tensor::full(&[1, 4, 14, 14], -0.2);
        let maps = block.attention_mass(&tape, &x, &[y]).unwrap();
        let map = &maps[0];
        let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-6, "uniform inputs must give near-uniform mass");
        // per-window totals equal K²
        for wy in 0..2 {
            for wx in 0..2 {
                let mut total = 0.0;
                for ty in 0..7 {
                    for tx in 0..7 {
                        total += map.at(&[wy * 7 + ty, wx * 7 + tx]);
                    }
                }
                assert!((total - 49.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn strongly_matching_secondary_pixel_wins_the_window_argmax() {
        let mut rng = CounterRng::new(21);
        let (block, _ps) = build_block(&mut rng, cfg(2, 1, 7, 1, false));
        // rig the projections: queries and keys read channel 0 directly with
        // a large gain, so the key with the largest channel-0 value wins
        block.cross.per_modality[0].proj.wq.set(vec![8.0, 0.0, 0.0, 0.0]);
        block.cross.per_modality[0].proj.wk.set(vec![8.0, 0.0, 0.0, 0.0]);
        let tape = Tape::inference();
        // x = (1, 0) per pixel: channel 0 stays positive after the pre-norm,
        // so every query strongly matches a positive channel-0 key
        let mut x = vec![0.0; 2 * 49];
        x[..49].fill(1.0);
        let x = Tensor::new(x, &[1, 2, 7, 7]).unwrap();
        let mut y = vec![0.0; 2 * 49];
        let (ty, tx) = (3, 5);
        y[ty * 7 + tx] = 3.0; // single hot pixel in channel 0
        let y = Tensor::new(y, &[1, 2, 7, 7]).unwrap();
        let maps = block.attention_mass(&tape, &x, &[y]).unwrap();
        assert_eq!(argmax_2d(&maps[0]), (ty, tx));
    }

    #[test]
    fn dump_writes_pgm_and_raw_tensors() {
        let mut rng = CounterRng::new(22);
        let (block, _ps) = build_block(&mut rng, cfg(4, 1, 7, 2, true));
        let x = rand_map(&mut rng, 4, 10, 12);
        let ys = vec![rand_map(&mut rng, 4, 10, 12), rand_map(&mut rng, 4, 10, 12)];
        let dir = tempfile::tempdir().unwrap();
        let files = dump_attention_maps(
            &block,
            &x,
            &ys,
            &["lidar".into(), "radar".into()],
            dir.path(),
        )
        .unwrap();
        assert_eq!(files.len(), 3);
        assert!(dir.path().join("attn_lidar.pgm").exists());
        assert!(dir.path().join("attn_radar.pgm").exists());
        let raw = crate::tensor::checkpoint::load(&dir.path().join("attn_maps.mwca")).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[0].1.shape(), &[10, 12]);

        // unwritable path surfaces as an error
        let bad = dir.path().join("missing_subdir");
        assert!(dump_attention_maps(&block, &x, &ys, &[], &bad).is_err());
    }
}
