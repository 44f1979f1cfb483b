use hrfuser::attention::*;
use hrfuser::nn::ParamSet;
use hrfuser::rng::CounterRng;
use hrfuser::tensor::{ops, Tape, Tensor};
use std::time::Instant;

fn time<F: FnMut()>(label: &str, mut f: F) {
    let n = 200;
    let t0 = Instant::now();
    for _ in 0..n { f(); }
    println!("{label:<28} {:>9.1?}/iter", t0.elapsed() / n);
}

fn main() {
    let mut rng = CounterRng::new(1);
    let mut ps = ParamSet::new();
    // stage-2 stream-1 like: B=4, C=4, 28x28, K=7 -> 16 windows/image
    let (b, c, h, w) = (4, 4, 28, 28);
    let x = Tensor::new((0..b*c*h*w).map(|_| rng.range(-1.0,1.0)).collect(), &[b,c,h,w]).unwrap();
    let attn = AttnProjWeights::init(&mut ps, "a", &mut rng, c, 1, true);
    let tape = Tape::inference();

    let (win, grid) = window_split(&tape, &x, 7).unwrap();
    time("window_split", || { let _ = window_split(&tape, &x, 7).unwrap(); });
    time("window_merge", || { let _ = window_merge(&tape, &win, &grid).unwrap(); });
    time("layer_norm_channels", || {
        let _ = ops::layer_norm_channels(&tape, &x, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), 1e-5).unwrap();
    });
    time("window_attention", || { let _ = window_attention(&tape, &win, &win, &attn).unwrap(); });
    // pieces of window_attention
    let wq = attn.wq.get();
    time("  linear q", || { let _ = ops::linear(&tape, &win, &wq, None).unwrap(); });
    let q = ops::linear(&tape, &win, &wq, None).unwrap();
    let qh = ops::reshape(&tape, &q, &[64, 49, 1, 4]).unwrap();
    time("  permute", || { let _ = ops::permute(&tape, &qh, &[0,2,1,3]).unwrap(); });
    let qp = ops::reshape(&tape, &ops::permute(&tape, &qh, &[0,2,1,3]).unwrap(), &[64,49,4]).unwrap();
    time("  bmm_t scores", || { let _ = ops::bmm_t(&tape, &qp, &qp).unwrap(); });
    let sc = ops::bmm_t(&tape, &qp, &qp).unwrap();
    time("  softmax", || { let _ = ops::softmax(&tape, &sc).unwrap(); });
    let sm = ops::softmax(&tape, &sc).unwrap();
    time("  bmm av", || { let _ = ops::bmm(&tape, &sm, &qp).unwrap(); });
    time("  mul_scalar", || { let _ = ops::mul_scalar(&tape, &sc, 0.5); });
    time("  add", || { let _ = ops::add(&tape, &win, &win).unwrap(); });

    let ffn = ConvFfn::init(&mut ps, "f", &mut rng, c, 4, true);
    time("conv_ffn", || { let _ = ffn.forward(&tape, &x).unwrap(); });
    // 1x1 conv at this size
    let w1 = Tensor::new((0..16*c).map(|_| rng.range(-1.0,1.0)).collect(), &[16, c, 1, 1]).unwrap();
    time("  conv1x1 4->16", || { let _ = ops::conv2d(&tape, &x, &w1, None, 1, 0, 1).unwrap(); });
    let x16 = ops::conv2d(&tape, &x, &w1, None, 1, 0, 1).unwrap();
    let wdw = Tensor::new((0..16*9).map(|_| rng.range(-1.0,1.0)).collect(), &[16, 1, 3, 3]).unwrap();
    time("  dwconv 16", || { let _ = ops::conv2d(&tape, &x16, &wdw, None, 1, 1, 16).unwrap(); });
    time("  gelu", || { let _ = ops::gelu(&tape, &x16); });
}
