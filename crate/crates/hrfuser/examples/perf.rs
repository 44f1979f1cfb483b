use hrfuser::detection::compute_loss;
use hrfuser::harness::{build_dataset, make_sample, Detector, ExperimentConfig};
use hrfuser::backbone::ModelInputs;
use hrfuser::tensor::{Tape, Tensor};
use std::time::Instant;

fn stack(ts: &[&Tensor]) -> Tensor {
    let mut data = Vec::new();
    for t in ts { data.extend_from_slice(t.data()); }
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts[0].shape());
    Tensor::new(data, &shape).unwrap()
}

fn main() {
    let mut exp = ExperimentConfig::default();
    exp.set("train_scenes", "8").unwrap();
    let det = Detector::build(&exp).unwrap();
    let ds = build_dataset(&exp.scene, &exp, 4, 0, None).unwrap();
    let samples: Vec<_> = ds.scenes.iter().map(|s| make_sample(s, &exp, &ds.stats).unwrap()).collect();
    let inputs = ModelInputs {
        primary: stack(&samples.iter().map(|s| &s.primary).collect::<Vec<_>>()),
        secondaries: (0..2).map(|m| stack(&samples.iter().map(|s| &s.secondaries[m]).collect::<Vec<_>>())).collect(),
    };
    let gts: Vec<_> = samples.iter().map(|s| s.gts.clone()).collect();

    // inference forward
    for _ in 0..2 {
        let t0 = Instant::now();
        let tape = Tape::inference();
        let _ = det.forward(&tape, &inputs, false).unwrap();
        println!("inference fwd: {:?} flops {:.1}M -> {:.2} Gflop/s", t0.elapsed(), tape.flops() as f64/1e6, tape.flops() as f64 / t0.elapsed().as_secs_f64() / 1e9);
    }
    // training fwd
    let t0 = Instant::now();
    let tape = Tape::new();
    let out = det.forward(&tape, &inputs, true).unwrap();
    let loss = compute_loss(&tape, &det.head, &out, &gts).unwrap();
    let fwd = t0.elapsed();
    println!("train fwd:  {:?} nodes {}", fwd, tape.num_nodes());
    let t1 = Instant::now();
    tape.backward(&loss).unwrap();
    println!("backward:   {:?}", t1.elapsed());
    println!("total step: {:?} flops(fwd) {:.1}M", t0.elapsed(), tape.flops() as f64/1e6);
}
