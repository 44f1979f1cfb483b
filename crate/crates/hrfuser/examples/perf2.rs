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
    // per-stage timing
    let tape = Tape::inference();
    let t = Instant::now();
    let mut state = det.backbone.stage1_forward(&tape, &inputs, false).unwrap();
    println!("stage1: {:?} (flops {:.1}M)", t.elapsed(), tape.flops() as f64/1e6);
    let mut last_f = tape.flops();
    for s in 2..=4 {
        let t = Instant::now();
        state = det.backbone.stage_forward(&tape, state, s, false).unwrap();
        println!("stage{s}: {:?} (flops {:.1}M)", t.elapsed(), (tape.flops()-last_f) as f64/1e6);
        last_f = tape.flops();
    }
    let t = Instant::now();
    let neck = det.backbone.neck.forward(&tape, &state.camera).unwrap();
    println!("neck:   {:?} (flops {:.1}M)", t.elapsed(), (tape.flops()-last_f) as f64/1e6);
    last_f = tape.flops();
    let t = Instant::now();
    let _ = det.head.forward(&tape, &neck).unwrap();
    println!("head:   {:?} (flops {:.1}M)", t.elapsed(), (tape.flops()-last_f) as f64/1e6);
}
