use hrfuser::harness::{train, Detector, ExperimentConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let variant = args.get(3).cloned().unwrap_or_else(|| "mwca".into());
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut exp = ExperimentConfig::default();
    exp.set("seed", &seed.to_string()).unwrap();
    exp.set("train_scenes", &scenes.to_string()).unwrap();
    exp.set("eval_scenes", "64").unwrap();
    exp.set("epochs", &epochs.to_string()).unwrap();
    match variant.as_str() {
        "camera" => { exp.set("modalities", "none").unwrap(); }
        "addition" => { exp.set("fusion_variant", "addition").unwrap(); }
        _ => {}
    }
    let det = Detector::build(&exp).unwrap();
    println!("config {variant} seed {seed}: {} params", det.params.num_values());
    let t0 = Instant::now();
    let report = train(&det, None).unwrap();
    for (e, r) in report.per_epoch.iter().enumerate() {
        println!("  epoch {e}: ap50 {:.4} ap {:.4} ar {:.4}", r.ap50, r.ap, r.ar);
    }
    println!("  elapsed {:?} ({} steps)", t0.elapsed(), report.log.len());
}
