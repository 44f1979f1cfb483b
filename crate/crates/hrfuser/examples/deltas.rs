use hrfuser::backbone::{config::*, profile};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::preset(
        Variant::T,
        ModalityConfig::new("camera", 3),
        vec![
            ModalityConfig::new("lidar", 3),
            ModalityConfig::new("radar", 3),
            ModalityConfig::new("gated", 1),
        ],
    );
    for (h, w) in [(224usize, 112usize), (640, 360)] {
        let t0 = Instant::now();
        let series = profile::flops_per_modality_count(&cfg, h, w).unwrap();
        let d = profile::deltas(&series);
        let mean = d.iter().sum::<u64>() as f64 / d.len() as f64;
        let max_dev = d.iter().map(|&x| (x as f64 - mean).abs() / mean).fold(0.0, f64::max);
        println!("{h}x{w}: totals={:?}", series.iter().map(|v| format!("{:.2}G", *v as f64/1e9)).collect::<Vec<_>>());
        println!("  deltas={:?} max_dev={:.1}% elapsed={:?}", d.iter().map(|v| format!("{:.2}G", *v as f64/1e9)).collect::<Vec<_>>(), max_dev*100.0, t0.elapsed());
    }
}
