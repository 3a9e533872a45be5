//! Quick timing probe for one training step at the canonical patch size.

use medfuse::fusion::ModelConfig;
use medfuse::synthetic::structured_pair;
use medfuse::trainer::{train_step, TrainConfig, TrainState};

fn main() {
    let cfg = ModelConfig::default();
    let mut state = TrainState::new(&cfg, 1).unwrap();
    let tc = TrainConfig::default();
    let (m, f) = structured_pair(120, 120, 2);
    train_step(&mut state, &tc, &m, &f).unwrap();
    let t0 = std::time::Instant::now();
    let n = 10;
    for _ in 0..n {
        train_step(&mut state, &tc, &m, &f).unwrap();
    }
    let dt = t0.elapsed();
    println!(
        "{} steps in {:.2?} -> {:.0} ms/step",
        n,
        dt,
        dt.as_secs_f64() * 1000.0 / n as f64
    );
}
