// Scratch probe for calibration-budget tuning. Not part of the crate API.

use std::sync::Arc;

use odcal::baselines::{bo_calibrate, BoConfig};
use odcal::env::{EnvConfig, GroundTruthTable};
use odcal::network::build_nguyen_dupuis;
use odcal::ppo::{train, PpoConfig};

fn main() {
    let net = build_nguyen_dupuis(3.0);
    let truth = GroundTruthTable::zeros(6, 9);
    let env = Arc::new(EnvConfig::with_defaults(net, truth));
    if std::env::args().nth(1).as_deref() == Some("bo") {
        let network = build_nguyen_dupuis(3.0);
        let env = Arc::new(EnvConfig::with_defaults(network, GroundTruthTable::zeros(6, 9)));
        let cfg = BoConfig::default();
        for seed in [42u64, 7, 19] {
            let t0 = std::time::Instant::now();
            let run = bo_calibrate(&env, &cfg, seed).unwrap();
            let first_zero = run.iterations.iter().find(|s| s.incumbent_error == 0.0);
            println!(
                "bo seed {seed}: best {:.1}, first zero at {:?}, {:.1}s",
                run.result.best_error,
                first_zero.map(|s| s.iteration),
                t0.elapsed().as_secs_f64()
            );
        }
        return;
    }

    let base = PpoConfig::default();
    let lambda: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(base.lambda);
    let c2: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(base.c2);
    let lr: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(base.adam.lr);
    let mut cfg = PpoConfig { budget_episodes: 500, lambda, c2, ..base };
    cfg.adam.lr = lr;
    println!("lambda {lambda}  c2 {c2}  lr {lr}");

    for seed in [42u64, 7, 19, 0, 1, 123] {
        let t0 = std::time::Instant::now();
        let result = train(&env, &cfg, seed, None).unwrap();
        let first_zero = result.episodes.iter().find(|e| e.error == 0.0).map(|e| e.episode);
        let tail_mean: f64 = result
            .episodes
            .iter()
            .rev()
            .take(50)
            .map(|e| e.error)
            .sum::<f64>()
            / 50.0;
        println!(
            "seed {seed}: best {:.1}, first zero at {:?}, last-50 mean {:.1}, {:.1}s",
            result.best_error,
            first_zero,
            tail_mean,
            t0.elapsed().as_secs_f64()
        );
        let marks = [0usize, 49, 99, 199, 299, 399, 499];
        let line: Vec<String> = marks
            .iter()
            .filter_map(|&i| result.episodes.get(i).map(|e| format!("ep{i}:{:.0}", e.error)))
            .collect();
        println!("  {}", line.join("  "));
    }
}
