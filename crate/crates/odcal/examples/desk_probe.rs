// TEMPORARY probe for the desk-scale comparison plan. Not part of the
// deliverable; delete before finishing.

use std::sync::Arc;
use std::time::Instant;

use odcal::baselines::BoConfig;
use odcal::env::{EnvConfig, GroundTruthTable};
use odcal::experiments::{generate_true_demand, run_plan, ExperimentPlan, MethodKind};
use odcal::network::build_nguyen_dupuis;
use odcal::ppo::PpoConfig;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn main() {
    let budget: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let reps: u32 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let seed: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(42);
    let methods: Vec<MethodKind> = match std::env::args().nth(4).as_deref() {
        Some("bo5s") => vec![MethodKind::StBo5Sec],
        Some("rl") => vec![MethodKind::RlPpo],
        Some("fast") => vec![
            MethodKind::TrueReplication,
            MethodKind::RlPpo,
            MethodKind::StBo5Min,
            MethodKind::SqBo5Min,
        ],
        _ => MethodKind::ALL.to_vec(),
    };
    let mut ppo = PpoConfig::default();
    if let Some(c2) = std::env::args().nth(5).and_then(|s| s.parse().ok()) {
        ppo.c2 = c2;
    }
    if let Some(epochs) = std::env::args().nth(6).and_then(|s| s.parse().ok()) {
        ppo.epochs = epochs;
    }
    if let Some(epu) = std::env::args().nth(7).and_then(|s| s.parse().ok()) {
        ppo.episodes_per_update = epu;
    }
    if let Some(mb) = std::env::args().nth(8).and_then(|s| s.parse().ok()) {
        ppo.minibatch = mb;
    }

    let network = build_nguyen_dupuis(3.0);
    let mut env = EnvConfig::with_defaults(network, GroundTruthTable::zeros(3, 9));
    env.t_steps = 180; // 15 minute horizon at 5 s input steps
    let (true_trajectory, truth) = generate_true_demand(150, &env, seed).unwrap();
    env.ground_truth = truth;
    println!(
        "desk truth: {} vehicles realized, budget {budget}, reps {reps}, seed {seed}",
        true_trajectory.total_vehicles()
    );

    let plan = ExperimentPlan {
        env: Arc::new(env),
        true_trajectory,
        methods,
        repetitions: reps,
        budget,
        seed,
        ppo,
        bo: BoConfig::default(),
    };

    let t0 = Instant::now();
    let outcome = run_plan(&plan).unwrap();
    println!("plan ran in {:.1}s", t0.elapsed().as_secs_f64());

    for m in &outcome.methods {
        let errs: Vec<f64> = m.repetitions.iter().map(|r| r.best_error).collect();
        let evals: Vec<f64> = m.repetitions.iter().map(|r| r.eval_error).collect();
        if m.method != MethodKind::TrueReplication {
            for r in &m.repetitions {
                let mut best = f64::INFINITY;
                let curve: Vec<String> = r
                    .episodes
                    .iter()
                    .enumerate()
                    .filter_map(|(i, e)| {
                        best = best.min(e.error);
                        let mark = [24, 49, 99, 149, 199, 299, 449, 599, 799, 999];
                        if mark.contains(&i) || i + 1 == r.episodes.len() {
                            Some(format!("ep{i}:{best:.0}"))
                        } else {
                            None
                        }
                    })
                    .collect();
                println!("  {} rep {} curve: {}", m.method, r.repetition, curve.join("  "));
            }
        }
        println!(
            "{:<16} best median {:>9.1}  per-rep {:?}",
            m.method.to_string(),
            median(&errs),
            errs
        );
        println!("{:<16} eval median {:>9.1}  per-rep {:?}", "", median(&evals), evals);
        if !m.failures.is_empty() {
            for f in &m.failures {
                println!("  FAILURE rep {}: {}", f.repetition, f.message);
            }
        }
    }
    println!("truth eval error (noise reference): {:.1}", outcome.truth_eval_error);

    // Criterion-style verdicts when all four BO methods are present.
    let med = |kind: MethodKind| -> Option<f64> {
        outcome
            .methods
            .iter()
            .find(|m| m.method == kind)
            .filter(|m| !m.repetitions.is_empty())
            .map(|m| median(&m.repetitions.iter().map(|r| r.best_error).collect::<Vec<_>>()))
    };
    if let (Some(rl), Some(st5m), Some(sq5m), Some(st5s)) = (
        med(MethodKind::RlPpo),
        med(MethodKind::StBo5Min),
        med(MethodKind::SqBo5Min),
        med(MethodKind::StBo5Sec),
    ) {
        let best_bo = [
            med(MethodKind::StBo5Min),
            med(MethodKind::SqBo5Min),
            med(MethodKind::StBo5Sec),
            med(MethodKind::SqBo5Sec),
        ]
        .into_iter()
        .flatten()
        .fold(f64::INFINITY, f64::min);
        println!("ordering rl<st5m: {}", rl < st5m);
        println!("ordering st5m<sq5m: {}", st5m < sq5m);
        println!("ordering rl<st5s: {}", rl < st5s);
        println!("margin rl {:.1} vs best bo {:.1} => ratio {:.3} (need <= 0.8)", rl, best_bo, rl / best_bo);
    }

    // Criterion 10: RL reps passing the significance pipeline on all detectors.
    if let Some(m) = outcome.methods.iter().find(|m| m.method == MethodKind::RlPpo) {
        let n_detectors = outcome.env.network.detectors.len();
        let mut pass = 0;
        for r in &m.repetitions {
            let rows = outcome.rep_significance(r, 0.05).unwrap();
            let ok = rows.iter().filter(|row| row.chosen.p_value > 0.05).count();
            let all = ok == n_detectors;
            println!("rl rep {}: {}/{} detectors p>0.05 -> {}", r.repetition, ok, n_detectors, all);
            if all {
                pass += 1;
            }
        }
        println!("significance: {}/{} reps pass (need >= 4/5)", pass, m.repetitions.len());
    }
}
