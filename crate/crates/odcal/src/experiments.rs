//! Experiment protocol: one shared ground truth, matched evaluation budgets,
//! and a held-out evaluation seed.
//!
//! A plan runs every (method, repetition) cell independently, so the cells
//! parallelize across threads without changing any result: each cell derives
//! its own seed substream and the reduction happens single-threaded
//! afterwards. All methods calibrate against the same true demand table and
//! are compared by re-simulating their best trajectory on one evaluation
//! seed that none of them trained or searched on.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{bo_calibrate, table_scores, BoConfig, BoError, BoMode};
use crate::env::{evaluate_demand, EnvConfig, EnvError, GroundTruthTable, Trajectory};
use crate::metrics::quantile;
use crate::ppo::{train, CalibrationResult, EpisodeStat, PpoConfig, PpoError};
use crate::rng::{subseed, substream};
use crate::stats::{significance_pipeline, PipelineRow, StatsError};
use rand::Rng;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment plan: {0}")]
    BadConfig(String),
    #[error(
        "demand generation: {attempts} draws never landed within {tolerance} of {target} vehicles"
    )]
    ResampleExhausted { target: u64, tolerance: f64, attempts: u32 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Resampling attempts before giving up on hitting the vehicle-count
/// tolerance. Generous: at the default scale a draw lands inside the band
/// most of the time.
const MAX_RESAMPLES: u32 = 10_000;

/// Draws a random true demand trajectory and simulates it once into the
/// detector table that the calibration methods will target.
///
/// Every (input step, OD pair) cell is an independent Bernoulli draw with
/// p = total_vehicles / (T * n_od), resampled until the realized vehicle
/// count lands within 5% of the request. The trajectory comes from the
/// `truth/traj` substream of `seed` and the single simulation from
/// `truth/sim`, so truth generation never shares randomness with training
/// or evaluation.
pub fn generate_true_demand(
    total_vehicles: u64,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<(Trajectory, GroundTruthTable), ExperimentError> {
    env_cfg.validate()?;
    let t_steps = env_cfg.t_steps as usize;
    let n_od = env_cfg.n_od();
    let cells = (t_steps * n_od) as u64;
    if total_vehicles > cells {
        return Err(ExperimentError::BadConfig(format!(
            "{total_vehicles} vehicles cannot fit in {cells} binary demand cells"
        )));
    }
    let p = total_vehicles as f64 / cells as f64;
    let tolerance = 0.05 * total_vehicles as f64;

    let mut rng = substream(seed, "truth/traj");
    let mut trajectory = None;
    for _ in 0..MAX_RESAMPLES {
        let mut traj = Trajectory::zeros(t_steps, n_od);
        for row in &mut traj.bits {
            for bit in row.iter_mut() {
                *bit = rng.gen::<f64>() < p;
            }
        }
        let realized = traj.total_vehicles() as f64;
        if (realized - total_vehicles as f64).abs() <= tolerance {
            trajectory = Some(traj);
            break;
        }
    }
    let trajectory = trajectory.ok_or(ExperimentError::ResampleExhausted {
        target: total_vehicles,
        tolerance,
        attempts: MAX_RESAMPLES,
    })?;

    // Simulate under a placeholder truth table; only the simulated counts
    // matter here.
    let mut sim_cfg = env_cfg.clone();
    sim_cfg.ground_truth =
        GroundTruthTable::zeros(env_cfg.k_intervals(), env_cfg.network.n_detectors());
    let (table, _) = evaluate_demand(&Arc::new(sim_cfg), &trajectory, subseed(seed, "truth/sim"))?;
    Ok((trajectory, table))
}

/// Sums a binary demand trajectory into interval-by-OD vehicle counts, the
/// same granularity as the coarse calibration encoding.
pub fn od_interval_aggregate(trajectory: &Trajectory, inputs_per_output: usize) -> Vec<Vec<u32>> {
    trajectory.interval_totals(inputs_per_output)
}

/// The calibration methods under comparison. The interval variants act on
/// aggregation-interval counts (5 min at the default scale); the step
/// variants act on per-input-step demand bits (5 s at the default scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    /// Replays the true demand on the repetition's own simulator seed: the
    /// stochastic noise floor every method is bounded by.
    #[serde(rename = "true-replication")]
    TrueReplication,
    #[serde(rename = "rl-ppo")]
    RlPpo,
    /// Simultaneous-perturbation BO over interval counts.
    #[serde(rename = "st-bo-5min")]
    StBo5Min,
    /// Simultaneous-perturbation BO over per-step bits.
    #[serde(rename = "st-bo-5s")]
    StBo5Sec,
    /// Sequential (interval-by-interval) BO over interval counts.
    #[serde(rename = "sq-bo-5min")]
    SqBo5Min,
    /// Sequential BO over per-step bits.
    #[serde(rename = "sq-bo-5s")]
    SqBo5Sec,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::TrueReplication,
        MethodKind::RlPpo,
        MethodKind::StBo5Min,
        MethodKind::StBo5Sec,
        MethodKind::SqBo5Min,
        MethodKind::SqBo5Sec,
    ];

    /// Stable identifier used in seed substreams, file names, and CSVs.
    pub fn slug(self) -> &'static str {
        match self {
            MethodKind::TrueReplication => "true-replication",
            MethodKind::RlPpo => "rl-ppo",
            MethodKind::StBo5Min => "st-bo-5min",
            MethodKind::StBo5Sec => "st-bo-5s",
            MethodKind::SqBo5Min => "sq-bo-5min",
            MethodKind::SqBo5Sec => "sq-bo-5s",
        }
    }

    /// BO mode plus whether the encoding works on aggregation intervals
    /// (true) or input steps (false); None for non-BO methods.
    fn bo_spec(self) -> Option<(BoMode, bool)> {
        match self {
            MethodKind::TrueReplication | MethodKind::RlPpo => None,
            MethodKind::StBo5Min => Some((BoMode::Simultaneous, true)),
            MethodKind::StBo5Sec => Some((BoMode::Simultaneous, false)),
            MethodKind::SqBo5Min => Some((BoMode::Sequential, true)),
            MethodKind::SqBo5Sec => Some((BoMode::Sequential, false)),
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Full description of a comparison run: which methods, how many
/// repetitions, and the one evaluation budget every method gets.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub env: Arc<EnvConfig>,
    pub true_trajectory: Trajectory,
    pub methods: Vec<MethodKind>,
    pub repetitions: u32,
    /// Simulator evaluations per repetition: training episodes for PPO,
    /// objective evaluations for BO. True replication always uses one.
    pub budget: u32,
    pub seed: u64,
    /// Template for the PPO method; the episode budget is overridden by
    /// `budget`.
    pub ppo: PpoConfig,
    /// Template for the BO methods; mode, encoding interval, and iteration
    /// budget are overridden per method.
    pub bo: BoConfig,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.env.validate()?;
        let bad = |m: String| Err(ExperimentError::BadConfig(m));
        if self.methods.is_empty() {
            return bad("plan needs at least one method".into());
        }
        let unique: HashSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return bad("plan lists a method twice".into());
        }
        if self.repetitions == 0 {
            return bad("plan needs at least one repetition".into());
        }
        if self.budget == 0 {
            return bad("plan needs a positive evaluation budget".into());
        }
        if self.true_trajectory.t_steps() != self.env.t_steps as usize
            || self.true_trajectory.n_od() != self.env.n_od()
        {
            return bad(format!(
                "true trajectory shape {}x{} does not match environment {}x{}",
                self.true_trajectory.t_steps(),
                self.true_trajectory.n_od(),
                self.env.t_steps,
                self.env.n_od()
            ));
        }
        Ok(())
    }

    /// PPO settings for the plan: the template with the shared budget.
    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig { budget_episodes: self.budget, ..self.ppo.clone() }
    }

    /// BO settings for one of the BO methods, or None for the others.
    pub fn bo_config(&self, method: MethodKind) -> Option<BoConfig> {
        let (mode, interval_level) = method.bo_spec()?;
        let step_s = self.env.steps_per_input as f64 * self.env.sim_dt;
        let input_interval_s =
            if interval_level { step_s * self.env.inputs_per_output as f64 } else { step_s };
        Some(BoConfig { mode, input_interval_s, iterations: self.budget, ..self.bo.clone() })
    }
}

/// One completed (method, repetition) cell.
#[derive(Debug, Clone)]
pub struct RepetitionResult {
    pub repetition: u32,
    /// Seed substream the cell trained or searched on.
    pub cell_seed: u64,
    /// Best calibration error the method found on its own seeds.
    pub best_error: f64,
    /// Reward view of the same incumbent; always exactly `-best_error`.
    pub best_reward: f64,
    /// Error of the best trajectory re-simulated on the held-out
    /// evaluation seed shared by every cell.
    pub eval_error: f64,
    pub best_table: GroundTruthTable,
    pub eval_table: GroundTruthTable,
    /// Best demand aggregated to interval-by-OD counts.
    pub od_estimate: Vec<Vec<u32>>,
    pub best_trajectory: Trajectory,
    /// Per-evaluation history (training episodes or BO evaluations).
    pub episodes: Vec<EpisodeStat>,
}

#[derive(Debug, Clone)]
pub struct CellFailure {
    pub repetition: u32,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: MethodKind,
    pub repetitions: Vec<RepetitionResult>,
    /// Cells that errored; they never abort the rest of the plan.
    pub failures: Vec<CellFailure>,
}

/// Per-method aggregate over the successful repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: MethodKind,
    pub reps_ok: usize,
    pub failures: usize,
    pub mean_best_reward: f64,
    pub mean_best_error: f64,
    pub median_best_error: f64,
    pub mean_eval_error: f64,
    pub median_eval_error: f64,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub env: Arc<EnvConfig>,
    pub true_trajectory: Trajectory,
    /// Seed every best trajectory was re-simulated on.
    pub eval_seed: u64,
    /// True demand simulated on the evaluation seed: the reference side of
    /// every significance test.
    pub truth_eval_table: GroundTruthTable,
    /// Residual error of the truth on the evaluation seed against the
    /// ground-truth table (simulator noise, not calibration error).
    pub truth_eval_error: f64,
    pub methods: Vec<MethodResult>,
    pub summary: Vec<SummaryRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile(&sorted, 0.5)
}

fn run_cell(
    plan: &ExperimentPlan,
    method: MethodKind,
    rep: u32,
    eval_seed: u64,
) -> Result<RepetitionResult, ExperimentError> {
    let cell_seed = subseed(plan.seed, &format!("plan/{}/rep{rep}", method.slug()));
    let result = match method {
        MethodKind::TrueReplication => {
            let (table, error) = evaluate_demand(&plan.env, &plan.true_trajectory, cell_seed)?;
            let (_, discounted) = table_scores(&plan.env, &table);
            CalibrationResult {
                best_trajectory: plan.true_trajectory.clone(),
                best_error: error,
                best_table: table,
                episodes: vec![EpisodeStat { episode: 0, error, discounted_return: discounted }],
                checkpoint: None,
            }
        }
        MethodKind::RlPpo => train(&plan.env, &plan.ppo_config(), cell_seed, None)?,
        _ => {
            let cfg = plan.bo_config(method).expect("remaining methods are BO");
            bo_calibrate(&plan.env, &cfg, cell_seed)?.result
        }
    };
    let (eval_table, eval_error) = evaluate_demand(&plan.env, &result.best_trajectory, eval_seed)?;
    let od_estimate =
        od_interval_aggregate(&result.best_trajectory, plan.env.inputs_per_output as usize);
    Ok(RepetitionResult {
        repetition: rep,
        cell_seed,
        best_error: result.best_error,
        best_reward: -result.best_error,
        eval_error,
        best_table: result.best_table,
        eval_table,
        od_estimate,
        best_trajectory: result.best_trajectory,
        episodes: result.episodes,
    })
}

/// Runs every (method, repetition) cell of the plan and reduces the results.
///
/// Cells run in parallel but derive all randomness from per-cell seed
/// substreams, so the outcome is bit-identical regardless of thread count.
/// A failing cell is recorded under its method and skipped; the rest of the
/// plan still completes.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanOutcome, ExperimentError> {
    plan.validate()?;
    let eval_seed = subseed(plan.seed, "plan/eval");
    let (truth_eval_table, truth_eval_error) =
        evaluate_demand(&plan.env, &plan.true_trajectory, eval_seed)?;

    let cells: Vec<(usize, u32)> = (0..plan.methods.len())
        .flat_map(|mi| (0..plan.repetitions).map(move |rep| (mi, rep)))
        .collect();
    // Indexed parallel iterators collect in input order, so the reduction
    // below sees cells in (method, repetition) order.
    let raw: Vec<(usize, u32, Result<RepetitionResult, String>)> = cells
        .par_iter()
        .map(|&(mi, rep)| {
            let outcome =
                run_cell(plan, plan.methods[mi], rep, eval_seed).map_err(|e| e.to_string());
            (mi, rep, outcome)
        })
        .collect();

    let mut methods: Vec<MethodResult> = plan
        .methods
        .iter()
        .map(|&method| MethodResult { method, repetitions: Vec::new(), failures: Vec::new() })
        .collect();
    for (mi, rep, outcome) in raw {
        match outcome {
            Ok(result) => methods[mi].repetitions.push(result),
            Err(message) => methods[mi].failures.push(CellFailure { repetition: rep, message }),
        }
    }

    let summary = methods
        .iter()
        .map(|m| {
            let rewards: Vec<f64> = m.repetitions.iter().map(|r| r.best_reward).collect();
            let errors: Vec<f64> = m.repetitions.iter().map(|r| r.best_error).collect();
            let eval_errors: Vec<f64> = m.repetitions.iter().map(|r| r.eval_error).collect();
            let stat = |xs: &[f64], f: fn(&[f64]) -> f64| {
                if xs.is_empty() { f64::NAN } else { f(xs) }
            };
            SummaryRow {
                method: m.method,
                reps_ok: m.repetitions.len(),
                failures: m.failures.len(),
                mean_best_reward: stat(&rewards, mean),
                mean_best_error: stat(&errors, mean),
                median_best_error: stat(&errors, median),
                mean_eval_error: stat(&eval_errors, mean),
                median_eval_error: stat(&eval_errors, median),
            }
        })
        .collect();

    Ok(PlanOutcome {
        env: Arc::clone(&plan.env),
        true_trajectory: plan.true_trajectory.clone(),
        eval_seed,
        truth_eval_table,
        truth_eval_error,
        methods,
        summary,
    })
}

impl PlanOutcome {
    /// Methods ordered best first by mean best reward; methods with no
    /// successful repetition sort last.
    pub fn ranking(&self) -> Vec<MethodKind> {
        let mut rows: Vec<&SummaryRow> = self.summary.iter().collect();
        rows.sort_by(|a, b| {
            (b.reps_ok > 0)
                .cmp(&(a.reps_ok > 0))
                .then_with(|| b.mean_best_reward.total_cmp(&a.mean_best_reward))
        });
        rows.into_iter().map(|r| r.method).collect()
    }

    /// Tests one repetition's evaluation table against the truth simulated
    /// on the same held-out seed.
    pub fn rep_significance(
        &self,
        rep: &RepetitionResult,
        alpha: f64,
    ) -> Result<Vec<PipelineRow>, StatsError> {
        significance_pipeline(&rep.eval_table, &self.truth_eval_table, &self.env.network, alpha)
    }

    /// Writes the comparison as CSV files under `dir`: per-repetition
    /// results, the long-format evaluation history for convergence plots,
    /// detector counts next to the truth, OD estimates, failures, and the
    /// summary table.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir)?;

        let mut reps = csv::Writer::from_path(dir.join("repetitions.csv"))?;
        reps.write_record([
            "method",
            "repetition",
            "cell_seed",
            "best_error",
            "best_reward",
            "eval_error",
            "evaluations",
        ])?;
        for m in &self.methods {
            for r in &m.repetitions {
                reps.write_record([
                    m.method.slug().to_string(),
                    r.repetition.to_string(),
                    r.cell_seed.to_string(),
                    r.best_error.to_string(),
                    r.best_reward.to_string(),
                    r.eval_error.to_string(),
                    r.episodes.len().to_string(),
                ])?;
            }
        }
        reps.flush()?;

        let mut hist = csv::Writer::from_path(dir.join("episodes.csv"))?;
        hist.write_record(["method", "repetition", "episode", "error", "discounted_return"])?;
        for m in &self.methods {
            for r in &m.repetitions {
                for e in &r.episodes {
                    hist.write_record([
                        m.method.slug().to_string(),
                        r.repetition.to_string(),
                        e.episode.to_string(),
                        e.error.to_string(),
                        e.discounted_return.to_string(),
                    ])?;
                }
            }
        }
        hist.flush()?;

        let mut counts = csv::Writer::from_path(dir.join("detector_counts.csv"))?;
        counts.write_record([
            "method",
            "repetition",
            "interval",
            "detector_link",
            "simulated",
            "truth",
        ])?;
        for m in &self.methods {
            for r in &m.repetitions {
                for (k, row) in r.eval_table.rows.iter().enumerate() {
                    for (j, &link) in self.env.network.detectors.iter().enumerate() {
                        counts.write_record([
                            m.method.slug().to_string(),
                            r.repetition.to_string(),
                            k.to_string(),
                            link.to_string(),
                            row[j].to_string(),
                            self.truth_eval_table.rows[k][j].to_string(),
                        ])?;
                    }
                }
            }
        }
        counts.flush()?;

        let mut od = csv::Writer::from_path(dir.join("od_estimates.csv"))?;
        od.write_record(["method", "repetition", "interval", "origin", "destination", "count"])?;
        let truth_od =
            od_interval_aggregate(&self.true_trajectory, self.env.inputs_per_output as usize);
        let od_pairs = &self.env.network.od_pairs;
        let mut write_table = |method: &str, rep: u32, table: &[Vec<u32>]| -> Result<(), csv::Error> {
            for (k, row) in table.iter().enumerate() {
                for (i, &(o, d)) in od_pairs.iter().enumerate() {
                    od.write_record([
                        method.to_string(),
                        rep.to_string(),
                        k.to_string(),
                        o.to_string(),
                        d.to_string(),
                        row[i].to_string(),
                    ])?;
                }
            }
            Ok(())
        };
        write_table("truth", 0, &truth_od)?;
        for m in &self.methods {
            for r in &m.repetitions {
                write_table(m.method.slug(), r.repetition, &r.od_estimate)?;
            }
        }
        od.flush()?;

        let mut failures = csv::Writer::from_path(dir.join("failures.csv"))?;
        failures.write_record(["method", "repetition", "message"])?;
        for m in &self.methods {
            for f in &m.failures {
                failures.write_record([
                    m.method.slug(),
                    &f.repetition.to_string(),
                    &f.message,
                ])?;
            }
        }
        failures.flush()?;

        let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
        summary.write_record([
            "method",
            "reps_ok",
            "failures",
            "mean_best_reward",
            "mean_best_error",
            "median_best_error",
            "mean_eval_error",
            "median_eval_error",
        ])?;
        for row in &self.summary {
            summary.write_record([
                row.method.slug().to_string(),
                row.reps_ok.to_string(),
                row.failures.to_string(),
                row.mean_best_reward.to_string(),
                row.mean_best_error.to_string(),
                row.median_best_error.to_string(),
                row.mean_eval_error.to_string(),
                row.median_eval_error.to_string(),
            ])?;
        }
        summary.flush()?;
        Ok(())
    }
}

/// How many detectors pass the per-detector comparison at `alpha`
/// (p above the threshold means no detectable difference).
pub fn detectors_passing(rows: &[PipelineRow], alpha: f64) -> usize {
    rows.iter().filter(|r| r.chosen.p_value > alpha).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_nguyen_dupuis, LinkSpec, NetworkSpec};
    use proptest::prelude::*;

    /// Tiny two-OD, one-detector environment with short episodes.
    fn tiny_env(truth_rows: Vec<Vec<u32>>) -> Arc<EnvConfig> {
        let links: Vec<LinkSpec> = (0..3)
            .map(|i| LinkSpec {
                id: i,
                from_node: i as u32 + 1,
                to_node: i as u32 + 2,
                length: 120.0,
                free_flow_speed: 13.89,
                lane_count: 1,
                has_detector: false,
            })
            .collect();
        let net = NetworkSpec::new(links, vec![(1, 4), (2, 4)], vec![1]).unwrap();
        let mut cfg = EnvConfig::with_defaults(net, GroundTruthTable { rows: truth_rows });
        cfg.t_steps = 20;
        cfg.inputs_per_output = 10;
        Arc::new(cfg)
    }

    fn tiny_plan(env: &Arc<EnvConfig>, truth: Trajectory, methods: Vec<MethodKind>) -> ExperimentPlan {
        ExperimentPlan {
            env: Arc::clone(env),
            true_trajectory: truth,
            methods,
            repetitions: 2,
            budget: 4,
            seed: 99,
            ppo: PpoConfig {
                hidden_dim: 8,
                epochs: 2,
                minibatch: 64,
                episodes_per_update: 2,
                ..PpoConfig::default()
            },
            bo: BoConfig {
                initial_samples: 2,
                candidates: 32,
                incumbent_perturbations: 8,
                max_count: 10,
                ..BoConfig::default()
            },
        }
    }

    #[test]
    fn tight_tolerance_forces_exact_count() {
        // 8 requested out of 40 cells: the 5% band is narrower than one
        // vehicle, so the resample loop must land exactly.
        let env = tiny_env(vec![vec![0], vec![0]]);
        let (traj, table) = generate_true_demand(8, &env, 5).unwrap();
        assert_eq!(traj.total_vehicles(), 8);
        assert_eq!(traj.t_steps(), 20);
        assert_eq!(traj.n_od(), 2);
        assert_eq!(table.k_intervals(), 2);
        assert_eq!(table.n_detectors(), 1);
    }

    #[test]
    fn zero_total_gives_empty_demand_and_zero_table() {
        let env = tiny_env(vec![vec![0], vec![0]]);
        let (traj, table) = generate_true_demand(0, &env, 5).unwrap();
        assert_eq!(traj.total_vehicles(), 0);
        assert!(table.rows.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn truth_generation_is_deterministic_and_seed_sensitive() {
        let env = tiny_env(vec![vec![0], vec![0]]);
        let (a, ta) = generate_true_demand(8, &env, 5).unwrap();
        let (b, tb) = generate_true_demand(8, &env, 5).unwrap();
        assert_eq!(a.bits, b.bits);
        assert_eq!(ta.rows, tb.rows);
        let (c, _) = generate_true_demand(8, &env, 6).unwrap();
        assert_ne!(a.bits, c.bits);
    }

    #[test]
    fn overfull_request_is_rejected() {
        let env = tiny_env(vec![vec![0], vec![0]]);
        let err = generate_true_demand(41, &env, 5).unwrap_err();
        assert!(matches!(err, ExperimentError::BadConfig(_)));
    }

    #[test]
    fn full_scale_truth_hits_the_tolerance_band() {
        let net = build_nguyen_dupuis(3.0);
        let env = EnvConfig::with_defaults(net, GroundTruthTable::zeros(6, 9));
        let (traj, table) = generate_true_demand(300, &env, 42).unwrap();
        let realized = traj.total_vehicles() as f64;
        assert!((realized - 300.0).abs() <= 15.0, "realized {realized}");
        assert_eq!(table.k_intervals(), 6);
        assert_eq!(table.n_detectors(), 9);
        // A vehicle crosses each detector link at most once, so the table
        // cannot hold more crossings than vehicles times detectors.
        let crossings: u64 = table.rows.iter().flatten().map(|&c| u64::from(c)).sum();
        assert!(crossings <= realized as u64 * 9);
        assert!(crossings > 0);
    }

    #[test]
    fn aggregate_full_scale_all_ones() {
        // Every (step, OD) bit set: each of the 6x4 cells counts one
        // vehicle per input step of its interval.
        let traj = Trajectory { bits: vec![vec![true; 4]; 360] };
        let agg = od_interval_aggregate(&traj, 60);
        assert_eq!(agg.len(), 6);
        assert!(agg.iter().all(|row| row == &vec![60, 60, 60, 60]));
    }

    #[test]
    fn aggregate_empty_is_zero() {
        let traj = Trajectory::zeros(20, 2);
        let agg = od_interval_aggregate(&traj, 10);
        assert_eq!(agg, vec![vec![0, 0], vec![0, 0]]);
    }

    proptest! {
        #[test]
        fn aggregate_column_sums_match_od_totals(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = substream(seed, "test/agg");
            let mut traj = Trajectory::zeros(20, 3);
            for row in &mut traj.bits {
                for bit in row.iter_mut() {
                    *bit = rng.gen_bool(0.3);
                }
            }
            let agg = od_interval_aggregate(&traj, 5);
            prop_assert_eq!(agg.len(), 4);
            for od in 0..3 {
                let col: u64 = agg.iter().map(|row| u64::from(row[od])).sum();
                let direct: u64 =
                    traj.bits.iter().map(|row| u64::from(row[od])).sum();
                prop_assert_eq!(col, direct);
            }
        }
    }

    #[test]
    fn method_slugs_are_distinct_and_stable() {
        let slugs: HashSet<&str> = MethodKind::ALL.iter().map(|m| m.slug()).collect();
        assert_eq!(slugs.len(), 6);
        assert_eq!(MethodKind::RlPpo.to_string(), "rl-ppo");
        assert_eq!(MethodKind::StBo5Sec.to_string(), "st-bo-5s");
        // Serde names agree with the slugs, so config files and output
        // files use the same vocabulary.
        #[derive(Deserialize)]
        struct Probe {
            m: MethodKind,
        }
        let p: Probe = toml::from_str("m = \"sq-bo-5min\"").unwrap();
        assert_eq!(p.m, MethodKind::SqBo5Min);
    }

    #[test]
    fn bo_config_wiring_matches_method() {
        let env = tiny_env(vec![vec![0], vec![0]]);
        let (truth, _) = generate_true_demand(8, &env, 5).unwrap();
        let plan = tiny_plan(&env, truth, vec![MethodKind::RlPpo]);
        assert!(plan.bo_config(MethodKind::RlPpo).is_none());
        assert!(plan.bo_config(MethodKind::TrueReplication).is_none());
        // Tiny env: 5 s steps, 50 s intervals.
        let st_min = plan.bo_config(MethodKind::StBo5Min).unwrap();
        assert_eq!(st_min.mode, BoMode::Simultaneous);
        assert_eq!(st_min.input_interval_s, 50.0);
        assert_eq!(st_min.iterations, plan.budget);
        let sq_s = plan.bo_config(MethodKind::SqBo5Sec).unwrap();
        assert_eq!(sq_s.mode, BoMode::Sequential);
        assert_eq!(sq_s.input_interval_s, 5.0);
        assert_eq!(plan.ppo_config().budget_episodes, plan.budget);
    }

    #[test]
    fn plan_validation_catches_bad_shapes() {
        let env = tiny_env(vec![vec![0], vec![0]]);
        let (truth, _) = generate_true_demand(8, &env, 5).unwrap();
        let good = tiny_plan(&env, truth.clone(), vec![MethodKind::TrueReplication]);
        good.validate().unwrap();

        let mut dup = good.clone();
        dup.methods = vec![MethodKind::RlPpo, MethodKind::RlPpo];
        assert!(dup.validate().is_err());

        let mut zero_rep = good.clone();
        zero_rep.repetitions = 0;
        assert!(zero_rep.validate().is_err());

        let mut wrong_shape = good.clone();
        wrong_shape.true_trajectory = Trajectory::zeros(10, 2);
        assert!(wrong_shape.validate().is_err());

        let mut empty = good;
        empty.methods = Vec::new();
        assert!(empty.validate().is_err());
    }

    #[test]
    fn plan_is_deterministic_with_matched_budgets() {
        let env = tiny_env(vec![vec![4], vec![2]]);
        let (truth, table) = generate_true_demand(8, &env, 5).unwrap();
        let mut cfg = (*env).clone();
        cfg.ground_truth = table;
        let env = Arc::new(cfg);
        let methods =
            vec![MethodKind::TrueReplication, MethodKind::RlPpo, MethodKind::StBo5Min];
        let plan = tiny_plan(&env, truth, methods.clone());

        let a = run_plan(&plan).unwrap();
        let b = run_plan(&plan).unwrap();

        for (ma, mb) in a.methods.iter().zip(&b.methods) {
            assert_eq!(ma.repetitions.len(), 2);
            assert!(ma.failures.is_empty());
            for (ra, rb) in ma.repetitions.iter().zip(&mb.repetitions) {
                assert_eq!(ra.best_error.to_bits(), rb.best_error.to_bits());
                assert_eq!(ra.eval_error.to_bits(), rb.eval_error.to_bits());
                assert_eq!(ra.best_trajectory.bits, rb.best_trajectory.bits);
                assert_eq!(ra.od_estimate, rb.od_estimate);
                // Reward is exactly the negated error.
                assert_eq!(ra.best_reward, -ra.best_error);
            }
        }

        // Budget parity: one evaluation for replication, `budget` for the
        // calibration methods.
        let by_kind = |o: &PlanOutcome, m: MethodKind| {
            o.methods.iter().find(|mr| mr.method == m).unwrap().repetitions[0].episodes.len()
        };
        assert_eq!(by_kind(&a, MethodKind::TrueReplication), 1);
        assert_eq!(by_kind(&a, MethodKind::RlPpo), plan.budget as usize);
        assert_eq!(by_kind(&a, MethodKind::StBo5Min), plan.budget as usize);

        // Cell seeds never collide.
        let seeds: HashSet<u64> = a
            .methods
            .iter()
            .flat_map(|m| m.repetitions.iter().map(|r| r.cell_seed))
            .collect();
        assert_eq!(seeds.len(), methods.len() * 2);

        // Replication re-evaluated on the held-out seed reproduces the
        // truth reference bit for bit.
        let rep = &a.methods[0].repetitions[0];
        assert_eq!(rep.eval_table.rows, a.truth_eval_table.rows);
        assert_eq!(rep.eval_error.to_bits(), a.truth_eval_error.to_bits());
    }

    #[test]
    fn failing_method_is_flagged_without_aborting_the_plan() {
        let env = tiny_env(vec![vec![4], vec![2]]);
        let (truth, table) = generate_true_demand(8, &env, 5).unwrap();
        let mut cfg = (*env).clone();
        cfg.ground_truth = table;
        let env = Arc::new(cfg);
        let mut plan =
            tiny_plan(&env, truth, vec![MethodKind::TrueReplication, MethodKind::StBo5Min]);
        // 100 vehicles per interval cell cannot be scheduled into 10 input
        // steps, so every ST-BO cell fails while replication still runs.
        plan.bo.max_count = 100;

        let outcome = run_plan(&plan).unwrap();
        let replication = &outcome.methods[0];
        assert_eq!(replication.repetitions.len(), 2);
        assert!(replication.failures.is_empty());
        let st = &outcome.methods[1];
        assert!(st.repetitions.is_empty());
        assert_eq!(st.failures.len(), 2);
        assert!(st.failures[0].message.contains("max_count"));

        // Summary and ranking stay well defined: the failed method sorts
        // last with NaN aggregates.
        assert_eq!(outcome.summary[1].reps_ok, 0);
        assert!(outcome.summary[1].mean_best_error.is_nan());
        assert_eq!(
            outcome.ranking(),
            vec![MethodKind::TrueReplication, MethodKind::StBo5Min]
        );
    }

    #[test]
    fn replication_passes_significance_against_itself() {
        let env = tiny_env(vec![vec![4], vec![2]]);
        let (truth, table) = generate_true_demand(8, &env, 5).unwrap();
        let mut cfg = (*env).clone();
        cfg.ground_truth = table;
        let env = Arc::new(cfg);
        let plan = tiny_plan(&env, truth, vec![MethodKind::TrueReplication]);
        let outcome = run_plan(&plan).unwrap();
        let rep = &outcome.methods[0].repetitions[0];
        // Identical tables: every detector column has all-zero differences
        // and passes with p = 1.
        let rows = outcome.rep_significance(rep, 0.05).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].chosen.p_value, 1.0);
        assert_eq!(detectors_passing(&rows, 0.05), 1);
    }

    #[test]
    fn outputs_cover_every_cell() {
        let env = tiny_env(vec![vec![4], vec![2]]);
        let (truth, table) = generate_true_demand(8, &env, 5).unwrap();
        let mut cfg = (*env).clone();
        cfg.ground_truth = table;
        let env = Arc::new(cfg);
        let plan =
            tiny_plan(&env, truth, vec![MethodKind::TrueReplication, MethodKind::StBo5Min]);
        let outcome = run_plan(&plan).unwrap();

        let dir = tempfile::tempdir().unwrap();
        outcome.write_outputs(dir.path()).unwrap();

        let lines = |name: &str| {
            fs::read_to_string(dir.path().join(name)).unwrap().lines().count()
        };
        // Header plus one row per repetition.
        assert_eq!(lines("repetitions.csv"), 1 + 4);
        // Header plus one row per recorded evaluation: 1 + 1 for
        // replication, 4 + 4 for BO.
        assert_eq!(lines("episodes.csv"), 1 + 2 + 8);
        // Header plus (truth + 4 repetitions) x 2 intervals x 2 OD pairs.
        assert_eq!(lines("od_estimates.csv"), 1 + 5 * 4);
        // Header plus 4 repetitions x 2 intervals x 1 detector.
        assert_eq!(lines("detector_counts.csv"), 1 + 8);
        assert_eq!(lines("summary.csv"), 1 + 2);
        assert_eq!(lines("failures.csv"), 1);
        assert!(fs::read_to_string(dir.path().join("summary.csv"))
            .unwrap()
            .starts_with("method,"));
    }
}
