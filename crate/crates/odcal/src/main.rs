//! Command-line front end: ground-truth generation, PPO training, BO
//! baselines, the full method comparison, single-trajectory evaluation, and
//! report generation. Every command reads one TOML config, derives all
//! randomness from the config seed, and writes deterministic CSV or plain
//! text artifacts, so re-running a command reproduces its outputs byte for
//! byte. The config file is echoed into the output directory for
//! provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use odcal::baselines::{bo_calibrate, BoError};
use odcal::config::{ConfigError, RunConfig};
use odcal::env::{evaluate_demand, EnvError, GroundTruthTable, Trajectory};
use odcal::experiments::{
    detectors_passing, generate_true_demand, run_plan, ExperimentError, ExperimentPlan,
    PlanOutcome,
};
use odcal::metrics::{table_metrics, MetricsError, MetricsReport};
use odcal::microsim::SimError;
use odcal::network::NetworkError;
use odcal::ppo::{self, CalibrationResult, PpoError};
use odcal::rng::subseed;
use odcal::stats::{significance_pipeline, PipelineRow, StatsError};

#[derive(Parser)]
#[command(
    name = "odcal",
    about = "Dynamic OD demand calibration: microscopic simulation, PPO, and BO baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration file.
    #[arg(long, global = true, default_value = "odcal.toml")]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for plan cells; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the true demand trajectory and simulate its detector table.
    GenTruth,
    /// Train the PPO agent against the stored ground truth.
    Train,
    /// Run the Bayesian-optimization baseline configured in [bo].
    Baseline,
    /// Run every configured method and repetition under matched budgets.
    RunPlan,
    /// Simulate one demand trajectory and report its calibration error.
    ///
    /// Uses the `truth/sim` seed substream, so evaluating the stored truth
    /// trajectory under the generating seed reproduces the truth table
    /// exactly (error 0).
    Evaluate {
        /// Demand CSV to score; defaults to the stored truth trajectory.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Post-process run-plan outputs into metrics, significance tests, and
    /// a plain-text ranking.
    Report,
}

/// Process-level error: a message plus the exit code class. Config problems
/// exit 2, missing inputs 3, non-finite training aborts 4, and simulator
/// integrity failures 5; anything else (I/O, numerics) exits 1.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

/// Formats an error with its source chain, skipping sources whose message
/// the parent already embeds.
fn describe(e: &(dyn std::error::Error + 'static)) -> String {
    let mut s = e.to_string();
    let mut current: &(dyn std::error::Error + 'static) = e;
    while let Some(inner) = current.source() {
        let msg = inner.to_string();
        if !s.contains(&msg) {
            s.push_str(": ");
            s.push_str(&msg);
        }
        current = inner;
    }
    s
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match &e {
            ConfigError::MissingInput { .. } => 3,
            ConfigError::Network(NetworkError::Io(io))
                if io.kind() == std::io::ErrorKind::NotFound =>
            {
                3
            }
            _ => 2,
        };
        CliError::new(code, describe(&e))
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        let code = match &e {
            EnvError::Sim(SimError::Ordering { .. }) => 5,
            EnvError::Sim(_) | EnvError::BadConfig(_) => 2,
            EnvError::BadAction { .. } | EnvError::StepAfterDone => 2,
            EnvError::Io(_) | EnvError::Parse(_) => 1,
        };
        CliError::new(code, describe(&e))
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::NonFinite { .. } => CliError::new(4, describe(&e)),
            PpoError::Env(inner) => inner.into(),
            PpoError::Neural(_) => CliError::new(1, describe(&e)),
        }
    }
}

impl From<BoError> for CliError {
    fn from(e: BoError) -> Self {
        match e {
            BoError::BadConfig(_) => CliError::new(2, describe(&e)),
            BoError::Env(inner) => inner.into(),
            BoError::IllConditioned { .. } => CliError::new(1, describe(&e)),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::BadConfig(_) | ExperimentError::ResampleExhausted { .. } => {
                CliError::new(2, describe(&e))
            }
            ExperimentError::Env(inner) => inner.into(),
            ExperimentError::Ppo(inner) => inner.into(),
            ExperimentError::Bo(inner) => inner.into(),
            ExperimentError::Io(_) | ExperimentError::Csv(_) => CliError::new(1, describe(&e)),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::new(1, describe(&e))
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::new(1, describe(&e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, describe(&e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new(1, describe(&e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs > 0 {
        // Ignore the error if a pool already exists; the size hint is
        // best-effort.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    echo_config(&cli.config, &out)?;

    match cli.command {
        Command::GenTruth => cmd_gen_truth(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Baseline => cmd_baseline(&cfg, &out),
        Command::RunPlan => cmd_run_plan(&cfg, &out),
        Command::Evaluate { trajectory } => cmd_evaluate(&cfg, &out, trajectory.as_deref()),
        Command::Report => cmd_report(&cfg, &out),
    }
}

/// Copies the config file into the output directory unless it already is
/// that file.
fn echo_config(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let dest = out.join("config.toml");
    if let (Ok(a), Ok(b)) = (config_path.canonicalize(), dest.canonicalize()) {
        if a == b {
            return Ok(());
        }
    }
    fs::copy(config_path, &dest)?;
    Ok(())
}

fn cmd_gen_truth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let env = cfg.env_config_zero_truth()?;
    if cfg.truth.total_vehicles == 0 {
        eprintln!("warning: truth.total_vehicles is 0; the truth table will be all zeros");
    }
    let (trajectory, table) = generate_true_demand(cfg.truth.total_vehicles, &env, cfg.seed)?;

    let traj_path = cfg.truth_trajectory_path(out);
    let table_path = cfg.truth_table_path(out);
    if let Some(parent) = traj_path.parent() {
        fs::create_dir_all(parent)?;
    }
    if let Some(parent) = table_path.parent() {
        fs::create_dir_all(parent)?;
    }
    trajectory.write_csv(&env.network, fs::File::create(&traj_path)?)?;
    table.write_csv(&env.network, fs::File::create(&table_path)?)?;

    let crossings: u64 = table.rows.iter().flatten().map(|&c| u64::from(c)).sum();
    println!(
        "requested {} vehicles, realized {}",
        cfg.truth.total_vehicles,
        trajectory.total_vehicles()
    );
    println!(
        "truth table: {} intervals x {} detectors, {} detector crossings -> {}",
        table.k_intervals(),
        table.n_detectors(),
        crossings,
        table_path.display()
    );
    println!("truth demand -> {}", traj_path.display());
    Ok(())
}

/// Writes the per-evaluation history shared by training and BO runs.
fn write_episodes(path: &Path, result: &CalibrationResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "error", "discounted_return"])?;
    for e in &result.episodes {
        w.write_record([
            e.episode.to_string(),
            e.error.to_string(),
            e.discounted_return.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_best(
    dir: &Path,
    env: &odcal::env::EnvConfig,
    result: &CalibrationResult,
) -> Result<(), CliError> {
    result
        .best_trajectory
        .write_csv(&env.network, fs::File::create(dir.join("best_od.csv"))?)?;
    result
        .best_table
        .write_csv(&env.network, fs::File::create(dir.join("best_table.csv"))?)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (_, truth_table) = cfg.load_truth(out)?;
    let env = cfg.env_config(truth_table)?;
    let dir = out.join("train");
    fs::create_dir_all(&dir)?;

    let result = ppo::train(&env, &cfg.ppo, cfg.seed, Some(&dir))?;
    write_episodes(&dir.join("episodes.csv"), &result)?;
    write_best(&dir, &env, &result)?;

    // `+ 0.0` normalizes the negative zero a perfect calibration produces.
    println!(
        "trained {} episodes: best error {}, best reward {}",
        result.episodes.len(),
        result.best_error,
        -result.best_error + 0.0
    );
    if let Some(ckpt) = &result.checkpoint {
        println!("checkpoint -> {}", ckpt.display());
    }
    println!("artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_baseline(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (_, truth_table) = cfg.load_truth(out)?;
    let env = cfg.env_config(truth_table)?;
    let dir = out.join("baseline");
    fs::create_dir_all(&dir)?;

    let run = bo_calibrate(&env, &cfg.bo, cfg.seed)?;
    write_episodes(&dir.join("episodes.csv"), &run.result)?;
    write_best(&dir, &env, &run.result)?;

    let mut w = csv::Writer::from_path(dir.join("iterations.csv"))?;
    w.write_record(["iteration", "x_hash", "error", "incumbent_error"])?;
    for it in &run.iterations {
        w.write_record([
            it.iteration.to_string(),
            format!("{:016x}", it.x_hash),
            it.error.to_string(),
            it.incumbent_error.to_string(),
        ])?;
    }
    w.flush()?;

    println!(
        "baseline ran {} evaluations: best error {}, best reward {}",
        run.result.episodes.len(),
        run.result.best_error,
        -run.result.best_error + 0.0
    );
    println!("artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_run_plan(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (truth_trajectory, truth_table) = cfg.load_truth(out)?;
    let env = cfg.env_config(truth_table)?;
    let plan = ExperimentPlan {
        env,
        true_trajectory: truth_trajectory,
        methods: cfg.plan.methods.clone(),
        repetitions: cfg.plan.repetitions,
        budget: cfg.plan.budget,
        seed: cfg.seed,
        ppo: cfg.ppo.clone(),
        bo: cfg.bo.clone(),
    };
    let outcome = run_plan(&plan)?;
    let dir = out.join("plan");
    outcome.write_outputs(&dir)?;

    print_plan_summary(&outcome);
    println!("artifacts -> {}", dir.display());

    let failed: usize = outcome.methods.iter().map(|m| m.failures.len()).sum();
    if failed > 0 {
        for m in &outcome.methods {
            for f in &m.failures {
                eprintln!(
                    "warning: {} repetition {} failed: {}",
                    m.method, f.repetition, f.message
                );
            }
        }
        return Err(CliError::new(1, format!("{failed} plan cell(s) failed; see failures.csv")));
    }
    Ok(())
}

fn print_plan_summary(outcome: &PlanOutcome) {
    println!(
        "plan complete: eval seed {}, truth residual error {}",
        outcome.eval_seed, outcome.truth_eval_error
    );
    println!("ranking by mean best reward:");
    let ranking = outcome.ranking();
    for (i, method) in ranking.iter().enumerate() {
        let row = outcome.summary.iter().find(|r| r.method == *method).expect("summary row");
        if row.reps_ok == 0 {
            println!("  {}. {:<17} (all {} repetitions failed)", i + 1, method, row.failures);
        } else {
            println!(
                "  {}. {:<17} mean best reward {:.3}, median best error {:.3}, mean eval error {:.3} ({} reps)",
                i + 1,
                method,
                row.mean_best_reward,
                row.median_best_error,
                row.mean_eval_error,
                row.reps_ok
            );
        }
    }
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, trajectory: Option<&Path>) -> Result<(), CliError> {
    let (truth_trajectory, truth_table) = cfg.load_truth(out)?;
    let env = cfg.env_config(truth_table)?;
    let demand = match trajectory {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::new(3, format!("missing trajectory {}", path.display()))
                } else {
                    CliError::new(1, describe(&e))
                }
            })?;
            Trajectory::read_csv(&env.network, file)?
        }
        None => truth_trajectory,
    };

    let sim_seed = subseed(cfg.seed, "truth/sim");
    let (table, error) = evaluate_demand(&env, &demand, sim_seed)?;
    let report = table_metrics(&env.ground_truth, &table)?;

    let dir = out.join("evaluate");
    fs::create_dir_all(&dir)?;
    table.write_csv(&env.network, fs::File::create(dir.join("sim_table.csv"))?)?;
    write_metrics_csv(&dir.join("metrics.csv"), &[("evaluate".into(), 0, report.clone())])?;

    println!("calibration error {error} ({} vehicles)", demand.total_vehicles());
    print!("{}", format_metrics(&report));
    println!("artifacts -> {}", dir.display());
    Ok(())
}

fn format_metrics(m: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "mse {:.4}  rmse {:.4}  mae {:.4}  mape {}  sde {:.4}  p95_ae {:.4}  max_ae {:.4}  mbe {:.4}  r2 {}\n",
        m.mse,
        m.rmse,
        m.mae,
        opt(m.mape),
        m.sde,
        m.p95_ae,
        m.max_ae,
        m.mbe,
        opt(m.r2)
    )
}

fn write_metrics_csv(
    path: &Path,
    rows: &[(String, u32, MetricsReport)],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "repetition",
        "mse",
        "rmse",
        "mae",
        "mape_percent",
        "sde",
        "p95_ae",
        "max_ae",
        "mbe",
        "r2",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (method, rep, m) in rows {
        w.write_record([
            method.clone(),
            rep.to_string(),
            m.mse.to_string(),
            m.rmse.to_string(),
            m.mae.to_string(),
            opt(m.mape),
            m.sde.to_string(),
            m.p95_ae.to_string(),
            m.max_ae.to_string(),
            m.mbe.to_string(),
            opt(m.r2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One plan cell reconstructed from `detector_counts.csv`.
struct CellTables {
    sim: GroundTruthTable,
    truth: GroundTruthTable,
}

/// Reads the long-format detector counts back into per-cell tables, keyed
/// by (method, repetition) in file order.
fn read_detector_counts(
    path: &Path,
    detectors: &[usize],
) -> Result<BTreeMap<(String, u32), CellTables>, CliError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::new(3, format!("missing plan output {}; run run-plan first", path.display()))
        } else {
            CliError::new(1, describe(&e))
        }
    })?;
    let mut r = csv::Reader::from_reader(file);
    // (method, rep) -> interval -> detector -> (sim, truth)
    let mut cells: BTreeMap<(String, u32), BTreeMap<usize, BTreeMap<usize, (u32, u32)>>> =
        BTreeMap::new();
    for record in r.records() {
        let record = record?;
        let parse = |i: usize| -> Result<&str, CliError> {
            record
                .get(i)
                .ok_or_else(|| CliError::new(1, format!("short row in {}", path.display())))
        };
        let bad =
            |what: &str| CliError::new(1, format!("bad {what} in {}", path.display()));
        let method = parse(0)?.to_string();
        let rep: u32 = parse(1)?.parse().map_err(|_| bad("repetition"))?;
        let interval: usize = parse(2)?.parse().map_err(|_| bad("interval"))?;
        let link: usize = parse(3)?.parse().map_err(|_| bad("detector_link"))?;
        let sim: u32 = parse(4)?.parse().map_err(|_| bad("simulated count"))?;
        let truth: u32 = parse(5)?.parse().map_err(|_| bad("truth count"))?;
        cells
            .entry((method, rep))
            .or_default()
            .entry(interval)
            .or_default()
            .insert(link, (sim, truth));
    }

    let mut out = BTreeMap::new();
    for (key, intervals) in cells {
        let k = intervals.len();
        let mut sim = GroundTruthTable::zeros(k, detectors.len());
        let mut truth = GroundTruthTable::zeros(k, detectors.len());
        for (i, (_, by_link)) in intervals.into_iter().enumerate() {
            for (j, link) in detectors.iter().enumerate() {
                let (s, t) = by_link.get(link).copied().ok_or_else(|| {
                    CliError::new(
                        2,
                        format!(
                            "plan outputs lack detector {link}; config and outputs disagree"
                        ),
                    )
                })?;
                sim.rows[i][j] = s;
                truth.rows[i][j] = t;
            }
        }
        out.insert(key, CellTables { sim, truth });
    }
    Ok(out)
}

/// Mean-best-reward ranking rows from `repetitions.csv`, in file order.
fn read_method_rewards(path: &Path) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::new(3, format!("missing plan output {}; run run-plan first", path.display()))
        } else {
            CliError::new(1, describe(&e))
        }
    })?;
    let mut r = csv::Reader::from_reader(file);
    let mut order: Vec<String> = Vec::new();
    let mut rewards: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in r.records() {
        let record = record?;
        let method = record
            .get(0)
            .ok_or_else(|| CliError::new(1, "short row in repetitions.csv".to_string()))?
            .to_string();
        let reward: f64 = record
            .get(4)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::new(1, "bad best_reward in repetitions.csv".to_string()))?;
        if !rewards.contains_key(&method) {
            order.push(method.clone());
        }
        rewards.entry(method).or_default().push(reward);
    }
    Ok(order.into_iter().map(|m| {
        let r = rewards.remove(&m).unwrap_or_default();
        (m, r)
    }).collect())
}

fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let network = cfg.build_network()?;
    let dir = out.join("plan");
    let cells = read_detector_counts(&dir.join("detector_counts.csv"), &network.detectors)?;
    let method_rewards = read_method_rewards(&dir.join("repetitions.csv"))?;

    // Per-cell metrics and significance against the truth columns.
    let mut metric_rows: Vec<(String, u32, MetricsReport)> = Vec::new();
    let mut sig_rows: Vec<(String, u32, Vec<PipelineRow>)> = Vec::new();
    for ((method, rep), tables) in &cells {
        metric_rows.push((method.clone(), *rep, table_metrics(&tables.truth, &tables.sim)?));
        let rows = significance_pipeline(&tables.sim, &tables.truth, &network, cfg.plan.alpha)?;
        sig_rows.push((method.clone(), *rep, rows));
    }
    write_metrics_csv(&dir.join("metrics.csv"), &metric_rows)?;

    let mut w = csv::Writer::from_path(dir.join("significance.csv"))?;
    w.write_record([
        "method",
        "repetition",
        "detector_link",
        "test",
        "statistic",
        "p_value",
        "normal",
        "passes",
    ])?;
    for (method, rep, rows) in &sig_rows {
        for row in rows {
            w.write_record([
                method.clone(),
                rep.to_string(),
                row.detector_link.to_string(),
                row.chosen.test.to_string(),
                row.chosen.statistic.to_string(),
                row.chosen.p_value.to_string(),
                row.normal.map_or(String::new(), |n| n.to_string()),
                (row.chosen.p_value > cfg.plan.alpha).to_string(),
            ])?;
        }
    }
    w.flush()?;

    // Plain-text summary: ranking plus per-method significance pass rates.
    let mut text = String::new();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let mut ranked: Vec<(String, f64, usize)> = method_rewards
        .iter()
        .map(|(m, rewards)| (m.clone(), mean(rewards), rewards.len()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    text.push_str(&format!("method ranking by mean best reward ({} methods)\n", ranked.len()));
    for (i, (method, reward, reps)) in ranked.iter().enumerate() {
        text.push_str(&format!(
            "  {}. {:<17} mean best reward {:.3} over {} repetitions\n",
            i + 1,
            method,
            reward,
            reps
        ));
    }
    let n_detectors = network.detectors.len();
    text.push_str(&format!(
        "\nper-detector comparison vs true replication at alpha {} ({} detectors)\n",
        cfg.plan.alpha, n_detectors
    ));
    let mut by_method: BTreeMap<&str, Vec<(u32, usize)>> = BTreeMap::new();
    for (method, rep, rows) in &sig_rows {
        by_method
            .entry(method)
            .or_default()
            .push((*rep, detectors_passing(rows, cfg.plan.alpha)));
    }
    for (method, _, _) in &ranked {
        if let Some(reps) = by_method.get(method.as_str()) {
            let all_pass = reps.iter().filter(|(_, p)| *p == n_detectors).count();
            let detail: Vec<String> =
                reps.iter().map(|(rep, p)| format!("rep{rep} {p}/{n_detectors}")).collect();
            text.push_str(&format!(
                "  {:<17} {} of {} repetitions pass every detector ({})\n",
                method,
                all_pass,
                reps.len(),
                detail.join(", ")
            ));
        }
    }
    fs::write(dir.join("summary.txt"), &text)?;
    print!("{text}");
    println!("artifacts -> {}", dir.display());
    Ok(())
}
