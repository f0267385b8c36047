use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gofar::dataset::{collect, Behavior, OfflineDataset};
use gofar::harness::checks;
use gofar::harness::metrics::{summarize, write_csv, MetricsRecord, RunLabels};
use gofar::harness::suite::{run_manifest, EnvSpec, ExperimentConfig, Manifest, SuiteKind};
use gofar::harness::{evaluate, evaluate_tabular};
use gofar::mdp::{Gridworld, GridworldSpec, MoveSet, TabularPolicy};
use gofar::neural::data::VecDataset;
use gofar::neural::pointreach::{Point, PointReachEnv};
use gofar::neural::train::{train_neural, GaussianPolicy, NeuralAlgo, NeuralRun, TrainConfig};
use gofar::occupancy::expected_return;
use gofar::planner::transfer::{success_rate, write_rows, Arm};
use gofar::planner::{train_goal_value, train_planner, transfer_experiment, GoalData, TransferConfig};
use gofar::tabular::baselines::{train, Algo};
use gofar::tabular::pipeline::solve_from_dataset;
use gofar::tabular::system::RewardChoice;
use gofar::{GofarError, Result};

#[derive(Parser)]
#[command(name = "gofar", version, about = "Offline goal-conditioned RL by f-advantage regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset with a random/expert mixture behaviour.
    Collect(CollectArgs),
    /// Closed-form GoFAR on a gridworld dataset.
    SolveTabular(SolveArgs),
    /// Train one algorithm on a dataset and evaluate it.
    Train(TrainArgs),
    /// Evaluate a saved policy.
    Evaluate(EvaluateArgs),
    /// Relabeling ablation suite.
    AblateHer(SuiteArgs),
    /// Noise robustness suite; data is re-collected per level.
    AblateNoise(NoiseArgs),
    /// Zero-shot planner transfer to a different agent.
    PlanTransfer(TransferArgs),
    /// Run every suite of a manifest.
    RunAll(RunAllArgs),
    /// Oracle and property checks, one pass/fail line each.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct EnvArgs {
    /// `grid:WxH`, `two-room`, `pointreach` or a JSON environment file
    #[arg(long)]
    env: String,
    /// Slip probability (grid) or action noise deviation (point-reach)
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

impl EnvArgs {
    fn spec(&self) -> Result<EnvSpec> {
        let spec = parse_env(&self.env)?;
        Ok(match spec {
            EnvSpec::Grid(g) => EnvSpec::Grid(g.with_slip(self.noise)),
            EnvSpec::PointReach(p) => EnvSpec::PointReach(p.with_noise(self.noise)),
        })
    }
}

fn parse_env(s: &str) -> Result<EnvSpec> {
    if let Some(size) = s.strip_prefix("grid:") {
        let (w, h) = size
            .split_once('x')
            .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
            .ok_or_else(|| GofarError::Config(format!("bad grid size '{size}' (expected WxH)")))?;
        return Ok(EnvSpec::Grid(GridworldSpec::open(w, h)));
    }
    match s {
        "two-room" => Ok(EnvSpec::Grid(GridworldSpec::two_room())),
        "two-room-king" => Ok(EnvSpec::Grid(GridworldSpec::two_room().with_moves(MoveSet::King))),
        "pointreach" => Ok(EnvSpec::PointReach(PointReachEnv::default())),
        path => Ok(serde_json::from_str(&fs::read_to_string(path)?)?),
    }
}

fn grid(spec: &EnvSpec) -> Result<Gridworld> {
    match spec {
        EnvSpec::Grid(g) => Gridworld::new(g.clone()),
        EnvSpec::PointReach(_) => Err(GofarError::Config("this command needs a gridworld".into())),
    }
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 1000)]
    n_trajectories: usize,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, default_value_t = 0.1)]
    expert_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    data: PathBuf,
    /// binary, disc or logratio
    #[arg(long, default_value = "disc")]
    reward: RewardChoice,
    /// Writes the policy and value table as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    algo: Algo,
    /// JSON training configuration (neural runs)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    eval: EvalOpts,
    /// Run directory: config.json, losses.csv, checkpoint and metrics.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// policy.json (gridworld) or checkpoint.json (point-reach) from `train`
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value = "policy")]
    label: String,
    #[command(flatten)]
    eval: EvalOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    /// JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Results root; defaults to $GOFAR_RESULTS_DIR or ./results
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Comma-separated levels, starting at 0
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
}

#[derive(Args)]
struct TransferArgs {
    /// Source-agent dataset; collected afresh when absent
    #[arg(long)]
    source_data: Option<PathBuf>,
    #[arg(long, default_value = "two-room")]
    source_env: String,
    #[arg(long, default_value = "two-room-king")]
    target_env: String,
    #[arg(long, default_value_t = 100)]
    n_goals: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    manifest: PathBuf,
    /// Results root; defaults to $GOFAR_RESULTS_DIR or ./results
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Also train the neural-vs-tabular check (about half a minute)
    #[arg(long)]
    neural: bool,
}

fn results_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("GOFAR_RESULTS_DIR").map(PathBuf::from)).unwrap_or_else(|| "results".into())
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(records, fs::File::create(path)?)
}

fn print_summary(records: &[MetricsRecord]) {
    let s = summarize(records);
    println!(
        "return {:.3}  success {:.3}  final distance {:.3}  ({} episodes)",
        s.mean_return,
        s.success_rate,
        s.mean_final_distance,
        records.len()
    );
}

fn cmd_collect(a: CollectArgs) -> Result<()> {
    match a.env.spec()? {
        EnvSpec::Grid(spec) => {
            let world = Gridworld::new(spec)?;
            let behavior = Behavior::mixture(&world.mdp, world.shortest_path_policy(), a.expert_frac);
            let data = collect(&world.mdp, &behavior, a.n_trajectories, a.horizon, a.seed)?;
            data.save(&a.out)?;
            println!("{} trajectories, {} transitions -> {}", data.trajectories.len(), data.n_transitions(), a.out.display());
        }
        EnvSpec::PointReach(env) => {
            let data = env.collect(a.n_trajectories, a.horizon, a.expert_frac, a.seed)?;
            data.save(&a.out)?;
            println!("{} trajectories, {} transitions -> {}", data.trajectories.len(), data.n_transitions(), a.out.display());
        }
    }
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let world = grid(&a.env.spec()?)?;
    let data = OfflineDataset::load(&a.data, Some(&world.mdp))?;
    let sol = solve_from_dataset(&world.mdp, &data, a.reward)?;
    let greedy = sol.policy.to_greedy();
    println!("expected return of the greedy policy: {:.4}", expected_return(&world.mdp, &greedy)?);
    println!("optimal return: {:.4}", expected_return(&world.mdp, &world.shortest_path_policy())?);
    if !sol.empty_goals.is_empty() {
        println!("goals without recovered occupancy: {:?}", sol.empty_goals);
    }
    if let Some(out) = a.out {
        let json = serde_json::json!({ "policy": sol.policy, "value": sol.v });
        fs::write(&out, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn neural_algo(algo: Algo) -> NeuralAlgo {
    NeuralAlgo::ALL.into_iter().find(|&n| Algo::from(n) == algo).expect("every algorithm has a neural form")
}

fn point_records(
    env: &PointReachEnv,
    policy: &GaussianPolicy,
    eval: &EvalOpts,
    labels: &RunLabels,
) -> Result<Vec<MetricsRecord>> {
    let mut failure = None;
    let act = |s: &Point, g: &Point| -> Point {
        match policy.act(s, g) {
            Ok(a) => [a[0], a[1]],
            Err(e) => {
                failure.get_or_insert(e);
                [0.0, 0.0]
            }
        }
    };
    let records = evaluate(env, act, eval.episodes, eval.horizon, eval.eval_seed, labels)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

fn losses_csv(run: &NeuralRun) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "step", "loss"])?;
    let l = &run.losses;
    for (phase, xs) in [("disc", &l.disc), ("value", &l.value), ("critic", &l.critic), ("policy", &l.policy)] {
        for (i, x) in xs.iter().enumerate() {
            w.write_record([phase.to_string(), i.to_string(), x.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| GofarError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let spec = a.env.spec()?;
    let labels = RunLabels { algo: a.algo.name().into(), env: a.env.env.clone(), her_ratio: a.algo.her_ratio(), noise: a.env.noise };
    let records = match &spec {
        EnvSpec::Grid(g) => {
            let world = Gridworld::new(g.clone())?;
            let data = OfflineDataset::load(&a.data, Some(&world.mdp))?;
            let run = train(a.algo, &world.mdp, &data)?;
            fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&serde_json::json!({
                "env": spec, "algo": a.algo.name(), "data": a.data,
            }))?)?;
            fs::write(a.out.join("policy.json"), serde_json::to_string(&run.policy)?)?;
            if run.unstable {
                println!("run flagged unstable");
            }
            evaluate_tabular(&world, &run.policy, a.eval.episodes, a.eval.horizon, a.eval.eval_seed, &labels)?
        }
        EnvSpec::PointReach(env) => {
            let data = VecDataset::load(&a.data)?;
            let base: TrainConfig = match &a.config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            let cfg = TrainConfig { seed: a.seed, gamma: env.gamma, ..base };
            fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&serde_json::json!({
                "env": spec, "algo": a.algo.name(), "data": a.data, "train": cfg,
            }))?)?;
            let run = train_neural(neural_algo(a.algo), &data, &cfg, env.max_step)?;
            fs::write(a.out.join("losses.csv"), losses_csv(&run)?)?;
            fs::write(a.out.join("checkpoint.json"), serde_json::to_string(&run)?)?;
            if run.unstable {
                println!("run flagged unstable");
            }
            point_records(env, &run.policy, &a.eval, &labels)?
        }
    };
    write_metrics(&a.out.join("metrics.csv"), &records)?;
    print_summary(&records);
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let spec = a.env.spec()?;
    let labels = RunLabels { algo: a.label.clone(), env: a.env.env.clone(), her_ratio: 0.0, noise: a.env.noise };
    let text = fs::read_to_string(&a.policy)?;
    let records = match &spec {
        EnvSpec::Grid(g) => {
            let world = Gridworld::new(g.clone())?;
            let policy: TabularPolicy = serde_json::from_str(&text)?;
            if policy.probs.len() != world.mdp.n_states {
                return Err(GofarError::Shape(format!(
                    "policy has {} states, environment {}",
                    policy.probs.len(),
                    world.mdp.n_states
                )));
            }
            evaluate_tabular(&world, &policy, a.eval.episodes, a.eval.horizon, a.eval.eval_seed, &labels)?
        }
        EnvSpec::PointReach(env) => {
            let run: NeuralRun = serde_json::from_str(&text)?;
            point_records(env, &run.policy, &a.eval, &labels)?
        }
    };
    write_metrics(&a.out, &records)?;
    print_summary(&records);
    Ok(())
}

/// Runs a manifest, writes the tree and prints the checks; returns the exit status.
fn run_and_report(manifest: &Manifest, out: &Path) -> Result<ExitCode> {
    let tree = run_manifest(manifest)?;
    tree.write_to(out)?;
    for (suite, err) in &tree.failed_suites {
        println!("suite {suite} failed: {err}");
    }
    for c in &tree.checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        let kind = if c.gating { "" } else { " (informational)" };
        println!("[{mark}] {} {}: {:.4} vs {:.4}{kind}", c.suite, c.check, c.value, c.threshold);
    }
    println!("results written to {}", out.display());
    Ok(if tree.gating_failed(manifest) { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn load_suite(args: &SuiteArgs, kind: SuiteKind) -> Result<Manifest> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    if cfg.kind != kind {
        return Err(GofarError::Config(format!("suite '{}' has kind {:?}, expected {kind:?}", cfg.name, cfg.kind)));
    }
    Ok(Manifest { seed: args.seed, workers: args.workers, suites: vec![cfg] })
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let source = grid(&parse_env(&a.source_env)?)?;
    let target = grid(&parse_env(&a.target_env)?)?;
    let cfg = TransferConfig { n_tasks: a.n_goals, seed: a.seed, ..TransferConfig::default() };
    let planner = match &a.source_data {
        Some(path) => {
            let raw = OfflineDataset::load(path, Some(&source.mdp))?;
            let data = GoalData::from_gridworld(&source, &raw)?;
            train_planner(&data, &train_goal_value(&data, &cfg.planner)?)?
        }
        None => gofar::planner::transfer::fit_source_planner(&source, &cfg)?,
    };
    let rows = transfer_experiment(&planner, &target, &cfg)?;
    write_rows(&rows, fs::File::create(&a.out)?)?;
    for arm in [Arm::LowLevel, Arm::Hierarchical, Arm::Oracle] {
        println!("{arm:?}: success {:.3}", success_rate(&rows, arm));
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<ExitCode> {
    let mut results = vec![
        checks::duality_oracle(1)?,
        checks::prop1_identity(2)?,
        checks::lower_bounds(3)?,
        checks::goal_weighting(4)?,
        checks::fenchel_grid(),
        checks::gradient_checks()?,
    ];
    if a.neural {
        results.push(checks::neural_vs_tabular(0)?);
    }
    for c in &results {
        println!("{c}");
    }
    Ok(if results.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Collect(a) => cmd_collect(a).map(|_| ExitCode::SUCCESS),
        Command::SolveTabular(a) => cmd_solve(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(a).map(|_| ExitCode::SUCCESS),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ExitCode::SUCCESS),
        Command::AblateHer(a) => {
            let m = load_suite(&a, SuiteKind::AblateHer)?;
            run_and_report(&m, &results_root(a.out))
        }
        Command::AblateNoise(a) => {
            let mut m = load_suite(&a.suite, SuiteKind::AblateNoise)?;
            if !a.levels.is_empty() {
                m.suites[0].noise_levels = a.levels;
            }
            run_and_report(&m, &results_root(a.suite.out))
        }
        Command::PlanTransfer(a) => cmd_transfer(a).map(|_| ExitCode::SUCCESS),
        Command::RunAll(a) => {
            let m = Manifest::load(&a.manifest)?;
            run_and_report(&m, &results_root(a.out))
        }
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
