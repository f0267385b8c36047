//! Manifest-driven experiment suites.
//!
//! Every suite produces an in-memory results tree (relative path to CSV text)
//! which is written out in one pass, so reruns can be compared byte for byte
//! without touching the disk.
//!
//! Seeds: with root seed `r`, suite index `i`, noise-level index `l`, seed
//! value `k` and algorithm index `j`, data is collected with
//! `derive_seed(r, [i, l, k, 0])`, training uses `derive_seed(r, [i, l, k, 1 + j])`
//! and evaluation `derive_seed(r, [i, l, k, EVAL_PART])`, shared by all
//! algorithms of a cell. Trend and transfer suites use `derive_seed(r, [i])`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{collect, Behavior, OfflineDataset};
use crate::error::{GofarError, Result};
use crate::mdp::{derive_seed, Gridworld, GridworldSpec, MoveSet};
use crate::neural::data::VecDataset;
use crate::neural::pointreach::{Point, PointReachEnv};
use crate::neural::train::{train_neural, NeuralAlgo, TrainConfig};
use crate::planner::transfer::{fit_source_planner, success_rate, write_rows, Arm, TransferConfig};
use crate::planner::transfer_experiment;
use crate::tabular::baselines::{train, Algo};
use crate::tabular::pipeline::suboptimality_trend;
use crate::tabular::system::RewardChoice;

use super::evaluate::{evaluate, evaluate_tabular};
use super::metrics::{mean, spearman, std_err, summarize, write_csv, MetricsRecord, RunLabels};

pub const EVAL_PART: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvSpec {
    Grid(GridworldSpec),
    PointReach(PointReachEnv),
}

impl EnvSpec {
    fn label(&self) -> &'static str {
        match self {
            EnvSpec::Grid(_) => "gridworld",
            EnvSpec::PointReach(_) => "pointreach",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    AblateHer,
    AblateNoise,
    Trend,
    PlanTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n_trajectories: usize,
    pub horizon: usize,
    /// Share of trajectories driven by the scripted expert; the rest act uniformly.
    pub expert_frac: f64,
    /// Pre-collected dataset used instead of collecting (single noise level only).
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_episodes() -> usize {
    100
}

fn default_horizon() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: SuiteKind,
    pub env: EnvSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub algos: Vec<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Slip probability (grid) or action noise deviation (point-reach) per level.
    #[serde(default)]
    pub noise_levels: Vec<f64>,
    #[serde(default = "default_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_horizon")]
    pub eval_horizon: usize,
    /// Neural training settings; the seed field is replaced by the derived one.
    #[serde(default)]
    pub train: TrainConfig,
    /// Noise level at which GoFAR must degrade less than each relabeling baseline.
    #[serde(default)]
    pub moderate_noise: Option<f64>,
    /// Noise level at which every method must lose at least `EXTREME_DROP`.
    #[serde(default)]
    pub extreme_noise: Option<f64>,
    /// Dataset sizes of a trend suite.
    #[serde(default)]
    pub dataset_sizes: Vec<usize>,
    /// Plan-transfer settings; the seed field is replaced by the derived one.
    #[serde(default)]
    pub transfer: TransferConfig,
    /// Target agent of a plan-transfer suite; defaults to the source grid with king moves.
    #[serde(default)]
    pub target: Option<GridworldSpec>,
    /// Failing checks of this suite make `run_all` fail.
    #[serde(default)]
    pub acceptance: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// Worker threads per suite; 0 or 1 runs sequentially.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub suites: Vec<ExperimentConfig>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| GofarError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for cfg in &self.suites {
            if !names.insert(cfg.name.as_str()) {
                return Err(GofarError::Config(format!("duplicate suite name '{}'", cfg.name)));
            }
            cfg.validate()?;
        }
        Ok(())
    }
}

pub const HER_RATIO_LIMIT: f64 = 0.25;
pub const HER_INVARIANCE: f64 = 0.10;
pub const UNSTABLE_SHARE: f64 = 0.5;
pub const EXTREME_DROP: f64 = 0.4;
pub const TREND_LIMIT: f64 = -0.8;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GofarError::Config(format!("suite '{}': {msg}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a plain directory name".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(k) = self.seeds.iter().find(|&&k| !seen.insert(k)) {
            return bad(format!("seed {k} listed twice"));
        }
        if let Some(path) = &self.data.path {
            if !path.exists() {
                return bad(format!("dataset {} does not exist", path.display()));
            }
            if self.levels().len() != 1 {
                return bad("a fixed dataset cannot be re-collected per noise level".into());
            }
        }
        if !(0.0..=1.0).contains(&self.data.expert_frac) {
            return bad(format!("expert_frac {} outside [0, 1]", self.data.expert_frac));
        }
        match self.kind {
            SuiteKind::AblateHer | SuiteKind::AblateNoise => {
                for a in &self.algos {
                    a.parse::<Algo>()?;
                }
                if self.seeds.is_empty() || self.algos.is_empty() {
                    return bad("needs at least one algorithm and one seed".into());
                }
                if let EnvSpec::PointReach(env) = &self.env {
                    env.validate()?;
                    self.train.validate()?;
                }
            }
            SuiteKind::Trend | SuiteKind::PlanTransfer => {
                if !matches!(self.env, EnvSpec::Grid(_)) {
                    return bad("trend and plan-transfer suites run on gridworlds".into());
                }
            }
        }
        if self.kind == SuiteKind::AblateNoise {
            if self.noise_levels.first() != Some(&0.0) {
                return bad("noise levels must start at 0".into());
            }
            for level in [self.moderate_noise, self.extreme_noise].into_iter().flatten() {
                if !self.noise_levels.contains(&level) {
                    return bad(format!("checked noise level {level} is not run"));
                }
            }
        }
        if self.kind == SuiteKind::Trend && (self.dataset_sizes.len() < 2 || self.seeds.is_empty()) {
            return bad("a trend needs two dataset sizes and at least one seed".into());
        }
        Ok(())
    }

    fn levels(&self) -> Vec<f64> {
        if self.noise_levels.is_empty() {
            vec![0.0]
        } else {
            self.noise_levels.clone()
        }
    }
}

/// Final metrics of one (algorithm, noise level, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub suite: String,
    pub algo: String,
    pub noise: f64,
    pub seed: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub unstable: bool,
    /// Empty unless the run failed.
    pub error: String,
}

impl RunRow {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: String,
    pub algo: String,
    pub noise: f64,
    pub n_runs: usize,
    pub n_failed: usize,
    pub n_unstable: usize,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub mean_success: f64,
    pub stderr_success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub gating: bool,
}

/// Output of one suite: rows plus the files it owns below its directory.
#[derive(Clone, Debug, Default)]
pub struct SuiteOutput {
    pub runs: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
    pub checks: Vec<CheckRow>,
    pub files: BTreeMap<PathBuf, String>,
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| GofarError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const RUN_HEADER: [&str; 9] =
    ["suite", "algo", "noise", "seed", "mean_return", "success_rate", "mean_final_distance", "unstable", "error"];
const SUMMARY_HEADER: [&str; 10] = [
    "suite",
    "algo",
    "noise",
    "n_runs",
    "n_failed",
    "n_unstable",
    "mean_return",
    "stderr_return",
    "mean_success",
    "stderr_success",
];
const CHECK_HEADER: [&str; 6] = ["suite", "check", "value", "threshold", "passed", "gating"];

pub fn runs_csv(rows: &[RunRow]) -> Result<String> {
    to_csv(rows, &RUN_HEADER)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    to_csv(rows, &SUMMARY_HEADER)
}

pub fn checks_csv(rows: &[CheckRow]) -> Result<String> {
    to_csv(rows, &CHECK_HEADER)
}

struct Job {
    level: usize,
    seed: u64,
    algo: usize,
}

/// Runs `f` over `jobs` on up to `workers` threads; results keep job order.
fn fan_out<T: Send, F: Fn(&Job) -> T + Sync>(jobs: &[Job], workers: usize, f: F) -> Vec<T> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|x| x.expect("every job ran")).collect()
}

struct RunResult {
    records: Vec<MetricsRecord>,
    unstable: bool,
}

fn run_grid(
    cfg: &ExperimentConfig,
    spec: &GridworldSpec,
    algo: Algo,
    noise: f64,
    data_seed: u64,
    eval_seed: u64,
) -> Result<RunResult> {
    let world = Gridworld::new(spec.clone().with_slip(noise))?;
    let data = match &cfg.data.path {
        Some(path) => OfflineDataset::load(path, Some(&world.mdp))?,
        None => {
            let behavior = Behavior::mixture(&world.mdp, world.shortest_path_policy(), cfg.data.expert_frac);
            collect(&world.mdp, &behavior, cfg.data.n_trajectories, cfg.data.horizon, data_seed)?
        }
    };
    let run = train(algo, &world.mdp, &data)?;
    let labels = RunLabels { algo: algo.name().into(), env: cfg.env.label().into(), her_ratio: algo.her_ratio(), noise };
    let records = evaluate_tabular(&world, &run.policy, cfg.eval_episodes, cfg.eval_horizon, eval_seed, &labels)?;
    Ok(RunResult { records, unstable: run.unstable })
}

fn run_point(
    cfg: &ExperimentConfig,
    env: &PointReachEnv,
    algo: NeuralAlgo,
    noise: f64,
    seeds: [u64; 3],
) -> Result<RunResult> {
    let [data_seed, train_seed, eval_seed] = seeds;
    let env = env.clone().with_noise(noise);
    let data = match &cfg.data.path {
        Some(path) => VecDataset::load(path)?,
        None => env.collect(cfg.data.n_trajectories, cfg.data.horizon, cfg.data.expert_frac, data_seed)?,
    };
    let train_cfg = TrainConfig { seed: train_seed, gamma: env.gamma, ..cfg.train.clone() };
    let run = train_neural(algo, &data, &train_cfg, env.max_step)?;
    let labels = RunLabels { algo: algo.name().into(), env: cfg.env.label().into(), her_ratio: algo.her_ratio(), noise };
    let mut failure = None;
    let policy = |s: &Point, g: &Point| -> Point {
        match run.policy.act(s, g) {
            Ok(a) => [a[0], a[1]],
            Err(e) => {
                failure.get_or_insert(e);
                [0.0, 0.0]
            }
        }
    };
    let records = evaluate(&env, policy, cfg.eval_episodes, cfg.eval_horizon, eval_seed, &labels)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunResult { records, unstable: run.unstable })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn aggregate(suite: &str, runs: &[RunRow], algos: &[String], levels: &[f64]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &noise in levels {
        for algo in algos {
            let cell: Vec<&RunRow> = runs.iter().filter(|r| &r.algo == algo && r.noise == noise).collect();
            let ok: Vec<&&RunRow> = cell.iter().filter(|r| !r.failed()).collect();
            let rets: Vec<f64> = ok.iter().map(|r| r.mean_return).collect();
            let succ: Vec<f64> = ok.iter().map(|r| r.success_rate).collect();
            out.push(SummaryRow {
                suite: suite.into(),
                algo: algo.clone(),
                noise,
                n_runs: cell.len(),
                n_failed: cell.len() - ok.len(),
                n_unstable: ok.iter().filter(|r| r.unstable).count(),
                mean_return: mean(&rets),
                stderr_return: std_err(&rets),
                mean_success: mean(&succ),
                stderr_success: std_err(&succ),
            });
        }
    }
    out
}

fn cell<'a>(summary: &'a [SummaryRow], algo: &str, noise: f64) -> Option<&'a SummaryRow> {
    summary.iter().find(|r| r.algo == algo && r.noise == noise && r.n_failed < r.n_runs)
}

fn check(cfg: &ExperimentConfig, name: String, value: f64, threshold: f64, passed: bool) -> CheckRow {
    CheckRow { suite: cfg.name.clone(), check: name, value, threshold, passed, gating: cfg.acceptance }
}

fn her_checks(cfg: &ExperimentConfig, summary: &[SummaryRow], noise: f64) -> Vec<CheckRow> {
    let ret = |a: &str| cell(summary, a, noise).map(|r| r.mean_return);
    let mut out = Vec::new();
    for (without, with) in [("gcsl-noher", "gcsl"), ("wgcsl-noher", "wgcsl")] {
        if let (Some(a), Some(b)) = (ret(without), ret(with)) {
            let ratio = a / b;
            out.push(check(cfg, format!("{without}/{with} return"), ratio, HER_RATIO_LIMIT, ratio < HER_RATIO_LIMIT));
        }
    }
    if let (Some(a), Some(b)) = (ret("gofar"), ret("gofar+her")) {
        let rel = (a - b).abs() / b.abs();
        out.push(check(cfg, "gofar vs gofar+her relative gap".into(), rel, HER_INVARIANCE, rel < HER_INVARIANCE));
    }
    if let Some(kl) = cell(summary, "gofar-kl", noise) {
        let share = kl.n_unstable as f64 / kl.n_runs as f64;
        out.push(check(cfg, "gofar-kl unstable share".into(), share, UNSTABLE_SHARE, share >= UNSTABLE_SHARE));
    }
    if let Some(binary) = ret("gofar-binary") {
        let best_baseline = ["gcsl", "wgcsl", "gcsl-noher", "wgcsl-noher"]
            .iter()
            .filter_map(|a| ret(a))
            .fold(f64::NEG_INFINITY, f64::max);
        let gofar = ret("gofar").unwrap_or(f64::INFINITY);
        let mut row = check(
            cfg,
            "gofar-binary between gofar and baselines".into(),
            binary,
            best_baseline,
            binary >= best_baseline && binary <= gofar,
        );
        row.gating = false;
        out.push(row);
    }
    out
}

fn drop_at(summary: &[SummaryRow], algo: &str, noise: f64) -> Option<f64> {
    let clean = cell(summary, algo, 0.0)?.mean_return;
    let noisy = cell(summary, algo, noise)?.mean_return;
    Some(1.0 - noisy / clean)
}

fn noise_checks(cfg: &ExperimentConfig, summary: &[SummaryRow]) -> Vec<CheckRow> {
    let mut out = Vec::new();
    if let Some(level) = cfg.moderate_noise {
        let gofar = drop_at(summary, "gofar", level).unwrap_or(f64::NAN);
        for base in ["gcsl", "wgcsl"] {
            if let Some(b) = drop_at(summary, base, level) {
                out.push(check(cfg, format!("drop at {level}: gofar < {base}"), gofar, b, gofar < b));
            }
        }
    }
    if let Some(level) = cfg.extreme_noise {
        for algo in &cfg.algos {
            let d = drop_at(summary, algo, level).unwrap_or(f64::NAN);
            out.push(check(cfg, format!("drop at {level}: {algo}"), d, EXTREME_DROP, d >= EXTREME_DROP));
        }
    }
    out
}

fn degradation_csv(cfg: &ExperimentConfig, summary: &[SummaryRow]) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        algo: &'a str,
        noise: f64,
        mean_return: f64,
        relative_drop: f64,
    }
    let mut rows = Vec::new();
    for &noise in &cfg.levels() {
        for algo in &cfg.algos {
            let Some(c) = cell(summary, algo, noise) else { continue };
            rows.push(Row {
                algo,
                noise,
                mean_return: c.mean_return,
                relative_drop: drop_at(summary, algo, noise).unwrap_or(f64::NAN),
            });
        }
    }
    to_csv(&rows, &["algo", "noise", "mean_return", "relative_drop"])
}

fn run_ablation(cfg: &ExperimentConfig, index: usize, root: u64, workers: usize) -> Result<SuiteOutput> {
    cfg.validate()?;
    let levels = cfg.levels();
    let algos: Vec<Algo> = cfg.algos.iter().map(|a| a.parse()).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for level in 0..levels.len() {
        for &seed in &cfg.seeds {
            for algo in 0..algos.len() {
                jobs.push(Job { level, seed, algo });
            }
        }
    }
    let results = fan_out(&jobs, workers, |job| {
        let base = [index as u64, job.level as u64, job.seed];
        let part = |p: u64| derive_seed(root, &[base[0], base[1], base[2], p]);
        let (data_seed, train_seed, eval_seed) = (part(0), part(1 + job.algo as u64), part(EVAL_PART));
        let noise = levels[job.level];
        let algo = algos[job.algo];
        catch_unwind(AssertUnwindSafe(|| match &cfg.env {
            EnvSpec::Grid(spec) => run_grid(cfg, spec, algo, noise, data_seed, eval_seed),
            EnvSpec::PointReach(env) => {
                run_point(cfg, env, neural_algo(algo), noise, [data_seed, train_seed, eval_seed])
            }
        }))
        .unwrap_or_else(|p| Err(GofarError::Assumption(format!("run panicked: {}", panic_message(p)))))
    });

    let mut out = SuiteOutput::default();
    let mut per_seed: BTreeMap<(usize, u64), Vec<MetricsRecord>> = BTreeMap::new();
    for (job, result) in jobs.iter().zip(results) {
        let algo = algos[job.algo];
        let mut row = RunRow {
            suite: cfg.name.clone(),
            algo: algo.name().into(),
            noise: levels[job.level],
            seed: job.seed,
            mean_return: f64::NAN,
            success_rate: f64::NAN,
            mean_final_distance: f64::NAN,
            unstable: false,
            error: String::new(),
        };
        match result {
            Ok(r) => {
                let s = summarize(&r.records);
                row.mean_return = s.mean_return;
                row.success_rate = s.success_rate;
                row.mean_final_distance = s.mean_final_distance;
                row.unstable = r.unstable;
                per_seed.entry((job.algo, job.seed)).or_default().extend(r.records);
            }
            Err(e) => {
                row.error = e.to_string();
                per_seed.entry((job.algo, job.seed)).or_default();
            }
        }
        out.runs.push(row);
    }
    for ((algo, seed), records) in &per_seed {
        let mut buf = Vec::new();
        write_csv(records, &mut buf)?;
        let path = PathBuf::from(&cfg.name).join(algos[*algo].name()).join(format!("seed_{seed}")).join("metrics.csv");
        out.files.insert(path, String::from_utf8(buf).expect("csv output is utf-8"));
    }
    out.summary = aggregate(&cfg.name, &out.runs, &cfg.algos, &levels);
    out.checks = match cfg.kind {
        SuiteKind::AblateHer => her_checks(cfg, &out.summary, levels[0]),
        _ => noise_checks(cfg, &out.summary),
    };
    if cfg.kind == SuiteKind::AblateNoise {
        out.files.insert(PathBuf::from(&cfg.name).join("degradation.csv"), degradation_csv(cfg, &out.summary)?);
    }
    out.files.insert(PathBuf::from(&cfg.name).join("runs.csv"), runs_csv(&out.runs)?);
    Ok(out)
}

fn neural_algo(a: Algo) -> NeuralAlgo {
    NeuralAlgo::ALL.into_iter().find(|&n| Algo::from(n) == a).expect("every tabular algorithm has a neural twin")
}

fn grid_spec(cfg: &ExperimentConfig) -> Result<&GridworldSpec> {
    match &cfg.env {
        EnvSpec::Grid(spec) => Ok(spec),
        EnvSpec::PointReach(_) => Err(GofarError::Config(format!("suite '{}' needs a gridworld", cfg.name))),
    }
}

fn run_trend(cfg: &ExperimentConfig, index: usize, root: u64) -> Result<SuiteOutput> {
    cfg.validate()?;
    let spec = grid_spec(cfg)?;
    let world = Gridworld::new(spec.clone())?;
    let behavior = Behavior::mixture(&world.mdp, world.shortest_path_policy(), cfg.data.expert_frac);
    let points = suboptimality_trend(
        &world.mdp,
        &behavior,
        cfg.data.horizon,
        &cfg.dataset_sizes,
        cfg.seeds.len(),
        derive_seed(root, &[index as u64]),
        RewardChoice::Discriminator,
    )?;
    #[derive(Serialize)]
    struct Row {
        n: usize,
        seed: u64,
        gap: f64,
    }
    let rows: Vec<Row> = points
        .iter()
        .flat_map(|p| p.gaps.iter().zip(&cfg.seeds).map(move |(&gap, &seed)| Row { n: p.n, seed, gap }))
        .collect();
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let gaps: Vec<f64> = points.iter().map(|p| p.mean_gap).collect();
    let rho = spearman(&ns, &gaps);
    let mut out = SuiteOutput::default();
    out.checks.push(check(cfg, "spearman(n, mean gap)".into(), rho, TREND_LIMIT, rho <= TREND_LIMIT));
    out.files.insert(PathBuf::from(&cfg.name).join("trend.csv"), to_csv(&rows, &["n", "seed", "gap"])?);
    Ok(out)
}

fn run_transfer(cfg: &ExperimentConfig, index: usize, root: u64) -> Result<SuiteOutput> {
    cfg.validate()?;
    let source_spec = grid_spec(cfg)?;
    let target_spec = cfg.target.clone().unwrap_or_else(|| source_spec.clone().with_moves(MoveSet::King));
    let source = Gridworld::new(source_spec.clone())?;
    let target = Gridworld::new(target_spec)?;
    let tcfg = TransferConfig { seed: derive_seed(root, &[index as u64]), ..cfg.transfer.clone() };
    let planner = fit_source_planner(&source, &tcfg)?;
    let rows = transfer_experiment(&planner, &target, &tcfg)?;
    let (low, hier, oracle) =
        (success_rate(&rows, Arm::LowLevel), success_rate(&rows, Arm::Hierarchical), success_rate(&rows, Arm::Oracle));
    let mut out = SuiteOutput::default();
    out.checks.push(check(cfg, "hierarchical > low-level success".into(), hier, low, hier > low));
    out.checks.push(check(cfg, "oracle >= hierarchical success".into(), oracle, hier, oracle >= hier));
    for (arm, rate) in [("low_level", low), ("hierarchical", hier), ("oracle", oracle)] {
        out.summary.push(SummaryRow {
            suite: cfg.name.clone(),
            algo: arm.into(),
            noise: 0.0,
            n_runs: 1,
            n_failed: 0,
            n_unstable: 0,
            mean_return: f64::NAN,
            stderr_return: f64::NAN,
            mean_success: rate,
            stderr_success: 0.0,
        });
    }
    let mut buf = Vec::new();
    write_rows(&rows, &mut buf)?;
    out.files.insert(PathBuf::from(&cfg.name).join("transfer.csv"), String::from_utf8(buf).expect("utf-8"));
    Ok(out)
}

/// Runs one suite; `index` is its position in the manifest.
pub fn run_suite(cfg: &ExperimentConfig, index: usize, root_seed: u64, workers: usize) -> Result<SuiteOutput> {
    match cfg.kind {
        SuiteKind::AblateHer | SuiteKind::AblateNoise => run_ablation(cfg, index, root_seed, workers),
        SuiteKind::Trend => run_trend(cfg, index, root_seed),
        SuiteKind::PlanTransfer => run_transfer(cfg, index, root_seed),
    }
}

/// One row per (algorithm, seed) of final metrics, as CSV.
pub fn ablation_her(cfg: &ExperimentConfig, root_seed: u64) -> Result<String> {
    if cfg.kind != SuiteKind::AblateHer {
        return Err(GofarError::Config(format!("suite '{}' is not a relabeling ablation", cfg.name)));
    }
    runs_csv(&run_suite(cfg, 0, root_seed, 1)?.runs)
}

/// One row per (algorithm, noise level, seed), data re-collected per level, as CSV.
pub fn ablation_noise(cfg: &ExperimentConfig, noise_levels: &[f64], root_seed: u64) -> Result<String> {
    if cfg.kind != SuiteKind::AblateNoise {
        return Err(GofarError::Config(format!("suite '{}' is not a noise ablation", cfg.name)));
    }
    let cfg = ExperimentConfig { noise_levels: noise_levels.to_vec(), ..cfg.clone() };
    runs_csv(&run_suite(&cfg, 0, root_seed, 1)?.runs)
}

/// Every file of a manifest run, keyed by path relative to the results root.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTree {
    pub files: BTreeMap<PathBuf, String>,
    pub checks: Vec<CheckRow>,
    /// Suites that failed outright, with the error.
    pub failed_suites: Vec<(String, String)>,
}

impl ResultsTree {
    /// A gating check failed or an acceptance suite could not run.
    pub fn gating_failed(&self, manifest: &Manifest) -> bool {
        self.checks.iter().any(|c| c.gating && !c.passed)
            || self
                .failed_suites
                .iter()
                .any(|(name, _)| manifest.suites.iter().any(|s| &s.name == name && s.acceptance))
    }

    pub fn write_to(&self, root: &Path) -> Result<()> {
        for (rel, text) in &self.files {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        Ok(())
    }
}

pub fn run_manifest(manifest: &Manifest) -> Result<ResultsTree> {
    manifest.validate()?;
    let mut tree = ResultsTree::default();
    let mut summary = Vec::new();
    for (i, cfg) in manifest.suites.iter().enumerate() {
        match run_suite(cfg, i, manifest.seed, manifest.workers) {
            Ok(out) => {
                summary.extend(out.summary);
                tree.checks.extend(out.checks);
                tree.files.extend(out.files);
            }
            Err(e) => tree.failed_suites.push((cfg.name.clone(), e.to_string())),
        }
    }
    tree.files.insert(PathBuf::from("summary.csv"), summary_csv(&summary)?);
    tree.files.insert(PathBuf::from("checks.csv"), checks_csv(&tree.checks)?);
    Ok(tree)
}

/// Loads the manifest, runs it, writes the tree below `out_dir` and returns the exit status.
pub fn run_all(manifest_path: &Path, out_dir: &Path) -> Result<i32> {
    let manifest = Manifest::load(manifest_path)?;
    let tree = run_manifest(&manifest)?;
    tree.write_to(out_dir)?;
    Ok(if tree.gating_failed(&manifest) { 1 } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_suite(kind: SuiteKind) -> ExperimentConfig {
        ExperimentConfig {
            name: "grid".into(),
            kind,
            env: EnvSpec::Grid(GridworldSpec::open(3, 3)),
            data: DataSpec { n_trajectories: 60, horizon: 10, expert_frac: 0.1, path: None },
            algos: vec!["gofar".into(), "gcsl".into()],
            seeds: vec![0, 1],
            noise_levels: Vec::new(),
            eval_episodes: 10,
            eval_horizon: 10,
            train: TrainConfig::default(),
            moderate_noise: None,
            extreme_noise: None,
            dataset_sizes: Vec::new(),
            transfer: TransferConfig::default(),
            target: None,
            acceptance: true,
        }
    }

    #[test]
    fn empty_manifest_gives_empty_results() {
        let m = Manifest::default();
        let tree = run_manifest(&m).unwrap();
        assert!(!tree.gating_failed(&m));
        assert_eq!(tree.files.len(), 2);
        assert_eq!(tree.files[Path::new("summary.csv")].lines().count(), 1);
    }

    #[test]
    fn one_suite_summarises_each_algorithm() {
        let m = Manifest { seed: 3, workers: 0, suites: vec![grid_suite(SuiteKind::AblateHer)] };
        let tree = run_manifest(&m).unwrap();
        assert_eq!(tree.files[Path::new("summary.csv")].lines().count(), 1 + 2);
        assert!(tree.files.contains_key(Path::new("grid/gcsl/seed_1/metrics.csv")));
        let runs = tree.files[Path::new("grid/runs.csv")].lines().count();
        assert_eq!(runs, 1 + 2 * 2);
    }

    #[test]
    fn workers_do_not_change_results() {
        let mut m = Manifest { seed: 5, workers: 1, suites: vec![grid_suite(SuiteKind::AblateHer)] };
        let a = run_manifest(&m).unwrap();
        m.workers = 3;
        assert_eq!(a, run_manifest(&m).unwrap());
    }

    #[test]
    fn summary_is_recomputable_from_runs() {
        let m = Manifest { seed: 1, workers: 0, suites: vec![grid_suite(SuiteKind::AblateHer)] };
        let out = run_suite(&m.suites[0], 0, m.seed, 1).unwrap();
        for s in &out.summary {
            let rets: Vec<f64> =
                out.runs.iter().filter(|r| r.algo == s.algo).map(|r| r.mean_return).collect();
            assert_eq!(s.mean_return, mean(&rets));
            assert_eq!(s.stderr_return, std_err(&rets));
        }
    }

    #[test]
    fn failed_run_is_recorded_and_suite_continues() {
        let mut cfg = grid_suite(SuiteKind::AblateHer);
        cfg.eval_horizon = 0;
        cfg.data.horizon = 0;
        let out = run_suite(&cfg, 0, 0, 1).unwrap();
        assert_eq!(out.runs.len(), 4);
        assert!(out.runs.iter().all(|r| r.failed()));
        assert!(out.summary.iter().all(|s| s.n_failed == 2));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = grid_suite(SuiteKind::AblateHer);
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = grid_suite(SuiteKind::AblateHer);
        cfg.algos = vec!["sac".into()];
        assert!(cfg.validate().is_err());
        let mut cfg = grid_suite(SuiteKind::AblateHer);
        cfg.data.path = Some(PathBuf::from("/nonexistent/data.jsonl"));
        assert!(cfg.validate().is_err());
        let mut cfg = grid_suite(SuiteKind::AblateNoise);
        cfg.noise_levels = vec![0.1, 0.2];
        assert!(cfg.validate().is_err());
        let m = Manifest { seed: 0, workers: 0, suites: vec![grid_suite(SuiteKind::AblateHer); 2] };
        assert!(m.validate().is_err());
    }

    #[test]
    fn noise_suite_writes_degradation() {
        let mut cfg = grid_suite(SuiteKind::AblateNoise);
        cfg.noise_levels = vec![0.0, 0.45];
        cfg.extreme_noise = Some(0.45);
        let out = run_suite(&cfg, 0, 0, 1).unwrap();
        assert_eq!(out.runs.len(), 2 * 2 * 2);
        assert_eq!(out.checks.len(), 2);
        let text = &out.files[Path::new("grid/degradation.csv")];
        assert_eq!(text.lines().count(), 1 + 4);
        let metrics = &out.files[Path::new("grid/gofar/seed_0/metrics.csv")];
        assert_eq!(metrics.lines().count(), 1 + 2 * 10);
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = Manifest { seed: 9, workers: 2, suites: vec![grid_suite(SuiteKind::AblateHer)] };
        let text = serde_json::to_string_pretty(&m).unwrap();
        assert_eq!(serde_json::from_str::<Manifest>(&text).unwrap(), m);
        let minimal = r#"{"seed": 1, "suites": [{"name": "t", "kind": "trend",
            "env": {"type": "grid", "width": 3, "height": 3, "horizon": 10, "gamma": 0.9},
            "data": {"n_trajectories": 0, "horizon": 10, "expert_frac": 0.1},
            "seeds": [0, 1], "dataset_sizes": [10, 100]}]}"#;
        let m: Manifest = serde_json::from_str(minimal).unwrap();
        m.validate().unwrap();
        assert_eq!(m.suites[0].eval_horizon, 50);
    }
}
