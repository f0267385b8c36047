//! Measurements behind each acceptance criterion, shared by the acceptance
//! tests and `gofar selftest`.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;

use crate::dataset::{collect, Behavior, RelabelSpec};
use crate::error::Result;
use crate::fdiv::{conjugate_oracle, FDivergence};
use crate::mdp::{argmax, random_mdp, rng_from_seed, Gridworld, GridworldSpec, Rng, TabularGCMDP, TabularPolicy};
use crate::neural::data::{Batch, BatchSource, VecDataset};
use crate::neural::gradcheck::max_relative_error;
use crate::neural::mlp::{Mlp, OutputAct};
use crate::neural::pointreach::PointReachEnv;
use crate::neural::train::{
    disc_loss_grad, policy_loss_grad, q_loss_grad, train_neural_with, value_loss_grad, value_of, GaussianPolicy,
    NeuralAlgo, TrainConfig,
};
use crate::occupancy::{lemma_b1_check, lower_bound_slack, prop1_gap, solve_occupancy, BoundVariant};
use crate::planner::transfer::TransferConfig;
use crate::tabular::primal::primal_oracle;
use crate::tabular::system::{
    build_system, extract_policy, recover_dstar, recover_dstar_partial, solve_block, solve_dual_chi2, RewardChoice,
    Row,
};
use crate::tabular::weights::optimal_goal_weights;

use super::suite::{DataSpec, EnvSpec, ExperimentConfig, Manifest, ResultsTree, SuiteKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{mark}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

fn criterion(id: u32, name: &'static str, passed: bool, detail: String) -> Criterion {
    Criterion { id, name, passed, detail }
}

pub const DUALITY_VALUE_TOL: f64 = 1e-4;
pub const DUALITY_TV_TOL: f64 = 1e-3;
pub const PROP1_TOL: f64 = 1e-8;
pub const SLACK_TOL: f64 = 1e-9;
pub const WEIGHTING_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const NEURAL_SUP_TOL: f64 = 0.05;
pub const NEURAL_AGREEMENT: f64 = 0.9;

/// A random instance with 3 to 5 states, 3 actions and 3 goals, and a
/// full-support offline occupancy from a random behaviour policy.
fn random_instance(rng: &mut Rng) -> Result<(TabularGCMDP, TabularPolicy)> {
    let n_states = rng.random_range(3..=5);
    let gamma = rng.random_range(0.5..0.95);
    let mdp = random_mdp(n_states, 3, 3, gamma, rng);
    let behavior = TabularPolicy::random(n_states, 3, 3, rng);
    Ok((mdp, behavior))
}

/// Closed-form χ² dual value and `d*` against the primal oracle.
pub fn duality_oracle(seed: u64) -> Result<Criterion> {
    let start = Instant::now();
    let mut rng = rng_from_seed(seed);
    let (mut worst_gap, mut worst_tv) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (mdp, behavior) = random_instance(&mut rng)?;
        let d = solve_occupancy(&mdp, &behavior)?;
        let sys = build_system(&mdp, &d, RewardChoice::Binary)?;
        let v = solve_dual_chi2(&sys)?;
        let dual = sys.dual_objective(&v, FDivergence::ChiSquared) - 0.5;
        let (d_primal, primal) = primal_oracle(&mdp, &d, RewardChoice::Binary)?;
        let d_dual = recover_dstar(&sys, &v)?;
        worst_gap = worst_gap.max((dual - primal).abs());
        worst_tv = worst_tv.max(d_dual.total_variation(&d_primal, &mdp.goal_dist));
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = worst_gap <= DUALITY_VALUE_TOL && worst_tv <= DUALITY_TV_TOL && secs < 60.0;
    Ok(criterion(
        1,
        "dual vs primal oracle",
        passed,
        format!("50 instances, worst value gap {worst_gap:.2e}, worst TV {worst_tv:.2e}, {secs:.1}s"),
    ))
}

/// Entropy-regularised matching identity on random instances and rewards.
pub fn prop1_identity(seed: u64) -> Result<Criterion> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (mdp, policy) = random_instance(&mut rng)?;
        let r: Vec<Vec<f64>> =
            (0..mdp.n_states).map(|_| (0..mdp.n_goals).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (lhs, rhs) = prop1_gap(&mdp, &policy, &r)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(criterion(2, "matching identity", worst <= PROP1_TOL, format!("20 instances, worst |lhs - rhs| {worst:.2e}")))
}

/// Offline lower-bound slacks for both reward variants and the
/// state vs state-action KL inequality.
pub fn lower_bounds(seed: u64) -> Result<Criterion> {
    let mut rng = rng_from_seed(seed);
    let (mut min_disc, mut min_bin, mut min_order, mut min_b1) = (f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for _ in 0..50 {
        let (mdp, behavior) = random_instance(&mut rng)?;
        let policy = TabularPolicy::random(mdp.n_states, mdp.n_goals, mdp.n_actions, &mut rng);
        let d_offline = solve_occupancy(&mdp, &behavior)?;
        let disc = lower_bound_slack(&mdp, &policy, &d_offline, BoundVariant::Discriminator)?;
        let bin = lower_bound_slack(&mdp, &policy, &d_offline, BoundVariant::Binary)?;
        min_disc = min_disc.min(disc);
        min_bin = min_bin.min(bin);
        min_order = min_order.min(bin - disc);
        let d_pi = solve_occupancy(&mdp, &policy)?;
        let (state_kl, sa_kl) = lemma_b1_check(&d_pi, &d_offline, &mdp.goal_dist)?;
        min_b1 = min_b1.min(sa_kl - state_kl);
    }
    let passed = min_disc >= -SLACK_TOL && min_bin >= -SLACK_TOL && min_order >= -SLACK_TOL && min_b1 >= -SLACK_TOL;
    Ok(criterion(
        3,
        "offline lower bounds",
        passed,
        format!(
            "50 instances, min slack discriminator {min_disc:.3e}, binary {min_bin:.3e}, \
             min binary - discriminator {min_order:.3e}, min state-action minus state KL {min_b1:.3e}"
        ),
    ))
}

/// Unweighted regression under the optimal goal weighting against the policy
/// read off `d*`.
pub fn goal_weighting(seed: u64) -> Result<Criterion> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    let mut rows = 0;
    for _ in 0..20 {
        let (mdp, behavior) = random_instance(&mut rng)?;
        let d = solve_occupancy(&mdp, &behavior)?;
        let sys = build_system(&mdp, &d, RewardChoice::Discriminator)?;
        let v = solve_dual_chi2(&sys)?;
        let regressed = optimal_goal_weights(&sys, &v).regression_policy();
        let (dstar, _) = recover_dstar_partial(&sys, &v);
        let marginal = extract_policy(&dstar);
        for s in 0..mdp.n_states {
            for g in 0..mdp.n_goals {
                if dstar.state(s, g) <= 0.0 {
                    continue;
                }
                rows += 1;
                for a in 0..mdp.n_actions {
                    worst = worst.max((regressed.prob(s, g, a) - marginal.prob(s, g, a)).abs());
                }
            }
        }
    }
    Ok(criterion(
        4,
        "optimal goal weighting",
        worst <= WEIGHTING_TOL,
        format!("20 instances, {rows} rows, worst per-row difference {worst:.2e}"),
    ))
}

/// χ² conjugate and its maximiser against a grid search on `[0, 10]`.
pub fn fenchel_grid() -> Criterion {
    let step = 1e-3;
    let (mut worst_value, mut worst_arg) = (0.0f64, 0.0f64);
    for i in 0..=60 {
        let y = -1.0 + 0.1 * i as f64;
        let (v, x) = conjugate_oracle(FDivergence::ChiSquared, y, 10.0, step);
        let chi = FDivergence::ChiSquared;
        worst_value = worst_value.max((chi.f_star(y) - 0.5 - v).abs());
        worst_arg = worst_arg.max((chi.f_star_prime(y) - x).abs());
    }
    criterion(
        5,
        "conjugate grid oracle",
        worst_value <= 2.0 * step && worst_arg <= 2.0 * step,
        format!("61 points in [-1, 5], grid step {step}, worst value error {worst_value:.2e}, worst argmax error {worst_arg:.2e}"),
    )
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.set_flat(p);
    n
}

fn small_batch(seed: u64) -> Result<Batch> {
    let data = PointReachEnv::default().collect(20, 10, 0.3, seed)?;
    Ok(BatchSource::new(&data, RelabelSpec::NONE)?.sample(16, &mut rng_from_seed(seed)))
}

/// Worst central-difference relative error of every head over parameter draws.
pub fn gradient_errors(draws: u64) -> Result<Vec<(&'static str, f64)>> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut worst = [("value chi2", 0.0f64), ("value kl", 0.0), ("policy", 0.0), ("discriminator", 0.0), ("critic", 0.0)];
    for seed in 0..draws {
        let b = small_batch(seed)?;
        let net = Mlp::new(&[4, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(100 + seed));
        let r: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        for (slot, div) in [(0, FDivergence::ChiSquared), (1, FDivergence::Kl)] {
            let (_, g) = value_loss_grad(&net, &b, &r, div, 0.9)?;
            let f = |p: &[f64]| value_loss_grad(&with_params(&net, p), &b, &r, div, 0.9).map_or(f64::NAN, |x| x.0);
            worst[slot].1 = worst[slot].1.max(max_relative_error(f, &net.flat(), &g, H, FLOOR));
        }

        let pi = GaussianPolicy {
            net: Mlp::new(&[4, 8, 8, 2], OutputAct::Tanh, &mut rng_from_seed(200 + seed)),
            action_scale: 0.05,
            sigma: 0.1,
        };
        let w: Vec<f64> = (0..b.len()).map(|i| (i % 3) as f64).collect();
        let (_, g) = policy_loss_grad(&pi, &b, &w)?;
        let f = |p: &[f64]| {
            let q = GaussianPolicy { net: with_params(&pi.net, p), ..pi.clone() };
            policy_loss_grad(&q, &b, &w).map_or(f64::NAN, |x| x.0)
        };
        worst[2].1 = worst[2].1.max(max_relative_error(f, &pi.net.flat(), &g, H, FLOOR));

        let disc = Mlp::new(&[4, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(300 + seed));
        for lambda in [0.0, 0.01, 1.0] {
            let (_, g) = disc_loss_grad(&disc, &b.achieved, &b.goal, lambda)?;
            let f =
                |p: &[f64]| disc_loss_grad(&with_params(&disc, p), &b.achieved, &b.goal, lambda).map_or(f64::NAN, |x| x.0);
            worst[3].1 = worst[3].1.max(max_relative_error(f, &disc.flat(), &g, H, FLOOR));
        }

        let q = Mlp::new(&[6, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(400 + seed));
        let t: Vec<f64> = (0..b.len()).map(|i| i as f64 * 0.1).collect();
        let (_, g) = q_loss_grad(&q, &b, &t)?;
        let f = |p: &[f64]| q_loss_grad(&with_params(&q, p), &b, &t).map_or(f64::NAN, |x| x.0);
        worst[4].1 = worst[4].1.max(max_relative_error(f, &q.flat(), &g, H, FLOOR));
    }
    Ok(worst.to_vec())
}

pub fn gradient_checks() -> Result<Criterion> {
    let errors = gradient_errors(10)?;
    let passed = errors.iter().all(|&(_, e)| e < GRADIENT_TOL);
    let detail = errors.iter().map(|(name, e)| format!("{name} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok(criterion(6, "neural gradient checks", passed, format!("10 draws, worst relative error: {detail}")))
}

/// Outcome of fitting the neural path on a one-hot gridworld.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralVsTabular {
    pub sup_norm: f64,
    pub agreeing: usize,
    pub compared: usize,
    pub seconds: f64,
}

/// GoFAR with binary reward on a one-hot 4×4 grid against the exact value and
/// the exact weighted-regression action.
pub fn neural_vs_tabular_run(seed: u64, hidden: usize, steps: usize) -> Result<NeuralVsTabular> {
    let start = Instant::now();
    let world = Gridworld::new(GridworldSpec::open(4, 4).with_gamma(0.9))?;
    let mdp = &world.mdp;
    let data = collect(mdp, &Behavior::uniform(mdp), 200, 30, seed)?;
    let n = data.n_transitions() as f64;
    let (ns, ng, na) = (mdp.n_states, mdp.n_goals, mdp.n_actions);
    let mut vstar = vec![vec![0.0; ng]; ns];
    let mut supported = vec![vec![false; ng]; ns];
    let mut scores = vec![vec![vec![0.0; na]; ng]; ns];
    for g in 0..ng {
        let mut rows = Vec::new();
        let mut init = vec![0.0; ns];
        for t in data.trajectories.iter().filter(|t| t.commanded_goal == g) {
            init[t.transitions[0].s] += t.transitions.len() as f64 / n;
            for tr in &t.transitions {
                rows.push(Row { weight: 1.0 / n, reward: mdp.reward[tr.s][g], cur: tr.s, next: vec![(tr.s_next, 1.0)] });
                supported[tr.s][g] = true;
                supported[tr.s_next][g] = true;
            }
        }
        if rows.is_empty() {
            continue;
        }
        let v = solve_block(ns, &rows, &init, mdp.gamma)?;
        for s in 0..ns {
            vstar[s][g] = v[s];
        }
        for t in data.trajectories.iter().filter(|t| t.commanded_goal == g) {
            for tr in &t.transitions {
                let y = mdp.reward[tr.s][g] + mdp.gamma * v[tr.s_next] - v[tr.s];
                scores[tr.s][g][tr.a] += FDivergence::ChiSquared.weight(y);
            }
        }
    }

    let vd = VecDataset::from_tabular(mdp, &data);
    let lr = 1e-3;
    let cfg = TrainConfig {
        hidden,
        value_steps: steps,
        policy_steps: steps,
        gamma: mdp.gamma,
        lr_value: lr,
        lr_policy: lr,
        seed,
        ..TrainConfig::default()
    };
    let run = train_neural_with(NeuralAlgo::GofarBinary, &vd, &cfg, 1.0, true)?;
    let value = run.value.as_ref().expect("GoFAR trains a value network");
    let mut obs = Array2::zeros((ns * ng, ns));
    let mut goal = Array2::zeros((ns * ng, ng));
    for s in 0..ns {
        for g in 0..ng {
            obs[[s * ng + g, s]] = 1.0;
            goal[[s * ng + g, g]] = 1.0;
        }
    }
    let v_net = value_of(value, &obs, &goal)?;
    let means = run.policy.mean(&obs, &goal)?;
    let mut sup_norm = 0.0f64;
    let (mut agreeing, mut compared) = (0, 0);
    for s in 0..ns {
        for g in 0..ng {
            if supported[s][g] {
                sup_norm = sup_norm.max((v_net[s * ng + g] - vstar[s][g]).abs());
            }
            if scores[s][g].iter().any(|&x| x > 0.0) {
                compared += 1;
                let row: Vec<f64> = means.row(s * ng + g).to_vec();
                if argmax(&row) == argmax(&scores[s][g]) {
                    agreeing += 1;
                }
            }
        }
    }
    Ok(NeuralVsTabular { sup_norm, agreeing, compared, seconds: start.elapsed().as_secs_f64() })
}

pub fn neural_vs_tabular(seed: u64) -> Result<Criterion> {
    let r = neural_vs_tabular_run(seed, 64, 3000)?;
    let share = r.agreeing as f64 / r.compared as f64;
    Ok(criterion(
        7,
        "neural vs tabular",
        r.sup_norm <= NEURAL_SUP_TOL && share >= NEURAL_AGREEMENT && r.seconds < 600.0,
        format!(
            "sup-norm {:.4}, greedy agreement {}/{} ({:.1}%), {:.1}s",
            r.sup_norm,
            r.agreeing,
            r.compared,
            100.0 * share,
            r.seconds
        ),
    ))
}

fn base_suite(name: &str, kind: SuiteKind, env: EnvSpec) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        kind,
        env,
        data: DataSpec { n_trajectories: 1000, horizon: 50, expert_frac: 0.1, path: None },
        algos: Vec::new(),
        seeds: (0..5).collect(),
        noise_levels: Vec::new(),
        eval_episodes: 100,
        eval_horizon: 50,
        train: TrainConfig::default(),
        moderate_noise: None,
        extreme_noise: None,
        dataset_sizes: Vec::new(),
        transfer: TransferConfig::default(),
        target: None,
        acceptance: true,
    }
}

fn all_algos() -> Vec<String> {
    crate::tabular::baselines::Algo::ALL.iter().map(|a| a.name().to_string()).collect()
}

/// Training settings of the point-reach suites.
pub fn point_train_config() -> TrainConfig {
    TrainConfig { hidden: 64, disc_steps: 3000, value_steps: 3000, policy_steps: 3000, ..TrainConfig::default() }
}

/// The suites behind the directional criteria.
pub fn acceptance_manifest() -> Manifest {
    let grid = EnvSpec::Grid(GridworldSpec::open(5, 5));
    let mut grid_her = base_suite("grid-her", SuiteKind::AblateHer, grid.clone());
    grid_her.algos = all_algos();

    let mut point_her = base_suite("pointreach-her", SuiteKind::AblateHer, EnvSpec::PointReach(PointReachEnv::default()));
    point_her.algos = all_algos();
    point_her.train = point_train_config();

    let mut noise = base_suite("grid-noise", SuiteKind::AblateNoise, grid.clone());
    noise.algos = vec!["gofar".into(), "gcsl".into(), "wgcsl".into()];
    noise.noise_levels = vec![0.0, 0.2, 0.45];
    noise.moderate_noise = Some(0.2);
    noise.extreme_noise = Some(0.45);

    let mut trend = base_suite("grid-trend", SuiteKind::Trend, grid);
    trend.seeds = (0..10).collect();
    trend.dataset_sizes = vec![10, 30, 100, 300, 1000];

    let transfer = base_suite("two-room-transfer", SuiteKind::PlanTransfer, EnvSpec::Grid(GridworldSpec::two_room()));

    Manifest { seed: 2022, workers: 1, suites: vec![grid_her, point_her, noise, trend, transfer] }
}

/// The acceptance manifest with the neural suite cut to two seeds and short
/// training, for repeated runs.
pub fn rerun_manifest() -> Manifest {
    let mut m = acceptance_manifest();
    for s in &mut m.suites {
        if matches!(s.env, EnvSpec::PointReach(_)) {
            s.seeds = vec![0, 1];
            s.data.n_trajectories = 200;
            s.eval_episodes = 20;
            s.train = TrainConfig { disc_steps: 200, value_steps: 200, policy_steps: 200, ..point_train_config() };
        }
    }
    m
}

/// Passes when every gating check of the named suites ran and passed.
pub fn suite_criterion(id: u32, name: &'static str, tree: &ResultsTree, suites: &[&str]) -> Criterion {
    let mut parts = Vec::new();
    let mut passed = true;
    for suite in suites {
        if let Some((_, err)) = tree.failed_suites.iter().find(|(n, _)| n == suite) {
            passed = false;
            parts.push(format!("{suite} failed: {err}"));
            continue;
        }
        let checks: Vec<_> = tree.checks.iter().filter(|c| c.suite == *suite).collect();
        if checks.iter().all(|c| !c.gating) {
            passed = false;
            parts.push(format!("{suite}: no gating checks"));
        }
        for c in checks {
            if c.gating && !c.passed {
                passed = false;
            }
            let mark = if c.passed { "ok" } else { "FAILED" };
            parts.push(format!("{suite}: {} = {:.3} vs {:.3} {mark}", c.check, c.value, c.threshold));
        }
    }
    criterion(id, name, passed, parts.join("; "))
}

/// Runs `manifest` twice and compares every output file byte for byte.
pub fn determinism(manifest: &Manifest) -> Result<Criterion> {
    let first = run_twice_diff(manifest)?;
    let passed = first.0 == 0;
    Ok(criterion(12, "byte-identical reruns", passed, format!("{} files, {} differ", first.1, first.0)))
}

fn run_twice_diff(manifest: &Manifest) -> Result<(usize, usize)> {
    let a = super::suite::run_manifest(manifest)?;
    let b = super::suite::run_manifest(manifest)?;
    let mut differing = a.files.iter().filter(|(path, text)| b.files.get(*path) != Some(*text)).count();
    differing += b.files.keys().filter(|k| !a.files.contains_key(*k)).count();
    Ok((differing, a.files.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenchel_grid_passes() {
        assert!(fenchel_grid().passed);
    }

    #[test]
    fn display_marks_outcome() {
        let c = criterion(3, "x", false, "detail".into());
        assert_eq!(c.to_string(), "[FAIL]  3 x: detail");
    }

    #[test]
    fn acceptance_manifest_is_valid() {
        acceptance_manifest().validate().unwrap();
        rerun_manifest().validate().unwrap();
    }
}
