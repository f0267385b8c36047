//! Tabular counterparts of the ablation algorithms.
//!
//! Sampling-based training losses are replaced by their expectations over the
//! dataset: every relabeled sample appears with its exact relabel probability,
//! so a likelihood fit reduces to normalised weighted action counts.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dataset::{empirical_occupancy, OfflineDataset, RelabelSpec, RelabelStrategy};
use crate::error::{GofarError, Result};
use crate::mdp::{TabularGCMDP, TabularPolicy};
use crate::neural::adam::Adam;
use crate::occupancy::OccupancyTensor;

use super::pipeline::{mle_model, solve_from_occupancy};
use super::system::{build_system, AugmentedSystem, RewardChoice};

pub const WGCSL_EXP_CLIP: f64 = 10.0;
pub const WGCSL_ROUNDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algo {
    Gofar,
    GofarHer,
    GofarBinary,
    GofarKl,
    Gcsl,
    GcslNoHer,
    Wgcsl,
    WgcslNoHer,
}

impl Algo {
    pub const ALL: [Algo; 8] = [
        Algo::Gofar,
        Algo::GofarHer,
        Algo::GofarBinary,
        Algo::GofarKl,
        Algo::Gcsl,
        Algo::GcslNoHer,
        Algo::Wgcsl,
        Algo::WgcslNoHer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Gofar => "gofar",
            Algo::GofarHer => "gofar+her",
            Algo::GofarBinary => "gofar-binary",
            Algo::GofarKl => "gofar-kl",
            Algo::Gcsl => "gcsl",
            Algo::GcslNoHer => "gcsl-noher",
            Algo::Wgcsl => "wgcsl",
            Algo::WgcslNoHer => "wgcsl-noher",
        }
    }

    /// Relabel fraction used when the algorithm relabels at all.
    pub fn her_ratio(self) -> f64 {
        match self {
            Algo::GofarHer | Algo::Gcsl | Algo::Wgcsl => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = GofarError;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| GofarError::Config(format!("unknown algorithm {s:?}")))
    }
}

/// A relabeled goal with its probability and the time index it was achieved at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedGoal {
    pub g: usize,
    pub prob: f64,
    /// `None` for the commanded goal
    pub goal_time: Option<usize>,
}

/// Exact relabel distribution of step `t` of a trajectory.
pub fn relabel_distribution(
    dataset: &OfflineDataset,
    traj: usize,
    t: usize,
    spec: &RelabelSpec,
    mdp: &TabularGCMDP,
) -> Vec<WeightedGoal> {
    let trajectory = &dataset.trajectories[traj];
    let mut out = Vec::new();
    let keep = if spec.strategy == RelabelStrategy::None { 1.0 } else { 1.0 - spec.her_ratio };
    if keep > 0.0 {
        out.push(WeightedGoal { g: trajectory.commanded_goal, prob: keep, goal_time: None });
    }
    if spec.strategy == RelabelStrategy::FutureUniform && spec.her_ratio > 0.0 {
        let len = trajectory.transitions.len();
        let share = spec.her_ratio / (len - t) as f64;
        for i in t + 1..=len {
            let achieved = trajectory.transitions[i - 1].s_next;
            out.push(WeightedGoal { g: mdp.phi[achieved], prob: share, goal_time: Some(i) });
        }
    }
    out
}

/// Discounted occupancy of the relabeled data, normalised per goal.
pub fn relabeled_occupancy(mdp: &TabularGCMDP, dataset: &OfflineDataset, spec: &RelabelSpec) -> OccupancyTensor {
    let mut d = OccupancyTensor::zeros(mdp.n_states, mdp.n_actions, mdp.n_goals);
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let mut w = 1.0 - mdp.gamma;
        for tr in &traj.transitions {
            for wg in relabel_distribution(dataset, i, tr.t, spec, mdp) {
                d.add(tr.s, tr.a, wg.g, w * wg.prob);
            }
            w *= mdp.gamma;
        }
    }
    d.normalize_per_goal();
    d
}

fn normalise_counts(counts: Vec<Vec<Vec<f64>>>) -> TabularPolicy {
    let probs = counts
        .into_iter()
        .map(|per_goal| {
            per_goal
                .into_iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    let n = row.len() as f64;
                    if total > 0.0 {
                        row.into_iter().map(|x| x / total).collect()
                    } else {
                        vec![1.0 / n; row.len()]
                    }
                })
                .collect()
        })
        .collect();
    TabularPolicy { probs }
}

/// Weighted likelihood fit; `weight(traj, step, goal)` scales each relabeled sample.
fn fit_weighted<F>(mdp: &TabularGCMDP, dataset: &OfflineDataset, spec: &RelabelSpec, mut weight: F) -> TabularPolicy
where
    F: FnMut(usize, usize, &WeightedGoal) -> f64,
{
    let mut counts = vec![vec![vec![0.0; mdp.n_actions]; mdp.n_goals]; mdp.n_states];
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        for tr in &traj.transitions {
            for wg in relabel_distribution(dataset, i, tr.t, spec, mdp) {
                counts[tr.s][wg.g][tr.a] += wg.prob * weight(i, tr.t, &wg);
            }
        }
    }
    normalise_counts(counts)
}

pub fn train_gcsl(mdp: &TabularGCMDP, dataset: &OfflineDataset, spec: &RelabelSpec) -> TabularPolicy {
    fit_weighted(mdp, dataset, spec, |_, _, _| 1.0)
}

/// `Q^π(s,a;g) = r(s;g) + γ Σ T V^π(s';g)` for the greedy version of `policy`.
pub fn greedy_q(model: &TabularGCMDP, policy: &TabularPolicy) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = model.n_states;
    let mut q = vec![vec![vec![0.0; model.n_goals]; model.n_actions]; n];
    for g in 0..model.n_goals {
        let mut system = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for s in 0..n {
            let a = policy.greedy(s, g);
            rhs[s] = model.reward[s][g];
            for (next, &p) in model.transition[s][a].iter().enumerate() {
                system[(s, next)] -= model.gamma * p;
            }
        }
        let v = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GofarError::Singular(format!("policy evaluation for goal {g}")))?;
        for s in 0..n {
            for a in 0..model.n_actions {
                let next: f64 = model.transition[s][a].iter().enumerate().map(|(j, &p)| p * v[j]).sum();
                q[s][a][g] = model.reward[s][g] + model.gamma * next;
            }
        }
    }
    Ok(q)
}

/// Alternates exact evaluation on the MLE model with weighted refits:
/// weight `γ^{i-t} · min(exp(A), 10)` with `A = r + γ Q(s', π(s')) - Q(s, a)`.
pub fn train_wgcsl(mdp: &TabularGCMDP, dataset: &OfflineDataset, spec: &RelabelSpec) -> Result<TabularPolicy> {
    let model = mle_model(mdp, dataset);
    let gamma = mdp.gamma;
    let mut policy = train_gcsl(mdp, dataset, spec);
    for _ in 0..WGCSL_ROUNDS {
        let q = greedy_q(&model, &policy)?;
        let current = policy.clone();
        policy = fit_weighted(mdp, dataset, spec, |i, t, wg| {
            let tr = dataset.trajectories[i].transitions[t];
            let g = wg.g;
            let a_next = current.greedy(tr.s_next, g);
            let adv = mdp.reward[tr.s][g] + gamma * q[tr.s_next][a_next][g] - q[tr.s][tr.a][g];
            let discount = wg.goal_time.map_or(1.0, |gt| gamma.powi((gt - t) as i32));
            discount * adv.exp().min(WGCSL_EXP_CLIP)
        });
    }
    Ok(policy)
}

/// Outcome of the KL dual fit.
#[derive(Clone, Debug)]
pub struct KlRun {
    pub policy: TabularPolicy,
    pub losses: Vec<f64>,
    pub unstable: bool,
}

/// Training is flagged unstable when the loss turns non-finite or its magnitude
/// exceeds ten times the initial magnitude.
pub fn is_unstable(losses: &[f64]) -> bool {
    let Some(&first) = losses.first() else { return false };
    losses.iter().any(|l| !l.is_finite() || l.abs() > 10.0 * first.abs().max(1e-12))
}

/// `(1-γ) E_{μ0,p}[V] + log E_{p(g) d^O}[exp(advantage)]`, with its gradient.
pub fn kl_dual(sys: &AugmentedSystem, v: &[f64]) -> (f64, Vec<f64>) {
    let (n_s, n_a, n_g) = (sys.n_states, sys.n_actions, sys.n_goals);
    let at = |s: usize, g: usize| v[s * n_g + g];
    let mut rows = Vec::new();
    for g in 0..n_g {
        for s in 0..n_s {
            for a in 0..n_a {
                let w = sys.goal_dist[g] * sys.d_offline.get(s, a, g);
                if w > 0.0 {
                    let next: f64 = sys.transition[s][a].iter().enumerate().map(|(j, &p)| p * at(j, g)).sum();
                    rows.push((w, s, a, g, sys.reward[s][g] + sys.gamma * next - at(s, g)));
                }
            }
        }
    }
    let shift = rows.iter().map(|r| r.4).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = rows.iter().map(|r| r.0 * (r.4 - shift).exp()).sum();
    let mut loss = shift + z.ln();
    let mut grad = vec![0.0; v.len()];
    for g in 0..n_g {
        for s in 0..n_s {
            let c = (1.0 - sys.gamma) * sys.mu0[s] * sys.goal_dist[g];
            loss += c * at(s, g);
            grad[s * n_g + g] += c;
        }
    }
    for &(w, s, a, g, adv) in &rows {
        let soft = w * (adv - shift).exp() / z;
        grad[s * n_g + g] -= soft;
        for (j, &p) in sys.transition[s][a].iter().enumerate() {
            grad[j * n_g + g] += soft * sys.gamma * p;
        }
    }
    (loss, grad)
}

pub fn train_kl(sys: &AugmentedSystem, steps: usize, lr: f64) -> KlRun {
    let (n_s, n_a, n_g) = (sys.n_states, sys.n_actions, sys.n_goals);
    let mut v = vec![0.0; n_s * n_g];
    let mut adam = Adam::with_lr(v.len(), lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = kl_dual(sys, &v);
        losses.push(loss);
        if !loss.is_finite() {
            break;
        }
        adam.step(&mut v, &grad);
    }
    let mut counts = vec![vec![vec![0.0; n_a]; n_g]; n_s];
    for g in 0..n_g {
        for s in 0..n_s {
            let adv: Vec<f64> = (0..n_a)
                .map(|a| {
                    let next: f64 = sys.transition[s][a].iter().enumerate().map(|(j, &p)| p * v[j * n_g + g]).sum();
                    sys.reward[s][g] + sys.gamma * next - v[s * n_g + g]
                })
                .collect();
            let m = adv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for a in 0..n_a {
                let d = sys.d_offline.get(s, a, g);
                if d > 0.0 && m.is_finite() {
                    counts[s][g][a] = d * (adv[a] - m).exp();
                }
            }
        }
    }
    let unstable = is_unstable(&losses);
    KlRun { policy: normalise_counts(counts), losses, unstable }
}

/// Trained policy plus per-algorithm diagnostics.
#[derive(Clone, Debug)]
pub struct TabularRun {
    pub policy: TabularPolicy,
    pub unstable: bool,
}

pub const KL_STEPS: usize = 2000;
pub const KL_LR: f64 = 0.05;

pub fn train(algo: Algo, mdp: &TabularGCMDP, dataset: &OfflineDataset) -> Result<TabularRun> {
    let spec = RelabelSpec::her(algo.her_ratio())?;
    let stable = |policy| TabularRun { policy, unstable: false };
    Ok(match algo {
        Algo::Gofar | Algo::GofarBinary | Algo::GofarHer => {
            let reward = if algo == Algo::GofarBinary { RewardChoice::Binary } else { RewardChoice::Discriminator };
            let d = if algo == Algo::GofarHer {
                relabeled_occupancy(mdp, dataset, &spec)
            } else {
                empirical_occupancy(dataset, mdp)?.d
            };
            stable(solve_from_occupancy(&mle_model(mdp, dataset), &d, reward)?.policy)
        }
        Algo::GofarKl => {
            let d = empirical_occupancy(dataset, mdp)?.d;
            let sys = build_system(&mle_model(mdp, dataset), &d, RewardChoice::Discriminator)?;
            let run = train_kl(&sys, KL_STEPS, KL_LR);
            TabularRun { policy: run.policy, unstable: run.unstable }
        }
        Algo::Gcsl | Algo::GcslNoHer => stable(train_gcsl(mdp, dataset, &spec)),
        Algo::Wgcsl | Algo::WgcslNoHer => stable(train_wgcsl(mdp, dataset, &spec)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, Behavior};
    use crate::mdp::{Gridworld, GridworldSpec};

    #[test]
    fn relabel_distribution_sums_to_one() {
        let world = Gridworld::new(GridworldSpec::open(3, 3)).unwrap();
        let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), 3, 6, 0).unwrap();
        for ratio in [0.0, 0.3, 1.0] {
            let spec = RelabelSpec::her(ratio).unwrap();
            for t in 0..6 {
                let total: f64 = relabel_distribution(&data, 1, t, &spec, &world.mdp).iter().map(|w| w.prob).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcsl_follows_shortest_paths_with_full_relabeling() {
        let world = Gridworld::new(GridworldSpec::open(3, 3)).unwrap();
        let expert = world.shortest_path_policy();
        let data = collect(&world.mdp, &Behavior::single(expert, "expert"), 50, 6, 0).unwrap();
        let spec = RelabelSpec::her(1.0).unwrap();
        let pi = train_gcsl(&world.mdp, &data, &spec);
        for (i, traj) in data.trajectories.iter().enumerate() {
            for tr in &traj.transitions {
                for wg in relabel_distribution(&data, i, tr.t, &spec, &world.mdp) {
                    let dist = world.distances_to(wg.g);
                    let a = pi.greedy(tr.s, wg.g);
                    let before = dist[tr.s].unwrap();
                    let after = dist[world.nominal_next(tr.s, a)].unwrap();
                    assert!(after + 1 == before || (before == 0 && after == 0));
                }
            }
        }
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let world = Gridworld::new(GridworldSpec::open(2, 2).with_slip(0.2)).unwrap();
        let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), 20, 10, 0).unwrap();
        let d = empirical_occupancy(&data, &world.mdp).unwrap().d;
        let sys = build_system(&world.mdp, &d, RewardChoice::Binary).unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, grad) = kl_dual(&sys, &v);
        for i in 0..v.len() {
            let mut hi = v.clone();
            let mut lo = v.clone();
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (kl_dual(&sys, &hi).0 - kl_dual(&sys, &lo).0) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn instability_rule() {
        assert!(!is_unstable(&[1.0, 2.0, 9.9]));
        assert!(is_unstable(&[1.0, 10.5]));
        assert!(is_unstable(&[1.0, f64::NAN]));
        assert!(!is_unstable(&[]));
    }

    #[test]
    fn algo_names_round_trip() {
        for algo in Algo::ALL {
            assert_eq!(algo.name().parse::<Algo>().unwrap(), algo);
        }
    }
}
