//! End-to-end tabular GoFAR: dataset to greedy policy, and the dataset-size trend.

use crate::dataset::{collect, empirical_occupancy, Behavior, OfflineDataset};
use crate::error::Result;
use crate::mdp::{derive_seed, TabularGCMDP, TabularPolicy};
use crate::occupancy::{expected_return, solve_occupancy, OccupancyTensor};

use super::system::{
    build_system, extract_policy, recover_dstar_partial, solve_dual_chi2_exact, AugmentedSystem, RewardChoice,
    ValueTable,
};

/// Maximum-likelihood transition model; unseen `(s,a)` get the uniform row `1/S`.
pub fn mle_model(mdp: &TabularGCMDP, dataset: &OfflineDataset) -> TabularGCMDP {
    let n = mdp.n_states;
    let mut counts = vec![vec![vec![0usize; n]; mdp.n_actions]; n];
    for tr in dataset.trajectories.iter().flat_map(|t| &t.transitions) {
        counts[tr.s][tr.a][tr.s_next] += 1;
    }
    let transition = counts
        .iter()
        .map(|per_action| {
            per_action
                .iter()
                .map(|row| {
                    let total: usize = row.iter().sum();
                    if total == 0 {
                        vec![1.0 / n as f64; n]
                    } else {
                        row.iter().map(|&c| c as f64 / total as f64).collect()
                    }
                })
                .collect()
        })
        .collect();
    TabularGCMDP { transition, ..mdp.clone() }
}

#[derive(Clone, Debug)]
pub struct GofarSolution {
    pub sys: AugmentedSystem,
    pub v: ValueTable,
    pub d_star: OccupancyTensor,
    pub policy: TabularPolicy,
    /// goals whose recovered occupancy is empty; their policy rows are uniform
    pub empty_goals: Vec<usize>,
}

pub fn solve_from_occupancy(
    model: &TabularGCMDP,
    d_offline: &OccupancyTensor,
    reward: RewardChoice,
) -> Result<GofarSolution> {
    let sys = build_system(model, d_offline, reward)?;
    let v = solve_dual_chi2_exact(&sys)?;
    let (d_star, empty_goals) = recover_dstar_partial(&sys, &v);
    let policy = extract_policy(&d_star);
    Ok(GofarSolution { sys, v, d_star, policy, empty_goals })
}

/// Empirical occupancy and the MLE model feed the closed-form solve.
pub fn solve_from_dataset(
    mdp: &TabularGCMDP,
    dataset: &OfflineDataset,
    reward: RewardChoice,
) -> Result<GofarSolution> {
    let occ = empirical_occupancy(dataset, mdp)?;
    let model = mle_model(mdp, dataset);
    solve_from_occupancy(&model, &occ.d, reward)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendPoint {
    pub n: usize,
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
}

/// For each dataset size, `V* - V^π̂` of greedy policies, where `V*` comes from
/// the same pipeline fed the exact behaviour occupancy and the true dynamics.
pub fn suboptimality_trend(
    mdp: &TabularGCMDP,
    behavior: &Behavior,
    horizon: usize,
    n_grid: &[usize],
    seeds: usize,
    root_seed: u64,
    reward: RewardChoice,
) -> Result<Vec<TrendPoint>> {
    let exact = behavior_occupancy(mdp, behavior)?;
    let reference = solve_from_occupancy(mdp, &exact, reward)?;
    let v_star = expected_return(mdp, &reference.policy.to_greedy())?;
    let mut out = Vec::with_capacity(n_grid.len());
    for (i, &n) in n_grid.iter().enumerate() {
        let mut gaps = Vec::with_capacity(seeds);
        for k in 0..seeds {
            let data = collect(mdp, behavior, n, horizon, derive_seed(root_seed, &[i as u64, k as u64]))?;
            let sol = solve_from_dataset(mdp, &data, reward)?;
            gaps.push(v_star - expected_return(mdp, &sol.policy.to_greedy())?);
        }
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        out.push(TrendPoint { n, gaps, mean_gap });
    }
    Ok(out)
}

/// Exact occupancy of a (mixture) behaviour.
pub fn behavior_occupancy(mdp: &TabularGCMDP, behavior: &Behavior) -> Result<OccupancyTensor> {
    let mut total = OccupancyTensor::zeros(mdp.n_states, mdp.n_actions, mdp.n_goals);
    for (w, policy) in &behavior.components {
        let occ = solve_occupancy(mdp, policy)?;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                for g in 0..mdp.n_goals {
                    total.add(s, a, g, w * occ.get(s, a, g));
                }
            }
        }
    }
    Ok(total)
}
