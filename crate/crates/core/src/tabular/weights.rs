//! Optimal goal weighting and its distance from hindsight relabeling.

use crate::dataset::OfflineDataset;
use crate::error::Result;
use crate::fdiv::FDivergence;
use crate::mdp::{TabularGCMDP, TabularPolicy};

use super::system::{AugmentedSystem, ValueTable};

/// `p̃(g|s,a) ∝ p(g|s,a) f*'(advantage)` together with its ingredients.
#[derive(Clone, Debug)]
pub struct GoalWeights {
    /// `d^O(s,a) = Σ_g p(g) d^O(s,a;g)`, indexed `[s][a]`
    pub d_sa: Vec<Vec<f64>>,
    /// `p(g|s,a)`, indexed `[s][a][g]`
    pub conditional: Vec<Vec<Vec<f64>>>,
    /// normaliser `Z(s,a) = Σ_g p(g|s,a) f*'(advantage)`
    pub z: Vec<Vec<f64>>,
    /// `p̃(g|s,a)`; all zero where undefined
    pub weights: Vec<Vec<Vec<f64>>>,
    /// `(s, a)` pairs with no offline mass
    pub unseen: Vec<(usize, usize)>,
}

pub fn optimal_goal_weights(sys: &AugmentedSystem, v: &ValueTable) -> GoalWeights {
    let (n_s, n_a, n_g) = (sys.n_states, sys.n_actions, sys.n_goals);
    let mut d_sa = vec![vec![0.0; n_a]; n_s];
    let mut conditional = vec![vec![vec![0.0; n_g]; n_a]; n_s];
    let mut z = vec![vec![0.0; n_a]; n_s];
    let mut weights = vec![vec![vec![0.0; n_g]; n_a]; n_s];
    let mut unseen = Vec::new();
    for s in 0..n_s {
        for a in 0..n_a {
            let joint: Vec<f64> = (0..n_g).map(|g| sys.goal_dist[g] * sys.d_offline.get(s, a, g)).collect();
            let total: f64 = joint.iter().sum();
            d_sa[s][a] = total;
            if total <= 0.0 {
                unseen.push((s, a));
                continue;
            }
            for g in 0..n_g {
                conditional[s][a][g] = joint[g] / total;
                let w = conditional[s][a][g] * FDivergence::ChiSquared.weight(sys.advantage(v, s, a, g));
                weights[s][a][g] = w;
                z[s][a] += w;
            }
            if z[s][a] > 0.0 {
                for g in 0..n_g {
                    weights[s][a][g] /= z[s][a];
                }
            }
        }
    }
    GoalWeights { d_sa, conditional, z, weights, unseen }
}

impl GoalWeights {
    /// Unweighted likelihood fit on `(s,a) ~ d^O(s,a) Z(s,a)`, `g ~ p̃(g|s,a)`.
    pub fn regression_policy(&self) -> TabularPolicy {
        let n_s = self.d_sa.len();
        let n_a = self.d_sa.first().map_or(0, |r| r.len());
        let n_g = self.weights.first().and_then(|r| r.first()).map_or(0, |r| r.len());
        let mut probs = vec![vec![vec![0.0; n_a]; n_g]; n_s];
        for s in 0..n_s {
            for g in 0..n_g {
                let mass: Vec<f64> =
                    (0..n_a).map(|a| self.d_sa[s][a] * self.z[s][a] * self.weights[s][a][g]).collect();
                let total: f64 = mass.iter().sum();
                for a in 0..n_a {
                    probs[s][g][a] = if total > 0.0 { mass[a] / total } else { 1.0 / n_a as f64 };
                }
            }
        }
        TabularPolicy { probs }
    }
}

/// Discount-weighted hindsight goal distribution `p_HER(g|s,a)` with future goals
/// drawn uniformly from `φ(s_{t+1}), ..., φ(s_T)`. Rows of unseen pairs are zero.
pub fn her_distribution(dataset: &OfflineDataset, mdp: &TabularGCMDP) -> Vec<Vec<Vec<f64>>> {
    let (n_s, n_a, n_g) = (mdp.n_states, mdp.n_actions, mdp.n_goals);
    let mut acc = vec![vec![vec![0.0; n_g]; n_a]; n_s];
    for traj in &dataset.trajectories {
        let len = traj.transitions.len();
        let mut disc = 1.0;
        for tr in &traj.transitions {
            let share = disc / (len - tr.t) as f64;
            for later in &traj.transitions[tr.t..] {
                acc[tr.s][tr.a][mdp.phi[later.s_next]] += share;
            }
            disc *= mdp.gamma;
        }
    }
    for row in acc.iter_mut().flatten() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HerGap {
    /// `d^O(s,a)`-weighted mean of `KL(p_HER ‖ p̃)` on the common support
    pub gap: f64,
    /// `d^O(s,a)`-weighted hindsight mass outside the support of `p̃`
    pub excluded_mass: f64,
}

pub fn her_gap(
    sys: &AugmentedSystem,
    v: &ValueTable,
    dataset: &OfflineDataset,
    mdp: &TabularGCMDP,
) -> Result<HerGap> {
    let gw = optimal_goal_weights(sys, v);
    let her = her_distribution(dataset, mdp);
    let mut gap = 0.0;
    let mut excluded = 0.0;
    let mut total_weight = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let w = gw.d_sa[s][a];
            let p = &her[s][a];
            let q = &gw.weights[s][a];
            if w <= 0.0 || p.iter().sum::<f64>() <= 0.0 || gw.z[s][a] <= 0.0 {
                continue;
            }
            let common: Vec<usize> = (0..mdp.n_goals).filter(|&g| p[g] > 0.0 && q[g] > 0.0).collect();
            let p_mass: f64 = common.iter().map(|&g| p[g]).sum();
            let q_mass: f64 = common.iter().map(|&g| q[g]).sum();
            total_weight += w;
            excluded += w * (1.0 - p_mass);
            if p_mass > 0.0 {
                let kl: f64 = common
                    .iter()
                    .map(|&g| {
                        let pn = p[g] / p_mass;
                        pn * (pn / (q[g] / q_mass)).ln()
                    })
                    .sum();
                gap += w * kl;
            }
        }
    }
    if total_weight > 0.0 {
        gap /= total_weight;
        excluded /= total_weight;
    }
    Ok(HerGap { gap, excluded_mass: excluded })
}
