//! Exact goal-conditioned occupancy measures and the identities and bounds
//! that relate them.

use nalgebra::{DMatrix, DVector};

use crate::error::{GofarError, Result};
use crate::fdiv::{xlogx, FDivergence};
use crate::mdp::{TabularGCMDP, TabularPolicy};

/// Discounted occupancy `d(s,a;g)`, normalised per goal.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTensor {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_goals: usize,
    data: Vec<f64>,
}

impl OccupancyTensor {
    pub fn zeros(n_states: usize, n_actions: usize, n_goals: usize) -> Self {
        Self { n_states, n_actions, n_goals, data: vec![0.0; n_states * n_actions * n_goals] }
    }

    fn idx(&self, s: usize, a: usize, g: usize) -> usize {
        (s * self.n_actions + a) * self.n_goals + g
    }

    pub fn get(&self, s: usize, a: usize, g: usize) -> f64 {
        self.data[self.idx(s, a, g)]
    }

    pub fn set(&mut self, s: usize, a: usize, g: usize, value: f64) {
        let i = self.idx(s, a, g);
        self.data[i] = value;
    }

    pub fn add(&mut self, s: usize, a: usize, g: usize, value: f64) {
        let i = self.idx(s, a, g);
        self.data[i] += value;
    }

    /// `d(s;g) = Σ_a d(s,a;g)`
    pub fn state(&self, s: usize, g: usize) -> f64 {
        (0..self.n_actions).map(|a| self.get(s, a, g)).sum()
    }

    pub fn state_marginal(&self, g: usize) -> Vec<f64> {
        (0..self.n_states).map(|s| self.state(s, g)).collect()
    }

    /// `d(.,.;g)` flattened in `(s, a)` order.
    pub fn goal_slice(&self, g: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_states * self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                out.push(self.get(s, a, g));
            }
        }
        out
    }

    pub fn goal_mass(&self, g: usize) -> f64 {
        self.goal_slice(g).iter().sum()
    }

    /// Rescales every goal slice with positive mass to sum to one.
    pub fn normalize_per_goal(&mut self) {
        for g in 0..self.n_goals {
            let mass = self.goal_mass(g);
            if mass > 0.0 {
                for s in 0..self.n_states {
                    for a in 0..self.n_actions {
                        let i = self.idx(s, a, g);
                        self.data[i] /= mass;
                    }
                }
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&x| x >= 0.0)
    }

    /// `π(a|s,g) = d(s,a;g) / d(s;g)`, uniform where `d(s;g) = 0`.
    pub fn policy(&self) -> TabularPolicy {
        let uniform = 1.0 / self.n_actions as f64;
        let probs = (0..self.n_states)
            .map(|s| {
                (0..self.n_goals)
                    .map(|g| {
                        let mass = self.state(s, g);
                        (0..self.n_actions)
                            .map(|a| if mass > 0.0 { self.get(s, a, g) / mass } else { uniform })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        TabularPolicy { probs }
    }

    /// Total variation between the `p(g)`-weighted joint distributions.
    pub fn total_variation(&self, other: &Self, goal_dist: &[f64]) -> f64 {
        let mut tv = 0.0;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for (g, &pg) in goal_dist.iter().enumerate() {
                    tv += pg * (self.get(s, a, g) - other.get(s, a, g)).abs();
                }
            }
        }
        0.5 * tv
    }

    /// Largest absolute violation of the Bellman flow constraint.
    pub fn flow_residual(&self, mdp: &TabularGCMDP) -> f64 {
        let mut worst: f64 = 0.0;
        for g in 0..self.n_goals {
            let mut inflow: Vec<f64> = mdp.mu0.iter().map(|&m| (1.0 - mdp.gamma) * m).collect();
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let d = self.get(s, a, g);
                    if d != 0.0 {
                        for (next, &p) in mdp.transition[s][a].iter().enumerate() {
                            inflow[next] += mdp.gamma * p * d;
                        }
                    }
                }
            }
            for (s, &inn) in inflow.iter().enumerate() {
                worst = worst.max((self.state(s, g) - inn).abs());
            }
        }
        worst
    }
}

fn check_policy(mdp: &TabularGCMDP, policy: &TabularPolicy) -> Result<()> {
    let ok = policy.probs.len() == mdp.n_states
        && policy.probs.iter().all(|r| {
            r.len() == mdp.n_goals && r.iter().all(|row| row.len() == mdp.n_actions)
        });
    if !ok {
        return Err(GofarError::Shape("policy does not match the MDP".into()));
    }
    Ok(())
}

/// State-to-state kernel `P_π[s][s'] = Σ_a π(a|s,g) T[s][a][s']` for goal `g`.
pub fn state_kernel(mdp: &TabularGCMDP, policy: &TabularPolicy, g: usize) -> DMatrix<f64> {
    let n = mdp.n_states;
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let pa = policy.prob(s, g, a);
            if pa == 0.0 {
                continue;
            }
            for (next, &t) in mdp.transition[s][a].iter().enumerate() {
                p[(s, next)] += pa * t;
            }
        }
    }
    p
}

/// Solves `d_g = (1-γ) μ0 + γ P_π^T d_g` for each goal by a direct LU solve.
pub fn solve_occupancy(mdp: &TabularGCMDP, policy: &TabularPolicy) -> Result<OccupancyTensor> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states;
    let rhs = DVector::from_iterator(n, mdp.mu0.iter().map(|&m| (1.0 - mdp.gamma) * m));
    let mut out = OccupancyTensor::zeros(n, mdp.n_actions, mdp.n_goals);
    for g in 0..mdp.n_goals {
        let p = state_kernel(mdp, policy, g);
        let system = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
        let ds = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GofarError::Singular(format!("occupancy system for goal {g}")))?;
        for s in 0..n {
            for a in 0..mdp.n_actions {
                out.set(s, a, g, ds[s].max(0.0) * policy.prob(s, g, a));
            }
        }
    }
    Ok(out)
}

/// `J(π) = 1/(1-γ) E_g Σ_{s,a} d(s,a;g) r(s;g)` for an arbitrary reward table.
pub fn return_of(occ: &OccupancyTensor, reward: &[Vec<f64>], goal_dist: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    for (g, &pg) in goal_dist.iter().enumerate() {
        let inner: f64 = (0..occ.n_states).map(|s| occ.state(s, g) * reward[s][g]).sum();
        total += pg * inner;
    }
    total / (1.0 - gamma)
}

pub fn expected_return(mdp: &TabularGCMDP, policy: &TabularPolicy) -> Result<f64> {
    let occ = solve_occupancy(mdp, policy)?;
    Ok(return_of(&occ, &mdp.reward, &mdp.goal_dist, mdp.gamma))
}

/// Per-goal returns `V^π(g) = 1/(1-γ) Σ_s d(s;g) r(s;g)`.
pub fn goal_returns(mdp: &TabularGCMDP, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let occ = solve_occupancy(mdp, policy)?;
    Ok((0..mdp.n_goals)
        .map(|g| {
            (0..mdp.n_states).map(|s| occ.state(s, g) * mdp.reward[s][g]).sum::<f64>()
                / (1.0 - mdp.gamma)
        })
        .collect())
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist.iter().map(|&p| xlogx(p)).sum::<f64>()
}

/// `KL(p ‖ q)` with `0 log 0 = 0`; mass of `p` outside the support of `q` is an error.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    crate::fdiv::divergence(p, q, FDivergence::Kl)
}

/// Target `p(s;g) = e^{r(s;g)} / Z(g)`, returned with `log Z(g)`.
pub fn boltzmann_target(r_table: &[Vec<f64>], n_goals: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_states = r_table.len();
    let mut target = vec![vec![0.0; n_goals]; n_states];
    let mut log_z = vec![0.0; n_goals];
    for g in 0..n_goals {
        let m = (0..n_states).map(|s| r_table[s][g]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n_states).map(|s| (r_table[s][g] - m).exp()).sum();
        log_z[g] = m + z.ln();
        for s in 0..n_states {
            target[s][g] = (r_table[s][g] - log_z[g]).exp();
        }
    }
    (target, log_z)
}

/// Both sides of the state-entropy regularised matching identity:
/// `-E_g KL(d^π(s;g) ‖ p(s;g)) + E_g log Z(g)` and `(1-γ) J(π) + E_g H(d^π(s;g))`.
pub fn prop1_gap(
    mdp: &TabularGCMDP,
    policy: &TabularPolicy,
    r_table: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let occ = solve_occupancy(mdp, policy)?;
    let (target, log_z) = boltzmann_target(r_table, mdp.n_goals);
    let mut lhs = 0.0;
    let mut entropy_term = 0.0;
    for (g, &pg) in mdp.goal_dist.iter().enumerate() {
        let ds = occ.state_marginal(g);
        let pt: Vec<f64> = (0..mdp.n_states).map(|s| target[s][g]).collect();
        lhs += pg * (-kl(&ds, &pt)? + log_z[g]);
        entropy_term += pg * entropy(&ds);
    }
    let j = return_of(&occ, r_table, &mdp.goal_dist, mdp.gamma);
    Ok((lhs, (1.0 - mdp.gamma) * j + entropy_term))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundVariant {
    /// reward `log p(s;g) / d^O(s;g)`
    Discriminator,
    /// reward `log p(s;g)`
    Binary,
}

/// `LHS - RHS` of the offline lower bound for the policy's own occupancy,
/// with the target induced by the MDP's binary reward and `f = χ²`.
pub fn lower_bound_slack(
    mdp: &TabularGCMDP,
    policy: &TabularPolicy,
    d_offline: &OccupancyTensor,
    variant: BoundVariant,
) -> Result<f64> {
    let occ = solve_occupancy(mdp, policy)?;
    let (target, _) = boltzmann_target(&mdp.reward, mdp.n_goals);
    slack_against(&occ, d_offline, &target, &mdp.goal_dist, variant)
}

/// Slack for explicit `d^π`, `d^O` and target `p(s;g)` (indexed `[s][g]`).
pub fn slack_against(
    d_pi: &OccupancyTensor,
    d_offline: &OccupancyTensor,
    target: &[Vec<f64>],
    goal_dist: &[f64],
    variant: BoundVariant,
) -> Result<f64> {
    let mut lhs = 0.0;
    let mut reward_term = 0.0;
    let mut reg = 0.0;
    for (g, &pg) in goal_dist.iter().enumerate() {
        if pg == 0.0 {
            continue;
        }
        let dpi_s = d_pi.state_marginal(g);
        let do_s = d_offline.state_marginal(g);
        let pt: Vec<f64> = (0..d_pi.n_states).map(|s| target[s][g]).collect();
        for s in 0..d_pi.n_states {
            if pt[s] > 0.0 && do_s[s] <= 0.0 {
                return Err(GofarError::Support {
                    what: "offline coverage",
                    location: format!("(s={s}, g={g})"),
                });
            }
        }
        lhs -= pg * kl(&dpi_s, &pt)?;
        for s in 0..d_pi.n_states {
            if dpi_s[s] > 0.0 {
                let log_ratio = match variant {
                    BoundVariant::Discriminator => pt[s].ln() - do_s[s].ln(),
                    BoundVariant::Binary => pt[s].ln(),
                };
                reward_term += pg * dpi_s[s] * log_ratio;
            }
        }
        match crate::fdiv::divergence(&d_pi.goal_slice(g), &d_offline.goal_slice(g), FDivergence::ChiSquared) {
            Ok(v) => reg += pg * v,
            Err(GofarError::Support { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(lhs - (reward_term - reg))
}

/// `p(g)`-weighted state and state-action KL between two occupancies.
pub fn lemma_b1_check(
    d1: &OccupancyTensor,
    d2: &OccupancyTensor,
    goal_dist: &[f64],
) -> Result<(f64, f64)> {
    let mut state_kl = 0.0;
    let mut sa_kl = 0.0;
    for (g, &pg) in goal_dist.iter().enumerate() {
        state_kl += pg * kl(&d1.state_marginal(g), &d2.state_marginal(g))?;
        sa_kl += pg * kl(&d1.goal_slice(g), &d2.goal_slice(g))?;
    }
    Ok((state_kl, sa_kl))
}
