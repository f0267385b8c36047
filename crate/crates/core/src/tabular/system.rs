//! Goal-augmented linear system and the closed-form χ² dual.

use nalgebra::{DMatrix, DVector};

use crate::error::{GofarError, Result};
use crate::fdiv::FDivergence;
use crate::mdp::{TabularGCMDP, TabularPolicy};
use crate::occupancy::OccupancyTensor;

pub const RIDGE: f64 = 1e-8;
/// `logit(1 - 1e-6)`: the largest reward an output-clamped discriminator can produce.
pub const LOGIT_CLAMP: f64 = 13.815509557963773;

/// How the dual reward `R(s;g)` is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardChoice {
    /// `R = r(s;g)`
    Binary,
    /// `R = log p(s;g) / d^O(s;g)` with a Dirac target; missing coverage is an error
    LogRatio,
    /// the same log ratio read through the optimal discriminator `c = p / (p + d^O)`
    /// with its output clamped to `[1e-6, 1 - 1e-6]`
    Discriminator,
}

impl std::str::FromStr for RewardChoice {
    type Err = GofarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "logratio" => Ok(Self::LogRatio),
            "disc" | "discriminator" => Ok(Self::Discriminator),
            other => Err(GofarError::Config(format!("unknown reward {other:?} (binary|logratio|disc)"))),
        }
    }
}

/// One residual `w · (r + γ Σ p V[next] - V[cur] + 1)` of a per-goal block.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub weight: f64,
    pub reward: f64,
    pub cur: usize,
    pub next: Vec<(usize, f64)>,
}

/// Minimiser of `(1-γ) Σ μ V + Σ w f*(r + γ E V' - V)` for the χ² conjugate.
///
/// Variables that no positively weighted row touches are fixed at zero.
pub fn solve_block(n_vars: usize, rows: &[Row], init: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let mut gram = DMatrix::<f64>::zeros(n_vars, n_vars);
    let mut rhs = DVector::<f64>::from_iterator(n_vars, init.iter().map(|&m| -(1.0 - gamma) * m));
    let mut e = vec![0.0; n_vars];
    let mut touched = vec![false; n_vars];
    for row in rows.iter().filter(|r| r.weight > 0.0) {
        let mut support: Vec<usize> = Vec::with_capacity(row.next.len() + 1);
        for &(j, p) in &row.next {
            if p != 0.0 {
                if e[j] == 0.0 {
                    support.push(j);
                }
                e[j] += gamma * p;
            }
        }
        if e[row.cur] == 0.0 && !support.contains(&row.cur) {
            support.push(row.cur);
        }
        e[row.cur] -= 1.0;
        for &i in &support {
            touched[i] = true;
            rhs[i] -= row.weight * (1.0 + row.reward) * e[i];
            for &j in &support {
                gram[(i, j)] += row.weight * e[i] * e[j];
            }
        }
        for &i in &support {
            e[i] = 0.0;
        }
    }
    let active: Vec<usize> = (0..n_vars).filter(|&i| touched[i]).collect();
    let mut v = vec![0.0; n_vars];
    if active.is_empty() {
        return Ok(v);
    }
    let n = active.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (ii, &i) in active.iter().enumerate() {
        b[ii] = rhs[i];
        for (jj, &j) in active.iter().enumerate() {
            m[(ii, jj)] = gram[(i, j)];
        }
        m[(ii, ii)] += RIDGE;
    }
    let sol = match m.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => m
            .lu()
            .solve(&b)
            .ok_or_else(|| GofarError::Singular(format!("{n} supported values, deficient support")))?,
    };
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(GofarError::Singular("non-finite dual solution".into()));
    }
    for (ii, &i) in active.iter().enumerate() {
        v[i] = sol[ii];
    }
    Ok(v)
}

fn clamped_objective(rows: &[Row], init: &[f64], gamma: f64, v: &[f64]) -> f64 {
    let mut total: f64 = init.iter().zip(v).map(|(m, x)| (1.0 - gamma) * m * x).sum();
    for row in rows {
        let y = row_residual(row, gamma, v);
        if y > 0.0 {
            total += 0.5 * row.weight * y * y;
        }
    }
    total
}

fn row_residual(row: &Row, gamma: f64, v: &[f64]) -> f64 {
    let next: f64 = row.next.iter().map(|&(j, p)| p * v[j]).sum();
    row.reward + gamma * next - v[row.cur] + 1.0
}

pub const NEWTON_MAX_ITERS: usize = 200;

/// Minimiser of the dual with the exact conjugate over `x ≥ 0`, i.e. the
/// residual enters as `½ max(0, ·)²`. Newton steps on the active rows with
/// backtracking, started from the unclamped closed form; identical to
/// [`solve_block`] whenever no residual is negative there.
pub fn solve_block_clamped(n_vars: usize, rows: &[Row], init: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let rows: Vec<Row> = rows.iter().filter(|r| r.weight > 0.0).cloned().collect();
    let mut v = solve_block(n_vars, &rows, init, gamma)?;
    let mut f = clamped_objective(&rows, init, gamma, &v);
    for _ in 0..NEWTON_MAX_ITERS {
        let active: Vec<Row> = rows.iter().filter(|r| row_residual(r, gamma, &v) > 0.0).cloned().collect();
        let target = solve_block(n_vars, &active, init, gamma)?;
        // variables the active rows no longer touch keep their value
        let mut touched = vec![false; n_vars];
        for r in &active {
            touched[r.cur] = true;
            for &(j, p) in &r.next {
                if p != 0.0 {
                    touched[j] = true;
                }
            }
        }
        let dir: Vec<f64> = (0..n_vars).map(|i| if touched[i] { target[i] - v[i] } else { 0.0 }).collect();
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = v.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            let fc = clamped_objective(&rows, init, gamma, &cand);
            if fc < f - 1e-15 * f.abs().max(1.0) {
                v = cand;
                f = fc;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(v)
}

/// `V[s][g]`
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValueTable {
    pub v: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn zeros(n_states: usize, n_goals: usize) -> Self {
        Self { v: vec![vec![0.0; n_goals]; n_states] }
    }

    pub fn get(&self, s: usize, g: usize) -> f64 {
        self.v[s][g]
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.v
            .iter()
            .flatten()
            .zip(other.v.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The dual problem over goal-augmented states `(s, g)`.
///
/// Transitions never change the goal, so the operators factor into a shared
/// `(S·A) × S` block applied to each goal separately.
#[derive(Clone, Debug)]
pub struct AugmentedSystem {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_goals: usize,
    pub gamma: f64,
    /// `transition[s][a][s']` shared by every goal block
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `d^O(s,a;g)`, normalised per goal
    pub d_offline: OccupancyTensor,
    pub goal_dist: Vec<f64>,
    /// `R[s][g]`
    pub reward: Vec<Vec<f64>>,
    pub mu0: Vec<f64>,
}

/// Dirac target `p(s;g)`: uniform over the states that project onto `g`.
pub fn dirac_target(mdp: &TabularGCMDP) -> Vec<Vec<f64>> {
    let mut sizes = vec![0usize; mdp.n_goals];
    for &g in &mdp.phi {
        sizes[g] += 1;
    }
    (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_goals)
                .map(|g| if mdp.phi[s] == g { 1.0 / sizes[g] as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn build_system(
    mdp: &TabularGCMDP,
    d_offline: &OccupancyTensor,
    reward_choice: RewardChoice,
) -> Result<AugmentedSystem> {
    if (d_offline.n_states, d_offline.n_actions, d_offline.n_goals)
        != (mdp.n_states, mdp.n_actions, mdp.n_goals)
    {
        return Err(GofarError::Shape("offline occupancy does not match the MDP".into()));
    }
    let reward = match reward_choice {
        RewardChoice::Binary => mdp.reward.clone(),
        RewardChoice::LogRatio | RewardChoice::Discriminator => {
            let target = dirac_target(mdp);
            let mut out = vec![vec![0.0; mdp.n_goals]; mdp.n_states];
            for s in 0..mdp.n_states {
                for g in 0..mdp.n_goals {
                    let p = target[s][g];
                    let q = d_offline.state(s, g);
                    out[s][g] = if reward_choice == RewardChoice::Discriminator {
                        let c = if p + q > 0.0 { p / (p + q) } else { 0.5 };
                        logit_clamped(c)
                    } else if p == 0.0 {
                        -LOGIT_CLAMP
                    } else if q == 0.0 {
                        if mdp.goal_dist[g] > 0.0 {
                            return Err(GofarError::Support {
                                what: "offline coverage of the goal target",
                                location: format!("(s={s}, g={g})"),
                            });
                        }
                        0.0
                    } else {
                        (p / q).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
                    };
                }
            }
            out
        }
    };
    Ok(AugmentedSystem {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        n_goals: mdp.n_goals,
        gamma: mdp.gamma,
        transition: mdp.transition.clone(),
        d_offline: d_offline.clone(),
        goal_dist: mdp.goal_dist.clone(),
        reward,
        mu0: mdp.mu0.clone(),
    })
}

/// `logit(c)` with `c` clamped to `[1e-6, 1 - 1e-6]`.
pub fn logit_clamped(c: f64) -> f64 {
    let c = c.clamp(1e-6, 1.0 - 1e-6);
    -(1.0 / c - 1.0).ln()
}

impl AugmentedSystem {
    pub fn n_rows(&self) -> usize {
        self.n_states * self.n_goals * self.n_actions
    }

    pub fn n_cols(&self) -> usize {
        self.n_states * self.n_goals
    }

    /// Row index of `(s, a, g)`.
    pub fn row_index(&self, s: usize, a: usize, g: usize) -> usize {
        (g * self.n_states + s) * self.n_actions + a
    }

    /// Column index of `(s, g)`.
    pub fn col_index(&self, s: usize, g: usize) -> usize {
        g * self.n_states + s
    }

    /// Dense expected-next-value operator.
    pub fn t_op(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows(), self.n_cols());
        for g in 0..self.n_goals {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    for (next, &p) in self.transition[s][a].iter().enumerate() {
                        m[(self.row_index(s, a, g), self.col_index(next, g))] = p;
                    }
                }
            }
        }
        m
    }

    /// Dense broadcast operator `V(s;g) -> (s,a,g)`.
    pub fn b_op(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows(), self.n_cols());
        for g in 0..self.n_goals {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    m[(self.row_index(s, a, g), self.col_index(s, g))] = 1.0;
                }
            }
        }
        m
    }

    /// `p(g) d^O(s,a;g)` over rows.
    pub fn d_diag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        for g in 0..self.n_goals {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    out[self.row_index(s, a, g)] = self.goal_dist[g] * self.d_offline.get(s, a, g);
                }
            }
        }
        out
    }

    /// `R(s;g)` broadcast over rows.
    pub fn r_vec(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        for g in 0..self.n_goals {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    out[self.row_index(s, a, g)] = self.reward[s][g];
                }
            }
        }
        out
    }

    /// `μ0(s) p(g)` over columns.
    pub fn mu0_vec(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        for g in 0..self.n_goals {
            for s in 0..self.n_states {
                out[self.col_index(s, g)] = self.mu0[s] * self.goal_dist[g];
            }
        }
        out
    }

    /// `R(s;g) + γ Σ T V(s';g) - V(s;g)`
    pub fn advantage(&self, v: &ValueTable, s: usize, a: usize, g: usize) -> f64 {
        let next: f64 = self.transition[s][a].iter().enumerate().map(|(n, &p)| p * v.v[n][g]).sum();
        self.reward[s][g] + self.gamma * next - v.v[s][g]
    }

    /// `(1-γ) E_{μ0,p}[V] + E_{p(g) d^O}[f*(advantage)]`
    pub fn dual_objective(&self, v: &ValueTable, div: FDivergence) -> f64 {
        let mut total = 0.0;
        for g in 0..self.n_goals {
            let pg = self.goal_dist[g];
            if pg == 0.0 {
                continue;
            }
            let mut block = 0.0;
            for s in 0..self.n_states {
                block += (1.0 - self.gamma) * self.mu0[s] * v.v[s][g];
                for a in 0..self.n_actions {
                    let d = self.d_offline.get(s, a, g);
                    if d > 0.0 {
                        block += d * div.f_star(self.advantage(v, s, a, g));
                    }
                }
            }
            total += pg * block;
        }
        total
    }

    /// Rows of goal block `g` in the generic form.
    pub fn block_rows(&self, g: usize) -> Vec<Row> {
        let mut rows = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = self.d_offline.get(s, a, g);
                if w > 0.0 {
                    rows.push(Row {
                        weight: w,
                        reward: self.reward[s][g],
                        cur: s,
                        next: self.transition[s][a].iter().copied().enumerate().filter(|x| x.1 != 0.0).collect(),
                    });
                }
            }
        }
        rows
    }
}

/// Closed-form minimiser of the χ² dual, one `S × S` solve per goal.
pub fn solve_dual_chi2(sys: &AugmentedSystem) -> Result<ValueTable> {
    let mut out = ValueTable::zeros(sys.n_states, sys.n_goals);
    for g in 0..sys.n_goals {
        let v = solve_block(sys.n_states, &sys.block_rows(g), &sys.mu0, sys.gamma)?;
        for s in 0..sys.n_states {
            out.v[s][g] = v[s];
        }
    }
    Ok(out)
}

/// Minimiser of the χ² dual with the conjugate restricted to `x ≥ 0`; agrees
/// with [`solve_dual_chi2`] when no advantage falls below `-1`.
pub fn solve_dual_chi2_exact(sys: &AugmentedSystem) -> Result<ValueTable> {
    let mut out = ValueTable::zeros(sys.n_states, sys.n_goals);
    for g in 0..sys.n_goals {
        let v = solve_block_clamped(sys.n_states, &sys.block_rows(g), &sys.mu0, sys.gamma)?;
        for s in 0..sys.n_states {
            out.v[s][g] = v[s];
        }
    }
    Ok(out)
}

/// `d^O · max(0, advantage + 1)` renormalised per goal, with the goals left empty.
pub fn recover_dstar_partial(sys: &AugmentedSystem, v: &ValueTable) -> (OccupancyTensor, Vec<usize>) {
    let mut d = OccupancyTensor::zeros(sys.n_states, sys.n_actions, sys.n_goals);
    for g in 0..sys.n_goals {
        for s in 0..sys.n_states {
            for a in 0..sys.n_actions {
                let o = sys.d_offline.get(s, a, g);
                if o > 0.0 {
                    d.set(s, a, g, o * FDivergence::ChiSquared.weight(sys.advantage(v, s, a, g)));
                }
            }
        }
    }
    let empty = (0..sys.n_goals).filter(|&g| d.goal_mass(g) <= 0.0).collect();
    d.normalize_per_goal();
    (d, empty)
}

/// Fails when a goal with positive `p(g)` ends up with no mass.
pub fn recover_dstar(sys: &AugmentedSystem, v: &ValueTable) -> Result<OccupancyTensor> {
    let (d, empty) = recover_dstar_partial(sys, v);
    if let Some(&g) = empty.iter().find(|&&g| sys.goal_dist[g] > 0.0) {
        return Err(GofarError::Support {
            what: "recovered occupancy (goal unreachable under offline support)",
            location: format!("g={g}"),
        });
    }
    Ok(d)
}

/// `π(a|s,g) ∝ d(s,a;g)`, uniform where the state carries no mass.
pub fn extract_policy(d: &OccupancyTensor) -> TabularPolicy {
    d.policy()
}

/// Number of supported rows whose χ² weight is clamped to zero.
pub fn clamped_rows(sys: &AugmentedSystem, v: &ValueTable) -> usize {
    let mut n = 0;
    for g in 0..sys.n_goals {
        for s in 0..sys.n_states {
            for a in 0..sys.n_actions {
                if sys.d_offline.get(s, a, g) > 0.0 && sys.advantage(v, s, a, g) + 1.0 < 0.0 {
                    n += 1;
                }
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_mdp, rng_from_seed};
    use crate::occupancy::solve_occupancy;

    #[test]
    fn one_state_operators() {
        let mdp = TabularGCMDP::from_parts(vec![vec![vec![1.0]]], vec![1.0], vec![1.0], vec![0], 0.9);
        let d = solve_occupancy(&mdp, &TabularPolicy::uniform(1, 1, 1)).unwrap();
        let sys = build_system(&mdp, &d, RewardChoice::Binary).unwrap();
        assert_eq!(sys.t_op(), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(sys.b_op(), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(sys.d_diag(), vec![1.0]);
        assert_eq!(sys.r_vec(), vec![1.0]);
    }

    #[test]
    fn chain_operators() {
        // s0 -> s1 -> s1, goals by state
        let mdp = TabularGCMDP::from_parts(
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            vec![0, 1],
            0.5,
        );
        let d = solve_occupancy(&mdp, &TabularPolicy::uniform(2, 2, 1)).unwrap();
        let sys = build_system(&mdp, &d, RewardChoice::Binary).unwrap();
        let t = sys.t_op();
        assert_eq!(t.shape(), (4, 4));
        // rows (s,g): (0,0) (1,0) (0,1) (1,1); columns (s,g) in the same order
        let expected = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        assert_eq!(t, expected);
        assert_eq!(sys.r_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_closed_form_agrees_with_blocks() {
        let mut rng = rng_from_seed(12);
        let mdp = random_mdp(4, 2, 2, 0.8, &mut rng);
        let beh = TabularPolicy::random(4, 2, 2, &mut rng);
        let d = solve_occupancy(&mdp, &beh).unwrap();
        let sys = build_system(&mdp, &d, RewardChoice::Binary).unwrap();
        let v = solve_dual_chi2(&sys).unwrap();

        let a = sys.t_op() * sys.gamma - sys.b_op();
        let dd = DMatrix::from_diagonal(&DVector::from_vec(sys.d_diag()));
        let gram = a.transpose() * &dd * &a;
        let ones_r = DVector::from_vec(sys.r_vec().iter().map(|r| 1.0 + r).collect());
        let mu = DVector::from_vec(sys.mu0_vec());
        let rhs = mu * (sys.gamma - 1.0) - a.transpose() * &dd * ones_r;
        let dense = gram.lu().solve(&rhs).unwrap();
        for g in 0..2 {
            for s in 0..4 {
                assert!((dense[sys.col_index(s, g)] - v.get(s, g)).abs() < 1e-5, "{} vs {}", dense[sys.col_index(s, g)], v.get(s, g));
            }
        }
    }

    #[test]
    fn zero_reward_on_policy_is_fixed_point() {
        let mut rng = rng_from_seed(4);
        let mdp = random_mdp(4, 3, 2, 0.9, &mut rng);
        let beh = TabularPolicy::random(4, 2, 3, &mut rng);
        let d = solve_occupancy(&mdp, &beh).unwrap();
        let mut sys = build_system(&mdp, &d, RewardChoice::Binary).unwrap();
        sys.reward = vec![vec![0.0; 2]; 4];
        let v = solve_dual_chi2(&sys).unwrap();
        let dstar = recover_dstar(&sys, &v).unwrap();
        assert!(dstar.total_variation(&d, &mdp.goal_dist) < 1e-6);
        let pi = extract_policy(&dstar);
        for s in 0..4 {
            for g in 0..2 {
                for a in 0..3 {
                    assert!((pi.prob(s, g, a) - beh.prob(s, g, a)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn logratio_requires_coverage() {
        let mdp = TabularGCMDP::from_parts(
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            vec![0, 1],
            0.9,
        );
        let d = solve_occupancy(&mdp, &TabularPolicy::uniform(2, 2, 1)).unwrap();
        assert!(matches!(build_system(&mdp, &d, RewardChoice::LogRatio), Err(GofarError::Support { .. })));
        let sys = build_system(&mdp, &d, RewardChoice::Discriminator).unwrap();
        assert!((sys.reward[1][1] - LOGIT_CLAMP).abs() < 1e-9);
    }

    #[test]
    fn logit_values() {
        assert_eq!(logit_clamped(0.5), 0.0);
        assert!((logit_clamped(0.731) - 1.0).abs() < 2e-3);
        assert!((logit_clamped(1.0) - LOGIT_CLAMP).abs() < 1e-9);
    }
}
