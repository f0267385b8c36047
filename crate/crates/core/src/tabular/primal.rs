//! Brute-force solver for the primal occupancy problem
//! `max_d E_d[R] - D_χ²(d ‖ d^O)` subject to the Bellman flow constraint.
//!
//! With `y = d / √d^O` the objective is `-½‖y - √d^O (1 + R)‖²` up to a
//! constant, so the optimum is the Euclidean projection of that point onto
//! `{y ≥ 0} ∩ {A y = b}`. The projection is computed by Dykstra's
//! alternating scheme.

use nalgebra::{DMatrix, DVector};

use crate::error::{GofarError, Result};
use crate::mdp::TabularGCMDP;
use crate::occupancy::OccupancyTensor;

use super::system::{build_system, RewardChoice};

pub const MAX_ITERS: usize = 10_000;
pub const FLOW_TOL: f64 = 1e-6;

pub fn primal_oracle(
    mdp: &TabularGCMDP,
    d_offline: &OccupancyTensor,
    reward_choice: RewardChoice,
) -> Result<(OccupancyTensor, f64)> {
    let sys = build_system(mdp, d_offline, reward_choice)?;
    let (n_s, n_a) = (mdp.n_states, mdp.n_actions);
    let gamma = mdp.gamma;
    let mut d_opt = OccupancyTensor::zeros(n_s, n_a, mdp.n_goals);
    let mut objective = 0.0;
    for g in 0..mdp.n_goals {
        let vars: Vec<(usize, usize)> = (0..n_s)
            .flat_map(|s| (0..n_a).map(move |a| (s, a)))
            .filter(|&(s, a)| d_offline.get(s, a, g) > 0.0)
            .collect();
        if vars.is_empty() {
            continue;
        }
        let n = vars.len();
        let sqrt_o: Vec<f64> = vars.iter().map(|&(s, a)| d_offline.get(s, a, g).sqrt()).collect();
        let mut amat = DMatrix::<f64>::zeros(n_s, n);
        for (i, &(s, a)) in vars.iter().enumerate() {
            amat[(s, i)] += sqrt_o[i];
            for (next, &p) in mdp.transition[s][a].iter().enumerate() {
                amat[(next, i)] -= gamma * p * sqrt_o[i];
            }
        }
        let b = DVector::from_iterator(n_s, mdp.mu0.iter().map(|&m| (1.0 - gamma) * m));
        let gram_pinv = (&amat * amat.transpose())
            .pseudo_inverse(1e-12)
            .map_err(|e| GofarError::Singular(e.to_string()))?;
        let correction = amat.transpose() * gram_pinv;
        let project_affine = |z: &DVector<f64>| -> DVector<f64> { z - &correction * (&amat * z - &b) };

        let c = DVector::from_iterator(
            n,
            vars.iter().zip(&sqrt_o).map(|(&(s, _), &r)| r * (1.0 + sys.reward[s][g])),
        );
        let mut x = c.clone();
        let mut p = DVector::<f64>::zeros(n);
        let mut q = DVector::<f64>::zeros(n);
        for _ in 0..MAX_ITERS {
            let y = project_affine(&(&x + &p));
            p = &x + &p - &y;
            let x_new = (&y + &q).map(|v| v.max(0.0));
            q = &y + &q - &x_new;
            let change = (&x_new - &x).amax();
            x = x_new;
            if change < 1e-14 {
                break;
            }
        }
        let residual = (&amat * &x - &b).amax();
        if residual > FLOW_TOL {
            return Err(GofarError::NonConvergence { residual });
        }
        let mut block = 0.0;
        for (i, &(s, a)) in vars.iter().enumerate() {
            let o = sqrt_o[i] * sqrt_o[i];
            let d = x[i] * sqrt_o[i];
            d_opt.set(s, a, g, d);
            block += d * sys.reward[s][g] - 0.5 * (d - o).powi(2) / o;
        }
        objective += mdp.goal_dist[g] * block;
    }
    Ok((d_opt, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TabularPolicy;
    use crate::occupancy::solve_occupancy;

    #[test]
    fn single_state_is_offline_occupancy() {
        let mdp = TabularGCMDP::from_parts(vec![vec![vec![1.0]]], vec![1.0], vec![1.0], vec![0], 0.9);
        let d = solve_occupancy(&mdp, &TabularPolicy::uniform(1, 1, 1)).unwrap();
        let (opt, obj) = primal_oracle(&mdp, &d, RewardChoice::Binary).unwrap();
        assert!((opt.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((obj - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_dual_matches_primal_under_clamping() {
        use crate::mdp::{random_mdp, rng_from_seed};
        use crate::tabular::system::{clamped_rows, recover_dstar, solve_dual_chi2, solve_dual_chi2_exact};
        let mut rng = rng_from_seed(11);
        let mut clamped = 0;
        for _ in 0..10 {
            let mdp = random_mdp(4, 3, 2, 0.8, &mut rng);
            let pi = TabularPolicy::random(4, 2, 3, &mut rng);
            let d = solve_occupancy(&mdp, &pi).unwrap();
            let sys = build_system(&mdp, &d, RewardChoice::Discriminator).unwrap();
            if clamped_rows(&sys, &solve_dual_chi2(&sys).unwrap()) > 0 {
                clamped += 1;
            }
            let dual = recover_dstar(&sys, &solve_dual_chi2_exact(&sys).unwrap()).unwrap();
            let (primal, _) = primal_oracle(&mdp, &d, RewardChoice::Discriminator).unwrap();
            assert!(dual.total_variation(&primal, &mdp.goal_dist) < 1e-4);
        }
        assert!(clamped > 0);
    }
}
