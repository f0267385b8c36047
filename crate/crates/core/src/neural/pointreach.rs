//! Point mass in the unit square that must reach a goal position.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GofarError, Result};
use crate::harness::GoalEnv;
use crate::mdp::{derive_seed, rng_from_seed, Rng};

use super::data::{goal_reached, VecDataset, VecTrajectory};

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointReachEnv {
    /// Largest displacement per step.
    pub max_step: f64,
    pub success_tol: f64,
    /// Deviation of Gaussian noise added to every displacement.
    pub noise_sigma: f64,
    pub gamma: f64,
}

impl Default for PointReachEnv {
    fn default() -> Self {
        Self { max_step: 0.05, success_tol: 0.05, noise_sigma: 0.0, gamma: 0.98 }
    }
}

fn clip_norm(a: Point, r: f64) -> Point {
    let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if n > r {
        [a[0] * r / n, a[1] * r / n]
    } else {
        a
    }
}

impl PointReachEnv {
    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_step > 0.0
            && self.success_tol > 0.0
            && self.noise_sigma >= 0.0
            && self.gamma > 0.0
            && self.gamma < 1.0;
        if ok {
            Ok(())
        } else {
            Err(GofarError::InvalidSpec(format!("bad point-reach parameters {self:?}")))
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(&Sha256::digest(json.as_bytes())[..16])
    }

    /// Heads straight for the goal at full speed and stops on it.
    pub fn expert_action(&self, s: &Point, g: &Point) -> Point {
        clip_norm([g[0] - s[0], g[1] - s[1]], self.max_step)
    }

    /// Uniform over the disc of radius `max_step`.
    pub fn random_action(&self, rng: &mut Rng) -> Point {
        let r = self.max_step * rng.random::<f64>().sqrt();
        let th = rng.random::<f64>() * std::f64::consts::TAU;
        [r * th.cos(), r * th.sin()]
    }

    /// Collects `n_traj` trajectories of `horizon` steps; each is driven by the
    /// expert with probability `expert_frac`, otherwise by uniform actions.
    pub fn collect(&self, n_traj: usize, horizon: usize, expert_frac: f64, seed: u64) -> Result<VecDataset> {
        self.validate()?;
        if !(0.0..=1.0).contains(&expert_frac) {
            return Err(GofarError::Config(format!("expert fraction {expert_frac} outside [0, 1]")));
        }
        let mut trajectories = Vec::with_capacity(n_traj);
        for i in 0..n_traj {
            let tseed = derive_seed(seed, &[i as u64]);
            let mut rng = rng_from_seed(tseed);
            let (mut s, g) = self.reset(&mut rng);
            let expert = rng.random::<f64>() < expert_frac;
            let mut obs = vec![s.to_vec()];
            let mut actions = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let a = if expert { self.expert_action(&s, &g) } else { self.random_action(&mut rng) };
                s = self.step(&s, &a, &mut rng)?;
                actions.push(a.to_vec());
                obs.push(s.to_vec());
            }
            trajectories.push(VecTrajectory { achieved: obs.clone(), obs, actions, goal: g.to_vec(), seed: tseed });
        }
        Ok(VecDataset {
            trajectories,
            success_tol: self.success_tol,
            env_fingerprint: self.fingerprint(),
            behavior_descriptor: format!("mixture({:.2}*random,{:.2}*expert)", 1.0 - expert_frac, expert_frac),
        })
    }
}

impl GoalEnv for PointReachEnv {
    type State = Point;
    type Goal = Point;
    type Action = Point;

    fn reset(&self, rng: &mut Rng) -> (Point, Point) {
        let s = [rng.random(), rng.random()];
        let g = [rng.random(), rng.random()];
        (s, g)
    }

    fn step(&self, s: &Point, a: &Point, rng: &mut Rng) -> Result<Point> {
        if !(a[0].is_finite() && a[1].is_finite()) {
            return Err(GofarError::InvalidSpec(format!("non-finite action {a:?}")));
        }
        let a = clip_norm(*a, self.max_step);
        let mut next = [s[0] + a[0], s[1] + a[1]];
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("nonnegative deviation");
            next[0] += n.sample(rng);
            next[1] += n.sample(rng);
        }
        Ok([next[0].clamp(0.0, 1.0), next[1].clamp(0.0, 1.0)])
    }

    fn reward(&self, s: &Point, g: &Point) -> f64 {
        if goal_reached(s, g, self.success_tol) {
            1.0
        } else {
            0.0
        }
    }

    fn distance(&self, s: &Point, g: &Point) -> f64 {
        ((s[0] - g[0]).powi(2) + (s[1] - g[1]).powi(2)).sqrt()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{evaluate, RunLabels};

    #[test]
    fn steps_are_clipped_to_radius_and_box() {
        let env = PointReachEnv::default();
        let mut rng = rng_from_seed(0);
        let s = env.step(&[0.5, 0.5], &[1.0, 0.0], &mut rng).unwrap();
        assert!((s[0] - 0.55).abs() < 1e-12 && s[1] == 0.5);
        let s = env.step(&[0.99, 0.0], &[0.05, -0.05], &mut rng).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn expert_always_succeeds_without_noise() {
        let env = PointReachEnv::default();
        let labels = RunLabels { algo: "expert".into(), env: "pointreach".into(), her_ratio: 0.0, noise: 0.0 };
        let recs = evaluate(&env, |s: &Point, g: &Point| env.expert_action(s, g), 50, 50, 3, &labels).unwrap();
        assert!(recs.iter().all(|r| r.success));
    }

    #[test]
    fn mixture_collection_is_reproducible() {
        let env = PointReachEnv::default();
        let a = env.collect(30, 10, 0.1, 5).unwrap();
        let b = env.collect(30, 10, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_transitions(), 300);
        assert_eq!(VecDataset::from_jsonl(&a.to_jsonl().unwrap()).unwrap(), a);
    }

    #[test]
    fn random_actions_stay_in_disc() {
        let env = PointReachEnv::default();
        let mut rng = rng_from_seed(2);
        for _ in 0..1000 {
            let a = env.random_action(&mut rng);
            assert!(a[0].hypot(a[1]) <= env.max_step + 1e-15);
        }
    }
}
