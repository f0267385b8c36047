//! Seeded policy rollouts and their metrics.

use crate::error::{GofarError, Result};
use crate::mdp::{derive_seed, rng_from_seed, Gridworld, Rng, TabularPolicy};

use super::metrics::{MetricsRecord, RunLabels};

/// A goal-conditioned environment with a sparse binary reward.
pub trait GoalEnv {
    type State: Clone;
    type Goal: Clone;
    type Action;

    fn reset(&self, rng: &mut Rng) -> (Self::State, Self::Goal);
    fn step(&self, s: &Self::State, a: &Self::Action, rng: &mut Rng) -> Result<Self::State>;
    fn reward(&self, s: &Self::State, g: &Self::Goal) -> f64;
    fn distance(&self, s: &Self::State, g: &Self::Goal) -> f64;
    fn gamma(&self) -> f64;
}

impl GoalEnv for Gridworld {
    type State = usize;
    type Goal = usize;
    type Action = usize;

    fn reset(&self, rng: &mut Rng) -> (usize, usize) {
        let g = self.mdp.sample_goal(rng);
        (self.mdp.sample_start(rng), g)
    }

    fn step(&self, s: &usize, a: &usize, rng: &mut Rng) -> Result<usize> {
        self.mdp.step(*s, *a, rng)
    }

    fn reward(&self, s: &usize, g: &usize) -> f64 {
        self.mdp.reward[*s][*g]
    }

    fn distance(&self, s: &usize, g: &usize) -> f64 {
        self.goal_distance(*s, *g)
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma
    }
}

/// One rollout: `states[0..=H]` and the goal.
#[derive(Clone, Debug)]
pub struct Episode<S, G> {
    pub states: Vec<S>,
    pub goal: G,
    pub seed: u64,
}

fn record_from_episode<E: GoalEnv>(
    env: &E,
    ep: &Episode<E::State, E::Goal>,
    labels: &RunLabels,
) -> MetricsRecord {
    let horizon = ep.states.len() - 1;
    let mut ret = 0.0;
    let mut disc = 1.0;
    for s in &ep.states[..horizon] {
        ret += disc * env.reward(s, &ep.goal);
        disc *= env.gamma();
    }
    let last = &ep.states[horizon];
    MetricsRecord {
        discounted_return: ret,
        success: env.reward(last, &ep.goal) > 0.0,
        final_distance: env.distance(last, &ep.goal),
        episode_length: horizon,
        seed: ep.seed,
        algo: labels.algo.clone(),
        env: labels.env.clone(),
        her_ratio: labels.her_ratio,
        noise: labels.noise,
    }
}

/// Rolls out `policy` for `n_episodes` episodes of exactly `horizon` steps.
///
/// Every metric is accumulated while stepping and recomputed from the stored
/// trajectory; any disagreement is an error.
pub fn evaluate<E, P>(
    env: &E,
    mut policy: P,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    labels: &RunLabels,
) -> Result<Vec<MetricsRecord>>
where
    E: GoalEnv,
    P: FnMut(&E::State, &E::Goal) -> E::Action,
{
    let mut out = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let ep_seed = derive_seed(seed, &[i as u64]);
        let mut rng = rng_from_seed(ep_seed);
        let (mut s, g) = env.reset(&mut rng);
        let mut states = vec![s.clone()];
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            ret += disc * env.reward(&s, &g);
            disc *= env.gamma();
            let a = policy(&s, &g);
            s = env.step(&s, &a, &mut rng)?;
            states.push(s.clone());
        }
        let streamed = MetricsRecord {
            discounted_return: ret,
            success: env.reward(&s, &g) > 0.0,
            final_distance: env.distance(&s, &g),
            episode_length: horizon,
            seed: ep_seed,
            algo: labels.algo.clone(),
            env: labels.env.clone(),
            her_ratio: labels.her_ratio,
            noise: labels.noise,
        };
        let replayed = record_from_episode(env, &Episode { states, goal: g, seed: ep_seed }, labels);
        if streamed != replayed {
            return Err(GofarError::Assumption(format!(
                "streamed metrics {streamed:?} disagree with replay {replayed:?}"
            )));
        }
        out.push(streamed);
    }
    Ok(out)
}

/// Greedy (mode) evaluation of a tabular policy on a gridworld.
pub fn evaluate_tabular(
    world: &Gridworld,
    policy: &TabularPolicy,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    labels: &RunLabels,
) -> Result<Vec<MetricsRecord>> {
    evaluate(world, |s: &usize, g: &usize| policy.greedy(*s, *g), n_episodes, horizon, seed, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::GridworldSpec;

    fn labels() -> RunLabels {
        RunLabels { algo: "test".into(), env: "grid".into(), her_ratio: 0.0, noise: 0.0 }
    }

    #[test]
    fn sitting_on_goal_earns_geometric_sum() {
        let world = Gridworld::new(GridworldSpec::open(1, 1)).unwrap();
        let pi = TabularPolicy::uniform(1, 1, 5);
        let recs = evaluate_tabular(&world, &pi, 3, 50, 0, &labels()).unwrap();
        let expected = (1.0 - 0.98f64.powi(50)) / (1.0 - 0.98);
        for r in &recs {
            assert!((r.discounted_return - expected).abs() < 1e-9);
            assert!(r.success);
            assert_eq!(r.final_distance, 0.0);
        }
        assert!((expected - 31.79).abs() < 0.01);
    }

    #[test]
    fn never_reaching_goal_scores_zero() {
        let mut spec = GridworldSpec::open(3, 1);
        spec.start_cells = vec![(0, 0)];
        spec.goal_cells = vec![(2, 0)];
        let world = Gridworld::new(spec).unwrap();
        // always "left" into the boundary
        let recs = evaluate(&world, |_: &usize, _: &usize| 2, 4, 50, 1, &labels()).unwrap();
        for r in recs {
            assert_eq!(r.discounted_return, 0.0);
            assert!(!r.success);
            assert_eq!(r.final_distance, 2.0);
        }
    }

    #[test]
    fn seeded_records_repeat() {
        let world = Gridworld::new(GridworldSpec::open(3, 3).with_slip(0.3)).unwrap();
        let pi = world.shortest_path_policy();
        let a = evaluate_tabular(&world, &pi, 10, 20, 9, &labels()).unwrap();
        let b = evaluate_tabular(&world, &pi, 10, 20, 9, &labels()).unwrap();
        assert_eq!(a, b);
    }
}
