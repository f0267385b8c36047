//! Planner networks on a continuous goal space.

use serde::{Deserialize, Serialize};

use crate::error::{GofarError, Result};
use crate::neural::data::{goal_reached, VecDataset, VecTrajectory};
use crate::neural::train::{train_neural, GaussianPolicy, NeuralAlgo, TrainConfig};
use crate::neural::mlp::Mlp;

/// Goal-space copy of `data`: observations become achieved goals and the
/// regression target is the displacement to the next achieved goal.
/// Logged actions are never read.
pub fn goal_space_dataset(data: &VecDataset) -> VecDataset {
    let trajectories = data
        .trajectories
        .iter()
        .map(|t| VecTrajectory {
            obs: t.achieved.clone(),
            achieved: t.achieved.clone(),
            actions: t.achieved.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect()).collect(),
            goal: t.goal.clone(),
            seed: t.seed,
        })
        .collect();
    VecDataset {
        trajectories,
        success_tol: data.success_tol,
        env_fingerprint: data.env_fingerprint.clone(),
        behavior_descriptor: format!("goal-space({})", data.behavior_descriptor),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralPlanner {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub success_tol: f64,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralPlan {
    pub subgoals: Vec<Vec<f64>>,
    pub complete: bool,
}

/// GoFAR on the goal-space copy; `max_displacement` bounds one subgoal step.
pub fn train_neural_planner(data: &VecDataset, cfg: &TrainConfig, max_displacement: f64) -> Result<NeuralPlanner> {
    let goal_data = goal_space_dataset(data);
    let run = train_neural(NeuralAlgo::Gofar, &goal_data, cfg, max_displacement)?;
    let value = run.value.ok_or_else(|| GofarError::Assumption("GoFAR run without a value network".into()))?;
    Ok(NeuralPlanner { policy: run.policy, value, success_tol: data.success_tol, domain: data.env_fingerprint.clone() })
}

impl NeuralPlanner {
    pub fn next_subgoal(&self, z: &[f64], goal: &[f64]) -> Result<Vec<f64>> {
        let step = self.policy.act(z, goal)?;
        Ok(z.iter().zip(&step).map(|(a, d)| a + d).collect())
    }

    /// Mean rollout until within tolerance of `goal`; a subgoal that moves less
    /// than `min_progress` ends the plan with an error.
    pub fn plan(&self, start: &[f64], goal: &[f64], max_steps: usize, min_progress: f64) -> Result<NeuralPlan> {
        let mut subgoals = Vec::new();
        let mut cur = start.to_vec();
        while !goal_reached(&cur, goal, self.success_tol) && subgoals.len() < max_steps {
            let next = self.next_subgoal(&cur, goal)?;
            let moved: f64 = next.iter().zip(&cur).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if moved < min_progress {
                return Err(GofarError::NoProgress { step: subgoals.len() });
            }
            subgoals.push(next.clone());
            cur = next;
        }
        Ok(NeuralPlan { subgoals, complete: goal_reached(&cur, goal, self.success_tol) })
    }
}
