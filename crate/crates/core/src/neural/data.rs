//! Vector-valued offline trajectories and the minibatch sampler the
//! networks train on.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_jsonl, write_jsonl, Header, OfflineDataset, RelabelSpec, RelabelStrategy, FORMAT_VERSION};
use crate::error::{GofarError, Result};
use crate::mdp::{Rng, TabularGCMDP};

/// `obs` and `achieved` hold `H + 1` entries, `actions` hold `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecTrajectory {
    pub obs: Vec<Vec<f64>>,
    pub achieved: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub goal: Vec<f64>,
    pub seed: u64,
}

impl VecTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VecDataset {
    pub trajectories: Vec<VecTrajectory>,
    /// Reward is 1 iff `‖achieved − goal‖₂ ≤ success_tol`.
    pub success_tol: f64,
    pub env_fingerprint: String,
    pub behavior_descriptor: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    success_tol: f64,
}

pub fn goal_reached(achieved: &[f64], goal: &[f64], tol: f64) -> bool {
    let d2: f64 = achieved.iter().zip(goal).map(|(a, g)| (a - g).powi(2)).sum();
    d2.sqrt() <= tol
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

impl VecDataset {
    pub fn reward(&self, achieved: &[f64], goal: &[f64]) -> f64 {
        if goal_reached(achieved, goal, self.success_tol) {
            1.0
        } else {
            0.0
        }
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.horizon()).sum()
    }

    /// `(obs, goal, action)` widths.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let t = self.trajectories.first().ok_or_else(|| GofarError::Config("empty dataset".into()))?;
        let act = t.actions.first().map_or(0, |a| a.len());
        Ok((t.obs[0].len(), t.goal.len(), act))
    }

    /// One-hot embedding of a tabular dataset: states, goals and actions
    /// become indicator vectors, achieved goals are `onehot(φ(s))`.
    pub fn from_tabular(mdp: &TabularGCMDP, data: &OfflineDataset) -> Self {
        let trajectories = data
            .trajectories
            .iter()
            .map(|traj| {
                let states = traj.states();
                VecTrajectory {
                    obs: states.iter().map(|&s| one_hot(s, mdp.n_states)).collect(),
                    achieved: states.iter().map(|&s| one_hot(mdp.phi[s], mdp.n_goals)).collect(),
                    actions: traj.transitions.iter().map(|t| one_hot(t.a, mdp.n_actions)).collect(),
                    goal: one_hot(traj.commanded_goal, mdp.n_goals),
                    seed: traj.seed,
                }
            })
            .collect();
        Self {
            trajectories,
            success_tol: 0.5,
            env_fingerprint: data.mdp_fingerprint.clone(),
            behavior_descriptor: data.behavior_descriptor.clone(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            version: FORMAT_VERSION,
            fingerprint: self.env_fingerprint.clone(),
            behavior: serde_json::to_string(&(&self.behavior_descriptor, Meta { success_tol: self.success_tol }))?,
        };
        write_jsonl(&header, &self.trajectories)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let (header, trajectories): (Header, Vec<VecTrajectory>) = read_jsonl(text)?;
        let (behavior_descriptor, meta): (String, Meta) = serde_json::from_str(&header.behavior)?;
        let data = Self {
            trajectories,
            success_tol: meta.success_tol,
            env_fingerprint: header.fingerprint,
            behavior_descriptor,
        };
        data.check_shapes()?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn stats(&self) -> Result<InputStats> {
        let (d_obs, d_goal, d_act) = self.dims()?;
        let ts = &self.trajectories;
        Ok(InputStats {
            obs: Moments::of(ts.iter().flat_map(|t| &t.obs), d_obs),
            goal: Moments::of(ts.iter().flat_map(|t| t.achieved.iter().chain(std::iter::once(&t.goal))), d_goal),
            action: Moments::of(ts.iter().flat_map(|t| &t.actions), d_act),
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (d_obs, d_goal, d_act) = self.dims()?;
        for (i, t) in self.trajectories.iter().enumerate() {
            let h = t.horizon();
            let ok = t.obs.len() == h + 1
                && t.achieved.len() == h + 1
                && t.goal.len() == d_goal
                && t.obs.iter().all(|o| o.len() == d_obs)
                && t.achieved.iter().all(|g| g.len() == d_goal)
                && t.actions.iter().all(|a| a.len() == d_act);
            if !ok {
                return Err(GofarError::Shape(format!("trajectory {i} has inconsistent lengths")));
            }
        }
        Ok(())
    }
}

/// Per-coordinate mean and deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    fn of<'v>(rows: impl Iterator<Item = &'v Vec<f64>>, width: usize) -> Self {
        let (mut sum, mut sq, mut n) = (vec![0.0; width], vec![0.0; width], 0.0);
        for r in rows {
            for j in 0..width {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
            n += 1.0;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
        Self { mean, std }
    }

    pub fn concat(parts: &[&Moments]) -> Self {
        Self {
            mean: parts.iter().flat_map(|m| m.mean.iter().copied()).collect(),
            std: parts.iter().flat_map(|m| m.std.iter().copied()).collect(),
        }
    }
}

/// Input standardisation statistics; goals pool commanded and achieved goals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub obs: Moments,
    pub goal: Moments,
    pub action: Moments,
}

/// Rows of a training batch. Transition terms and initial-state terms carry
/// their own weights, so a sampled batch uses `1/B` and an aggregated full
/// batch uses empirical frequencies.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub achieved: Array2<f64>,
    pub action: Array2<f64>,
    pub next_obs: Array2<f64>,
    pub goal: Array2<f64>,
    /// `r(s_t; g)`
    pub reward: Vec<f64>,
    pub weight: Vec<f64>,
    /// Steps between `s_t` and the state whose goal was hindsight-assigned.
    pub goal_gap: Vec<Option<usize>>,
    pub init_obs: Array2<f64>,
    pub init_goal: Array2<f64>,
    pub init_weight: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

fn rows(v: &[&[f64]]) -> Array2<f64> {
    let width = v.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((v.len(), width), |(i, j)| v[i][j])
}

struct Row<'a> {
    obs: &'a [f64],
    achieved: &'a [f64],
    action: &'a [f64],
    next_obs: &'a [f64],
    goal: &'a [f64],
    init_obs: &'a [f64],
    reward: f64,
    goal_gap: Option<usize>,
}

fn assemble(rows_in: &[Row], weight: Vec<f64>, init_weight: Vec<f64>) -> Batch {
    fn col<'r>(rows_in: &'r [Row], f: fn(&'r Row) -> &'r [f64]) -> Array2<f64> {
        rows(&rows_in.iter().map(f).collect::<Vec<_>>())
    }
    Batch {
        obs: col(rows_in, |r| r.obs),
        achieved: col(rows_in, |r| r.achieved),
        action: col(rows_in, |r| r.action),
        next_obs: col(rows_in, |r| r.next_obs),
        goal: col(rows_in, |r| r.goal),
        reward: rows_in.iter().map(|r| r.reward).collect(),
        weight,
        goal_gap: rows_in.iter().map(|r| r.goal_gap).collect(),
        init_obs: col(rows_in, |r| r.init_obs),
        init_goal: col(rows_in, |r| r.goal),
        init_weight,
    }
}

/// Uniform transition sampler with optional hindsight relabeling. Every
/// relabeled row it hands out is counted.
pub struct BatchSource<'a> {
    data: &'a VecDataset,
    spec: RelabelSpec,
    index: Vec<(usize, usize)>,
    relabeled_served: usize,
}

impl<'a> BatchSource<'a> {
    pub fn new(data: &'a VecDataset, spec: RelabelSpec) -> Result<Self> {
        spec.validate()?;
        let index: Vec<(usize, usize)> = data
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.horizon()).map(move |k| (i, k)))
            .collect();
        if index.is_empty() {
            return Err(GofarError::Config("dataset has no transitions".into()));
        }
        Ok(Self { data, spec, index, relabeled_served: 0 })
    }

    pub fn relabeled_served(&self) -> usize {
        self.relabeled_served
    }

    pub fn data(&self) -> &VecDataset {
        self.data
    }

    fn row(&self, i: usize, t: usize, relabel_at: Option<usize>) -> Row<'a> {
        let traj = &self.data.trajectories[i];
        let goal: &[f64] = match relabel_at {
            Some(k) => &traj.achieved[k],
            None => &traj.goal,
        };
        Row {
            obs: &traj.obs[t],
            achieved: &traj.achieved[t],
            action: &traj.actions[t],
            next_obs: &traj.obs[t + 1],
            goal,
            init_obs: &traj.obs[0],
            reward: self.data.reward(&traj.achieved[t], goal),
            goal_gap: relabel_at.map(|k| k - t),
        }
    }

    pub fn sample(&mut self, batch: usize, rng: &mut Rng) -> Batch {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (i, t) = self.index[rng.random_range(0..self.index.len())];
            let relabel = self.spec.strategy == RelabelStrategy::FutureUniform && rng.random::<f64>() < self.spec.her_ratio;
            let at = if relabel {
                self.relabeled_served += 1;
                Some(rng.random_range(t + 1..=self.data.trajectories[i].horizon()))
            } else {
                None
            };
            out.push(self.row(i, t, at));
        }
        let w = vec![1.0 / batch as f64; batch];
        assemble(&out, w.clone(), w)
    }

    /// Every commanded-goal transition once, duplicates merged into weights
    /// equal to their empirical frequency; initial-state pairs are merged on
    /// their own. Only sensible for discrete data.
    pub fn full_batch(&self) -> Batch {
        let bits = |vs: &[&[f64]]| vs.iter().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        let mut merged: BTreeMap<Vec<Vec<u64>>, (Row, f64)> = BTreeMap::new();
        let mut starts: BTreeMap<Vec<Vec<u64>>, (Row, f64)> = BTreeMap::new();
        let n = self.index.len() as f64;
        for &(i, t) in &self.index {
            let r = self.row(i, t, None);
            starts.entry(bits(&[r.init_obs, r.goal])).or_insert((self.row(i, t, None), 0.0)).1 += 1.0 / n;
            merged.entry(bits(&[r.obs, r.action, r.next_obs, r.goal])).or_insert((r, 0.0)).1 += 1.0 / n;
        }
        let (rows_out, w): (Vec<Row>, Vec<f64>) = merged.into_values().unzip();
        let (init_rows, iw): (Vec<Row>, Vec<f64>) = starts.into_values().unzip();
        let mut batch = assemble(&rows_out, w, vec![]);
        let init = assemble(&init_rows, vec![], iw);
        batch.init_obs = init.init_obs;
        batch.init_goal = init.init_goal;
        batch.init_weight = init.init_weight;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, Behavior};
    use crate::mdp::{rng_from_seed, Gridworld, GridworldSpec};

    fn grid_data() -> (Gridworld, VecDataset) {
        let world = Gridworld::new(GridworldSpec::open(3, 3)).unwrap();
        let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), 20, 8, 4).unwrap();
        let vd = VecDataset::from_tabular(&world.mdp, &data);
        (world, vd)
    }

    #[test]
    fn one_hot_rewards_match_tabular() {
        let world = Gridworld::new(GridworldSpec::open(3, 3)).unwrap();
        let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), 20, 8, 4).unwrap();
        let vd = VecDataset::from_tabular(&world.mdp, &data);
        for (vt, t) in vd.trajectories.iter().zip(&data.trajectories) {
            for (k, tr) in t.transitions.iter().enumerate() {
                assert_eq!(vd.reward(&vt.achieved[k], &vt.goal), tr.r);
            }
        }
    }

    #[test]
    fn no_relabeling_serves_zero_relabeled_rows() {
        let (_, vd) = grid_data();
        let mut src = BatchSource::new(&vd, RelabelSpec::NONE).unwrap();
        let mut rng = rng_from_seed(0);
        for _ in 0..20 {
            let b = src.sample(32, &mut rng);
            assert!(b.goal_gap.iter().all(Option::is_none));
        }
        assert_eq!(src.relabeled_served(), 0);
    }

    #[test]
    fn full_relabeling_uses_future_achieved_goals() {
        let (_, vd) = grid_data();
        let mut src = BatchSource::new(&vd, RelabelSpec::her(1.0).unwrap()).unwrap();
        let b = src.sample(64, &mut rng_from_seed(1));
        assert_eq!(src.relabeled_served(), 64);
        assert!(b.goal_gap.iter().all(|g| g.is_some_and(|k| k >= 1)));
    }

    #[test]
    fn full_batch_weights_sum_to_one() {
        let (_, vd) = grid_data();
        let src = BatchSource::new(&vd, RelabelSpec::NONE).unwrap();
        let b = src.full_batch();
        assert!((b.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(b.len() < vd.n_transitions());
    }

    #[test]
    fn jsonl_round_trip() {
        let (_, vd) = grid_data();
        let back = VecDataset::from_jsonl(&vd.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, vd);
    }
}
