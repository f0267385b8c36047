//! Offline trajectories: collection, discounted empirical occupancy,
//! hindsight relabeling and JSON-lines persistence.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GofarError, Result};
use crate::mdp::{derive_seed, rng_from_seed, sample_categorical, Rng, TabularGCMDP, TabularPolicy};
use crate::occupancy::OccupancyTensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    /// commanded goal
    pub g: usize,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub commanded_goal: usize,
    pub seed: u64,
}

impl Trajectory {
    /// `s_0, ..., s_T`
    pub fn states(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.transitions.iter().map(|tr| tr.s).collect();
        if let Some(last) = self.transitions.last() {
            out.push(last.s_next);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub trajectories: Vec<Trajectory>,
    pub mdp_fingerprint: String,
    pub behavior_descriptor: String,
}

/// A behaviour policy, possibly a per-trajectory mixture of components.
#[derive(Clone, Debug)]
pub struct Behavior {
    pub components: Vec<(f64, TabularPolicy)>,
    pub descriptor: String,
}

impl Behavior {
    pub fn single(policy: TabularPolicy, name: &str) -> Self {
        Self { components: vec![(1.0, policy)], descriptor: name.to_string() }
    }

    pub fn uniform(mdp: &TabularGCMDP) -> Self {
        Self::single(TabularPolicy::uniform(mdp.n_states, mdp.n_goals, mdp.n_actions), "random")
    }

    /// Each trajectory follows `expert` with probability `expert_frac`, else uniform random.
    pub fn mixture(mdp: &TabularGCMDP, expert: TabularPolicy, expert_frac: f64) -> Self {
        let random = TabularPolicy::uniform(mdp.n_states, mdp.n_goals, mdp.n_actions);
        Self {
            components: vec![(1.0 - expert_frac, random), (expert_frac, expert)],
            descriptor: format!("mixture({:.2}*random,{:.2}*expert)", 1.0 - expert_frac, expert_frac),
        }
    }
}

/// Rolls out `n_traj` trajectories of length `horizon`; trajectory `i` uses seed `derive_seed(seed, [i])`.
pub fn collect(
    mdp: &TabularGCMDP,
    behavior: &Behavior,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if horizon == 0 {
        return Err(GofarError::InvalidSpec("horizon must be at least 1".into()));
    }
    mdp.ensure_valid()?;
    let weights: Vec<f64> = behavior.components.iter().map(|c| c.0).collect();
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let traj_seed = derive_seed(seed, &[i as u64]);
        let mut rng = rng_from_seed(traj_seed);
        let policy = &behavior.components[sample_categorical(&weights, &mut rng)].1;
        let g = mdp.sample_goal(&mut rng);
        let mut s = mdp.sample_start(&mut rng);
        let mut transitions = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let a = policy.sample(s, g, &mut rng);
            let s_next = mdp.step(s, a, &mut rng)?;
            transitions.push(Transition { s, a, r: mdp.reward[s][g], s_next, g, t });
            s = s_next;
        }
        trajectories.push(Trajectory { transitions, commanded_goal: g, seed: traj_seed });
    }
    Ok(OfflineDataset {
        trajectories,
        mdp_fingerprint: mdp.fingerprint(),
        behavior_descriptor: behavior.descriptor.clone(),
    })
}

/// Discounted visitation estimate together with its coverage report.
#[derive(Clone, Debug)]
pub struct EmpiricalOccupancy {
    /// renormalised per goal; unvisited bins are zero
    pub d: OccupancyTensor,
    /// per-goal mass before renormalisation
    pub raw_mass: Vec<f64>,
    /// goals no trajectory was commanded towards
    pub missing_goals: Vec<usize>,
}

/// Each step at time `t` adds `(1-γ) γ^t` to bin `(s, a, commanded goal)`,
/// averaged over the trajectories commanded to that goal.
pub fn empirical_occupancy(dataset: &OfflineDataset, mdp: &TabularGCMDP) -> Result<EmpiricalOccupancy> {
    if dataset.trajectories.is_empty() {
        return Err(GofarError::InvalidSpec("empty dataset".into()));
    }
    let mut d = OccupancyTensor::zeros(mdp.n_states, mdp.n_actions, mdp.n_goals);
    let mut counts = vec![0usize; mdp.n_goals];
    for traj in &dataset.trajectories {
        counts[traj.commanded_goal] += 1;
        let mut w = 1.0 - mdp.gamma;
        for tr in &traj.transitions {
            d.add(tr.s, tr.a, tr.g, w);
            w *= mdp.gamma;
        }
    }
    let mut raw_mass = vec![0.0; mdp.n_goals];
    for g in 0..mdp.n_goals {
        if counts[g] > 0 {
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let v = d.get(s, a, g) / counts[g] as f64;
                    d.set(s, a, g, v);
                }
            }
            raw_mass[g] = d.goal_mass(g);
        }
    }
    d.normalize_per_goal();
    let missing_goals = (0..mdp.n_goals).filter(|&g| counts[g] == 0).collect();
    Ok(EmpiricalOccupancy { d, raw_mass, missing_goals })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelStrategy {
    None,
    FutureUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelSpec {
    pub strategy: RelabelStrategy,
    pub her_ratio: f64,
}

impl RelabelSpec {
    pub const NONE: Self = Self { strategy: RelabelStrategy::None, her_ratio: 0.0 };

    pub fn her(her_ratio: f64) -> Result<Self> {
        let spec = if her_ratio == 0.0 {
            Self::NONE
        } else {
            Self { strategy: RelabelStrategy::FutureUniform, her_ratio }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.her_ratio)
            && ((self.her_ratio == 0.0) == (self.strategy == RelabelStrategy::None));
        if ok {
            Ok(())
        } else {
            Err(GofarError::Config(format!("inconsistent relabel spec {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub g: usize,
    pub t: usize,
    /// time index of the state whose goal was used (equals `t` when not relabeled)
    pub goal_time: usize,
    pub relabeled: bool,
}

/// Uniform draw of `batch` transitions; a `her_ratio` fraction (Bernoulli per sample)
/// get a goal drawn uniformly from `φ(s_{t+1}), ..., φ(s_T)` of the same trajectory.
pub fn relabel_minibatch(
    dataset: &OfflineDataset,
    mdp: &TabularGCMDP,
    spec: &RelabelSpec,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    let offsets: Vec<usize> = dataset
        .trajectories
        .iter()
        .scan(0, |acc, tr| {
            let start = *acc;
            *acc += tr.transitions.len();
            Some(start)
        })
        .collect();
    let total: usize = dataset.trajectories.iter().map(|t| t.transitions.len()).sum();
    if total == 0 {
        return Err(GofarError::InvalidSpec("dataset has no transitions".into()));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let k = rng.random_range(0..total);
        let i = offsets.partition_point(|&o| o <= k) - 1;
        let traj = &dataset.trajectories[i];
        let tr = traj.transitions[k - offsets[i]];
        let relabel = spec.strategy == RelabelStrategy::FutureUniform && rng.random::<f64>() < spec.her_ratio;
        let sample = if relabel {
            let future = rng.random_range(tr.t + 1..=traj.transitions.len());
            let achieved = traj.transitions[future - 1].s_next;
            let g = mdp.phi[achieved];
            Sample {
                s: tr.s,
                a: tr.a,
                r: mdp.reward[tr.s][g],
                s_next: tr.s_next,
                g,
                t: tr.t,
                goal_time: future,
                relabeled: true,
            }
        } else {
            Sample {
                s: tr.s,
                a: tr.a,
                r: tr.r,
                s_next: tr.s_next,
                g: tr.g,
                t: tr.t,
                goal_time: tr.t,
                relabeled: false,
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// First line of every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u64,
    pub fingerprint: String,
    pub behavior: String,
}

/// Header line followed by one JSON record per line, each newline-terminated.
pub fn write_jsonl<R: Serialize>(header: &Header, records: &[R]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`write_jsonl`]; parse errors carry the byte offset into `text`.
pub fn read_jsonl<R: DeserializeOwned>(text: &str) -> Result<(Header, Vec<R>)> {
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(GofarError::Parse { offset: text.len(), message: "truncated record (missing final newline)".into() });
    }
    let mut offset = 0;
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    for raw in text.split_inclusive('\n') {
        let line = raw.trim_end_matches('\n');
        let parse_err =
            |e: serde_json::Error| GofarError::Parse { offset: offset + e.column().saturating_sub(1), message: e.to_string() };
        match &header {
            None => {
                let h: Header = serde_json::from_str(line).map_err(parse_err)?;
                if h.version != FORMAT_VERSION {
                    return Err(GofarError::Version { found: h.version, expected: FORMAT_VERSION });
                }
                header = Some(h);
            }
            Some(_) => records.push(serde_json::from_str(line).map_err(parse_err)?),
        }
        offset += raw.len();
    }
    let header = header.ok_or(GofarError::Parse { offset: 0, message: "missing header".into() })?;
    Ok((header, records))
}

#[derive(Serialize, Deserialize)]
struct Line {
    g: usize,
    seed: u64,
    steps: Vec<(usize, usize, f64, usize)>,
}

impl OfflineDataset {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            version: FORMAT_VERSION,
            fingerprint: self.mdp_fingerprint.clone(),
            behavior: self.behavior_descriptor.clone(),
        };
        let lines: Vec<Line> = self
            .trajectories
            .iter()
            .map(|traj| Line {
                g: traj.commanded_goal,
                seed: traj.seed,
                steps: traj.transitions.iter().map(|t| (t.s, t.a, t.r, t.s_next)).collect(),
            })
            .collect();
        write_jsonl(&header, &lines)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let (header, lines): (Header, Vec<Line>) = read_jsonl(text)?;
        let trajectories = lines
            .into_iter()
            .map(|l| {
                let transitions = l
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, &(s, a, r, s_next))| Transition { s, a, r, s_next, g: l.g, t })
                    .collect();
                Trajectory { transitions, commanded_goal: l.g, seed: l.seed }
            })
            .collect();
        Ok(Self { trajectories, mdp_fingerprint: header.fingerprint, behavior_descriptor: header.behavior })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    /// Loads a dataset, checking it against `mdp` when one is given.
    pub fn load(path: &Path, mdp: Option<&TabularGCMDP>) -> Result<Self> {
        let data = Self::from_jsonl(&fs::read_to_string(path)?)?;
        if let Some(mdp) = mdp {
            data.check_against(mdp)?;
        }
        Ok(data)
    }

    /// Fingerprint, index ranges, chaining and reward labels.
    pub fn check_against(&self, mdp: &TabularGCMDP) -> Result<()> {
        let expected = mdp.fingerprint();
        if self.mdp_fingerprint != expected {
            return Err(GofarError::Fingerprint { expected, found: self.mdp_fingerprint.clone() });
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.commanded_goal >= mdp.n_goals {
                return Err(GofarError::IndexOutOfRange { what: "goal", index: traj.commanded_goal, len: mdp.n_goals });
            }
            for (t, tr) in traj.transitions.iter().enumerate() {
                for (what, index, len) in [
                    ("state", tr.s, mdp.n_states),
                    ("state", tr.s_next, mdp.n_states),
                    ("action", tr.a, mdp.n_actions),
                ] {
                    if index >= len {
                        return Err(GofarError::IndexOutOfRange { what, index, len });
                    }
                }
                if t > 0 && traj.transitions[t - 1].s_next != tr.s {
                    return Err(GofarError::InvalidSpec(format!("trajectory {i} breaks at step {t}")));
                }
                if tr.r != mdp.reward[tr.s][tr.g] {
                    return Err(GofarError::InvalidSpec(format!("trajectory {i} step {t} has reward {}", tr.r)));
                }
            }
        }
        Ok(())
    }
}
