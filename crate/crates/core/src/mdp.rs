//! Finite goal-conditioned MDPs and the gridworlds built on top of them.
//!
//! States, actions and goals are dense indices. The goal projection `phi`
//! maps every state to exactly one goal, and rewards follow the sparse
//! convention `r[s][g] = 1` iff `phi[s] == g`.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GofarError, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finaliser.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a path of indices into a child seed: `h = splitmix64(h ^ part)` for each part.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(root), |h, &p| splitmix64(h ^ p))
}

const SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularGCMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_goals: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    pub mu0: Vec<f64>,
    pub goal_dist: Vec<f64>,
    pub phi: Vec<usize>,
    /// `reward[s][g]`
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
}

/// A single failed invariant reported by [`TabularGCMDP::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape(String),
    TransitionRowSum { s: usize, a: usize, residual: f64 },
    NegativeTransition { s: usize, a: usize, next: usize, value: f64 },
    Mu0Sum { residual: f64 },
    NegativeMu0 { s: usize, value: f64 },
    GoalDistSum { residual: f64 },
    NegativeGoalDist { g: usize, value: f64 },
    PhiOutOfRange { s: usize, g: usize },
    Reward { s: usize, g: usize, value: f64, expected: f64 },
    Gamma { value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::TransitionRowSum { s, a, residual } => {
                write!(f, "T[{s}][{a}] sums to 1 - ({residual:e})")
            }
            Violation::NegativeTransition { s, a, next, value } => {
                write!(f, "T[{s}][{a}][{next}] = {value} < 0")
            }
            Violation::Mu0Sum { residual } => write!(f, "mu0 sums to 1 - ({residual:e})"),
            Violation::NegativeMu0 { s, value } => write!(f, "mu0[{s}] = {value} < 0"),
            Violation::GoalDistSum { residual } => {
                write!(f, "goal_dist sums to 1 - ({residual:e})")
            }
            Violation::NegativeGoalDist { g, value } => write!(f, "goal_dist[{g}] = {value} < 0"),
            Violation::PhiOutOfRange { s, g } => write!(f, "phi[{s}] = {g} is not a goal index"),
            Violation::Reward { s, g, value, expected } => {
                write!(f, "reward[{s}][{g}] = {value}, expected {expected}")
            }
            Violation::Gamma { value } => write!(f, "gamma = {value} not in (0, 1)"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MdpWire {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    mu0: Vec<f64>,
    goal_dist: Vec<f64>,
    phi: Vec<usize>,
    reward: Vec<Vec<f64>>,
    gamma: f64,
}

impl TabularGCMDP {
    /// Builds an MDP whose reward table is derived from `phi`.
    pub fn from_parts(
        transition: Vec<Vec<Vec<f64>>>,
        mu0: Vec<f64>,
        goal_dist: Vec<f64>,
        phi: Vec<usize>,
        gamma: f64,
    ) -> Self {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, |row| row.len());
        let n_goals = goal_dist.len();
        let reward = binary_reward(&phi, n_goals);
        Self {
            n_states,
            n_actions,
            n_goals,
            transition,
            mu0,
            goal_dist,
            phi,
            reward,
            gamma,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.transition.len() != self.n_states {
            out.push(Violation::Shape(format!(
                "transition has {} rows, n_states = {}",
                self.transition.len(),
                self.n_states
            )));
            return out;
        }
        for (s, rows) in self.transition.iter().enumerate() {
            if rows.len() != self.n_actions {
                out.push(Violation::Shape(format!("T[{s}] has {} actions", rows.len())));
                continue;
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != self.n_states {
                    out.push(Violation::Shape(format!("T[{s}][{a}] has {} entries", row.len())));
                    continue;
                }
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        out.push(Violation::NegativeTransition { s, a, next, value: p });
                    }
                }
                let residual = 1.0 - row.iter().sum::<f64>();
                if residual.abs() > SUM_TOL {
                    out.push(Violation::TransitionRowSum { s, a, residual });
                }
            }
        }
        if self.mu0.len() != self.n_states {
            out.push(Violation::Shape(format!("mu0 has {} entries", self.mu0.len())));
        } else {
            for (s, &p) in self.mu0.iter().enumerate() {
                if p < 0.0 || !p.is_finite() {
                    out.push(Violation::NegativeMu0 { s, value: p });
                }
            }
            let residual = 1.0 - self.mu0.iter().sum::<f64>();
            if residual.abs() > SUM_TOL {
                out.push(Violation::Mu0Sum { residual });
            }
        }
        if self.goal_dist.len() != self.n_goals {
            out.push(Violation::Shape(format!("goal_dist has {} entries", self.goal_dist.len())));
        } else {
            for (g, &p) in self.goal_dist.iter().enumerate() {
                if p < 0.0 || !p.is_finite() {
                    out.push(Violation::NegativeGoalDist { g, value: p });
                }
            }
            let residual = 1.0 - self.goal_dist.iter().sum::<f64>();
            if residual.abs() > SUM_TOL {
                out.push(Violation::GoalDistSum { residual });
            }
        }
        if self.phi.len() != self.n_states {
            out.push(Violation::Shape(format!("phi has {} entries", self.phi.len())));
        } else {
            for (s, &g) in self.phi.iter().enumerate() {
                if g >= self.n_goals {
                    out.push(Violation::PhiOutOfRange { s, g });
                }
            }
        }
        if self.reward.len() != self.n_states {
            out.push(Violation::Shape(format!("reward has {} rows", self.reward.len())));
        } else if self.phi.len() == self.n_states {
            for (s, row) in self.reward.iter().enumerate() {
                if row.len() != self.n_goals {
                    out.push(Violation::Shape(format!("reward[{s}] has {} entries", row.len())));
                    continue;
                }
                for (g, &value) in row.iter().enumerate() {
                    let expected = if self.phi[s] == g { 1.0 } else { 0.0 };
                    if value != expected {
                        out.push(Violation::Reward { s, g, value, expected });
                    }
                }
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            out.push(Violation::Gamma { value: self.gamma });
        }
        out
    }

    /// Fails with the first violation, if any.
    pub fn ensure_valid(&self) -> Result<()> {
        match self.validate().first() {
            None => Ok(()),
            Some(v) => Err(GofarError::InvalidSpec(v.to_string())),
        }
    }

    /// Draws `s'` from `T[s][a][.]`, consuming and returning the generator state.
    pub fn sample_transition(&self, s: usize, a: usize, mut rng: Rng) -> Result<(usize, Rng)> {
        let next = self.step(s, a, &mut rng)?;
        Ok((next, rng))
    }

    pub fn step(&self, s: usize, a: usize, rng: &mut Rng) -> Result<usize> {
        if s >= self.n_states {
            return Err(GofarError::IndexOutOfRange { what: "state", index: s, len: self.n_states });
        }
        if a >= self.n_actions {
            return Err(GofarError::IndexOutOfRange { what: "action", index: a, len: self.n_actions });
        }
        Ok(sample_categorical(&self.transition[s][a], rng))
    }

    pub fn sample_start(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.mu0, rng)
    }

    pub fn sample_goal(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.goal_dist, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        let wire = MdpWire {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: self.transition.clone(),
            mu0: self.mu0.clone(),
            goal_dist: self.goal_dist.clone(),
            phi: self.phi.clone(),
            reward: self.reward.clone(),
            gamma: self.gamma,
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: MdpWire = serde_json::from_str(text)?;
        let mdp = Self {
            n_states: wire.n_states,
            n_actions: wire.n_actions,
            n_goals: wire.goal_dist.len(),
            transition: wire.transition,
            mu0: wire.mu0,
            goal_dist: wire.goal_dist,
            phi: wire.phi,
            reward: wire.reward,
            gamma: wire.gamma,
        };
        Ok(mdp)
    }

    /// Hex digest of the canonical JSON form; datasets carry it to tie them to an MDP.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json().expect("MDP serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..16])
    }

    /// `E_{s' ~ T(s,a)} v[s']`
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.transition[s][a].iter().zip(v).map(|(p, x)| p * x).sum()
    }
}

pub fn binary_reward(phi: &[usize], n_goals: usize) -> Vec<Vec<f64>> {
    phi.iter()
        .map(|&gs| (0..n_goals).map(|g| if g == gs { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    /// `probs[s][g][a]`
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_goals: usize, n_actions: usize) -> Self {
        let row = vec![1.0 / n_actions as f64; n_actions];
        Self { probs: vec![vec![row; n_goals]; n_states] }
    }

    /// Goal-independent policy built from a per-state action distribution.
    pub fn from_state_policy(per_state: &[Vec<f64>], n_goals: usize) -> Self {
        Self {
            probs: per_state.iter().map(|row| vec![row.clone(); n_goals]).collect(),
        }
    }

    pub fn prob(&self, s: usize, g: usize, a: usize) -> f64 {
        self.probs[s][g][a]
    }

    pub fn row(&self, s: usize, g: usize) -> &[f64] {
        &self.probs[s][g]
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().and_then(|r| r.first()).map_or(0, |r| r.len())
    }

    pub fn sample(&self, s: usize, g: usize, rng: &mut Rng) -> usize {
        sample_categorical(&self.probs[s][g], rng)
    }

    /// Mode of the action distribution; ties go to the lowest index.
    pub fn greedy(&self, s: usize, g: usize) -> usize {
        argmax(&self.probs[s][g])
    }

    /// Deterministic policy that always takes the mode.
    pub fn to_greedy(&self) -> Self {
        let n_actions = self.n_actions();
        let probs = self
            .probs
            .iter()
            .map(|per_goal| {
                per_goal
                    .iter()
                    .map(|row| {
                        let mut one_hot = vec![0.0; n_actions];
                        one_hot[argmax(row)] = 1.0;
                        one_hot
                    })
                    .collect()
            })
            .collect();
        Self { probs }
    }

    /// Rows that are not probability vectors, as `(s, g, residual)`.
    pub fn violations(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (s, per_goal) in self.probs.iter().enumerate() {
            for (g, row) in per_goal.iter().enumerate() {
                let residual = 1.0 - row.iter().sum::<f64>();
                if residual.abs() > SUM_TOL || row.iter().any(|&p| p < 0.0) {
                    out.push((s, g, residual));
                }
            }
        }
        out
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Flat Dirichlet(1) draw.
pub fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::Exp1)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random MDP with dense transitions. Every goal owns at least one state,
/// so `n_goals <= n_states` is required.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    n_goals: usize,
    gamma: f64,
    rng: &mut Rng,
) -> TabularGCMDP {
    assert!(n_goals >= 1 && n_goals <= n_states, "need 1 <= n_goals <= n_states");
    let transition = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(n_states, rng)).collect())
        .collect();
    let mu0 = random_simplex(n_states, rng);
    let goal_dist = random_simplex(n_goals, rng);
    let mut phi: Vec<usize> = (0..n_states)
        .map(|s| if s < n_goals { s } else { rng.random_range(0..n_goals) })
        .collect();
    // shuffle so goal ownership is not tied to the lowest indices
    for i in (1..n_states).rev() {
        let j = rng.random_range(0..=i);
        phi.swap(i, j);
    }
    TabularGCMDP::from_parts(transition, mu0, goal_dist, phi, gamma)
}

impl TabularPolicy {
    /// Every row drawn independently from the flat Dirichlet.
    pub fn random(n_states: usize, n_goals: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let probs = (0..n_states)
            .map(|_| (0..n_goals).map(|_| random_simplex(n_actions, rng)).collect())
            .collect();
        Self { probs }
    }
}

/// Action sets available to gridworld agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveSet {
    /// up, down, left, right, stay
    Compass,
    /// the eight neighbouring cells plus stay
    King,
}

impl MoveSet {
    pub fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            MoveSet::Compass => &[(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)],
            MoveSet::King => &[
                (0, -1),
                (0, 1),
                (-1, 0),
                (1, 0),
                (-1, -1),
                (1, -1),
                (-1, 1),
                (1, 1),
                (0, 0),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<(usize, usize)>,
    #[serde(default)]
    pub slip_prob: f64,
    /// Cells that may be commanded as goals; empty means every free cell.
    #[serde(default)]
    pub goal_cells: Vec<(usize, usize)>,
    /// Support of the start distribution; empty means every free cell.
    #[serde(default)]
    pub start_cells: Vec<(usize, usize)>,
    pub horizon: usize,
    pub gamma: f64,
    /// Side of the square cell blocks that share a goal index (1 = one goal per cell).
    #[serde(default = "one")]
    pub goal_block: usize,
    #[serde(default = "compass")]
    pub moves: MoveSet,
}

fn one() -> usize {
    1
}

fn compass() -> MoveSet {
    MoveSet::Compass
}

impl GridworldSpec {
    pub fn open(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            walls: Vec::new(),
            slip_prob: 0.0,
            goal_cells: Vec::new(),
            start_cells: Vec::new(),
            horizon: 50,
            gamma: 0.98,
            goal_block: 1,
            moves: MoveSet::Compass,
        }
    }

    /// 7x7 world split by a wall in column 3 with a single doorway at row 3.
    pub fn two_room() -> Self {
        let walls = (0..7).filter(|&y| y != 3).map(|y| (3, y)).collect();
        Self { walls, ..Self::open(7, 7) }
    }

    pub fn with_slip(mut self, slip_prob: f64) -> Self {
        self.slip_prob = slip_prob;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_moves(mut self, moves: MoveSet) -> Self {
        self.moves = moves;
        self
    }
}

/// A gridworld MDP together with the cell layout it was built from.
#[derive(Clone, Debug)]
pub struct Gridworld {
    pub spec: GridworldSpec,
    pub mdp: TabularGCMDP,
    /// Cell coordinates of each state index.
    pub cells: Vec<(usize, usize)>,
    /// Representative coordinates of each goal index (block centre).
    pub goal_coords: Vec<(f64, f64)>,
    index: Vec<Option<usize>>,
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularGCMDP> {
    Ok(Gridworld::new(spec.clone())?.mdp)
}

impl Gridworld {
    pub fn new(spec: GridworldSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 {
            return Err(GofarError::InvalidSpec("empty grid".into()));
        }
        if !(0.0..1.0).contains(&spec.slip_prob) {
            return Err(GofarError::InvalidSpec(format!("slip_prob {} not in [0,1)", spec.slip_prob)));
        }
        if !(spec.gamma > 0.0 && spec.gamma < 1.0) {
            return Err(GofarError::InvalidSpec(format!("gamma {} not in (0,1)", spec.gamma)));
        }
        if spec.goal_block == 0 {
            return Err(GofarError::InvalidSpec("goal_block must be positive".into()));
        }
        let in_bounds = |&(x, y): &(usize, usize)| x < spec.width && y < spec.height;
        for c in spec.walls.iter().chain(&spec.goal_cells).chain(&spec.start_cells) {
            if !in_bounds(c) {
                return Err(GofarError::InvalidSpec(format!("cell {c:?} outside the grid")));
            }
        }
        let is_wall = |c: &(usize, usize)| spec.walls.contains(c);
        for c in spec.goal_cells.iter().chain(&spec.start_cells) {
            if is_wall(c) {
                return Err(GofarError::InvalidSpec(format!("cell {c:?} lies inside a wall")));
            }
        }

        let mut index = vec![None; spec.width * spec.height];
        let mut cells = Vec::new();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !is_wall(&(x, y)) {
                    index[y * spec.width + x] = Some(cells.len());
                    cells.push((x, y));
                }
            }
        }
        if cells.is_empty() {
            return Err(GofarError::InvalidSpec("every cell is a wall".into()));
        }
        let n_states = cells.len();

        // goal indices: one per non-empty block, in row-major block order
        let k = spec.goal_block;
        let blocks_x = spec.width.div_ceil(k);
        let mut block_goal = vec![None; blocks_x * spec.height.div_ceil(k)];
        let mut goal_members: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut phi = Vec::with_capacity(n_states);
        for &(x, y) in &cells {
            let b = (y / k) * blocks_x + x / k;
            let g = *block_goal[b].get_or_insert_with(|| {
                goal_members.push(Vec::new());
                goal_members.len() - 1
            });
            goal_members[g].push((x, y));
            phi.push(g);
        }
        let n_goals = goal_members.len();
        let goal_coords = goal_members
            .iter()
            .map(|m| {
                let n = m.len() as f64;
                (
                    m.iter().map(|c| c.0 as f64).sum::<f64>() / n,
                    m.iter().map(|c| c.1 as f64).sum::<f64>() / n,
                )
            })
            .collect();

        let state_of = |c: &(usize, usize)| index[c.1 * spec.width + c.0].expect("free cell");
        let goal_cells: Vec<(usize, usize)> =
            if spec.goal_cells.is_empty() { cells.clone() } else { spec.goal_cells.clone() };
        let start_cells: Vec<(usize, usize)> =
            if spec.start_cells.is_empty() { cells.clone() } else { spec.start_cells.clone() };

        let mut goal_dist = vec![0.0; n_goals];
        let mut commanded: Vec<usize> = goal_cells.iter().map(|c| phi[state_of(c)]).collect();
        commanded.sort_unstable();
        commanded.dedup();
        for &g in &commanded {
            goal_dist[g] = 1.0 / commanded.len() as f64;
        }
        let mut mu0 = vec![0.0; n_states];
        let mut starts: Vec<usize> = start_cells.iter().map(&state_of).collect();
        starts.sort_unstable();
        starts.dedup();
        for &s in &starts {
            mu0[s] = 1.0 / starts.len() as f64;
        }

        let offsets = spec.moves.offsets();
        let n_actions = offsets.len();
        let target = |s: usize, a: usize| -> usize {
            let (x, y) = cells[s];
            let (dx, dy) = offsets[a];
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if nx < 0 || ny < 0 || nx >= spec.width as i64 || ny >= spec.height as i64 {
                return s;
            }
            index[ny as usize * spec.width + nx as usize].unwrap_or(s)
        };
        let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &mut transition[s][a];
                row[target(s, a)] += 1.0 - spec.slip_prob;
                for b in 0..n_actions {
                    row[target(s, b)] += spec.slip_prob / n_actions as f64;
                }
            }
        }

        // every goal cell must be reachable from at least one start
        let mut reached = vec![false; n_states];
        let mut queue: VecDeque<usize> = starts.iter().copied().collect();
        for &s in &starts {
            reached[s] = true;
        }
        while let Some(s) = queue.pop_front() {
            for a in 0..n_actions {
                let n = target(s, a);
                if !reached[n] {
                    reached[n] = true;
                    queue.push_back(n);
                }
            }
        }
        for c in &goal_cells {
            if !reached[state_of(c)] {
                return Err(GofarError::UnreachableGoal { cell: *c });
            }
        }

        let mdp = TabularGCMDP::from_parts(transition, mu0, goal_dist, phi, spec.gamma);
        Ok(Self { spec, mdp, cells, goal_coords, index })
    }

    pub fn state_at(&self, x: usize, y: usize) -> Option<usize> {
        if x >= self.spec.width || y >= self.spec.height {
            return None;
        }
        self.index[y * self.spec.width + x]
    }

    /// Euclidean distance between a state's cell and a goal's representative point.
    pub fn goal_distance(&self, s: usize, g: usize) -> f64 {
        let (x, y) = self.cells[s];
        let (gx, gy) = self.goal_coords[g];
        ((x as f64 - gx).powi(2) + (y as f64 - gy).powi(2)).sqrt()
    }

    /// Cell reached by executing action `a` without slipping.
    pub fn nominal_next(&self, s: usize, a: usize) -> usize {
        let (x, y) = self.cells[s];
        let (dx, dy) = self.spec.moves.offsets()[a];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 {
            return s;
        }
        self.state_at(nx as usize, ny as usize).unwrap_or(s)
    }

    /// Shortest-path distances (in nominal moves) from every state to `target`.
    pub fn distances_to(&self, target: usize) -> Vec<Option<usize>> {
        let n = self.mdp.n_states;
        let mut dist = vec![None; n];
        dist[target] = Some(0);
        let mut queue = VecDeque::from([target]);
        // moves are symmetric for both move sets, so a forward BFS from the target suffices
        while let Some(s) = queue.pop_front() {
            let d = dist[s].unwrap();
            for a in 0..self.mdp.n_actions {
                let next = self.nominal_next(s, a);
                if dist[next].is_none() {
                    dist[next] = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    /// Deterministic goal-reaching policy following shortest paths.
    pub fn shortest_path_policy(&self) -> TabularPolicy {
        let n = self.mdp.n_states;
        let n_actions = self.mdp.n_actions;
        let mut probs = vec![vec![vec![0.0; n_actions]; self.mdp.n_goals]; n];
        for g in 0..self.mdp.n_goals {
            let members: Vec<usize> = (0..n).filter(|&s| self.mdp.phi[s] == g).collect();
            let mut best = vec![usize::MAX; n];
            for &m in &members {
                for (s, d) in self.distances_to(m).into_iter().enumerate() {
                    if let Some(d) = d {
                        best[s] = best[s].min(d);
                    }
                }
            }
            for s in 0..n {
                let stay = n_actions - 1;
                let a = if self.mdp.phi[s] == g || best[s] == usize::MAX {
                    stay
                } else {
                    (0..n_actions)
                        .min_by_key(|&a| (best[self.nominal_next(s, a)], a))
                        .unwrap()
                };
                probs[s][g][a] = 1.0;
            }
        }
        TabularPolicy { probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_grid() {
        let mdp = build_gridworld(&GridworldSpec::open(1, 1)).unwrap();
        assert_eq!(mdp.n_states, 1);
        for a in 0..mdp.n_actions {
            assert_eq!(mdp.transition[0][a], vec![1.0]);
        }
        assert!(mdp.validate().is_empty());
    }

    #[test]
    fn deterministic_rows_are_one_hot() {
        let mdp = build_gridworld(&GridworldSpec::open(3, 3)).unwrap();
        for rows in &mdp.transition {
            for row in rows {
                assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), row.len() - 1);
            }
        }
    }

    #[test]
    fn slip_mixture_at_centre() {
        let world = Gridworld::new(GridworldSpec::open(3, 3).with_slip(0.2)).unwrap();
        let centre = world.state_at(1, 1).unwrap();
        let right = world.state_at(2, 1).unwrap();
        let row = &world.mdp.transition[centre][3];
        assert!((row[right] - 0.84).abs() < 1e-12);
        for (x, y) in [(1, 0), (1, 2), (0, 1), (1, 1)] {
            let s = world.state_at(x, y).unwrap();
            assert!((row[s] - 0.04).abs() < 1e-12, "cell ({x},{y}) has {}", row[s]);
        }
    }

    #[test]
    fn validate_reports_bad_row_and_mu0() {
        let mut mdp = build_gridworld(&GridworldSpec::open(2, 2)).unwrap();
        mdp.transition[1][2] = vec![0.9, 0.0, 0.0, 0.0];
        let v = mdp.validate();
        assert_eq!(v.len(), 1);
        match v[0] {
            Violation::TransitionRowSum { s, a, residual } => {
                assert_eq!((s, a), (1, 2));
                assert!((residual - 0.1).abs() < 1e-12);
            }
            ref other => panic!("unexpected {other}"),
        }

        let mut mdp = build_gridworld(&GridworldSpec::open(2, 2)).unwrap();
        mdp.mu0 = vec![-0.25, 0.75, 0.25, 0.25];
        let v = mdp.validate();
        assert_eq!(v, vec![Violation::NegativeMu0 { s: 0, value: -0.25 }]);
    }

    #[test]
    fn unreachable_goal_rejected() {
        let mut spec = GridworldSpec::open(3, 1);
        spec.walls = vec![(1, 0)];
        spec.start_cells = vec![(0, 0)];
        spec.goal_cells = vec![(2, 0)];
        assert!(matches!(Gridworld::new(spec), Err(GofarError::UnreachableGoal { cell: (2, 0) })));
    }

    #[test]
    fn goal_inside_wall_rejected() {
        let mut spec = GridworldSpec::open(3, 3);
        spec.walls = vec![(1, 1)];
        spec.goal_cells = vec![(1, 1)];
        assert!(matches!(Gridworld::new(spec), Err(GofarError::InvalidSpec(_))));
    }

    #[test]
    fn coarse_phi_groups_blocks() {
        let mut spec = GridworldSpec::open(4, 4);
        spec.goal_block = 2;
        let world = Gridworld::new(spec).unwrap();
        assert_eq!(world.mdp.n_goals, 4);
        let a = world.state_at(0, 0).unwrap();
        let b = world.state_at(1, 1).unwrap();
        let c = world.state_at(2, 0).unwrap();
        assert_eq!(world.mdp.phi[a], world.mdp.phi[b]);
        assert_ne!(world.mdp.phi[a], world.mdp.phi[c]);
        assert!(world.mdp.validate().is_empty());
    }

    #[test]
    fn sample_transition_is_reproducible() {
        let mdp = build_gridworld(&GridworldSpec::open(3, 3).with_slip(0.3)).unwrap();
        let run = || {
            let mut rng = rng_from_seed(7);
            let mut s = 4;
            let mut seq = Vec::new();
            for t in 0..50 {
                let (next, r) = mdp.sample_transition(s, t % 5, rng).unwrap();
                rng = r;
                seq.push(next);
                s = next;
            }
            seq
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sample_transition_frequencies() {
        let mdp = TabularGCMDP::from_parts(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![1.0, 0.0],
            vec![1.0],
            vec![0, 0],
            0.9,
        );
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let ones = (0..n).filter(|_| mdp.step(0, 0, &mut rng).unwrap() == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
        assert!(mdp.step(0, 3, &mut rng).is_err());
        assert!(mdp.step(5, 0, &mut rng).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = build_gridworld(&GridworldSpec::two_room().with_slip(0.1)).unwrap();
        let back = TabularGCMDP::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(mdp.fingerprint(), back.fingerprint());
    }

    #[test]
    fn shortest_path_policy_reaches_goals() {
        let world = Gridworld::new(GridworldSpec::two_room()).unwrap();
        let pi = world.shortest_path_policy();
        let g = world.mdp.phi[world.state_at(6, 6).unwrap()];
        let mut s = world.state_at(0, 0).unwrap();
        for _ in 0..20 {
            s = world.nominal_next(s, pi.greedy(s, g));
        }
        assert_eq!(world.cells[s], (6, 6));
    }
}
