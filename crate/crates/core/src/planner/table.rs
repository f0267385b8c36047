//! Tabular goal-space value, subgoal planner and plan rollout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{GofarError, Result};
use crate::fdiv::FDivergence;
use crate::mdp::{argmax, Gridworld};
use crate::tabular::system::{logit_clamped, solve_block_clamped, Row};
use crate::tabular::{RewardChoice, ValueTable};

/// One step between achieved goals. There is deliberately no action field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalStep {
    pub z: usize,
    pub z_next: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalTrajectory {
    pub steps: Vec<GoalStep>,
    pub commanded: usize,
}

/// Offline data projected onto the goal space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalData {
    pub n_goals: usize,
    pub trajectories: Vec<GoalTrajectory>,
    /// `φ` pushed forward through the start distribution
    pub start_dist: Vec<f64>,
    pub gamma: f64,
    /// Fingerprint of the domain the data was logged in.
    pub domain: String,
    /// Declared slip probability of that domain.
    pub slip_prob: f64,
}

impl GoalData {
    pub fn from_gridworld(world: &Gridworld, data: &OfflineDataset) -> Result<Self> {
        let domain = world.mdp.fingerprint();
        if data.mdp_fingerprint != domain {
            return Err(GofarError::Fingerprint { expected: domain, found: data.mdp_fingerprint.clone() });
        }
        let phi = &world.mdp.phi;
        let trajectories = data
            .trajectories
            .iter()
            .map(|t| GoalTrajectory {
                steps: t.transitions.iter().map(|tr| GoalStep { z: phi[tr.s], z_next: phi[tr.s_next] }).collect(),
                commanded: t.commanded_goal,
            })
            .collect();
        let mut start_dist = vec![0.0; world.mdp.n_goals];
        for (s, &m) in world.mdp.mu0.iter().enumerate() {
            start_dist[phi[s]] += m;
        }
        Ok(Self {
            n_goals: world.mdp.n_goals,
            trajectories,
            start_dist,
            gamma: world.mdp.gamma,
            domain,
            slip_prob: world.spec.slip_prob,
        })
    }

    /// Discounted visitation of `(z, z')` per commanded goal, normalised per goal.
    pub fn occupancy(&self) -> Vec<BTreeMap<(usize, usize), f64>> {
        let mut occ = vec![BTreeMap::new(); self.n_goals];
        for traj in &self.trajectories {
            let mut w = 1.0 - self.gamma;
            for st in &traj.steps {
                *occ[traj.commanded].entry((st.z, st.z_next)).or_insert(0.0) += w;
                w *= self.gamma;
            }
        }
        for block in &mut occ {
            let total: f64 = block.values().sum();
            if total > 0.0 {
                block.values_mut().for_each(|x| *x /= total);
            }
        }
        occ
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// `binary` or `disc`
    pub reward: String,
    /// Source data logged with a larger slip probability is rejected.
    pub max_slip: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { reward: "disc".into(), max_slip: 0.3 }
    }
}

impl PlannerConfig {
    fn reward_choice(&self) -> Result<RewardChoice> {
        match self.reward.parse()? {
            RewardChoice::LogRatio => {
                Err(GofarError::Config("the planner supports binary or discriminator rewards".into()))
            }
            r => Ok(r),
        }
    }
}

/// `V(z; g)` on goal-space pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalValue {
    pub v: ValueTable,
    /// `R[z][g]`
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Domains whose data trained this value.
    pub domains: BTreeSet<String>,
}

impl GoalValue {
    pub fn get(&self, z: usize, g: usize) -> f64 {
        self.v.get(z, g)
    }

    fn advantage(&self, z: usize, z_next: usize, g: usize) -> f64 {
        self.reward[z][g] + self.gamma * self.get(z_next, g) - self.get(z, g)
    }
}

fn goal_reward(choice: RewardChoice, occ: &[BTreeMap<(usize, usize), f64>], n: usize) -> Vec<Vec<f64>> {
    let mut marginal = vec![vec![0.0; n]; n];
    for (g, block) in occ.iter().enumerate() {
        for (&(z, _), &w) in block {
            marginal[z][g] += w;
        }
    }
    (0..n)
        .map(|z| {
            (0..n)
                .map(|g| {
                    let p = if z == g { 1.0 } else { 0.0 };
                    match choice {
                        RewardChoice::Binary => p,
                        _ => {
                            let q = marginal[z][g];
                            logit_clamped(if p + q > 0.0 { p / (p + q) } else { 0.5 })
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Exact χ² dual over goal-space pairs, one block per commanded goal.
pub fn train_goal_value(data: &GoalData, cfg: &PlannerConfig) -> Result<GoalValue> {
    if data.slip_prob > cfg.max_slip {
        return Err(GofarError::Assumption(format!(
            "source slip probability {} exceeds {}; goal-space transitions are not near-deterministic",
            data.slip_prob, cfg.max_slip
        )));
    }
    let choice = cfg.reward_choice()?;
    let n = data.n_goals;
    let occ = data.occupancy();
    let reward = goal_reward(choice, &occ, n);
    let mut v = ValueTable::zeros(n, n);
    for (g, block) in occ.iter().enumerate() {
        let rows: Vec<Row> = block
            .iter()
            .map(|(&(z, zn), &w)| Row { weight: w, reward: reward[z][g], cur: z, next: vec![(zn, 1.0)] })
            .collect();
        let sol = solve_block_clamped(n, &rows, &data.start_dist, data.gamma)?;
        for z in 0..n {
            v.v[z][g] = sol[z];
        }
    }
    Ok(GoalValue { v, reward, gamma: data.gamma, domains: BTreeSet::from([data.domain.clone()]) })
}

/// `π(z' | z, g)` as a table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerPolicy {
    /// `probs[z][g][z']`
    pub probs: Vec<Vec<Vec<f64>>>,
    pub domains: BTreeSet<String>,
}

/// f-advantage-weighted regression onto logged next goals. Pairs `(z, g)`
/// without weighted support stay put.
pub fn train_planner(data: &GoalData, value: &GoalValue) -> Result<PlannerPolicy> {
    if value.v.v.len() != data.n_goals {
        return Err(GofarError::Shape(format!("value over {} goals, data over {}", value.v.v.len(), data.n_goals)));
    }
    let n = data.n_goals;
    let mut probs = vec![vec![vec![0.0; n]; n]; n];
    for (g, block) in data.occupancy().iter().enumerate() {
        for (&(z, zn), &w) in block {
            probs[z][g][zn] += w * FDivergence::ChiSquared.weight(value.advantage(z, zn, g));
        }
    }
    for (z, per_goal) in probs.iter_mut().enumerate() {
        for row in per_goal.iter_mut() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                row[z] = 1.0;
            }
        }
    }
    let mut domains = value.domains.clone();
    domains.insert(data.domain.clone());
    Ok(PlannerPolicy { probs, domains })
}

impl PlannerPolicy {
    pub fn n_goals(&self) -> usize {
        self.probs.len()
    }

    /// Mode of `π(· | z, g)`, lowest index on ties.
    pub fn greedy(&self, z: usize, g: usize) -> usize {
        argmax(&self.probs[z][g])
    }

    /// Fails if any training data came from `target`.
    pub fn check_zero_shot(&self, target: &str) -> Result<()> {
        if self.domains.contains(target) {
            return Err(GofarError::Assumption(format!("planner was trained on data from the target domain {target}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalPlan {
    pub subgoals: Vec<usize>,
    pub final_goal: usize,
    /// the last subgoal equals the final goal
    pub complete: bool,
}

/// Greedy autoregressive rollout; subgoals are never revised.
pub fn plan(planner: &PlannerPolicy, start: usize, final_goal: usize, max_steps: usize) -> Result<SubgoalPlan> {
    let n = planner.n_goals();
    for (what, g) in [("start goal", start), ("final goal", final_goal)] {
        if g >= n {
            return Err(GofarError::IndexOutOfRange { what, index: g, len: n });
        }
    }
    let mut subgoals = Vec::new();
    let mut visited = BTreeSet::from([start]);
    let mut cur = start;
    while cur != final_goal && subgoals.len() < max_steps {
        let next = planner.greedy(cur, final_goal);
        if !visited.insert(next) {
            return Err(GofarError::Cycle { goal: next });
        }
        subgoals.push(next);
        cur = next;
    }
    Ok(SubgoalPlan { subgoals, final_goal, complete: cur == final_goal })
}

/// Greedy chain of an action policy through nominal moves, projected onto goals.
pub fn policy_chain(
    world: &Gridworld,
    policy: &crate::mdp::TabularPolicy,
    start: usize,
    final_goal: usize,
    max_steps: usize,
) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = start;
    while world.mdp.phi[s] != final_goal && out.len() < max_steps {
        s = world.nominal_next(s, policy.greedy(s, final_goal));
        out.push(world.mdp.phi[s]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, Behavior};
    use crate::mdp::GridworldSpec;
    use crate::tabular::solve_from_dataset;

    fn mixture_data(world: &Gridworld, n: usize, seed: u64) -> OfflineDataset {
        let behavior = Behavior::mixture(&world.mdp, world.shortest_path_policy(), 0.1);
        collect(&world.mdp, &behavior, n, world.spec.horizon, seed).unwrap()
    }

    fn planner_for(world: &Gridworld, n: usize, seed: u64) -> (GoalData, GoalValue, PlannerPolicy) {
        let data = GoalData::from_gridworld(world, &mixture_data(world, n, seed)).unwrap();
        let value = train_goal_value(&data, &PlannerConfig::default()).unwrap();
        let planner = train_planner(&data, &value).unwrap();
        (data, value, planner)
    }

    #[test]
    fn identity_projection_recovers_tabular_value() {
        let world = Gridworld::new(GridworldSpec::open(4, 4)).unwrap();
        let raw = mixture_data(&world, 300, 1);
        let data = GoalData::from_gridworld(&world, &raw).unwrap();
        let value = train_goal_value(&data, &PlannerConfig::default()).unwrap();
        let sol = solve_from_dataset(&world.mdp, &raw, RewardChoice::Discriminator).unwrap();
        assert!(value.v.sup_distance(&sol.v) < 1e-6, "{}", value.v.sup_distance(&sol.v));
    }

    #[test]
    fn coarse_projection_is_constant_within_blocks() {
        let mut spec = GridworldSpec::open(4, 4);
        spec.goal_block = 2;
        let world = Gridworld::new(spec).unwrap();
        assert_eq!(world.mdp.n_goals, 4);
        let (_, value, _) = planner_for(&world, 200, 2);
        // a state-level value that factors through φ
        let v_state = |s: usize, g: usize| value.get(world.mdp.phi[s], g);
        for s in 0..world.mdp.n_states {
            for t in 0..world.mdp.n_states {
                if world.mdp.phi[s] == world.mdp.phi[t] {
                    for g in 0..4 {
                        assert_eq!(v_state(s, g), v_state(t, g));
                    }
                }
            }
        }
    }

    #[test]
    fn goal_self_value_is_maximal() {
        let world = Gridworld::new(GridworldSpec::open(5, 5)).unwrap();
        let (_, value, _) = planner_for(&world, 1000, 3);
        for g in 0..25 {
            for z in 0..25 {
                assert!(value.get(g, g) >= value.get(z, g), "V({z};{g}) above V({g};{g})");
            }
        }
    }

    #[test]
    fn stochastic_source_is_rejected() {
        let world = Gridworld::new(GridworldSpec::open(3, 3).with_slip(0.35)).unwrap();
        let data = GoalData::from_gridworld(&world, &mixture_data(&world, 20, 0)).unwrap();
        assert!(matches!(train_goal_value(&data, &PlannerConfig::default()), Err(GofarError::Assumption(_))));
    }

    #[test]
    fn planner_ignores_logged_actions() {
        let world = Gridworld::new(GridworldSpec::open(4, 4)).unwrap();
        let raw = mixture_data(&world, 200, 4);
        let mut scrambled = raw.clone();
        for (i, tr) in scrambled.trajectories.iter_mut().flat_map(|t| &mut t.transitions).enumerate() {
            tr.a = i % 5;
        }
        let fit = |d: &OfflineDataset| {
            let data = GoalData::from_gridworld(&world, d).unwrap();
            train_planner(&data, &train_goal_value(&data, &PlannerConfig::default()).unwrap()).unwrap()
        };
        assert_eq!(fit(&raw), fit(&scrambled));
    }

    #[test]
    fn rows_are_distributions() {
        let world = Gridworld::new(GridworldSpec::two_room()).unwrap();
        let (_, _, planner) = planner_for(&world, 300, 5);
        for row in planner.probs.iter().flatten() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_and_adjacent_plans() {
        let world = Gridworld::new(GridworldSpec::open(5, 5)).unwrap();
        let (_, _, planner) = planner_for(&world, 1000, 6);
        let p = plan(&planner, 7, 7, 20).unwrap();
        assert!(p.subgoals.is_empty() && p.complete);
        for (a, b) in [(12, 13), (12, 7), (0, 1), (24, 19)] {
            assert_eq!(planner.greedy(a, b), b);
            let p = plan(&planner, a, b, 20).unwrap();
            assert_eq!(p.subgoals, vec![b]);
        }
    }

    #[test]
    fn corridor_plan_is_monotone() {
        let world = Gridworld::new(GridworldSpec::open(7, 1)).unwrap();
        let (_, _, planner) = planner_for(&world, 300, 7);
        for (start, goal) in [(0, 6), (6, 0), (1, 5)] {
            let p = plan(&planner, start, goal, 20).unwrap();
            assert!(p.complete);
            let mut chain = vec![start];
            chain.extend(&p.subgoals);
            let step = if goal > start { 1 } else { -1 };
            assert!(chain.windows(2).all(|w| w[1] as i64 - w[0] as i64 == step), "{chain:?}");
        }
    }

    #[test]
    fn corner_to_corner_plan_uses_doorway() {
        let world = Gridworld::new(GridworldSpec::two_room()).unwrap();
        let (_, _, planner) = planner_for(&world, 3000, 8);
        let door = world.mdp.phi[world.state_at(3, 3).unwrap()];
        for ((sx, sy), (gx, gy)) in [((0, 0), (6, 6)), ((0, 6), (6, 0)), ((6, 0), (0, 0))] {
            let start = world.mdp.phi[world.state_at(sx, sy).unwrap()];
            let goal = world.mdp.phi[world.state_at(gx, gy).unwrap()];
            let p = plan(&planner, start, goal, 50).unwrap();
            assert!(p.complete);
            assert!(p.subgoals.contains(&door));
            // every step crosses one edge of the grid, so the plan is a shortest path
            let dist = world.distances_to(world.state_at(gx, gy).unwrap())[world.state_at(sx, sy).unwrap()].unwrap();
            assert_eq!(p.subgoals.len(), dist);
        }
    }

    #[test]
    fn greedy_plan_follows_tabular_policy_chain() {
        let world = Gridworld::new(GridworldSpec::open(5, 5)).unwrap();
        let raw = mixture_data(&world, 1000, 9);
        let data = GoalData::from_gridworld(&world, &raw).unwrap();
        let planner = train_planner(&data, &train_goal_value(&data, &PlannerConfig::default()).unwrap()).unwrap();
        let sol = solve_from_dataset(&world.mdp, &raw, RewardChoice::Discriminator).unwrap();
        for start in 0..25 {
            for goal in 0..25 {
                let p = plan(&planner, start, goal, 30).unwrap();
                assert_eq!(p.subgoals, policy_chain(&world, &sol.policy, start, goal, 30), "{start} -> {goal}");
            }
        }
    }

    #[test]
    fn cycles_are_reported() {
        // a planner that only ever stays put
        let n = 3;
        let probs = (0..n).map(|z| (0..n).map(|_| (0..n).map(|k| if k == z { 1.0 } else { 0.0 }).collect()).collect()).collect();
        let planner = PlannerPolicy { probs, domains: BTreeSet::new() };
        assert!(matches!(plan(&planner, 0, 2, 10), Err(GofarError::Cycle { goal: 0 })));
    }

    #[test]
    fn target_domain_data_is_refused() {
        let world = Gridworld::new(GridworldSpec::open(3, 3)).unwrap();
        let (_, _, planner) = planner_for(&world, 50, 10);
        assert!(planner.check_zero_shot(&world.mdp.fingerprint()).is_err());
        let other = Gridworld::new(GridworldSpec::open(3, 3).with_moves(crate::mdp::MoveSet::King)).unwrap();
        planner.check_zero_shot(&other.mdp.fingerprint()).unwrap();
    }
}
