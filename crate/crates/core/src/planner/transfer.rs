//! Zero-shot transfer of a source-domain planner to a target agent sharing the goal space.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{collect, Behavior};
use crate::error::{GofarError, Result};
use crate::mdp::{derive_seed, rng_from_seed, Gridworld, Rng};

use super::table::{plan, train_goal_value, train_planner, GoalData, PlannerConfig, PlannerPolicy, SubgoalPlan};

/// Moves to the neighbouring cell closest to the goal point; blocked moves stay.
pub fn greedy_controller(world: &Gridworld) -> impl Fn(usize, usize) -> usize + '_ {
    move |s, g| {
        let d = |a: usize| world.goal_distance(world.nominal_next(s, a), g);
        (0..world.mdp.n_actions).min_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b))).expect("actions exist")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub success: bool,
    /// visited states, starting state first
    pub trajectory: Vec<usize>,
}

fn reached(world: &Gridworld, s: usize, g: usize) -> bool {
    world.mdp.phi[s] == g
}

/// Drives `low_level` straight at `goal` for at most `budget` steps.
pub fn low_level_execute<C: Fn(usize, usize) -> usize>(
    low_level: &C,
    target: &Gridworld,
    start: usize,
    goal: usize,
    budget: usize,
    rng: &mut Rng,
) -> Result<Execution> {
    let mut trajectory = vec![start];
    let mut s = start;
    while !reached(target, s, goal) && trajectory.len() <= budget {
        s = target.mdp.step(s, low_level(s, goal), rng)?;
        trajectory.push(s);
    }
    Ok(Execution { success: reached(target, s, goal), trajectory })
}

/// Pursues each subgoal for at most `per_subgoal_budget` steps, in order,
/// within `total_budget` steps overall.
pub fn hierarchical_execute<C: Fn(usize, usize) -> usize>(
    plan: &SubgoalPlan,
    low_level: &C,
    target: &Gridworld,
    start: usize,
    per_subgoal_budget: usize,
    total_budget: usize,
    rng: &mut Rng,
) -> Result<Execution> {
    let mut trajectory = vec![start];
    let mut s = start;
    'plan: for &sub in &plan.subgoals {
        let mut used = 0;
        while !reached(target, s, sub) && used < per_subgoal_budget {
            if trajectory.len() > total_budget || reached(target, s, plan.final_goal) {
                break 'plan;
            }
            s = target.mdp.step(s, low_level(s, sub), rng)?;
            trajectory.push(s);
            used += 1;
        }
    }
    Ok(Execution { success: reached(target, s, plan.final_goal), trajectory })
}

/// Teleports onto each subgoal in turn.
pub fn oracle_execute(plan: &SubgoalPlan, target: &Gridworld, start: usize) -> Execution {
    let mut trajectory = vec![start];
    for &sub in &plan.subgoals {
        let s = (0..target.mdp.n_states).find(|&s| reached(target, s, sub)).expect("goal has a member state");
        trajectory.push(s);
    }
    let last = *trajectory.last().expect("nonempty");
    Execution { success: reached(target, last, plan.final_goal), trajectory }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub n_tasks: usize,
    pub per_subgoal_budget: usize,
    pub total_budget: usize,
    pub max_plan: usize,
    pub source_trajectories: usize,
    pub expert_frac: f64,
    pub planner: PlannerConfig,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            n_tasks: 100,
            per_subgoal_budget: 10,
            total_budget: 50,
            max_plan: 50,
            source_trajectories: 3000,
            expert_frac: 0.1,
            planner: PlannerConfig::default(),
            seed: 0,
        }
    }
}

/// Start cells in a corner of one room, goals in a corner of the other.
pub fn corner_tasks(world: &Gridworld, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let (w, h) = (world.spec.width, world.spec.height);
    let corner = |cx: usize, cy: usize| -> Vec<usize> {
        let xs = if cx == 0 { 0..2 } else { w - 2..w };
        let ys = if cy == 0 { 0..2 } else { h - 2..h };
        xs.flat_map(|x| ys.clone().map(move |y| (x, y))).filter_map(|(x, y)| world.state_at(x, y)).collect()
    };
    let corners: Vec<((usize, usize), Vec<usize>)> =
        [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(cx, cy)| ((cx, cy), corner(cx, cy))).collect();
    if corners.iter().any(|c| c.1.is_empty()) {
        return Err(GofarError::InvalidSpec("a corner region has no free cell".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random_range(0..4);
        // any corner on the other side of the vertical split
        let others: Vec<usize> = (0..4).filter(|&b| corners[b].0 .0 != corners[a].0 .0).collect();
        let b = others[rng.random_range(0..others.len())];
        let s = corners[a].1[rng.random_range(0..corners[a].1.len())];
        let g = corners[b].1[rng.random_range(0..corners[b].1.len())];
        out.push((s, world.mdp.phi[g]));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    LowLevel,
    Hierarchical,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub task: usize,
    pub arm: Arm,
    pub start: usize,
    pub goal: usize,
    pub success: bool,
    pub steps: usize,
    pub plan_len: usize,
    pub plan_error: bool,
}

pub fn fit_source_planner(source: &Gridworld, cfg: &TransferConfig) -> Result<PlannerPolicy> {
    let behavior = Behavior::mixture(&source.mdp, source.shortest_path_policy(), cfg.expert_frac);
    let raw = collect(&source.mdp, &behavior, cfg.source_trajectories, source.spec.horizon, derive_seed(cfg.seed, &[0]))?;
    let data = GoalData::from_gridworld(source, &raw)?;
    let value = train_goal_value(&data, &cfg.planner)?;
    train_planner(&data, &value)
}

/// Three arms per task: the raw controller, the planner-guided controller and
/// teleporting along the plan.
pub fn transfer_experiment(planner: &PlannerPolicy, target: &Gridworld, cfg: &TransferConfig) -> Result<Vec<TransferRow>> {
    planner.check_zero_shot(&target.mdp.fingerprint())?;
    if planner.n_goals() != target.mdp.n_goals {
        return Err(GofarError::Shape(format!(
            "planner goal space has {} goals, target has {}",
            planner.n_goals(),
            target.mdp.n_goals
        )));
    }
    let controller = greedy_controller(target);
    let tasks = corner_tasks(target, cfg.n_tasks, derive_seed(cfg.seed, &[1]))?;
    let mut rows = Vec::with_capacity(3 * tasks.len());
    for (task, &(start, goal)) in tasks.iter().enumerate() {
        let row = |arm, ex: Option<&Execution>, plan_len, plan_error| TransferRow {
            task,
            arm,
            start,
            goal,
            success: ex.is_some_and(|e| e.success),
            steps: ex.map_or(0, |e| e.trajectory.len() - 1),
            plan_len,
            plan_error,
        };
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[2, task as u64]));
        let raw = low_level_execute(&controller, target, start, goal, cfg.total_budget, &mut rng)?;
        rows.push(row(Arm::LowLevel, Some(&raw), 0, false));
        match plan(planner, target.mdp.phi[start], goal, cfg.max_plan) {
            Ok(p) => {
                let mut rng = rng_from_seed(derive_seed(cfg.seed, &[3, task as u64]));
                let h = hierarchical_execute(
                    &p,
                    &controller,
                    target,
                    start,
                    cfg.per_subgoal_budget,
                    cfg.total_budget,
                    &mut rng,
                )?;
                rows.push(row(Arm::Hierarchical, Some(&h), p.subgoals.len(), false));
                let o = oracle_execute(&p, target, start);
                rows.push(row(Arm::Oracle, Some(&o), p.subgoals.len(), false));
            }
            Err(GofarError::Cycle { .. }) => {
                rows.push(row(Arm::Hierarchical, None, 0, true));
                rows.push(row(Arm::Oracle, None, 0, true));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

pub fn success_rate(rows: &[TransferRow], arm: Arm) -> f64 {
    let arm_rows: Vec<&TransferRow> = rows.iter().filter(|r| r.arm == arm).collect();
    if arm_rows.is_empty() {
        return 0.0;
    }
    arm_rows.iter().filter(|r| r.success).count() as f64 / arm_rows.len() as f64
}

pub fn write_rows<W: Write>(rows: &[TransferRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
