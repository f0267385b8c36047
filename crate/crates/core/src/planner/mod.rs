//! Action-free subgoal planning in goal space and zero-shot hierarchical transfer.

pub mod neural;
pub mod table;
pub mod transfer;

pub use neural::{goal_space_dataset, train_neural_planner, NeuralPlan, NeuralPlanner};
pub use table::{
    plan, policy_chain, train_goal_value, train_planner, GoalData, GoalStep, GoalTrajectory, GoalValue,
    PlannerConfig, PlannerPolicy, SubgoalPlan,
};
pub use transfer::{hierarchical_execute, transfer_experiment, Arm, TransferConfig, TransferRow};
