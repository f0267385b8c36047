//! Exact GoFAR on finite MDPs.

pub mod primal;
pub mod system;

pub use primal::primal_oracle;
pub use system::{
    build_system, extract_policy, recover_dstar, recover_dstar_partial, solve_dual_chi2, solve_dual_chi2_exact, AugmentedSystem,
    RewardChoice, ValueTable,
};
pub mod baselines;
pub mod pipeline;
pub mod weights;

pub use pipeline::{mle_model, solve_from_dataset, solve_from_occupancy, suboptimality_trend, GofarSolution};
pub use weights::{her_gap, optimal_goal_weights, GoalWeights, HerGap};
