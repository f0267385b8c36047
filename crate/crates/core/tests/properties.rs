use gofar::dataset::{collect, empirical_occupancy, relabel_minibatch, Behavior, RelabelSpec};
use gofar::fdiv::{conjugate_oracle, divergence, FDivergence};
use gofar::harness::evaluate_tabular;
use gofar::harness::metrics::{mean, std_err, RunLabels};
use gofar::harness::suite::{run_manifest, DataSpec, EnvSpec, ExperimentConfig, Manifest, RunRow, SuiteKind};
use gofar::mdp::{random_mdp, random_simplex, rng_from_seed, Gridworld, GridworldSpec, Rng, TabularGCMDP, TabularPolicy};
use gofar::neural::train::{advantage_weights, TrainConfig};
use gofar::occupancy::{lemma_b1_check, lower_bound_slack, prop1_gap, solve_occupancy, BoundVariant};
use gofar::planner::TransferConfig;
use gofar::tabular::pipeline::solve_from_occupancy;
use gofar::tabular::primal::primal_oracle;
use gofar::tabular::system::{
    build_system, clamped_rows, extract_policy, recover_dstar, recover_dstar_partial, solve_dual_chi2, RewardChoice,
};
use gofar::tabular::weights::optimal_goal_weights;
use proptest::prelude::*;
use rand::Rng as _;

fn instance(seed: u64) -> (TabularGCMDP, TabularPolicy, Rng) {
    let mut rng = rng_from_seed(seed);
    let n_states = rng.random_range(2..=5);
    let n_goals = rng.random_range(1..=n_states.min(3));
    let n_actions = rng.random_range(1..=3);
    let gamma = rng.random_range(0.3..0.95);
    let mdp = random_mdp(n_states, n_actions, n_goals, gamma, &mut rng);
    let policy = TabularPolicy::random(n_states, n_goals, n_actions, &mut rng);
    (mdp, policy, rng)
}

fn grid_spec() -> impl Strategy<Value = GridworldSpec> {
    (1usize..6, 1usize..6, proptest::collection::vec((0usize..6, 0usize..6), 0..4), 0.0..0.5f64).prop_map(
        |(w, h, walls, slip)| {
            let walls = walls.into_iter().filter(|&(x, y)| x < w && y < h).collect();
            GridworldSpec { walls, ..GridworldSpec::open(w, h).with_slip(slip) }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gridworlds_validate_and_phi_is_total(spec in grid_spec()) {
        if let Ok(world) = Gridworld::new(spec) {
            prop_assert!(world.mdp.validate().is_empty());
            prop_assert_eq!(world.mdp.phi.len(), world.mdp.n_states);
            prop_assert!(world.mdp.phi.iter().all(|&g| g < world.mdp.n_goals));
        }
    }

    #[test]
    fn deterministic_grid_trajectories_repeat(seed in any::<u64>(), w in 2usize..6, h in 2usize..6) {
        let world = Gridworld::new(GridworldSpec::open(w, h)).unwrap();
        let behavior = Behavior::uniform(&world.mdp);
        let a = collect(&world.mdp, &behavior, 5, 10, seed).unwrap();
        prop_assert_eq!(&a, &collect(&world.mdp, &behavior, 5, 10, seed).unwrap());
        for tr in a.trajectories.iter().flat_map(|t| &t.transitions) {
            prop_assert_eq!(tr.s_next, world.nominal_next(tr.s, tr.a));
        }
    }

    #[test]
    fn chi2_conjugate_matches_grid_oracle(y in -1.0..5.0f64) {
        let step = 1e-3;
        let chi = FDivergence::ChiSquared;
        let (v, x) = conjugate_oracle(chi, y, 10.0, step);
        prop_assert!((chi.f_star(y) - 0.5 - v).abs() <= 2.0 * step);
        prop_assert!((chi.f_star_prime(y) - x).abs() <= step);
    }

    #[test]
    fn conjugates_are_midpoint_convex(a in -5.0..5.0f64, b in -5.0..5.0f64) {
        for div in [FDivergence::ChiSquared, FDivergence::Kl] {
            let mid = div.f_star(0.5 * (a + b));
            prop_assert!(mid <= 0.5 * (div.f_star(a) + div.f_star(b)) + 1e-12);
        }
    }

    #[test]
    fn divergences_are_nonnegative_and_ordered(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = rng_from_seed(seed);
        let p = random_simplex(n, &mut rng);
        let q = random_simplex(n, &mut rng);
        let chi = divergence(&p, &q, FDivergence::ChiSquared).unwrap();
        let kl = divergence(&p, &q, FDivergence::Kl).unwrap();
        prop_assert!(chi >= -1e-12 && kl >= -1e-12);
        prop_assert!(2.0 * chi >= kl - 1e-12);
    }

    #[test]
    fn occupancy_satisfies_flow_and_recovers_policy(seed in any::<u64>()) {
        let (mdp, policy, _) = instance(seed);
        let occ = solve_occupancy(&mdp, &policy).unwrap();
        prop_assert!(occ.flow_residual(&mdp) <= 1e-9);
        let back = occ.policy();
        for g in 0..mdp.n_goals {
            prop_assert!((occ.goal_mass(g) - 1.0).abs() <= 1e-9);
            for s in (0..mdp.n_states).filter(|&s| occ.state(s, g) > 1e-12) {
                for a in 0..mdp.n_actions {
                    prop_assert!((back.prob(s, g, a) - policy.prob(s, g, a)).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn matching_identity_holds(seed in any::<u64>()) {
        let (mdp, policy, mut rng) = instance(seed);
        let r: Vec<Vec<f64>> =
            (0..mdp.n_states).map(|_| (0..mdp.n_goals).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let (lhs, rhs) = prop1_gap(&mdp, &policy, &r).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8);
    }

    #[test]
    fn lower_bound_slacks_and_kl_chain(seed in any::<u64>()) {
        let (mdp, policy, mut rng) = instance(seed);
        let behavior = TabularPolicy::random(mdp.n_states, mdp.n_goals, mdp.n_actions, &mut rng);
        let d_offline = solve_occupancy(&mdp, &behavior).unwrap();
        let disc = lower_bound_slack(&mdp, &policy, &d_offline, BoundVariant::Discriminator).unwrap();
        let bin = lower_bound_slack(&mdp, &policy, &d_offline, BoundVariant::Binary).unwrap();
        prop_assert!(disc >= -1e-9, "discriminator slack {}", disc);
        prop_assert!(bin >= disc - 1e-9, "binary {} < discriminator {}", bin, disc);
        let d_pi = solve_occupancy(&mdp, &policy).unwrap();
        let (state_kl, sa_kl) = lemma_b1_check(&d_pi, &d_offline, &mdp.goal_dist).unwrap();
        prop_assert!(state_kl <= sa_kl + 1e-12);
    }

    #[test]
    fn hindsight_goals_come_from_the_future(seed in any::<u64>(), ratio in 0.0..=1.0f64) {
        let world = Gridworld::new(GridworldSpec::open(4, 4).with_slip(0.1)).unwrap();
        let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), 1, 12, seed).unwrap();
        let spec = RelabelSpec::her(ratio).unwrap();
        let batch = relabel_minibatch(&data, &world.mdp, &spec, 64, &mut rng_from_seed(seed ^ 1)).unwrap();
        let traj = &data.trajectories[0];
        for s in batch {
            if s.relabeled {
                prop_assert!(s.goal_time > s.t && s.goal_time <= traj.transitions.len());
                prop_assert_eq!(s.g, world.mdp.phi[traj.transitions[s.goal_time - 1].s_next]);
                prop_assert_eq!(s.r, world.mdp.reward[s.s][s.g]);
            } else {
                prop_assert_eq!(s.g, traj.commanded_goal);
            }
        }
    }

    #[test]
    fn empirical_mass_is_truncated_geometric(seed in any::<u64>(), horizon in 1usize..40) {
        let world = Gridworld::new(GridworldSpec::open(3, 3)).unwrap();
        let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), 30, horizon, seed).unwrap();
        let occ = empirical_occupancy(&data, &world.mdp).unwrap();
        let low = 1.0 - world.mdp.gamma.powi(horizon as i32) - 1e-12;
        for g in (0..world.mdp.n_goals).filter(|g| !occ.missing_goals.contains(g)) {
            prop_assert!(occ.raw_mass[g] >= low && occ.raw_mass[g] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn advantage_weights_are_nonnegative(ys in proptest::collection::vec(-50.0..50.0f64, 1..64)) {
        prop_assert!(advantage_weights(FDivergence::ChiSquared, &ys).iter().all(|&w| w >= 0.0));
        prop_assert!(advantage_weights(FDivergence::Kl, &ys).iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn evaluation_metrics_stay_in_range(seed in any::<u64>(), spec in grid_spec()) {
        let Ok(world) = Gridworld::new(spec) else { return Ok(()) };
        let m = &world.mdp;
        let policy = TabularPolicy::random(m.n_states, m.n_goals, m.n_actions, &mut rng_from_seed(seed));
        let labels = RunLabels { algo: "random".into(), env: "grid".into(), her_ratio: 0.0, noise: 0.0 };
        for r in evaluate_tabular(&world, &policy, 5, 20, seed, &labels).unwrap() {
            prop_assert!(r.discounted_return >= 0.0 && r.discounted_return <= 1.0 / (1.0 - m.gamma));
            prop_assert!(r.final_distance >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strong_duality_with_full_support(seed in any::<u64>()) {
        let (mdp, behavior, _) = instance(seed);
        let d = solve_occupancy(&mdp, &behavior).unwrap();
        let sys = build_system(&mdp, &d, RewardChoice::Binary).unwrap();
        let v = solve_dual_chi2(&sys).unwrap();
        prop_assume!(clamped_rows(&sys, &v) == 0);
        let dual = sys.dual_objective(&v, FDivergence::ChiSquared) - 0.5;
        let (d_primal, primal) = primal_oracle(&mdp, &d, RewardChoice::Binary).unwrap();
        prop_assert!((dual - primal).abs() <= 1e-4);
        let d_dual = recover_dstar(&sys, &v).unwrap();
        prop_assert!(d_dual.total_variation(&d_primal, &mdp.goal_dist) <= 1e-3);
    }

    #[test]
    fn goal_weighted_regression_is_the_dstar_policy(seed in any::<u64>()) {
        let (mdp, behavior, _) = instance(seed);
        let d = solve_occupancy(&mdp, &behavior).unwrap();
        let sys = build_system(&mdp, &d, RewardChoice::Discriminator).unwrap();
        let v = solve_dual_chi2(&sys).unwrap();
        let regressed = optimal_goal_weights(&sys, &v).regression_policy();
        let (dstar, _) = recover_dstar_partial(&sys, &v);
        let direct = extract_policy(&dstar);
        for s in 0..mdp.n_states {
            for g in (0..mdp.n_goals).filter(|&g| dstar.state(s, g) > 0.0) {
                for a in 0..mdp.n_actions {
                    prop_assert!((regressed.prob(s, g, a) - direct.prob(s, g, a)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn rescaled_offline_data_gives_the_same_policy(seed in any::<u64>(), scale in 0.01..100.0f64) {
        let (mdp, behavior, _) = instance(seed);
        let d = solve_occupancy(&mdp, &behavior).unwrap();
        let mut scaled = d.clone();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                for g in 0..mdp.n_goals {
                    scaled.set(s, a, g, scale * d.get(s, a, g));
                }
            }
        }
        scaled.normalize_per_goal();
        let p1 = solve_from_occupancy(&mdp, &d, RewardChoice::Discriminator).unwrap().policy;
        let p2 = solve_from_occupancy(&mdp, &scaled, RewardChoice::Discriminator).unwrap().policy;
        for (r1, r2) in p1.probs.iter().flatten().zip(p2.probs.iter().flatten()) {
            for (x, y) in r1.iter().zip(r2) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn zero_reward_returns_the_behaviour(seed in any::<u64>()) {
        let (mdp, behavior, _) = instance(seed);
        let d = solve_occupancy(&mdp, &behavior).unwrap();
        let mut sys = build_system(&mdp, &d, RewardChoice::Binary).unwrap();
        sys.reward = vec![vec![0.0; mdp.n_goals]; mdp.n_states];
        let v = solve_dual_chi2(&sys).unwrap();
        let pi = extract_policy(&recover_dstar(&sys, &v).unwrap());
        for s in 0..mdp.n_states {
            for g in 0..mdp.n_goals {
                for a in 0..mdp.n_actions {
                    prop_assert!((pi.prob(s, g, a) - behavior.prob(s, g, a)).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn commanded_goals_follow_the_goal_distribution() {
    let world = Gridworld::new(GridworldSpec::open(5, 5)).unwrap();
    let n = 10_000;
    let data = collect(&world.mdp, &Behavior::uniform(&world.mdp), n, 1, 17).unwrap();
    let mut counts = vec![0.0; world.mdp.n_goals];
    for t in &data.trajectories {
        counts[t.commanded_goal] += 1.0;
    }
    let stat: f64 = counts
        .iter()
        .zip(&world.mdp.goal_dist)
        .map(|(c, p)| {
            let e = p * n as f64;
            (c - e).powi(2) / e
        })
        .sum();
    // 99th percentile of the chi-squared distribution with 24 degrees of freedom
    assert!(stat < 42.98, "chi-squared statistic {stat}");
}

fn small_suite(seed_list: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        kind: SuiteKind::AblateHer,
        env: EnvSpec::Grid(GridworldSpec::open(3, 3)),
        data: DataSpec { n_trajectories: 40, horizon: 10, expert_frac: 0.2, path: None },
        algos: vec!["gofar".into(), "gcsl-noher".into(), "wgcsl".into()],
        seeds: seed_list,
        noise_levels: Vec::new(),
        eval_episodes: 8,
        eval_horizon: 10,
        train: TrainConfig::default(),
        moderate_noise: None,
        extreme_noise: None,
        dataset_sizes: Vec::new(),
        transfer: TransferConfig::default(),
        target: None,
        acceptance: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn summary_is_recomputable_from_runs_csv(root in any::<u64>(), seeds in proptest::collection::btree_set(0u64..100, 1..4)) {
        let m = Manifest { seed: root, workers: 0, suites: vec![small_suite(seeds.into_iter().collect())] };
        let tree = run_manifest(&m).unwrap();
        let runs: Vec<RunRow> = csv::Reader::from_reader(tree.files[std::path::Path::new("small/runs.csv")].as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        let mut summary = csv::Reader::from_reader(tree.files[std::path::Path::new("summary.csv")].as_bytes());
        for row in summary.records() {
            let row = row.unwrap();
            let rets: Vec<f64> = runs.iter().filter(|r| r.algo == row[1]).map(|r| r.mean_return).collect();
            let recorded: f64 = row[6].parse().unwrap();
            let recorded_se: f64 = row[7].parse().unwrap();
            prop_assert_eq!(recorded, mean(&rets));
            prop_assert_eq!(recorded_se, std_err(&rets));
        }
        prop_assert_eq!(&tree, &run_manifest(&m).unwrap());
    }

    #[test]
    fn root_seed_reaches_every_run(root in any::<u64>()) {
        let a = run_manifest(&Manifest { seed: root, workers: 0, suites: vec![small_suite(vec![0])] }).unwrap();
        let b = run_manifest(&Manifest { seed: root ^ 0x9e37, workers: 0, suites: vec![small_suite(vec![0])] }).unwrap();
        let metrics = std::path::Path::new("small/gofar/seed_0/metrics.csv");
        prop_assert_ne!(&a.files[metrics], &b.files[metrics]);
    }
}
