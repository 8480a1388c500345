//! The continuous-run protocol: timeouts, resets and time accounting.

use cycleflow::metrics::run_metrics;
use cycleflow::runner::{
    budget_identity_holds, run_continuous, run_single_trial, EventKind, ExpertPolicy, RunConfig, RunLabel, ZeroPolicy,
};
use cycleflow::simenv::{default_tasks, ExpertConfig, WorldConfig};

fn label(method: &str, seed: u64) -> RunLabel {
    RunLabel {
        method: method.into(),
        regime: "none".into(),
        task: "t".into(),
        seed,
    }
}

fn free_resets(duration: f64) -> RunConfig {
    RunConfig {
        duration,
        inference_cost: 0.0,
        curated_reset_cost: 0.0,
        maintenance_reset_cost: 0.0,
        ..RunConfig::default()
    }
}

#[test]
fn never_moving_policy_times_out_on_schedule() {
    let world = WorldConfig::default();
    let tasks = default_tasks();
    for task in &tasks {
        for (duration, k) in [(3600.0, None), (1000.0, Some(3)), (47.0, Some(16))] {
            let cfg = RunConfig {
                exec_horizon: k,
                ..free_resets(duration)
            };
            let mut policy = ZeroPolicy { horizon: 16, dim: 3 };
            let log = run_continuous(&mut policy, &world, &tasks, task, &cfg, label("zero", 0)).unwrap();
            let timeouts = (duration / task.time_limit).floor() as usize;
            assert_eq!(log.totals.n_succ, 0);
            assert_eq!(log.totals.k_timeout, timeouts, "{} T={duration}", task.name);
            assert_eq!(log.totals.k_abort, 0);
            assert_eq!(log.totals.maintenance, timeouts / 5);
            // Each timeout fires exactly one time limit after its cycle began.
            let mut start = None;
            for e in &log.events {
                match e.kind {
                    EventKind::CycleStart => start = Some(e.time),
                    EventKind::Intervention { .. } => {
                        assert!((e.time - start.unwrap() - task.time_limit).abs() < 1e-9);
                    }
                    _ => {}
                }
            }
            assert!(budget_identity_holds(&log, &world));
        }
    }
}

#[test]
fn reset_and_inference_charges_are_accounted_exactly() {
    let world = WorldConfig::default();
    let tasks = default_tasks();
    let task = &tasks[0];
    let cfg = RunConfig {
        duration: 600.0,
        ..RunConfig::default()
    };
    let mut policy = ZeroPolicy { horizon: 16, dim: 3 };
    let log = run_continuous(&mut policy, &world, &tasks, task, &cfg, label("zero", 1)).unwrap();
    assert!(budget_identity_holds(&log, &world));
    let k = log.totals.k_timeout;
    let m = log.totals.maintenance;
    assert_eq!(m, k / 5);
    let expected_reset = (k - m) as f64 * cfg.curated_reset_cost + m as f64 * cfg.maintenance_reset_cost;
    assert!((log.totals.reset_time - expected_reset).abs() < 1e-9);
    // Costs only make cycles longer, never shorter.
    assert!(k <= (600.0 / task.time_limit) as usize);
    assert!(k > 0);
}

#[test]
fn scripted_expert_runs_reliably_in_both_protocols() {
    let world = WorldConfig::default();
    let tasks = default_tasks();
    for task in &tasks {
        let cfg = RunConfig {
            duration: 900.0,
            inference_cost: 0.0,
            ..RunConfig::default()
        };
        let mut expert = ExpertPolicy::new(
            world.clone(),
            task.clone(),
            ExpertConfig {
                p_fail: 0.0,
                ..ExpertConfig::default()
            },
            3,
        );
        let log = run_continuous(&mut expert, &world, &tasks, task, &cfg, label("expert", 3)).unwrap();
        let m = run_metrics(&log).unwrap();
        assert!(m.success_rate.unwrap() >= 0.95, "{}: {:?}", task.name, m);
        assert!(m.tph > 3600.0 / task.time_limit / 2.0, "{}: tph {}", task.name, m.tph);
        assert!(budget_identity_holds(&log, &world));

        let mut expert = ExpertPolicy::new(
            world.clone(),
            task.clone(),
            ExpertConfig {
                p_fail: 0.0,
                ..ExpertConfig::default()
            },
            4,
        );
        let flags = run_single_trial(&mut expert, &world, &tasks, task, 40, &cfg).unwrap();
        assert!(flags.iter().filter(|&&f| f).count() >= 38, "{}", task.name);
    }
}

#[test]
fn never_moving_policy_fails_every_single_trial() {
    let world = WorldConfig::default();
    let tasks = default_tasks();
    let mut policy = ZeroPolicy { horizon: 8, dim: 3 };
    let flags = run_single_trial(&mut policy, &world, &tasks, &tasks[0], 20, &RunConfig::default()).unwrap();
    assert!(flags.iter().all(|&f| !f));
}

#[test]
fn runs_are_deterministic_per_seed() {
    let world = WorldConfig::default();
    let tasks = default_tasks();
    let cfg = RunConfig {
        duration: 300.0,
        seed: 9,
        ..RunConfig::default()
    };
    let run = || {
        let mut expert = ExpertPolicy::new(world.clone(), tasks[1].clone(), ExpertConfig::default(), 9);
        run_continuous(&mut expert, &world, &tasks, &tasks[1], &cfg, label("expert", 9)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn invalid_execution_horizon_is_rejected() {
    let world = WorldConfig::default();
    let tasks = default_tasks();
    let mut policy = ZeroPolicy { horizon: 4, dim: 3 };
    for k in [0, 5] {
        let cfg = RunConfig {
            exec_horizon: Some(k),
            ..RunConfig::default()
        };
        assert!(run_continuous(&mut policy, &world, &tasks, &tasks[0], &cfg, label("zero", 0)).is_err());
    }
}
