//! Metrics against brute-force counting over synthetic run logs.

use cycleflow::metrics::{
    mtbi, pareto_dominated, prp_csv, prp_report, run_metrics, success_rate, tph, Mtbi, PRP_CSV_HEADER,
};
use cycleflow::runner::{EventKind, InterventionKind, RunConfig, RunEvent, RunLabel, RunLog, RunTotals};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic_log(rng: &mut ChaCha8Rng, method: &str, seed: u64) -> RunLog {
    let duration = rng.random_range(60.0..7200.0);
    let cycles = rng.random_range(0..60);
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut totals = RunTotals::default();
    let mut streak = 0;
    for cycle in 0..cycles {
        let start = t;
        let end = start + rng.random_range(0.5..20.0);
        if end > duration {
            break;
        }
        events.push(RunEvent {
            kind: EventKind::CycleStart,
            time: start,
            cycle,
        });
        let kind = match rng.random_range(0..10) {
            0..=5 => EventKind::Success,
            6..=8 => EventKind::Intervention {
                cause: InterventionKind::Timeout,
            },
            _ => EventKind::Intervention {
                cause: InterventionKind::Abort,
            },
        };
        events.push(RunEvent { kind, time: end, cycle });
        t = end;
        if kind == EventKind::Success {
            streak = 0;
        } else {
            streak += 1;
            if streak == 5 {
                events.push(RunEvent {
                    kind: EventKind::MaintenanceReset,
                    time: end,
                    cycle,
                });
                streak = 0;
            }
        }
    }
    // Brute-force tally, independent of the library's counting helper.
    for e in &events {
        match e.kind {
            EventKind::Success => totals.n_succ += 1,
            EventKind::Intervention {
                cause: InterventionKind::Timeout,
            } => totals.k_timeout += 1,
            EventKind::Intervention {
                cause: InterventionKind::Abort,
            } => totals.k_abort += 1,
            EventKind::MaintenanceReset => totals.maintenance += 1,
            EventKind::CycleStart => {}
        }
    }
    totals.elapsed = duration;
    RunLog {
        label: RunLabel {
            method: method.into(),
            regime: "cyclic".into(),
            task: "pick-place".into(),
            seed,
        },
        config: RunConfig {
            duration,
            seed,
            ..RunConfig::default()
        },
        time_limit: 15.0,
        totals,
        events,
    }
}

#[test]
fn metrics_equal_brute_force_counts_on_random_logs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let log = synthetic_log(&mut rng, "m", i);
        log.verify().unwrap();
        let n = log.events.iter().filter(|e| e.kind == EventKind::Success).count();
        let k = log
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Intervention { .. }))
            .count();
        let t = log.config.duration;
        let m = run_metrics(&log).unwrap();
        assert_eq!(m.tph, n as f64 / (t / 3600.0));
        if k == 0 {
            assert_eq!(m.mtbi, Mtbi::Censored(t));
        } else {
            assert_eq!(m.mtbi, Mtbi::Value(t / k as f64));
        }
        let expected_rate = (n + k > 0).then(|| n as f64 / (n + k) as f64);
        assert_eq!(m.success_rate, expected_rate);
    }
}

#[test]
fn published_arithmetic_identity() {
    assert_eq!(tph(124, 3600.0).unwrap(), 124.0);
    assert_eq!(tph(0, 3600.0).unwrap(), 0.0);
    assert_eq!(mtbi(1, 3600.0).unwrap(), Mtbi::Value(3600.0));
    assert!(tph(1, 0.0).is_err());
    assert!(mtbi(1, -1.0).is_err());
}

#[test]
fn zero_interventions_are_censored_at_the_run_length() {
    let m = mtbi(0, 1800.0).unwrap();
    assert!(m.is_censored());
    assert_eq!(m.bound(), 1800.0);
    assert_eq!(success_rate(0, 0), None);
    assert_eq!(success_rate(3, 0), Some(1.0));
}

#[test]
fn report_averages_per_seed_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut logs = Vec::new();
    for method in ["a", "b", "c"] {
        let base = synthetic_log(&mut rng, method, 0);
        for seed in 0..3 {
            let mut log = synthetic_log(&mut rng, method, seed);
            // Runs in a group share their configuration.
            let duration = base.config.duration;
            log.events.retain(|e| e.time <= duration);
            if log.events.last().is_some_and(|e| e.kind == EventKind::CycleStart) {
                log.events.pop();
            }
            log.config = RunConfig {
                seed,
                ..base.config.clone()
            };
            log.totals = RunTotals::default();
            for e in &log.events {
                match e.kind {
                    EventKind::Success => log.totals.n_succ += 1,
                    EventKind::Intervention {
                        cause: InterventionKind::Timeout,
                    } => log.totals.k_timeout += 1,
                    EventKind::Intervention {
                        cause: InterventionKind::Abort,
                    } => log.totals.k_abort += 1,
                    EventKind::MaintenanceReset => log.totals.maintenance += 1,
                    EventKind::CycleStart => {}
                }
            }
            log.totals.elapsed = duration;
            logs.push(log);
        }
    }
    let report = prp_report(&logs).unwrap();
    assert_eq!(report.points.len(), 3);
    for p in &report.points {
        let group: Vec<&RunLog> = logs.iter().filter(|l| l.label.method == p.method).collect();
        let mean_tph = group.iter().map(|l| run_metrics(l).unwrap().tph).sum::<f64>() / 3.0;
        assert_eq!(p.tph, mean_tph);
        assert_eq!(p.seeds, 3);
    }
    let dominated = pareto_dominated(&report.points.iter().map(|p| (p.tph, p.mtbi)).collect::<Vec<_>>());
    assert_eq!(report.points.iter().map(|p| p.dominated).collect::<Vec<_>>(), dominated);
    let csv = prp_csv(&report.points);
    assert!(csv.starts_with(PRP_CSV_HEADER));
    assert_eq!(csv.lines().count(), 4);
    let timeline_rows: usize = logs
        .iter()
        .map(|l| {
            l.events
                .iter()
                .filter(|e| matches!(e.kind, EventKind::Success | EventKind::Intervention { .. }))
                .count()
        })
        .sum();
    assert_eq!(report.timeline.len(), timeline_rows);
}

#[test]
fn report_rejects_duplicate_seeds_and_empty_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let log = synthetic_log(&mut rng, "m", 1);
    assert!(prp_report(&[log.clone(), log]).is_err());
    assert!(prp_report(&[]).is_err());
}

#[test]
fn pareto_dominance_by_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let pts: Vec<(f64, f64)> = (0..rng.random_range(1..8))
            .map(|_| (rng.random_range(0..5) as f64, rng.random_range(0..5) as f64))
            .collect();
        let flags = pareto_dominated(&pts);
        for (i, &(x, y)) in pts.iter().enumerate() {
            let beaten = pts
                .iter()
                .enumerate()
                .any(|(j, &(a, b))| j != i && ((a > x && b >= y) || (a >= x && b > y)));
            assert_eq!(flags[i], beaten);
        }
    }
}

#[test]
fn logs_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..20 {
        let log = synthetic_log(&mut rng, "disk", seed);
        let (summary, _) = log.save(dir.path()).unwrap();
        let back = RunLog::load(&summary).unwrap();
        assert_eq!(back, log);
    }
}
