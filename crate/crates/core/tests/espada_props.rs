//! Phase-adaptive downsampling invariants.

use cycleflow::espada::{
    apply, displacement_check, downsample_with_map, kept_indices, rescale_horizon, site_distance, DownsampleMode,
    EspadaConfig, PhaseSegmentation,
};
use cycleflow::simenv::{default_tasks, generate_demos, Amount, GenConfig, StateView};
use cycleflow::traj::{ActionChunk, Frame, InstructionTag, Observation, Phase, Regime, Trajectory};
use proptest::prelude::*;

#[test]
fn rescaled_horizon_is_the_smallest_covering_multiple() {
    for h in 1..=100 {
        for n in 1..=100 {
            let oracle = (1..).find(|m| m * n >= h).unwrap();
            assert_eq!(rescale_horizon(h, n), oracle, "H={h} N={n}");
        }
    }
}

fn phases() -> impl Strategy<Value = Vec<Phase>> {
    prop::collection::vec((any::<bool>(), 1usize..12), 1..12).prop_map(|runs| {
        runs.into_iter()
            .flat_map(|(p, len)| std::iter::repeat_n(if p { Phase::Precision } else { Phase::Casual }, len))
            .collect()
    })
}

/// Expands the sequence explicitly and keeps every `n`-th entry.
fn expansion_oracle(labels: &[Phase], n: usize) -> Vec<usize> {
    let expanded: Vec<usize> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| std::iter::repeat_n(i, if p == Phase::Precision { n } else { 1 }))
        .collect();
    let mut kept: Vec<usize> = expanded.iter().step_by(n).copied().collect();
    kept.dedup();
    kept
}

fn trajectory(actions: Vec<[f64; 3]>) -> Trajectory {
    Trajectory {
        frames: actions
            .into_iter()
            .enumerate()
            .map(|(i, a)| Frame {
                obs: Observation {
                    state: vec![i as f64],
                    instruction: InstructionTag::Task(0),
                    sim_time: i as f64 * 0.05,
                },
                action: a.to_vec(),
            })
            .collect(),
        phase_labels: None,
        control_hz: 20.0,
        success_frames: vec![],
    }
}

fn translation_chunk(frames: &[Frame]) -> ActionChunk {
    ActionChunk::from_rows(&frames.iter().map(|f| f.action.clone()).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #[test]
    fn kept_indices_match_the_expansion(labels in phases(), n in 1usize..8) {
        prop_assert_eq!(kept_indices(&labels, n), expansion_oracle(&labels, n));
    }

    #[test]
    fn precision_frames_survive_and_length_matches_casual_fraction(labels in phases(), n in 1usize..8) {
        let kept = kept_indices(&labels, n);
        for (i, &p) in labels.iter().enumerate() {
            if p == Phase::Precision {
                prop_assert!(kept.contains(&i));
            }
        }
        let seg = PhaseSegmentation::from_labels(labels.clone());
        let l = labels.len() as f64;
        let f = seg.casual_fraction();
        let predicted = f * l / n as f64 + (1.0 - f) * l;
        prop_assert!((kept.len() as f64 - predicted).abs() <= seg.segments.len() as f64);
    }

    #[test]
    fn summed_actions_conserve_displacement(
        labels in phases(),
        n in 1usize..8,
        seed_actions in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0), 140),
    ) {
        let actions: Vec<[f64; 3]> = seed_actions.iter().take(labels.len()).map(|&(x, y, g)| [x, y, g]).collect();
        let traj = trajectory(actions);
        let seg = PhaseSegmentation::from_labels(labels);
        let cfg = EspadaConfig { n, ..EspadaConfig::default() };
        let ds = downsample_with_map(&traj, &seg, &cfg).unwrap();
        // Net translation is unchanged; path length can only shrink.
        for c in 0..2 {
            let before: f64 = traj.frames.iter().map(|f| f.action[c]).sum();
            let after: f64 = ds.trajectory.frames.iter().map(|f| f.action[c]).sum();
            prop_assert!((before - after).abs() <= 1e-9);
        }
        let orig = translation_chunk(&traj.frames);
        let down = translation_chunk(&ds.trajectory.frames);
        let report = displacement_check(&orig, &down, cfg.disp_tol);
        prop_assert!(report.ds_sum <= report.orig_sum + 1e-9);
        // Gripper channel is a block average, so it stays in range.
        prop_assert!(ds.trajectory.frames.iter().all(|f| (0.0..=1.0).contains(&f.action[2])));

        let drop = downsample_with_map(&traj, &seg, &EspadaConfig { mode: DownsampleMode::Drop, ..cfg }).unwrap();
        let dropped = displacement_check(&orig, &translation_chunk(&drop.trajectory.frames), 0.1);
        prop_assert!(dropped.ds_sum <= dropped.orig_sum + 1e-9);
    }

    #[test]
    fn collinear_casual_motion_keeps_its_path_length(
        len in 1usize..60,
        n in 1usize..8,
        dir in 0.0f64..std::f64::consts::TAU,
        speeds in prop::collection::vec(0.0f64..1.0, 60),
    ) {
        let actions = speeds[..len].iter().map(|s| [s * dir.cos(), s * dir.sin(), 1.0]).collect();
        let traj = trajectory(actions);
        let seg = PhaseSegmentation::from_labels(vec![Phase::Casual; len]);
        let cfg = EspadaConfig { n, ..EspadaConfig::default() };
        let ds = downsample_with_map(&traj, &seg, &cfg).unwrap();
        let report = displacement_check(&translation_chunk(&traj.frames), &translation_chunk(&ds.trajectory.frames), cfg.disp_tol);
        prop_assert!(report.rel_err <= 1e-9, "{:?}", report);
        prop_assert!(report.pass);
    }
}

#[test]
fn cyclic_stream_keeps_contact_frames_and_every_success() {
    let tasks = default_tasks();
    let ds = generate_demos(
        &GenConfig::default(),
        &tasks,
        Some(&tasks[0]),
        Regime::Cyclic,
        Amount::Seconds(120.0),
        4,
    )
    .unwrap();
    let cfg = EspadaConfig::default();
    for traj in &ds.trajectories {
        let (seg, down) = apply(traj, &cfg).unwrap();
        for (i, &p) in seg.labels.iter().enumerate() {
            if p == Phase::Precision {
                assert!(down.source.contains(&i), "precision frame {i} dropped");
            }
        }
        // Every frame touching a site survives smoothing as precision.
        for (i, f) in traj.frames.iter().enumerate() {
            let d = site_distance(&StateView::parse(&f.obs.state).unwrap());
            if d < 0.5 * cfg.d_prec {
                assert_eq!(seg.labels[i], Phase::Precision, "frame {i} at distance {d}");
            }
        }
        assert_eq!(down.trajectory.success_frames.len(), traj.success_frames.len());
        for (&s_new, &s_old) in down.trajectory.success_frames.iter().zip(&traj.success_frames) {
            assert_eq!(down.source[s_new], s_old);
        }
        assert!(down.trajectory.len() < traj.len());
        assert!(seg.casual_fraction() > 0.2, "casual fraction {}", seg.casual_fraction());
    }
}

#[test]
fn factor_one_is_the_identity() {
    let actions = (0..30).map(|i| [i as f64 * 0.01, -0.02, 0.5]).collect();
    let traj = trajectory(actions);
    let labels = (0..30)
        .map(|i| if i % 7 < 3 { Phase::Precision } else { Phase::Casual })
        .collect();
    let seg = PhaseSegmentation::from_labels(labels);
    let cfg = EspadaConfig {
        n: 1,
        ..EspadaConfig::default()
    };
    let ds = downsample_with_map(&traj, &seg, &cfg).unwrap();
    assert_eq!(ds.source, (0..30).collect::<Vec<_>>());
    for (a, b) in ds.trajectory.frames.iter().zip(&traj.frames) {
        assert_eq!(a.action, b.action);
    }
}
