//! Training loops for the three stages: play pretraining, task
//! post-training (optionally on ESPADA-downsampled data), and distillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig};
use crate::error::{Error, Result};
use crate::espada::{self, EspadaConfig, PhaseSegmentation};
use crate::flowmatch::{self, FlowBatchItem, FlowConfig};
use crate::model::{ModelRole, VelocityModel};
use crate::net::{optimizer_step, AdamConfig, OptimizerState};
use crate::traj::{ActionChunk, Dataset, Observation, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last step, as a fraction of the initial one
    /// (cosine schedule). 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Loss is recorded every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.1,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_size and log_every must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.adam.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Training pairs: one per frame, with chunks that run past the end of a
/// trajectory padded by repeating its final action.
pub fn padded_windows(traj: &Trajectory, horizon: usize) -> Result<Vec<(Observation, ActionChunk)>> {
    if horizon == 0 {
        return Err(Error::Argument("horizon must be >= 1".into()));
    }
    let n = traj.frames.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let rows: Vec<Vec<f64>> = (0..horizon)
            .map(|r| traj.frames[(t + r).min(n - 1)].action.clone())
            .collect();
        out.push((traj.frames[t].obs.clone(), ActionChunk::from_rows(&rows)?));
    }
    Ok(out)
}

pub fn training_windows(datasets: &[Dataset], horizon: usize) -> Result<Vec<(Observation, ActionChunk)>> {
    let mut out = Vec::new();
    for ds in datasets {
        for traj in &ds.trajectories {
            out.extend(padded_windows(traj, horizon)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    Ok(out)
}

/// Segments and downsamples every trajectory; the dataset horizon becomes
/// `ceil(H / N)`.
pub fn espada_dataset(ds: &Dataset, cfg: &EspadaConfig) -> Result<(Dataset, Vec<PhaseSegmentation>)> {
    let mut segs = Vec::with_capacity(ds.trajectories.len());
    let mut trajectories = Vec::with_capacity(ds.trajectories.len());
    for traj in &ds.trajectories {
        let (seg, down) = espada::apply(traj, cfg)?;
        segs.push(seg);
        trajectories.push(down.trajectory);
    }
    let mut meta = ds.meta.clone();
    meta.horizon = espada::rescale_horizon(ds.meta.horizon, cfg.n);
    Ok((Dataset { meta, trajectories }, segs))
}

/// Flow-matching training with Adam. Returns the recorded loss curve.
pub fn train_flow(
    model: &mut VelocityModel,
    windows: &[(Observation, ActionChunk)],
    flow: &FlowConfig,
    train: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    train.validate()?;
    flow.validate()?;
    if windows.is_empty() {
        return Err(Error::Training("no training windows".into()));
    }
    let (h, d) = (model.meta.horizon, model.meta.action_dim);
    if windows[0].1.horizon != h || windows[0].1.dim != d {
        return Err(Error::Config(format!(
            "training chunks are {}x{}, model expects {h}x{d}",
            windows[0].1.horizon, windows[0].1.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = OptimizerState::new(&model.params, train.adam);
    let mut curve = Vec::new();
    let mut batch = Vec::with_capacity(train.batch_size);
    for step in 0..train.steps {
        batch.clear();
        for _ in 0..train.batch_size {
            let (obs, chunk) = &windows[rng.random_range(0..windows.len())];
            batch.push(FlowBatchItem::draw(obs.clone(), chunk.clone(), flow, &mut rng)?);
        }
        let (loss, grads) = flowmatch::fm_loss_and_grad(&*model, &batch)?;
        opt.lr = train.lr_at(step);
        optimizer_step(&mut opt, &mut model.params, &grads)?;
        if step % train.log_every == 0 || step + 1 == train.steps {
            curve.push(LossPoint { step, loss });
        }
    }
    Ok(curve)
}

/// Distills `teacher` into a student initialized from its weights. Only
/// teacher rollouts from the given observations are used as targets.
pub fn distill_student(
    teacher: &VelocityModel,
    observations: &[Observation],
    cfg: &DistillConfig,
    train: &TrainConfig,
) -> Result<(VelocityModel, Vec<LossPoint>)> {
    cfg.validate()?;
    train.validate()?;
    if observations.is_empty() {
        return Err(Error::Distillation("no observations to distill on".into()));
    }
    let mut student = teacher.clone();
    student.meta.role = ModelRole::Student;
    student.meta.teacher_hash = Some(teacher.to_checkpoint()?.content_hash());
    student.meta.stages.push("distill".into());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = OptimizerState::new(&student.params, train.adam);
    let mut curve = Vec::new();
    let per_step = train.batch_size.div_ceil(cfg.pairs_per_obs).max(1);
    for step in 0..train.steps {
        let mut items = Vec::with_capacity(per_step * cfg.pairs_per_obs);
        for _ in 0..per_step {
            let obs = &observations[rng.random_range(0..observations.len())];
            let obs = flowmatch::mask_instruction(obs, rng.random(), cfg.p_masked);
            items.extend(distill::make_distill_items(teacher, &obs, cfg, rng.random())?);
        }
        let (loss, grads) = distill::distill_loss_and_grad(&student, &items, cfg.tau_min)?;
        opt.lr = train.lr_at(step);
        optimizer_step(&mut opt, &mut student.params, &grads)?;
        if step % train.log_every == 0 || step + 1 == train.steps {
            curve.push(LossPoint { step, loss });
        }
    }
    Ok((student, curve))
}

/// Every observation in the datasets, in order.
pub fn observations(datasets: &[Dataset]) -> Vec<Observation> {
    datasets
        .iter()
        .flat_map(|d| d.trajectories.iter())
        .flat_map(|t| t.frames.iter().map(|f| f.obs.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{Frame, InstructionTag};

    #[test]
    fn padding_repeats_final_action() {
        let frames = (0..3)
            .map(|i| Frame {
                obs: Observation {
                    state: vec![i as f64],
                    instruction: InstructionTag::NullToken,
                    sim_time: i as f64,
                },
                action: vec![i as f64],
            })
            .collect();
        let traj = Trajectory {
            frames,
            phase_labels: None,
            control_hz: 20.0,
            success_frames: vec![],
        };
        let w = padded_windows(&traj, 4).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].1.data, vec![0.0, 1.0, 2.0, 2.0]);
        assert_eq!(w[2].1.data, vec![2.0; 4]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let t = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert!((t.lr_at(0) - 1e-3).abs() < 1e-15);
        assert!((t.lr_at(100) - 1e-4).abs() < 1e-15);
    }
}
