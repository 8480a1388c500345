//! Rectified-flow distillation of a multi-step teacher into a two-step student.
//!
//! Distillation works in integration progress `s in [0, 1]`, with `s = 0` at
//! the noise and `s = 1` at the teacher's terminal chunk. Progress relates
//! to denoising time by `tau(s) = 1 - (1 - tau_min) * s`, so the teacher's
//! `n`-step Euler grid is exactly `s_i = i / n`.
//!
//! Networks keep emitting velocities in the `tau` convention. The velocity
//! with respect to progress is therefore `dx/ds = -(1 - tau_min) * v(o, x, tau(s))`,
//! and the regression target for a state `x_s` on the teacher trajectory is
//! the secant `(x_1 - x_s) / (1 - s)` to the teacher's terminal chunk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::standard_normal_chunk;
use crate::model::{DifferentiableField, VelocityField};
use crate::net::ParamVector;
use crate::traj::{ActionChunk, Observation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub teacher_steps: usize,
    pub student_steps: usize,
    /// Progress values sampled per teacher rollout.
    pub pairs_per_obs: usize,
    pub tau_min: f64,
    /// Probability an observation's instruction is replaced by the null token.
    pub p_masked: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher_steps: 10,
            student_steps: 2,
            pairs_per_obs: 4,
            tau_min: 0.001,
            p_masked: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_steps < 2 {
            return Err(Error::Config("teacher needs at least 2 steps".into()));
        }
        if self.student_steps == 0 || self.pairs_per_obs == 0 {
            return Err(Error::Config("student_steps and pairs_per_obs must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest progress value a target is formed at: `1 - 1/teacher_steps`.
    pub fn s_cap(&self) -> f64 {
        1.0 - 1.0 / self.teacher_steps as f64
    }
}

pub fn tau_of_progress(s: f64, tau_min: f64) -> f64 {
    1.0 - (1.0 - tau_min) * s
}

/// A point on a teacher trajectory and its straight-line target. Holds no
/// demonstration data, only teacher outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillItem {
    pub obs: Observation,
    pub s: f64,
    pub x_s: ActionChunk,
    pub x_1: ActionChunk,
    pub target: ActionChunk,
}

/// Secant velocity `(x_1 - x_s) / (1 - s)`.
pub fn secant_target(x_s: &ActionChunk, x_1: &ActionChunk, s: f64) -> Result<ActionChunk> {
    x_s.ensure_same_shape(x_1)?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Distillation(format!("progress {s} outside [0, 1)")));
    }
    let inv = 1.0 / (1.0 - s);
    Ok(ActionChunk {
        horizon: x_s.horizon,
        dim: x_s.dim,
        data: x_1.data.iter().zip(&x_s.data).map(|(a, b)| (a - b) * inv).collect(),
    })
}

/// Velocity with respect to progress, `-(1 - tau_min) * v(o, x, tau(s))`.
pub fn progress_velocity<F: VelocityField + ?Sized>(
    field: &F,
    obs: &Observation,
    x: &ActionChunk,
    s: f64,
    tau_min: f64,
) -> Result<ActionChunk> {
    Ok(field
        .velocity(obs, x, tau_of_progress(s, tau_min))?
        .scaled(-(1.0 - tau_min)))
}

/// Full teacher Euler rollout from `noise`; returns all `steps + 1` states,
/// `states[i]` at progress `i / steps`.
pub fn teacher_rollout<F: VelocityField + ?Sized>(
    teacher: &F,
    obs: &Observation,
    noise: ActionChunk,
    steps: usize,
    tau_min: f64,
) -> Result<Vec<ActionChunk>> {
    let mut states = Vec::with_capacity(steps + 1);
    let ds = 1.0 / steps as f64;
    let mut x = noise;
    states.push(x.clone());
    for i in 0..steps {
        let v = progress_velocity(teacher, obs, &x, i as f64 * ds, tau_min)?;
        x.add_scaled(&v, ds);
        if !x.is_finite() {
            return Err(Error::Distillation(format!(
                "teacher rollout became non-finite at step {i}"
            )));
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// One teacher rollout for `(obs, seed)` and `pairs_per_obs` targets along
/// it. Sampled progress values are uniform on `[0, s_cap]` and snapped to
/// the nearest grid point.
pub fn make_distill_items<F: VelocityField + ?Sized>(
    teacher: &F,
    obs: &Observation,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<DistillItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, d) = teacher.chunk_shape();
    let noise = standard_normal_chunk(h, d, &mut rng);
    let states = teacher_rollout(teacher, obs, noise, cfg.teacher_steps, cfg.tau_min)?;
    let n = cfg.teacher_steps;
    let x_1 = states[n].clone();
    (0..cfg.pairs_per_obs)
        .map(|_| {
            let s_raw = rng.random::<f64>() * cfg.s_cap();
            let i = ((s_raw * n as f64).round() as usize).min(n - 1);
            let s = i as f64 / n as f64;
            let x_s = states[i].clone();
            let target = secant_target(&x_s, &x_1, s)?;
            Ok(DistillItem {
                obs: obs.clone(),
                s,
                x_s,
                x_1: x_1.clone(),
                target,
            })
        })
        .collect()
}

/// Mean over items of `(1/(Hd)) * ||dx/ds_student - target||^2` and its
/// gradient.
pub fn distill_loss_and_grad<M: DifferentiableField + Sync>(
    student: &M,
    items: &[DistillItem],
    tau_min: f64,
) -> Result<(f64, ParamVector)> {
    if items.is_empty() {
        return Err(Error::Distillation("no distillation items".into()));
    }
    let n = items.len() as f64;
    let k = -(1.0 - tau_min);
    let block = |chunk: &[DistillItem]| -> Result<(f64, ParamVector)> {
        let mut grads = student.zero_grad();
        let mut loss = 0.0;
        for item in chunk {
            let scale = 1.0 / item.target.data.len() as f64;
            let mut item_loss = 0.0;
            let mut og = |v: &ActionChunk| {
                let mut g = v.clone();
                for (gi, ti) in g.data.iter_mut().zip(&item.target.data) {
                    let r = k * *gi - ti;
                    item_loss += r * r;
                    *gi = 2.0 * scale * r * k / n;
                }
                g
            };
            student.velocity_vjp(
                &item.obs,
                &item.x_s,
                tau_of_progress(item.s, tau_min),
                &mut og,
                &mut grads.values,
            )?;
            loss += item_loss * scale;
        }
        Ok((loss, grads))
    };
    let partials = crate::parallel::map_blocks(items, 8, block)?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite distillation loss {loss}")));
    }
    Ok((loss, grads))
}

/// Loss only, for any velocity field (used to measure a teacher against its
/// own rollouts).
pub fn distill_loss<F: VelocityField + ?Sized>(field: &F, items: &[DistillItem], tau_min: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Distillation("no distillation items".into()));
    }
    let mut total = 0.0;
    for item in items {
        let v = progress_velocity(field, &item.obs, &item.x_s, item.s, tau_min)?;
        let sq: f64 = v
            .data
            .iter()
            .zip(&item.target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq / v.data.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Few-step Euler in progress from the given noise, `steps` equal steps
/// covering `s: 0 -> 1`. Unclipped.
pub fn student_sample_from_noise<F: VelocityField + ?Sized>(
    student: &F,
    obs: &Observation,
    noise: ActionChunk,
    steps: usize,
    tau_min: f64,
) -> Result<ActionChunk> {
    if steps == 0 {
        return Err(Error::Argument("student needs at least one step".into()));
    }
    let ds = 1.0 / steps as f64;
    let mut x = noise;
    for i in 0..steps {
        let v = progress_velocity(student, obs, &x, i as f64 * ds, tau_min)?;
        x.add_scaled(&v, ds);
        if !x.is_finite() {
            return Err(Error::Sampling(format!("student state non-finite at step {i}")));
        }
    }
    Ok(x)
}

/// Two-step student sample (`s = 0 -> 0.5 -> 1`) from seeded noise, clipped.
pub fn student_sample<F: VelocityField + ?Sized>(
    student: &F,
    obs: &Observation,
    seed: u64,
    tau_min: f64,
    action_clip: f64,
) -> Result<ActionChunk> {
    let (h, d) = student.chunk_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal_chunk(h, d, &mut rng);
    Ok(student_sample_from_noise(student, obs, noise, 2, tau_min)?.clipped(action_clip))
}
