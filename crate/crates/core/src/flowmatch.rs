//! Flow-matching objective and the multi-step Euler sampler.
//!
//! Time runs from `tau = 1` (pure noise) to `tau = tau_shift` (data). The
//! interpolant is `x_tau = tau * eps + (1 - tau) * a` and the regression
//! target is its derivative `u_tau = eps - a`, which does not depend on tau.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DifferentiableField, VelocityField};
use crate::net::ParamVector;
use crate::traj::{ActionChunk, InstructionTag, Observation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub tau_scale: f64,
    pub tau_shift: f64,
    pub p_masked: f64,
    pub teacher_steps: usize,
    pub action_clip: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            action_dim: 3,
            beta_a: 1.5,
            beta_b: 1.0,
            tau_scale: 0.999,
            tau_shift: 0.001,
            p_masked: 0.1,
            teacher_steps: 10,
            action_clip: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_masked) {
            return Err(Error::Config(format!("p_masked {} outside [0, 1]", self.p_masked)));
        }
        if self.beta_b != 1.0 || self.beta_a <= 0.0 {
            return Err(Error::Config("tau sampling supports Beta(a, 1) with a > 0 only".into()));
        }
        if self.teacher_steps < 2 {
            return Err(Error::Config("teacher_steps must be >= 2".into()));
        }
        if self.tau_shift <= 0.0 || self.tau_scale <= 0.0 || self.tau_scale + self.tau_shift > 1.0 + 1e-12 {
            return Err(Error::Config("tau affine map must land inside (0, 1]".into()));
        }
        Ok(())
    }
}

/// Maps a uniform draw to a denoising time: inverse CDF of `Beta(a, 1)`
/// (`u^(1/a)`), then the affine squeeze onto `[tau_shift, tau_scale + tau_shift]`.
pub fn sample_tau(u: f64, cfg: &FlowConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Argument(format!("uniform draw {u} outside [0, 1]")));
    }
    Ok(cfg.tau_scale * u.powf(1.0 / cfg.beta_a) + cfg.tau_shift)
}

/// Returns `(x_tau, u_tau)`.
pub fn interpolate(a: &ActionChunk, eps: &ActionChunk, tau: f64) -> Result<(ActionChunk, ActionChunk)> {
    a.ensure_same_shape(eps)?;
    let x = a
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&ai, &ei)| tau * ei + (1.0 - tau) * ai)
        .collect();
    let u = a.data.iter().zip(&eps.data).map(|(&ai, &ei)| ei - ai).collect();
    Ok((
        ActionChunk {
            horizon: a.horizon,
            dim: a.dim,
            data: x,
        },
        ActionChunk {
            horizon: a.horizon,
            dim: a.dim,
            data: u,
        },
    ))
}

/// Replaces the instruction with the null token iff `u < p_masked`.
pub fn mask_instruction(obs: &Observation, u: f64, p_masked: f64) -> Observation {
    if u < p_masked {
        obs.with_instruction(InstructionTag::NullToken)
    } else {
        obs.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatchItem {
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub noise: ActionChunk,
    pub tau: f64,
    pub masked: bool,
}

impl FlowBatchItem {
    /// Draws noise, tau and the mask decision for one `(obs, chunk)` pair.
    pub fn draw(obs: Observation, chunk: ActionChunk, cfg: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        let noise = standard_normal_chunk(chunk.horizon, chunk.dim, rng);
        let tau = sample_tau(rng.random::<f64>(), cfg)?;
        let masked = rng.random::<f64>() < cfg.p_masked;
        Ok(Self {
            obs,
            chunk,
            noise,
            tau,
            masked,
        })
    }

    pub fn network_obs(&self) -> Observation {
        if self.masked {
            self.obs.with_instruction(InstructionTag::NullToken)
        } else {
            self.obs.clone()
        }
    }
}

pub fn standard_normal_chunk(horizon: usize, dim: usize, rng: &mut impl Rng) -> ActionChunk {
    ActionChunk {
        horizon,
        dim,
        data: (0..horizon * dim).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// Items per reduction block. Fixed so the summation order (and therefore
/// the result, bit for bit) does not depend on the thread count.
const REDUCE_BLOCK: usize = 8;

/// Mean over the batch of `(1/(Hd)) * ||v(o~, x_tau, tau) - u_tau||^2` and
/// its parameter gradient.
pub fn fm_loss_and_grad<M: DifferentiableField + Sync>(
    model: &M,
    batch: &[FlowBatchItem],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let n = batch.len() as f64;
    let block = |items: &[FlowBatchItem]| -> Result<(f64, ParamVector)> {
        let mut grads = model.zero_grad();
        let mut loss = 0.0;
        for item in items {
            let (x, u) = interpolate(&item.chunk, &item.noise, item.tau)?;
            let scale = 1.0 / (u.data.len() as f64);
            let mut item_loss = 0.0;
            let mut og = |v: &ActionChunk| {
                let mut g = v.clone();
                for (gi, ui) in g.data.iter_mut().zip(&u.data) {
                    let r = *gi - ui;
                    item_loss += r * r;
                    *gi = 2.0 * scale * r / n;
                }
                g
            };
            model.velocity_vjp(&item.network_obs(), &x, item.tau, &mut og, &mut grads.values)?;
            loss += item_loss * scale;
        }
        Ok((loss, grads))
    };
    let partials = crate::parallel::map_blocks(batch, REDUCE_BLOCK, block)?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite flow-matching loss {loss}")));
    }
    Ok((loss, grads))
}

/// Generic Euler integration from `tau = 1` down to `tau_end` in `steps`
/// equal steps. `field(x, tau)` supplies the velocity.
pub fn integrate_euler(
    noise: ActionChunk,
    steps: usize,
    tau_end: f64,
    mut field: impl FnMut(&ActionChunk, f64) -> Result<ActionChunk>,
) -> Result<ActionChunk> {
    if steps == 0 {
        return Err(Error::Argument("sampler needs at least one step".into()));
    }
    let dt = (1.0 - tau_end) / steps as f64;
    let mut x = noise;
    for i in 0..steps {
        let tau = 1.0 - i as f64 * dt;
        let v = field(&x, tau)?;
        x.add_scaled(&v, -dt);
        if !x.is_finite() {
            return Err(Error::Sampling(format!("non-finite ODE state at step {i}")));
        }
    }
    Ok(x)
}

/// Multi-step Euler sampler starting from the given noise. Returns the
/// unclipped terminal state.
pub fn sample_chunk_from_noise<F: VelocityField>(
    model: &F,
    obs: &Observation,
    noise: ActionChunk,
    steps: usize,
    tau_end: f64,
) -> Result<ActionChunk> {
    integrate_euler(noise, steps, tau_end, |x, tau| model.velocity(obs, x, tau))
}

/// Draws noise from `seed`, integrates, and clips to `action_clip`.
pub fn sample_chunk<F: VelocityField>(
    model: &F,
    obs: &Observation,
    steps: usize,
    seed: u64,
    cfg: &FlowConfig,
) -> Result<ActionChunk> {
    let (h, d) = model.chunk_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal_chunk(h, d, &mut rng);
    let x = sample_chunk_from_noise(model, obs, noise, steps, cfg.tau_shift)?;
    Ok(x.clipped(cfg.action_clip))
}
