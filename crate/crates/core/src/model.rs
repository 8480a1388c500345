//! Velocity fields over action chunks and the dense network that realizes them.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, Activation, Checkpoint, MlpSpec, ParamVector, TimeEmbedding};
use crate::simenv::TaskSpec;
use crate::traj::{ActionChunk, InstructionTag, Observation};

/// `v(o, x, tau)`: a velocity over an `H x d` chunk, in the noise-at-one
/// time convention (`tau = 1` is pure noise).
pub trait VelocityField {
    fn chunk_shape(&self) -> (usize, usize);

    fn velocity(&self, obs: &Observation, x: &ActionChunk, tau: f64) -> Result<ActionChunk>;
}

/// A velocity field with trainable parameters.
pub trait DifferentiableField: VelocityField {
    fn zero_grad(&self) -> ParamVector;

    /// Evaluates the field and accumulates `d<v, g>/dparams` into `grads`,
    /// where `g = output_grad(v)`.
    fn velocity_vjp(
        &self,
        obs: &Observation,
        x: &ActionChunk,
        tau: f64,
        output_grad: &mut dyn FnMut(&ActionChunk) -> ActionChunk,
        grads: &mut [f64],
    ) -> Result<ActionChunk>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn chunk_shape(&self) -> (usize, usize) {
        (**self).chunk_shape()
    }

    fn velocity(&self, obs: &Observation, x: &ActionChunk, tau: f64) -> Result<ActionChunk> {
        (**self).velocity(obs, x, tau)
    }
}

/// Counts velocity evaluations of the wrapped field.
pub struct CountingField<F> {
    pub inner: F,
    calls: AtomicUsize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn chunk_shape(&self) -> (usize, usize) {
        self.inner.chunk_shape()
    }

    fn velocity(&self, obs: &Observation, x: &ActionChunk, tau: f64) -> Result<ActionChunk> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.velocity(obs, x, tau)
    }
}

/// Flattens an observation into network features: the raw state followed
/// by a one-hot instruction with a dedicated slot for the null token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsEncoder {
    pub state_dim: usize,
    pub num_tasks: usize,
}

impl ObsEncoder {
    pub fn embed_dim(&self) -> usize {
        self.state_dim + self.num_tasks + 1
    }

    pub fn encode_into(&self, obs: &Observation, out: &mut Vec<f64>) -> Result<()> {
        if obs.state.len() != self.state_dim {
            return Err(Error::Config(format!(
                "observation state has dimension {}, encoder expects {}",
                obs.state.len(),
                self.state_dim
            )));
        }
        out.extend_from_slice(&obs.state);
        let slot = match obs.instruction {
            InstructionTag::Task(id) if (id as usize) < self.num_tasks => id as usize,
            InstructionTag::Task(id) => {
                return Err(Error::Config(format!(
                    "instruction names task {id} but the encoder knows {} tasks",
                    self.num_tasks
                )))
            }
            InstructionTag::NullToken => self.num_tasks,
        };
        out.extend((0..=self.num_tasks).map(|i| if i == slot { 1.0 } else { 0.0 }));
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Teacher,
    Student,
}

/// Everything besides raw weights needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub horizon: usize,
    pub action_dim: usize,
    pub action_clip: f64,
    pub encoder: ObsEncoder,
    pub time_embedding: TimeEmbedding,
    /// Chunk horizon before phase-adaptive downsampling.
    pub base_horizon: usize,
    #[serde(default)]
    pub espada_factor: Option<usize>,
    pub role: ModelRole,
    #[serde(default)]
    pub stages: Vec<String>,
    /// Content hash of the teacher a student was distilled from.
    #[serde(default)]
    pub teacher_hash: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub action_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            action_dim: 3,
            hidden_dims: vec![256, 256],
            activation: Activation::GeluApprox,
            time_embed_dim: 16,
            action_clip: 1.0,
        }
    }
}

/// Dense-network velocity field `v_theta(o, x_tau, tau)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub meta: ModelMeta,
}

impl VelocityModel {
    pub fn new(cfg: &ModelConfig, encoder: ObsEncoder, tasks: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        if cfg.horizon == 0 || cfg.action_dim == 0 {
            return Err(Error::Config(
                "chunk horizon and action dimension must be positive".into(),
            ));
        }
        let time_embedding = TimeEmbedding::geometric(cfg.time_embed_dim, 1.0, 1000.0)?;
        let chunk_len = cfg.horizon * cfg.action_dim;
        let spec = MlpSpec::new(
            encoder.embed_dim() + chunk_len + time_embedding.dim,
            cfg.hidden_dims.clone(),
            chunk_len,
            cfg.activation,
        )?;
        let params = spec.init_params(seed);
        Ok(Self {
            spec,
            params,
            meta: ModelMeta {
                horizon: cfg.horizon,
                action_dim: cfg.action_dim,
                action_clip: cfg.action_clip,
                encoder,
                time_embedding,
                base_horizon: cfg.horizon,
                espada_factor: None,
                role: ModelRole::Teacher,
                stages: Vec::new(),
                teacher_hash: None,
                tasks,
            },
        })
    }

    pub fn horizon(&self) -> usize {
        self.meta.horizon
    }

    pub fn action_clip(&self) -> f64 {
        self.meta.action_clip
    }

    /// Copy of the model re-shaped to a different chunk horizon. The
    /// weights attached to the first `min(old, new)` chunk rows, in both
    /// the input and the output layer, carry over; rows that did not exist
    /// before start at zero.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("chunk horizon must be positive".into()));
        }
        let d = self.meta.action_dim;
        let enc = self.meta.encoder.embed_dim();
        let old_chunk = self.meta.horizon * d;
        let new_chunk = horizon * d;
        let spec = MlpSpec::new(
            enc + new_chunk + self.meta.time_embedding.dim,
            self.spec.hidden_dims.clone(),
            new_chunk,
            self.spec.activation,
        )?;
        // Old index for each new input column / output row, if any.
        let in_map = |j: usize| -> Option<usize> {
            if j < enc {
                Some(j)
            } else if j < enc + new_chunk {
                let c = j - enc;
                (c < old_chunk).then_some(enc + c)
            } else {
                Some(j - new_chunk + old_chunk)
            }
        };
        let out_map = |i: usize| -> Option<usize> { (i < old_chunk).then_some(i) };
        let old_shapes = self.spec.layer_shapes();
        let new_shapes = spec.layer_shapes();
        let last = new_shapes.len() - 1;
        let mut values = Vec::with_capacity(spec.param_count());
        let mut offset = 0;
        for (l, (&(old_out, old_in), &(out, inp))) in old_shapes.iter().zip(&new_shapes).enumerate() {
            let w = &self.params.values[offset..offset + old_out * old_in];
            let b = &self.params.values[offset + old_out * old_in..offset + old_out * old_in + old_out];
            let row = |i: usize| if l == last { out_map(i) } else { Some(i) };
            let col = |j: usize| if l == 0 { in_map(j) } else { Some(j) };
            for i in 0..out {
                for j in 0..inp {
                    values.push(match (row(i), col(j)) {
                        (Some(oi), Some(oj)) => w[oi * old_in + oj],
                        _ => 0.0,
                    });
                }
            }
            for i in 0..out {
                values.push(row(i).map_or(0.0, |oi| b[oi]));
            }
            offset += old_out * old_in + old_out;
        }
        let mut meta = self.meta.clone();
        meta.horizon = horizon;
        Ok(Self {
            params: ParamVector {
                values,
                layout: spec.layout(),
            },
            spec,
            meta,
        })
    }

    fn input(&self, obs: &Observation, x: &ActionChunk, tau: f64) -> Result<Vec<f64>> {
        let (h, d) = self.chunk_shape();
        if x.horizon != h || x.dim != d {
            return Err(Error::Config(format!(
                "chunk is {}x{}, model expects {h}x{d}",
                x.horizon, x.dim
            )));
        }
        let mut input = Vec::with_capacity(self.spec.input_dim);
        self.meta.encoder.encode_into(obs, &mut input)?;
        input.extend_from_slice(&x.data);
        self.meta.time_embedding.embed_into(tau, &mut input);
        Ok(input)
    }

    fn to_chunk(&self, data: Vec<f64>) -> ActionChunk {
        ActionChunk {
            horizon: self.meta.horizon,
            dim: self.meta.action_dim,
            data,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.spec.clone(), self.params.clone());
        ckpt.meta = serde_json::to_value(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("missing or malformed model metadata: {e}")))?;
        let expected_in = meta.encoder.embed_dim() + meta.horizon * meta.action_dim + meta.time_embedding.dim;
        if ckpt.spec.input_dim != expected_in || ckpt.spec.output_dim != meta.horizon * meta.action_dim {
            return Err(Error::Checkpoint(
                "network dimensions disagree with model metadata".into(),
            ));
        }
        Ok(Self {
            spec: ckpt.spec.clone(),
            params: ckpt.params.clone(),
            meta,
        })
    }
}

impl VelocityField for VelocityModel {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.meta.horizon, self.meta.action_dim)
    }

    fn velocity(&self, obs: &Observation, x: &ActionChunk, tau: f64) -> Result<ActionChunk> {
        let input = self.input(obs, x, tau)?;
        Ok(self.to_chunk(net::forward(&self.spec, &self.params, &input)?))
    }
}

impl DifferentiableField for VelocityModel {
    fn zero_grad(&self) -> ParamVector {
        self.params.zeros_like()
    }

    fn velocity_vjp(
        &self,
        obs: &Observation,
        x: &ActionChunk,
        tau: f64,
        output_grad: &mut dyn FnMut(&ActionChunk) -> ActionChunk,
        grads: &mut [f64],
    ) -> Result<ActionChunk> {
        let input = self.input(obs, x, tau)?;
        let (out, cache) = net::forward_cached(&self.spec, &self.params, &input)?;
        let v = self.to_chunk(out);
        let g = output_grad(&v);
        net::backward_accumulate(&self.spec, &self.params, &cache, &g.data, grads)?;
        Ok(v)
    }
}
