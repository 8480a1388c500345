//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat `f64` vector with a named layout, so copying
//! a teacher into a student is a single clone. Weights are stored row-major
//! as `[out][in]`; each layer contributes a `l{i}.weight` and a `l{i}.bias`
//! entry to the layout, in order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// Tanh approximation of GELU.
    GeluApprox,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::GeluApprox => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::GeluApprox => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
        }
    }
}

/// Shape of a multilayer perceptron: `input -> hidden... -> output`, with
/// the activation applied after every hidden layer and a linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive (input {input_dim}, hidden {hidden_dims:?}, output {output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        })
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        self.layer_shapes()
            .into_iter()
            .enumerate()
            .flat_map(|(i, (out, inp))| {
                [
                    LayoutEntry {
                        name: format!("l{i}.weight"),
                        shape: vec![out, inp],
                    },
                    LayoutEntry {
                        name: format!("l{i}.bias"),
                        shape: vec![out],
                    },
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(out, inp)| out * inp + out).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for (out, inp) in self.layer_shapes() {
            let bound = (6.0 / (inp + out) as f64).sqrt();
            values.extend((0..out * inp).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, out));
        }
        ParamVector {
            values,
            layout: self.layout(),
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout != self.layout() || params.values.len() != self.param_count() {
            return Err(Error::Config(format!(
                "parameter layout does not match network spec ({} values, expected {})",
                params.values.len(),
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// Flat parameter (or gradient, or moment) storage with a named layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<LayoutEntry>) -> Self {
        let n = layout.iter().map(LayoutEntry::len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Human-readable name of a flat index, e.g. `l1.weight[3, 0]`.
    pub fn name_of(&self, index: usize) -> String {
        let mut offset = 0;
        for entry in &self.layout {
            let n = entry.len();
            if index < offset + n {
                let local = index - offset;
                return match entry.shape.as_slice() {
                    [_, cols] => format!("{}[{}, {}]", entry.name, local / cols, local % cols),
                    _ => format!("{}[{}]", entry.name, local),
                };
            }
            offset += n;
        }
        format!("<out of range {index}>")
    }

    pub fn is_consistent(&self) -> bool {
        self.values.len() == self.layout.iter().map(LayoutEntry::len).sum::<usize>()
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Layer activations retained by [`forward_cached`] for a later backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    forward_cached(spec, params, input).map(|(out, _)| out)
}

pub fn forward_cached(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    spec.check_params(params)?;
    if input.len() != spec.input_dim {
        return Err(Error::Config(format!(
            "network input has length {}, expected {}",
            input.len(),
            spec.input_dim
        )));
    }
    let shapes = spec.layer_shapes();
    let last = shapes.len() - 1;
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(shapes.len()),
        pre: Vec::with_capacity(last),
    };
    let mut x = input.to_vec();
    let mut offset = 0;
    for (layer, &(out, inp)) in shapes.iter().enumerate() {
        let w = &params.values[offset..offset + out * inp];
        let b = &params.values[offset + out * inp..offset + out * inp + out];
        offset += out * inp + out;
        let mut y: Vec<f64> = b.to_vec();
        for (row, yi) in w.chunks_exact(inp).zip(y.iter_mut()) {
            *yi += dot(row, &x);
        }
        cache.inputs.push(x);
        if layer < last {
            cache.pre.push(y.clone());
            y.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
        }
        x = y;
    }
    Ok((x, cache))
}

/// Accumulates the gradient of `<output, output_grad>` into `param_grad` and
/// returns the gradient with respect to the network input.
pub fn backward_accumulate(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    output_grad: &[f64],
    param_grad: &mut [f64],
) -> Result<Vec<f64>> {
    if output_grad.len() != spec.output_dim {
        return Err(Error::Config(format!(
            "output gradient has length {}, expected {}",
            output_grad.len(),
            spec.output_dim
        )));
    }
    if param_grad.len() != params.values.len() {
        return Err(Error::Config("gradient buffer has wrong length".into()));
    }
    let shapes = spec.layer_shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(out, inp) in &shapes {
        offsets.push(offset);
        offset += out * inp + out;
    }

    let mut delta = output_grad.to_vec();
    for layer in (0..shapes.len()).rev() {
        let (out, inp) = shapes[layer];
        let base = offsets[layer];
        let x = &cache.inputs[layer];
        let w = &params.values[base..base + out * inp];
        {
            let (gw, gb) = param_grad[base..base + out * inp + out].split_at_mut(out * inp);
            for ((grow, &d), gbi) in gw.chunks_exact_mut(inp).zip(&delta).zip(gb.iter_mut()) {
                *gbi += d;
                if d != 0.0 {
                    for (g, &xi) in grow.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
        }
        let mut dx = vec![0.0; inp];
        for (row, &d) in w.chunks_exact(inp).zip(&delta) {
            if d != 0.0 {
                for (acc, &wij) in dx.iter_mut().zip(row) {
                    *acc += d * wij;
                }
            }
        }
        if layer > 0 {
            let pre = &cache.pre[layer - 1];
            for ((g, &p), &a) in dx.iter_mut().zip(pre).zip(x) {
                *g *= spec.activation.derivative(p, a);
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// Exact gradients of `<forward(input), output_grad>` with respect to the
/// parameters and the input.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    output_grad: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    let (_, cache) = forward_cached(spec, params, input)?;
    let mut grad = params.zeros_like();
    let input_grad = backward_accumulate(spec, params, &cache, output_grad, &mut grad.values)?;
    Ok((grad, input_grad))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sinusoidal embedding of a scalar time in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub frequencies: Vec<f64>,
}

impl TimeEmbedding {
    /// `dim / 2` frequencies spaced geometrically over `[min_freq, max_freq]`.
    pub fn geometric(dim: usize, min_freq: f64, max_freq: f64) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and >= 2, got {dim}"
            )));
        }
        let half = dim / 2;
        let frequencies = if half == 1 {
            vec![min_freq]
        } else {
            let ratio = (max_freq / min_freq).ln() / (half - 1) as f64;
            (0..half).map(|k| min_freq * (ratio * k as f64).exp()).collect()
        };
        Ok(Self { dim, frequencies })
    }

    pub fn embed_into(&self, tau: f64, out: &mut Vec<f64>) {
        out.extend(self.frequencies.iter().map(|f| (f * tau).sin()));
        out.extend(self.frequencies.iter().map(|f| (f * tau).cos()));
    }

    pub fn embed(&self, tau: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        self.embed_into(tau, &mut out);
        out
    }
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self::geometric(16, 1.0, 1000.0).expect("static embedding config")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counter for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamVector, cfg: AdamConfig) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps_opt: cfg.eps,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
    if params.layout != grads.layout
        || params.layout != state.first_moment.layout
        || params.layout != state.second_moment.layout
        || params.values.len() != grads.values.len()
    {
        return Err(Error::Config(
            "optimizer state, parameters and gradients have different layouts".into(),
        ));
    }
    if let Some(i) = grads.first_non_finite() {
        return Err(Error::Training(format!(
            "non-finite gradient {} at {}",
            grads.values[i],
            grads.name_of(i)
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let m = &mut state.first_moment.values;
    let v = &mut state.second_moment.values;
    for (((p, &g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps_opt);
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serialized network: spec, parameters, optional optimizer state and a
/// free-form metadata document owned by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: MlpSpec,
    pub params: ParamVector,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec,
            params,
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {} (expected {})",
                self.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        self.spec
            .check_params(&self.params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(i) = self.params.first_non_finite() {
            return Err(Error::Checkpoint(format!(
                "non-finite parameter at {}",
                self.params.name_of(i)
            )));
        }
        if let Some(opt) = &self.optimizer {
            if opt.first_moment.layout != self.params.layout || opt.second_moment.layout != self.params.layout {
                return Err(Error::Checkpoint(
                    "optimizer moments do not match parameter layout".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized parameters, used as a provenance key.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in &self.params.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
