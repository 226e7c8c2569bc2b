//! Small dense feed-forward networks with hand-written reverse mode and an
//! Adam optimizer over a flat parameter vector.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Multi-layer perceptron. Layer `l` holds a row-major `out × in` weight
/// matrix followed by its bias, all inside one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MlpCheckpoint", into = "MlpCheckpoint")]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    slots: Vec<LayerSlot>,
    version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpCheckpoint {
    format_version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(c: MlpCheckpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network format version {}",
                c.format_version
            )));
        }
        let mut net = Mlp::zeros(&c.widths, &c.activations)?;
        if c.params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                c.params.len()
            )));
        }
        if c.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        net.params = c.params;
        Ok(net)
    }
}

impl From<Mlp> for MlpCheckpoint {
    fn from(net: Mlp) -> Self {
        MlpCheckpoint {
            format_version: CHECKPOINT_VERSION,
            widths: net.widths,
            activations: net.activations,
            params: net.params,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.activations == other.activations && self.params == other.params
    }
}

impl Mlp {
    /// All-zero network. `activations` has one entry per layer
    /// (`widths.len() - 1`).
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Dimension("a network needs at least one layer".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Dimension("layer widths must be positive".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Dimension(format!(
                "{} layers but {} activations",
                widths.len() - 1,
                activations.len()
            )));
        }
        let mut slots = Vec::with_capacity(activations.len());
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            slots.push(LayerSlot {
                weights: offset,
                bias: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; offset],
            slots,
            version: 0,
        })
    }

    /// Tanh hidden layers and a linear output layer, weights drawn uniformly
    /// in `±1/√fan_in`, biases zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Tanh; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        let mut net = Mlp::zeros(widths, &activations)?;
        for slot in net.slots.clone() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for w in &mut net.params[slot.weights..slot.bias] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Zeroes the weights and bias of the output layer.
    pub fn zero_output_layer(&mut self) {
        let slot = self.slots[self.slots.len() - 1];
        self.params[slot.weights..slot.bias + slot.fan_out].fill(0.0);
        self.version += 1;
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding activation caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        self.version += 1;
        Ok(())
    }

    fn weights(&self, slot: LayerSlot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((slot.fan_out, slot.fan_in), &self.params[slot.weights..slot.bias])
            .expect("slot shape matches parameter layout")
    }

    /// Forward pass of a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass of a batch, one input per row.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut cache = BatchCache::default();
        self.forward_cached(inputs, &mut cache)?;
        Ok(cache.activations.pop().expect("output layer present"))
    }

    /// Forward pass recording the activations needed by
    /// [`Mlp::backward`]. Returns a view of the output.
    pub fn forward_cached<'c>(&self, inputs: ArrayView2<'_, f64>, cache: &'c mut BatchCache) -> Result<&'c Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        cache.activations.clear();
        cache.activations.push(inputs.to_owned());
        for (slot, act) in self.slots.iter().zip(&self.activations) {
            let prev = cache.activations.last().expect("input recorded");
            let mut z = prev.dot(&self.weights(*slot).t());
            if !z.is_standard_layout() {
                z = z.as_standard_layout().into_owned();
            }
            let bias = &self.params[slot.bias..slot.bias + slot.fan_out];
            for mut row in z.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v = act.apply(*v + b);
                }
            }
            cache.activations.push(z);
        }
        let out = cache.activations.last().expect("output recorded");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        cache.version = Some(self.version);
        Ok(out)
    }

    /// Reverse pass for the batch recorded in `cache`. Parameter gradients of
    /// `Σ_rows output_grad · output` are added into `grads`; the gradient
    /// with respect to the inputs is returned.
    pub fn backward(&self, cache: &BatchCache, output_grad: ArrayView2<'_, f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        if cache.version != Some(self.version) || cache.activations.len() != self.slots.len() + 1 {
            return Err(Error::StaleCache(
                "activation cache missing or recorded with different parameters".into(),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        let out = &cache.activations[self.slots.len()];
        if output_grad.dim() != out.dim() {
            return Err(Error::Dimension(format!(
                "output gradient shape {:?} does not match output {:?}",
                output_grad.dim(),
                out.dim()
            )));
        }
        let mut delta = output_grad.to_owned();
        for (l, (slot, act)) in self.slots.iter().zip(&self.activations).enumerate().rev() {
            let y = &cache.activations[l + 1];
            delta.zip_mut_with(y, |d, &yv| *d *= act.derivative_from_output(yv));
            let x = &cache.activations[l];
            let gw = delta.t().dot(x);
            for (g, v) in grads[slot.weights..slot.bias].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grads[slot.bias..slot.bias + slot.fan_out].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            delta = delta.dot(&self.weights(*slot));
        }
        Ok(delta)
    }

    /// Single-input reverse pass: returns `(parameter gradients, input gradient)`.
    pub fn gradients(&self, input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut cache = BatchCache::default();
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Dimension(e.to_string()))?;
        self.forward_cached(x, &mut cache)?;
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward(&cache, g, &mut grads)?;
        Ok((grads, input_grad.slice(s![0, ..]).to_vec()))
    }
}

/// Activations of one forward pass, tagged with the parameter version that
/// produced them.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    activations: Vec<Array2<f64>>,
    version: Option<u64>,
}

impl BatchCache {
    pub fn output(&self) -> Option<&Array2<f64>> {
        self.activations.last()
    }
}

/// Max-shifted softmax.
pub fn softmax_normalize(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            clip_norm: config.clip_norm,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                expected: self.first.len(),
                actual: params.len().min(grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(clip) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let g = g * scale;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}
