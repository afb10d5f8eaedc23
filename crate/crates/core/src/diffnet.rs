//! Minimal dense-network core with exact reverse-mode gradients.
//!
//! All parameters of a [`ParamNet`] live in one flat `Vec<f64>` so that
//! optimizers, checkpoints and finite-difference checks can treat the network
//! as a plain parameter vector. The layout is, per layer, the row-major weight
//! matrix (`outputs x inputs`) followed by the bias; the optional per-step
//! affine table comes last, ordered by step, then hidden layer, then
//! `(gain, bias)`.
//!
//! A forward pass returns a [`GradTape`] holding the activations that the
//! matching backward pass needs. The tape is consumed by [`ParamNet::backward`]
//! and is rejected if the parameters changed in between.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, WalkbackError};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softplus,
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Layer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    w_offset: usize,
    b_offset: usize,
}

/// Per-step `(gain, bias)` applied to every hidden layer's pre-activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct AffineTable {
    steps: usize,
    widths: Vec<usize>,
    offset: usize,
}

impl AffineTable {
    fn per_step(&self) -> usize {
        2 * self.widths.iter().sum::<usize>()
    }

    /// Offsets of the gain and bias vectors for `(step, hidden layer)`.
    fn slot(&self, step: usize, hidden: usize) -> (usize, usize) {
        let mut base = self.offset + step * self.per_step();
        for w in &self.widths[..hidden] {
            base += 2 * w;
        }
        (base, base + self.widths[hidden])
    }
}

/// Serialized form of a network; validated on the way back in.
#[derive(Serialize, Deserialize)]
struct NetRecord {
    layers: Vec<LayerSpec>,
    affine_steps: Option<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "NetRecord", into = "NetRecord")]
pub struct ParamNet {
    layers: Vec<Layer>,
    affine: Option<AffineTable>,
    params: Vec<f64>,
    grads: Vec<f64>,
    version: u64,
    id: u64,
}

impl Clone for ParamNet {
    fn clone(&self) -> Self {
        ParamNet {
            layers: self.layers.clone(),
            affine: self.affine.clone(),
            params: self.params.clone(),
            grads: self.grads.clone(),
            version: 0,
            id: fresh_id(),
        }
    }
}

impl From<ParamNet> for NetRecord {
    fn from(net: ParamNet) -> Self {
        NetRecord {
            layers: net.layer_specs(),
            affine_steps: net.affine.as_ref().map(|a| a.steps),
            params: net.params,
        }
    }
}

impl TryFrom<NetRecord> for ParamNet {
    type Error = WalkbackError;

    fn try_from(rec: NetRecord) -> Result<Self> {
        let mut net = ParamNet::zeroed(&rec.layers, rec.affine_steps)?;
        if rec.params.len() != net.params.len() {
            return Err(WalkbackError::Config(format!(
                "checkpoint holds {} parameters, layer shapes need {}",
                rec.params.len(),
                net.params.len()
            )));
        }
        net.params = rec.params;
        Ok(net)
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug)]
pub struct GradTape {
    net_id: u64,
    version: u64,
    step: Option<usize>,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation before the per-step affine (only kept when it applies).
    raw: Vec<Option<Vec<f64>>>,
    /// Pre-activation fed to the activation function.
    pre: Vec<Vec<f64>>,
    /// Layer outputs.
    outputs: Vec<Vec<f64>>,
}

impl GradTape {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl ParamNet {
    /// Builds a network from layer specs with zeroed parameters.
    fn zeroed(specs: &[LayerSpec], affine_steps: Option<usize>) -> Result<Self> {
        if specs.is_empty() {
            return Err(WalkbackError::Config("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (i, spec) in specs.iter().enumerate() {
            if spec.inputs == 0 || spec.outputs == 0 {
                return Err(WalkbackError::Config(format!("layer {i} has a zero-width side")));
            }
            if i > 0 {
                check_dim(specs[i - 1].outputs, spec.inputs, "layer input width")?;
            }
            let w_offset = offset;
            let b_offset = w_offset + spec.inputs * spec.outputs;
            offset = b_offset + spec.outputs;
            layers.push(Layer {
                inputs: spec.inputs,
                outputs: spec.outputs,
                activation: spec.activation,
                w_offset,
                b_offset,
            });
        }
        let mut affine = None;
        let mut total = offset;
        if let Some(steps) = affine_steps {
            if steps == 0 {
                return Err(WalkbackError::Config("per-step affine needs at least one step".into()));
            }
            let widths: Vec<usize> = specs[..specs.len() - 1].iter().map(|s| s.outputs).collect();
            let table = AffineTable { steps, widths, offset };
            total += steps * table.per_step();
            affine = Some(table);
        }
        let mut net = ParamNet {
            layers,
            affine,
            params: vec![0.0; total],
            grads: vec![0.0; total],
            version: 0,
            id: fresh_id(),
        };
        net.reset_affine();
        Ok(net)
    }

    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], affine_steps: Option<usize>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(specs, affine_steps)?;
        for layer in net.layers.clone() {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut net.params[layer.w_offset..layer.b_offset] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    /// Multi-layer perceptron `input -> hidden... -> output`.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        affine_steps: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            specs.push(LayerSpec {
                inputs: prev,
                outputs: h,
                activation: hidden_activation,
            });
            prev = h;
        }
        specs.push(LayerSpec {
            inputs: prev,
            outputs: output,
            activation: output_activation,
        });
        Self::new(&specs, affine_steps, rng)
    }

    fn reset_affine(&mut self) {
        if let Some(table) = self.affine.clone() {
            for step in 0..table.steps {
                for (h, &w) in table.widths.iter().enumerate() {
                    let (g, b) = table.slot(step, h);
                    self.params[g..g + w].fill(1.0);
                    self.params[b..b + w].fill(0.0);
                }
            }
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
            })
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn affine_steps(&self) -> Option<usize> {
        self.affine.as_ref().map(|a| a.steps)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// Overwrites every parameter. Invalidates outstanding tapes.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.params.len(), values.len(), "parameter vector")?;
        self.params.copy_from_slice(values);
        self.version += 1;
        Ok(())
    }

    /// Mutable parameter access for optimizers. Invalidates outstanding tapes.
    pub fn params_and_grads_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.version += 1;
        (&mut self.params, &mut self.grads)
    }

    /// Direct access to one layer's bias, used by operators to set output offsets.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        let last = self.layers[self.layers.len() - 1];
        &mut self.params[last.b_offset..last.b_offset + last.outputs]
    }

    /// Sets the per-step affine of `step` for hidden layer `hidden`.
    pub fn set_step_affine(&mut self, step: usize, hidden: usize, gain: &[f64], bias: &[f64]) -> Result<()> {
        let table = self
            .affine
            .clone()
            .ok_or_else(|| WalkbackError::Usage("network has no per-step affine table".into()))?;
        if step >= table.steps || hidden >= table.widths.len() {
            return Err(WalkbackError::Usage(format!(
                "affine slot ({step}, {hidden}) out of range"
            )));
        }
        let w = table.widths[hidden];
        check_dim(w, gain.len(), "affine gain")?;
        check_dim(w, bias.len(), "affine bias")?;
        let (g, b) = table.slot(step, hidden);
        self.params[g..g + w].copy_from_slice(gain);
        self.params[b..b + w].copy_from_slice(bias);
        self.version += 1;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Steps beyond the table reuse its last entry.
    fn affine_step(&self, step: Option<usize>) -> Option<usize> {
        match (&self.affine, step) {
            (Some(table), Some(s)) => Some(s.min(table.steps - 1)),
            _ => None,
        }
    }

    /// Forward pass without recording; used on sampling paths.
    pub fn eval(&self, input: &[f64], step: Option<usize>) -> Result<Vec<f64>> {
        check_dim(self.input_width(), input.len(), "network input")?;
        let step = self.affine_step(step);
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = self.affine_map(layer, &x);
            if let (Some(s), true) = (step, i + 1 < self.layers.len()) {
                self.apply_step_affine(s, i, &mut z);
            }
            for v in &mut z {
                *v = layer.activation.apply(*v);
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64], step: Option<usize>) -> Result<(Vec<f64>, GradTape)> {
        check_dim(self.input_width(), input.len(), "network input")?;
        let step = self.affine_step(step);
        let n = self.layers.len();
        let mut tape = GradTape {
            net_id: self.id,
            version: self.version,
            step,
            inputs: Vec::with_capacity(n),
            raw: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let raw = self.affine_map(layer, &x);
            let (pre, raw) = match (step, i + 1 < n) {
                (Some(s), true) => {
                    let mut z = raw.clone();
                    self.apply_step_affine(s, i, &mut z);
                    (z, Some(raw))
                }
                _ => (raw, None),
            };
            let out: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            tape.inputs.push(x);
            tape.raw.push(raw);
            tape.pre.push(pre);
            x = out.clone();
            tape.outputs.push(out);
        }
        Ok((x, tape))
    }

    /// Accumulates `d(objective)/d(params)` into the gradient buffer, where
    /// `output_grad` is the objective's gradient w.r.t. the network output.
    /// Returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, tape: GradTape, output_grad: &[f64]) -> Result<Vec<f64>> {
        if tape.net_id != self.id {
            return Err(WalkbackError::Usage("tape was recorded by a different network".into()));
        }
        if tape.version != self.version {
            return Err(WalkbackError::Usage(
                "stale tape: parameters changed after the forward pass".into(),
            ));
        }
        check_dim(self.output_width(), output_grad.len(), "output gradient")?;
        let mut delta = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = self.layers[i];
            let pre = &tape.pre[i];
            let out = &tape.outputs[i];
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(pre[j], out[j]);
            }
            if let (Some(raw), Some(step)) = (&tape.raw[i], tape.step) {
                let table = self.affine.as_ref().expect("tape recorded affine");
                let (g, b) = table.slot(step, i);
                for j in 0..layer.outputs {
                    self.grads[g + j] += delta[j] * raw[j];
                    self.grads[b + j] += delta[j];
                    delta[j] *= self.params[g + j];
                }
            }
            let x = &tape.inputs[i];
            let mut dx = vec![0.0; layer.inputs];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = layer.w_offset + r * layer.inputs;
                for c in 0..layer.inputs {
                    self.grads[row + c] += d * x[c];
                    dx[c] += d * self.params[row + c];
                }
                self.grads[layer.b_offset + r] += d;
            }
            delta = dx;
        }
        Ok(delta)
    }

    fn affine_map(&self, layer: &Layer, x: &[f64]) -> Vec<f64> {
        let w = &self.params[layer.w_offset..layer.b_offset];
        let b = &self.params[layer.b_offset..layer.b_offset + layer.outputs];
        (0..layer.outputs)
            .map(|r| {
                let row = &w[r * layer.inputs..(r + 1) * layer.inputs];
                b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect()
    }

    fn apply_step_affine(&self, step: usize, hidden: usize, z: &mut [f64]) {
        let table = self.affine.as_ref().expect("affine table present");
        let (g, b) = table.slot(step, hidden);
        for (j, v) in z.iter_mut().enumerate() {
            *v = self.params[g + j] * *v + self.params[b + j];
        }
    }
}

/// Adam moment buffers for one network.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = WalkbackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(WalkbackError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Gradient-descent optimizer over a fixed list of networks.
///
/// Steps minimize: callers that maximize a log-likelihood accumulate the
/// negated gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        state: Vec<AdamState>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Optimizer::Sgd { lr })
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(WalkbackError::Config("adam needs beta in [0,1) and eps > 0".into()));
        }
        Ok(Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            state: Vec::new(),
        })
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, 0.9, 0.999, 1e-8),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    /// Applies one update to every network and clears their gradients.
    /// A non-finite gradient aborts before any parameter moves.
    pub fn step(&mut self, nets: &mut [&mut ParamNet]) -> Result<()> {
        for net in nets.iter() {
            if let Some(i) = net.grads.iter().position(|g| !g.is_finite()) {
                return Err(WalkbackError::Training(format!("non-finite gradient at parameter {i}")));
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for net in nets.iter_mut() {
                    let (params, grads) = net.params_and_grads_mut();
                    for (p, g) in params.iter_mut().zip(grads.iter_mut()) {
                        *p -= *lr * *g;
                        *g = 0.0;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                state,
            } => {
                *t += 1;
                if state.len() != nets.len() {
                    *state = nets
                        .iter()
                        .map(|n| AdamState {
                            m: vec![0.0; n.param_count()],
                            v: vec![0.0; n.param_count()],
                        })
                        .collect();
                }
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for (net, st) in nets.iter_mut().zip(state.iter_mut()) {
                    check_dim(st.m.len(), net.param_count(), "adam state")?;
                    let (params, grads) = net.params_and_grads_mut();
                    for i in 0..params.len() {
                        let g = grads[i];
                        st.m[i] = *beta1 * st.m[i] + (1.0 - *beta1) * g;
                        st.v[i] = *beta2 * st.v[i] + (1.0 - *beta2) * g * g;
                        let m_hat = st.m[i] / c1;
                        let v_hat = st.v[i] / c2;
                        params[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                        grads[i] = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_lr(lr: f64) -> Result<()> {
    // zero is allowed so that frozen runs can share the training path
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(WalkbackError::Config(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )))
    }
}
