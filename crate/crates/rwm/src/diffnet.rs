//! Minimal dense networks with reverse-mode differentiation.
//!
//! A [`Network`] is a stack of affine layers with an elementwise activation.
//! Parameters live in one flat vector (per layer: row-major weights, then
//! biases) so optimizer state and gradient transfer stay index-stable.
//! [`Network::forward`] records a [`Tape`] from which both vector-Jacobian
//! products are available: [`Network::grad_input`] (cotangent pulled back to
//! the input) and [`Network::grad_params`] (cotangent pulled back to the flat
//! parameter vector). Each forward builds a fresh tape; nothing is reused
//! across steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Mish,
    Tanh,
    Identity,
}

/// Activation applied to the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Mish => x * softplus(x).tanh(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

impl OutputActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => x,
            OutputActivation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Architecture of a dense network: layer sizes (input, hidden..., output)
/// plus the hidden and output activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer sizes, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec("layer sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total parameter count: sum over layers of `fan_in * fan_out + fan_out`.
    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

}

/// Dense network with a flat, canonically ordered parameter vector.
///
/// Immutable after construction: updates produce new values, so a network can
/// be shared read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
}

/// Evaluation record from one forward pass: the input, every pre-activation,
/// and every post-activation. Sufficient for both gradient queries.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("tape has at least one layer")
    }
}

impl Network {
    /// Initializes weights from `uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))`
    /// and biases to zero, deterministically for a fixed seed.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(seed, "network-init");
        let mut params = Vec::with_capacity(spec.parameter_count());
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Self { spec, params })
    }

    /// All-zero parameters.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.parameter_count();
        Ok(Self {
            spec,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.parameter_count() {
            return Err(Error::DimMismatch {
                context: "network parameters",
                expected: spec.parameter_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self { spec, params })
    }

    /// Same spec, replaced parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.spec.clone(), params)
    }

    /// Zeroes the final layer (weights and biases), leaving earlier layers
    /// untouched. Used to start a corrective controller at exactly zero output.
    pub fn zero_last_layer(mut self) -> Self {
        let last = self.spec.num_layers() - 1;
        let off = self.weight_offset(last);
        for p in &mut self.params[off..] {
            *p = 0.0;
        }
        self
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn weight_offset(&self, layer: usize) -> usize {
        let mut off = 0;
        for w in self.spec.layer_sizes.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        off
    }

    fn apply_act(&self, layer: usize, x: f64) -> f64 {
        if layer == self.spec.num_layers() - 1 {
            self.spec.output_activation.apply(x)
        } else {
            self.spec.activation.apply(x)
        }
    }

    fn act_deriv(&self, layer: usize, x: f64) -> f64 {
        if layer == self.spec.num_layers() - 1 {
            self.spec.output_activation.derivative(x)
        } else {
            self.spec.activation.derivative(x)
        }
    }

    /// Forward pass. Returns the output and the tape for gradient queries.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let nl = self.spec.num_layers();
        let mut pre = Vec::with_capacity(nl);
        let mut post = Vec::with_capacity(nl);
        let mut x: Vec<f64> = input.to_vec();
        for l in 0..nl {
            let fan_in = self.spec.layer_sizes[l];
            let fan_out = self.spec.layer_sizes[l + 1];
            let w_off = self.weight_offset(l);
            let b_off = w_off + fan_in * fan_out;
            let mut z = vec![0.0; fan_out];
            for k in 0..fan_out {
                let row = &self.params[w_off + k * fan_in..w_off + (k + 1) * fan_in];
                let mut acc = self.params[b_off + k];
                for (wkj, xj) in row.iter().zip(&x) {
                    acc += wkj * xj;
                }
                z[k] = acc;
            }
            let y: Vec<f64> = z.iter().map(|&v| self.apply_act(l, v)).collect();
            pre.push(z);
            x = y.clone();
            post.push(y);
        }
        Ok((
            x,
            Tape {
                input: input.to_vec(),
                pre,
                post,
            },
        ))
    }

    /// Shared reverse pass. Returns (input cotangent, parameter cotangent)
    /// depending on which outputs were requested.
    fn backward(
        &self,
        tape: &Tape,
        cotangent: &[f64],
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::DimMismatch {
                context: "cotangent",
                expected: self.output_dim(),
                got: cotangent.len(),
            });
        }
        let nl = self.spec.num_layers();
        let mut param_grad = if want_params {
            Some(vec![0.0; self.params.len()])
        } else {
            None
        };

        // delta = dL/d(pre-activation of layer l)
        let mut delta: Vec<f64> = cotangent
            .iter()
            .zip(&tape.pre[nl - 1])
            .map(|(u, &z)| u * self.act_deriv(nl - 1, z))
            .collect();

        for l in (0..nl).rev() {
            let fan_in = self.spec.layer_sizes[l];
            let fan_out = self.spec.layer_sizes[l + 1];
            let w_off = self.weight_offset(l);
            let b_off = w_off + fan_in * fan_out;
            let layer_input: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };

            if let Some(g) = param_grad.as_mut() {
                for k in 0..fan_out {
                    let dk = delta[k];
                    let row = &mut g[w_off + k * fan_in..w_off + (k + 1) * fan_in];
                    for (gj, xj) in row.iter_mut().zip(layer_input) {
                        *gj += dk * xj;
                    }
                    g[b_off + k] += dk;
                }
            }

            if l == 0 && !want_input {
                break;
            }
            let mut prev = vec![0.0; fan_in];
            for k in 0..fan_out {
                let dk = delta[k];
                let row = &self.params[w_off + k * fan_in..w_off + (k + 1) * fan_in];
                for (pj, wkj) in prev.iter_mut().zip(row) {
                    *pj += dk * wkj;
                }
            }
            if l > 0 {
                for (p, &z) in prev.iter_mut().zip(&tape.pre[l - 1]) {
                    *p *= self.act_deriv(l - 1, z);
                }
            }
            delta = prev;
        }

        let input_grad = if want_input { Some(delta) } else { None };
        Ok((input_grad, param_grad))
    }

    /// Vector-Jacobian product with respect to the input:
    /// `cotangent^T * d(output)/d(input)`.
    pub fn grad_input(&self, tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        let (g, _) = self.backward(tape, cotangent, true, false)?;
        Ok(g.unwrap())
    }

    /// Vector-Jacobian product with respect to the flat parameter vector.
    pub fn grad_params(&self, tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = self.backward(tape, cotangent, false, true)?;
        Ok(g.unwrap())
    }
}

// ── Checkpoint format ────────────────────────────────────────────────

/// Versioned JSON checkpoint. serde_json writes f64 with round-trip
/// precision, so parameters restore bit-exactly.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    spec: NetworkSpec,
    parameters: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Network {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            parameters: self.params.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Self::from_params(ck.spec, ck.parameters)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(parameter_count: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Returns the new network and state;
/// inputs are untouched.
pub fn adam_step(
    net: &Network,
    opt: &OptimizerState,
    gradient: &[f64],
) -> Result<(Network, OptimizerState)> {
    if gradient.len() != net.parameter_count() {
        return Err(Error::DimMismatch {
            context: "adam gradient",
            expected: net.parameter_count(),
            got: gradient.len(),
        });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    let mut new_opt = opt.clone();
    new_opt.step_count = opt.step_count + 1;
    let t = new_opt.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let mut params = net.params.clone();
    for i in 0..params.len() {
        let m = opt.beta1 * opt.first_moment[i] + (1.0 - opt.beta1) * gradient[i];
        let v = opt.beta2 * opt.second_moment[i] + (1.0 - opt.beta2) * gradient[i] * gradient[i];
        new_opt.first_moment[i] = m;
        new_opt.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok((Network { spec: net.spec.clone(), params }, new_opt))
}
