//! The forward model, its prediction loss, and phase-1 training.
//!
//! `F` maps `concat(z, a0)` to the predicted next latent and is conditioned
//! on the base action only. Observations are used as latents directly
//! (identity encoding). Training happens once, on unperturbed data, after
//! which the model is frozen and only queried for predictions and
//! vector-Jacobian products.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baseline::Policy;
use crate::diffnet::{adam_step, Activation, Network, NetworkSpec, OptimizerState, OutputActivation, Tape};
use crate::envs::{clip_to_bounds, Environment};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// Identity encoding: the observation is the latent.
pub fn encode(observation: &[f64]) -> Vec<f64> {
    observation.to_vec()
}

/// Squared Euclidean distance between predicted and observed next latent
/// (sum over components, not mean).
pub fn prediction_loss(z_hat: &[f64], z_next: &[f64]) -> f64 {
    assert_eq!(z_hat.len(), z_next.len(), "prediction_loss dimension mismatch");
    z_hat
        .iter()
        .zip(z_next)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

// ── Forward model ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub net: Network,
    pub latent_dim: usize,
    pub action_dim: usize,
    /// When set, the network predicts `z' - z` and `predict` adds `z` back.
    pub residual: bool,
}

impl ForwardModel {
    pub fn new(net: Network, latent_dim: usize, action_dim: usize, residual: bool) -> Result<Self> {
        if net.input_dim() != latent_dim + action_dim {
            return Err(Error::DimMismatch {
                context: "forward model input",
                expected: latent_dim + action_dim,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != latent_dim {
            return Err(Error::DimMismatch {
                context: "forward model output",
                expected: latent_dim,
                got: net.output_dim(),
            });
        }
        Ok(Self {
            net,
            latent_dim,
            action_dim,
            residual,
        })
    }

    /// `z_hat' = F(z, a0)`.
    pub fn predict(&self, z: &[f64], a0: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_with_tape(z, a0)?.0)
    }

    /// Prediction plus the evaluation tape for subsequent VJP queries.
    pub fn predict_with_tape(&self, z: &[f64], a0: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_dims(z, a0)?;
        let mut input = Vec::with_capacity(z.len() + a0.len());
        input.extend_from_slice(z);
        input.extend_from_slice(a0);
        let (mut out, tape) = self.net.forward(&input)?;
        if self.residual {
            for (o, zi) in out.iter_mut().zip(z) {
                *o += zi;
            }
        }
        Ok((out, tape))
    }

    /// Pulls a cotangent on the prediction back to (d/dz, d/da0).
    pub fn vjp_input(&self, tape: &Tape, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let full = self.net.grad_input(tape, cotangent)?;
        let mut dz = full[..self.latent_dim].to_vec();
        let da = full[self.latent_dim..].to_vec();
        if self.residual {
            // the passthrough z + net(z, a) adds the cotangent to the z part
            for (g, u) in dz.iter_mut().zip(cotangent) {
                *g += u;
            }
        }
        Ok((dz, da))
    }

    fn check_dims(&self, z: &[f64], a0: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::DimMismatch {
                context: "forward model latent",
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        if a0.len() != self.action_dim {
            return Err(Error::DimMismatch {
                context: "forward model action",
                expected: self.action_dim,
                got: a0.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FmCheckpoint {
    version: u32,
    latent_dim: usize,
    action_dim: usize,
    residual: bool,
    network: serde_json::Value,
}

const FM_CHECKPOINT_VERSION: u32 = 1;

impl ForwardModel {
    pub fn to_json(&self) -> Result<String> {
        let network: serde_json::Value = serde_json::from_str(&self.net.to_json()?)?;
        Ok(serde_json::to_string(&FmCheckpoint {
            version: FM_CHECKPOINT_VERSION,
            latent_dim: self.latent_dim,
            action_dim: self.action_dim,
            residual: self.residual,
            network,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: FmCheckpoint = serde_json::from_str(s)?;
        if ck.version != FM_CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported forward-model checkpoint version {}",
                ck.version
            )));
        }
        let net = Network::from_json(&ck.network.to_string())?;
        Self::new(net, ck.latent_dim, ck.action_dim, ck.residual)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

// ── Replay buffer ────────────────────────────────────────────────────

/// One executed environment step with everything the two controllers saw.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub z: Vec<f64>,
    pub a0: Vec<f64>,
    pub a_c: Vec<f64>,
    pub a_eff: Vec<f64>,
    pub z_next: Vec<f64>,
    pub z_hat_next: Option<Vec<f64>>,
    pub reward: f64,
    pub t: u64,
    pub p: Vec<f64>,
}

impl TransitionRecord {
    pub fn is_finite(&self) -> bool {
        let vecs = [&self.z, &self.a0, &self.a_c, &self.a_eff, &self.z_next, &self.p];
        vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.reward.is_finite()
            && self
                .z_hat_next
                .as_ref()
                .map_or(true, |v| v.iter().all(|x| x.is_finite()))
    }

    pub fn is_nominal(&self) -> bool {
        self.p.iter().all(|&x| x == 0.0)
    }
}

/// Bounded FIFO of transitions; insertion order preserved, oldest evicted
/// first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<TransitionRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    pub fn get(&self, i: usize) -> Option<&TransitionRecord> {
        self.records.get(i)
    }

    /// CSV dump, one record per row. Floats are written in shortest
    /// round-trip form, so dump + restore reproduces values exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let first = match self.records.front() {
            Some(r) => r,
            None => return out,
        };
        let (n, m) = (first.z.len(), first.a0.len());
        let mut cols: Vec<String> = Vec::new();
        for i in 0..n {
            cols.push(format!("z{i}"));
        }
        for i in 0..m {
            cols.push(format!("a0_{i}"));
        }
        for i in 0..m {
            cols.push(format!("ac_{i}"));
        }
        for i in 0..m {
            cols.push(format!("aeff_{i}"));
        }
        for i in 0..n {
            cols.push(format!("znext{i}"));
        }
        for i in 0..n {
            cols.push(format!("zhat{i}"));
        }
        cols.push("reward".into());
        cols.push("t".into());
        for i in 0..m {
            cols.push(format!("p{i}"));
        }
        out.push_str(&cols.join(","));
        out.push('\n');
        for r in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(cols.len());
            for v in r.z.iter().chain(&r.a0).chain(&r.a_c).chain(&r.a_eff).chain(&r.z_next) {
                row.push(format!("{v}"));
            }
            match &r.z_hat_next {
                Some(zh) => row.extend(zh.iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat(String::new()).take(n)),
            }
            row.push(format!("{}", r.reward));
            row.push(format!("{}", r.t));
            row.extend(r.p.iter().map(|v| format!("{v}")));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, capacity: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = match lines.next() {
            Some(h) => h,
            None => return Ok(Self::new(capacity)),
        };
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('z') && c[1..].parse::<usize>().is_ok()).count();
        let m = cols
            .iter()
            .filter(|c| c.starts_with("a0_") && c[3..].parse::<usize>().is_ok())
            .count();
        if n == 0 || m == 0 {
            return Err(Error::Parse(format!("unrecognized buffer header: {header}")));
        }
        let expected_cols = 3 * n + 3 * m + 2 + m;
        let mut buf = Self::new(capacity);
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected_cols {
                return Err(Error::Parse(format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 2,
                    expected_cols,
                    fields.len()
                )));
            }
            let fval = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))
            };
            let take = |fields: &[&str], start: usize, len: usize| -> Result<Vec<f64>> {
                fields[start..start + len].iter().map(|s| fval(s)).collect()
            };
            let mut at = 0;
            let z = take(&fields, at, n)?;
            at += n;
            let a0 = take(&fields, at, m)?;
            at += m;
            let a_c = take(&fields, at, m)?;
            at += m;
            let a_eff = take(&fields, at, m)?;
            at += m;
            let z_next = take(&fields, at, n)?;
            at += n;
            let z_hat_next = if fields[at].is_empty() {
                None
            } else {
                Some(take(&fields, at, n)?)
            };
            at += n;
            let reward = fval(fields[at])?;
            at += 1;
            let t: u64 = fields[at]
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))?;
            at += 1;
            let p = take(&fields, at, m)?;
            buf.push(TransitionRecord {
                z,
                a0,
                a_c,
                a_eff,
                z_next,
                z_hat_next,
                reward,
                t,
                p,
            });
        }
        Ok(buf)
    }
}

// ── Phase-1 data gathering ───────────────────────────────────────────

/// Rolls the base policy with additive exploration noise and no perturbation,
/// recording the executed action as the base action. The noise makes the
/// action's effect on the next state identifiable; without it a deterministic
/// policy visits a measure-zero slice of the action space.
pub fn gather_nominal(
    env: &mut dyn Environment,
    policy: &dyn Policy,
    episodes: usize,
    exploration_std: f64,
    seed: u64,
) -> Result<ReplayBuffer> {
    let (lo, hi) = env.action_bounds();
    let mut buf = ReplayBuffer::new(episodes * env.episode_len() as usize);
    let mut noise = rng_for(seed, "phase1-explore");
    for ep in 0..episodes {
        let mut obs = env.reset(derive_seed(seed, &format!("phase1-ep{ep}")));
        for t in 0..env.episode_len() {
            let mut a = policy.action(&obs)?;
            if exploration_std > 0.0 {
                for ai in &mut a {
                    *ai += exploration_std * standard_normal(&mut noise);
                }
            }
            let a = clip_to_bounds(&a, lo, hi);
            let (next_obs, reward) = env.step(&a)?;
            buf.push(TransitionRecord {
                z: encode(&obs),
                a0: a.clone(),
                a_c: vec![0.0; a.len()],
                a_eff: a.clone(),
                z_next: encode(&next_obs),
                z_hat_next: None,
                reward,
                t,
                p: vec![0.0; a.len()],
            });
            obs = next_obs;
        }
    }
    Ok(buf)
}

fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardModelConfig {
    pub hidden: Vec<usize>,
    pub residual: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Opt-in for training on perturbed transitions (domain-randomized
    /// baseline). The standard protocol requires nominal data only.
    pub allow_perturbed_data: bool,
}

impl Default for ForwardModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            residual: false,
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 64,
            allow_perturbed_data: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss on the training split after each epoch.
    pub train_mse: Vec<f64>,
    /// Mean per-sample loss on the held-out tail after each epoch.
    pub val_mse: Vec<f64>,
    pub train_count: usize,
    pub val_count: usize,
}

fn mean_loss(fm: &ForwardModel, records: &[&TransitionRecord]) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let pred = fm.predict(&r.z, &r.a0)?;
        total += prediction_loss(&pred, &r.z_next);
    }
    Ok(total / records.len().max(1) as f64)
}

/// Minibatch training of F on the buffer, deterministic for a fixed seed.
/// The last 10% of the buffer is held out for validation and never trained
/// on. Gradient direction is the ordinary one: predictions move toward
/// observations.
pub fn train_forward_model(
    buffer: &ReplayBuffer,
    latent_dim: usize,
    action_dim: usize,
    cfg: &ForwardModelConfig,
    seed: u64,
) -> Result<(ForwardModel, TrainReport)> {
    if buffer.is_empty() {
        return Err(Error::EmptyInput("replay buffer"));
    }
    if buffer.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "buffer has {} transitions, batch size {}",
            buffer.len(),
            cfg.batch_size
        )));
    }
    if !cfg.allow_perturbed_data {
        if let Some(i) = buffer.iter().position(|r| !r.is_nominal()) {
            return Err(Error::InvalidSpec(format!(
                "transition {i} was gathered under perturbation; forward-model \
                 training requires nominal data"
            )));
        }
    }
    for (i, r) in buffer.iter().enumerate() {
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("transition {i}")));
        }
        if r.z.len() != latent_dim || r.a0.len() != action_dim {
            return Err(Error::DimMismatch {
                context: "buffer transition shape",
                expected: latent_dim + action_dim,
                got: r.z.len() + r.a0.len(),
            });
        }
    }

    let mut sizes = vec![latent_dim + action_dim];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(latent_dim);
    let spec = NetworkSpec::new(sizes, Activation::Mish, OutputActivation::Identity)?;
    let mut net = Network::init(spec, derive_seed(seed, "fm-init"))?;
    let mut opt = OptimizerState::new(net.parameter_count(), cfg.learning_rate);

    let val_count = if buffer.len() >= 10 { buffer.len() / 10 } else { 0 };
    let train_count = buffer.len() - val_count;
    let all: Vec<&TransitionRecord> = buffer.iter().collect();
    let (train, val) = all.split_at(train_count);

    let mut report = TrainReport {
        train_mse: Vec::with_capacity(cfg.epochs),
        val_mse: Vec::with_capacity(cfg.epochs),
        train_count,
        val_count,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        // exponential decay to 1% of the base rate; flat Adam stalls well
        // above the reachable loss floor on smooth dynamics
        let progress = epoch as f64 / (cfg.epochs - 1).max(1) as f64;
        opt.learning_rate = cfg.learning_rate * 0.01f64.powf(progress);
        let mut rng = rng_for(seed, &format!("fm-epoch-{epoch}"));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; net.parameter_count()];
            for &i in chunk {
                let r = train[i];
                let fm = ForwardModel {
                    net: net.clone(),
                    latent_dim,
                    action_dim,
                    residual: cfg.residual,
                };
                let (pred, tape) = fm.predict_with_tape(&r.z, &r.a0)?;
                let cot: Vec<f64> = pred
                    .iter()
                    .zip(&r.z_next)
                    .map(|(a, b)| 2.0 * (a - b))
                    .collect();
                let g = net.grad_params(&tape, &cot)?;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            let stepped = adam_step(&net, &opt, &grad).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!(
                    "forward-model training diverged at epoch {epoch}"
                )),
                other => other,
            })?;
            net = stepped.0;
            opt = stepped.1;
        }
        let fm = ForwardModel {
            net: net.clone(),
            latent_dim,
            action_dim,
            residual: cfg.residual,
        };
        let train_loss = mean_loss(&fm, train)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "forward-model training diverged at epoch {epoch}"
            )));
        }
        report.train_mse.push(train_loss);
        report
            .val_mse
            .push(if val.is_empty() { f64::NAN } else { mean_loss(&fm, val)? });
    }

    let fm = ForwardModel::new(net, latent_dim, action_dim, cfg.residual)?;
    Ok((fm, report))
}

/// Exact linear dynamics `z' = Az + Ba` packed as a single-layer network:
/// weight rows `[A | B]`, zero bias. Shares the differentiation code path
/// with learned models, which makes it the reference oracle for every
/// Jacobian-based computation.
pub fn exact_linear_model(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> ForwardModel {
    let n = a.nrows();
    let m = b.ncols();
    let spec = NetworkSpec::new(
        vec![n + m, n],
        Activation::Identity,
        OutputActivation::Identity,
    )
    .expect("two-layer-size spec");
    let mut params = Vec::with_capacity((n + m) * n + n);
    for i in 0..n {
        for j in 0..n {
            params.push(a[(i, j)]);
        }
        for j in 0..m {
            params.push(b[(i, j)]);
        }
    }
    params.extend(std::iter::repeat(0.0).take(n));
    ForwardModel::new(
        Network::from_params(spec, params).expect("consistent parameter count"),
        n,
        m,
        false,
    )
    .expect("consistent dims")
}

/// Open-loop reference rollout: repeatedly apply F under the base policy's
/// own actions, starting from an observed latent.
pub fn rollout_reference(
    fm: &ForwardModel,
    z: &[f64],
    policy: &dyn Policy,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("rollout horizon must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut cur = z.to_vec();
    for _ in 0..k {
        let a0 = policy.action(&cur)?;
        cur = fm.predict(&cur, &a0)?;
        out.push(cur.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{ConstantPolicy, PdGains, PdPolicy};
    use crate::envs::{LinearPlant, PointMassConfig, PointMassEnv};
    use crate::rng::rng_for;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn encode_is_identity() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(encode(&s), s.to_vec());
        assert_eq!(encode(&encode(&s)), encode(&s));
        assert_eq!(encode(&s).len(), s.len());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(prediction_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(prediction_loss(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
        let (u, v) = ([0.3, -0.7, 2.0], [1.1, 0.0, -0.4]);
        assert_eq!(prediction_loss(&u, &v), prediction_loss(&v, &u));
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_definite(
            a in proptest::collection::vec(-10.0f64..10.0, 3),
            b in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let l = prediction_loss(&a, &b);
            prop_assert!(l >= 0.0);
            if a == b {
                prop_assert_eq!(l, 0.0);
            } else {
                prop_assert!(l > 0.0);
            }
        }
    }

    fn zero_model(n: usize, m: usize) -> ForwardModel {
        let spec = NetworkSpec::new(
            vec![n + m, 8, n],
            Activation::Mish,
            OutputActivation::Identity,
        )
        .unwrap();
        ForwardModel::new(Network::zeros(spec).unwrap(), n, m, false).unwrap()
    }

    #[test]
    fn zero_weight_model_predicts_zero() {
        let fm = zero_model(3, 2);
        assert_eq!(fm.predict(&[1.0, -1.0, 0.5], &[0.3, 0.3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn predict_checks_dims() {
        let fm = zero_model(3, 2);
        assert!(fm.predict(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(fm.predict(&[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn residual_mode_offsets_by_current_latent() {
        let n = 3;
        let spec = NetworkSpec::new(
            vec![n + 2, 8, n],
            Activation::Mish,
            OutputActivation::Identity,
        )
        .unwrap();
        let fm = ForwardModel::new(Network::zeros(spec).unwrap(), n, 2, true).unwrap();
        let z = [0.5, -1.0, 2.0];
        assert_eq!(fm.predict(&z, &[0.0, 0.0]).unwrap(), z.to_vec());
    }

    #[test]
    fn vjp_splits_latent_and_action_parts() {
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.0, 0.8]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.9]);
        let fm = exact_linear_model(&a, &b);
        let (_, tape) = fm.predict_with_tape(&[0.4, -0.2], &[0.1, 0.3]).unwrap();
        let u = [1.0, -2.0];
        let (dz, da) = fm.vjp_input(&tape, &u).unwrap();
        // for linear dynamics the pullbacks are A^T u and B^T u
        let ut = DVector::from_row_slice(&u);
        let expect_dz = a.transpose() * &ut;
        let expect_da = b.transpose() * &ut;
        for i in 0..2 {
            assert!((dz[i] - expect_dz[i]).abs() < 1e-12);
            assert!((da[i] - expect_da[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn buffer_is_bounded_fifo() {
        let mut buf = ReplayBuffer::new(3);
        for t in 0..5u64 {
            buf.push(TransitionRecord {
                z: vec![t as f64],
                a0: vec![0.0],
                a_c: vec![0.0],
                a_eff: vec![0.0],
                z_next: vec![0.0],
                z_hat_next: None,
                reward: 0.0,
                t,
                p: vec![0.0],
            });
        }
        assert_eq!(buf.len(), 3);
        let ts: Vec<u64> = buf.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![2, 3, 4], "oldest records evicted first");
    }

    #[test]
    fn buffer_csv_roundtrip_exact() {
        let mut buf = ReplayBuffer::new(10);
        let mut rng = rng_for(3, "csv-test");
        for t in 0..6u64 {
            buf.push(TransitionRecord {
                z: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                a0: (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                a_c: (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                a_eff: (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                z_next: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                z_hat_next: if t % 2 == 0 {
                    Some((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                } else {
                    None
                },
                reward: rng.gen_range(-1.0..0.0),
                t,
                p: (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            });
        }
        let csv = buf.to_csv();
        let restored = ReplayBuffer::from_csv(&csv, 10).unwrap();
        assert_eq!(restored.len(), buf.len());
        for (a, b) in buf.iter().zip(restored.iter()) {
            assert_eq!(a, b, "round trip must reproduce records exactly");
        }
        // and the re-dump is byte-identical
        assert_eq!(csv, restored.to_csv());
    }

    fn single_transition_buffer() -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(64);
        for _ in 0..64 {
            buf.push(TransitionRecord {
                z: vec![0.3, -0.2],
                a0: vec![0.5],
                a_c: vec![0.0],
                a_eff: vec![0.5],
                z_next: vec![0.1, 0.4],
                z_hat_next: None,
                reward: 0.0,
                t: 0,
                p: vec![0.0],
            });
        }
        buf
    }

    #[test]
    fn memorizes_a_single_repeated_transition() {
        let cfg = ForwardModelConfig {
            hidden: vec![16],
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-2,
            ..ForwardModelConfig::default()
        };
        let (fm, report) = train_forward_model(&single_transition_buffer(), 2, 1, &cfg, 0).unwrap();
        let final_loss = *report.train_mse.last().unwrap();
        assert!(final_loss < 1e-6, "memorization loss {final_loss}");
        let pred = fm.predict(&[0.3, -0.2], &[0.5]).unwrap();
        assert!(prediction_loss(&pred, &[0.1, 0.4]) < 1e-5);
    }

    #[test]
    fn training_rejects_bad_input() {
        let cfg = ForwardModelConfig::default();
        assert!(train_forward_model(&ReplayBuffer::new(4), 2, 1, &cfg, 0).is_err());

        let mut perturbed = single_transition_buffer();
        let mut r = perturbed.get(0).unwrap().clone();
        r.p = vec![0.3];
        perturbed.push(r);
        let err = train_forward_model(&perturbed, 2, 1, &cfg, 0);
        assert!(err.is_err(), "perturbed data must be rejected by default");
        let relaxed = ForwardModelConfig {
            allow_perturbed_data: true,
            epochs: 1,
            batch_size: 16,
            hidden: vec![8],
            ..ForwardModelConfig::default()
        };
        assert!(train_forward_model(&perturbed, 2, 1, &relaxed, 0).is_ok());
    }

    #[test]
    fn training_detects_divergence() {
        // Adam caps the per-step move at the learning rate, so only an lr
        // near the f64 overflow range annihilates the parameters
        let cfg = ForwardModelConfig {
            hidden: vec![8],
            learning_rate: 1e150,
            epochs: 5,
            batch_size: 16,
            ..ForwardModelConfig::default()
        };
        let err = train_forward_model(&single_transition_buffer(), 2, 1, &cfg, 0);
        match err {
            Err(Error::NonFinite(msg)) => {
                assert!(msg.contains("diverged"), "diagnostic was: {msg}")
            }
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    fn linear_buffer(noise_std: f64, count: usize, seed: u64) -> (LinearPlant, ReplayBuffer) {
        let plant = LinearPlant::new(
            DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.1, 0.7]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.9]),
            noise_std,
        )
        .unwrap();
        let mut buf = ReplayBuffer::new(count);
        let mut rng = rng_for(seed, "linear-data");
        let mut noise_rng = rng_for(seed, "linear-noise");
        for t in 0..count as u64 {
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z_next = crate::envs::linear_step(&plant, &z, &a, &mut noise_rng).unwrap();
            buf.push(TransitionRecord {
                z,
                a0: a.clone(),
                a_c: vec![0.0; 2],
                a_eff: a,
                z_next,
                z_hat_next: None,
                reward: 0.0,
                t,
                p: vec![0.0; 2],
            });
        }
        (plant, buf)
    }

    #[test]
    fn learns_noiseless_linear_dynamics() {
        // the worst-case held-out pair sits at the corner of the sampled
        // region, so sample density matters more than epochs here
        let (plant, buf) = linear_buffer(0.0, 8000, 5);
        let cfg = ForwardModelConfig {
            hidden: vec![32, 32],
            epochs: 150,
            learning_rate: 3e-3,
            ..ForwardModelConfig::default()
        };
        let (fm, report) = train_forward_model(&buf, 2, 2, &cfg, 5).unwrap();
        assert!(*report.val_mse.last().unwrap() < 1e-3);
        // held-out pairs the model never saw
        let mut rng = rng_for(99, "holdout");
        let mut unused = rng_for(0, "no-noise");
        for _ in 0..50 {
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let truth = crate::envs::linear_step(&plant, &z, &a, &mut unused).unwrap();
            let pred = fm.predict(&z, &a).unwrap();
            let err = truth
                .iter()
                .zip(&pred)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-2, "held-out prediction error {err}");
        }
    }

    #[test]
    fn noisy_linear_training_reaches_noise_floor() {
        let noise_std = 0.05;
        let (_, buf) = linear_buffer(noise_std, 3000, 6);
        let cfg = ForwardModelConfig {
            hidden: vec![32, 32],
            epochs: 50,
            ..ForwardModelConfig::default()
        };
        let (_, report) = train_forward_model(&buf, 2, 2, &cfg, 6).unwrap();
        // irreducible loss is noise_std^2 per component, summed over n=2
        let floor = noise_std * noise_std * 2.0;
        let val = *report.val_mse.last().unwrap();
        assert!(val < 2.0 * floor, "val mse {val} vs noise floor {floor}");
        assert!(val > 0.5 * floor, "val mse {val} suspiciously below the floor");
    }

    #[test]
    fn learns_pointmass_nominal_dynamics() {
        let cfg = PointMassConfig {
            randomize_start: true,
            ..PointMassConfig::default()
        };
        let mut env = PointMassEnv::new(cfg.clone()).unwrap();
        let pd = PdPolicy::new(PdGains::default(), cfg.action_low, cfg.action_high).unwrap();
        let buf = gather_nominal(&mut env, &pd, 25, 0.3, 11).unwrap();
        assert_eq!(buf.len(), 5000);
        let (_, report) =
            train_forward_model(&buf, 6, 2, &ForwardModelConfig::default(), 11).unwrap();
        let val = *report.val_mse.last().unwrap();
        assert!(val < 1e-3, "point-mass validation mse {val}");
    }

    #[test]
    fn training_is_deterministic() {
        let (_, buf) = linear_buffer(0.0, 500, 7);
        let cfg = ForwardModelConfig {
            hidden: vec![16],
            epochs: 3,
            ..ForwardModelConfig::default()
        };
        let (fm1, r1) = train_forward_model(&buf, 2, 2, &cfg, 7).unwrap();
        let (fm2, r2) = train_forward_model(&buf, 2, 2, &cfg, 7).unwrap();
        assert_eq!(fm1.net.params(), fm2.net.params());
        assert_eq!(r1.train_mse, r2.train_mse);
    }

    #[test]
    fn rollout_base_case_equals_predict() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.9]);
        let b = DMatrix::identity(2, 2);
        let fm = exact_linear_model(&a, &b);
        let policy = ConstantPolicy { a: vec![0.2, -0.1] };
        let z = [1.0, -1.0];
        let roll = rollout_reference(&fm, &z, &policy, 1).unwrap();
        assert_eq!(roll.len(), 1);
        assert_eq!(roll[0], fm.predict(&z, &[0.2, -0.1]).unwrap());
    }

    #[test]
    fn zero_model_rolls_out_zeros() {
        let fm = zero_model(2, 2);
        let policy = ConstantPolicy { a: vec![0.5, 0.5] };
        let roll = rollout_reference(&fm, &[1.0, 1.0], &policy, 4).unwrap();
        for step in roll {
            assert_eq!(step, vec![0.0, 0.0]);
        }
    }

    /// Linear state feedback used only to exercise the closed-form rollout.
    struct LinearFeedback {
        k: DMatrix<f64>,
    }

    impl Policy for LinearFeedback {
        fn action(&self, z: &[f64]) -> crate::error::Result<Vec<f64>> {
            let zv = DVector::from_row_slice(z);
            Ok((&self.k * zv).iter().copied().collect())
        }

        fn action_dim(&self) -> usize {
            self.k.nrows()
        }
    }

    #[test]
    fn rollout_matches_closed_loop_matrix_powers() {
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.05, 0.0, 0.75]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.1, 0.9]);
        let k = DMatrix::from_row_slice(2, 2, &[-0.2, 0.0, 0.05, -0.15]);
        let fm = exact_linear_model(&a, &b);
        let policy = LinearFeedback { k: k.clone() };
        let z0 = DVector::from_row_slice(&[0.7, -0.4]);
        let roll = rollout_reference(&fm, z0.as_slice(), &policy, 5).unwrap();
        let closed = &a + &b * &k;
        let mut expected = z0.clone();
        for step in roll {
            expected = &closed * expected;
            for i in 0..2 {
                assert!(
                    (step[i] - expected[i]).abs() < 1e-12,
                    "{} vs {}",
                    step[i],
                    expected[i]
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (_, buf) = linear_buffer(0.0, 200, 8);
        let cfg = ForwardModelConfig {
            hidden: vec![8],
            epochs: 2,
            ..ForwardModelConfig::default()
        };
        let (fm, _) = train_forward_model(&buf, 2, 2, &cfg, 8).unwrap();
        let json = fm.to_json().unwrap();
        let restored = ForwardModel::from_json(&json).unwrap();
        assert_eq!(fm.net.params(), restored.net.params());
        assert_eq!(fm.latent_dim, restored.latent_dim);
        assert_eq!(fm.residual, restored.residual);
    }
}
