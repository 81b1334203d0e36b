//! Online reflex adaptation against the frozen forward model.
//!
//! The reflex controller is a small network producing a corrective action
//! `a_c = pi_c(z)` added to the frozen base action. Its parameters are the
//! only thing that changes online. Each step, the discrepancy between the
//! model's prediction and the observed next state is pushed back through the
//! frozen model to the action input, the sign is inverted, and the result is
//! transferred to the controller's parameters through its own tape: the base
//! policy's world view stays fixed while the controller bends the executed
//! action until observations match predictions again.
//!
//! Sign conventions, spelled out once: the error is `e = z_next - z_hat`,
//! the model-side loss gradient is `d||e||^2/da0 = -2 (dF/da)^T e`, and the
//! transferred cotangent is its negation `g = +2 (dF/da)^T e`. A descent step
//! on `g`'s parameter pullback moves `pi_c(z)` in direction `-g`, which to
//! first order moves the realized next state toward the prediction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::baseline::Policy;
use crate::diffnet::{
    adam_step, Activation, Network, NetworkSpec, OptimizerState, OutputActivation,
};
use crate::error::{Error, Result};
use crate::worldmodel::ForwardModel;

/// Default reflex learning rate.
pub const DEFAULT_ETA_C: f64 = 3e-4;
/// Default multi-step window length.
pub const DEFAULT_HORIZON: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReflexConfig {
    pub hidden: Vec<usize>,
    pub eta_c: f64,
    pub horizon: usize,
}

impl Default for ReflexConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            eta_c: DEFAULT_ETA_C,
            horizon: DEFAULT_HORIZON,
        }
    }
}

/// `-d||e||^2/da0`: the loss gradient at the action input of the frozen
/// model, sign-inverted. Equal to `2 (dF/da)^T e`.
pub fn reflex_gradient(
    fm: &ForwardModel,
    z: &[f64],
    a0: &[f64],
    e: &[f64],
) -> Result<Vec<f64>> {
    if e.len() != fm.latent_dim {
        return Err(Error::DimMismatch {
            context: "reflex error vector",
            expected: fm.latent_dim,
            got: e.len(),
        });
    }
    let (_, tape) = fm.predict_with_tape(z, a0)?;
    let cotangent: Vec<f64> = e.iter().map(|x| 2.0 * x).collect();
    let (_, da) = fm.vjp_input(&tape, &cotangent)?;
    if da.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("reflex gradient".into()));
    }
    Ok(da)
}

/// Per-update diagnostics for the metrics log.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateDiag {
    /// `||e||^2` summed across the window that produced the update.
    pub loss: f64,
    /// Norm of the transferred action-space gradient(s).
    pub grad_norm: f64,
}

type Triple = (Vec<f64>, Vec<f64>, Vec<f64>);

/// The online-adapted corrective controller.
#[derive(Debug, Clone)]
pub struct ReflexController {
    net: Network,
    opt: OptimizerState,
    horizon: usize,
    window: VecDeque<Triple>,
    update_count: u64,
}

impl ReflexController {
    /// Builds a controller whose output starts exactly at zero: hidden layers
    /// get the usual random init, the final layer is zeroed.
    pub fn new(latent_dim: usize, action_dim: usize, cfg: &ReflexConfig, seed: u64) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be >= 1".into()));
        }
        if !(cfg.eta_c > 0.0 && cfg.eta_c.is_finite()) {
            return Err(Error::InvalidConfig("eta_c must be positive".into()));
        }
        let mut sizes = vec![latent_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(action_dim);
        let spec = NetworkSpec::new(sizes, Activation::Tanh, OutputActivation::Identity)?;
        let net = Network::init(spec, seed)?.zero_last_layer();
        let opt = OptimizerState::new(net.parameter_count(), cfg.eta_c);
        Ok(Self {
            net,
            opt,
            horizon: cfg.horizon,
            window: VecDeque::with_capacity(cfg.horizon),
            update_count: 0,
        })
    }

    pub fn action(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(z)?.0)
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    /// Clears the multi-step window, e.g. at an episode boundary where
    /// consecutive observations stop being one transition apart.
    pub fn clear_window(&mut self) {
        self.window.clear();
    }

    /// Feeds one observed transition and performs one update: multi-step once
    /// the window is full, single-step before that.
    pub fn record_and_update(
        &mut self,
        fm: &ForwardModel,
        z: &[f64],
        a0: &[f64],
        z_next: &[f64],
    ) -> Result<UpdateDiag> {
        if self.window.len() == self.horizon {
            self.window.pop_front();
        }
        self.window
            .push_back((z.to_vec(), a0.to_vec(), z_next.to_vec()));
        if self.window.len() == self.horizon {
            self.horizon_update(fm)
        } else {
            let (z, a0, z_next) = self.window.back().cloned().expect("just pushed");
            self.single_step_update(fm, &z, &a0, &z_next)
        }
    }

    /// One-transition update: compute the sign-inverted model gradient and
    /// transfer it to the controller parameters.
    pub fn single_step_update(
        &mut self,
        fm: &ForwardModel,
        z: &[f64],
        a0: &[f64],
        z_next: &[f64],
    ) -> Result<UpdateDiag> {
        let z_hat = fm.predict(z, a0)?;
        let e: Vec<f64> = z_next.iter().zip(&z_hat).map(|(a, b)| a - b).collect();
        let g = reflex_gradient(fm, z, a0, &e)?;
        let diag = UpdateDiag {
            loss: e.iter().map(|x| x * x).sum(),
            grad_norm: g.iter().map(|x| x * x).sum::<f64>().sqrt(),
        };
        self.apply_action_gradients(&[(z.to_vec(), g)])?;
        Ok(diag)
    }

    /// Multi-step update over the sliding window. Falls back to a single-step
    /// update when the window is not full yet.
    pub fn horizon_update(&mut self, fm: &ForwardModel) -> Result<UpdateDiag> {
        if self.window.len() < self.horizon {
            let (z, a0, z_next) = match self.window.back().cloned() {
                Some(t) => t,
                None => return Err(Error::EmptyInput("reflex window")),
            };
            return self.single_step_update(fm, &z, &a0, &z_next);
        }
        let triples: Vec<Triple> = self.window.iter().cloned().collect();
        let (gradients, loss) = horizon_action_gradients(fm, &triples)?;
        let grad_norm = gradients
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        self.apply_action_gradients(&gradients)?;
        Ok(UpdateDiag { loss, grad_norm })
    }

    /// Pulls each action-space gradient back through the controller at the
    /// state where that action was produced, sums, and takes one Adam step.
    fn apply_action_gradients(&mut self, items: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let mut param_grad = vec![0.0; self.net.parameter_count()];
        for (z, g) in items {
            let (_, tape) = self.net.forward(z)?;
            let pg = self.net.grad_params(&tape, g)?;
            for (acc, v) in param_grad.iter_mut().zip(&pg) {
                *acc += v;
            }
        }
        let (net, opt) = adam_step(&self.net, &self.opt, &param_grad)?;
        self.net = net;
        self.opt = opt;
        self.update_count += 1;
        Ok(())
    }
}

/// Open-loop rollout gradients for a full window: predictions are composed
/// from the oldest state using the recorded base actions, the summed
/// prediction loss is differentiated with respect to each recorded action,
/// and the signs are inverted. Returns ((z_i, g_i) per step, summed loss).
pub fn horizon_action_gradients(
    fm: &ForwardModel,
    window: &[Triple],
) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, f64)> {
    if window.is_empty() {
        return Err(Error::EmptyInput("reflex window"));
    }
    let h = window.len();
    let mut tapes = Vec::with_capacity(h);
    let mut errors = Vec::with_capacity(h);
    let mut loss = 0.0;
    let mut cur = window[0].0.clone();
    for (z_obs, a0, z_next) in window {
        let _ = z_obs;
        let (pred, tape) = fm.predict_with_tape(&cur, a0)?;
        let e: Vec<f64> = z_next.iter().zip(&pred).map(|(a, b)| a - b).collect();
        loss += e.iter().map(|x| x * x).sum::<f64>();
        tapes.push(tape);
        errors.push(e);
        cur = pred;
    }

    // reverse pass: cotangent on the i-th prediction is the direct loss term
    // plus whatever flows back from later steps through the latent slot
    let mut gradients: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); h];
    let mut carry: Vec<f64> = vec![0.0; fm.latent_dim];
    for i in (0..h).rev() {
        let mut cot: Vec<f64> = errors[i].iter().map(|x| -2.0 * x).collect();
        for (c, k) in cot.iter_mut().zip(&carry) {
            *c += k;
        }
        let (dz, da) = fm.vjp_input(&tapes[i], &cot)?;
        let g: Vec<f64> = da.iter().map(|x| -x).collect();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("horizon gradient".into()));
        }
        gradients[i] = (window[i].0.clone(), g);
        carry = if i > 0 { dz } else { vec![0.0; fm.latent_dim] };
    }
    Ok((gradients, loss))
}

/// `(a0, a_c, a0 + a_c)`: base action, correction, and their raw sum before
/// perturbation or clipping.
pub fn total_action(
    base: &dyn Policy,
    reflex: Option<&ReflexController>,
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let a0 = base.action(z)?;
    let ac = match reflex {
        Some(c) => c.action(z)?,
        None => vec![0.0; a0.len()],
    };
    if ac.len() != a0.len() {
        return Err(Error::DimMismatch {
            context: "reflex action",
            expected: a0.len(),
            got: ac.len(),
        });
    }
    let total = a0.iter().zip(&ac).map(|(x, y)| x + y).collect();
    Ok((a0, ac, total))
}

/// Clips the combined action into bounds, reporting whether clipping bit.
pub fn clip_total(total: &[f64], lo: f64, hi: f64) -> (Vec<f64>, bool) {
    let clipped: Vec<f64> = total.iter().map(|&x| x.clamp(lo, hi)).collect();
    let hit = clipped.iter().zip(total).any(|(c, t)| c != t);
    (clipped, hit)
}

// ── Analytic reflex law ──────────────────────────────────────────────

/// The closed-form corrective law `a_c = -eta (dF/da)^T e_prev`, using the
/// previous step's observed error (the current one is not yet observable).
#[derive(Debug, Clone)]
pub struct AnalyticReflex {
    pub eta: f64,
    prev_error: Option<Vec<f64>>,
}

impl AnalyticReflex {
    /// `eta` must satisfy the contraction condition `eta < 1 / L^2` for the
    /// supplied Lipschitz estimate of `dF/da`.
    pub fn new(eta: f64, lipschitz_estimate: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig("analytic eta must be positive".into()));
        }
        if !(lipschitz_estimate > 0.0) {
            return Err(Error::InvalidConfig(
                "Lipschitz estimate must be positive".into(),
            ));
        }
        if eta >= 1.0 / (lipschitz_estimate * lipschitz_estimate) {
            return Err(Error::InvalidConfig(format!(
                "eta {eta} violates eta < 1/L^2 with L = {lipschitz_estimate}"
            )));
        }
        Ok(Self {
            eta,
            prev_error: None,
        })
    }

    /// Stores the freshly observed error for use at the next step.
    pub fn observe(&mut self, e: &[f64]) {
        self.prev_error = Some(e.to_vec());
    }

    pub fn reset(&mut self) {
        self.prev_error = None;
    }

    /// `a_c = -eta (dF/da)^T e_prev`, or zero before the first observation.
    pub fn action(&self, fm: &ForwardModel, z: &[f64], a0: &[f64]) -> Result<Vec<f64>> {
        let e = match &self.prev_error {
            Some(e) => e,
            None => return Ok(vec![0.0; fm.action_dim]),
        };
        let (_, tape) = fm.predict_with_tape(z, a0)?;
        let (_, jt_e) = fm.vjp_input(&tape, e)?;
        Ok(jt_e.iter().map(|x| -self.eta * x).collect())
    }
}

// ── Checkpointing ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ReflexCheckpoint {
    version: u32,
    network: serde_json::Value,
    optimizer: OptimizerState,
    horizon: usize,
    update_count: u64,
}

const REFLEX_CHECKPOINT_VERSION: u32 = 1;

impl ReflexController {
    /// Serializes parameters, optimizer state, and counters. The transition
    /// window is transient and not persisted; a restored controller starts
    /// with single-step updates until its window refills.
    pub fn to_json(&self) -> Result<String> {
        let network: serde_json::Value = serde_json::from_str(&self.net.to_json()?)?;
        Ok(serde_json::to_string(&ReflexCheckpoint {
            version: REFLEX_CHECKPOINT_VERSION,
            network,
            optimizer: self.opt.clone(),
            horizon: self.horizon,
            update_count: self.update_count,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: ReflexCheckpoint = serde_json::from_str(s)?;
        if ck.version != REFLEX_CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported reflex checkpoint version {}",
                ck.version
            )));
        }
        let net = Network::from_json(&ck.network.to_string())?;
        Ok(Self {
            net,
            opt: ck.optimizer,
            horizon: ck.horizon,
            window: VecDeque::new(),
            update_count: ck.update_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::ConstantPolicy;
    use crate::envs::LinearPlant;
    use crate::fdcheck::{fd_grad_scalar, max_relative_error};
    use crate::rng::rng_for;
    use crate::worldmodel::{exact_linear_model, ForwardModel};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn random_model(seed: u64) -> ForwardModel {
        let spec = NetworkSpec::new(
            vec![4 + 2, 16, 4],
            Activation::Mish,
            OutputActivation::Identity,
        )
        .unwrap();
        ForwardModel::new(Network::init(spec, seed).unwrap(), 4, 2, false).unwrap()
    }

    #[test]
    fn fresh_controller_outputs_zero() {
        let ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 3).unwrap();
        assert_eq!(ctrl.action(&[0.3, -0.8, 1.2, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ctrl.update_count(), 0);
    }

    #[test]
    fn total_action_composition() {
        let base = ConstantPolicy { a: vec![0.7, -0.2] };
        let ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 3).unwrap();
        let z = [0.1, 0.2, 0.3, 0.4];
        let (a0, ac, total) = total_action(&base, Some(&ctrl), &z).unwrap();
        assert_eq!(a0, vec![0.7, -0.2]);
        assert_eq!(ac, vec![0.0, 0.0]);
        assert_eq!(total, a0, "zero-initialized reflex leaves the base action");

        let zero_base = ConstantPolicy { a: vec![0.0, 0.0] };
        let (_, ac, total) = total_action(&zero_base, Some(&ctrl), &z).unwrap();
        assert_eq!(total, ac, "zero base policy passes the correction through");

        let (_, _, no_reflex) = total_action(&base, None, &z).unwrap();
        assert_eq!(no_reflex, vec![0.7, -0.2]);
    }

    #[test]
    fn total_action_finite_over_random_states() {
        let base = ConstantPolicy { a: vec![0.5, 0.5] };
        let mut ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 5).unwrap();
        // push the controller off its zero init so the check is not vacuous
        let fm = random_model(8);
        let mut rng = rng_for(0, "finite-states");
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ctrl.record_and_update(&fm, &z, &[0.5, 0.5], &zn).unwrap();
        }
        for _ in 0..1000 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (a0, ac, total) = total_action(&base, Some(&ctrl), &z).unwrap();
            for v in a0.iter().chain(&ac).chain(&total) {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn gradient_vanishes_with_zero_error() {
        let fm = random_model(1);
        let g = reflex_gradient(&fm, &[0.1, 0.2, 0.3, 0.4], &[0.5, -0.5], &[0.0; 4]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_on_linear_model_is_2bt_e() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let fm = exact_linear_model(&a, &b);
        let e = [0.7, -0.4];
        let g = reflex_gradient(&fm, &[0.1, -0.3], &[0.2, 0.2], &e).unwrap();
        let expected = b.transpose() * DVector::from_row_slice(&e) * 2.0;
        for i in 0..2 {
            assert!((g[i] - expected[i]).abs() < 1e-12, "{} vs {}", g[i], expected[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fm = random_model(7);
        let mut rng = rng_for(2, "fd-reflex");
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z_next: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pred = fm.predict(&z, &a0).unwrap();
        let e: Vec<f64> = z_next.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let g = reflex_gradient(&fm, &z, &a0, &e).unwrap();
        // g is the gradient of the NEGATED loss in the action
        let g_fd = fd_grad_scalar(&a0, 1e-5, |a| {
            let p = fm.predict(&z, a).unwrap();
            -z_next
                .iter()
                .zip(&p)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        });
        let rel = max_relative_error(&g, &g_fd);
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn zero_gradient_means_no_first_update() {
        let mut ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 11).unwrap();
        let before = ctrl.net.params().to_vec();
        ctrl.apply_action_gradients(&[(vec![0.1, 0.2, 0.3, 0.4], vec![0.0, 0.0])])
            .unwrap();
        assert_eq!(ctrl.net.params(), &before[..], "zero gradient, fresh moments");
        assert_eq!(ctrl.update_count(), 1);
    }

    #[test]
    fn update_moves_output_against_gradient() {
        // B = I, e = (1, 0, 0, 0) restricted to action rows: g = 2 B^T e
        let a = DMatrix::identity(4, 4) * 0.9;
        let b = DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        );
        let fm = exact_linear_model(&a, &b);
        let mut ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 13).unwrap();
        let z = [0.2, -0.1, 0.4, 0.3];
        let a0 = [0.5, 0.5];
        let e = [1.0, 0.0, 0.0, 0.0];
        let g = reflex_gradient(&fm, &z, &a0, &e).unwrap();
        assert!(g[0] > 0.0, "positive error along the first actuator");
        ctrl.apply_action_gradients(&[(z.to_vec(), g)]).unwrap();
        let ac = ctrl.action(&z).unwrap();
        assert!(
            ac[0] < 0.0,
            "correction must push the first component down, got {:?}",
            ac
        );
    }

    #[test]
    fn repeated_updates_track_the_analytic_direction() {
        // B mixes the channels so the target direction differs from e itself.
        // Adam's per-parameter normalization biases the accumulated output
        // change toward sign(g), so alignment is checked on an error whose
        // pulled-back components are of comparable size.
        let a = DMatrix::identity(2, 2) * 0.9;
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.9]);
        let fm = exact_linear_model(&a, &b);
        let mut ctrl = ReflexController::new(2, 2, &ReflexConfig::default(), 17).unwrap();
        let z = [0.4, -0.6];
        let a0 = [0.3, 0.1];
        let e = [0.5, 0.5];
        let g = reflex_gradient(&fm, &z, &a0, &e).unwrap();
        for _ in 0..50 {
            ctrl.apply_action_gradients(&[(z.to_vec(), g.clone())]).unwrap();
        }
        let ac = ctrl.action(&z).unwrap();
        let target = b.transpose() * DVector::from_row_slice(&e) * -1.0;
        let dot: f64 = ac.iter().zip(target.iter()).map(|(x, y)| x * y).sum();
        let cos = dot
            / (ac.iter().map(|x| x * x).sum::<f64>().sqrt()
                * target.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(cos > 0.9, "direction cosine {cos}");
    }

    #[test]
    fn horizon_one_equals_single_step() {
        let fm = random_model(21);
        let cfg = ReflexConfig {
            horizon: 1,
            ..ReflexConfig::default()
        };
        let mut via_window = ReflexController::new(4, 2, &cfg, 29).unwrap();
        let mut direct = ReflexController::new(4, 2, &cfg, 29).unwrap();
        let mut rng = rng_for(4, "h1");
        for _ in 0..10 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d1 = via_window.record_and_update(&fm, &z, &a0, &zn).unwrap();
            let d2 = direct.single_step_update(&fm, &z, &a0, &zn).unwrap();
            assert_eq!(d1.loss, d2.loss);
            assert_eq!(d1.grad_norm, d2.grad_norm);
            assert_eq!(via_window.net.params(), direct.net.params());
        }
    }

    #[test]
    fn perfect_model_no_perturbation_is_a_fixed_point() {
        let a = DMatrix::identity(2, 2) * 0.8;
        let b = DMatrix::identity(2, 2);
        let fm = exact_linear_model(&a, &b);
        let plant = LinearPlant::new(a.clone(), b.clone(), 0.0).unwrap();
        let mut ctrl = ReflexController::new(2, 2, &ReflexConfig::default(), 31).unwrap();
        let before = ctrl.net.params().to_vec();
        let mut rng = rng_for(0, "fixed-point");
        let mut z = vec![0.5, -0.5];
        for _ in 0..DEFAULT_HORIZON {
            let a0 = vec![0.3, -0.2];
            let z_next = crate::envs::linear_step(&plant, &z, &a0, &mut rng).unwrap();
            ctrl.record_and_update(&fm, &z, &a0, &z_next).unwrap();
            z = z_next;
        }
        assert_eq!(
            ctrl.net.params(),
            &before[..],
            "zero error must produce zero parameter change on fresh moments"
        );
    }

    #[test]
    fn horizon_gradients_match_finite_differences() {
        let fm = random_model(33);
        let mut rng = rng_for(6, "fd-horizon");
        let mut window: Vec<Triple> = Vec::new();
        let mut z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..3 {
            let a0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            window.push((z.clone(), a0, zn.clone()));
            z = zn;
        }
        let (grads, _) = horizon_action_gradients(&fm, &window).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|(_, g)| g.iter().copied()).collect();

        let stacked: Vec<f64> = window.iter().flat_map(|(_, a, _)| a.iter().copied()).collect();
        let fd = fd_grad_scalar(&stacked, 1e-5, |a_all| {
            let mut cur = window[0].0.clone();
            let mut loss = 0.0;
            for (i, (_, _, zn)) in window.iter().enumerate() {
                let a_i = &a_all[i * 2..(i + 1) * 2];
                let pred = fm.predict(&cur, a_i).unwrap();
                loss += zn
                    .iter()
                    .zip(&pred)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
                cur = pred;
            }
            -loss
        });
        let rel = max_relative_error(&analytic, &fd);
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn inverted_cotangent_opposes_model_gradient() {
        let fm = random_model(41);
        let mut rng = rng_for(8, "inversion");
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pred = fm.predict(&z, &a0).unwrap();
            let e: Vec<f64> = zn.iter().zip(&pred).map(|(a, b)| a - b).collect();
            let g = reflex_gradient(&fm, &z, &a0, &e).unwrap();
            // model-side loss gradient is the negation of g
            let dot: f64 = g.iter().map(|x| x * (-x)).sum();
            assert!(dot <= 0.0);
        }
    }

    /// Closed loop on the noiseless linear plant with a constant gain error:
    /// block means of the squared prediction error must fall monotonically
    /// until they reach their floor. Past the floor Adam's normalized steps
    /// produce a small limit cycle, which the descent claim does not cover.
    #[test]
    fn error_descends_under_constant_perturbation() {
        let a = DMatrix::identity(2, 2) * 0.9;
        let b = DMatrix::identity(2, 2);
        let fm = exact_linear_model(&a, &b);
        let plant = LinearPlant::new(a, b, 0.0).unwrap();
        let mut ctrl = ReflexController::new(2, 2, &ReflexConfig::default(), 47).unwrap();
        let a0 = vec![0.8, -0.6];
        let p = [0.35, -0.25];
        let mut rng = rng_for(0, "descent");
        let mut z = vec![0.0, 0.0];
        let mut sq_errors = Vec::new();
        for _ in 0..3000 {
            let ac = ctrl.action(&z).unwrap();
            let a_eff: Vec<f64> = a0
                .iter()
                .zip(&ac)
                .zip(&p)
                .map(|((b, c), pj)| (b + c) * (1.0 + pj))
                .collect();
            let z_next = crate::envs::linear_step(&plant, &z, &a_eff, &mut rng).unwrap();
            let pred = fm.predict(&z, &a0).unwrap();
            let e_sq: f64 = z_next
                .iter()
                .zip(&pred)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            sq_errors.push(e_sq);
            ctrl.record_and_update(&fm, &z, &a0, &z_next).unwrap();
            z = z_next;
        }
        let blocks: Vec<f64> = sq_errors
            .chunks(100)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let floor = blocks.iter().cloned().fold(f64::INFINITY, f64::min);
        let reach = blocks
            .iter()
            .position(|&b| b <= floor * 1.1)
            .expect("floor is attained by some block");
        for w in blocks[..=reach].windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "block mean rose before reaching the floor: {} -> {}",
                w[0],
                w[1]
            );
        }
        let first = blocks[0];
        assert!(
            floor < first * 1e-4,
            "descent too shallow: first block {first}, floor {floor}"
        );
    }

    #[test]
    fn frozen_model_is_untouched_by_updates() {
        let fm = random_model(55);
        let fm_params = fm.net.params().to_vec();
        let mut ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 61).unwrap();
        let mut rng = rng_for(9, "frozen");
        for _ in 0..200 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ctrl.record_and_update(&fm, &z, &a0, &zn).unwrap();
        }
        for (x, y) in fm.net.params().iter().zip(&fm_params) {
            assert_eq!(x.to_bits(), y.to_bits(), "forward model drifted");
        }
        assert_eq!(ctrl.update_count(), 200);
    }

    #[test]
    fn accurate_model_keeps_reflex_quiet() {
        // perfect model, no perturbation: corrections must stay negligible
        // next to the base action
        let a = DMatrix::identity(2, 2) * 0.9;
        let b = DMatrix::identity(2, 2);
        let fm = exact_linear_model(&a, &b);
        let plant = LinearPlant::new(a, b, 0.0).unwrap();
        let mut ctrl = ReflexController::new(2, 2, &ReflexConfig::default(), 67).unwrap();
        let a0 = vec![0.8, -0.6];
        let mut rng = rng_for(0, "quiet");
        let mut z = vec![0.0, 0.0];
        let mut ac_norm_sum = 0.0;
        let steps = 5000;
        for _ in 0..steps {
            let ac = ctrl.action(&z).unwrap();
            ac_norm_sum += ac.iter().map(|x| x * x).sum::<f64>().sqrt();
            let a_eff: Vec<f64> = a0.iter().zip(&ac).map(|(x, y)| x + y).collect();
            let z_next = crate::envs::linear_step(&plant, &z, &a_eff, &mut rng).unwrap();
            ctrl.record_and_update(&fm, &z, &a0, &z_next).unwrap();
            z = z_next;
        }
        let mean_ac = ac_norm_sum / steps as f64;
        let a0_norm = a0.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            mean_ac < 0.1 * a0_norm,
            "mean correction {mean_ac} vs base norm {a0_norm}"
        );
    }

    #[test]
    fn analytic_reflex_validates_step_size() {
        assert!(AnalyticReflex::new(0.3, 1.0).is_ok());
        assert!(AnalyticReflex::new(1.1, 1.0).is_err(), "eta >= 1/L^2");
        assert!(AnalyticReflex::new(-0.1, 1.0).is_err());
    }

    #[test]
    fn analytic_action_forms() {
        let a = DMatrix::identity(2, 2) * 0.9;
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.8]);
        let fm = exact_linear_model(&a, &b);
        let mut law = AnalyticReflex::new(0.3, 1.5).unwrap();
        let z = [0.2, -0.4];
        let a0 = [0.5, 0.0];
        assert_eq!(
            law.action(&fm, &z, &a0).unwrap(),
            vec![0.0, 0.0],
            "no error observed yet"
        );
        let e = [0.6, -0.2];
        law.observe(&e);
        let got = law.action(&fm, &z, &a0).unwrap();
        let expected = b.transpose() * DVector::from_row_slice(&e) * -0.3;
        for i in 0..2 {
            assert!((got[i] - expected[i]).abs() < 1e-12);
        }
        law.reset();
        assert_eq!(law.action(&fm, &z, &a0).unwrap(), vec![0.0, 0.0]);
    }

    /// On the noiseless linear plant with B = I and constant gain error p,
    /// the one-step-delayed analytic law settles into the fixed point of
    /// `e_j = a0_j p_j - eta (1 + p_j) e_j`. The simulated plateau must hit
    /// that closed form, and sit below the unadapted error `a0_j p_j`.
    #[test]
    fn analytic_plateau_matches_closed_form() {
        let a = DMatrix::identity(2, 2) * 0.9;
        let b = DMatrix::identity(2, 2);
        let fm = exact_linear_model(&a, &b);
        let plant = LinearPlant::new(a, b, 0.0).unwrap();
        let a0 = [0.8, -0.6];
        let p = [0.4, -0.3];
        let eta = 0.3;
        let mut law = AnalyticReflex::new(eta, 1.0).unwrap();
        let mut rng = rng_for(0, "ss");
        let mut z = vec![0.0, 0.0];
        let mut tail = [0.0; 2];
        let steps = 1200;
        let tail_steps = 200;
        for t in 0..steps {
            let ac = law.action(&fm, &z, &a0).unwrap();
            let a_eff: Vec<f64> = a0
                .iter()
                .zip(&ac)
                .zip(&p)
                .map(|((x, y), pj)| (x + y) * (1.0 + pj))
                .collect();
            let z_next = crate::envs::linear_step(&plant, &z, &a_eff, &mut rng).unwrap();
            let pred = fm.predict(&z, &a0).unwrap();
            let e: Vec<f64> = z_next.iter().zip(&pred).map(|(x, y)| x - y).collect();
            if t >= steps - tail_steps {
                tail[0] += e[0];
                tail[1] += e[1];
            }
            law.observe(&e);
            z = z_next;
        }
        for j in 0..2 {
            let measured = tail[j] / tail_steps as f64;
            let predicted = a0[j] * p[j] / (1.0 + eta * (1.0 + p[j]));
            assert!(
                (measured - predicted).abs() < 1e-12,
                "component {j}: plateau {measured} vs closed form {predicted}"
            );
            assert!(measured.abs() < (a0[j] * p[j]).abs());
        }
    }

    /// Paired point-mass rollouts under a constant gain error: the analytic
    /// reflex must shrink the mean prediction error relative to running the
    /// base policy alone. The model is the exact linearization of the
    /// unclipped dynamics in observation space.
    #[test]
    fn analytic_reflex_reduces_error_on_point_mass() {
        let cfg = crate::envs::PointMassConfig::default();
        let (dt, d) = (cfg.dt, cfg.damping);
        let mut a = DMatrix::identity(6, 6);
        a[(0, 2)] = dt * d;
        a[(1, 3)] = dt * d;
        a[(2, 2)] = d;
        a[(3, 3)] = d;
        let mut b = DMatrix::zeros(6, 2);
        b[(0, 0)] = dt * dt;
        b[(1, 1)] = dt * dt;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        let fm = exact_linear_model(&a, &b);
        let lipschitz = b.singular_values()[0];
        // the delayed loop e_t = a0_t p - eta L^2 (1 + p) e_{t-1} is stable
        // only for eta L^2 (1 + p_max) < 1, stricter than eta < 1/L^2
        let eta = 0.5 / (lipschitz * lipschitz);
        let pd = crate::baseline::PdPolicy::new(
            crate::baseline::PdGains::default(),
            cfg.action_low,
            cfg.action_high,
        )
        .unwrap();
        let p = [0.35, -0.3];
        let run = |adapt: bool| -> f64 {
            let mut law = AnalyticReflex::new(eta, lipschitz).unwrap();
            let mut state = crate::envs::PointMassState::at_origin(cfg.goal);
            let mut total = 0.0;
            let steps = 400;
            for _ in 0..steps {
                let z = state.observation();
                let a0 = pd.action(&z).unwrap();
                let ac = if adapt {
                    law.action(&fm, &z, &a0).unwrap()
                } else {
                    vec![0.0; 2]
                };
                let (a_total, _) = clip_total(
                    &a0.iter().zip(&ac).map(|(x, y)| x + y).collect::<Vec<_>>(),
                    cfg.action_low,
                    cfg.action_high,
                );
                let a_eff = crate::envs::apply_perturbation(
                    &a_total,
                    &p,
                    cfg.action_low,
                    cfg.action_high,
                );
                let step = crate::envs::pointmass_step(&cfg, &state, &a_eff).unwrap();
                let pred = fm.predict(&z, &a0).unwrap();
                let e: Vec<f64> = step
                    .observation
                    .iter()
                    .zip(&pred)
                    .map(|(x, y)| x - y)
                    .collect();
                total += e.iter().map(|x| x * x).sum::<f64>().sqrt();
                law.observe(&e);
                state = step.next_state;
            }
            total / steps as f64
        };
        let with = run(true);
        let without = run(false);
        assert!(
            with < 0.75 * without,
            "mean error with adaptation {with} vs without {without}"
        );
    }

    #[test]
    fn clip_total_reports_saturation() {
        let (v, hit) = clip_total(&[1.0, -3.0], -2.0, 2.0);
        assert_eq!(v, vec![1.0, -2.0]);
        assert!(hit);
        let (v, hit) = clip_total(&[0.5, -0.5], -2.0, 2.0);
        assert_eq!(v, vec![0.5, -0.5]);
        assert!(!hit);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_state() {
        let fm = random_model(71);
        let mut ctrl = ReflexController::new(4, 2, &ReflexConfig::default(), 73).unwrap();
        let mut rng = rng_for(10, "ckpt");
        for _ in 0..30 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ctrl.record_and_update(&fm, &z, &a0, &zn).unwrap();
        }
        let json = ctrl.to_json().unwrap();
        let restored = ReflexController::from_json(&json).unwrap();
        assert_eq!(ctrl.net.params(), restored.net.params());
        assert_eq!(ctrl.update_count(), restored.update_count());
        assert_eq!(ctrl.opt.step_count, restored.opt.step_count);
        assert_eq!(ctrl.opt.first_moment, restored.opt.first_moment);
    }
}

