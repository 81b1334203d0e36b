//! Empirical verification of the adaptation error and value bounds.
//!
//! The analysis connects four measurable constants to the closed-loop
//! behavior of the reflex: `L` and `alpha` are the largest and smallest
//! singular values of the model's action Jacobian over visited states,
//! `epsilon` bounds the one-step model error on nominal transitions, and `P`
//! bounds the perturbation magnitude. From these, a per-step contraction
//! factor `gamma = 1 - eta alpha^2 + eta L^2` and the steady-state error
//! ceiling `sqrt(epsilon^2 + P^2/alpha^2)` are evaluated and compared
//! against simulation.
//!
//! Since `L >= alpha` always (singular-value ordering), the formula gives
//! `gamma >= 1` for any positive step size; contraction in that regime is
//! not derivable from the formula alone. All checks therefore report the
//! formula value alongside an empirical contraction rate fitted from data,
//! and hard assertions are reserved for the linear testbed where the exact
//! scalar recurrence is known.

pub mod testbed;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldmodel::{ForwardModel, TransitionRecord};

/// The measurable constants of one trained system.
///
/// `gamma` is stored rather than derived: callers may fill in either the
/// formula value from [`contraction_factor`] or an empirically fitted
/// contraction rate, and the two can differ materially (see module docs).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SystemConstants {
    /// Largest singular value of dF/da over visited states.
    pub l: f64,
    /// Smallest singular value of dF/da over visited states.
    pub alpha: f64,
    /// One-step model error bound on nominal transitions.
    pub epsilon: f64,
    /// Perturbation magnitude bound.
    pub p_bound: f64,
    /// Reflex step size.
    pub eta: f64,
    /// Per-step error contraction factor.
    pub gamma: f64,
    /// Value-Hessian eigenvalue bound.
    pub h_m: f64,
}

impl SystemConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.l >= self.alpha && self.alpha >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "singular-value ordering violated: L = {}, alpha = {}",
                self.l, self.alpha
            )));
        }
        if self.epsilon < 0.0 || self.p_bound < 0.0 {
            return Err(Error::InvalidSpec(
                "epsilon and P must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `sqrt(epsilon^2 + P^2/alpha^2)`: the asymptotic error ceiling.
    pub fn steady_state_bound(&self) -> Result<f64> {
        if self.alpha == 0.0 {
            return Err(Error::DegenerateJacobian);
        }
        Ok((self.epsilon * self.epsilon
            + self.p_bound * self.p_bound / (self.alpha * self.alpha))
            .sqrt())
    }
}

/// Assembles dF/da at each sampled (z, a0) by one VJP per latent row and
/// returns (max sigma_max, min sigma_min) over the samples.
pub fn estimate_jacobian_bounds(
    fm: &ForwardModel,
    samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("Jacobian samples"));
    }
    let mut l_hat = 0.0_f64;
    let mut alpha_hat = f64::INFINITY;
    for (z, a0) in samples {
        let (_, tape) = fm.predict_with_tape(z, a0)?;
        let mut jac = DMatrix::zeros(fm.latent_dim, fm.action_dim);
        for i in 0..fm.latent_dim {
            let mut cot = vec![0.0; fm.latent_dim];
            cot[i] = 1.0;
            let (_, da) = fm.vjp_input(&tape, &cot)?;
            for (j, v) in da.iter().enumerate() {
                jac[(i, j)] = *v;
            }
        }
        let sv = jac.singular_values();
        l_hat = l_hat.max(sv[0]);
        alpha_hat = alpha_hat.min(sv[sv.len() - 1]);
    }
    if !(l_hat.is_finite() && alpha_hat.is_finite()) {
        return Err(Error::NonFinite("Jacobian singular values".into()));
    }
    if alpha_hat <= 0.0 {
        return Err(Error::DegenerateJacobian);
    }
    Ok((l_hat, alpha_hat))
}

/// (z, a0) pairs from logged transitions, for Jacobian sampling along the
/// policy-visited distribution.
pub fn samples_from_records(records: &[TransitionRecord]) -> Vec<(Vec<f64>, Vec<f64>)> {
    records
        .iter()
        .map(|r| (r.z.clone(), r.a0.clone()))
        .collect()
}

/// Max one-step prediction error over nominal transitions. Perturbed records
/// are skipped: the accuracy bound is defined on undisturbed dynamics.
pub fn estimate_model_error(fm: &ForwardModel, records: &[TransitionRecord]) -> Result<f64> {
    let mut worst = -1.0_f64;
    for r in records.iter().filter(|r| r.is_nominal()) {
        let pred = fm.predict(&r.z, &r.a0)?;
        let err: f64 = r
            .z_next
            .iter()
            .zip(&pred)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    if worst < 0.0 {
        return Err(Error::EmptyInput("nominal transitions"));
    }
    Ok(worst)
}

/// `gamma = 1 - eta alpha^2 + eta L^2`.
pub fn contraction_factor(eta: f64, alpha: f64, l: f64) -> f64 {
    1.0 - eta * alpha * alpha + eta * l * l
}

/// `gamma^t ||e(0)|| + sqrt(epsilon^2 + P^2/alpha^2)`.
pub fn error_bound(t: u32, e0_norm: f64, consts: &SystemConstants) -> Result<f64> {
    Ok(consts.gamma.powi(t as i32) * e0_norm + consts.steady_state_bound()?)
}

/// Least-squares fit of `ln ||e(t)||` against `t`, returning the per-step
/// decay rate `exp(slope)`. Entries at or below `floor` are excluded so the
/// fit covers the geometric phase, not the numerical noise floor.
pub fn fit_decay_rate(error_norms: &[f64], floor: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = error_norms
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > floor)
        .map(|(t, &e)| (t as f64, e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::EmptyInput("decay fit points"));
    }
    let n = pts.len() as f64;
    let t_mean = pts.iter().map(|(t, _)| t).sum::<f64>() / n;
    let y_mean = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, y) in &pts {
        num += (t - t_mean) * (y - y_mean);
        den += (t - t_mean) * (t - t_mean);
    }
    if den == 0.0 {
        return Err(Error::EmptyInput("decay fit points"));
    }
    Ok((num / den).exp())
}

/// Stepwise check of `||e(t+1)|| <= gamma ||e(t)|| + epsilon + P/alpha`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurrenceReport {
    pub steps_checked: usize,
    pub satisfied_fraction: f64,
    /// Distribution of per-step ratios `||e(t+1)||/||e(t)||`, over steps
    /// where the denominator is meaningfully nonzero.
    pub ratio_min: f64,
    pub ratio_median: f64,
    pub ratio_max: f64,
    pub gamma_used: f64,
}

pub fn verify_recurrence(error_norms: &[f64], consts: &SystemConstants) -> Result<RecurrenceReport> {
    if error_norms.len() < 2 {
        return Err(Error::EmptyInput("error series"));
    }
    let offset = consts.epsilon + consts.p_bound / consts.alpha.max(f64::MIN_POSITIVE);
    let mut satisfied = 0usize;
    let mut ratios = Vec::new();
    for w in error_norms.windows(2) {
        if w[1] <= consts.gamma * w[0] + offset + 1e-12 {
            satisfied += 1;
        }
        if w[0] > 1e-12 {
            ratios.push(w[1] / w[0]);
        }
    }
    let steps_checked = error_norms.len() - 1;
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let (ratio_min, ratio_median, ratio_max) = if ratios.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        (
            ratios[0],
            ratios[ratios.len() / 2],
            ratios[ratios.len() - 1],
        )
    };
    Ok(RecurrenceReport {
        steps_checked,
        satisfied_fraction: satisfied as f64 / steps_checked as f64,
        ratio_min,
        ratio_median,
        ratio_max,
        gamma_used: consts.gamma,
    })
}

/// Synthetic quadratic value `V(z) = V* - (z - z*)^T H (z - z*) / 2` with a
/// known positive definite Hessian.
#[derive(Debug, Clone)]
pub struct QuadraticValue {
    h: DMatrix<f64>,
    z_star: Vec<f64>,
    v_star: f64,
}

impl QuadraticValue {
    pub fn new(h: DMatrix<f64>, z_star: Vec<f64>, v_star: f64) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() != z_star.len() {
            return Err(Error::DimMismatch {
                context: "value Hessian",
                expected: z_star.len(),
                got: h.nrows(),
            });
        }
        let sym_err = (&h - h.transpose()).abs().max();
        if sym_err > 1e-12 {
            return Err(Error::InvalidSpec("value Hessian must be symmetric".into()));
        }
        if h.clone().symmetric_eigen().eigenvalues.iter().any(|&ev| ev <= 0.0) {
            return Err(Error::InvalidSpec(
                "value Hessian must be positive definite".into(),
            ));
        }
        Ok(Self { h, z_star, v_star })
    }

    /// Largest Hessian eigenvalue `H_M`.
    pub fn h_max(&self) -> f64 {
        self.h
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.v_star - self.gap(z)
    }

    /// `V(z*) - V(z) = (z - z*)^T H (z - z*) / 2`.
    pub fn gap(&self, z: &[f64]) -> f64 {
        let d = nalgebra::DVector::from_iterator(
            z.len(),
            z.iter().zip(&self.z_star).map(|(a, b)| a - b),
        );
        0.5 * (d.transpose() * &self.h * &d)[(0, 0)]
    }
}

/// Observed value gaps along a trajectory against `(H_M/2)(eps^2 + P^2/a^2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueBoundReport {
    pub h_m: f64,
    pub bound: f64,
    pub max_gap: f64,
    pub satisfied_fraction: f64,
    /// `max_gap / bound`; below 1 means the bound held with room to spare.
    pub slack_ratio: f64,
    pub passed: bool,
}

pub fn value_bound_check(
    value: &QuadraticValue,
    states: &[Vec<f64>],
    consts: &SystemConstants,
) -> Result<ValueBoundReport> {
    if states.is_empty() {
        return Err(Error::EmptyInput("value-check states"));
    }
    let h_m = value.h_max();
    let ss = consts.steady_state_bound()?;
    let bound = 0.5 * h_m * ss * ss;
    let gaps: Vec<f64> = states.iter().map(|z| value.gap(z)).collect();
    let max_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let satisfied = gaps.iter().filter(|&&g| g <= bound).count();
    Ok(ValueBoundReport {
        h_m,
        bound,
        max_gap,
        satisfied_fraction: satisfied as f64 / gaps.len() as f64,
        slack_ratio: max_gap / bound,
        passed: max_gap <= bound,
    })
}

/// Flat bounds report written next to run artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "α")]
    pub alpha: f64,
    #[serde(rename = "ε")]
    pub epsilon: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "η")]
    pub eta: f64,
    #[serde(rename = "γ")]
    pub gamma: f64,
    pub steady_state_error_measured: f64,
    pub steady_state_bound: f64,
    pub value_gap_measured: f64,
    pub value_bound: f64,
}

impl BoundsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
