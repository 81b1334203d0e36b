//! Closed-loop linear testbed where every bound constant is known exactly.
//!
//! Plant `z' = rho z + kappa a_eff + noise` with scalar matrices, a constant
//! base action, and a perfect forward model make the error dynamics solvable
//! by hand: under the one-step-delayed analytic law with zero perturbation
//! the error contracts by exactly `eta kappa^2` per step, and under a
//! constant gain error `p` each component settles at
//! `kappa p_j a_j / (1 + eta kappa^2 (1 + p_j))`. Simulations here are the
//! ground truth the bound-verification machinery is tested against.

use crate::baseline::{ConstantPolicy, Policy};
use crate::envs::{linear_step, LinearPlant};
use crate::error::{Error, Result};
use crate::perturb::PerturbationSchedule;
use crate::reflex::{AnalyticReflex, ReflexConfig, ReflexController};
use crate::rng::rng_for;
use crate::worldmodel::exact_linear_model;

/// Where the actuator gain error comes from during a testbed run.
#[derive(Debug, Clone)]
pub enum PerturbationSource {
    None,
    Constant(Vec<f64>),
    Schedule(PerturbationSchedule),
}

impl PerturbationSource {
    fn at(&self, t: u64, dim: usize) -> Result<Vec<f64>> {
        match self {
            Self::None => Ok(vec![0.0; dim]),
            Self::Constant(p) => {
                if p.len() != dim {
                    return Err(Error::DimMismatch {
                        context: "constant perturbation",
                        expected: dim,
                        got: p.len(),
                    });
                }
                Ok(p.clone())
            }
            Self::Schedule(s) => Ok(s.at(t)),
        }
    }

    /// Bound on `||p(t)||` over the run.
    pub fn bound_p(&self) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Constant(p) => p.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Self::Schedule(s) => s.bound_p(),
        }
    }
}

/// Which corrective mechanism closes the loop.
#[derive(Debug, Clone)]
pub enum Adapter {
    None,
    /// Closed-form law with the given step size; the Lipschitz constant is
    /// `kappa` exactly on this plant.
    Analytic { eta: f64 },
    Reflex(ReflexConfig),
}

#[derive(Debug, Clone)]
pub struct LinearTestbedConfig {
    pub state_dim: usize,
    /// `A = rho I`; zero makes the state a pure one-step image of the action.
    pub rho: f64,
    /// `B = kappa I`.
    pub kappa: f64,
    pub noise_std: f64,
    pub base_action: Vec<f64>,
    pub steps: usize,
    /// Pre-seeds the analytic law's delayed error so a zero-perturbation run
    /// still starts with a nonzero transient to contract.
    pub initial_prev_error: Option<Vec<f64>>,
    pub seed: u64,
}

impl LinearTestbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "testbed needs a nonzero state dimension and step count".into(),
            ));
        }
        if self.base_action.len() != self.state_dim {
            return Err(Error::DimMismatch {
                context: "testbed base action",
                expected: self.state_dim,
                got: self.base_action.len(),
            });
        }
        if self.rho.abs() >= 1.0 {
            return Err(Error::InvalidConfig("testbed needs |rho| < 1".into()));
        }
        if self.kappa <= 0.0 {
            return Err(Error::InvalidConfig("testbed needs kappa > 0".into()));
        }
        Ok(())
    }
}

/// Per-step logs of one testbed run, all indexed by transition.
#[derive(Debug, Clone)]
pub struct LinearRunResult {
    pub error_norms: Vec<f64>,
    pub errors: Vec<Vec<f64>>,
    /// Realized next states `z_{t+1}`.
    pub states: Vec<Vec<f64>>,
    pub ac_norms: Vec<f64>,
}

impl LinearRunResult {
    /// Mean `||e||` over the final `n` transitions.
    pub fn tail_mean_error(&self, n: usize) -> f64 {
        let n = n.min(self.error_norms.len()).max(1);
        let tail = &self.error_norms[self.error_norms.len() - n..];
        tail.iter().sum::<f64>() / n as f64
    }

    /// Median `||e||` over an index range.
    pub fn median_error(&self, range: std::ops::Range<usize>) -> f64 {
        let mut slice: Vec<f64> = self.error_norms[range].to_vec();
        slice.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        slice[slice.len() / 2]
    }
}

/// Runs the closed loop: constant base action, optional corrective term,
/// multiplicative gain error, perfect model of the unperturbed plant.
pub fn run_linear_adaptation(
    cfg: &LinearTestbedConfig,
    source: &PerturbationSource,
    adapter: &Adapter,
) -> Result<LinearRunResult> {
    cfg.validate()?;
    let n = cfg.state_dim;
    let a = nalgebra::DMatrix::identity(n, n) * cfg.rho;
    let b = nalgebra::DMatrix::identity(n, n) * cfg.kappa;
    let fm = exact_linear_model(&a, &b);
    let plant = LinearPlant::new(a, b, cfg.noise_std)?;
    let base = ConstantPolicy {
        a: cfg.base_action.clone(),
    };

    let mut analytic = match adapter {
        Adapter::Analytic { eta } => Some(AnalyticReflex::new(*eta, cfg.kappa)?),
        _ => None,
    };
    let mut reflex = match adapter {
        Adapter::Reflex(rc) => Some(ReflexController::new(n, n, rc, cfg.seed)?),
        _ => None,
    };
    if let (Some(law), Some(e0)) = (analytic.as_mut(), cfg.initial_prev_error.as_ref()) {
        law.observe(e0);
    }

    let mut rng = rng_for(cfg.seed, "testbed-noise");
    let mut z = vec![0.0; n];
    let mut out = LinearRunResult {
        error_norms: Vec::with_capacity(cfg.steps),
        errors: Vec::with_capacity(cfg.steps),
        states: Vec::with_capacity(cfg.steps),
        ac_norms: Vec::with_capacity(cfg.steps),
    };
    for t in 0..cfg.steps {
        let a0 = base.action(&z)?;
        let ac = match (&mut analytic, &mut reflex) {
            (Some(law), _) => law.action(&fm, &z, &a0)?,
            (_, Some(ctrl)) => ctrl.action(&z)?,
            _ => vec![0.0; n],
        };
        let p = source.at(t as u64, n)?;
        let a_eff: Vec<f64> = a0
            .iter()
            .zip(&ac)
            .zip(&p)
            .map(|((x, y), pj)| (x + y) * (1.0 + pj))
            .collect();
        let z_next = linear_step(&plant, &z, &a_eff, &mut rng)?;
        let pred = fm.predict(&z, &a0)?;
        let e: Vec<f64> = z_next.iter().zip(&pred).map(|(x, y)| x - y).collect();
        out.error_norms
            .push(e.iter().map(|x| x * x).sum::<f64>().sqrt());
        out.ac_norms
            .push(ac.iter().map(|x| x * x).sum::<f64>().sqrt());
        out.errors.push(e.clone());
        out.states.push(z_next.clone());
        if let Some(law) = analytic.as_mut() {
            law.observe(&e);
        }
        if let Some(ctrl) = reflex.as_mut() {
            ctrl.record_and_update(&fm, &z, &a0, &z_next)?;
        }
        z = z_next;
    }
    Ok(out)
}

/// Closed-form plateau of the delayed analytic law under constant `p` on the
/// `B = kappa I` plant: `e_j = kappa p_j a_j / (1 + eta kappa^2 (1 + p_j))`.
pub fn analytic_plateau(
    kappa: f64,
    eta: f64,
    base_action: &[f64],
    p: &[f64],
) -> Vec<f64> {
    base_action
        .iter()
        .zip(p)
        .map(|(a, pj)| kappa * pj * a / (1.0 + eta * kappa * kappa * (1.0 + pj)))
        .collect()
}
