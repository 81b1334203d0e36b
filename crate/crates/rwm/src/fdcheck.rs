//! Finite-difference oracles for gradient verification.
//!
//! Central differences of `u^T f(.)` approximate the same vector-Jacobian
//! products the tape computes analytically. These are test utilities, but they
//! live in the library so integration tests can call them too.

use crate::diffnet::Network;

/// `u^T f(x)` for a network output `f(x)`.
fn directional_value(net: &Network, x: &[f64], u: &[f64]) -> f64 {
    let (y, _) = net.forward(x).expect("fd probe forward");
    y.iter().zip(u).map(|(yi, ui)| yi * ui).sum()
}

/// Central-difference estimate of `d(u^T f)/dx`.
pub fn fd_grad_input(net: &Network, x: &[f64], u: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let plus = directional_value(net, &xp, u);
        xp[i] = x[i] - step;
        let minus = directional_value(net, &xp, u);
        xp[i] = x[i];
        g[i] = (plus - minus) / (2.0 * step);
    }
    g
}

/// Central-difference estimate of `d(u^T f)/d(params)`.
pub fn fd_grad_params(net: &Network, x: &[f64], u: &[f64], step: f64) -> Vec<f64> {
    let base = net.params().to_vec();
    let mut g = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        let plus = directional_value(&net.with_params(p.clone()).unwrap(), x, u);
        p[i] = base[i] - step;
        let minus = directional_value(&net.with_params(p).unwrap(), x, u);
        g[i] = (plus - minus) / (2.0 * step);
    }
    g
}

/// Central-difference gradient of an arbitrary scalar function of a flat
/// vector. Used for multi-step objectives where the probe is not a single
/// network forward.
pub fn fd_grad_scalar<F: FnMut(&[f64]) -> f64>(
    x: &[f64],
    step: f64,
    mut f: F,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let plus = f(&xp);
        xp[i] = x[i] - step;
        let minus = f(&xp);
        xp[i] = x[i];
        g[i] = (plus - minus) / (2.0 * step);
    }
    g
}

/// Largest elementwise relative error, with an absolute floor so comparisons
/// near zero do not blow up.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in relative error");
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let denom = x.abs().max(y.abs()).max(1e-6);
            (x - y).abs() / denom
        })
        .fold(0.0, f64::max)
}
