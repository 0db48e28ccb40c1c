//! Explicit Euler solver for forward stochastic Volterra integral equations
//!
//! ```text
//! X(t_i) = φ(t_i) + Σ_{j<i} b(t_i, t_j, X_j, u_j)·h + Σ_{j<i} σ(t_i, t_j, X_j, u_j)·ΔW_j
//! ```
//!
//! The Volterra kernel only reads `X` at strictly earlier levels, so the
//! recursion is explicit: no fixed point is needed. The diffusion integrand
//! is evaluated at the left endpoint node, which keeps it adapted.

use crate::coefficients::{CoefArgs, CoefFn};
use crate::error::{Error, Result};
use crate::process::AdaptedProcess;

/// State equation data: free term, kernels, and the control that they read.
#[derive(Clone)]
pub struct ForwardSpec {
    pub phi: AdaptedProcess,
    pub b: CoefFn,
    pub sigma: CoefFn,
    pub control: AdaptedProcess,
}

pub fn solve_forward(spec: &ForwardSpec) -> Result<AdaptedProcess> {
    let lat = spec.phi.lattice().clone();
    let grid = lat.grid();
    let n = lat.steps();
    let h = grid.dt();
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = grid.t(i);
        // accumulate Σ_{j<i} (b·h + σ·ΔW) pathwise up to level i
        let mut acc = vec![0.0; 1];
        for j in 0..i {
            let s = grid.t(j);
            let xj = &levels[j];
            let uj = spec.control.values(j);
            let mut drift = Vec::with_capacity(xj.len());
            let mut diff = Vec::with_capacity(xj.len());
            for (x, u) in xj.iter().zip(uj) {
                let a = CoefArgs {
                    t,
                    s,
                    x: *x,
                    v: *u,
                };
                drift.push((spec.b)(&a));
                diff.push((spec.sigma)(&a));
            }
            let acc_up = lat.lift_step(j, &acc);
            let drift_up = lat.lift_step(j, &drift);
            let diff_up = lat.lift_step(j, &diff);
            let dw = lat.increments(j);
            acc = acc_up
                .iter()
                .zip(drift_up.iter().zip(diff_up.iter().zip(&dw)))
                .map(|(a, (b, (s, d)))| a + b * h + s * d)
                .collect();
        }
        let xi: Vec<f64> = spec
            .phi
            .values(i)
            .iter()
            .zip(&acc)
            .map(|(p, a)| p + a)
            .collect();
        for (node, v) in xi.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "forward state",
                    level: i,
                    node,
                });
            }
        }
        levels.push(xi);
    }
    AdaptedProcess::from_levels(lat, levels)
}

/// Linear forward equation
/// `ξ(t_i) = φ(t_i) + Σ_{j<i} A1(i,j)·ξ_j·h + Σ_{j<i} A2(i,j)·ξ_j·ΔW_j`
/// with kernels supplied per (outer level, inner level, inner node). Used by
/// the variational and adjoint systems, whose kernels are adapted processes
/// rather than deterministic functions.
pub fn solve_linear_forward(
    phi: &AdaptedProcess,
    a1: &dyn Fn(usize, usize, usize) -> f64,
    a2: &dyn Fn(usize, usize, usize) -> f64,
) -> Result<AdaptedProcess> {
    let lat = phi.lattice().clone();
    let n = lat.steps();
    let h = lat.dt();
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut acc = vec![0.0; 1];
        for j in 0..i {
            let xj = &levels[j];
            let drift: Vec<f64> = xj
                .iter()
                .enumerate()
                .map(|(node, x)| a1(i, j, node) * x)
                .collect();
            let diff: Vec<f64> = xj
                .iter()
                .enumerate()
                .map(|(node, x)| a2(i, j, node) * x)
                .collect();
            let acc_up = lat.lift_step(j, &acc);
            let drift_up = lat.lift_step(j, &drift);
            let diff_up = lat.lift_step(j, &diff);
            let dw = lat.increments(j);
            acc = acc_up
                .iter()
                .zip(drift_up.iter().zip(diff_up.iter().zip(&dw)))
                .map(|(a, (b, (s, d)))| a + b * h + s * d)
                .collect();
        }
        let xi: Vec<f64> = phi.values(i).iter().zip(&acc).map(|(p, a)| p + a).collect();
        for (node, v) in xi.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "linear forward state",
                    level: i,
                    node,
                });
            }
        }
        levels.push(xi);
    }
    AdaptedProcess::from_levels(lat, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::coef_fn;
    use crate::lattice::{Lattice, ScenarioTree};
    use crate::process::AdaptedProcess;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn tree(n: usize) -> Arc<dyn Lattice> {
        ScenarioTree::with_steps(1.0, n).unwrap()
    }

    #[test]
    fn zero_kernels_return_free_term() {
        let lat = tree(4);
        let phi = AdaptedProcess::wiener(lat.clone()).map(|w| w + 1.0);
        let spec = ForwardSpec {
            phi: phi.clone(),
            b: coef_fn(|_| 0.0),
            sigma: coef_fn(|_| 0.0),
            control: AdaptedProcess::zero(lat.clone()),
        };
        let x = solve_forward(&spec).unwrap();
        for i in 0..=4 {
            for (a, b) in x.values(i).iter().zip(phi.values(i)) {
                assert_abs_diff_eq!(a, b, epsilon = 0.0);
            }
        }
    }

    #[test]
    fn proportional_drift_matches_hand_recursion() {
        // X(t_i) = x0 + ρ h Σ_{j<i} X(t_j) with ρ = 0.1, N = 4, rolled by hand
        let lat = tree(4);
        let rho = 0.1;
        let h = lat.dt();
        let spec = ForwardSpec {
            phi: AdaptedProcess::constant(lat.clone(), 1.0),
            b: coef_fn(move |a| rho * a.x),
            sigma: coef_fn(|_| 0.0),
            control: AdaptedProcess::zero(lat.clone()),
        };
        let x = solve_forward(&spec).unwrap();
        let mut xs = vec![1.0f64];
        for _ in 1..=4 {
            let sum: f64 = xs.iter().sum();
            xs.push(1.0 + rho * h * sum);
        }
        for i in 0..=4 {
            for v in x.values(i) {
                assert_abs_diff_eq!(*v, xs[i], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn deterministic_compounding_converges_first_order() {
        // drift ρ(s)·x with smooth deterministic rate; the mean terminal
        // value approaches e^{∫ρ}·x at first order in h
        let rho = |s: f64| 0.3 + 0.2 * (2.0 * s).sin();
        let integral = {
            // fine trapezoid as reference
            let m = 100_000;
            let dt = 1.0 / m as f64;
            (0..m)
                .map(|k| 0.5 * dt * (rho(k as f64 * dt) + rho((k + 1) as f64 * dt)))
                .sum::<f64>()
        };
        let reference = integral.exp() * 2.0;
        let mut errs = Vec::new();
        for n in [4usize, 8, 16] {
            let lat = tree(n);
            let spec = ForwardSpec {
                phi: AdaptedProcess::constant(lat.clone(), 2.0),
                b: coef_fn(move |a| rho(a.s) * a.x),
                sigma: coef_fn(|_| 0.0),
                control: AdaptedProcess::zero(lat.clone()),
            };
            let x = solve_forward(&spec).unwrap();
            errs.push((x.expectation(n) - reference).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (1.6..=2.5).contains(&ratio),
                "weak error ratio {ratio} outside [1.6, 2.5]: {errs:?}"
            );
        }
    }

    #[test]
    fn linear_solver_resolvent_and_linearity() {
        let lat = tree(4);
        let h = lat.dt();
        let one = AdaptedProcess::constant(lat.clone(), 1.0);
        let xi = solve_linear_forward(&one, &|_, _, _| 1.0, &|_, _, _| 0.0).unwrap();
        // discrete resolvent: ξ_i = 1 + h Σ_{j<i} ξ_j
        let mut expect = vec![1.0f64];
        for _ in 1..=4 {
            let sum: f64 = expect.iter().sum();
            expect.push(1.0 + h * sum);
        }
        for i in 0..=4 {
            for v in xi.values(i) {
                assert_abs_diff_eq!(*v, expect[i], epsilon = 1e-14);
            }
        }

        // homogeneous zero
        let zero = AdaptedProcess::zero(lat.clone());
        let xi0 = solve_linear_forward(&zero, &|_, _, _| 1.0, &|_, _, _| 0.5).unwrap();
        assert_eq!(xi0.sup_norm(), 0.0);

        // linearity in φ, exact
        let phi1 = AdaptedProcess::wiener(lat.clone());
        let phi2 = AdaptedProcess::from_time_fn(lat.clone(), |t| t * t);
        let a1 = |i: usize, j: usize, _n: usize| 0.3 * (i as f64 - j as f64);
        let a2 = |_: usize, j: usize, _n: usize| 0.2 + 0.1 * j as f64;
        let s1 = solve_linear_forward(&phi1, &a1, &a2).unwrap();
        let s2 = solve_linear_forward(&phi2, &a1, &a2).unwrap();
        let combo = phi1.scale(2.0).add(&phi2.scale(-3.0)).unwrap();
        let sc = solve_linear_forward(&combo, &a1, &a2).unwrap();
        let direct = s1.scale(2.0).add(&s2.scale(-3.0)).unwrap();
        assert!(sc.sub(&direct).unwrap().sup_norm() < 1e-12);
    }
}
