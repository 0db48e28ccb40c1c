//! Shared problem instances for the experiment runner.

use std::sync::Arc;

use fbsvie::coefficients::{
    coef_fn, cost_fn, gen_fn, kernel, kernel_const, scalar_fn, CoefficientSpec, GeneratorSpec,
};
use fbsvie::control::ControlProblem;
use fbsvie::finance::{AdjointCase, MarketSpec, RiskSpec};
use fbsvie::lattice::Lattice;
use fbsvie::lq::LqSpec;
use fbsvie::process::{AdaptedProcess, ControlSet, TerminalFamily};

use crate::config::MarketSection;
use crate::CliError;

/// Nonlinear controlled system with every cost piece active.
pub fn nonlinear_control_problem(lat: &Arc<dyn Lattice>) -> ControlProblem {
    let mut coeff = CoefficientSpec::zero("runner-nonlinear");
    coeff.b = coef_fn(|a| 0.4 * a.x.sin() + 0.5 * a.v);
    coeff.b_x = coef_fn(|a| 0.4 * a.x.cos());
    coeff.b_v = coef_fn(|_| 0.5);
    coeff.sigma = coef_fn(|a| 0.2 + 0.3 * a.v);
    coeff.sigma_v = coef_fn(|_| 0.3);
    coeff.l = cost_fn(|a| 0.5 * (a.x * a.x + a.y * a.y + a.v * a.v));
    coeff.l_x = cost_fn(|a| a.x);
    coeff.l_y = cost_fn(|a| a.y);
    coeff.l_v = cost_fn(|a| a.v);
    coeff.h = scalar_fn(|x| 0.5 * x * x);
    coeff.h_x = scalar_fn(|x| x);
    coeff.gamma = scalar_fn(|y| 0.25 * y * y);
    coeff.gamma_y = scalar_fn(|y| 0.5 * y);
    let generator = GeneratorSpec {
        name: "runner-gen".into(),
        g: gen_fn(|a| 0.3 * a.x.cos() - 0.6 * a.y + 0.4 * a.zeta + 0.2 * a.v),
        d_x: gen_fn(|a| -0.3 * a.x.sin()),
        d_y: gen_fn(|_| -0.6),
        d_z: gen_fn(|_| 0.0),
        d_zeta: gen_fn(|_| 0.4),
        d_v: gen_fn(|_| 0.2),
        lip_y: kernel_const(0.6),
        lip_z: kernel_const(0.0),
        lip_zeta: kernel_const(0.4),
    };
    let n = lat.steps();
    let psi_leaf: Vec<f64> = lat.wiener(n).iter().map(|w| 0.5 * w).collect();
    ControlProblem {
        coeff,
        generator,
        phi: AdaptedProcess::constant(lat.clone(), 1.0),
        psi: TerminalFamily::uniform(lat.clone(), psi_leaf).expect("psi shape"),
        control_set: ControlSet::real_line(),
        control: AdaptedProcess::constant(lat.clone(), 0.1),
    }
}

pub fn lq_default(lat: &Arc<dyn Lattice>) -> LqSpec {
    let n = lat.steps();
    let leaf: Vec<f64> = lat.wiener(n).iter().map(|w| 0.5 * w + 0.2).collect();
    LqSpec {
        l1: kernel(|t, s| 0.4 + 0.1 * (t - s)),
        l2: kernel(|_, s| 0.8 + 0.2 * s),
        l3: kernel_const(0.3),
        q_weight: AdaptedProcess::constant(lat.clone(), 1.0),
        r_weight: AdaptedProcess::constant(lat.clone(), 1.0),
        g_weight: vec![0.5; lat.width(n)],
        psi: TerminalFamily::uniform(lat.clone(), leaf).expect("psi shape"),
        control_set: ControlSet::real_line(),
        r_floor: 1e-6,
    }
}

pub fn meanvar_risk(lat: &Arc<dyn Lattice>, gamma: f64) -> RiskSpec {
    RiskSpec {
        r: AdaptedProcess::constant(lat.clone(), 0.0),
        l1: kernel_const(0.0),
        l2: kernel_const(0.0),
        k1: kernel_const(0.0),
        k2: kernel_const(0.0),
        utility: scalar_fn(move |x| x - 0.5 * gamma * x * x),
        utility_x: scalar_fn(move |x| 1.0 - gamma * x),
    }
}

/// Market/risk pair for the closed-form adjoint regimes.
pub fn adjoint_case_instance(
    lat: &Arc<dyn Lattice>,
    case: AdjointCase,
    m: &MarketSection,
) -> Result<(MarketSpec, RiskSpec), CliError> {
    let market = match case {
        AdjointCase::ZeroInterest => {
            MarketSpec::constant(lat.clone(), 0.0, m.alpha, m.beta_vol, m.x0)?
        }
        _ => MarketSpec::constant(lat.clone(), m.rho, m.alpha, m.beta_vol, m.x0)?,
    };
    let r = match case {
        AdjointCase::ZeroRiskRate => 0.0,
        _ => m.risk_rate.min(0.25),
    };
    let gamma = m.gamma.max(0.2).min(1.0);
    let risk = RiskSpec {
        r: AdaptedProcess::constant(lat.clone(), r),
        l1: kernel(|_, s| 0.3 + 0.1 * s),
        l2: kernel(|_, s| 0.2 - 0.05 * s),
        k1: kernel(move |_, _| r),
        k2: kernel_const(0.1),
        utility: scalar_fn(move |x| x - 0.5 * gamma * x * x),
        utility_x: scalar_fn(move |x| 1.0 - gamma * x),
    };
    Ok((market, risk))
}
