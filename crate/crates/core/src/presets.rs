//! Named problem presets, addressable by string key from config files.
//!
//! Custom presets can be registered programmatically; the built-ins cover
//! the backward problems the experiment runner exercises.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::bsvie::BsvieSpec;
use crate::coefficients::{kernel, kernel_const, scalar_fn, GeneratorSpec};
use crate::error::{Error, Result};
use crate::finance::{position_family, simulate_wealth, MarketSpec, RiskSpec};
use crate::lattice::Lattice;
use crate::process::{AdaptedProcess, TerminalFamily};

pub type BsvieBuilder = Arc<dyn Fn(&Arc<dyn Lattice>) -> Result<BsvieSpec> + Send + Sync>;

pub struct PresetRegistry {
    builders: BTreeMap<String, BsvieBuilder>,
}

impl PresetRegistry {
    pub fn builtin() -> Self {
        let mut reg = Self {
            builders: BTreeMap::new(),
        };
        reg.register("linear_bsvie", Arc::new(linear_bsvie));
        reg.register("zeta_bsvie", Arc::new(zeta_bsvie));
        reg.register("mixed_bsvie", Arc::new(mixed_bsvie));
        reg.register("wiener_terminal", Arc::new(wiener_terminal));
        reg.register("finance_case2", Arc::new(finance_case2));
        reg
    }

    pub fn register(&mut self, key: &str, builder: BsvieBuilder) {
        self.builders.insert(key.to_string(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(|s| s.as_str())
    }

    pub fn build(&self, key: &str, lat: &Arc<dyn Lattice>) -> Result<BsvieSpec> {
        self.builders
            .get(key)
            .ok_or_else(|| Error::UnknownKey {
                key: key.to_string(),
                registry: "preset",
            })?(lat)
    }
}

/// `g = −y` against a deterministic terminal profile.
fn linear_bsvie(lat: &Arc<dyn Lattice>) -> Result<BsvieSpec> {
    let gen = GeneratorSpec::affine(
        "linear_bsvie",
        kernel_const(0.0),
        kernel_const(0.0),
        kernel_const(-1.0),
        kernel_const(0.0),
        kernel_const(0.0),
        kernel_const(0.0),
    )?;
    Ok(BsvieSpec::new(TerminalFamily::constant(lat.clone(), 1.0), gen))
}

/// `g = ½·ζ` with terminal `W(T)`: the reflected reads do the work.
fn zeta_bsvie(lat: &Arc<dyn Lattice>) -> Result<BsvieSpec> {
    let gen = GeneratorSpec::affine(
        "zeta_bsvie",
        kernel_const(0.0),
        kernel_const(0.0),
        kernel_const(0.0),
        kernel_const(0.0),
        kernel_const(0.5),
        kernel_const(0.0),
    )?;
    let psi = TerminalFamily::uniform(lat.clone(), lat.wiener(lat.steps()))?;
    Ok(BsvieSpec::new(psi, gen))
}

/// Mixed `y` and `ζ` dependence with a convex terminal profile.
fn mixed_bsvie(lat: &Arc<dyn Lattice>) -> Result<BsvieSpec> {
    let gen = GeneratorSpec::affine(
        "mixed_bsvie",
        kernel_const(0.0),
        kernel_const(0.0),
        kernel(|t, s| -0.8 + 0.1 * (t + s)),
        kernel_const(0.0),
        kernel_const(0.4),
        kernel_const(0.0),
    )?;
    let leaf: Vec<f64> = lat.wiener(lat.steps()).iter().map(|w| w * w).collect();
    let psi = TerminalFamily::uniform(lat.clone(), leaf)?;
    Ok(BsvieSpec::new(psi, gen))
}

/// Pure martingale recovery: `g ≡ 0`, terminal `W(T)`.
fn wiener_terminal(lat: &Arc<dyn Lattice>) -> Result<BsvieSpec> {
    let psi = TerminalFamily::uniform(lat.clone(), lat.wiener(lat.steps()))?;
    Ok(BsvieSpec::new(psi, GeneratorSpec::zero()))
}

/// The risk equation of the market application in its `r ≡ 0` regime, at a
/// fixed constant portfolio.
fn finance_case2(lat: &Arc<dyn Lattice>) -> Result<BsvieSpec> {
    let market = MarketSpec::constant(lat.clone(), 0.05, 0.09, 0.3, 1.0)?;
    let gamma = 0.6;
    let risk = RiskSpec {
        r: AdaptedProcess::constant(lat.clone(), 0.0),
        l1: kernel(|_, s| 0.3 + 0.1 * s),
        l2: kernel(|_, s| 0.2 - 0.05 * s),
        k1: kernel_const(0.0),
        k2: kernel_const(0.1),
        utility: scalar_fn(move |x| x - 0.5 * gamma * x * x),
        utility_x: scalar_fn(move |x| 1.0 - gamma * x),
    };
    let u = AdaptedProcess::constant(lat.clone(), 0.25);
    let x = simulate_wealth(&market, &u)?;
    let psi = position_family(&risk, &x, &u)?.map(|v| -v);
    let gen = GeneratorSpec::affine(
        "finance_case2",
        risk.k2.clone(),
        kernel_const(0.0),
        kernel_const(0.0),
        kernel_const(0.0),
        risk.k1.clone(),
        kernel_const(0.0),
    )?;
    Ok(BsvieSpec::new(psi, gen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsvie::{picard_solve, PicardConfig};
    use crate::lattice::ScenarioTree;

    #[test]
    fn builtin_presets_solve() {
        let lat: Arc<dyn Lattice> = ScenarioTree::with_steps(1.0, 4).unwrap();
        let reg = PresetRegistry::builtin();
        let names: Vec<String> = reg.names().map(|s| s.to_string()).collect();
        assert!(names.contains(&"linear_bsvie".to_string()));
        for name in names {
            let spec = reg.build(&name, &lat).unwrap();
            let (sol, report) = picard_solve(&spec, &PicardConfig::default()).unwrap();
            assert!(report.converged, "{name} failed to converge");
            assert!(sol.m_condition_residual() < 1e-9);
        }
        assert!(reg.build("missing", &lat).is_err());
    }
}
