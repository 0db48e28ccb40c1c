//! Generator and coefficient bundles.
//!
//! Solvers consume callable descriptions of the drift generator
//! `g(t, s, x, y, z, ζ, v)` and of the coefficients `b`, `σ`, the running
//! cost `l`, and the terminal/initial costs `h`, `γ`, together with their
//! partial derivatives. Derivatives are supplied analytically (the adjoint
//! systems consume them directly); a central finite-difference self-check on
//! random points is run once at validation, and generators are additionally
//! spot-checked against their Lipschitz kernels.
//!
//! Argument convention for the generator: `z` is the own-row value
//! `Z(t, s)` and `zeta` is the reflected value `Z(s, t)` supplied by the
//! M-completion of the current solution.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
const SELF_CHECK_POINTS: usize = 64;

/// Arguments of the generator `g(t, s, x, y, z, ζ, v)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenArgs {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub zeta: f64,
    pub v: f64,
}

pub type GenFn = Arc<dyn Fn(&GenArgs) -> f64 + Send + Sync>;
/// Deterministic two-time kernel `(t, s) -> value`.
pub type Kernel = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn gen_fn(f: impl Fn(&GenArgs) -> f64 + Send + Sync + 'static) -> GenFn {
    Arc::new(f)
}

pub fn kernel(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Kernel {
    Arc::new(f)
}

pub fn kernel_const(c: f64) -> Kernel {
    Arc::new(move |_, _| c)
}

pub fn scalar_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ScalarFn {
    Arc::new(f)
}

/// Drift generator with partial derivatives and Lipschitz kernels.
#[derive(Clone)]
pub struct GeneratorSpec {
    pub name: String,
    pub g: GenFn,
    pub d_x: GenFn,
    pub d_y: GenFn,
    pub d_z: GenFn,
    pub d_zeta: GenFn,
    pub d_v: GenFn,
    /// Lipschitz kernels in `y`, `z`, `ζ`.
    pub lip_y: Kernel,
    pub lip_z: Kernel,
    pub lip_zeta: Kernel,
}

impl GeneratorSpec {
    pub fn at(&self, a: &GenArgs) -> f64 {
        (self.g)(a)
    }

    /// Generator affine in its state arguments with deterministic kernels:
    /// `c0(t,s) + ky·y + kz·z + kζ·ζ + kx·x + kv·v`.
    pub fn affine(
        name: &str,
        c0: Kernel,
        kx: Kernel,
        ky: Kernel,
        kz: Kernel,
        kzeta: Kernel,
        kv: Kernel,
    ) -> Result<Self> {
        let g = {
            let (c0, kx, ky, kz, kzeta, kv) = (
                c0.clone(),
                kx.clone(),
                ky.clone(),
                kz.clone(),
                kzeta.clone(),
                kv.clone(),
            );
            gen_fn(move |a: &GenArgs| {
                c0(a.t, a.s)
                    + kx(a.t, a.s) * a.x
                    + ky(a.t, a.s) * a.y
                    + kz(a.t, a.s) * a.z
                    + kzeta(a.t, a.s) * a.zeta
                    + kv(a.t, a.s) * a.v
            })
        };
        let dk = |k: Kernel| gen_fn(move |a: &GenArgs| k(a.t, a.s));
        let lip = |k: Kernel| kernel(move |t, s| k(t, s).abs());
        let spec = Self {
            name: name.to_string(),
            g,
            d_x: dk(kx),
            d_y: dk(ky.clone()),
            d_z: dk(kz.clone()),
            d_zeta: dk(kzeta.clone()),
            d_v: dk(kv),
            lip_y: lip(ky),
            lip_z: lip(kz),
            lip_zeta: lip(kzeta),
        };
        spec.self_check()?;
        Ok(spec)
    }

    pub fn zero() -> Self {
        let z = gen_fn(|_| 0.0);
        Self {
            name: "zero".into(),
            g: z.clone(),
            d_x: z.clone(),
            d_y: z.clone(),
            d_z: z.clone(),
            d_zeta: z,
            lip_y: kernel_const(0.0),
            lip_z: kernel_const(0.0),
            lip_zeta: kernel_const(0.0),
            d_v: gen_fn(|_| 0.0),
        }
    }

    /// Run once when a spec is registered: central finite differences on
    /// random points for each reported derivative, then Lipschitz increments
    /// against the kernels.
    pub fn self_check(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_6e6e);
        for _ in 0..SELF_CHECK_POINTS {
            let t: f64 = rng.gen_range(0.0..1.0);
            let s: f64 = rng.gen_range(t..1.0 + 1e-9);
            let base = GenArgs {
                t,
                s,
                x: rng.gen_range(-1.0..1.0),
                y: rng.gen_range(-1.0..1.0),
                z: rng.gen_range(-1.0..1.0),
                zeta: rng.gen_range(-1.0..1.0),
                v: rng.gen_range(-1.0..1.0),
            };
            let derivs: [(&'static str, &GenFn, fn(&mut GenArgs) -> &mut f64); 5] = [
                ("x", &self.d_x, |a| &mut a.x),
                ("y", &self.d_y, |a| &mut a.y),
                ("z", &self.d_z, |a| &mut a.z),
                ("zeta", &self.d_zeta, |a| &mut a.zeta),
                ("v", &self.d_v, |a| &mut a.v),
            ];
            for (arg, d, field) in derivs {
                let analytic = d(&base);
                let mut up = base;
                *field(&mut up) += FD_STEP;
                let mut dn = base;
                *field(&mut dn) -= FD_STEP;
                let fd = ((self.g)(&up) - (self.g)(&dn)) / (2.0 * FD_STEP);
                let gap = (analytic - fd).abs();
                if gap > FD_TOL * analytic.abs().max(1.0) {
                    return Err(Error::DerivativeCheck {
                        name: self.name.clone(),
                        arg,
                        gap,
                        tol: FD_TOL,
                    });
                }
            }
            // Lipschitz spot check on a random second point
            let other = GenArgs {
                y: rng.gen_range(-1.0..1.0),
                z: rng.gen_range(-1.0..1.0),
                zeta: rng.gen_range(-1.0..1.0),
                ..base
            };
            let lhs = ((self.g)(&base) - (self.g)(&other)).abs();
            let rhs = (self.lip_y)(t, s) * (base.y - other.y).abs()
                + (self.lip_z)(t, s) * (base.z - other.z).abs()
                + (self.lip_zeta)(t, s) * (base.zeta - other.zeta).abs();
            if lhs > rhs + 1e-9 {
                return Err(Error::LipschitzCheck {
                    name: self.name.clone(),
                    lhs,
                    rhs,
                });
            }
        }
        Ok(())
    }
}

/// Arguments of the two-time coefficients `b(t, s, x, v)`, `σ(t, s, x, v)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoefArgs {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub v: f64,
}

pub type CoefFn = Arc<dyn Fn(&CoefArgs) -> f64 + Send + Sync>;

pub fn coef_fn(f: impl Fn(&CoefArgs) -> f64 + Send + Sync + 'static) -> CoefFn {
    Arc::new(f)
}

/// Arguments of the running cost `l(s, x, y, v)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostArgs {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

pub type CostFn = Arc<dyn Fn(&CostArgs) -> f64 + Send + Sync>;

pub fn cost_fn(f: impl Fn(&CostArgs) -> f64 + Send + Sync + 'static) -> CostFn {
    Arc::new(f)
}

/// Forward coefficients plus the three cost pieces, with derivatives.
#[derive(Clone)]
pub struct CoefficientSpec {
    pub name: String,
    pub b: CoefFn,
    pub b_x: CoefFn,
    pub b_v: CoefFn,
    pub sigma: CoefFn,
    pub sigma_x: CoefFn,
    pub sigma_v: CoefFn,
    pub l: CostFn,
    pub l_x: CostFn,
    pub l_y: CostFn,
    pub l_v: CostFn,
    pub h: ScalarFn,
    pub h_x: ScalarFn,
    pub gamma: ScalarFn,
    pub gamma_y: ScalarFn,
}

impl CoefficientSpec {
    /// Everything zero; override the fields the problem actually uses.
    pub fn zero(name: &str) -> Self {
        Self {
            name: name.to_string(),
            b: coef_fn(|_| 0.0),
            b_x: coef_fn(|_| 0.0),
            b_v: coef_fn(|_| 0.0),
            sigma: coef_fn(|_| 0.0),
            sigma_x: coef_fn(|_| 0.0),
            sigma_v: coef_fn(|_| 0.0),
            l: cost_fn(|_| 0.0),
            l_x: cost_fn(|_| 0.0),
            l_y: cost_fn(|_| 0.0),
            l_v: cost_fn(|_| 0.0),
            h: scalar_fn(|_| 0.0),
            h_x: scalar_fn(|_| 0.0),
            gamma: scalar_fn(|_| 0.0),
            gamma_y: scalar_fn(|_| 0.0),
        }
    }

    pub fn self_check(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0ef_f1c1);
        let fd_pair = |name: &str, arg: &'static str, f: &dyn Fn(f64) -> f64, d: f64, at: f64| {
            let fd = (f(at + FD_STEP) - f(at - FD_STEP)) / (2.0 * FD_STEP);
            let gap = (d - fd).abs();
            if gap > FD_TOL * d.abs().max(1.0) {
                Err(Error::DerivativeCheck {
                    name: name.to_string(),
                    arg,
                    gap,
                    tol: FD_TOL,
                })
            } else if !d.is_finite() || d.abs() > 1e8 {
                Err(Error::Degenerate(format!(
                    "{name}: derivative in {arg} unbounded on sampled domain"
                )))
            } else {
                Ok(())
            }
        };
        for _ in 0..SELF_CHECK_POINTS {
            let t: f64 = rng.gen_range(0.0..1.0);
            let s: f64 = rng.gen_range(0.0..1.0);
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(-1.0..1.0);

            let ca = CoefArgs { t, s, x, v };
            fd_pair(
                &self.name,
                "b_x",
                &|xx| (self.b)(&CoefArgs { x: xx, ..ca }),
                (self.b_x)(&ca),
                x,
            )?;
            fd_pair(
                &self.name,
                "b_v",
                &|vv| (self.b)(&CoefArgs { v: vv, ..ca }),
                (self.b_v)(&ca),
                v,
            )?;
            fd_pair(
                &self.name,
                "sigma_x",
                &|xx| (self.sigma)(&CoefArgs { x: xx, ..ca }),
                (self.sigma_x)(&ca),
                x,
            )?;
            fd_pair(
                &self.name,
                "sigma_v",
                &|vv| (self.sigma)(&CoefArgs { v: vv, ..ca }),
                (self.sigma_v)(&ca),
                v,
            )?;

            let la = CostArgs { s, x, y, v };
            fd_pair(
                &self.name,
                "l_x",
                &|xx| (self.l)(&CostArgs { x: xx, ..la }),
                (self.l_x)(&la),
                x,
            )?;
            fd_pair(
                &self.name,
                "l_y",
                &|yy| (self.l)(&CostArgs { y: yy, ..la }),
                (self.l_y)(&la),
                y,
            )?;
            fd_pair(
                &self.name,
                "l_v",
                &|vv| (self.l)(&CostArgs { v: vv, ..la }),
                (self.l_v)(&la),
                v,
            )?;
            fd_pair(&self.name, "h_x", &|xx| (self.h)(xx), (self.h_x)(x), x)?;
            fd_pair(
                &self.name,
                "gamma_y",
                &|yy| (self.gamma)(yy),
                (self.gamma_y)(y),
                y,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_generator_passes_self_check() {
        let g = GeneratorSpec::affine(
            "test",
            kernel(|t, s| t - s),
            kernel_const(0.0),
            kernel_const(-1.0),
            kernel(|_, s| 0.5 * s),
            kernel_const(0.25),
            kernel_const(0.0),
        );
        assert!(g.is_ok());
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let spec = GeneratorSpec {
            name: "broken".into(),
            g: gen_fn(|a| a.y * a.y),
            d_x: gen_fn(|_| 0.0),
            d_y: gen_fn(|a| a.y), // should be 2y
            d_z: gen_fn(|_| 0.0),
            d_zeta: gen_fn(|_| 0.0),
            d_v: gen_fn(|_| 0.0),
            lip_y: kernel_const(10.0),
            lip_z: kernel_const(0.0),
            lip_zeta: kernel_const(0.0),
        };
        match spec.self_check() {
            Err(Error::DerivativeCheck { arg: "y", .. }) => {}
            other => panic!("expected derivative check failure, got {other:?}"),
        }
    }

    #[test]
    fn lipschitz_violation_is_caught() {
        let spec = GeneratorSpec {
            name: "steep".into(),
            g: gen_fn(|a| 3.0 * a.y),
            d_x: gen_fn(|_| 0.0),
            d_y: gen_fn(|_| 3.0),
            d_z: gen_fn(|_| 0.0),
            d_zeta: gen_fn(|_| 0.0),
            d_v: gen_fn(|_| 0.0),
            lip_y: kernel_const(1.0), // too small for slope 3
            lip_z: kernel_const(0.0),
            lip_zeta: kernel_const(0.0),
        };
        match spec.self_check() {
            Err(Error::LipschitzCheck { .. }) => {}
            other => panic!("expected Lipschitz failure, got {other:?}"),
        }
    }

    #[test]
    fn coefficient_spec_checks_costs() {
        let mut c = CoefficientSpec::zero("quad");
        c.l = cost_fn(|a| 0.5 * (a.x * a.x + a.v * a.v));
        c.l_x = cost_fn(|a| a.x);
        c.l_v = cost_fn(|a| a.v);
        c.h = scalar_fn(|x| x * x);
        c.h_x = scalar_fn(|x| 2.0 * x);
        assert!(c.self_check().is_ok());
        c.h_x = scalar_fn(|x| x);
        assert!(c.self_check().is_err());
    }
}
