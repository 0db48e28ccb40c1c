//! Maximum-principle machinery for controlled forward-backward systems.
//!
//! The state pair is
//!
//! ```text
//! X(t_i) = φ(t_i) + Σ_{j<i} b(t_i,t_j,X_j,u_j)h + Σ_{j<i} σ(t_i,t_j,X_j,u_j)ΔW_j
//! Y(t_i) = ψ(t_i) + Σ_{j≥i} g(t_i,t_j,X_j,Y_j,Z(t_j,t_i),u_j)h − Σ_{j≥i} Z(t_i,t_j)ΔW_j
//! ```
//!
//! with cost `J = E[Σ l(t_i,X_i,Y_i,u_i)h + h(X_N) + γ(Y_0)]`. This module
//! provides the linearized (variational) system along a control direction,
//! the Gateaux derivative of `J`, the adjoint processes `(P, π, Q, R)`, the
//! Hamiltonian gradient `H` with the maximum-principle condition, the dual
//! pairing identity for linear equations, and convergence diagnostics for
//! the difference quotients.
//!
//! The discrete adjoint is constructed as the exact transpose of the
//! discrete variational system (same index conventions, same lattice
//! operations), so `dJ(u)[v] = Σ_k h·E[v_k H_k]` holds to solver tolerance —
//! not merely up to discretization error. The transpose has the same shape
//! as the continuous adjoint equations: `P` solves a linear forward equation
//! driven by the cost's `Y`-reads (with the `γ_y(Y_0)` mass at level 0), `π`
//! is the representation density of `h_x(X_N)`, and `(Q, R)` is an adapted
//! M-solution of a linear backward equation whose free term collects the
//! cost's `X`-reads, the terminal reads, and the `P`-feedback.

use std::sync::Arc;

use crate::bsvie::{bsvie_residual, picard_solve, BsvieSpec, PicardConfig, PicardReport};
use crate::coefficients::{CoefArgs, CoefficientSpec, CostArgs, GenArgs, GeneratorSpec, Kernel};
use crate::error::{Error, Result};
use crate::fsvie::{solve_forward, solve_linear_forward, ForwardSpec};
use crate::lattice::Lattice;
use crate::process::{
    m_completion, AdaptedProcess, ControlSet, MSolution, TerminalFamily, TwoParamProcess,
};

/// A controlled forward-backward problem with its cost pieces.
#[derive(Clone)]
pub struct ControlProblem {
    pub coeff: CoefficientSpec,
    pub generator: GeneratorSpec,
    pub phi: AdaptedProcess,
    pub psi: TerminalFamily,
    pub control_set: ControlSet,
    pub control: AdaptedProcess,
}

impl ControlProblem {
    pub fn lattice(&self) -> &Arc<dyn Lattice> {
        self.phi.lattice()
    }

    pub fn validate(&self) -> Result<()> {
        self.coeff.self_check()?;
        self.generator.self_check()?;
        self.check_admissible(&self.control)
    }

    pub fn check_admissible(&self, u: &AdaptedProcess) -> Result<()> {
        let n = u.steps();
        for k in 0..n {
            for v in u.values(k) {
                if !self.control_set.contains(*v) {
                    return Err(Error::Infeasible(format!(
                        "control value {v} outside [{}, {}]",
                        self.control_set.lo, self.control_set.hi
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward state plus the adapted M-solution of the backward state.
pub struct StateSolution {
    pub x: AdaptedProcess,
    pub backward: MSolution,
    pub picard: PicardReport,
}

impl StateSolution {
    pub fn y(&self) -> &AdaptedProcess {
        &self.backward.y
    }
}

/// Solve both state equations at the given control (forward first; the
/// backward generator then reads the frozen `X`).
pub fn solve_state(prob: &ControlProblem, u: &AdaptedProcess) -> Result<StateSolution> {
    let fwd = ForwardSpec {
        phi: prob.phi.clone(),
        b: prob.coeff.b.clone(),
        sigma: prob.coeff.sigma.clone(),
        control: u.clone(),
    };
    let x = solve_forward(&fwd)?;
    let spec = BsvieSpec {
        psi: prob.psi.clone(),
        generator: prob.generator.clone(),
        x: Some(x.clone()),
        control: Some(u.clone()),
    };
    let (backward, picard) = picard_solve(&spec, &PicardConfig::default())?;
    Ok(StateSolution {
        x,
        backward,
        picard,
    })
}

/// Residual of the backward state identity at a solved state (diagnostic).
pub fn state_residual(prob: &ControlProblem, u: &AdaptedProcess, state: &StateSolution) -> f64 {
    let spec = BsvieSpec {
        psi: prob.psi.clone(),
        generator: prob.generator.clone(),
        x: Some(state.x.clone()),
        control: Some(u.clone()),
    };
    bsvie_residual(&spec, &state.backward)
}

/// Discrete cost `J(u)`.
pub fn evaluate_cost(prob: &ControlProblem, u: &AdaptedProcess) -> Result<f64> {
    prob.check_admissible(u)?;
    let state = solve_state(prob, u)?;
    Ok(cost_of_state(prob, u, &state))
}

pub fn cost_of_state(prob: &ControlProblem, u: &AdaptedProcess, state: &StateSolution) -> f64 {
    let lat = prob.lattice().clone();
    let grid = lat.grid();
    let n = lat.steps();
    let h = grid.dt();
    let mut j = 0.0;
    for k in 0..n {
        let s = grid.t(k);
        let vals: Vec<f64> = (0..lat.width(k))
            .map(|node| {
                (prob.coeff.l)(&CostArgs {
                    s,
                    x: state.x.values(k)[node],
                    y: state.backward.y.values(k)[node],
                    v: u.values(k)[node],
                })
            })
            .collect();
        j += h * lat.expectation(k, &vals);
    }
    let hx: Vec<f64> = state
        .x
        .values(n)
        .iter()
        .map(|x| (prob.coeff.h)(*x))
        .collect();
    j += lat.expectation(n, &hx);
    j += (prob.coeff.gamma)(state.backward.y.values(0)[0]);
    j
}

// ---------------------------------------------------------------------------
// coefficient evaluation along a solved state
// ---------------------------------------------------------------------------

/// Evaluates linearization coefficients along `(X, Y, Z, u)`. Generator
/// partials are taken at (row `i`, inner `j`) with states at the inner time
/// and the reflected value `Z(t_j, t_i)`; forward-kernel partials at
/// `(t_i, t_j, X_j, u_j)`, where `i = N` addresses the terminal time.
struct Linearization<'a> {
    prob: &'a ControlProblem,
    u: &'a AdaptedProcess,
    state: &'a StateSolution,
    lat: Arc<dyn Lattice>,
}

impl<'a> Linearization<'a> {
    fn new(prob: &'a ControlProblem, u: &'a AdaptedProcess, state: &'a StateSolution) -> Self {
        Self {
            prob,
            u,
            state,
            lat: prob.lattice().clone(),
        }
    }

    /// Reflected state value `Z(t_j, t_i)` seen from row `i` at inner level
    /// `j ≥ i`, as level-`j` data.
    fn zeta_state(&self, i: usize, j: usize) -> Vec<f64> {
        if j == i {
            self.state.backward.z.slot(i, i).to_vec()
        } else {
            self.lat.lift_to(i, j, self.state.backward.z.slot(j, i))
        }
    }

    fn gen_args(&self, i: usize, j: usize) -> Vec<GenArgs> {
        let grid = self.lat.grid();
        let t = grid.t(i);
        let s = grid.t(j);
        let zeta = self.zeta_state(i, j);
        (0..self.lat.width(j))
            .map(|node| GenArgs {
                t,
                s,
                x: self.state.x.values(j)[node],
                y: self.state.backward.y.values(j)[node],
                z: 0.0,
                zeta: zeta[node],
                v: self.u.values(j)[node],
            })
            .collect()
    }

    fn coef_args(&self, i: usize, j: usize) -> Vec<CoefArgs> {
        let grid = self.lat.grid();
        let t = grid.t(i);
        let s = grid.t(j);
        (0..self.lat.width(j))
            .map(|node| CoefArgs {
                t,
                s,
                x: self.state.x.values(j)[node],
                v: self.u.values(j)[node],
            })
            .collect()
    }

    fn cost_args(&self, k: usize) -> Vec<CostArgs> {
        let grid = self.lat.grid();
        let s = grid.t(k);
        (0..self.lat.width(k))
            .map(|node| CostArgs {
                s,
                x: self.state.x.values(k)[node],
                y: self.state.backward.y.values(k)[node],
                v: self.u.values(k)[node],
            })
            .collect()
    }

    fn hx_leaf(&self) -> Vec<f64> {
        let n = self.lat.steps();
        self.state
            .x
            .values(n)
            .iter()
            .map(|x| (self.prob.coeff.h_x)(*x))
            .collect()
    }

    fn gamma_bar(&self) -> f64 {
        (self.prob.coeff.gamma_y)(self.state.backward.y.values(0)[0])
    }
}

// ---------------------------------------------------------------------------
// variational system
// ---------------------------------------------------------------------------

pub struct VariationalSolution {
    pub xi: AdaptedProcess,
    pub eta: AdaptedProcess,
    pub zeta: TwoParamProcess,
}

/// Forcing accumulated forward: `Σ_{j<i} (drift·h + diff·ΔW_j)` with the
/// summands supplied per (outer level, inner level, node).
fn accumulate_forward_forcing(
    lat: &Arc<dyn Lattice>,
    drift: &dyn Fn(usize, usize, usize) -> f64,
    diff: &dyn Fn(usize, usize, usize) -> f64,
) -> Result<AdaptedProcess> {
    let n = lat.steps();
    let h = lat.dt();
    let mut levels = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut acc = vec![0.0; 1];
        for j in 0..i {
            let d: Vec<f64> = (0..lat.width(j)).map(|node| drift(i, j, node)).collect();
            let s: Vec<f64> = (0..lat.width(j)).map(|node| diff(i, j, node)).collect();
            let acc_up = lat.lift_step(j, &acc);
            let d_up = lat.lift_step(j, &d);
            let s_up = lat.lift_step(j, &s);
            let dw = lat.increments(j);
            acc = acc_up
                .iter()
                .zip(d_up.iter().zip(s_up.iter().zip(&dw)))
                .map(|(a, (b, (sg, w)))| a + b * h + sg * w)
                .collect();
        }
        levels.push(acc);
    }
    AdaptedProcess::from_levels(lat.clone(), levels)
}

/// Linear backward system with per-(row, inner, node) coefficients and
/// forcing, solved by Picard iteration exactly like the nonlinear case. The
/// reflected read on the diagonal is the row's own just-computed density.
pub(crate) fn solve_linear_backward(
    lat: &Arc<dyn Lattice>,
    ky: &dyn Fn(usize, usize, usize) -> f64,
    kzeta: &dyn Fn(usize, usize, usize) -> f64,
    forcing: &dyn Fn(usize, usize, usize) -> f64,
    terminal: &dyn Fn(usize) -> Vec<f64>,
    tol: f64,
) -> Result<MSolution> {
    let n = lat.steps();
    let h = lat.dt();
    let mut current = MSolution::zero(lat.clone());
    for _sweep in 0..200 {
        let mut y_levels: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut z = TwoParamProcess::zero(lat.clone());
        for i in 0..=n {
            let mut v = terminal(i);
            for j in (i..n).rev() {
                let z_own = lat.repr_density_step(j, &v);
                let m = lat.cond_exp_step(j, &v);
                let yj = current.y.values(j);
                let zeta: Vec<f64> = if j == i {
                    z_own.clone()
                } else {
                    lat.lift_to(i, j, current.z.slot(j, i))
                };
                let mut next = Vec::with_capacity(m.len());
                for node in 0..m.len() {
                    let val = m[node]
                        + h * (ky(i, j, node) * yj[node]
                            + kzeta(i, j, node) * zeta[node]
                            + forcing(i, j, node));
                    if !val.is_finite() {
                        return Err(Error::NonFinite {
                            context: "linear backward sweep",
                            level: j,
                            node,
                        });
                    }
                    next.push(val);
                }
                z.set_slot(i, j, z_own);
                v = next;
            }
            y_levels.push(v);
        }
        let y = AdaptedProcess::from_levels(lat.clone(), y_levels)?;
        let completion = m_completion(&y);
        for i in 0..=n {
            for j in 0..i {
                z.set_slot(i, j, completion.slot(i, j).to_vec());
            }
        }
        let next = MSolution { y, z };
        let delta = next.y.sub(&current.y)?.sup_norm();
        current = next;
        if delta < tol {
            return Ok(current);
        }
    }
    Err(Error::FixedPoint {
        context: "linear backward system",
        iters: 200,
        delta: f64::NAN,
    })
}

/// Linearization of the state pair along a control direction: `ξ` solves the
/// linear forward equation with kernels `b_x, σ_x` and forcing from
/// `b_v, σ_v`; `(η, ζ)` the linear backward equation with kernels
/// `g_y, g_ζ` and forcing from `g_x·ξ + g_v·v`.
pub fn solve_variational(
    prob: &ControlProblem,
    u: &AdaptedProcess,
    state: &StateSolution,
    v_dir: &AdaptedProcess,
) -> Result<VariationalSolution> {
    let lin = Linearization::new(prob, u, state);
    let lat = prob.lattice().clone();

    let phi1 = accumulate_forward_forcing(
        &lat,
        &|i, j, node| (prob.coeff.b_v)(&lin.coef_args(i, j)[node]) * v_dir.values(j)[node],
        &|i, j, node| (prob.coeff.sigma_v)(&lin.coef_args(i, j)[node]) * v_dir.values(j)[node],
    )?;
    let xi = solve_linear_forward(
        &phi1,
        &|i, j, node| (prob.coeff.b_x)(&lin.coef_args(i, j)[node]),
        &|i, j, node| (prob.coeff.sigma_x)(&lin.coef_args(i, j)[node]),
    )?;

    let backward = solve_linear_backward(
        &lat,
        &|i, j, node| (prob.generator.d_y)(&lin.gen_args(i, j)[node]),
        &|i, j, node| (prob.generator.d_zeta)(&lin.gen_args(i, j)[node]),
        &|i, j, node| {
            let args = lin.gen_args(i, j)[node];
            (prob.generator.d_x)(&args) * xi.values(j)[node]
                + (prob.generator.d_v)(&args) * v_dir.values(j)[node]
        },
        &|_i| vec![0.0; lat.width(lat.steps())],
        1e-13,
    )?;

    Ok(VariationalSolution {
        xi,
        eta: backward.y,
        zeta: backward.z,
    })
}

/// Directional derivative of `J` at `u` in direction `v_dir`, assembled from
/// the variational system:
/// `Σ h E[l_x ξ + l_y η + l_v v] + E[h_x(X_N) ξ_N] + γ_y(Y_0) η_0`.
pub fn gateaux_derivative(
    prob: &ControlProblem,
    u: &AdaptedProcess,
    state: &StateSolution,
    v_dir: &AdaptedProcess,
) -> Result<f64> {
    let var = solve_variational(prob, u, state, v_dir)?;
    let lin = Linearization::new(prob, u, state);
    let lat = prob.lattice().clone();
    let n = lat.steps();
    let h = lat.dt();
    let mut total = 0.0;
    for k in 0..n {
        let costs = lin.cost_args(k);
        let vals: Vec<f64> = (0..lat.width(k))
            .map(|node| {
                (prob.coeff.l_x)(&costs[node]) * var.xi.values(k)[node]
                    + (prob.coeff.l_y)(&costs[node]) * var.eta.values(k)[node]
                    + (prob.coeff.l_v)(&costs[node]) * v_dir.values(k)[node]
            })
            .collect();
        total += h * lat.expectation(k, &vals);
    }
    let hx = lin.hx_leaf();
    let terminal: Vec<f64> = hx
        .iter()
        .zip(var.xi.values(n))
        .map(|(a, b)| a * b)
        .collect();
    total += lat.expectation(n, &terminal);
    total += lin.gamma_bar() * var.eta.values(0)[0];
    Ok(total)
}

// ---------------------------------------------------------------------------
// adjoint system (exact transpose of the variational system)
// ---------------------------------------------------------------------------

/// Linearization data consumed by the adjoint assembly. Generator and
/// forward-kernel partials are indexed (outer row, inner level, node at the
/// inner level); the outer index `N` on the forward kernels addresses the
/// terminal time. Cost densities are indexed (level, node).
pub struct AdjointPack<'a> {
    pub lat: Arc<dyn Lattice>,
    pub gy: &'a dyn Fn(usize, usize, usize) -> f64,
    pub gzeta: &'a dyn Fn(usize, usize, usize) -> f64,
    pub gx: &'a dyn Fn(usize, usize, usize) -> f64,
    pub gv: &'a dyn Fn(usize, usize, usize) -> f64,
    pub bx: &'a dyn Fn(usize, usize, usize) -> f64,
    pub sx: &'a dyn Fn(usize, usize, usize) -> f64,
    pub bv: &'a dyn Fn(usize, usize, usize) -> f64,
    pub sv: &'a dyn Fn(usize, usize, usize) -> f64,
    pub ly: &'a dyn Fn(usize, usize) -> f64,
    pub lx: &'a dyn Fn(usize, usize) -> f64,
    pub lv: &'a dyn Fn(usize, usize) -> f64,
    /// `h_x(X_N)` on the leaves.
    pub hx_leaf: Vec<f64>,
    /// `γ_y(Y_0)`.
    pub gamma_bar: f64,
}

/// Adjoint processes: `P` multiplies the backward rows (density scaled, with
/// the `γ_y(Y_0)` point mass folded into level 0), `π` is the representation
/// density of `h_x(X_N)`, and `(Q, R)` is the adapted M-solution multiplying
/// the forward state. `hx_cond` carries `E[h_x(X_N) | F_k]`.
pub struct AdjointSolution {
    pub p: AdaptedProcess,
    pub q: AdaptedProcess,
    pub r: TwoParamProcess,
    pub pi: AdaptedProcess,
    pub hx_cond: AdaptedProcess,
    /// Decorated multipliers `P_k·(1 + g_ζ(k,k)ΔW_k)` at level `k+1`,
    /// consumed by the Hamiltonian and the `Q` free term.
    p_hat: Vec<Vec<f64>>,
}

impl AdjointSolution {
    /// `P_i` as seen from level `k ≥ i`: the decorated multiplier for strict
    /// rows, the bare one on the diagonal.
    fn p_seen(&self, lat: &Arc<dyn Lattice>, i: usize, k: usize) -> Vec<f64> {
        if i == k {
            self.p.values(k).to_vec()
        } else {
            lat.lift_to(i + 1, k, &self.p_hat[i])
        }
    }
}

pub fn solve_adjoint_pack(pack: &AdjointPack) -> Result<AdjointSolution> {
    let lat = pack.lat.clone();
    let n = lat.steps();
    let h = lat.dt();

    // conditional chain and representation densities of h_x(X_N)
    let chain = lat.cond_chain(n, &pack.hx_leaf);
    let mut pi_levels: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; lat.width(k)]).collect();
    for k in 0..n {
        pi_levels[k] = lat.repr_density_step(k, &chain[k + 1]);
    }
    let pi = AdaptedProcess::from_levels(lat.clone(), pi_levels)?;
    let hx_cond = AdaptedProcess::from_levels(lat.clone(), chain)?;

    // forward sweep for P (density form) and its decorated lift
    let mut p_levels: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut p_hat: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut num: Vec<f64> = (0..lat.width(k)).map(|node| (pack.ly)(k, node)).collect();
        if k == 0 {
            for v in num.iter_mut() {
                *v += pack.gamma_bar / h;
            }
        }
        for i in 0..k {
            let p_up = lat.lift_to(i + 1, k, &p_hat[i]);
            // drift read: h · g_y(i,k) · P̂_i
            for node in 0..lat.width(k) {
                num[node] += h * (pack.gy)(i, k, node) * p_up[node];
            }
            // noise read: E[g_ζ(i,k)·P̂_i | F_i]·ΔW_i, lifted back to k
            let prod: Vec<f64> = (0..lat.width(k))
                .map(|node| (pack.gzeta)(i, k, node) * p_up[node])
                .collect();
            let proj = lat.cond_exp_to(k, i, &prod);
            let proj_up = lat.lift_step(i, &proj);
            let dw = lat.increments(i);
            let term: Vec<f64> = proj_up.iter().zip(&dw).map(|(p, d)| p * d).collect();
            let term_k = lat.lift_to(i + 1, k, &term);
            for (nv, tv) in num.iter_mut().zip(&term_k) {
                *nv += tv;
            }
        }
        // the row reads its own value through the inclusive diagonal
        let pk: Vec<f64> = (0..lat.width(k))
            .map(|node| num[node] / (1.0 - h * (pack.gy)(k, k, node)))
            .collect();
        for (node, v) in pk.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "adjoint forward multiplier",
                    level: k,
                    node,
                });
            }
        }
        let pk_up = lat.lift_step(k, &pk);
        let gz_diag: Vec<f64> = (0..lat.width(k))
            .map(|node| (pack.gzeta)(k, k, node))
            .collect();
        let gz_up = lat.lift_step(k, &gz_diag);
        let dw = lat.increments(k);
        let hat: Vec<f64> = pk_up
            .iter()
            .zip(gz_up.iter().zip(&dw))
            .map(|(p, (g, d))| p * (1.0 + g * d))
            .collect();
        p_levels.push(pk);
        p_hat.push(hat);
    }
    p_levels.push(vec![0.0; lat.width(n)]);
    let p = AdaptedProcess::from_levels(lat.clone(), p_levels)?;

    let partial = AdjointSolution {
        p,
        q: AdaptedProcess::zero(lat.clone()),
        r: TwoParamProcess::zero(lat.clone()),
        pi,
        hx_cond,
        p_hat,
    };

    // backward rows for (Q, R), descending so later rows — including their
    // completion segments, which the σ_x-drift of earlier rows reads — are
    // available
    let mut q_levels: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; lat.width(k)]).collect();
    let mut r = TwoParamProcess::zero(lat.clone());
    for k in (0..n).rev() {
        // free density: cost X-reads plus the P-feedback through g_x
        let mut c_q: Vec<f64> = (0..lat.width(k)).map(|node| (pack.lx)(k, node)).collect();
        for i in 0..=k {
            let p_seen = partial.p_seen(&lat, i, k);
            for node in 0..lat.width(k) {
                c_q[node] += h * (pack.gx)(i, k, node) * p_seen[node];
            }
        }
        // pathwise row total at the leaves
        let mut total = lat.lift_to(k, n, &c_q);
        let bx_term: Vec<f64> = (0..lat.width(k))
            .map(|node| (pack.bx)(n, k, node))
            .collect();
        let sx_pi: Vec<f64> = (0..lat.width(k))
            .map(|node| (pack.sx)(n, k, node) * partial.pi.values(k)[node])
            .collect();
        let bx_leaf = lat.lift_to(k, n, &bx_term);
        let sx_pi_leaf = lat.lift_to(k, n, &sx_pi);
        for node in 0..lat.width(n) {
            total[node] += bx_leaf[node] * pack.hx_leaf[node] + sx_pi_leaf[node];
        }
        for i in (k + 1)..n {
            let bx_i: Vec<f64> = (0..lat.width(k))
                .map(|node| (pack.bx)(i, k, node))
                .collect();
            let bx_up = lat.lift_to(k, i, &bx_i);
            let prod: Vec<f64> = bx_up
                .iter()
                .zip(&q_levels[i])
                .map(|(b, q)| b * q)
                .collect();
            let prod_leaf = lat.lift_to(i, n, &prod);
            let sxr: Vec<f64> = (0..lat.width(k))
                .map(|node| (pack.sx)(i, k, node) * r.slot(i, k)[node])
                .collect();
            let sxr_leaf = lat.lift_to(k, n, &sxr);
            for node in 0..lat.width(n) {
                total[node] += h * (prod_leaf[node] + sxr_leaf[node]);
            }
        }
        // Q_k is the conditional value; the dW part of the row defines the
        // solve segment of R, the representation of Q_k itself the rest
        let row_chain = lat.cond_chain(n, &total);
        for m in k..n {
            r.set_slot(k, m, lat.repr_density_step(m, &row_chain[m + 1]));
        }
        q_levels[k] = row_chain[k].clone();
        let mut cur = row_chain[k].clone();
        for m in (0..k).rev() {
            r.set_slot(k, m, lat.repr_density_step(m, &cur));
            cur = lat.cond_exp_step(m, &cur);
        }
    }
    let q = AdaptedProcess::from_levels(lat.clone(), q_levels)?;

    Ok(AdjointSolution { q, r, ..partial })
}

/// The Hamiltonian gradient `H` per control level and node:
///
/// ```text
/// H_k = l_v + Σ_{i≤k} h·g_v(i,k)·P_i  +  b_v(N,k)·E[h_x|F_k] + σ_v(N,k)·π_k
///     + Σ_{i>k} h·( b_v(i,k)·E[Q_i|F_k] + σ_v(i,k)·R(t_i,t_k) )
/// ```
///
/// The maximization form is `𝓗(v) = −H·v`, and `dJ(u)[v] = Σ_k h·E[v_k H_k]`
/// exactly on the tree.
pub fn hamiltonian_gradient(pack: &AdjointPack, adj: &AdjointSolution) -> Result<AdaptedProcess> {
    let lat = pack.lat.clone();
    let n = lat.steps();
    let h = lat.dt();
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for k in 0..n {
        let mut hk: Vec<f64> = (0..lat.width(k)).map(|node| (pack.lv)(k, node)).collect();
        for i in 0..=k {
            let p_seen = adj.p_seen(&lat, i, k);
            for node in 0..lat.width(k) {
                hk[node] += h * (pack.gv)(i, k, node) * p_seen[node];
            }
        }
        for node in 0..lat.width(k) {
            hk[node] += (pack.bv)(n, k, node) * adj.hx_cond.values(k)[node]
                + (pack.sv)(n, k, node) * adj.pi.values(k)[node];
        }
        for i in (k + 1)..n {
            let q_proj = lat.cond_exp_to(i, k, adj.q.values(i));
            for node in 0..lat.width(k) {
                hk[node] += h
                    * ((pack.bv)(i, k, node) * q_proj[node]
                        + (pack.sv)(i, k, node) * adj.r.slot(i, k)[node]);
            }
        }
        levels.push(hk);
    }
    levels.push(vec![0.0; lat.width(n)]);
    AdaptedProcess::from_levels(lat, levels)
}

/// Builds the adjoint linearization of a control problem at a solved state.
/// Returns the adjoint processes and the Hamiltonian gradient.
pub fn solve_adjoint(
    prob: &ControlProblem,
    u: &AdaptedProcess,
    state: &StateSolution,
) -> Result<(AdjointSolution, AdaptedProcess)> {
    let lin = Linearization::new(prob, u, state);
    let lat = prob.lattice().clone();
    let gy = |i: usize, j: usize, node: usize| (prob.generator.d_y)(&lin.gen_args(i, j)[node]);
    let gzeta =
        |i: usize, j: usize, node: usize| (prob.generator.d_zeta)(&lin.gen_args(i, j)[node]);
    let gx = |i: usize, j: usize, node: usize| (prob.generator.d_x)(&lin.gen_args(i, j)[node]);
    let gv = |i: usize, j: usize, node: usize| (prob.generator.d_v)(&lin.gen_args(i, j)[node]);
    let bx = |i: usize, j: usize, node: usize| (prob.coeff.b_x)(&lin.coef_args(i, j)[node]);
    let sx = |i: usize, j: usize, node: usize| (prob.coeff.sigma_x)(&lin.coef_args(i, j)[node]);
    let bv = |i: usize, j: usize, node: usize| (prob.coeff.b_v)(&lin.coef_args(i, j)[node]);
    let sv = |i: usize, j: usize, node: usize| (prob.coeff.sigma_v)(&lin.coef_args(i, j)[node]);
    let ly = |k: usize, node: usize| (prob.coeff.l_y)(&lin.cost_args(k)[node]);
    let lx = |k: usize, node: usize| (prob.coeff.l_x)(&lin.cost_args(k)[node]);
    let lv = |k: usize, node: usize| (prob.coeff.l_v)(&lin.cost_args(k)[node]);
    let pack = AdjointPack {
        lat,
        gy: &gy,
        gzeta: &gzeta,
        gx: &gx,
        gv: &gv,
        bx: &bx,
        sx: &sx,
        bv: &bv,
        sv: &sv,
        ly: &ly,
        lx: &lx,
        lv: &lv,
        hx_leaf: lin.hx_leaf(),
        gamma_bar: lin.gamma_bar(),
    };
    let adj = solve_adjoint_pack(&pack)?;
    let ham = hamiltonian_gradient(&pack, &adj)?;
    Ok((adj, ham))
}

/// `dJ(u)[v]` assembled from the adjoint route: `Σ_k h·E[v_k·H_k]`.
pub fn gateaux_from_adjoint(ham: &AdaptedProcess, v_dir: &AdaptedProcess) -> Result<f64> {
    let lat = ham.lattice().clone();
    let n = lat.steps();
    let h = lat.dt();
    let mut total = 0.0;
    for k in 0..n {
        let prod: Vec<f64> = ham
            .values(k)
            .iter()
            .zip(v_dir.values(k))
            .map(|(a, b)| a * b)
            .collect();
        total += h * lat.expectation(k, &prod);
    }
    Ok(total)
}

/// Maximization-form Hamiltonian `𝓗(v) = −H·v` at a node.
pub fn hamiltonian_value(ham: &AdaptedProcess, level: usize, node: usize, v: f64) -> f64 {
    -ham.values(level)[node] * v
}

/// Worst violation of the maximum-principle condition `H·(v − u) ≥ 0` over
/// all control nodes and candidate values: `max −H·(v − u)`, with the level
/// and node where it is attained.
pub struct MpViolation {
    pub worst: f64,
    pub level: usize,
    pub node: usize,
}

pub fn check_maximum_principle(
    ham: &AdaptedProcess,
    u: &AdaptedProcess,
    v_samples: &dyn Fn(f64) -> Vec<f64>,
) -> MpViolation {
    let lat = ham.lattice().clone();
    let n = lat.steps();
    let mut out = MpViolation {
        worst: f64::NEG_INFINITY,
        level: 0,
        node: 0,
    };
    for k in 0..n {
        for node in 0..lat.width(k) {
            let hk = ham.values(k)[node];
            let uk = u.values(k)[node];
            for v in v_samples(uk) {
                let violation = -hk * (v - uk);
                if violation > out.worst {
                    out = MpViolation {
                        worst: violation,
                        level: k,
                        node,
                    };
                }
            }
        }
    }
    if !out.worst.is_finite() {
        out.worst = 0.0;
    }
    out
}

/// Default candidate grid: 33 equispaced points of `U ∩ [u−1, u+1]`, clipped.
pub fn default_mp_samples(set: ControlSet) -> impl Fn(f64) -> Vec<f64> {
    move |u: f64| {
        let lo = set.clamp(u - 1.0);
        let hi = set.clamp(u + 1.0);
        (0..33).map(|k| lo + (hi - lo) * k as f64 / 32.0).collect()
    }
}

// ---------------------------------------------------------------------------
// dual pairing identity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Both sides of the pairing between the linear forward equation driven by
/// `φ` and the linear backward equation with free term `ψ`, for bounded
/// deterministic kernels `A1, A2`:
///
/// ```text
/// E Σ_i h · ξ(t_i)·ψ(t_i)   vs.   E Σ_i h · φ(t_i)·Y(t_i)
/// ```
///
/// Exact for zero kernels (tower property); for nonzero kernels the gap is a
/// diagonal term of first order in `h`.
pub fn check_duality(
    lat: &Arc<dyn Lattice>,
    a1: &Kernel,
    a2: &Kernel,
    phi: &AdaptedProcess,
    psi: &TerminalFamily,
) -> Result<DualityReport> {
    let grid = lat.grid();
    let n = lat.steps();
    let h = grid.dt();
    let xi = solve_linear_forward(
        phi,
        &|i, j, _| a1(grid.t(i), grid.t(j)),
        &|i, j, _| a2(grid.t(i), grid.t(j)),
    )?;
    // backward generator at (row t, inner s): A1(s,t)·Y(s) + A2(s,t)·Z(s,t)
    let gen = {
        let a1c = a1.clone();
        let a2c = a2.clone();
        GeneratorSpec {
            name: "dual-pair".into(),
            g: crate::coefficients::gen_fn(move |a: &GenArgs| {
                a1c(a.s, a.t) * a.y + a2c(a.s, a.t) * a.zeta
            }),
            d_y: {
                let a1c = a1.clone();
                crate::coefficients::gen_fn(move |a: &GenArgs| a1c(a.s, a.t))
            },
            d_zeta: {
                let a2c = a2.clone();
                crate::coefficients::gen_fn(move |a: &GenArgs| a2c(a.s, a.t))
            },
            lip_y: crate::coefficients::kernel({
                let a1c = a1.clone();
                move |t, s| a1c(s, t).abs()
            }),
            lip_zeta: crate::coefficients::kernel({
                let a2c = a2.clone();
                move |t, s| a2c(s, t).abs()
            }),
            ..GeneratorSpec::zero()
        }
    };
    let spec = BsvieSpec::new(psi.clone(), gen);
    let (sol, _) = picard_solve(&spec, &PicardConfig::default())?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for i in 0..n {
        let xi_leaf = xi.leaf_view(i);
        let prod: Vec<f64> = xi_leaf
            .iter()
            .zip(psi.row(i))
            .map(|(a, b)| a * b)
            .collect();
        lhs += h * lat.expectation(n, &prod);
        let prod2: Vec<f64> = phi
            .values(i)
            .iter()
            .zip(sol.y.values(i))
            .map(|(a, b)| a * b)
            .collect();
        rhs += h * lat.expectation(i, &prod2);
    }
    Ok(DualityReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

// ---------------------------------------------------------------------------
// difference-quotient diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DiagnosticsRow {
    pub rho: f64,
    /// `Σ h E|(X_ρ − X)/ρ − ξ|²`
    pub x_sq: f64,
    /// `Σ h E|(Y_ρ − Y)/ρ − η|²`
    pub y_sq: f64,
    pub x_terminal_sq: f64,
    pub y_initial_sq: f64,
}

/// Difference quotients of the state map against the variational solution,
/// for a decreasing list of step sizes. Linear dynamics give identically
/// zero rows; nonlinear dynamics decrease with `ρ`.
pub fn convergence_diagnostics(
    prob: &ControlProblem,
    u: &AdaptedProcess,
    v_dir: &AdaptedProcess,
    rhos: &[f64],
) -> Result<Vec<DiagnosticsRow>> {
    let state = solve_state(prob, u)?;
    let var = solve_variational(prob, u, &state, v_dir)?;
    let lat = prob.lattice().clone();
    let n = lat.steps();
    let h = lat.dt();
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        if !(rho > 0.0) {
            return Err(Error::Parameter(format!(
                "rho must be positive, got {rho}"
            )));
        }
        let u_rho = u.add(&v_dir.scale(rho))?;
        let state_rho = solve_state(prob, &u_rho)?;
        let mut x_sq = 0.0;
        let mut y_sq = 0.0;
        for k in 0..n {
            let xt: Vec<f64> = state_rho
                .x
                .values(k)
                .iter()
                .zip(state.x.values(k).iter().zip(var.xi.values(k)))
                .map(|(xr, (x, xi))| {
                    let d = (xr - x) / rho - xi;
                    d * d
                })
                .collect();
            x_sq += h * lat.expectation(k, &xt);
            let yt: Vec<f64> = state_rho
                .backward
                .y
                .values(k)
                .iter()
                .zip(state.backward.y.values(k).iter().zip(var.eta.values(k)))
                .map(|(yr, (y, eta))| {
                    let d = (yr - y) / rho - eta;
                    d * d
                })
                .collect();
            y_sq += h * lat.expectation(k, &yt);
        }
        let xt: Vec<f64> = state_rho
            .x
            .values(n)
            .iter()
            .zip(state.x.values(n).iter().zip(var.xi.values(n)))
            .map(|(xr, (x, xi))| {
                let d = (xr - x) / rho - xi;
                d * d
            })
            .collect();
        let x_terminal_sq = lat.expectation(n, &xt);
        let y0 = (state_rho.backward.y.values(0)[0] - state.backward.y.values(0)[0]) / rho
            - var.eta.values(0)[0];
        rows.push(DiagnosticsRow {
            rho,
            x_sq,
            y_sq,
            x_terminal_sq,
            y_initial_sq: y0 * y0,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{coef_fn, cost_fn, gen_fn, kernel_const, scalar_fn};
    use crate::lattice::ScenarioTree;
    use approx::assert_abs_diff_eq;

    fn tree(n: usize) -> Arc<dyn Lattice> {
        ScenarioTree::with_steps(1.0, n).unwrap()
    }

    /// A small nonlinear test problem with every cost piece active.
    fn nonlinear_problem(lat: &Arc<dyn Lattice>) -> ControlProblem {
        let mut coeff = CoefficientSpec::zero("nonlinear");
        coeff.b = coef_fn(|a| 0.4 * a.x.sin() + 0.5 * a.v);
        coeff.b_x = coef_fn(|a| 0.4 * a.x.cos());
        coeff.b_v = coef_fn(|_| 0.5);
        coeff.sigma = coef_fn(|a| 0.2 + 0.15 * a.x + 0.3 * a.v);
        coeff.sigma_x = coef_fn(|_| 0.15);
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
            name: "nl-gen".into(),
            g: gen_fn(|a| 0.3 * a.x.cos() - 0.6 * a.y + 0.4 * a.zeta + 0.2 * a.v),
            d_x: gen_fn(|a| -0.3 * a.x.sin()),
            d_y: gen_fn(|_| -0.6),
            d_zeta: gen_fn(|_| 0.4),
            d_v: gen_fn(|_| 0.2),
            d_z: gen_fn(|_| 0.0),
            lip_y: kernel_const(0.6),
            lip_z: kernel_const(0.0),
            lip_zeta: kernel_const(0.4),
        };
        let psi_leaf: Vec<f64> = lat.wiener(lat.steps()).iter().map(|w| 0.5 * w).collect();
        ControlProblem {
            coeff,
            generator,
            phi: AdaptedProcess::constant(lat.clone(), 1.0),
            psi: TerminalFamily::uniform(lat.clone(), psi_leaf).unwrap(),
            control_set: ControlSet::real_line(),
            control: AdaptedProcess::constant(lat.clone(), 0.1),
        }
    }

    fn direction(lat: &Arc<dyn Lattice>) -> AdaptedProcess {
        AdaptedProcess::wiener(lat.clone()).map(|w| 0.5 + 0.3 * (w * 2.0).sin())
    }

    #[test]
    fn variational_zero_direction_is_zero() {
        let lat = tree(4);
        let prob = nonlinear_problem(&lat);
        let state = solve_state(&prob, &prob.control).unwrap();
        let var =
            solve_variational(&prob, &prob.control, &state, &AdaptedProcess::zero(lat)).unwrap();
        assert_eq!(var.xi.sup_norm(), 0.0);
        assert_eq!(var.eta.sup_norm(), 0.0);
    }

    #[test]
    fn variational_deterministic_reduction() {
        // only g_v ≡ 1 active, direction ≡ 1: ξ = 0, η(t) = T − t
        let lat = tree(5);
        let grid = lat.grid();
        let coeff = CoefficientSpec::zero("plain");
        let generator = GeneratorSpec {
            name: "gv-only".into(),
            g: gen_fn(|a| a.v),
            d_v: gen_fn(|_| 1.0),
            ..GeneratorSpec::zero()
        };
        let prob = ControlProblem {
            coeff,
            generator,
            phi: AdaptedProcess::zero(lat.clone()),
            psi: TerminalFamily::constant(lat.clone(), 0.0),
            control_set: ControlSet::real_line(),
            control: AdaptedProcess::zero(lat.clone()),
        };
        let state = solve_state(&prob, &prob.control).unwrap();
        let one = AdaptedProcess::constant(lat.clone(), 1.0);
        let var = solve_variational(&prob, &prob.control, &state, &one).unwrap();
        assert_eq!(var.xi.sup_norm(), 0.0);
        for i in 0..=5 {
            let expect = grid.horizon() - grid.t(i);
            for v in var.eta.values(i) {
                assert_abs_diff_eq!(*v, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn difference_quotients_decrease_with_rho() {
        let lat = tree(4);
        let prob = nonlinear_problem(&lat);
        let dir = direction(&lat);
        let rows = convergence_diagnostics(&prob, &prob.control, &dir, &[1e-2, 1e-3]).unwrap();
        assert!(rows[0].x_sq > rows[1].x_sq);
        assert!(rows[0].y_sq > rows[1].y_sq);
        assert!(rows[1].x_sq < 1e-5);
    }

    #[test]
    fn linear_dynamics_make_diagnostics_vanish() {
        let lat = tree(4);
        let mut prob = nonlinear_problem(&lat);
        prob.coeff.b = coef_fn(|a| 0.4 * a.x + 0.5 * a.v);
        prob.coeff.b_x = coef_fn(|_| 0.4);
        prob.generator = GeneratorSpec::affine(
            "affine",
            kernel_const(0.1),
            kernel_const(0.3),
            kernel_const(-0.6),
            kernel_const(0.0),
            kernel_const(0.4),
            kernel_const(0.2),
        )
        .unwrap();
        let dir = direction(&lat);
        let rows = convergence_diagnostics(&prob, &prob.control, &dir, &[1e-1, 1e-2]).unwrap();
        for row in rows {
            assert!(row.x_sq < 1e-20, "x quotient not exact: {}", row.x_sq);
            assert!(row.y_sq < 1e-17, "y quotient not exact: {}", row.y_sq);
        }
    }

    #[test]
    fn cost_trivial_examples() {
        let lat = tree(4);
        // all cost pieces zero
        let mut prob = nonlinear_problem(&lat);
        prob.coeff.l = cost_fn(|_| 0.0);
        prob.coeff.l_x = cost_fn(|_| 0.0);
        prob.coeff.l_y = cost_fn(|_| 0.0);
        prob.coeff.l_v = cost_fn(|_| 0.0);
        prob.coeff.h = scalar_fn(|_| 0.0);
        prob.coeff.h_x = scalar_fn(|_| 0.0);
        prob.coeff.gamma = scalar_fn(|_| 0.0);
        prob.coeff.gamma_y = scalar_fn(|_| 0.0);
        assert_eq!(evaluate_cost(&prob, &prob.control).unwrap(), 0.0);

        // pure control cost at a constant control: J = c²·T
        let coeff = {
            let mut c = CoefficientSpec::zero("vv");
            c.l = cost_fn(|a| a.v * a.v);
            c.l_v = cost_fn(|a| 2.0 * a.v);
            c
        };
        let prob = ControlProblem {
            coeff,
            generator: GeneratorSpec::zero(),
            phi: AdaptedProcess::zero(lat.clone()),
            psi: TerminalFamily::constant(lat.clone(), 0.0),
            control_set: ControlSet::real_line(),
            control: AdaptedProcess::constant(lat.clone(), 0.7),
        };
        let j = evaluate_cost(&prob, &prob.control).unwrap();
        assert_abs_diff_eq!(j, 0.49, epsilon = 1e-14);

        // infeasible control is rejected
        let bounded = ControlProblem {
            control_set: ControlSet::interval(0.0, 0.5).unwrap(),
            ..prob
        };
        assert!(evaluate_cost(&bounded, &bounded.control).is_err());
    }

    #[test]
    fn gateaux_matches_central_difference() {
        let lat = tree(4);
        let prob = nonlinear_problem(&lat);
        let state = solve_state(&prob, &prob.control).unwrap();
        let dir = direction(&lat);
        let d = gateaux_derivative(&prob, &prob.control, &state, &dir).unwrap();
        let rho = 1e-4;
        let jp = evaluate_cost(&prob, &prob.control.add(&dir.scale(rho)).unwrap()).unwrap();
        let jm = evaluate_cost(&prob, &prob.control.add(&dir.scale(-rho)).unwrap()).unwrap();
        let fd = (jp - jm) / (2.0 * rho);
        assert_abs_diff_eq!(d, fd, epsilon = 1e-3 * d.abs().max(1.0));
    }

    #[test]
    fn adjoint_route_matches_variational_route() {
        let lat = tree(4);
        let prob = nonlinear_problem(&lat);
        let state = solve_state(&prob, &prob.control).unwrap();
        let (_, ham) = solve_adjoint(&prob, &prob.control, &state).unwrap();
        for seed in 0..3 {
            let dir = AdaptedProcess::wiener(lat.clone())
                .map(move |w| (w + seed as f64).cos() + 0.2 * seed as f64);
            let a = gateaux_derivative(&prob, &prob.control, &state, &dir).unwrap();
            let b = gateaux_from_adjoint(&ham, &dir).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-8 * a.abs().max(1.0));
        }
    }

    #[test]
    fn adjoint_trivial_costs_vanish() {
        let lat = tree(4);
        let mut prob = nonlinear_problem(&lat);
        prob.coeff.l = cost_fn(|_| 0.0);
        prob.coeff.l_x = cost_fn(|_| 0.0);
        prob.coeff.l_y = cost_fn(|_| 0.0);
        prob.coeff.l_v = cost_fn(|_| 0.0);
        prob.coeff.h = scalar_fn(|_| 0.0);
        prob.coeff.h_x = scalar_fn(|_| 0.0);
        prob.coeff.gamma = scalar_fn(|_| 0.0);
        prob.coeff.gamma_y = scalar_fn(|_| 0.0);
        let state = solve_state(&prob, &prob.control).unwrap();
        let (adj, ham) = solve_adjoint(&prob, &prob.control, &state).unwrap();
        assert_eq!(adj.p.sup_norm(), 0.0);
        assert_eq!(adj.q.sup_norm(), 0.0);
        assert_eq!(ham.sup_norm(), 0.0);
    }

    #[test]
    fn adjoint_constant_ly_reduction() {
        // g independent of y and ζ, l_y ≡ c, γ ≡ 0 ⇒ P ≡ c
        let lat = tree(4);
        let mut prob = nonlinear_problem(&lat);
        prob.generator = GeneratorSpec {
            name: "x-only".into(),
            g: gen_fn(|a| 0.3 * a.x),
            d_x: gen_fn(|_| 0.3),
            ..GeneratorSpec::zero()
        };
        prob.coeff.l = cost_fn(|a| 2.0 * a.y);
        prob.coeff.l_x = cost_fn(|_| 0.0);
        prob.coeff.l_y = cost_fn(|_| 2.0);
        prob.coeff.l_v = cost_fn(|_| 0.0);
        prob.coeff.gamma = scalar_fn(|_| 0.0);
        prob.coeff.gamma_y = scalar_fn(|_| 0.0);
        let state = solve_state(&prob, &prob.control).unwrap();
        let (adj, _) = solve_adjoint(&prob, &prob.control, &state).unwrap();
        for k in 0..4 {
            for v in adj.p.values(k) {
                assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn adjoint_backward_rows_are_m_solutions() {
        let lat = tree(4);
        let prob = nonlinear_problem(&lat);
        let state = solve_state(&prob, &prob.control).unwrap();
        let (adj, _) = solve_adjoint(&prob, &prob.control, &state).unwrap();
        let pair = MSolution {
            y: adj.q.clone(),
            z: adj.r.clone(),
        };
        assert!(pair.m_condition_residual() < 1e-10);
        // π reproduces h_x(X_N) exactly when integrated against the noise
        let n = 4;
        let hx: Vec<f64> = state
            .x
            .values(n)
            .iter()
            .map(|x| (prob.coeff.h_x)(*x))
            .collect();
        let mut acc = vec![lat.expectation(n, &hx)];
        for k in 0..n {
            let lifted = lat.lift_step(k, &acc);
            let pi_up = lat.lift_step(k, adj.pi.values(k));
            let dw = lat.increments(k);
            acc = lifted
                .iter()
                .zip(pi_up.iter().zip(&dw))
                .map(|(a, (p, d))| a + p * d)
                .collect();
        }
        for (a, b) in acc.iter().zip(&hx) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mp_check_trivial_and_perturbed() {
        let lat = tree(3);
        let prob = nonlinear_problem(&lat);
        let state = solve_state(&prob, &prob.control).unwrap();
        let (_, ham) = solve_adjoint(&prob, &prob.control, &state).unwrap();
        // singleton control set: no admissible deviation, violation 0
        let singleton = move |u: f64| vec![u];
        let v = check_maximum_principle(&ham, &prob.control, &singleton);
        assert_abs_diff_eq!(v.worst, 0.0, epsilon = 0.0);
        // an arbitrary (non-optimal) control shows a strict violation
        let samples = default_mp_samples(ControlSet::interval(-2.0, 2.0).unwrap());
        let v = check_maximum_principle(&ham, &prob.control, &samples);
        assert!(v.worst > 1e-6);
    }

    #[test]
    fn duality_zero_kernels_is_exact() {
        let lat = tree(4);
        let phi = AdaptedProcess::wiener(lat.clone()).map(|w| 1.0 + w);
        let psi = TerminalFamily::uniform(lat.clone(), lat.wiener(4)).unwrap();
        let rep =
            check_duality(&lat, &kernel_const(0.0), &kernel_const(0.0), &phi, &psi).unwrap();
        assert!(rep.gap <= 1e-12, "gap {}", rep.gap);
    }

    #[test]
    fn duality_examples_have_tiny_gap() {
        // the instances with ψ = W(T) (drift kernel) or deterministic ψ
        // (noise kernel) have an exactly vanishing diagonal defect
        for (a1, a2, use_w_phi) in [(1.0, 0.0, false), (0.0, 1.0, true)] {
            let lat = tree(4);
            let phi = if use_w_phi {
                AdaptedProcess::wiener(lat.clone())
            } else {
                AdaptedProcess::constant(lat.clone(), 1.0)
            };
            let psi = TerminalFamily::uniform(lat.clone(), lat.wiener(4)).unwrap();
            let rep =
                check_duality(&lat, &kernel_const(a1), &kernel_const(a2), &phi, &psi).unwrap();
            assert!(rep.gap < 1e-12, "gap {} for kernels ({a1},{a2})", rep.gap);
        }
    }

    #[test]
    fn duality_gap_halves_with_grid() {
        // a generic instance whose diagonal defect does not vanish
        let mut gaps = Vec::new();
        for n in [4usize, 8] {
            let lat = tree(n);
            let phi = AdaptedProcess::wiener(lat.clone()).map(|w| 1.0 + w * w);
            let leaf: Vec<f64> = lat.wiener(n).iter().map(|w| w * w + w).collect();
            let psi = TerminalFamily::uniform(lat.clone(), leaf).unwrap();
            let rep =
                check_duality(&lat, &kernel_const(1.0), &kernel_const(0.5), &phi, &psi).unwrap();
            gaps.push(rep.gap);
        }
        let ratio = gaps[0] / gaps[1];
        assert!(
            (1.5..=2.5).contains(&ratio),
            "duality gap ratio {ratio}: {gaps:?}"
        );
    }

    #[test]
    fn hamiltonian_zero_when_control_detached() {
        let lat = tree(3);
        let mut prob = nonlinear_problem(&lat);
        prob.coeff.b = coef_fn(|a| 0.4 * a.x);
        prob.coeff.b_x = coef_fn(|_| 0.4);
        prob.coeff.b_v = coef_fn(|_| 0.0);
        prob.coeff.sigma = coef_fn(|_| 0.2);
        prob.coeff.sigma_v = coef_fn(|_| 0.0);
        prob.coeff.l_v = cost_fn(|_| 0.0);
        prob.coeff.l = cost_fn(|a| 0.5 * (a.x * a.x + a.y * a.y));
        prob.generator = GeneratorSpec {
            name: "no-v".into(),
            g: gen_fn(|a| -0.6 * a.y + 0.4 * a.zeta),
            d_y: gen_fn(|_| -0.6),
            d_zeta: gen_fn(|_| 0.4),
            lip_y: kernel_const(0.6),
            lip_zeta: kernel_const(0.4),
            ..GeneratorSpec::zero()
        };
        let state = solve_state(&prob, &prob.control).unwrap();
        let (_, ham) = solve_adjoint(&prob, &prob.control, &state).unwrap();
        assert_eq!(ham.sup_norm(), 0.0);
        assert_eq!(hamiltonian_value(&ham, 0, 0, 5.0), 0.0);
    }
}
