//! One- and two-parameter processes on a lattice, adapted M-solutions, the
//! exponentially weighted norm and M-completion.
//!
//! An [`AdaptedProcess`] carries one value per node at every level, so
//! adaptedness is structural. A [`TwoParamProcess`] `Z(t_i, t_j)` carries,
//! for every outer index `i`, an adapted row in the inner time; the inner
//! slot `j` multiplies the increment `ΔW_j`, so rows have `N` slots. An
//! [`MSolution`] is a pair `(Y, Z)` satisfying
//!
//! ```text
//! Y(t_i) = E[Y(t_i)] + Σ_{j<i} Z(t_i, t_j) ΔW_j        (exact on the tree)
//! ```
//!
//! where the sub-diagonal part of `Z` is produced by [`m_completion`]:
//! repeated one-step martingale representation of `Y(t_i)` down the levels.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::Lattice;

/// Closed interval control set (either bound may be infinite). Convex by
/// construction; projection is the clamp.
#[derive(Debug, Clone, Copy)]
pub struct ControlSet {
    pub lo: f64,
    pub hi: f64,
}

impl ControlSet {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if lo > hi {
            return Err(Error::Parameter(format!(
                "control interval needs lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn real_line() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A real value per node, levels `0..=N`.
#[derive(Clone)]
pub struct AdaptedProcess {
    lattice: Arc<dyn Lattice>,
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn from_levels(lattice: Arc<dyn Lattice>, levels: Vec<Vec<f64>>) -> Result<Self> {
        let n = lattice.steps();
        if levels.len() != n + 1 {
            return Err(Error::Shape {
                context: "adapted process levels",
                expected: n + 1,
                got: levels.len(),
            });
        }
        for (k, row) in levels.iter().enumerate() {
            if row.len() != lattice.width(k) {
                return Err(Error::Shape {
                    context: "adapted process level width",
                    expected: lattice.width(k),
                    got: row.len(),
                });
            }
        }
        Ok(Self { lattice, levels })
    }

    pub fn constant(lattice: Arc<dyn Lattice>, c: f64) -> Self {
        let levels = (0..=lattice.steps())
            .map(|k| vec![c; lattice.width(k)])
            .collect();
        Self { lattice, levels }
    }

    pub fn zero(lattice: Arc<dyn Lattice>) -> Self {
        Self::constant(lattice, 0.0)
    }

    /// Build from a deterministic function of time (same value across a level).
    pub fn from_time_fn(lattice: Arc<dyn Lattice>, f: impl Fn(f64) -> f64) -> Self {
        let grid = lattice.grid();
        let levels = (0..=lattice.steps())
            .map(|k| vec![f(grid.t(k)); lattice.width(k)])
            .collect();
        Self { lattice, levels }
    }

    /// The Wiener path itself, `W(t_k)` per node.
    pub fn wiener(lattice: Arc<dyn Lattice>) -> Self {
        let levels = (0..=lattice.steps()).map(|k| lattice.wiener(k)).collect();
        Self { lattice, levels }
    }

    pub fn lattice(&self) -> &Arc<dyn Lattice> {
        &self.lattice
    }

    pub fn values(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn values_mut(&mut self, level: usize) -> &mut Vec<f64> {
        &mut self.levels[level]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn steps(&self) -> usize {
        self.lattice.steps()
    }

    /// Value lifted to the leaf level (pathwise view).
    pub fn leaf_view(&self, level: usize) -> Vec<f64> {
        self.lattice
            .lift_to(level, self.lattice.steps(), &self.levels[level])
    }

    pub fn expectation(&self, level: usize) -> f64 {
        self.lattice.expectation(level, &self.levels[level])
    }

    pub fn variance(&self, level: usize) -> f64 {
        let m = self.expectation(level);
        let sq: Vec<f64> = self.levels[level].iter().map(|v| (v - m) * (v - m)).collect();
        self.lattice.expectation(level, &sq)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let levels = self
            .levels
            .iter()
            .map(|row| row.iter().map(|&v| f(v)).collect())
            .collect();
        Self {
            lattice: self.lattice.clone(),
            levels,
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !Arc::ptr_eq(&self.lattice, &other.lattice) {
            return Err(Error::LatticeMismatch {
                context: "zip_with",
            });
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        Ok(Self {
            lattice: self.lattice.clone(),
            levels,
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Largest absolute value over all nodes and levels.
    pub fn sup_norm(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        for (k, row) in self.levels.iter().enumerate() {
            for (n, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context,
                        level: k,
                        node: n,
                    });
                }
            }
        }
        Ok(())
    }
}

/// A leaf-measurable value per outer time: `ψ(t_i)` given on every leaf, for
/// every `i = 0..=N`.
#[derive(Clone)]
pub struct TerminalFamily {
    lattice: Arc<dyn Lattice>,
    rows: Vec<Vec<f64>>,
}

impl TerminalFamily {
    pub fn from_rows(lattice: Arc<dyn Lattice>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = lattice.steps();
        if rows.len() != n + 1 {
            return Err(Error::Shape {
                context: "terminal family rows",
                expected: n + 1,
                got: rows.len(),
            });
        }
        let w = lattice.width(n);
        for row in &rows {
            if row.len() != w {
                return Err(Error::Shape {
                    context: "terminal family row width",
                    expected: w,
                    got: row.len(),
                });
            }
        }
        Ok(Self { lattice, rows })
    }

    /// Same leaf payoff for every outer time.
    pub fn uniform(lattice: Arc<dyn Lattice>, leaf: Vec<f64>) -> Result<Self> {
        let n = lattice.steps();
        Self::from_rows(lattice, vec![leaf; n + 1])
    }

    pub fn constant(lattice: Arc<dyn Lattice>, c: f64) -> Self {
        let n = lattice.steps();
        let w = lattice.width(n);
        Self {
            lattice,
            rows: vec![vec![c; w]; n + 1],
        }
    }

    /// Build row by row from a function of the outer time index.
    pub fn from_fn(lattice: Arc<dyn Lattice>, f: impl Fn(usize) -> Vec<f64>) -> Result<Self> {
        let n = lattice.steps();
        let rows = (0..=n).map(f).collect();
        Self::from_rows(lattice, rows)
    }

    pub fn lattice(&self) -> &Arc<dyn Lattice> {
        &self.lattice
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            lattice: self.lattice.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !Arc::ptr_eq(&self.lattice, &other.lattice) {
            return Err(Error::LatticeMismatch {
                context: "terminal family zip",
            });
        }
        Ok(Self {
            lattice: self.lattice.clone(),
            rows: self
                .rows
                .iter()
                .zip(&other.rows)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        })
    }
}

/// Two-parameter process `Z(t_i, t_j)`: for each outer `i = 0..=N`, one
/// adapted row with inner slots `j = 0..N` (slot `j` lives at level `j` and
/// multiplies `ΔW_j`).
#[derive(Clone)]
pub struct TwoParamProcess {
    lattice: Arc<dyn Lattice>,
    rows: Vec<Vec<Vec<f64>>>,
}

impl TwoParamProcess {
    pub fn zero(lattice: Arc<dyn Lattice>) -> Self {
        let n = lattice.steps();
        let rows = (0..=n)
            .map(|_| (0..n).map(|j| vec![0.0; lattice.width(j)]).collect())
            .collect();
        Self { lattice, rows }
    }

    pub fn lattice(&self) -> &Arc<dyn Lattice> {
        &self.lattice
    }

    pub fn steps(&self) -> usize {
        self.lattice.steps()
    }

    /// Values of `Z(t_i, ·)` at inner slot `j` (level-`j` data).
    pub fn slot(&self, i: usize, j: usize) -> &[f64] {
        &self.rows[i][j]
    }

    pub fn set_slot(&mut self, i: usize, j: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.lattice.width(j));
        self.rows[i][j] = values;
    }

    pub fn row(&self, i: usize) -> &[Vec<f64>] {
        &self.rows[i]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            lattice: self.lattice.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|s| s.iter().map(|&v| f(v)).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !Arc::ptr_eq(&self.lattice, &other.lattice) {
            return Err(Error::LatticeMismatch {
                context: "two-parameter zip",
            });
        }
        Ok(Self {
            lattice: self.lattice.clone(),
            rows: self
                .rows
                .iter()
                .zip(&other.rows)
                .map(|(ra, rb)| {
                    ra.iter()
                        .zip(rb)
                        .map(|(sa, sb)| sa.iter().zip(sb).map(|(&x, &y)| f(x, y)).collect())
                        .collect()
                })
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }
}

/// Adapted M-solution: `(Y, Z)` with the sub-diagonal of `Z` pinned by the
/// martingale representation of `Y`.
#[derive(Clone)]
pub struct MSolution {
    pub y: AdaptedProcess,
    pub z: TwoParamProcess,
}

impl MSolution {
    pub fn zero(lattice: Arc<dyn Lattice>) -> Self {
        Self {
            y: AdaptedProcess::zero(lattice.clone()),
            z: TwoParamProcess::zero(lattice),
        }
    }

    /// Worst residual of the M-condition over all outer times and leaves:
    /// `Y(t_i) − E[Y(t_i)] − Σ_{j<i} Z(t_i,t_j) ΔW_j`. Zero to machine
    /// precision on the exact tree for any solver output.
    pub fn m_condition_residual(&self) -> f64 {
        let lat = self.y.lattice();
        let n = lat.steps();
        let mut worst = 0.0f64;
        for i in 0..=n {
            let ey = self.y.expectation(i);
            let mut acc = vec![ey; 1];
            for j in 0..i {
                let lifted = lat.lift_step(j, &acc);
                let z = lat.lift_to(j, j + 1, self.z.slot(i, j));
                // z is level-j data; one lift puts it beside ΔW_j
                let zj = &z;
                let dw = lat.increments(j);
                acc = lifted
                    .iter()
                    .zip(zj.iter().zip(&dw))
                    .map(|(a, (z, d))| a + z * d)
                    .collect();
            }
            let rebuilt = lat.lift_to(i, i, &acc);
            let y = self.y.values(i);
            for (a, b) in rebuilt.iter().zip(y) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Exponentially weighted norm of a pair `(y, z)`:
///
/// ```text
/// [ Σ_i h e^{β t_i} E|y(t_i)|²  +  Σ_i h e^{β t_i} E Σ_j h z(t_i,t_j)² ]^{1/2}
/// ```
///
/// with outer sums over `i = 0..N` (left endpoint) and the inner sum over
/// the full square. `β = 0` recovers the plain norm; under a large enough
/// `β` the Picard map of the BSVIE solver is a contraction.
pub fn weighted_norm(y: &AdaptedProcess, z: &TwoParamProcess, beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::Parameter(format!(
            "weighted norm needs beta >= 0, got {beta}"
        )));
    }
    if !Arc::ptr_eq(y.lattice(), z.lattice()) {
        return Err(Error::LatticeMismatch {
            context: "weighted_norm",
        });
    }
    let lat = y.lattice();
    let grid = lat.grid();
    let n = lat.steps();
    let h = grid.dt();
    let mut total = 0.0;
    for i in 0..n {
        let w = (beta * grid.t(i)).exp() * h;
        let sq: Vec<f64> = y.values(i).iter().map(|v| v * v).collect();
        total += w * lat.expectation(i, &sq);
        let mut inner = 0.0;
        for j in 0..n {
            let zs: Vec<f64> = z.slot(i, j).iter().map(|v| v * v).collect();
            inner += h * lat.expectation(j, &zs);
        }
        total += w * inner;
    }
    Ok(total.sqrt())
}

/// Sub-diagonal completion: repeated martingale representation of `Y(t_i)`
/// down levels `i−1, …, 0` yields the unique `Z(t_i, t_j)` for `j < i`.
/// Slots with `j ≥ i` are left at zero.
pub fn m_completion(y: &AdaptedProcess) -> TwoParamProcess {
    let lat = y.lattice().clone();
    let n = lat.steps();
    let mut z = TwoParamProcess::zero(lat.clone());
    for i in 1..=n {
        let mut cur = y.values(i).to_vec();
        for j in (0..i).rev() {
            let dens = lat.repr_density_step(j, &cur);
            cur = lat.cond_exp_step(j, &cur);
            z.set_slot(i, j, dens);
        }
    }
    z
}
