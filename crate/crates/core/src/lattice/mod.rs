//! Discrete probability scaffolding.
//!
//! The driving Wiener process on `[0, T]` is replaced by a non-recombining
//! binary tree: at every step the increment is `±√h` with probability ½.
//! Because the increments are Rademacher, `ΔW² = h` holds *surely*, so
//! conditional expectations, the tower property and the one-step martingale
//! representation
//!
//! ```text
//! v = E[v | F_k] + z·ΔW_k,     z = (v_up − v_down) / (2√h)
//! ```
//!
//! are exact identities rather than approximations. Volterra dynamics are
//! non-Markovian, so the tree does not recombine; level `k` has `2^k` nodes
//! and the practical cap for the exact backend is `N ≤ 16`.
//!
//! The [`Lattice`] trait abstracts the handful of operations the solvers
//! need (one-step conditional expectation, representation density, lift,
//! increments, expectation). [`ScenarioTree`] is the exact implementation;
//! [`regression::RegressionLattice`] implements the same interface with
//! least-squares Monte Carlo projections for step counts beyond the exact
//! cap. Backends are registered by name in [`backend::BackendRegistry`].

pub mod backend;
pub mod regression;

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Uniform partition of `[0, T]` into `N` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Grid("need at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step size `h = T / N`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time `t_i = i·h`, for `i = 0..=N`.
    pub fn t(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        // t_0 = 0 and t_N = T exactly; interior nodes are i*h.
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }
}

/// Interface shared by the exact tree and the regression Monte Carlo backend.
///
/// Values "at level `k`" are a flat slice of length [`Lattice::width`]`(k)`:
/// one entry per tree node for the exact backend, one per simulated path for
/// the Monte Carlo backend.
pub trait Lattice: Send + Sync {
    fn grid(&self) -> TimeGrid;

    /// Identifier used by registries and result files.
    fn backend_id(&self) -> &'static str;

    /// Number of values carried at a level.
    fn width(&self, level: usize) -> usize;

    /// Whether conditional expectations are exact (tree) or fitted (LSMC).
    fn is_exact(&self) -> bool;

    /// `E[v | F_level]` of values living at `level + 1`.
    fn cond_exp_step(&self, level: usize, child: &[f64]) -> Vec<f64>;

    /// Martingale representation density at `level` of values at `level + 1`:
    /// the unique `z` with `v = E[v | F_level] + z·ΔW_level`.
    fn repr_density_step(&self, level: usize, child: &[f64]) -> Vec<f64>;

    /// Broadcast values at `level` to `level + 1` (pathwise identity map).
    fn lift_step(&self, level: usize, parent: &[f64]) -> Vec<f64>;

    /// The increment `ΔW_level`, indexed like values at `level + 1`.
    fn increments(&self, level: usize) -> Vec<f64>;

    /// `W(t_level)` values at `level`.
    fn wiener(&self, level: usize) -> Vec<f64>;

    /// Plain expectation of values at `level`.
    fn expectation(&self, level: usize, values: &[f64]) -> f64;

    /// Hook for solvers to expose frozen iterates (e.g. the current Picard
    /// `Y`) as regression features. The exact tree ignores it.
    fn install_feature(&self, _key: &str, _levels: &[Vec<f64>]) {}

    fn steps(&self) -> usize {
        self.grid().steps()
    }

    fn dt(&self) -> f64 {
        self.grid().dt()
    }

    /// Broadcast values from `from` up to `to >= from`.
    fn lift_to(&self, from: usize, to: usize, values: &[f64]) -> Vec<f64> {
        debug_assert!(from <= to);
        let mut v = values.to_vec();
        for k in from..to {
            v = self.lift_step(k, &v);
        }
        v
    }

    /// All conditional expectations `E[v | F_k]`, `k = 0..=level`, of values
    /// at `level`. Returns one slice per level, index `k` at width `k`.
    fn cond_chain(&self, level: usize, values: &[f64]) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); level + 1];
        out[level] = values.to_vec();
        for k in (0..level).rev() {
            out[k] = self.cond_exp_step(k, &out[k + 1]);
        }
        out
    }

    /// `E[v | F_k]` of values at `level >= k`.
    fn cond_exp_to(&self, level: usize, k: usize, values: &[f64]) -> Vec<f64> {
        debug_assert!(k <= level);
        let mut v = values.to_vec();
        for j in (k..level).rev() {
            v = self.cond_exp_step(j, &v);
        }
        v
    }
}

/// Non-recombining binary tree with increments `±√h`.
///
/// Level `k` has `2^k` nodes. Node `n` at level `k+1` is the *up* child of
/// `n >> 1` when `n` is even (increment `+√h`) and the *down* child when odd.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
}

/// Hard cap on the exact backend; 2^16 leaves is the documented desk-scale
/// limit and anything beyond it is a configuration error.
pub const MAX_EXACT_STEPS: usize = 16;

impl ScenarioTree {
    pub fn new(grid: TimeGrid) -> Result<Arc<Self>> {
        if grid.steps() > MAX_EXACT_STEPS {
            return Err(Error::Grid(format!(
                "exact tree capped at {MAX_EXACT_STEPS} steps, got {}; use the regression-mc backend",
                grid.steps()
            )));
        }
        Ok(Arc::new(Self { grid }))
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Result<Arc<Self>> {
        Self::new(TimeGrid::new(horizon, steps)?)
    }

    fn sqrt_h(&self) -> f64 {
        self.grid.dt().sqrt()
    }

    /// Signed increment taken at step `level` on the path to `node` at
    /// `level + 1`: `+√h` for even node ids, `−√h` for odd.
    #[inline]
    pub fn dw(&self, node_at_child_level: usize) -> f64 {
        if node_at_child_level & 1 == 0 {
            self.sqrt_h()
        } else {
            -self.sqrt_h()
        }
    }

    /// Average of `v` (on leaves) over the descendants of every node at
    /// `level`; the discrete `E[v | F_level]`.
    pub fn conditional_expectation(&self, leaf_values: &[f64], level: usize) -> Result<Vec<f64>> {
        let n = self.grid.steps();
        if level > n {
            return Err(Error::LevelOutOfRange { level, max: n });
        }
        if leaf_values.len() != 1 << n {
            return Err(Error::Shape {
                context: "conditional_expectation leaf values",
                expected: 1 << n,
                got: leaf_values.len(),
            });
        }
        Ok(self.cond_exp_to(n, level, leaf_values))
    }

    /// One-step martingale representation at `level` of values at `level+1`.
    /// Returns `(m, z)` with `v = m + z·ΔW_level` exact at both children.
    pub fn martingale_representation(
        &self,
        child_values: &[f64],
        level: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if level >= self.grid.steps() {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.grid.steps() - 1,
            });
        }
        if child_values.len() != self.width(level + 1) {
            return Err(Error::Shape {
                context: "martingale_representation child values",
                expected: self.width(level + 1),
                got: child_values.len(),
            });
        }
        Ok((
            self.cond_exp_step(level, child_values),
            self.repr_density_step(level, child_values),
        ))
    }

    /// Debug dump: CSV with columns `level,node_id,W_value`.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "level,node_id,W_value")?;
        for k in 0..=self.grid.steps() {
            let w = self.wiener(k);
            for (n, wv) in w.iter().enumerate() {
                writeln!(out, "{k},{n},{wv:.15e}")?;
            }
        }
        Ok(())
    }
}

impl Lattice for ScenarioTree {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn backend_id(&self) -> &'static str {
        "exact-tree"
    }

    fn width(&self, level: usize) -> usize {
        1 << level
    }

    fn is_exact(&self) -> bool {
        true
    }

    fn cond_exp_step(&self, _level: usize, child: &[f64]) -> Vec<f64> {
        child.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    }

    fn repr_density_step(&self, _level: usize, child: &[f64]) -> Vec<f64> {
        let half_inv = 0.5 / self.sqrt_h();
        child
            .chunks_exact(2)
            .map(|c| (c[0] - c[1]) * half_inv)
            .collect()
    }

    fn lift_step(&self, _level: usize, parent: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(parent.len() * 2);
        for &p in parent {
            out.push(p);
            out.push(p);
        }
        out
    }

    fn increments(&self, level: usize) -> Vec<f64> {
        (0..self.width(level + 1)).map(|n| self.dw(n)).collect()
    }

    fn wiener(&self, level: usize) -> Vec<f64> {
        // W at a node is the signed sum along the path; each 1-bit in the
        // node id is a down move.
        let s = self.sqrt_h();
        (0..self.width(level))
            .map(|n| s * (level as f64 - 2.0 * (n as u32).count_ones() as f64))
            .collect()
    }

    fn expectation(&self, _level: usize, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Left-endpoint rectangle rule `Σ_{k=a}^{b-1} f(t_k)·h` evaluated pathwise;
/// `rows[k]` holds the integrand values at level `k`. Result lives at level
/// `b`. The empty sum (`a == b`) is zero.
pub fn integrate_drift(
    lattice: &dyn Lattice,
    rows: &[Vec<f64>],
    a: usize,
    b: usize,
) -> Result<Vec<f64>> {
    if a > b {
        return Err(Error::Parameter(format!(
            "integrate_drift needs a <= b, got a={a}, b={b}"
        )));
    }
    if b > lattice.steps() {
        return Err(Error::LevelOutOfRange {
            level: b,
            max: lattice.steps(),
        });
    }
    let h = lattice.dt();
    let mut acc = vec![0.0; lattice.width(a)];
    for k in a..b {
        for (dst, src) in acc.iter_mut().zip(rows[k].iter()) {
            *dst += h * src;
        }
        acc = lattice.lift_step(k, &acc);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tree(n: usize) -> Arc<ScenarioTree> {
        ScenarioTree::with_steps(1.0, n).unwrap()
    }

    fn leaves(t: &ScenarioTree) -> usize {
        t.width(t.steps())
    }

    #[test]
    fn grid_nodes_are_exact() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(8), 2.0);
        let h = g.dt();
        for i in 0..8 {
            assert_abs_diff_eq!(g.t(i + 1) - g.t(i), h, epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(ScenarioTree::with_steps(1.0, MAX_EXACT_STEPS + 1).is_err());
    }

    #[test]
    fn increments_have_exact_moments() {
        let t = tree(5);
        for k in 0..5 {
            let dw = t.increments(k);
            // lift to the same level for weighting: each child equally likely
            let mean = t.expectation(k + 1, &dw);
            let second: Vec<f64> = dw.iter().map(|x| x * x).collect();
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(t.expectation(k + 1, &second), t.dt(), epsilon = 1e-15);
            // Rademacher: the second moment is exact pathwise, not just on average
            for x in &second {
                assert_abs_diff_eq!(*x, t.dt(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn wiener_is_path_sum_of_increments() {
        let t = tree(6);
        let mut acc = vec![0.0];
        for k in 0..6 {
            let lifted = t.lift_step(k, &acc);
            let dw = t.increments(k);
            acc = lifted.iter().zip(&dw).map(|(a, d)| a + d).collect();
            let direct = t.wiener(k + 1);
            for (a, b) in acc.iter().zip(&direct) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn conditional_expectation_constant() {
        let t = tree(4);
        let v = vec![3.25; leaves(&t)];
        for k in 0..=4 {
            let e = t.conditional_expectation(&v, k).unwrap();
            assert_eq!(e.len(), 1 << k);
            for x in e {
                assert_abs_diff_eq!(x, 3.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn conditional_expectation_of_terminal_wiener_is_martingale() {
        let t = tree(4);
        let wt = t.wiener(4);
        for k in 0..=4 {
            let e = t.conditional_expectation(&wt, k).unwrap();
            let wk = t.wiener(k);
            for (a, b) in e.iter().zip(&wk) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn conditional_expectation_of_squared_terminal_wiener() {
        // E[W(T)^2 | F_k] = W(t_k)^2 + (T - t_k); frozen from enumerating all
        // 2^4 leaves by hand via the independent-increment decomposition.
        let t = tree(4);
        let wt = t.wiener(4);
        let sq: Vec<f64> = wt.iter().map(|x| x * x).collect();
        for k in 0..=4 {
            let e = t.conditional_expectation(&sq, k).unwrap();
            let wk = t.wiener(k);
            let remaining = t.grid().horizon() - t.grid().t(k);
            for (a, w) in e.iter().zip(&wk) {
                assert_abs_diff_eq!(*a, w * w + remaining, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn tower_property_exact() {
        let t = tree(6);
        // deliberately rough leaf function
        let v: Vec<f64> = (0..leaves(&t))
            .map(|n| ((n as f64) * 0.7).sin() + 0.1 * n as f64)
            .collect();
        for j in 0..=6usize {
            for k in 0..=j {
                let ej = t.conditional_expectation(&v, j).unwrap();
                let ekj = t.cond_exp_to(j, k, &ej);
                let ek = t.conditional_expectation(&v, k).unwrap();
                for (a, b) in ekj.iter().zip(&ek) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn representation_identity_reconstructs_exactly() {
        let t = tree(5);
        let v: Vec<f64> = (0..leaves(&t)).map(|n| ((n * n) as f64).cos()).collect();
        // peel the representation level by level, then rebuild
        let mut levels: Vec<Vec<f64>> = vec![v.clone()];
        let mut zs = Vec::new();
        let mut cur = v.clone();
        for k in (0..5).rev() {
            let (m, z) = t.martingale_representation(&cur, k).unwrap();
            zs.push(z);
            cur = m;
            levels.push(cur.clone());
        }
        zs.reverse();
        let mut rebuilt = cur; // E[v] at root
        for k in 0..5 {
            let lifted = t.lift_step(k, &rebuilt);
            let zl = t.lift_step(k, &zs[k]);
            let dw = t.increments(k);
            rebuilt = lifted
                .iter()
                .zip(zl.iter().zip(&dw))
                .map(|(m, (z, d))| m + z * d)
                .collect();
        }
        for (a, b) in rebuilt.iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn representation_of_wiener_and_constants() {
        let t = tree(4);
        for k in 0..4 {
            let w_next = t.wiener(k + 1);
            let (m, z) = t.martingale_representation(&w_next, k).unwrap();
            let wk = t.wiener(k);
            for ((m, z), w) in m.iter().zip(&z).zip(&wk) {
                assert_abs_diff_eq!(*m, *w, epsilon = 1e-14);
                assert_abs_diff_eq!(*z, 1.0, epsilon = 1e-14);
            }
            let c = vec![2.0; t.width(k + 1)];
            let (m, z) = t.martingale_representation(&c, k).unwrap();
            for (m, z) in m.iter().zip(&z) {
                assert_abs_diff_eq!(*m, 2.0, epsilon = 1e-15);
                assert_abs_diff_eq!(*z, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn representation_of_squared_wiener_at_root() {
        // v = W(t_1)^2 over two leaves: ((√h)^2 - (-√h)^2)/(2√h) = 0 and the
        // mean is h.
        let t = tree(1);
        let w1 = t.wiener(1);
        let sq: Vec<f64> = w1.iter().map(|x| x * x).collect();
        let (m, z) = t.martingale_representation(&sq, 0).unwrap();
        assert_abs_diff_eq!(m[0], t.dt(), epsilon = 1e-15);
        assert_abs_diff_eq!(z[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn discrete_stochastic_integral_mean_zero_and_isometry() {
        let t = tree(6);
        let h = t.dt();
        // adapted integrand z_k = cos(W(t_k)) + t_k
        let mut integral = vec![0.0];
        let mut sum_sq = 0.0;
        for k in 0..6 {
            let zk: Vec<f64> = t
                .wiener(k)
                .iter()
                .map(|w| w.cos() + t.grid().t(k))
                .collect();
            let z_sq: Vec<f64> = zk.iter().map(|z| z * z).collect();
            sum_sq += h * t.expectation(k, &z_sq);
            let dw = t.increments(k);
            let zl = t.lift_step(k, &zk);
            let il = t.lift_step(k, &integral);
            integral = il
                .iter()
                .zip(zl.iter().zip(&dw))
                .map(|(i, (z, d))| i + z * d)
                .collect();
        }
        assert_abs_diff_eq!(t.expectation(6, &integral), 0.0, epsilon = 1e-13);
        let sq: Vec<f64> = integral.iter().map(|x| x * x).collect();
        assert_abs_diff_eq!(t.expectation(6, &sq), sum_sq, epsilon = 1e-12);
    }

    #[test]
    fn integrate_drift_examples() {
        let t = tree(4);
        let n = t.steps();
        // f ≡ 1 integrates to T
        let ones: Vec<Vec<f64>> = (0..n).map(|k| vec![1.0; t.width(k)]).collect();
        let total = integrate_drift(t.as_ref(), &ones, 0, n).unwrap();
        for x in &total {
            assert_abs_diff_eq!(*x, t.grid().horizon(), epsilon = 1e-14);
        }
        // f(t_k) = t_k integrates to h^2·N(N-1)/2
        let ramp: Vec<Vec<f64>> = (0..n).map(|k| vec![t.grid().t(k); t.width(k)]).collect();
        let total = integrate_drift(t.as_ref(), &ramp, 0, n).unwrap();
        let h = t.dt();
        let expect = h * h * (n * (n - 1)) as f64 / 2.0;
        for x in &total {
            assert_abs_diff_eq!(*x, expect, epsilon = 1e-14);
        }
        // empty sum
        let empty = integrate_drift(t.as_ref(), &ones, 2, 2).unwrap();
        for x in &empty {
            assert_abs_diff_eq!(*x, 0.0, epsilon = 0.0);
        }
        assert!(integrate_drift(t.as_ref(), &ones, 3, 2).is_err());
    }

    #[test]
    fn dump_csv_has_header_and_counts() {
        let t = tree(3);
        let mut buf = Vec::new();
        t.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "level,node_id,W_value");
        assert_eq!(lines.len(), 1 + 1 + 2 + 4 + 8);
    }
}
