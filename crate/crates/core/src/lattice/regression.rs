//! Least-squares Monte Carlo backend.
//!
//! Conditional expectations are replaced by projections onto a polynomial
//! basis in `W(t_k)` plus any installed feature processes (the frozen state
//! `X` or the current Picard iterate `Y`). Representation densities are
//! fitted by regressing `v·ΔW/h` on the same basis. Everything is seeded and
//! deterministic; the exact tree remains the oracle and the default.

use std::collections::BTreeMap;
use std::sync::RwLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Lattice, TimeGrid};
use crate::error::{Error, Result};

pub struct RegressionLattice {
    grid: TimeGrid,
    n_paths: usize,
    degree: usize,
    /// increments[k][p] = ΔW_k on path p
    increments: Vec<Vec<f64>>,
    /// wiener[k][p] = W(t_k) on path p
    wiener: Vec<Vec<f64>>,
    /// Extra regression features, keyed by name; each is one slice per level.
    features: RwLock<BTreeMap<String, Vec<Vec<f64>>>>,
}

impl RegressionLattice {
    pub fn new(grid: TimeGrid, n_paths: usize, degree: usize, seed: u64) -> Result<Self> {
        if n_paths < 8 {
            return Err(Error::Parameter(format!(
                "regression backend needs at least 8 paths, got {n_paths}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.steps();
        let sd = grid.dt().sqrt();
        let mut increments = Vec::with_capacity(n);
        let mut wiener = vec![vec![0.0; n_paths]];
        for k in 0..n {
            // Rademacher increments here as well: keeps the discrete moments
            // exact and the two backends directly comparable.
            let dw: Vec<f64> = (0..n_paths)
                .map(|_| if rng.gen::<bool>() { sd } else { -sd })
                .collect();
            let next: Vec<f64> = wiener[k].iter().zip(&dw).map(|(w, d)| w + d).collect();
            increments.push(dw);
            wiener.push(next);
        }
        Ok(Self {
            grid,
            n_paths,
            degree: degree.max(1),
            increments,
            wiener,
            features: RwLock::new(BTreeMap::new()),
        })
    }

    fn design(&self, level: usize) -> DMatrix<f64> {
        let feats = self.features.read().expect("feature lock poisoned");
        let mut columns: Vec<&[f64]> = vec![&self.wiener[level]];
        for f in feats.values() {
            if level < f.len() && f[level].len() == self.n_paths {
                // a near-constant feature duplicates the intercept
                let mean = f[level].iter().sum::<f64>() / self.n_paths as f64;
                let var = f[level]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / self.n_paths as f64;
                if var > 1e-10 * mean.abs().max(1.0) {
                    columns.push(&f[level]);
                }
            }
        }
        let ncols = 1 + columns.len() * self.degree;
        let mut m = DMatrix::zeros(self.n_paths, ncols);
        for p in 0..self.n_paths {
            m[(p, 0)] = 1.0;
            let mut c = 1;
            for col in &columns {
                let mut pw = 1.0;
                for _ in 0..self.degree {
                    pw *= col[p];
                    m[(p, c)] = pw;
                    c += 1;
                }
            }
        }
        m
    }

    fn project(&self, level: usize, target: &[f64]) -> Vec<f64> {
        let x = self.design(level);
        let y = DVector::from_column_slice(target);
        let svd = x.clone().svd(true, true);
        // rcond-style relative truncation keeps collinear bases harmless
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let beta = svd
            .solve(&y, 1e-10 * sigma_max.max(1e-300))
            .expect("least squares solve");
        (x * beta).iter().copied().collect()
    }
}

impl Lattice for RegressionLattice {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn backend_id(&self) -> &'static str {
        "regression-mc"
    }

    fn width(&self, _level: usize) -> usize {
        self.n_paths
    }

    fn is_exact(&self) -> bool {
        false
    }

    fn cond_exp_step(&self, level: usize, child: &[f64]) -> Vec<f64> {
        if level == 0 {
            // F_0 is trivial
            let m = child.iter().sum::<f64>() / child.len() as f64;
            return vec![m; self.n_paths];
        }
        self.project(level, child)
    }

    fn repr_density_step(&self, level: usize, child: &[f64]) -> Vec<f64> {
        let h = self.grid.dt();
        let target: Vec<f64> = child
            .iter()
            .zip(&self.increments[level])
            .map(|(v, d)| v * d / h)
            .collect();
        if level == 0 {
            let m = target.iter().sum::<f64>() / target.len() as f64;
            return vec![m; self.n_paths];
        }
        self.project(level, &target)
    }

    fn lift_step(&self, _level: usize, parent: &[f64]) -> Vec<f64> {
        parent.to_vec()
    }

    fn increments(&self, level: usize) -> Vec<f64> {
        self.increments[level].clone()
    }

    fn wiener(&self, level: usize) -> Vec<f64> {
        self.wiener[level].clone()
    }

    fn expectation(&self, _level: usize, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len() as f64
    }

    fn install_feature(&self, key: &str, levels: &[Vec<f64>]) {
        self.features
            .write()
            .expect("feature lock poisoned")
            .insert(key.to_string(), levels.to_vec());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conditional_expectation_of_martingale_is_close() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let lat = RegressionLattice::new(grid, 20_000, 3, 7).unwrap();
        let wt = lat.wiener(20);
        let e = lat.cond_exp_to(20, 5, &wt);
        let w5 = lat.wiener(5);
        let mut err = 0.0f64;
        for (a, b) in e.iter().zip(&w5) {
            err = err.max((a - b).abs());
        }
        assert!(err < 0.15, "regression CE error too large: {err}");
    }

    #[test]
    fn density_of_wiener_is_near_one() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let lat = RegressionLattice::new(grid, 10_000, 3, 11).unwrap();
        let w6 = lat.wiener(6);
        let z = lat.repr_density_step(5, &w6);
        let mean = lat.expectation(5, &z);
        assert_abs_diff_eq!(mean, 1.0, epsilon = 0.05);
    }

    #[test]
    fn deterministic_under_same_seed() {
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let a = RegressionLattice::new(grid, 512, 2, 3).unwrap();
        let b = RegressionLattice::new(grid, 512, 2, 3).unwrap();
        assert_eq!(a.wiener(6), b.wiener(6));
    }
}
