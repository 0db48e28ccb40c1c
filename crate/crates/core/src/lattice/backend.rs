//! Backend registry: conditional-expectation strategies selectable by name.
//!
//! `exact-tree` is the default and the oracle for every acceptance check;
//! `regression-mc` trades exactness for step counts beyond the tree cap.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::regression::RegressionLattice;
use super::{Lattice, ScenarioTree, TimeGrid};
use crate::error::{Error, Result};

/// Knobs a backend may consume; unknown fields are ignored by backends that
/// do not need them.
#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub basis_degree: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_paths: 4096,
            basis_degree: 3,
        }
    }
}

pub trait BackendFactory: Send + Sync {
    fn id(&self) -> &'static str;
    fn build(&self, grid: TimeGrid, cfg: &BackendConfig) -> Result<Arc<dyn Lattice>>;
}

struct ExactTreeFactory;

impl BackendFactory for ExactTreeFactory {
    fn id(&self) -> &'static str {
        "exact-tree"
    }

    fn build(&self, grid: TimeGrid, _cfg: &BackendConfig) -> Result<Arc<dyn Lattice>> {
        Ok(ScenarioTree::new(grid)? as Arc<dyn Lattice>)
    }
}

struct RegressionFactory;

impl BackendFactory for RegressionFactory {
    fn id(&self) -> &'static str {
        "regression-mc"
    }

    fn build(&self, grid: TimeGrid, cfg: &BackendConfig) -> Result<Arc<dyn Lattice>> {
        Ok(Arc::new(RegressionLattice::new(
            grid,
            cfg.n_paths,
            cfg.basis_degree,
            cfg.seed,
        )?))
    }
}

pub struct BackendRegistry {
    factories: BTreeMap<&'static str, Box<dyn BackendFactory>>,
}

impl BackendRegistry {
    /// Registry with the two built-in backends.
    pub fn builtin() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register(Box::new(ExactTreeFactory));
        r.register(Box::new(RegressionFactory));
        r
    }

    pub fn register(&mut self, factory: Box<dyn BackendFactory>) {
        self.factories.insert(factory.id(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(
        &self,
        name: &str,
        grid: TimeGrid,
        cfg: &BackendConfig,
    ) -> Result<Arc<dyn Lattice>> {
        self.factories
            .get(name)
            .ok_or_else(|| Error::UnknownKey {
                key: name.to_string(),
                registry: "backend",
            })?
            .build(grid, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_backends_resolve_by_name() {
        let reg = BackendRegistry::builtin();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let cfg = BackendConfig::default();
        let tree = reg.build("exact-tree", grid, &cfg).unwrap();
        assert!(tree.is_exact());
        let mc = reg.build("regression-mc", grid, &cfg).unwrap();
        assert!(!mc.is_exact());
        assert!(reg.build("nope", grid, &cfg).is_err());
    }
}
