//! Bagged regression trees with per-node feature subsampling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_presorted, DecisionTree, SortedColumns, TreeConfig};
use crate::matrix::Matrix;
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Defaults to `floor(sqrt(d))` (at least 1).
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 16,
            min_samples_leaf: 1,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
}

impl ForestModel {
    /// Mean of the trees; on 0/1 targets this is the mean class frequency.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.rows().map(|r| self.predict_row(r)).collect()
    }
}

pub fn forest_fit(x: &Matrix, y: &[f64], cfg: &ForestConfig) -> Result<ForestModel> {
    forest_fit_presorted(x, &SortedColumns::new(x), y, cfg)
}

pub fn forest_fit_presorted(
    x: &Matrix,
    sorted: &SortedColumns<'_>,
    y: &[f64],
    cfg: &ForestConfig,
) -> Result<ForestModel> {
    let n = x.n_rows();
    if n == 0 || y.len() != n {
        return Err(Error::invalid("forest fit needs non-empty data with matching targets"));
    }
    if cfg.n_trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let d = x.n_cols();
    let m = cfg
        .max_features
        .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1));
    let tree_cfg = TreeConfig {
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        max_features: Some(m),
    };
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(cfg.seed, t as u64);
            let mut weights = vec![0.0; n];
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1.0;
            }
            fit_presorted(x, sorted, y, Some(&weights), &tree_cfg, &mut rng).map(|o| o.tree)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel { trees })
}
