//! Stagewise gradient boosting over regression trees.

use serde::{Deserialize, Serialize};

use super::tree::{fit_presorted, DecisionTree, SortedColumns, TreeConfig};
use crate::matrix::Matrix;
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    /// Mean target (squared loss) or log-odds of the base rate (logistic).
    pub init_value: f64,
    pub trees: Vec<DecisionTree>,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub loss: Loss,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GbtModel {
    /// Additive score before any link function.
    pub fn raw_row(&self, x: &[f64]) -> f64 {
        self.init_value
            + self.learning_rate * self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
    }

    /// Regression value, or probability of the positive class.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let raw = self.raw_row(x);
        match self.loss {
            Loss::Squared => raw,
            Loss::Logistic => sigmoid(raw),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.rows().map(|r| self.predict_row(r)).collect()
    }
}

/// Training loss after each stage (index 0 is the initial constant model).
pub type LossTrace = Vec<f64>;

fn training_loss(loss: Loss, y: &[f64], raw: &[f64]) -> f64 {
    let n = y.len() as f64;
    match loss {
        Loss::Squared => y.iter().zip(raw).map(|(a, f)| (a - f) * (a - f)).sum::<f64>() / n,
        Loss::Logistic => {
            y.iter()
                .zip(raw)
                .map(|(a, f)| softplus(*f) - a * f)
                .sum::<f64>()
                / n
        }
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn gbt_fit(x: &Matrix, y: &[f64], cfg: &GbtConfig, loss: Loss) -> Result<GbtModel> {
    Ok(gbt_fit_traced(x, &SortedColumns::new(x), y, cfg, loss)?.0)
}

/// Fits with a caller-provided pre-sort of `x` and returns the per-stage
/// training loss (mean squared error or mean log-loss).
pub fn gbt_fit_traced(
    x: &Matrix,
    sorted: &SortedColumns<'_>,
    y: &[f64],
    cfg: &GbtConfig,
    loss: Loss,
) -> Result<(GbtModel, LossTrace)> {
    let n = x.n_rows();
    if n < 2 || y.len() != n {
        return Err(Error::invalid(format!(
            "boosting needs at least 2 rows with matching targets ({n} rows, {} targets)",
            y.len()
        )));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate <= 1.0) {
        return Err(Error::invalid("learning rate must lie in [0, 1]"));
    }
    let init_value = match loss {
        Loss::Squared => y.iter().sum::<f64>() / n as f64,
        Loss::Logistic => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid("logistic loss needs 0/1 targets"));
            }
            let pos = y.iter().filter(|&&v| v == 1.0).count();
            if pos == 0 || pos == n {
                return Err(Error::invalid(
                    "logistic loss needs both classes in the training targets",
                ));
            }
            let p = pos as f64 / n as f64;
            (p / (1.0 - p)).ln()
        }
    };
    let mut model = GbtModel {
        init_value,
        trees: Vec::with_capacity(cfg.n_estimators),
        learning_rate: cfg.learning_rate,
        n_estimators: cfg.n_estimators,
        loss,
    };
    let mut raw = vec![init_value; n];
    let mut trace = vec![training_loss(loss, y, &raw)];
    if cfg.learning_rate == 0.0 {
        return Ok((model, trace));
    }
    let tree_cfg = TreeConfig {
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        max_features: None,
    };
    let mut resid = vec![0.0; n];
    for stage in 0..cfg.n_estimators {
        for i in 0..n {
            resid[i] = match loss {
                Loss::Squared => y[i] - raw[i],
                Loss::Logistic => y[i] - super::gbt::sigmoid(raw[i]),
            };
        }
        let mut rng = substream(cfg.seed, stage as u64);
        let mut out = fit_presorted(x, sorted, &resid, None, &tree_cfg, &mut rng)?;
        if loss == Loss::Logistic {
            // One Newton step per leaf: sum(residual) / sum(p (1 - p)).
            let mut num = vec![0.0; out.tree.nodes.len()];
            let mut den = vec![0.0; out.tree.nodes.len()];
            for i in 0..n {
                let leaf = out.row_leaf[i] as usize;
                let p = sigmoid(raw[i]);
                num[leaf] += resid[i];
                den[leaf] += p * (1.0 - p);
            }
            for leaf in 0..num.len() {
                let v = if den[leaf] > 1e-150 { num[leaf] / den[leaf] } else { 0.0 };
                out.tree.set_leaf_value(leaf, v);
            }
        }
        for i in 0..n {
            let leaf = out.row_leaf[i] as usize;
            if let super::tree::Node::Leaf { value } = out.tree.nodes[leaf] {
                raw[i] += cfg.learning_rate * value;
            }
        }
        trace.push(training_loss(loss, y, &raw));
        model.trees.push(out.tree);
    }
    Ok((model, trace))
}
