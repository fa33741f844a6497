//! Learners, the per-branch model bank and ensembling.

pub mod bank;
pub mod forest;
pub mod gbt;
pub mod linear;
pub mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};
use forest::{forest_fit_presorted, ForestConfig, ForestModel};
use gbt::{gbt_fit_traced, GbtConfig, GbtModel, Loss};
use linear::{logistic_fit, ridge_fit, LinearModel, LogisticConfig};
use tree::SortedColumns;

pub use bank::{predict_top5, train_branch_bank, BankOptions, ModelBank, TargetScaler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Gbt,
    Forest,
    Ridge,
    Logistic,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Gbt => "gbt",
            LearnerKind::Forest => "forest",
            LearnerKind::Ridge => "ridge",
            LearnerKind::Logistic => "logistic",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gbt" | "gbr" | "gbc" => Ok(LearnerKind::Gbt),
            "forest" | "rf" | "rfr" | "rfc" => Ok(LearnerKind::Forest),
            "ridge" => Ok(LearnerKind::Ridge),
            "logistic" | "lr" => Ok(LearnerKind::Logistic),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected gbt, forest, ridge or logistic)"
            ))),
        }
    }
}

/// What the learner is asked to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Regression,
    /// 0/1 targets; predictions are scores in [0, 1].
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// Defaults to 3 for boosting and 16 for forests.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::Gbt,
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: None,
            min_samples_leaf: 1,
            l2_lambda: 1.0,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

impl LearnerConfig {
    pub fn gbt(&self, seed: u64) -> GbtConfig {
        GbtConfig {
            n_estimators: self.n_estimators,
            learning_rate: self.learning_rate,
            max_depth: self.max_depth.unwrap_or(3),
            min_samples_leaf: self.min_samples_leaf,
            seed,
        }
    }

    pub fn forest(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_estimators,
            max_depth: self.max_depth.unwrap_or(16),
            min_samples_leaf: self.min_samples_leaf,
            max_features: None,
            seed,
        }
    }

    pub fn logistic(&self) -> LogisticConfig {
        LogisticConfig {
            l2_lambda: self.l2_lambda,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case")]
pub enum Model {
    Gbt(GbtModel),
    Forest(ForestModel),
    Linear(LinearModel),
}

impl Model {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self {
            Model::Gbt(m) => m.predict_row(x),
            Model::Forest(m) => m.predict_row(x),
            Model::Linear(m) => m.predict_row(x),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.rows().map(|r| self.predict_row(r)).collect()
    }
}

pub fn fit_model(
    x: &Matrix,
    y: &[f64],
    cfg: &LearnerConfig,
    objective: Objective,
    seed: u64,
) -> Result<Model> {
    match cfg.kind {
        LearnerKind::Gbt | LearnerKind::Forest => {
            fit_model_presorted(x, &SortedColumns::new(x), y, cfg, objective, seed)
        }
        _ => fit_linear(x, y, cfg, objective),
    }
}

/// As [`fit_model`], reusing a pre-sort of `x` for the tree learners.
pub fn fit_model_presorted(
    x: &Matrix,
    sorted: &SortedColumns<'_>,
    y: &[f64],
    cfg: &LearnerConfig,
    objective: Objective,
    seed: u64,
) -> Result<Model> {
    match cfg.kind {
        LearnerKind::Gbt => {
            let loss = match objective {
                Objective::Regression => Loss::Squared,
                Objective::Classification => Loss::Logistic,
            };
            Ok(Model::Gbt(gbt_fit_traced(x, sorted, y, &cfg.gbt(seed), loss)?.0))
        }
        LearnerKind::Forest => Ok(Model::Forest(forest_fit_presorted(
            x,
            sorted,
            y,
            &cfg.forest(seed),
        )?)),
        _ => fit_linear(x, y, cfg, objective),
    }
}

fn fit_linear(x: &Matrix, y: &[f64], cfg: &LearnerConfig, objective: Objective) -> Result<Model> {
    match (cfg.kind, objective) {
        (LearnerKind::Logistic, Objective::Classification) => {
            Ok(Model::Linear(logistic_fit(x, y, &cfg.logistic())?))
        }
        (LearnerKind::Logistic, Objective::Regression) => Err(Error::Config(
            "logistic regression cannot fit visit counts; use gbt, forest or ridge".into(),
        )),
        _ => Ok(Model::Linear(ridge_fit(x, y, cfg.l2_lambda)?)),
    }
}

/// Element-wise mean of equally long score lists.
pub fn ensemble_mean(lists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = lists
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one score list"))?;
    if let Some((i, l)) = lists.iter().enumerate().find(|(_, l)| l.len() != first.len()) {
        return Err(Error::invalid(format!(
            "score list {i} has {} entries, expected {}",
            l.len(),
            first.len()
        )));
    }
    // running mean keeps identical inputs exact
    Ok((0..first.len())
        .map(|j| {
            lists
                .iter()
                .enumerate()
                .fold(0.0, |m, (i, l)| m + (l[j] - m) / (i + 1) as f64)
        })
        .collect())
}
