//! Run configuration: defaults, an optional TOML file, the seed variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::features::FeatureSetId;
use crate::models::{LearnerConfig, LearnerKind};
use crate::{Error, Result};

pub const SEED_ENV: &str = "TEMPOFEAT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub feature_set: FeatureSetId,
    pub model: LearnerKind,
    pub task: u8,
    /// Number of k-means clusters behind `FS8`.
    pub k: usize,
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub normalize_targets: bool,
    pub log_transform: bool,
    pub scale_features: bool,
    pub recency_weighted: bool,
    /// Column names, `prefix*` patterns or the groups `geo` and `monthly`.
    pub exclude: Vec<String>,
    pub cv_folds: usize,
    pub seed: u64,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let l = LearnerConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("artifacts"),
            feature_set: FeatureSetId::FS8,
            model: LearnerKind::Gbt,
            task: 2,
            k: 10,
            n_estimators: l.n_estimators,
            learning_rate: l.learning_rate,
            max_depth: l.max_depth,
            min_samples_leaf: l.min_samples_leaf,
            l2_lambda: l.l2_lambda,
            max_iter: l.max_iter,
            tol: l.tol,
            normalize_targets: false,
            log_transform: false,
            scale_features: false,
            recency_weighted: false,
            exclude: Vec::new(),
            cv_folds: 2,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    /// Defaults, overridden by `file` when given. The seed falls back to
    /// `env_seed` when the file does not set one.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>) -> Result<Self> {
        let (mut cfg, file_seed) = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let has_seed = table.contains_key("seed");
                let cfg: RunConfig = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                (cfg, has_seed)
            }
            None => (RunConfig::default(), false),
        };
        if !file_seed {
            if let Some(s) = env_seed.map(str::trim).filter(|s| !s.is_empty()) {
                cfg.seed = s
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.task != 1 && self.task != 2 {
            return bad(format!("task must be 1 or 2, got {}", self.task));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be at least 2".into());
        }
        if self.n_estimators == 0 {
            return bad("n_estimators must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return bad("learning_rate must lie in [0, 1]".into());
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be >= 0".into());
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1".into());
        }
        if self.task == 2 && self.feature_set.is_branch_parameterized() {
            return bad(format!(
                "{} is branch-specific and only applies to task 1",
                self.feature_set
            ));
        }
        if self.task == 1 && self.model == LearnerKind::Logistic {
            return bad("task 1 predicts visit counts; use gbt, forest or ridge".into());
        }
        if self.task == 2 && self.normalize_targets {
            return bad("normalize_targets only applies to task 1".into());
        }
        Ok(())
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            kind: self.model,
            n_estimators: self.n_estimators,
            learning_rate: self.learning_rate,
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            l2_lambda: self.l2_lambda,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }

    /// Effective settings echoed into artifacts. The worker count and output
    /// location do not change results and are left out.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
            m.remove("out");
        }
        v
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
