//! One regressor per branch, ranked per user into a top-5 list.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::SortedColumns;
use super::{fit_model_presorted, LearnerConfig, LearnerKind, Model, Objective};
use crate::data::{BranchInfo, VisitTarget};
use crate::features::{Anchors, FeatureMatrix, FeatureSetId, StandardScaler};
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Divides each branch's targets by that branch's training maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    /// 0 for branches that were never visited in training.
    pub maxima: Vec<f64>,
}

impl TargetScaler {
    pub fn fit(targets: &[Vec<f64>]) -> Self {
        Self {
            maxima: targets
                .iter()
                .map(|y| y.iter().copied().fold(0.0, f64::max))
                .collect(),
        }
    }

    pub fn norm(&self, branch: usize, y: f64) -> f64 {
        let m = self.maxima[branch];
        if m > 0.0 {
            y / m
        } else {
            y
        }
    }

    pub fn denorm(&self, branch: usize, v: f64) -> f64 {
        let m = self.maxima[branch];
        if m > 0.0 {
            v * m
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankOptions {
    /// Append the home-to-branch distance.
    pub use_fs9: bool,
    /// Append the mean-activity-location-to-branch distance.
    pub use_fs10: bool,
    pub normalize_targets: bool,
    /// Applied to the appended distance columns, matching the base columns.
    pub log_transform: bool,
    pub scale_features: bool,
}

impl BankOptions {
    pub fn for_feature_set(fs: FeatureSetId) -> Self {
        Self {
            use_fs9: fs.includes(FeatureSetId::FS9),
            use_fs10: fs.includes(FeatureSetId::FS10),
            ..Self::default()
        }
    }

    fn n_extra(&self) -> usize {
        usize::from(self.use_fs9) + usize::from(self.use_fs10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBank {
    pub feature_set: FeatureSetId,
    pub manifest_hash: String,
    pub base_width: usize,
    pub options: BankOptions,
    /// Sorted by `branch_id`; aligned with `regressors`.
    pub branches: Vec<BranchInfo>,
    pub target_scaler: Option<TargetScaler>,
    /// Standardization of the appended columns, per branch.
    pub column_scalers: Vec<Option<StandardScaler>>,
    pub regressors: Vec<Model>,
}

fn branch_columns(anchors: &[Anchors], branch: &BranchInfo, opts: &BankOptions) -> Matrix {
    let e = opts.n_extra();
    let mut data = Vec::with_capacity(anchors.len() * e);
    for a in anchors {
        if opts.use_fs9 {
            data.push(a.home.dist(&branch.geo));
        }
        if opts.use_fs10 {
            data.push(a.activity.dist(&branch.geo));
        }
    }
    let mut m = Matrix::new(anchors.len(), e, data).expect("consistent shape");
    if opts.log_transform {
        for i in 0..m.n_rows() {
            m.row_mut(i).iter_mut().for_each(|v| *v = v.max(0.0).ln_1p());
        }
    }
    m
}

/// Dense `[branch][row]` visit counts, 0 where a user has no record.
pub fn dense_targets(
    user_ids: &[u64],
    branches: &[BranchInfo],
    visits: &[VisitTarget],
) -> Result<Vec<Vec<f64>>> {
    let rows: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let cols: HashMap<u32, usize> = branches
        .iter()
        .enumerate()
        .map(|(j, b)| (b.branch_id, j))
        .collect();
    let mut y = vec![vec![0.0; user_ids.len()]; branches.len()];
    for v in visits {
        let Some(&i) = rows.get(&v.user_id) else {
            continue;
        };
        let j = *cols.get(&v.branch_id).ok_or_else(|| {
            Error::Integrity(format!(
                "visit record for user {} names unknown branch {}",
                v.user_id, v.branch_id
            ))
        })?;
        y[j][i] += f64::from(v.visits);
    }
    Ok(y)
}

/// Trains one regressor per branch on the users of `features`.
///
/// Branch `b` is trained with seed `seed ^ b.branch_id`, so the bank does
/// not depend on how many workers run it.
pub fn train_branch_bank(
    features: &FeatureMatrix,
    branches: &[BranchInfo],
    visits: Option<&[VisitTarget]>,
    learner: &LearnerConfig,
    opts: &BankOptions,
    seed: u64,
) -> Result<ModelBank> {
    let visits = visits.ok_or_else(|| {
        Error::invalid("branch visit targets are required to train the branch bank")
    })?;
    if branches.is_empty() {
        return Err(Error::invalid("no branches to train"));
    }
    if features.n_rows() == 0 {
        return Err(Error::invalid("no training users"));
    }
    let mut branches = branches.to_vec();
    branches.sort_by_key(|b| b.branch_id);
    let mut targets = dense_targets(&features.user_ids, &branches, visits)?;
    let target_scaler = opts.normalize_targets.then(|| TargetScaler::fit(&targets));
    if let Some(s) = &target_scaler {
        for (j, y) in targets.iter_mut().enumerate() {
            y.iter_mut().for_each(|v| *v = s.norm(j, *v));
        }
    }

    let base = &features.values;
    let trees = matches!(learner.kind, LearnerKind::Gbt | LearnerKind::Forest);
    let base_sorted = if trees {
        SortedColumns::new(base)
    } else {
        SortedColumns::new(&Matrix::zeros(base.n_rows(), 0))
    };
    let fitted: Vec<(Option<StandardScaler>, Model)> = branches
        .par_iter()
        .zip(targets.par_iter())
        .map(|(b, y)| {
            let mut extra = branch_columns(&features.anchors, b, opts);
            let scaler = (opts.scale_features && extra.n_cols() > 0).then(|| {
                let s = StandardScaler::fit(&extra);
                extra = s.transform(&extra);
                s
            });
            let x = base.with_appended(extra.n_cols(), |i| extra.row(i).to_vec());
            let branch_seed = seed ^ u64::from(b.branch_id);
            let model = if trees {
                let sorted = base_sorted.extended(&extra);
                fit_model_presorted(&x, &sorted, y, learner, Objective::Regression, branch_seed)?
            } else {
                super::fit_model(&x, y, learner, Objective::Regression, branch_seed)?
            };
            Ok((scaler, model))
        })
        .collect::<Result<_>>()?;
    let (column_scalers, regressors) = fitted.into_iter().unzip();
    Ok(ModelBank {
        feature_set: features.manifest.feature_set,
        manifest_hash: features.manifest.hash(),
        base_width: base.n_cols(),
        options: *opts,
        branches,
        target_scaler,
        column_scalers,
        regressors,
    })
}

impl ModelBank {
    pub fn n_branches(&self) -> usize {
        self.regressors.len()
    }

    /// Denormalized predictions, `[user][branch]` in branch order.
    pub fn predict_all(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        if features.values.n_cols() != self.base_width {
            return Err(Error::invalid(format!(
                "feature matrix has {} columns, the bank was trained on {}",
                features.values.n_cols(),
                self.base_width
            )));
        }
        let per_branch: Vec<Vec<f64>> = self
            .branches
            .par_iter()
            .enumerate()
            .map(|(j, b)| {
                let mut extra = branch_columns(&features.anchors, b, &self.options);
                if let Some(s) = &self.column_scalers[j] {
                    extra = s.transform(&extra);
                }
                let mut row = Vec::with_capacity(self.base_width + extra.n_cols());
                (0..features.n_rows())
                    .map(|i| {
                        row.clear();
                        row.extend_from_slice(features.values.row(i));
                        row.extend_from_slice(extra.row(i));
                        let v = self.regressors[j].predict_row(&row);
                        match &self.target_scaler {
                            Some(s) => s.denorm(j, v),
                            None => v,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok((0..features.n_rows())
            .map(|i| per_branch.iter().map(|p| p[i]).collect())
            .collect())
    }

    /// Top-5 `(branch_id, visits)` per user.
    pub fn predict_top5(&self, features: &FeatureMatrix) -> Result<Vec<Vec<(u32, f64)>>> {
        let ids: Vec<u32> = self.branches.iter().map(|b| b.branch_id).collect();
        Ok(self
            .predict_all(features)?
            .iter()
            .map(|p| predict_top5(&ids, p))
            .collect())
    }
}

/// Clips negatives to 0, sorts by value descending then branch id ascending,
/// and keeps the first `min(5, B)`.
pub fn predict_top5(branch_ids: &[u32], predictions: &[f64]) -> Vec<(u32, f64)> {
    let mut pairs: Vec<(u32, f64)> = branch_ids
        .iter()
        .zip(predictions)
        .map(|(&b, &v)| (b, if v > 0.0 { v } else { 0.0 }))
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(5);
    pairs
}
