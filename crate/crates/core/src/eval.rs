//! Task metrics and the k-fold split.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::VisitTarget;
use crate::rng::substream;
use crate::{Error, Result};

/// A user's predicted `(branch_id, visits)` pairs.
pub type TopList = Vec<(u32, f64)>;

/// Cosine between a sparse prediction and a sparse truth vector.
pub fn cosine_user(pred: &[(u32, f64)], truth: &HashMap<u32, f64>) -> f64 {
    let mut p: HashMap<u32, f64> = HashMap::new();
    for &(b, v) in pred {
        *p.entry(b).or_default() += v;
    }
    let mut pk: Vec<u32> = p.keys().copied().collect();
    pk.sort_unstable();
    let mut tk: Vec<u32> = truth.keys().copied().collect();
    tk.sort_unstable();
    let dot: f64 = pk.iter().map(|b| p[b] * truth.get(b).copied().unwrap_or(0.0)).sum();
    let np2: f64 = pk.iter().map(|b| p[b] * p[b]).sum();
    let nt2: f64 = tk.iter().map(|b| truth[b] * truth[b]).sum();
    if np2 == 0.0 || nt2 == 0.0 {
        0.0
    } else {
        // one square root keeps identical vectors at exactly 1
        (dot / (np2 * nt2).sqrt()).clamp(0.0, 1.0)
    }
}

/// Mean per-user cosine between predicted top-5 lists and true visit counts.
///
/// Users whose true visit vector is all zero are left out of the average.
/// Errors if no predicted user has any visit.
pub fn cosine_top5(predictions: &[(u64, TopList)], truth: &[VisitTarget]) -> Result<f64> {
    let mut seen = HashSet::with_capacity(predictions.len());
    for (u, _) in predictions {
        if !seen.insert(*u) {
            return Err(Error::invalid(format!("user {u} predicted twice")));
        }
    }
    let mut by_user: HashMap<u64, HashMap<u32, f64>> = HashMap::new();
    for v in truth.iter().filter(|v| seen.contains(&v.user_id)) {
        *by_user
            .entry(v.user_id)
            .or_default()
            .entry(v.branch_id)
            .or_default() += f64::from(v.visits);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (u, pred) in predictions {
        let Some(t) = by_user.get(u) else { continue };
        if t.values().all(|&v| v == 0.0) {
            continue;
        }
        sum += cosine_user(pred, t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(
            "no evaluated user has a nonzero visit vector; cosine score is undefined",
        ));
    }
    Ok(sum / n as f64)
}

/// Area under the ROC curve via average ranks (ties count one half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "AUC needs both classes; use larger folds or another seed",
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied averages integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j) as u128;
        let tied_pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += avg2 * tied_pos;
        i = j;
    }
    let p = pos as u128;
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// Sorted user ids per fold.
    pub folds: Vec<Vec<u64>>,
}

impl FoldSplit {
    /// Users of every fold except `fold`, sorted.
    pub fn training(&self, fold: usize) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle dealt round-robin into `k` folds.
pub fn kfold(user_ids: &[u64], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config("cross validation needs at least 2 folds".into()));
    }
    if user_ids.len() < k {
        return Err(Error::invalid(format!(
            "{} users cannot fill {k} folds",
            user_ids.len()
        )));
    }
    let mut ids = user_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut substream(seed, 0xF01D));
    let mut folds = vec![Vec::new(); k];
    for (i, u) in ids.into_iter().enumerate() {
        folds[i % k].push(u);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldSplit { k, seed, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub feature_set: String,
    pub model: String,
    pub seed: u64,
    pub data_hash: String,
    /// Effective run configuration (without the worker count).
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScores {
    pub name: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: u8,
    pub metric: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<NamedScores>,
    pub fingerprint: Fingerprint,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl ScoreReport {
    pub fn new(task: u8, metric: &str, per_fold: Vec<f64>, fingerprint: Fingerprint) -> Self {
        Self {
            task,
            metric: metric.to_owned(),
            mean: mean(&per_fold),
            per_fold,
            baselines: Vec::new(),
            fingerprint,
        }
    }

    pub fn with_baseline(mut self, name: &str, per_fold: Vec<f64>) -> Self {
        self.baselines.push(NamedScores {
            name: name.to_owned(),
            mean: mean(&per_fold),
            per_fold,
        });
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut rows: Vec<(String, &[f64], f64)> = vec![(
            format!("{} {}", self.fingerprint.model, self.fingerprint.feature_set),
            &self.per_fold,
            self.mean,
        )];
        for b in &self.baselines {
            rows.push((b.name.clone(), &b.per_fold, b.mean));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        let mut out = format!("task {} ({})\n", self.task, self.metric);
        let _ = write!(out, "{:<w$}", "run");
        for i in 0..self.per_fold.len() {
            let _ = write!(out, "  {:>9}", format!("fold {}", i + 1));
        }
        let _ = writeln!(out, "  {:>9}", "mean");
        for (name, folds, m) in rows {
            let _ = write!(out, "{name:<w$}");
            for v in folds {
                let _ = write!(out, "  {v:>9.5}");
            }
            let _ = writeln!(out, "  {m:>9.5}");
        }
        out
    }
}
