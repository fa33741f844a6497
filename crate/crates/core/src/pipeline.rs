//! End-to-end runs: preprocessing fitted on training users, cross
//! validation, trained artifacts and submission files.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, KMeansConfig, KMeansModel};
use crate::config::RunConfig;
use crate::data::{age_mode, apply_age_mode, fit_encoding, Dataset, EncodingMap, VisitTarget};
use crate::eval::{cosine_top5, kfold, roc_auc, Fingerprint, ScoreReport, TopList};
use crate::features::{
    assemble_with, log_transform, AssembleOptions, FeatureMatrix, FeatureSetId, StandardScaler,
};
use crate::models::{
    fit_model, predict_top5, train_branch_bank, BankOptions, LearnerKind, Model, ModelBank,
    Objective,
};
use crate::rng::mix64;
use crate::{Error, Result};

/// Runs `f` on a pool of `workers` threads (0 = one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Every stateful preprocessing step, fitted on training users only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub feature_set: FeatureSetId,
    pub age_mode: String,
    pub encoding: EncodingMap,
    pub clusters: Option<KMeansModel>,
    pub recency_weighted: bool,
    pub exclude: Vec<String>,
    pub log_transform: bool,
    pub scaler: Option<StandardScaler>,
    pub manifest_hash: String,
}

fn with_age_mode(ds: &Dataset, mode: &str) -> Dataset {
    let mut out = ds.clone();
    apply_age_mode(&mut out.users, &Arc::from(mode));
    out
}

fn cluster_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x6b6d_6561_6e73)
}

impl Preprocessor {
    pub fn fit(train: &Dataset, cfg: &RunConfig) -> Result<(Self, FeatureMatrix)> {
        let mode = age_mode(&train.users)?.to_string();
        let imputed = with_age_mode(train, &mode);
        let encoding = fit_encoding(&imputed)?;
        let clusters = if cfg.feature_set.needs_clusters() {
            let homes: Vec<_> = imputed.users.iter().map(|u| u.geo).collect();
            Some(kmeans_fit(
                &homes,
                &KMeansConfig {
                    k: cfg.k,
                    seed: cluster_seed(cfg.seed),
                    ..KMeansConfig::default()
                },
            )?)
        } else {
            None
        };
        let mut pre = Preprocessor {
            feature_set: cfg.feature_set,
            age_mode: mode,
            encoding,
            clusters,
            recency_weighted: cfg.recency_weighted,
            exclude: cfg.exclude.clone(),
            log_transform: cfg.log_transform,
            scaler: None,
            manifest_hash: String::new(),
        };
        let mut fm = pre.unscaled(&imputed)?;
        if cfg.scale_features {
            let s = StandardScaler::fit(&fm.values);
            fm.values = s.transform(&fm.values);
            pre.scaler = Some(s);
        }
        pre.manifest_hash = fm.manifest.hash();
        Ok((pre, fm))
    }

    fn unscaled(&self, imputed: &Dataset) -> Result<FeatureMatrix> {
        let fm = assemble_with(
            self.feature_set,
            imputed,
            &self.encoding,
            self.clusters.as_ref(),
            AssembleOptions {
                recency_weighted: self.recency_weighted,
            },
        )?
        .without_columns(&self.exclude);
        Ok(if self.log_transform { log_transform(&fm) } else { fm })
    }

    pub fn transform(&self, ds: &Dataset) -> Result<FeatureMatrix> {
        let mut fm = self.unscaled(&with_age_mode(ds, &self.age_mode))?;
        if fm.manifest.hash() != self.manifest_hash && self.scaler.is_none() {
            return Err(Error::invalid("feature schema differs from the fitted one"));
        }
        if let Some(s) = &self.scaler {
            fm.values = s.transform(&fm.values);
        }
        Ok(fm)
    }
}

fn bank_options(cfg: &RunConfig) -> BankOptions {
    BankOptions {
        normalize_targets: cfg.normalize_targets,
        log_transform: cfg.log_transform,
        scale_features: cfg.scale_features,
        ..BankOptions::for_feature_set(cfg.feature_set)
    }
}

fn labels_of(ds: &Dataset) -> Result<Vec<f64>> {
    ds.users
        .iter()
        .map(|u| {
            u.task2_label.map(f64::from).ok_or_else(|| {
                Error::invalid(format!("user {} has no task 2 label", u.user_id))
            })
        })
        .collect()
}

/// Users that take part in a run of `task`.
fn task_users(ds: &Dataset, task: u8) -> Result<Vec<u64>> {
    if task == 1 {
        if ds.visits.is_none() {
            return Err(Error::invalid("task 1 needs visits.csv in the data directory"));
        }
        return Ok(ds.users.iter().map(|u| u.user_id).collect());
    }
    let ids: Vec<u64> = ds
        .users
        .iter()
        .filter(|u| u.task2_label.is_some())
        .map(|u| u.user_id)
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid("task 2 needs a `target` column in users.csv"));
    }
    Ok(ids)
}

/// The five branches with the most training visits, for every user.
pub fn popularity_top5(ds: &Dataset, visits: &[VisitTarget]) -> TopList {
    let mut totals: HashMap<u32, f64> = ds.branches.iter().map(|b| (b.branch_id, 0.0)).collect();
    for v in visits {
        *totals.entry(v.branch_id).or_default() += f64::from(v.visits);
    }
    let mut ids: Vec<u32> = totals.keys().copied().collect();
    ids.sort_unstable();
    let values: Vec<f64> = ids.iter().map(|b| totals[b]).collect();
    predict_top5(&ids, &values)
}

struct FoldScore {
    value: f64,
    baseline: Option<f64>,
}

fn score_fold(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<FoldScore> {
    let (pre, train_fm) = Preprocessor::fit(train, cfg)?;
    let test_fm = pre.transform(test)?;
    if cfg.task == 2 {
        let y = labels_of(train)?;
        let model = fit_model(&train_fm.values, &y, &cfg.learner(), Objective::Classification, cfg.seed)?;
        let labels: Vec<bool> = labels_of(test)?.iter().map(|&v| v == 1.0).collect();
        let auc = roc_auc(&model.predict(&test_fm.values), &labels).map_err(|e| {
            Error::invalid(format!("{e} (held-out fold has a single class; use larger folds or another seed)"))
        })?;
        return Ok(FoldScore { value: auc, baseline: None });
    }
    let train_visits = train.visits.as_deref().unwrap_or_default();
    let test_visits = test.visits.as_deref().unwrap_or_default();
    let bank = train_branch_bank(
        &train_fm,
        &train.branches,
        Some(train_visits),
        &cfg.learner(),
        &bank_options(cfg),
        cfg.seed,
    )?;
    let preds: Vec<(u64, TopList)> = test_fm
        .user_ids
        .iter()
        .copied()
        .zip(bank.predict_top5(&test_fm)?)
        .collect();
    let popular = popularity_top5(train, train_visits);
    let base: Vec<(u64, TopList)> = test_fm.user_ids.iter().map(|&u| (u, popular.clone())).collect();
    Ok(FoldScore {
        value: cosine_top5(&preds, test_visits)?,
        baseline: Some(cosine_top5(&base, test_visits)?),
    })
}

pub fn fingerprint(ds: &Dataset, cfg: &RunConfig) -> Fingerprint {
    Fingerprint {
        feature_set: cfg.feature_set.to_string(),
        model: cfg.model.to_string(),
        seed: cfg.seed,
        data_hash: ds.content_hash(),
        config: cfg.echo(),
    }
}

/// Seeded k-fold cross validation; every fold refits all preprocessing.
pub fn cross_validate(ds: &Dataset, cfg: &RunConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let users = task_users(ds, cfg.task)?;
    let split = kfold(&users, cfg.cv_folds, cfg.seed)?;
    let mut values = Vec::with_capacity(split.k);
    let mut baselines = Vec::new();
    for (i, fold) in split.folds.iter().enumerate() {
        let train = ds.subset(&split.training(i));
        let test = ds.subset(fold);
        let s = score_fold(&train, &test, cfg)
            .map_err(|e| Error::invalid(format!("fold {}: {e}", i + 1)))?;
        values.push(s.value);
        baselines.extend(s.baseline);
    }
    let (metric, base_name) = if cfg.task == 1 {
        ("cosine_top5", Some("popularity"))
    } else {
        ("roc_auc", None)
    };
    let mut report = ScoreReport::new(cfg.task, metric, values, fingerprint(ds, cfg));
    if let Some(name) = base_name {
        report = report.with_baseline(name, baselines);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Predictor {
    Task1(ModelBank),
    Task2(Model),
}

/// Everything needed to score new users, persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub config: serde_json::Value,
    pub data_hash: String,
    pub preprocessor: Preprocessor,
    pub predictor: Predictor,
}

pub enum Predictions {
    Task1(Vec<(u64, TopList)>),
    Task2(Vec<(u64, f64)>),
}

pub fn train(ds: &Dataset, cfg: &RunConfig) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let ids = task_users(ds, cfg.task)?;
    let train = if ids.len() == ds.users.len() { ds.clone() } else { ds.subset(&ids) };
    let (pre, fm) = Preprocessor::fit(&train, cfg)?;
    let predictor = if cfg.task == 1 {
        Predictor::Task1(train_branch_bank(
            &fm,
            &train.branches,
            train.visits.as_deref(),
            &cfg.learner(),
            &bank_options(cfg),
            cfg.seed,
        )?)
    } else {
        let y = labels_of(&train)?;
        Predictor::Task2(fit_model(&fm.values, &y, &cfg.learner(), Objective::Classification, cfg.seed)?)
    };
    Ok(TrainedPipeline {
        config: cfg.echo(),
        data_hash: ds.content_hash(),
        preprocessor: pre,
        predictor,
    })
}

impl TrainedPipeline {
    pub fn predict(&self, ds: &Dataset) -> Result<Predictions> {
        let fm = self.preprocessor.transform(ds)?;
        Ok(match &self.predictor {
            Predictor::Task1(bank) => {
                Predictions::Task1(fm.user_ids.iter().copied().zip(bank.predict_top5(&fm)?).collect())
            }
            Predictor::Task2(model) => Predictions::Task2(
                fm.user_ids
                    .iter()
                    .copied()
                    .zip(model.predict(&fm.values).into_iter().map(|p| p.clamp(0.0, 1.0)))
                    .collect(),
            ),
        })
    }

    pub fn task(&self) -> u8 {
        match self.predictor {
            Predictor::Task1(_) => 1,
            Predictor::Task2(_) => 2,
        }
    }

    pub fn learner(&self) -> LearnerKind {
        match &self.predictor {
            Predictor::Task1(b) => match b.regressors.first() {
                Some(Model::Gbt(_)) => LearnerKind::Gbt,
                Some(Model::Forest(_)) => LearnerKind::Forest,
                _ => LearnerKind::Ridge,
            },
            Predictor::Task2(Model::Gbt(_)) => LearnerKind::Gbt,
            Predictor::Task2(Model::Forest(_)) => LearnerKind::Forest,
            Predictor::Task2(Model::Linear(m)) => match m.kind {
                crate::models::linear::LinearKind::Ridge => LearnerKind::Ridge,
                crate::models::linear::LinearKind::Logistic => LearnerKind::Logistic,
            },
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// `user_id,b1:v1,...,b5:v5`, one user per line.
pub fn write_task1_submission<W: Write>(mut w: W, preds: &[(u64, TopList)]) -> Result<()> {
    let io = |e| Error::io("<submission>", e);
    writeln!(w, "user_id,b1:v1,b2:v2,b3:v3,b4:v4,b5:v5").map_err(io)?;
    for (u, top) in preds {
        write!(w, "{u}").map_err(io)?;
        for (b, v) in top {
            write!(w, ",{b}:{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_task1_submission<R: BufRead>(r: R, label: &str) -> Result<Vec<(u64, TopList)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(label, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let perr = |column: &str, message: String| Error::Parse {
            file: label.to_owned(),
            line: i as u64 + 1,
            column: column.to_owned(),
            message,
        };
        let mut parts = line.split(',');
        let user = parts.next().unwrap_or_default();
        let user: u64 = user
            .trim()
            .parse()
            .map_err(|_| perr("user_id", format!("`{user}` is not a user id")))?;
        let mut top = Vec::new();
        for p in parts {
            let (b, v) = p
                .split_once(':')
                .ok_or_else(|| perr("branch", format!("`{p}` is not branch:visits")))?;
            let b = b.trim().parse().map_err(|_| perr("branch", format!("bad branch `{b}`")))?;
            let v = v.trim().parse().map_err(|_| perr("visits", format!("bad value `{v}`")))?;
            top.push((b, v));
        }
        out.push((user, top));
    }
    Ok(out)
}

/// `user_id,score` with scores in [0, 1].
pub fn write_task2_submission<W: Write>(w: W, preds: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["user_id", "score"])?;
    for (u, s) in preds {
        w.write_record([u.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<submission>", e))
}

pub fn read_task2_submission<R: std::io::Read>(r: R, label: &str) -> Result<Vec<(u64, f64)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let perr = |column: &str, message: String| Error::Parse {
            file: label.to_owned(),
            line: i as u64 + 2,
            column: column.to_owned(),
            message,
        };
        if rec.len() != 2 {
            return Err(perr("*", format!("expected 2 fields, found {}", rec.len())));
        }
        let u = rec[0]
            .trim()
            .parse()
            .map_err(|_| perr("user_id", format!("`{}` is not a user id", &rec[0])))?;
        let s: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| perr("score", format!("`{}` is not a number", &rec[1])))?;
        if !(0.0..=1.0).contains(&s) {
            return Err(perr("score", format!("score {s} outside [0, 1]")));
        }
        out.push((u, s));
    }
    Ok(out)
}

/// Unweighted mean of Task 2 submissions over the same users in the same order.
pub fn ensemble_submissions(subs: &[Vec<(u64, f64)>]) -> Result<Vec<(u64, f64)>> {
    let first = subs
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one submission"))?;
    for (i, s) in subs.iter().enumerate().skip(1) {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::invalid(format!(
                "submission {} does not list the same users in the same order as submission 1",
                i + 1
            )));
        }
    }
    let lists: Vec<Vec<f64>> = subs.iter().map(|s| s.iter().map(|p| p.1).collect()).collect();
    let mean = crate::models::ensemble_mean(&lists)?;
    Ok(first.iter().map(|p| p.0).zip(mean).collect())
}

/// Scores a submission against the truth in `ds`.
pub fn evaluate_submission(ds: &Dataset, task: u8, path: &Path) -> Result<f64> {
    let label = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if task == 1 {
        let preds = read_task1_submission(std::io::BufReader::new(file), &label)?;
        let visits = ds
            .visits
            .as_deref()
            .ok_or_else(|| Error::invalid("task 1 evaluation needs visits.csv"))?;
        cosine_top5(&preds, visits)
    } else {
        let preds = read_task2_submission(file, &label)?;
        let idx = ds.user_index();
        let mut scores = Vec::with_capacity(preds.len());
        let mut labels = Vec::with_capacity(preds.len());
        for (u, s) in preds {
            let i = *idx
                .get(&u)
                .ok_or_else(|| Error::invalid(format!("user {u} is not in the dataset")))?;
            let l = ds.users[i]
                .task2_label
                .ok_or_else(|| Error::invalid(format!("user {u} has no task 2 label")))?;
            scores.push(s);
            labels.push(l == 1);
        }
        roc_auc(&scores, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};

    fn data(n: usize) -> Dataset {
        generate(&GenConfig {
            n_users: n,
            n_branches: 8,
            seed: 2,
            ..GenConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn quick(task: u8, fs: FeatureSetId) -> RunConfig {
        RunConfig {
            task,
            feature_set: fs,
            k: 4,
            n_estimators: 20,
            ..RunConfig::default()
        }
    }

    #[test]
    fn cv_is_deterministic_and_sane() {
        let ds = data(600);
        let cfg = quick(2, FeatureSetId::FS8);
        let a = cross_validate(&ds, &cfg).unwrap();
        let b = cross_validate(&ds, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.per_fold.len(), 2);
        assert!(a.mean > 0.55, "{}", a.mean);
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        use rand::seq::SliceRandom;
        let mut ds = data(3000);
        let mut labels: Vec<Option<u8>> = ds.users.iter().map(|u| u.task2_label).collect();
        labels.shuffle(&mut crate::rng::rng_from(99));
        for (u, l) in ds.users.iter_mut().zip(labels) {
            u.task2_label = l;
        }
        let r = cross_validate(&ds, &quick(2, FeatureSetId::FS3)).unwrap();
        assert!((r.mean - 0.5).abs() <= 0.05, "{}", r.mean);
    }

    #[test]
    fn task1_cv_reports_a_baseline() {
        let ds = data(400);
        let mut cfg = quick(1, FeatureSetId::FS10);
        cfg.normalize_targets = true;
        let r = cross_validate(&ds, &cfg).unwrap();
        assert_eq!(r.baselines.len(), 1);
        assert!(r.mean > r.baselines[0].mean, "{} vs {}", r.mean, r.baselines[0].mean);
    }

    #[test]
    fn train_save_load_predict() {
        let ds = data(300);
        for (task, fs, model) in [
            (2, FeatureSetId::FS7, LearnerKind::Logistic),
            (1, FeatureSetId::FS9, LearnerKind::Ridge),
        ] {
            let mut cfg = quick(task, fs);
            cfg.model = model;
            cfg.scale_features = true;
            let tp = train(&ds, &cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("model.json");
            tp.save(&p).unwrap();
            let back = TrainedPipeline::load(&p).unwrap();
            assert_eq!(back.task(), task);
            assert_eq!(back.learner(), model);
            match back.predict(&ds).unwrap() {
                Predictions::Task1(p) => {
                    assert_eq!(p.len(), 300);
                    assert!(p.iter().all(|(_, t)| t.len() == 5));
                }
                Predictions::Task2(p) => assert!(p.iter().all(|(_, s)| (0.0..=1.0).contains(s))),
            }
        }
    }

    #[test]
    fn submissions_round_trip() {
        let t1 = vec![(3u64, vec![(1u32, 2.5), (0, 0.25)]), (4, vec![])];
        let mut buf = Vec::new();
        write_task1_submission(&mut buf, &t1).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("user_id,b1:v1"));
        assert_eq!(read_task1_submission(&buf[..], "t1").unwrap(), t1);

        let t2 = vec![(1u64, 0.25), (2, 1.0)];
        let mut buf = Vec::new();
        write_task2_submission(&mut buf, &t2).unwrap();
        assert_eq!(read_task2_submission(&buf[..], "t2").unwrap(), t2);
        assert!(read_task2_submission(&b"user_id,score\n1,1.5\n"[..], "bad").is_err());
    }

    #[test]
    fn ensemble_checks_alignment() {
        let a = vec![(1, 0.0), (2, 1.0)];
        let b = vec![(1, 1.0), (2, 0.0)];
        assert_eq!(ensemble_submissions(&[a.clone(), b]).unwrap(), vec![(1, 0.5), (2, 0.5)]);
        assert!(ensemble_submissions(&[a, vec![(2, 1.0), (1, 0.0)]]).is_err());
    }
}
