//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod support;

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use tempofeat::clustering::{kmeans_fit, KMeansConfig};
use tempofeat::config::RunConfig;
use tempofeat::data::{Geo, VisitTarget};
use tempofeat::datagen::{generate, GenConfig};
use tempofeat::eval::{cosine_top5, roc_auc, ScoreReport, TopList};
use tempofeat::features::{clumpiness, ActivityTimeline, FeatureSetId};
use tempofeat::matrix::Matrix;
use tempofeat::models::gbt::{gbt_fit_traced, GbtConfig, Loss};
use tempofeat::models::linear::ridge_fit;
use tempofeat::models::tree::SortedColumns;
use tempofeat::models::LearnerKind;
use tempofeat::pipeline::{cross_validate, with_workers};
use tempofeat::rng::rng_from;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Direct formula over the padded sequence of distinct active days.
fn clumpiness_oracle(days: &[u32], horizon: u32) -> f64 {
    let mut t = days.to_vec();
    t.sort_unstable();
    t.dedup();
    let mut pts = vec![0.0];
    pts.extend(t.iter().map(|&d| f64::from(d)));
    pts.push(f64::from(horizon + 1));
    let n1 = f64::from(horizon + 1);
    let mut h = 0.0;
    for w in pts.windows(2) {
        let x = (w[1] - w[0]) / n1;
        if x > 0.0 {
            h += x * x.ln();
        }
    }
    1.0 + h / n1.ln()
}

fn clumpiness_of(days: &[u32]) -> f64 {
    clumpiness(&ActivityTimeline::new(0, days.iter().copied(), 181).unwrap())
}

fn clumpiness_oracle_agreement() -> Outcome {
    let mut rng = rng_from(101);
    let cases: Vec<Vec<u32>> = (0..1000)
        .map(|_| {
            let n = rng.random_range(1..=120);
            (0..n).map(|_| rng.random_range(1..=181)).collect()
        })
        .collect();
    let start = Instant::now();
    let got: Vec<f64> = cases.iter().map(|d| clumpiness_of(d)).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .zip(&got)
        .map(|(d, g)| (g - clumpiness_oracle(d, 181)).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-9, || format!("max diff {worst:e}"))?;
    ensure(elapsed < 1.0, || format!("took {elapsed:.3} s"))?;
    Ok(format!("max diff {worst:.1e}, {elapsed:.4} s"))
}

fn clumpiness_exact_cases() -> Outcome {
    let daily: Vec<u32> = (1..=181).collect();
    let c0 = clumpiness_of(&daily);
    ensure(c0.abs() < 1e-12, || format!("daily timeline gives {c0:e}"))?;
    let c1 = clumpiness_of(&[1]);
    let want = clumpiness_oracle(&[1], 181);
    ensure((c1 - want).abs() < 1e-9, || format!("day-1 timeline {c1} vs {want}"))?;
    ensure((c1 - 0.9935).abs() < 5e-5, || format!("day-1 timeline {c1}"))?;
    Ok(format!("daily {c0:e}, day 1 {c1:.6}"))
}

/// Exhaustive pair count, doubled so ties stay integral.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2.0 * pos as f64 * neg as f64)
}

fn auc_exactness() -> Outcome {
    let mut rng = rng_from(202);
    let mut worst = 0.0f64;
    let mut tie_heavy = 0;
    for set in 0..200 {
        let n = rng.random_range(2..=500);
        let levels = if set % 3 == 0 { rng.random_range(1..=4) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if levels > 0 {
                    f64::from(rng.random_range(0..levels)) * 0.25
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let rate = rng.random_range(0.05..0.95);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < rate).collect();
        labels[0] = true;
        labels[1] = false;
        labels.shuffle(&mut rng);
        if levels > 0 {
            tie_heavy += 1;
        }
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - pairwise_auc(&scores, &labels)).abs());
    }
    ensure(worst < 1e-12, || format!("max diff {worst:e}"))?;
    Ok(format!("200 sets ({tie_heavy} tie-heavy), max diff {worst:.1e}"))
}

fn cosine_metric() -> Outcome {
    let mut rng = rng_from(303);
    let mut truth = Vec::new();
    let mut perfect = Vec::new();
    let mut disjoint = Vec::new();
    let mut noisy = Vec::new();
    for user in 0..400u64 {
        let mut ids: Vec<u32> = (0..40).collect();
        ids.shuffle(&mut rng);
        let k = rng.random_range(1..=5);
        let visited = &ids[..k];
        let mut top: TopList = Vec::new();
        for &b in visited {
            let v = rng.random_range(1..=30);
            truth.push(VisitTarget { user_id: user, branch_id: b, visits: v });
            top.push((b, f64::from(v)));
        }
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        perfect.push((user, top));
        disjoint.push((user, ids[k..k + 5].iter().map(|&b| (b, 1.0)).collect::<TopList>()));
        noisy.push((user, ids[..5].iter().map(|&b| (b, rng.random_range(0.0..10.0))).collect::<TopList>()));
    }
    let score = |p: &[(u64, TopList)]| cosine_top5(p, &truth).map_err(|e| e.to_string());
    let s_perfect = score(&perfect)?;
    ensure(s_perfect == 1.0, || format!("perfect predictions give {s_perfect}"))?;
    let s_disjoint = score(&disjoint)?;
    ensure(s_disjoint == 0.0, || format!("disjoint predictions give {s_disjoint}"))?;
    let base = score(&noisy)?;
    let mut worst = 0.0f64;
    for c in [1e-6, 0.37, 3.0, 1e6] {
        let scaled: Vec<(u64, TopList)> = noisy
            .iter()
            .map(|(u, t)| (*u, t.iter().map(|&(b, v)| (b, v * c)).collect()))
            .collect();
        worst = worst.max((score(&scaled)? - base).abs());
    }
    ensure(worst < 1e-12, || format!("rescaling moved the score by {worst:e}"))?;
    Ok(format!("perfect 1.0, disjoint 0.0, rescaling diff {worst:.1e}"))
}

/// Solves the square system by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn learner_contracts() -> Outcome {
    let mut rng = rng_from(404);
    let (n, d) = (2000, 20);
    let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let r = x.row(i);
            3.0 * r[0] - 2.0 * r[1] * r[2] + r[3].sin() + rng.random_range(-0.3..0.3)
        })
        .collect();
    let cfg = GbtConfig { n_estimators: 100, ..GbtConfig::default() };
    let (model, trace) =
        gbt_fit_traced(&x, &SortedColumns::new(&x), &y, &cfg, Loss::Squared).map_err(|e| e.to_string())?;
    ensure(model.trees.len() == 100 && trace.len() == 101, || {
        format!("{} trees, {} trace entries", model.trees.len(), trace.len())
    })?;
    let mut raw = vec![model.init_value; n];
    let mut mse = vec![y.iter().map(|v| (v - model.init_value).powi(2)).sum::<f64>() / n as f64];
    for t in &model.trees {
        for (i, r) in raw.iter_mut().enumerate() {
            *r += model.learning_rate * t.predict_row(x.row(i));
        }
        mse.push(y.iter().zip(&raw).map(|(a, f)| (a - f).powi(2)).sum::<f64>() / n as f64);
    }
    let rises = mse.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(rises == 0, || format!("staged MSE rose at {rises} stages"))?;
    let trace_gap = mse.iter().zip(&trace).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(trace_gap < 1e-9, || format!("reported trace differs by {trace_gap:e}"))?;

    let (n, d) = (10, 5);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let fit = ridge_fit(&Matrix::from_rows(&xs).unwrap(), &ys, 0.0).map_err(|e| e.to_string())?;
    // normal equations with an explicit intercept column
    let aug: Vec<Vec<f64>> = xs.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let m = d + 1;
    let ata: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| aug.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let aty: Vec<f64> = (0..m).map(|i| aug.iter().zip(&ys).map(|(r, v)| r[i] * v).sum()).collect();
    let beta = gauss_solve(ata, aty);
    let mut gap = (fit.intercept - beta[d]).abs();
    for (w, b) in fit.weights.iter().zip(&beta) {
        gap = gap.max((w - b).abs());
    }
    ensure(gap < 1e-8, || format!("ridge differs from the oracle by {gap:e}"))?;
    Ok(format!("final MSE {:.4}, no rises; ridge diff {gap:.1e}", mse[100]))
}

fn task2_config(workers: usize) -> RunConfig {
    RunConfig {
        task: 2,
        feature_set: FeatureSetId::FS8,
        model: LearnerKind::Gbt,
        cv_folds: 2,
        seed: 0,
        workers,
        ..RunConfig::default()
    }
}

fn task1_config(fs: FeatureSetId, workers: usize) -> RunConfig {
    RunConfig {
        task: 1,
        feature_set: fs,
        model: LearnerKind::Gbt,
        normalize_targets: true,
        cv_folds: 2,
        seed: 0,
        workers,
        ..RunConfig::default()
    }
}

fn run_cv(ds: &tempofeat::data::Dataset, cfg: &RunConfig) -> Result<ScoreReport, String> {
    with_workers(cfg.workers, || cross_validate(ds, cfg))
        .and_then(|r| r)
        .map_err(|e| e.to_string())
}

struct EndToEnd {
    task2: tempofeat::data::Dataset,
    task1: tempofeat::data::Dataset,
    reports: Vec<(RunConfig, String)>,
}

fn task2_analogue(e2e: &mut EndToEnd, truth: &tempofeat::datagen::PlantedTruth) -> Outcome {
    let start = Instant::now();
    let cfg = task2_config(1);
    let report = run_cv(&e2e.task2, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    e2e.reports.push((cfg, report.to_json()));
    let labeled: Vec<_> = e2e.task2.users.iter().filter_map(|u| u.task2_label.map(|l| (u.user_id, l))).collect();
    let p: Vec<f64> = labeled.iter().map(|(id, _)| truth.user(*id).unwrap().p_label).collect();
    let l: Vec<bool> = labeled.iter().map(|(_, l)| *l == 1).collect();
    let oracle = roc_auc(&p, &l).map_err(|e| e.to_string())?;
    let auc = report.mean;
    ensure(auc >= 0.70, || format!("AUC {auc:.4} < 0.70"))?;
    ensure(auc <= oracle + 0.02, || format!("AUC {auc:.4} above oracle {oracle:.4} + 0.02"))?;
    ensure(elapsed < 300.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!("AUC {auc:.4} (oracle {oracle:.4}), {elapsed:.1} s"))
}

fn task1_analogue(e2e: &mut EndToEnd) -> Outcome {
    let start = Instant::now();
    let cfg10 = task1_config(FeatureSetId::FS10, 1);
    let fs10 = run_cv(&e2e.task1, &cfg10)?;
    let cfg1 = task1_config(FeatureSetId::FS1, 1);
    let fs1 = run_cv(&e2e.task1, &cfg1)?;
    let elapsed = start.elapsed().as_secs_f64();
    e2e.reports.push((cfg10, fs10.to_json()));
    e2e.reports.push((cfg1, fs1.to_json()));
    let popularity = fs10
        .baselines
        .iter()
        .find(|b| b.name == "popularity")
        .map(|b| b.mean)
        .ok_or("report lacks the popularity baseline")?;
    ensure(fs10.mean >= popularity + 0.05, || {
        format!("FS10 {:.4} vs popularity {popularity:.4}", fs10.mean)
    })?;
    ensure(fs10.mean >= fs1.mean, || format!("FS10 {:.4} < FS1 {:.4}", fs10.mean, fs1.mean))?;
    ensure(elapsed < 600.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "FS10 {:.4}, FS1 {:.4}, popularity {popularity:.4}, {elapsed:.1} s",
        fs10.mean, fs1.mean
    ))
}

fn worker_determinism(e2e: &EndToEnd) -> Outcome {
    ensure(e2e.reports.len() == 3, || "earlier end-to-end runs did not complete".into())?;
    for (cfg, first) in &e2e.reports {
        let cfg = RunConfig { workers: 4, ..cfg.clone() };
        let ds = if cfg.task == 2 { &e2e.task2 } else { &e2e.task1 };
        let again = run_cv(ds, &cfg)?.to_json();
        ensure(&again == first, || format!("task {} {} report changed", cfg.task, cfg.feature_set))?;
    }
    Ok("3 reports byte-identical with 1 and 4 workers".into())
}

fn kmeans_recovery() -> Outcome {
    let mut rng = rng_from(909);
    let spread = 1.0;
    let noise = Normal::new(0.0, spread).unwrap();
    let centers: Vec<(f64, f64)> = (0..5)
        .map(|i| {
            let a = f64::from(i) * std::f64::consts::TAU / 5.0;
            (40.0 * a.cos(), 40.0 * a.sin())
        })
        .collect();
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (c, &(cx, cy)) in centers.iter().enumerate() {
        for _ in 0..150 {
            pts.push(Geo::new(cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)));
            truth.push(c);
        }
    }
    let min_sep = centers
        .iter()
        .enumerate()
        .flat_map(|(i, a)| centers[i + 1..].iter().map(move |b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()))
        .fold(f64::INFINITY, f64::min);
    ensure(min_sep >= 10.0 * spread, || format!("blobs only {min_sep:.1} apart"))?;
    let model = kmeans_fit(&pts, &KMeansConfig { k: 5, seed: 7, ..KMeansConfig::default() })
        .map_err(|e| e.to_string())?;
    let labels = model.labels(&pts);
    let mut map: HashMap<usize, usize> = HashMap::new();
    for (&l, &t) in labels.iter().zip(&truth) {
        if *map.entry(l).or_insert(t) != t {
            return Err(format!("cluster {l} mixes planted blobs"));
        }
    }
    ensure(map.len() == 5, || format!("{} clusters used", map.len()))?;
    let rises = model.inertia_history.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(rises == 0, || format!("inertia rose {rises} times"))?;
    Ok(format!("exact recovery, {} iterations, inertia {:.1}", model.iterations_run, model.inertia))
}

fn missing_value_fixture() -> Outcome {
    let checks = support::missing_fixture_checks();
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(w, _)| w.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join("; ")))?;
    Ok(format!("{} checks", checks.len()))
}

fn report(id: u32, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {id:>2}: {name} ({detail})");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {id:>2}: {name} ({detail})");
            false
        }
    }
}

fn main() -> ExitCode {
    let task2_gen = generate(&GenConfig { n_users: 20_000, ..GenConfig::default() }).expect("generator runs");
    let task1_gen = generate(&GenConfig { n_users: 5_000, n_branches: 40, ..GenConfig::default() })
        .expect("generator runs");
    let mut e2e = EndToEnd { task2: task2_gen.dataset, task1: task1_gen.dataset, reports: Vec::new() };

    let mut ok = true;
    ok &= report(1, "clumpiness matches the direct formula", clumpiness_oracle_agreement());
    ok &= report(2, "clumpiness exact cases", clumpiness_exact_cases());
    ok &= report(3, "rank AUC equals the pairwise count", auc_exactness());
    ok &= report(4, "top-5 cosine metric", cosine_metric());
    ok &= report(5, "boosting monotone, ridge exact", learner_contracts());
    ok &= report(6, "up-sell cross validation", task2_analogue(&mut e2e, &task2_gen.truth));
    ok &= report(7, "branch visit cross validation", task1_analogue(&mut e2e));
    ok &= report(8, "reports independent of worker count", worker_determinism(&e2e));
    ok &= report(9, "k-means recovers planted blobs", kmeans_recovery());
    ok &= report(10, "missing-value preprocessing", missing_value_fixture());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
