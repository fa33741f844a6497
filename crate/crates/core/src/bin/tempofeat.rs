use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempofeat::config::{RunConfig, SEED_ENV};
use tempofeat::data::{load_dataset, DataPaths};
use tempofeat::datagen::{generate, write_generated, GenConfig};
use tempofeat::eval::{Fingerprint, ScoreReport};
use tempofeat::features::FeatureSetId;
use tempofeat::models::LearnerKind;
use tempofeat::pipeline::{
    cross_validate, ensemble_submissions, evaluate_submission, read_task2_submission, train,
    with_workers, write_task1_submission, write_task2_submission, Predictions, Preprocessor,
    TrainedPipeline,
};
use tempofeat::{Error, Result};

/// Temporal activity features, branch-visit ranking and up-sell scoring.
#[derive(Parser)]
#[command(name = "tempofeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted signal.
    Synth(SynthArgs),
    /// Write the feature matrix and its column manifest.
    Featurize(RunArgs),
    /// Fit preprocessing and a model on all users; write model.json.
    Train(RunArgs),
    /// Score users with a trained model and write a submission file.
    Predict(PredictArgs),
    /// Score a submission file against the truth in the data directory.
    Evaluate(EvaluateArgs),
    /// k-fold cross validation; writes a score report.
    Cv(RunArgs),
    /// Average task 2 submissions (same users, same order).
    Ensemble(EnsembleArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML file mirroring the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// FS1 .. FS10.
    #[arg(long)]
    feature_set: Option<FeatureSetId>,
    /// gbt, forest, ridge or logistic.
    #[arg(long)]
    model: Option<LearnerKind>,
    #[arg(long)]
    task: Option<u8>,
    /// Number of k-means clusters for FS8 and above.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    normalize_targets: bool,
    #[arg(long)]
    log_transform: bool,
    #[arg(long)]
    scale_features: bool,
    /// Average activities with ln(1 + day) weights.
    #[arg(long)]
    recency_weighted: bool,
    /// Default 100.
    #[arg(long)]
    n_estimators: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    l2_lambda: Option<f64>,
    /// Columns to drop: names, `prefix*`, or the groups `geo` and `monthly`.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_branches: Option<usize>,
    #[arg(long)]
    k_true: Option<usize>,
    #[arg(long)]
    missing_rate: Option<f64>,
    /// 191,238 users and 323 branches.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, default_value = "artifacts/model.json")]
    model_file: PathBuf,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Submission file to score.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    task: u8,
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Task 2 submission files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Output file.
    #[arg(long, default_value = "ensemble.csv")]
    out: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let env = std::env::var(SEED_ENV).ok();
        let mut c = RunConfig::resolve(self.config.as_deref(), env.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { c.$f = v; })*};
        }
        set!(data_dir, out, feature_set, model, task, k, seed, workers, cv_folds, n_estimators, learning_rate, l2_lambda);
        if let Some(d) = self.max_depth {
            c.max_depth = Some(d);
        }
        c.normalize_targets |= self.normalize_targets;
        c.log_transform |= self.log_transform;
        c.scale_features |= self.scale_features;
        c.recency_weighted |= self.recency_weighted;
        if !self.exclude.is_empty() {
            c.exclude = self.exclude.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn load(dir: &Path) -> Result<tempofeat::data::Dataset> {
    load_dataset(&DataPaths::in_dir(dir))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let mut g = if a.full_scale { GenConfig::full_scale(0) } else { GenConfig::default() };
            let env = std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok());
            g.seed = a.seed.or(env).unwrap_or(0);
            if let Some(v) = a.n_users {
                g.n_users = v;
            }
            if let Some(v) = a.n_branches {
                g.n_branches = v;
            }
            if let Some(v) = a.k_true {
                g.k_true = v;
            }
            if let Some(v) = a.missing_rate {
                g.missing_rate = v;
            }
            g.validate()?;
            let out = generate(&g)?;
            write_generated(&out, &g, &a.out)?;
            println!(
                "synth: {} users, {} activities, {} branches -> {}",
                out.dataset.users.len(),
                out.dataset.activities.len(),
                out.dataset.branches.len(),
                a.out.display()
            );
        }
        Command::Featurize(a) => {
            let cfg = a.resolve()?;
            with_workers(cfg.workers, || -> Result<()> {
                let ds = load(&cfg.data_dir)?;
                let (_, fm) = Preprocessor::fit(&ds, &cfg)?;
                mkdir(&cfg.out)?;
                let path = cfg.out.join("features.csv");
                fm.write_csv(create(&path)?)?;
                write(&cfg.out.join("manifest.json"), serde_json::to_string_pretty(&fm.manifest)?)?;
                write(&cfg.out.join("run_config.toml"), cfg.to_toml())?;
                println!(
                    "featurize: {} users x {} columns ({}) -> {}",
                    fm.n_rows(),
                    fm.values.n_cols(),
                    cfg.feature_set,
                    path.display()
                );
                Ok(())
            })??;
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            with_workers(cfg.workers, || -> Result<()> {
                let ds = load(&cfg.data_dir)?;
                let tp = train(&ds, &cfg)?;
                mkdir(&cfg.out)?;
                let path = cfg.out.join("model.json");
                tp.save(&path)?;
                write(&cfg.out.join("run_config.toml"), cfg.to_toml())?;
                println!(
                    "train: task {} {} on {} -> {}",
                    cfg.task,
                    cfg.model,
                    cfg.feature_set,
                    path.display()
                );
                Ok(())
            })??;
        }
        Command::Predict(a) => {
            with_workers(a.workers.unwrap_or(0), || -> Result<()> {
                let tp = TrainedPipeline::load(&a.model_file)?;
                let ds = load(&a.data_dir)?;
                mkdir(&a.out)?;
                let path = a.out.join(format!("submission_task{}.csv", tp.task()));
                let n = match tp.predict(&ds)? {
                    Predictions::Task1(p) => {
                        write_task1_submission(create(&path)?, &p)?;
                        p.len()
                    }
                    Predictions::Task2(p) => {
                        write_task2_submission(create(&path)?, &p)?;
                        p.len()
                    }
                };
                println!("predict: {n} users -> {}", path.display());
                Ok(())
            })??;
        }
        Command::Evaluate(a) => {
            if a.task != 1 && a.task != 2 {
                return Err(Error::Config(format!("task must be 1 or 2, got {}", a.task)));
            }
            let ds = load(&a.data_dir)?;
            let value = evaluate_submission(&ds, a.task, &a.predictions)?;
            let metric = if a.task == 1 { "cosine_top5" } else { "roc_auc" };
            let report = ScoreReport::new(
                a.task,
                metric,
                vec![value],
                Fingerprint {
                    feature_set: "-".into(),
                    model: a.predictions.display().to_string(),
                    seed: 0,
                    data_hash: ds.content_hash(),
                    config: serde_json::json!({ "predictions": a.predictions }),
                },
            );
            mkdir(&a.out)?;
            let path = a.out.join("evaluation.json");
            write(&path, report.to_json())?;
            println!("evaluate: task {} {metric} = {value:.5}; report: {}", a.task, path.display());
        }
        Command::Cv(a) => {
            let cfg = a.resolve()?;
            let report = with_workers(cfg.workers, || -> Result<ScoreReport> {
                let ds = load(&cfg.data_dir)?;
                cross_validate(&ds, &cfg)
            })??;
            mkdir(&cfg.out)?;
            let path = cfg.out.join("report.json");
            write(&path, report.to_json())?;
            print!("{}", report.table());
            println!(
                "cv: task {} {} {} = {:.5}; report: {}",
                cfg.task,
                cfg.model,
                cfg.feature_set,
                report.mean,
                path.display()
            );
        }
        Command::Ensemble(a) => {
            let subs = a
                .files
                .iter()
                .map(|f| {
                    let file = std::fs::File::open(f).map_err(|e| Error::io(f, e))?;
                    read_task2_submission(file, &f.display().to_string())
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = ensemble_submissions(&subs)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                mkdir(parent)?;
            }
            write_task2_submission(create(&a.out)?, &mean)?;
            println!(
                "ensemble: mean of {} submissions over {} users -> {}",
                subs.len(),
                mean.len(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
