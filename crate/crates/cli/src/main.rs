use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sigma_core::ablation::{self, AblationReport};
use sigma_core::checkpoint;
use sigma_core::config::Precision;
use sigma_core::corpus::{load_interactions, DatasetKind};
use sigma_core::error::ErrorKind;
use sigma_core::eval::{evaluate, metric_rows, top_k, CategoryMap, Split};
use sigma_core::{ExperimentConfig, PreparedCorpus, Result, Scalar, SigmaError, Trainer};

const CORPUS_FILE: &str = "corpus.json";
const CHECKPOINT_FILE: &str = "model.ckpt";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";
const METRICS_FILE: &str = "metrics.jsonl";
const ABLATION_FILE: &str = "ablation.jsonl";

#[derive(Parser, Debug)]
#[command(name = "sigma", version, about = "Multi-interest VAE recommender experiments")]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and the seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (overrides output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted `key=value` override, e.g. `train.k=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Skip the corpus/checkpoint compatibility check.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, split and store an interaction log.
    Prepare {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Train on the prepared corpus and write the best checkpoint.
    Train,
    /// Score the test split with the trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report validation instead of test metrics.
        #[arg(long)]
        validation: bool,
    },
    /// Top-K items for one user, given their whole history.
    Recommend {
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and test every variant and sweep cell.
    Ablate,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Command::Prepare { input, dataset } = &cli.command {
        if let Some(p) = input {
            overrides.push(format!("dataset.path={}", toml_str(&p.to_string_lossy())));
        }
        if let Some(d) = dataset {
            let kind: DatasetKind = d.parse()?;
            let name = match kind {
                DatasetKind::Amazon => "amazon",
                DatasetKind::Movielens => "movielens",
            };
            overrides.push(format!("dataset.kind={}", toml_str(name)));
        }
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("train.seed={s}"));
        overrides.push(format!("seeds=[{s}]"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("output_dir={}", toml_str(&o.to_string_lossy())));
    }
    overrides.extend(cli.overrides.iter().cloned());
    ExperimentConfig::resolve(cli.config.as_deref(), &overrides)
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn need(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(SigmaError::Missing(format!(
            "{what} {} not found (run `sigma {producer}` first)",
            path.display()
        )))
    }
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let path = cfg.output_dir.join(CORPUS_FILE);
    need(&path, "corpus", "prepare")?;
    PreparedCorpus::load(&path)
}

fn categories(cfg: &ExperimentConfig, corpus: &PreparedCorpus) -> Result<Option<CategoryMap>> {
    cfg.eval
        .diversity_map
        .as_deref()
        .map(|p| CategoryMap::load(p, &corpus.items))
        .transpose()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| SigmaError::io(path, e))?))
}

fn write_jsonl<S: serde::Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| SigmaError::io(path, e))?;
    }
    w.flush().map_err(|e| SigmaError::io(path, e))
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    let input = cfg
        .dataset
        .path
        .as_deref()
        .ok_or_else(|| SigmaError::Config("no input: pass --input or set dataset.path".into()))?;
    let log = load_interactions(input, cfg.dataset.threshold())?;
    let corpus = PreparedCorpus::prepare(&cfg.dataset.name, &log, cfg.dataset.min_count)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| SigmaError::io(&cfg.output_dir, e))?;
    let out = cfg.output_dir.join(CORPUS_FILE);
    corpus.save(&out)?;
    print!("{}", corpus.stats.table(&corpus.dataset));
    if corpus.excluded_short > 0 {
        println!(
            "excluded {} users with fewer than 3 interactions",
            corpus.excluded_short
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let mut trainer = Trainer::<T>::new(&cfg.train, &corpus)?;
    trainer.validation_k = cfg.eval.validation_k;
    let log_path = cfg.output_dir.join(TRAIN_LOG_FILE);
    let ckpt = cfg.output_dir.join(CHECKPOINT_FILE);
    let mut log = create(&log_path)?;
    let summary = trainer.fit(&corpus, Some(&mut log), Some(&ckpt))?;
    log.flush().map_err(|e| SigmaError::io(&log_path, e))?;
    for r in &summary.history {
        eprintln!(
            "epoch {:>4}  loss {:.4}  val R@{} {:.4}{}",
            r.epoch,
            r.loss.total,
            cfg.eval.validation_k,
            r.val_recall,
            if r.improved { "  *" } else { "" }
        );
    }
    println!(
        "trained {} epochs, best validation Recall@{} {:.4} at epoch {}{}",
        summary.epochs,
        cfg.eval.validation_k,
        summary.best_recall,
        summary.best_epoch,
        if summary.stopped_early { " (early stop)" } else { "" }
    );
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn open_checkpoint<T: Scalar>(
    cfg: &ExperimentConfig,
    path: Option<&Path>,
    corpus: &PreparedCorpus,
    force: bool,
) -> Result<checkpoint::Checkpoint<T>> {
    let path = path.map_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    need(&path, "checkpoint", "train")?;
    let ckpt = checkpoint::load::<T>(&path)?;
    if let Err(e) = checkpoint::check_corpus(&ckpt.header, corpus) {
        if !force {
            return Err(e);
        }
        eprintln!("warning: {e} (continuing because of --force)");
    }
    if ckpt.header.config_hash != cfg.train.hash() {
        eprintln!(
            "note: checkpoint config {} differs from the resolved config {}; using the checkpoint's",
            ckpt.header.config_hash,
            cfg.train.hash()
        );
    }
    Ok(ckpt)
}

fn evaluate_cmd<T: Scalar>(cfg: &ExperimentConfig, path: Option<&Path>, validation: bool, force: bool) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let ckpt = open_checkpoint::<T>(cfg, path, &corpus, force)?;
    let cats = categories(cfg, &corpus)?;
    let split = if validation { Split::Validation } else { Split::Test };
    let model = &ckpt.model;
    let report = evaluate(
        model,
        &corpus,
        &cfg.eval.ks,
        split,
        cats.as_ref(),
        model.config.batch_size,
    )?;
    print!("{}", report.table());
    let c = &model.config;
    let rows = metric_rows(
        &report,
        &corpus.dataset,
        &c.variant.to_string(),
        c.effective_lambda(),
        c.k,
        c.seed,
    );
    let out = cfg.output_dir.join(METRICS_FILE);
    write_jsonl(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn recommend<T: Scalar>(cfg: &ExperimentConfig, user: &str, k: usize, path: Option<&Path>, force: bool) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let ckpt = open_checkpoint::<T>(cfg, path, &corpus, force)?;
    let uid = corpus
        .users
        .get(user)
        .ok_or_else(|| SigmaError::Eval(format!("unknown user `{user}`")))?;
    let split = corpus
        .splits
        .iter()
        .find(|s| s.train.user == uid)
        .ok_or_else(|| SigmaError::Eval(format!("user `{user}` has no sequence")))?;
    let mut history = split.test_history();
    history.push(split.test_target);
    let scores = ckpt.model.score(&[&history], 1)?;
    let list = top_k(uid, scores.row(0), k);
    println!("{:>4}  {:<16} {:>10}", "rank", "item", "score");
    for (i, (item, score)) in list.items.iter().zip(&list.scores).enumerate() {
        let raw = corpus.items.raw(*item).unwrap_or("?");
        println!("{:>4}  {:<16} {:>10.4}", i + 1, raw, score);
    }
    Ok(())
}

fn ablate<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let cats = categories(cfg, &corpus)?;
    let cells = ablation::plan(cfg);
    let total = cells.len();
    let mut done = 0;
    let results = ablation::run_cells(
        &cells,
        |c| ablation::train_and_test::<T>(c, cfg, &corpus, cats.as_ref()),
        |r| {
            done += 1;
            eprintln!(
                "[{done}/{total}] {:?} {} lambda={} k={} seed={}",
                r.cell.sweep, r.cell.variant, r.cell.lambda, r.cell.k, r.cell.seed
            );
        },
    );
    let report = AblationReport {
        dataset: corpus.dataset.clone(),
        results,
    };
    print!("{}", report.table(&cfg.eval.ks, &cfg.ablate.diversity_ks));
    fs::create_dir_all(&cfg.output_dir).map_err(|e| SigmaError::io(&cfg.output_dir, e))?;
    let out = cfg.output_dir.join(ABLATION_FILE);
    write_jsonl(&out, &report.rows())?;
    println!("wrote {}", out.display());
    let failed = report.failures();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SigmaError::Eval(format!(
            "{} of {total} ablation cells failed",
            failed.len()
        )))
    }
}

fn run(cli: &Cli) -> Result<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(SigmaError::Config(format!(
            "device `{}` is not available; only `cpu` is supported",
            cli.device
        )));
    }
    let cfg = resolve(cli)?;
    eprintln!("# effective config\n{}", cfg.to_toml());
    if matches!(cli.command, Command::Train | Command::Ablate) {
        fs::create_dir_all(&cfg.output_dir).map_err(|e| SigmaError::io(&cfg.output_dir, e))?;
    }
    macro_rules! dispatch {
        ($f:ident $(, $a:expr)*) => {
            match cfg.train.precision {
                Precision::F32 => $f::<f32>(&cfg $(, $a)*),
                Precision::F64 => $f::<f64>(&cfg $(, $a)*),
            }
        };
    }
    match &cli.command {
        Command::Prepare { .. } => prepare(&cfg),
        Command::Train => dispatch!(train),
        Command::Evaluate { checkpoint, validation } => {
            dispatch!(evaluate_cmd, checkpoint.as_deref(), *validation, cli.force)
        }
        Command::Recommend { user, k, checkpoint } => {
            dispatch!(recommend, user, *k, checkpoint.as_deref(), cli.force)
        }
        Command::Ablate => dispatch!(ablate),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
