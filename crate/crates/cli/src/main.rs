//! `mobinc`: prepare a dataset manifest, train, evaluate, classify one
//! image, or run the gradient checks.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 training
//! diverged, 4 checkpoint incompatible or corrupt, 5 gradient check failed.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mobinc::arch::MobIncConfig;
use mobinc::checkpoint::{read_checkpoint, save_checkpoint, write_atomic};
use mobinc::data::{build_manifest, load_rgb, preprocess_sized, BatchLoader, Class, DatasetManifest, Split, SplitRatios};
use mobinc::gradcheck::{run_gradcheck, GradcheckConfig};
use mobinc::ops::softmax;
use mobinc::train::{argmax, evaluate, export_history, provenance, EvalReport, Trainer};
use mobinc::{Error, FreezePolicy, Graph};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "mobinc", version, about = "Maize leaf disease classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory dataset and write a stratified split manifest.
    Prepare {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "manifest.csv")]
        out: PathBuf,
    },
    /// Train from a run configuration and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for model.minc, last.minc, history.csv,
        /// history.svg and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `freeze_policy` from the config.
        #[arg(long)]
        freeze_policy: Option<FreezePolicy>,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Run config describing the architecture, when it differs from the
        /// default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report_<split>.json and confusion_<split>.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every backward kernel.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = mobinc::gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Deliberately skew one op's gradient (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root_cause() {
            Error::Diverged { .. } => 3,
            Error::IncompatibleCheckpoint(_) | Error::CorruptCheckpoint(_) => 4,
            Error::Invariant(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 2, message: e.0 }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("MOBINC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: 2,
        message: format!("MOBINC_THREADS must be a positive integer, got `{v}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Prepare { data_root, seed, out } => prepare(&data_root, seed, &out),
        Command::Train {
            config,
            manifest,
            out,
            freeze_policy,
        } => train(&config, &manifest, &out, freeze_policy),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            config,
            out,
        } => eval(&checkpoint, &manifest, split, config.as_deref(), &out),
        Command::Predict { checkpoint, image, config } => predict(&checkpoint, &image, config.as_deref()),
        Command::Gradcheck {
            seed,
            instances,
            corrupt,
        } => gradcheck(seed, instances, corrupt),
    }
}

fn prepare(root: &Path, seed: u64, out: &Path) -> CmdResult {
    let manifest = build_manifest(root, &SplitRatios::default(), seed)?;
    manifest.write(out)?;
    println!("{:<22} {:>6} {:>6} {:>6} {:>6}", "class", "train", "val", "test", "total");
    let counts = Split::ALL.map(|s| manifest.class_counts(s));
    for c in Class::ALL {
        let i = c.index();
        let row = [counts[0][i], counts[1][i], counts[2][i]];
        println!("{:<22} {:>6} {:>6} {:>6} {:>6}", c.name(), row[0], row[1], row[2], row.iter().sum::<usize>());
    }
    let totals = counts.map(|c| c.iter().sum::<usize>());
    println!(
        "{:<22} {:>6} {:>6} {:>6} {:>6}",
        "total",
        totals[0],
        totals[1],
        totals[2],
        manifest.records.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model(config: &MobIncConfig, checkpoint: &Path) -> Result<Graph, Failure> {
    let mut graph = config.build(0)?;
    read_checkpoint(checkpoint)?.restore(&mut graph)?;
    Ok(graph)
}

/// Architecture and input side from an optional run config.
fn model_config(config: Option<&Path>) -> Result<(MobIncConfig, usize), Failure> {
    Ok(match config {
        Some(p) => {
            let cfg = RunConfig::read(p)?;
            (cfg.model, cfg.train.image_size)
        }
        None => (MobIncConfig::default(), mobinc::arch::INPUT_SIZE),
    })
}

fn train(config: &Path, manifest: &Path, out: &Path, freeze: Option<FreezePolicy>) -> CmdResult {
    let mut cfg = RunConfig::read(config)?;
    if let Some(f) = freeze {
        cfg = cfg.with_freeze_policy(f);
    }
    let manifest = DatasetManifest::read(manifest)?;
    let mut graph = cfg.model.build(cfg.train.seed)?;
    if let Some(init) = &cfg.init_checkpoint {
        let ck = read_checkpoint(init)?;
        // A full-model checkpoint first, then a bare trunk.
        if ck.restore(&mut graph).is_err() {
            ck.restore_trunk(&mut graph)?;
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Failure {
        code: 2,
        message: format!("cannot create `{}`: {e}", out.display()),
    })?;

    let trainer = Trainer::new(graph, &manifest, cfg.train.clone())?;
    let outcome = trainer.fit(|e| {
        eprintln!(
            "epoch {:>3}  train acc {:.4} loss {:.4}  val acc {:.4} loss {:.4}",
            e.epoch, e.train_acc, e.train_loss, e.val_acc, e.val_loss
        )
    })?;

    save_checkpoint(&outcome.best, out.join("model.minc"))?;
    save_checkpoint(&outcome.last, out.join("last.minc"))?;
    export_history(&outcome.history, out.join("history.csv"), Some(&out.join("history.svg")))?;

    let val = BatchLoader::from_split(&manifest, Split::Val, cfg.train.batch_size)?
        .with_size(cfg.train.image_size, cfg.train.image_size);
    let mut report = EvalReport::new(Split::Val, &evaluate(&outcome.best, &val)?)?;
    report.history = outcome.history;
    report.provenance = provenance(&cfg.train);
    report.provenance.insert("best_epoch".into(), outcome.best_epoch.to_string());
    report.provenance.insert("width_multiplier".into(), cfg.model.trunk.width_multiplier.to_string());
    report.provenance.insert("tap".into(), cfg.model.trunk.tap.clone());
    write_atomic(&out.join("report.json"), report.to_json()?.as_bytes())?;
    eprintln!(
        "best epoch {} (val acc {:.4}); wrote {}",
        outcome.best_epoch,
        report.accuracy,
        out.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, split: Split, config: Option<&Path>, out: &Path) -> CmdResult {
    let (model_cfg, side) = model_config(config)?;
    let graph = load_model(&model_cfg, checkpoint)?;
    let manifest = DatasetManifest::read(manifest)?;
    let loader = BatchLoader::from_split(&manifest, split, 32)?.with_size(side, side);
    let result = evaluate(&graph, &loader)?;
    let report = EvalReport::new(split, &result)?;
    std::fs::create_dir_all(out).map_err(|e| Failure {
        code: 2,
        message: format!("cannot create `{}`: {e}", out.display()),
    })?;
    let json = out.join(format!("report_{split}.json"));
    let csv = out.join(format!("confusion_{split}.csv"));
    write_atomic(&json, report.to_json()?.as_bytes())?;
    write_atomic(&csv, result.confusion.to_csv().as_bytes())?;

    let mut s = format!("{split}: {} samples, accuracy {:.4}, loss {:.4}\n", report.samples, report.accuracy, report.loss);
    let _ = writeln!(s, "{:<22} {:>9} {:>11} {:>11} {:>8}", "class", "precision", "sensitivity", "specificity", "f1");
    for (i, c) in Class::ALL.iter().enumerate() {
        let p = &report.per_class;
        let _ = writeln!(
            s,
            "{:<22} {:>9.4} {:>11.4} {:>11.4} {:>8.4}",
            c.name(),
            p.precision[i],
            p.sensitivity[i],
            p.specificity[i],
            p.f1[i]
        );
    }
    print!("{s}");
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, config: Option<&Path>) -> CmdResult {
    let (model_cfg, side) = model_config(config)?;
    let graph = load_model(&model_cfg, checkpoint)?;
    let img = load_rgb(image).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read `{}`: {e}", image.display()),
    })?;
    let logits = graph.predict(&preprocess_sized(&img, side, side)?)?;
    let best = argmax(logits.data());
    let probs = softmax(&logits.cast::<f64>())?;
    println!("{}", Class::ALL[best].name());
    for (c, p) in Class::ALL.iter().zip(probs.data()) {
        println!("{:<22} {p:.9}", c.name());
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize, corrupt: Option<String>) -> CmdResult {
    let report = run_gradcheck(&GradcheckConfig {
        seed,
        instances,
        corrupt,
        ..Default::default()
    })?;
    print!("{}", report.table());
    if report.passed() {
        println!("all {} ops within relative error {:e}", report.ops.len(), report.tolerance);
        Ok(())
    } else {
        let failed: Vec<String> = report
            .failures()
            .map(|o| format!("{} ({:.3e})", o.op, o.max_rel_error))
            .collect();
        Err(Failure {
            code: 5,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}
