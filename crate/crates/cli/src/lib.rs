//! `lethe` — command-line front end for the continual-unlearning laboratory.
//! Every subcommand resolves a config (defaults ← file ← `--set` overrides),
//! writes its resolved snapshot next to its outputs, and exits non-zero with
//! a one-line `category: detail` error on failure.

pub mod config;
pub mod report;
pub mod svg;

use clap::{Parser, Subcommand};
use lethe_core::attack::{
    attack_report_header, eval_against, run_attack, AttackError, AttackOutcome, AttackSpec,
    QuantizeSpec, RelearnData, RelearnSpec,
};
use lethe_core::corpus::{generate_corpus, CorpusError, Sample, Split};
use lethe_core::engine::{
    finetune, train_retain_model, Ablations, EngineError, EpochLog, RunConfig,
};
use lethe_core::metrics::MetricsError;
use lethe_core::model::{load_checkpoint, save_checkpoint, ModelError, ToyLm};
use lethe_core::objectives::ObjectiveKind;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("attack: {0}")]
    Attack(#[from] AttackError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("report: {0}")]
    Report(String),
}

#[derive(Parser, Debug)]
#[command(name = "lethe", version, about = "desk-scale continual-unlearning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic QA corpus and write it to a directory.
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        per_category: usize,
        #[arg(long, default_value_t = 0.5)]
        forget_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a fresh model on the full corpus (both splits).
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. `--set train.lr=0.005`. Repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the retain-only reference model (forget split excluded).
    RetainTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Extra sample ids to exclude besides the forget split.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive the full request stream: filter, select, attribute, unlearn.
    UnlearnRun {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// `fit` (the full pipeline) or a fixed objective (`ga`, `ga-gd`,
        /// `ga-kl`, `npo`, `npo-kl`, `rlabel`) run as the naive sequential
        /// baseline: no filter, all blocks trainable.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model against a baseline on the corpus splits.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Treat these ids as the forget side (default: the forget split).
        #[arg(long, value_delimiter = ',')]
        forget_ids: Vec<String>,
        /// Also write the row to `<out>/eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a recovery attack on a saved model and re-score it.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// `relearn-retain-only`, `relearn-unrelated-only`, `relearn-mixed`,
        /// `int4`, or `quantize` (with `--bits`).
        #[arg(long)]
        arm: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        per_channel: bool,
        #[arg(long, value_delimiter = ',')]
        forget_ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report.md and SVG panels from a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory itself.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
            CliError::Config(format!("config not found: {}: {e}", p.display()))
        })?),
        None => None,
    };
    // run directories snapshot their config as JSON; accept both formats
    match text.as_deref() {
        Some(t) if t.trim_start().starts_with('{') => {
            let overlay: serde_json::Value = serde_json::from_str(t)
                .map_err(|e| CliError::Config(format!("bad JSON config: {e}")))?;
            let mut cfg = serde_json::to_value(RunConfig::default())
                .map_err(|e| CliError::Config(e.to_string()))?;
            merge_json(&mut cfg, overlay);
            let rendered = serde_json::from_value::<RunConfig>(cfg)
                .map_err(|e| CliError::Config(format!("schema violation: {e}")))?;
            config::load_run_config(Some(&config::render_flat(&rendered)), sets)
        }
        other => config::load_run_config(other, sets),
    }
}

/// Plain deep merge for JSON snapshots (already schema-shaped).
fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.snapshot())?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::from(header);
    for r in rows {
        text.push('\n');
        text.push_str(r);
    }
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn epoch_csv(log: &[EpochLog]) -> (String, Vec<String>) {
    (
        EpochLog::csv_header().to_string(),
        log.iter().map(|e| e.csv_row()).collect(),
    )
}

/// Forget/retain sample sets: the explicit ids if given (each must exist),
/// otherwise the corpus's forget split.
fn split_sets(
    corpus: &[Sample],
    forget_ids: &[String],
) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let chosen: BTreeSet<&str> = if forget_ids.is_empty() {
        corpus
            .iter()
            .filter(|s| s.split == Split::Forget)
            .map(|s| s.id.as_str())
            .collect()
    } else {
        let all: BTreeSet<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
        for id in forget_ids {
            if !all.contains(id.as_str()) {
                return Err(CliError::Config(format!("unknown forget id `{id}`")));
            }
        }
        forget_ids.iter().map(|s| s.as_str()).collect()
    };
    let (mut f, mut r) = (Vec::new(), Vec::new());
    for s in corpus {
        if chosen.contains(s.id.as_str()) {
            f.push(s.clone());
        } else {
            r.push(s.clone());
        }
    }
    Ok((f, r))
}

fn parse_arm(
    arm: &str,
    epochs: Option<usize>,
    bits: Option<u32>,
    per_channel: bool,
) -> Result<AttackSpec, CliError> {
    let relearn = |data: RelearnData| {
        AttackSpec::Relearn(RelearnSpec {
            data,
            epochs: epochs.unwrap_or(RelearnSpec::default().epochs),
            ..RelearnSpec::default()
        })
    };
    match arm {
        "relearn-retain-only" => Ok(relearn(RelearnData::RetainOnly)),
        "relearn-unrelated-only" => Ok(relearn(RelearnData::UnrelatedOnly)),
        "relearn-mixed" => Ok(relearn(RelearnData::Mixed)),
        "int4" => Ok(AttackSpec::Quantize(QuantizeSpec { bits: 4, per_channel })),
        "quantize" => Ok(AttackSpec::Quantize(QuantizeSpec {
            bits: bits.unwrap_or(QuantizeSpec::default().bits),
            per_channel,
        })),
        other => Err(CliError::Config(format!("unknown attack arm `{other}`"))),
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenCorpus { seed, per_category, forget_fraction, out } => {
            let corpus = generate_corpus(seed, per_category, forget_fraction)?;
            std::fs::create_dir_all(&out)?;
            let manifest = serde_json::json!({
                "seed": seed,
                "per_category": per_category,
                "forget_fraction": forget_fraction,
            });
            std::fs::write(
                out.join("gen-corpus.json"),
                serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )?;
            std::fs::write(
                out.join("corpus.json"),
                serde_json::to_string_pretty(&corpus).expect("corpus serializes"),
            )?;
            let rows: Vec<String> = corpus
                .iter()
                .map(|s| {
                    format!(
                        "{},{},{},{}",
                        s.id,
                        s.category.label(),
                        match s.split {
                            Split::Forget => "forget",
                            Split::Retain => "retain",
                        },
                        s.stress
                    )
                })
                .collect();
            write_csv(&out.join("corpus.csv"), "id,category,split,stress", &rows)?;
            println!("wrote {} samples to {}", corpus.len(), out.display());
            Ok(())
        }

        Command::Finetune { config, set, out } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cfg.validate()?;
            write_snapshot(&out, &cfg)?;
            let corpus = generate_corpus(cfg.corpus_seed, cfg.per_category, cfg.forget_fraction)?;
            let mut model = ToyLm::init(cfg.model, cfg.init_seed)?;
            let log = finetune(&mut model, &corpus, &cfg.train)?;
            let (head, rows) = epoch_csv(&log);
            write_csv(&out.join("finetune.csv"), &head, &rows)?;
            save_checkpoint(&model, &out.join("model.bin"))?;
            let last = log.last().expect("finetune logs at least the initial epoch");
            println!(
                "finetuned {} params for {} epochs, loss {:.4} -> {}",
                model.param_count(),
                last.epoch,
                last.loss,
                out.display()
            );
            Ok(())
        }

        Command::RetainTrain { config, set, exclude, out } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cfg.validate()?;
            write_snapshot(&out, &cfg)?;
            let corpus = generate_corpus(cfg.corpus_seed, cfg.per_category, cfg.forget_fraction)?;
            let gone: BTreeSet<String> = corpus
                .iter()
                .filter(|s| s.split == Split::Forget)
                .map(|s| s.id.clone())
                .chain(exclude.iter().cloned())
                .collect();
            let keep: BTreeSet<String> =
                corpus.iter().map(|s| s.id.clone()).filter(|id| !gone.contains(id)).collect();
            let (model, log) =
                train_retain_model(&cfg.model, cfg.init_seed, &corpus, &keep, &cfg.train)?;
            let (head, rows) = epoch_csv(&log);
            write_csv(&out.join("retain.csv"), &head, &rows)?;
            let ids: Vec<String> = keep.iter().cloned().collect();
            std::fs::write(out.join("retain_ids.txt"), ids.join("\n") + "\n")?;
            save_checkpoint(&model, &out.join("model.bin"))?;
            println!("retain model on {} ids -> {}", keep.len(), out.display());
            Ok(())
        }

        Command::UnlearnRun { config, set, method, out } => {
            let mut cfg = load_config(config.as_deref(), &set)?;
            if let Some(name) = method.as_deref() {
                cfg.ablations = if name.eq_ignore_ascii_case("fit") {
                    Ablations::default()
                } else {
                    let kind = ObjectiveKind::parse(name)
                        .map_err(|e| CliError::Config(e.to_string()))?;
                    Ablations { no_filter: true, fixed_method: Some(kind), full_update: true }
                };
            }
            cfg.validate()?;
            let outcome = lethe_core::engine::run(&cfg, Some(&out))?;
            let last = outcome.checkpoints.last().expect("run always checkpoints");
            println!(
                "{} requests done, final fd {:.4} ru {:.4} -> {}",
                outcome.state.t,
                last.bundle.fd,
                last.bundle.ru,
                out.display()
            );
            Ok(())
        }

        Command::Eval { model, baseline, config, set, forget_ids, out } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cfg.validate()?;
            let corpus = generate_corpus(cfg.corpus_seed, cfg.per_category, cfg.forget_fraction)?;
            let (forget, retain) = split_sets(&corpus, &forget_ids)?;
            let m = load_checkpoint(&model)?;
            let b = load_checkpoint(&baseline)?;
            let bundle = eval_against(&m, &b, &forget, &retain)?;
            // same columns as a run's metrics.csv, but keyed by forget-set size
            let header = lethe_core::engine::metrics_csv_header().replacen("t,", "n_forget,", 1);
            let row = lethe_core::engine::metrics_csv_row(forget.len(), &bundle);
            println!("{header}");
            println!("{row}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_csv(&dir.join("eval.csv"), &header, &[row])?;
            }
            Ok(())
        }

        Command::Attack {
            model,
            baseline,
            config,
            set,
            arm,
            epochs,
            bits,
            per_channel,
            forget_ids,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cfg.validate()?;
            let spec = parse_arm(&arm, epochs, bits, per_channel)?;
            let corpus = generate_corpus(cfg.corpus_seed, cfg.per_category, cfg.forget_fraction)?;
            let (forget, retain) = split_sets(&corpus, &forget_ids)?;
            let m = load_checkpoint(&model)?;
            let b = load_checkpoint(&baseline)?;
            let pre = eval_against(&m, &b, &forget, &retain)?;
            let attacked = run_attack(&m, &corpus, &spec)?;
            let post = eval_against(&attacked, &b, &forget, &retain)?;
            let outcome = AttackOutcome { arm: spec.arm_label(), pre, post };
            println!("{}", attack_report_header());
            println!("{}", outcome.csv_row());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_csv(&dir.join("attack.csv"), attack_report_header(), &[outcome.csv_row()])?;
                save_checkpoint(&attacked, &dir.join("attacked.bin"))?;
            }
            Ok(())
        }

        Command::Report { run, out } => {
            report::emit(&run, out.as_deref())?;
            println!("report written to {}", out.unwrap_or(run).display());
            Ok(())
        }
    }
}
