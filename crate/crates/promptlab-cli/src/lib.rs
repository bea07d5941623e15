//! Command-line surface for the prompt-tuning laboratory.
//!
//! Subcommands: `gen-task`, `train`, `eval`, `gradcheck`, `ablate`, and
//! `protocol`. Exit codes: 0 on success, 1 on validation errors (bad
//! flags, malformed configs, missing input files), 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use promptlab::config::{load_run_config, RunConfig};
use promptlab::encoder::SyntheticTextEncoder;
use promptlab::error::Error;
use promptlab::eval::{ablation_run, base_new_protocol, evaluate_checkpoint};
use promptlab::gradcheck::run_loss_gradient_suite;
use promptlab::report::{emit_report, EvalReport, ReportFormat};
use promptlab::store::{load_embedding_store, save_embedding_store};
use promptlab::task::{gen_synthetic_task, task_from_store, task_to_store, FewShotTask};
use promptlab::trainer::{load_checkpoint, save_checkpoint, train, Method};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "promptlab",
    about = "Prompt-tuning laboratory: synthetic tasks, context-vector training, base-to-new evaluation",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// UTF-8 JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed everywhere (including the seed list).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic few-shot task file.
    #[command(name = "gen-task")]
    GenTask {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output task container path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on a task file and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Task container produced by gen-task.
        #[arg(long)]
        task: PathBuf,
        /// Method: coop | kgcoop | prograd | ours.
        #[arg(long)]
        method: String,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a task.
    Eval {
        /// Checkpoint container.
        #[arg(long)]
        ckpt: PathBuf,
        /// Task container.
        #[arg(long)]
        task: PathBuf,
        /// Split to report: base | new | both.
        #[arg(long, default_value = "both")]
        split: String,
        /// Report format: md | csv.
        #[arg(long, default_value = "md")]
        format: String,
        /// Optional report output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Component ablation (baseline / +MI / +MI+Aug).
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full base-to-new protocol over methods × shots × seeds.
    Protocol {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Format(_) | Error::Shape(_) | Error::Domain(_)
        | Error::Pairing(_) => EXIT_VALIDATION,
        Error::Graph(_) | Error::Training { .. } | Error::Io(_) => EXIT_RUNTIME,
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Error> {
    if !path.is_file() {
        return Err(Error::config(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let cfg = load_run_config(&args.config)?;
    Ok(cfg.with_seed_override(args.seed))
}

fn load_task(path: &Path) -> Result<FewShotTask, Error> {
    require_file(path, "task file")?;
    task_from_store(&load_embedding_store(path)?)
}

fn encoder_for_task(task: &FewShotTask) -> Result<SyntheticTextEncoder, Error> {
    SyntheticTextEncoder::new(task.seed, task.dim, task.hidden)
}

fn write_report(report: &EvalReport, path: &Path) -> Result<(), Error> {
    emit_report(report, ReportFormat::from_extension(path), path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenTask { config, out } => {
            let cfg = load_config(&config)?;
            let encoder = SyntheticTextEncoder::new(cfg.seed, cfg.dim, cfg.hidden)?;
            let task = gen_synthetic_task(&cfg.task_params(cfg.seed, cfg.max_shots()), &encoder)?;
            save_embedding_store(&task_to_store(&task)?, &out)?;
            println!(
                "wrote task: {} classes, dim {}, {} train / {} test samples -> {}",
                task.num_classes(),
                task.dim,
                task.train_labels.len(),
                task.test_labels.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, task, method, out } => {
            let cfg = load_config(&config)?;
            let method = Method::from_str(&method)?;
            let task = load_task(&task)?;
            let encoder = encoder_for_task(&task)?;
            let train_cfg = cfg.train_config(method, cfg.seed);
            let model = train(&train_cfg, &task, &encoder)?;
            save_checkpoint(&model, &out)?;
            let last = model.history.last().expect("at least one epoch");
            println!(
                "trained {} for {} steps: final loss {:.4}, train accuracy {:.4} -> {}",
                method.name(),
                model.steps,
                last.loss,
                last.train_accuracy,
                out.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, task, split, format, out } => {
            require_file(&ckpt, "checkpoint")?;
            let model = load_checkpoint(&ckpt)?;
            let task = load_task(&task)?;
            let encoder = encoder_for_task(&task)?;
            let report = evaluate_checkpoint(&model, &task, &encoder)?;
            let row = &report.rows[0];
            match split.as_str() {
                "base" => println!("base={:.4}", row.base_acc),
                "new" => println!("new={:.4}", row.new_acc),
                "both" => println!(
                    "base={:.4} new={:.4} h={:.4}",
                    row.base_acc, row.new_acc, row.hm
                ),
                other => {
                    return Err(Error::config(format!(
                        "unknown split '{other}', expected base|new|both"
                    )))
                }
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(path) = out {
                let fmt = match format.as_str() {
                    "md" => ReportFormat::Markdown,
                    "csv" => ReportFormat::Csv,
                    other => {
                        return Err(Error::config(format!(
                            "unknown format '{other}', expected md|csv"
                        )))
                    }
                };
                emit_report(&report, fmt, &path)?;
                println!("wrote report -> {}", path.display());
            }
            Ok(())
        }
        Command::Gradcheck { seed, trials } => {
            let outcome = run_loss_gradient_suite(seed, trials)?;
            println!(
                "gradcheck over {trials} instances (seed {seed}):\n  cross-entropy   max rel err {:.3e}\n  kl-general      max rel err {:.3e}\n  kg-euclidean    max rel err {:.3e}\n  total objective max rel err {:.3e}",
                outcome.cross_entropy, outcome.kl_general, outcome.kg_euclidean, outcome.total
            );
            let worst = outcome.worst();
            println!("max relative error: {worst:.3e}");
            if worst >= 1e-4 {
                return Err(Error::Training {
                    step: 0,
                    message: format!("gradient check failed: max relative error {worst:.3e}"),
                });
            }
            Ok(())
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let report = ablation_run(&cfg)?;
            write_report(&report, &out)?;
            println!(
                "ablation over shots {:?}, seeds {:?} ({:.1}s) -> {}",
                report.shots, report.seeds, report.timing_secs, out.display()
            );
            Ok(())
        }
        Command::Protocol { config, out } => {
            let cfg = load_config(&config)?;
            let report = base_new_protocol(&cfg)?;
            write_report(&report, &out)?;
            println!(
                "protocol over {} methods, shots {:?}, seeds {:?} ({:.1}s) -> {}",
                report.methods.len(),
                report.shots,
                report.seeds,
                report.timing_secs,
                out.display()
            );
            Ok(())
        }
    }
}

/// Parses `argv` (including the binary name) and executes; returns the
/// process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage problem reported on stderr.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            return EXIT_VALIDATION;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
