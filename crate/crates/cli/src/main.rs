use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use mrseg_cli::config::{load_config, Overrides};
use mrseg_cli::pipeline::{self, TASKS_HEADER};
use mrseg_cli::{ground_truth_of, stats, validate};
use mrseg_core::convgen::Family;
use mrseg_core::eval::{self, ReportFormat};
use mrseg_core::protocol::{self, FlattenMode};
use mrseg_core::templates::{self, Split};

/// Dataset compiler and evaluation harness for multi-round
/// referring-segmentation conversations.
#[derive(Parser)]
#[command(name = "mrseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(value: SplitArg) -> Self {
        match value {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Replace encoded-reference spans with the literal words "the mask".
    TagAsMask,
    /// Replace encoded-reference spans with the reference instance's caption.
    CaptionSubstitute,
}

impl From<ModeArg> for FlattenMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::TagAsMask => FlattenMode::TagAsMask,
            ModeArg::CaptionSubstitute => FlattenMode::CaptionSubstitute,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a conversation corpus from configured annotation sources.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        template_dir: Option<PathBuf>,
        #[arg(long)]
        split: Option<SplitArg>,
    },
    /// Histogram of conversations by round count and family.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every conversation and corpus invariant; nonzero exit on violations.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flatten N-round conversations into N single-turn tasks.
    Flatten {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score per-round mask predictions with mIoU/cIoU.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report shipped template pool sizes and train/val disjointness.
    Templates {
        #[arg(long, default_value = "templates")]
        template_dir: PathBuf,
        /// Exit nonzero if pool sizes or disjointness are violated.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Serialize)]
struct CommandManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_digest: String,
}

fn args_digest(args: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(args).expect("args serialize");
    let hash = Sha256::digest(&bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_command_manifest(
    out_dir: &Path,
    command: &'static str,
    args: &impl Serialize,
) -> Result<()> {
    let manifest = CommandManifest {
        tool: "mrseg",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_digest: args_digest(args),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Build {
            config,
            out,
            seed,
            workers,
            template_dir,
            split,
        } => {
            let overrides = Overrides {
                seed,
                workers,
                template_dir,
                template_split: split.map(Split::from),
            };
            let config = load_config(&config, &overrides)?;
            let outputs = pipeline::build(&config)?;
            let sources = pipeline::load_sources(&config)?;
            pipeline::write_outputs(&out, &outputs, &sources)?;
            println!(
                "built {} conversations ({} rounds) into {}",
                outputs.manifest.conversations,
                outputs.manifest.rounds,
                out.display()
            );
            for (family, count) in &outputs.manifest.families {
                println!("  {family:<14} {count}");
            }
            Ok(0)
        }
        Command::Stats { corpus, out } => {
            let build = pipeline::load_build_dir(&corpus)?;
            let rows = stats::stats(&build.conversations);
            let table = stats::render_table(&rows);
            print!("{table}");
            if let Some(out_dir) = out {
                std::fs::create_dir_all(&out_dir)?;
                let mut lines = String::from("{\"schema\":\"mrseg/stats/v1\"}\n");
                for row in &rows {
                    lines.push_str(&serde_json::to_string(row)?);
                    lines.push('\n');
                }
                std::fs::write(out_dir.join("stats.jsonl"), lines)?;
                std::fs::write(out_dir.join("stats.txt"), &table)?;
                write_command_manifest(
                    &out_dir,
                    "stats",
                    &serde_json::json!({"corpus": corpus.display().to_string()}),
                )?;
            }
            Ok(0)
        }
        Command::Validate { corpus, out } => {
            let build = pipeline::load_build_dir(&corpus)?;
            let violations = validate::validate(&build);
            if let Some(out_dir) = &out {
                std::fs::create_dir_all(out_dir)?;
                let mut lines = String::from("{\"schema\":\"mrseg/violations/v1\"}\n");
                for v in &violations {
                    lines.push_str(&serde_json::to_string(v)?);
                    lines.push('\n');
                }
                std::fs::write(out_dir.join("violations.jsonl"), lines)?;
                write_command_manifest(
                    out_dir,
                    "validate",
                    &serde_json::json!({"corpus": corpus.display().to_string()}),
                )?;
            }
            if violations.is_empty() {
                println!(
                    "ok: {} conversations, {} corpora",
                    build.conversations.len(),
                    build.corpora.len()
                );
                Ok(0)
            } else {
                for v in &violations {
                    match &v.conversation_id {
                        Some(id) => eprintln!("violation [{}] {}: {}", v.code, id, v.detail),
                        None => eprintln!("violation [{}] {}", v.code, v.detail),
                    }
                }
                eprintln!("{} violation(s)", violations.len());
                Ok(1)
            }
        }
        Command::Flatten { corpus, mode, out } => {
            let build = pipeline::load_build_dir(&corpus)?;
            let mode = FlattenMode::from(mode);
            std::fs::create_dir_all(&out)?;
            let mut lines = String::from(TASKS_HEADER);
            lines.push('\n');
            let mut task_count = 0u64;
            let mut fallbacks = 0u64;
            for sc in &build.conversations {
                let corpus_ref = build
                    .corpus_of(&sc.source)
                    .with_context(|| format!("no corpus dump for source {:?}", sc.source))?;
                for task in protocol::flatten(&sc.conversation, mode, corpus_ref) {
                    if task.fell_back {
                        fallbacks += 1;
                        eprintln!(
                            "warning: {} round {}: reference has no caption, substituted \"the mask\"",
                            task.conversation_id, task.round_index
                        );
                    }
                    lines.push_str(&serde_json::to_string(&task)?);
                    lines.push('\n');
                    task_count += 1;
                }
            }
            std::fs::write(out.join("tasks.jsonl"), lines)?;
            write_command_manifest(
                &out,
                "flatten",
                &serde_json::json!({
                    "corpus": corpus.display().to_string(),
                    "mode": match mode {
                        FlattenMode::TagAsMask => "tag-as-mask",
                        FlattenMode::CaptionSubstitute => "caption-substitute",
                    },
                }),
            )?;
            println!(
                "flattened {} conversations into {task_count} tasks ({fallbacks} caption fallback(s))",
                build.conversations.len()
            );
            Ok(0)
        }
        Command::Score {
            corpus,
            predictions,
            out,
        } => {
            let build = pipeline::load_build_dir(&corpus)?;
            let gt = ground_truth_of(&build)?;
            let text = std::fs::read_to_string(&predictions)
                .with_context(|| format!("reading {}", predictions.display()))?;
            let records = eval::parse_predictions(&text)?;
            let report = eval::score(&records, &gt)?;
            print!("{}", eval::emit_report(&report, ReportFormat::TableText));
            if let Some(out_dir) = out {
                std::fs::create_dir_all(&out_dir)?;
                std::fs::write(
                    out_dir.join("report.txt"),
                    eval::emit_report(&report, ReportFormat::TableText),
                )?;
                std::fs::write(
                    out_dir.join("report.json"),
                    eval::emit_report(&report, ReportFormat::MachineReadable),
                )?;
                write_command_manifest(
                    &out_dir,
                    "score",
                    &serde_json::json!({
                        "corpus": corpus.display().to_string(),
                        "predictions": predictions.display().to_string(),
                    }),
                )?;
            }
            Ok(0)
        }
        Command::Templates {
            template_dir,
            check,
        } => {
            let mut failures = 0usize;
            println!(
                "{:<14}  {:>5}  {:>5}  {:<8}  pool bounds",
                "family", "train", "val", "disjoint"
            );
            for family in Family::ALL {
                let train = templates::load(&template_dir, family, Split::Train)?;
                let val = templates::load(&template_dir, family, Split::Val)?;
                let disjoint = templates::verify_disjoint(&train, &val).is_ok();
                let multi_round = Family::MULTI_ROUND.contains(&family);
                let in_range = if multi_round {
                    (100..=200).contains(&train.len()) && (50..=100).contains(&val.len())
                } else {
                    true
                };
                let bounds = if multi_round { "100-200 / 50-100" } else { "-" };
                println!(
                    "{:<14}  {:>5}  {:>5}  {:<8}  {}",
                    family.slug(),
                    train.len(),
                    val.len(),
                    disjoint,
                    bounds
                );
                if !disjoint || !in_range {
                    failures += 1;
                }
            }
            if check && failures > 0 {
                eprintln!("{failures} template pool(s) out of contract");
                return Ok(1);
            }
            Ok(0)
        }
    }
}

