use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msan::checks::gradcheck_suite;
use msan::data::{generate_synthetic, load_dataset, save_dataset, Span};
use msan::model::SpanMetrics;
use msan::mpn::CandidateLabel;
use msan::tensor::{GradCheckOptions, Graph};
use msan::{ForwardOptions, MomentSource};
use msan_harness::ablate::{ablate, parse_variants, Variant};
use msan_harness::config::{load_generator_config, load_train_config};
use msan_harness::eval::evaluate;
use msan_harness::train::train;
use msan_harness::{Checkpoint, Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "msan",
    version,
    about = "Video + subtitle multiple-choice QA: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic JSON-lines dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides the clip count in the configuration.
        #[arg(long)]
        num_clips: Option<usize>,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Answer from the annotated moment instead of the predicted one.
        #[arg(long)]
        gt_moment: bool,
    },
    /// Train and evaluate model variants under one seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        /// Held-out set for the table; defaults to the validation set.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Comma-separated variant names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Print scored moment candidates and the selected span per record.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates sampled per parameter.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CandidateRow {
    span: Span,
    video_score: f64,
    subtitle_score: f64,
    label: CandidateLabel,
}

#[derive(Serialize)]
struct LocalizeRow {
    id: u64,
    gt_moment: Span,
    alpha: Option<f64>,
    winner: Option<Span>,
    predicted_span: Option<Span>,
    metrics: Option<SpanMetrics>,
    candidates: Vec<CandidateRow>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, num_clips } => {
            let mut cfg = load_generator_config(common.config.as_deref())?;
            if let Some(n) = num_clips {
                cfg.num_clips = n;
            }
            let records = generate_synthetic(&cfg, common.seed.unwrap_or(0))?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("data.jsonl"));
            save_dataset(&records, &out)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train {
            common,
            train: tp,
            valid,
        } => {
            let mut cfg = load_train_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let (tr, va) = (load_dataset(&tp)?, load_dataset(&valid)?);
            let dir = out_dir(&common, "run")?;
            let outcome = train(&cfg, &tr, &va)?;
            Checkpoint::new(&cfg.model, &outcome.params).save(&dir.join("checkpoint.json"))?;
            write_json(&dir.join("train_log.json"), &outcome.log)?;
            fs::write(dir.join("train_log.csv"), outcome.log.to_csv()?)?;
            println!(
                "best epoch {} with validation accuracy {:.4}; outputs in {}",
                outcome.log.best_epoch,
                outcome.log.best_valid_accuracy,
                dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            gt_moment,
        } => {
            let (model, params) = Checkpoint::load(&checkpoint)?.restore()?;
            let records = load_dataset(&data)?;
            let source = if gt_moment {
                MomentSource::GroundTruth
            } else {
                MomentSource::Predicted
            };
            let out = evaluate(&model, &params, &records, source)?;
            let dir = out_dir(&common, "eval")?;
            write_json(&dir.join("report.json"), &out.report)?;
            fs::write(dir.join("report.csv"), out.report.to_csv()?)?;
            write_jsonl(&dir.join("traces.jsonl"), &out.traces)?;
            println!("accuracy {:.4} over {} records", out.report.accuracy, out.report.count);
        }
        Command::Ablate {
            common,
            train: tp,
            valid,
            test,
            variants,
        } => {
            let mut cfg = load_train_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                parse_variants(&variants)?
            };
            let (tr, va) = (load_dataset(&tp)?, load_dataset(&valid)?);
            let te = match test {
                Some(p) => load_dataset(&p)?,
                None => va.clone(),
            };
            let table = ablate(&cfg, &tr, &va, &te, &variants)?;
            let dir = out_dir(&common, "ablation")?;
            let csv = table.to_csv()?;
            fs::write(dir.join("ablation.csv"), &csv)?;
            write_json(&dir.join("ablation.json"), &table)?;
            print!("{csv}");
        }
        Command::Localize {
            common,
            checkpoint,
            data,
        } => {
            let (model, params) = Checkpoint::load(&checkpoint)?.restore()?;
            if !model.config().use_mpn {
                return Err(msan::Error::Config("checkpoint has no moment proposal stage".into()).into());
            }
            let records = load_dataset(&data)?;
            let opts = ForwardOptions {
                train: false,
                moment: MomentSource::Predicted,
                sample_seed: 0,
            };
            let mut rows = Vec::with_capacity(records.len());
            for rec in &records {
                let mut g = Graph::with_params(&params);
                let out = model.forward(&mut g, rec, &opts)?;
                rows.push(LocalizeRow {
                    id: rec.id,
                    gt_moment: rec.gt_moment,
                    alpha: out.alpha,
                    winner: out.winner,
                    predicted_span: out.predicted_span,
                    metrics: out
                        .predicted_span
                        .map(|p| SpanMetrics::of(&p, &rec.gt_moment))
                        .transpose()?,
                    candidates: out
                        .candidates
                        .iter()
                        .map(|c| CandidateRow {
                            span: c.span,
                            video_score: c.m_v,
                            subtitle_score: c.m_s,
                            label: c.label,
                        })
                        .collect(),
                });
            }
            let out = common.out.unwrap_or_else(|| PathBuf::from("localize.jsonl"));
            write_jsonl(&out, &rows)?;
            println!("wrote {} localizations to {}", rows.len(), out.display());
        }
        Command::Gradcheck { common, samples } => {
            let seed = common.seed.unwrap_or(0);
            let opts = GradCheckOptions {
                samples_per_param: samples,
                ..Default::default()
            };
            let outcomes = gradcheck_suite(seed, &opts)?;
            let mut failed = Vec::new();
            let mut lines = String::from("check,passed,max_rel_error,worst_param,worst_analytic,worst_numeric\n");
            for c in &outcomes {
                let (worst, a, n) = match c.report.worst() {
                    Some(p) => (p.name.as_str(), p.worst_analytic, p.worst_numeric),
                    None => ("", 0.0, 0.0),
                };
                lines += &format!(
                    "{},{},{:e},{worst},{a:e},{n:e}\n",
                    c.name,
                    c.report.passed(),
                    c.report.max_rel_error()
                );
                if !c.report.passed() {
                    failed.push(c.name.clone());
                }
            }
            match &common.out {
                Some(p) => fs::write(p, &lines)?,
                None => print!("{lines}"),
            }
            if !failed.is_empty() {
                return Err(Error::GradCheck(format!("seed {seed}: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(1)
        }
    }
}
