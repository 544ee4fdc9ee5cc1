use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clvqa::checkpoint;
use clvqa::metrics::{read_predictions, score_predictions, scores_csv, write_predictions, Metric};
use clvqa::taskstream::{generate_stream, read_stream, write_dataset, StreamConfig, MAX_ANSWER_TOKENS};
use clvqa::trainer::{evaluate_samples, report, stream_vocabulary, train, RunConfig};
use clvqa::Error;

#[derive(Parser)]
#[command(name = "clvqa", version, about = "Continual learning for a toy driving-scene QA model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four-task synthetic stream.
    GenTasks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "size-per-task", default_value_t = 2000)]
        size_per_task: usize,
    },
    /// Train according to a config file and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of every task in a data dir.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an `id<TAB>candidate<TAB>reference` predictions file.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. } | Error::MissingArtifacts { .. } | Error::Incompatible(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 4,
    }
}

/// Sibling path `<out stem>.<task>.pred.tsv` for per-task predictions.
fn prediction_path(out: &Path, task: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
    out.with_file_name(format!("{stem}.{task}.pred.tsv"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenTasks {
            out,
            seed,
            size_per_task,
        } => {
            let stream = generate_stream(&StreamConfig::with_train_size(size_per_task, seed))?;
            for ds in &stream {
                write_dataset(ds, &out)?;
            }
            println!("wrote {} tasks to {}", stream.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            train(&cfg, &out)?;
            println!("{}", report(&out)?);
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            out,
        } => {
            let stream = read_stream(&data)?;
            let vocab = stream_vocabulary(&stream);
            let store = checkpoint::load(&ckpt, &vocab)?;
            let mut csv = String::from("task,metric,value\n");
            for ds in &stream {
                let (scores, preds) = evaluate_samples(&store, &vocab, &ds.test, MAX_ANSWER_TOKENS, 64)?;
                write_predictions(&prediction_path(&out, ds.task.name()), &preds)?;
                for (m, v) in scores.iter() {
                    csv.push_str(&format!("{},{m},{v}\n", ds.task));
                }
                println!(
                    "{:<12} BLEU-4 {:6.2}  CIDEr {:5.3}",
                    ds.task.name(),
                    scores.get(Metric::Bleu4) * 100.0,
                    scores.get(Metric::Cider)
                );
            }
            std::fs::write(&out, csv).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
        Command::Score { pred, out } => {
            let preds = read_predictions(&pred)?;
            let scores = score_predictions(&preds)?;
            std::fs::write(&out, scores_csv(&scores)).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
        Command::Report { run } => println!("{}", report(&run)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
