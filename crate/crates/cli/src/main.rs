use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ensemble_bert::corpus::{generate_synthetic, save_csv};
use ensemble_bert::evaluation::{accuracy_per_minute, metrics, ConfusionMatrix};
use ensemble_bert::experiment::{
    evaluate_checkpoint, load_config, load_synthetic_config, run_experiment, RunOptions,
};
use ensemble_bert::Error;

/// Train and compare miniature BERT classifiers and their ensembles.
#[derive(Parser)]
#[command(name = "ensemble-bert", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every variant of an experiment config and write a report.
    Run {
        config: PathBuf,
        /// Also run variants marked `optional = true`.
        #[arg(long)]
        include_optional: bool,
        /// Train ensemble members concurrently.
        #[arg(long)]
        parallel_members: bool,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `train.epochs` from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a single-model or ensemble checkpoint on a labeled CSV.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
    },
    /// Binary metrics from confusion counts, class 1 positive.
    #[command(allow_negative_numbers = true)]
    Metrics {
        tn: i64,
        fp: i64,
        #[arg(value_name = "FN")]
        fn_: i64,
        tp: i64,
        /// Training time, to also print accuracy per minute.
        #[arg(long)]
        minutes: Option<f64>,
    },
    /// Write a synthetic labeled corpus described by a TOML spec.
    GenSynthetic { spec: PathBuf, out: PathBuf },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run {
            config,
            include_optional,
            parallel_members,
            output_dir,
            epochs,
        } => {
            let config = load_config(&config)?;
            let options = RunOptions {
                include_optional,
                parallel_members,
                output_dir,
                epochs,
                progress: true,
            };
            let outcome = run_experiment(&config, &options)?;
            print!("{}", outcome.report.to_markdown());
            println!("\nArtifacts written to {}", outcome.output_dir.display());
        }
        Command::Eval { checkpoint, corpus } => {
            print!("{}", evaluate_checkpoint(&checkpoint, &corpus)?.render());
        }
        Command::Metrics {
            tn,
            fp,
            fn_,
            tp,
            minutes,
        } => {
            let counts = [tn, fp, fn_, tp];
            if counts.iter().any(|&c| c < 0) {
                return Err(Error::Usage(format!(
                    "counts must be nonnegative, got {counts:?}"
                )));
            }
            if counts.iter().all(|&c| c == 0) {
                return Err(Error::Usage("all four counts are zero".into()));
            }
            let [tn, fp, fn_, tp] = counts.map(|c| c as u64);
            let m = metrics(&ConfusionMatrix::from_binary(tn, fp, fn_, tp))?;
            println!("Accuracy  {:.4}", m.accuracy);
            println!("Precision {:.4}", m.precision);
            println!("Recall    {:.4}", m.recall);
            println!("F1-score  {:.4}", m.f1);
            if let Some(minutes) = minutes {
                let apm = accuracy_per_minute(m.accuracy, minutes)
                    .map_err(|e| Error::Usage(e.to_string()))?;
                println!("Accuracy/minute {apm:.4}");
            }
        }
        Command::GenSynthetic { spec, out } => {
            let corpus = generate_synthetic(&load_synthetic_config(&spec)?.to_spec())?;
            save_csv(corpus.records(), &out)?;
            eprintln!("wrote {} examples to {}", corpus.len(), out.display());
        }
    }
    Ok(())
}
