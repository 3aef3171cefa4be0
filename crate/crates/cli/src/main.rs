use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmis::metrics::{evaluate, TruthSource};
use mmis::predict::{predict_to_dir, PredictOptions};
use mmis::synth::{generate, SynthSpec};
use mmis::train::{train, CHECKPOINT_FILE, LOG_FILE};
use mmis::{Checkpoint, TrainConfig};

/// Multi-dataset segmentation with similarity fusion blocks.
#[derive(Parser)]
#[command(name = "mmis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus described by a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every dataset under a data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a data directory and write a CSV report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Score against full-truth masks instead of each dataset's own labels.
        #[arg(long)]
        full_truth: bool,
    },
    /// Segment one volume; writes per-class masks and overlay images.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Resample slices whose size is not divisible by 2^depth.
        #[arg(long)]
        resize: bool,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> mmis::Result<ExitCode> {
    match command {
        Command::GenData { spec, out } => {
            let spec = SynthSpec::load(&spec)?;
            let manifests = generate(&spec, &out)?;
            for m in &manifests {
                eprintln!("dataset_{}: {} volumes", m.dataset_id, m.samples.len());
            }
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = train(&cfg, &data, &out)?;
            for r in &outcome.history {
                eprintln!("epoch {:4}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss);
            }
            eprintln!(
                "best epoch {} (val {:.6}){}; wrote {} and {}",
                outcome.best.epoch,
                outcome.best.best_val_loss.unwrap_or(f64::NAN),
                if outcome.stopped_early { ", stopped early" } else { "" },
                out.join(CHECKPOINT_FILE).display(),
                out.join(LOG_FILE).display()
            );
        }
        Command::Evaluate {
            ckpt,
            data,
            report,
            threshold,
            full_truth,
        } => {
            let truth = if full_truth {
                TruthSource::FullTruth
            } else {
                TruthSource::Annotated
            };
            let r = evaluate(&ckpt, &data, threshold, truth)?;
            r.write_csv(&report)?;
            print!("{}", r.to_csv());
        }
        Command::Predict {
            ckpt,
            input,
            out,
            threshold,
            resize,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let written = predict_to_dir(&ckpt, &input, &out, &PredictOptions { threshold, resize })?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Gradcheck { seed } => {
            let report = mmis::gradcheck::gradcheck(seed)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
