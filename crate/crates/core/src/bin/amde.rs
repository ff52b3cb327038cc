use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amde::data::{export_dataset, import_dataset, DataConfig, IdentityDataset};
use amde::encoder::LocalBranch;
use amde::engine::gradcheck::{full_pipeline_check, op_suite, GRAD_TOLERANCE};
use amde::engine::{
    ablate, ablation_seeds, eval_threads, evaluate, train, train_on, write_csv, Checkpoint,
    TrainConfig,
};
use amde::losses::MetricLoss;
use amde::{Error, Result};

#[derive(Parser)]
#[command(
    name = "amde",
    version,
    about = "Train and evaluate occlusion-robust metric embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic identity dataset to a directory.
    GenData {
        #[arg(long, default_value_t = 32)]
        ids: usize,
        #[arg(long, default_value_t = 20)]
        per_id: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config; writes checkpoint.amde and train_log.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use an exported dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory at several occlusion levels.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6")]
        occlusion: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the nine-variant grid; per-seed rows to --out, aggregates beside it.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op; --full adds whole-network checks.
    Gradcheck {
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("metrics");
    out.with_file_name(format!("{stem}_summary.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            ids,
            per_id,
            seed,
            out,
        } => {
            let ds = IdentityDataset::generate(DataConfig {
                num_ids: ids,
                imgs_per_id: per_id,
                seed,
                ..DataConfig::default()
            })?;
            export_dataset(&ds, &out)?;
            println!(
                "wrote {} images of {ids} identities to {}",
                ds.len(),
                out.display()
            );
        }
        Command::Train { config, out, data } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = match data {
                Some(dir) => train_on(&cfg, import_dataset(&dir)?)?,
                None => train(&cfg)?,
            };
            create_dir(&out)?;
            outcome.checkpoint.save(&out.join("checkpoint.amde"))?;
            write(&out.join("train_log.json"), &outcome.log.to_json()?)?;
            cfg.save(&out.join("config.json"))?;
            println!(
                "trained {} epochs, final loss {:.6}, clamp events {}",
                cfg.epochs, outcome.log.final_loss, outcome.log.clamp_events
            );
        }
        Command::Eval {
            checkpoint,
            data,
            occlusion,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = import_dataset(&data)?;
            let rows = evaluate(&ckpt, &ds, &occlusion)?;
            write_csv(&rows, &out)?;
            for r in &rows {
                println!(
                    "s={} rank1={:.4} rank5={:.4} mAP={:.4}",
                    r.s, r.rank1, r.rank5, r.map
                );
            }
        }
        Command::Ablate { config, seeds, out } => {
            let base = TrainConfig::load(&config)?;
            let report = ablate(&base, &ablation_seeds(base.seed, seeds), eval_threads());
            write_csv(&report.rows, &out)?;
            write(&summary_path(&out), &report.summary_csv())?;
            for f in &report.failures {
                eprintln!("cell {} seed {} failed: {}", f.variant, f.seed, f.error);
            }
            print!("{}", report.summary_csv());
        }
        Command::Gradcheck { full, cases } => {
            let mut failed = 0;
            for check in op_suite(cases, 0)? {
                let status = if check.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} {:>3} cases  worst {:.3e}  {status}",
                    check.name, check.cases, check.worst
                );
                failed += usize::from(!check.passed());
            }
            if full {
                let grid = [
                    (LocalBranch::Lstm, MetricLoss::Ann),
                    (LocalBranch::Lstm, MetricLoss::Triplet),
                    (LocalBranch::Lstm, MetricLoss::Contrastive),
                    (LocalBranch::None, MetricLoss::Ann),
                    (LocalBranch::Conv, MetricLoss::Ann),
                    (LocalBranch::Fc, MetricLoss::Ann),
                    (LocalBranch::Rnn, MetricLoss::Ann),
                ];
                for (branch, loss) in grid {
                    let worst = full_pipeline_check(branch, loss, 0)?;
                    let ok = worst < GRAD_TOLERANCE;
                    println!(
                        "full {:<5} {:<20} worst {worst:.3e}  {}",
                        branch.as_str(),
                        serde_json::to_string(&loss)?,
                        if ok { "ok" } else { "FAIL" }
                    );
                    failed += usize::from(!ok);
                }
            }
            if failed > 0 {
                return Err(Error::Contract(format!(
                    "{failed} gradient checks above tolerance {GRAD_TOLERANCE}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
