use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use taskcomm::experiments::{detect_run, emit_plot_data, run_experiment, ExperimentConfig, Mode};
use taskcomm::Error;

/// Train and evaluate task-oriented encoders over a simulated AWGN link.
#[derive(Parser)]
#[command(name = "taskcomm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full grid and write both metric tables.
    Run {
        config: PathBuf,
        /// Run directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent-size sweep at the first training PSNR; writes rd.csv.
    SweepRd {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/test PSNR grid at the first latent size; writes psnr.csv.
    SweepPsnr {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG figures from a finished run directory.
    Plot { run_dir: PathBuf },
    /// Score an IDX image file with every checkpoint of a run.
    Detect {
        run_dir: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        /// Fraction of in-distribution test samples the threshold keeps.
        #[arg(long)]
        tpr: Option<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Missing { .. } => 2,
        _ => 3,
    }
}

fn sweep(config: &Path, out: Option<PathBuf>, mode: Mode) -> taskcomm::Result<()> {
    let (cfg, text) = ExperimentConfig::load(config)?;
    let out = out.unwrap_or_else(|| cfg.default_output_dir());
    let summary = run_experiment(&cfg, &text, &out, mode)?;
    for r in &summary.rd {
        println!(
            "{} k={} latency={}ms acc={:.4}",
            r.method, r.latent_dim, r.latency_ms, r.test_accuracy
        );
    }
    for r in &summary.psnr {
        let auroc = r.auroc.map(|a| format!(" auroc={a:.4}")).unwrap_or_default();
        println!(
            "{} k={} train={}dB test={}dB acc={:.4}{auroc}",
            r.method, r.latent_dim, r.train_psnr, r.test_psnr, r.test_accuracy
        );
    }
    println!("results in {}", summary.run_dir.display());
    Ok(())
}

fn run(cli: Cli) -> taskcomm::Result<()> {
    match cli.command {
        Command::Run { config, out } => sweep(&config, out, Mode::Full),
        Command::SweepRd { config, out } => sweep(&config, out, Mode::RateDistortion),
        Command::SweepPsnr { config, out } => sweep(&config, out, Mode::Psnr),
        Command::Plot { run_dir } => {
            for p in emit_plot_data(&run_dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Detect { run_dir, ood, tpr } => {
            if !ood.is_file() {
                let dir = ood.parent().map(Path::to_path_buf).unwrap_or_default();
                let name = ood
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                return Err(Error::Missing { dir, files: vec![name] });
            }
            for r in detect_run(&run_dir, &ood, tpr)? {
                println!(
                    "{}: auroc={:.4} threshold={:.4} flagged={:.4} scores={}",
                    r.point,
                    r.auroc,
                    r.threshold,
                    r.flagged_fraction,
                    r.scores_csv.display()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
