use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sapl_cli::commands::{
    cmd_cam, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, gradcheck_report, CamMode,
};
use sapl_cli::run_config::RunConfig;

/// Train, evaluate and inspect a spatial-attention classifier on synthetic
/// cross-camera re-identification data.
#[derive(Parser)]
#[command(name = "sapl", version)]
struct Cli {
    /// Flat key-value run configuration (key = value lines, # comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the checkpoint path from the config.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the data directory.
    Gen,
    /// Train on the train split and write a checkpoint plus a loss log.
    Train,
    /// Evaluate a checkpoint under the cross-camera retrieval protocol.
    Eval,
    /// Export a class activation map for one image and stage.
    Cam {
        /// PPM image to analyse.
        #[arg(long)]
        image: PathBuf,
        /// 1-indexed backbone stage (must carry a supervision head).
        #[arg(long)]
        stage: usize,
        /// Class whose activation map to compute.
        #[arg(long)]
        class_id: usize,
        /// gap | sa
        #[arg(long, default_value = "gap")]
        mode: CamMode,
    },
    /// Run the finite-difference gradient suite and report per-layer errors.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), String> {
    let config_path = cli
        .config
        .ok_or_else(|| "--config PATH is required".to_string())?;
    let mut run =
        RunConfig::load(&config_path, cli.seed).map_err(|e| e.to_string())?;
    if let Some(ckpt) = cli.checkpoint {
        run.checkpoint = ckpt;
    }
    if let Some(out) = cli.out {
        match cli.command {
            // for gen, --out picks where the dataset lands
            Command::Gen => run.data_dir = out,
            _ => run.out_dir = out,
        }
    }

    match cli.command {
        Command::Gen => {
            let summary = cmd_gen(&run).map_err(|e| e.to_string())?;
            print!("{}", summary.report());
        }
        Command::Train => {
            let summary = cmd_train(&run).map_err(|e| e.to_string())?;
            print!("{}", summary.report());
        }
        Command::Eval => {
            let result = cmd_eval(&run).map_err(|e| e.to_string())?;
            print!("{}", result.report_block());
        }
        Command::Cam {
            image,
            stage,
            class_id,
            mode,
        } => {
            let outputs =
                cmd_cam(&run, &image, stage, class_id, mode).map_err(|e| e.to_string())?;
            println!("csv = {}", outputs.csv.display());
            println!("pgm = {}", outputs.pgm.display());
            if let Some(att) = outputs.attention_csv {
                println!("attention = {}", att.display());
            }
        }
        Command::Gradcheck => {
            let reports = cmd_gradcheck(&run).map_err(|e| e.to_string())?;
            print!("{}", gradcheck_report(&reports));
            let failing: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name)
                .collect();
            if !failing.is_empty() {
                return Err(format!(
                    "gradient check failed for: {}",
                    failing.join(", ")
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
