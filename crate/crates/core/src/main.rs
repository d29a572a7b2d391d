use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mmsc::config::PipelineConfig;
use mmsc::data::Magnification;
use mmsc::pipeline;
use mmsc::Error;

#[derive(Parser)]
#[command(name = "mmsc", version, about = "Multi-scale mammography patch classification, heatmaps and saliency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap; 1 gives bit-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use the heatmap variant fed by the aggregated tissue grid.
    #[arg(long, global = true)]
    aux: bool,
    /// Restrict to one magnification (0.5, 0.33 or 0.25).
    #[arg(long, global = true)]
    scale: Option<Magnification>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cases, masks and the case table.
    Synth {
        /// Number of cases; defaults to synth_count from the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Crop, rescale and sample tissue patches into a manifest.
    Patches,
    /// Train one tissue classifier per scale.
    TrainTissue,
    /// Score tissue classifiers on the test split.
    EvalTissue,
    /// Train the heatmap regressor.
    TrainHeatmap,
    /// Predict heatmaps (and aggregation grids with --aux) for test scans.
    Infer,
    /// Build heatmap-gated saliency images for test scans.
    Saliency,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let config = match PipelineConfig::load(path) {
        Err(Error::MissingArtifact(p)) => {
            return Err(Error::Config(format!("config file {} not found", p.display())))
        }
        other => other?,
    };
    let scales = match cli.scale {
        Some(s) => vec![s],
        None => config.scales.clone(),
    };
    match cli.command {
        Command::Synth { count } => pipeline::cmd_synth(&config, count),
        Command::Patches => pipeline::cmd_patches(&config),
        Command::TrainTissue => scales.iter().try_for_each(|&s| pipeline::cmd_train_tissue(&config, s)),
        Command::EvalTissue => scales.iter().try_for_each(|&s| pipeline::cmd_eval_tissue(&config, s)),
        Command::TrainHeatmap => pipeline::cmd_train_heatmap(&config, cli.aux),
        Command::Infer => pipeline::cmd_infer(&config, cli.aux),
        Command::Saliency => pipeline::cmd_saliency(&config, cli.aux, cli.scale.unwrap_or(config.saliency_scale)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMSC_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            error!("--threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("{e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
