//! Command-line front end: one binary, one pipeline stage per subcommand.

mod commands;
mod config;
mod gradcheck;

pub use config::PipelineConfig;
pub use gradcheck::{run_suite, OpCheck};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

#[derive(Parser)]
#[command(
    name = "neurocell",
    about = "Two-channel calcium-imaging cell identification: segmentation, patch extraction and classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the matching config
/// file field (precedence: flag > file > default).
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all derived randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Force single-threaded, bitwise-reproducible execution
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Foreground threshold on the probability map
    #[arg(long)]
    tau: Option<f64>,
    /// Patch crop edge (odd)
    #[arg(long)]
    patch_size: Option<usize>,
    /// Patch edge after resampling
    #[arg(long)]
    target_size: Option<usize>,
    /// Smallest component kept, in pixels
    #[arg(long)]
    min_component_size: Option<usize>,
    /// Dataset amplification factor for training patches
    #[arg(long)]
    amplify: Option<usize>,
    /// Apply elastic deformation during segmentation training
    #[arg(long)]
    elastic: bool,
    /// Output tile edge for overlap-tile inference
    #[arg(long)]
    tile: Option<usize>,
    /// Classifier family: residual | inception
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    unet_depth: Option<usize>,
    #[arg(long)]
    unet_base: Option<usize>,
    #[arg(long)]
    cls_base: Option<usize>,
    /// Index into the network's legal freeze points (0 = train all)
    #[arg(long)]
    freeze_ordinal: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_folds: Option<usize>,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    n_cells: Option<usize>,
    #[arg(long)]
    scene_height: Option<usize>,
    #[arg(long)]
    scene_width: Option<usize>,
    #[arg(long)]
    radius_min: Option<f64>,
    #[arg(long)]
    radius_max: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes, ground truth and labeled patches
    Synth(Overrides),
    /// Train the segmentation U-Net on the scenes on disk
    TrainSeg(Overrides),
    /// Write probability maps for every scene pair
    Segment(Overrides),
    /// Threshold probability maps and crop per-component patches
    Extract(Overrides),
    /// Train the cell classifier on the labeled patch set
    TrainCls(Overrides),
    /// Run the full pipeline on every scene pair and emit cell records
    Classify(Overrides),
    /// Cross-validate the classifier and write table-style reports
    Evaluate(Overrides),
    /// Verify analytic gradients against finite differences
    Gradcheck(Overrides),
}

impl Overrides {
    fn resolve(&self) -> crate::error::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),+ $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })+
            };
        }
        take!(
            seed, data_dir, model_dir, report_dir, tau, patch_size, target_size,
            min_component_size, amplify, tile, family, unet_depth, unet_base, cls_base,
            freeze_ordinal, epochs, iters_per_epoch, batch, lr, k_folds, n_scenes, n_cells,
            scene_height, scene_width, radius_min, radius_max,
        );
        if self.elastic {
            cfg.elastic = true;
        }
        // single-threaded execution is the only mode implemented, so
        // --deterministic is accepted and always satisfied
        let _ = self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Contract(_) | Error::Dimension(_) => 3,
        _ => 2,
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let (overrides, cmd): (&Overrides, fn(&PipelineConfig) -> crate::error::Result<()>) =
        match &cli.command {
            Command::Synth(o) => (o, commands::synth),
            Command::TrainSeg(o) => (o, commands::train_seg),
            Command::Segment(o) => (o, commands::segment),
            Command::Extract(o) => (o, commands::extract),
            Command::TrainCls(o) => (o, commands::train_cls),
            Command::Classify(o) => (o, commands::classify),
            Command::Evaluate(o) => (o, commands::evaluate),
            Command::Gradcheck(o) => (o, commands::gradcheck),
        };
    let cfg = match overrides.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("neurocell: {e}");
            return 2;
        }
    };
    match cmd(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("neurocell: {e}");
            exit_code(&e)
        }
    }
}
