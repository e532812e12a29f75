//! `dil`: train, evaluate and inspect the inpainting models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dil::gradcam::{CamLayer, CamTarget};
use dil::masking::{MaskKind, Range};
use dil::models::ModelKind;

use crate::config::{Settings, SplitName};

#[derive(Parser, Debug)]
#[command(name = "dil", version, about = "Depth-guided image inpainting lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing history.csv and best.bin under --out.
    Train(Flags),
    /// Evaluate a checkpoint and write the metric report under --out.
    Eval(Flags),
    /// Write masked inputs and reconstructions as PNGs under --out.
    Inpaint(Flags),
    /// Write Grad-CAM overlays under --out.
    Gradcam(Flags),
    /// Write one mask as a grayscale PNG to --out.
    MaskPreview(Flags),
    /// Validate a dataset directory.
    DatasetCheck(Flags),
    /// Write a synthetic RGB-D dataset to --out.
    Synth(Flags),
}

/// Flags shared by every command. Unset flags fall back to the config file,
/// then to built-in defaults.
#[derive(Args, Debug, Default)]
struct Flags {
    /// Dataset root holding manifest.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Mask kind: line or square.
    #[arg(long, visible_alias = "kind")]
    mask: Option<MaskKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Worker threads for per-sample work (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (a file path for mask-preview).
    #[arg(long)]
    out: Option<PathBuf>,
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Samples to work on: train, val, test or all.
    #[arg(long)]
    split: Option<SplitName>,
    /// Mask index for mask-preview.
    #[arg(long)]
    index: Option<u64>,
    /// Sample count for synth.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    line_count: Option<Range>,
    #[arg(long)]
    line_thickness: Option<Range>,
    #[arg(long)]
    square_count: Option<Range>,
    #[arg(long)]
    square_side: Option<Range>,
    /// Grad-CAM target: mse or mean.
    #[arg(long)]
    cam_target: Option<CamTarget>,
    /// Grad-CAM layer: decoder-input, rgb-bottleneck or depth-bottleneck.
    #[arg(long)]
    cam_layer: Option<CamLayer>,
    /// Baseline checkpoint whose encoder provides LPIPS features.
    #[arg(long)]
    lpips_checkpoint: Option<PathBuf>,
}

impl Flags {
    fn resolve(self) -> dil::Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { s.$field = v; })*
            };
        }
        overlay!(
            model, mask, seed, lr, weight_decay, epochs, batch, jobs, out, height, width, split, index,
            count, line_count, line_thickness, square_count, square_side, cam_target, cam_layer
        );
        macro_rules! overlay_opt {
            ($($field:ident),*) => {
                $(if self.$field.is_some() { s.$field = self.$field; })*
            };
        }
        overlay_opt!(data, checkpoint, max_steps, lpips_checkpoint);
        Ok(s)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIL_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(1)
        }
    }
}
