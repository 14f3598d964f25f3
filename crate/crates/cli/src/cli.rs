use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssae_core::style_edit::MaskSource;
use ssae_core::RoiLabel;

#[derive(Debug, Parser)]
#[command(name = "ssae", version, about = "Localized, mask-guided style editing of face images")]
pub struct Cli {
    /// TOML configuration file; built-in defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled face dataset.
    Synth(SynthArgs),
    /// Train the mask predictor for one ROI.
    TrainSmpn(TrainSmpnArgs),
    /// Train the structure/texture autoencoder.
    TrainSae(TrainSaeArgs),
    /// Train the refinement block for one ROI against a frozen autoencoder.
    TrainRb(TrainRbArgs),
    /// Assemble checkpoints into a bundle manifest.
    InitBundle(InitBundleArgs),
    /// Apply one localized style edit to an image.
    Edit(EditArgs),
    /// Encode and decode an image without editing it.
    Reconstruct(ReconstructArgs),
    /// Predict the five ROI masks of an image.
    Masks(MasksArgs),
    /// Score edits on a dataset split and write report tables.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskSourceArg {
    Predicted,
    GroundTruth,
    UserSupplied,
}

impl From<MaskSourceArg> for MaskSource {
    fn from(v: MaskSourceArg) -> Self {
        match v {
            MaskSourceArg::Predicted => MaskSource::Predicted,
            MaskSourceArg::GroundTruth => MaskSource::GroundTruth,
            MaskSourceArg::UserSupplied => MaskSource::UserSupplied,
        }
    }
}

#[derive(Debug, Args)]
pub struct BundleArg {
    /// Bundle manifest.
    #[arg(long, env = "SSAE_BUNDLE")]
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub train: usize,
    #[arg(long, default_value_t = 8)]
    pub test: usize,
    /// Image side; defaults to the configured image size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainSmpnArgs {
    #[arg(long)]
    pub roi: RoiLabel,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainSaeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// micro, toy or full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from a checkpoint manifest, optimizer state included.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRbArgs {
    #[arg(long)]
    pub roi: RoiLabel,
    /// Autoencoder checkpoint manifest.
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitBundleArgs {
    /// Bundle manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Autoencoder checkpoint manifest.
    #[arg(long)]
    pub sae: PathBuf,
    /// `ROI=PATH` mask predictor checkpoints.
    #[arg(long = "smpn", value_parser = parse_roi_path)]
    pub smpn: Vec<(RoiLabel, PathBuf)>,
    /// `ROI=PATH` refinement block checkpoints.
    #[arg(long = "rb", value_parser = parse_roi_path)]
    pub rb: Vec<(RoiLabel, PathBuf)>,
    /// Also pick up `smpn_<roi>.json` and `rb_<roi>.json` found here.
    #[arg(long)]
    pub scan: Option<PathBuf>,
}

fn parse_roi_path(s: &str) -> Result<(RoiLabel, PathBuf), String> {
    let (roi, path) = s.split_once('=').ok_or_else(|| format!("expected ROI=PATH, got {s:?}"))?;
    Ok((roi.parse().map_err(|e: ssae_core::Error| e.to_string())?, PathBuf::from(path)))
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    /// Input PNG at the bundle's image size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub roi: RoiLabel,
    /// Noise seed; drawn at random (and recorded) when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub refine: bool,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Grayscale PNG mask to use instead of the predicted one.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mask_source: Option<MaskSourceArg>,
    /// Decoder layer receiving the noise.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Also write every intermediate image and the mask into this directory.
    #[arg(long)]
    pub chain_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset split; defaults to the configured evaluation split.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub refine: bool,
    #[arg(long, value_enum, default_value = "ground-truth")]
    pub mask_source: MaskSourceArg,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
}
