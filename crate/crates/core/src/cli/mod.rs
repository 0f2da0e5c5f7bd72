//! Command-line front end. Every command writes its report to the given
//! sinks, so the binary and the tests drive the same code.

mod gradcheck;
mod run;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Precision;
use crate::data::{load_labels, save_cube, sibling};
use crate::error::{Error, Result};
use crate::model::{GsfPosition, ModelConfig};
use crate::synth::{synthetic_scene, SynthSpec};

pub use gradcheck::{cmd_gradcheck, relu_margin, GradcheckReport, KINK_MARGIN, TOLERANCE};
pub use run::{cmd_evaluate, cmd_map, cmd_train};

#[derive(Debug, Parser)]
#[command(
    name = "hsigsf",
    version,
    about = "Hyperspectral patch classification with a gate-shift-fuse transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print dimensions and per-class label counts of a dataset.
    Inspect(InspectArgs),
    /// Fit PCA, train on a stratified split and evaluate on the rest.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint on the test fold of its split.
    Evaluate(EvaluateArgs),
    /// Render a color-coded classification (or ground-truth) map as PPM.
    Map(MapArgs),
    /// Compare analytic and finite-difference gradients at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset with shifted Gaussian class signatures.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ConfigPreset {
    /// 13x13 patches, 30 components, 8/64 kernels, 4 tokens, 4 heads.
    #[default]
    Default,
    /// 7x7 patches, 5 components, 2/4 kernels, 2 tokens, 2 heads.
    Tiny,
}

impl ConfigPreset {
    pub fn model(self, num_classes: usize) -> ModelConfig {
        match self {
            Self::Default => ModelConfig::standard(num_classes),
            Self::Tiny => ModelConfig::tiny(num_classes),
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Dataset JSON header.
    #[arg(long)]
    pub data: PathBuf,
}

/// Architecture flags. Unset values come from `--config`.
#[derive(Clone, Debug, Default, Args)]
pub struct ModelArgs {
    /// Size preset the flags below override.
    #[arg(long, value_enum, default_value_t = ConfigPreset::Default)]
    pub config: ConfigPreset,
    /// Principal components kept [default: 30].
    #[arg(long)]
    pub pca_bands: Option<usize>,
    /// Odd patch side [default: 13].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Semantic tokens [default: 4].
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Encoder layers [default: 1].
    #[arg(long)]
    pub te_depth: Option<usize>,
    /// 3-D convolution kernels [default: 8].
    #[arg(long)]
    pub conv3d_out: Option<usize>,
    /// 2-D convolution kernels [default: 64].
    #[arg(long)]
    pub conv2d_out: Option<usize>,
    /// Encoder MLP hidden width [default: 256].
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Where the gate-shift-fuse block is applied.
    #[arg(long, value_enum)]
    pub gsf_position: Option<GsfPosition>,
    /// Drop the gate-shift-fuse block.
    #[arg(long)]
    pub no_gsf: bool,
    /// Drop the 2-D convolution.
    #[arg(long)]
    pub no_conv2d: bool,
    /// Drop the 3-D convolution.
    #[arg(long)]
    pub no_conv3d: bool,
    /// Drop tokenizer and transformer encoder (global average pooling).
    #[arg(long)]
    pub no_te: bool,
}

impl ModelArgs {
    pub fn resolve(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut c = self.config.model(num_classes);
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.pca_bands, self.pca_bands);
        set(&mut c.patch_size, self.patch_size);
        set(&mut c.tokens, self.tokens);
        set(&mut c.heads, self.heads);
        set(&mut c.te_depth, self.te_depth);
        set(&mut c.conv3d_out, self.conv3d_out);
        set(&mut c.conv2d_out, self.conv2d_out);
        set(&mut c.mlp_hidden, self.mlp_hidden);
        if let Some(p) = self.gsf_position {
            c.gsf_position = p;
        }
        c.gsf_enabled = !self.no_gsf;
        c.conv2d_enabled = !self.no_conv2d;
        c.conv3d_enabled = !self.no_conv3d;
        c.te_enabled = !self.no_te;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset JSON header.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.ckpt and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Per-class training fraction [default: 0.1].
    #[arg(long, conflicts_with = "train_count")]
    pub train_fraction: Option<f64>,
    /// Per-class training sample count.
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Seed for initialisation, shuffling and (unless --split-seed) the split.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Seed of the train/test split [default: --seed].
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Cosine-anneal the learning rate.
    #[arg(long)]
    pub cosine: bool,
    /// Suppress per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset JSON header.
    #[arg(long)]
    pub data: PathBuf,
    /// Split seed [default: the one stored in the checkpoint].
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// Required unless --truth is given.
    #[arg(long, required_unless_present = "truth")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset JSON header.
    #[arg(long)]
    pub data: PathBuf,
    /// Output PPM image.
    #[arg(long)]
    pub out: PathBuf,
    /// Classify every pixel, not only labeled ones.
    #[arg(long)]
    pub full: bool,
    /// Render the ground-truth labels instead of predictions.
    #[arg(long)]
    pub truth: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ConfigPreset::Tiny)]
    pub config: ConfigPreset,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Coordinates sampled per tensor [default: all for tiny, 6 otherwise].
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Negative control: run the analytic pass with wrong backward rules.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// File stem for <stem>.json, <stem>.bsq and <stem>.labels.
    #[arg(long, default_value = "synth")]
    pub stem: String,
    #[arg(long, default_value_t = 24)]
    pub width: usize,
    #[arg(long, default_value_t = 24)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Side of the single-class tiles.
    #[arg(long, default_value_t = 4)]
    pub block: usize,
    /// Band offset between class peaks.
    #[arg(long, default_value_t = 2.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 2.0)]
    pub peak_width: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Share of pixels left unlabeled.
    #[arg(long, default_value_t = 0.0)]
    pub unlabeled: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Runs one command; `Ok(false)` means the command ran but reports a
/// failure (gradient check above tolerance).
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Inspect(a) => cmd_inspect(&a.data, out).map(|_| true),
        Command::Train(a) => cmd_train(&a, out, err).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(&a, out).map(|_| true),
        Command::Map(a) => cmd_map(&a, out).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out).map(|r| r.passed()),
        Command::Synth(a) => cmd_synth(&a, out).map(|_| true),
    }
}

pub(crate) fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

pub fn cmd_inspect(header_path: &Path, out: &mut dyn Write) -> Result<Vec<usize>> {
    let (header, labels) = load_labels(header_path)?;
    let data_path = sibling(header_path, &header.data_file);
    let size = fs::metadata(&data_path)
        .map_err(|e| Error::io(&data_path, e))?
        .len();
    let expected = (header.width * header.height * header.bands * 4) as u64;
    if size != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes from the header, found {size}",
            data_path.display()
        )));
    }
    let counts = labels.class_counts();
    let labeled: usize = counts.iter().sum();
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err);
    w(
        out,
        format!(
            "{}×{}×{}, {} classes",
            header.width, header.height, header.bands, header.num_classes
        ),
    )?;
    w(
        out,
        format!(
            "labeled pixels: {labeled} of {}",
            header.width * header.height
        ),
    )?;
    for (k, n) in counts.iter().enumerate() {
        w(
            out,
            format!("C{:<3} {:<24} {n}", k + 1, labels.class_name(k + 1)),
        )?;
    }
    Ok(counts)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let spec = SynthSpec {
        width: args.width,
        height: args.height,
        bands: args.bands,
        classes: args.classes,
        block: args.block,
        shift: args.shift,
        peak_width: args.peak_width,
        noise: args.noise,
        unlabeled: args.unlabeled,
        seed: args.seed,
    };
    let (cube, labels) = synthetic_scene(&spec)?;
    let path = save_cube(&args.out, &args.stem, &cube, &labels)?;
    writeln!(out, "{}", path.display()).map_err(io_err)?;
    Ok(path)
}
