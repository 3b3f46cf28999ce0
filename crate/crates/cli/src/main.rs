//! `dtilearn` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dtilearn::TargetKind;

#[derive(Debug, Parser)]
#[command(name = "dtilearn", version, about = "Diffusion tensor maps from few DWIs: fitting, learning, tracking")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a phantom subject: DWIs, gradient table and ground-truth maps.
    Phantom(PhantomArgs),
    /// Generate or validate a gradient scheme.
    #[command(subcommand)]
    Scheme(SchemeCommand),
    /// Fit tensors to DWIs and write tensor, FA, MD and colour maps.
    Fit(FitArgs),
    /// Derive FA, MD and colour maps from a tensor volume.
    Maps(MapsArgs),
    /// Train a network (or the per-voxel baseline) on phantom datasets.
    Train(TrainArgs),
    /// Predict a map from DWIs with a trained checkpoint.
    Infer(InferArgs),
    /// FACT streamline tracking with optional ROI selection.
    Track(TrackArgs),
    /// Score a map against a reference.
    Metrics(MetricsArgs),
    /// Render one axial slice of a map to PNG.
    Render(RenderArgs),
    /// Run a named experiment end to end.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [48, 48, 16])]
    pub dims: Vec<usize>,
    /// Cohort member; geometry is jittered per member.
    #[arg(long, default_value_t = 0, conflicts_with_all = ["spec", "straight"])]
    pub subject: usize,
    /// Phantom description (JSON) instead of a cohort member.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Single straight bundle in isotropic tissue.
    #[arg(long, conflicts_with = "spec")]
    pub straight: bool,
    #[arg(long, default_value_t = 6)]
    pub directions: usize,
    /// Keep only the first N weighted directions.
    #[arg(long)]
    pub use_directions: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub n_b0: usize,
    #[arg(long, default_value_t = 30.0)]
    pub snr_db: f64,
    /// Write the noiseless acquisition.
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Debug, Subcommand)]
pub enum SchemeCommand {
    /// Electrostatic-repulsion directions written as bvals/bvecs.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        directions: usize,
        #[arg(long, default_value_t = 1000.0)]
        b: f64,
        #[arg(long, default_value_t = 1)]
        n_b0: usize,
    },
    /// Check a bvals/bvecs pair and report its conditioning.
    Validate {
        #[arg(long)]
        bvals: PathBuf,
        #[arg(long)]
        bvecs: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct AcquisitionArgs {
    /// DWI volume stem (`<stem>.json` + `<stem>.raw`).
    #[arg(long)]
    pub dwi: PathBuf,
    #[arg(long)]
    pub bvals: PathBuf,
    #[arg(long)]
    pub bvecs: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub acq: AcquisitionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapsArgs {
    /// Tensor volume stem.
    #[arg(long)]
    pub tensor: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Fa,
    Md,
    Colormap,
}

impl From<Target> for TargetKind {
    fn from(t: Target) -> Self {
        match t {
            Target::Fa => TargetKind::Fa,
            Target::Md => TargetKind::Md,
            Target::Colormap => TargetKind::Colormap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Cnn,
    Mlp,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Phantom directories; the last fifth (rounded up) validate.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Target::Fa)]
    pub target: Target,
    #[arg(long, value_enum, default_value_t = Method::Cnn)]
    pub method: Method,
    #[arg(long, default_value_t = dtilearn::experiments::DESK_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = dtilearn::experiments::DESK_WIDTH)]
    pub width: usize,
    /// Train on every slice instead of four spread slices.
    #[arg(long)]
    pub all_slices: bool,
    /// Leave out the mean b0 input channel.
    #[arg(long)]
    pub no_b0: bool,
    /// Output directory (checkpoint, loss curve, summary).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub acq: AcquisitionArgs,
    /// Output volume stem.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Tensor volume stem; directions are its principal eigenvectors.
    #[arg(long, required_unless_present = "color", conflicts_with = "color")]
    pub tensor: Option<PathBuf>,
    /// Colour map stem; directions are recovered from it (needs `--fa`).
    #[arg(long, requires = "fa")]
    pub color: Option<PathBuf>,
    /// FA map stem (defaults to the tensor's FA).
    #[arg(long)]
    pub fa: Option<PathBuf>,
    /// Label volume stem for ROI selection.
    #[arg(long, requires = "roi_label")]
    pub roi: Option<PathBuf>,
    #[arg(long)]
    pub roi_label: Option<u32>,
    #[arg(long, default_value_t = dtilearn::tractography::FA_THRESHOLD)]
    pub fa_threshold: f64,
    #[arg(long, default_value_t = dtilearn::tractography::ANGLE_THRESHOLD_DEG)]
    pub angle: f64,
    /// Binary streamline file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a text export.
    #[arg(long)]
    pub text: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Label volume; its nonzero voxels form the evaluation mask and each
    /// label gets region statistics. Without it the reference mask is used.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "map")]
    pub method: String,
    #[arg(long, default_value_t = 0)]
    pub n_dwi: usize,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub slice: usize,
    /// Display window `lo,hi` (default [0,1] for FA, [0, max] otherwise).
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<f64>>,
    /// Render |map − reference| instead of the map.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Recipe {
    /// FA from 6 noisy DWIs: cnn and mlp against mf.
    Noise,
    /// One DWI moved by 1 pixel and 1 degree.
    Motion,
    /// FA-reducing lesion unseen during training.
    Lesion,
    /// Training-set size sweep.
    Sweep,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    #[arg(value_enum)]
    pub recipe: Recipe,
    #[arg(long, default_value = "repro-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = dtilearn::experiments::DESK_EPOCHS)]
    pub epochs: usize,
    /// Trained FA checkpoint for `motion` and `lesion` (trained if absent).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training sizes of `sweep`.
    #[arg(long, value_delimiter = ',', default_values_t = dtilearn::experiments::SWEEP_SIZES)]
    pub sizes: Vec<usize>,
    /// Skip the per-voxel baseline in `noise`.
    #[arg(long)]
    pub no_mlp: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
