mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use sfkit::camera::Interpolation;
use sfkit::optim::{ScaleStrategy, DEFAULT_MU_WEIGHT};
use sfkit::recipe::{ReferenceFrame, DEFAULT_ALPHA1, DEFAULT_ALPHA2};
use sfkit::tensors::SfKind;

/// Exit status for unknown commands and malformed flags.
pub const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "sfkit", version, about = "Scene-flow geometry toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Scale strategy for losses (default: xor; losscheck audits all four when unset).
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Reference frame of scene flow written by `uplift`.
    #[arg(long, global = true, value_enum, default_value_t = FrameArg::Camera2)]
    pub frame: FrameArg,
    #[arg(long, global = true, default_value_t = DEFAULT_ALPHA1)]
    pub alpha1: f64,
    #[arg(long, global = true, default_value_t = DEFAULT_ALPHA2)]
    pub alpha2: f64,
    #[arg(long = "mu-weight", global = true, default_value_t = DEFAULT_MU_WEIGHT)]
    pub mu_weight: f64,
    #[arg(long, global = true, value_enum, default_value_t = InterpArg::Bilinear)]
    pub interp: InterpArg,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Aggregate metrics over pixels instead of averaging per-sample means.
    #[arg(long = "pixel-pooled", global = true)]
    pub pixel_pooled: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic scenes into sample directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Fronto-parallel plane with a whole-pixel camera shift.
        #[arg(long = "integer-flow")]
        integer_flow: bool,
        /// Render this scene description instead of random scenes.
        #[arg(long, conflicts_with_all = ["count", "integer_flow"])]
        scene: Option<PathBuf>,
    },
    /// Add scene flow, its mask and pointmaps to sample directories.
    Uplift { input: PathBuf },
    /// Rewrite stored scene flow in another parameterization.
    Convert {
        input: PathBuf,
        #[arg(long, value_enum)]
        to: KindArg,
    },
    /// Evaluate a predictor against stored scene flow.
    Eval {
        input: PathBuf,
        /// `oracle`, `dof`, or a directory holding `<sample>/{x1,x2,sf}.f32`.
        #[arg(long, default_value = "oracle")]
        predictor: String,
        /// Scale predictions by the median pointmap ratio before scene-flow metrics.
        #[arg(long = "align-sf")]
        align_sf: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit free pointmaps and scene flow to one sample from a noisy start.
    Fit {
        input: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long = "step-size", default_value_t = 0.01)]
        step_size: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference audit of the loss subgradient on a synthetic sample.
    Losscheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Align,
    Always,
    Never,
    Xor,
}

impl From<StrategyArg> for ScaleStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Align => ScaleStrategy::Align,
            StrategyArg::Always => ScaleStrategy::Always,
            StrategyArg::Never => ScaleStrategy::Never,
            StrategyArg::Xor => ScaleStrategy::Xor,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FrameArg {
    Camera1,
    Camera2,
    World,
}

impl From<FrameArg> for ReferenceFrame {
    fn from(f: FrameArg) -> Self {
        match f {
            FrameArg::Camera1 => ReferenceFrame::Camera1,
            FrameArg::Camera2 => ReferenceFrame::Camera2,
            FrameArg::World => ReferenceFrame::World,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InterpArg {
    Bilinear,
    Nearest,
}

impl From<InterpArg> for Interpolation {
    fn from(i: InterpArg) -> Self {
        match i {
            InterpArg::Bilinear => Interpolation::Bilinear,
            InterpArg::Nearest => Interpolation::Nearest,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Cso,
    Ddof,
    Ep,
}

impl From<KindArg> for SfKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Cso => SfKind::Cso,
            KindArg::Ddof => SfKind::Ddof,
            KindArg::Ep => SfKind::Ep,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(&cli) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
