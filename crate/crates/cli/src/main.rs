use std::path::PathBuf;
use std::process::ExitCode;

use bifnet::bev::BevGeometry;
use bifnet::dst::{ArrangementConfig, GeometryConfig, NeighborhoodConfig};
use bifnet::training::{Corruption, FusionMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Camera / LiDAR bird's-eye-view fusion tools.
///
/// Inputs follow the KITTI road layout (velodyne/, calib/, image_2/,
/// gt_image_2/). Every output goes under the directory given by --out.
#[derive(Parser, Debug)]
#[command(name = "bifnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for frame-level parallelism.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize each frame's point cloud into BEV feature channels.
    Rasterize(FrameArgs),
    /// Dense perspective and BEV height maps per frame.
    Heightmap(FrameArgs),
    /// Camera-to-BEV and BEV-to-camera warp tables per frame.
    Warp(FrameArgs),
    /// Run one frame through geometry and a seeded fusion block, dumping every stage.
    FuseDemo(FuseDemoArgs),
    /// Train the micro network on seeded synthetic scenes.
    TrainToy(TrainArgs),
    /// Score probability maps against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
    /// Write seeded synthetic frames in the KITTI layout.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GeometryArgs {
    /// Forward extent start (m).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    x_max: f64,
    /// Lateral extent start (m).
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    y_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    y_max: f64,
    /// BEV cell size (m).
    #[arg(long, default_value_t = 0.5)]
    resolution: f64,
    /// Arrangement-map azimuth step (degrees).
    #[arg(long, default_value_t = 0.1)]
    azimuth_res: f64,
    /// Arrangement-map elevation step (degrees).
    #[arg(long, default_value_t = 0.42)]
    elevation_res: f64,
}

impl GeometryArgs {
    pub fn config(&self) -> bifnet::Result<GeometryConfig> {
        let bev = BevGeometry::new(self.x_min, self.x_max, self.y_min, self.y_max, self.resolution)?;
        let arrangement = ArrangementConfig {
            azimuth_res: self.azimuth_res.to_radians(),
            elevation_res: self.elevation_res.to_radians(),
        };
        Ok(GeometryConfig {
            bev,
            neighborhood: NeighborhoodConfig::default(),
            arrangement,
        })
    }
}

#[derive(Args, Debug)]
pub struct FrameArgs {
    /// KITTI road directory.
    #[arg(long)]
    root: PathBuf,
    /// Comma-separated frame ids; all frames under --root when omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(Args, Debug)]
pub struct FuseDemoArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    frame: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature channels of the demo network.
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorruptArg {
    None,
    Dark,
    Blind,
}

impl From<CorruptArg> for Corruption {
    fn from(c: CorruptArg) -> Self {
        match c {
            CorruptArg::None => Corruption::None,
            CorruptArg::Dark => Corruption::Dark,
            CorruptArg::Blind => Corruption::Blind,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    ImageOnly,
    Add,
    Cbf,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ImageOnly => FusionMode::ImageOnly,
            ModeArg::Add => FusionMode::Add,
            ModeArg::Cbf => FusionMode::Cbf,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Seeds network initialization and sample order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Focal loss positive weight.
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    /// Focal loss focusing exponent.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Image-loss weight relative to the BEV loss.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Camera corruption applied to the training scenes.
    #[arg(long, value_enum, default_value_t = CorruptArg::None)]
    corrupt: CorruptArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Cbf)]
    mode: ModeArg,
    /// Number of synthetic scenes (scene seeds 0..N).
    #[arg(long, default_value_t = 8)]
    scenes: u64,
    /// Checkpoint path; the CSV log is written next to it with a .csv extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SpaceArg {
    /// Warp scores and labels into the BEV grid before scoring.
    Bev,
    /// Score in the camera image.
    Perspective,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// KITTI road directory holding ground truth, clouds and calibration.
    #[arg(long)]
    root: PathBuf,
    /// Directory of gray probability maps named `<id>.png` or `<cat>_road_<num>.png`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_delimiter = ',')]
    frames: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SpaceArg::Bev)]
    space: SpaceArg,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = bifnet::gradsuite::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = bifnet::gradsuite::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    /// 128x48 camera matched to the micro network.
    Toy,
    /// 1242x375 camera with KITTI-like intrinsics.
    Kitti,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    /// First scene seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
    preset: PresetArg,
    #[arg(long, value_enum, default_value_t = CorruptArg::None)]
    corrupt: CorruptArg,
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

pub enum Failure {
    Usage(String),
    Numeric(String),
    Lib(bifnet::Error),
}

impl From<bifnet::Error> for Failure {
    fn from(e: bifnet::Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Rasterize(a) => commands::rasterize(a),
        Command::Heightmap(a) => commands::heightmap(a),
        Command::Warp(a) => commands::warp(a),
        Command::FuseDemo(a) => commands::fuse_demo(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::MakeSynthetic(a) => commands::make_synthetic(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            let code = if e.is_numeric() {
                EXIT_NUMERIC
            } else if matches!(e.root(), bifnet::Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_IO
            };
            ExitCode::from(code)
        }
    }
}
