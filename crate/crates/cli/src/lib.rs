//! `rstab` subcommands: synthesize fixtures, train the density head,
//! stabilize a clip, evaluate results and check gradients.
//!
//! Every command is a plain function so tests can drive it without a
//! subprocess; `main` only parses arguments and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use rstab_core::data::io::{self, Manifest};
use rstab_core::data::{synth_scene, Dataset, Preset, Scene, SceneSpec};
use rstab_core::density::{gradcheck, train, DensityHead, DensityModel, GradcheckReport, TrainConfig, HIDDEN};
use rstab_core::metrics;
use rstab_core::rayrange::{SplatMode, SpreadFloor};
use rstab_core::renderer::{stabilize, RenderConfig, SourceFrames, StabilizeConfig, StabilizeReport, TrainingPool};
use rstab_core::{Error, Grid, Pose, Result};

pub mod report;

pub use report::{EvalReport, RunReport};

/// Gradcheck passes below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "rstab", version, about = "Full-frame video stabilization by multi-frame volume rendering")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RSTAB_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic clip with exact depth, flow and poses.
    Synth(SynthArgs),
    /// Fit the density head on a clip.
    Train(TrainArgs),
    /// Smooth the camera path and re-render every frame along it.
    Stabilize(StabilizeArgs),
    /// Cropping, distortion, stability (and PSNR when the scene is known) of a result.
    Eval(EvalArgs),
    /// Compare analytic density-head gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "static")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Scene description (TOML); overrides --preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the frame count.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PresetArg {
    Static,
    Dynamic,
    Parallax,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Static => Preset::Static,
            PresetArg::Dynamic => Preset::Dynamic,
            PresetArg::Parallax => Preset::Parallax,
        }
    }
}

/// Where a command gets its clip from.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Dataset directory (as written by `synth`).
    pub data: Option<PathBuf>,
    /// Synthesize this preset in memory instead of reading a directory.
    #[arg(long, value_enum, conflicts_with = "data")]
    pub preset: Option<PresetArg>,
    /// Seed of the synthesized preset.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl InputArgs {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.data, self.preset) {
            (Some(dir), _) => io::load_dataset(dir),
            (None, Some(p)) => synth_scene(&SceneSpec::preset(p.into(), self.seed)),
            (None, None) => Err(Error::Config("give a dataset directory or --preset".into())),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Frames fused per output frame.
    #[arg(long, default_value_t = 13)]
    pub window: usize,
    /// Samples per ray.
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    /// Temporal weight decay.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Use exp(lambda (t - T)) temporal weights instead of exp(-lambda |t - T|).
    #[arg(long)]
    pub literal_weights: bool,
    /// Feature-affinity sharpness of the color blend.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Minimum ray-range half-width as a fraction of the mean depth.
    #[arg(long, default_value_t = 0.02)]
    pub smin: f64,
    /// Pixels whose accumulated weight is at or below this are background.
    #[arg(long, default_value_t = 1e-3)]
    pub eps_w: f64,
    /// Resolve splat collisions with a soft z-buffer of this sharpness (1/m).
    #[arg(long)]
    pub soft_z: Option<f64>,
    /// Sample 128 depths evenly over the clip's depth range instead of per-pixel ranges.
    #[arg(long)]
    pub no_arr: bool,
    /// Read colors at geometric projections instead of flow-corrected positions.
    #[arg(long)]
    pub no_cc: bool,
    /// Average the window frames warped at the mean depth; no volume rendering.
    #[arg(long)]
    pub blend_only: bool,
}

impl RenderArgs {
    pub fn to_config(&self) -> RenderConfig {
        RenderConfig {
            window: self.window,
            samples: self.samples,
            lambda: self.lambda,
            literal_weights: self.literal_weights,
            gamma: self.gamma,
            floor: SpreadFloor::Relative(self.smin),
            eps_w: self.eps_w,
            splat: self.soft_z.map_or(SplatMode::Average, |beta| SplatMode::SoftZ { beta }),
            no_arr: self.no_arr,
            no_cc: self.no_cc,
            blend_only: self.blend_only,
            ..RenderConfig::default()
        }
    }
}

impl Default for RenderArgs {
    fn default() -> Self {
        Self {
            window: 13,
            samples: 3,
            lambda: 0.5,
            literal_weights: false,
            gamma: 1.0,
            smin: 0.02,
            eps_w: 1e-3,
            soft_z: None,
            no_arr: false,
            no_cc: false,
            blend_only: false,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct StabilizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub render: RenderArgs,
    /// Gaussian sigma of the camera path smoother, in frames.
    #[arg(long, default_value_t = 4.0)]
    pub sigma_smooth: f64,
    /// Smoother support in frames (odd).
    #[arg(long, default_value_t = 21)]
    pub smooth_window: usize,
    /// `analytic` or a head file written by `train`.
    #[arg(long, default_value = "analytic")]
    pub head: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub render: RenderArgs,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Rays per iteration.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Seed of the head initialization and ray sampling.
    #[arg(long = "train-seed", default_value_t = 0)]
    pub train_seed: u64,
    /// Output head file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Input dataset directory.
    pub input: PathBuf,
    /// Output of `stabilize` (or any dataset directory).
    pub output: PathBuf,
    /// Also write the report here (TOML).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs `f` on a pool of `threads` workers, or on the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Exit status of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran but its check failed (gradcheck above tolerance).
    CheckFailed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    with_threads(cli.threads, move || match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|m| {
            println!(
                "wrote {} frames of {}x{} (seed {}, {} moving object{})",
                m.frames,
                m.width,
                m.height,
                m.seed.map_or("-".into(), |s| s.to_string()),
                m.moving_objects,
                if m.moving_objects == 1 { "" } else { "s" }
            );
            Outcome::Success
        }),
        Command::Train(a) => cmd_train(a).map(|curve| {
            for p in &curve {
                println!("iter {:>6}  loss {:.6e}", p.iteration, p.loss);
            }
            Outcome::Success
        }),
        Command::Stabilize(a) => cmd_stabilize(a).map(|r| {
            print!("{}", r.to_table());
            Outcome::Success
        }),
        Command::Eval(a) => cmd_eval(a).map(|r| {
            print!("{}", r.to_table());
            Outcome::Success
        }),
        Command::Gradcheck(a) => {
            let r = cmd_gradcheck(a);
            println!(
                "gradcheck: {} trials, {} partials, max relative error {:.3e} (tolerance {:.0e})",
                r.trials, r.checked, r.max_rel_error, GRADCHECK_TOLERANCE
            );
            Ok(if r.max_rel_error < GRADCHECK_TOLERANCE {
                Outcome::Success
            } else {
                Outcome::CheckFailed
            })
        }
    })?
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Manifest> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<SceneSpec>(&text).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?
        }
        None => SceneSpec::preset(a.preset.into(), a.seed),
    };
    if let Some(n) = a.frames {
        spec.frames = n;
    }
    spec.validate().map_err(|e| match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    })?;
    let dataset = synth_scene(&spec)?;
    io::save_dataset(&dataset, &a.out)
}

/// Reads a head file, or the analytic head for `"analytic"`. A missing file
/// falls back to the analytic head with a warning.
pub fn load_head(spec: &str) -> Result<DensityModel> {
    if spec == "analytic" {
        return Ok(DensityModel::default());
    }
    let path = Path::new(spec);
    if !path.exists() {
        warn!("head file {} not found; using the analytic head", path.display());
        eprintln!("warning: head file {} not found; using the analytic head", path.display());
        return Ok(DensityModel::default());
    }
    Ok(DensityModel::Mlp(DensityHead::load(path)?))
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        iterations: a.iterations,
        learning_rate: a.lr,
        batch: a.batch,
        seed: a.train_seed,
        ..TrainConfig::default()
    }
}

/// Trains a head and writes it to `a.out`. Returns the loss curve.
pub fn cmd_train(a: &TrainArgs) -> Result<Vec<rstab_core::density::LossPoint>> {
    let dataset = a.input.load()?;
    dataset.validate()?;
    let render = a.render.to_config();
    render.validate()?;
    let cfg = train_config(a);
    cfg.validate()?;
    let src = SourceFrames::new(&dataset);
    let pool = TrainingPool::build(&src, &render, &cfg)?;
    let head = DensityHead::init(src.channels(), HIDDEN, cfg.seed);
    let outcome = train(head, &pool, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    outcome.head.save(&a.out)?;
    info!("wrote {}", a.out.display());
    Ok(outcome.curve)
}

pub fn stabilize_config(a: &StabilizeArgs) -> StabilizeConfig {
    StabilizeConfig {
        render: a.render.to_config(),
        smooth_window: a.smooth_window,
        smooth_sigma: a.sigma_smooth,
    }
}

/// Output layout of `stabilize`.
pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const POSES_FILE: &str = "poses.txt";
pub const REPORT_TOML: &str = "report.toml";
pub const REPORT_TEXT: &str = "report.txt";

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Stabilizes a clip and writes frames, validity masks, the smoothed poses and reports to `a.out`.
pub fn cmd_stabilize(a: &StabilizeArgs) -> Result<RunReport> {
    let cfg = stabilize_config(a);
    let head = load_head(&a.head)?;
    let dataset = a.input.load()?;
    let result = stabilize(&dataset, &head, &cfg)?;

    mkdir(&a.out.join(FRAMES_DIR))?;
    mkdir(&a.out.join(MASKS_DIR))?;
    for (f, t) in result.frames.iter().zip(result.poses.timestamps()) {
        io::write_png(&a.out.join(FRAMES_DIR).join(format!("frame_{t:04}.png")), &f.image)?;
        let mask = Grid::from_vec(
            f.image.width(),
            f.image.height(),
            1,
            f.valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
        )?;
        io::write_png(&a.out.join(MASKS_DIR).join(format!("valid_{t:04}.png")), &mask)?;
    }
    let poses: Vec<(usize, Pose)> = result
        .poses
        .timestamps()
        .iter()
        .copied()
        .zip(result.poses.poses().iter().copied())
        .collect();
    io::write_poses(&a.out.join(POSES_FILE), &poses)?;

    let report = RunReport::new(a, &cfg, &head, dataset.scene.as_ref().map(|s| s.seed), &result.report);
    write_text(&a.out.join(REPORT_TOML), &report.to_toml()?)?;
    write_text(&a.out.join(REPORT_TEXT), &report.to_table())?;
    Ok(report)
}

/// Stabilization report of an in-memory run, without touching the disk.
pub fn stabilize_in_memory(dataset: &Dataset, head: &DensityModel, cfg: &StabilizeConfig) -> Result<StabilizeReport> {
    Ok(stabilize(dataset, head, cfg)?.report)
}

/// Compares an output directory with its input clip.
///
/// Output poses come from `poses.txt`; validity masks from `masks/` when
/// present (all pixels valid otherwise). Distortion uses exact
/// correspondences from the input depth maps; stability uses tracks of the
/// world points under the first frame's pixel grid and needs at least 32 frames.
pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let dataset = io::load_dataset(&a.input)?;
    let k = dataset.intrinsics;
    let out_poses = io::read_poses(&a.output.join(POSES_FILE))?;
    if out_poses.len() != dataset.len() {
        return Err(Error::Format {
            path: a.output.join(POSES_FILE),
            reason: format!("{} poses for a clip of {} frames", out_poses.len(), dataset.len()),
        });
    }
    let out: Vec<Pose> = out_poses.iter().map(|(_, p)| *p).collect();
    let input: Vec<Pose> = dataset.frames.iter().map(|f| f.pose).collect();

    let masks_dir = a.output.join(MASKS_DIR);
    let masks: Vec<Vec<bool>> = if masks_dir.is_dir() {
        dataset
            .frames
            .iter()
            .map(|f| {
                let m = io::read_mask(&masks_dir.join(format!("valid_{:04}.png", f.timestamp)))?;
                Ok(m.data().iter().map(|v| *v > 0.5).collect())
            })
            .collect::<Result<_>>()?
    } else {
        vec![vec![true; k.width * k.height]; dataset.len()]
    };
    let refs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
    let cropping = metrics::cropping_ratio(&refs)?;

    let corr: Vec<_> = dataset
        .frames
        .iter()
        .zip(&out)
        .map(|(f, p)| metrics::pose_correspondences(&f.depth, &f.pose, p, &k, 4))
        .collect();
    let distortion = metrics::distortion_value(&corr)?;

    let (stability_in, stability_out) = if dataset.len() >= metrics::MIN_TRACK_LEN {
        let pts = metrics::grid_points(&dataset.frames[0].depth, &dataset.frames[0].pose, &k, 8);
        let a = metrics::stability_score(&metrics::tracks_from_points(&pts, &input, &k)?);
        let b = metrics::stability_score(&metrics::tracks_from_points(&pts, &out, &k)?);
        (Some(a), Some(b))
    } else {
        warn!(
            "stability needs at least {} frames; the clip has {}",
            metrics::MIN_TRACK_LEN,
            dataset.len()
        );
        (None, None)
    };

    let frames_dir = a.output.join(FRAMES_DIR);
    let psnr = match (&dataset.scene, frames_dir.is_dir()) {
        (Some(spec), true) => {
            let scene = Scene::new(spec)?;
            let mut sum = 0.0;
            for (f, p) in dataset.frames.iter().zip(&out) {
                let img = io::read_image(&frames_dir.join(format!("frame_{:04}.png", f.timestamp)))?;
                sum += metrics::psnr(&img, &scene.render(p, f.timestamp)?.image)?;
            }
            Some(sum / dataset.len() as f64)
        }
        _ => None,
    };

    let report = EvalReport {
        frames: dataset.len(),
        cropping_ratio: cropping,
        distortion,
        stability_input: stability_in,
        stability_output: stability_out,
        mean_psnr: psnr,
    };
    if let Some(path) = &a.report {
        write_text(path, &report.to_toml()?)?;
    }
    Ok(report)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> GradcheckReport {
    gradcheck(a.trials, a.step, a.seed, rstab_core::features::FEATURE_CHANNELS, HIDDEN)
}
