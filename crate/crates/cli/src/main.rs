//! `posebench` command-line harness. Every stage reads and writes the JSON
//! artifact formats of the core library, so stages can be chained through
//! files or run end to end with `bench`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use posebench::bench::{
    ap_table_csv, plot_data_csv, read_output, reaggregate, run_pipeline, BenchConfig, ObjectConfig,
};
use posebench::geometry::CameraIntrinsics;
use posebench::io::{read_reconstruction, read_trackset, write_reconstruction, write_trackset, write_trajectory};
use posebench::metrics::{evaluate_window, MetricThresholds};
use posebench::scene::{occlude_window, synthesize_window, ShapeKind, SynthConfig};
use posebench::sfm::{estimate_window_poses, SfmConfig};
use posebench::trackersim::{attach_logits, corrupt_tracks, NoiseProfile};
use posebench::trajgen::{generate_trajectory, import_trajectory, TrajectoryMode, TrajectoryParams};
use posebench::uncertainty::{select_keypoints, SelectionStrategy, DEFAULT_KEEP_RATIO};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "posebench", version, about = "Synthetic benchmark for short-window object pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a camera trajectory.
    GenTraj(GenTrajArgs),
    /// Render an object along a trajectory and emit ground-truth tracks.
    Synth(SynthArgs),
    /// Corrupt ground-truth tracks and attach uncertainty logits.
    Corrupt(CorruptArgs),
    /// Choose which tracked points each frame keeps.
    Select(SelectArgs),
    /// Estimate window poses from tracks.
    Estimate(EstimateArgs),
    /// Score a reconstruction against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline over a set of seeds.
    Bench(BenchArgs),
    /// Re-aggregate saved bench outputs into AP tables.
    Report(ReportArgs),
}

/// Parse a value through its serde name (e.g. `random_walk`, `box_cloud`).
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Args)]
struct GenTrajArgs {
    #[arg(long, value_parser = serde_name::<TrajectoryMode>, default_value = "circling")]
    mode: TrajectoryMode,
    #[arg(long, default_value_t = TrajectoryParams::default().num_frames)]
    frames: usize,
    #[arg(long, default_value_t = TrajectoryParams::default().radius)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Trajectory file to render along.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long, value_parser = serde_name::<ShapeKind>, default_value = "sphere")]
    shape: ShapeKind,
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Object semi-axes in metres; one value sets all three.
    #[arg(long, num_args = 1..=3, default_values_t = [0.1])]
    size: Vec<f64>,
    /// Per-frame probability of a random occluder (0 disables occlusion).
    #[arg(long, default_value_t = 0.0)]
    p_occlude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// Isotropic Gaussian displacement sigma (px).
    #[arg(long, conflicts_with = "level")]
    sigma: Option<f64>,
    /// Draw every displacement from one quality level.
    #[arg(long)]
    level: Option<u8>,
    /// Full noise profile as JSON; overrides --sigma/--level.
    #[arg(long, conflicts_with_all = ["sigma", "level"])]
    profile: Option<PathBuf>,
    #[arg(long)]
    confusion: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Per-frame kept point ids, as written by `select`.
#[derive(Debug, Serialize, Deserialize)]
struct Selection {
    strategy: SelectionStrategy,
    keep_ratio: f64,
    kept: Vec<Vec<u32>>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long, value_parser = serde_name::<SelectionStrategy>, default_value = "by_ranking")]
    strategy: SelectionStrategy,
    #[arg(long, default_value_t = DEFAULT_KEEP_RATIO)]
    keep_ratio: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// Selection file from `select`; all visible points when omitted.
    #[arg(long)]
    selection: Option<PathBuf>,
    /// SfM configuration as JSON.
    #[arg(long)]
    sfm: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    reconstruction: PathBuf,
    /// Ground-truth trajectory of the same frames.
    #[arg(long)]
    trajectory: PathBuf,
    /// Write the score JSON here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_parser = serde_name::<SelectionStrategy>)]
    strategy: Option<SelectionStrategy>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    #[arg(long, value_parser = serde_name::<TrajectoryMode>)]
    mode: Option<TrajectoryMode>,
    /// Gaussian corruption sigma (px).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    windows_per_seed: Option<usize>,
    #[arg(long)]
    p_occlude: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Bench output directories or report.json files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Metric thresholds as JSON; the saved grid is kept when omitted.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Directory for the combined ap_table.csv and plot_data.csv; the AP
    /// table goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_traj(a: GenTrajArgs) -> Result<()> {
    let params =
        TrajectoryParams { mode: a.mode, num_frames: a.frames, radius: a.radius, seed: a.seed, ..Default::default() };
    let traj = generate_trajectory(&params)?;
    write_trajectory(&a.out, &traj)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let traj = import_trajectory(&a.trajectory)?.trajectory;
    let size = match a.size.as_slice() {
        [s] => [*s; 3],
        [x, y] => [*x, *y, *y],
        [x, y, z] => [*x, *y, *z],
        _ => unreachable!("clap limits --size to 1..=3 values"),
    };
    let model = ObjectConfig { shape: a.shape, num_points: a.points, size }.build()?;
    let window = synthesize_window(&model, &traj, &CameraIntrinsics::default(), &SynthConfig::default())?;
    let tracks = if a.p_occlude > 0.0 {
        occlude_window(&window.masks, &window.tracks, a.p_occlude, 1, a.seed)?.1
    } else {
        window.tracks
    };
    write_trackset(&a.out, &tracks)?;
    Ok(())
}

fn corrupt(a: CorruptArgs) -> Result<()> {
    let gt = read_trackset(&a.tracks)?;
    let mut profile = match (&a.profile, a.sigma, a.level) {
        (Some(p), _, _) => read_json::<NoiseProfile>(p)?,
        (None, Some(s), _) => NoiseProfile::gaussian(s),
        (None, None, Some(l)) => NoiseProfile::single_level(l),
        (None, None, None) => NoiseProfile::noiseless(),
    };
    profile.seed = a.seed;
    if let Some(c) = a.confusion {
        profile.confusion_prob = c;
    }
    if let Some(s) = a.sharpness {
        profile.logit_sharpness = s;
    }
    profile.validate()?;
    let noisy = attach_logits(&corrupt_tracks(&gt, &profile)?, &profile)?;
    write_trackset(&a.out, &noisy)?;
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let tracks = read_trackset(&a.tracks)?;
    let kept = select_keypoints(&tracks, a.strategy, a.keep_ratio)?;
    let sel = Selection { strategy: a.strategy, keep_ratio: a.keep_ratio, kept };
    fs::write(&a.out, serde_json::to_string_pretty(&sel)?).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let tracks = read_trackset(&a.tracks)?;
    let kept = match &a.selection {
        Some(p) => read_json::<Selection>(p)?.kept,
        None => select_keypoints(&tracks, SelectionStrategy::None, 1.0)?,
    };
    if kept.len() != tracks.num_frames() {
        bail!("selection has {} frames but the tracks have {}", kept.len(), tracks.num_frames());
    }
    let mut cfg = match &a.sfm {
        Some(p) => read_json::<SfmConfig>(p)?,
        None => SfmConfig::default(),
    };
    cfg.seed = a.seed;
    let recon = estimate_window_poses(&tracks, &kept, &CameraIntrinsics::default(), &cfg)?;
    write_reconstruction(&a.out, &recon)?;
    eprintln!(
        "registered {}/{} frames, reprojection RMSE {:.4} px",
        recon.num_registered(),
        tracks.num_frames(),
        recon.rmse
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let recon = read_reconstruction(&a.reconstruction)?;
    let gt = import_trajectory(&a.trajectory)?.trajectory;
    if recon.poses.len() != gt.len() {
        bail!("reconstruction has {} frames but the trajectory has {}", recon.poses.len(), gt.len());
    }
    let score = evaluate_window(&recon, &gt);
    write_text(a.out.as_deref(), &serde_json::to_string_pretty(&score)?)
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<BenchConfig>(p)?,
        None => BenchConfig::default(),
    };
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    if a.method.is_some() {
        cfg.method = a.method;
    }
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    if let Some(r) = a.keep_ratio {
        cfg.keep_ratio = r;
    }
    if let Some(m) = a.mode {
        cfg.trajectory.mode = m;
    }
    if let Some(s) = a.sigma {
        cfg.noise = NoiseProfile { seed: cfg.noise.seed, ..NoiseProfile::gaussian(s) };
    }
    if let Some(w) = a.windows_per_seed {
        cfg.window.windows_per_seed = w;
    }
    if let Some(p) = a.p_occlude {
        cfg.occlusion.p_occlude = p;
    }
    let out = run_pipeline(&cfg)?;
    print!("{}", ap_table_csv(&[&out.report])?);
    if cfg.output_dir.is_none() {
        eprintln!("no --out directory given; per-window scores were not saved");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let thresholds = a.thresholds.as_deref().map(read_json::<MetricThresholds>).transpose()?;
    let mut reports = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() { input.join(posebench::bench::REPORT_JSON) } else { input.clone() };
        let output = read_output(&path).with_context(|| format!("loading {}", path.display()))?;
        reports.push(match &thresholds {
            Some(t) => reaggregate(&output, t),
            None => output.report,
        });
    }
    let refs: Vec<_> = reports.iter().collect();
    let table = ap_table_csv(&refs)?;
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(posebench::bench::AP_CSV), &table)?;
            fs::write(dir.join(posebench::bench::PLOT_CSV), plot_data_csv(&refs)?)?;
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTraj(a) => gen_traj(a),
        Command::Synth(a) => synth(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Select(a) => select(a),
        Command::Estimate(a) => estimate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
