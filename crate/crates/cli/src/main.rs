//! `lcreg`: synthesize scenes, project clouds, match, calibrate and run
//! benchmarks.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 registration failure,
//! 4 I/O or file-format error, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lcreg::config::KvConfig;
use lcreg::eval::{run_benchmark, BenchmarkConfig};
use lcreg::io;
use lcreg::matcher::write_matches;
use lcreg::pipeline::{calibrate, match_views, virtual_view, CalibrationParams, MatcherModel};
use lcreg::pose::write_report;
use lcreg::scene::{generate_scene, SceneConfig};
use lcreg::{Error, RigidTransform};

#[derive(Parser)]
#[command(name = "lcreg", version, about = "LiDAR-camera extrinsic registration")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: cloud.bin, camera.pgm, intrinsics.txt,
    /// gt_pose.txt and scene.cfg.
    Synth(SynthArgs),
    /// Project a cloud into intensity.pfm and depth.pfm.
    Project(ProjectArgs),
    /// Match a projected cloud against a camera image and dump the matches.
    Match(MatchArgs),
    /// Estimate the LiDAR to camera transform.
    Calibrate(CalibrateArgs),
    /// Run a benchmark from a config file and write the report.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Street,
    Fronto,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "REG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "street")]
    kind: SceneKind,
    /// Scene generator config; replaces `--kind`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of LiDAR rays.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// LiDAR to camera pose (3×4 text).
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Inputs and matcher settings shared by `match` and `calibrate`.
#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// Camera image (binary PGM or PNG).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Initial LiDAR to camera guess; identity if absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Learned model weights; hand-crafted descriptors if absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Key-value config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta_c: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    fine_temperature: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
    /// Pixels.
    #[arg(long)]
    inlier_threshold: Option<f64>,
    #[arg(long)]
    fill_radius: Option<f64>,
    #[arg(long)]
    long_side: Option<usize>,
    /// RANSAC seed.
    #[arg(long, env = "REG_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Match dump path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Estimated pose path.
    #[arg(long)]
    out: PathBuf,
    /// RANSAC summary path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also dump the fine matches here.
    #[arg(long)]
    matches: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Benchmark config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long, env = "REG_SEED")]
    seed: Option<u64>,
    /// Overrides the config's `scenes`.
    #[arg(long)]
    scenes: Option<usize>,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidConfig(_)
                | Error::InvalidIntrinsics(_)
                | Error::InvalidTransform(_)
                | Error::InvalidCloud(_)
                | Error::WeightShapeMismatch(_) => 2,
                Error::InsufficientCorrespondences(_)
                | Error::NoConsensus(_)
                | Error::EmptyProjection
                | Error::DegenerateConfiguration(_) => 3,
                Error::Io(_) | Error::Format { .. } => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidConfig("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Project(a) => project(a),
        Command::Match(a) => match_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Eval(a) => eval(a, cli.jobs),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SceneConfig::from_kv(&KvConfig::load(p)?)?,
        None => match a.kind {
            SceneKind::Street => SceneConfig::street(a.seed),
            SceneKind::Fronto => SceneConfig::fronto_plane(10.0, 60_000),
        },
    };
    if let Some(n) = a.points {
        cfg.points = n;
    }
    let scene = generate_scene(a.seed, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    io::write_cloud(&a.out.join("cloud.bin"), &scene.cloud)?;
    io::write_pgm(&a.out.join("camera.pgm"), &scene.camera_image.pixels, 1.0)?;
    io::write_intrinsics(&a.out.join("intrinsics.txt"), &scene.intrinsics)?;
    io::write_pose(&a.out.join("gt_pose.txt"), &scene.gt_extrinsics)?;
    io::write_atomic(&a.out.join("scene.cfg"), cfg.to_kv().to_text().as_bytes())?;
    println!("{} points -> {}", scene.cloud.len(), a.out.display());
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let cloud = io::read_cloud(&a.cloud)?;
    let pose = io::read_pose(&a.pose)?;
    let k = io::read_intrinsics(&a.intrinsics)?;
    let (intensity, depth) = lcreg::geometry::project(&cloud, &pose, &k)?;
    io::write_pfm(&a.out.join("intensity.pfm"), &intensity.pixels)?;
    io::write_pfm(&a.out.join("depth.pfm"), &depth.depths)?;
    println!("{} pixels filled", depth.valid_count());
    Ok(())
}

struct Loaded {
    cloud: lcreg::PointCloud4D,
    image: lcreg::GrayImage,
    k: lcreg::CameraIntrinsics,
    init: RigidTransform,
    model: MatcherModel,
    params: CalibrationParams,
}

fn load_scene(a: &SceneArgs) -> Result<Loaded> {
    let mut kv = match &a.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let set = |kv: &mut KvConfig, key: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(key, v);
        }
    };
    set(&mut kv, "theta_c", a.theta_c.map(|v| v.to_string()));
    set(&mut kv, "temperature", a.temperature.map(|v| v.to_string()));
    set(&mut kv, "window", a.window.map(|v| v.to_string()));
    set(&mut kv, "fine_temperature", a.fine_temperature.map(|v| v.to_string()));
    set(&mut kv, "ransac_iters", a.ransac_iters.map(|v| v.to_string()));
    set(&mut kv, "inlier_threshold", a.inlier_threshold.map(|v| v.to_string()));
    set(&mut kv, "fill_radius", a.fill_radius.map(|v| v.to_string()));
    set(&mut kv, "long_side", a.long_side.map(|v| v.to_string()));
    set(&mut kv, "seed", a.seed.map(|v| v.to_string()));
    let weights = a
        .weights
        .clone()
        .or_else(|| kv.get_str("weights").map(PathBuf::from));
    let (model, defaults) = match weights {
        Some(p) => (MatcherModel::load(&p)?, CalibrationParams::default()),
        None => (MatcherModel::hand_crafted(), CalibrationParams::hand_crafted()),
    };
    let params = CalibrationParams::from_kv_with(&kv, &defaults)?;
    let init = match &a.init {
        Some(p) => io::read_pose(p)?,
        None => RigidTransform::identity(),
    };
    Ok(Loaded {
        cloud: io::read_cloud(&a.cloud)?,
        image: io::read_gray(&a.image)?,
        k: io::read_intrinsics(&a.intrinsics)?,
        init,
        model,
        params,
    })
}

fn match_cmd(a: MatchArgs) -> Result<()> {
    let s = load_scene(&a.scene)?;
    let view = virtual_view(&s.cloud, &s.image, &s.k, &s.init, s.params.long_side)?;
    let out = match_views(&view.image, &view.camera, &s.model, &s.params.matching)?;
    write_matches(&a.out, &out.fine, &s.params.matching)?;
    println!("{} coarse, {} fine matches", out.coarse.len(), out.fine.len());
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let s = load_scene(&a.scene)?;
    let cal = match calibrate(&s.cloud, &s.image, &s.k, &s.init, &s.model, &s.params) {
        Ok(c) => c,
        Err(f) => {
            if let (Some(p), Some(m)) = (&a.matches, &f.matches) {
                write_matches(p, &m.fine, &s.params.matching)?;
            }
            return Err(f.error.into());
        }
    };
    io::write_pose(&a.out, &cal.estimate.transform)?;
    if let Some(p) = &a.report {
        write_report(p, &cal.estimate, cal.lift.correspondences.len())?;
    }
    if let Some(p) = &a.matches {
        write_matches(p, &cal.matches.fine, &s.params.matching)?;
    }
    println!(
        "{} inliers of {} correspondences, mean error {:.3} px",
        cal.estimate.inlier_count(),
        cal.lift.correspondences.len(),
        cal.estimate.mean_reprojection_error
    );
    Ok(())
}

fn eval(a: EvalArgs, jobs: Option<usize>) -> Result<()> {
    let mut kv = KvConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    if let Some(n) = a.scenes {
        kv.set("scenes", n);
    }
    let mut cfg = BenchmarkConfig::from_kv(&kv)?;
    if jobs.is_some() {
        cfg.jobs = jobs;
    }
    let out = run_benchmark(&cfg, Some(Path::new(&a.out)))?;
    print!("{}", out.report.format_table());
    Ok(())
}
