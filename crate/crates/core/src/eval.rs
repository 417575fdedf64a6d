//! Registration metrics and the benchmark runner.
//!
//! Rotation error is the geodesic angle of `gt⁻¹ ∘ est`; translation error
//! is the norm of its translation. Failed samples count against accuracy
//! but are left out of the error means.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::config::{check_range, KvConfig};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, PointCloud4D, RigidTransform};
use crate::matcher::{write_matches, FineMatchSet};
use crate::pipeline::{calibrate, CalibrationParams, MatcherModel};
use crate::pose::PoseEstimate;
use crate::raster::{DepthMap, GrayImage};
use crate::scene::{generate_scene, PerturbationSampler, PerturbationSpec, SceneConfig};

pub const DEFAULT_EPI_THRESH: f64 = 1e-3;
pub const DEFAULT_ROT_THRESH: f64 = 5.0;
pub const DEFAULT_TRANS_THRESH: f64 = 2.0;

/// Rotation angle of `r` in radians.
///
/// Uses `atan2(sin, cos)` built from the skew and trace parts, which stays
/// accurate near 0 and π where `acos` of the trace does not.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    s.atan2(c)
}

/// Error of an estimate against ground truth. Angles in degrees, lengths in
/// meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseErrors {
    pub e_t: f64,
    pub e_r: f64,
    /// About the vertical LiDAR axis (y).
    pub yaw: f64,
    /// About the lateral axis (z).
    pub pitch: f64,
    /// About the forward axis (x).
    pub roll: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// `ΔT = gt⁻¹ ∘ est`, expressed in the LiDAR frame. Per-axis angles come
/// from `ΔR = Rz(pitch)·Ry(yaw)·Rx(roll)` and are reported as magnitudes.
pub fn pose_errors(est: &RigidTransform, gt: &RigidTransform) -> PoseErrors {
    let d = gt.inverse().compose(est);
    let r = d.rotation();
    let t = d.translation();
    let yaw = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let pitch = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    PoseErrors {
        e_t: t.norm(),
        e_r: rotation_angle(r).to_degrees(),
        yaw: yaw.abs().to_degrees(),
        pitch: pitch.abs().to_degrees(),
        roll: roll.abs().to_degrees(),
        x: t.x.abs(),
        y: t.y.abs(),
        z: t.z.abs(),
    }
}

/// Why a sample produced no pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    /// Fewer than 4 correspondences survived matching and lifting.
    InsufficientCorrespondences(usize),
    /// RANSAC found no hypothesis with at least 4 inliers.
    NoConsensus(usize),
}

impl Failure {
    /// Maps a pipeline error to a failure reason. Errors meaning "nothing to
    /// match" count as missing correspondences; a degenerate solve counts as
    /// no consensus. Anything else is not a registration failure.
    pub fn from_error(e: &Error) -> Option<Self> {
        match e {
            Error::InsufficientCorrespondences(n) => Some(Self::InsufficientCorrespondences(*n)),
            Error::EmptyProjection | Error::EmptyMatchSet => Some(Self::InsufficientCorrespondences(0)),
            Error::NoConsensus(n) => Some(Self::NoConsensus(*n)),
            Error::DegenerateConfiguration(_) => Some(Self::NoConsensus(0)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::InsufficientCorrespondences(_) => "InsufficientCorrespondences",
            Self::NoConsensus(_) => "NoConsensus",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub sample_id: usize,
    pub estimate: std::result::Result<RigidTransform, Failure>,
    pub gt: RigidTransform,
}

impl RegistrationResult {
    pub fn errors(&self) -> Option<PoseErrors> {
        self.estimate.as_ref().ok().map(|e| pose_errors(e, &self.gt))
    }

    /// Strictly below both thresholds; failures never succeed.
    pub fn is_success(&self, rot_thresh: f64, trans_thresh: f64) -> bool {
        self.errors()
            .is_some_and(|e| e.e_r < rot_thresh && e.e_t < trans_thresh)
    }
}

/// Fraction of samples with `e_r < rot_thresh` (degrees) and
/// `e_t < trans_thresh` (meters). Failures stay in the denominator.
pub fn accuracy(results: &[RegistrationResult], rot_thresh: f64, trans_thresh: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let ok = results.iter().filter(|r| r.is_success(rot_thresh, trans_thresh)).count();
    Ok(ok as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrecisionResult {
    pub correct: usize,
    pub total: usize,
    /// 0 when there are no matches.
    pub precision: f64,
    /// Set when the match set was empty.
    pub empty: bool,
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

fn normalized(u: f64, v: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// Distance from `x2` to the epipolar line of `x1` plus the reverse, in
/// normalized coordinates. `relative` maps the first view's frame into the
/// second's. With no baseline the epipolar constraint is empty, so the
/// symmetric transfer distance under the pure rotation is used instead.
pub fn symmetric_epipolar_distance(x1: &Vector3<f64>, x2: &Vector3<f64>, relative: &RigidTransform) -> f64 {
    let r = relative.rotation();
    let t = relative.translation();
    if t.norm() < 1e-12 {
        let a = r * x1;
        let b = r.transpose() * x2;
        if a.z <= 0.0 || b.z <= 0.0 {
            return f64::INFINITY;
        }
        return (a / a.z - x2).norm() + (b / b.z - x1).norm();
    }
    let e = skew(t) * r;
    let l2 = e * x1;
    let l1 = e.transpose() * x2;
    let num = x2.dot(&l2).abs();
    let n2 = l2.x.hypot(l2.y);
    let n1 = l1.x.hypot(l1.y);
    if n1 == 0.0 || n2 == 0.0 {
        return f64::INFINITY;
    }
    num / n2 + num / n1
}

/// Share of fine matches whose symmetric epipolar distance under the true
/// relative pose is below `epi_thresh`. `relative` maps the LiDAR virtual
/// view's camera frame into the real camera frame.
pub fn matching_precision(
    matches: &FineMatchSet,
    relative: &RigidTransform,
    k_lidar: &CameraIntrinsics,
    k_cam: &CameraIntrinsics,
    epi_thresh: f64,
) -> PrecisionResult {
    let total = matches.len();
    if total == 0 {
        return PrecisionResult {
            empty: true,
            ..Default::default()
        };
    }
    let correct = matches
        .matches
        .iter()
        .filter(|m| {
            let x1 = normalized(m.lidar.0, m.lidar.1, k_lidar);
            let x2 = normalized(m.camera.0, m.camera.1, k_cam);
            symmetric_epipolar_distance(&x1, &x2, relative) < epi_thresh
        })
        .count();
    PrecisionResult {
        correct,
        total,
        precision: correct as f64 / total as f64,
        empty: false,
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// One benchmark sample after evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub result: RegistrationResult,
    pub initial: RigidTransform,
    pub errors: Option<PoseErrors>,
    pub precision: PrecisionResult,
    pub inliers: usize,
    pub correspondences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub failures: usize,
    pub e_t_mean: f64,
    pub e_t_std: f64,
    pub e_r_mean: f64,
    pub e_r_std: f64,
    /// Means of the per-axis magnitudes.
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub acc: f64,
    /// Correct matches over all matches, pooled across samples.
    pub precision: f64,
    pub precision_empty: bool,
    pub failure_rate: f64,
    pub rot_thresh: f64,
    pub trans_thresh: f64,
    pub epi_thresh: f64,
}

impl MetricsReport {
    /// Error statistics use successful samples only; the population
    /// standard deviation is reported. Means are NaN if every sample failed.
    pub fn from_records(
        records: &[SampleRecord],
        rot_thresh: f64,
        trans_thresh: f64,
        epi_thresh: f64,
    ) -> Result<Self> {
        let results: Vec<RegistrationResult> = records.iter().map(|r| r.result.clone()).collect();
        let acc = accuracy(&results, rot_thresh, trans_thresh)?;
        let errs: Vec<PoseErrors> = records.iter().filter_map(|r| r.errors).collect();
        let col = |f: fn(&PoseErrors) -> f64| errs.iter().map(f).collect::<Vec<_>>();
        let (e_t_mean, e_t_std) = mean_std(&col(|e| e.e_t));
        let (e_r_mean, e_r_std) = mean_std(&col(|e| e.e_r));
        let m = |f: fn(&PoseErrors) -> f64| mean_std(&col(f)).0;
        let correct: usize = records.iter().map(|r| r.precision.correct).sum();
        let total: usize = records.iter().map(|r| r.precision.total).sum();
        let failures = records.len() - errs.len();
        Ok(Self {
            samples: records.len(),
            failures,
            e_t_mean,
            e_t_std,
            e_r_mean,
            e_r_std,
            yaw: m(|e| e.yaw),
            pitch: m(|e| e.pitch),
            roll: m(|e| e.roll),
            x: m(|e| e.x),
            y: m(|e| e.y),
            z: m(|e| e.z),
            acc,
            precision: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            precision_empty: total == 0,
            failure_rate: failures as f64 / records.len() as f64,
            rot_thresh,
            trans_thresh,
            epi_thresh,
        })
    }

    /// Aligned plain-text table.
    pub fn format_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# samples={} acc@{}deg/{}m epi_thresh={}",
            self.samples, self.rot_thresh, self.trans_thresh, self.epi_thresh
        );
        let head = [
            "e_t (m)",
            "e_r (deg)",
            "Acc",
            "Precision",
            "Failures",
        ];
        let row = [
            format!("{:.4} ± {:.4}", self.e_t_mean, self.e_t_std),
            format!("{:.4} ± {:.4}", self.e_r_mean, self.e_r_std),
            format!("{:.2}%", 100.0 * self.acc),
            format!("{:.2}%", 100.0 * self.precision),
            format!("{} ({:.2}%)", self.failures, 100.0 * self.failure_rate),
        ];
        table(&mut s, &head, &[row.to_vec()]);
        s.push('\n');
        let head = ["Yaw (deg)", "Pitch (deg)", "Roll (deg)", "X (m)", "Y (m)", "Z (m)"];
        let row: Vec<String> = [self.yaw, self.pitch, self.roll]
            .iter()
            .map(|v| format!("{v:.4}"))
            .chain([self.x, self.y, self.z].iter().map(|v| format!("{v:.4}")))
            .collect();
        table(&mut s, &head, &[row]);
        s
    }

    pub fn csv_header() -> &'static str {
        "samples,failures,e_t_mean,e_t_std,e_r_mean,e_r_std,yaw,pitch,roll,x,y,z,acc,precision,failure_rate,rot_thresh,trans_thresh,epi_thresh"
    }

    /// Header plus one row, full precision.
    pub fn format_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            Self::csv_header(),
            self.samples,
            self.failures,
            self.e_t_mean,
            self.e_t_std,
            self.e_r_mean,
            self.e_r_std,
            self.yaw,
            self.pitch,
            self.roll,
            self.x,
            self.y,
            self.z,
            self.acc,
            self.precision,
            self.failure_rate,
            self.rot_thresh,
            self.trans_thresh,
            self.epi_thresh
        )
    }
}

fn table(out: &mut String, head: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..head.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([head[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(head.to_vec()));
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
    );
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(|s| s.as_str()).collect()));
    }
}

/// Per-sample CSV: enough to recompute every report field.
pub fn format_samples_csv(records: &[SampleRecord]) -> String {
    let mut s = String::from("sample,status,e_t,e_r,yaw,pitch,roll,x,y,z,matches,correct,correspondences,inliers\n");
    for r in records {
        let status = match &r.result.estimate {
            Ok(_) => "ok",
            Err(f) => f.name(),
        };
        let e = r.errors;
        let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.result.sample_id,
            status,
            f(e.map(|e| e.e_t)),
            f(e.map(|e| e.e_r)),
            f(e.map(|e| e.yaw)),
            f(e.map(|e| e.pitch)),
            f(e.map(|e| e.roll)),
            f(e.map(|e| e.x)),
            f(e.map(|e| e.y)),
            f(e.map(|e| e.z)),
            r.precision.total,
            r.precision.correct,
            r.correspondences,
            r.inliers
        );
    }
    s
}

/// Where a benchmark sample comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SceneSource {
    Synthetic { seed: u64, config: Box<SceneConfig> },
    /// Binary cloud, camera image, intrinsics text and ground-truth pose.
    Files {
        cloud: PathBuf,
        image: PathBuf,
        intrinsics: PathBuf,
        gt: PathBuf,
    },
}

struct LoadedScene {
    cloud: PointCloud4D,
    image: GrayImage,
    k: CameraIntrinsics,
    gt: RigidTransform,
}

impl SceneSource {
    fn load(&self) -> Result<LoadedScene> {
        match self {
            Self::Synthetic { seed, config } => {
                let s = generate_scene(*seed, config)?;
                Ok(LoadedScene {
                    cloud: s.cloud,
                    image: s.camera_image,
                    k: s.intrinsics,
                    gt: s.gt_extrinsics,
                })
            }
            Self::Files {
                cloud,
                image,
                intrinsics,
                gt,
            } => Ok(LoadedScene {
                cloud: crate::io::read_cloud(cloud)?,
                image: crate::io::read_gray(image)?,
                k: crate::io::read_intrinsics(intrinsics)?,
                gt: crate::io::read_pose(gt)?,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub scenes: Vec<SceneSource>,
    /// Perturbation applied on top of ground truth to form each initial
    /// guess; the `n`-th draw goes to sample `n`.
    pub perturbation: PerturbationSpec,
    pub params: CalibrationParams,
    pub model: MatcherModel,
    pub rot_thresh: f64,
    pub trans_thresh: f64,
    pub epi_thresh: f64,
    /// Worker threads; `None` uses rayon's default.
    pub jobs: Option<usize>,
    pub write_dumps: bool,
    pub write_overlays: bool,
}

impl BenchmarkConfig {
    /// `count` street scenes with seeds `seed, seed + 1, ...`, hand-crafted
    /// features and the given perturbation bounds.
    pub fn synthetic_street(count: usize, seed: u64, max_rotation: f64, max_translation: f64) -> Self {
        let scenes = (0..count as u64)
            .map(|i| SceneSource::Synthetic {
                seed: seed + i,
                config: Box::new(SceneConfig::street(seed + i)),
            })
            .collect();
        Self {
            scenes,
            perturbation: PerturbationSpec {
                max_translation,
                max_rotation,
                seed,
            },
            params: CalibrationParams::hand_crafted(),
            model: MatcherModel::hand_crafted(),
            rot_thresh: DEFAULT_ROT_THRESH,
            trans_thresh: DEFAULT_TRANS_THRESH,
            epi_thresh: DEFAULT_EPI_THRESH,
            jobs: None,
            write_dumps: true,
            write_overlays: true,
        }
    }

    /// Keys (all optional unless noted):
    ///
    /// ```text
    /// seed = 0                 # base for scene, perturbation and RANSAC seeds
    /// scenes = 50              # synthetic scene count
    /// scene_kind = street      # street | fronto
    /// scene_config = file.cfg  # scene generator config, overrides scene_kind
    /// pair = cloud.bin image.pgm intrinsics.txt gt_pose.txt   # repeatable
    /// perturb_rotation = 10    # degrees
    /// perturb_translation = 1  # meters
    /// perturb_seed = <seed>
    /// weights = model.bin      # learned model; hand-crafted if absent
    /// acc_rotation = 5
    /// acc_translation = 2
    /// epi_thresh = 0.001
    /// jobs = 4
    /// dumps = true
    /// overlays = true
    /// ```
    ///
    /// Calibration keys (see [`CalibrationParams::from_kv`]) are read too.
    /// When `pair` lines are present they replace the synthetic scenes.
    /// Relative paths resolve against the config file's directory.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let base = kv.base_dir().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &str| base.join(p);
        let seed: u64 = kv.get_or("seed", 0)?;
        let pairs: Vec<&str> = kv.get_all("pair").collect();
        let scenes = if pairs.is_empty() {
            let count: usize = kv.get_or("scenes", 50)?;
            let first: u64 = kv.get_or("scene_seed", seed)?;
            let fixed = match kv.get_str("scene_config") {
                Some(p) => Some(SceneConfig::from_kv(&KvConfig::load(&resolve(p))?)?),
                None => None,
            };
            let kind = kv.get_str("scene_kind").unwrap_or("street");
            if !matches!(kind, "street" | "fronto") {
                return Err(Error::InvalidConfig(format!("unknown scene_kind {kind:?}")));
            }
            (0..count as u64)
                .map(|i| {
                    let s = first + i;
                    let config = match (&fixed, kind) {
                        (Some(c), _) => c.clone(),
                        (None, "fronto") => SceneConfig::fronto_plane(10.0, 60_000),
                        _ => SceneConfig::street(s),
                    };
                    SceneSource::Synthetic {
                        seed: s,
                        config: Box::new(config),
                    }
                })
                .collect()
        } else {
            pairs
                .iter()
                .map(|line| {
                    let f: Vec<&str> = line.split_whitespace().collect();
                    let [c, i, k, g] = f[..] else {
                        return Err(Error::InvalidConfig(format!("`pair` needs 4 paths, got {line:?}")));
                    };
                    Ok(SceneSource::Files {
                        cloud: resolve(c),
                        image: resolve(i),
                        intrinsics: resolve(k),
                        gt: resolve(g),
                    })
                })
                .collect::<Result<_>>()?
        };
        let (model, defaults) = match kv.get_str("weights") {
            Some(p) => (MatcherModel::load(&resolve(p))?, CalibrationParams::default()),
            None => (MatcherModel::hand_crafted(), CalibrationParams::hand_crafted()),
        };
        let mut defaults = defaults;
        defaults.ransac.seed = seed;
        let cfg = Self {
            scenes,
            perturbation: PerturbationSpec {
                max_translation: kv.get_or("perturb_translation", 1.0)?,
                max_rotation: kv.get_or("perturb_rotation", 10.0)?,
                seed: kv.get_or("perturb_seed", seed)?,
            },
            params: CalibrationParams::from_kv_with(kv, &defaults)?,
            model,
            rot_thresh: kv.get_or("acc_rotation", DEFAULT_ROT_THRESH)?,
            trans_thresh: kv.get_or("acc_translation", DEFAULT_TRANS_THRESH)?,
            epi_thresh: kv.get_or("epi_thresh", DEFAULT_EPI_THRESH)?,
            jobs: kv.get("jobs")?,
            write_dumps: kv.get_or("dumps", true)?,
            write_overlays: kv.get_or("overlays", true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::InvalidConfig("benchmark has no scenes".into()));
        }
        for s in &self.scenes {
            if let SceneSource::Files {
                cloud,
                image,
                intrinsics,
                gt,
            } = s
            {
                for p in [cloud, image, intrinsics, gt] {
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        self.perturbation.validate()?;
        self.params.validate()?;
        check_range("acc_rotation", self.rot_thresh, 0.0, f64::INFINITY, true)?;
        check_range("acc_translation", self.trans_thresh, 0.0, f64::INFINITY, true)?;
        check_range("epi_thresh", self.epi_thresh, 0.0, f64::INFINITY, true)?;
        if self.jobs == Some(0) {
            return Err(Error::InvalidConfig("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutput {
    pub report: MetricsReport,
    pub records: Vec<SampleRecord>,
}

struct SampleArtifacts {
    matches: FineMatchSet,
    overlay: Option<Vec<u8>>,
}

fn run_sample(
    id: usize,
    source: &SceneSource,
    perturbation: &RigidTransform,
    cfg: &BenchmarkConfig,
) -> Result<(SampleRecord, SampleArtifacts)> {
    let scene = source.load()?;
    let initial = perturbation.compose(&scene.gt);
    let run = calibrate(&scene.cloud, &scene.image, &scene.k, &initial, &cfg.model, &cfg.params);
    let (estimate, matches, k_match, inliers, correspondences) = match run {
        Ok(c) => {
            let n = c.lift.correspondences.len();
            let inl = c.estimate.inlier_count();
            (Ok(c.estimate), c.matches.fine, Some(c.intrinsics), inl, n)
        }
        Err(f) => {
            let Some(reason) = Failure::from_error(&f.error) else {
                return Err(f.error);
            };
            let fine = f.matches.map(|m| m.fine).unwrap_or_default();
            (Err(reason), fine, f.intrinsics, 0, 0)
        }
    };
    let precision = match k_match {
        Some(k) => matching_precision(&matches, &scene.gt.compose(&initial.inverse()), &k, &k, cfg.epi_thresh),
        None => matching_precision(&FineMatchSet::default(), &RigidTransform::identity(), &scene.k, &scene.k, cfg.epi_thresh),
    };
    let estimate = estimate.map(|e: PoseEstimate| e.transform);
    let overlay = if cfg.write_overlays {
        let pose = estimate.as_ref().unwrap_or(&initial);
        Some(overlay_png(&scene.image, &scene.cloud, pose, &scene.k)?)
    } else {
        None
    };
    let result = RegistrationResult {
        sample_id: id,
        estimate,
        gt: scene.gt,
    };
    Ok((
        SampleRecord {
            errors: result.errors(),
            result,
            initial,
            precision,
            inliers,
            correspondences,
        },
        SampleArtifacts { matches, overlay },
    ))
}

/// Runs every sample through the full pipeline and aggregates in sample
/// order. Registration failures are recorded, not raised; I/O and config
/// errors abort. With `out_dir`, writes `report.txt`, `metrics.csv`,
/// `samples.csv` and per-sample `poses/`, `matches/` and `overlays/`.
pub fn run_benchmark(cfg: &BenchmarkConfig, out_dir: Option<&Path>) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    let mut sampler = PerturbationSampler::new(cfg.perturbation)?;
    let perturbations: Vec<RigidTransform> = (0..cfg.scenes.len()).map(|_| sampler.draw().0).collect();
    let work = || {
        cfg.scenes
            .par_iter()
            .zip(perturbations.par_iter())
            .enumerate()
            .map(|(i, (s, p))| run_sample(i, s, p, cfg))
            .collect::<Result<Vec<_>>>()
    };
    let samples = match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let (records, artifacts): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let report = MetricsReport::from_records(&records, cfg.rot_thresh, cfg.trans_thresh, cfg.epi_thresh)?;
    if let Some(dir) = out_dir {
        use crate::io::write_atomic;
        write_atomic(&dir.join("report.txt"), report.format_table().as_bytes())?;
        write_atomic(&dir.join("metrics.csv"), report.format_csv().as_bytes())?;
        write_atomic(&dir.join("samples.csv"), format_samples_csv(&records).as_bytes())?;
        for (r, a) in records.iter().zip(&artifacts) {
            let id = r.result.sample_id;
            if cfg.write_dumps {
                write_matches(&dir.join(format!("matches/{id:04}.txt")), &a.matches, &cfg.params.matching)?;
                if let Ok(t) = &r.result.estimate {
                    crate::io::write_pose(&dir.join(format!("poses/{id:04}.txt")), t)?;
                }
            }
            if let Some(png) = &a.overlay {
                write_atomic(&dir.join(format!("overlays/{id:04}.png")), png)?;
            }
        }
    }
    Ok(BenchmarkOutput { report, records })
}

/// Blue (near) to red (far) over `[lo, hi]`.
pub fn depth_color(d: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((d - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let ch = |c: f64| (255.0 * (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0)).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// The camera image in gray with every projected point drawn in a
/// depth-coded color.
pub fn overlay_image(image: &GrayImage, depth: &DepthMap) -> image::RgbImage {
    let (w, h) = (image.width(), image.height());
    let valid: Vec<f64> = depth.depths.as_slice().iter().copied().filter(|d| *d > 0.0).collect();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(0.0, f64::max).min(lo + 50.0);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        match depth.at(x, y) {
            Some(d) if x < depth.width() && y < depth.height() => image::Rgb(depth_color(d, lo, hi)),
            _ => {
                let g = (255.0 * image.pixels.get(x, y)).round() as u8;
                image::Rgb([g, g, g])
            }
        }
    })
}

/// PNG bytes of [`overlay_image`] for the cloud seen through `pose`.
pub fn overlay_png(image: &GrayImage, cloud: &PointCloud4D, pose: &RigidTransform, k: &CameraIntrinsics) -> Result<Vec<u8>> {
    let depth = match project(cloud, pose, k) {
        Ok((_, d)) => d,
        Err(Error::EmptyProjection) => DepthMap::empty(k.width, k.height),
        Err(e) => return Err(e),
    };
    let img = overlay_image(image, &depth);
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::FineMatch;
    use crate::rng::SplitMix64;
    use nalgebra::{Unit, UnitQuaternion};

    fn random_pose(rng: &mut SplitMix64) -> RigidTransform {
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        RigidTransform::from_axis_angle(
            axis,
            rng.uniform(-3.0, 3.0),
            Vector3::new(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)),
        )
    }

    #[test]
    fn identical_poses_have_zero_error() {
        let mut rng = SplitMix64::new(1);
        let p = random_pose(&mut rng);
        let e = pose_errors(&p, &p);
        assert!(e.e_r < 1e-12 && e.e_t < 1e-12);
    }

    #[test]
    fn single_axis_yaw() {
        let mut rng = SplitMix64::new(2);
        let gt = random_pose(&mut rng);
        let yaw = RigidTransform::from_axis_angle(Vector3::y(), 5f64.to_radians(), Vector3::zeros());
        let e = pose_errors(&gt.compose(&yaw), &gt);
        assert!((e.e_r - 5.0).abs() < 1e-9);
        assert!((e.yaw - 5.0).abs() < 1e-9);
        assert!(e.pitch < 1e-9 && e.roll < 1e-9 && e.e_t < 1e-9);
    }

    #[test]
    fn geodesic_matches_quaternion_angle() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..1000 {
            let axis = Unit::new_normalize(Vector3::new(rng.normal(), rng.normal(), rng.normal()));
            let q = UnitQuaternion::from_axis_angle(&axis, rng.uniform(0.0, std::f64::consts::PI));
            let oracle = (2.0 * q.w.abs().min(1.0).acos()).to_degrees();
            let est = RigidTransform::from_rotation(q.to_rotation_matrix(), Vector3::zeros());
            let e = pose_errors(&est, &RigidTransform::identity());
            assert!((e.e_r - oracle).abs() < 1e-9, "{} vs {oracle}", e.e_r);
        }
    }

    #[test]
    fn accuracy_counts_failures() {
        let gt = RigidTransform::identity();
        let ok = RegistrationResult {
            sample_id: 0,
            estimate: Ok(gt),
            gt,
        };
        let fail = RegistrationResult {
            sample_id: 1,
            estimate: Err(Failure::InsufficientCorrespondences(3)),
            gt,
        };
        assert_eq!(accuracy(&[ok.clone()], 5.0, 2.0).unwrap(), 1.0);
        assert_eq!(accuracy(&[ok.clone(), fail], 5.0, 2.0).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], 5.0, 2.0), Err(Error::EmptyResults)));
        // strict: exactly at the threshold is not a success
        let edge = RegistrationResult {
            sample_id: 2,
            estimate: Ok(RigidTransform::from_translation(Vector3::new(2.0, 0.0, 0.0))),
            gt,
        };
        assert_eq!(accuracy(&[edge], 5.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn failure_mapping() {
        assert_eq!(
            Failure::from_error(&Error::InsufficientCorrespondences(2)),
            Some(Failure::InsufficientCorrespondences(2))
        );
        assert_eq!(Failure::from_error(&Error::NoConsensus(3)), Some(Failure::NoConsensus(3)));
        assert_eq!(Failure::from_error(&Error::EmptyResults), None);
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn on_epipolar(rng: &mut SplitMix64, rel: &RigidTransform) -> FineMatch {
        loop {
            let p = Vector3::new(rng.uniform(-5.0, 5.0), rng.uniform(-4.0, 4.0), rng.uniform(5.0, 30.0));
            let (Some(a), Some(b)) = (k().project_point(&p), k().project_point(&rel.apply(&p))) else {
                continue;
            };
            return FineMatch {
                lidar: a,
                camera: b,
                confidence: 1.0,
                tau2: 1.0,
                window_center: b,
                clamped: false,
            };
        }
    }

    #[test]
    fn precision_on_and_off_epipolar() {
        let mut rng = SplitMix64::new(5);
        let rel = RigidTransform::from_axis_angle(Vector3::y(), 0.1, Vector3::new(0.5, 0.0, 0.2));
        let good: Vec<FineMatch> = (0..20).map(|_| on_epipolar(&mut rng, &rel)).collect();
        let set = FineMatchSet {
            matches: good.clone(),
            window: 5,
        };
        assert_eq!(matching_precision(&set, &rel, &k(), &k(), 1e-3).precision, 1.0);
        let bad: Vec<FineMatch> = good
            .iter()
            .map(|m| FineMatch {
                camera: (m.camera.0, m.camera.1 + 80.0),
                ..*m
            })
            .collect();
        let set = FineMatchSet { matches: bad, window: 5 };
        assert_eq!(matching_precision(&set, &rel, &k(), &k(), 1e-3).precision, 0.0);
        let empty = matching_precision(&FineMatchSet::default(), &rel, &k(), &k(), 1e-3);
        assert!(empty.empty && empty.precision == 0.0);
    }

    #[test]
    fn zero_baseline_uses_rotation_transfer() {
        let mut rng = SplitMix64::new(6);
        let rel = RigidTransform::from_axis_angle(Vector3::y(), 0.05, Vector3::zeros());
        let m = on_epipolar(&mut rng, &rel);
        let set = FineMatchSet {
            matches: vec![m, FineMatch { camera: (m.camera.0 + 3.0, m.camera.1), ..m }],
            window: 5,
        };
        let p = matching_precision(&set, &rel, &k(), &k(), 1e-3);
        assert_eq!((p.correct, p.total), (1, 2));
    }

    #[test]
    fn table_and_csv() {
        let gt = RigidTransform::identity();
        let rec = |id, est| SampleRecord {
            result: RegistrationResult {
                sample_id: id,
                estimate: est,
                gt,
            },
            initial: gt,
            errors: None,
            precision: PrecisionResult::default(),
            inliers: 0,
            correspondences: 0,
        };
        let mut a = rec(0, Ok(RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0))));
        a.errors = a.result.errors();
        let b = rec(1, Err(Failure::NoConsensus(2)));
        let r = MetricsReport::from_records(&[a, b], 5.0, 2.0, 1e-3).unwrap();
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.failures, 1);
        assert!((r.e_t_mean - 0.1).abs() < 1e-15);
        assert!(r.format_table().contains("50.00%"));
        let csv = r.format_csv();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(
            csv.lines().nth(1).unwrap().split(',').count(),
            MetricsReport::csv_header().split(',').count()
        );
    }

    #[test]
    fn depth_colors_span_blue_to_red() {
        assert_eq!(depth_color(0.0, 0.0, 1.0), [0, 0, 128]);
        assert_eq!(depth_color(1.0, 0.0, 1.0), [128, 0, 0]);
    }
}
