//! End-to-end registration: project, extract, match, refine, lift, solve.

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::features::{
    attend, extract_pyramid, positional_encode, AttentionWeights, Branch, DualBackbone, ImageInput, WeightFile,
    DEFAULT_COARSE_CHANNELS, DEFAULT_FINE_CHANNELS,
};
use crate::geometry::{project, resize_long_side, CameraIntrinsics, PointCloud4D, RigidTransform};
use crate::matcher::{
    cosine_similarity, dual_softmax, fuse_confidence, mutual_matches, refine, repeatability, CoarseMatchSet,
    FineMatchSet, MatchParams, RefineParams, RepeatabilityMap, RepeatabilityMlp,
};
use crate::pose::{lift_matches, ransac_pnp, LiftDepth, LiftResult, PoseEstimate, RansacParams};
use crate::raster::{DepthMap, GrayImage, IntensityImage};

/// Everything the matcher needs besides the images.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    pub backbone: DualBackbone,
    /// Add sinusoidal positions to coarse tokens before attention.
    pub positional: bool,
    pub coarse_attention: Option<AttentionWeights>,
    pub fine_attention: Option<AttentionWeights>,
    pub repeatability: RepeatabilityMlp,
}

impl MatcherModel {
    /// Hand-crafted descriptors compared directly: no positions, no
    /// attention, and a repeatability head that scores every cell `σ(10)`.
    pub fn hand_crafted() -> Self {
        let backbone = DualBackbone::hand_crafted();
        let channels = match &backbone.lidar {
            crate::features::Extractor::HandCrafted(h) => h.coarse.channels(),
            crate::features::Extractor::Conv(_) => DEFAULT_COARSE_CHANNELS,
        };
        Self {
            backbone,
            positional: false,
            coarse_attention: None,
            fine_attention: None,
            repeatability: RepeatabilityMlp::constant(channels, 10.0),
        }
    }

    /// Learned model: conv branches, `coarse.*` attention layers, optional
    /// `fine.*` layers and the repeatability head.
    pub fn from_weights(w: &WeightFile, coarse_channels: usize, fine_channels: usize) -> Result<Self> {
        let fine = AttentionWeights::from_weights(w, "fine", fine_channels)?;
        Ok(Self {
            backbone: DualBackbone::from_weights(w, coarse_channels, fine_channels)?,
            positional: true,
            coarse_attention: Some(AttentionWeights::from_weights(w, "coarse", coarse_channels)?),
            fine_attention: (!fine.layers.is_empty()).then_some(fine),
            repeatability: RepeatabilityMlp::from_weights(w, coarse_channels)?,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_weights(&WeightFile::read(path)?, DEFAULT_COARSE_CHANNELS, DEFAULT_FINE_CHANNELS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput {
    pub coarse: CoarseMatchSet,
    pub fine: FineMatchSet,
    pub repeatability: RepeatabilityMap,
    /// Coarse grid shape `(rows, cols)` of the LiDAR image.
    pub lidar_grid: (usize, usize),
    pub camera_grid: (usize, usize),
}

/// Matches a LiDAR intensity image against a camera image.
pub fn match_views(
    lidar: &IntensityImage,
    camera: &GrayImage,
    model: &MatcherModel,
    params: &MatchParams,
) -> Result<MatchOutput> {
    params.validate()?;
    let lp = extract_pyramid(ImageInput::Intensity(lidar), Branch::Lidar, &model.backbone)?;
    let cp = extract_pyramid(ImageInput::Gray(camera), Branch::Camera, &model.backbone)?;
    let mut fl = lp.coarse.flatten();
    let mut fc = cp.coarse.flatten();
    if model.positional {
        fl = positional_encode(&fl)?;
        fc = positional_encode(&fc)?;
    }
    if let Some(att) = &model.coarse_attention {
        (fl, fc) = attend(&fl, &fc, att)?;
    }
    let prob = dual_softmax(&cosine_similarity(&fl, &fc, params.temperature)?);
    let rep = repeatability(&fl, &model.repeatability)?;
    let conf = fuse_confidence(&prob, &rep)?;
    let select = if params.mnn_on_fused { &conf.values } else { &prob.values };
    let coarse = mutual_matches(select, &conf.values, params.theta_c);
    let refine_params = RefineParams {
        window: params.window,
        temperature: params.fine_temperature,
        attention: model.fine_attention.clone(),
    };
    let fine = refine(&coarse, &lp, &cp, &refine_params)?;
    Ok(MatchOutput {
        coarse,
        fine,
        repeatability: rep,
        lidar_grid: fl.grid_shape,
        camera_grid: fc.grid_shape,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationParams {
    pub matching: MatchParams,
    pub ransac: RansacParams,
    /// Radius for nearest-neighbour depth filling when lifting.
    pub fill_radius: f64,
    /// Resize the camera image so its long side has this many pixels.
    pub long_side: Option<usize>,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            matching: MatchParams::default(),
            ransac: RansacParams::default(),
            fill_radius: 8.0,
            long_side: None,
        }
    }
}

impl CalibrationParams {
    /// Sharper temperatures suited to the hand-crafted descriptors, whose
    /// cosine similarities sit in a narrow band.
    pub fn hand_crafted() -> Self {
        let mut p = Self::default();
        p.matching.temperature = 0.03;
        p.matching.fine_temperature = 0.1;
        p
    }

    /// Reads `theta_c`, `temperature`, `window`, `fine_temperature`,
    /// `mnn_on_fused`, `ransac_iters`, `inlier_threshold`, `confidence`,
    /// `seed`, `fill_radius` and `long_side`; missing keys keep defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Self::from_kv_with(kv, &Self::default())
    }

    /// [`CalibrationParams::from_kv`] with missing keys taken from `d`.
    pub fn from_kv_with(kv: &KvConfig, d: &Self) -> Result<Self> {
        let p = Self {
            matching: MatchParams {
                theta_c: kv.get_or("theta_c", d.matching.theta_c)?,
                temperature: kv.get_or("temperature", d.matching.temperature)?,
                window: kv.get_or("window", d.matching.window)?,
                fine_temperature: kv.get_or("fine_temperature", d.matching.fine_temperature)?,
                mnn_on_fused: kv.get_or("mnn_on_fused", d.matching.mnn_on_fused)?,
            },
            ransac: RansacParams {
                max_iters: kv.get_or("ransac_iters", d.ransac.max_iters)?,
                inlier_threshold: kv.get_or("inlier_threshold", d.ransac.inlier_threshold)?,
                confidence: kv.get_or("confidence", d.ransac.confidence)?,
                seed: kv.get_or("seed", d.ransac.seed)?,
            },
            fill_radius: kv.get_or("fill_radius", d.fill_radius)?,
            long_side: kv.get("long_side")?.or(d.long_side),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("theta_c", self.matching.theta_c);
        kv.set("temperature", self.matching.temperature);
        kv.set("window", self.matching.window);
        kv.set("fine_temperature", self.matching.fine_temperature);
        kv.set("mnn_on_fused", self.matching.mnn_on_fused);
        kv.set("ransac_iters", self.ransac.max_iters);
        kv.set("inlier_threshold", self.ransac.inlier_threshold);
        kv.set("confidence", self.ransac.confidence);
        kv.set("seed", self.ransac.seed);
        kv.set("fill_radius", self.fill_radius);
        if let Some(l) = self.long_side {
            kv.set("long_side", l);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        crate::config::check_range("inlier_threshold", self.ransac.inlier_threshold, 0.0, f64::INFINITY, true)?;
        crate::config::check_range("confidence", self.ransac.confidence, 0.0, 1.0, true)?;
        crate::config::check_range("fill_radius", self.fill_radius, 0.0, f64::INFINITY, false)?;
        if self.ransac.max_iters == 0 {
            return Err(Error::InvalidConfig("ransac_iters must be at least 1".into()));
        }
        if self.long_side == Some(0) {
            return Err(Error::InvalidConfig("long_side must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate products of one registration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub estimate: PoseEstimate,
    pub matches: MatchOutput,
    pub lift: LiftResult,
    /// Intrinsics the matching ran at (after any resize).
    pub intrinsics: CameraIntrinsics,
}

/// A failed run keeps whatever was computed before the failure.
#[derive(Debug)]
pub struct CalibrationFailure {
    pub error: Error,
    pub matches: Option<MatchOutput>,
    /// Intrinsics the matching ran at, when it got that far.
    pub intrinsics: Option<CameraIntrinsics>,
}

/// The projected LiDAR view used for matching.
pub struct VirtualView {
    pub image: IntensityImage,
    pub depth: DepthMap,
    pub camera: GrayImage,
    pub intrinsics: CameraIntrinsics,
}

/// Resizes the camera image if asked and projects the cloud through
/// `initial` with the matching intrinsics.
pub fn virtual_view(
    cloud: &PointCloud4D,
    camera: &GrayImage,
    k: &CameraIntrinsics,
    initial: &RigidTransform,
    long_side: Option<usize>,
) -> Result<VirtualView> {
    let (camera, k) = match long_side {
        Some(l) if l != camera.width().max(camera.height()) => {
            let (img, s) = resize_long_side(camera, l)?;
            let k = k.scaled(s, img.width(), img.height());
            (img, k)
        }
        _ => (camera.clone(), *k),
    };
    let (image, depth) = project(cloud, initial, &k)?;
    Ok(VirtualView {
        image,
        depth,
        camera,
        intrinsics: k,
    })
}

/// Estimates the LiDAR → camera transform starting from `initial`.
pub fn calibrate(
    cloud: &PointCloud4D,
    camera: &GrayImage,
    k: &CameraIntrinsics,
    initial: &RigidTransform,
    model: &MatcherModel,
    params: &CalibrationParams,
) -> std::result::Result<Calibration, CalibrationFailure> {
    let fail = |error: Error| CalibrationFailure {
        error,
        matches: None,
        intrinsics: None,
    };
    params.validate().map_err(fail)?;
    let view = virtual_view(cloud, camera, k, initial, params.long_side).map_err(fail)?;
    let matches = match_views(&view.image, &view.camera, model, &params.matching).map_err(fail)?;
    let depth = LiftDepth::new(view.depth, params.fill_radius);
    let lift = lift_matches(&matches.fine, &depth, &view.intrinsics, initial, &view.intrinsics);
    match ransac_pnp(&lift.correspondences, &view.intrinsics, &params.ransac) {
        Ok(estimate) => Ok(Calibration {
            estimate,
            matches,
            lift,
            intrinsics: view.intrinsics,
        }),
        Err(error) => Err(CalibrationFailure {
            error,
            matches: Some(matches),
            intrinsics: Some(view.intrinsics),
        }),
    }
}
