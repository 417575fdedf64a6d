//! Ground-truth labels and the training losses.
//!
//! Labels come from projecting LiDAR-view depth into the camera with the
//! known pose. Each loss returns its value together with the analytic
//! gradient, so any trainer can use them directly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::features::COARSE_STRIDE;
use crate::geometry::{back_project, CameraIntrinsics, RigidTransform};
use crate::matcher::{sigmoid, ConfidenceMatrix, FineMatchSet, RepeatabilityMap};
use crate::raster::{DepthMap, Grid};

/// Clamp applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtParams {
    /// Reprojection threshold in pixels.
    pub rho: f64,
    /// Relative depth tolerance.
    pub delta_d: f64,
}

impl Default for GtParams {
    fn default() -> Self {
        Self { rho: 8.0, delta_d: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtMatch {
    /// LiDAR coarse-cell index.
    pub i: usize,
    /// Camera coarse-cell index.
    pub j: usize,
    /// LiDAR cell center pixel.
    pub lidar: (f64, f64),
    /// Where that pixel reprojects in the camera.
    pub camera: (f64, f64),
    /// Distance from `camera` to the center of cell `j`.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtMatchSet {
    pub matches: Vec<GtMatch>,
    pub rho: f64,
}

impl GtMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.i, m.j)).collect()
    }
}

/// Binary label per coarse cell, `cols × rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRepeatabilityMap {
    pub labels: Grid<bool>,
    pub delta_d: f64,
}

impl GtRepeatabilityMap {
    pub fn len(&self) -> usize {
        self.labels.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self) -> usize {
        self.labels.as_slice().iter().filter(|b| **b).count()
    }
}

/// Coarse grid `(rows, cols)` of an image of intrinsics `k`.
pub fn coarse_shape(k: &CameraIntrinsics) -> (usize, usize) {
    (k.height.div_ceil(COARSE_STRIDE), k.width.div_ceil(COARSE_STRIDE))
}

/// Camera-frame point and pixel of LiDAR pixel `(u, v)` at `depth`.
fn reproject(
    u: f64,
    v: f64,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Option<(f64, f64, f64)> {
    let (x, y) = k.pixel_of(u, v)?;
    let d = depth.at(x, y)?;
    let p = pose.apply(&back_project(u, v, d, k).ok()?);
    let (pu, pv) = k.project_point(&p)?;
    k.contains(pu, pv).then_some((pu, pv, p.z))
}

/// Whether a camera-frame depth `z` agrees with the camera depth at the
/// pixel nearest `(u, v)`.
fn depth_consistent(u: f64, v: f64, z: f64, d_cam: &DepthMap, k: &CameraIntrinsics, delta_d: f64) -> bool {
    let Some((x, y)) = k.pixel_of(u, v) else {
        return false;
    };
    match d_cam.at(x, y) {
        Some(dc) => (z - dc).abs() / dc <= delta_d,
        None => false,
    }
}

/// Coarse correspondences from depth: each LiDAR cell center is lifted,
/// moved by `gt_pose` and projected; its candidate is the camera cell that
/// contains the projection. Mutual nearest neighbours on the distance to the
/// camera cell center are kept when that distance is below `rho`. Both views
/// share the intrinsics `k`.
pub fn gt_coarse_matches(d_lidar: &DepthMap, k: &CameraIntrinsics, gt_pose: &RigidTransform, rho: f64) -> GtMatchSet {
    coarse_matches_impl(d_lidar, None, k, gt_pose, GtParams { rho, delta_d: 0.0 })
}

/// [`gt_coarse_matches`] that also drops cells whose center fails the depth
/// check against the camera depth `d_cam`, i.e. occluded cells.
pub fn gt_coarse_matches_visible(
    d_lidar: &DepthMap,
    d_cam: &DepthMap,
    k: &CameraIntrinsics,
    gt_pose: &RigidTransform,
    params: GtParams,
) -> GtMatchSet {
    coarse_matches_impl(d_lidar, Some(d_cam), k, gt_pose, params)
}

fn coarse_matches_impl(
    d_lidar: &DepthMap,
    d_cam: Option<&DepthMap>,
    k: &CameraIntrinsics,
    gt_pose: &RigidTransform,
    params: GtParams,
) -> GtMatchSet {
    let (rows, cols) = coarse_shape(k);
    let s = COARSE_STRIDE as f64;
    let half = s / 2.0;
    // best candidate per camera cell: (distance, match)
    let mut best: Vec<Option<GtMatch>> = vec![None; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = (s * c as f64 + half, s * r as f64 + half);
            let Some((pu, pv, z)) = reproject(u, v, d_lidar, k, gt_pose) else {
                continue;
            };
            if let Some(dc) = d_cam {
                if !depth_consistent(pu, pv, z, dc, k, params.delta_d) {
                    continue;
                }
            }
            let (jr, jc) = ((pv / s).floor() as usize, (pu / s).floor() as usize);
            let j = jr * cols + jc;
            let center = (s * jc as f64 + half, s * jr as f64 + half);
            let distance = ((pu - center.0).powi(2) + (pv - center.1).powi(2)).sqrt();
            let m = GtMatch {
                i: r * cols + c,
                j,
                lidar: (u, v),
                camera: (pu, pv),
                distance,
            };
            // cells are visited in increasing i, so ties keep the smallest
            if best[j].map_or(true, |b| distance < b.distance) {
                best[j] = Some(m);
            }
        }
    }
    let mut matches: Vec<GtMatch> = best.into_iter().flatten().filter(|m| m.distance < params.rho).collect();
    matches.sort_by_key(|m| m.i);
    GtMatchSet {
        matches,
        rho: params.rho,
    }
}

/// Repeatability labels: the top-left corner pixel of each LiDAR cell is
/// lifted with its depth, moved by `gt_pose` and projected. The label is 1
/// iff it lands inside the image and its depth agrees with `d_cam_gt` at
/// the landing pixel within the relative tolerance `delta_d`.
pub fn gt_repeatability(
    d_lidar: &DepthMap,
    d_cam_gt: &DepthMap,
    k: &CameraIntrinsics,
    gt_pose: &RigidTransform,
    delta_d: f64,
) -> GtRepeatabilityMap {
    let (rows, cols) = coarse_shape(k);
    let s = COARSE_STRIDE as f64;
    let labels = Grid::from_fn(cols, rows, |c, r| {
        let (u, v) = (s * c as f64, s * r as f64);
        match reproject(u, v, d_lidar, k, gt_pose) {
            Some((pu, pv, z)) => depth_consistent(pu, pv, z, d_cam_gt, k, delta_d),
            None => false,
        }
    });
    GtRepeatabilityMap { labels, delta_d }
}

/// Camera pixel each fine match should have found, from LiDAR depth and the
/// true pose; `None` where the depth is missing or the point leaves the
/// image.
pub fn gt_fine_targets(
    fine: &FineMatchSet,
    d_lidar: &DepthMap,
    k: &CameraIntrinsics,
    gt_pose: &RigidTransform,
) -> Vec<Option<(f64, f64)>> {
    fine.matches
        .iter()
        .map(|m| reproject(m.lidar.0, m.lidar.1, d_lidar, k, gt_pose).map(|(u, v, _)| (u, v)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLoss {
    pub value: f64,
    /// Nonzero gradient entries `(i, j, ∂L/∂S(i, j))`.
    pub grad: Vec<(usize, usize, f64)>,
    /// Entries raised to the log floor.
    pub clamped: usize,
}

/// `L_c = −(1/|M|) Σ log S(i, j)` over ground-truth pairs.
pub fn loss_coarse(s: &ConfidenceMatrix, gt: &GtMatchSet) -> Result<CoarseLoss> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let (n, m) = s.values.shape();
    let count = gt.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(gt.len());
    let mut clamped = 0;
    for g in &gt.matches {
        if g.i >= n || g.j >= m {
            return Err(Error::DimensionMismatch(format!(
                "pair ({}, {}) outside a {n}×{m} matrix",
                g.i, g.j
            )));
        }
        let v = s.values[(g.i, g.j)];
        if v < LOG_FLOOR {
            clamped += 1;
            value -= LOG_FLOOR.ln();
            grad.push((g.i, g.j, 0.0));
        } else {
            value -= v.ln();
            grad.push((g.i, g.j, -1.0 / (count * v)));
        }
    }
    Ok(CoarseLoss {
        value: value / count,
        grad,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineLoss {
    pub value: f64,
    /// `∂L/∂(u, v)` of each refined camera pixel.
    pub grad: Vec<(f64, f64)>,
}

/// `L_f = (1/|M|) Σ ‖ĵ − ĵ_gt‖ / τ²`, or with the squared norm. `τ²` is a
/// constant weight; the gradient of the norm at zero error is zero.
pub fn loss_fine(fine: &FineMatchSet, gt_pixels: &[(f64, f64)], squared: bool) -> Result<FineLoss> {
    if fine.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    if fine.len() != gt_pixels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} matches vs {} targets",
            fine.len(),
            gt_pixels.len()
        )));
    }
    let count = fine.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(fine.len());
    for (m, g) in fine.matches.iter().zip(gt_pixels) {
        let w = 1.0 / m.tau2.max(crate::matcher::TAU2_FLOOR);
        let (ex, ey) = (m.camera.0 - g.0, m.camera.1 - g.1);
        let norm = (ex * ex + ey * ey).sqrt();
        if squared {
            value += w * norm * norm;
            grad.push((2.0 * w * ex / count, 2.0 * w * ey / count));
        } else {
            value += w * norm;
            if norm > 0.0 {
                grad.push((w * ex / (norm * count), w * ey / (norm * count)));
            } else {
                grad.push((0.0, 0.0));
            }
        }
    }
    Ok(FineLoss {
        value: value / count,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatabilityLoss {
    pub value: f64,
    /// `∂L/∂z` for each pre-sigmoid logit.
    pub grad_logits: DVector<f64>,
    pub clamped: usize,
}

/// Mean binary cross-entropy between predicted scores and labels.
pub fn loss_repeatability(pred: &RepeatabilityMap, gt: &GtRepeatabilityMap) -> Result<RepeatabilityLoss> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let count = gt.len() as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    let mut grad = DVector::zeros(pred.len());
    for (k, (&z, &y)) in pred.logits.iter().zip(gt.labels.as_slice()).enumerate() {
        let p = sigmoid(z);
        let q = if y { p } else { 1.0 - p };
        if q < LOG_FLOOR {
            clamped += 1;
        }
        value -= q.max(LOG_FLOOR).ln();
        grad[k] = (p - if y { 1.0 } else { 0.0 }) / count;
    }
    Ok(RepeatabilityLoss {
        value: value / count,
        grad_logits: grad,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub total: f64,
    pub coarse_terms: usize,
    pub fine_terms: usize,
    pub repeatability_terms: usize,
}

impl LossReport {
    pub fn from_terms(l_c: f64, l_f: f64, l_r: f64) -> Self {
        Self {
            l_c,
            l_f,
            l_r,
            total: l_c + l_f + l_r,
            coarse_terms: 0,
            fine_terms: 0,
            repeatability_terms: 0,
        }
    }
}

/// All three losses and their sum.
pub fn total_loss(
    s: &ConfidenceMatrix,
    gt: &GtMatchSet,
    fine: &FineMatchSet,
    gt_pixels: &[(f64, f64)],
    pred: &RepeatabilityMap,
    gt_rep: &GtRepeatabilityMap,
    squared: bool,
) -> Result<LossReport> {
    let c = loss_coarse(s, gt)?;
    let f = loss_fine(fine, gt_pixels, squared)?;
    let r = loss_repeatability(pred, gt_rep)?;
    Ok(LossReport {
        coarse_terms: gt.len(),
        fine_terms: fine.len(),
        repeatability_terms: gt_rep.len(),
        ..LossReport::from_terms(c.value, f.value, r.value)
    })
}

/// Ground-truth matches in the match-dump layout, with confidence 1 and the
/// cell-center distance in the last column.
pub fn format_gt_matches(gt: &GtMatchSet) -> String {
    let mut s = format!("# rho={}\n", gt.rho);
    for m in &gt.matches {
        let _ = writeln!(
            s,
            "{} {} {} {} 1 {}",
            m.lidar.0, m.lidar.1, m.camera.0, m.camera.1, m.distance
        );
    }
    s
}

pub fn write_gt_matches(path: &Path, gt: &GtMatchSet) -> Result<()> {
    crate::io::write_atomic(path, format_gt_matches(gt).as_bytes())
}

/// Labels as a 0/255 PGM.
pub fn write_repeatability_pgm(path: &Path, gt: &GtRepeatabilityMap) -> Result<()> {
    let g = gt.labels.map(|b| if *b { 1.0 } else { 0.0 });
    crate::io::write_pgm(path, &g, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::FineMatch;
    use crate::rng::SplitMix64;
    use nalgebra::{DMatrix, Vector3};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn plane_depth(z: f64) -> DepthMap {
        DepthMap::from_depths(Grid::filled(64, 48, z))
    }

    #[test]
    fn identity_pose_pairs_every_valid_cell_with_itself() {
        let mut d = plane_depth(10.0);
        d.valid.set(12, 12, false);
        d.depths.set(12, 12, 0.0);
        let gt = gt_coarse_matches(&d, &k(), &RigidTransform::identity(), 8.0);
        // cell (1, 1) has its center at (12, 12)
        assert_eq!(gt.len(), 6 * 8 - 1);
        assert!(gt.matches.iter().all(|m| m.i == m.j && m.distance == 0.0));
        assert!(gt.matches.iter().all(|m| m.i != 9));
    }

    #[test]
    fn eight_pixel_shift_matches_neighbour() {
        // x-translation of 8 px at depth 10 with fx = 100
        let pose = RigidTransform::from_translation(Vector3::new(0.8, 0.0, 0.0));
        let gt = gt_coarse_matches(&plane_depth(10.0), &k(), &pose, 8.0);
        assert_eq!(gt.len(), 6 * 7);
        for m in &gt.matches {
            assert_eq!(m.j, m.i + 1);
            assert!(m.distance < 1e-9);
        }
    }

    #[test]
    fn repeatability_identity_and_bounds() {
        let mut d = plane_depth(10.0);
        d.valid.set(8, 0, false);
        d.depths.set(8, 0, 0.0);
        let gt = gt_repeatability(&d, &plane_depth(10.0), &k(), &RigidTransform::identity(), 0.05);
        assert_eq!(gt.len(), 48);
        assert!(!*gt.labels.get(1, 0));
        assert_eq!(gt.positives(), 47);
        // a large shift pushes every landing pixel off the image
        let away = RigidTransform::from_translation(Vector3::new(100.0, 0.0, 0.0));
        let gt = gt_repeatability(&d, &plane_depth(10.0), &k(), &away, 0.05);
        assert_eq!(gt.positives(), 0);
        // a nearer occluder in the camera depth rejects everything
        let gt = gt_repeatability(&d, &plane_depth(5.0), &k(), &RigidTransform::identity(), 0.05);
        assert_eq!(gt.positives(), 0);
    }

    #[test]
    fn repeatability_invariant_to_depth_rescaling() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..10 {
            let d = DepthMap::from_depths(Grid::from_fn(64, 48, |_, _| rng.uniform(5.0, 20.0)));
            let c = DepthMap::from_depths(Grid::from_fn(64, 48, |_, _| rng.uniform(5.0, 20.0)));
            let pose = RigidTransform::from_axis_angle(Vector3::new(0.1, 1.0, 0.0), rng.uniform(-0.05, 0.05), Vector3::zeros());
            let base = gt_repeatability(&d, &c, &k(), &pose, 0.3);
            for s in [0.5, 2.0, 4.0] {
                let scaled = gt_repeatability(&d.scaled(s), &c.scaled(s), &k(), &pose, 0.3);
                assert_eq!(scaled.labels, base.labels);
            }
        }
    }

    #[test]
    fn coarse_loss_examples_and_gradient() {
        let gt = GtMatchSet {
            matches: vec![GtMatch {
                i: 0,
                j: 1,
                lidar: (0.0, 0.0),
                camera: (0.0, 0.0),
                distance: 0.0,
            }],
            rho: 8.0,
        };
        let s = ConfidenceMatrix {
            values: DMatrix::from_row_slice(2, 2, &[0.1, 0.5, 0.2, 0.3]),
        };
        let l = loss_coarse(&s, &gt).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.grad, vec![(0, 1, -2.0)]);
        let ones = ConfidenceMatrix {
            values: DMatrix::from_element(2, 2, 1.0),
        };
        assert_eq!(loss_coarse(&ones, &gt).unwrap().value, 0.0);
        let zero = ConfidenceMatrix {
            values: DMatrix::zeros(2, 2),
        };
        let l = loss_coarse(&zero, &gt).unwrap();
        assert_eq!(l.clamped, 1);
        assert!(l.value.is_finite());
        let empty = GtMatchSet {
            matches: vec![],
            rho: 8.0,
        };
        assert!(matches!(loss_coarse(&s, &empty), Err(Error::EmptyGroundTruth)));
    }

    fn fine_match(camera: (f64, f64), tau2: f64) -> FineMatch {
        FineMatch {
            lidar: (0.0, 0.0),
            camera,
            confidence: 1.0,
            tau2,
            window_center: camera,
            clamped: false,
        }
    }

    #[test]
    fn fine_loss_examples() {
        let set = FineMatchSet {
            matches: vec![fine_match((13.0, 24.0), 2.0)],
            window: 5,
        };
        let l = loss_fine(&set, &[(10.0, 20.0)], false).unwrap();
        assert_eq!(l.value, 2.5);
        assert!((l.grad[0].0 - 0.3).abs() < 1e-15 && (l.grad[0].1 - 0.4).abs() < 1e-15);
        let l = loss_fine(&set, &[(13.0, 24.0)], false).unwrap();
        assert_eq!((l.value, l.grad[0]), (0.0, (0.0, 0.0)));
        let l = loss_fine(&set, &[(10.0, 20.0)], true).unwrap();
        assert_eq!(l.value, 12.5);
        assert!(matches!(
            loss_fine(&FineMatchSet::default(), &[], false),
            Err(Error::EmptyMatchSet)
        ));
        assert!(matches!(loss_fine(&set, &[], false), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn repeatability_loss_examples() {
        let labels = Grid::from_fn(4, 2, |x, _| x % 2 == 0);
        let gt = GtRepeatabilityMap { labels, delta_d: 0.05 };
        let half = RepeatabilityMap::from_logits(DVector::zeros(8));
        let l = loss_repeatability(&half, &gt).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = RepeatabilityMap::from_logits(DVector::from_fn(8, |k, _| if k % 2 == 0 { 40.0 } else { -40.0 }));
        assert!(loss_repeatability(&perfect, &gt).unwrap().value < 1e-12);
        let short = RepeatabilityMap::from_logits(DVector::zeros(7));
        assert!(matches!(loss_repeatability(&short, &gt), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn total_is_exact_sum() {
        let r = LossReport::from_terms(0.693147, 2.5, 0.693147);
        assert!((r.total - 3.886294).abs() < 1e-12);
        assert_eq!(LossReport::from_terms(0.0, 0.0, 0.0).total, 0.0);
    }

    #[test]
    fn coarse_loss_decreases_when_gt_entry_grows() {
        let mut rng = SplitMix64::new(8);
        let mut s = ConfidenceMatrix {
            values: DMatrix::from_fn(5, 5, |_, _| rng.uniform(0.01, 1.0)),
        };
        let gt = GtMatchSet {
            matches: (0..5)
                .map(|i| GtMatch {
                    i,
                    j: (i + 2) % 5,
                    lidar: (0.0, 0.0),
                    camera: (0.0, 0.0),
                    distance: 0.0,
                })
                .collect(),
            rho: 8.0,
        };
        let before = loss_coarse(&s, &gt).unwrap().value;
        s.values[(3, 0)] += 0.01;
        assert!(loss_coarse(&s, &gt).unwrap().value < before);
    }

    #[test]
    fn dumps() {
        let dir = tempfile::tempdir().unwrap();
        let gt = gt_coarse_matches(&plane_depth(10.0), &k(), &RigidTransform::identity(), 8.0);
        write_gt_matches(&dir.path().join("gt.txt"), &gt).unwrap();
        let text = std::fs::read_to_string(dir.path().join("gt.txt")).unwrap();
        assert_eq!(text.lines().count(), 49);
        let parsed = crate::matcher::parse_matches(&text, Path::new("gt")).unwrap();
        assert_eq!(parsed.len(), 48);
        let rep = gt_repeatability(&plane_depth(10.0), &plane_depth(10.0), &k(), &RigidTransform::identity(), 0.05);
        let p = dir.path().join("rep.pgm");
        write_repeatability_pgm(&p, &rep).unwrap();
        let back = crate::io::read_pgm(&p).unwrap();
        assert!(back.as_slice().iter().all(|v| *v == 1.0));
    }
}
