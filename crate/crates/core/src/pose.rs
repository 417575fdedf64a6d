//! 3D-2D correspondences and extrinsic estimation with EPnP inside RANSAC.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{back_project, fill_depth_nearest, CameraIntrinsics, RigidTransform};
use crate::matcher::FineMatchSet;
use crate::raster::DepthMap;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence3D2D {
    /// Point in the LiDAR frame, meters.
    pub point3d: Vector3<f64>,
    /// Camera pixel `(u, v)`.
    pub pixel2d: (f64, f64),
    pub weight: f64,
    /// Depth was borrowed from a neighbouring pixel.
    pub filled: bool,
}

/// Raw projected depth together with its hole-filled version.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftDepth {
    pub raw: DepthMap,
    pub filled: DepthMap,
}

impl LiftDepth {
    pub fn new(raw: DepthMap, max_radius: f64) -> Self {
        let filled = fill_depth_nearest(&raw, max_radius);
        Self { raw, filled }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LiftResult {
    pub correspondences: Vec<Correspondence3D2D>,
    /// Matches with no depth even after filling.
    pub dropped: usize,
    /// Matches whose camera pixel fell outside the image.
    pub outside: usize,
}

/// Lifts the LiDAR side of each fine match to 3D. The LiDAR image was
/// rendered through `virtual_pose` (LiDAR → virtual view), so the lifted
/// point is mapped back with its inverse. Camera pixels are checked against
/// `k_cam`.
pub fn lift_matches(
    fine: &FineMatchSet,
    depth: &LiftDepth,
    k_lidar: &CameraIntrinsics,
    virtual_pose: &RigidTransform,
    k_cam: &CameraIntrinsics,
) -> LiftResult {
    let to_lidar = virtual_pose.inverse();
    let mut out = LiftResult::default();
    for m in &fine.matches {
        if !k_cam.contains(m.camera.0, m.camera.1) {
            out.outside += 1;
            continue;
        }
        let Some((x, y)) = k_lidar.pixel_of(m.lidar.0, m.lidar.1) else {
            out.dropped += 1;
            continue;
        };
        let Some(d) = depth.filled.at(x, y) else {
            out.dropped += 1;
            continue;
        };
        let Ok(p) = back_project(m.lidar.0, m.lidar.1, d, k_lidar) else {
            out.dropped += 1;
            continue;
        };
        out.correspondences.push(Correspondence3D2D {
            point3d: to_lidar.apply(&p),
            pixel2d: m.camera,
            weight: m.confidence,
            filled: depth.raw.at(x, y).is_none(),
        });
    }
    out
}

/// Pixel distance between `c.pixel2d` and the projection of `c.point3d`
/// under `t`; infinite for points at or behind the camera.
pub fn reprojection_error(t: &RigidTransform, k: &CameraIntrinsics, c: &Correspondence3D2D) -> f64 {
    match k.project_point(&t.apply(&c.point3d)) {
        Some((u, v)) => ((u - c.pixel2d.0).powi(2) + (v - c.pixel2d.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

fn mean_error(t: &RigidTransform, k: &CameraIntrinsics, corrs: &[Correspondence3D2D]) -> f64 {
    corrs.iter().map(|c| reprojection_error(t, k, c)).sum::<f64>() / corrs.len() as f64
}

/// Relative spread below which a principal direction counts as flat.
const PLANAR_RATIO: f64 = 1e-5;
/// Relative spread below which points count as collinear.
const DEGENERATE_RATIO: f64 = 1e-7;
const GAUSS_NEWTON_STEPS: usize = 10;

/// Pose mapping the correspondences' 3D points into the camera frame.
///
/// Control points are the centroid plus the principal directions scaled by
/// their spread; three are used when the points are (nearly) coplanar.
/// Camera-frame control points lie in the null space of the projection
/// system; scale coefficients are initialised from 1-, 2- and 3-vector
/// linearisations, refined by Gauss-Newton on the inter-control-point
/// distances, and the candidate with the smallest reprojection error wins.
pub fn epnp(corrs: &[Correspondence3D2D], k: &CameraIntrinsics) -> Result<RigidTransform> {
    let n = corrs.len();
    if n < 4 {
        return Err(Error::InsufficientCorrespondences(n));
    }
    let pts: Vec<Vector3<f64>> = corrs.iter().map(|c| c.point3d).collect();
    if pts.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::DegenerateConfiguration("non-finite 3D point".into()));
    }
    let centroid = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = cov.symmetric_eigen();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spread: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    if spread[0] <= 0.0 || spread[1] < DEGENERATE_RATIO * spread[0] {
        return Err(Error::DegenerateConfiguration("3D points are collinear or coincident".into()));
    }
    let planar = spread[2] < PLANAR_RATIO * spread[0];
    let m = if planar { 3 } else { 4 };
    let mut ctrl = vec![centroid];
    for (a, &i) in order.iter().take(m - 1).enumerate() {
        ctrl.push(centroid + eig.eigenvectors.column(i) * spread[a]);
    }

    // barycentric coordinates
    let basis = DMatrix::from_fn(3, m - 1, |r, c| ctrl[c + 1][r] - ctrl[0][r]);
    let pinv = basis
        .clone()
        .pseudo_inverse(1e-12 * spread[0])
        .map_err(|e| Error::DegenerateConfiguration(e.to_string()))?;
    let alphas: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            let rest = &pinv * DVector::from_column_slice((p - ctrl[0]).as_slice());
            let mut a = vec![1.0 - rest.sum()];
            a.extend(rest.iter());
            a
        })
        .collect();

    // projection system in normalized coordinates, padded to be at least square
    let rows = (2 * n).max(3 * m);
    let mut mm = DMatrix::zeros(rows, 3 * m);
    for (i, (c, a)) in corrs.iter().zip(&alphas).enumerate() {
        let xn = (c.pixel2d.0 - k.cx) / k.fx;
        let yn = (c.pixel2d.1 - k.cy) / k.fy;
        for j in 0..m {
            mm[(2 * i, 3 * j)] = a[j];
            mm[(2 * i, 3 * j + 2)] = -a[j] * xn;
            mm[(2 * i + 1, 3 * j + 1)] = a[j];
            mm[(2 * i + 1, 3 * j + 2)] = -a[j] * yn;
        }
    }
    let svd = mm.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut sv: Vec<usize> = (0..3 * m).collect();
    sv.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let dims = m;
    let null: Vec<DVector<f64>> = sv.iter().take(dims).map(|&r| vt.row(r).transpose()).collect();

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let target: Vec<f64> = pairs.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()).collect();
    // differences of each null vector between control points a and b
    let dv: Vec<Vec<Vector3<f64>>> = pairs
        .iter()
        .map(|&(a, b)| {
            null.iter()
                .map(|v| {
                    Vector3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    let mut best: Option<(f64, RigidTransform)> = None;
    // the fourth case only linearises the products with the first vector
    for cases in 1..=dims {
        let Some(init) = linearized_betas(&dv, &target, cases) else {
            continue;
        };
        let mut betas = vec![0.0; dims];
        betas[..cases].copy_from_slice(&init);
        gauss_newton(&dv, &target, &mut betas);
        let Some(t) = pose_from_betas(&betas, &null, &alphas, &pts, m) else {
            continue;
        };
        let err = mean_error(&t, k, corrs);
        if best.as_ref().map_or(true, |b| err < b.0) {
            best = Some((err, t));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::DegenerateConfiguration("no EPnP candidate could be aligned".into()))
}

/// Least-squares solution of the distance constraints linearised in the
/// products `β_a β_b` over the first `cases` null vectors.
fn linearized_betas(dv: &[Vec<Vector3<f64>>], target: &[f64], cases: usize) -> Option<Vec<f64>> {
    let prods: Vec<(usize, usize)> = if cases == 4 {
        // ten products would be underdetermined by six distances
        (0..4).map(|b| (0, b)).collect()
    } else {
        (0..cases).flat_map(|a| (a..cases).map(move |b| (a, b))).collect()
    };
    let l = DMatrix::from_fn(dv.len(), prods.len(), |r, c| {
        let (a, b) = prods[c];
        let f = if a == b { 1.0 } else { 2.0 };
        f * dv[r][a].dot(&dv[r][b])
    });
    let rho = DVector::from_column_slice(target);
    let x = l.svd(true, true).solve(&rho, 1e-14).ok()?;
    let b11 = x[0];
    if !b11.is_finite() || b11.abs() < 1e-300 {
        return None;
    }
    let b1 = b11.abs().sqrt();
    let mut betas = vec![b1];
    for k in 1..cases {
        let idx = prods.iter().position(|&p| p == (0, k)).expect("listed");
        betas.push(x[idx] / b1);
    }
    if b11 < 0.0 {
        // the overall sign is fixed later by the depth check
        betas.iter_mut().skip(1).for_each(|b| *b = -*b);
    }
    Some(betas)
}

fn gauss_newton(dv: &[Vec<Vector3<f64>>], target: &[f64], betas: &mut [f64]) {
    let dims = betas.len();
    for _ in 0..GAUSS_NEWTON_STEPS {
        let mut j = DMatrix::zeros(dv.len(), dims);
        let mut r = DVector::zeros(dv.len());
        for (p, d) in dv.iter().enumerate() {
            let cur: Vector3<f64> = d.iter().zip(betas.iter()).map(|(v, b)| v * *b).sum();
            r[p] = cur.norm_squared() - target[p];
            for k in 0..dims {
                j[(p, k)] = 2.0 * cur.dot(&d[k]);
            }
        }
        let Ok(step) = j.svd(true, true).solve(&(-r), 1e-14) else {
            return;
        };
        if !step.iter().all(|s| s.is_finite()) {
            return;
        }
        for (b, s) in betas.iter_mut().zip(step.iter()) {
            *b += s;
        }
        if step.norm() < 1e-15 * (1.0 + betas.iter().map(|b| b * b).sum::<f64>().sqrt()) {
            return;
        }
    }
}

fn pose_from_betas(
    betas: &[f64],
    null: &[DVector<f64>],
    alphas: &[Vec<f64>],
    pts: &[Vector3<f64>],
    m: usize,
) -> Option<RigidTransform> {
    let x: DVector<f64> = null.iter().zip(betas).map(|(v, b)| v * *b).sum();
    let ctrl: Vec<Vector3<f64>> = (0..m).map(|j| Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])).collect();
    let mut cam: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| a.iter().zip(&ctrl).map(|(w, c)| c * *w).sum())
        .collect();
    if cam.iter().map(|p| p.z).sum::<f64>() < 0.0 {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    rigid_align(pts, &cam)
}

/// Least-squares rotation and translation with `dst ≈ R·src + t`.
pub fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidTransform> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * vt;
    let t = cd - r * cs;
    if !r.iter().chain(t.iter()).all(|v| v.is_finite()) {
        return None;
    }
    RigidTransform::from_approx(r, t, 1e-6).ok()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub max_iters: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            inlier_threshold: 4.0,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// LiDAR → camera.
    pub transform: RigidTransform,
    pub inlier_mask: Vec<bool>,
    /// Mean over inliers, pixels.
    pub mean_reprojection_error: f64,
    pub iterations_used: usize,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|b| **b).count()
    }
}

fn score(
    t: &RigidTransform,
    k: &CameraIntrinsics,
    corrs: &[Correspondence3D2D],
    thr: f64,
) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(corrs.len());
    let (mut count, mut sum) = (0, 0.0);
    for c in corrs {
        let e = reprojection_error(t, k, c);
        let inlier = e < thr;
        if inlier {
            count += 1;
            sum += e;
        }
        mask.push(inlier);
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (mask, count, mean)
}

/// Robust EPnP: seeded minimal 4-point hypotheses, inliers by reprojection
/// error, adaptive stopping, and a final refit on the inlier set.
pub fn ransac_pnp(corrs: &[Correspondence3D2D], k: &CameraIntrinsics, params: &RansacParams) -> Result<PoseEstimate> {
    let n = corrs.len();
    if n < 4 {
        return Err(Error::InsufficientCorrespondences(n));
    }
    if !(params.inlier_threshold > 0.0) || !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(Error::InvalidConfig("RANSAC threshold must be positive and confidence in (0, 1)".into()));
    }
    let mut rng = SplitMix64::new(params.seed);
    let mut best: Option<(usize, f64, RigidTransform, Vec<bool>)> = None;
    let mut needed = params.max_iters;
    let mut it = 0;
    while it < needed.min(params.max_iters) {
        it += 1;
        let sample: Vec<Correspondence3D2D> = rng.sample_distinct(n, 4).into_iter().map(|i| corrs[i]).collect();
        let Ok(t) = epnp(&sample, k) else {
            continue;
        };
        let (mask, count, mean) = score(&t, k, corrs, params.inlier_threshold);
        let better = best
            .as_ref()
            .map_or(true, |b| count > b.0 || (count == b.0 && mean < b.1));
        if better {
            best = Some((count, mean, t, mask));
            let w = count as f64 / n as f64;
            let miss = 1.0 - w.powi(4);
            needed = if miss <= 0.0 {
                0
            } else if miss >= 1.0 {
                params.max_iters
            } else {
                let k = ((1.0 - params.confidence).ln() / miss.ln()).ceil();
                if k.is_finite() { k.max(1.0) as usize } else { params.max_iters }
            };
        }
    }
    let Some((count, mean, t, mask)) = best else {
        return Err(Error::NoConsensus(0));
    };
    if count < 4 {
        return Err(Error::NoConsensus(count));
    }
    let inliers: Vec<Correspondence3D2D> = corrs.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
    let (transform, mask, mean) = match epnp(&inliers, k) {
        Ok(refit) => {
            let (rmask, rcount, rmean) = score(&refit, k, corrs, params.inlier_threshold);
            if rcount >= count {
                (refit, rmask, rmean)
            } else {
                (t, mask, mean)
            }
        }
        Err(_) => (t, mask, mean),
    };
    Ok(PoseEstimate {
        transform,
        inlier_mask: mask,
        mean_reprojection_error: mean,
        iterations_used: it,
    })
}

/// Sidecar text for a pose file.
pub fn format_report(e: &PoseEstimate, total: usize) -> String {
    format!(
        "inliers {}\ncorrespondences {}\nmean_reprojection_error {}\niterations {}\n",
        e.inlier_count(),
        total,
        e.mean_reprojection_error,
        e.iterations_used
    )
}

pub fn write_report(path: &Path, e: &PoseEstimate, total: usize) -> Result<()> {
    crate::io::write_atomic(path, format_report(e, total).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::FineMatch;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 256.0, 192.0, 512, 384).unwrap()
    }

    fn random_pose(rng: &mut SplitMix64) -> RigidTransform {
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        RigidTransform::from_axis_angle(
            axis,
            rng.uniform(0.0, 0.5),
            Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)),
        )
    }

    /// Points visible from `pose`, built in the camera frame and mapped back;
    /// planar sets lie on a fronto-parallel plane of the camera.
    fn synth(pose: &RigidTransform, n: usize, planar: bool, rng: &mut SplitMix64) -> Vec<Correspondence3D2D> {
        let inv = pose.inverse();
        let k = k();
        (0..n)
            .map(|_| {
                let z = if planar { 8.0 } else { rng.uniform(4.0, 20.0) };
                let u = rng.uniform(20.0, 490.0);
                let v = rng.uniform(20.0, 360.0);
                let pc = back_project(u, v, z, &k).unwrap();
                let pw = inv.apply(&pc);
                Correspondence3D2D {
                    point3d: pw,
                    pixel2d: (u, v),
                    weight: 1.0,
                    filled: false,
                }
            })
            .collect()
    }

    fn errors(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
        let d = b.inverse().compose(a);
        let r = d.rotation();
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
        let c = (r.trace() - 1.0) / 2.0;
        (s.atan2(c).to_degrees(), d.translation().norm())
    }

    #[test]
    fn epnp_recovers_general_pose() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let corrs = synth(&pose, 8, false, &mut rng);
            let est = epnp(&corrs, &k()).unwrap();
            let (er, et) = errors(&est, &pose);
            assert!(er < 1e-6 && et < 1e-6, "{er} {et}");
        }
    }

    #[test]
    fn epnp_recovers_planar_pose() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let corrs = synth(&pose, 20, true, &mut rng);
            let est = epnp(&corrs, &k()).unwrap();
            let (er, et) = errors(&est, &pose);
            assert!(er < 1e-5 && et < 1e-5, "{er} {et}");
        }
    }

    // four points leave a four-dimensional null space and several local
    // minima, so only most minimal samples are exact
    #[test]
    fn epnp_minimal_four_points() {
        let mut rng = SplitMix64::new(3);
        let mut good = 0;
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let corrs = synth(&pose, 4, false, &mut rng);
            if let Ok(est) = epnp(&corrs, &k()) {
                let (er, et) = errors(&est, &pose);
                good += (er < 1e-3 && et < 1e-3) as usize;
            }
        }
        assert!(good >= 35, "{good}");
    }

    #[test]
    fn epnp_degenerate_and_insufficient() {
        let on_axis: Vec<_> = (1..=6)
            .map(|z| Correspondence3D2D {
                point3d: Vector3::new(0.0, 0.0, z as f64),
                pixel2d: (256.0, 192.0),
                weight: 1.0,
                filled: false,
            })
            .collect();
        assert!(matches!(epnp(&on_axis, &k()), Err(Error::DegenerateConfiguration(_))));
        assert!(matches!(epnp(&on_axis[..3], &k()), Err(Error::InsufficientCorrespondences(3))));
    }

    #[test]
    fn ransac_all_inliers_and_contamination() {
        let mut rng = SplitMix64::new(4);
        let pose = random_pose(&mut rng);
        let clean = synth(&pose, 30, false, &mut rng);
        let est = ransac_pnp(&clean, &k(), &RansacParams::default()).unwrap();
        assert!(est.inlier_mask.iter().all(|b| *b));
        let (er, et) = errors(&est.transform, &pose);
        assert!(er < 1e-6 && et < 1e-6);

        let mut corrs = synth(&pose, 50, false, &mut rng);
        for c in corrs.iter_mut().take(10) {
            c.pixel2d = (rng.uniform(0.0, 512.0), rng.uniform(0.0, 384.0));
        }
        let p = RansacParams {
            seed: 9,
            ..Default::default()
        };
        let est = ransac_pnp(&corrs, &k(), &p).unwrap();
        let (er, et) = errors(&est.transform, &pose);
        assert!(er < 0.1 && et < 0.01);
        for (c, m) in corrs.iter().zip(&est.inlier_mask) {
            if *m {
                assert!(reprojection_error(&est.transform, &k(), c) < p.inlier_threshold);
            }
        }
        assert!(est.inlier_mask[..10].iter().filter(|m| **m).count() <= 1);
        assert_eq!(ransac_pnp(&corrs, &k(), &p).unwrap(), est);
        assert!(matches!(
            ransac_pnp(&corrs[..3], &k(), &p),
            Err(Error::InsufficientCorrespondences(3))
        ));
    }

    #[test]
    fn lift_uses_filled_depth_and_virtual_pose() {
        let k = k();
        let mut raw = DepthMap::empty(512, 384);
        raw.depths.set(100, 50, 10.0);
        raw.valid.set(100, 50, true);
        let depth = LiftDepth::new(raw, 3.0);
        let m = |u: f64, v: f64| FineMatch {
            lidar: (u, v),
            camera: (u, v),
            confidence: 0.5,
            tau2: 1.0,
            window_center: (u, v),
            clamped: false,
        };
        let fine = FineMatchSet {
            matches: vec![m(100.0, 50.0), m(102.0, 50.0), m(300.0, 300.0), m(100.0, 50.0)],
            window: 5,
        };
        let mut fine_out = fine.clone();
        fine_out.matches[3].camera = (600.0, 10.0);
        let virt = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let r = lift_matches(&fine_out, &depth, &k, &virt, &k);
        assert_eq!((r.correspondences.len(), r.dropped, r.outside), (2, 1, 1));
        let expect = back_project(100.0, 50.0, 10.0, &k).unwrap() - Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(r.correspondences[0].point3d, expect);
        assert!(!r.correspondences[0].filled);
        assert!(r.correspondences[1].filled);
        assert_eq!(r.correspondences[1].point3d.z, 10.0);
    }
}
