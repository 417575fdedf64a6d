//! Camera and LiDAR geometry: rigid transforms, pinhole intrinsics,
//! rasterizing a 4D cloud into an intensity image plus depth map, and the
//! inverse lifting of pixels back to 3D.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, GrayImage, Grid, IntensityImage};

/// Tolerance on `‖RᵀR − I‖∞` for a rotation to be accepted as-is.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default search radius used when filling missing depth.
pub const DEFAULT_FILL_RADIUS: f64 = 8.0;

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let err = orthonormality_error(&rotation);
        if err >= ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation not orthonormal (‖RᵀR − I‖∞ = {err:e})"
            )));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::InvalidTransform("rotation has negative determinant".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects an approximately orthonormal matrix onto SO(3) (nearest in
    /// Frobenius norm). Fails if the input is far from a rotation.
    pub fn from_approx(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        if orthonormality_error(&rotation) > tol || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidTransform(
                "matrix is not close to a proper rotation".into(),
            ));
        }
        Self::new(nearest_rotation(&rotation), translation)
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 || angle == 0.0 {
            Rotation3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
        };
        Self::from_rotation(rot, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        rows
    }
}

/// `‖RᵀR − I‖∞` (max-abs entry).
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest proper rotation to `m` via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Pinhole intrinsics with image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image size must be nonzero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics for the image resized by `scale` to `width × height`.
    pub fn scaled(&self, scale: f64, width: usize, height: usize) -> Self {
        Self {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: self.cx * scale,
            cy: self.cy * scale,
            width,
            height,
        }
    }

    /// Continuous pixel coordinates of a camera-frame point, `None` if `z ≤ 0`.
    #[inline]
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Nearest pixel for continuous coordinates, if inside the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (ur, vr) = (u.round(), v.round());
        if ur >= 0.0 && vr >= 0.0 && ur < self.width as f64 && vr < self.height as f64 {
            Some((ur as usize, vr as usize))
        } else {
            None
        }
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        self.pixel_of(u, v).is_some()
    }
}

/// Unordered LiDAR returns `(x, y, z, intensity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud4D {
    points: Vec<[f64; 4]>,
}

impl PointCloud4D {
    /// Wraps points whose intensity is already in `[0, 1]`.
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidCloud(format!("point {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::InvalidCloud(format!(
                    "point {i} intensity {} outside [0, 1]",
                    p[3]
                )));
            }
        }
        Ok(Self { points })
    }

    /// Min-max normalizes raw sensor intensity into `[0, 1]`. A cloud with
    /// constant intensity maps to all zeros.
    pub fn from_raw(mut points: Vec<[f64; 4]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[3]), hi.max(p[3]))
            });
        let span = hi - lo;
        for p in &mut points {
            p[3] = if span > 0.0 { ((p[3] - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rasterizes `cloud` seen through `pose` (cloud frame → camera frame) into
/// an intensity image and depth map sharing one validity grid. Points land on
/// the nearest pixel; when several land on the same pixel the nearest one
/// wins.
pub fn project(
    cloud: &PointCloud4D,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<(IntensityImage, DepthMap)> {
    k.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidCloud("cloud is empty".into()));
    }
    let (w, h) = (k.width, k.height);
    let mut depth = Grid::filled(w, h, f64::INFINITY);
    let mut intensity = Grid::filled(w, h, 0.0);
    let mut hits = 0usize;
    for p in cloud.points() {
        let pc = pose.apply(&Vector3::new(p[0], p[1], p[2]));
        let Some((u, v)) = k.project_point(&pc) else {
            continue;
        };
        let Some((x, y)) = k.pixel_of(u, v) else {
            continue;
        };
        hits += 1;
        let slot = depth.get_mut(x, y);
        if pc.z < *slot {
            *slot = pc.z;
            intensity.set(x, y, p[3]);
        }
    }
    if hits == 0 {
        return Err(Error::EmptyProjection);
    }
    let valid = depth.map(|d| d.is_finite());
    for d in depth.as_mut_slice() {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    Ok((
        IntensityImage {
            pixels: intensity,
            valid: valid.clone(),
        },
        DepthMap {
            depths: depth,
            valid,
        },
    ))
}

/// Lifts pixel `(u, v)` at `depth` to a camera-frame point.
pub fn back_project(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        depth * (u - k.cx) / k.fx,
        depth * (v - k.cy) / k.fy,
        depth,
    ))
}

/// Fills each invalid pixel from its nearest valid pixel within `max_radius`
/// (Euclidean). Candidates at equal distance are taken in row-major order.
pub fn fill_depth_nearest(d: &DepthMap, max_radius: f64) -> DepthMap {
    let (depths, valid) = fill_nearest(&d.depths, &d.valid, max_radius);
    DepthMap { depths, valid }
}

/// Nearest-valid fill of `values` under mask `valid`; returns the filled
/// values and the grown mask.
pub(crate) fn fill_nearest(values: &Grid<f64>, valid: &Grid<bool>, max_radius: f64) -> (Grid<f64>, Grid<bool>) {
    let r = if max_radius.is_finite() { max_radius.max(0.0) } else { 0.0 };
    let ri = r.floor() as isize;
    let r2 = r * r;
    let mut offsets: Vec<(isize, isize, isize)> = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let dd = dx * dx + dy * dy;
            if dd > 0 && (dd as f64) <= r2 {
                offsets.push((dd, dy, dx));
            }
        }
    }
    // (distance, row, col) order reproduces row-major tie-breaking
    offsets.sort_unstable();

    let (w, h) = (values.width() as isize, values.height() as isize);
    let mut out_v = values.clone();
    let mut out_m = valid.clone();
    if offsets.is_empty() || !valid.as_slice().iter().any(|v| *v) {
        return (out_v, out_m);
    }
    for y in 0..h {
        for x in 0..w {
            if *valid.get(x as usize, y as usize) {
                continue;
            }
            let found = offsets.iter().find_map(|&(_, dy, dx)| {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= w || yy >= h || !*valid.get(xx as usize, yy as usize) {
                    return None;
                }
                Some(*values.get(xx as usize, yy as usize))
            });
            if let Some(z) = found {
                out_v.set(x as usize, y as usize, z);
                out_m.set(x as usize, y as usize, true);
            }
        }
    }
    (out_v, out_m)
}

/// Bilinearly resizes `img` so that its longer side equals `target`,
/// returning the applied scale. The shorter side is rounded to the nearest
/// integer (at least 1).
pub fn resize_long_side(img: &GrayImage, target: usize) -> Result<(GrayImage, f64)> {
    if target == 0 {
        return Err(Error::InvalidConfig("resize target must be positive".into()));
    }
    let (w, h) = (img.width(), img.height());
    let long = w.max(h);
    if long == 0 {
        return Err(Error::InvalidConfig("cannot resize an empty image".into()));
    }
    if long == target {
        return Ok((img.clone(), 1.0));
    }
    let scale = target as f64 / long as f64;
    let (nw, nh) = if w >= h {
        (target, ((h as f64 * scale).round() as usize).max(1))
    } else {
        (((w as f64 * scale).round() as usize).max(1), target)
    };
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let src = &img.pixels;
    let out = Grid::from_fn(nw, nh, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        bilinear(src, fx, fy)
    });
    Ok((GrayImage::new(out), scale))
}

/// Bilinear sample at continuous coordinates inside the grid.
#[inline]
pub(crate) fn bilinear(g: &Grid<f64>, fx: f64, fy: f64) -> f64 {
    let x0 = fx.floor() as isize;
    let y0 = fy.floor() as isize;
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let p00 = g.get_clamped(x0, y0);
    let p10 = g.get_clamped(x0 + 1, y0);
    let p01 = g.get_clamped(x0, y0 + 1);
    let p11 = g.get_clamped(x0 + 1, y0 + 1);
    let top = p00 + (p10 - p00) * ax;
    let bot = p01 + (p11 - p01) * ax;
    top + (bot - top) * ay
}
