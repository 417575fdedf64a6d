//! Synthetic scenes with known extrinsics.
//!
//! A scene is a handful of textured rectangles and axis-aligned boxes in the
//! LiDAR frame (x forward, y up, z right; the ground plane is XZ). LiDAR
//! returns are ray-cast on an azimuth/elevation grid from the origin, so
//! sampling is dense near the sensor and sparse far away. The camera image
//! is rendered by ray-casting the same primitives, with gray level an affine
//! function of surface reflectance, so the two modalities agree on texture
//! but not on density or value range.

use nalgebra::Vector3;

use crate::config::{parse_list, KvConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud4D, RigidTransform};
use crate::raster::{DepthMap, GrayImage, Grid};
use crate::rng::SplitMix64;

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Finite rectangle `center + s·u_axis + t·v_axis`, `|s| ≤ half_u`, `|t| ≤ half_v`.
    Plane {
        center: Vector3<f64>,
        u_axis: Vector3<f64>,
        v_axis: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    },
    /// Axis-aligned box.
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

/// Blocky reflectance: the surface is cut into `period`-sized cells along two
/// in-surface axes (crossing stripes) and each cell gets its own level in
/// `base ± contrast`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub base: f64,
    pub contrast: f64,
    /// Overrides the scene-wide stripe period.
    pub period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub surface: Surface,
}

/// A ray hit. `distance` is along the unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
    pub reflectance: f64,
}

impl Primitive {
    /// Ray parameter, normal and texture coordinates of the nearest hit with
    /// `t > RAY_EPS`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, f64, f64)> {
        match &self.shape {
            Shape::Plane {
                center,
                u_axis,
                v_axis,
                half_u,
                half_v,
            } => {
                let n = u_axis.cross(v_axis);
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (center - o).dot(&n) / denom;
                if t <= RAY_EPS {
                    return None;
                }
                let rel = o + d * t - center;
                let (s, q) = (rel.dot(u_axis), rel.dot(v_axis));
                (s.abs() <= *half_u && q.abs() <= *half_v).then_some((t, n, s, q))
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - o[a]) / d[a];
                    let t2 = (max[a] - o[a]) / d[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        axis = a;
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= RAY_EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                let p = o + d * t_near;
                let (ia, ib) = ((axis + 1) % 3, (axis + 2) % 3);
                Some((t_near, n, p[ia], p[ib]))
            }
        }
    }
}

fn texture_hash(salt: u64, i: i64, j: i64) -> f64 {
    let mut r = SplitMix64::new(
        salt ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    r.next_f64()
}

/// Full generator configuration. Every field has a plain-text key; see
/// [`SceneConfig::from_kv`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Number of LiDAR rays.
    pub points: usize,
    pub primitives: Vec<Primitive>,
    pub stripe_period: f64,
    pub intrinsics: CameraIntrinsics,
    /// LiDAR → camera.
    pub extrinsics: RigidTransform,
    /// Degrees, `(min, max)`.
    pub lidar_azimuth: (f64, f64),
    pub lidar_elevation: (f64, f64),
    pub max_range: f64,
    /// Std-dev of Gaussian range jitter in meters.
    pub range_noise: f64,
    /// Camera supersampling factor per axis.
    pub supersample: usize,
    pub sky_gray: f64,
    /// Gray level = `gray_offset + gray_gain · reflectance`.
    pub gray_offset: f64,
    pub gray_gain: f64,
}

/// Axis permutation taking LiDAR axes (x fwd, y up, z right) to camera axes
/// (x right, y down, z fwd).
pub fn lidar_to_camera_axes() -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0)
}

impl SceneConfig {
    fn base(intrinsics: CameraIntrinsics, extrinsics: RigidTransform) -> Self {
        Self {
            points: 120_000,
            primitives: Vec::new(),
            stripe_period: 0.4,
            intrinsics,
            extrinsics,
            lidar_azimuth: (-60.0, 60.0),
            lidar_elevation: (-25.0, 15.0),
            max_range: 120.0,
            range_noise: 0.0,
            supersample: 2,
            sky_gray: 0.9,
            gray_offset: 0.1,
            gray_gain: 0.8,
        }
    }

    pub fn default_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 256.0,
            cy: 192.0,
            width: 512,
            height: 384,
        }
    }

    /// One textured wall facing the sensor at `distance` meters, camera
    /// co-located with the LiDAR.
    pub fn fronto_plane(distance: f64, points: usize) -> Self {
        let ext = RigidTransform::from_rotation(
            nalgebra::Rotation3::from_matrix_unchecked(lidar_to_camera_axes()),
            Vector3::zeros(),
        );
        let mut c = Self::base(Self::default_intrinsics(), ext);
        c.points = points;
        c.lidar_azimuth = (-40.0, 40.0);
        c.lidar_elevation = (-30.0, 30.0);
        c.primitives.push(Primitive {
            shape: Shape::Plane {
                center: Vector3::new(distance, 0.0, 0.0),
                u_axis: Vector3::new(0.0, 0.0, 1.0),
                v_axis: Vector3::new(0.0, 1.0, 0.0),
                half_u: distance * 0.6,
                half_v: distance * 0.45,
            },
            surface: Surface {
                base: 0.5,
                contrast: 0.45,
                period: None,
            },
        });
        c
    }

    /// Randomized street-like layout: ground, a back wall, two side walls and
    /// 2–4 boxes, with a small random LiDAR→camera offset.
    pub fn street(seed: u64) -> Self {
        let mut rng = SplitMix64::fork(seed, 0x5354);
        let tilt = RigidTransform::from_axis_angle(
            Vector3::new(rng.normal(), rng.normal(), rng.normal()),
            rng.uniform(0.0, 2.0).to_radians(),
            Vector3::zeros(),
        );
        let axes = RigidTransform::from_rotation(
            nalgebra::Rotation3::from_matrix_unchecked(lidar_to_camera_axes()),
            Vector3::zeros(),
        );
        let rot = tilt.compose(&axes);
        // camera center in the LiDAR frame
        let c_l = Vector3::new(
            rng.uniform(-0.3, 0.3),
            rng.uniform(-0.3, 0.0),
            rng.uniform(-0.4, 0.4),
        );
        let t = -(rot.rotation() * c_l);
        let ext = RigidTransform::from_rotation(
            nalgebra::Rotation3::from_matrix_unchecked(*rot.rotation()),
            t,
        );
        let mut c = Self::base(Self::default_intrinsics(), ext);
        let h = 1.7;
        let depth = rng.uniform(16.0, 24.0);
        let half_w = rng.uniform(5.0, 8.0);
        let x_axis = Vector3::new(1.0, 0.0, 0.0);
        let y_axis = Vector3::new(0.0, 1.0, 0.0);
        let z_axis = Vector3::new(0.0, 0.0, 1.0);
        let surf = |rng: &mut SplitMix64| Surface {
            base: rng.uniform(0.35, 0.65),
            contrast: rng.uniform(0.25, 0.35),
            period: Some(rng.uniform(0.3, 0.5)),
        };
        c.primitives.push(Primitive {
            shape: Shape::Plane {
                center: Vector3::new(depth / 2.0 + 1.0, -h, 0.0),
                u_axis: x_axis,
                v_axis: z_axis,
                half_u: depth / 2.0 + 1.0,
                half_v: half_w,
            },
            surface: surf(&mut rng),
        });
        c.primitives.push(Primitive {
            shape: Shape::Plane {
                center: Vector3::new(depth, 3.0, 0.0),
                u_axis: z_axis,
                v_axis: y_axis,
                half_u: half_w,
                half_v: 3.0 + h,
            },
            surface: surf(&mut rng),
        });
        for side in [-1.0, 1.0] {
            c.primitives.push(Primitive {
                shape: Shape::Plane {
                    center: Vector3::new((depth + 3.0) / 2.0, 3.0, side * half_w),
                    u_axis: x_axis,
                    v_axis: y_axis,
                    half_u: (depth - 3.0) / 2.0,
                    half_v: 3.0 + h,
                },
                surface: surf(&mut rng),
            });
        }
        let boxes = 2 + rng.below(3) as usize;
        for _ in 0..boxes {
            let x0 = rng.uniform(7.0, depth - 4.0);
            let z0 = rng.uniform(-half_w + 1.0, half_w - 3.0);
            let sx = rng.uniform(1.0, 2.5);
            let sz = rng.uniform(1.0, 2.5);
            let sy = rng.uniform(1.0, 2.5);
            c.primitives.push(Primitive {
                shape: Shape::Box {
                    min: Vector3::new(x0, -h, z0),
                    max: Vector3::new(x0 + sx, -h + sy, z0 + sz),
                },
                surface: surf(&mut rng),
            });
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.primitives.is_empty() {
            return bad("scene needs at least one primitive");
        }
        if self.points == 0 {
            return bad("`points` must be positive");
        }
        if !(self.stripe_period > 0.0) {
            return bad("`stripe_period` must be positive");
        }
        self.intrinsics
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(self.lidar_azimuth.0 < self.lidar_azimuth.1)
            || !(self.lidar_elevation.0 < self.lidar_elevation.1)
            || self.lidar_elevation.0 < -90.0
            || self.lidar_elevation.1 > 90.0
        {
            return bad("LiDAR field of view is empty or out of range");
        }
        if !(self.max_range > 0.0) || !(self.range_noise >= 0.0) || self.supersample == 0 {
            return bad("max_range, range_noise or supersample out of range");
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let s = &p.surface;
            if !(0.0..=1.0).contains(&s.base) || !(s.contrast >= 0.0) || s.period.is_some_and(|q| !(q > 0.0)) {
                return bad(&format!("primitive {i}: bad surface parameters"));
            }
            match &p.shape {
                Shape::Plane {
                    u_axis,
                    v_axis,
                    half_u,
                    half_v,
                    ..
                } => {
                    let unit = (u_axis.norm() - 1.0).abs() < 1e-9 && (v_axis.norm() - 1.0).abs() < 1e-9;
                    if !unit || u_axis.dot(v_axis).abs() > 1e-9 || !(*half_u > 0.0 && *half_v > 0.0) {
                        return bad(&format!("primitive {i}: plane axes must be orthonormal, extents positive"));
                    }
                }
                Shape::Box { min, max } => {
                    if (0..3).any(|a| !(min[a] < max[a])) {
                        return bad(&format!("primitive {i}: box min must be below max"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses the plain-text scene format:
    ///
    /// ```text
    /// points = 120000
    /// stripe_period = 0.4
    /// intrinsics = fx fy cx cy width height
    /// extrinsics = r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2
    /// lidar_azimuth = -60 60
    /// lidar_elevation = -25 15
    /// plane = cx cy cz ux uy uz vx vy vz half_u half_v base contrast [period]
    /// box = minx miny minz maxx maxy maxz base contrast [period]
    /// ```
    ///
    /// Optional keys: `max_range`, `range_noise`, `supersample`, `sky_gray`,
    /// `gray_offset`, `gray_gain`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let inv = |m: String| Error::InvalidConfig(m);
        let k = match kv.get_list("intrinsics")? {
            Some(v) if v.len() == 6 => CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
                .map_err(|e| inv(e.to_string()))?,
            Some(_) => return Err(inv("`intrinsics` needs 6 values".into())),
            None => Self::default_intrinsics(),
        };
        let ext = match kv.get_str("extrinsics") {
            Some(s) => crate::io::parse_pose(s, std::path::Path::new("extrinsics"))
                .map_err(|e| inv(e.to_string()))?,
            None => return Err(inv("`extrinsics` is required".into())),
        };
        let mut c = Self::base(k, ext);
        c.points = kv.get_or("points", c.points)?;
        c.stripe_period = kv.get_or("stripe_period", c.stripe_period)?;
        if let Some(v) = kv.get_list("lidar_azimuth")? {
            let [a, b] = v[..] else { return Err(inv("`lidar_azimuth` needs 2 values".into())) };
            c.lidar_azimuth = (a, b);
        }
        if let Some(v) = kv.get_list("lidar_elevation")? {
            let [a, b] = v[..] else { return Err(inv("`lidar_elevation` needs 2 values".into())) };
            c.lidar_elevation = (a, b);
        }
        c.max_range = kv.get_or("max_range", c.max_range)?;
        c.range_noise = kv.get_or("range_noise", c.range_noise)?;
        c.supersample = kv.get_or("supersample", c.supersample)?;
        c.sky_gray = kv.get_or("sky_gray", c.sky_gray)?;
        c.gray_offset = kv.get_or("gray_offset", c.gray_offset)?;
        c.gray_gain = kv.get_or("gray_gain", c.gray_gain)?;
        let surface = |v: &[f64]| Surface {
            base: v[0],
            contrast: v[1],
            period: v.get(2).copied(),
        };
        for line in kv.get_all("plane") {
            let v = parse_list("plane", line)?;
            if !(13..=14).contains(&v.len()) {
                return Err(inv(format!("`plane` needs 13 or 14 values, got {}", v.len())));
            }
            c.primitives.push(Primitive {
                shape: Shape::Plane {
                    center: Vector3::new(v[0], v[1], v[2]),
                    u_axis: Vector3::new(v[3], v[4], v[5]),
                    v_axis: Vector3::new(v[6], v[7], v[8]),
                    half_u: v[9],
                    half_v: v[10],
                },
                surface: surface(&v[11..]),
            });
        }
        for line in kv.get_all("box") {
            let v = parse_list("box", line)?;
            if !(8..=9).contains(&v.len()) {
                return Err(inv(format!("`box` needs 8 or 9 values, got {}", v.len())));
            }
            c.primitives.push(Primitive {
                shape: Shape::Box {
                    min: Vector3::new(v[0], v[1], v[2]),
                    max: Vector3::new(v[3], v[4], v[5]),
                },
                surface: surface(&v[6..]),
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        let k = &self.intrinsics;
        kv.set("points", self.points);
        kv.set("stripe_period", self.stripe_period);
        kv.set(
            "intrinsics",
            format!("{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
        );
        kv.set("extrinsics", crate::io::format_pose(&self.extrinsics).trim());
        kv.set("lidar_azimuth", format!("{} {}", self.lidar_azimuth.0, self.lidar_azimuth.1));
        kv.set("lidar_elevation", format!("{} {}", self.lidar_elevation.0, self.lidar_elevation.1));
        kv.set("max_range", self.max_range);
        kv.set("range_noise", self.range_noise);
        kv.set("supersample", self.supersample);
        kv.set("sky_gray", self.sky_gray);
        kv.set("gray_offset", self.gray_offset);
        kv.set("gray_gain", self.gray_gain);
        for p in &self.primitives {
            let s = &p.surface;
            let tail = match s.period {
                Some(q) => format!("{} {} {}", s.base, s.contrast, q),
                None => format!("{} {}", s.base, s.contrast),
            };
            match &p.shape {
                Shape::Plane {
                    center: c,
                    u_axis: u,
                    v_axis: v,
                    half_u,
                    half_v,
                } => kv.push(
                    "plane",
                    format!(
                        "{} {} {} {} {} {} {} {} {} {} {} {}",
                        c.x, c.y, c.z, u.x, u.y, u.z, v.x, v.y, v.z, half_u, half_v, tail
                    ),
                ),
                Shape::Box { min, max } => kv.push(
                    "box",
                    format!(
                        "{} {} {} {} {} {} {}",
                        min.x, min.y, min.z, max.x, max.y, max.z, tail
                    ),
                ),
            }
        }
        kv
    }
}

/// A generated scene. `gt_extrinsics` maps LiDAR coordinates into the camera
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud4D,
    pub camera_image: GrayImage,
    pub intrinsics: CameraIntrinsics,
    pub gt_extrinsics: RigidTransform,
    pub seed: u64,
    pub config: SceneConfig,
}

impl SyntheticScene {
    /// First hit along a ray in the LiDAR frame; `dir` must be unit length.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        cast_ray(&self.config, self.seed, origin, dir)
    }

    /// Exact z-depth seen by a pinhole camera at `pose` (LiDAR → view) with
    /// intrinsics `k`, sampled at pixel centers.
    pub fn render_depth(&self, pose: &RigidTransform, k: &CameraIntrinsics) -> DepthMap {
        let inv = pose.inverse();
        let origin = *inv.translation();
        let depths = Grid::from_fn(k.width, k.height, |x, y| {
            let dc = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let dir = (inv.rotation() * dc).normalize();
            self.cast(&origin, &dir)
                .map_or(0.0, |h| pose.apply(&h.point).z)
        });
        DepthMap::from_depths(depths)
    }

    /// Depth rendered in the real camera.
    pub fn camera_depth(&self) -> DepthMap {
        self.render_depth(&self.gt_extrinsics, &self.intrinsics)
    }
}

fn cast_ray(cfg: &SceneConfig, seed: u64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, Vector3<f64>, f64, f64, usize)> = None;
    for (i, p) in cfg.primitives.iter().enumerate() {
        if let Some((t, n, s, q)) = p.intersect(o, d) {
            if best.map_or(true, |b| t < b.0) {
                best = Some((t, n, s, q, i));
            }
        }
    }
    let (t, n, s, q, i) = best?;
    let surf = &cfg.primitives[i].surface;
    let period = surf.period.unwrap_or(cfg.stripe_period);
    let salt = seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (i as u64 + 1);
    let cell = texture_hash(salt, (s / period).floor() as i64, (q / period).floor() as i64);
    let refl = (surf.base + surf.contrast * (2.0 * cell - 1.0)).clamp(0.0, 1.0);
    Some(Hit {
        distance: t,
        point: o + d * t,
        normal: n,
        primitive: i,
        reflectance: refl,
    })
}

/// Generates the LiDAR cloud and camera image for `config`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = SplitMix64::fork(seed, 1);
    let (az0, az1) = config.lidar_azimuth;
    let (el0, el1) = config.lidar_elevation;
    let aspect = (az1 - az0) / (el1 - el0);
    let columns = ((config.points as f64 * aspect).sqrt().round() as usize).max(1);
    let beams = config.points.div_ceil(columns).max(1);
    let (daz, del) = ((az1 - az0) / columns as f64, (el1 - el0) / beams as f64);
    let origin = Vector3::zeros();
    let mut points = Vec::with_capacity(config.points);
    'rays: for b in 0..beams {
        for c in 0..columns {
            if b * columns + c >= config.points {
                break 'rays;
            }
            let az = (az0 + (c as f64 + rng.next_f64()) * daz).to_radians();
            let el = (el0 + (b as f64 + rng.next_f64()) * del).to_radians();
            let dir = Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
            let noise = if config.range_noise > 0.0 {
                rng.normal() * config.range_noise
            } else {
                0.0
            };
            let Some(hit) = cast_ray(config, seed, &origin, &dir) else {
                continue;
            };
            if hit.distance > config.max_range {
                continue;
            }
            let p = origin + dir * (hit.distance + noise);
            points.push([p.x, p.y, p.z, hit.reflectance]);
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidConfig("no LiDAR ray hit the scene".into()));
    }
    let cloud = PointCloud4D::new(points)?;

    let k = &config.intrinsics;
    let inv = config.extrinsics.inverse();
    let cam_origin = *inv.translation();
    let ss = config.supersample;
    let img = Grid::from_fn(k.width, k.height, |x, y| {
        let mut acc = 0.0;
        for sy in 0..ss {
            for sx in 0..ss {
                let u = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                let v = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                let dc = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
                let dir = (inv.rotation() * dc).normalize();
                acc += match cast_ray(config, seed, &cam_origin, &dir) {
                    Some(h) => config.gray_offset + config.gray_gain * h.reflectance,
                    None => config.sky_gray,
                };
            }
        }
        acc / (ss * ss) as f64
    });

    Ok(SyntheticScene {
        cloud,
        camera_image: GrayImage::new(img),
        intrinsics: *k,
        gt_extrinsics: config.extrinsics,
        seed,
        config: config.clone(),
    })
}

/// Bounds for a ground-plane translation plus a rotation about the vertical
/// axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Disc radius in meters on the XZ plane.
    pub max_translation: f64,
    /// Degrees about Y.
    pub max_rotation: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0 && self.max_rotation >= 0.0) {
            return Err(Error::InvalidConfig("perturbation bounds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Stream of perturbations; the `n`-th draw depends only on the seed.
#[derive(Debug, Clone)]
pub struct PerturbationSampler {
    spec: PerturbationSpec,
    rng: SplitMix64,
}

impl PerturbationSampler {
    pub fn new(spec: PerturbationSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: SplitMix64::new(spec.seed),
        })
    }

    /// Draws `(transform, yaw_degrees)`: translation uniform on the disc of
    /// radius `max_translation`, yaw uniform in `±max_rotation`.
    pub fn draw(&mut self) -> (RigidTransform, f64) {
        let r = self.spec.max_translation * self.rng.next_f64().sqrt();
        let theta = std::f64::consts::TAU * self.rng.next_f64();
        let yaw = self.rng.uniform(-self.spec.max_rotation, self.spec.max_rotation);
        let t = Vector3::new(r * theta.cos(), 0.0, r * theta.sin());
        (
            RigidTransform::from_axis_angle(Vector3::y(), yaw.to_radians(), t),
            yaw,
        )
    }
}

pub fn sample_perturbation(spec: &PerturbationSpec) -> Result<RigidTransform> {
    Ok(PerturbationSampler::new(*spec)?.draw().0)
}
