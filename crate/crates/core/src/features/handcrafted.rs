//! Hand-crafted dense descriptors.
//!
//! A descriptor summarizes a square support window around its sample pixel
//! with three groups, each ℓ2-normalized on its own and then weighted:
//!
//! - zero-mean intensity means over a `mean_grid × mean_grid` subdivision,
//! - mean gradient magnitudes over a `mag_grid × mag_grid` subdivision,
//! - magnitude-weighted 8-bin gradient-orientation histograms over a
//!   `hist_grid × hist_grid` subdivision.
//!
//! The whole vector is then ℓ2-normalized. A window with no texture at all
//! yields the zero descriptor. All three groups are invariant to a positive
//! affine change of intensity, which is what makes reflectance and gray
//! level comparable.

use crate::raster::Grid;

use super::{pad_to_multiple, Branch, FeatureGrid, FeaturePyramid, COARSE_STRIDE, FINE_STRIDE};

pub const ORIENTATION_BINS: usize = 8;

const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorLayout {
    /// Side of the square support window in pixels.
    pub support: usize,
    pub mean_grid: usize,
    pub mag_grid: usize,
    pub hist_grid: usize,
    pub mean_weight: f64,
    pub mag_weight: f64,
    pub hist_weight: f64,
}

impl DescriptorLayout {
    pub fn channels(&self) -> usize {
        self.mean_grid.pow(2) + self.mag_grid.pow(2) + ORIENTATION_BINS * self.hist_grid.pow(2)
    }

    /// 64 channels: 4×4 means, 4×4 magnitudes, 2×2 histograms over 16 px.
    pub fn coarse_default() -> Self {
        Self {
            support: 16,
            mean_grid: 4,
            mag_grid: 4,
            hist_grid: 2,
            mean_weight: 1.0,
            mag_weight: 0.5,
            hist_weight: 0.5,
        }
    }

    /// 80 channels: 8×8 means and 4×4 magnitudes over 16 px.
    pub fn fine_default() -> Self {
        Self {
            support: 16,
            mean_grid: 8,
            mag_grid: 4,
            hist_grid: 0,
            mean_weight: 1.0,
            mag_weight: 0.5,
            hist_weight: 0.0,
        }
    }
}

/// Parameters of one hand-crafted branch.
#[derive(Debug, Clone, PartialEq)]
pub struct HandCrafted {
    pub coarse: DescriptorLayout,
    pub fine: DescriptorLayout,
    /// Pixel sampled by coarse cell 0 along each axis.
    pub coarse_offset: usize,
    pub fine_offset: usize,
    /// Radius for filling holes of a masked (LiDAR) image before gradients.
    pub fill_radius: f64,
    /// Windows with a smaller valid fraction (after filling) get the zero
    /// descriptor. Only used with a mask.
    pub min_valid_fraction: f64,
}

impl HandCrafted {
    pub fn camera() -> Self {
        Self {
            coarse: DescriptorLayout::coarse_default(),
            fine: DescriptorLayout::fine_default(),
            coarse_offset: COARSE_STRIDE / 2,
            fine_offset: 0,
            fill_radius: 0.0,
            min_valid_fraction: 0.0,
        }
    }

    pub fn lidar() -> Self {
        Self {
            fill_radius: 3.0,
            min_valid_fraction: 0.9,
            ..Self::camera()
        }
    }

    pub(super) fn extract(&self, pixels: &Grid<f64>, valid: Option<&Grid<bool>>, branch: Branch) -> FeaturePyramid {
        let (filled, mask) = match valid {
            Some(v) => {
                let (f, m) = crate::geometry::fill_nearest(pixels, v, self.fill_radius);
                (f, Some(m))
            }
            None => (pixels.clone(), None),
        };
        let padded = pad_to_multiple(&filled, COARSE_STRIDE);
        let mask = mask.map(|m| {
            let mf = m.map(|b| if *b { 1.0 } else { 0.0 });
            pad_to_multiple(&mf, COARSE_STRIDE)
        });
        let margin = self.coarse.support.max(self.fine.support) / 2 + 2;
        let tables = Tables::build(&padded, mask.as_ref(), margin);

        let (w, h) = (padded.width(), padded.height());
        let mut coarse = FeatureGrid::zeros(h / COARSE_STRIDE, w / COARSE_STRIDE, self.coarse.channels());
        for r in 0..coarse.rows {
            for c in 0..coarse.cols {
                let (u, v) = (COARSE_STRIDE * c + self.coarse_offset, COARSE_STRIDE * r + self.coarse_offset);
                tables.describe(&self.coarse, u, v, self.min_valid_fraction, coarse.at_mut(r, c));
            }
        }
        let mut fine = FeatureGrid::zeros(h / FINE_STRIDE, w / FINE_STRIDE, self.fine.channels());
        for r in 0..fine.rows {
            for c in 0..fine.cols {
                let (u, v) = (FINE_STRIDE * c + self.fine_offset, FINE_STRIDE * r + self.fine_offset);
                tables.describe(&self.fine, u, v, self.min_valid_fraction, fine.at_mut(r, c));
            }
        }
        FeaturePyramid {
            coarse,
            fine,
            source: branch,
            coarse_offset: self.coarse_offset,
            fine_offset: self.fine_offset,
        }
    }
}

/// Orientation bin of a gradient; bin 0 is centered on +x, bins advance
/// counter-clockwise in image coordinates by 45°.
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let theta = gy.atan2(gx);
    let b = (theta / (std::f64::consts::PI / 4.0)).round() as i64;
    b.rem_euclid(ORIENTATION_BINS as i64) as usize
}

/// Summed-area tables over an edge-replicated extension of the image.
struct Tables {
    margin: usize,
    stride: usize,
    intensity: Vec<f64>,
    magnitude: Vec<f64>,
    bins: Vec<Vec<f64>>,
    valid: Option<Vec<f64>>,
}

impl Tables {
    fn build(img: &Grid<f64>, mask: Option<&Grid<f64>>, margin: usize) -> Self {
        let m = margin as isize;
        let (w, h) = (img.width() + 2 * margin, img.height() + 2 * margin);
        let ext = Grid::from_fn(w, h, |x, y| img.get_clamped(x as isize - m, y as isize - m));
        let mut mag = Grid::filled(w, h, 0.0);
        let mut bin = Grid::filled(w, h, 0usize);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = 0.5 * (ext.get_clamped(x + 1, y) - ext.get_clamped(x - 1, y));
                let gy = 0.5 * (ext.get_clamped(x, y + 1) - ext.get_clamped(x, y - 1));
                let g = (gx * gx + gy * gy).sqrt();
                mag.set(x as usize, y as usize, g);
                bin.set(x as usize, y as usize, orientation_bin(gx, gy));
            }
        }
        let intensity = sat(w, h, |x, y| *ext.get(x, y));
        let magnitude = sat(w, h, |x, y| *mag.get(x, y));
        let bins = (0..ORIENTATION_BINS)
            .map(|b| sat(w, h, |x, y| if *bin.get(x, y) == b { *mag.get(x, y) } else { 0.0 }))
            .collect();
        let valid = mask.map(|mk| sat(w, h, |x, y| mk.get_clamped(x as isize - m, y as isize - m)));
        Self {
            margin,
            stride: w + 1,
            intensity,
            magnitude,
            bins,
            valid,
        }
    }

    /// Sum over image-coordinate rectangle `[x0, x0+sw) × [y0, y0+sh)`.
    #[inline]
    fn rect(&self, t: &[f64], x0: isize, y0: isize, sw: usize, sh: usize) -> f64 {
        let x0 = (x0 + self.margin as isize) as usize;
        let y0 = (y0 + self.margin as isize) as usize;
        let (x1, y1) = (x0 + sw, y0 + sh);
        let s = self.stride;
        t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0]
    }

    fn describe(&self, l: &DescriptorLayout, u: usize, v: usize, min_valid: f64, out: &mut [f64]) {
        let half = (l.support / 2) as isize;
        let (x0, y0) = (u as isize - half, v as isize - half);
        if let Some(valid) = &self.valid {
            let frac = self.rect(valid, x0, y0, l.support, l.support) / (l.support * l.support) as f64;
            if frac < min_valid {
                out.fill(0.0);
                return;
            }
        }
        let mut k = 0;
        // means
        let n = l.mean_grid;
        if n > 0 {
            let sb = l.support / n;
            let area = (sb * sb) as f64;
            let start = k;
            for i in 0..n {
                for j in 0..n {
                    out[k] = self.rect(&self.intensity, x0 + (j * sb) as isize, y0 + (i * sb) as isize, sb, sb) / area;
                    k += 1;
                }
            }
            let mean = out[start..k].iter().sum::<f64>() / (n * n) as f64;
            out[start..k].iter_mut().for_each(|x| *x -= mean);
            normalize_group(&mut out[start..k], l.mean_weight);
        }
        let n = l.mag_grid;
        if n > 0 {
            let sb = l.support / n;
            let area = (sb * sb) as f64;
            let start = k;
            for i in 0..n {
                for j in 0..n {
                    out[k] = self.rect(&self.magnitude, x0 + (j * sb) as isize, y0 + (i * sb) as isize, sb, sb) / area;
                    k += 1;
                }
            }
            normalize_group(&mut out[start..k], l.mag_weight);
        }
        let n = l.hist_grid;
        if n > 0 {
            let sb = l.support / n;
            let start = k;
            for i in 0..n {
                for j in 0..n {
                    for b in &self.bins {
                        out[k] = self.rect(b, x0 + (j * sb) as isize, y0 + (i * sb) as isize, sb, sb);
                        k += 1;
                    }
                }
            }
            normalize_group(&mut out[start..k], l.hist_weight);
        }
        debug_assert_eq!(k, out.len());
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > DEGENERATE_NORM {
            out.iter_mut().for_each(|x| *x /= norm);
        } else {
            out.fill(0.0);
        }
    }
}

fn normalize_group(g: &mut [f64], weight: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > DEGENERATE_NORM {
        g.iter_mut().for_each(|x| *x *= weight / norm);
    } else {
        g.fill(0.0);
    }
}

fn sat(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let s = w + 1;
    let mut t = vec![0.0; s * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(x, y);
            t[(y + 1) * s + x + 1] = t[y * s + x + 1] + row;
        }
    }
    t
}
