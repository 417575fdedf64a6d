//! Dual-branch feature extraction.
//!
//! Each modality has its own extractor producing a coarse (1/8) and a fine
//! (1/2) descriptor grid. Two extractor kinds exist: a small strided
//! convolution stack with weights loaded from an `XMRW` file, and a
//! hand-crafted mode built from local intensity means, gradient magnitudes
//! and 8-bin gradient-orientation histograms. Coarse grids are flattened into
//! token matrices, optionally position-encoded, and enhanced with
//! interleaved self/cross attention ([`attention`]).

pub mod attention;
mod conv;
mod handcrafted;
pub mod weights;

use nalgebra::DMatrix;

pub use attention::{attend, AttentionLayer, AttentionWeights, LayerKind};
pub use conv::ConvBackbone;
pub use handcrafted::{DescriptorLayout, HandCrafted, ORIENTATION_BINS};
pub use weights::{Tensor, WeightFile};

use crate::error::Result;
use crate::raster::{GrayImage, Grid, IntensityImage};

pub const DEFAULT_COARSE_CHANNELS: usize = 64;
pub const DEFAULT_FINE_CHANNELS: usize = 32;
pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Lidar,
    Camera,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Lidar => "lidar",
            Branch::Camera => "camera",
        }
    }
}

/// `rows × cols × channels` descriptors, channel-innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let s = (row * self.cols + col) * self.channels;
        &self.data[s..s + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let s = (row * self.cols + col) * self.channels;
        &mut self.data[s..s + self.channels]
    }

    pub fn flatten(&self) -> FlatFeatures {
        let n = self.rows * self.cols;
        let tokens = DMatrix::from_row_slice(n, self.channels, &self.data);
        FlatFeatures {
            tokens,
            grid_shape: (self.rows, self.cols),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Coarse and fine grids of one image.
///
/// Cell `(r, c)` of the coarse grid describes image pixel
/// `(8c + coarse_offset, 8r + coarse_offset)`; fine cell `(r, c)` describes
/// pixel `(2c + fine_offset, 2r + fine_offset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub coarse: FeatureGrid,
    pub fine: FeatureGrid,
    pub source: Branch,
    pub coarse_offset: usize,
    pub fine_offset: usize,
}

impl FeaturePyramid {
    /// Image pixel sampled by coarse cell `(row, col)` as `(u, v)`.
    pub fn coarse_pixel(&self, row: usize, col: usize) -> (usize, usize) {
        (
            COARSE_STRIDE * col + self.coarse_offset,
            COARSE_STRIDE * row + self.coarse_offset,
        )
    }

    /// Fine cell sampling the same pixel as coarse cell `(row, col)`.
    pub fn coarse_to_fine(&self, row: usize, col: usize) -> (isize, isize) {
        let (u, v) = self.coarse_pixel(row, col);
        let f = |p: usize| (p as isize - self.fine_offset as isize).div_euclid(FINE_STRIDE as isize);
        (f(v), f(u))
    }

    /// Image pixel of fine cell `(row, col)` in continuous coordinates.
    pub fn fine_pixel(&self, row: f64, col: f64) -> (f64, f64) {
        (
            FINE_STRIDE as f64 * col + self.fine_offset as f64,
            FINE_STRIDE as f64 * row + self.fine_offset as f64,
        )
    }
}

/// Token matrix `N × C` of a flattened coarse grid; row `i` is cell
/// `(i / cols, i % cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFeatures {
    pub tokens: DMatrix<f64>,
    pub grid_shape: (usize, usize),
}

impl FlatFeatures {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn cell_of(&self, index: usize) -> (usize, usize) {
        (index / self.grid_shape.1, index % self.grid_shape.1)
    }
}

/// Input for [`extract_pyramid`]: LiDAR projections carry a validity mask.
#[derive(Debug, Clone, Copy)]
pub enum ImageInput<'a> {
    Gray(&'a GrayImage),
    Intensity(&'a IntensityImage),
}

impl ImageInput<'_> {
    fn pixels(&self) -> &Grid<f64> {
        match self {
            ImageInput::Gray(g) => &g.pixels,
            ImageInput::Intensity(i) => &i.pixels,
        }
    }

    fn valid(&self) -> Option<&Grid<bool>> {
        match self {
            ImageInput::Gray(_) => None,
            ImageInput::Intensity(i) => Some(&i.valid),
        }
    }
}

/// Extractor for one branch.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    HandCrafted(HandCrafted),
    Conv(ConvBackbone),
}

/// Non-shared extractors for the two modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBackbone {
    pub lidar: Extractor,
    pub camera: Extractor,
}

impl DualBackbone {
    pub fn hand_crafted() -> Self {
        Self {
            lidar: Extractor::HandCrafted(HandCrafted::lidar()),
            camera: Extractor::HandCrafted(HandCrafted::camera()),
        }
    }

    /// Both conv branches from one weight file (`lidar.*` and `camera.*`).
    pub fn from_weights(w: &WeightFile, coarse_channels: usize, fine_channels: usize) -> Result<Self> {
        Ok(Self {
            lidar: Extractor::Conv(ConvBackbone::from_weights(w, Branch::Lidar, coarse_channels, fine_channels)?),
            camera: Extractor::Conv(ConvBackbone::from_weights(w, Branch::Camera, coarse_channels, fine_channels)?),
        })
    }

    pub fn get(&self, branch: Branch) -> &Extractor {
        match branch {
            Branch::Lidar => &self.lidar,
            Branch::Camera => &self.camera,
        }
    }
}

/// Edge-replicates `g` up to the next multiple of 8 in each dimension.
pub fn pad_to_multiple(g: &Grid<f64>, m: usize) -> Grid<f64> {
    let w = g.width().div_ceil(m) * m;
    let h = g.height().div_ceil(m) * m;
    if w == g.width() && h == g.height() {
        return g.clone();
    }
    Grid::from_fn(w, h, |x, y| g.get_clamped(x as isize, y as isize))
}

/// Runs the extractor selected by `branch` on `img`.
pub fn extract_pyramid(img: ImageInput<'_>, branch: Branch, backbone: &DualBackbone) -> Result<FeaturePyramid> {
    let pixels = img.pixels();
    if pixels.width() == 0 || pixels.height() == 0 {
        return Err(crate::Error::DimensionMismatch("empty image".into()));
    }
    match backbone.get(branch) {
        Extractor::HandCrafted(h) => Ok(h.extract(pixels, img.valid(), branch)),
        Extractor::Conv(c) => c.extract(&pad_to_multiple(pixels, COARSE_STRIDE), branch),
    }
}

/// Fixed 2D sinusoidal table for a `rows × cols` grid with `channels`
/// channels. The first half of the channels encodes the row index, the
/// second half the column index; within a half, channel `2k` is
/// `sin(p·ω_k)` and `2k + 1` is `cos(p·ω_k)` with `ω_k = 10000^(−2k/half)`.
pub fn positional_table(rows: usize, cols: usize, channels: usize) -> DMatrix<f64> {
    assert!(channels % 2 == 0, "positional encoding needs an even channel count");
    let half = channels / 2;
    let mut t = DMatrix::zeros(rows * cols, channels);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for ch in 0..half {
                    let k = ch / 2;
                    let omega = 10000f64.powf(-((2 * k) as f64) / half as f64);
                    t[(i, offset + ch)] = if ch % 2 == 0 {
                        (pos * omega).sin()
                    } else {
                        (pos * omega).cos()
                    };
                }
            }
        }
    }
    t
}

/// Adds the positional table to every token.
pub fn positional_encode(flat: &FlatFeatures) -> Result<FlatFeatures> {
    if flat.channels() % 2 != 0 {
        return Err(crate::Error::DimensionMismatch(format!(
            "positional encoding needs an even channel count, got {}",
            flat.channels()
        )));
    }
    let (rows, cols) = flat.grid_shape;
    Ok(FlatFeatures {
        tokens: &flat.tokens + positional_table(rows, cols, flat.channels()),
        grid_shape: flat.grid_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_of_zero_tokens_is_table() {
        let flat = FlatFeatures {
            tokens: DMatrix::zeros(12, 8),
            grid_shape: (3, 4),
        };
        let out = positional_encode(&flat).unwrap();
        assert_eq!(out.tokens, positional_table(3, 4, 8));
    }

    #[test]
    fn pe_origin_phase() {
        let t = positional_table(2, 2, 64);
        for ch in 0..64 {
            let expect = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(t[(0, ch)], expect);
        }
    }

    #[test]
    fn pe_shared_across_grid_shapes() {
        let a = positional_table(3, 5, 16);
        let b = positional_table(7, 9, 16);
        for r in 0..3 {
            for c in 0..5 {
                assert_eq!(a.row(r * 5 + c), b.row(r * 9 + c));
            }
        }
    }

    #[test]
    fn pe_rejects_odd_channels() {
        let flat = FlatFeatures {
            tokens: DMatrix::zeros(1, 3),
            grid_shape: (1, 1),
        };
        assert!(positional_encode(&flat).is_err());
    }

    #[test]
    fn padding_replicates_edges() {
        let g = Grid::from_fn(9, 3, |x, y| (x + 10 * y) as f64);
        let p = pad_to_multiple(&g, 8);
        assert_eq!((p.width(), p.height()), (16, 8));
        assert_eq!(*p.get(15, 7), *g.get(8, 2));
        assert_eq!(*p.get(3, 5), *g.get(3, 2));
    }

    #[test]
    fn coarse_fine_mapping() {
        let h = DualBackbone::hand_crafted();
        let img = GrayImage::new(Grid::filled(32, 16, 0.5));
        let p = extract_pyramid(ImageInput::Gray(&img), Branch::Camera, &h).unwrap();
        assert_eq!(p.coarse_pixel(1, 2), (20, 12));
        assert_eq!(p.coarse_to_fine(1, 2), (6, 10));
        assert_eq!(p.fine_pixel(6.0, 10.0), (20.0, 12.0));
    }
}
