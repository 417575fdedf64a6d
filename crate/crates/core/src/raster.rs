//! Dense row-major rasters used for camera images, intensity projections and
//! depth maps.

/// Row-major `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let i = self.index(x, y);
        &mut self.data[i]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Grid<T> {
    /// Clamped (edge-replicating) lookup with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }
}

/// Grayscale camera image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub pixels: Grid<f64>,
}

impl GrayImage {
    /// Wraps a grid, clamping values into `[0, 1]`; non-finite values become 0.
    pub fn new(mut pixels: Grid<f64>) -> Self {
        for p in pixels.as_mut_slice() {
            *p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self { pixels }
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Virtual image of projected LiDAR reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub pixels: Grid<f64>,
    pub valid: Grid<bool>,
}

impl IntensityImage {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }

    /// Drops the validity mask. Missing pixels read as 0.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(self.pixels.clone())
    }
}

/// Depth map in meters; 0 marks a missing pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depths: Grid<f64>,
    pub valid: Grid<bool>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            depths: Grid::filled(width, height, 0.0),
            valid: Grid::filled(width, height, false),
        }
    }

    /// Builds a map from raw depths, marking every strictly positive finite
    /// value valid and zeroing the rest.
    pub fn from_depths(mut depths: Grid<f64>) -> Self {
        for d in depths.as_mut_slice() {
            if !(d.is_finite() && *d > 0.0) {
                *d = 0.0;
            }
        }
        let valid = depths.map(|d| *d > 0.0);
        Self { depths, valid }
    }

    pub fn width(&self) -> usize {
        self.depths.width()
    }

    pub fn height(&self) -> usize {
        self.depths.height()
    }

    /// Depth at `(x, y)` if valid.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.depths.get(x, y))
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }

    /// Returns a copy with every depth multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            depths: self.depths.map(|d| d * factor),
            valid: self.valid.clone(),
        }
    }
}
