use crate::error::{Error, Result};
use crate::raster::Grid;

use super::{Branch, FeatureGrid, FeaturePyramid, WeightFile};

/// 3×3 convolution, stride 2, edge-replicate padding of 1.
#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][ky][kx]`
    weight: Vec<f64>,
    bias: Vec<f64>,
    relu: bool,
}

impl Conv {
    fn load(w: &WeightFile, name: &str, in_ch: usize, out_ch: usize, relu: bool) -> Result<Self> {
        let weight = w.expect(&format!("{name}.weight"), &[out_ch, in_ch, 3, 3])?;
        let bias = w.expect(&format!("{name}.bias"), &[out_ch])?;
        Ok(Self {
            in_ch,
            out_ch,
            weight: weight.data.iter().map(|v| *v as f64).collect(),
            bias: bias.data.iter().map(|v| *v as f64).collect(),
            relu,
        })
    }

    fn forward(&self, x: &FeatureGrid) -> FeatureGrid {
        debug_assert_eq!(x.channels, self.in_ch);
        let (rows, cols) = (x.rows.div_ceil(2), x.cols.div_ceil(2));
        let mut y = FeatureGrid::zeros(rows, cols, self.out_ch);
        for r in 0..rows {
            for c in 0..cols {
                let out = y.at_mut(r, c);
                out.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let sr = (2 * r + ky) as isize - 1;
                    let sr = sr.clamp(0, x.rows as isize - 1) as usize;
                    for kx in 0..3 {
                        let sc = (2 * c + kx) as isize - 1;
                        let sc = sc.clamp(0, x.cols as isize - 1) as usize;
                        let inp = x.at(sr, sc);
                        for (o, acc) in out.iter_mut().enumerate() {
                            let base = o * self.in_ch * 9 + ky * 3 + kx;
                            *acc += inp
                                .iter()
                                .enumerate()
                                .map(|(i, v)| v * self.weight[base + i * 9])
                                .sum::<f64>();
                        }
                    }
                }
                if self.relu {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
        y
    }
}

/// Three stride-2 convolutions: `1 → C_f` (fine, 1/2), `C_f → C_c` (1/4),
/// `C_c → C_c` (coarse, 1/8). Tensor names are `<branch>.conv{1,2,3}.weight`
/// with dims `[out, in, 3, 3]` and `<branch>.conv{1,2,3}.bias` with `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone {
    layers: [Conv; 3],
}

impl ConvBackbone {
    pub fn from_weights(w: &WeightFile, branch: Branch, coarse_channels: usize, fine_channels: usize) -> Result<Self> {
        let p = branch.prefix();
        Ok(Self {
            layers: [
                Conv::load(w, &format!("{p}.conv1"), 1, fine_channels, true)?,
                Conv::load(w, &format!("{p}.conv2"), fine_channels, coarse_channels, true)?,
                Conv::load(w, &format!("{p}.conv3"), coarse_channels, coarse_channels, false)?,
            ],
        })
    }

    /// Writes all-`value` tensors of the right shapes for `branch`.
    pub fn fill_weights(w: &mut WeightFile, branch: Branch, coarse: usize, fine: usize, mut value: impl FnMut() -> f32) {
        let p = branch.prefix();
        for (name, i, o) in [("conv1", 1, fine), ("conv2", fine, coarse), ("conv3", coarse, coarse)] {
            let n = o * i * 9;
            w.insert(format!("{p}.{name}.weight"), vec![o, i, 3, 3], (0..n).map(|_| value()).collect())
                .expect("sized");
            w.insert(format!("{p}.{name}.bias"), vec![o], (0..o).map(|_| value()).collect())
                .expect("sized");
        }
    }

    pub(super) fn extract(&self, padded: &Grid<f64>, branch: Branch) -> Result<FeaturePyramid> {
        if padded.width() % 8 != 0 || padded.height() % 8 != 0 {
            return Err(Error::DimensionMismatch("conv input must be padded to a multiple of 8".into()));
        }
        let input = FeatureGrid {
            rows: padded.height(),
            cols: padded.width(),
            channels: 1,
            data: padded.as_slice().to_vec(),
        };
        let fine = self.layers[0].forward(&input);
        let mid = self.layers[1].forward(&fine);
        let coarse = self.layers[2].forward(&mid);
        Ok(FeaturePyramid {
            coarse,
            fine,
            source: branch,
            coarse_offset: 0,
            fine_offset: 0,
        })
    }
}
