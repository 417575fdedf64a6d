//! Forward-only transformer layers over token matrices.
//!
//! Tokens are rows; projections multiply on the right (`X·W_q`). Each layer
//! is single-head scaled dot-product attention with a residual, followed by
//! a two-layer ReLU feed-forward with a residual. A self layer attends
//! within each token set; a cross layer lets LiDAR tokens attend to camera
//! tokens and vice versa, both reading the pre-layer values. One set of
//! layer weights serves both token sets.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::{FlatFeatures, WeightFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SelfAttention,
    Cross,
}

impl LayerKind {
    fn tag(self) -> &'static str {
        match self {
            LayerKind::SelfAttention => "self",
            LayerKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub kind: LayerKind,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ff1: DMatrix<f64>,
    pub b1: RowDVector<f64>,
    pub ff2: DMatrix<f64>,
    pub b2: RowDVector<f64>,
}

impl AttentionLayer {
    fn zeros(kind: LayerKind, c: usize, hidden: usize) -> Self {
        Self {
            kind,
            wq: DMatrix::zeros(c, c),
            wk: DMatrix::zeros(c, c),
            wv: DMatrix::zeros(c, c),
            wo: DMatrix::zeros(c, c),
            ff1: DMatrix::zeros(c, hidden),
            b1: RowDVector::zeros(hidden),
            ff2: DMatrix::zeros(hidden, c),
            b2: RowDVector::zeros(c),
        }
    }

    fn channels(&self) -> usize {
        self.wq.nrows()
    }

    /// Residual attention update of `x` reading keys/values from `src`.
    fn update(&self, x: &DMatrix<f64>, src: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.channels() as f64;
        let mut out = x.clone();
        if src.nrows() > 0 && x.nrows() > 0 {
            let q = x * &self.wq;
            let k = src * &self.wk;
            let v = src * &self.wv;
            let mut scores = (q * k.transpose()) / c.sqrt();
            softmax_rows(&mut scores);
            out += scores * v * &self.wo;
        }
        let mut hidden = &out * &self.ff1;
        for mut row in hidden.row_iter_mut() {
            row += &self.b1;
            row.iter_mut().for_each(|h| *h = h.max(0.0));
        }
        let mut ff = hidden * &self.ff2;
        for mut row in ff.row_iter_mut() {
            row += &self.b2;
        }
        out + ff
    }
}

/// In-place numerically stable row-wise softmax.
pub(crate) fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let mx = row.max();
        let mut sum = 0.0;
        row.iter_mut().for_each(|v| {
            *v = (*v - mx).exp();
            sum += *v;
        });
        row /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionWeights {
    /// The default coarse schedule: self, cross, self, cross.
    pub fn default_kinds() -> Vec<LayerKind> {
        vec![LayerKind::SelfAttention, LayerKind::Cross, LayerKind::SelfAttention, LayerKind::Cross]
    }

    pub fn zeros(channels: usize, kinds: &[LayerKind], hidden: usize) -> Self {
        Self {
            layers: kinds.iter().map(|k| AttentionLayer::zeros(*k, channels, hidden)).collect(),
        }
    }

    /// Uniform `±scale` weights, for tests and smoke runs.
    pub fn random(channels: usize, kinds: &[LayerKind], hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.uniform(-scale, scale));
        let layers = kinds
            .iter()
            .map(|k| AttentionLayer {
                kind: *k,
                wq: m(channels, channels),
                wk: m(channels, channels),
                wv: m(channels, channels),
                wo: m(channels, channels),
                ff1: m(channels, hidden),
                b1: m(1, hidden).row(0).into_owned(),
                ff2: m(hidden, channels),
                b2: m(1, channels).row(0).into_owned(),
            })
            .collect();
        Self { layers }
    }

    pub fn channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.channels())
    }

    /// Loads layers `<prefix>.<l>.<self|cross>.<wq|wk|wv|wo|ff1|b1|ff2|b2>`
    /// for `l = 0, 1, …` until no layer `l` exists.
    pub fn from_weights(w: &WeightFile, prefix: &str, channels: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for l in 0.. {
            let kind = [LayerKind::SelfAttention, LayerKind::Cross]
                .into_iter()
                .find(|k| w.tensors.contains_key(&format!("{prefix}.{l}.{}.wq", k.tag())));
            let Some(kind) = kind else { break };
            let name = |p: &str| format!("{prefix}.{l}.{}.{p}", kind.tag());
            let hidden = w
                .tensors
                .get(&name("ff1"))
                .and_then(|t| t.dims.get(1).copied())
                .ok_or_else(|| Error::WeightShapeMismatch(format!("missing `{}`", name("ff1"))))?;
            let mat = |p: &str, r: usize, c: usize| -> Result<DMatrix<f64>> {
                let t = w.expect(&name(p), &[r, c])?;
                Ok(DMatrix::from_row_iterator(r, c, t.data.iter().map(|v| *v as f64)))
            };
            let row = |p: &str, n: usize| -> Result<RowDVector<f64>> {
                let t = w.expect(&name(p), &[n])?;
                Ok(RowDVector::from_iterator(n, t.data.iter().map(|v| *v as f64)))
            };
            layers.push(AttentionLayer {
                kind,
                wq: mat("wq", channels, channels)?,
                wk: mat("wk", channels, channels)?,
                wv: mat("wv", channels, channels)?,
                wo: mat("wo", channels, channels)?,
                ff1: mat("ff1", channels, hidden)?,
                b1: row("b1", hidden)?,
                ff2: mat("ff2", hidden, channels)?,
                b2: row("b2", channels)?,
            });
        }
        Ok(Self { layers })
    }

    pub fn write_into(&self, w: &mut WeightFile, prefix: &str) {
        for (l, layer) in self.layers.iter().enumerate() {
            let name = |p: &str| format!("{prefix}.{l}.{}.{p}", layer.kind.tag());
            let put = |w: &mut WeightFile, p: &str, m: &DMatrix<f64>| {
                let data = m.row_iter().flat_map(|r| r.iter().map(|v| *v as f32).collect::<Vec<_>>()).collect();
                w.insert(name(p), vec![m.nrows(), m.ncols()], data).expect("sized");
            };
            put(w, "wq", &layer.wq);
            put(w, "wk", &layer.wk);
            put(w, "wv", &layer.wv);
            put(w, "wo", &layer.wo);
            put(w, "ff1", &layer.ff1);
            put(w, "ff2", &layer.ff2);
            for (p, b) in [("b1", &layer.b1), ("b2", &layer.b2)] {
                w.insert(name(p), vec![b.len()], b.iter().map(|v| *v as f32).collect())
                    .expect("sized");
            }
        }
    }
}

/// Runs every layer on raw token matrices.
pub fn attend_tokens(
    mut a: DMatrix<f64>,
    mut b: DMatrix<f64>,
    w: &AttentionWeights,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "token widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    for (i, layer) in w.layers.iter().enumerate() {
        if layer.channels() != a.ncols() {
            return Err(Error::WeightShapeMismatch(format!(
                "layer {i} expects {} channels, tokens have {}",
                layer.channels(),
                a.ncols()
            )));
        }
        let (na, nb) = match layer.kind {
            LayerKind::SelfAttention => (layer.update(&a, &a), layer.update(&b, &b)),
            LayerKind::Cross => (layer.update(&a, &b), layer.update(&b, &a)),
        };
        a = na;
        b = nb;
    }
    Ok((a, b))
}

/// Enhances both token sets; token counts are unchanged.
pub fn attend(
    flat_lidar: &FlatFeatures,
    flat_cam: &FlatFeatures,
    w: &AttentionWeights,
) -> Result<(FlatFeatures, FlatFeatures)> {
    let (a, b) = attend_tokens(flat_lidar.tokens.clone(), flat_cam.tokens.clone(), w)?;
    Ok((
        FlatFeatures {
            tokens: a,
            grid_shape: flat_lidar.grid_shape,
        },
        FlatFeatures {
            tokens: b,
            grid_shape: flat_cam.grid_shape,
        },
    ))
}
