//! Coarse matching and sub-pixel refinement.
//!
//! Coarse tokens are compared by cosine similarity scaled by a temperature,
//! turned into mutual matching probabilities by a Dual-Softmax, and weighted
//! per LiDAR cell by a repeatability score. Mutual nearest neighbours above a
//! threshold become coarse matches, which [`refine`] upgrades to sub-pixel
//! camera positions by a soft-argmax over a small fine-resolution window.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::attention::attend_tokens;
use crate::features::{AttentionWeights, FeatureGrid, FeaturePyramid, FlatFeatures, WeightFile};
use crate::rng::SplitMix64;

/// Floor applied to heatmap variances.
pub const TAU2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: DMatrix<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    pub values: DMatrix<f64>,
}

/// `values(i, j) = ⟨aᵢ, bⱼ⟩ / (‖aᵢ‖‖bⱼ‖ · temperature)`; tokens with zero norm
/// give zero rows or columns.
pub fn cosine_similarity(a: &FlatFeatures, b: &FlatFeatures, temperature: f64) -> Result<SimilarityMatrix> {
    if a.channels() != b.channels() {
        return Err(Error::DimensionMismatch(format!(
            "channel counts differ: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    let normalize = |m: &DMatrix<f64>| {
        let mut m = m.clone();
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let an = normalize(&a.tokens);
    let bn = normalize(&b.tokens);
    let mut values = an * bn.transpose();
    values /= temperature;
    Ok(SimilarityMatrix { values, temperature })
}

/// Row softmax times column softmax, each with max-subtraction.
pub fn dual_softmax(sim: &SimilarityMatrix) -> ProbMatrix {
    let (n, m) = sim.values.shape();
    // storage is column-major: entry (i, j) sits at j * n + i
    let v = sim.values.as_slice();
    let mut row_max = vec![f64::NEG_INFINITY; n];
    for col in v.chunks_exact(n.max(1)).take(m) {
        for (mx, x) in row_max.iter_mut().zip(col) {
            *mx = mx.max(*x);
        }
    }
    let mut rows = sim.values.clone();
    let mut row_sum = vec![0.0; n];
    for col in rows.as_mut_slice().chunks_exact_mut(n.max(1)).take(m) {
        for ((x, mx), sum) in col.iter_mut().zip(&row_max).zip(row_sum.iter_mut()) {
            *x = (*x - mx).exp();
            *sum += *x;
        }
    }
    let mut out = sim.values.clone();
    for (col, rcol) in out
        .as_mut_slice()
        .chunks_exact_mut(n.max(1))
        .zip(rows.as_slice().chunks_exact(n.max(1)))
        .take(m)
    {
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in col.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        for ((x, r), rs) in col.iter_mut().zip(rcol).zip(&row_sum) {
            *x = (r / rs) * (*x / sum);
        }
    }
    ProbMatrix { values: out }
}

/// Two-layer perceptron `C → C/2 → 1` with ReLU; weights multiply on the
/// right.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatabilityMlp {
    pub w1: DMatrix<f64>,
    pub b1: RowDVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
}

impl RepeatabilityMlp {
    pub fn zeros(channels: usize) -> Self {
        let h = channels / 2;
        Self {
            w1: DMatrix::zeros(channels, h),
            b1: RowDVector::zeros(h),
            w2: DVector::zeros(h),
            b2: 0.0,
        }
    }

    /// Constant score `σ(bias)` for every token.
    pub fn constant(channels: usize, bias: f64) -> Self {
        Self {
            b2: bias,
            ..Self::zeros(channels)
        }
    }

    pub fn random(channels: usize, scale: f64, seed: u64) -> Self {
        let h = channels / 2;
        let mut rng = SplitMix64::new(seed);
        let mut u = || rng.uniform(-scale, scale);
        Self {
            w1: DMatrix::from_fn(channels, h, |_, _| u()),
            b1: RowDVector::from_fn(h, |_, _| u()),
            w2: DVector::from_fn(h, |_, _| u()),
            b2: u(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.nrows()
    }

    /// Tensors `repeatability.fc1.weight [C, C/2]`, `repeatability.fc1.bias
    /// [C/2]`, `repeatability.fc2.weight [C/2, 1]`, `repeatability.fc2.bias [1]`.
    pub fn from_weights(w: &WeightFile, channels: usize) -> Result<Self> {
        let h = channels / 2;
        let f = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            Ok(w.expect(name, dims)?.data.iter().map(|v| *v as f64).collect())
        };
        Ok(Self {
            w1: DMatrix::from_row_slice(channels, h, &f("repeatability.fc1.weight", &[channels, h])?),
            b1: RowDVector::from_vec(f("repeatability.fc1.bias", &[h])?),
            w2: DVector::from_vec(f("repeatability.fc2.weight", &[h, 1])?),
            b2: f("repeatability.fc2.bias", &[1])?[0],
        })
    }

    pub fn write_into(&self, w: &mut WeightFile) {
        let c = self.channels();
        let h = self.b1.len();
        let f32s = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v as f32).collect::<Vec<_>>();
        let w1 = f32s(&mut self.w1.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        w.insert("repeatability.fc1.weight", vec![c, h], w1).expect("sized");
        w.insert("repeatability.fc1.bias", vec![h], f32s(&mut self.b1.iter().copied()))
            .expect("sized");
        w.insert("repeatability.fc2.weight", vec![h, 1], f32s(&mut self.w2.iter().copied()))
            .expect("sized");
        w.insert("repeatability.fc2.bias", vec![1], vec![self.b2 as f32]).expect("sized");
    }

    /// Pre-sigmoid logit per token.
    pub fn logits(&self, tokens: &DMatrix<f64>) -> DVector<f64> {
        let mut hidden = tokens * &self.w1;
        for mut row in hidden.row_iter_mut() {
            row += &self.b1;
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        (hidden * &self.w2).add_scalar(self.b2)
    }
}

/// Per-LiDAR-cell repeatability with the logits it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatabilityMap {
    pub logits: DVector<f64>,
    pub scores: DVector<f64>,
}

impl RepeatabilityMap {
    pub fn from_logits(logits: DVector<f64>) -> Self {
        let scores = logits.map(sigmoid);
        Self { logits, scores }
    }

    /// Scores injected directly, without logits behind them.
    pub fn from_scores(scores: DVector<f64>) -> Self {
        let logits = scores.map(|s| (s / (1.0 - s)).ln());
        Self { logits, scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn repeatability(flat_lidar: &FlatFeatures, mlp: &RepeatabilityMlp) -> Result<RepeatabilityMap> {
    if mlp.channels() != flat_lidar.channels() {
        return Err(Error::WeightShapeMismatch(format!(
            "repeatability head expects {} channels, tokens have {}",
            mlp.channels(),
            flat_lidar.channels()
        )));
    }
    Ok(RepeatabilityMap::from_logits(mlp.logits(&flat_lidar.tokens)))
}

/// `S(i, j) = P_c(i, j) · S_rep(i)`.
pub fn fuse_confidence(p: &ProbMatrix, r: &RepeatabilityMap) -> Result<ConfidenceMatrix> {
    if p.values.nrows() != r.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows vs {} repeatability scores",
            p.values.nrows(),
            r.len()
        )));
    }
    let mut values = p.values.clone();
    for mut col in values.column_iter_mut() {
        col.component_mul_assign(&r.scores);
    }
    Ok(ConfidenceMatrix { values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    /// LiDAR coarse-cell index.
    pub i: usize,
    /// Camera coarse-cell index.
    pub j: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMatchSet {
    pub matches: Vec<CoarseMatch>,
    pub threshold: f64,
    /// Rows plus columns whose maximum was attained more than once.
    pub argmax_ties: usize,
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Mutual nearest neighbours of `s` with `s(i, j) ≥ θ_c`, ordered by `i`.
pub fn extract_coarse_matches(s: &ConfidenceMatrix, theta_c: f64) -> CoarseMatchSet {
    mutual_matches(&s.values, &s.values, theta_c)
}

/// MNN pairs chosen on `select`, thresholded on `score`. Argmax ties go to
/// the smallest index.
pub fn mutual_matches(select: &DMatrix<f64>, score: &DMatrix<f64>, theta_c: f64) -> CoarseMatchSet {
    let (n, m) = select.shape();
    let mut ties = 0;
    let mut row_best = vec![0usize; n];
    let mut row_val = vec![f64::NEG_INFINITY; n];
    let mut row_tied = vec![false; n];
    let mut col_best = vec![0usize; m];
    for (j, col) in select.column_iter().enumerate() {
        let (best, tied) = argmax(col.iter().copied());
        col_best[j] = best;
        ties += tied as usize;
        for (i, v) in col.iter().enumerate() {
            if *v > row_val[i] {
                row_val[i] = *v;
                row_best[i] = j;
                row_tied[i] = false;
            } else if *v == row_val[i] {
                row_tied[i] = true;
            }
        }
    }
    if m > 0 {
        ties += row_tied.iter().filter(|t| **t).count();
    }
    let matches = if m == 0 {
        Vec::new()
    } else {
        row_best
            .iter()
            .enumerate()
            .filter(|&(i, &j)| col_best[j] == i && score[(i, j)] >= theta_c)
            .map(|(i, &j)| CoarseMatch {
                i,
                j,
                confidence: score[(i, j)],
            })
            .collect()
    };
    CoarseMatchSet {
        matches,
        threshold: theta_c,
        argmax_ties: ties,
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, bool) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    let mut tied = false;
    for (k, v) in values.enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
            tied = false;
        } else if v == best_v {
            tied = true;
        }
    }
    (best, tied)
}

/// Expected offset and positional variance of a `w × w` heatmap given in
/// row-major order. Offsets run from `−(w−1)/2` to `(w−1)/2`; the variance
/// is the trace of the covariance, floored at [`TAU2_FLOOR`].
pub fn soft_argmax(heat: &[f64], w: usize) -> (f64, f64, f64) {
    debug_assert_eq!(heat.len(), w * w);
    let half = (w / 2) as f64;
    let total: f64 = heat.iter().sum();
    let (mut ex, mut ey, mut exx, mut eyy) = (0.0, 0.0, 0.0, 0.0);
    for (k, p) in heat.iter().enumerate() {
        let p = p / total;
        let dx = (k % w) as f64 - half;
        let dy = (k / w) as f64 - half;
        ex += p * dx;
        ey += p * dy;
        exx += p * dx * dx;
        eyy += p * dy * dy;
    }
    let var = (exx - ex * ex) + (eyy - ey * ey);
    (ex, ey, var.max(TAU2_FLOOR))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    /// Odd window side in fine cells.
    pub window: usize,
    /// Softmax temperature over the correlation scores.
    pub temperature: f64,
    /// Optional fine transformer run on both windows before correlation.
    pub attention: Option<AttentionWeights>,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            window: 5,
            temperature: 1.0,
            attention: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    /// LiDAR-image pixel `(u, v)`.
    pub lidar: (f64, f64),
    /// Refined camera pixel `(u, v)`.
    pub camera: (f64, f64),
    pub confidence: f64,
    /// Heatmap variance in fine cells².
    pub tau2: f64,
    /// Camera window center in image pixels.
    pub window_center: (f64, f64),
    /// The window had to be shifted to stay inside the fine grid.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FineMatchSet {
    pub matches: Vec<FineMatch>,
    pub window: usize,
}

impl FineMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn clamped_count(&self) -> usize {
        self.matches.iter().filter(|m| m.clamped).count()
    }
}

/// Fine cell `(row, col)` of coarse cell `index`, checked against the grid.
fn fine_center(pyr: &FeaturePyramid, index: usize) -> Result<(usize, usize)> {
    let cols = pyr.coarse.cols;
    let (row, col) = (index / cols.max(1), index % cols.max(1));
    let (fr, fc) = pyr.coarse_to_fine(row, col);
    if row >= pyr.coarse.rows || fr < 0 || fc < 0 || fr as usize >= pyr.fine.rows || fc as usize >= pyr.fine.cols {
        return Err(Error::WindowOutOfRange { row, col });
    }
    Ok((fr as usize, fc as usize))
}

/// Top-left corner of a `w`-window around `center` shifted to fit in `len`.
fn window_origin(center: usize, w: usize, len: usize) -> (usize, bool) {
    let half = w / 2;
    if len < w {
        return (0, true);
    }
    let start = center as isize - half as isize;
    let clamped = start.clamp(0, (len - w) as isize) as usize;
    (clamped, clamped as isize != start)
}

fn crop(grid: &FeatureGrid, r0: usize, c0: usize, w: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(w * w, grid.channels);
    for dy in 0..w {
        for dx in 0..w {
            let r = (r0 + dy).min(grid.rows - 1);
            let c = (c0 + dx).min(grid.cols - 1);
            m.row_mut(dy * w + dx).copy_from_slice(grid.at(r, c));
        }
    }
    m
}

/// Upgrades every coarse match to a sub-pixel camera position.
pub fn refine(
    coarse: &CoarseMatchSet,
    lidar: &FeaturePyramid,
    camera: &FeaturePyramid,
    params: &RefineParams,
) -> Result<FineMatchSet> {
    let w = params.window;
    if w % 2 == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!("window must be odd, got {w}")));
    }
    if !(params.temperature > 0.0) {
        return Err(Error::InvalidConfig("fine temperature must be positive".into()));
    }
    if lidar.fine.channels != camera.fine.channels {
        return Err(Error::DimensionMismatch("fine channel counts differ".into()));
    }
    let matches = coarse
        .matches
        .par_iter()
        .map(|m| refine_one(m, lidar, camera, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(FineMatchSet { matches, window: w })
}

fn refine_one(m: &CoarseMatch, lidar: &FeaturePyramid, camera: &FeaturePyramid, params: &RefineParams) -> Result<FineMatch> {
    let w = params.window;
    let (lr, lc) = fine_center(lidar, m.i)?;
    let (cr, cc) = fine_center(camera, m.j)?;
    let (wr, clamp_r) = window_origin(cr, w, camera.fine.rows);
    let (wc, clamp_c) = window_origin(cc, w, camera.fine.cols);
    let cam_win = crop(&camera.fine, wr, wc, w);
    let (center, cam_win) = match &params.attention {
        None => (RowDVector::from_row_slice(lidar.fine.at(lr, lc)), cam_win),
        Some(att) => {
            let (lwr, _) = window_origin(lr, w, lidar.fine.rows);
            let (lwc, _) = window_origin(lc, w, lidar.fine.cols);
            let lid_win = crop(&lidar.fine, lwr, lwc, w);
            let (lid_win, cam_win) = attend_tokens(lid_win, cam_win, att)?;
            let k = (lr - lwr) * w + (lc - lwc);
            (lid_win.row(k).into_owned(), cam_win)
        }
    };
    let mut scores = (cam_win * center.transpose()).transpose() / params.temperature;
    let mx = scores.max();
    scores.iter_mut().for_each(|s| *s = (*s - mx).exp());
    let (dx, dy, tau2) = soft_argmax(scores.as_slice(), w);
    let half = (w / 2) as f64;
    let center_r = wr as f64 + half;
    let center_c = wc as f64 + half;
    Ok(FineMatch {
        lidar: lidar.fine_pixel(lr as f64, lc as f64),
        camera: camera.fine_pixel(center_r + dy, center_c + dx),
        confidence: m.confidence,
        tau2,
        window_center: camera.fine_pixel(center_r, center_c),
        clamped: clamp_r || clamp_c,
    })
}

/// Matching parameters recorded in dump headers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub theta_c: f64,
    pub temperature: f64,
    pub window: usize,
    pub fine_temperature: f64,
    /// Choose mutual nearest neighbours on the fused confidence instead of
    /// the raw Dual-Softmax probabilities.
    pub mnn_on_fused: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            theta_c: 0.2,
            temperature: 0.1,
            window: 5,
            fine_temperature: 1.0,
            mnn_on_fused: true,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        crate::config::check_range("theta_c", self.theta_c, 0.0, 1.0, true)?;
        if !(self.temperature > 0.0 && self.fine_temperature > 0.0) {
            return Err(Error::InvalidConfig("temperatures must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!("window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

/// One line per match: `u0 v0 u1 v1 confidence tau2`, after a `#` header.
pub fn format_matches(set: &FineMatchSet, p: &MatchParams) -> String {
    let mut s = format!(
        "# theta_c={} w={} temperature={} fine_temperature={}\n",
        p.theta_c, p.window, p.temperature, p.fine_temperature
    );
    for m in &set.matches {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            m.lidar.0, m.lidar.1, m.camera.0, m.camera.1, m.confidence, m.tau2
        );
    }
    s
}

/// Reads a match dump; window centers are not stored and come back equal to
/// the refined pixel.
pub fn parse_matches(text: &str, path: &Path) -> Result<FineMatchSet> {
    let mut set = FineMatchSet::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('#') {
            for kv in header.split_whitespace() {
                if let Some(w) = kv.strip_prefix("w=") {
                    set.window = w
                        .parse()
                        .map_err(|_| Error::format(path, format!("line {}: bad window", n + 1)))?;
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: not a number", n + 1)))?;
        if v.len() != 6 {
            return Err(Error::format(path, format!("line {}: expected 6 values", n + 1)));
        }
        set.matches.push(FineMatch {
            lidar: (v[0], v[1]),
            camera: (v[2], v[3]),
            confidence: v[4],
            tau2: v[5],
            window_center: (v[2], v[3]),
            clamped: false,
        });
    }
    Ok(set)
}

pub fn write_matches(path: &Path, set: &FineMatchSet, p: &MatchParams) -> Result<()> {
    crate::io::write_atomic(path, format_matches(set, p).as_bytes())
}

pub fn read_matches(path: &Path) -> Result<FineMatchSet> {
    parse_matches(&std::fs::read_to_string(path)?, path)
}
