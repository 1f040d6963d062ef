//! RGB-uv log-chroma histograms and their PCA compression.
//!
//! Each pixel contributes to three m×m layers, one per channel `c`, at the
//! log-chroma coordinates `u = ln(c / next)`, `v = ln(c / prev)` with the
//! cyclic channel order R→G→B→R. The contribution is the pixel's intensity
//! `sqrt(R² + G² + B²)`. Contributions are accumulated in fixed point so the
//! result is independent of pixel order, then the whole tensor is scaled to
//! unit L2 norm.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::color::{ImageBuffer, RgbColor};
use crate::error::{Error, Result};

/// Default bins per log-chroma axis.
pub const DEFAULT_BINS: usize = 60;
/// Default log-chroma axis bounds (both axes).
pub const DEFAULT_BOUNDS: (f64, f64) = (-3.2, 3.2);
/// Black-level clamp applied before taking logarithms.
pub const DEFAULT_EPSILON: f64 = 1.0 / 512.0;
/// Length of a compact feature.
pub const DEFAULT_FEATURE_DIM: usize = 55;

/// Identifies the u/v channel-ratio convention. Written into model files.
pub const UV_CONVENTION: &str = "cyclic RGB: u=ln(c/next) v=ln(c/prev)";

// 2^52: weights are at most sqrt(3), so every quantized weight fits in 53 bits.
const FIXED_POINT_SCALE: f64 = 4_503_599_627_370_496.0;
const HISTOGRAM_CHUNK: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramParams {
    pub bins: usize,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    pub epsilon: f64,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            u_range: DEFAULT_BOUNDS,
            v_range: DEFAULT_BOUNDS,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl HistogramParams {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins,
            ..Self::default()
        }
    }

    /// Length of the vectorized histogram, `3m²`.
    pub fn dim(&self) -> usize {
        3 * self.bins * self.bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::invalid(format!(
                "histogram needs at least 2 bins per axis, got {}",
                self.bins
            )));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !range_ok(self.u_range) || !range_ok(self.v_range) {
            return Err(Error::invalid("histogram axis bounds must be finite with lo < hi"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid(format!(
                "black-level epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    #[inline]
    fn bin(&self, x: f64, (lo, hi): (f64, f64)) -> usize {
        let t = ((x - lo) / (hi - lo) * self.bins as f64).floor();
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }
}

/// An m×m×3 histogram, stored channel-major then u then v.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbUvHistogram {
    params: HistogramParams,
    bins: Vec<f64>,
}

impl RgbUvHistogram {
    pub fn params(&self) -> &HistogramParams {
        &self.params
    }

    /// The vectorized tensor, index `(c · m + u) · m + v`.
    pub fn as_slice(&self) -> &[f64] {
        &self.bins
    }

    pub fn get(&self, channel: usize, u: usize, v: usize) -> f64 {
        let m = self.params.bins;
        self.bins[(channel * m + u) * m + v]
    }

    pub fn norm(&self) -> f64 {
        self.bins.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn compute_histogram(img: &ImageBuffer, params: &HistogramParams) -> Result<RgbUvHistogram> {
    params.validate()?;
    let eps = params.epsilon;
    if !img
        .pixels()
        .iter()
        .any(|p| p.r > eps && p.g > eps && p.b > eps)
    {
        return Err(Error::degenerate(format!(
            "every pixel has a channel at or below the black level {eps}"
        )));
    }

    let dim = params.dim();
    let counts = img
        .pixels()
        .par_chunks(HISTOGRAM_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0u128; dim];
            accumulate(chunk, params, &mut acc);
            acc
        })
        .reduce(
            || vec![0u128; dim],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let mut bins: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let norm = bins.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::degenerate("histogram is empty"));
    }
    for b in &mut bins {
        *b /= norm;
    }
    Ok(RgbUvHistogram {
        params: *params,
        bins,
    })
}

fn accumulate(pixels: &[RgbColor], params: &HistogramParams, acc: &mut [u128]) {
    let m = params.bins;
    let layer = m * m;
    let eps = params.epsilon;
    for p in pixels {
        let r = p.r.clamp(eps, 1.0);
        let g = p.g.clamp(eps, 1.0);
        let b = p.b.clamp(eps, 1.0);
        let weight = ((r * r + g * g + b * b).sqrt() * FIXED_POINT_SCALE).round() as u128;
        let (lr, lg, lb) = (r.ln(), g.ln(), b.ln());
        // (u, v) per layer: R: (R/G, R/B), G: (G/B, G/R), B: (B/R, B/G)
        let coords = [(lr - lg, lr - lb), (lg - lb, lg - lr), (lb - lr, lb - lg)];
        for (c, (u, v)) in coords.into_iter().enumerate() {
            let iu = params.bin(u, params.u_range);
            let iv = params.bin(v, params.v_range);
            acc[c * layer + iu * m + iv] += weight;
        }
    }
}

/// Principal axes of a set of vectorized histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// D×k matrix with orthonormal columns.
    coeff: DMatrix<f64>,
    /// Training mean, length D.
    bias: DVector<f64>,
    /// Variance along each column of `coeff`, non-increasing.
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn from_parts(
        coeff: DMatrix<f64>,
        bias: DVector<f64>,
        explained_variance: Vec<f64>,
    ) -> Result<Self> {
        if coeff.nrows() != bias.len() || coeff.ncols() != explained_variance.len() {
            return Err(Error::invalid(format!(
                "PCA parts disagree: coeff {}x{}, bias {}, variances {}",
                coeff.nrows(),
                coeff.ncols(),
                bias.len(),
                explained_variance.len()
            )));
        }
        Ok(Self {
            coeff,
            bias,
            explained_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.coeff.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.coeff.ncols()
    }

    pub fn coeff(&self) -> &DMatrix<f64> {
        &self.coeff
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `coeffᵀ · (x − bias)`.
    pub fn project_slice(&self, x: &[f64]) -> Result<CompactFeature> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "feature has length {} but the PCA model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(self.bias.iter()).map(|(a, b)| a - b).collect();
        let v = self
            .coeff
            .column_iter()
            .map(|col| col.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect();
        Ok(CompactFeature(v))
    }

    /// Maps a compact feature back to the input space.
    pub fn reconstruct(&self, v: &CompactFeature) -> Vec<f64> {
        let mut out: Vec<f64> = self.bias.iter().copied().collect();
        for (col, &w) in self.coeff.column_iter().zip(v.as_slice()) {
            for (o, c) in out.iter_mut().zip(col.iter()) {
                *o += w * c;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactFeature(Vec<f64>);

impl CompactFeature {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("compact feature has non-finite entries"));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn squared_distance(&self, other: &CompactFeature) -> f64 {
        squared_distance(&self.0, &other.0)
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn project(pca: &PcaModel, h: &RgbUvHistogram) -> Result<CompactFeature> {
    pca.project_slice(h.as_slice())
}

/// Fits a PCA basis of `out_dim` components to the rows of `features`.
///
/// Uses the D×D covariance when there are more samples than dimensions and
/// the N×N Gram matrix of the centered samples otherwise. Components are
/// ordered by non-increasing variance, and each is signed so its
/// largest-magnitude entry is positive. Directions without variance (rank
/// deficient data) are filled with a deterministic orthonormal completion.
pub fn fit_pca(features: &[Vec<f64>], out_dim: usize) -> Result<PcaModel> {
    let n = features.len();
    if out_dim == 0 {
        return Err(Error::invalid("PCA output dimension must be positive"));
    }
    if n < out_dim {
        return Err(Error::invalid(format!(
            "PCA to {out_dim} components needs at least {out_dim} samples, got {n}"
        )));
    }
    let d = features[0].len();
    if let Some((i, row)) = features.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::invalid(format!(
            "sample {i} has length {} but sample 0 has {d}",
            row.len()
        )));
    }
    if out_dim > d {
        return Err(Error::invalid(format!(
            "PCA output dimension {out_dim} exceeds input dimension {d}"
        )));
    }

    let mut bias = DVector::<f64>::zeros(d);
    for row in features {
        for (b, x) in bias.iter_mut().zip(row) {
            *b += x;
        }
    }
    bias /= n as f64;
    let centered = DMatrix::from_fn(n, d, |i, j| features[i][j] - bias[j]);
    // Centering a constant column leaves rounding noise of order eps·|x|.
    let scale = features.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let noise = (n * d) as f64 * (16.0 * f64::EPSILON * scale).powi(2);
    let total: f64 = centered.iter().map(|x| x * x).sum();
    if !(total > noise) {
        return Err(Error::degenerate("training features have zero variance"));
    }
    let denom = (n.max(2) - 1) as f64;

    let (mut components, mut variances) = if n > d {
        covariance_route(&centered, out_dim, denom)
    } else {
        gram_route(&centered, out_dim, denom)
    };
    complete_basis(&mut components, &mut variances, d, out_dim);

    for col in &mut components {
        apply_sign_convention(col);
    }
    let coeff = DMatrix::from_fn(d, out_dim, |i, j| components[j][i]);
    PcaModel::from_parts(coeff, bias, variances)
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn null_tolerance(largest: f64, n: usize) -> f64 {
    largest.max(0.0) * (n as f64) * f64::EPSILON * 16.0
}

fn covariance_route(centered: &DMatrix<f64>, k: usize, denom: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let cov = centered.tr_mul(centered) / denom;
    let (values, vectors) = sorted_eigen(cov);
    let tol = null_tolerance(values[0], values.len());
    let mut comps = Vec::with_capacity(k);
    let mut vars = Vec::with_capacity(k);
    for j in 0..k {
        if values[j] <= tol {
            break;
        }
        comps.push(vectors.column(j).iter().copied().collect());
        vars.push(values[j]);
    }
    (comps, vars)
}

fn gram_route(centered: &DMatrix<f64>, k: usize, denom: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let gram = centered * centered.transpose();
    let (values, vectors) = sorted_eigen(gram);
    let tol = null_tolerance(values[0], values.len());
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut vars = Vec::with_capacity(k);
    for j in 0..k {
        if values[j] <= tol {
            break;
        }
        let w = centered.tr_mul(&vectors.column(j)) / values[j].sqrt();
        let mut w: Vec<f64> = w.iter().copied().collect();
        if !orthonormalize_against(&mut w, &comps) {
            break;
        }
        comps.push(w);
        vars.push(values[j] / denom);
    }
    (comps, vars)
}

/// Modified Gram-Schmidt step; returns false when `v` lies in the span.
fn orthonormalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let before = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > before * 1e-6) {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn complete_basis(comps: &mut Vec<Vec<f64>>, vars: &mut Vec<f64>, d: usize, k: usize) {
    let mut axis = 0;
    while comps.len() < k && axis < d {
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        axis += 1;
        if orthonormalize_against(&mut e, comps) {
            comps.push(e);
            vars.push(0.0);
        }
    }
}

fn apply_sign_convention(col: &mut [f64]) {
    let mut best = 0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        for x in col.iter_mut() {
            *x = -*x;
        }
    }
}
