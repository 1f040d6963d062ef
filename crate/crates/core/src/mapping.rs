//! Polynomial color transforms: least-squares fitting between paired colors
//! and per-pixel application.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::color::{clamp_gamut, kernel_phi_unchecked, ImageBuffer, RgbColor, KERNEL_LEN};
use crate::error::{Error, Result};

/// Largest number of pixel pairs used by one fit. Larger inputs are
/// subsampled with a uniform stride.
pub const FIT_SAMPLE_LIMIT: usize = 65_536;

/// Gram-matrix condition number above which the Cholesky route is abandoned
/// for the SVD route.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Pixels processed per parallel work item in [`ColorTransform::apply_into`].
const APPLY_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    CameraStandard,
    AdobeStandard,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::CameraStandard, Style::AdobeStandard];

    pub fn code(self) -> &'static str {
        match self {
            Style::CameraStandard => "CS",
            Style::AdobeStandard => "AS",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Style::CameraStandard => 0,
            Style::AdobeStandard => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Style::CameraStandard),
            1 => Some(Style::AdobeStandard),
            _ => None,
        }
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CS" => Ok(Style::CameraStandard),
            "AS" => Ok(Style::AdobeStandard),
            _ => Err(Error::invalid(format!("unknown style {s:?} (expected CS or AS)"))),
        }
    }
}

/// A white-balance rendition: color temperature plus photo-finishing style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WbSetting {
    pub temperature: u32,
    pub style: Style,
}

impl WbSetting {
    pub const TEMPERATURES: [u32; 5] = [2850, 3800, 5500, 6500, 7500];

    pub const fn new(temperature: u32, style: Style) -> Self {
        Self { temperature, style }
    }

    /// The ten canonical settings, temperature-major.
    pub fn canonical() -> Vec<WbSetting> {
        Self::TEMPERATURES
            .iter()
            .flat_map(|&t| Style::ALL.iter().map(move |&s| WbSetting::new(t, s)))
            .collect()
    }
}

impl fmt::Display for WbSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}K_{}", self.temperature, self.style.code())
    }
}

impl FromStr for WbSetting {
    type Err = Error;

    /// Parses names like `2850K_AS`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed WB setting {s:?} (expected e.g. 2850K_AS)"));
        let (temp, style) = s.split_once('_').ok_or_else(bad)?;
        let temp = temp
            .strip_suffix('K')
            .and_then(|t| t.parse::<u32>().ok())
            .filter(|&t| t > 0)
            .ok_or_else(bad)?;
        Ok(WbSetting::new(temp, style.parse()?))
    }
}

/// What a transform maps into: a particular WB rendition (emulation) or the
/// correctly white-balanced rendition (correction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformTag {
    Setting(WbSetting),
    Corrected,
}

impl fmt::Display for TransformTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformTag::Setting(s) => s.fmt(f),
            TransformTag::Corrected => f.write_str("corrected"),
        }
    }
}

pub type TransformMatrix = [[f64; KERNEL_LEN]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ColorTransform {
    matrix: TransformMatrix,
    tag: TransformTag,
}

impl ColorTransform {
    pub fn new(matrix: TransformMatrix, tag: TransformTag) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("color transform has non-finite entries"));
        }
        Ok(Self { matrix, tag })
    }

    /// The transform whose output is its (clamped) input.
    pub fn identity(tag: TransformTag) -> Self {
        let mut matrix = [[0.0; KERNEL_LEN]; 3];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { matrix, tag }
    }

    pub fn matrix(&self) -> &TransformMatrix {
        &self.matrix
    }

    pub fn tag(&self) -> TransformTag {
        self.tag
    }

    /// `M · φ(c)` without clamping.
    #[inline(always)]
    pub fn map_unclamped(&self, c: RgbColor) -> RgbColor {
        let k = kernel_phi_unchecked(c);
        let row = |r: &[f64; KERNEL_LEN]| {
            r[0] * k[0]
                + r[1] * k[1]
                + r[2] * k[2]
                + r[3] * k[3]
                + r[4] * k[4]
                + r[5] * k[5]
                + r[6] * k[6]
                + r[7] * k[7]
                + r[8] * k[8]
        };
        RgbColor::new(row(&self.matrix[0]), row(&self.matrix[1]), row(&self.matrix[2]))
    }

    #[inline(always)]
    pub fn map(&self, c: RgbColor) -> RgbColor {
        clamp_gamut(self.map_unclamped(c))
    }

    /// Writes `clamp(M · φ(src[i]))` into `dst[i]`. Parallel over fixed-size
    /// chunks; each output depends only on its own input pixel, so the result
    /// does not depend on the thread count.
    pub fn apply_into(&self, src: &[RgbColor], dst: &mut [RgbColor]) -> Result<()> {
        if src.len() != dst.len() {
            return Err(Error::invalid(format!(
                "source has {} pixels but destination has {}",
                src.len(),
                dst.len()
            )));
        }
        if src.len() <= APPLY_CHUNK {
            self.apply_serial(src, dst);
        } else {
            dst.par_chunks_mut(APPLY_CHUNK)
                .zip(src.par_chunks(APPLY_CHUNK))
                .for_each(|(d, s)| self.apply_serial(s, d));
        }
        Ok(())
    }

    /// Single-threaded pixel loop.
    pub fn apply_serial(&self, src: &[RgbColor], dst: &mut [RgbColor]) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = self.map(s);
        }
    }
}

/// Applies `t` to every pixel of `img`, clamping results to the unit cube.
pub fn apply_transform(t: &ColorTransform, img: &ImageBuffer) -> Result<ImageBuffer> {
    if t.matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("color transform has non-finite entries"));
    }
    let mut out = vec![RgbColor::default(); img.len()];
    t.apply_into(img.pixels(), &mut out)?;
    ImageBuffer::new(img.width(), img.height(), out)
}

/// Fits the 3×9 matrix minimizing `‖M φ(source) − target‖_F`.
pub fn fit_transform(
    source: &[RgbColor],
    target: &[RgbColor],
    tag: TransformTag,
) -> Result<ColorTransform> {
    fit_transform_with_limit(source, target, tag, FIT_SAMPLE_LIMIT)
}

/// [`fit_transform`] on two images of identical dimensions.
pub fn fit_images(
    source: &ImageBuffer,
    target: &ImageBuffer,
    tag: TransformTag,
) -> Result<ColorTransform> {
    if !source.same_dimensions(target) {
        return Err(Error::invalid(format!(
            "source is {}x{} but target is {}x{}",
            source.width(),
            source.height(),
            target.width(),
            target.height()
        )));
    }
    fit_transform(source.pixels(), target.pixels(), tag)
}

pub fn fit_transform_with_limit(
    source: &[RgbColor],
    target: &[RgbColor],
    tag: TransformTag,
    sample_limit: usize,
) -> Result<ColorTransform> {
    let (src, dst) = sample_pairs(source, target, sample_limit)?;
    let matrix = match solve_normal_equations(&src, &dst)? {
        Some(m) => m,
        None => solve_svd(&src, &dst)?,
    };
    ColorTransform::new(matrix, tag)
}

/// Indices kept when subsampling `n` pairs down to at most `limit`.
pub fn sample_indices(n: usize, limit: usize) -> impl Iterator<Item = usize> {
    let stride = if n > limit && limit > 0 {
        n.div_ceil(limit)
    } else {
        1
    };
    (0..n).step_by(stride)
}

type Samples = (Vec<RgbColor>, Vec<RgbColor>);

fn sample_pairs(source: &[RgbColor], target: &[RgbColor], limit: usize) -> Result<Samples> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "source has {} colors but target has {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < KERNEL_LEN {
        return Err(Error::invalid(format!(
            "need at least {KERNEL_LEN} color pairs, got {}",
            source.len()
        )));
    }
    if let Some(bad) = source.iter().chain(target).find(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("non-finite color {bad:?}")));
    }
    let idx: Vec<usize> = sample_indices(source.len(), limit).collect();
    Ok((
        idx.iter().map(|&i| source[i]).collect(),
        idx.iter().map(|&i| target[i]).collect(),
    ))
}

/// Cholesky solve of the 9×9 normal equations. `Ok(None)` when the Gram
/// matrix is too ill-conditioned for this route.
fn solve_normal_equations(
    src: &[RgbColor],
    dst: &[RgbColor],
) -> Result<Option<TransformMatrix>> {
    let mut gram = SMatrix::<f64, 9, 9>::zeros();
    let mut cross = SMatrix::<f64, 9, 3>::zeros();
    for (&s, &t) in src.iter().zip(dst) {
        let k = kernel_phi_unchecked(s);
        let t = t.to_array();
        for i in 0..KERNEL_LEN {
            for j in i..KERNEL_LEN {
                gram[(i, j)] += k[i] * k[j];
            }
            for c in 0..3 {
                cross[(i, c)] += k[i] * t[c];
            }
        }
    }
    for i in 0..KERNEL_LEN {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    let eig = SymmetricEigen::new(gram).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || max / min > GRAM_CONDITION_LIMIT {
        return Ok(None);
    }
    let Some(chol) = gram.cholesky() else {
        return Ok(None);
    };
    let x = chol.solve(&cross);
    Ok(Some(to_transform_matrix(|r, c| x[(c, r)])))
}

/// Least squares through the SVD of the n×9 kernel matrix. Detects rank
/// deficiency.
pub(crate) fn solve_svd(src: &[RgbColor], dst: &[RgbColor]) -> Result<TransformMatrix> {
    let n = src.len();
    let a = DMatrix::from_fn(n, KERNEL_LEN, |i, j| kernel_phi_unchecked(src[i])[j]);
    let b = DMatrix::from_fn(n, 3, |i, c| dst[i].to_array()[c]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(KERNEL_LEN) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if smax == 0.0 || rank < KERNEL_LEN {
        return Err(Error::degenerate(format!(
            "kernelized source colors have rank {rank} < {KERNEL_LEN}; \
             the image has too few distinct colors to determine a polynomial transform"
        )));
    }
    let x = svd
        .solve(&b, tol)
        .map_err(|e| Error::degenerate(format!("SVD solve failed: {e}")))?;
    Ok(to_transform_matrix(|r, c| x[(c, r)]))
}

fn to_transform_matrix(mut f: impl FnMut(usize, usize) -> f64) -> TransformMatrix {
    let mut m = [[0.0; KERNEL_LEN]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f(r, c);
        }
    }
    m
}

/// `‖M φ(source) − target‖_F`, unclamped.
pub fn frobenius_residual(t: &ColorTransform, source: &[RgbColor], target: &[RgbColor]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(&s, &d)| {
            let p = t.map_unclamped(s);
            (p.r - d.r).powi(2) + (p.g - d.g).powi(2) + (p.b - d.b).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean absolute per-channel difference between two equally sized pixel
/// slices.
pub fn mean_abs_error(a: &[RgbColor], b: &[RgbColor]) -> f64 {
    assert_eq!(a.len(), b.len(), "pixel counts differ");
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p.r - q.r).abs() + (p.g - q.g).abs() + (p.b - q.b).abs())
        .sum();
    sum / (3 * a.len()) as f64
}

/// Mean absolute error between `apply_transform(t, source)` and `target`.
pub fn fit_residual(t: &ColorTransform, source: &[RgbColor], target: &[RgbColor]) -> f64 {
    let sum: f64 = source
        .iter()
        .zip(target)
        .map(|(&s, q)| {
            let p = t.map(s);
            (p.r - q.r).abs() + (p.g - q.g).abs() + (p.b - q.b).abs()
        })
        .sum();
    sum / (3 * source.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TAG: TransformTag = TransformTag::Corrected;

    fn random_colors(rng: &mut ChaCha8Rng, n: usize) -> Vec<RgbColor> {
        (0..n)
            .map(|_| RgbColor::new(rng.gen(), rng.gen(), rng.gen()))
            .collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng) -> TransformMatrix {
        to_transform_matrix(|_, _| rng.gen_range(-1.0..1.0))
    }

    fn apply_raw(m: &TransformMatrix, src: &[RgbColor]) -> Vec<RgbColor> {
        let t = ColorTransform::new(*m, TAG).unwrap();
        src.iter().map(|&c| t.map_unclamped(c)).collect()
    }

    #[test]
    fn identity_target_fits_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_colors(&mut rng, 400);
        let t = fit_transform(&src, &src, TAG).unwrap();
        let norm = src
            .iter()
            .map(|c| c.r * c.r + c.g * c.g + c.b * c.b)
            .sum::<f64>()
            .sqrt();
        assert!(frobenius_residual(&t, &src, &src) / norm < 1e-8);
        let img = ImageBuffer::new(20, 20, src.clone()).unwrap();
        let out = apply_transform(&t, &img).unwrap();
        for (a, b) in out.pixels().iter().zip(&src) {
            assert!((a.r - b.r).abs() < 1e-6 && (a.g - b.g).abs() < 1e-6 && (a.b - b.b).abs() < 1e-6);
        }
    }

    #[test]
    fn recovers_generating_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_colors(&mut rng, 500);
        let truth = random_matrix(&mut rng);
        let dst = apply_raw(&truth, &src);
        let fitted = fit_transform(&src, &dst, TAG).unwrap();
        for (a, b) in fitted.matrix().iter().flatten().zip(truth.iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn cholesky_and_svd_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let src = random_colors(&mut rng, 60);
            let dst = random_colors(&mut rng, 60);
            let chol = solve_normal_equations(&src, &dst).unwrap().unwrap();
            let svd = solve_svd(&src, &dst).unwrap();
            for (a, b) in chol.iter().flatten().zip(svd.iter().flatten()) {
                assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_image_is_degenerate() {
        let src = vec![RgbColor::new(0.2, 0.4, 0.6); 100];
        match fit_transform(&src, &src, TAG) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("rank"), "{msg}"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = vec![RgbColor::gray(0.5); 20];
        let b = vec![RgbColor::gray(0.5); 19];
        assert!(matches!(fit_transform(&a, &b, TAG), Err(Error::InvalidInput(_))));
        assert!(matches!(
            fit_transform(&a[..5], &a[..5], TAG),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn identity_embedding_clamps_input() {
        let img = ImageBuffer::new(
            3,
            1,
            vec![
                RgbColor::new(0.1, 0.5, 0.9),
                RgbColor::new(1.3, -0.2, 0.5),
                RgbColor::new(0.0, 1.0, 0.25),
            ],
        )
        .unwrap();
        let out = apply_transform(&ColorTransform::identity(TAG), &img).unwrap();
        assert_eq!(out.pixels()[0], img.pixels()[0]);
        assert_eq!(out.pixels()[1], RgbColor::new(1.0, 0.0, 0.5));
        assert_eq!(out.pixels()[2], img.pixels()[2]);
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let mut m = ColorTransform::identity(TAG).matrix;
        m[1][4] = f64::NAN;
        assert!(ColorTransform::new(m, TAG).is_err());
    }

    #[test]
    fn fitted_matrix_is_residual_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_colors(&mut rng, 300);
        let dst: Vec<RgbColor> = src
            .iter()
            .map(|c| RgbColor::new(c.r.powf(0.8), c.g * 0.9, (c.b * 1.2).min(1.0)))
            .collect();
        let fitted = fit_transform(&src, &dst, TAG).unwrap();
        let base = frobenius_residual(&fitted, &src, &dst);
        for _ in 0..100 {
            let mut delta = random_matrix(&mut rng);
            let norm = delta.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let mut m = *fitted.matrix();
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    delta[r][c] *= 1e-3 / norm;
                    *v += delta[r][c];
                }
            }
            let perturbed = ColorTransform::new(m, TAG).unwrap();
            assert!(frobenius_residual(&perturbed, &src, &dst) >= base);
        }
    }

    #[test]
    fn subsampling_uses_uniform_stride() {
        let idx: Vec<usize> = sample_indices(10, 4).collect();
        assert_eq!(idx, vec![0, 3, 6, 9]);
        assert_eq!(sample_indices(5, 65_536).count(), 5);
        assert!(sample_indices(200_001, FIT_SAMPLE_LIMIT).count() <= FIT_SAMPLE_LIMIT);
    }

    #[test]
    fn apply_is_pixelwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_colors(&mut rng, 64);
        let t = ColorTransform::new(random_matrix(&mut rng), TAG).unwrap();
        let img = ImageBuffer::new(8, 8, src.clone()).unwrap();
        let out = apply_transform(&t, &img).unwrap();
        let mut perm: Vec<usize> = (0..64).collect();
        perm.reverse();
        perm.swap(3, 40);
        let permuted = ImageBuffer::new(8, 8, perm.iter().map(|&i| src[i]).collect()).unwrap();
        let out_p = apply_transform(&t, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(out_p.pixels()[j], out.pixels()[i]);
        }
    }

    #[test]
    fn parallel_apply_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = random_colors(&mut rng, APPLY_CHUNK * 2 + 17);
        let t = ColorTransform::new(random_matrix(&mut rng), TAG).unwrap();
        let mut par = vec![RgbColor::default(); src.len()];
        let mut ser = par.clone();
        t.apply_into(&src, &mut par).unwrap();
        t.apply_serial(&src, &mut ser);
        assert_eq!(par, ser);
    }

    #[test]
    fn setting_names_round_trip() {
        for s in WbSetting::canonical() {
            assert_eq!(s.to_string().parse::<WbSetting>().unwrap(), s);
        }
        assert_eq!(WbSetting::canonical().len(), 10);
        assert_eq!(
            "2850K_AS".parse::<WbSetting>().unwrap(),
            WbSetting::new(2850, Style::AdobeStandard)
        );
        for bad in ["2850_AS", "K_AS", "2850K_XS", "2850K", "0K_CS"] {
            assert!(bad.parse::<WbSetting>().is_err(), "{bad}");
        }
    }
}
