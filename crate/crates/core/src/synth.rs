//! Synthetic paired datasets from a simplified camera pipeline: decode to
//! linear, scale by diagonal white-balance gains, clip, apply a style tone
//! curve and re-encode.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::{srgb_decode_unchecked, srgb_encode_unchecked, ImageBuffer, RgbColor};
use crate::error::{Error, Result};
use crate::io::{quantize_8bit, save_image, write_atomic};
use crate::mapping::{Style, WbSetting};
use crate::model::{assemble, Direction, ingest_images, BuildParams, BuildReport, DatasetManifest, ManifestGroup, WbModel};
use crate::pipeline::detect_grayscale;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToneCurve {
    Identity,
    /// `x ↦ x^γ` on linear values.
    Gamma(f64),
}

impl ToneCurve {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ToneCurve::Identity => x,
            ToneCurve::Gamma(g) => x.powf(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraEmulation {
    /// Kelvin → green-normalized diagonal gains.
    pub gains: BTreeMap<u32, [f64; 3]>,
    pub curves: BTreeMap<Style, ToneCurve>,
}

impl Default for CameraEmulation {
    fn default() -> Self {
        let gains = [
            (2850, [0.60, 1.00, 1.70]),
            (3800, [0.80, 1.00, 1.30]),
            (5500, [1.00, 1.00, 1.00]),
            (6500, [1.12, 1.00, 0.88]),
            (7500, [1.25, 1.00, 0.75]),
        ]
        .into_iter()
        .collect();
        let curves = [
            (Style::AdobeStandard, ToneCurve::Identity),
            (Style::CameraStandard, ToneCurve::Gamma(0.85)),
        ]
        .into_iter()
        .collect();
        Self { gains, curves }
    }
}

impl CameraEmulation {
    pub fn validate(&self) -> Result<()> {
        if self.gains.is_empty() || self.curves.is_empty() {
            return Err(Error::invalid("camera emulation needs at least one gain and one style"));
        }
        for (t, g) in &self.gains {
            if g[1] != 1.0 {
                return Err(Error::invalid(format!("{t}K: green gain must be 1, got {}", g[1])));
            }
            if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid(format!("{t}K: gains must be positive")));
            }
        }
        for (s, c) in &self.curves {
            if let ToneCurve::Gamma(g) = c {
                if !(g.is_finite() && *g > 0.0) {
                    return Err(Error::invalid(format!("{}: gamma must be positive", s.code())));
                }
            }
        }
        Ok(())
    }

    /// Every (temperature, style) pair, temperature-major.
    pub fn settings(&self) -> Vec<WbSetting> {
        self.gains
            .keys()
            .flat_map(|&t| self.curves.keys().map(move |&s| WbSetting::new(t, s)))
            .collect()
    }

    fn lookup(&self, t: u32, style: Style) -> Result<([f64; 3], ToneCurve)> {
        let gains = *self
            .gains
            .get(&t)
            .ok_or_else(|| Error::invalid(format!("no gains for {t}K")))?;
        let curve = *self
            .curves
            .get(&style)
            .ok_or_else(|| Error::invalid(format!("no tone curve for style {}", style.code())))?;
        Ok((gains, curve))
    }

    /// Returns `(correct, cast)` renditions of `base` for one setting.
    pub fn render_pair(&self, base: &ImageBuffer, t: u32, style: Style) -> Result<(ImageBuffer, ImageBuffer)> {
        let (gains, curve) = self.lookup(t, style)?;
        Ok((
            render(base, [1.0; 3], curve),
            render(base, gains, curve),
        ))
    }

    /// The rendition used as a group's correct image: unit gains and no tone
    /// curve.
    pub fn neutral(&self, base: &ImageBuffer) -> ImageBuffer {
        render(base, [1.0; 3], ToneCurve::Identity)
    }

    /// Correct rendition in a given style: unit gains through that style's
    /// tone curve.
    pub fn reference(&self, base: &ImageBuffer, style: Style) -> ImageBuffer {
        let curve = self.curves.get(&style).copied().unwrap_or(ToneCurve::Identity);
        render(base, [1.0; 3], curve)
    }

    pub fn cast(&self, base: &ImageBuffer, setting: WbSetting) -> Result<ImageBuffer> {
        let (gains, curve) = self.lookup(setting.temperature, setting.style)?;
        Ok(render(base, gains, curve))
    }
}

/// `encode(curve(clip(gains ⊙ decode(base))))`, per pixel.
pub fn render(base: &ImageBuffer, gains: [f64; 3], curve: ToneCurve) -> ImageBuffer {
    let channel = |v: f64, g: f64| {
        let lin = (srgb_decode_unchecked(v.clamp(0.0, 1.0)) * g).clamp(0.0, 1.0);
        srgb_encode_unchecked(curve.eval(lin).clamp(0.0, 1.0))
    };
    base.map_pixels(|p| RgbColor::new(channel(p.r, gains[0]), channel(p.g, gains[1]), channel(p.b, gains[2])))
}

impl FromStr for CameraEmulation {
    type Err = Error;

    /// Plain-text config, one directive per line:
    ///
    /// ```text
    /// gain 2850 0.60 1.00 1.70
    /// style AS identity
    /// style CS gamma 0.85
    /// ```
    fn from_str(text: &str) -> Result<Self> {
        let mut gains = BTreeMap::new();
        let mut curves = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::invalid(format!("emulation config line {}: {m}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number {s:?}")));
            match f.as_slice() {
                ["gain", t, r, g, b] => {
                    let t: u32 = t.trim_end_matches('K').parse().map_err(|_| err("bad temperature"))?;
                    gains.insert(t, [num(r)?, num(g)?, num(b)?]);
                }
                ["style", s, "identity"] => {
                    curves.insert(s.parse::<Style>()?, ToneCurve::Identity);
                }
                ["style", s, "gamma", g] => {
                    curves.insert(s.parse::<Style>()?, ToneCurve::Gamma(num(g)?));
                }
                _ => return Err(err("expected `gain T R G B` or `style S identity|gamma G`")),
            }
        }
        let emu = Self { gains, curves };
        emu.validate()?;
        Ok(emu)
    }
}

/// 8-bit sRGB values of the classic 24-patch chart, row-major.
const CHART: [[u8; 3]; 24] = [
    [115, 82, 68], [194, 150, 130], [98, 122, 157], [87, 108, 67], [133, 128, 177], [103, 189, 170],
    [214, 126, 44], [80, 91, 166], [193, 90, 99], [94, 60, 108], [157, 188, 64], [224, 163, 46],
    [56, 61, 150], [70, 148, 73], [175, 54, 60], [231, 199, 31], [187, 86, 149], [8, 133, 161],
    [243, 243, 242], [200, 200, 200], [160, 160, 160], [122, 122, 121], [85, 85, 85], [52, 52, 52],
];

/// Procedural base image: a smooth field blended from a few random colors
/// and one or two achromatic surfaces, under a gentle shading gradient and
/// mild per-pixel noise. Deterministic in `seed`.
pub fn generate_base(seed: u64, width: usize, height: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_colored = rng.gen_range(4..10);
    let n_neutral = rng.gen_range(1..3);
    let mut blobs: Vec<([f64; 2], f64, [f64; 3])> = Vec::with_capacity(n_colored + n_neutral);
    for i in 0..n_colored + n_neutral {
        let center = [rng.gen::<f64>(), rng.gen::<f64>()];
        let radius = rng.gen_range(0.10..0.40);
        let c = if i < n_colored {
            [rng.gen_range(0.03..1.0), rng.gen_range(0.03..1.0), rng.gen_range(0.03..1.0)]
        } else {
            [rng.gen_range(0.6..0.95); 3]
        };
        blobs.push((center, radius, c));
    }
    // smooth illumination field: every surface is seen from shadow to highlight
    let waves: Vec<([f64; 2], f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(2.0..7.0);
            ([angle.cos() * freq, angle.sin() * freq], rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let (lo, hi) = (rng.gen_range(0.05..0.2), rng.gen_range(0.85..1.1));
    // a reference chart somewhere in the scene, as in most white-balance datasets
    let chart_w = rng.gen_range(0.3..0.45);
    let chart_h = chart_w * 2.0 / 3.0 * width as f64 / height as f64;
    let chart_origin = [rng.gen_range(0.0..1.0 - chart_w), rng.gen_range(0.0..(1.0 - chart_h).max(0.01))];
    let mut px = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
            let mut acc = [0.0; 3];
            let mut wsum = 1e-9;
            let (cu, cv) = ((u - chart_origin[0]) / chart_w, (v - chart_origin[1]) / chart_h);
            if (0.0..1.0).contains(&cu) && (0.0..1.0).contains(&cv) {
                let patch = CHART[(cv * 4.0) as usize * 6 + (cu * 6.0) as usize];
                acc = patch.map(|c| c as f64 / 255.0);
                wsum = 1.0;
            } else {
            for (center, radius, c) in &blobs {
                let d2 = (u - center[0]).powi(2) + (v - center[1]).powi(2);
                // sharp falloff so that each surface keeps its own color
                let w = (-(d2 / (radius * radius)).powi(2)).exp();
                wsum += w;
                for i in 0..3 {
                    acc[i] += w * c[i];
                }
            }
            }
            let wave = waves
                .iter()
                .map(|(k, phase)| (k[0] * u + k[1] * v + phase).sin())
                .sum::<f64>()
                / waves.len() as f64;
            let shade = lo + (hi - lo) * (0.5 + 0.5 * wave);
            let mut c = [0.0; 3];
            for i in 0..3 {
                let noise = rng.gen_range(-0.01..0.01);
                c[i] = (acc[i] / wsum * shade + noise).clamp(0.0, 1.0);
            }
            px.push(RgbColor::from_array(c));
        }
    }
    ImageBuffer::new(width, height, px).expect("dimensions are positive")
}

/// Result of writing a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Emulation groups: the neutral rendition and every cast.
    pub manifest: DatasetManifest,
    /// Correction groups: one per style, casts paired with the same-style
    /// correct rendition.
    pub correction_manifest: DatasetManifest,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
    /// Base images left out, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// What a synthetic group's correct image is.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Reference {
    Neutral,
    Style(Style),
}

fn reference_name(name: &str, emulation: &CameraEmulation, r: Reference) -> String {
    match r {
        Reference::Style(s) if emulation.curves[&s] != ToneCurve::Identity => {
            format!("{name}_correct_{}.png", s.code())
        }
        // an identity curve makes the style's reference the neutral rendition
        _ => format!("{name}.png"),
    }
}

/// Groups for one base image, with the reference each is anchored on.
fn synthetic_groups(name: &str, emulation: &CameraEmulation, direction: Direction) -> Vec<(ManifestGroup, Reference)> {
    let settings = emulation.settings();
    let group = |r: Reference, filter: &dyn Fn(&WbSetting) -> bool| ManifestGroup {
        correct: reference_name(name, emulation, r),
        variants: settings
            .iter()
            .filter(|s| filter(s))
            .map(|s| (*s, format!("{name}_{s}.png")))
            .collect(),
    };
    match direction {
        Direction::Emulation => vec![(group(Reference::Neutral, &|_| true), Reference::Neutral)],
        Direction::Correction => emulation
            .curves
            .keys()
            .map(|&style| (group(Reference::Style(style), &|s| s.style == style), Reference::Style(style)))
            .collect(),
    }
}

fn render_reference(emulation: &CameraEmulation, base: &ImageBuffer, r: Reference) -> ImageBuffer {
    match r {
        Reference::Neutral => emulation.neutral(base),
        Reference::Style(s) => emulation.reference(base, s),
    }
}

/// Renders every `(base, setting)` pair as 8-bit PNGs under `out_dir`, plus
/// the neutral rendition `<name>.png` and, for styles with a tone curve, a
/// same-style correct rendition `<name>_correct_<style>.png`. Writes
/// `manifest.txt` (emulation groups) and `manifest_correction.txt`.
pub fn make_manifest(
    bases: &[(String, ImageBuffer)],
    emulation: &CameraEmulation,
    out_dir: &Path,
) -> Result<SyntheticDataset> {
    if bases.is_empty() {
        return Err(Error::invalid("no base images"));
    }
    emulation.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    type Rendered = (Vec<ManifestGroup>, Vec<ManifestGroup>, Vec<String>);
    let rendered: Vec<Result<Option<Rendered>>> = bases
        .par_iter()
        .map(|(name, base)| {
            if detect_grayscale(base) {
                log::info!("excluding {name}: grayscale");
                return Ok(None);
            }
            let emu_groups = synthetic_groups(name, emulation, Direction::Emulation);
            let cor_groups = synthetic_groups(name, emulation, Direction::Correction);
            let mut files = Vec::new();
            for (g, r) in emu_groups.iter().chain(&cor_groups) {
                if !files.contains(&g.correct) {
                    save_image(&out_dir.join(&g.correct), &render_reference(emulation, base, *r))?;
                    files.push(g.correct.clone());
                }
            }
            for (s, file) in &emu_groups[0].0.variants {
                save_image(&out_dir.join(file), &emulation.cast(base, *s)?)?;
                files.push(file.clone());
            }
            let strip = |v: Vec<(ManifestGroup, Reference)>| v.into_iter().map(|(g, _)| g).collect();
            Ok(Some((strip(emu_groups), strip(cor_groups), files)))
        })
        .collect();

    let mut groups = Vec::new();
    let mut correction_groups = Vec::new();
    let mut files = Vec::new();
    let mut excluded = Vec::new();
    for ((name, _), r) in bases.iter().zip(rendered) {
        match r? {
            Some((g, c, f)) => {
                groups.extend(g);
                correction_groups.extend(c);
                files.extend(f);
            }
            None => excluded.push((name.clone(), "grayscale".to_string())),
        }
    }
    let manifest = DatasetManifest {
        base_dir: out_dir.to_path_buf(),
        groups,
    };
    let correction_manifest = DatasetManifest {
        base_dir: out_dir.to_path_buf(),
        groups: correction_groups,
    };
    write_atomic(&out_dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    write_atomic(
        &out_dir.join("manifest_correction.txt"),
        correction_manifest.to_text().as_bytes(),
    )?;
    files.push("manifest.txt".into());
    files.push("manifest_correction.txt".into());
    Ok(SyntheticDataset {
        manifest,
        correction_manifest,
        files,
        excluded,
    })
}

/// Builds the model [`make_manifest`] followed by a file-based build would
/// produce, without touching the filesystem. Renditions are quantized to
/// 8 bits exactly as the PNG round trip would.
pub fn build_synthetic_model(
    bases: &[(String, ImageBuffer)],
    emulation: &CameraEmulation,
    params: &BuildParams,
) -> Result<(WbModel, BuildReport)> {
    emulation.validate()?;
    let kept: Vec<&(String, ImageBuffer)> = bases.iter().filter(|(_, b)| !detect_grayscale(b)).collect();
    let groups: Vec<(&ImageBuffer, ManifestGroup, Reference)> = kept
        .iter()
        .flat_map(|(name, base)| {
            synthetic_groups(name, emulation, params.direction)
                .into_iter()
                .map(move |(g, r)| (base, g, r))
        })
        .collect();
    let outcomes: Vec<_> = groups
        .par_iter()
        .map(|(base, group, r)| {
            let correct = quantize_8bit(&render_reference(emulation, base, *r));
            let variants = group
                .variants
                .iter()
                .map(|(s, p)| Ok((*s, p.as_str(), quantize_8bit(&emulation.cast(base, *s)?))))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            ingest_images(&group.correct, &correct, &variants, params)
        })
        .collect();
    assemble(groups.iter().map(|(_, g, _)| g).zip(outcomes).collect(), params)
}
