//! Per-image emulation and correction, grayscale screening and the batch
//! runner behind the CLI.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::color::{ImageBuffer, RgbColor};
use crate::error::{Error, Result};
use crate::feature::{compute_histogram, project};
use crate::io::{load_image, save_image, write_atomic};
use crate::mapping::{ColorTransform, TransformTag, WbSetting};
use crate::model::{load_model, Direction, WbModel};
use crate::retrieval::{blend_transforms, knn_query, rbf_weights, NeighborSet, WeightVector};

/// Images whose mean absolute inter-channel difference falls below this are
/// treated as grayscale.
pub const GRAYSCALE_THRESHOLD: f64 = 1.0 / 255.0;

/// Environment variable overriding the batch worker count.
pub const WORKERS_ENV: &str = "WBAUG_WORKERS";

pub const GRAYSCALE_SKIP_REASON: &str = "grayscale image (emulating white-balance errors needs color)";

pub fn detect_grayscale(img: &ImageBuffer) -> bool {
    let total: f64 = img
        .pixels()
        .iter()
        .map(|p| ((p.r - p.g).abs() + (p.g - p.b).abs() + (p.b - p.r).abs()) / 3.0)
        .sum();
    total / (img.len() as f64) < GRAYSCALE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOptions {
    /// `None` means every setting in the model.
    pub settings: Option<Vec<WbSetting>>,
    pub k: Option<usize>,
    pub sigma: Option<f64>,
    pub grayscale_screen: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            settings: None,
            k: None,
            sigma: None,
            grayscale_screen: true,
        }
    }
}

/// Blended transforms for one input image, ready to apply.
#[derive(Debug, Clone)]
pub struct TransformPlan {
    pub neighbors: NeighborSet,
    pub weights: WeightVector,
    pub transforms: Vec<ColorTransform>,
}

impl TransformPlan {
    pub fn apply(&self, img: &ImageBuffer) -> Result<Vec<ImageBuffer>> {
        self.transforms
            .iter()
            .map(|t| {
                let mut out = vec![RgbColor::default(); img.len()];
                t.apply_into(img.pixels(), &mut out)?;
                ImageBuffer::new(img.width(), img.height(), out)
            })
            .collect()
    }
}

/// Retrieves neighbors once and blends one transform per requested tag.
pub fn plan_transforms(
    model: &WbModel,
    img: &ImageBuffer,
    tags: &[TransformTag],
    k: Option<usize>,
    sigma: Option<f64>,
) -> Result<TransformPlan> {
    let k = k.unwrap_or_else(|| model.default_k.min(model.records.len()));
    let sigma = sigma.unwrap_or(model.default_sigma);
    let hist = compute_histogram(img, &model.histogram)?;
    let feature = project(&model.pca, &hist)?;
    let neighbors = knn_query(model.index(), &feature, k)?;
    let weights = rbf_weights(&neighbors.distances, sigma)?;
    let transforms = tags
        .iter()
        .map(|&tag| {
            let picked = neighbors
                .ids
                .iter()
                .map(|&id| {
                    model
                        .record(id)
                        .and_then(|r| r.transform(tag))
                        .map(|s| &s.transform)
                        .ok_or_else(|| Error::invalid(format!("record {id:016x} has no {tag} transform")))
                })
                .collect::<Result<Vec<_>>>()?;
            blend_transforms(&weights, &picked)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformPlan {
        neighbors,
        weights,
        transforms,
    })
}

/// Resolves the requested settings against an emulation model.
pub fn emulation_tags(model: &WbModel, settings: Option<&[WbSetting]>) -> Result<Vec<WbSetting>> {
    if model.direction != Direction::Emulation {
        return Err(Error::invalid("augmentation needs an emulation-direction model"));
    }
    let Some(requested) = settings else {
        return Ok(model.vocabulary.clone());
    };
    for s in requested {
        if !model.vocabulary.contains(s) {
            return Err(Error::invalid(format!("setting {s} is not in the model")));
        }
    }
    Ok(requested.to_vec())
}

/// Emulates each requested white-balance setting on `img`.
pub fn augment(
    model: &WbModel,
    img: &ImageBuffer,
    opts: &AugmentOptions,
) -> Result<Vec<(WbSetting, ImageBuffer)>> {
    let settings = emulation_tags(model, opts.settings.as_deref())?;
    if opts.grayscale_screen && detect_grayscale(img) {
        return Err(Error::Grayscale);
    }
    let tags: Vec<TransformTag> = settings.iter().map(|&s| TransformTag::Setting(s)).collect();
    let plan = plan_transforms(model, img, &tags, opts.k, opts.sigma)?;
    Ok(settings.into_iter().zip(plan.apply(img)?).collect())
}

/// Removes a white-balance cast with a correction-direction model.
pub fn correct(
    model: &WbModel,
    img: &ImageBuffer,
    k: Option<usize>,
    sigma: Option<f64>,
) -> Result<ImageBuffer> {
    if model.direction != Direction::Correction {
        return Err(Error::invalid("correction needs a correction-direction model"));
    }
    let plan = plan_transforms(model, img, &[TransformTag::Corrected], k, sigma)?;
    Ok(plan.apply(img)?.remove(0))
}

// ---------------------------------------------------------------------------
// Batch runs

#[derive(Debug, Clone, PartialEq)]
pub enum BatchMode {
    Augment {
        settings: Option<Vec<WbSetting>>,
        grayscale_screen: bool,
    },
    Correct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRequest {
    pub model: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: BatchMode,
    pub k: Option<usize>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Emitted(Vec<String>),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub model_checksum: String,
    pub mode: String,
    pub k: usize,
    pub sigma: f64,
    pub settings: Vec<String>,
    /// One entry per input, in input order.
    pub entries: Vec<(String, Outcome)>,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "run_manifest.txt";

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model_checksum\t{}\n", self.model_checksum));
        s.push_str(&format!("mode\t{}\n", self.mode));
        s.push_str(&format!("k\t{}\n", self.k));
        s.push_str(&format!("sigma\t{}\n", self.sigma));
        s.push_str(&format!("settings\t{}\n", self.settings.join(",")));
        for (input, outcome) in &self.entries {
            match outcome {
                Outcome::Emitted(files) => {
                    s.push_str(&format!("ok\t{input}\t{}\n", files.join(",")))
                }
                Outcome::Skipped(reason) => s.push_str(&format!("skipped\t{input}\t{reason}\n")),
            }
        }
        s
    }

    pub fn processed(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, o)| matches!(o, Outcome::Emitted(_)))
            .count()
    }

    pub fn skipped(&self) -> usize {
        self.entries.len() - self.processed()
    }
}

/// `<stem>_<temperature>K_<style>.<ext>`
pub fn output_name(input: &Path, suffix: &str) -> String {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let ext = match input
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ppm") => "ppm",
        Some("pnm") => "pnm",
        _ => "png",
    };
    format!("{stem}_{suffix}.{ext}")
}

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Processes every input independently and writes `run_manifest.txt` last.
/// Only an unusable model or output directory fails the whole run.
pub fn run_batch(request: &AugmentationRequest) -> Result<RunManifest> {
    let model = load_model(&request.model)?;
    run_batch_with_model(&model, request)
}

pub fn run_batch_with_model(model: &WbModel, request: &AugmentationRequest) -> Result<RunManifest> {
    let (mode, settings) = match &request.mode {
        BatchMode::Augment { settings, .. } => ("augment", emulation_tags(model, settings.as_deref())?),
        BatchMode::Correct => {
            if model.direction != Direction::Correction {
                return Err(Error::invalid("correction needs a correction-direction model"));
            }
            ("correct", Vec::new())
        }
    };
    std::fs::create_dir_all(&request.output_dir).map_err(|e| Error::io(&request.output_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidState(format!("cannot start worker pool: {e}")))?;
    let entries = pool.install(|| {
        request
            .inputs
            .par_iter()
            .map(|input| {
                let outcome = match process_one(model, request, &settings, input) {
                    Ok(files) => Outcome::Emitted(files),
                    Err(e) => Outcome::Skipped(e.to_string()),
                };
                (input.display().to_string(), outcome)
            })
            .collect::<Vec<_>>()
    });

    let manifest = RunManifest {
        model_checksum: model.checksum_hex(),
        mode: mode.into(),
        k: request.k.unwrap_or(model.default_k.min(model.records.len())),
        sigma: request.sigma.unwrap_or(model.default_sigma),
        settings: settings.iter().map(|s| s.to_string()).collect(),
        entries,
    };
    write_atomic(
        &request.output_dir.join(RunManifest::FILE_NAME),
        manifest.to_text().as_bytes(),
    )?;
    Ok(manifest)
}

fn process_one(
    model: &WbModel,
    request: &AugmentationRequest,
    settings: &[WbSetting],
    input: &Path,
) -> Result<Vec<String>> {
    let img = load_image(input)?;
    let outputs: Vec<(String, ImageBuffer)> = match &request.mode {
        BatchMode::Augment {
            grayscale_screen, ..
        } => {
            let opts = AugmentOptions {
                settings: Some(settings.to_vec()),
                k: request.k,
                sigma: request.sigma,
                grayscale_screen: *grayscale_screen,
            };
            augment(model, &img, &opts)?
                .into_iter()
                .map(|(s, out)| (output_name(input, &s.to_string()), out))
                .collect()
        }
        BatchMode::Correct => vec![(
            output_name(input, "corrected"),
            correct(model, &img, request.k, request.sigma)?,
        )],
    };
    let mut names = Vec::with_capacity(outputs.len());
    for (name, out) in outputs {
        save_image(&request.output_dir.join(&name), &out)?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_detection() {
        let gray = ImageBuffer::filled(5, 5, RgbColor::gray(0.4)).unwrap();
        assert!(detect_grayscale(&gray));
        let red = ImageBuffer::filled(5, 5, RgbColor::new(1.0, 0.0, 0.0)).unwrap();
        assert!(!detect_grayscale(&red));
    }

    #[test]
    fn one_colored_pixel_in_a_megapixel_is_still_gray() {
        let mut px = vec![RgbColor::gray(0.5); 1000 * 1000];
        px[12345] = RgbColor::new(1.0, 0.0, 0.0);
        let img = ImageBuffer::new(1000, 1000, px).unwrap();
        // (1 + 0 + 1) / 3 / 1e6 ≈ 6.7e-7 < 1/255
        assert!(detect_grayscale(&img));
    }

    #[test]
    fn output_names_follow_pattern() {
        let s = WbSetting::new(2850, crate::mapping::Style::AdobeStandard);
        assert_eq!(output_name(Path::new("/x/cat.PNG"), &s.to_string()), "cat_2850K_AS.png");
        assert_eq!(output_name(Path::new("dog.ppm"), "corrected"), "dog_corrected.ppm");
        assert_eq!(output_name(Path::new("dog.jpg"), "corrected"), "dog_corrected.png");
    }

    #[test]
    fn manifest_text_lists_every_entry() {
        let m = RunManifest {
            model_checksum: "00ff".into(),
            mode: "augment".into(),
            k: 25,
            sigma: 0.25,
            settings: vec!["2850K_AS".into()],
            entries: vec![
                ("a.png".into(), Outcome::Emitted(vec!["a_2850K_AS.png".into()])),
                ("b.png".into(), Outcome::Skipped("grayscale".into())),
            ],
        };
        let text = m.to_text();
        assert!(text.contains("ok\ta.png\ta_2850K_AS.png\n"));
        assert!(text.contains("skipped\tb.png\tgrayscale\n"));
        assert_eq!((m.processed(), m.skipped()), (1, 1));
    }
}
