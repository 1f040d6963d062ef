//! Training-set ingestion, model assembly and the `WBM1` container format.
//!
//! A model holds one record per training exemplar: the PCA-compressed
//! histogram of the image that queries are matched against, and the fitted
//! transforms that leave that image. Emulation models fit correct → cast and
//! keep one record per group with a transform for every setting. Correction
//! models fit cast → correct and keep one record per cast, each with a single
//! transform tagged [`TransformTag::Corrected`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::color::{ImageBuffer, KERNEL_LAYOUT, KERNEL_LEN};
use crate::error::{Error, Result};
use crate::feature::{
    compute_histogram, fit_pca, CompactFeature, HistogramParams, PcaModel, DEFAULT_FEATURE_DIM,
    UV_CONVENTION,
};
use crate::io::{load_image, write_atomic};
use crate::mapping::{
    fit_residual, fit_transform_with_limit, ColorTransform, Style, TransformMatrix, TransformTag,
    WbSetting, FIT_SAMPLE_LIMIT,
};
use crate::retrieval::{FeatureIndex, RecordId, DEFAULT_K, DEFAULT_SIGMA};

pub const MAGIC: &[u8; 4] = b"WBM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Correct → cast: synthesizes white-balance errors.
    Emulation,
    /// Cast → correct: removes them.
    Correction,
}

impl Direction {
    fn to_byte(self) -> u8 {
        match self {
            Direction::Emulation => 0,
            Direction::Correction => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Direction::Emulation),
            1 => Some(Direction::Correction),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Emulation => "emulation",
            Direction::Correction => "correction",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emulate" | "emulation" => Ok(Direction::Emulation),
            "correct" | "correction" => Ok(Direction::Correction),
            _ => Err(Error::invalid(format!(
                "unknown direction {s:?} (expected emulate or correct)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestGroup {
    /// Path of the correctly white-balanced image, as written in the manifest.
    pub correct: String,
    pub variants: Vec<(WbSetting, String)>,
}

/// Paired training data: one line per group,
/// `correct.png;2850K_AS=a.png;2850K_CS=b.png;...`. Relative paths resolve
/// against `base_dir`. Blank lines and lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub groups: Vec<ManifestGroup>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut groups = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::invalid(format!("manifest line {}: {msg}", lineno + 1));
            let mut fields = line.split(';').map(str::trim);
            let correct = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| {
                err("missing correct-image path".into())
            })?;
            let mut variants: Vec<(WbSetting, String)> = Vec::new();
            for field in fields.filter(|f| !f.is_empty()) {
                let (setting, path) = field
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected setting=path, got {field:?}")))?;
                let setting: WbSetting = setting.trim().parse().map_err(|e| err(format!("{e}")))?;
                if variants.iter().any(|(s, _)| *s == setting) {
                    return Err(err(format!("setting {setting} listed twice")));
                }
                variants.push((setting, path.trim().to_string()));
            }
            if variants.is_empty() {
                return Err(err("group has no variants".into()));
            }
            groups.push(ManifestGroup {
                correct: correct.to_string(),
                variants,
            });
        }
        Ok(Self {
            base_dir: base_dir.into(),
            groups,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&g.correct);
            for (s, p) in &g.variants {
                out.push_str(&format!(";{s}={p}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

// ---------------------------------------------------------------------------
// Records and model

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTransform {
    pub transform: ColorTransform,
    /// Mean absolute per-channel error of the transform on its training pair.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub id: RecordId,
    pub feature: CompactFeature,
    /// Sorted by tag.
    pub transforms: Vec<StoredTransform>,
    /// Manifest paths of the query-side image first, then the fit targets.
    pub provenance: Vec<String>,
    /// Setting of the cast this record was built from (correction models).
    pub source_setting: Option<WbSetting>,
}

impl TrainingRecord {
    pub fn transform(&self, tag: TransformTag) -> Option<&StoredTransform> {
        self.transforms
            .binary_search_by(|t| t.transform.tag().cmp(&tag))
            .ok()
            .map(|i| &self.transforms[i])
    }
}

/// Stable record id: the first 8 bytes of SHA-256 over the manifest path.
pub fn record_id(path: &str) -> RecordId {
    let digest = Sha256::digest(path.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildParams {
    pub direction: Direction,
    pub histogram: HistogramParams,
    pub feature_dim: usize,
    pub k: usize,
    pub sigma: f64,
    pub fit_sample_limit: usize,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            direction: Direction::Emulation,
            histogram: HistogramParams::default(),
            feature_dim: DEFAULT_FEATURE_DIM,
            k: DEFAULT_K,
            sigma: DEFAULT_SIGMA,
            fit_sample_limit: FIT_SAMPLE_LIMIT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WbModel {
    pub direction: Direction,
    pub histogram: HistogramParams,
    pub default_k: usize,
    pub default_sigma: f64,
    pub fit_sample_limit: usize,
    /// Settings every record covers, sorted.
    pub vocabulary: Vec<WbSetting>,
    pub pca: PcaModel,
    /// Sorted by id.
    pub records: Vec<TrainingRecord>,
    index: FeatureIndex,
    positions: HashMap<RecordId, usize>,
}

impl PartialEq for WbModel {
    fn eq(&self, other: &Self) -> bool {
        self.direction == other.direction
            && self.histogram == other.histogram
            && self.default_k == other.default_k
            && self.default_sigma == other.default_sigma
            && self.fit_sample_limit == other.fit_sample_limit
            && self.vocabulary == other.vocabulary
            && self.pca == other.pca
            && self.records == other.records
    }
}

impl WbModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        direction: Direction,
        histogram: HistogramParams,
        default_k: usize,
        default_sigma: f64,
        fit_sample_limit: usize,
        mut vocabulary: Vec<WbSetting>,
        pca: PcaModel,
        mut records: Vec<TrainingRecord>,
    ) -> Result<Self> {
        histogram.validate()?;
        if pca.input_dim() != histogram.dim() {
            return Err(Error::invalid(format!(
                "PCA input dimension {} does not match the histogram size {}",
                pca.input_dim(),
                histogram.dim()
            )));
        }
        if !(default_sigma > 0.0) || default_k == 0 {
            return Err(Error::invalid("default k and sigma must be positive"));
        }
        vocabulary.sort();
        vocabulary.dedup();
        records.sort_by_key(|r| r.id);
        for r in &mut records {
            r.transforms.sort_by_key(|t| t.transform.tag());
            if r.feature.dim() != pca.output_dim() {
                return Err(Error::invalid(format!(
                    "record {:016x} has a {}-dimensional feature, PCA produces {}",
                    r.id,
                    r.feature.dim(),
                    pca.output_dim()
                )));
            }
            if r.transforms.windows(2).any(|w| w[0].transform.tag() == w[1].transform.tag()) {
                return Err(Error::invalid(format!(
                    "record {:016x} has two transforms with the same tag",
                    r.id
                )));
            }
            let expected: Vec<TransformTag> = match direction {
                Direction::Emulation => vocabulary.iter().map(|&s| TransformTag::Setting(s)).collect(),
                Direction::Correction => vec![TransformTag::Corrected],
            };
            let tags: Vec<TransformTag> = r.transforms.iter().map(|t| t.transform.tag()).collect();
            if tags != expected {
                return Err(Error::invalid(format!(
                    "record {:016x} does not cover the model vocabulary",
                    r.id
                )));
            }
        }
        let index = FeatureIndex::new(records.iter().map(|r| (r.id, r.feature.clone())))?;
        let positions = records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        Ok(Self {
            direction,
            histogram,
            default_k,
            default_sigma,
            fit_sample_limit,
            vocabulary,
            pca,
            records,
            index,
            positions,
        })
    }

    pub fn index(&self) -> &FeatureIndex {
        &self.index
    }

    pub fn record(&self, id: RecordId) -> Option<&TrainingRecord> {
        self.positions.get(&id).map(|&i| &self.records[i])
    }

    pub fn feature_dim(&self) -> usize {
        self.pca.output_dim()
    }

    /// Mean of every stored transform's fit residual.
    pub fn mean_fit_residual(&self) -> f64 {
        let (sum, n) = self
            .records
            .iter()
            .flat_map(|r| &r.transforms)
            .fold((0.0, 0usize), |(s, n), t| (s + t.residual, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }

    /// Hex form of the container checksum.
    pub fn checksum_hex(&self) -> String {
        let bytes = self.to_bytes();
        let tail: [u8; 8] = bytes[bytes.len() - 8..].try_into().unwrap();
        format!("{:016x}", u64::from_le_bytes(tail))
    }

    /// Multi-line human-readable summary.
    pub fn info(&self) -> String {
        let h = &self.histogram;
        let mut s = String::new();
        s.push_str(&format!("format_version: {FORMAT_VERSION}\n"));
        s.push_str(&format!("direction: {}\n", self.direction));
        s.push_str(&format!("records: {}\n", self.records.len()));
        s.push_str(&format!(
            "settings: {}\n",
            self.vocabulary.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        s.push_str(&format!("feature_dim: {}\n", self.feature_dim()));
        s.push_str(&format!("histogram_bins: {}\n", h.bins));
        s.push_str(&format!("u_range: {} {}\n", h.u_range.0, h.u_range.1));
        s.push_str(&format!("v_range: {} {}\n", h.v_range.0, h.v_range.1));
        s.push_str(&format!("epsilon: {}\n", h.epsilon));
        s.push_str(&format!("default_k: {}\n", self.default_k));
        s.push_str(&format!("default_sigma: {}\n", self.default_sigma));
        s.push_str(&format!("fit_sample_limit: {}\n", self.fit_sample_limit));
        s.push_str(&format!("kernel: {KERNEL_LAYOUT}\n"));
        s.push_str(&format!("uv_convention: {UV_CONVENTION}\n"));
        s.push_str(&format!("mean_fit_residual: {:.6e}\n", self.mean_fit_residual()));
        s.push_str(&format!("checksum: {}\n", self.checksum_hex()));
        s
    }
}

// ---------------------------------------------------------------------------
// Building

/// A fitted record whose feature still needs the PCA projection.
#[derive(Debug, Clone)]
pub struct PendingRecord {
    pub id: RecordId,
    pub histogram: Vec<f64>,
    pub transforms: Vec<StoredTransform>,
    pub provenance: Vec<String>,
    pub source_setting: Option<WbSetting>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub group: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildReport {
    pub accepted_groups: usize,
    pub rejected: Vec<Rejection>,
    pub records: usize,
    /// Mean fit residual per source/target setting.
    pub setting_residuals: BTreeMap<WbSetting, f64>,
    pub mean_residual: f64,
}

impl fmt::Display for BuildReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accepted_groups: {}", self.accepted_groups)?;
        writeln!(f, "rejected_groups: {}", self.rejected.len())?;
        writeln!(f, "records: {}", self.records)?;
        writeln!(f, "mean_fit_residual: {:.6e}", self.mean_residual)?;
        for (s, r) in &self.setting_residuals {
            writeln!(f, "fit_residual {s}: {r:.6e}")?;
        }
        for r in &self.rejected {
            writeln!(f, "rejected {}: {}", r.group, r.reason)?;
        }
        Ok(())
    }
}

/// Loads and fits one manifest group.
pub fn ingest_group(
    manifest: &DatasetManifest,
    group: &ManifestGroup,
    params: &BuildParams,
) -> std::result::Result<Vec<PendingRecord>, String> {
    let load = |p: &str| load_image(&manifest.resolve(p)).map_err(|e| e.to_string());
    let correct = load(&group.correct)?;
    let mut variants = Vec::with_capacity(group.variants.len());
    for (setting, path) in &group.variants {
        let img = load(path)?;
        if !img.same_dimensions(&correct) {
            return Err(format!(
                "{path} is {}x{} but {} is {}x{}",
                img.width(),
                img.height(),
                group.correct,
                correct.width(),
                correct.height()
            ));
        }
        variants.push((*setting, path.as_str(), img));
    }
    ingest_images(&group.correct, &correct, &variants, params)
}

/// Fits records from already-loaded images. `variants` pairs each setting
/// with the manifest path and pixels of its rendition.
pub fn ingest_images(
    correct_path: &str,
    correct: &ImageBuffer,
    variants: &[(WbSetting, &str, ImageBuffer)],
    params: &BuildParams,
) -> std::result::Result<Vec<PendingRecord>, String> {
    let fit = |src: &ImageBuffer, dst: &ImageBuffer, tag: TransformTag, name: &str| {
        let t = fit_transform_with_limit(src.pixels(), dst.pixels(), tag, params.fit_sample_limit)
            .map_err(|e| format!("fitting {name}: {e}"))?;
        let residual = fit_residual(&t, src.pixels(), dst.pixels());
        Ok::<_, String>(StoredTransform {
            transform: t,
            residual,
        })
    };
    let histogram = |img: &ImageBuffer, name: &str| {
        compute_histogram(img, &params.histogram)
            .map(|h| h.as_slice().to_vec())
            .map_err(|e| format!("histogram of {name}: {e}"))
    };
    for (_, path, img) in variants {
        if !img.same_dimensions(correct) {
            return Err(format!("{path} and {correct_path} differ in size"));
        }
    }

    match params.direction {
        Direction::Emulation => {
            // canonical order so the record does not depend on manifest order
            let mut ordered: Vec<&(WbSetting, &str, ImageBuffer)> = variants.iter().collect();
            ordered.sort_by_key(|v| v.0);
            let mut transforms = Vec::with_capacity(variants.len());
            let mut provenance = vec![correct_path.to_string()];
            for (setting, path, img) in ordered {
                transforms.push(fit(correct, img, TransformTag::Setting(*setting), path)?);
                provenance.push(path.to_string());
            }
            Ok(vec![PendingRecord {
                id: record_id(correct_path),
                histogram: histogram(correct, correct_path)?,
                transforms,
                provenance,
                source_setting: None,
            }])
        }
        Direction::Correction => variants
            .iter()
            .map(|(setting, path, img)| {
                Ok(PendingRecord {
                    id: record_id(path),
                    histogram: histogram(img, path)?,
                    transforms: vec![fit(img, correct, TransformTag::Corrected, path)?],
                    provenance: vec![path.to_string(), correct_path.to_string()],
                    source_setting: Some(*setting),
                })
            })
            .collect(),
    }
}

fn settings_of(group: &ManifestGroup) -> Vec<WbSetting> {
    let mut s: Vec<WbSetting> = group.variants.iter().map(|v| v.0).collect();
    s.sort();
    s
}

/// Most common exact setting set across groups; ties go to the larger set,
/// then the lexicographically smaller one.
fn dataset_vocabulary(groups: &[&ManifestGroup]) -> Vec<WbSetting> {
    let mut counts: BTreeMap<Vec<WbSetting>, usize> = BTreeMap::new();
    for g in groups {
        *counts.entry(settings_of(g)).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then(a.len().cmp(&b.len())).then(b.cmp(a)))
        .map(|(s, _)| s)
        .unwrap_or_default()
}

pub fn build_model(manifest: &DatasetManifest, params: &BuildParams) -> Result<(WbModel, BuildReport)> {
    let outcomes: Vec<_> = manifest
        .groups
        .par_iter()
        .map(|g| ingest_group(manifest, g, params))
        .collect();
    let groups: Vec<(&ManifestGroup, std::result::Result<Vec<PendingRecord>, String>)> =
        manifest.groups.iter().zip(outcomes).collect();
    assemble(groups, params)
}

/// Shared tail of model building: vocabulary screening, PCA and record
/// assembly, in canonical id order.
pub fn assemble(
    groups: Vec<(&ManifestGroup, std::result::Result<Vec<PendingRecord>, String>)>,
    params: &BuildParams,
) -> Result<(WbModel, BuildReport)> {
    params.histogram.validate()?;
    let mut report = BuildReport::default();
    let ok_groups: Vec<&ManifestGroup> = groups
        .iter()
        .filter(|(_, r)| r.is_ok())
        .map(|(g, _)| *g)
        .collect();
    // Emulation records must all answer the same settings; correction
    // records stand alone, so any mix of groups is usable.
    let vocabulary = match params.direction {
        Direction::Emulation => dataset_vocabulary(&ok_groups),
        Direction::Correction => {
            let mut all: Vec<WbSetting> = ok_groups.iter().flat_map(|g| settings_of(g)).collect();
            all.sort();
            all.dedup();
            all
        }
    };

    let mut pending: Vec<PendingRecord> = Vec::new();
    let mut seen_ids = HashMap::new();
    for (group, outcome) in groups {
        let records = match outcome {
            Err(reason) => {
                report.rejected.push(Rejection {
                    group: group.correct.clone(),
                    reason,
                });
                continue;
            }
            Ok(r) => r,
        };
        let settings = settings_of(group);
        if params.direction == Direction::Emulation && settings != vocabulary {
            report.rejected.push(Rejection {
                group: group.correct.clone(),
                reason: format!(
                    "settings [{}] differ from the dataset vocabulary [{}]",
                    join(&settings),
                    join(&vocabulary)
                ),
            });
            continue;
        }
        if let Some(prev) = records.iter().find_map(|r| seen_ids.get(&r.id)) {
            report.rejected.push(Rejection {
                group: group.correct.clone(),
                reason: format!("duplicates an image already ingested from group {prev}"),
            });
            continue;
        }
        for r in &records {
            seen_ids.insert(r.id, group.correct.clone());
        }
        report.accepted_groups += 1;
        pending.extend(records);
    }
    report.rejected.sort_by(|a, b| a.group.cmp(&b.group).then(a.reason.cmp(&b.reason)));

    if report.accepted_groups == 0 {
        return Err(Error::degenerate(format!(
            "model build failed: all {} groups were rejected",
            report.rejected.len()
        )));
    }
    let needed = params.feature_dim + 1;
    if pending.len() < needed {
        return Err(Error::invalid(format!(
            "{} training records accepted; a {}-dimensional PCA needs at least {needed}",
            pending.len(),
            params.feature_dim
        )));
    }

    pending.sort_by_key(|r| r.id);
    let histograms: Vec<Vec<f64>> = pending.iter_mut().map(|r| std::mem::take(&mut r.histogram)).collect();
    let pca = fit_pca(&histograms, params.feature_dim)?;
    let mut records = Vec::with_capacity(pending.len());
    let mut per_setting: BTreeMap<WbSetting, (f64, usize)> = BTreeMap::new();
    let (mut total, mut count) = (0.0, 0usize);
    for (r, h) in pending.into_iter().zip(&histograms) {
        for t in &r.transforms {
            let setting = match t.transform.tag() {
                TransformTag::Setting(s) => Some(s),
                TransformTag::Corrected => r.source_setting,
            };
            if let Some(s) = setting {
                let e = per_setting.entry(s).or_default();
                e.0 += t.residual;
                e.1 += 1;
            }
            total += t.residual;
            count += 1;
        }
        records.push(TrainingRecord {
            id: r.id,
            feature: pca.project_slice(h)?,
            transforms: r.transforms,
            provenance: r.provenance,
            source_setting: r.source_setting,
        });
    }
    report.records = records.len();
    report.setting_residuals = per_setting.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect();
    report.mean_residual = total / count as f64;

    let model = WbModel::new(
        params.direction,
        params.histogram,
        params.k,
        params.sigma,
        params.fit_sample_limit,
        vocabulary,
        pca,
        records,
    )?;
    Ok((model, report))
}

fn join(settings: &[WbSetting]) -> String {
    settings.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------------------
// Container format

pub fn save_model(model: &WbModel, path: &Path) -> Result<()> {
    write_atomic(path, &model.to_bytes())
}

pub fn load_model(path: &Path) -> Result<WbModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WbModel::from_bytes(&bytes)
}

const SECTION_HEADER: &[u8; 4] = b"HEAD";
const SECTION_PARAMS: &[u8; 4] = b"PARM";
const SECTION_PCA: &[u8; 4] = b"PCA ";
const SECTION_RECORDS: &[u8; 4] = b"RECS";

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LittleEndian>(v).unwrap();
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LittleEndian>(v).unwrap();
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn setting(&mut self, s: WbSetting) {
        self.u32(s.temperature as usize);
        self.u8(s.style.to_byte());
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

fn encode(m: &WbModel) -> Vec<u8> {
    let mut head = Writer(Vec::new());
    head.u8(m.direction.to_byte());
    head.str(KERNEL_LAYOUT);
    head.str(UV_CONVENTION);

    let mut params = Writer(Vec::new());
    let h = &m.histogram;
    params.u32(h.bins);
    params.f64(h.u_range.0);
    params.f64(h.u_range.1);
    params.f64(h.v_range.0);
    params.f64(h.v_range.1);
    params.f64(h.epsilon);
    params.u32(m.default_k);
    params.f64(m.default_sigma);
    params.u64(m.fit_sample_limit as u64);
    params.u32(m.vocabulary.len());
    for &s in &m.vocabulary {
        params.setting(s);
    }

    let mut pca = Writer(Vec::new());
    pca.u32(m.pca.input_dim());
    pca.u32(m.pca.output_dim());
    for &b in m.pca.bias().iter() {
        pca.f64(b);
    }
    // column-major: component j is contiguous
    for &c in m.pca.coeff().iter() {
        pca.f64(c);
    }
    for &v in m.pca.explained_variance() {
        pca.f64(v);
    }

    let mut recs = Writer(Vec::new());
    recs.u32(m.records.len());
    for r in &m.records {
        recs.u64(r.id);
        match r.source_setting {
            Some(s) => {
                recs.u8(1);
                recs.setting(s);
            }
            None => {
                recs.u8(0);
                recs.setting(WbSetting::new(0, Style::CameraStandard));
            }
        }
        recs.u32(r.provenance.len());
        for p in &r.provenance {
            recs.str(p);
        }
        for &v in r.feature.as_slice() {
            recs.f64(v);
        }
        recs.u32(r.transforms.len());
        for t in &r.transforms {
            match t.transform.tag() {
                TransformTag::Setting(s) => {
                    recs.u8(0);
                    recs.setting(s);
                }
                TransformTag::Corrected => {
                    recs.u8(1);
                    recs.setting(WbSetting::new(0, Style::CameraStandard));
                }
            }
            for &v in t.transform.matrix().iter().flatten() {
                recs.f64(v);
            }
            recs.f64(t.residual);
        }
    }

    let mut body = Writer(Vec::new());
    body.section(SECTION_HEADER, head);
    body.section(SECTION_PARAMS, params);
    body.section(SECTION_PCA, pca);
    body.section(SECTION_RECORDS, recs);

    let mut out = Writer(Vec::with_capacity(body.0.len() + 24));
    out.0.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION as usize);
    out.u64(body.0.len() as u64);
    out.0.extend_from_slice(&body.0);
    let sum = checksum(&out.0);
    out.u64(sum);
    out.0
}

struct Reader<'a>(Cursor<&'a [u8]>);

fn truncated(e: std::io::Error) -> Error {
    Error::Corrupt(format!("unexpected end of data: {e}"))
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }
    fn u32(&mut self) -> Result<usize> {
        self.0.read_u32::<LittleEndian>().map(|v| v as usize).map_err(truncated)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LittleEndian>().map_err(truncated)
    }
    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LittleEndian>().map_err(truncated)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_remaining(n.saturating_mul(8))?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
    fn check_remaining(&self, n: usize) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::Corrupt(format!(
                "field of {n} bytes overruns the {} remaining",
                self.remaining()
            )));
        }
        Ok(())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        self.check_remaining(n)?;
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).map_err(truncated)?;
        String::from_utf8(buf).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }
    fn setting(&mut self) -> Result<(u32, u8)> {
        Ok((self.u32()? as u32, self.u8()?))
    }
    fn valid_setting(&mut self) -> Result<WbSetting> {
        let (t, s) = self.setting()?;
        let style = Style::from_byte(s).ok_or_else(|| Error::Corrupt(format!("unknown style byte {s}")))?;
        if t == 0 {
            return Err(Error::Corrupt("zero color temperature".into()));
        }
        Ok(WbSetting::new(t, style))
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let mut found = [0u8; 4];
        self.0.read_exact(&mut found).map_err(truncated)?;
        if &found != tag {
            return Err(Error::Corrupt(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&found)
            )));
        }
        let len = self.u64()? as usize;
        self.check_remaining(len)?;
        let start = self.0.position() as usize;
        let slice = &self.0.get_ref()[start..start + len];
        self.0.set_position((start + len) as u64);
        Ok(Reader(Cursor::new(slice)))
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes in {what}", self.remaining())));
        }
        Ok(())
    }
}

fn decode(bytes: &[u8]) -> Result<WbModel> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing WBM1 magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if body_len != (bytes.len() - 24) as u64 {
        return Err(Error::Corrupt(format!(
            "declared body length {body_len} does not match file size {}",
            bytes.len()
        )));
    }
    let (content, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if stored != checksum(content) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let mut body = Reader(Cursor::new(&content[16..]));

    let mut head = body.section(SECTION_HEADER)?;
    let dir_byte = head.u8()?;
    let direction = Direction::from_byte(dir_byte)
        .ok_or_else(|| Error::Corrupt(format!("unknown direction byte {dir_byte}")))?;
    let kernel = head.str()?;
    if kernel != KERNEL_LAYOUT {
        return Err(Error::invalid(format!("model uses kernel layout {kernel:?}, expected {KERNEL_LAYOUT:?}")));
    }
    let uv = head.str()?;
    if uv != UV_CONVENTION {
        return Err(Error::invalid(format!("model uses chroma convention {uv:?}, expected {UV_CONVENTION:?}")));
    }
    head.finish("header")?;

    let mut p = body.section(SECTION_PARAMS)?;
    let histogram = HistogramParams {
        bins: p.u32()?,
        u_range: (p.f64()?, p.f64()?),
        v_range: (p.f64()?, p.f64()?),
        epsilon: p.f64()?,
    };
    histogram.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    let default_k = p.u32()?;
    let default_sigma = p.f64()?;
    let fit_sample_limit = p.u64()? as usize;
    let n_vocab = p.u32()?;
    let vocabulary = (0..n_vocab).map(|_| p.valid_setting()).collect::<Result<Vec<_>>>()?;
    p.finish("parameters")?;

    let mut q = body.section(SECTION_PCA)?;
    let d = q.u32()?;
    let k = q.u32()?;
    let bias = DVector::from_vec(q.f64s(d)?);
    let coeff = DMatrix::from_vec(d, k, q.f64s(d.saturating_mul(k))?);
    let variances = q.f64s(k)?;
    q.finish("PCA")?;
    let pca = PcaModel::from_parts(coeff, bias, variances)?;

    let mut r = body.section(SECTION_RECORDS)?;
    let n = r.u32()?;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = r.u64()?;
        let has_source = r.u8()?;
        let raw_source = r.setting()?;
        let source_setting = match has_source {
            0 => None,
            1 => Some(WbSetting::new(
                raw_source.0,
                Style::from_byte(raw_source.1).ok_or_else(|| Error::Corrupt("bad style byte".into()))?,
            )),
            b => return Err(Error::Corrupt(format!("bad source flag {b}"))),
        };
        let n_prov = r.u32()?;
        let provenance = (0..n_prov).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let feature = CompactFeature::new(r.f64s(k)?)?;
        let n_t = r.u32()?;
        let mut transforms = Vec::with_capacity(n_t.min(1024));
        for _ in 0..n_t {
            let kind = r.u8()?;
            let raw = r.setting()?;
            let tag = match kind {
                0 => TransformTag::Setting(WbSetting::new(
                    raw.0,
                    Style::from_byte(raw.1).ok_or_else(|| Error::Corrupt("bad style byte".into()))?,
                )),
                1 => TransformTag::Corrected,
                b => return Err(Error::Corrupt(format!("bad transform tag kind {b}"))),
            };
            let values = r.f64s(3 * KERNEL_LEN)?;
            let mut m: TransformMatrix = [[0.0; KERNEL_LEN]; 3];
            for (dst, src) in m.iter_mut().flatten().zip(values) {
                *dst = src;
            }
            let residual = r.f64()?;
            transforms.push(StoredTransform {
                transform: ColorTransform::new(m, tag)?,
                residual,
            });
        }
        records.push(TrainingRecord {
            id,
            feature,
            transforms,
            provenance,
            source_setting,
        });
    }
    r.finish("records")?;
    body.finish("body")?;

    WbModel::new(
        direction,
        histogram,
        default_k,
        default_sigma,
        fit_sample_limit,
        vocabulary,
        pca,
        records,
    )
}
