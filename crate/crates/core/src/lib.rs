//! Emulates in-camera white-balance errors on sRGB images, and removes them,
//! by retrieving and blending polynomial color transforms fitted on a paired
//! training set.

pub mod color;
pub mod error;
pub mod feature;
pub mod io;
pub mod mapping;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod synth;

pub use color::{clamp_gamut, kernel_phi, srgb_decode, srgb_encode, ImageBuffer, RgbColor};
pub use error::{Error, Result};
pub use feature::{compute_histogram, fit_pca, project, CompactFeature, HistogramParams, PcaModel, RgbUvHistogram};
pub use mapping::{apply_transform, fit_transform, ColorTransform, Style, TransformTag, WbSetting};
pub use model::{build_model, load_model, save_model, BuildParams, Direction, WbModel};
pub use pipeline::{augment, correct, detect_grayscale};
pub use retrieval::{blend_transforms, knn_query, rbf_weights, FeatureIndex, NeighborSet, WeightVector};
