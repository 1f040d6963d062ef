//! Exact k-nearest-neighbor search over compact features, Gaussian RBF
//! weighting of neighbor distances and weighted blending of their transforms.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::feature::{squared_distance, CompactFeature};
use crate::mapping::{ColorTransform, TransformMatrix};

pub const DEFAULT_K: usize = 25;
pub const DEFAULT_SIGMA: f64 = 0.25;

pub type RecordId = u64;

/// Immutable collection of `(record id, feature)` pairs searched by linear
/// scan.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    ids: Vec<RecordId>,
    dim: usize,
    // row-major, one row per entry
    data: Vec<f64>,
}

impl FeatureIndex {
    pub fn new(entries: impl IntoIterator<Item = (RecordId, CompactFeature)>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        let mut seen = HashSet::new();
        for (id, feature) in entries {
            let d = *dim.get_or_insert(feature.dim());
            if feature.dim() != d {
                return Err(Error::invalid(format!(
                    "feature for record {id:016x} has dimension {} but the index uses {d}",
                    feature.dim()
                )));
            }
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate record id {id:016x}")));
            }
            ids.push(id);
            data.extend_from_slice(feature.as_slice());
        }
        Ok(Self {
            ids,
            dim: dim.unwrap_or(0),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[RecordId] {
        &self.ids
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// The `k` nearest records, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub ids: Vec<RecordId>,
    pub distances: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Returns the `k` entries closest to `query` in Euclidean distance. Equal
/// distances are ordered by record id.
pub fn knn_query(index: &FeatureIndex, query: &CompactFeature, k: usize) -> Result<NeighborSet> {
    if index.is_empty() {
        return Err(Error::InvalidState("feature index is empty".into()));
    }
    if k < 1 || k > index.len() {
        return Err(Error::invalid(format!(
            "k = {k} must lie in [1, {}]",
            index.len()
        )));
    }
    if query.dim() != index.dim() {
        return Err(Error::invalid(format!(
            "query has dimension {} but the index uses {}",
            query.dim(),
            index.dim()
        )));
    }
    let q = query.as_slice();
    let mut scored: Vec<(f64, RecordId)> = (0..index.len())
        .map(|i| (squared_distance(index.row(i), q), index.ids[i]))
        .collect();
    let by_distance_then_id =
        |a: &(f64, RecordId), b: &(f64, RecordId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_id);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_id);
    Ok(NeighborSet {
        ids: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0.sqrt()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub alpha: Vec<f64>,
    pub sigma: f64,
}

/// Normalized Gaussian weights `exp(−d²/2σ²) / Σ exp(−d²/2σ²)`.
///
/// The largest exponent is subtracted before exponentiating, so the closest
/// neighbor always gets a finite, nonzero weight.
pub fn rbf_weights(distances: &[f64], sigma: f64) -> Result<WeightVector> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if distances.is_empty() {
        return Err(Error::invalid("no distances to weight"));
    }
    if let Some(d) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::invalid(format!(
            "distances must be finite and non-negative, got {d}"
        )));
    }
    let two_sigma_sq = 2.0 * sigma * sigma;
    let exponents: Vec<f64> = distances.iter().map(|d| -(d * d) / two_sigma_sq).collect();
    let top = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = exponents.iter().map(|e| (e - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(WeightVector {
        alpha: raw.iter().map(|r| r / total).collect(),
        sigma,
    })
}

/// `Σ α_j M_j`, entrywise. All transforms must carry the same tag.
pub fn blend_transforms(
    weights: &WeightVector,
    transforms: &[&ColorTransform],
) -> Result<ColorTransform> {
    if weights.alpha.len() != transforms.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} transforms",
            weights.alpha.len(),
            transforms.len()
        )));
    }
    let Some(first) = transforms.first() else {
        return Err(Error::invalid("no transforms to blend"));
    };
    let tag = first.tag();
    if let Some(other) = transforms.iter().find(|t| t.tag() != tag) {
        return Err(Error::invalid(format!(
            "cannot blend transforms tagged {tag} and {}",
            other.tag()
        )));
    }
    if transforms.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc: TransformMatrix = [[0.0; 9]; 3];
    for (&a, t) in weights.alpha.iter().zip(transforms) {
        for (row, src) in acc.iter_mut().zip(t.matrix()) {
            for (v, s) in row.iter_mut().zip(src) {
                *v += a * s;
            }
        }
    }
    ColorTransform::new(acc, tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{Style, TransformTag, WbSetting};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature(v: &[f64]) -> CompactFeature {
        CompactFeature::new(v.to_vec()).unwrap()
    }

    fn tag() -> TransformTag {
        TransformTag::Setting(WbSetting::new(2850, Style::AdobeStandard))
    }

    fn random_transform(rng: &mut ChaCha8Rng, tag: TransformTag) -> ColorTransform {
        let mut m = [[0.0; 9]; 3];
        for v in m.iter_mut().flatten() {
            *v = rng.gen_range(-2.0..2.0);
        }
        ColorTransform::new(m, tag).unwrap()
    }

    #[test]
    fn self_retrieval_and_exhaustive_case() {
        let index = FeatureIndex::new(vec![
            (5, feature(&[0.0, 1.0])),
            (3, feature(&[2.0, 2.0])),
            (9, feature(&[0.5, 0.5])),
        ])
        .unwrap();
        let hit = knn_query(&index, &feature(&[2.0, 2.0]), 1).unwrap();
        assert_eq!(hit.ids, vec![3]);
        assert_eq!(hit.distances, vec![0.0]);
        let all = knn_query(&index, &feature(&[0.0, 0.0]), 3).unwrap();
        assert_eq!(all.ids, vec![9, 5, 3]);
        assert!(all.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_break_by_id_regardless_of_order() {
        let entries = vec![
            (40, feature(&[1.0, 0.0])),
            (7, feature(&[0.0, 1.0])),
            (12, feature(&[-1.0, 0.0])),
            (1, feature(&[5.0, 5.0])),
        ];
        let mut reversed = entries.clone();
        reversed.reverse();
        for e in [entries, reversed] {
            let index = FeatureIndex::new(e).unwrap();
            let n = knn_query(&index, &feature(&[0.0, 0.0]), 2).unwrap();
            assert_eq!(n.ids, vec![7, 12]);
        }
    }

    #[test]
    fn query_errors() {
        let empty = FeatureIndex::new(Vec::new()).unwrap();
        assert!(matches!(
            knn_query(&empty, &feature(&[0.0]), 1),
            Err(Error::InvalidState(_))
        ));
        let index = FeatureIndex::new(vec![(1, feature(&[0.0]))]).unwrap();
        assert!(knn_query(&index, &feature(&[0.0]), 0).is_err());
        assert!(knn_query(&index, &feature(&[0.0]), 2).is_err());
        assert!(knn_query(&index, &feature(&[0.0, 1.0]), 1).is_err());
        assert!(FeatureIndex::new(vec![(1, feature(&[0.0])), (1, feature(&[1.0]))]).is_err());
        assert!(FeatureIndex::new(vec![(1, feature(&[0.0])), (2, feature(&[1.0, 2.0]))]).is_err());
    }

    #[test]
    fn rbf_examples() {
        let w = rbf_weights(&[0.3; 7], 0.25).unwrap();
        assert!(w.alpha.iter().all(|a| (a - 1.0 / 7.0).abs() < 1e-12));
        // exponents 0 and -0.5: 1 / (1 + e^-0.5) = 0.622459
        let w = rbf_weights(&[0.0, 0.25], 0.25).unwrap();
        assert!((w.alpha[0] - 0.6225).abs() < 1e-4);
        assert!((w.alpha[1] - 0.3775).abs() < 1e-4);
        let w = rbf_weights(&[0.0, 2.5, 3.0, 10.0], 0.25).unwrap();
        assert!(w.alpha[0] > 1.0 - 1e-8);
    }

    #[test]
    fn rbf_errors() {
        assert!(rbf_weights(&[0.1], 0.0).is_err());
        assert!(rbf_weights(&[0.1], -1.0).is_err());
        assert!(rbf_weights(&[f64::NAN], 0.25).is_err());
        assert!(rbf_weights(&[f64::INFINITY], 0.25).is_err());
        assert!(rbf_weights(&[], 0.25).is_err());
    }

    #[test]
    fn blend_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_transform(&mut rng, tag());
        let single = blend_transforms(&rbf_weights(&[0.4], 0.25).unwrap(), &[&a]).unwrap();
        assert_eq!(single, a);

        let w = rbf_weights(&[0.1, 0.2, 0.3], 0.25).unwrap();
        let same = blend_transforms(&w, &[&a, &a, &a]).unwrap();
        for (x, y) in same.matrix().iter().flatten().zip(a.matrix().iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }

        let ms: Vec<ColorTransform> = (0..5).map(|_| random_transform(&mut rng, tag())).collect();
        let alpha: Vec<f64> = {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|r| r / s).collect()
        };
        let w = WeightVector { alpha: alpha.clone(), sigma: 0.25 };
        let refs: Vec<&ColorTransform> = ms.iter().collect();
        let blended = blend_transforms(&w, &refs).unwrap();
        for i in 0..3 {
            for l in 0..9 {
                let dot: f64 = alpha.iter().zip(&ms).map(|(a, m)| a * m.matrix()[i][l]).sum();
                assert!((blended.matrix()[i][l] - dot).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blend_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random_transform(&mut rng, tag());
        let b = random_transform(&mut rng, TransformTag::Corrected);
        let w = rbf_weights(&[0.1, 0.2], 0.25).unwrap();
        assert!(blend_transforms(&w, &[&a, &b]).is_err());
        assert!(blend_transforms(&w, &[&a]).is_err());
    }

    proptest! {
        #[test]
        fn rbf_scale_invariant(d in prop::collection::vec(0.0..3.0f64, 1..30), s in 0.05..2.0f64, f in 0.1..10.0f64) {
            let a = rbf_weights(&d, s).unwrap();
            let scaled: Vec<f64> = d.iter().map(|x| x * f).collect();
            let b = rbf_weights(&scaled, s * f).unwrap();
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn blend_in_convex_hull(seed in any::<u64>(), k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ms: Vec<ColorTransform> = (0..k).map(|_| random_transform(&mut rng, tag())).collect();
            let d: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let w = rbf_weights(&d, 0.25).unwrap();
            let refs: Vec<&ColorTransform> = ms.iter().collect();
            let out = blend_transforms(&w, &refs).unwrap();
            for i in 0..3 {
                for l in 0..9 {
                    let lo = ms.iter().map(|m| m.matrix()[i][l]).fold(f64::INFINITY, f64::min);
                    let hi = ms.iter().map(|m| m.matrix()[i][l]).fold(f64::NEG_INFINITY, f64::max);
                    let v = out.matrix()[i][l];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
