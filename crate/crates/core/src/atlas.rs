//! The model atlas: a bounded store of client model updates ("anchors") that
//! spans the server's search space. Anchors are ranked by importance scores
//! (absolute merging coefficients from the most recent search) and the least
//! important one is evicted on overflow. Before every search the anchors are
//! rescaled to share the median of their l2 norms.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::ParamVector;

/// A stored client update plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub id: u64,
    pub delta: ParamVector,
    pub source_client: usize,
    pub dispatch_round: usize,
    pub arrival_round: usize,
    /// Cached l2 norm of `delta`; always positive.
    pub norm: f64,
}

/// Provenance attached to an incoming update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorMeta {
    pub source_client: usize,
    pub dispatch_round: usize,
    pub arrival_round: usize,
}

/// Serializable view of one atlas entry for post-hoc analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasSnapshotRecord {
    pub id: u64,
    pub source_client: usize,
    pub dispatch_round: usize,
    pub arrival_round: usize,
    pub norm: f64,
    /// `None` until the anchor's first coefficient search scores it.
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

/// Bounded, importance-ranked collection of anchors.
///
/// Fresh anchors carry an infinite score sentinel so that an update whose
/// direction was never tried cannot be evicted ahead of scored ones.
#[derive(Debug, Clone)]
pub struct Atlas {
    capacity: usize,
    entries: Vec<Anchor>,
    scores: Vec<f64>,
    next_id: u64,
}

impl Atlas {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::InvalidArgument(
                "atlas capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            scores: Vec::with_capacity(capacity),
            next_id: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Anchor] {
        &self.entries
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn contains_id(&self, id: u64) -> bool {
        self.entries.iter().any(|a| a.id == id)
    }

    /// Inserts a client update. When full, the entry with the minimal score
    /// is replaced in place (ties evict the oldest id); the displaced anchor
    /// is returned. Zero-norm updates are rejected because they cannot be
    /// normalized.
    pub fn add_anchor(
        &mut self,
        delta: ParamVector,
        meta: AnchorMeta,
    ) -> Result<Option<Anchor>> {
        let norm = delta.norm();
        if norm == 0.0 {
            return Err(CoreError::ZeroNormAnchor);
        }
        if !norm.is_finite() {
            return Err(CoreError::NonFinite("anchor norm".into()));
        }
        if meta.arrival_round < meta.dispatch_round {
            return Err(CoreError::InvalidArgument(
                "anchor arrival precedes dispatch".into(),
            ));
        }
        if let Some(first) = self.entries.first() {
            if first.delta.len() != delta.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "anchor length {} vs atlas anchors of length {}",
                    delta.len(),
                    first.delta.len()
                )));
            }
        }
        let anchor = Anchor {
            id: self.next_id,
            delta,
            source_client: meta.source_client,
            dispatch_round: meta.dispatch_round,
            arrival_round: meta.arrival_round,
            norm,
        };
        self.next_id += 1;

        if self.entries.len() < self.capacity {
            self.entries.push(anchor);
            self.scores.push(f64::INFINITY);
            return Ok(None);
        }

        let mut evict = 0usize;
        for i in 1..self.entries.len() {
            let better = self.scores[i] < self.scores[evict]
                || (self.scores[i] == self.scores[evict]
                    && self.entries[i].id < self.entries[evict].id);
            if better {
                evict = i;
            }
        }
        let old = std::mem::replace(&mut self.entries[evict], anchor);
        self.scores[evict] = f64::INFINITY;
        Ok(Some(old))
    }

    /// Median of the stored anchor norms (mean of the two middle values for
    /// even counts).
    pub fn median_norm(&self) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(CoreError::EmptyAtlas);
        }
        let mut norms: Vec<f64> = self.entries.iter().map(|a| a.norm).collect();
        norms.sort_by(|a, b| a.partial_cmp(b).expect("norms are finite"));
        let mid = norms.len() / 2;
        Ok(if norms.len() % 2 == 1 {
            norms[mid]
        } else {
            0.5 * (norms[mid - 1] + norms[mid])
        })
    }

    /// Every anchor rescaled to the median norm; the stored anchors are left
    /// untouched. Uses however many anchors are present, full or not.
    pub fn normalize_anchors(&self) -> Result<Vec<ParamVector>> {
        let median = self.median_norm()?;
        Ok(self
            .entries
            .iter()
            .map(|a| {
                let mut scaled = a.delta.clone();
                scaled.scale(median / a.norm);
                scaled
            })
            .collect())
    }

    /// Replaces importance scores with the absolute merging coefficients of
    /// the latest search.
    pub fn set_scores(&mut self, coefficients: &[f64]) -> Result<()> {
        if coefficients.len() != self.entries.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} coefficients for {} anchors",
                coefficients.len(),
                self.entries.len()
            )));
        }
        for (score, c) in self.scores.iter_mut().zip(coefficients) {
            *score = c.abs();
        }
        Ok(())
    }

    /// Snapshot of ids, metadata, norms and scores; deltas included on
    /// request.
    pub fn snapshot(&self, include_deltas: bool) -> Vec<AtlasSnapshotRecord> {
        self.entries
            .iter()
            .zip(&self.scores)
            .map(|(a, &score)| AtlasSnapshotRecord {
                id: a.id,
                source_client: a.source_client,
                dispatch_round: a.dispatch_round,
                arrival_round: a.arrival_round,
                norm: a.norm,
                score: score.is_finite().then_some(score),
                delta: include_deltas.then(|| a.delta.as_slice().to_vec()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelSpec, ParamVector};
    use std::sync::Arc;

    fn vector(values: Vec<f64>) -> ParamVector {
        // a single [k, 1] layer holds exactly k + 1 parameters
        let k = values.len() - 1;
        let spec = ModelSpec::new(vec![k.max(1), 1], Activation::Relu).unwrap();
        ParamVector::from_values(spec, values).unwrap()
    }

    fn meta(client: usize) -> AnchorMeta {
        AnchorMeta {
            source_client: client,
            dispatch_round: 1,
            arrival_round: 2,
        }
    }

    #[test]
    fn appends_until_capacity() {
        let mut atlas = Atlas::new(3).unwrap();
        atlas.add_anchor(vector(vec![1.0, 0.0, 0.0]), meta(0)).unwrap();
        let evicted = atlas.add_anchor(vector(vec![0.0, 1.0, 0.0]), meta(1)).unwrap();
        assert!(evicted.is_none());
        assert_eq!(atlas.len(), 2);
    }

    #[test]
    fn evicts_minimal_score() {
        let mut atlas = Atlas::new(3).unwrap();
        for i in 0..3 {
            let mut v = vec![0.0, 0.0, 0.0];
            v[i] = 1.0;
            atlas.add_anchor(vector(v), meta(i)).unwrap();
        }
        atlas.set_scores(&[0.5, 0.1, 0.9]).unwrap();
        let evicted = atlas
            .add_anchor(vector(vec![1.0, 1.0, 0.0]), meta(9))
            .unwrap()
            .expect("full atlas must evict");
        assert_eq!(evicted.id, 1);
        assert_eq!(atlas.len(), 3);
    }

    #[test]
    fn score_ties_evict_oldest_id() {
        let mut atlas = Atlas::new(2).unwrap();
        // ids 0..6; after churn the surviving pair gets ids 7 and 9 via
        // fresh inserts, so exercise the tie rule directly on ids 0 and 1.
        atlas.add_anchor(vector(vec![1.0, 0.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 1.0]), meta(1)).unwrap();
        atlas.set_scores(&[0.4, 0.4]).unwrap();
        let evicted = atlas
            .add_anchor(vector(vec![1.0, 1.0]), meta(2))
            .unwrap()
            .unwrap();
        assert_eq!(evicted.id, 0);
    }

    #[test]
    fn unscored_anchors_survive_scored_ones() {
        let mut atlas = Atlas::new(2).unwrap();
        atlas.add_anchor(vector(vec![1.0, 0.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 1.0]), meta(1)).unwrap();
        // only the first entry has been scored; the second keeps its sentinel
        atlas.set_scores(&[3.0, 2.0]).unwrap();
        let replaced = atlas
            .add_anchor(vector(vec![1.0, 1.0]), meta(2))
            .unwrap()
            .unwrap();
        assert_eq!(replaced.id, 1); // id 1 had score 2.0 < 3.0
        // the replacement (id 2) is unscored; next overflow must evict id 0
        let replaced = atlas
            .add_anchor(vector(vec![2.0, 2.0]), meta(3))
            .unwrap()
            .unwrap();
        assert_eq!(replaced.id, 0);
    }

    #[test]
    fn zero_norm_updates_are_rejected() {
        let mut atlas = Atlas::new(2).unwrap();
        assert!(matches!(
            atlas.add_anchor(vector(vec![0.0, 0.0]), meta(0)),
            Err(CoreError::ZeroNormAnchor)
        ));
        assert!(atlas.is_empty());
    }

    #[test]
    fn normalization_matches_hand_computed_medians() {
        let mut atlas = Atlas::new(4).unwrap();
        atlas.add_anchor(vector(vec![3.0, 0.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 3.0]), meta(1)).unwrap();
        let normalized = atlas.normalize_anchors().unwrap();
        assert_eq!(normalized[0].as_slice(), &[3.0, 0.0]);
        assert_eq!(normalized[1].as_slice(), &[0.0, 3.0]);

        let mut atlas = Atlas::new(4).unwrap();
        atlas.add_anchor(vector(vec![1.0, 0.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 2.0]), meta(1)).unwrap();
        atlas.add_anchor(vector(vec![4.0, 0.0]), meta(2)).unwrap();
        let normalized = atlas.normalize_anchors().unwrap();
        assert_eq!(normalized[0].as_slice(), &[2.0, 0.0]);
        assert_eq!(normalized[1].as_slice(), &[0.0, 2.0]);
        assert_eq!(normalized[2].as_slice(), &[2.0, 0.0]);

        // even count: median is the mean of the middle norms
        let mut atlas = Atlas::new(4).unwrap();
        atlas.add_anchor(vector(vec![1.0, 0.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 3.0]), meta(1)).unwrap();
        assert_eq!(atlas.median_norm().unwrap(), 2.0);
        let normalized = atlas.normalize_anchors().unwrap();
        assert_eq!(normalized[0].as_slice(), &[2.0, 0.0]);
        assert!((normalized[1].as_slice()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut atlas = Atlas::new(3).unwrap();
        atlas.add_anchor(vector(vec![1.0, 2.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![-3.0, 0.5]), meta(1)).unwrap();
        atlas.add_anchor(vector(vec![0.1, 0.1]), meta(2)).unwrap();
        let once = atlas.normalize_anchors().unwrap();

        let mut renorm = Atlas::new(3).unwrap();
        for (i, v) in once.iter().enumerate() {
            renorm.add_anchor(v.clone(), meta(i)).unwrap();
        }
        let twice = renorm.normalize_anchors().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn set_scores_takes_absolute_values() {
        let mut atlas = Atlas::new(2).unwrap();
        atlas.add_anchor(vector(vec![1.0, 0.0]), meta(0)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 1.0]), meta(1)).unwrap();
        atlas.set_scores(&[-0.3, 0.2]).unwrap();
        assert_eq!(atlas.scores(), &[0.3, 0.2]);
        atlas.set_scores(&[0.0, 0.0]).unwrap();
        assert_eq!(atlas.scores(), &[0.0, 0.0]);
        assert!(matches!(
            atlas.set_scores(&[1.0]),
            Err(CoreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn empty_atlas_cannot_normalize() {
        let atlas = Atlas::new(2).unwrap();
        assert!(matches!(
            atlas.normalize_anchors(),
            Err(CoreError::EmptyAtlas)
        ));
    }

    #[test]
    fn snapshot_reports_unscored_entries_as_missing() {
        let mut atlas = Atlas::new(2).unwrap();
        atlas.add_anchor(vector(vec![1.0, 0.0]), meta(4)).unwrap();
        atlas.add_anchor(vector(vec![0.0, 2.0]), meta(5)).unwrap();
        atlas.set_scores(&[0.7, -0.1]).unwrap();
        atlas.add_anchor(vector(vec![1.0, 1.0]), meta(6)).unwrap(); // evicts id 1
        let records = atlas.snapshot(false);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].score, Some(0.7));
        assert_eq!(records[1].score, None);
        assert!(records.iter().all(|r| r.delta.is_none()));
        let with_deltas = atlas.snapshot(true);
        assert_eq!(with_deltas[0].delta.as_deref(), Some(&[1.0, 0.0][..]));
    }

    /// Randomized churn: capacity bound, argmin eviction, and median
    /// normalization all hold across long add/score sequences.
    #[test]
    fn randomized_churn_preserves_invariants() {
        use crate::rng::stream_rng;
        use rand::Rng;

        let spec: Arc<ModelSpec> = ModelSpec::new(vec![3, 1], Activation::Relu).unwrap();
        let mut rng = stream_rng(31, "atlas-churn", &[]);
        let mut atlas = Atlas::new(5).unwrap();
        for step in 0..2000 {
            let values: Vec<f64> = (0..spec.param_count())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let delta = match ParamVector::from_values(spec.clone(), values) {
                Ok(v) if v.norm() > 0.0 => v,
                _ => continue,
            };
            let expected_evict = if atlas.len() == atlas.capacity() {
                let mut best = 0;
                for i in 1..atlas.len() {
                    if atlas.scores()[i] < atlas.scores()[best]
                        || (atlas.scores()[i] == atlas.scores()[best]
                            && atlas.entries()[i].id < atlas.entries()[best].id)
                    {
                        best = i;
                    }
                }
                Some(atlas.entries()[best].id)
            } else {
                None
            };
            let evicted = atlas
                .add_anchor(
                    delta,
                    AnchorMeta {
                        source_client: step,
                        dispatch_round: step,
                        arrival_round: step + 1,
                    },
                )
                .unwrap();
            assert_eq!(evicted.map(|a| a.id), expected_evict);
            assert!(atlas.len() <= atlas.capacity());

            if rng.random_range(0..3) == 0 {
                let coeffs: Vec<f64> = (0..atlas.len())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                atlas.set_scores(&coeffs).unwrap();
            }

            let median = atlas.median_norm().unwrap();
            for normalized in atlas.normalize_anchors().unwrap() {
                assert!((normalized.norm() - median).abs() <= 1e-12 * median);
            }
        }
    }
}
