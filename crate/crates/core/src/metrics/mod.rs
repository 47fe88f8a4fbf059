//! Scene-graph evaluation: mask IoU, S-V-O triplet matching, R@K, mR@K and
//! panoptic quality.

mod diagnostics;
mod pq;
mod recall;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_triplets, RelationModel};
use crate::scalar::Scalar;
use crate::scene::{BinaryMask, Scene};

pub use diagnostics::{hidden_top_k_rate, pair_accuracy, ranked_predicates};
pub use pq::{panoptic_quality, pq_stats, PanopticQuality, PqStats};
pub use recall::{
    chance_recall, match_triplets, mean_recall_at_k, per_predicate_recall, recall_at_k, GtMatch, PredicateRecall,
    SceneMatches,
};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

/// Intersection over union of two same-sized masks.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

impl RankedTriplet {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.subject, self.object, self.predicate)
    }
}

/// Predicted segments of one scene and its ranked triplets over them.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction {
    pub scene_id: String,
    pub masks: Vec<BinaryMask>,
    pub labels: Vec<usize>,
    pub triplets: Vec<RankedTriplet>,
}

impl ScenePrediction {
    /// Emits the ground truth itself, every triplet with score 1.
    pub fn oracle(scene: &Scene) -> Self {
        let mut triplets: Vec<RankedTriplet> = scene
            .graph
            .triplets
            .iter()
            .map(|t| RankedTriplet {
                subject: t.subject,
                object: t.object,
                predicate: t.predicate,
                score: 1.0,
            })
            .collect();
        triplets.sort_by_key(RankedTriplet::key);
        ScenePrediction {
            scene_id: scene.scene_id.clone(),
            masks: scene.masks.clone(),
            labels: scene.labels.clone(),
            triplets,
        }
    }

    /// Errors unless triplets are sorted by (score desc, key asc) and
    /// reference existing segments.
    pub fn validate(&self) -> Result<()> {
        if self.masks.len() != self.labels.len() {
            return Err(Error::Contract("prediction masks and labels differ in length".into()));
        }
        let n = self.labels.len();
        for t in &self.triplets {
            if t.subject >= n || t.object >= n {
                return Err(Error::Contract(format!("triplet {:?} out of range", t.key())));
            }
        }
        let ordered = self
            .triplets
            .windows(2)
            .all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].key() < w[1].key()));
        if !ordered {
            return Err(Error::Contract("triplets are not ranked".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "Ks")]
    pub ks: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub mean_recall: BTreeMap<usize, f64>,
    /// Per-predicate recall at the largest K.
    pub per_predicate: BTreeMap<usize, PredicateRecall>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub corpus_id: String,
    pub checkpoint_id: String,
    /// Rank at which each ground-truth triplet was recalled, per scene.
    pub matches: Vec<SceneMatches>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Human-readable R@K / mR@K table. Values print with full precision so
    /// they read back exactly as stored in the JSON report.
    pub fn table(&self) -> String {
        let mut out = String::from("K\tR@K\tmR@K\n");
        for k in &self.ks {
            out.push_str(&format!("{k}\t{}\t{}\n", self.recall[k], self.mean_recall[k]));
        }
        out.push_str(&format!("PQ\t{}\nSQ\t{}\nRQ\t{}\n", self.pq, self.sq, self.rq));
        out
    }
}

fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::Config(
            "K values must be a nonempty list of positive integers".into(),
        ));
    }
    Ok(ks)
}

/// Runs `predict` on every scene at the largest K and aggregates the full report.
pub fn evaluate<F>(scenes: &[Scene], ks: &[usize], predict: F) -> Result<MetricsReport>
where
    F: Fn(&Scene, usize) -> Result<ScenePrediction> + Sync,
{
    let ks = normalize_ks(ks)?;
    let k_max = *ks.last().expect("nonempty");
    if scenes.is_empty() {
        return Err(Error::Undefined("empty corpus".into()));
    }
    let per_scene: Vec<(SceneMatches, PqStats)> = scenes
        .par_iter()
        .map(|scene| {
            let pred = predict(scene, k_max)?;
            pred.validate()?;
            let matches = match_triplets(&pred, scene, k_max)?;
            let stats = pq_stats(&pred.masks, &pred.labels, &scene.masks, &scene.labels)?;
            Ok((matches, stats))
        })
        .collect::<Result<_>>()?;

    let mut stats = PqStats::default();
    let mut matches = Vec::with_capacity(per_scene.len());
    for (m, s) in per_scene {
        stats.merge(&s);
        matches.push(m);
    }
    let quality = stats.quality()?;
    let mut recall = BTreeMap::new();
    let mut mean_recall = BTreeMap::new();
    for &k in &ks {
        recall.insert(k, recall_at_k(&matches, k)?);
        mean_recall.insert(k, mean_recall_at_k(&matches, k)?);
    }
    Ok(MetricsReport {
        per_predicate: per_predicate_recall(&matches, k_max),
        ks,
        recall,
        mean_recall,
        pq: quality.pq,
        sq: quality.sq,
        rq: quality.rq,
        corpus_id: String::new(),
        checkpoint_id: String::new(),
        matches,
    })
}

/// Evaluates a trained model with ground-truth segments as its input.
pub fn evaluate_model<T: Scalar>(scenes: &[Scene], model: &RelationModel<T>, ks: &[usize]) -> Result<MetricsReport> {
    evaluate(scenes, ks, |scene, k| {
        let logits = model.forward_scene(scene)?;
        predict_triplets(&logits, scene, k)
    })
}

/// Evaluates the ground truth against itself.
pub fn evaluate_oracle(scenes: &[Scene], ks: &[usize]) -> Result<MetricsReport> {
    evaluate(scenes, ks, |scene, _| Ok(ScenePrediction::oracle(scene)))
}
