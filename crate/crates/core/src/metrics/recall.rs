use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScenePrediction;
use crate::error::{Error, Result};
use crate::scene::Scene;

/// Match threshold on mask IoU; matching requires strictly more.
pub const MATCH_IOU: f64 = 0.5;

/// Outcome for one ground-truth triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtMatch {
    pub predicate: usize,
    /// Zero-based rank of the prediction that recalled it; `None` for a miss.
    pub rank: Option<usize>,
}

impl GtMatch {
    pub fn matched_within(&self, k: usize) -> bool {
        self.rank.is_some_and(|r| r < k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMatches {
    pub scene_id: String,
    /// One entry per ground-truth triplet, in ground-truth order.
    pub gt: Vec<GtMatch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub gt_count: usize,
    pub matched: usize,
    pub recall: f64,
}

/// Greedy rank-order matching of the top `k` predictions against the
/// scene's ground-truth triplets.
///
/// A prediction is compatible with a ground-truth triplet when subject class,
/// object class and predicate agree and both mask IoUs exceed 0.5. Each
/// prediction consumes the first still-unmatched compatible triplet by index.
/// Because ranks are recorded, the records at `k` also answer every smaller K.
pub fn match_triplets(pred: &ScenePrediction, gt: &Scene, k: usize) -> Result<SceneMatches> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    // IoU between every predicted and ground-truth segment, computed once.
    let iou = pred
        .masks
        .iter()
        .map(|pm| gt.masks.iter().map(|gm| pm.iou(gm)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let same = |p: usize, g: usize| pred.labels[p] == gt.labels[g] && iou[p][g] > MATCH_IOU;

    let triplets = &gt.graph.triplets;
    let mut records: Vec<GtMatch> = triplets
        .iter()
        .map(|t| GtMatch {
            predicate: t.predicate,
            rank: None,
        })
        .collect();
    for (rank, p) in pred.triplets.iter().take(k).enumerate() {
        let hit = triplets.iter().enumerate().position(|(g, t)| {
            records[g].rank.is_none()
                && t.predicate == p.predicate
                && same(p.subject, t.subject)
                && same(p.object, t.object)
        });
        if let Some(g) = hit {
            records[g].rank = Some(rank);
        }
    }
    Ok(SceneMatches {
        scene_id: gt.scene_id.clone(),
        gt: records,
    })
}

/// Pooled triplet recall: matched ground truth over all ground truth.
pub fn recall_at_k(matches: &[SceneMatches], k: usize) -> Result<f64> {
    let total: usize = matches.iter().map(|m| m.gt.len()).sum();
    if total == 0 {
        return Err(Error::Undefined(
            "recall over a corpus with no ground-truth triplets".into(),
        ));
    }
    let hits = matches
        .iter()
        .flat_map(|m| &m.gt)
        .filter(|g| g.matched_within(k))
        .count();
    Ok(hits as f64 / total as f64)
}

/// Recall per predicate over every predicate that occurs in the ground truth.
pub fn per_predicate_recall(matches: &[SceneMatches], k: usize) -> BTreeMap<usize, PredicateRecall> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for g in matches.iter().flat_map(|m| &m.gt) {
        let entry = counts.entry(g.predicate).or_default();
        entry.0 += 1;
        entry.1 += usize::from(g.matched_within(k));
    }
    counts
        .into_iter()
        .map(|(p, (gt_count, matched))| {
            let recall = matched as f64 / gt_count as f64;
            (
                p,
                PredicateRecall {
                    gt_count,
                    matched,
                    recall,
                },
            )
        })
        .collect()
}

/// Unweighted mean of per-predicate recalls; absent predicates are skipped.
pub fn mean_recall_at_k(matches: &[SceneMatches], k: usize) -> Result<f64> {
    let per = per_predicate_recall(matches, k);
    if per.is_empty() {
        return Err(Error::Undefined(
            "mean recall over a corpus with no ground-truth triplets".into(),
        ));
    }
    Ok(per.values().map(|r| r.recall).sum::<f64>() / per.len() as f64)
}

/// Expected R@K of a predictor that ranks candidates uniformly at random:
/// each scene contributes `min(1, K / (n (n - 1) P))` per ground-truth triplet.
pub fn chance_recall(scenes: &[Scene], num_predicates: usize, k: usize) -> Result<f64> {
    let mut hits = 0.0;
    let mut total = 0usize;
    for s in scenes {
        let n = s.num_objects();
        let candidates = (n * n.saturating_sub(1) * num_predicates) as f64;
        let gt = s.graph.triplets.len();
        if gt > 0 {
            hits += gt as f64 * (k as f64 / candidates).min(1.0);
            total += gt;
        }
    }
    if total == 0 {
        return Err(Error::Undefined("chance recall without ground-truth triplets".into()));
    }
    Ok(hits / total as f64)
}
