use serde::{Deserialize, Serialize};

use super::recall::MATCH_IOU;
use crate::error::{Error, Result};
use crate::scene::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Counts pooled across scenes and classes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
        self.iou_sum += other.iou_sum;
    }

    /// Errors when there is neither a prediction nor a ground-truth segment.
    pub fn quality(&self) -> Result<PanopticQuality> {
        let tp = self.true_positives as f64;
        let denom = tp + 0.5 * (self.false_positives + self.false_negatives) as f64;
        if denom == 0.0 {
            return Err(Error::Undefined("panoptic quality without any segments".into()));
        }
        let sq = if self.true_positives == 0 {
            0.0
        } else {
            self.iou_sum / tp
        };
        Ok(PanopticQuality {
            pq: self.iou_sum / denom,
            sq,
            rq: tp / denom,
        })
    }
}

fn check_segments(masks: &[BinaryMask], labels: &[usize], side: &str) -> Result<()> {
    if masks.len() != labels.len() {
        return Err(Error::Contract(format!("{side} masks and labels differ in length")));
    }
    for (i, a) in masks.iter().enumerate() {
        for (j, b) in masks.iter().enumerate().skip(i + 1) {
            if a.overlaps(b)? {
                return Err(Error::Contract(format!("{side} segments {i} and {j} overlap")));
            }
        }
    }
    Ok(())
}

/// Matches same-class segments with IoU above 0.5. With non-overlapping
/// segments on each side such a partner is unique, so no assignment search
/// is needed.
pub fn pq_stats(
    pred_masks: &[BinaryMask],
    pred_labels: &[usize],
    gt_masks: &[BinaryMask],
    gt_labels: &[usize],
) -> Result<PqStats> {
    check_segments(pred_masks, pred_labels, "predicted")?;
    check_segments(gt_masks, gt_labels, "ground-truth")?;
    let mut stats = PqStats::default();
    let mut gt_used = vec![false; gt_masks.len()];
    for (pm, &pl) in pred_masks.iter().zip(pred_labels) {
        let mut hit = None;
        for (g, (gm, &gl)) in gt_masks.iter().zip(gt_labels).enumerate() {
            if gl == pl && !gt_used[g] {
                let iou = pm.iou(gm)?;
                if iou > MATCH_IOU {
                    hit = Some((g, iou));
                    break;
                }
            }
        }
        match hit {
            Some((g, iou)) => {
                gt_used[g] = true;
                stats.true_positives += 1;
                stats.iou_sum += iou;
            }
            None => stats.false_positives += 1,
        }
    }
    stats.false_negatives = gt_used.iter().filter(|&&u| !u).count();
    Ok(stats)
}

pub fn panoptic_quality(
    pred_masks: &[BinaryMask],
    pred_labels: &[usize],
    gt_masks: &[BinaryMask],
    gt_labels: &[usize],
) -> Result<PanopticQuality> {
    pq_stats(pred_masks, pred_labels, gt_masks, gt_labels)?.quality()
}
