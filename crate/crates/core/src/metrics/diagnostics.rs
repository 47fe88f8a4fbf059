//! Per-pair predicate diagnostics used by the controlled experiments.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{RelationLogits, RelationModel};
use crate::scalar::Scalar;
use crate::scene::{Scene, Triplet};

/// Predicates of one pair ordered by logit, highest first; ties go to the
/// lower predicate index.
pub fn ranked_predicates<T: Scalar>(logits: &RelationLogits<T>, subject: usize, object: usize) -> Vec<usize> {
    let scores = logits.pair(subject, object);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].as_f64().total_cmp(&scores[a].as_f64()).then(a.cmp(&b)));
    order
}

fn fraction_in_top_k<T, F>(model: &RelationModel<T>, scenes: &[Scene], k: usize, select: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Scene) -> &[Triplet] + Sync,
{
    let counts: Vec<(usize, usize)> = scenes
        .par_iter()
        .map(|s| {
            let triplets = select(s);
            if triplets.is_empty() {
                return Ok((0, 0));
            }
            let logits = model.forward_scene(s)?;
            let hits = triplets
                .iter()
                .filter(|t| ranked_predicates(&logits, t.subject, t.object)[..k].contains(&t.predicate))
                .count();
            Ok((hits, triplets.len()))
        })
        .collect::<Result<_>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |(h, n), &(a, b)| (h + a, n + b));
    if total == 0 {
        return Err(Error::Undefined("no triplets to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of annotated triplets whose predicate is the pair's top-scoring one.
pub fn pair_accuracy<T: Scalar>(model: &RelationModel<T>, scenes: &[Scene]) -> Result<f64> {
    fraction_in_top_k(model, scenes, 1, |s| &s.graph.triplets)
}

/// Fraction of valid-but-unannotated triplets whose predicate is among the
/// pair's `k` highest-scoring predicates.
pub fn hidden_top_k_rate<T: Scalar>(model: &RelationModel<T>, scenes: &[Scene], k: usize) -> Result<f64> {
    if k == 0 || k > model.config().num_predicates {
        return Err(Error::Config(format!("top-k of {k} predicates")));
    }
    fraction_in_top_k(model, scenes, k, |s| &s.hidden)
}
