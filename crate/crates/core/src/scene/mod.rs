//! Panoptic scenes, their relation graphs, the synthetic corpus generator and
//! the `.psgc` corpus container.

mod corpus;
mod generate;
mod mask;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Array;

pub use corpus::{load_corpus, read_corpus, save_corpus, write_corpus, CorpusManifest, CORPUS_VERSION};
pub use generate::{generate_corpus, generate_scene, scene_seed, CorpusConfig, LabelRule, CONTEXT_CLASSES};
pub use mask::{decode_rle, encode_rle, BinaryMask, RleMask};

/// Ordered (subject, object, predicate) relation between two objects of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

impl Triplet {
    pub fn new(subject: usize, object: usize, predicate: usize) -> Self {
        Triplet {
            subject,
            object,
            predicate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub triplets: Vec<Triplet>,
}

impl SceneGraph {
    pub fn validate(&self, num_objects: usize, num_predicates: Option<usize>) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.triplets.len());
        for t in &self.triplets {
            if t.subject >= num_objects || t.object >= num_objects {
                return Err(Error::format(
                    "scene graph",
                    format!("{t:?} references an object outside 0..{num_objects}"),
                ));
            }
            if t.subject == t.object {
                return Err(Error::format("scene graph", format!("self relation {t:?}")));
            }
            if let Some(p) = num_predicates {
                if t.predicate >= p {
                    return Err(Error::format(
                        "scene graph",
                        format!("predicate {} outside 0..{p}", t.predicate),
                    ));
                }
            }
            if !seen.insert(*t) {
                return Err(Error::format("scene graph", format!("duplicate {t:?}")));
            }
        }
        Ok(())
    }
}

/// Output of the (simulated) panoptic segmentor plus its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    /// Feature map, shape `[H, W, C]`.
    pub features: Array<f64>,
    pub masks: Vec<BinaryMask>,
    pub labels: Vec<usize>,
    pub graph: SceneGraph,
    /// Valid relations that the annotation policy left out. Recorded by the
    /// generator for evaluation only; never used as training targets.
    pub hidden: Vec<Triplet>,
}

impl Scene {
    pub fn num_objects(&self) -> usize {
        self.labels.len()
    }

    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self, num_object_classes: Option<usize>, num_predicates: Option<usize>) -> Result<()> {
        let ctx = |msg: String| Error::format(self.scene_id.clone(), msg);
        if self.features.ndim() != 3 {
            return Err(ctx(format!(
                "feature map shape {:?} is not HxWxC",
                self.features.shape()
            )));
        }
        if !self.features.all_finite() {
            return Err(ctx("feature map has non-finite values".into()));
        }
        if self.masks.len() != self.labels.len() {
            return Err(ctx(format!(
                "{} masks but {} labels",
                self.masks.len(),
                self.labels.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let mut cover = vec![false; h * w];
        for (i, m) in self.masks.iter().enumerate() {
            if (m.height(), m.width()) != (h, w) {
                return Err(ctx(format!(
                    "mask {i} is {}x{}, scene is {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
            if m.is_empty() {
                return Err(ctx(format!("mask {i} is empty")));
            }
            for (c, &b) in cover.iter_mut().zip(m.bits()) {
                if b && *c {
                    return Err(ctx(format!("mask {i} overlaps an earlier mask")));
                }
                *c |= b;
            }
        }
        if let Some(k) = num_object_classes {
            if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
                return Err(Error::Label {
                    label: bad,
                    num_classes: k,
                });
            }
        }
        self.graph
            .validate(self.num_objects(), num_predicates)
            .map_err(|e| ctx(e.to_string()))?;
        SceneGraph {
            triplets: self.hidden.clone(),
        }
        .validate(self.num_objects(), num_predicates)
        .map_err(|e| ctx(format!("hidden relations: {e}")))?;
        Ok(())
    }

    /// Dense 0/1 hard-label tensor `[N, N, P]` from the annotated triplets.
    pub fn hard_labels(&self, num_predicates: usize) -> Array<f64> {
        let n = self.num_objects();
        let mut out = Array::zeros(&[n, n, num_predicates]);
        for t in &self.graph.triplets {
            out.set(&[t.subject, t.object, t.predicate], 1.0);
        }
        out
    }
}
