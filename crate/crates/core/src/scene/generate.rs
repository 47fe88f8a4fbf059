//! Synthetic scenes standing in for a panoptic segmentor's output.
//!
//! Each scene carries disjoint rectangular masks, a feature map with a
//! class-dependent signal inside every mask, and relations produced by a
//! fixed label rule. The rule depends only on `rule_seed` and the class and
//! predicate counts, so train and test corpora built with different `seed`s
//! share it.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Scene, SceneGraph, Triplet};
use crate::error::{Error, Result};
use crate::numeric::Array;

/// Number of classes reserved for context objects in context mode. Their
/// index within the reserved block is the context group.
pub const CONTEXT_CLASSES: usize = 2;
const NO_CONTEXT: usize = CONTEXT_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_object_classes: usize,
    pub num_predicates: usize,
    /// Relative predicate frequencies used when the label rule assigns
    /// predicates to class pairs. Empty means `1/(p+1)`.
    pub predicate_weights: Vec<f64>,
    /// When set, every scene holds exactly one context object whose class
    /// decides the predicate of every related pair.
    pub context_mode: bool,
    /// Probability that a subject is in the state where a second, more
    /// specific predicate also applies to its relations.
    pub ambiguity_rate: f64,
    /// Fraction of ordered class pairs that are related at all.
    pub relation_density: f64,
    /// Standard deviation of per-pixel feature noise.
    pub feature_noise: f64,
    /// Amplitude of the feature cue marking the ambiguous subject state.
    pub cue_strength: f64,
    /// Patch count the corpus will be tokenized with; H·W must divide by it.
    pub patches: usize,
    pub seed: u64,
    pub rule_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_scenes: 200,
            height: 16,
            width: 16,
            channels: 32,
            min_objects: 2,
            max_objects: 5,
            num_object_classes: 8,
            num_predicates: 8,
            predicate_weights: Vec::new(),
            context_mode: false,
            ambiguity_rate: 0.0,
            relation_density: 0.6,
            feature_noise: 0.5,
            cue_strength: 1.0,
            patches: 4,
            seed: 0,
            rule_seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Predicate weights normalized to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = if self.predicate_weights.is_empty() {
            (0..self.num_predicates).map(|p| 1.0 / (p as f64 + 1.0)).collect()
        } else {
            self.predicate_weights.clone()
        };
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }

    /// Fills in and normalizes the predicate weights after validating.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut out = self.clone();
        out.predicate_weights = self.normalized_weights();
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.height < 8 || self.width < 8 {
            return fail(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.patches == 0 || !(self.height * self.width).is_multiple_of(self.patches) {
            return fail(format!(
                "{}x{} pixels do not split into {} equal patches",
                self.height, self.width, self.patches
            ));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return fail(format!(
                "object range {}..{} must satisfy 2 <= min <= max",
                self.min_objects, self.max_objects
            ));
        }
        if self.num_predicates < 2 {
            return fail("at least two predicates are required".into());
        }
        if self.num_predicates > u16::MAX as usize || self.num_object_classes > u16::MAX as usize {
            return fail("class and predicate ids must fit in u16".into());
        }
        if self.context_mode {
            if self.num_object_classes < CONTEXT_CLASSES + 1 {
                return fail(format!("context mode needs more than {CONTEXT_CLASSES} object classes"));
            }
            if self.min_objects < 3 {
                return fail("context mode needs at least 3 objects per scene".into());
            }
        } else if self.num_object_classes == 0 {
            return fail("at least one object class is required".into());
        }
        if !self.predicate_weights.is_empty() {
            if self.predicate_weights.len() != self.num_predicates {
                return fail(format!(
                    "{} predicate weights for {} predicates",
                    self.predicate_weights.len(),
                    self.num_predicates
                ));
            }
            if self.predicate_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return fail("predicate weights must be positive".into());
            }
        }
        for (name, v) in [
            ("ambiguity_rate", self.ambiguity_rate),
            ("relation_density", self.relation_density),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return fail("feature_noise must be nonnegative".into());
        }
        if !self.cue_strength.is_finite() {
            return fail("cue_strength must be finite".into());
        }
        let cells = grid_side(self.max_objects);
        if cells > self.height || cells > self.width {
            return Err(Error::Generation(format!(
                "{} objects cannot be packed into {}x{}",
                self.max_objects, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// The deterministic labelling rule shared by every scene of a corpus family.
#[derive(Clone, Debug)]
pub struct LabelRule {
    num_classes: usize,
    num_predicates: usize,
    context_mode: bool,
    related: Vec<bool>,
    /// Per class pair: predicate for context group 0, group 1, no context.
    primary: Vec<[usize; 3]>,
    /// Per class pair: the more specific predicate that also applies when
    /// the subject is in the cued state.
    specific: Vec<[usize; 3]>,
    prototypes: Vec<Vec<f64>>,
    cue: Vec<f64>,
}

fn sample_excluding(rng: &mut ChaCha8Rng, dist: &WeightedIndex<f64>, exclude: &[usize]) -> usize {
    loop {
        let p = dist.sample(rng);
        if !exclude.contains(&p) {
            return p;
        }
    }
}

impl LabelRule {
    pub fn new(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let k = config.num_object_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rule_seed ^ 0x5eed_1abe_1000_0001);
        let dist = WeightedIndex::new(config.normalized_weights())
            .map_err(|e| Error::Config(format!("predicate weights: {e}")))?;

        let mut related = Vec::with_capacity(k * k);
        let mut primary = Vec::with_capacity(k * k);
        let mut specific = Vec::with_capacity(k * k);
        for _ in 0..k * k {
            related.push(rng.gen::<f64>() < config.relation_density);
            let base = dist.sample(&mut rng);
            let g0 = dist.sample(&mut rng);
            let g1 = sample_excluding(&mut rng, &dist, &[g0]);
            let prim = [g0, g1, base];
            let mut spec = [0; 3];
            for slot in 0..3 {
                spec[slot] = sample_excluding(&mut rng, &dist, &[prim[slot]]);
            }
            primary.push(prim);
            specific.push(spec);
        }
        let c = config.channels;
        let prototypes = (0..k)
            .map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let cue = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(LabelRule {
            num_classes: k,
            num_predicates: config.num_predicates,
            context_mode: config.context_mode,
            related,
            primary,
            specific,
            prototypes,
            cue,
        })
    }

    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    /// Classes that take part in relations.
    pub fn num_thing_classes(&self) -> usize {
        if self.context_mode {
            self.num_classes - CONTEXT_CLASSES
        } else {
            self.num_classes
        }
    }

    /// Context group of a class, if it is a context class.
    pub fn context_group(&self, class: usize) -> Option<usize> {
        let things = self.num_thing_classes();
        (self.context_mode && class >= things).then(|| class - things)
    }

    pub fn is_related(&self, subject_class: usize, object_class: usize) -> bool {
        self.related[subject_class * self.num_classes + object_class]
    }

    /// Predicate annotated for an uncued pair under the given context group.
    pub fn primary_predicate(&self, subject_class: usize, object_class: usize, group: Option<usize>) -> usize {
        self.primary[subject_class * self.num_classes + object_class][group.unwrap_or(NO_CONTEXT)]
    }

    pub fn specific_predicate(&self, subject_class: usize, object_class: usize, group: Option<usize>) -> usize {
        self.specific[subject_class * self.num_classes + object_class][group.unwrap_or(NO_CONTEXT)]
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    pub fn cue(&self) -> &[f64] {
        &self.cue
    }

    /// Annotation precedence: of two valid predicates, the specific one is
    /// annotated and the general one is left out.
    pub fn precedence(general: usize, specific: usize) -> (usize, usize) {
        (specific, general)
    }

    /// Annotated and hidden (valid but unannotated) triplets for a scene
    /// with the given object classes and subject cue states.
    pub fn annotate(&self, labels: &[usize], cued: &[bool]) -> (Vec<Triplet>, Vec<Triplet>) {
        let group = labels.iter().find_map(|&l| self.context_group(l));
        let mut annotated = Vec::new();
        let mut hidden = Vec::new();
        for (i, &a) in labels.iter().enumerate() {
            for (j, &b) in labels.iter().enumerate() {
                if i == j
                    || self.context_group(a).is_some()
                    || self.context_group(b).is_some()
                    || !self.is_related(a, b)
                {
                    continue;
                }
                let general = self.primary_predicate(a, b, group);
                if cued[i] {
                    let (kept, dropped) = Self::precedence(general, self.specific_predicate(a, b, group));
                    annotated.push(Triplet::new(i, j, kept));
                    hidden.push(Triplet::new(i, j, dropped));
                } else {
                    annotated.push(Triplet::new(i, j, general));
                }
            }
        }
        (annotated, hidden)
    }
}

fn grid_side(n: usize) -> usize {
    let mut g = 1;
    while g * g < n {
        g += 1;
    }
    g
}

/// Mixes a corpus seed and a scene index into an independent scene seed.
pub fn scene_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn build_scene(config: &CorpusConfig, rule: &LabelRule, seed: u64, scene_id: String) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (config.height, config.width, config.channels);
    let n = rng.gen_range(config.min_objects..=config.max_objects);

    let things = rule.num_thing_classes();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..things)).collect();
    if config.context_mode {
        let at = rng.gen_range(0..n);
        labels[at] = things + rng.gen_range(0..CONTEXT_CLASSES);
    }
    let cued: Vec<bool> = labels
        .iter()
        .map(|&l| rule.context_group(l).is_none() && rng.gen_bool(config.ambiguity_rate))
        .collect();

    let side = grid_side(n);
    if side > h || side > w {
        return Err(Error::Generation(format!("{n} objects cannot be packed into {h}x{w}")));
    }
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(&mut rng);
    let masks: Vec<BinaryMask> = cells[..n]
        .iter()
        .map(|&cell| {
            let (r0, r1) = ((cell / side) * h / side, (cell / side + 1) * h / side);
            let (c0, c1) = ((cell % side) * w / side, (cell % side + 1) * w / side);
            let (ch, cw) = (r1 - r0, c1 - c0);
            let mh = rng.gen_range((ch / 2).max(1)..=ch);
            let mw = rng.gen_range((cw / 2).max(1)..=cw);
            let top = rng.gen_range(r0..=r1 - mh);
            let left = rng.gen_range(c0..=c1 - mw);
            BinaryMask::rectangle(h, w, top, left, mh, mw)
        })
        .collect();

    let mut features: Vec<f64> = (0..h * w * c)
        .map(|_| config.feature_noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for ((mask, &label), &cue_on) in masks.iter().zip(&labels).zip(&cued) {
        let proto = rule.prototype(label);
        for (px, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
            let f = &mut features[px * c..(px + 1) * c];
            for ch in 0..c {
                f[ch] += proto[ch];
                if cue_on {
                    f[ch] += config.cue_strength * rule.cue()[ch];
                }
            }
        }
    }

    let (annotated, hidden) = rule.annotate(&labels, &cued);
    Ok(Scene {
        scene_id,
        features: Array::new(vec![h, w, c], features)?,
        masks,
        labels,
        graph: SceneGraph { triplets: annotated },
        hidden,
    })
}

/// Generates one scene from `seed`.
pub fn generate_scene(config: &CorpusConfig, seed: u64) -> Result<Scene> {
    let rule = LabelRule::new(config)?;
    build_scene(config, &rule, seed, format!("scene-{seed:016x}"))
}

/// Generates `config.num_scenes` scenes; scene `k` uses
/// `scene_seed(config.seed, k)`. Parallel across scenes, ordered output.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<Scene>> {
    let rule = LabelRule::new(config)?;
    (0..config.num_scenes)
        .into_par_iter()
        .map(|k| {
            build_scene(
                config,
                &rule,
                scene_seed(config.seed, k as u64),
                format!("scene-{k:06}"),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn base() -> CorpusConfig {
        CorpusConfig {
            num_scenes: 50,
            channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn two_object_scenes_are_disjoint() {
        let cfg = CorpusConfig {
            min_objects: 2,
            max_objects: 2,
            ..base()
        };
        for s in generate_corpus(&cfg).unwrap() {
            assert_eq!(s.masks.len(), 2);
            assert!(!s.masks[0].overlaps(&s.masks[1]).unwrap());
            s.validate(Some(cfg.num_object_classes), Some(cfg.num_predicates))
                .unwrap();
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = base();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn masks_never_overlap() {
        let cfg = CorpusConfig {
            num_scenes: 300,
            min_objects: 2,
            max_objects: 9,
            height: 8,
            width: 8,
            ..base()
        };
        for s in generate_corpus(&cfg).unwrap() {
            let mut cover = [0u8; 64];
            for m in &s.masks {
                for (c, &b) in cover.iter_mut().zip(m.bits()) {
                    *c += b as u8;
                }
            }
            assert!(cover.iter().all(|&c| c <= 1));
        }
    }

    #[test]
    fn infeasible_packing_is_an_error() {
        let cfg = CorpusConfig {
            height: 8,
            width: 8,
            min_objects: 2,
            max_objects: 65,
            ..base()
        };
        assert!(matches!(generate_scene(&cfg, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn labels_follow_the_rule() {
        let cfg = CorpusConfig {
            ambiguity_rate: 0.4,
            ..base()
        };
        let rule = LabelRule::new(&cfg).unwrap();
        for s in generate_corpus(&cfg).unwrap() {
            for t in &s.graph.triplets {
                let (a, b) = (s.labels[t.subject], s.labels[t.object]);
                assert!(rule.is_related(a, b));
                let general = rule.primary_predicate(a, b, None);
                let specific = rule.specific_predicate(a, b, None);
                let is_hidden_pair = s.hidden.iter().any(|h| (h.subject, h.object) == (t.subject, t.object));
                if is_hidden_pair {
                    assert_eq!(t.predicate, specific);
                    assert!(s.hidden.contains(&Triplet::new(t.subject, t.object, general)));
                } else {
                    assert_eq!(t.predicate, general);
                }
            }
        }
    }

    #[test]
    fn context_decides_the_predicate() {
        let cfg = CorpusConfig {
            num_scenes: 1000,
            context_mode: true,
            min_objects: 3,
            max_objects: 3,
            relation_density: 1.0,
            num_predicates: 4,
            ..base()
        };
        let rule = LabelRule::new(&cfg).unwrap();
        let scenes = generate_corpus(&cfg).unwrap();
        // (subject class, object class) -> predicates seen per context group
        let mut seen: HashMap<(usize, usize), [HashSet<usize>; 2]> = HashMap::new();
        for s in &scenes {
            let ctx: Vec<usize> = s.labels.iter().filter_map(|&l| rule.context_group(l)).collect();
            assert_eq!(ctx.len(), 1);
            for t in &s.graph.triplets {
                let key = (s.labels[t.subject], s.labels[t.object]);
                seen.entry(key).or_default()[ctx[0]].insert(t.predicate);
            }
        }
        let mut flipped = 0;
        for groups in seen.values() {
            assert!(groups[0].len() <= 1 && groups[1].len() <= 1);
            if !groups[0].is_empty() && !groups[1].is_empty() {
                assert_ne!(groups[0], groups[1]);
                flipped += 1;
            }
        }
        assert!(flipped > 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            CorpusConfig { height: 7, ..base() },
            CorpusConfig {
                height: 15,
                width: 15,
                patches: 4,
                ..base()
            },
            CorpusConfig {
                min_objects: 1,
                ..base()
            },
            CorpusConfig {
                num_predicates: 1,
                ..base()
            },
            CorpusConfig {
                ambiguity_rate: 1.5,
                ..base()
            },
            CorpusConfig {
                context_mode: true,
                min_objects: 2,
                ..base()
            },
            CorpusConfig {
                predicate_weights: vec![1.0; 3],
                ..base()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn weights_normalize() {
        let w = CorpusConfig::default().normalized_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
    }
}
