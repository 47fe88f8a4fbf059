//! Global-context relation network, its pairwise-only baseline, triplet
//! ranking and the checkpoint container.

mod checkpoint;
mod params;
mod relation;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Array, Tape};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::tokenizer::{ObjectPatches, TokenGrid, TokenizerParams};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CheckpointKind,
    CHECKPOINT_VERSION,
};
pub use params::{Bound, ParamStore};
pub use relation::{global_context_forward, predict_triplets, relation_head, RelationLogits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Transformer attending over every token of every object.
    Global,
    /// Per-object pooling only; no information flows between objects.
    Pairwise,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Architecture::Global),
            "pairwise" => Ok(Architecture::Pairwise),
            other => Err(Error::Config(format!("unknown model architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub num_object_classes: usize,
    pub num_predicates: usize,
    /// Hidden size; equals the feature map's channel count.
    pub dim: usize,
    pub patches: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Query/key size of each predicate head in the relation head.
    pub head_dim: usize,
    pub layer_norm_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Global,
            num_object_classes: 8,
            num_predicates: 8,
            dim: 32,
            patches: 4,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            head_dim: 16,
            layer_norm_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.patches == 0 || self.head_dim == 0 {
            return fail("dim, patches and head_dim must be positive");
        }
        if self.num_object_classes == 0 || self.num_predicates == 0 {
            return fail("need at least one object class and one predicate");
        }
        if self.architecture == Architecture::Global && self.layers > 0 {
            if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
                return fail("attention heads must divide the hidden size");
            }
            if self.ffn_dim == 0 {
                return fail("ffn_dim must be positive");
            }
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive");
        }
        Ok(())
    }

    /// Layers actually used by the architecture.
    pub fn encoder_layers(&self) -> usize {
        match self.architecture {
            Architecture::Global => self.layers,
            Architecture::Pairwise => 0,
        }
    }

    /// Names and shapes of every parameter block, in store order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let mut out = vec![
            ("tokenizer.class_token".to_string(), vec![d]),
            (
                "tokenizer.class_embedding".to_string(),
                vec![self.num_object_classes, d],
            ),
        ];
        for l in 0..self.encoder_layers() {
            let p = |s: &str| format!("encoder.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, self.ffn_dim]),
                (p("ffn.b1"), vec![self.ffn_dim]),
                (p("ffn.w2"), vec![self.ffn_dim, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        let qk = self.num_predicates * self.head_dim;
        out.extend([
            ("relation.wq".to_string(), vec![d, qk]),
            ("relation.wk".to_string(), vec![d, qk]),
            ("relation.bias".to_string(), vec![self.num_predicates]),
        ]);
        out
    }
}

fn init_block<T: Scalar>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Array<T> {
    let gaussian = |std: f64, rng: &mut ChaCha8Rng| {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array::from_fn(shape, |_| T::of(dist.sample(rng)))
    };
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gain" => Array::ones(shape),
        "bias" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => Array::zeros(shape),
        "class_token" => gaussian(0.02, rng),
        "class_embedding" => gaussian(0.5, rng),
        _ => {
            let fan_in = shape[0] as f64;
            let residual = if leaf == "wo" || leaf == "w2" { 0.5 } else { 1.0 };
            gaussian(residual / fan_in.sqrt(), rng)
        }
    }
}

/// Relation predictor: tokenizer parameters, encoder and relation head.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> RelationModel<T> {
    /// Randomly initialized model, seeded by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let entries = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = init_block(&name, &shape, &mut rng);
                (name, value)
            })
            .collect();
        Ok(RelationModel {
            params: ParamStore::from_entries(entries)?,
            config,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (have, value)) in expected.iter().zip(params.entries()) {
            if name != have || shape.as_slice() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "expected {name} {shape:?}, found {have} {:?}",
                    value.shape()
                )));
            }
        }
        Ok(RelationModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn tokenizer_params(&self) -> Result<TokenizerParams<T>> {
        TokenizerParams::new(
            self.params.get("tokenizer.class_token")?.clone(),
            self.params.get("tokenizer.class_embedding")?.clone(),
            self.config.patches,
        )
    }

    /// Errors if the scene cannot be fed to this model.
    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.channels() != self.config.dim {
            return Err(Error::Incompatible(format!(
                "scene {} has {} channels, model expects {}",
                scene.scene_id,
                scene.channels(),
                self.config.dim
            )));
        }
        if let Some(&label) = scene.labels.iter().find(|&&l| l >= self.config.num_object_classes) {
            return Err(Error::Label {
                label,
                num_classes: self.config.num_object_classes,
            });
        }
        Ok(())
    }

    pub fn prepare(&self, scene: &Scene) -> Result<ObjectPatches<T>> {
        self.check_scene(scene)?;
        ObjectPatches::from_scene(scene, self.config.patches)
    }

    /// Records the `[N, N, P]` logits of one scene on `tape`.
    pub fn logits<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'_, 't, T>,
        objects: &ObjectPatches<T>,
    ) -> Result<crate::numeric::Var<'t, T>> {
        relation::logits(tape, bound, &self.config, objects)
    }

    /// Pooled object embeddings `[N, D]` (with cross-object attention only
    /// for the global architecture).
    pub fn embeddings<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'_, 't, T>,
        objects: &ObjectPatches<T>,
    ) -> Result<crate::numeric::Var<'t, T>> {
        relation::embeddings(tape, bound, &self.config, objects)
    }

    /// Forward pass without keeping gradients.
    pub fn forward(&self, objects: &ObjectPatches<T>) -> Result<RelationLogits<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = self.logits(&tape, &bound, objects)?;
        RelationLogits::new((*out.value()).clone())
    }

    pub fn forward_scene(&self, scene: &Scene) -> Result<RelationLogits<T>> {
        self.forward(&self.prepare(scene)?)
    }

    /// Pairwise-only forward for a scene; errors for the global architecture.
    pub fn pairwise_baseline_forward(&self, scene: &Scene) -> Result<RelationLogits<T>> {
        if self.config.architecture != Architecture::Pairwise {
            return Err(Error::Config("model is not the pairwise baseline".into()));
        }
        self.forward_scene(scene)
    }

    /// Pooled `[N, D]` embeddings of an already tokenized scene.
    pub fn context_embeddings(&self, grid: &TokenGrid<T>) -> Result<Array<T>> {
        global_context_forward(grid, &self.params, &self.config)
    }
}
