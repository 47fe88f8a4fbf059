use super::{Bound, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{RankedTriplet, ScenePrediction};
use crate::numeric::{sigmoid, Array, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::tokenizer::{token_sequence, ObjectPatches, TokenGrid};

/// Dense `[N, N, P]` predicate logits for ordered (subject, object) pairs.
/// Diagonal entries exist but are never scored or ranked.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationLogits<T> {
    pub scores: Array<T>,
}

impl<T: Scalar> RelationLogits<T> {
    pub fn new(scores: Array<T>) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::Shape {
                op: "relation logits",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok(RelationLogits { scores })
    }

    pub fn num_objects(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn num_predicates(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn get(&self, subject: usize, object: usize, predicate: usize) -> T {
        self.scores.get(&[subject, object, predicate])
    }

    /// Logits of one ordered pair.
    pub fn pair(&self, subject: usize, object: usize) -> &[T] {
        let p = self.num_predicates();
        let at = (subject * self.num_objects() + object) * p;
        &self.scores.data()[at..at + p]
    }
}

fn encoder_layer<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'_, 't, T>,
    config: &ModelConfig,
    layer: usize,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let p = |s: &str| bound.get(&format!("encoder.{layer}.{s}"));
    let eps = T::of(config.layer_norm_eps);
    let heads = config.heads;
    let head_width = config.dim / heads;
    let scale = T::one() / T::of(head_width as f64).sqrt();

    let h = x.layer_norm(p("ln1.gain")?, p("ln1.bias")?, eps)?;
    let q = h.matmul(p("attn.wq")?)?.add_row(p("attn.bq")?)?;
    let k = h.matmul(p("attn.wk")?)?.add_row(p("attn.bk")?)?;
    let v = h.matmul(p("attn.wv")?)?.add_row(p("attn.bv")?)?;
    let mut outputs = Vec::with_capacity(heads);
    for a in 0..heads {
        let qa = q.slice_cols(a * head_width, head_width)?;
        let ka = k.slice_cols(a * head_width, head_width)?;
        let va = v.slice_cols(a * head_width, head_width)?;
        let attn = qa.matmul(ka.transpose()?)?.scale(scale).softmax(1)?;
        outputs.push(attn.matmul(va)?);
    }
    let mixed = tape
        .concat_cols(&outputs)?
        .matmul(p("attn.wo")?)?
        .add_row(p("attn.bo")?)?;
    let x = x.add(mixed)?;

    let h = x.layer_norm(p("ln2.gain")?, p("ln2.bias")?, eps)?;
    let ff = h
        .matmul(p("ffn.w1")?)?
        .add_row(p("ffn.b1")?)?
        .gelu()
        .matmul(p("ffn.w2")?)?
        .add_row(p("ffn.b2")?)?;
    x.add(ff)
}

/// Runs the encoder over a `[N (L + 1), D]` token sequence and mean-pools
/// each object's `L + 1` outputs into `[N, D]`.
fn encode_and_pool<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'_, 't, T>,
    config: &ModelConfig,
    sequence: Var<'t, T>,
    tokens_per_object: usize,
) -> Result<Var<'t, T>> {
    let mut x = sequence;
    for layer in 0..config.encoder_layers() {
        x = encoder_layer(tape, bound, config, layer, x)?;
    }
    x.group_mean_rows(tokens_per_object)
}

pub(super) fn embeddings<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'_, 't, T>,
    config: &ModelConfig,
    objects: &ObjectPatches<T>,
) -> Result<Var<'t, T>> {
    if objects.num_patches() != config.patches || objects.dim() != config.dim {
        return Err(Error::Incompatible(format!(
            "scene tokens are {}x{}, model expects {}x{}",
            objects.num_patches(),
            objects.dim(),
            config.patches,
            config.dim
        )));
    }
    let seq = token_sequence(
        tape,
        objects,
        bound.get("tokenizer.class_token")?,
        bound.get("tokenizer.class_embedding")?,
    )?;
    encode_and_pool(tape, bound, config, seq, config.patches + 1)
}

/// Per-predicate bilinear scores: `(Q_p e_i) · (K_p e_j) / sqrt(d_k) + b_p`.
fn head<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'_, 't, T>,
    config: &ModelConfig,
    embeddings: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let dk = config.head_dim;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let q = embeddings.matmul(bound.get("relation.wq")?)?;
    let k = embeddings.matmul(bound.get("relation.wk")?)?;
    let mut per_predicate = Vec::with_capacity(config.num_predicates);
    for p in 0..config.num_predicates {
        let qp = q.slice_cols(p * dk, dk)?;
        let kp = k.slice_cols(p * dk, dk)?;
        per_predicate.push(qp.matmul(kp.transpose()?)?.scale(scale));
    }
    tape.stack_last(&per_predicate)?.add_row(bound.get("relation.bias")?)
}

pub(super) fn logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'_, 't, T>,
    config: &ModelConfig,
    objects: &ObjectPatches<T>,
) -> Result<Var<'t, T>> {
    let e = embeddings(tape, bound, config, objects)?;
    head(tape, bound, config, e)
}

/// Encoder plus per-object pooling over an already tokenized scene.
pub fn global_context_forward<T: Scalar>(
    grid: &TokenGrid<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
) -> Result<Array<T>> {
    if grid.dim() != config.dim {
        return Err(Error::Shape {
            op: "global_context_forward",
            lhs: grid.tokens.shape().to_vec(),
            rhs: vec![config.dim],
        });
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let seq = tape.leaf(grid.sequence());
    let out = encode_and_pool(&tape, &bound, config, seq, grid.tokens_per_object())?;
    let value = (*out.value()).clone();
    Ok(value)
}

/// Relation head over `[N, D]` embeddings. Fewer than two objects yield
/// logits with no off-diagonal pairs.
pub fn relation_head<T: Scalar>(
    embeddings: &Array<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
) -> Result<RelationLogits<T>> {
    let (n, d) = embeddings.dims2("relation_head")?;
    if d != config.dim {
        return Err(Error::Shape {
            op: "relation_head",
            lhs: embeddings.shape().to_vec(),
            rhs: vec![config.dim],
        });
    }
    if n < 2 {
        return RelationLogits::new(Array::zeros(&[n, n, config.num_predicates]));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let e = tape.leaf(embeddings.clone());
    let out = head(&tape, &bound, config, e)?;
    let value = (*out.value()).clone();
    RelationLogits::new(value)
}

/// Top-`k` off-diagonal (subject, object, predicate) candidates ranked by
/// sigmoid score, ties broken by ascending `(subject, object, predicate)`.
pub fn predict_triplets<T: Scalar>(logits: &RelationLogits<T>, scene: &Scene, k: usize) -> Result<ScenePrediction> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let n = logits.num_objects();
    if n != scene.num_objects() {
        return Err(Error::Incompatible(format!(
            "logits cover {n} objects, scene {} has {}",
            scene.scene_id,
            scene.num_objects()
        )));
    }
    let np = logits.num_predicates();
    let mut candidates = Vec::with_capacity(n * n.saturating_sub(1) * np);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            for (p, &x) in logits.pair(i, j).iter().enumerate() {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("logit ({i}, {j}, {p}) is {x}")));
                }
                candidates.push(RankedTriplet {
                    subject: i,
                    object: j,
                    predicate: p,
                    score: sigmoid(x),
                });
            }
        }
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key().cmp(&b.key())));
    candidates.truncate(k);
    Ok(ScenePrediction {
        scene_id: scene.scene_id.clone(),
        masks: scene.masks.clone(),
        labels: scene.labels.clone(),
        triplets: candidates,
    })
}
