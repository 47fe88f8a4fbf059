//! Mask-gated object features turned into per-object token sequences.
//!
//! For object `i` the feature map is zeroed outside `m_i`, flattened in
//! row-major pixel order and cut into `L` contiguous chunks; each chunk is
//! averaged into one token. A learnable class token is prepended and the
//! object's class embedding is added to all `L + 1` tokens. Tokens stay in the
//! feature channel space (no projection), so the hidden size equals `C`.

use crate::error::{Error, Result};
use crate::numeric::{Array, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::{BinaryMask, Scene};

/// `f · m`: keeps `f[h, w, :]` where the mask is set and zeroes the rest.
pub fn mask_gate<T: Scalar>(features: &Array<T>, mask: &BinaryMask) -> Result<Array<T>> {
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != mask.height() || shape[1] != mask.width() {
        return Err(Error::Shape {
            op: "mask_gate",
            lhs: shape.to_vec(),
            rhs: vec![mask.height(), mask.width()],
        });
    }
    let c = shape[2];
    let mut out = features.clone();
    for (px, &on) in mask.bits().iter().enumerate() {
        if !on {
            out.data_mut()[px * c..(px + 1) * c].fill(T::zero());
        }
    }
    Ok(out)
}

/// Average-pools `L` contiguous chunks of the flattened `[H, W, C]` map into `[L, C]`.
pub fn patchify<T: Scalar>(gated: &Array<T>, patches: usize) -> Result<Array<T>> {
    let shape = gated.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: shape.to_vec(),
            rhs: vec![patches],
        });
    }
    let (pixels, c) = (shape[0] * shape[1], shape[2]);
    check_divisible(shape[0], shape[1], patches)?;
    let chunk = pixels / patches;
    let inv = T::one() / T::of(chunk as f64);
    let mut out = Array::zeros(&[patches, c]);
    for px in 0..pixels {
        let l = px / chunk;
        for ch in 0..c {
            out.data_mut()[l * c + ch] += gated.data()[px * c + ch];
        }
    }
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

fn check_divisible(height: usize, width: usize, patches: usize) -> Result<()> {
    if patches == 0 || !(height * width).is_multiple_of(patches) {
        return Err(Error::Config(format!(
            "{height}x{width} pixels do not split into {patches} equal patches"
        )));
    }
    Ok(())
}

/// Patch tokens of every object, `[N, L, C]`. Independent of learnable
/// parameters, so it can be computed once per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPatches<T> {
    pub patches: Array<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ObjectPatches<T> {
    pub fn from_scene(scene: &Scene, patches: usize) -> Result<Self> {
        check_divisible(scene.height(), scene.width(), patches)?;
        let features: Array<T> = scene.features.cast();
        let c = scene.channels();
        let mut data = Vec::with_capacity(scene.num_objects() * patches * c);
        for mask in &scene.masks {
            let gated = mask_gate(&features, mask)?;
            data.extend_from_slice(patchify(&gated, patches)?.data());
        }
        Ok(ObjectPatches {
            patches: Array::new(vec![scene.num_objects(), patches, c], data)?,
            labels: scene.labels.clone(),
        })
    }

    pub fn num_objects(&self) -> usize {
        self.labels.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[2]
    }

    fn object(&self, i: usize) -> Array<T> {
        let (l, d) = (self.num_patches(), self.dim());
        Array::new(vec![l, d], self.patches.data()[i * l * d..(i + 1) * l * d].to_vec())
            .expect("slice matches patch block")
    }
}

/// Learnable tokenizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams<T> {
    /// `[D]`
    pub class_token: Array<T>,
    /// `[num_object_classes, D]`
    pub class_embedding: Array<T>,
    pub patches: usize,
}

impl<T: Scalar> TokenizerParams<T> {
    pub fn new(class_token: Array<T>, class_embedding: Array<T>, patches: usize) -> Result<Self> {
        let d = class_token.len();
        if class_token.ndim() != 1 || class_embedding.ndim() != 2 || class_embedding.shape()[1] != d {
            return Err(Error::Shape {
                op: "tokenizer params",
                lhs: class_token.shape().to_vec(),
                rhs: class_embedding.shape().to_vec(),
            });
        }
        if patches == 0 {
            return Err(Error::Config("patch count must be positive".into()));
        }
        Ok(TokenizerParams {
            class_token,
            class_embedding,
            patches,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_token.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_embedding.shape()[0]
    }
}

/// `[N, L + 1, D]` tokens; slot 0 of every object is its class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Array<T>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn num_objects(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_object(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Flattened `[N (L + 1), D]` sequence.
    pub fn sequence(&self) -> Array<T> {
        let s = self.tokens.shape();
        self.tokens.clone().reshape(&[s[0] * s[1], s[2]]).expect("same length")
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(Error::Label { label, num_classes }),
        None => Ok(()),
    }
}

/// Tokenizes a scene outside of any tape.
pub fn tokenize_scene<T: Scalar>(scene: &Scene, params: &TokenizerParams<T>) -> Result<TokenGrid<T>> {
    check_labels(&scene.labels, params.num_classes())?;
    let objects = ObjectPatches::from_scene(scene, params.patches)?;
    if objects.dim() != params.dim() {
        return Err(Error::Shape {
            op: "tokenize_scene",
            lhs: vec![objects.dim()],
            rhs: vec![params.dim()],
        });
    }
    let tape = Tape::new();
    let ct = tape.leaf(params.class_token.clone());
    let emb = tape.leaf(params.class_embedding.clone());
    let seq = token_sequence(&tape, &objects, ct, emb)?;
    let (n, l, d) = (objects.num_objects(), objects.num_patches(), objects.dim());
    Ok(TokenGrid {
        tokens: (*seq.value()).clone().reshape(&[n, l + 1, d])?,
    })
}

/// Records the `[N (L + 1), D]` token sequence on a tape, differentiable in
/// the class token and class embedding table.
pub fn token_sequence<'t, T: Scalar>(
    tape: &'t Tape<T>,
    objects: &ObjectPatches<T>,
    class_token: Var<'t, T>,
    class_embedding: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let num_classes = class_embedding.shape()[0];
    check_labels(&objects.labels, num_classes)?;
    let n = objects.num_objects();
    let l = objects.num_patches();
    if n == 0 {
        return Err(Error::Contract("scene has no objects".into()));
    }
    let class_row = class_token.gather_rows(&[0])?;
    let mut rows = Vec::with_capacity(2 * n);
    for i in 0..n {
        rows.push(class_row);
        rows.push(tape.leaf(objects.object(i)));
    }
    let base = tape.concat_rows(&rows)?;
    let per_token: Vec<usize> = objects
        .labels
        .iter()
        .flat_map(|&label| std::iter::repeat_n(label, l + 1))
        .collect();
    base.add(class_embedding.gather_rows(&per_token)?)
}
