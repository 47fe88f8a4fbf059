//! Losses, EMA teacher, soft labels, AdamW and the two-phase schedule.

mod distill;
mod loss;
mod optim;
mod train;

use crate::error::Result;
use crate::model::{ModelConfig, RelationModel};
use crate::numeric::{grad_check, loss_fn, GradCheckOptions, GradCheckReport, Tolerance};
use crate::scene::{generate_scene, CorpusConfig, Scene};

pub use distill::{ema_update, make_soft_labels, soft_targets, LabelSource, SoftLabelTensor, TeacherState};
pub use loss::{bce_multilabel, focal_loss, loss_and_grad, relation_loss, LossKind};
pub use optim::AdamW;
pub use train::{
    scene_gradients, train, Divergence, EpochRecord, Phase2Loss, SoftLabelRefresh, TrainOutput, TrainSchedule,
};

/// Finite-difference check of every parameter block of `model` under the
/// relation loss on one scene.
pub fn model_grad_check(
    model: &RelationModel<f64>,
    scene: &Scene,
    kind: LossKind,
    tol: Tolerance,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let objects = model.prepare(scene)?;
    let targets = scene.hard_labels(model.config().num_predicates);
    let f = loss_fn(|_, vars| {
        let bound = model.params().bind_vars(vars)?;
        relation_loss(model.logits(vars[0].tape(), &bound, &objects)?, &targets, kind)
    });
    grad_check(f, model.params().entries(), tol, opts)
}

/// Tiny seeded global model and scene used by the gradient self-test.
pub fn gradcheck_fixture(seed: u64) -> Result<(RelationModel<f64>, Scene)> {
    let corpus = CorpusConfig {
        height: 8,
        width: 8,
        channels: 4,
        min_objects: 3,
        max_objects: 3,
        num_object_classes: 3,
        num_predicates: 2,
        relation_density: 1.0,
        seed,
        rule_seed: seed,
        ..CorpusConfig::default()
    };
    let scene = generate_scene(&corpus, seed)?;
    let model = RelationModel::new(ModelConfig {
        num_object_classes: 3,
        num_predicates: 2,
        dim: 4,
        patches: 4,
        layers: 2,
        heads: 2,
        ffn_dim: 8,
        head_dim: 2,
        init_seed: seed,
        ..ModelConfig::default()
    })?;
    Ok((model, scene))
}

/// The gradient self-test: focal loss through the full global model.
pub fn run_gradcheck(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, scene) = gradcheck_fixture(seed)?;
    let kind = LossKind::Focal {
        gamma: 2.0,
        balance: 0.25,
    };
    model_grad_check(&model, &scene, kind, Tolerance::NETWORK, opts)
}
