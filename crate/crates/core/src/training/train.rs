use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distill::{SoftLabelTensor, TeacherState};
use super::loss::{relation_loss, LossKind};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::RelationModel;
use crate::numeric::{Array, Tape};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::tokenizer::ObjectPatches;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase2Loss {
    Focal,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftLabelRefresh {
    /// Soft labels are recomputed from the current teacher for every batch.
    PerStep,
    /// Soft labels are computed once at the start of each epoch.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Epochs on annotations only.
    pub phase1_epochs: usize,
    /// Epochs on teacher soft labels.
    pub phase2_epochs: usize,
    pub ema_decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Zero-based epochs from which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub gamma: f64,
    pub balance: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub phase2_loss: Phase2Loss,
    pub refresh: SoftLabelRefresh,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phase1_epochs: 10,
            phase2_epochs: 5,
            ema_decay: 0.999,
            lr: 1e-4,
            weight_decay: 0.05,
            lr_milestones: vec![6, 10],
            lr_decay: 0.1,
            gamma: 2.0,
            balance: 0.25,
            tau: 0.5,
            batch_size: 8,
            seed: 0,
            phase2_loss: Phase2Loss::Focal,
            refresh: SoftLabelRefresh::PerStep,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!("EMA decay {} outside [0, 1]", self.ema_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr decay factor {} outside (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return fail(format!("soft-label floor {} outside [0, 1)", self.tau));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        self.phase1_loss().validate()?;
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    pub fn phase1_loss(&self) -> LossKind {
        LossKind::Focal {
            gamma: self.gamma,
            balance: self.balance,
        }
    }

    pub fn phase2_loss(&self) -> LossKind {
        match self.phase2_loss {
            Phase2Loss::Focal => self.phase1_loss(),
            Phase2Loss::Bce => LossKind::Bce,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

pub struct TrainOutput<T> {
    /// The student. After a divergence this is the last finite state.
    pub model: RelationModel<T>,
    pub teacher: Option<TeacherState<T>>,
    pub log: Vec<EpochRecord>,
    pub diverged: Option<Divergence>,
}

/// Loss and parameter gradients (store order) of one scene.
pub fn scene_gradients<T: Scalar>(
    model: &RelationModel<T>,
    objects: &ObjectPatches<T>,
    targets: &Array<T>,
    kind: LossKind,
) -> Result<(T, Vec<Array<T>>)> {
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let logits = model.logits(&tape, &bound, objects)?;
    let loss = relation_loss(logits, targets, kind)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item()?, bound.gradients(&grads)))
}

enum Step {
    Done(f64),
    Diverged(String),
}

struct Trainer<'a, T> {
    scenes: &'a [Scene],
    objects: Vec<ObjectPatches<T>>,
    hard: Vec<Array<T>>,
    schedule: &'a TrainSchedule,
    model: RelationModel<T>,
    optimizer: AdamW,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.schedule.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on a batch. Per-scene work runs in parallel; the
    /// reduction is in batch order so results do not depend on scheduling.
    fn step(&mut self, batch: &[usize], targets: &[Option<&Array<T>>], kind: LossKind, lr: f64) -> Result<Step> {
        let model = &self.model;
        let results: Vec<Result<(T, Vec<Array<T>>)>> = batch
            .par_iter()
            .zip(targets.par_iter())
            .map(|(&k, t)| scene_gradients(model, &self.objects[k], t.unwrap_or(&self.hard[k]), kind))
            .collect();
        let mut total = 0.0;
        let mut sum: Option<Vec<Array<T>>> = None;
        for r in results {
            let (loss, grads) = match r {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => return Ok(Step::Diverged(msg)),
                Err(e) => return Err(e),
            };
            total += loss.as_f64();
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.accumulate(g)?;
                    }
                }
            }
        }
        let scale = T::of(1.0 / batch.len() as f64);
        let grads: Vec<Array<T>> = sum.unwrap_or_default().iter().map(|g| g.scale(scale)).collect();
        if !grads.iter().all(Array::all_finite) {
            return Ok(Step::Diverged("non-finite gradient".into()));
        }
        let before = self.model.params().clone();
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        if !self.model.params().entries().iter().all(|(_, p)| p.all_finite()) {
            *self.model.params_mut() = before;
            return Ok(Step::Diverged("non-finite parameter after update".into()));
        }
        Ok(Step::Done(total / batch.len() as f64))
    }
}

/// Two-phase training: focal loss on annotations, then, with the teacher set
/// to an exact copy of the student, soft-label finetuning with an EMA teacher.
/// Deterministic for a fixed schedule seed regardless of thread count.
pub fn train<T: Scalar>(scenes: &[Scene], model: RelationModel<T>, schedule: &TrainSchedule) -> Result<TrainOutput<T>> {
    schedule.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let num_predicates = model.config().num_predicates;
    let objects = scenes.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    for s in scenes {
        s.graph.validate(s.num_objects(), Some(num_predicates))?;
    }
    let hard = scenes.iter().map(|s| s.hard_labels(num_predicates).cast()).collect();
    let mut trainer = Trainer {
        scenes,
        objects,
        hard,
        schedule,
        model,
        optimizer: AdamW::new(schedule.weight_decay),
    };
    let mut log = Vec::with_capacity(schedule.total_epochs());
    let mut teacher: Option<TeacherState<T>> = None;
    let bs = schedule.batch_size;

    for epoch in 0..schedule.total_epochs() {
        let phase = if epoch < schedule.phase1_epochs { 1 } else { 2 };
        if phase == 2 && teacher.is_none() {
            teacher = Some(TeacherState::from_student(&trainer.model, schedule.ema_decay)?);
        }
        let lr = schedule.lr_at(epoch);
        let order = trainer.order(epoch);
        let cached: Option<Vec<SoftLabelTensor<T>>> = match (&teacher, schedule.refresh) {
            (Some(t), SoftLabelRefresh::PerEpoch) => Some(soft_labels(t, &trainer, &order, schedule.tau)?),
            _ => None,
        };
        let kind = if phase == 1 {
            schedule.phase1_loss()
        } else {
            schedule.phase2_loss()
        };
        let mut losses = Vec::with_capacity(order.len().div_ceil(bs));
        for (step, batch) in order.chunks(bs).enumerate() {
            let fresh = match (&teacher, &cached) {
                (Some(t), None) => Some(soft_labels(t, &trainer, batch, schedule.tau)?),
                _ => None,
            };
            let labels: Vec<Option<&Array<T>>> = match (&fresh, &cached) {
                (Some(f), _) => f.iter().map(|s| Some(&s.targets)).collect(),
                (None, Some(c)) => {
                    let start = step * bs;
                    c[start..start + batch.len()].iter().map(|s| Some(&s.targets)).collect()
                }
                (None, None) => vec![None; batch.len()],
            };
            match trainer.step(batch, &labels, kind, lr)? {
                Step::Done(loss) => losses.push(loss),
                Step::Diverged(reason) => {
                    return Ok(TrainOutput {
                        model: trainer.model,
                        teacher,
                        log,
                        diverged: Some(Divergence { epoch, step, reason }),
                    });
                }
            }
            if let Some(t) = &mut teacher {
                t.ema_update(trainer.model.params())?;
            }
        }
        // Each step's loss is a batch mean, so weight by batch size.
        let weighted: f64 = order.chunks(bs).zip(&losses).map(|(b, l)| l * b.len() as f64).sum();
        log.push(EpochRecord {
            epoch,
            phase,
            mean_loss: weighted / order.len() as f64,
            lr,
        });
    }
    Ok(TrainOutput {
        model: trainer.model,
        teacher,
        log,
        diverged: None,
    })
}

fn soft_labels<T: Scalar>(
    teacher: &TeacherState<T>,
    trainer: &Trainer<'_, T>,
    indices: &[usize],
    tau: f64,
) -> Result<Vec<SoftLabelTensor<T>>> {
    indices
        .par_iter()
        .map(|&k| teacher.soft_labels_for(&trainer.scenes[k], &trainer.objects[k], tau))
        .collect()
}
