use crate::error::{Error, Result};
use crate::model::{ParamStore, RelationModel};
use crate::numeric::{sigmoid, Array};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::tokenizer::ObjectPatches;

/// Where a soft-label entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    /// Annotated triplet, pinned to 1.
    Hard,
    /// Unannotated entry lifted by a confident teacher.
    Teacher,
    /// Unannotated entry left at 0.
    Negative,
}

/// `[N, N, P]` training targets with per-entry provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelTensor<T> {
    pub targets: Array<T>,
    pub sources: Vec<LabelSource>,
}

impl<T: Scalar> SoftLabelTensor<T> {
    /// Annotations only.
    pub fn hard(scene: &Scene, num_predicates: usize) -> Self {
        let targets: Array<T> = scene.hard_labels(num_predicates).cast();
        let sources = targets
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    LabelSource::Hard
                } else {
                    LabelSource::Negative
                }
            })
            .collect();
        SoftLabelTensor { targets, sources }
    }

    pub fn count(&self, source: LabelSource) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}

/// Combines hard labels with teacher scores: an entry becomes
/// `max(hard, score)` when the score reaches `tau`; annotated entries stay 1.
pub fn soft_targets<T: Scalar>(hard: &Array<T>, scores: &Array<T>, tau: f64) -> Result<SoftLabelTensor<T>> {
    hard.expect_same_shape(scores, "soft_targets")?;
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("soft-label floor {tau} outside [0, 1)")));
    }
    let n = hard.shape()[0];
    let p = hard.shape()[2];
    let mut targets = hard.clone();
    let mut sources = vec![LabelSource::Negative; hard.len()];
    for (k, (t, &s)) in targets.data_mut().iter_mut().zip(scores.data()).enumerate() {
        let pair = k / p;
        if pair / n == pair % n {
            continue;
        }
        if *t == T::one() {
            sources[k] = LabelSource::Hard;
        } else if s.as_f64() >= tau && s > *t {
            *t = s;
            sources[k] = LabelSource::Teacher;
        }
    }
    Ok(SoftLabelTensor { targets, sources })
}

/// EMA copy of the student that only ever receives parameter averages.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub model: RelationModel<T>,
    pub alpha: f64,
}

impl<T: Scalar> TeacherState<T> {
    /// Exact copy of the student.
    pub fn from_student(student: &RelationModel<T>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA decay {alpha} outside [0, 1]")));
        }
        Ok(TeacherState {
            model: student.clone(),
            alpha,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.model.params()
    }

    /// `teacher <- teacher * alpha + student * (1 - alpha)`, elementwise.
    pub fn ema_update(&mut self, student: &ParamStore<T>) -> Result<()> {
        ema_update(self.model.params_mut(), student, self.alpha)
    }

    /// Thresholded teacher scores merged with the scene's annotations.
    pub fn soft_labels(&self, scene: &Scene, tau: f64) -> Result<SoftLabelTensor<T>> {
        let objects = self.model.prepare(scene)?;
        self.soft_labels_for(scene, &objects, tau)
    }

    pub(crate) fn soft_labels_for(
        &self,
        scene: &Scene,
        objects: &ObjectPatches<T>,
        tau: f64,
    ) -> Result<SoftLabelTensor<T>> {
        let logits = self.model.forward(objects)?;
        let scores = logits.scores.map(sigmoid);
        let hard = scene.hard_labels(self.model.config().num_predicates).cast();
        soft_targets(&hard, &scores, tau)
    }
}

pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, alpha: f64) -> Result<()> {
    teacher.check_compatible(student)?;
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for (t, (_, s)) in teacher.values_mut().zip(student.entries()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = *tv * a + sv * b;
        }
    }
    Ok(())
}

/// Labels from a teacher model, for callers that hold a bare model.
pub fn make_soft_labels<T: Scalar>(teacher: &RelationModel<T>, scene: &Scene, tau: f64) -> Result<SoftLabelTensor<T>> {
    let state = TeacherState {
        model: teacher.clone(),
        alpha: 1.0,
    };
    state.soft_labels(scene, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore<f64> {
        ParamStore::from_entries(vec![("w".into(), Array::full(&[2], v))]).unwrap()
    }

    #[test]
    fn ema_identities() {
        let mut t = one(2.0);
        ema_update(&mut t, &one(4.0), 1.0).unwrap();
        assert_eq!(t, one(2.0));
        ema_update(&mut t, &one(4.0), 0.5).unwrap();
        assert_eq!(t, one(3.0));
        ema_update(&mut t, &one(4.0), 0.0).unwrap();
        assert_eq!(t, one(4.0));
    }

    #[test]
    fn ema_rejects_mismatched_student() {
        let other = ParamStore::from_entries(vec![("w".into(), Array::full(&[3], 1.0))]).unwrap();
        assert!(ema_update(&mut one(0.0), &other, 0.5).is_err());
    }

    #[test]
    fn low_scores_leave_hard_labels_and_hard_labels_stay_pinned() {
        let mut hard = Array::zeros(&[2, 2, 2]);
        hard.set(&[0, 1, 0], 1.0);
        let mut scores = Array::full(&[2, 2, 2], 0.3);
        let soft = soft_targets(&hard, &scores, 0.5).unwrap();
        assert_eq!(soft.targets, hard);
        assert_eq!(soft.count(LabelSource::Hard), 1);
        assert_eq!(soft.count(LabelSource::Teacher), 0);

        scores.set(&[1, 0, 1], 0.8);
        scores.set(&[1, 1, 1], 0.9); // diagonal: never a target
        let soft = soft_targets(&hard, &scores, 0.5).unwrap();
        assert_eq!(soft.targets.get(&[1, 0, 1]), 0.8);
        assert_eq!(soft.targets.get(&[1, 1, 1]), 0.0);
        assert_eq!(soft.targets.get(&[0, 1, 0]), 1.0);
        assert_eq!(soft.sources[soft.targets.offset(&[1, 0, 1])], LabelSource::Teacher);
    }

    #[test]
    fn tau_must_lie_below_one() {
        let z = Array::<f64>::zeros(&[2, 2, 1]);
        assert!(soft_targets(&z, &z, 1.0).is_err());
        assert!(soft_targets(&z, &z, -0.1).is_err());
    }
}
