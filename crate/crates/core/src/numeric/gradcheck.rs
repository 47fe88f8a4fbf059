//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    /// Finite-difference step.
    pub step: f64,
}

impl Tolerance {
    pub const PRIMITIVE: Tolerance = Tolerance {
        rtol: 1e-4,
        atol: 1e-7,
        step: 1e-5,
    };
    pub const NETWORK: Tolerance = Tolerance {
        rtol: 1e-3,
        atol: 1e-6,
        step: 1e-5,
    };

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol + self.rtol * analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Multiplies analytic gradients by `1 + corrupt` before comparing.
    /// Only useful as a negative control.
    pub corrupt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: Tolerance,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    /// Failing blocks, worst relative error first.
    pub fn worst_offenders(&self) -> Vec<&BlockReport> {
        let mut failing: Vec<_> = self.blocks.iter().filter(|b| !b.passed).collect();
        failing.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        failing
    }
}

/// Pins a closure to the higher-ranked signature [`grad_check`] expects, which
/// closure inference cannot work out on its own.
pub fn loss_fn<T, F>(f: F) -> F
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    f
}

fn evaluate<T, F>(f: &F, params: &[(String, Array<T>)]) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|(_, a)| tape.leaf(a.clone())).collect();
    f(&tape, &vars)?.value().item()
}

/// Compares the tape gradient of the scalar function `f` with central
/// differences for every element of every named parameter block.
///
/// `f` is evaluated twice at the base point first; differing results are
/// reported as [`Error::NonDeterministic`].
pub fn grad_check<T, F>(
    f: F,
    params: &[(String, Array<T>)],
    tolerance: Tolerance,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(Error::NonDeterministic(format!(
            "base evaluation gave {first} then {second}"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|(_, a)| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let scale = 1.0 + options.corrupt.unwrap_or(0.0);

    let h = T::of(tolerance.step);
    let mut work: Vec<(String, Array<T>)> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for (b, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut report = BlockReport {
            name: params[b].0.clone(),
            len: analytic.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            passed: true,
        };
        let mut worst_score = f64::NEG_INFINITY;
        for k in 0..analytic.len() {
            let original = work[b].1.data()[k];
            work[b].1.data_mut()[k] = original + h;
            let plus = evaluate(&f, &work)?;
            work[b].1.data_mut()[k] = original - h;
            let minus = evaluate(&f, &work)?;
            work[b].1.data_mut()[k] = original;

            let numeric = (plus - minus).as_f64() / (2.0 * tolerance.step);
            let a = analytic.data()[k].as_f64() * scale;
            let abs_err = (a - numeric).abs();
            let magnitude = a.abs().max(numeric.abs());
            let rel_err = if magnitude > 0.0 { abs_err / magnitude } else { 0.0 };
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if !tolerance.accepts(a, numeric) {
                report.passed = false;
            }
            // Worst element: largest excess over the allowed error.
            let score = abs_err - (tolerance.atol + tolerance.rtol * magnitude);
            if score > worst_score {
                worst_score = score;
                report.worst_index = k;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        blocks.push(report);
    }
    Ok(GradCheckReport { tolerance, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl<'t>(_: &'t Tape<f64>, p: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        Ok(p[0].mul(p[0])?.sum())
    }

    fn params() -> Vec<(String, Array<f64>)> {
        vec![("w".to_string(), Array::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap())]
    }

    #[test]
    fn quadratic_bowl_passes() {
        let r = grad_check(bowl, &params(), Tolerance::PRIMITIVE, &Default::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.blocks.len(), 1);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradCheckOptions { corrupt: Some(0.1) };
        let r = grad_check(bowl, &params(), Tolerance::PRIMITIVE, &opts).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_offenders().len(), 1);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let f = loss_fn(|_, p: &[Var<'_, f64>]| {
            calls.set(calls.get() + 1);
            Ok(p[0].sum().scale(calls.get() as f64))
        });
        let err = grad_check(f, &params(), Tolerance::PRIMITIVE, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }
}
