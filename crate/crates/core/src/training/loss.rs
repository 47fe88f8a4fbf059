use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, Array, Var};
use crate::scalar::Scalar;

/// Per-entry relation loss over `[N, N, P]` logits, mean-reduced over the
/// off-diagonal entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    /// Binary focal loss. `balance` weights the positive branch; the
    /// negative branch has weight 1, so `gamma = 0, balance = 1` is plain BCE.
    Focal {
        gamma: f64,
        balance: f64,
    },
    Bce,
}

impl LossKind {
    pub(crate) fn validate(&self) -> Result<()> {
        if let LossKind::Focal { gamma, balance } = *self {
            if !(gamma >= 0.0 && gamma.is_finite()) || !(balance >= 0.0 && balance.is_finite()) {
                return Err(Error::Config(format!(
                    "focal gamma {gamma} / balance {balance} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Loss and d loss / d logit for one entry with target `y` in [0, 1].
    fn entry(&self, x: f64, y: f64) -> (f64, f64) {
        // log p = -softplus(-x), log(1 - p) = -softplus(x)
        let log_p = -softplus(-x);
        let log_q = -softplus(x);
        let p = sigmoid(x);
        let q = sigmoid(-x);
        match *self {
            LossKind::Bce => (softplus(x) - y * x, p - y),
            LossKind::Focal { gamma, balance } => {
                let pos = q.powf(gamma) * log_p;
                let neg = p.powf(gamma) * log_q;
                let d_pos = q.powf(gamma) * (q - gamma * p * log_p);
                let d_neg = p.powf(gamma) * (gamma * q * log_q - p);
                let loss = -(y * balance * pos + (1.0 - y) * neg);
                let grad = -(y * balance * d_pos + (1.0 - y) * d_neg);
                (loss, grad)
            }
        }
    }
}

fn check_pair_tensor<T: Scalar>(logits: &Array<T>, targets: &Array<T>) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != s[1] || targets.shape() != s {
        return Err(Error::Shape {
            op: "relation loss",
            lhs: s.to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    if let Some(at) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "logit at flat index {at} is {}",
            logits.data()[at]
        )));
    }
    if let Some(&bad) = targets.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Contract(format!("target {bad} outside [0, 1]")));
    }
    Ok(s[0])
}

/// Mean loss over off-diagonal entries and its gradient with respect to the logits.
pub fn loss_and_grad<T: Scalar>(logits: &Array<T>, targets: &Array<T>, kind: LossKind) -> Result<(T, Array<T>)> {
    kind.validate()?;
    let n = check_pair_tensor(logits, targets)?;
    let p = logits.shape()[2];
    let count = n * n.saturating_sub(1) * p;
    let mut grad = Array::zeros(logits.shape());
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let (x, y) = (logits.data(), targets.data());
    let g = grad.data_mut();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let base = (i * n + j) * p;
            for k in base..base + p {
                let (l, d) = kind.entry(x[k].as_f64(), y[k].as_f64());
                total += l;
                g[k] = T::of(d * inv);
            }
        }
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    Ok((T::of(loss), grad))
}

/// Focal loss of `[N, N, P]` logits against soft or hard targets.
pub fn focal_loss<T: Scalar>(logits: &Array<T>, targets: &Array<T>, gamma: f64, balance: f64) -> Result<T> {
    Ok(loss_and_grad(logits, targets, LossKind::Focal { gamma, balance })?.0)
}

/// Sigmoid binary cross-entropy, in the stable `softplus(x) - y x` form.
pub fn bce_multilabel<T: Scalar>(logits: &Array<T>, targets: &Array<T>) -> Result<T> {
    Ok(loss_and_grad(logits, targets, LossKind::Bce)?.0)
}

/// Records the loss of `logits` on their tape.
pub fn relation_loss<'t, T: Scalar>(logits: Var<'t, T>, targets: &Array<T>, kind: LossKind) -> Result<Var<'t, T>> {
    let (loss, grad) = loss_and_grad(&logits.value(), targets, kind)?;
    logits
        .tape()
        .custom(&[logits], Array::scalar(loss), move |up| vec![grad.scale(up.data()[0])])
}
