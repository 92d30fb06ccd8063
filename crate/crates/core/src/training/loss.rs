use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::classifier::MortalityClassifier;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the negative-trajectory action term.
    pub eta: f64,
    /// Per-position cap on negative-trajectory cross-entropy.
    pub neg_ce_cap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            eta: -0.5,
            neg_ce_cap: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !self.eta.is_finite() {
            return Err(Error::config("eta must be finite"));
        }
        if !(self.neg_ce_cap > 0.0) {
            return Err(Error::config("neg_ce_cap must be positive"));
        }
        Ok(())
    }

    /// `α·action + β·state + γ·survival`, in the same order as [`loss_total`].
    pub fn combine(&self, action: f64, state: f64, survival: f64) -> f64 {
        self.alpha * action + self.beta * state + self.gamma * survival
    }
}

fn zero<T: Scalar>(g: &mut Graph<'_, T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Mean squared error over the rows where `mask` is set.
pub fn loss_state<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
    let (shape_p, shape_t) = (g.value(pred).shape().to_vec(), g.value(target).shape().to_vec());
    if shape_p != shape_t || g.value(pred).rows() != mask.len() {
        return Err(Error::shape("loss_state", &shape_p, &shape_t));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::contract("state loss over an all-masked batch"));
    }
    let d = g.value(pred).cols();
    let w = T::of(1.0 / (n * d) as f64);
    let weights = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { w } else { T::zero() }, d))
        .collect();
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    g.weighted_sum(sq, weights)
}

/// Positive rows: plain mean cross-entropy. Negative rows: cross-entropy
/// capped at `neg_ce_cap`, averaged, scaled by `eta`. Rows outside `mask`
/// are ignored.
pub fn loss_action_posneg<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    positive: &[bool],
    mask: &[bool],
    weights: &LossWeights,
) -> Result<Var> {
    let rows = g.value(logits).rows();
    if positive.len() != rows || mask.len() != rows {
        return Err(Error::shape("loss_action", &[rows], &[positive.len(), mask.len()]));
    }
    let ce = g.cross_entropy_rows(logits, targets)?;
    let n_pos = positive.iter().zip(mask).filter(|(&p, &m)| p && m).count();
    let n_neg = positive.iter().zip(mask).filter(|(&p, &m)| !p && m).count();
    let mut total = None;
    if n_pos > 0 {
        let w = T::of(1.0 / n_pos as f64);
        let wv = positive.iter().zip(mask).map(|(&p, &m)| if p && m { w } else { T::zero() }).collect();
        total = Some(g.weighted_sum(ce, wv)?);
    }
    if n_neg > 0 && weights.eta != 0.0 {
        let capped = g.clamp_max(ce, T::of(weights.neg_ce_cap));
        let w = T::of(weights.eta / n_neg as f64);
        let wv = positive.iter().zip(mask).map(|(&p, &m)| if !p && m { w } else { T::zero() }).collect();
        let neg = g.weighted_sum(capped, wv)?;
        total = Some(match total {
            Some(pos) => g.add(pos, neg)?,
            None => neg,
        });
    }
    Ok(total.unwrap_or_else(|| zero(g)))
}

/// `-mean log mc(ŝ)` over masked rows. Gradients reach `pred_states` but
/// never the classifier, which must be frozen.
pub fn loss_survival<T: Scalar>(
    g: &mut Graph<'_, T>,
    mc: &MortalityClassifier,
    pred_states: Var,
    mask: &[bool],
) -> Result<Var> {
    if !mc.is_frozen() {
        return Err(Error::contract("survival loss requires a frozen mortality classifier"));
    }
    if g.value(pred_states).rows() != mask.len() {
        return Err(Error::shape("loss_survival", g.value(pred_states).shape(), &[mask.len()]));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::contract("survival loss over an all-masked batch"));
    }
    let vars = mc.bind(g, false)?;
    let z = mc.logits(g, &vars, pred_states)?;
    let ll = g.log_sigmoid(z);
    let w = T::of(-1.0 / n as f64);
    g.weighted_sum(ll, mask.iter().map(|&m| if m { w } else { T::zero() }).collect())
}

/// `α·l_action + β·l_state + γ·l_survival`.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<'_, T>,
    l_action: Var,
    l_state: Var,
    l_survival: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let a = g.scale(l_action, T::of(weights.alpha));
    let s = g.scale(l_state, T::of(weights.beta));
    let v = g.scale(l_survival, T::of(weights.gamma));
    let as_ = g.add(a, s)?;
    g.add(as_, v)
}
