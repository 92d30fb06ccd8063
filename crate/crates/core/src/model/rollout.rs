use super::{DualSight, TokenSequence};
use crate::classifier::FrozenClassifier;
use crate::data::PatientState;
use crate::error::{Error, Result};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub actions: Vec<usize>,
    /// Predicted state after each action.
    pub states: Vec<PatientState>,
    /// Survival probability of each predicted state, when a classifier was given.
    pub survival: Option<Vec<f32>>,
}

/// Autoregressive rollout: greedy action, then the model's own predicted
/// next state becomes the next input. The return token stays at
/// `target_return` throughout.
pub fn rollout(
    model: &DualSight,
    initial_state: &[f32],
    target_return: f32,
    horizon: usize,
    mc: Option<&FrozenClassifier>,
) -> Result<Rollout> {
    let mut out = rollout_batch(model, &[initial_state.to_vec()], target_return, horizon, mc)?;
    Ok(out.remove(0))
}

/// [`rollout`] for many initial states at once; each rollout is independent.
pub fn rollout_batch(
    model: &DualSight,
    initial_states: &[PatientState],
    target_return: f32,
    horizon: usize,
    mc: Option<&FrozenClassifier>,
) -> Result<Vec<Rollout>> {
    let d = model.config().state_dim;
    if let Some(s) = initial_states.iter().find(|s| s.len() != d) {
        return Err(Error::shape("rollout", &[d], &[s.len()]));
    }
    let k = model.config().context_length;
    let n = initial_states.len();
    let mut states: Vec<Vec<PatientState>> = initial_states.iter().map(|s| vec![s.clone()]).collect();
    let mut actions: Vec<Vec<usize>> = vec![Vec::with_capacity(horizon); n];
    for step in 0..horizon {
        let mut windows = Vec::with_capacity(n);
        for (s, a) in states.iter().zip(actions.iter_mut()) {
            a.push(0);
            let returns = vec![target_return; s.len()];
            windows.push(TokenSequence::from_history(&returns, s, a, 0, k)?);
        }
        if windows.is_empty() {
            break;
        }
        for (i, (a, next)) in model.act_and_predict(&windows)?.into_iter().enumerate() {
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!(
                    "rollout {i} produced a non-finite state at step {step}"
                )));
            }
            *actions[i].last_mut().expect("pushed") = a;
            states[i].push(next);
        }
    }
    let mut out = Vec::with_capacity(n);
    for (mut s, a) in states.into_iter().zip(actions) {
        s.remove(0);
        let survival = match mc {
            Some(mc) => Some(mc.predict(&s)?),
            None => None,
        };
        out.push(Rollout {
            actions: a,
            states: s,
            survival,
        });
    }
    Ok(out)
}
