use crate::data::{PatientState, Trajectory};
use crate::error::{Error, Result};

/// One context window of `K` steps. Each step contributes a return, a state
/// and an action token; steps before the episode start are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub returns: Vec<f32>,
    pub states: Vec<PatientState>,
    pub actions: Vec<usize>,
    /// Absolute episode timestep of each step.
    pub timesteps: Vec<usize>,
    pub real: Vec<bool>,
}

impl TokenSequence {
    pub fn steps(&self) -> usize {
        self.real.len()
    }

    pub fn n_real(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }

    /// Replaces every real return token with `target`.
    pub fn with_return(mut self, target: f32) -> Self {
        for (r, &real) in self.returns.iter_mut().zip(&self.real) {
            if real {
                *r = target;
            }
        }
        self
    }

    /// Sets the action token of the last step.
    pub fn set_last_action(&mut self, action: usize) {
        if let Some(a) = self.actions.last_mut() {
            *a = action;
        }
    }

    pub(crate) fn check(&self, k: usize, d: usize) -> Result<()> {
        let lens = [
            self.returns.len(),
            self.states.len(),
            self.actions.len(),
            self.timesteps.len(),
        ];
        if self.real.len() != k || lens.iter().any(|&l| l != k) {
            return Err(Error::shape("token sequence", &[k], &lens));
        }
        if let Some(s) = self.states.iter().find(|s| s.len() != d) {
            return Err(Error::shape("token sequence state", &[d], &[s.len()]));
        }
        if !self.real.last().copied().unwrap_or(false) {
            return Err(Error::contract("last step of a window must be real"));
        }
        Ok(())
    }

    /// Builds a left-padded window from per-step histories, keeping the last
    /// `k` entries. Entry `i` gets timestep `start_timestep + i`.
    pub fn from_history(
        returns: &[f32],
        states: &[PatientState],
        actions: &[usize],
        start_timestep: usize,
        k: usize,
    ) -> Result<Self> {
        let n = states.len();
        if n == 0 || returns.len() != n || actions.len() != n {
            return Err(Error::shape("history", &[n], &[returns.len(), actions.len()]));
        }
        let d = states[0].len();
        let take = n.min(k);
        let pad = k - take;
        let lo = n - take;
        let mut w = TokenSequence {
            returns: vec![0.0; pad],
            states: vec![vec![0.0; d]; pad],
            actions: vec![0; pad],
            timesteps: vec![0; pad],
            real: vec![false; pad],
        };
        w.returns.extend_from_slice(&returns[lo..]);
        w.states.extend_from_slice(&states[lo..]);
        w.actions.extend_from_slice(&actions[lo..]);
        w.timesteps.extend((lo..n).map(|i| start_timestep + i));
        w.real.extend(std::iter::repeat_n(true, take));
        Ok(w)
    }
}

/// Window ending at step `t` of `trajectory`, covering `max(0, t-k+1)..=t`.
pub fn assemble_context(trajectory: &Trajectory, t: usize, k: usize) -> Result<TokenSequence> {
    if t >= trajectory.len() {
        return Err(Error::Index {
            what: "trajectory step",
            index: t,
            size: trajectory.len(),
        });
    }
    if k == 0 {
        return Err(Error::config("context length must be at least 1"));
    }
    let lo = (t + 1).saturating_sub(k);
    let actions: Vec<usize> = trajectory.actions[lo..=t].iter().map(|a| a.index()).collect();
    TokenSequence::from_history(
        &trajectory.returns_to_go[lo..=t],
        &trajectory.states[lo..=t],
        &actions,
        trajectory.timesteps[lo],
        k,
    )
}
