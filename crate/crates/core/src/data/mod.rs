//! Trajectory data model, synthetic cohort, splitting, oversampling, CSV.

mod csv;
mod smote;
mod split;
mod synth;

pub use self::csv::{load_trajectories_csv, read_trajectories, save_trajectories_csv, write_trajectories};
pub use smote::{borderline_smote, SmoteConfig, SmoteResult};
pub use split::{normalize_states, split_train_test, DatasetSplit, NormStats, SplitCounts};
pub use synth::{generate_synthetic_cohort, CohortConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dose bins per treatment (0 = none, 1..=4 quartiles).
pub const N_BINS: usize = 5;
/// Size of the joint IV × vasopressor action grid.
pub const N_ACTIONS: usize = N_BINS * N_BINS;
pub const DEFAULT_STATE_DIM: usize = 46;

/// One normalised feature vector per 4-hour window.
pub type PatientState = Vec<f32>;

/// Joint (IV fluid, vasopressor) dose bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionPair {
    iv: u8,
    vaso: u8,
}

impl ActionPair {
    pub fn new(iv_bin: usize, vaso_bin: usize) -> Result<Self> {
        if iv_bin >= N_BINS || vaso_bin >= N_BINS {
            return Err(Error::Domain(format!(
                "action bins ({iv_bin}, {vaso_bin}) outside 0..{N_BINS}"
            )));
        }
        Ok(Self {
            iv: iv_bin as u8,
            vaso: vaso_bin as u8,
        })
    }

    pub fn from_index(index: usize) -> Result<Self> {
        let (iv, vaso) = decode_action(index)?;
        Self::new(iv, vaso)
    }

    pub fn iv_bin(self) -> usize {
        self.iv as usize
    }

    pub fn vaso_bin(self) -> usize {
        self.vaso as usize
    }

    /// `5 · iv + vaso`.
    pub fn index(self) -> usize {
        N_BINS * self.iv as usize + self.vaso as usize
    }
}

pub fn encode_action(iv_bin: usize, vaso_bin: usize) -> Result<usize> {
    ActionPair::new(iv_bin, vaso_bin).map(ActionPair::index)
}

pub fn decode_action(index: usize) -> Result<(usize, usize)> {
    if index >= N_ACTIONS {
        return Err(Error::Domain(format!(
            "action index {index} outside 0..{N_ACTIONS}"
        )));
    }
    Ok((index / N_BINS, index % N_BINS))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    /// Survived.
    Positive,
    /// Died.
    Negative,
}

impl Outcome {
    pub fn terminal_reward(self) -> f32 {
        match self {
            Outcome::Positive => 1.0,
            Outcome::Negative => -1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Outcome::Positive
    }

    pub fn survival_label(self) -> u8 {
        u8::from(self.is_positive())
    }
}

/// Suffix sums of a terminal-only reward sequence.
pub fn compute_returns_to_go(rewards: &[f32]) -> Result<Vec<f32>> {
    let Some((&last, body)) = rewards.split_last() else {
        return Err(Error::contract("empty reward sequence"));
    };
    if let Some(t) = body.iter().position(|&r| r != 0.0) {
        return Err(Error::contract(format!(
            "non-terminal reward {} at step {t}",
            body[t]
        )));
    }
    if last != 1.0 && last != -1.0 {
        return Err(Error::contract(format!("terminal reward {last} not in {{-1, +1}}")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub states: Vec<PatientState>,
    pub actions: Vec<ActionPair>,
    pub outcome: Outcome,
    pub returns_to_go: Vec<f32>,
    pub timesteps: Vec<usize>,
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        states: Vec<PatientState>,
        actions: Vec<ActionPair>,
        outcome: Outcome,
    ) -> Result<Self> {
        let t = states.len();
        if t == 0 {
            return Err(Error::contract("trajectory needs at least one step"));
        }
        if actions.len() != t {
            return Err(Error::contract(format!(
                "{t} states but {} actions",
                actions.len()
            )));
        }
        let d = states[0].len();
        if let Some(bad) = states.iter().position(|s| s.len() != d) {
            return Err(Error::contract(format!("state {bad} has a different width")));
        }
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite state feature"));
        }
        let returns_to_go = compute_returns_to_go(&Self::reward_vector(t, outcome))?;
        Ok(Self {
            id: id.into(),
            states,
            actions,
            outcome,
            returns_to_go,
            timesteps: (0..t).collect(),
        })
    }

    fn reward_vector(t: usize, outcome: Outcome) -> Vec<f32> {
        let mut r = vec![0.0; t];
        r[t - 1] = outcome.terminal_reward();
        r
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn terminal_reward(&self) -> f32 {
        self.outcome.terminal_reward()
    }

    pub fn rewards(&self) -> Vec<f32> {
        Self::reward_vector(self.len(), self.outcome)
    }

    pub fn final_state(&self) -> &PatientState {
        self.states.last().expect("non-empty")
    }

    /// Index range of the last `min(n, T)` steps.
    pub fn last_steps(&self, n: usize) -> std::ops::Range<usize> {
        self.len().saturating_sub(n)..self.len()
    }
}

/// Final state of each trajectory with its survival label (1 = alive).
pub fn terminal_states_with_labels(trajs: &[Trajectory]) -> (Vec<PatientState>, Vec<u8>) {
    trajs
        .iter()
        .map(|t| (t.final_state().clone(), t.outcome.survival_label()))
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_encoding_examples() {
        assert_eq!(encode_action(0, 0).unwrap(), 0);
        assert_eq!(encode_action(4, 4).unwrap(), 24);
        assert_eq!(encode_action(2, 3).unwrap(), 13);
        assert!(encode_action(5, 0).is_err());
        assert!(decode_action(25).is_err());
    }

    #[test]
    fn action_encoding_is_a_bijection() {
        let mut seen = [false; N_ACTIONS];
        for iv in 0..N_BINS {
            for vaso in 0..N_BINS {
                let i = encode_action(iv, vaso).unwrap();
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(decode_action(i).unwrap(), (iv, vaso));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn returns_to_go_examples() {
        assert_eq!(compute_returns_to_go(&[0.0, 0.0, 1.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(compute_returns_to_go(&[0.0, 0.0, 0.0, -1.0]).unwrap(), vec![-1.0; 4]);
        assert_eq!(compute_returns_to_go(&[1.0]).unwrap(), vec![1.0]);
        assert!(compute_returns_to_go(&[0.0, 1.0, 1.0]).is_err());
        assert!(compute_returns_to_go(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn trajectory_invariants() {
        let a = ActionPair::new(1, 2).unwrap();
        let t = Trajectory::new("p", vec![vec![0.0; 3]; 4], vec![a; 4], Outcome::Negative).unwrap();
        assert_eq!(t.returns_to_go, vec![-1.0; 4]);
        assert_eq!(t.timesteps, vec![0, 1, 2, 3]);
        assert_eq!(t.rewards(), vec![0.0, 0.0, 0.0, -1.0]);
        assert_eq!(t.last_steps(10), 0..4);
        assert_eq!(t.last_steps(2), 2..4);
        assert!(Trajectory::new("q", vec![vec![0.0; 3]; 2], vec![a], Outcome::Positive).is_err());
    }
}
