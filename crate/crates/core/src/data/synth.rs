//! Seeded synthetic sepsis cohort.
//!
//! Each patient carries a latent health scalar and a hidden ideal dose pair.
//! The logged clinician reads two noisy "need" features and adds a
//! patient-specific bias; every bin away from the ideal dose drags health
//! down. Patients in the lowest `mortality_target` quantile of final health
//! die, and their last observed state is drawn from a shifted distribution.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActionPair, Outcome, Trajectory, N_ACTIONS, N_BINS};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, Stream};

const STATIC_FEATURES: usize = 4;
const NEED_IV: usize = 4;
const NEED_VASO: usize = 5;
const HEALTH_START: usize = 6;
const HEALTH_WEIGHTS: [f64; 8] = [1.0, -0.8, 1.2, -1.1, 0.9, -1.3, 0.7, 1.4];
const LOS: usize = HEALTH_START + HEALTH_WEIGHTS.len();
/// Smallest state width that holds every structured feature.
pub const MIN_STATE_DIM: usize = LOS + 1;

const NEED_NOISE: f64 = 0.15;
const HEALTH_NOISE: f64 = 0.3;
const DRIFT: f64 = 0.08;
const MISMATCH_PENALTY: f64 = 0.15;
const STEP_NOISE: f64 = 0.15;
const RANDOM_ACTION_PROB: f64 = 0.05;
/// Health offset applied to the terminal state of a patient who died.
const DEATH_SHIFT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_trajectories: usize,
    pub state_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mortality_target: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            state_dim: super::DEFAULT_STATE_DIM,
            min_len: 10,
            max_len: 20,
            mortality_target: 0.095,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::config("n_trajectories must be positive"));
        }
        if self.state_dim < MIN_STATE_DIM {
            return Err(Error::config(format!(
                "state_dim {} below the minimum {MIN_STATE_DIM}",
                self.state_dim
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(self.mortality_target > 0.0 && self.mortality_target < 1.0) {
            return Err(Error::config(format!(
                "mortality_target {} must lie strictly between 0 and 1",
                self.mortality_target
            )));
        }
        Ok(())
    }
}

struct Latent {
    len: usize,
    health: Vec<f64>,
    need_obs: Vec<[f64; 2]>,
    actions: Vec<ActionPair>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn clinician_bias(rng: &mut impl Rng) -> i64 {
    let u: f64 = rng.random();
    match u {
        u if u < 0.70 => 0,
        u if u < 0.82 => 1,
        u if u < 0.94 => -1,
        u if u < 0.97 => 2,
        _ => -2,
    }
}

fn simulate_latent(cfg: &CohortConfig, index: usize) -> Latent {
    let mut rng = indexed_stream(cfg.seed, Stream::Generator, index as u64);
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let need = [rng.random_range(0..N_BINS), rng.random_range(0..N_BINS)];
    let bias = [clinician_bias(&mut rng), clinician_bias(&mut rng)];
    let mut h = 1.0 + 0.5 * normal(&mut rng);
    let mut health = Vec::with_capacity(len);
    let mut need_obs = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    for _ in 0..len {
        health.push(h);
        let obs = [
            need[0] as f64 + NEED_NOISE * normal(&mut rng),
            need[1] as f64 + NEED_NOISE * normal(&mut rng),
        ];
        let action = if rng.random::<f64>() < RANDOM_ACTION_PROB {
            ActionPair::from_index(rng.random_range(0..N_ACTIONS)).expect("in range")
        } else {
            let pick = |o: f64, b: i64| (o.round() as i64 + b).clamp(0, N_BINS as i64 - 1) as usize;
            ActionPair::new(pick(obs[0], bias[0]), pick(obs[1], bias[1])).expect("clamped")
        };
        let mismatch = need[0].abs_diff(action.iv_bin()) + need[1].abs_diff(action.vaso_bin());
        h += DRIFT - MISMATCH_PENALTY * mismatch as f64 + STEP_NOISE * normal(&mut rng);
        need_obs.push(obs);
        actions.push(action);
    }
    Latent {
        len,
        health,
        need_obs,
        actions,
    }
}

fn observe(cfg: &CohortConfig, index: usize, latent: Latent, outcome: Outcome) -> Trajectory {
    let mut rng = indexed_stream(!cfg.seed, Stream::Generator, index as u64);
    let d = cfg.state_dim;
    let statics: [f64; STATIC_FEATURES] = [
        normal(&mut rng),
        f64::from(rng.random_bool(0.5)),
        normal(&mut rng),
        normal(&mut rng),
    ];
    let mut drift_noise: Vec<f64> = (MIN_STATE_DIM..d).map(|_| normal(&mut rng)).collect();
    let mut states = Vec::with_capacity(latent.len);
    for t in 0..latent.len {
        let mut s = vec![0.0f32; d];
        for (j, &v) in statics.iter().enumerate() {
            s[j] = v as f32;
        }
        s[NEED_IV] = latent.need_obs[t][0] as f32;
        s[NEED_VASO] = latent.need_obs[t][1] as f32;
        let dying = t + 1 == latent.len && outcome == Outcome::Negative;
        let h = latent.health[t] - if dying { DEATH_SHIFT } else { 0.0 };
        for (j, w) in HEALTH_WEIGHTS.iter().enumerate() {
            s[HEALTH_START + j] = (w * h + HEALTH_NOISE * normal(&mut rng)) as f32;
        }
        s[LOS] = (t as f64 * 4.0 / 24.0) as f32;
        for (j, x) in drift_noise.iter_mut().enumerate() {
            s[MIN_STATE_DIM + j] = *x as f32;
            *x = 0.9 * *x + 0.3 * normal(&mut rng);
        }
        states.push(s);
    }
    Trajectory::new(format!("p{index:06}"), states, latent.actions, outcome)
        .expect("generator emits well-formed trajectories")
}

/// Generates `cfg.n_trajectories` patients. Deterministic in `cfg`; each
/// patient draws from its own stream keyed by `(seed, index)`.
pub fn generate_synthetic_cohort(cfg: &CohortConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let n = cfg.n_trajectories;
    let latents: Vec<Latent> = (0..n).map(|i| simulate_latent(cfg, i)).collect();

    // Death threshold: the mortality_target quantile of final health.
    let mut finals: Vec<f64> = latents.iter().map(|l| *l.health.last().expect("len >= 1")).collect();
    finals.sort_by(f64::total_cmp);
    let n_dead = (n as f64 * cfg.mortality_target).round() as usize;
    let threshold = match n_dead {
        0 => f64::NEG_INFINITY,
        k if k >= n => f64::INFINITY,
        k => 0.5 * (finals[k - 1] + finals[k]),
    };

    Ok(latents
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let outcome = if *l.health.last().expect("len >= 1") < threshold {
                Outcome::Negative
            } else {
                Outcome::Positive
            };
            observe(cfg, i, l, outcome)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn negatives(cfg: &CohortConfig) -> usize {
        generate_synthetic_cohort(cfg)
            .unwrap()
            .iter()
            .filter(|t| !t.outcome.is_positive())
            .count()
    }

    #[test]
    fn mortality_lands_in_band() {
        let cfg = CohortConfig {
            seed: 1,
            ..CohortConfig::default()
        };
        let neg = negatives(&cfg);
        assert!((75..=115).contains(&neg), "{neg}");

        let half = CohortConfig {
            mortality_target: 0.5,
            ..cfg
        };
        let neg = negatives(&half);
        assert!((480..=520).contains(&neg), "{neg}");
    }

    #[test]
    fn mortality_converges_at_scale() {
        let cfg = CohortConfig {
            n_trajectories: 10_000,
            seed: 4,
            ..CohortConfig::default()
        };
        let frac = negatives(&cfg) as f64 / 10_000.0;
        assert!((frac - 0.095).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = CohortConfig {
            n_trajectories: 50,
            seed: 3,
            ..CohortConfig::default()
        };
        let a = generate_synthetic_cohort(&cfg).unwrap();
        let b = generate_synthetic_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert!((10..=20).contains(&t.len()));
            assert!(t.states.iter().all(|s| s.len() == 46));
            assert!(t.returns_to_go.iter().all(|&r| r == t.terminal_reward()));
        }
    }

    #[test]
    fn patients_do_not_depend_on_cohort_size() {
        // Latent dynamics are per-patient; only the threshold is cohort-wide.
        let small = CohortConfig {
            n_trajectories: 5,
            seed: 8,
            ..CohortConfig::default()
        };
        let large = CohortConfig {
            n_trajectories: 40,
            ..small.clone()
        };
        let a = generate_synthetic_cohort(&small).unwrap();
        let b = generate_synthetic_cohort(&large).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.actions, y.actions);
            assert_eq!(x.states[0], y.states[0]);
        }
    }

    #[test]
    fn rejects_infeasible_configs() {
        for bad in [
            CohortConfig {
                mortality_target: 0.0,
                ..CohortConfig::default()
            },
            CohortConfig {
                state_dim: 4,
                ..CohortConfig::default()
            },
            CohortConfig {
                min_len: 12,
                max_len: 11,
                ..CohortConfig::default()
            },
            CohortConfig {
                n_trajectories: 0,
                ..CohortConfig::default()
            },
        ] {
            assert!(matches!(generate_synthetic_cohort(&bad), Err(Error::Config(_))));
        }
    }
}
