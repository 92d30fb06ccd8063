//! Borderline-SMOTE (borderline-1 variant).
//!
//! Minority points are classified by their `m` nearest neighbours over both
//! classes: all-majority neighbourhoods are noise, at least half majority is
//! DANGER, anything less is safe. New samples interpolate between a DANGER
//! point and one of its `k` nearest minority neighbours.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k: usize,
    pub m: usize,
    /// Desired minority / majority count ratio after augmentation.
    pub target_ratio: f64,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k: 5,
            m: 5,
            target_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmoteResult {
    pub states: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub minority_label: u8,
    pub n_synthetic: usize,
    /// Indices (into the input) of minority points used as interpolation bases.
    pub base_pool: Vec<usize>,
    /// No DANGER point existed; plain SMOTE over all minority points was used.
    pub fell_back_to_plain: bool,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Indices of the `count` nearest points to `states[of]` among `pool`,
/// excluding `of` itself. Ties break on index.
fn nearest(states: &[Vec<f32>], of: usize, pool: &[usize], count: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&j| j != of)
        .map(|&j| (sq_dist(&states[of], &states[j]), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(count).map(|(_, j)| j).collect()
}

/// Oversamples the minority class until `minority / majority >= target_ratio`.
/// Existing samples are returned first and unchanged.
pub fn borderline_smote(states: &[Vec<f32>], labels: &[u8], cfg: &SmoteConfig) -> Result<SmoteResult> {
    if states.len() != labels.len() {
        return Err(Error::shape("borderline_smote", &[states.len()], &[labels.len()]));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::contract("labels must be binary"));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    if ones == 0 || zeros == 0 {
        return Err(Error::contract("both classes must be present"));
    }
    let minority_label = u8::from(ones < zeros);
    let minority: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == minority_label).collect();
    let n_min = minority.len();
    let n_maj = labels.len() - n_min;
    if cfg.k >= n_min || cfg.m >= labels.len() || cfg.k == 0 || cfg.m == 0 {
        return Err(Error::contract(format!(
            "k = {}, m = {} too large for {n_min} minority samples",
            cfg.k, cfg.m
        )));
    }
    if !(cfg.target_ratio > 0.0 && cfg.target_ratio.is_finite()) {
        return Err(Error::config("target_ratio must be positive"));
    }

    let everyone: Vec<usize> = (0..labels.len()).collect();
    let danger: Vec<usize> = minority
        .iter()
        .copied()
        .filter(|&p| {
            let majority = nearest(states, p, &everyone, cfg.m)
                .into_iter()
                .filter(|&j| labels[j] != minority_label)
                .count();
            2 * majority >= cfg.m && majority < cfg.m
        })
        .collect();
    let fell_back = danger.is_empty();
    if fell_back {
        log::warn!("borderline-SMOTE found no DANGER points; using all {n_min} minority points");
    }
    let base_pool = if fell_back { minority.clone() } else { danger };

    let target = (cfg.target_ratio * n_maj as f64).round() as usize;
    let n_new = target.saturating_sub(n_min);
    let mut out_states = states.to_vec();
    let mut out_labels = labels.to_vec();
    out_states.reserve(n_new);
    out_labels.reserve(n_new);

    let neighbours: Vec<Vec<usize>> = base_pool
        .iter()
        .map(|&p| nearest(states, p, &minority, cfg.k))
        .collect();
    let mut rng = stream(cfg.seed, Stream::Smote);
    for _ in 0..n_new {
        let b = rng.random_range(0..base_pool.len());
        let p = &states[base_pool[b]];
        let q = &states[neighbours[b][rng.random_range(0..neighbours[b].len())]];
        let u: f32 = rng.random();
        out_states.push(p.iter().zip(q).map(|(&a, &c)| a + u * (c - a)).collect());
        out_labels.push(minority_label);
    }
    Ok(SmoteResult {
        states: out_states,
        labels: out_labels,
        minority_label,
        n_synthetic: n_new,
        base_pool,
        fell_back_to_plain: fell_back,
    })
}
