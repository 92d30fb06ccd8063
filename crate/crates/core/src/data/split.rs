use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

const STD_FLOOR: f64 = 1e-6;

/// Per-feature z-scoring statistics, computed on training states only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let Some(first) = trajs.first() else {
            return Err(Error::contract("no trajectories to compute statistics from"));
        };
        let d = first.state_dim();
        let mut sum = vec![0.0f64; d];
        let mut n = 0usize;
        for s in trajs.iter().flat_map(|t| &t.states) {
            if s.len() != d {
                return Err(Error::shape("norm_stats", &[d], &[s.len()]));
            }
            sum.iter_mut().zip(s).for_each(|(a, &v)| *a += f64::from(v));
            n += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0f64; d];
        for s in trajs.iter().flat_map(|t| &t.states) {
            for ((a, &v), m) in sq.iter_mut().zip(s).zip(&mean) {
                let dv = f64::from(v) - m;
                *a += dv * dv;
            }
        }
        let std = sq
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, state: &mut [f32]) {
        for ((v, m), s) in state.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = ((f64::from(*v) - m) / s) as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_positive: usize,
    pub train_negative: usize,
    pub test_positive: usize,
    pub test_negative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub norm_stats: NormStats,
    pub counts: SplitCounts,
    pub normalized: bool,
}

impl DatasetSplit {
    /// Wraps an existing unnormalized train/test partition.
    pub fn from_parts(train: Vec<Trajectory>, test: Vec<Trajectory>) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::contract("test side is empty"));
        }
        let norm_stats = NormStats::from_trajectories(&train)?;
        if test.iter().any(|t| t.state_dim() != norm_stats.dim()) {
            return Err(Error::contract("train and test state widths differ"));
        }
        let (train_positive, train_negative) = count(&train);
        let (test_positive, test_negative) = count(&test);
        Ok(DatasetSplit {
            train,
            test,
            norm_stats,
            counts: SplitCounts {
                train_positive,
                train_negative,
                test_positive,
                test_negative,
            },
            normalized: false,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.norm_stats.dim()
    }

    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(Trajectory::len)
            .max()
            .unwrap_or(0)
    }
}

fn count(trajs: &[Trajectory]) -> (usize, usize) {
    let pos = trajs.iter().filter(|t| t.outcome.is_positive()).count();
    (pos, trajs.len() - pos)
}

/// Test-set size for `n` trajectories: `round(n · fraction)`, kept inside
/// `1..n` so neither side is empty.
pub fn test_size(n: usize, test_fraction: f64) -> usize {
    ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1)
}

/// Random trajectory-level split. Order within each side follows the input.
pub fn split_train_test(
    trajectories: Vec<Trajectory>,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    let n = trajectories.len();
    if n < 2 {
        return Err(Error::contract(format!("cannot split {n} trajectories")));
    }
    let n_test = test_size(n, test_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Split));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (t, flag) in trajectories.into_iter().zip(is_test) {
        if flag {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    DatasetSplit::from_parts(train, test)
}

/// Z-scores every state of both sides with the training statistics.
pub fn normalize_states(mut split: DatasetSplit) -> Result<DatasetSplit> {
    if split.normalized {
        return Err(Error::contract("split is already normalized"));
    }
    let stats = &split.norm_stats;
    for s in split
        .train
        .iter_mut()
        .chain(split.test.iter_mut())
        .flat_map(|t| t.states.iter_mut())
    {
        stats.apply(s);
    }
    split.normalized = true;
    Ok(split)
}
