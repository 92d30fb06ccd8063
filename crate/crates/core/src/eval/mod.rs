//! Metrics: last-10-step action accuracy, two mortality protocols, action
//! histograms, ablation sweeps and seed sensitivity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::FrozenClassifier;
use crate::data::{DatasetSplit, Trajectory, N_BINS};
use crate::error::{Error, Result};
use crate::model::{argmax, assemble_context, rollout_batch, DualSight, TokenSequence};
use crate::training::{train_model, DMTrainConfig};
use crate::model::ModelKind;

/// Steps per trajectory scored by the step-by-step metrics.
pub const LAST_STEPS: usize = 10;
/// Return-to-go used to condition every evaluation.
pub const TARGET_RETURN: f32 = 1.0;
pub const DEFAULT_HORIZON: usize = 10;

pub type Histogram = [[u64; N_BINS]; N_BINS];

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Teacher-forced windows for the last `min(10, T)` steps of `tr`.
fn last_windows(tr: &Trajectory, k: usize) -> Result<Vec<TokenSequence>> {
    let lo = tr.len().saturating_sub(LAST_STEPS);
    (lo..tr.len())
        .map(|t| Ok(assemble_context(tr, t, k)?.with_return(TARGET_RETURN)))
        .collect()
}

/// Percentage of expert actions matched by the greedy policy over the last
/// `min(10, T)` steps of every positive trajectory.
pub fn action_accuracy_last10(model: &DualSight, test: &[Trajectory]) -> Result<f64> {
    let k = model.config().context_length;
    let mut windows = Vec::new();
    let mut truth = Vec::new();
    for tr in test.iter().filter(|t| t.outcome.is_positive()) {
        let lo = tr.len().saturating_sub(LAST_STEPS);
        windows.extend(last_windows(tr, k)?);
        truth.extend(tr.actions[lo..].iter().map(|a| a.index()));
    }
    if windows.is_empty() {
        return Err(Error::contract("no positive test trajectories"));
    }
    let out = model.predict(&windows)?;
    let hits = out
        .iter()
        .zip(&truth)
        .filter(|(o, &a)| argmax(o.action_logits.last().expect("K >= 1")) == a)
        .count();
    Ok(pct(hits, truth.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepwiseMortality {
    pub positive_data_pct: f64,
    pub negative_data_pct: f64,
    pub total_pct: f64,
    pub deaths_positive: usize,
    pub n_positive: usize,
    pub deaths_negative: usize,
    pub n_negative: usize,
}

fn require_state_head(model: &DualSight) -> Result<()> {
    if !model.state_head_trained() {
        return Err(Error::contract("model has no trained state head; mortality is not available"));
    }
    Ok(())
}

/// Feeds ground-truth history over the last `min(10, T)` steps, lets the
/// model pick its action, and classifies the predicted next state. A
/// trajectory is a death if any predicted state is classified dead.
pub fn mortality_step_by_step(
    model: &DualSight,
    mc: &FrozenClassifier,
    test: &[Trajectory],
) -> Result<StepwiseMortality> {
    require_state_head(model)?;
    let k = model.config().context_length;
    let mut windows = Vec::new();
    let mut owner = Vec::new();
    for (i, tr) in test.iter().enumerate() {
        let w = last_windows(tr, k)?;
        owner.extend(std::iter::repeat_n(i, w.len()));
        windows.extend(w);
    }
    let predicted: Vec<Vec<f32>> = model.act_and_predict(&windows)?.into_iter().map(|(_, s)| s).collect();
    let probs = mc.predict(&predicted)?;
    let mut dead = vec![false; test.len()];
    for (&i, &p) in owner.iter().zip(&probs) {
        if p < 0.5 {
            dead[i] = true;
        }
    }
    let mut m = StepwiseMortality {
        positive_data_pct: 0.0,
        negative_data_pct: 0.0,
        total_pct: 0.0,
        deaths_positive: 0,
        n_positive: 0,
        deaths_negative: 0,
        n_negative: 0,
    };
    for (tr, &d) in test.iter().zip(&dead) {
        if tr.outcome.is_positive() {
            m.n_positive += 1;
            m.deaths_positive += usize::from(d);
        } else {
            m.n_negative += 1;
            m.deaths_negative += usize::from(d);
        }
    }
    m.positive_data_pct = pct(m.deaths_positive, m.n_positive);
    m.negative_data_pct = pct(m.deaths_negative, m.n_negative);
    m.total_pct = pct(m.deaths_positive + m.deaths_negative, m.n_positive + m.n_negative);
    Ok(m)
}

/// Rolls out `horizon` steps from each initial test state; a death is any
/// rolled-out state classified dead.
pub fn mortality_complete_trajectory(
    model: &DualSight,
    mc: &FrozenClassifier,
    test: &[Trajectory],
    horizon: usize,
) -> Result<f64> {
    require_state_head(model)?;
    if horizon == 0 || test.is_empty() {
        return Ok(0.0);
    }
    let initial: Vec<Vec<f32>> = test.iter().map(|t| t.states[0].clone()).collect();
    let rolls = rollout_batch(model, &initial, TARGET_RETURN, horizon, Some(mc))?;
    let deaths = rolls
        .iter()
        .filter(|r| r.survival.as_ref().is_some_and(|s| s.iter().any(|&p| p < 0.5)))
        .count();
    Ok(pct(deaths, test.len()))
}

/// Counts joint dose bins.
pub fn action_histogram_5x5(actions: impl IntoIterator<Item = usize>) -> Histogram {
    let mut h = [[0; N_BINS]; N_BINS];
    for a in actions {
        h[a / N_BINS][a % N_BINS] += 1;
    }
    h
}

pub const COHORTS: [&str; 4] = ["ground_truth_pos", "ground_truth_neg", "model_pos", "model_neg"];

/// Histograms of logged and model actions over every step of the positive
/// and negative test trajectories. Model actions use teacher-forced history.
pub fn cohort_histograms(model: &DualSight, test: &[Trajectory]) -> Result<BTreeMap<String, Histogram>> {
    let k = model.config().context_length;
    let mut out = BTreeMap::new();
    for positive in [true, false] {
        let trajs: Vec<&Trajectory> = test.iter().filter(|t| t.outcome.is_positive() == positive).collect();
        let truth = trajs.iter().flat_map(|t| t.actions.iter().map(|a| a.index()));
        let suffix = if positive { "pos" } else { "neg" };
        out.insert(format!("ground_truth_{suffix}"), action_histogram_5x5(truth));
        let mut windows = Vec::new();
        for tr in &trajs {
            for t in 0..tr.len() {
                windows.push(assemble_context(tr, t, k)?.with_return(TARGET_RETURN));
            }
        }
        let picks = model
            .predict(&windows)?
            .iter()
            .map(|o| argmax(o.action_logits.last().expect("K >= 1")))
            .collect::<Vec<_>>();
        out.insert(format!("model_{suffix}"), action_histogram_5x5(picks));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub action_accuracy_positive_pct: f64,
    /// `None` when the model has no trained state head.
    pub mortality_step_by_step: Option<StepwiseMortality>,
    pub mortality_complete_traj_pct: Option<f64>,
    /// Survival rate implied by total step-by-step mortality.
    pub survival_pct: Option<f64>,
    pub histograms: BTreeMap<String, Histogram>,
    pub config: serde_json::Value,
}

pub fn evaluate(
    model: &DualSight,
    mc: &FrozenClassifier,
    test: &[Trajectory],
    horizon: usize,
    seed: u64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let accuracy = action_accuracy_last10(model, test)?;
    let (stepwise, complete) = if model.state_head_trained() {
        (
            Some(mortality_step_by_step(model, mc, test)?),
            Some(mortality_complete_trajectory(model, mc, test, horizon)?),
        )
    } else {
        (None, None)
    };
    Ok(EvalReport {
        model_kind: model.kind(),
        seed,
        action_accuracy_positive_pct: accuracy,
        survival_pct: stepwise.map(|m| 100.0 - m.total_pct),
        mortality_step_by_step: stepwise,
        mortality_complete_traj_pct: complete,
        histograms: cohort_histograms(model, test)?,
        config,
    })
}

/// Headline numbers of one trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_pct: f64,
    pub stepwise_mortality_pct: Option<f64>,
    pub complete_mortality_pct: Option<f64>,
}

pub fn headline(model: &DualSight, mc: &FrozenClassifier, test: &[Trajectory]) -> Result<Metrics> {
    let accuracy_pct = action_accuracy_last10(model, test)?;
    if !model.state_head_trained() {
        return Ok(Metrics {
            accuracy_pct,
            stepwise_mortality_pct: None,
            complete_mortality_pct: None,
        });
    }
    Ok(Metrics {
        accuracy_pct,
        stepwise_mortality_pct: Some(mortality_step_by_step(model, mc, test)?.total_pct),
        complete_mortality_pct: Some(mortality_complete_trajectory(model, mc, test, DEFAULT_HORIZON)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationParam {
    Alpha,
    Beta,
    Gamma,
}

impl AblationParam {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationParam::Alpha => "alpha",
            AblationParam::Beta => "beta",
            AblationParam::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationParam::Alpha),
            "beta" => Ok(AblationParam::Beta),
            "gamma" => Ok(AblationParam::Gamma),
            other => Err(Error::config(format!("cannot ablate `{other}`"))),
        }
    }
}

pub const ABLATION_VALUES: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.8, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub metrics: Metrics,
}

/// Trains one PosNegDM per value of `param`, everything else (seed
/// included) fixed.
pub fn ablation_sweep(
    param: AblationParam,
    values: &[f64],
    base: &DMTrainConfig,
    split: &DatasetSplit,
    mc: &FrozenClassifier,
) -> Result<Vec<AblationRow>> {
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::config(format!("ablation value {v} must be finite and >= 0")));
    }
    values
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            match param {
                AblationParam::Alpha => cfg.weights.alpha = value,
                AblationParam::Beta => cfg.weights.beta = value,
                AblationParam::Gamma => cfg.weights.gamma = value,
            }
            let trained = train_model(ModelKind::PosNegDm, &split.train, Some(mc), &cfg)?;
            log::info!("{} = {value} trained", param.as_str());
            Ok(AblationRow {
                value,
                metrics: headline(&trained.model, mc, &split.test)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: Metrics,
}

/// Sample mean and standard deviation (n - 1 denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub rows: Vec<SeedRow>,
    pub accuracy: MeanStd,
    pub stepwise_mortality: Option<MeanStd>,
    pub complete_mortality: Option<MeanStd>,
}

impl SeedReport {
    pub fn from_rows(rows: Vec<SeedRow>) -> Self {
        let acc: Vec<f64> = rows.iter().map(|r| r.metrics.accuracy_pct).collect();
        let collect = |f: fn(&Metrics) -> Option<f64>| -> Option<MeanStd> {
            rows.iter().map(|r| f(&r.metrics)).collect::<Option<Vec<f64>>>().map(|v| mean_std(&v))
        };
        Self {
            accuracy: mean_std(&acc),
            stepwise_mortality: collect(|m| m.stepwise_mortality_pct),
            complete_mortality: collect(|m| m.complete_mortality_pct),
            rows,
        }
    }
}

/// Trains one PosNegDM per seed and aggregates the headline metrics.
pub fn seed_sensitivity(
    base: &DMTrainConfig,
    seeds: &[u64],
    split: &DatasetSplit,
    mc: &FrozenClassifier,
) -> Result<SeedReport> {
    if seeds.len() < 2 {
        return Err(Error::config("seed sensitivity needs at least two seeds"));
    }
    let rows = seeds
        .iter()
        .map(|&seed| {
            let cfg = DMTrainConfig { seed, ..base.clone() };
            let trained = train_model(ModelKind::PosNegDm, &split.train, Some(mc), &cfg)?;
            Ok(SeedRow {
                seed,
                metrics: headline(&trained.model, mc, &split.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedReport::from_rows(rows))
}
