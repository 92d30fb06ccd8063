//! Composite objective and training loops for PosNegDM and the baselines.

mod loss;

pub use loss::{loss_action_posneg, loss_state, loss_survival, loss_total, LossWeights};

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, OptimizerState, Scalar, Tensor, Var};
use crate::classifier::FrozenClassifier;
use crate::data::{DatasetSplit, Trajectory};
use crate::error::{Error, Result};
use crate::model::{assemble_context, DualSight, DualSightConfig, ModelKind, TokenSequence};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DMTrainConfig {
    pub model: DualSightConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Optimizer steps (T_DM).
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl DMTrainConfig {
    pub fn new(state_dim: usize) -> Self {
        Self {
            model: DualSightConfig::new(state_dim),
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 10_000,
            iterations: 20_000,
            seed: 0,
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.adam().validate()?;
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::config("batch_size and iterations must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }
}

/// Loss weights actually optimised for each model kind. The baselines keep
/// `α` and `β` but never see the survival term; DT treats every trajectory
/// as an ordinary imitation target.
pub fn objective(kind: ModelKind, w: &LossWeights) -> LossWeights {
    match kind {
        ModelKind::PosNegDm => w.clone(),
        ModelKind::Dt => LossWeights {
            gamma: 0.0,
            eta: 1.0,
            neg_ce_cap: f64::INFINITY,
            ..w.clone()
        },
        ModelKind::Bc => LossWeights {
            gamma: 0.0,
            eta: 0.0,
            ..w.clone()
        },
    }
}

/// A batch of windows with per-row targets; rows are `(window, step)`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub windows: Vec<TokenSequence>,
    pub action_targets: Vec<usize>,
    pub positive: Vec<bool>,
    pub real: Vec<bool>,
    /// `s_{t+1}` for each row, zero where `has_next` is false.
    pub next_states: Vec<Vec<f32>>,
    pub has_next: Vec<bool>,
}

impl TrainBatch {
    /// Windows ending at `(trajectory, step)` for each pick.
    pub fn build(trajectories: &[Trajectory], picks: &[(usize, usize)], k: usize) -> Result<Self> {
        let mut b = TrainBatch {
            windows: Vec::with_capacity(picks.len()),
            action_targets: Vec::with_capacity(picks.len() * k),
            positive: Vec::with_capacity(picks.len() * k),
            real: Vec::with_capacity(picks.len() * k),
            next_states: Vec::with_capacity(picks.len() * k),
            has_next: Vec::with_capacity(picks.len() * k),
        };
        for &(ti, t) in picks {
            let tr = trajectories.get(ti).ok_or(Error::Index {
                what: "trajectory",
                index: ti,
                size: trajectories.len(),
            })?;
            let w = assemble_context(tr, t, k)?;
            let pad = k - w.n_real();
            for step in 0..k {
                b.action_targets.push(w.actions[step]);
                b.positive.push(tr.outcome.is_positive());
                b.real.push(w.real[step]);
                let abs = (t + 1 + step).checked_sub(k);
                match abs.filter(|&a| step >= pad && a + 1 < tr.len()) {
                    Some(a) => {
                        b.next_states.push(tr.states[a + 1].clone());
                        b.has_next.push(true);
                    }
                    None => {
                        b.next_states.push(vec![0.0; tr.state_dim()]);
                        b.has_next.push(false);
                    }
                }
            }
            b.windows.push(w);
        }
        Ok(b)
    }
}

/// Scalar values of the loss terms for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub action: f64,
    pub state: f64,
    pub survival: f64,
    pub total: f64,
}

/// Graph handles for every term of the objective on one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub action: Var,
    pub state: Var,
    pub survival: Var,
    pub total: Var,
}

/// Builds the full objective for `model` on `batch` inside `g`. The survival
/// term is only evaluated when a classifier is given and `γ > 0`.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &DualSight,
    vars: &[Var],
    batch: &TrainBatch,
    mc: Option<&FrozenClassifier>,
    weights: &LossWeights,
) -> Result<LossVars> {
    let out = model.forward(g, vars, &batch.windows)?;
    let action = loss_action_posneg(
        g,
        out.action_logits,
        &batch.action_targets,
        &batch.positive,
        &batch.real,
        weights,
    )?;
    let state = if batch.has_next.iter().any(|&h| h) {
        let data = batch.next_states.iter().flatten().map(|&v| T::of(f64::from(v))).collect();
        let shape = vec![batch.next_states.len(), model.config().state_dim];
        let target = g.constant(Tensor::new(shape, data)?);
        loss_state(g, out.next_state, target, &batch.has_next)?
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };
    let survival = match mc {
        Some(mc) if weights.gamma > 0.0 => loss_survival(g, mc, out.next_state, &batch.real)?,
        _ if weights.gamma > 0.0 => {
            return Err(Error::contract("survival loss weight is positive but no classifier was given"));
        }
        _ => g.constant(Tensor::scalar(T::zero())),
    };
    let total = loss_total(g, action, state, survival, weights)?;
    Ok(LossVars {
        action,
        state,
        survival,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub l_action: f64,
    pub l_state: f64,
    pub l_survival: f64,
    pub l_total: f64,
    pub effective_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iteration,l_action,l_state,l_survival,l_total,effective_lr")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iteration, r.l_action, r.l_state, r.l_survival, r.l_total, r.effective_lr
            )?;
        }
        Ok(())
    }

    /// Mean total loss over the first and last `n` iterations.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        let n = n.min(self.rows.len());
        if n == 0 {
            return None;
        }
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.l_total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..])))
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: DualSight,
    pub log: TrainingLog,
}

/// `(trajectory, end step)` pairs eligible for sampling. Behaviour cloning
/// only sees surviving patients.
pub fn window_pool(kind: ModelKind, trajectories: &[Trajectory]) -> Vec<(usize, usize)> {
    trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| kind != ModelKind::Bc || t.outcome.is_positive())
        .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
        .collect()
}

/// Trains a model of the given kind on `train`.
pub fn train_model(
    kind: ModelKind,
    train: &[Trajectory],
    mc: Option<&FrozenClassifier>,
    cfg: &DMTrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let weights = objective(kind, &cfg.weights);
    let pool = window_pool(kind, train);
    if pool.is_empty() {
        return Err(Error::contract(format!("no training windows for {}", kind.as_str())));
    }
    if let Some(tr) = train.iter().find(|t| t.state_dim() != cfg.model.state_dim) {
        return Err(Error::shape("train", &[cfg.model.state_dim], &[tr.state_dim()]));
    }
    let hash_before = mc.map(|m| m.weights_hash());

    let mut model = DualSight::init(cfg.model.clone(), kind, &mut stream(cfg.seed, Stream::Init))?;
    let mut opt = OptimizerState::new(cfg.adam(), model.params());
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut log = TrainingLog::default();
    let k = cfg.model.context_length;

    for it in 1..=cfg.iterations {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| pool[data_rng.random_range(0..pool.len())])
            .collect();
        let batch = TrainBatch::build(train, &picks, k)?;
        let mut g = Graph::<f32>::train(&mut dropout_rng);
        let vars = model.params().bind(&mut g, true);
        let lv = composite_loss(&mut g, &model, &vars, &batch, mc, &weights)?;
        let value = |v: Var| f64::from(g.value(v).item());
        let values = LossValues {
            action: value(lv.action),
            state: value(lv.state),
            survival: value(lv.survival),
            total: value(lv.total),
        };
        let diverged = |m: &DualSight| Error::Diverged {
            iteration: it,
            last_good: Box::new(m.params().clone()),
        };
        if !values.total.is_finite() {
            return Err(diverged(&model));
        }
        g.backward(lv.total)?;
        let grads = model.params().grads_from(&g, &vars);
        drop(g);
        match opt.step(model.params_mut(), &grads) {
            Err(Error::NonFiniteGrad(_)) => return Err(diverged(&model)),
            other => other?,
        }
        log.rows.push(LogRow {
            iteration: it,
            l_action: values.action,
            l_state: values.state,
            l_survival: values.survival,
            l_total: values.total,
            effective_lr: opt.effective_lr(),
        });
        if it % 500 == 0 {
            log::debug!("{} iteration {it}: total {:.4}", kind.as_str(), values.total);
        }
    }

    if let (Some(m), Some(h)) = (mc, hash_before) {
        if m.weights_hash() != h {
            return Err(Error::contract("mortality classifier weights changed during training"));
        }
    }
    model.set_state_head_trained(weights.beta > 0.0);
    Ok(TrainedModel { model, log })
}

fn require_normalized(split: &DatasetSplit) -> Result<()> {
    if !split.normalized {
        return Err(Error::contract("training expects a normalized split"));
    }
    Ok(())
}

/// PosNegDM: positive and negative trajectories, frozen classifier feedback.
pub fn train_posnegdm(split: &DatasetSplit, mc: &FrozenClassifier, cfg: &DMTrainConfig) -> Result<TrainedModel> {
    require_normalized(split)?;
    train_model(ModelKind::PosNegDm, &split.train, Some(mc), cfg)
}

/// Decision Transformer or behaviour cloning on the same backbone.
pub fn train_baseline(kind: ModelKind, split: &DatasetSplit, cfg: &DMTrainConfig) -> Result<TrainedModel> {
    if kind == ModelKind::PosNegDm {
        return Err(Error::config("train_baseline expects dt or bc"));
    }
    require_normalized(split)?;
    train_model(kind, &split.train, None, cfg)
}
