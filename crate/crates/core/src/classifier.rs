//! Mortality classifier: a five-layer MLP mapping one patient state to the
//! probability of survival. Once trained it is frozen and reused, read-only,
//! as the feedback signal for the decision maker and as the evaluator.

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, AdamConfig, Graph, OptimizerState, ParamStore, Scalar, Tensor, Var};
use crate::data::{borderline_smote, PatientState, SmoteConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Probability of survival (1 = alive) before thresholding.
pub type SurvivalProbability = f32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McArch {
    pub state_dim: usize,
    pub hidden: usize,
    /// Number of fully-connected layers, output layer included.
    pub n_layers: usize,
    pub dropout: f64,
}

impl McArch {
    pub fn new(state_dim: usize) -> Self {
        Self {
            state_dim,
            hidden: 64,
            n_layers: 5,
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Hard cap on optimizer steps (T_MC).
    pub max_iterations: usize,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub use_smote: bool,
    pub smote_k: usize,
    pub smote_m: usize,
    pub seed: u64,
}

impl Default for McTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            dropout: 0.2,
            batch_size: 64,
            max_iterations: 4000,
            eval_every: 50,
            patience: 10,
            val_fraction: 0.1,
            use_smote: true,
            smote_k: 5,
            smote_m: 5,
            seed: 0,
        }
    }
}

impl McTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("classifier rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("classifier dropout outside [0, 1)"));
        }
        if self.batch_size == 0 || self.max_iterations == 0 || self.eval_every == 0 {
            return Err(Error::config("batch size, iterations and eval interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction outside [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MortalityClassifier {
    arch: McArch,
    params: ParamStore<f32>,
    frozen: bool,
}

impl MortalityClassifier {
    pub fn init(arch: McArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.n_layers < 1 || arch.hidden == 0 || arch.state_dim == 0 {
            return Err(Error::config("degenerate classifier architecture"));
        }
        let mut params = ParamStore::new();
        let mut fan_in = arch.state_dim;
        for l in 0..arch.n_layers {
            let fan_out = if l + 1 == arch.n_layers { 1 } else { arch.hidden };
            params.push_linear_weight(format!("fc{l}.weight"), fan_in, fan_out, rng);
            params.push_linear_bias(format!("fc{l}.bias"), fan_in, fan_out, rng);
            fan_in = fan_out;
        }
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    /// Rebuilds a classifier from stored parameters (e.g. a checkpoint).
    pub fn from_params(arch: McArch, params: ParamStore<f32>) -> Result<Self> {
        let reference = Self::init(arch.clone(), &mut stream(0, Stream::Init))?;
        if reference.params.names() != params.names() {
            return Err(Error::contract("classifier parameter names do not match architecture"));
        }
        for (i, (_, t)) in reference.params.iter().enumerate() {
            if t.shape() != params.get(i).shape() {
                return Err(Error::shape("classifier params", t.shape(), params.get(i).shape()));
            }
        }
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &McArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn weights_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Zeroes the output layer, making every prediction exactly 0.5.
    pub fn zero_output_layer(&mut self) -> Result<()> {
        self.ensure_mutable()?;
        let l = self.arch.n_layers - 1;
        for name in [format!("fc{l}.weight"), format!("fc{l}.bias")] {
            let i = self.params.find(&name).expect("layer exists");
            self.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("mortality classifier is frozen; weight updates are rejected"));
        }
        Ok(())
    }

    /// Applies one optimizer step. Rejected once frozen.
    pub fn apply_update(&mut self, opt: &mut OptimizerState<f32>, grads: &[Vec<f32>]) -> Result<()> {
        self.ensure_mutable()?;
        opt.step(&mut self.params, grads)
    }

    /// Binds the weights into `g` in the requested precision. `trainable`
    /// must be false for a frozen classifier.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<'_, T>, trainable: bool) -> Result<Vec<Var>> {
        if trainable {
            self.ensure_mutable()?;
        }
        let cast = self.params.cast::<T>();
        Ok(cast.bind(g, trainable))
    }

    /// Survival logits `[n × 1]` for a batch of states `[n × D]`. Dropout
    /// follows the graph's mode unless the classifier is frozen.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, vars: &[Var], states: Var) -> Result<Var> {
        let d = g.value(states).cols();
        if d != self.arch.state_dim {
            return Err(Error::shape("mc_forward", &[self.arch.state_dim], &[d]));
        }
        let mut h = states;
        for l in 0..self.arch.n_layers {
            h = g.matmul(h, vars[2 * l])?;
            h = g.add_row(h, vars[2 * l + 1])?;
            if l + 1 < self.arch.n_layers {
                h = g.relu(h);
                if !self.frozen {
                    h = g.dropout(h, self.arch.dropout)?;
                }
            }
        }
        Ok(h)
    }

    /// Deterministic survival probabilities for a batch of states.
    pub fn predict(&self, states: &[PatientState]) -> Result<Vec<SurvivalProbability>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::eval();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(states)?);
        let z = self.logits(&mut g, &vars, x)?;
        Ok(g.value(z).data().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn mc_forward(&self, state: &[f32]) -> Result<SurvivalProbability> {
        Ok(self.predict(&[state.to_vec()])?[0])
    }

    /// Marks the classifier read-only and returns a shareable handle.
    pub fn freeze(mut self) -> FrozenClassifier {
        self.frozen = true;
        FrozenClassifier(Arc::new(self))
    }
}

/// Read-only classifier. Gradients may flow through it to its inputs but
/// never into its weights; dropout is always off.
#[derive(Clone, Debug)]
pub struct FrozenClassifier(Arc<MortalityClassifier>);

impl Deref for FrozenClassifier {
    type Target = MortalityClassifier;

    fn deref(&self) -> &MortalityClassifier {
        &self.0
    }
}

pub fn mc_freeze(mc: MortalityClassifier) -> FrozenClassifier {
    mc.freeze()
}

/// Confusion counts with "alive" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct McEvaluation {
    pub accuracy: f64,
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl McEvaluation {
    /// Recall on the dead class.
    pub fn dead_recall(&self) -> f64 {
        let dead = self.true_negative + self.false_positive;
        if dead == 0 {
            1.0
        } else {
            self.true_negative as f64 / dead as f64
        }
    }
}

/// Scores predicted-alive iff `p >= threshold` against labels (1 = alive).
pub fn evaluate_predictions(probs: &[f32], labels: &[u8], threshold: f32) -> McEvaluation {
    let mut e = McEvaluation::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => e.true_positive += 1,
            (false, false) => e.true_negative += 1,
            (true, false) => e.false_positive += 1,
            (false, true) => e.false_negative += 1,
        }
    }
    let n = probs.len().max(1);
    e.accuracy = (e.true_positive + e.true_negative) as f64 / n as f64;
    e
}

pub fn mc_evaluate(
    mc: &MortalityClassifier,
    states: &[PatientState],
    labels: &[u8],
    threshold: f32,
) -> Result<McEvaluation> {
    if states.len() != labels.len() {
        return Err(Error::shape("mc_evaluate", &[states.len()], &[labels.len()]));
    }
    Ok(evaluate_predictions(&mc.predict(states)?, labels, threshold))
}

/// Result of [`mc_train`], with the iteration count actually used.
#[derive(Clone, Debug)]
pub struct McTrainOutcome {
    pub classifier: MortalityClassifier,
    pub iterations: usize,
    pub best_val_accuracy: f64,
    pub n_synthetic: usize,
}

/// Trains the classifier with binary cross-entropy (label 1 = survival).
/// A validation slice is held out before oversampling; the best validation
/// checkpoint is returned.
pub fn mc_train(states: &[PatientState], labels: &[u8], cfg: &McTrainConfig) -> Result<McTrainOutcome> {
    cfg.validate()?;
    if states.len() != labels.len() {
        return Err(Error::shape("mc_train", &[states.len()], &[labels.len()]));
    }
    if states.is_empty() || labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::contract("classifier training needs both classes"));
    }
    let d = states[0].len();

    // Stratified validation hold-out.
    let mut split_rng = stream(cfg.seed, Stream::Split);
    let (mut train_x, mut train_y, mut val_x, mut val_y) = (vec![], vec![], vec![], vec![]);
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut split_rng);
        let n_val = (idx.len() as f64 * cfg.val_fraction).round() as usize;
        let n_val = n_val.min(idx.len().saturating_sub(cfg.smote_k + 1));
        for (j, &i) in idx.iter().enumerate() {
            if j < n_val {
                val_x.push(states[i].clone());
                val_y.push(class);
            } else {
                train_x.push(states[i].clone());
                train_y.push(class);
            }
        }
    }
    let mut n_synthetic = 0;
    if cfg.use_smote {
        let aug = borderline_smote(
            &train_x,
            &train_y,
            &SmoteConfig {
                k: cfg.smote_k,
                m: cfg.smote_m,
                target_ratio: 1.0,
                seed: cfg.seed,
            },
        )?;
        n_synthetic = aug.n_synthetic;
        train_x = aug.states;
        train_y = aug.labels;
    }

    let arch = McArch {
        dropout: cfg.dropout,
        ..McArch::new(d)
    };
    let mut mc = MortalityClassifier::init(arch, &mut stream(cfg.seed, Stream::Init))?;
    let mut opt = OptimizerState::new(
        AdamConfig {
            base_lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            warmup_steps: 0,
            ..AdamConfig::default()
        },
        mc.params(),
    );
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut best = (f64::NEG_INFINITY, mc.params.clone());
    let mut stale = 0;
    let mut iterations = 0;
    let n = train_x.len();
    for it in 1..=cfg.max_iterations {
        let batch: Vec<usize> = (0..cfg.batch_size.min(n)).map(|_| data_rng.random_range(0..n)).collect();
        let rows: Vec<PatientState> = batch.iter().map(|&i| train_x[i].clone()).collect();
        // log σ(s·z) with s = +1 for alive, -1 for dead.
        let signs: Vec<f32> = batch.iter().map(|&i| if train_y[i] == 1 { 1.0 } else { -1.0 }).collect();
        let mut g = Graph::<f32>::train(&mut dropout_rng);
        let vars = mc.bind(&mut g, true)?;
        let x = g.constant(Tensor::from_rows(&rows)?);
        let z = mc.logits(&mut g, &vars, x)?;
        let signed = g.mul_const(z, signs)?;
        let ll = g.log_sigmoid(signed);
        let w = vec![-1.0 / batch.len() as f32; batch.len()];
        let loss = g.weighted_sum(ll, w)?;
        g.backward(loss)?;
        let grads = mc.params.grads_from(&g, &vars);
        mc.apply_update(&mut opt, &grads)?;
        iterations = it;

        if it % cfg.eval_every == 0 || it == cfg.max_iterations {
            let acc = if val_x.is_empty() {
                mc_evaluate(&mc, &train_x, &train_y, 0.5)?.accuracy
            } else {
                mc_evaluate(&mc, &val_x, &val_y, 0.5)?.accuracy
            };
            if acc > best.0 {
                best = (acc, mc.params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    mc.params = best.1;
    log::info!(
        "mortality classifier: {iterations} iterations, best validation accuracy {:.4}",
        best.0
    );
    Ok(McTrainOutcome {
        classifier: mc,
        iterations,
        best_val_accuracy: best.0,
        n_synthetic,
    })
}
