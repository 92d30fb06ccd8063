//! DualSight: a causal transformer over interleaved (return, state, action)
//! tokens with two readouts, next action from each state token and next
//! state from each action token.

mod rollout;
mod window;

pub use rollout::{argmax, rollout, rollout_batch, Rollout};
pub use window::{assemble_context, TokenSequence};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Graph, ParamStore, Scalar, Tensor, Var};
use crate::data::{PatientState, N_ACTIONS};
use crate::error::{Error, Result};

/// Which objective a model was trained with. Behaviour cloning drops the
/// return tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    PosNegDm,
    Dt,
    Bc,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::PosNegDm => "posnegdm",
            ModelKind::Dt => "dt",
            ModelKind::Bc => "bc",
        }
    }

    pub fn uses_returns(self) -> bool {
        self != ModelKind::Bc
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posnegdm" => Ok(ModelKind::PosNegDm),
            "dt" => Ok(ModelKind::Dt),
            "bc" => Ok(ModelKind::Bc),
            other => Err(Error::config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualSightConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Steps per context window (K).
    pub context_length: usize,
    pub dropout: f64,
    pub state_dim: usize,
    pub n_actions: usize,
    /// Rows of the timestep table; larger timesteps share the last row.
    pub max_timestep: usize,
}

impl DualSightConfig {
    pub fn new(state_dim: usize) -> Self {
        Self {
            n_layers: 3,
            n_heads: 1,
            embed_dim: 128,
            context_length: 3,
            dropout: 0.1,
            state_dim,
            n_actions: N_ACTIONS,
            max_timestep: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_length == 0 {
            return Err(Error::config("context_length must be at least 1"));
        }
        if self.state_dim == 0 || self.n_actions == 0 || self.max_timestep == 0 {
            return Err(Error::config("state_dim, n_actions and max_timestep must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout outside [0, 1)"));
        }
        Ok(())
    }
}

/// Per-step outputs of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub action_logits: Vec<Vec<f32>>,
    pub next_state_pred: Vec<PatientState>,
}

/// Graph handles for a batched forward pass. Rows are ordered
/// `(window, step)`, `n_windows · K` in total.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub action_logits: Var,
    pub next_state: Var,
}

/// Windows per graph in [`DualSight::predict`].
pub const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct DualSight {
    config: DualSightConfig,
    kind: ModelKind,
    params: ParamStore<f32>,
    state_head_trained: bool,
}

impl DualSight {
    pub fn init(config: DualSightConfig, kind: ModelKind, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (e, d, a) = (config.embed_dim, config.state_dim, config.n_actions);
        let mut p = ParamStore::new();
        let ones = || Tensor::full(&[e], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        if kind.uses_returns() {
            p.push_linear_weight("embed_return.weight", 1, e, rng);
            p.push_linear_bias("embed_return.bias", 1, e, rng);
        }
        p.push_linear_weight("embed_state.weight", d, e, rng);
        p.push_linear_bias("embed_state.bias", d, e, rng);
        p.push_embedding("embed_action", a, e, rng);
        p.push_embedding("embed_timestep", config.max_timestep, e, rng);
        p.push("embed_ln.gain", ones());
        p.push("embed_ln.bias", zeros(e));
        for l in 0..config.n_layers {
            p.push(format!("block{l}.ln1.gain"), ones());
            p.push(format!("block{l}.ln1.bias"), zeros(e));
            for m in ["query", "key", "value", "proj"] {
                p.push_linear_weight(format!("block{l}.{m}.weight"), e, e, rng);
                p.push_linear_bias(format!("block{l}.{m}.bias"), e, e, rng);
            }
            p.push(format!("block{l}.ln2.gain"), ones());
            p.push(format!("block{l}.ln2.bias"), zeros(e));
            p.push_linear_weight(format!("block{l}.ff1.weight"), e, 4 * e, rng);
            p.push_linear_bias(format!("block{l}.ff1.bias"), e, 4 * e, rng);
            p.push_linear_weight(format!("block{l}.ff2.weight"), 4 * e, e, rng);
            p.push_linear_bias(format!("block{l}.ff2.bias"), 4 * e, e, rng);
        }
        p.push("final_ln.gain", ones());
        p.push("final_ln.bias", zeros(e));
        // Zero action head: the initial policy is exactly uniform.
        p.push("action_head.weight", Tensor::zeros(&[e, a]));
        p.push("action_head.bias", zeros(a));
        p.push_linear_weight("state_head.weight", e, d, rng);
        p.push_linear_bias("state_head.bias", e, d, rng);
        Ok(Self {
            config,
            kind,
            params: p,
            state_head_trained: false,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(
        config: DualSightConfig,
        kind: ModelKind,
        params: ParamStore<f32>,
        state_head_trained: bool,
    ) -> Result<Self> {
        let reference = Self::init(config, kind, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
        if reference.params.names() != params.names() {
            return Err(Error::contract("parameter names do not match the model configuration"));
        }
        for (i, (_, t)) in reference.params.iter().enumerate() {
            if t.shape() != params.get(i).shape() {
                return Err(Error::shape(
                    "model params",
                    t.shape(),
                    params.get(i).shape(),
                ));
            }
        }
        Ok(Self {
            params,
            state_head_trained,
            ..reference
        })
    }

    pub fn config(&self) -> &DualSightConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// False when the next-state head never received a training signal
    /// (state-loss weight zero); mortality metrics are then unavailable.
    pub fn state_head_trained(&self) -> bool {
        self.state_head_trained
    }

    pub fn set_state_head_trained(&mut self, trained: bool) {
        self.state_head_trained = trained;
    }

    fn tokens_per_step(&self) -> usize {
        if self.kind.uses_returns() {
            3
        } else {
            2
        }
    }

    fn p(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.find(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<'_, T>, vars: &[Var], x: Var, name: &str) -> Result<Var> {
        let h = g.matmul(x, self.p(vars, &format!("{name}.weight")))?;
        g.add_row(h, self.p(vars, &format!("{name}.bias")))
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<'_, T>, vars: &[Var], x: Var, name: &str) -> Result<Var> {
        g.layer_norm(x, self.p(vars, &format!("{name}.gain")), self.p(vars, &format!("{name}.bias")))
    }

    /// Batched forward pass. `vars` must come from binding this model's
    /// parameters (in any precision) into `g`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        vars: &[Var],
        windows: &[TokenSequence],
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (k, d) = (cfg.context_length, cfg.state_dim);
        if windows.is_empty() {
            return Err(Error::contract("forward on an empty batch"));
        }
        for w in windows {
            w.check(k, d)?;
        }
        let b = windows.len();
        let bk = b * k;
        let m = self.tokens_per_step();
        let seq_len = m * k;

        let mut states = Vec::with_capacity(bk * d);
        let mut returns = Vec::with_capacity(bk);
        let mut actions = Vec::with_capacity(bk);
        let mut timesteps = Vec::with_capacity(bk);
        for w in windows {
            states.extend(w.states.iter().flatten().map(|&v| T::of(f64::from(v))));
            returns.extend(w.returns.iter().map(|&v| T::of(f64::from(v))));
            actions.extend_from_slice(&w.actions);
            timesteps.extend(w.timesteps.iter().map(|&t| t.min(cfg.max_timestep - 1)));
        }

        let time = g.embedding_lookup(self.p(vars, "embed_timestep"), &timesteps)?;
        let s_in = g.constant(Tensor::new(vec![bk, d], states)?);
        let s_emb = self.linear(g, vars, s_in, "embed_state")?;
        let s_emb = g.add(s_emb, time)?;
        let a_emb = g.embedding_lookup(self.p(vars, "embed_action"), &actions)?;
        let a_emb = g.add(a_emb, time)?;
        let mut parts = Vec::with_capacity(m);
        if self.kind.uses_returns() {
            let r_in = g.constant(Tensor::new(vec![bk, 1], returns)?);
            let r_emb = self.linear(g, vars, r_in, "embed_return")?;
            parts.push(g.add(r_emb, time)?);
        }
        parts.push(s_emb);
        parts.push(a_emb);
        let stacked = g.concat_rows(&parts)?;

        // Interleave into per-window token order (r_0, s_0, a_0, r_1, ...).
        let mut order = Vec::with_capacity(b * seq_len);
        let mut key_real = Vec::with_capacity(b * seq_len);
        for (wi, w) in windows.iter().enumerate() {
            for step in 0..k {
                for modality in 0..m {
                    order.push(modality * bk + wi * k + step);
                    key_real.push(w.real[step]);
                }
            }
        }
        let x = g.gather_rows(stacked, &order)?;
        let x = self.norm(g, vars, x, "embed_ln")?;
        let mut x = g.dropout(x, cfg.dropout)?;

        let layout = AttentionLayout {
            n_seq: b,
            seq_len,
            n_heads: cfg.n_heads,
            key_real,
        };
        for l in 0..cfg.n_layers {
            let h = self.norm(g, vars, x, &format!("block{l}.ln1"))?;
            let q = self.linear(g, vars, h, &format!("block{l}.query"))?;
            let kk = self.linear(g, vars, h, &format!("block{l}.key"))?;
            let v = self.linear(g, vars, h, &format!("block{l}.value"))?;
            let att = g.attention(q, kk, v, layout.clone())?;
            let att = self.linear(g, vars, att, &format!("block{l}.proj"))?;
            let att = g.dropout(att, cfg.dropout)?;
            x = g.add(x, att)?;

            let h = self.norm(g, vars, x, &format!("block{l}.ln2"))?;
            let h = self.linear(g, vars, h, &format!("block{l}.ff1"))?;
            let h = g.relu(h);
            let h = self.linear(g, vars, h, &format!("block{l}.ff2"))?;
            let h = g.dropout(h, cfg.dropout)?;
            x = g.add(x, h)?;
        }
        let x = self.norm(g, vars, x, "final_ln")?;

        let state_rows: Vec<usize> = (0..bk).map(|r| r * m + m - 2).collect();
        let action_rows: Vec<usize> = (0..bk).map(|r| r * m + m - 1).collect();
        let at_state = g.gather_rows(x, &state_rows)?;
        let at_action = g.gather_rows(x, &action_rows)?;
        Ok(ForwardVars {
            action_logits: self.linear(g, vars, at_state, "action_head")?,
            next_state: self.linear(g, vars, at_action, "state_head")?,
        })
    }

    /// Eval-mode forward over a batch of windows, in chunks of
    /// [`PREDICT_CHUNK`] windows per graph.
    pub fn predict(&self, windows: &[TokenSequence]) -> Result<Vec<ModelOutput>> {
        let k = self.config.context_length;
        let mut outputs = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(PREDICT_CHUNK) {
            let mut g = Graph::<f32>::eval();
            let vars = self.params.bind(&mut g, false);
            let out = self.forward(&mut g, &vars, chunk)?;
            let (logits, states) = (g.value(out.action_logits), g.value(out.next_state));
            outputs.extend((0..chunk.len()).map(|w| ModelOutput {
                action_logits: (0..k).map(|s| logits.row(w * k + s).to_vec()).collect(),
                next_state_pred: (0..k).map(|s| states.row(w * k + s).to_vec()).collect(),
            }));
        }
        Ok(outputs)
    }

    pub fn dualsight_forward(&self, window: &TokenSequence) -> Result<ModelOutput> {
        Ok(self.predict(std::slice::from_ref(window))?.remove(0))
    }

    /// Greedy actions for the last step of each window, then the next-state
    /// prediction with that action fed back as the last action token.
    pub fn act_and_predict(&self, windows: &[TokenSequence]) -> Result<Vec<(usize, PatientState)>> {
        let first = self.predict(windows)?;
        let mut fed = windows.to_vec();
        let chosen: Vec<usize> = first
            .iter()
            .map(|o| argmax(o.action_logits.last().expect("K >= 1")))
            .collect();
        for (w, &a) in fed.iter_mut().zip(&chosen) {
            w.set_last_action(a);
        }
        let second = self.predict(&fed)?;
        Ok(chosen
            .into_iter()
            .zip(second)
            .map(|(a, mut o)| (a, o.next_state_pred.pop().expect("K >= 1")))
            .collect())
    }
}
