//! Implicit Q-learning: expectile value fitting, TD fitting of Q against the
//! value model, target tracking, and advantage-weighted policy extraction.
//!
//! All models take the state index as input; Q and policy models have one
//! output per action, the value model a single output.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{
    apply_update, polyak_update, ApproxError, Approximator, Input, ModelKind, ModelShape,
    OptimizerState, Schedule,
};
use crate::data::{empirical_support, sample_batch, DataError, Dataset, Transition};
use crate::expectile::{ExpectileError, LossVariant, Tau};
use crate::mdp::{sample_categorical, step as env_step, MdpError, TabularMdp};
use crate::oracle::{
    initial_value, policy_return, support_value_iteration, OracleError, QTable, TabularPolicy,
    ValueTable, ORACLE_TOL,
};
use crate::scalar::{argmax, softmax, Scalar};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{phase} loss diverged at gradient step {step}; config: {config}")]
    Divergence {
        phase: &'static str,
        step: u64,
        config: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Expectile(#[from] ExpectileError),
}

/// Hyperparameters. `Default` is the network setup (Adam 3e-4, 256x256 MLPs, 1M steps) with τ 0.95;
/// [`IqlConfig::tabular`] is the faster preset used for table models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqlConfig {
    pub tau: Tau,
    pub beta: f64,
    pub lr_v: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub polyak_rate: f64,
    pub td_steps: u64,
    pub policy_steps: u64,
    pub batch_size: usize,
    pub double_q: bool,
    pub loss_variant: LossVariant,
    pub adv_clip: f64,
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Gradient steps between metric records; 0 records only at phase ends.
    pub eval_interval: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            tau: Tau::new(0.95).expect("valid tau"),
            beta: 10.0,
            lr_v: 3e-4,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            polyak_rate: 0.005,
            td_steps: 1_000_000,
            policy_steps: 1_000_000,
            batch_size: 256,
            double_q: true,
            loss_variant: LossVariant::Expectile,
            adv_clip: 100.0,
            kind: ModelKind::Mlp,
            hidden: vec![256, 256],
            seed: 0,
            eval_interval: 10_000,
        }
    }
}

impl IqlConfig {
    /// Table models: larger steps, fewer iterations, single Q.
    pub fn tabular() -> Self {
        Self {
            lr_v: 3e-3,
            lr_q: 3e-3,
            lr_pi: 3e-3,
            polyak_rate: 0.05,
            td_steps: 20_000,
            policy_steps: 5_000,
            double_q: false,
            kind: ModelKind::Table,
            hidden: Vec::new(),
            eval_interval: 1_000,
            ..Self::default()
        }
    }

    /// Preset for a model kind: [`IqlConfig::tabular`] for tables, network defaults otherwise.
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Table => Self::tabular(),
            ModelKind::Linear => Self {
                kind,
                double_q: false,
                hidden: Vec::new(),
                ..Self::default()
            },
            ModelKind::Mlp => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: String| Err(LearnerError::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        for (name, lr) in [
            ("lr_v", self.lr_v),
            ("lr_q", self.lr_q),
            ("lr_pi", self.lr_pi),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return bad(format!(
                "polyak_rate must lie in (0, 1], got {}",
                self.polyak_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.adv_clip > 0.0) {
            return bad(format!("adv_clip must be positive, got {}", self.adv_clip));
        }
        if self.kind == ModelKind::Mlp && (self.hidden.is_empty() || self.hidden.contains(&0)) {
            return bad("mlp needs nonempty hidden widths, all >= 1".into());
        }
        Ok(())
    }

    fn shape(&self, n_states: usize, n_outputs: usize) -> ModelShape {
        match self.kind {
            ModelKind::Table => ModelShape::table(n_states, n_outputs),
            ModelKind::Linear => ModelShape::linear(n_states, n_outputs),
            ModelKind::Mlp => ModelShape::mlp(n_states, self.hidden.clone(), n_outputs),
        }
    }

    fn echo(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// `min(exp(β·adv), clip)`, floored at the smallest positive value so weights stay positive.
pub fn awr_weight<T: Scalar>(advantage: T, beta: T, clip: T) -> Option<T> {
    let w = (beta * advantage)
        .exp()
        .min(clip)
        .max(T::min_positive_value());
    w.is_finite().then_some(w).filter(|_| advantage.is_finite())
}

/// Where the Q regression target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdMode {
    /// `r + γ V(s')`.
    Implicit,
    /// `r + γ Q̂(s', a')` with the stored next action.
    Sarsa,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed: u64, id: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch)));
    rng.set_stream(id);
    rng
}

const TD_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counters {
    pub td_steps_done: u64,
    /// Policy updates, offline and online.
    pub policy_steps_done: u64,
    /// Update iterations of any phase: one per offline TD or policy iteration,
    /// one per online cycle.
    pub grad_steps: u64,
}

/// Parameters, optimizer state, counters and random streams of one run.
#[derive(Debug, Clone)]
pub struct LearnerState<T> {
    pub n_states: usize,
    pub n_actions: usize,
    pub value: Approximator<T>,
    pub q1: Approximator<T>,
    pub q1_target: Approximator<T>,
    pub q2: Option<Approximator<T>>,
    pub q2_target: Option<Approximator<T>>,
    pub policy: Approximator<T>,
    pub opt_value: OptimizerState<T>,
    pub opt_q1: OptimizerState<T>,
    pub opt_q2: Option<OptimizerState<T>>,
    pub opt_policy: OptimizerState<T>,
    pub counters: Counters,
    seed: u64,
    td_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    query_log: Option<BTreeSet<(usize, usize)>>,
}

impl<T: Scalar> LearnerState<T> {
    pub fn new(cfg: &IqlConfig, n_states: usize, n_actions: usize) -> Result<Self, LearnerError> {
        cfg.validate()?;
        if n_states == 0 || n_actions == 0 {
            return Err(LearnerError::Config(
                "need at least one state and one action".into(),
            ));
        }
        let init = |k: u64, outputs: usize| {
            Approximator::<T>::init(&cfg.shape(n_states, outputs), splitmix(cfg.seed ^ k))
        };
        let value = init(11, 1)?;
        let q1 = init(12, n_actions)?;
        let q2 = if cfg.double_q {
            Some(init(13, n_actions)?)
        } else {
            None
        };
        let policy = init(14, n_actions)?;
        let constant = |m: &Approximator<T>, lr: f64| {
            OptimizerState::for_model(m, T::lit(lr), Schedule::Constant)
        };
        Ok(Self {
            n_states,
            n_actions,
            opt_value: constant(&value, cfg.lr_v),
            opt_q1: constant(&q1, cfg.lr_q),
            opt_q2: q2.as_ref().map(|m| constant(m, cfg.lr_q)),
            opt_policy: OptimizerState::for_model(
                &policy,
                T::lit(cfg.lr_pi),
                Schedule::Cosine {
                    horizon: cfg.policy_steps,
                    start: 0,
                },
            ),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            value,
            q1,
            q2,
            policy,
            counters: Counters::default(),
            seed: cfg.seed,
            td_rng: stream(cfg.seed, TD_STREAM, 0),
            policy_rng: stream(cfg.seed, POLICY_STREAM, 0),
            query_log: None,
        })
    }

    /// Start recording every `(s, a)` at which a Q model is evaluated during updates.
    pub fn enable_query_log(&mut self) {
        self.query_log = Some(BTreeSet::new());
    }

    pub fn query_log(&self) -> Option<&BTreeSet<(usize, usize)>> {
        self.query_log.as_ref()
    }

    fn log_query(&mut self, s: usize, a: usize) {
        if let Some(log) = self.query_log.as_mut() {
            log.insert((s, a));
        }
    }

    fn check_transition(&self, t: &Transition<T>) -> Result<(), LearnerError> {
        if t.state >= self.n_states || t.next_state >= self.n_states || t.action >= self.n_actions {
            return Err(LearnerError::Data(DataError::Invalid(format!(
                "transition ({}, {}, {}) outside {} states x {} actions",
                t.state, t.action, t.next_state, self.n_states, self.n_actions
            ))));
        }
        Ok(())
    }

    /// Each target Q at `(s, a)`; the conservative target is their minimum.
    pub fn target_qs(&mut self, s: usize, a: usize) -> Result<(T, Option<T>), LearnerError> {
        self.log_query(s, a);
        let x = Input::Index(s);
        let q1 = self.q1_target.eval_at(&x, a)?;
        let q2 = match &self.q2_target {
            Some(m) => Some(m.eval_at(&x, a)?),
            None => None,
        };
        Ok((q1, q2))
    }

    fn target_q(&mut self, s: usize, a: usize) -> Result<T, LearnerError> {
        let (q1, q2) = self.target_qs(s, a)?;
        Ok(q2.map_or(q1, |q2| q1.min(q2)))
    }

    fn value_at(&self, s: usize) -> Result<T, LearnerError> {
        Ok(self.value.eval_at(&Input::Index(s), 0)?)
    }

    /// Mean `L(Q̂(s,a) − V(s))` over the batch and its gradient in the value parameters.
    pub fn value_loss_and_grad(
        &mut self,
        batch: &[Transition<T>],
        cfg: &IqlConfig,
    ) -> Result<(T, Vec<T>), LearnerError> {
        nonempty(batch)?;
        let n = T::from_usize_lossy(batch.len());
        let mut grad = vec![T::zero(); self.value.params().len()];
        let mut loss = T::zero();
        for t in batch {
            self.check_transition(t)?;
            let target = self.target_q(t.state, t.action)?;
            let x = Input::Index(t.state);
            let u = target - self.value.eval_at(&x, 0)?;
            loss += cfg.loss_variant.loss(u, cfg.tau);
            let cot = [-cfg.loss_variant.grad(u, cfg.tau) / n];
            self.value.accumulate_grad(&x, &cot, &mut grad)?;
        }
        Ok((loss / n, grad))
    }

    /// Regression target for one transition under `mode`.
    pub fn q_target_for(
        &mut self,
        t: &Transition<T>,
        discount: T,
        mode: TdMode,
    ) -> Result<Option<T>, LearnerError> {
        match mode {
            TdMode::Implicit => Ok(Some(td_target(
                t.next_state,
                t.reward,
                t.done,
                self,
                discount,
            )?)),
            TdMode::Sarsa if t.done => Ok(Some(t.reward)),
            TdMode::Sarsa => match t.next_action {
                Some(na) => Ok(Some(t.reward + discount * self.target_q(t.next_state, na)?)),
                None => Ok(None),
            },
        }
    }

    /// Mean squared TD error of Q model `which` (0 or 1) and its gradient.
    /// Transitions without a usable target (SARSA without a next action) are skipped.
    pub fn q_loss_and_grad(
        &mut self,
        which: usize,
        batch: &[Transition<T>],
        discount: T,
        mode: TdMode,
    ) -> Result<(T, Vec<T>), LearnerError> {
        nonempty(batch)?;
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            self.check_transition(t)?;
            if let Some(y) = self.q_target_for(t, discount, mode)? {
                self.log_query(t.state, t.action);
                targets.push((t.state, t.action, y));
            }
        }
        let model = match which {
            0 => &self.q1,
            1 => self
                .q2
                .as_ref()
                .ok_or_else(|| LearnerError::Config("second Q model is disabled".into()))?,
            _ => return Err(LearnerError::Config(format!("no Q model {which}"))),
        };
        let mut grad = vec![T::zero(); model.params().len()];
        if targets.is_empty() {
            return Ok((T::zero(), grad));
        }
        let n = T::from_usize_lossy(targets.len());
        let mut loss = T::zero();
        let mut cot = vec![T::zero(); self.n_actions];
        for (s, a, y) in targets {
            let x = Input::Index(s);
            let err = model.eval_at(&x, a)? - y;
            loss += err * err;
            cot[a] = T::lit(2.0) * err / n;
            model.accumulate_grad(&x, &cot, &mut grad)?;
            cot[a] = T::zero();
        }
        Ok((loss / n, grad))
    }

    /// Mean `−w·log π(a|s)`, its gradient in the policy parameters, and the mean advantage.
    pub fn policy_loss_and_grad(
        &mut self,
        batch: &[Transition<T>],
        cfg: &IqlConfig,
    ) -> Result<(T, Vec<T>, T), LearnerError> {
        nonempty(batch)?;
        let n = T::from_usize_lossy(batch.len());
        let (beta, clip) = (T::lit(cfg.beta), T::lit(cfg.adv_clip));
        let mut grad = vec![T::zero(); self.policy.params().len()];
        let mut loss = T::zero();
        let mut adv_sum = T::zero();
        for t in batch {
            self.check_transition(t)?;
            let adv = self.target_q(t.state, t.action)? - self.value_at(t.state)?;
            let w = awr_weight(adv, beta, clip).ok_or_else(|| LearnerError::Divergence {
                phase: "policy",
                step: self.counters.grad_steps,
                config: cfg.echo(),
            })?;
            adv_sum += adv;
            let x = Input::Index(t.state);
            let logits = self.policy.eval(&x)?;
            let p = softmax(&logits);
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + logits.iter().map(|z| (*z - m).exp()).sum::<T>().ln();
            loss -= w * (logits[t.action] - lse);
            let cot: Vec<T> = p
                .iter()
                .enumerate()
                .map(|(a, pa)| w * (*pa - if a == t.action { T::one() } else { T::zero() }) / n)
                .collect();
            self.policy.accumulate_grad(&x, &cot, &mut grad)?;
        }
        Ok((loss / n, grad, adv_sum / n))
    }

    fn diverged(&self, phase: &'static str, cfg: &IqlConfig) -> LearnerError {
        LearnerError::Divergence {
            phase,
            step: self.counters.grad_steps,
            config: cfg.echo(),
        }
    }

    fn step_model(
        loss: T,
        grad: &[T],
        model: &mut Approximator<T>,
        opt: &mut OptimizerState<T>,
    ) -> Result<(), Option<ApproxError>> {
        if !loss.is_finite() {
            return Err(None);
        }
        match apply_update(model, opt, grad) {
            Ok(()) => Ok(()),
            Err(ApproxError::NonFiniteGradient(_)) | Err(ApproxError::NonFiniteParameter(_)) => {
                Err(None)
            }
            Err(e) => Err(Some(e)),
        }
    }

    fn finish(
        &self,
        phase: &'static str,
        cfg: &IqlConfig,
        r: Result<(), Option<ApproxError>>,
    ) -> Result<(), LearnerError> {
        match r {
            Ok(()) => Ok(()),
            Err(None) => Err(self.diverged(phase, cfg)),
            Err(Some(e)) => Err(e.into()),
        }
    }

    /// One optimizer step on the value loss.
    pub fn update_value(
        &mut self,
        batch: &[Transition<T>],
        cfg: &IqlConfig,
    ) -> Result<T, LearnerError> {
        let (loss, grad) = self.value_loss_and_grad(batch, cfg)?;
        let r = Self::step_model(loss, &grad, &mut self.value, &mut self.opt_value);
        self.finish("value", cfg, r)?;
        Ok(loss)
    }

    /// One optimizer step on each Q model's TD loss, then Polyak-averages the
    /// targets. Returns the mean loss over the Q models.
    pub fn update_q(
        &mut self,
        batch: &[Transition<T>],
        cfg: &IqlConfig,
        discount: T,
        mode: TdMode,
    ) -> Result<T, LearnerError> {
        let (l1, g1) = self.q_loss_and_grad(0, batch, discount, mode)?;
        let second = if self.q2.is_some() {
            Some(self.q_loss_and_grad(1, batch, discount, mode)?)
        } else {
            None
        };
        let r = Self::step_model(l1, &g1, &mut self.q1, &mut self.opt_q1);
        self.finish("q", cfg, r)?;
        let mut loss = l1;
        if let (Some((l2, g2)), Some(q2), Some(opt)) =
            (&second, self.q2.as_mut(), self.opt_q2.as_mut())
        {
            let r = Self::step_model(*l2, g2, q2, opt);
            self.finish("q", cfg, r)?;
            loss = (l1 + *l2) / T::lit(2.0);
        }
        let rate = T::lit(cfg.polyak_rate);
        polyak_update(&mut self.q1_target, &self.q1, rate)?;
        if let (Some(t), Some(q)) = (self.q2_target.as_mut(), self.q2.as_ref()) {
            polyak_update(t, q, rate)?;
        }
        Ok(loss)
    }

    /// One actor step; returns the loss and the batch's mean advantage.
    pub fn update_policy(
        &mut self,
        batch: &[Transition<T>],
        cfg: &IqlConfig,
    ) -> Result<(T, T), LearnerError> {
        let (loss, grad, adv) = self.policy_loss_and_grad(batch, cfg)?;
        let r = Self::step_model(loss, &grad, &mut self.policy, &mut self.opt_policy);
        self.finish("policy", cfg, r)?;
        Ok((loss, adv))
    }

    /// Value step then Q step (with target update) on one batch from the TD stream.
    pub fn td_iteration(
        &mut self,
        transitions: &[Transition<T>],
        cfg: &IqlConfig,
        discount: T,
        mode: TdMode,
    ) -> Result<(T, T), LearnerError> {
        let batch = sample_batch(transitions, cfg.batch_size, &mut self.td_rng)?;
        let vl = match mode {
            TdMode::Implicit => self.update_value(&batch, cfg)?,
            TdMode::Sarsa => self.update_value(
                &batch,
                &IqlConfig {
                    tau: Tau::new(0.5)?,
                    loss_variant: LossVariant::Expectile,
                    ..cfg.clone()
                },
            )?,
        };
        let ql = self.update_q(&batch, cfg, discount, mode)?;
        self.counters.td_steps_done += 1;
        Ok((vl, ql))
    }

    /// One actor step on a batch from the policy stream.
    pub fn policy_iteration(
        &mut self,
        transitions: &[Transition<T>],
        cfg: &IqlConfig,
    ) -> Result<(T, T), LearnerError> {
        let batch = sample_batch(transitions, cfg.batch_size, &mut self.policy_rng)?;
        let out = self.update_policy(&batch, cfg)?;
        self.counters.policy_steps_done += 1;
        Ok(out)
    }

    pub fn value_table(&self) -> Result<ValueTable<T>, LearnerError> {
        Ok(ValueTable {
            v: (0..self.n_states)
                .map(|s| self.value_at(s))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Online `Q₁` for every pair (evaluation only, not logged).
    pub fn q_table(&self) -> Result<QTable<T>, LearnerError> {
        let rows = (0..self.n_states)
            .map(|s| self.q1.eval(&Input::Index(s)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QTable::from_rows(&rows))
    }

    pub fn policy_probs(&self) -> Result<TabularPolicy<T>, LearnerError> {
        let rows = (0..self.n_states)
            .map(|s| Ok(softmax(&self.policy.eval(&Input::Index(s))?)))
            .collect::<Result<Vec<_>, LearnerError>>()?;
        Ok(TabularPolicy::from_rows(rows)?)
    }

    /// Per-state argmax of the policy logits (ties to the lowest action).
    pub fn greedy_actions(&self) -> Result<Vec<usize>, LearnerError> {
        (0..self.n_states)
            .map(|s| Ok(argmax(&self.policy.eval(&Input::Index(s))?)))
            .collect()
    }

    pub fn greedy_policy(&self) -> Result<TabularPolicy<T>, LearnerError> {
        Ok(TabularPolicy::deterministic(
            &self.greedy_actions()?,
            self.n_actions,
        ))
    }

    /// Exact return of the greedy extracted policy.
    pub fn greedy_return(&self, mdp: &TabularMdp<T>) -> Result<T, LearnerError> {
        Ok(policy_return(mdp, &self.greedy_policy()?)?)
    }

    pub fn to_checkpoint(&self, cfg: &IqlConfig) -> Checkpoint<T> {
        Checkpoint {
            config: cfg.clone(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            counters: self.counters,
            value: self.value.clone(),
            q1: self.q1.clone(),
            q1_target: self.q1_target.clone(),
            q2: self.q2.clone(),
            q2_target: self.q2_target.clone(),
            policy: self.policy.clone(),
            opt_value: self.opt_value.clone(),
            opt_q1: self.opt_q1.clone(),
            opt_q2: self.opt_q2.clone(),
            opt_policy: self.opt_policy.clone(),
        }
    }

    /// Restores a state; random streams are re-derived from the seed and the step counter.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<(Self, IqlConfig), LearnerError> {
        ck.config.validate()?;
        let bad = |m: &str| Err(LearnerError::Checkpoint(m.into()));
        if ck.q2.is_some() != ck.config.double_q
            || ck.q2_target.is_some() != ck.config.double_q
            || ck.opt_q2.is_some() != ck.config.double_q
        {
            return bad("second Q model presence disagrees with double_q");
        }
        let expect = |m: &Approximator<T>, outputs: usize| {
            m.shape() == &ck.config.shape(ck.n_states, outputs)
        };
        if !expect(&ck.value, 1)
            || !expect(&ck.q1, ck.n_actions)
            || ck.q1_target.shape() != ck.q1.shape()
            || !expect(&ck.policy, ck.n_actions)
            || ck.q2.as_ref().is_some_and(|m| !expect(m, ck.n_actions))
            || ck
                .q2_target
                .as_ref()
                .is_some_and(|m| !expect(m, ck.n_actions))
        {
            return bad("model shapes disagree with the config");
        }
        let opt_ok = |o: &OptimizerState<T>, m: &Approximator<T>| {
            o.first_moment.len() == m.params().len() && o.second_moment.len() == m.params().len()
        };
        if !opt_ok(&ck.opt_value, &ck.value)
            || !opt_ok(&ck.opt_q1, &ck.q1)
            || !opt_ok(&ck.opt_policy, &ck.policy)
            || matches!((&ck.opt_q2, &ck.q2), (Some(o), Some(m)) if !opt_ok(o, m))
        {
            return bad("optimizer state sizes disagree with the models");
        }
        let epoch = ck.counters.grad_steps;
        let seed = ck.config.seed;
        let state = Self {
            n_states: ck.n_states,
            n_actions: ck.n_actions,
            value: ck.value,
            q1: ck.q1,
            q1_target: ck.q1_target,
            q2: ck.q2,
            q2_target: ck.q2_target,
            policy: ck.policy,
            opt_value: ck.opt_value,
            opt_q1: ck.opt_q1,
            opt_q2: ck.opt_q2,
            opt_policy: ck.opt_policy,
            counters: ck.counters,
            seed,
            td_rng: stream(seed, TD_STREAM, epoch),
            policy_rng: stream(seed, POLICY_STREAM, epoch),
            query_log: None,
        };
        Ok((state, ck.config))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn nonempty<T>(batch: &[Transition<T>]) -> Result<(), LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::Config("empty batch".into()));
    }
    Ok(())
}

/// `r` if `done`, else `r + γ·V(s')`. Reads only the value model.
pub fn td_target<T: Scalar>(
    next_state: usize,
    reward: T,
    done: bool,
    learner: &LearnerState<T>,
    discount: T,
) -> Result<T, LearnerError> {
    if done {
        return Ok(reward);
    }
    Ok(reward + discount * learner.value_at(next_state)?)
}

/// Everything a run needs to resume: config, counters, models and optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub config: IqlConfig,
    pub n_states: usize,
    pub n_actions: usize,
    pub counters: Counters,
    pub value: Approximator<T>,
    pub q1: Approximator<T>,
    pub q1_target: Approximator<T>,
    pub q2: Option<Approximator<T>>,
    pub q2_target: Option<Approximator<T>>,
    pub policy: Approximator<T>,
    pub opt_value: OptimizerState<T>,
    pub opt_q1: OptimizerState<T>,
    pub opt_q2: Option<OptimizerState<T>>,
    pub opt_policy: OptimizerState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, LearnerError> {
        serde_json::from_str(text).map_err(|e| LearnerError::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Td,
    Policy,
    Online,
}

/// Averages over one logging interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub phase: Phase,
    pub grad_step: u64,
    pub value_loss: Option<f64>,
    pub q_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub mean_advantage: Option<f64>,
    /// Exact return of the greedy extracted policy.
    pub policy_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration_eps: Option<f64>,
    /// Seconds since the phase started. Kept out of the serialized form so
    /// that reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<MetricRecord>,
}

impl Metrics {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("metric serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LearnerError> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    LearnerError::Data(DataError::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn final_return(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.policy_return)
    }

    pub fn extend(&mut self, other: Metrics) {
        self.records.extend(other.records);
    }
}

#[derive(Default)]
struct Interval {
    v: f64,
    q: f64,
    pi: f64,
    adv: f64,
    n_td: u64,
    n_pi: u64,
}

impl Interval {
    fn td<T: Scalar>(&mut self, (v, q): (T, T)) {
        self.v += v.as_f64();
        self.q += q.as_f64();
        self.n_td += 1;
    }

    fn pi<T: Scalar>(&mut self, (l, a): (T, T)) {
        self.pi += l.as_f64();
        self.adv += a.as_f64();
        self.n_pi += 1;
    }

    fn flush(
        &mut self,
        phase: Phase,
        grad_step: u64,
        ret: Option<f64>,
        started: Instant,
    ) -> MetricRecord {
        let mean = |s: f64, n: u64| (n > 0).then(|| s / n as f64);
        let rec = MetricRecord {
            phase,
            grad_step,
            value_loss: mean(self.v, self.n_td),
            q_loss: mean(self.q, self.n_td),
            policy_loss: mean(self.pi, self.n_pi),
            mean_advantage: mean(self.adv, self.n_pi),
            policy_return: ret,
            env_steps: None,
            exploration_eps: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        *self = Interval::default();
        rec
    }
}

fn due(cfg: &IqlConfig, i: u64, total: u64) -> bool {
    i + 1 == total || (cfg.eval_interval > 0 && (i + 1) % cfg.eval_interval == 0)
}

fn check_dataset<T: Scalar>(ds: &Dataset<T>, mdp: &TabularMdp<T>) -> Result<(), LearnerError> {
    if ds.is_empty() {
        return Err(LearnerError::Data(DataError::Parameter(
            "dataset is empty".into(),
        )));
    }
    if ds.meta.n_states != mdp.n_states || ds.meta.n_actions != mdp.n_actions {
        return Err(LearnerError::Data(DataError::Invalid(format!(
            "dataset is for {}x{} but the MDP is {}x{}",
            ds.meta.n_states, ds.meta.n_actions, mdp.n_states, mdp.n_actions
        ))));
    }
    Ok(())
}

impl<T: Scalar> LearnerState<T> {
    /// `cfg.td_steps` TD iterations, recording losses into `metrics`.
    pub fn run_td_phase(
        &mut self,
        cfg: &IqlConfig,
        transitions: &[Transition<T>],
        discount: T,
        mode: TdMode,
        metrics: &mut Metrics,
    ) -> Result<(), LearnerError> {
        let started = Instant::now();
        let mut acc = Interval::default();
        for i in 0..cfg.td_steps {
            acc.td(self.td_iteration(transitions, cfg, discount, mode)?);
            self.counters.grad_steps += 1;
            if due(cfg, i, cfg.td_steps) {
                metrics
                    .records
                    .push(acc.flush(Phase::Td, self.counters.grad_steps, None, started));
            }
        }
        Ok(())
    }

    /// `cfg.policy_steps` actor iterations, recording losses and exact returns.
    pub fn run_policy_phase(
        &mut self,
        cfg: &IqlConfig,
        transitions: &[Transition<T>],
        mdp: &TabularMdp<T>,
        metrics: &mut Metrics,
    ) -> Result<(), LearnerError> {
        let started = Instant::now();
        let mut acc = Interval::default();
        for i in 0..cfg.policy_steps {
            acc.pi(self.policy_iteration(transitions, cfg)?);
            self.counters.grad_steps += 1;
            if due(cfg, i, cfg.policy_steps) {
                let ret = self.greedy_return(mdp)?.as_f64();
                metrics.records.push(acc.flush(
                    Phase::Policy,
                    self.counters.grad_steps,
                    Some(ret),
                    started,
                ));
            }
        }
        Ok(())
    }
}

fn train<T: Scalar>(
    cfg: &IqlConfig,
    ds: &Dataset<T>,
    mdp: &TabularMdp<T>,
    mode: TdMode,
    log_queries: bool,
) -> Result<(LearnerState<T>, Metrics), LearnerError> {
    check_dataset(ds, mdp)?;
    let mut state = LearnerState::new(cfg, mdp.n_states, mdp.n_actions)?;
    if log_queries {
        state.enable_query_log();
    }
    let mut metrics = Metrics::default();
    state.run_td_phase(cfg, &ds.transitions, mdp.discount, mode, &mut metrics)?;
    state.run_policy_phase(cfg, &ds.transitions, mdp, &mut metrics)?;
    Ok((state, metrics))
}

/// TD phase then policy phase. The MDP is used only for its discount and for
/// evaluating the extracted policy.
pub fn train_offline<T: Scalar>(
    cfg: &IqlConfig,
    ds: &Dataset<T>,
    mdp: &TabularMdp<T>,
) -> Result<(LearnerState<T>, Metrics), LearnerError> {
    train(cfg, ds, mdp, TdMode::Implicit, false)
}

/// As [`train_offline`], with every Q evaluation recorded (see [`LearnerState::query_log`]).
pub fn train_offline_instrumented<T: Scalar>(
    cfg: &IqlConfig,
    ds: &Dataset<T>,
    mdp: &TabularMdp<T>,
) -> Result<(LearnerState<T>, Metrics), LearnerError> {
    train(cfg, ds, mdp, TdMode::Implicit, true)
}

/// SARSA fitting of the behaviour Q with a τ = 0.5 value fit, then the same
/// policy extraction.
pub fn train_onestep_baseline<T: Scalar>(
    cfg: &IqlConfig,
    ds: &Dataset<T>,
    mdp: &TabularMdp<T>,
) -> Result<(LearnerState<T>, Metrics), LearnerError> {
    train(cfg, ds, mdp, TdMode::Sarsa, false)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub learner: LearnerState<T>,
    pub metrics: Metrics,
    /// Offline transitions followed by the collected ones.
    pub buffer: Vec<Transition<T>>,
}

fn act<T: Scalar, R: Rng + ?Sized>(
    learner: &LearnerState<T>,
    s: usize,
    eps: f64,
    rng: &mut R,
) -> Result<usize, LearnerError> {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        return Ok(rng.gen_range(0..learner.n_actions));
    }
    Ok(argmax(&learner.policy.eval(&Input::Index(s))?))
}

/// Online continuation: ε-greedy acting from the extracted policy, with one
/// value/Q/target/policy cycle per environment step on batches from the
/// growing replay buffer. The actor's cosine schedule restarts over `env_steps`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_online<T: Scalar, R: Rng + ?Sized>(
    mut learner: LearnerState<T>,
    cfg: &IqlConfig,
    mdp: &TabularMdp<T>,
    ds: &Dataset<T>,
    env_steps: u64,
    exploration_eps: f64,
    max_episode_steps: usize,
    rng: &mut R,
) -> Result<FinetuneOutcome<T>, LearnerError> {
    cfg.validate()?;
    check_dataset(ds, mdp)?;
    if env_steps == 0 {
        return Err(LearnerError::Config("env_steps must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&exploration_eps) {
        return Err(LearnerError::Config(format!(
            "exploration_eps must lie in [0, 1], got {exploration_eps}"
        )));
    }
    if max_episode_steps == 0 {
        return Err(LearnerError::Config(
            "max_episode_steps must be >= 1".into(),
        ));
    }
    if learner.n_states != mdp.n_states || learner.n_actions != mdp.n_actions {
        return Err(LearnerError::Config(
            "learner and MDP dimensions differ".into(),
        ));
    }
    learner.opt_policy.schedule = Schedule::Cosine {
        horizon: env_steps,
        start: learner.opt_policy.step,
    };
    let mut buffer = ds.transitions.clone();
    let mut metrics = Metrics::default();
    let started = Instant::now();
    let mut acc = Interval::default();

    let reset = |rng: &mut R| sample_categorical(&mdp.initial_dist, rng);
    let mut s = reset(rng);
    let mut a = act(&learner, s, exploration_eps, rng)?;
    let mut t_in_episode = 0usize;
    for i in 0..env_steps {
        let (ns, r, done) = env_step(mdp, s, a, rng)?;
        t_in_episode += 1;
        let na = if done {
            None
        } else {
            Some(act(&learner, ns, exploration_eps, rng)?)
        };
        buffer.push(Transition {
            state: s,
            action: a,
            reward: r,
            next_state: ns,
            next_action: na,
            done,
        });
        if done || t_in_episode >= max_episode_steps {
            s = reset(rng);
            a = act(&learner, s, exploration_eps, rng)?;
            t_in_episode = 0;
        } else {
            s = ns;
            a = na.expect("non-terminal step has a next action");
        }

        acc.td(learner.td_iteration(&buffer, cfg, mdp.discount, TdMode::Implicit)?);
        acc.pi(learner.policy_iteration(&buffer, cfg)?);
        learner.counters.grad_steps += 1;
        if due(cfg, i, env_steps) {
            let ret = learner.greedy_return(mdp)?.as_f64();
            let mut rec = acc.flush(
                Phase::Online,
                learner.counters.grad_steps,
                Some(ret),
                started,
            );
            rec.env_steps = Some(i + 1);
            rec.exploration_eps = Some(exploration_eps);
            metrics.records.push(rec);
        }
    }
    Ok(FinetuneOutcome {
        learner,
        metrics,
        buffer,
    })
}

/// Return normalization `(J − J_uniform) / (J_supp* − J_uniform)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnScale {
    pub uniform: f64,
    pub support_optimal: f64,
}

impl ReturnScale {
    /// Uniform-policy return and the best return achievable within the data's support.
    pub fn compute<T: Scalar>(mdp: &TabularMdp<T>, ds: &Dataset<T>) -> Result<Self, LearnerError> {
        let uniform =
            policy_return(mdp, &TabularPolicy::uniform(mdp.n_states, mdp.n_actions))?.as_f64();
        let support = empirical_support(ds, mdp.n_states, mdp.n_actions);
        let sol = support_value_iteration(mdp, &support, T::lit(ORACLE_TOL))?;
        Ok(Self {
            uniform,
            support_optimal: initial_value(mdp, &sol.values).as_f64(),
        })
    }

    /// Undefined (NaN) when the two reference returns coincide.
    pub fn normalize(&self, j: f64) -> f64 {
        let den = self.support_optimal - self.uniform;
        if den.abs() < 1e-12 {
            return f64::NAN;
        }
        (j - self.uniform) / den
    }
}

/// One τ of a sweep: per-seed results in seed order plus summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub returns: Vec<f64>,
    pub normalized: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_normalized: f64,
    pub std_normalized: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `train_offline` for every (τ, seed) cell, `threads` cells at a time.
pub fn sweep_tau<T: Scalar>(
    template: &IqlConfig,
    taus: &[Tau],
    ds: &Dataset<T>,
    mdp: &TabularMdp<T>,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>, LearnerError> {
    if taus.is_empty() || seeds.is_empty() {
        return Err(LearnerError::Config(
            "sweep needs at least one tau and one seed".into(),
        ));
    }
    let scale = ReturnScale::compute(mdp, ds)?;
    let cells: Vec<(usize, usize)> = (0..taus.len())
        .flat_map(|i| (0..seeds.len()).map(move |j| (i, j)))
        .collect();
    let results: Mutex<Vec<Option<Result<f64, LearnerError>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, j)) = cells.get(k) else { break };
                let cfg = IqlConfig {
                    tau: taus[i],
                    seed: seeds[j],
                    ..template.clone()
                };
                let out = train_offline(&cfg, ds, mdp)
                    .and_then(|(st, _)| Ok(st.greedy_return(mdp)?.as_f64()));
                results.lock().expect("no poisoned workers")[k] = Some(out);
            });
        }
    });
    let mut flat = Vec::with_capacity(cells.len());
    for r in results.into_inner().expect("no poisoned workers") {
        flat.push(r.expect("every cell ran")?);
    }
    Ok(taus
        .iter()
        .enumerate()
        .map(|(i, tau)| {
            let returns = flat[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let normalized: Vec<f64> = returns.iter().map(|j| scale.normalize(*j)).collect();
            let (mean_return, std_return) = mean_std(&returns);
            let (mean_normalized, std_normalized) = mean_std(&normalized);
            SweepRow {
                tau: tau.get(),
                returns,
                normalized,
                mean_return,
                std_return,
                mean_normalized,
                std_normalized,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        empirical_behavior, generate_dataset, mixture_components, DatasetMeta, UnvisitedRows,
    };
    use crate::mdp::{make_umaze, UMAZE_START};
    use proptest::prelude::*;

    fn table_cfg(tau: f64) -> IqlConfig {
        IqlConfig {
            tau: Tau::new(tau).unwrap(),
            ..IqlConfig::tabular()
        }
    }

    fn tr(s: usize, a: usize, r: f64, ns: usize, done: bool) -> Transition<f64> {
        Transition {
            state: s,
            action: a,
            reward: r,
            next_state: ns,
            next_action: if done { None } else { Some(0) },
            done,
        }
    }

    fn dataset(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Transition<f64>>,
    ) -> Dataset<f64> {
        Dataset {
            transitions,
            episode_starts: vec![0],
            meta: DatasetMeta {
                mdp: "test".into(),
                n_states,
                n_actions,
                mixture: Vec::new(),
                seed: 0,
                max_steps: 100,
                unvisited_behavior: "uniform".into(),
            },
        }
    }

    fn maze_data(spec: &str, seed: u64) -> (TabularMdp<f64>, Dataset<f64>) {
        let mdp = make_umaze(0.25, 10.0, 0.9).unwrap();
        let ds =
            generate_dataset(&mdp, &mixture_components(spec, &mdp).unwrap(), 100, seed).unwrap();
        (mdp, ds)
    }

    #[test]
    fn td_target_conventions() {
        let mut l = LearnerState::<f64>::new(&table_cfg(0.7), 3, 2).unwrap();
        assert_eq!(td_target(1, 10.0, true, &l, 0.9).unwrap(), 10.0);
        assert_eq!(td_target(1, 0.5, false, &l, 0.9).unwrap(), 0.5);
        l.value.params_mut()[2] = 2.0;
        assert!((td_target(2, 0.0, false, &l, 0.9).unwrap() - 1.8).abs() < 1e-15);
    }

    #[test]
    fn symmetric_value_loss_is_half_mse() {
        let cfg = table_cfg(0.5);
        let mut l = LearnerState::<f64>::new(&cfg, 2, 2).unwrap();
        l.q1_target
            .params_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        l.value.params_mut().copy_from_slice(&[0.25, -1.0]);
        let batch = [
            tr(0, 0, 0.0, 1, false),
            tr(0, 1, 0.0, 1, false),
            tr(1, 1, 0.0, 0, false),
        ];
        let (loss, grad) = l.value_loss_and_grad(&batch, &cfg).unwrap();
        // Hand-built MSE: mean (q - v)², gradient -2 mean (q - v) per visited state.
        let res = [1.0 - 0.25, -2.0 - 0.25, 3.0 + 1.0];
        let mse = res.iter().map(|u| u * u).sum::<f64>() / 3.0;
        let mse_grad = [-2.0 * (res[0] + res[1]) / 3.0, -2.0 * res[2] / 3.0];
        assert!((loss - 0.5 * mse).abs() < 1e-12);
        for (g, m) in grad.iter().zip(mse_grad) {
            assert!((g - 0.5 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn value_gradient_single_transition() {
        let cfg = table_cfg(0.7);
        let mut l = LearnerState::<f64>::new(&cfg, 2, 2).unwrap();
        l.q1_target.params_mut()[0] = 1.0;
        let batch = [tr(0, 0, 0.0, 1, false)];
        let (_, grad) = l.value_loss_and_grad(&batch, &cfg).unwrap();
        assert!((grad[0] + 1.4).abs() < 1e-12);
        let h = 1e-6;
        let mut probe = |d: f64| {
            l.value.params_mut()[0] = d;
            l.value_loss_and_grad(&batch, &cfg).unwrap().0
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h);
        assert!((fd + 1.4).abs() < 1e-6);
        l.value.params_mut()[0] = 0.0;
        l.update_value(&batch, &cfg).unwrap();
        assert!(l.value.params()[0] > 0.0);
    }

    #[test]
    fn value_at_fixed_point_has_zero_loss() {
        let cfg = table_cfg(0.9);
        let mut l = LearnerState::<f64>::new(&cfg, 2, 1).unwrap();
        l.q1_target.params_mut().copy_from_slice(&[3.0, -1.0]);
        l.value.params_mut().copy_from_slice(&[3.0, -1.0]);
        let batch = [tr(0, 0, 0.0, 1, false), tr(1, 0, 0.0, 0, false)];
        let before = l.value.params().to_vec();
        let loss = l.update_value(&batch, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(l.value.params(), &before[..]);
    }

    #[test]
    fn q_regresses_to_terminal_reward() {
        let cfg = table_cfg(0.7);
        let mut l = LearnerState::<f64>::new(&cfg, 2, 2).unwrap();
        let batch = [tr(0, 1, 10.0, 1, true)];
        let (_, g) = l.q_loss_and_grad(0, &batch, 0.9, TdMode::Implicit).unwrap();
        assert!(g[1] < 0.0 && g[0] == 0.0);
        for _ in 0..20_000 {
            l.update_q(&batch, &cfg, 0.9, TdMode::Implicit).unwrap();
        }
        assert!(
            (l.q1.params()[1] - 10.0).abs() < 0.05,
            "{}",
            l.q1.params()[1]
        );
    }

    #[test]
    fn q_loss_vanishes_at_deterministic_fixed_point() {
        // Deterministic chain 0 -> 1 -> 2 (terminal), reward 1 on entering 2.
        let cfg = table_cfg(0.7);
        let mut l = LearnerState::<f64>::new(&cfg, 3, 1).unwrap();
        l.value.params_mut().copy_from_slice(&[0.9, 1.0, 0.0]);
        l.q1.params_mut().copy_from_slice(&[0.9, 1.0, 0.0]);
        let batch = [tr(0, 0, 0.0, 1, false), tr(1, 0, 1.0, 2, true)];
        let (loss, _) = l.q_loss_and_grad(0, &batch, 0.9, TdMode::Implicit).unwrap();
        assert!(loss < 1e-24);
    }

    #[test]
    fn awr_weight_cap_and_positivity() {
        assert_eq!(awr_weight(1.0f64, 10.0, 100.0), Some(100.0));
        assert_eq!(awr_weight(-3.0f64, 0.0, 100.0), Some(1.0));
        assert!(awr_weight(-1e6f64, 10.0, 100.0).unwrap() > 0.0);
        assert_eq!(awr_weight(f64::NAN, 10.0, 100.0), None);
    }

    proptest! {
        #[test]
        fn awr_weight_in_range(adv in -1e3f64..1e3, beta in 0.0f64..50.0, clip in 1e-3f64..1e3) {
            let w = awr_weight(adv, beta, clip).unwrap();
            prop_assert!(w > 0.0 && w <= clip);
        }
    }

    #[test]
    fn zero_temperature_is_behavior_cloning() {
        let cfg = IqlConfig {
            beta: 0.0,
            ..table_cfg(0.7)
        };
        let mut l = LearnerState::<f64>::new(&cfg, 2, 3).unwrap();
        l.q1_target
            .params_mut()
            .copy_from_slice(&[5.0, -4.0, 2.0, 1.0, 0.0, 7.0]);
        l.value.params_mut().copy_from_slice(&[1.0, -3.0]);
        l.policy
            .params_mut()
            .copy_from_slice(&[0.3, -0.2, 0.1, 0.0, 1.0, -1.0]);
        let batch = [
            tr(0, 0, 0.0, 1, false),
            tr(0, 2, 0.0, 1, false),
            tr(1, 1, 0.0, 0, false),
        ];
        let (loss, grad, _) = l.policy_loss_and_grad(&batch, &cfg).unwrap();
        let mut nll = 0.0;
        let mut bc = vec![0.0; 6];
        for t in &batch {
            let logits = &l.policy.params()[t.state * 3..t.state * 3 + 3];
            let p = softmax(logits);
            nll -= p[t.action].ln() / 3.0;
            for a in 0..3 {
                bc[t.state * 3 + a] += (p[a] - if a == t.action { 1.0 } else { 0.0 }) / 3.0;
            }
        }
        assert!((loss - nll).abs() < 1e-12);
        for (g, b) in grad.iter().zip(&bc) {
            assert!((g - b).abs() < 1e-12);
        }
    }

    #[test]
    fn double_q_minimum_is_conservative() {
        let cfg = IqlConfig {
            double_q: true,
            ..table_cfg(0.9)
        };
        let (mdp, ds) = maze_data("uniform:5", 3);
        let mut l = LearnerState::<f64>::new(&cfg, mdp.n_states, mdp.n_actions).unwrap();
        l.q2.as_mut().unwrap().params_mut()[0] = 0.5;
        for _ in 0..200 {
            l.td_iteration(&ds.transitions, &cfg, mdp.discount, TdMode::Implicit)
                .unwrap();
            for t in ds.transitions.iter().take(50) {
                let (a, b) = l.target_qs(t.state, t.action).unwrap();
                let b = b.unwrap();
                let m = l.target_q(t.state, t.action).unwrap();
                assert!(m <= a && m <= b);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_decoupled() {
        let (mdp, ds) = maze_data("optimal:1,uniform:9", 1);
        let cfg = IqlConfig {
            td_steps: 300,
            policy_steps: 300,
            ..table_cfg(0.9)
        };
        let (a, ma) = train_offline(&cfg, &ds, &mdp).unwrap();
        let (b, mb) = train_offline(&cfg, &ds, &mdp).unwrap();
        assert_eq!(a.to_checkpoint(&cfg), b.to_checkpoint(&cfg));
        assert_eq!(ma.to_jsonl(), mb.to_jsonl());

        let mut c = LearnerState::<f64>::new(&cfg, mdp.n_states, mdp.n_actions).unwrap();
        for _ in 0..300 {
            c.td_iteration(&ds.transitions, &cfg, mdp.discount, TdMode::Implicit)
                .unwrap();
            c.policy_iteration(&ds.transitions, &cfg).unwrap();
        }
        assert_eq!(c.value, a.value);
        assert_eq!(c.q1, a.q1);
        assert_eq!(c.q1_target, a.q1_target);
    }

    #[test]
    fn only_dataset_pairs_are_queried() {
        let (mdp, ds) = maze_data("optimal:1,uniform:3", 5);
        let cfg = IqlConfig {
            td_steps: 500,
            policy_steps: 200,
            ..table_cfg(0.95)
        };
        let (l, _) = train_offline_instrumented(&cfg, &ds, &mdp).unwrap();
        let seen: BTreeSet<(usize, usize)> =
            ds.transitions.iter().map(|t| (t.state, t.action)).collect();
        let log = l.query_log().unwrap();
        assert!(!log.is_empty());
        assert!(log.is_subset(&seen));
    }

    #[test]
    fn behavior_cloning_limit_recovers_empirical_behavior() {
        let (mdp, ds) = maze_data("optimal:1,uniform:99", 2);
        let cfg = IqlConfig {
            td_steps: 0,
            policy_steps: 5_000,
            beta: 0.0,
            ..table_cfg(0.7)
        };
        let (l, _) = train_offline(&cfg, &ds, &mdp).unwrap();
        let mu =
            empirical_behavior(&ds, mdp.n_states, mdp.n_actions, UnvisitedRows::Uniform).unwrap();
        let pi = l.policy_probs().unwrap();
        let counts = ds.pair_counts(mdp.n_states, mdp.n_actions);
        for s in 0..mdp.n_states {
            if counts[s * 4..s * 4 + 4].iter().sum::<usize>() > 0 {
                let tv = pi.total_variation(&mu, s);
                assert!(tv < 0.02, "state {s}: tv {tv}");
            }
        }
    }

    #[test]
    fn onestep_on_optimal_data_is_optimal() {
        let mdp: TabularMdp<f64> = make_umaze(0.0, 10.0, 0.9).unwrap();
        let ds = generate_dataset(
            &mdp,
            &mixture_components("optimal:1", &mdp).unwrap(),
            100,
            0,
        )
        .unwrap();
        let (l, m) = train_onestep_baseline(&table_cfg(0.95), &ds, &mdp).unwrap();
        let best = 10.0 * 0.9f64.powi(5);
        assert!((l.greedy_return(&mdp).unwrap() - best).abs() < 1e-9);
        assert!((m.final_return().unwrap() - best).abs() < 1e-9);
    }

    #[test]
    fn finetune_accounting() {
        let mdp: TabularMdp<f64> = make_umaze(0.0, 10.0, 0.9).unwrap();
        let ds = generate_dataset(
            &mdp,
            &mixture_components("optimal:1,uniform:2", &mdp).unwrap(),
            100,
            0,
        )
        .unwrap();
        let cfg = IqlConfig {
            td_steps: 2_000,
            policy_steps: 1_000,
            ..table_cfg(0.9)
        };
        let (l, _) = train_offline(&cfg, &ds, &mdp).unwrap();
        let before = l.counters;
        let actions = l.greedy_actions().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = finetune_online(l, &cfg, &mdp, &ds, 25, 0.0, 100, &mut rng).unwrap();
        assert_eq!(out.learner.counters.grad_steps - before.grad_steps, 25);
        assert_eq!(
            out.learner.counters.td_steps_done - before.td_steps_done,
            25
        );
        assert_eq!(out.buffer.len(), ds.len() + 25);
        assert_eq!(&out.buffer[..ds.len()], &ds.transitions[..]);
        // With no exploration the first collected step follows the offline policy.
        let first = out.buffer[ds.len()];
        assert_eq!(first.state, UMAZE_START);
        assert_eq!(first.action, actions[UMAZE_START]);
        assert_eq!(out.metrics.records.last().unwrap().env_steps, Some(25));
    }

    #[test]
    fn sweep_rows_and_determinism() {
        let (mdp, ds) = maze_data("optimal:1,uniform:9", 4);
        let cfg = IqlConfig {
            td_steps: 400,
            policy_steps: 200,
            ..table_cfg(0.9)
        };
        let rows = sweep_tau(&cfg, &[Tau::new(0.9).unwrap()], &ds, &mdp, &[3], 2).unwrap();
        assert_eq!(rows.len(), 1);
        let (l, _) = train_offline(
            &IqlConfig {
                seed: 3,
                ..cfg.clone()
            },
            &ds,
            &mdp,
        )
        .unwrap();
        assert_eq!(rows[0].mean_return, l.greedy_return(&mdp).unwrap());
        let rows = sweep_tau(
            &cfg,
            &[Tau::new(0.5).unwrap(), Tau::new(0.9).unwrap()],
            &ds,
            &mdp,
            &[7, 7, 7],
            3,
        )
        .unwrap();
        assert!(rows
            .iter()
            .all(|r| r.std_return == 0.0 && r.returns.len() == 3));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (mdp, ds) = maze_data("optimal:1,uniform:4", 8);
        for cfg in [
            IqlConfig {
                td_steps: 100,
                policy_steps: 50,
                ..table_cfg(0.9)
            },
            IqlConfig {
                td_steps: 20,
                policy_steps: 10,
                hidden: vec![8, 8],
                batch_size: 16,
                ..IqlConfig::default()
            },
        ] {
            let (l, _) = train_offline(&cfg, &ds, &mdp).unwrap();
            let text = l.to_checkpoint(&cfg).to_json();
            let ck = Checkpoint::<f64>::from_json(&text).unwrap();
            assert_eq!(ck.to_json(), text);
            let (restored, rcfg) = LearnerState::from_checkpoint(ck).unwrap();
            assert_eq!(rcfg, cfg);
            assert_eq!(restored.to_checkpoint(&rcfg).to_json(), text);
        }
    }

    #[test]
    fn checkpoint_rejects_inconsistent_shapes() {
        let cfg = table_cfg(0.9);
        let l = LearnerState::<f64>::new(&cfg, 3, 2).unwrap();
        let mut ck = l.to_checkpoint(&cfg);
        ck.config.double_q = true;
        assert!(matches!(
            LearnerState::from_checkpoint(ck),
            Err(LearnerError::Checkpoint(_))
        ));
        let mut ck = l.to_checkpoint(&cfg);
        ck.n_actions = 3;
        assert!(matches!(
            LearnerState::from_checkpoint(ck),
            Err(LearnerError::Checkpoint(_))
        ));
    }

    #[test]
    fn non_finite_reward_diverges() {
        let cfg = table_cfg(0.9);
        let mut l = LearnerState::<f64>::new(&cfg, 2, 2).unwrap();
        let batch = [tr(0, 0, f64::INFINITY, 1, true)];
        l.update_value(&batch, &cfg).unwrap();
        let err = l.update_q(&batch, &cfg, 0.9, TdMode::Implicit).unwrap_err();
        match err {
            LearnerError::Divergence { phase, config, .. } => {
                assert_eq!(phase, "q");
                assert!(config.contains("\"tau\":0.9"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(IqlConfig {
            beta: -1.0,
            ..IqlConfig::default()
        }
        .validate()
        .is_err());
        assert!(IqlConfig {
            adv_clip: 0.0,
            ..IqlConfig::default()
        }
        .validate()
        .is_err());
        assert!(IqlConfig {
            polyak_rate: 0.0,
            ..IqlConfig::default()
        }
        .validate()
        .is_err());
        assert!(IqlConfig {
            batch_size: 0,
            ..IqlConfig::default()
        }
        .validate()
        .is_err());
        assert!(IqlConfig {
            hidden: vec![],
            ..IqlConfig::default()
        }
        .validate()
        .is_err());
        let text = serde_json::to_string(&IqlConfig::default()).unwrap();
        assert_eq!(
            serde_json::from_str::<IqlConfig>(&text).unwrap(),
            IqlConfig::default()
        );
        let bad = text.replace("\"tau\":0.95", "\"tau\":1.5");
        assert!(serde_json::from_str::<IqlConfig>(&bad).is_err());
        let unknown = text.replacen('{', "{\"gamma\":0.9,", 1);
        assert!(serde_json::from_str::<IqlConfig>(&unknown).is_err());
    }

    #[test]
    fn metrics_jsonl_round_trip() {
        let (mdp, ds) = maze_data("optimal:1,uniform:4", 8);
        let cfg = IqlConfig {
            td_steps: 100,
            policy_steps: 100,
            eval_interval: 30,
            ..table_cfg(0.9)
        };
        let (_, m) = train_offline(&cfg, &ds, &mdp).unwrap();
        assert_eq!(m.records.len(), 8);
        let text = m.to_jsonl();
        assert!(!text.contains("wall"));
        assert_eq!(Metrics::from_jsonl(&text).unwrap().to_jsonl(), text);
    }

    #[test]
    fn return_scale_normalizes_endpoints() {
        let (mdp, ds) = maze_data("optimal:1,uniform:9", 0);
        let sc = ReturnScale::compute(&mdp, &ds).unwrap();
        assert!((sc.normalize(sc.uniform)).abs() < 1e-12);
        assert!((sc.normalize(sc.support_optimal) - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
