//! Differentiable parametric function approximators and first-order optimisation.
//!
//! Three fixed model kinds share one flat parameter vector:
//!
//! * `table`: one row of `n_outputs` entries per input index.
//! * `linear`: `W x` with `W` stored row-major as `[n_outputs][n_inputs]`, no bias.
//! * `mlp`: rectifier hidden layers then a linear head; each layer stores its
//!   weights row-major `[out][in]` followed by its bias.
//!
//! Index inputs are one-hot encoded for `linear` and `mlp`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApproxError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error("polyak rate must lie in (0, 1], got {0}")]
    BadRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Table,
    Linear,
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!(
                "unknown model kind `{other}` (expected table|linear|mlp)"
            )),
        }
    }
}

/// Shape metadata. `hidden` is only meaningful for `mlp`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub n_inputs: usize,
    pub n_outputs: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl ModelShape {
    pub fn table(n_inputs: usize, n_outputs: usize) -> Self {
        Self {
            kind: ModelKind::Table,
            n_inputs,
            n_outputs,
            hidden: vec![],
        }
    }

    pub fn linear(n_inputs: usize, n_outputs: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            n_inputs,
            n_outputs,
            hidden: vec![],
        }
    }

    pub fn mlp(n_inputs: usize, hidden: Vec<usize>, n_outputs: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            n_inputs,
            n_outputs,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<(), ApproxError> {
        if self.n_inputs == 0 || self.n_outputs == 0 {
            return Err(ApproxError::InvalidShape(
                "input and output arity must be positive".into(),
            ));
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return Err(ApproxError::InvalidShape(
                        "mlp needs at least one hidden layer of positive width".into(),
                    ));
                }
            }
            _ => {
                if !self.hidden.is_empty() {
                    return Err(ApproxError::InvalidShape(format!(
                        "{:?} model takes no hidden layers",
                        self.kind
                    )));
                }
            }
        }
        Ok(())
    }

    /// Layer widths from input to output (mlp only).
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.n_inputs);
        w.extend_from_slice(&self.hidden);
        w.push(self.n_outputs);
        w
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Table | ModelKind::Linear => self.n_inputs * self.n_outputs,
            ModelKind::Mlp => self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum(),
        }
    }
}

/// Model input: a discrete index or a dense feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Input<T> {
    Index(usize),
    Features(Vec<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Approximator<T> {
    shape: ModelShape,
    params: Vec<T>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApproximator<T> {
    shape: ModelShape,
    params: Vec<T>,
}

impl<'de, T: Scalar> Deserialize<'de> for Approximator<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawApproximator::<T>::deserialize(d)?;
        Approximator::from_parts(raw.shape, raw.params).map_err(serde::de::Error::custom)
    }
}

impl<T: Scalar> Approximator<T> {
    /// Zero tables / zero linear maps; mlp hidden layers uniform in ±1/√fan_in with a zero head.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self, ApproxError> {
        shape.validate()?;
        let mut params = vec![T::zero(); shape.param_count()];
        if shape.kind == ModelKind::Mlp {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let widths = shape.widths();
            let mut offset = 0;
            let n_layers = widths.len() - 1;
            for (l, pair) in widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                if l + 1 < n_layers {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for p in &mut params[offset..offset + fan_in * fan_out] {
                        *p = T::lit(rng.gen_range(-bound..bound));
                    }
                }
                offset += fan_in * fan_out + fan_out;
            }
        }
        Ok(Self {
            shape: shape.clone(),
            params,
        })
    }

    pub fn from_parts(shape: ModelShape, params: Vec<T>) -> Result<Self, ApproxError> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(ApproxError::Shape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(ApproxError::NonFiniteParameter(i));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn kind(&self) -> ModelKind {
        self.shape.kind
    }

    pub fn n_outputs(&self) -> usize {
        self.shape.n_outputs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn check_input(&self, input: &Input<T>) -> Result<(), ApproxError> {
        match input {
            Input::Index(i) if *i >= self.shape.n_inputs => Err(ApproxError::Shape(format!(
                "index {i} out of range for {} inputs",
                self.shape.n_inputs
            ))),
            Input::Features(_) if self.shape.kind == ModelKind::Table => {
                Err(ApproxError::Shape("table models take index inputs".into()))
            }
            Input::Features(x) if x.len() != self.shape.n_inputs => Err(ApproxError::Shape(
                format!("expected {} features, got {}", self.shape.n_inputs, x.len()),
            )),
            _ => Ok(()),
        }
    }

    fn dense_input(&self, input: &Input<T>) -> Vec<T> {
        match input {
            Input::Index(i) => {
                let mut x = vec![T::zero(); self.shape.n_inputs];
                x[*i] = T::one();
                x
            }
            Input::Features(x) => x.clone(),
        }
    }

    pub fn eval(&self, input: &Input<T>) -> Result<Vec<T>, ApproxError> {
        self.check_input(input)?;
        let k = self.shape.n_outputs;
        Ok(match self.shape.kind {
            ModelKind::Table => match input {
                Input::Index(i) => self.params[i * k..(i + 1) * k].to_vec(),
                Input::Features(_) => unreachable!(),
            },
            ModelKind::Linear => match input {
                Input::Index(i) => {
                    let n = self.shape.n_inputs;
                    (0..k).map(|o| self.params[o * n + i]).collect()
                }
                Input::Features(x) => {
                    let n = self.shape.n_inputs;
                    (0..k)
                        .map(|o| {
                            self.params[o * n..(o + 1) * n]
                                .iter()
                                .zip(x)
                                .map(|(w, v)| *w * *v)
                                .sum()
                        })
                        .collect()
                }
            },
            ModelKind::Mlp => {
                let acts = self.mlp_forward(&self.dense_input(input));
                acts.last().cloned().expect("mlp has an output layer")
            }
        })
    }

    /// Per-layer outputs: index 0 is the input, hidden entries are post-rectifier.
    fn mlp_forward(&self, x: &[T]) -> Vec<Vec<T>> {
        let widths = self.shape.widths();
        let n_layers = widths.len() - 1;
        let mut acts = Vec::with_capacity(widths.len());
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let prev = &acts[l];
            let mut out: Vec<T> = (0..n_out)
                .map(|o| {
                    w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(prev)
                        .map(|(a, c)| *a * *c)
                        .sum::<T>()
                        + b[o]
                })
                .collect();
            if l + 1 < n_layers {
                for v in &mut out {
                    *v = v.max(T::zero());
                }
            }
            acts.push(out);
            offset += n_in * n_out + n_out;
        }
        acts
    }

    /// A single output, skipping the full output vector for table and linear models.
    pub fn eval_at(&self, input: &Input<T>, output: usize) -> Result<T, ApproxError> {
        self.check_input(input)?;
        let k = self.shape.n_outputs;
        if output >= k {
            return Err(ApproxError::Shape(format!(
                "output {output} out of range for {k} outputs"
            )));
        }
        match (self.shape.kind, input) {
            (ModelKind::Table, Input::Index(i)) => Ok(self.params[i * k + output]),
            (ModelKind::Linear, Input::Index(i)) => {
                Ok(self.params[output * self.shape.n_inputs + i])
            }
            _ => Ok(self.eval(input)?[output]),
        }
    }

    /// Hidden-layer pre-activations; used to keep gradient probes away from rectifier kinks.
    pub fn hidden_preactivations(&self, input: &Input<T>) -> Result<Vec<Vec<T>>, ApproxError> {
        self.check_input(input)?;
        if self.shape.kind != ModelKind::Mlp {
            return Ok(vec![]);
        }
        let widths = self.shape.widths();
        let mut prev = self.dense_input(input);
        let mut offset = 0;
        let mut out = Vec::new();
        for l in 0..widths.len() - 2 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let z: Vec<T> = (0..n_out)
                .map(|o| {
                    w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(&prev)
                        .map(|(a, c)| *a * *c)
                        .sum::<T>()
                        + b[o]
                })
                .collect();
            prev = z.iter().map(|v| v.max(T::zero())).collect();
            out.push(z);
            offset += n_in * n_out + n_out;
        }
        Ok(out)
    }

    /// Gradient of `cotangent · eval(input)` with respect to the parameters.
    pub fn grad(&self, input: &Input<T>, cotangent: &[T]) -> Result<Vec<T>, ApproxError> {
        let mut g = vec![T::zero(); self.params.len()];
        self.accumulate_grad(input, cotangent, &mut g)?;
        Ok(g)
    }

    /// Adds the gradient of `cotangent · eval(input)` into `out`.
    pub fn accumulate_grad(
        &self,
        input: &Input<T>,
        cotangent: &[T],
        out: &mut [T],
    ) -> Result<(), ApproxError> {
        self.check_input(input)?;
        let k = self.shape.n_outputs;
        if cotangent.len() != k {
            return Err(ApproxError::Shape(format!(
                "cotangent has {} entries, model has {k} outputs",
                cotangent.len()
            )));
        }
        if out.len() != self.params.len() {
            return Err(ApproxError::Shape(
                "gradient buffer length differs from parameter count".into(),
            ));
        }
        match self.shape.kind {
            ModelKind::Table => {
                let Input::Index(i) = input else {
                    unreachable!()
                };
                for (o, c) in cotangent.iter().enumerate() {
                    out[i * k + o] += *c;
                }
            }
            ModelKind::Linear => {
                let n = self.shape.n_inputs;
                match input {
                    Input::Index(i) => {
                        for (o, c) in cotangent.iter().enumerate() {
                            out[o * n + i] += *c;
                        }
                    }
                    Input::Features(x) => {
                        for (o, c) in cotangent.iter().enumerate() {
                            for (j, xj) in x.iter().enumerate() {
                                out[o * n + j] += *c * *xj;
                            }
                        }
                    }
                }
            }
            ModelKind::Mlp => self.mlp_backward(&self.dense_input(input), cotangent, out),
        }
        Ok(())
    }

    fn mlp_backward(&self, x: &[T], cotangent: &[T], out: &mut [T]) {
        let widths = self.shape.widths();
        let n_layers = widths.len() - 1;
        let acts = self.mlp_forward(x);
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += widths[l] * widths[l + 1] + widths[l + 1];
        }
        let mut delta = cotangent.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                let row = &mut out[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += d * *a;
                }
                out[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut next = vec![T::zero(); n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += w[o * n_in + j] * d;
                }
            }
            // Rectifier: the stored activation is zero exactly when the unit is off (subgradient 0 at the kink).
            for (nj, a) in next.iter_mut().zip(prev) {
                if *a <= T::zero() {
                    *nj = T::zero();
                }
            }
            delta = next;
        }
    }

    /// Plain gradient-descent step `θ ← θ - lr·g`.
    pub fn sgd_step(&mut self, gradient: &[T], lr: T) -> Result<(), ApproxError> {
        self.check_gradient(gradient)?;
        for (p, g) in self.params.iter_mut().zip(gradient) {
            *p -= lr * *g;
        }
        Ok(())
    }

    fn check_gradient(&self, gradient: &[T]) -> Result<(), ApproxError> {
        if gradient.len() != self.params.len() {
            return Err(ApproxError::Shape(format!(
                "gradient has {} entries, model has {} parameters",
                gradient.len(),
                self.params.len()
            )));
        }
        if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(ApproxError::NonFiniteGradient(i));
        }
        Ok(())
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// `½(1 + cos(π·(step - start)/horizon))`, held at zero past the horizon.
    Cosine {
        horizon: u64,
        #[serde(default)]
        start: u64,
    },
}

/// Adam state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    pub base_lr: T,
    pub schedule: Schedule,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(n_params: usize, base_lr: T, schedule: Schedule) -> Self {
        Self {
            first_moment: vec![T::zero(); n_params],
            second_moment: vec![T::zero(); n_params],
            step: 0,
            base_lr,
            schedule,
        }
    }

    pub fn for_model(model: &Approximator<T>, base_lr: T, schedule: Schedule) -> Self {
        Self::new(model.params().len(), base_lr, schedule)
    }

    /// Rate used by the next update.
    pub fn current_lr(&self) -> T {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine { horizon, start } => {
                if horizon == 0 {
                    return T::zero();
                }
                let frac = (self.step.saturating_sub(start).min(horizon) as f64) / horizon as f64;
                self.base_lr * T::lit(0.5 * (1.0 + (PI * frac).cos()))
            }
        }
    }
}

/// One bias-corrected Adam step with the scheduled learning rate.
pub fn apply_update<T: Scalar>(
    model: &mut Approximator<T>,
    opt: &mut OptimizerState<T>,
    gradient: &[T],
) -> Result<(), ApproxError> {
    model.check_gradient(gradient)?;
    if opt.first_moment.len() != gradient.len() {
        return Err(ApproxError::Shape(
            "optimizer state length differs from parameter count".into(),
        ));
    }
    let lr = opt.current_lr();
    opt.step += 1;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let bc1 = T::one() - b1.powi(opt.step.min(i32::MAX as u64) as i32);
    let bc2 = T::one() - b2.powi(opt.step.min(i32::MAX as u64) as i32);
    let eps = T::lit(ADAM_EPS);
    for (((p, g), m), v) in model
        .params
        .iter_mut()
        .zip(gradient)
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * *g;
        *v = b2 * *v + (T::one() - b2) * *g * *g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `target ← (1 - rate)·target + rate·online`.
pub fn polyak_update<T: Scalar>(
    target: &mut Approximator<T>,
    online: &Approximator<T>,
    rate: T,
) -> Result<(), ApproxError> {
    if target.shape != online.shape {
        return Err(ApproxError::Shape(
            "target and online models differ in shape".into(),
        ));
    }
    if !(rate > T::zero() && rate <= T::one()) {
        return Err(ApproxError::BadRate(rate.as_f64()));
    }
    let keep = T::one() - rate;
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = keep * *t + rate * *o;
    }
    Ok(())
}
