//! Exact dynamic-programming solvers used as ground truth.
//!
//! All solvers run synchronous sweeps `Q ← r + γ P V`, `V(s) = backup(Q(s, ·))`
//! from `V = 0`, with terminal states pinned to zero. They differ only in the
//! backup: max, support-restricted max, policy average, or behaviour expectile.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expectile::{expectile_bisect, ExpectileError, Tau, WeightedSample};
use crate::mdp::{probability_tolerance, TabularMdp};
use crate::scalar::{argmax, Scalar};

/// Default stopping tolerance for the exact solvers.
pub const ORACLE_TOL: f64 = 1e-10;
/// Sweep cap before a solver reports non-convergence.
pub const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("infeasible support: reachable state {state} has no supported action")]
    InfeasibleSupport { state: usize },
    #[error("no convergence after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Expectile(#[from] ExpectileError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable<T> {
    pub v: Vec<T>,
}

impl<T: Scalar> ValueTable<T> {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            v: vec![T::zero(); n_states],
        }
    }

    /// `max - min` over the given states (all states when `states` is `None`).
    pub fn range(&self, states: Option<&[usize]>) -> T {
        let vals: Vec<T> = match states {
            Some(idx) => idx.iter().map(|&s| self.v[s]).collect(),
            None => self.v.clone(),
        };
        let hi = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let lo = vals.iter().copied().fold(T::infinity(), T::min);
        if vals.is_empty() {
            T::zero()
        } else {
            hi - lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable<T> {
    pub n_actions: usize,
    pub q: Vec<T>,
}

impl<T: Scalar> QTable<T> {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            q: vec![T::zero(); n_states * n_actions],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n_actions = rows.first().map_or(0, |r| r.len());
        Self {
            n_actions,
            q: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        if self.n_actions == 0 {
            0
        } else {
            self.q.len() / self.n_actions
        }
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> T {
        self.q[state * self.n_actions + action]
    }

    #[inline]
    pub fn row(&self, state: usize) -> &[T] {
        &self.q[state * self.n_actions..(state + 1) * self.n_actions]
    }
}

/// `mask[s][a]` is true when the behaviour policy puts positive mass on `a` at `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportMask {
    pub n_actions: usize,
    pub mask: Vec<bool>,
}

impl SupportMask {
    pub fn full(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            mask: vec![true; n_states * n_actions],
        }
    }

    pub fn empty(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            mask: vec![false; n_states * n_actions],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let n_actions = rows.first().map_or(0, |r| r.len());
        Self {
            n_actions,
            mask: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        if self.n_actions == 0 {
            0
        } else {
            self.mask.len() / self.n_actions
        }
    }

    #[inline]
    pub fn is_supported(&self, state: usize, action: usize) -> bool {
        self.mask[state * self.n_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize) {
        self.mask[state * self.n_actions + action] = true;
    }

    pub fn row(&self, state: usize) -> &[bool] {
        &self.mask[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn supported_actions(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(state)
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(a, _)| a)
    }

    pub fn union(&self, other: &SupportMask) -> SupportMask {
        SupportMask {
            n_actions: self.n_actions,
            mask: self
                .mask
                .iter()
                .zip(&other.mask)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    /// States reachable from the initial distribution when only supported actions are taken.
    pub fn reachable_states<T: Scalar>(&self, mdp: &TabularMdp<T>) -> Vec<bool> {
        let mut seen = vec![false; mdp.n_states];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for (s, p) in mdp.initial_dist.iter().enumerate() {
            if *p > T::zero() {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            if mdp.terminal[s] {
                continue;
            }
            for a in self.supported_actions(s) {
                for (ns, p) in mdp.row(s, a).iter().enumerate() {
                    if *p > T::zero() && !seen[ns] {
                        seen[ns] = true;
                        queue.push_back(ns);
                    }
                }
            }
        }
        seen
    }

    /// Rejects masks that leave a reachable non-terminal state without any supported action.
    pub fn check_feasible<T: Scalar>(&self, mdp: &TabularMdp<T>) -> Result<(), OracleError> {
        if self.n_actions != mdp.n_actions || self.n_states() != mdp.n_states {
            return Err(OracleError::Dimension(
                "support mask does not match the MDP".into(),
            ));
        }
        let reachable = self.reachable_states(mdp);
        for s in 0..mdp.n_states {
            if reachable[s] && !mdp.terminal[s] && self.supported_actions(s).next().is_none() {
                return Err(OracleError::InfeasibleSupport { state: s });
            }
        }
        Ok(())
    }
}

/// Stochastic policy `π(a|s)` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy<T> {
    n_actions: usize,
    probs: Vec<T>,
}

impl<T: Scalar> TabularPolicy<T> {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![T::one() / T::from_usize_lossy(n_actions); n_states * n_actions],
        }
    }

    /// Point mass on `actions[s]` at every state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![T::zero(); actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = T::one();
        }
        Self { n_actions, probs }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self, OracleError> {
        let n_actions = rows.first().map_or(0, |r| r.len());
        if n_actions == 0 || rows.iter().any(|r| r.len() != n_actions) {
            return Err(OracleError::Policy(
                "rows must be nonempty and equally long".into(),
            ));
        }
        let tol = probability_tolerance::<T>();
        for (s, r) in rows.iter().enumerate() {
            if r.iter().any(|p| !(*p >= T::zero()) || !p.is_finite()) {
                return Err(OracleError::Policy(format!(
                    "row {s} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = r.iter().map(|p| p.as_f64()).sum();
            if (sum - 1.0).abs() > tol {
                return Err(OracleError::Policy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            n_actions,
            probs: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    #[inline]
    pub fn row(&self, state: usize) -> &[T] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize) -> T {
        self.probs[state * self.n_actions + action]
    }

    /// `½ Σ_a |π(a|s) - other(a|s)|`.
    pub fn total_variation(&self, other: &Self, state: usize) -> T {
        let d: T = self
            .row(state)
            .iter()
            .zip(other.row(state))
            .map(|(a, b)| (*a - *b).abs())
            .sum();
        d * T::lit(0.5)
    }
}

/// Result of an exact solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub values: ValueTable<T>,
    pub q: QTable<T>,
    /// Sup-norm change of `Q` after each sweep.
    pub residuals: Vec<T>,
}

fn check_tol<T: Scalar>(tol: T) -> Result<(), OracleError> {
    if tol > T::zero() && tol.is_finite() {
        Ok(())
    } else {
        Err(OracleError::Parameter(format!(
            "tolerance must be positive, got {tol}"
        )))
    }
}

fn check_policy<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &TabularPolicy<T>,
) -> Result<(), OracleError> {
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(OracleError::Dimension(
            "policy does not match the MDP".into(),
        ));
    }
    Ok(())
}

/// Shared sweep driver. `backup` maps a state's Q row to its value; `stop`
/// receives the sweep's sup-norm change and the current `max |Q|`.
fn iterate<T: Scalar>(
    mdp: &TabularMdp<T>,
    mut backup: impl FnMut(usize, &[T]) -> Result<T, OracleError>,
    stop: impl Fn(T, T) -> bool,
) -> Result<Solution<T>, OracleError> {
    let (n, k) = (mdp.n_states, mdp.n_actions);
    let gamma = mdp.discount;
    let mut v = vec![T::zero(); n];
    let mut q = vec![T::zero(); n * k];
    let mut residuals = Vec::new();
    for _ in 0..MAX_SWEEPS {
        let mut new_q = vec![T::zero(); n * k];
        for s in 0..n {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..k {
                let ev: T = mdp.row(s, a).iter().zip(&v).map(|(p, vn)| *p * *vn).sum();
                new_q[s * k + a] = mdp.reward(s, a) + gamma * ev;
            }
        }
        let change = crate::scalar::sup_diff(&new_q, &q);
        let scale = new_q.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        q = new_q;
        for s in 0..n {
            v[s] = if mdp.terminal[s] {
                T::zero()
            } else {
                backup(s, &q[s * k..(s + 1) * k])?
            };
        }
        residuals.push(change);
        if stop(change, scale) {
            return Ok(Solution {
                values: ValueTable { v },
                q: QTable { n_actions: k, q },
                residuals,
            });
        }
    }
    Err(OracleError::NoConvergence { sweeps: MAX_SWEEPS })
}

/// Stop rule guaranteeing sup-norm error ≤ `tol` for a γ-contraction, with a
/// floor at a few ulps of the value scale so low-precision scalars terminate.
fn contraction_stop<T: Scalar>(gamma: T, tol: T) -> impl Fn(T, T) -> bool {
    let threshold = if gamma > T::zero() {
        tol * (T::one() - gamma) / gamma
    } else {
        T::infinity()
    };
    move |change, scale| change < threshold || change <= T::lit(8.0) * T::epsilon() * scale
}

/// Optimal `V*`, `Q*` by value iteration.
pub fn value_iteration<T: Scalar>(mdp: &TabularMdp<T>, tol: T) -> Result<Solution<T>, OracleError> {
    check_tol(tol)?;
    iterate(
        mdp,
        |_, row| Ok(row.iter().copied().fold(T::neg_infinity(), T::max)),
        contraction_stop(mdp.discount, tol),
    )
}

/// Value iteration with the max restricted to supported actions.
///
/// `Q` is still computed for unsupported pairs (one-step lookahead into the
/// constrained `V`) but never enters `V`; consult the mask before using it.
/// Unreachable states without support get `V = 0`.
pub fn support_value_iteration<T: Scalar>(
    mdp: &TabularMdp<T>,
    support: &SupportMask,
    tol: T,
) -> Result<Solution<T>, OracleError> {
    check_tol(tol)?;
    support.check_feasible(mdp)?;
    iterate(
        mdp,
        |s, row| {
            Ok(support
                .supported_actions(s)
                .map(|a| row[a])
                .fold(None, |m: Option<T>, x| Some(m.map_or(x, |m| m.max(x))))
                .unwrap_or_else(T::zero))
        },
        contraction_stop(mdp.discount, tol),
    )
}

/// Exact `Q^π`, `V^π`.
pub fn policy_evaluation<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &TabularPolicy<T>,
    tol: T,
) -> Result<Solution<T>, OracleError> {
    check_tol(tol)?;
    check_policy(mdp, policy)?;
    iterate(
        mdp,
        |s, row| Ok(row.iter().zip(policy.row(s)).map(|(q, p)| *q * *p).sum()),
        contraction_stop(mdp.discount, tol),
    )
}

/// Fixed point of `V(s) = E^τ_{a∼μ(·|s)}[Q(s,a)]`, `Q(s,a) = r + γ E_{s'}[V(s')]`.
///
/// Each state's expectile is taken over the behaviour-weighted Q values with
/// `μ(a|s) > 0`, bisected to full precision. Stops when the sweep's change is below `tol`.
pub fn expectile_fixed_point<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &TabularPolicy<T>,
    tau: Tau,
    tol: T,
) -> Result<Solution<T>, OracleError> {
    check_tol(tol)?;
    check_policy(mdp, behavior)?;
    let mut buf: Vec<WeightedSample<T>> = Vec::with_capacity(mdp.n_actions);
    iterate(
        mdp,
        |s, row| {
            buf.clear();
            buf.extend(
                row.iter()
                    .zip(behavior.row(s))
                    .filter(|(_, w)| **w > T::zero())
                    .map(|(q, w)| WeightedSample::new(*q, *w)),
            );
            Ok(expectile_bisect(&buf, tau, T::zero())?)
        },
        move |change, scale| change < tol || change <= T::lit(8.0) * T::epsilon() * scale,
    )
}

/// Point-mass policy on the (supported) argmax; ties go to the lowest index.
///
/// States whose mask row is empty fall back to the unconstrained argmax.
pub fn greedy_policy<T: Scalar>(
    q: &QTable<T>,
    support: Option<&SupportMask>,
) -> Result<TabularPolicy<T>, OracleError> {
    let n = q.n_states();
    if let Some(m) = support {
        if m.n_actions != q.n_actions || m.n_states() != n {
            return Err(OracleError::Dimension(
                "support mask does not match the Q table".into(),
            ));
        }
    }
    let actions: Vec<usize> = (0..n)
        .map(|s| {
            let row = q.row(s);
            match support {
                Some(m) if m.supported_actions(s).next().is_some() => {
                    let mut best: Option<usize> = None;
                    for a in m.supported_actions(s) {
                        if best.map_or(true, |b| row[a] > row[b]) {
                            best = Some(a);
                        }
                    }
                    best.expect("nonempty support")
                }
                _ => argmax(row),
            }
        })
        .collect();
    Ok(TabularPolicy::deterministic(&actions, q.n_actions))
}

/// `J(π) = Σ_s p₀(s) V^π(s)`, exact.
pub fn policy_return<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &TabularPolicy<T>,
) -> Result<T, OracleError> {
    let sol = policy_evaluation(mdp, policy, T::lit(ORACLE_TOL))?;
    Ok(mdp
        .initial_dist
        .iter()
        .zip(&sol.values.v)
        .map(|(p, v)| *p * *v)
        .sum())
}

/// `Σ_s p₀(s) V(s)`.
pub fn initial_value<T: Scalar>(mdp: &TabularMdp<T>, values: &ValueTable<T>) -> T {
    mdp.initial_dist
        .iter()
        .zip(&values.v)
        .map(|(p, v)| *p * *v)
        .sum()
}
