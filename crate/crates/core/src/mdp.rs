//! Finite tabular MDPs: representation, validation, the u-maze, random
//! instances, and environment stepping.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::TabularPolicy;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid MDP: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("MDP document: {0}")]
    Document(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// One broken [`TabularMdp`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimensions(String),
    Discount(f64),
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    NegativeProbability {
        state: usize,
        action: usize,
        next_state: usize,
        value: f64,
    },
    NonFiniteProbability {
        state: usize,
        action: usize,
        next_state: usize,
    },
    InitialSum(f64),
    NegativeInitial {
        state: usize,
        value: f64,
    },
    TerminalNotAbsorbing {
        state: usize,
        action: usize,
    },
    TerminalReward {
        state: usize,
        action: usize,
        value: f64,
    },
    NonFiniteReward {
        state: usize,
        action: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimensions(m) => write!(f, "dimensions: {m}"),
            Violation::Discount(g) => write!(f, "discount {g} outside [0, 1)"),
            Violation::RowSum { state, action, sum } => {
                write!(f, "transition row (s={state}, a={action}) sums to {sum}")
            }
            Violation::NegativeProbability {
                state,
                action,
                next_state,
                value,
            } => {
                write!(
                    f,
                    "negative probability {value} at (s={state}, a={action}, s'={next_state})"
                )
            }
            Violation::NonFiniteProbability {
                state,
                action,
                next_state,
            } => {
                write!(
                    f,
                    "non-finite probability at (s={state}, a={action}, s'={next_state})"
                )
            }
            Violation::InitialSum(s) => write!(f, "initial distribution sums to {s}"),
            Violation::NegativeInitial { state, value } => {
                write!(f, "negative initial probability {value} at s={state}")
            }
            Violation::TerminalNotAbsorbing { state, action } => {
                write!(
                    f,
                    "terminal state {state} is not absorbing under action {action}"
                )
            }
            Violation::TerminalReward {
                state,
                action,
                value,
            } => {
                write!(
                    f,
                    "terminal state {state} has reward {value} under action {action}"
                )
            }
            Violation::NonFiniteReward { state, action } => {
                write!(f, "non-finite reward at (s={state}, a={action})")
            }
        }
    }
}

/// Grid coordinates for maze-like MDPs. `cells[s] = (x, y)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<(usize, usize)>,
}

/// Finite MDP with dense `[s][a][s']` transitions stored flat.
///
/// Terminal states are absorbing with zero reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp<T> {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<T>,
    pub rewards: Vec<T>,
    pub discount: T,
    pub initial_dist: Vec<T>,
    pub terminal: Vec<bool>,
    pub layout: Option<GridLayout>,
}

/// Absolute tolerance for probability sums: 1e-9, widened for low-precision scalars.
pub fn probability_tolerance<T: Scalar>() -> f64 {
    1e-9f64.max(100.0 * T::epsilon().as_f64())
}

impl<T: Scalar> TabularMdp<T> {
    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[T] {
        let n = self.n_states;
        let start = (state * self.n_actions + action) * n;
        &self.transitions[start..start + n]
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize, next_state: usize) -> T {
        self.row(state, action)[next_state]
    }

    #[inline]
    pub fn reward(&self, state: usize, action: usize) -> T {
        self.rewards[state * self.n_actions + action]
    }

    /// Checks every invariant and reports all violations.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let (n, k) = (self.n_states, self.n_actions);
        if n == 0 || k == 0 {
            out.push(Violation::Dimensions(
                "need at least one state and one action".into(),
            ));
            return Err(out);
        }
        let dims_ok = self.transitions.len() == n * k * n
            && self.rewards.len() == n * k
            && self.initial_dist.len() == n
            && self.terminal.len() == n;
        if !dims_ok {
            out.push(Violation::Dimensions(format!(
                "expected {} transitions, {} rewards, {n} initial and terminal entries; got {}, {}, {}, {}",
                n * k * n,
                n * k,
                self.transitions.len(),
                self.rewards.len(),
                self.initial_dist.len(),
                self.terminal.len()
            )));
            return Err(out);
        }
        if let Some(layout) = &self.layout {
            if layout.cells.len() != n
                || layout
                    .cells
                    .iter()
                    .any(|&(x, y)| x >= layout.width || y >= layout.height)
            {
                out.push(Violation::Dimensions(
                    "grid layout does not match the state set".into(),
                ));
            }
        }
        let g = self.discount.as_f64();
        if !(0.0..1.0).contains(&g) {
            out.push(Violation::Discount(g));
        }
        let tol = probability_tolerance::<T>();
        for s in 0..n {
            for a in 0..k {
                let row = self.row(s, a);
                let mut sum = 0.0;
                for (ns, p) in row.iter().enumerate() {
                    let p = p.as_f64();
                    if !p.is_finite() {
                        out.push(Violation::NonFiniteProbability {
                            state: s,
                            action: a,
                            next_state: ns,
                        });
                    } else if p < 0.0 {
                        out.push(Violation::NegativeProbability {
                            state: s,
                            action: a,
                            next_state: ns,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if !((sum - 1.0).abs() <= tol) {
                    out.push(Violation::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                let r = self.reward(s, a);
                if !r.is_finite() {
                    out.push(Violation::NonFiniteReward {
                        state: s,
                        action: a,
                    });
                }
                if self.terminal[s] {
                    if (row[s].as_f64() - 1.0).abs() > tol {
                        out.push(Violation::TerminalNotAbsorbing {
                            state: s,
                            action: a,
                        });
                    }
                    if r != T::zero() && r.is_finite() {
                        out.push(Violation::TerminalReward {
                            state: s,
                            action: a,
                            value: r.as_f64(),
                        });
                    }
                }
            }
        }
        let mut init_sum = 0.0;
        for (s, p) in self.initial_dist.iter().enumerate() {
            let p = p.as_f64();
            if p < 0.0 || !p.is_finite() {
                out.push(Violation::NegativeInitial { state: s, value: p });
            }
            init_sum += p;
        }
        if !((init_sum - 1.0).abs() <= tol) {
            out.push(Violation::InitialSum(init_sum));
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Validating wrapper for hand-built instances.
    pub fn checked(self) -> Result<Self, MdpError> {
        self.validate().map_err(MdpError::Invalid)?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MdpDocument::from(self)).expect("MDP serialises")
    }

    /// Parses and validates an MDP document.
    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let doc: MdpDocument<T> =
            serde_json::from_str(text).map_err(|e| MdpError::Document(e.to_string()))?;
        doc.try_into()
    }
}

/// On-disk form: transitions nested `[s][a][s']`, rewards `[s][a]`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument<T> {
    name: String,
    n_states: usize,
    n_actions: usize,
    discount: T,
    transitions: Vec<Vec<Vec<T>>>,
    rewards: Vec<Vec<T>>,
    initial_dist: Vec<T>,
    terminal: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<GridLayout>,
}

impl<T: Scalar> From<&TabularMdp<T>> for MdpDocument<T> {
    fn from(m: &TabularMdp<T>) -> Self {
        MdpDocument {
            name: m.name.clone(),
            n_states: m.n_states,
            n_actions: m.n_actions,
            discount: m.discount,
            transitions: (0..m.n_states)
                .map(|s| (0..m.n_actions).map(|a| m.row(s, a).to_vec()).collect())
                .collect(),
            rewards: m.rewards.chunks(m.n_actions).map(|c| c.to_vec()).collect(),
            initial_dist: m.initial_dist.clone(),
            terminal: m.terminal.clone(),
            layout: m.layout.clone(),
        }
    }
}

impl<T: Scalar> TryFrom<MdpDocument<T>> for TabularMdp<T> {
    type Error = MdpError;

    fn try_from(d: MdpDocument<T>) -> Result<Self, MdpError> {
        let shape_ok = d.transitions.len() == d.n_states
            && d.transitions
                .iter()
                .all(|r| r.len() == d.n_actions && r.iter().all(|x| x.len() == d.n_states))
            && d.rewards.len() == d.n_states
            && d.rewards.iter().all(|r| r.len() == d.n_actions);
        if !shape_ok {
            return Err(MdpError::Invalid(vec![Violation::Dimensions(
                "nested transition/reward arrays disagree with n_states/n_actions".into(),
            )]));
        }
        TabularMdp {
            name: d.name,
            n_states: d.n_states,
            n_actions: d.n_actions,
            transitions: d.transitions.into_iter().flatten().flatten().collect(),
            rewards: d.rewards.into_iter().flatten().collect(),
            discount: d.discount,
            initial_dist: d.initial_dist,
            terminal: d.terminal,
            layout: d.layout,
        }
        .checked()
    }
}

/// How the maze's slip probability is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// A uniformly random action executes instead of the commanded one.
    #[default]
    RandomAction,
    /// The agent lands in a uniformly random state.
    RandomState,
}

impl std::str::FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random-action" | "random_action" => Ok(Self::RandomAction),
            "random-state" | "random_state" => Ok(Self::RandomState),
            other => Err(format!(
                "unknown noise mode `{other}` (expected random-action|random-state)"
            )),
        }
    }
}

/// Maze actions. Up increases `y`, right increases `x`.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const ACTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];

/// The U corridor on a 3×3 grid, in state-index order from start to goal.
pub const UMAZE_CELLS: [(usize, usize); 7] =
    [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0)];
pub const UMAZE_START: usize = 0;
pub const UMAZE_GOAL: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmazeOptions {
    pub noise_prob: f64,
    pub goal_reward: f64,
    pub discount: f64,
    pub noise_mode: NoiseMode,
}

impl Default for UmazeOptions {
    fn default() -> Self {
        Self {
            noise_prob: 0.25,
            goal_reward: 10.0,
            discount: 0.9,
            noise_mode: NoiseMode::RandomAction,
        }
    }
}

pub fn make_umaze<T: Scalar>(
    noise_prob: f64,
    goal_reward: f64,
    discount: f64,
) -> Result<TabularMdp<T>, MdpError> {
    make_umaze_with(&UmazeOptions {
        noise_prob,
        goal_reward,
        discount,
        ..Default::default()
    })
}

/// Builds the 7-cell U-maze. Rewards are the expected reward of the commanded
/// action, i.e. `goal_reward · P(enter goal | s, a)`.
pub fn make_umaze_with<T: Scalar>(opts: &UmazeOptions) -> Result<TabularMdp<T>, MdpError> {
    if !(0.0..1.0).contains(&opts.noise_prob) {
        return Err(MdpError::Parameter(format!(
            "noise_prob {} outside [0, 1)",
            opts.noise_prob
        )));
    }
    if !(0.0..1.0).contains(&opts.discount) {
        return Err(MdpError::Parameter(format!(
            "discount {} outside [0, 1)",
            opts.discount
        )));
    }
    if !opts.goal_reward.is_finite() {
        return Err(MdpError::Parameter("goal_reward must be finite".into()));
    }
    let n = UMAZE_CELLS.len();
    let k = 4;
    let cell_index = |x: isize, y: isize| -> Option<usize> {
        UMAZE_CELLS
            .iter()
            .position(|&(cx, cy)| cx as isize == x && cy as isize == y)
    };
    let mover = |s: usize, a: usize| -> usize {
        let (x, y) = (UMAZE_CELLS[s].0 as isize, UMAZE_CELLS[s].1 as isize);
        let (nx, ny) = match a {
            UP => (x, y + 1),
            DOWN => (x, y - 1),
            LEFT => (x - 1, y),
            _ => (x + 1, y),
        };
        cell_index(nx, ny).unwrap_or(s)
    };
    let p = opts.noise_prob;
    let mut transitions = vec![0.0f64; n * k * n];
    let mut rewards = vec![0.0f64; n * k];
    for s in 0..n {
        for a in 0..k {
            let row = &mut transitions[(s * k + a) * n..(s * k + a + 1) * n];
            if s == UMAZE_GOAL {
                row[s] = 1.0;
                continue;
            }
            row[mover(s, a)] += 1.0 - p;
            match opts.noise_mode {
                NoiseMode::RandomAction => {
                    for b in 0..k {
                        row[mover(s, b)] += p / k as f64;
                    }
                }
                NoiseMode::RandomState => {
                    for q in row.iter_mut() {
                        *q += p / n as f64;
                    }
                }
            }
            rewards[s * k + a] = opts.goal_reward * row[UMAZE_GOAL];
        }
    }
    let mut initial_dist = vec![T::zero(); n];
    initial_dist[UMAZE_START] = T::one();
    let mut terminal = vec![false; n];
    terminal[UMAZE_GOAL] = true;
    TabularMdp {
        name: format!(
            "umaze(noise={},mode={},goal_reward={},discount={})",
            p,
            match opts.noise_mode {
                NoiseMode::RandomAction => "random-action",
                NoiseMode::RandomState => "random-state",
            },
            opts.goal_reward,
            opts.discount
        ),
        n_states: n,
        n_actions: k,
        transitions: transitions.into_iter().map(T::lit).collect(),
        rewards: rewards.into_iter().map(T::lit).collect(),
        discount: T::lit(opts.discount),
        initial_dist,
        terminal,
        layout: Some(GridLayout {
            width: 3,
            height: 3,
            cells: UMAZE_CELLS.to_vec(),
        }),
    }
    .checked()
}

/// Random dense MDP: Dirichlet(1) transition rows, rewards uniform in `[0, 1)`,
/// discount 0.9, uniform start, no terminals.
pub fn make_random_mdp<T: Scalar>(
    n_states: usize,
    n_actions: usize,
    seed: u64,
) -> Result<TabularMdp<T>, MdpError> {
    if n_states < 2 || n_actions < 2 {
        return Err(MdpError::Parameter(
            "random MDPs need at least 2 states and 2 actions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        // Normalised unit exponentials are Dirichlet(1, ..., 1).
        let w: Vec<f64> = (0..n_states)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-12)
            .collect();
        let total: f64 = w.iter().sum();
        let mut row: Vec<T> = w.iter().map(|x| T::lit(x / total)).collect();
        // Put the rounding residue on the largest entry so the row sums to one in T.
        let residue = T::one() - row.iter().copied().sum::<T>();
        let big = crate::scalar::argmax(&row);
        row[big] += residue;
        transitions.extend(row);
    }
    let rewards = (0..n_states * n_actions)
        .map(|_| T::lit(rng.gen::<f64>()))
        .collect();
    TabularMdp {
        name: format!("random(n_states={n_states},n_actions={n_actions},seed={seed})"),
        n_states,
        n_actions,
        transitions,
        rewards,
        discount: T::lit(0.9),
        initial_dist: vec![T::one() / T::from_usize_lossy(n_states); n_states],
        terminal: vec![false; n_states],
        layout: None,
    }
    .checked()
}

/// Draws an index from a probability vector.
pub fn sample_categorical<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Samples one environment transition: `(next_state, reward, done)`.
pub fn step<T: Scalar, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<(usize, T, bool), MdpError> {
    if state >= mdp.n_states || action >= mdp.n_actions {
        return Err(MdpError::Usage(format!(
            "(state {state}, action {action}) out of range"
        )));
    }
    if mdp.terminal[state] {
        return Err(MdpError::Usage(format!(
            "cannot step from terminal state {state}"
        )));
    }
    let next = sample_categorical(mdp.row(state, action), rng);
    Ok((next, mdp.reward(state, action), mdp.terminal[next]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step<T> {
    pub state: usize,
    pub action: usize,
    pub reward: T,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory<T> {
    pub steps: Vec<Step<T>>,
    pub terminated: bool,
    pub truncated: bool,
}

impl<T: Scalar> Trajectory<T> {
    pub fn discounted_return(&self, discount: T) -> T {
        let mut g = T::zero();
        for s in self.steps.iter().rev() {
            g = s.reward + discount * g;
        }
        g
    }
}

/// Runs one episode from the initial distribution.
pub fn rollout<T: Scalar, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    policy: &TabularPolicy<T>,
    rng: &mut R,
    max_steps: usize,
) -> Result<Trajectory<T>, MdpError> {
    if max_steps == 0 {
        return Err(MdpError::Parameter("max_steps must be >= 1".into()));
    }
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(MdpError::Parameter(
            "policy dimensions differ from the MDP".into(),
        ));
    }
    let mut state = sample_categorical(&mdp.initial_dist, rng);
    let mut traj = Trajectory::default();
    if mdp.terminal[state] {
        traj.terminated = true;
        return Ok(traj);
    }
    for _ in 0..max_steps {
        let action = sample_categorical(policy.row(state), rng);
        let (next, reward, done) = step(mdp, state, action, rng)?;
        traj.steps.push(Step {
            state,
            action,
            reward,
            next_state: next,
        });
        state = next;
        if done {
            traj.terminated = true;
            return Ok(traj);
        }
    }
    traj.truncated = true;
    Ok(traj)
}
