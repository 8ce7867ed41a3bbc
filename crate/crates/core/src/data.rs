//! Offline datasets: mixture-policy generation, empirical behaviour/support
//! estimation, batching and the JSON-Lines file format.
//!
//! File layout: the first line is a header object `{"meta":{...},"episode_starts":[...]}`,
//! every following line one transition with keys `s, a, r, ns, na, done` in that order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{rollout, sample_categorical, MdpError, TabularMdp};
use crate::oracle::{
    greedy_policy, value_iteration, OracleError, SupportMask, TabularPolicy, ORACLE_TOL,
};
use crate::scalar::Scalar;

/// Episode cap used when generating datasets unless overridden.
pub const DEFAULT_MAX_EPISODE_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("state {0} is reachable in the data but never visited")]
    UnvisitedState(usize),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One `(s, a, r, s', a')` tuple. `next_action` is absent after a terminal step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition<T> {
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: T,
    #[serde(rename = "ns")]
    pub next_state: usize,
    #[serde(rename = "na")]
    pub next_action: Option<usize>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub policy: String,
    pub count: usize,
}

/// Generator description stored in the file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub mdp: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub mixture: Vec<MixtureEntry>,
    pub seed: u64,
    pub max_steps: usize,
    /// Behaviour-row default for states absent from the data.
    pub unvisited_behavior: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub transitions: Vec<Transition<T>>,
    pub episode_starts: Vec<usize>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: DatasetMeta,
    episode_starts: Vec<usize>,
}

/// One entry of a behaviour mixture.
#[derive(Debug, Clone)]
pub struct MixtureComponent<T> {
    pub name: String,
    pub policy: TabularPolicy<T>,
    pub count: usize,
}

/// Parses `"optimal:1,uniform:99"`.
pub fn parse_mixture(spec: &str) -> Result<Vec<(String, usize)>, DataError> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (name, count) = part.split_once(':').ok_or_else(|| {
                DataError::Parameter(format!("mixture entry `{part}` is not name:count"))
            })?;
            let count = count
                .trim()
                .parse::<usize>()
                .map_err(|e| DataError::Parameter(format!("mixture count `{count}`: {e}")))?;
            Ok((name.trim().to_string(), count))
        })
        .collect()
}

/// Built-in behaviour policies: `optimal` (greedy on `Q*`) and `uniform`.
pub fn named_policy<T: Scalar>(
    name: &str,
    mdp: &TabularMdp<T>,
) -> Result<TabularPolicy<T>, DataError> {
    match name {
        "uniform" | "random" => Ok(TabularPolicy::uniform(mdp.n_states, mdp.n_actions)),
        "optimal" => {
            let sol = value_iteration(mdp, T::lit(ORACLE_TOL))?;
            Ok(greedy_policy(&sol.q, None)?)
        }
        other => Err(DataError::Parameter(format!(
            "unknown policy `{other}` (expected optimal|uniform)"
        ))),
    }
}

/// `parse_mixture` followed by `named_policy` for each entry.
pub fn mixture_components<T: Scalar>(
    spec: &str,
    mdp: &TabularMdp<T>,
) -> Result<Vec<MixtureComponent<T>>, DataError> {
    parse_mixture(spec)?
        .into_iter()
        .map(|(name, count)| {
            Ok(MixtureComponent {
                policy: named_policy(&name, mdp)?,
                name,
                count,
            })
        })
        .collect()
}

/// Rolls out each component `count` times, in order, from one seeded stream.
///
/// The last transition of a truncated episode gets a `next_action` drawn from
/// the same policy so SARSA targets stay defined.
pub fn generate_dataset<T: Scalar>(
    mdp: &TabularMdp<T>,
    mixture: &[MixtureComponent<T>],
    max_steps: usize,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if mixture.iter().map(|c| c.count).sum::<usize>() == 0 {
        return Err(DataError::Parameter(
            "mixture must contain at least one trajectory".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    let mut episode_starts = Vec::new();
    for comp in mixture {
        for _ in 0..comp.count {
            let traj = rollout(mdp, &comp.policy, &mut rng, max_steps)?;
            if traj.steps.is_empty() {
                continue;
            }
            episode_starts.push(transitions.len());
            let n = traj.steps.len();
            for (i, st) in traj.steps.iter().enumerate() {
                let last = i + 1 == n;
                let done = last && traj.terminated;
                let next_action = if !last {
                    Some(traj.steps[i + 1].action)
                } else if done {
                    None
                } else {
                    Some(sample_categorical(comp.policy.row(st.next_state), &mut rng))
                };
                transitions.push(Transition {
                    state: st.state,
                    action: st.action,
                    reward: st.reward,
                    next_state: st.next_state,
                    next_action,
                    done,
                });
            }
        }
    }
    let ds = Dataset {
        transitions,
        episode_starts,
        meta: DatasetMeta {
            mdp: mdp.name.clone(),
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            mixture: mixture
                .iter()
                .map(|c| MixtureEntry {
                    policy: c.name.clone(),
                    count: c.count,
                })
                .collect(),
            seed,
            max_steps,
            unvisited_behavior: "uniform".into(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Half-open index ranges of each episode.
    pub fn episodes(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.episode_starts
            .iter()
            .enumerate()
            .map(move |(i, &start)| {
                let end = self
                    .episode_starts
                    .get(i + 1)
                    .copied()
                    .unwrap_or(self.transitions.len());
                start..end
            })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.transitions.is_empty() {
            return bad("dataset has no transitions".into());
        }
        if self.episode_starts.first() != Some(&0) {
            return bad("first episode must start at transition 0".into());
        }
        if self.episode_starts.windows(2).any(|w| w[0] >= w[1])
            || self
                .episode_starts
                .last()
                .is_some_and(|&l| l >= self.transitions.len())
        {
            return bad("episode starts must be strictly increasing and in range".into());
        }
        let (n, k) = (self.meta.n_states, self.meta.n_actions);
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state >= n
                || t.next_state >= n
                || t.action >= k
                || t.next_action.is_some_and(|a| a >= k)
            {
                return bad(format!("transition {i} has an index out of range"));
            }
            if t.done && t.next_action.is_some() {
                return bad(format!(
                    "transition {i} is terminal but carries a next action"
                ));
            }
            if !t.reward.is_finite() {
                return bad(format!("transition {i} has a non-finite reward"));
            }
        }
        for ep in self.episodes() {
            let steps = &self.transitions[ep.clone()];
            for (j, w) in steps.windows(2).enumerate() {
                let i = ep.start + j;
                if w[0].done {
                    return bad(format!(
                        "transition {i} is terminal but not the last of its episode"
                    ));
                }
                if w[0].next_state != w[1].state || w[0].next_action != Some(w[1].action) {
                    return bad(format!(
                        "transition {i} does not chain into transition {}",
                        i + 1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Serialises to the JSON-Lines format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(
            &serde_json::to_string(&Header {
                meta: self.meta.clone(),
                episode_starts: self.episode_starts.clone(),
            })
            .expect("header serialises"),
        );
        out.push('\n');
        for t in &self.transitions {
            out.push_str(&serde_json::to_string(t).expect("transition serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(DataError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| DataError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let mut transitions = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition<T> = serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            transitions.push(t);
        }
        let ds = Dataset {
            transitions,
            episode_starts: header.episode_starts,
            meta: header.meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    /// `(s, a)` pair counts, row-major.
    pub fn pair_counts(&self, n_states: usize, n_actions: usize) -> Vec<usize> {
        let mut c = vec![0usize; n_states * n_actions];
        for t in &self.transitions {
            c[t.state * n_actions + t.action] += 1;
        }
        c
    }
}

/// True exactly at the `(s, a)` pairs that occur in the data.
pub fn empirical_support<T: Scalar>(
    ds: &Dataset<T>,
    n_states: usize,
    n_actions: usize,
) -> SupportMask {
    let mut mask = SupportMask::empty(n_states, n_actions);
    for t in &ds.transitions {
        mask.set(t.state, t.action);
    }
    mask
}

/// Row default for states that never appear as a transition's source state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnvisitedRows {
    #[default]
    Uniform,
    /// Error on states the data shows to be reachable (a non-terminal
    /// transition leads there) but which are never acted from.
    Reject,
}

/// `μ̂(a|s) = count(s, a) / count(s)`.
pub fn empirical_behavior<T: Scalar>(
    ds: &Dataset<T>,
    n_states: usize,
    n_actions: usize,
    default: UnvisitedRows,
) -> Result<TabularPolicy<T>, DataError> {
    let counts = ds.pair_counts(n_states, n_actions);
    if default == UnvisitedRows::Reject {
        let mut reached = vec![false; n_states];
        for t in ds.transitions.iter().filter(|t| !t.done) {
            reached[t.next_state] = true;
        }
        for (s, r) in reached.iter().enumerate() {
            if *r
                && counts[s * n_actions..(s + 1) * n_actions]
                    .iter()
                    .all(|c| *c == 0)
            {
                return Err(DataError::UnvisitedState(s));
            }
        }
    }
    let rows = (0..n_states)
        .map(|s| {
            let row = &counts[s * n_actions..(s + 1) * n_actions];
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![T::one() / T::from_usize_lossy(n_actions); n_actions]
            } else {
                row.iter()
                    .map(|c| T::from_usize_lossy(*c) / T::from_usize_lossy(total))
                    .collect()
            }
        })
        .collect();
    Ok(TabularPolicy::from_rows(rows)?)
}

/// Uniform sampling with replacement.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    transitions: &[Transition<T>],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Transition<T>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Parameter("batch_size must be >= 1".into()));
    }
    if transitions.is_empty() {
        return Err(DataError::Parameter(
            "cannot sample from an empty transition set".into(),
        ));
    }
    Ok((0..batch_size)
        .map(|_| transitions[rng.gen_range(0..transitions.len())])
        .collect())
}
