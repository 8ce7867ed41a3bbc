#![allow(dead_code)]

//! Central finite-difference checks of every analytic gradient in the library.
//! Shared by the core integration tests and the acceptance target.

use iql_lab::approx::{Approximator, Input, ModelKind, ModelShape};
use iql_lab::data::Transition;
use iql_lab::expectile::{asym_l2_grad, asym_l2_loss, Tau};
use iql_lab::learner::{IqlConfig, LearnerState, TdMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Report {
    pub name: &'static str,
    pub probes: usize,
    pub worst: f64,
}

impl Report {
    pub fn ok(&self, min_probes: usize) -> bool {
        self.probes >= min_probes && self.worst < TOLERANCE
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

fn perturb(params: &mut [f64], rng: &mut ChaCha8Rng, scale: f64) {
    for p in params {
        *p = rng.gen_range(-scale..scale);
    }
}

fn near_kink(m: &Approximator<f64>, inputs: impl IntoIterator<Item = usize>) -> bool {
    if m.kind() != ModelKind::Mlp {
        return false;
    }
    inputs.into_iter().any(|s| {
        m.hidden_preactivations(&Input::Index(s))
            .unwrap()
            .iter()
            .flatten()
            .any(|z| z.abs() < 1e-3)
    })
}

pub fn asym_l2(probes: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let u: f64 = rng.gen_range(-5.0..5.0);
        if u.abs() < 1e-3 {
            continue;
        }
        let tau = Tau::new(rng.gen_range(0.01..0.99)).unwrap();
        let fd = central(|x| asym_l2_loss(x, tau), u);
        worst = worst.max(rel_err(asym_l2_grad(u, tau), fd));
        done += 1;
    }
    Report {
        name: "asym_l2_loss",
        probes: done,
        worst,
    }
}

fn shape_for(kind: ModelKind, n_in: usize, n_out: usize) -> ModelShape {
    match kind {
        ModelKind::Table => ModelShape::table(n_in, n_out),
        ModelKind::Linear => ModelShape::linear(n_in, n_out),
        ModelKind::Mlp => ModelShape::mlp(n_in, vec![6, 5], n_out),
    }
}

/// Gradient of `cotangent · f(x)` in the parameters.
pub fn approximator(kind: ModelKind, probes: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, n_out) = (4, 3);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let mut m = Approximator::<f64>::init(&shape_for(kind, n_in, n_out), rng.gen()).unwrap();
        perturb(m.params_mut(), &mut rng, 1.0);
        let x = if kind == ModelKind::Table {
            Input::Index(rng.gen_range(0..n_in))
        } else {
            Input::Features((0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        if kind == ModelKind::Mlp
            && m.hidden_preactivations(&x)
                .unwrap()
                .iter()
                .flatten()
                .any(|z| z.abs() < 1e-3)
        {
            continue;
        }
        let cot: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = m.grad(&x, &cot).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let fd = central(
                |p| {
                    let mut mm = m.clone();
                    mm.params_mut()[i] = p;
                    mm.eval(&x)
                        .unwrap()
                        .iter()
                        .zip(&cot)
                        .map(|(a, b)| a * b)
                        .sum()
                },
                m.params()[i],
            );
            worst = worst.max(rel_err(*gi, fd));
        }
        done += 1;
    }
    let name = match kind {
        ModelKind::Table => "approximator table",
        ModelKind::Linear => "approximator linear",
        ModelKind::Mlp => "approximator mlp",
    };
    Report {
        name,
        probes: done,
        worst,
    }
}

const N_STATES: usize = 5;
const N_ACTIONS: usize = 3;

fn random_learner(kind: ModelKind, rng: &mut ChaCha8Rng) -> (LearnerState<f64>, IqlConfig) {
    let cfg = IqlConfig {
        tau: Tau::new(rng.gen_range(0.1..0.95)).unwrap(),
        beta: rng.gen_range(0.0..3.0),
        double_q: rng.gen_bool(0.5),
        hidden: if kind == ModelKind::Mlp {
            vec![6, 5]
        } else {
            vec![]
        },
        seed: rng.gen(),
        ..IqlConfig::for_kind(kind)
    };
    let mut l = LearnerState::new(&cfg, N_STATES, N_ACTIONS).unwrap();
    perturb(l.value.params_mut(), rng, 1.0);
    perturb(l.q1.params_mut(), rng, 1.0);
    perturb(l.q1_target.params_mut(), rng, 1.0);
    perturb(l.policy.params_mut(), rng, 1.0);
    if let Some(q) = l.q2.as_mut() {
        perturb(q.params_mut(), rng, 1.0);
    }
    if let Some(q) = l.q2_target.as_mut() {
        perturb(q.params_mut(), rng, 1.0);
    }
    (l, cfg)
}

fn random_batch(rng: &mut ChaCha8Rng) -> Vec<Transition<f64>> {
    (0..8)
        .map(|_| {
            let done = rng.gen_bool(0.2);
            Transition {
                state: rng.gen_range(0..N_STATES),
                action: rng.gen_range(0..N_ACTIONS),
                reward: rng.gen_range(-1.0..1.0),
                next_state: rng.gen_range(0..N_STATES),
                next_action: (!done).then(|| rng.gen_range(0..N_ACTIONS)),
                done,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Value,
    Q,
    Policy,
}

/// Gradient of a learner loss in its own model's parameters, cycling over model kinds.
pub fn learner_loss(loss: Loss, probes: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [ModelKind::Table, ModelKind::Linear, ModelKind::Mlp];
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let (mut l, cfg) = random_learner(kinds[done % kinds.len()], &mut rng);
        let batch = random_batch(&mut rng);
        let discount = 0.9;
        let mode = if rng.gen_bool(0.5) {
            TdMode::Implicit
        } else {
            TdMode::Sarsa
        };
        let model = match loss {
            Loss::Value => &l.value,
            Loss::Q => &l.q1,
            Loss::Policy => &l.policy,
        };
        if near_kink(model, batch.iter().map(|t| t.state)) {
            continue;
        }
        let eval = |l: &mut LearnerState<f64>| -> (f64, Vec<f64>) {
            match loss {
                Loss::Value => l.value_loss_and_grad(&batch, &cfg).unwrap(),
                Loss::Q => l.q_loss_and_grad(0, &batch, discount, mode).unwrap(),
                Loss::Policy => {
                    let (v, g, _) = l.policy_loss_and_grad(&batch, &cfg).unwrap();
                    (v, g)
                }
            }
        };
        let (_, g) = eval(&mut l);
        for (i, gi) in g.iter().enumerate() {
            let orig = match loss {
                Loss::Value => l.value.params()[i],
                Loss::Q => l.q1.params()[i],
                Loss::Policy => l.policy.params()[i],
            };
            let fd = central(
                |p| {
                    let mut ll = l.clone();
                    match loss {
                        Loss::Value => ll.value.params_mut()[i] = p,
                        Loss::Q => ll.q1.params_mut()[i] = p,
                        Loss::Policy => ll.policy.params_mut()[i] = p,
                    }
                    eval(&mut ll).0
                },
                orig,
            );
            worst = worst.max(rel_err(*gi, fd));
        }
        done += 1;
    }
    let name = match loss {
        Loss::Value => "L_V",
        Loss::Q => "L_Q",
        Loss::Policy => "L_pi",
    };
    Report {
        name,
        probes: done,
        worst,
    }
}

pub fn all(probes: usize, seed: u64) -> Vec<Report> {
    vec![
        asym_l2(probes, seed),
        learner_loss(Loss::Value, probes, seed + 1),
        learner_loss(Loss::Q, probes, seed + 2),
        learner_loss(Loss::Policy, probes, seed + 3),
        approximator(ModelKind::Table, probes, seed + 4),
        approximator(ModelKind::Linear, probes, seed + 5),
        approximator(ModelKind::Mlp, probes, seed + 6),
    ]
}
