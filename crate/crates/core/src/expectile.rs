//! Asymmetric loss family and expectile estimation.
//!
//! The τ-expectile of a random variable `X` minimises `E[L2^τ(X - m)]` where
//! `L2^τ(u) = |τ - 1(u < 0)| u²`. At τ = 0.5 it is the mean; as τ → 1 it
//! approaches the supremum of the support. The asymmetric L1 variant gives
//! quantiles instead.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproxError, Approximator, Input};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpectileError {
    #[error("tau must lie in the open interval (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("expectile of an empty sample set")]
    Empty,
    #[error("sample weights must be finite and nonnegative with a positive total")]
    BadWeights,
    #[error("sample values must be finite")]
    NonFiniteSample,
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

/// Asymmetry level τ ∈ (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Tau(f64);

impl Tau {
    pub fn new(value: f64) -> Result<Self, ExpectileError> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(ExpectileError::TauOutOfRange(value))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn as_scalar<T: Scalar>(self) -> T {
        T::lit(self.0)
    }
}

impl TryFrom<f64> for Tau {
    type Error = ExpectileError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Tau::new(value)
    }
}

impl From<Tau> for f64 {
    fn from(t: Tau) -> f64 {
        t.0
    }
}

/// A value carrying a probability mass (or an empirical count).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSample<T> {
    pub value: T,
    pub weight: T,
}

impl<T: Scalar> WeightedSample<T> {
    pub fn new(value: T, weight: T) -> Self {
        Self { value, weight }
    }

    /// Unit-weight samples from raw values.
    pub fn unweighted(values: &[T]) -> Vec<Self> {
        values.iter().map(|&v| Self::new(v, T::one())).collect()
    }
}

/// `τ u²` for `u ≥ 0`, `(1 - τ) u²` otherwise.
#[inline]
pub fn asym_l2_loss<T: Scalar>(u: T, tau: Tau) -> T {
    let t: T = tau.as_scalar();
    if u >= T::zero() {
        t * u * u
    } else {
        (T::one() - t) * u * u
    }
}

/// Derivative of [`asym_l2_loss`] in `u`; zero at `u = 0`.
#[inline]
pub fn asym_l2_grad<T: Scalar>(u: T, tau: Tau) -> T {
    let t: T = tau.as_scalar();
    let two = T::lit(2.0);
    if u > T::zero() {
        two * t * u
    } else if u < T::zero() {
        two * (T::one() - t) * u
    } else {
        T::zero()
    }
}

/// Pinball loss: `τ u` for `u ≥ 0`, `(1 - τ)(-u)` otherwise.
#[inline]
pub fn asym_l1_loss<T: Scalar>(u: T, tau: Tau) -> T {
    let t: T = tau.as_scalar();
    if u >= T::zero() {
        t * u
    } else {
        (t - T::one()) * u
    }
}

/// Subgradient of [`asym_l1_loss`]; zero at the kink.
#[inline]
pub fn asym_l1_grad<T: Scalar>(u: T, tau: Tau) -> T {
    let t: T = tau.as_scalar();
    if u > T::zero() {
        t
    } else if u < T::zero() {
        t - T::one()
    } else {
        T::zero()
    }
}

/// Which asymmetric loss a regression uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    #[default]
    Expectile,
    Quantile,
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expectile" => Ok(Self::Expectile),
            "quantile" => Ok(Self::Quantile),
            other => Err(format!(
                "unknown loss variant `{other}` (expected expectile|quantile)"
            )),
        }
    }
}

impl LossVariant {
    #[inline]
    pub fn loss<T: Scalar>(self, u: T, tau: Tau) -> T {
        match self {
            LossVariant::Expectile => asym_l2_loss(u, tau),
            LossVariant::Quantile => asym_l1_loss(u, tau),
        }
    }

    #[inline]
    pub fn grad<T: Scalar>(self, u: T, tau: Tau) -> T {
        match self {
            LossVariant::Expectile => asym_l2_grad(u, tau),
            LossVariant::Quantile => asym_l1_grad(u, tau),
        }
    }
}

/// First-order condition `τ E[(X - m)+] - (1 - τ) E[(m - X)+]`, normalised by total weight.
/// Strictly decreasing in `m`.
fn first_order_condition<T: Scalar>(samples: &[WeightedSample<T>], total: T, tau: T, m: T) -> T {
    let (mut above, mut below) = (T::zero(), T::zero());
    for s in samples {
        let d = s.value - m;
        if d > T::zero() {
            above += s.weight * d;
        } else {
            below -= s.weight * d;
        }
    }
    (tau * above - (T::one() - tau) * below) / total
}

/// τ-expectile of a weighted sample set by bisection on the first-order condition.
///
/// The returned `m` satisfies `|condition(m)| ≤ tol`, or is the point where the
/// bracketing interval can no longer be split in `T`'s precision.
pub fn scalar_expectile<T: Scalar>(
    samples: &[WeightedSample<T>],
    tau: Tau,
    tol: T,
) -> Result<T, ExpectileError> {
    if !(tol > T::zero()) {
        return Err(ExpectileError::BadTolerance(tol.as_f64()));
    }
    expectile_bisect(samples, tau, tol)
}

/// Bisection core; `tol = 0` bisects to the limit of the scalar precision.
pub(crate) fn expectile_bisect<T: Scalar>(
    samples: &[WeightedSample<T>],
    tau: Tau,
    tol: T,
) -> Result<T, ExpectileError> {
    if samples.is_empty() {
        return Err(ExpectileError::Empty);
    }
    let mut total = T::zero();
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for s in samples {
        if !s.weight.is_finite() || s.weight < T::zero() {
            return Err(ExpectileError::BadWeights);
        }
        if !s.value.is_finite() {
            return Err(ExpectileError::NonFiniteSample);
        }
        total += s.weight;
        if s.weight > T::zero() {
            lo = lo.min(s.value);
            hi = hi.max(s.value);
        }
    }
    if !(total > T::zero()) {
        return Err(ExpectileError::BadWeights);
    }
    if lo == hi {
        return Ok(lo);
    }
    let t: T = tau.as_scalar();
    let half = T::lit(0.5);
    loop {
        let mid = lo + (hi - lo) * half;
        if mid <= lo || mid >= hi {
            // Interval exhausted: pick the endpoint with the smaller residual.
            let flo = first_order_condition(samples, total, t, lo).abs();
            let fhi = first_order_condition(samples, total, t, hi).abs();
            return Ok(if flo <= fhi { lo } else { hi });
        }
        let f = first_order_condition(samples, total, t, mid);
        if f.abs() <= tol {
            return Ok(mid);
        }
        if f > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Fits `model(x) ≈ τ-expectile of y | x` by single-sample SGD on the asymmetric L2 loss.
///
/// The model's first output is the prediction.
pub fn fit_conditional_expectile<T: Scalar, R: Rng + ?Sized>(
    pairs: &[(Input<T>, T)],
    tau: Tau,
    mut model: Approximator<T>,
    steps: usize,
    lr: T,
    rng: &mut R,
) -> Result<Approximator<T>, ExpectileError> {
    if steps == 0 {
        return Err(ExpectileError::Parameter("steps must be >= 1".into()));
    }
    if !(lr > T::zero()) {
        return Err(ExpectileError::Parameter("lr must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(ExpectileError::Empty);
    }
    let mut cotangent = vec![T::zero(); model.n_outputs()];
    for step in 0..steps {
        let (x, y) = &pairs[rng.gen_range(0..pairs.len())];
        let pred = model.eval(x)?[0];
        let u = *y - pred;
        let loss = asym_l2_loss(u, tau);
        if !loss.is_finite() {
            return Err(ExpectileError::Divergence { step });
        }
        // d/dpred L(y - pred) = -L'(u)
        cotangent[0] = -asym_l2_grad(u, tau);
        let g = model.grad(x, &cotangent)?;
        model.sgd_step(&g, lr)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::ModelShape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tau(v: f64) -> Tau {
        Tau::new(v).unwrap()
    }

    #[test]
    fn tau_rejects_closed_endpoints() {
        assert!(Tau::new(0.0).is_err());
        assert!(Tau::new(1.0).is_err());
        assert!(Tau::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<Tau>("1.5").is_err());
        assert_eq!(serde_json::from_str::<Tau>("0.7").unwrap().get(), 0.7);
    }

    #[test]
    fn l2_loss_values() {
        assert!((asym_l2_loss::<f64>(1.0, tau(0.9)) - 0.9).abs() < 1e-15);
        assert!((asym_l2_loss::<f64>(-1.0, tau(0.9)) - 0.1).abs() < 1e-15);
        assert_eq!(asym_l2_loss::<f64>(0.0, tau(0.3)), 0.0);
    }

    #[test]
    fn l2_grad_values() {
        assert!((asym_l2_grad::<f64>(1.0, tau(0.7)) - 1.4).abs() < 1e-15);
        assert!((asym_l2_grad::<f64>(-2.0, tau(0.7)) - -1.2).abs() < 1e-12);
        assert_eq!(asym_l2_grad::<f64>(0.0, tau(0.7)), 0.0);
    }

    #[test]
    fn l2_grad_matches_central_difference_oracle() {
        let eps = 1e-6;
        for &(u, t) in &[(1.0, 0.7), (-2.0, 0.7), (0.3, 0.95), (-0.01, 0.1)] {
            let fd = (asym_l2_loss::<f64>(u + eps, tau(t)) - asym_l2_loss::<f64>(u - eps, tau(t)))
                / (2.0 * eps);
            let an = asym_l2_grad::<f64>(u, tau(t));
            assert!(((fd - an) / an).abs() < 1e-6, "u={u} tau={t}: {fd} vs {an}");
        }
    }

    #[test]
    fn l1_loss_values() {
        assert!((asym_l1_loss::<f64>(1.0, tau(0.9)) - 0.9).abs() < 1e-15);
        assert!((asym_l1_loss::<f64>(-1.0, tau(0.9)) - 0.1).abs() < 1e-15);
        assert_eq!(asym_l1_loss::<f64>(0.0, tau(0.9)), 0.0);
        assert!((asym_l1_grad::<f64>(-1.0, tau(0.9)) - -0.1).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_expectile_equals_tau() {
        // τ·½(1 - m) = (1 - τ)·½m  ⇒  m = τ
        let s = vec![WeightedSample::new(0.0, 0.5), WeightedSample::new(1.0, 0.5)];
        for &t in &[0.1, 0.5, 0.9, 0.99] {
            let m: f64 = scalar_expectile(&s, tau(t), 1e-12).unwrap();
            assert!((m - t).abs() < 1e-10, "tau {t}: {m}");
        }
    }

    #[test]
    fn point_mass_and_mean() {
        let s = WeightedSample::unweighted(&[2.5, 2.5, 2.5]);
        assert_eq!(scalar_expectile(&s, tau(0.9), 1e-10).unwrap(), 2.5);
        let s = vec![
            WeightedSample::new(1.0, 1.0),
            WeightedSample::new(4.0, 3.0),
            WeightedSample::new(-2.0, 0.5),
        ];
        let mean = (1.0 + 12.0 - 1.0) / 4.5;
        let m: f64 = scalar_expectile(&s, tau(0.5), 1e-13).unwrap();
        assert!((m - mean).abs() < 1e-10);
    }

    #[test]
    fn zero_weight_samples_do_not_widen_the_bracket() {
        let s = vec![
            WeightedSample::new(100.0, 0.0),
            WeightedSample::new(1.0, 1.0),
        ];
        assert_eq!(scalar_expectile(&s, tau(0.9), 1e-10).unwrap(), 1.0);
    }

    #[test]
    fn expectile_errors() {
        let empty: Vec<WeightedSample<f64>> = vec![];
        assert_eq!(
            scalar_expectile(&empty, tau(0.5), 1e-9),
            Err(ExpectileError::Empty)
        );
        let zero = vec![WeightedSample::new(1.0, 0.0)];
        assert_eq!(
            scalar_expectile(&zero, tau(0.5), 1e-9),
            Err(ExpectileError::BadWeights)
        );
        let neg = vec![
            WeightedSample::new(1.0, -1.0),
            WeightedSample::new(1.0, 2.0),
        ];
        assert_eq!(
            scalar_expectile(&neg, tau(0.5), 1e-9),
            Err(ExpectileError::BadWeights)
        );
        let ok = vec![WeightedSample::new(1.0, 1.0)];
        assert!(matches!(
            scalar_expectile(&ok, tau(0.5), 0.0),
            Err(ExpectileError::BadTolerance(_))
        ));
    }

    #[test]
    fn works_in_f32() {
        let s = vec![
            WeightedSample::new(0.0f32, 0.5),
            WeightedSample::new(1.0, 0.5),
        ];
        let m = scalar_expectile(&s, tau(0.8), 1e-6).unwrap();
        assert!((m - 0.8).abs() < 1e-5);
    }

    #[test]
    fn high_tau_gap_shrinks_toward_max() {
        let s = WeightedSample::unweighted(&[0.0, 1.0, 2.0, 3.0, 10.0]);
        let mut prev_gap = f64::INFINITY;
        for &t in &[0.9, 0.99, 0.999, 0.9999] {
            let m = scalar_expectile(&s, tau(t), 1e-12).unwrap();
            let gap = 10.0 - m;
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
        let m = scalar_expectile(&s, tau(0.999), 1e-12).unwrap();
        assert!(10.0 - m <= 0.05 * 10.0);
    }

    fn sample_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-50.0..50.0f64, 0.01..5.0f64), 1..20)
    }

    proptest! {
        #[test]
        fn expectile_is_monotone_in_tau(xs in sample_set(), a in 0.01..0.99f64, b in 0.01..0.99f64) {
            let s: Vec<_> = xs.iter().map(|&(v, w)| WeightedSample::new(v, w)).collect();
            let (t1, t2) = if a < b { (a, b) } else { (b, a) };
            let tol = 1e-10;
            let m1 = scalar_expectile(&s, tau(t1), tol).unwrap();
            let m2 = scalar_expectile(&s, tau(t2), tol).unwrap();
            prop_assert!(m1 <= m2 + 1e-8);
        }

        #[test]
        fn expectile_is_bounded_by_support(xs in sample_set(), t in 0.001..0.999f64) {
            let s: Vec<_> = xs.iter().map(|&(v, w)| WeightedSample::new(v, w)).collect();
            let m = scalar_expectile(&s, tau(t), 1e-10).unwrap();
            let lo = xs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = xs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= m && m <= hi);
        }

        #[test]
        fn expectile_is_scale_equivariant(xs in sample_set(), t in 0.05..0.95f64, c in 0.1..20.0f64) {
            let s: Vec<_> = xs.iter().map(|&(v, w)| WeightedSample::new(v, w)).collect();
            let scaled: Vec<_> = xs.iter().map(|&(v, w)| WeightedSample::new(c * v, w)).collect();
            let m = expectile_bisect(&s, tau(t), 0.0).unwrap();
            let mc = expectile_bisect(&scaled, tau(t), 0.0).unwrap();
            prop_assert!((mc - c * m).abs() <= 1e-9 * (1.0 + c * m.abs()));
        }

        #[test]
        fn returned_point_satisfies_first_order_condition(xs in sample_set(), t in 0.01..0.99f64) {
            let s: Vec<_> = xs.iter().map(|&(v, w)| WeightedSample::new(v, w)).collect();
            let tol = 1e-9;
            let m = scalar_expectile(&s, tau(t), tol).unwrap();
            let total: f64 = xs.iter().map(|p| p.1).sum();
            let f = first_order_condition(&s, total, t, m);
            prop_assert!(f.abs() <= tol);
        }
    }

    #[test]
    fn conditional_fit_constant_target() {
        let pairs: Vec<(Input<f64>, f64)> = (0..3).map(|i| (Input::Index(i), 4.0)).collect();
        let model = Approximator::init(&ModelShape::table(3, 1), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fitted =
            fit_conditional_expectile(&pairs, tau(0.8), model, 20_000, 0.05, &mut rng).unwrap();
        for i in 0..3 {
            assert!((fitted.eval(&Input::Index(i)).unwrap()[0] - 4.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conditional_fit_matches_slice_expectile() {
        // x = 0 has targets {0, 1}; x = 1 has targets {-1, 2, 5}.
        let mut pairs: Vec<(Input<f64>, f64)> =
            vec![(Input::Index(0), 0.0), (Input::Index(0), 1.0)];
        for y in [-1.0, 2.0, 5.0] {
            pairs.push((Input::Index(1), y));
        }
        for &t in &[0.5, 0.9] {
            let model = Approximator::init(&ModelShape::table(2, 1), 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let fitted =
                fit_conditional_expectile(&pairs, tau(t), model, 400_000, 5e-5, &mut rng).unwrap();
            for x in 0..2 {
                let slice: Vec<_> = pairs
                    .iter()
                    .filter(|(i, _)| *i == Input::Index(x))
                    .map(|(_, y)| WeightedSample::new(*y, 1.0))
                    .collect();
                let oracle: f64 = scalar_expectile(&slice, tau(t), 1e-12).unwrap();
                let got = fitted.eval(&Input::Index(x)).unwrap()[0];
                assert!(
                    (got - oracle).abs() < 2e-2,
                    "x={x} tau={t}: {got} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn conditional_fit_rejects_bad_parameters() {
        let pairs = vec![(Input::Index(0), 1.0)];
        let model = Approximator::init(&ModelShape::table(1, 1), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(
            fit_conditional_expectile(&pairs, tau(0.5), model.clone(), 0, 0.1, &mut rng).is_err()
        );
        assert!(
            fit_conditional_expectile(&pairs, tau(0.5), model.clone(), 10, 0.0, &mut rng).is_err()
        );
        let huge = vec![(Input::Index(0), f64::MAX)];
        assert_eq!(
            fit_conditional_expectile(&huge, tau(0.5), model, 10, 1.0, &mut rng).unwrap_err(),
            ExpectileError::Divergence { step: 0 }
        );
    }
}
