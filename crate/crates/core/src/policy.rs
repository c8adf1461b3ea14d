//! Softmax policies over per-(s, a) feature maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::mdp::sample_index;
use crate::{Error, Result, Scalar};

/// Feature map `ψ(s, a)` feeding the logits `θ·ψ(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyFeatures<T: Scalar> {
    /// One-hot over state-action pairs, `d = |S||A|`.
    Tabular { n_states: usize, n_actions: usize },
    /// Arbitrary vectors, stored in `(s, a)` order.
    Custom { n_states: usize, n_actions: usize, dim: usize, table: Vec<DVector<T>> },
}

impl<T: Scalar> PolicyFeatures<T> {
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        Self::Tabular { n_states, n_actions }
    }

    pub fn custom(n_states: usize, n_actions: usize, table: Vec<DVector<T>>) -> Result<Self> {
        if table.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "{} feature vectors for {} state-action pairs",
                table.len(),
                n_states * n_actions
            )));
        }
        let dim = table.first().map_or(0, |v| v.len());
        if table.iter().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch("feature vectors differ in length".into()));
        }
        Ok(Self::Custom { n_states, n_actions, dim, table })
    }

    pub fn n_states(&self) -> usize {
        match self {
            Self::Tabular { n_states, .. } | Self::Custom { n_states, .. } => *n_states,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Self::Tabular { n_actions, .. } | Self::Custom { n_actions, .. } => *n_actions,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Tabular { n_states, n_actions } => n_states * n_actions,
            Self::Custom { dim, .. } => *dim,
        }
    }

    pub fn feature(&self, s: usize, a: usize) -> DVector<T> {
        match self {
            Self::Tabular { n_actions, .. } => {
                let mut v = DVector::zeros(self.dim());
                v[s * n_actions + a] = T::one();
                v
            }
            Self::Custom { n_actions, table, .. } => table[s * n_actions + a].clone(),
        }
    }

    fn logit(&self, theta: &DVector<T>, s: usize, a: usize) -> T {
        match self {
            Self::Tabular { n_actions, .. } => theta[s * n_actions + a],
            Self::Custom { n_actions, table, .. } => theta.dot(&table[s * n_actions + a]),
        }
    }
}

/// Action probabilities `π(a|s)` as an `|S| x |A|` row-stochastic table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable<T: Scalar> {
    probs: DMatrix<T>,
}

impl<T: Scalar> PolicyTable<T> {
    pub fn new(probs: DMatrix<T>) -> Result<Self> {
        let tol = T::tol(crate::mdp::PROB_TOL);
        for (s, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&p| p < T::zero() || !p.is_finite()) || (row.sum() - T::one()).abs() > tol {
                return Err(Error::Domain(format!("policy row {s} is not a probability vector")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: DMatrix::from_element(n_states, n_actions, T::one() / T::lit(n_actions as f64)) }
    }

    /// The deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidIndex(format!("action {a} >= {n_actions}")));
            }
            probs[(s, a)] = T::one();
        }
        Ok(Self { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> T {
        self.probs[(s, a)]
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.probs
    }
}

/// Score vectors `∇_θ log π(a|s)` for every pair, cached for one `θ`.
#[derive(Debug, Clone)]
pub struct ScoreTable<T: Scalar> {
    n_actions: usize,
    scores: Vec<DVector<T>>,
}

impl<T: Scalar> ScoreTable<T> {
    pub fn get(&self, s: usize, a: usize) -> &DVector<T> {
        &self.scores[s * self.n_actions + a]
    }

    pub fn max_norm(&self) -> T {
        self.scores.iter().map(|v| v.norm()).fold(T::zero(), |a, b| a.max(b))
    }
}

/// `π_θ(a|s) ∝ exp(θ·ψ(s, a))`.
///
/// Cloning is cheap: the feature map is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy<T: Scalar> {
    theta: DVector<T>,
    features: Arc<PolicyFeatures<T>>,
}

impl<T: Scalar> SoftmaxPolicy<T> {
    pub fn new(features: PolicyFeatures<T>, theta: DVector<T>) -> Result<Self> {
        Self::with_shared(Arc::new(features), theta)
    }

    pub fn with_shared(features: Arc<PolicyFeatures<T>>, theta: DVector<T>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::DimensionMismatch(format!("θ has length {}, features have dim {}", theta.len(), features.dim())));
        }
        Ok(Self { theta, features })
    }

    /// Tabular softmax with `θ = 0`.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let features = PolicyFeatures::tabular(n_states, n_actions);
        let theta = DVector::zeros(features.dim());
        Self { theta, features: Arc::new(features) }
    }

    pub fn theta(&self) -> &DVector<T> {
        &self.theta
    }

    pub fn features(&self) -> &Arc<PolicyFeatures<T>> {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    /// Same features, different parameters.
    pub fn with_theta(&self, theta: DVector<T>) -> Result<Self> {
        Self::with_shared(self.features.clone(), theta)
    }

    pub fn logits(&self, s: usize) -> Vec<T> {
        (0..self.n_actions()).map(|a| self.features.logit(&self.theta, s, a)).collect()
    }

    /// Softmax of the logits with max-subtraction.
    pub fn action_probs(&self, s: usize) -> DVector<T> {
        let logits = self.logits(s);
        let max = logits.iter().copied().fold(T::min_value().unwrap_or(-T::one() / T::zero()), |a, b| a.max(b));
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z = exps.iter().copied().fold(T::zero(), |a, b| a + b);
        DVector::from_iterator(exps.len(), exps.into_iter().map(|e| e / z))
    }

    pub fn log_prob(&self, s: usize, a: usize) -> T {
        let logits = self.logits(s);
        let max = logits.iter().copied().fold(logits[0], |a, b| a.max(b));
        let lse = logits.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp()).ln() + max;
        logits[a] - lse
    }

    /// `∇_θ log π(a|s) = ψ(s,a) − Σ_b π(b|s) ψ(s,b)`.
    pub fn score(&self, s: usize, a: usize) -> DVector<T> {
        self.score_with(&self.action_probs(s), s, a)
    }

    fn score_with(&self, probs: &DVector<T>, s: usize, a: usize) -> DVector<T> {
        let mut out = self.features.feature(s, a);
        for (b, &pb) in probs.iter().enumerate() {
            match &*self.features {
                PolicyFeatures::Tabular { n_actions, .. } => out[s * n_actions + b] -= pb,
                PolicyFeatures::Custom { .. } => out.axpy(-pb, &self.features.feature(s, b), T::one()),
            }
        }
        out
    }

    pub fn table(&self) -> PolicyTable<T> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut probs = DMatrix::zeros(ns, na);
        for s in 0..ns {
            probs.row_mut(s).copy_from(&self.action_probs(s).transpose());
        }
        PolicyTable { probs }
    }

    pub fn scores(&self) -> ScoreTable<T> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut scores = Vec::with_capacity(ns * na);
        for s in 0..ns {
            let probs = self.action_probs(s);
            for a in 0..na {
                scores.push(self.score_with(&probs, s, a));
            }
        }
        ScoreTable { n_actions: na, scores }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.action_probs(s).as_slice(), rng)
    }

    /// `θ ← θ + α ω`, returned as a new policy.
    pub fn update(&self, omega: &DVector<T>, alpha: T) -> Result<Self> {
        if omega.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("ω has length {}, θ has {}", omega.len(), self.dim())));
        }
        self.with_theta(&self.theta + omega * alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bandit(theta: [f64; 2]) -> SoftmaxPolicy<f64> {
        SoftmaxPolicy::tabular(1, 2).with_theta(DVector::from_row_slice(&theta)).unwrap()
    }

    fn random_policy(ns: usize, na: usize, rng: &mut ChaCha8Rng, scale: f64) -> SoftmaxPolicy<f64> {
        let p = SoftmaxPolicy::tabular(ns, na);
        let theta = DVector::from_fn(p.dim(), |_, _| { let x: f64 = StandardNormal.sample(rng); scale * x });
        p.with_theta(theta).unwrap()
    }

    #[test]
    fn zero_theta_is_uniform() {
        let p = SoftmaxPolicy::<f64>::tabular(3, 4);
        for s in 0..3 {
            assert_abs_diff_eq!(p.action_probs(s), DVector::from_element(4, 0.25), epsilon = 1e-15);
        }
    }

    #[test]
    fn logistic_probability() {
        let p = bandit([0.0, 3.0]);
        let sigma3 = 1.0 / (1.0 + (-3.0f64).exp());
        assert_abs_diff_eq!(p.action_probs(0)[1], sigma3, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma3, 0.95257, epsilon = 1e-5);
    }

    #[test]
    fn shift_invariance_and_overflow_safety() {
        let p = bandit([0.3, -1.2]);
        let shifted = bandit([0.3 + 800.0, -1.2 + 800.0]);
        assert_abs_diff_eq!(p.action_probs(0), shifted.action_probs(0), epsilon = 1e-12);
    }

    #[test]
    fn bandit_score_at_zero() {
        let p = bandit([0.0, 0.0]);
        assert_abs_diff_eq!(p.score(0, 1), DVector::from_row_slice(&[-0.5, 0.5]), epsilon = 1e-15);
    }

    #[test]
    fn single_action_score_is_zero() {
        let p = SoftmaxPolicy::<f64>::tabular(2, 1).with_theta(DVector::from_row_slice(&[4.0, -2.0])).unwrap();
        assert_eq!(p.score(1, 0), DVector::zeros(2));
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_policy(3, 3, &mut rng, 1.0);
        let h = 1e-5;
        for s in 0..3 {
            for a in 0..3 {
                let score = p.score(s, a);
                for i in 0..p.dim() {
                    let mut e = DVector::zeros(p.dim());
                    e[i] = h;
                    let fp = p.with_theta(p.theta() + &e).unwrap().log_prob(s, a);
                    let fm = p.with_theta(p.theta() - &e).unwrap().log_prob(s, a);
                    let fd = (fp - fm) / (2.0 * h);
                    let err = (fd - score[i]).abs();
                    assert!(err <= 1e-6 * score[i].abs().max(1e-3), "s={s} a={a} i={i}: {fd} vs {}", score[i]);
                }
            }
        }
    }

    #[test]
    fn custom_features_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table: Vec<DVector<f64>> =
            (0..6).map(|_| DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng))).collect();
        let features = PolicyFeatures::custom(2, 3, table).unwrap();
        let theta = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
        let p = SoftmaxPolicy::new(features, theta).unwrap();
        let h = 1e-5;
        for (s, a) in [(0, 0), (1, 2)] {
            let score = p.score(s, a);
            for i in 0..4 {
                let mut e = DVector::zeros(4);
                e[i] = h;
                let fd = (p.with_theta(p.theta() + &e).unwrap().log_prob(s, a)
                    - p.with_theta(p.theta() - &e).unwrap().log_prob(s, a))
                    / (2.0 * h);
                assert!((fd - score[i]).abs() <= 1e-6 * score[i].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn update_follows_natural_direction() {
        let p = bandit([0.0, 0.0]);
        let q = p.update(&DVector::from_row_slice(&[-0.5, 0.5]), 1.0).unwrap();
        assert_eq!(q.theta().as_slice(), &[-0.5, 0.5]);
        assert_abs_diff_eq!(q.action_probs(0)[1], 0.73106, epsilon = 1e-5);
        assert_eq!(p.update(&DVector::zeros(2), 1.0).unwrap(), p);
        assert_eq!(p.update(&DVector::from_row_slice(&[3.0, 1.0]), 0.0).unwrap().theta(), p.theta());
        assert!(matches!(p.update(&DVector::zeros(3), 1.0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn score_norm_bounded_by_sqrt2() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let p = random_policy(1, 4, &mut rng, 4.0);
            let a = rand::Rng::random_range(&mut rng, 0..4);
            worst = worst.max(p.score(0, a).norm());
        }
        assert!(worst <= 2f64.sqrt() + 1e-12, "{worst}");
    }

    #[test]
    fn single_precision_policy() {
        let p = SoftmaxPolicy::<f32>::tabular(1, 2).with_theta(DVector::from_row_slice(&[0.0, 3.0])).unwrap();
        assert!((p.action_probs(0)[1] - 0.95257).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn probabilities_and_zero_mean_scores(seed in 0u64..10_000, ns in 1usize..5, na in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_policy(ns, na, &mut rng, 3.0);
            for s in 0..ns {
                let probs = p.action_probs(s);
                prop_assert!((probs.sum() - 1.0).abs() <= 1e-12);
                prop_assert!(probs.iter().all(|&x| x > 0.0));
                let mean: DVector<f64> = (0..na).fold(DVector::zeros(p.dim()), |acc, a| acc + p.score(s, a) * probs[a]);
                prop_assert!(mean.norm() <= 1e-10);
            }
        }
    }
}
