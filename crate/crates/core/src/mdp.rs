//! Finite MDPs: representation, validation, sampling and policy-induced kernels.

use nalgebra::DMatrix;
use rand::Rng;

use crate::policy::PolicyTable;
use crate::{Error, Result, Scalar};

/// Tolerance for row sums of probability vectors.
pub const PROB_TOL: f64 = 1e-12;
/// Rows off by at most this much are renormalized at construction.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// A finite MDP with deterministic rewards in `[0, 1]`.
///
/// States and actions are dense 0-based indices. The transition tensor is
/// stored flat in `(s, a, s')` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp<T> {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<T>,
    rewards: Vec<T>,
    initial_dist: Vec<T>,
}

/// One sampled step `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<T> {
    pub s: usize,
    pub a: usize,
    pub r: T,
    pub s_next: usize,
}

/// A row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix<T: Scalar> {
    entries: DMatrix<T>,
}

impl<T: Scalar> StochasticMatrix<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "stochastic matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let tol = T::tol(PROB_TOL);
        for (i, row) in entries.row_iter().enumerate() {
            if row.iter().any(|&p| p < T::zero() || !p.is_finite()) {
                return Err(Error::Domain(format!("row {i} has a negative or non-finite entry")));
            }
            let sum = row.sum();
            if (sum - T::one()).abs() > tol {
                return Err(Error::Domain(format!("row {i} sums to {}", sum.as_f64())));
            }
        }
        Ok(Self { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn get(&self, s: usize, s_next: usize) -> T {
        self.entries[(s, s_next)]
    }
}

impl<T: Scalar> TabularMdp<T> {
    /// Builds and validates an MDP. Rows that miss unit mass by at most
    /// [`RENORMALIZE_TOL`] are renormalized with a warning; anything worse is
    /// reported as [`Error::InvalidMdp`].
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<T>,
        rewards: Vec<T>,
        initial_dist: Vec<T>,
    ) -> Result<Self> {
        let mut mdp = Self::new_unchecked(n_states, n_actions, transitions, rewards, initial_dist);
        let shape = mdp.shape_violations();
        if !shape.is_empty() {
            return Err(Error::InvalidMdp(shape));
        }
        mdp.renormalize();
        let violations = mdp.validate();
        if violations.is_empty() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(violations))
        }
    }

    /// Stores the parts as given. Use [`TabularMdp::validate`] to inspect them.
    pub fn new_unchecked(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<T>,
        rewards: Vec<T>,
        initial_dist: Vec<T>,
    ) -> Self {
        Self { n_states, n_actions, transitions, rewards, initial_dist }
    }

    fn shape_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_states == 0 {
            out.push("n_states must be positive".to_string());
        }
        if self.n_actions == 0 {
            out.push("n_actions must be positive".to_string());
        }
        let (ns, na) = (self.n_states, self.n_actions);
        if self.transitions.len() != ns * na * ns {
            out.push(format!("transition tensor has {} entries, expected {}", self.transitions.len(), ns * na * ns));
        }
        if self.rewards.len() != ns * na {
            out.push(format!("reward table has {} entries, expected {}", self.rewards.len(), ns * na));
        }
        if self.initial_dist.len() != ns {
            out.push(format!("initial_dist has {} entries, expected {}", self.initial_dist.len(), ns));
        }
        out
    }

    fn renormalize(&mut self) {
        let tol = T::tol(PROB_TOL);
        let loose = T::lit(RENORMALIZE_TOL);
        let ns = self.n_states;
        for (k, row) in self.transitions.chunks_mut(ns).enumerate() {
            let sum: T = row.iter().copied().fold(T::zero(), |a, b| a + b);
            let err = (sum - T::one()).abs();
            if err > tol && err <= loose && row.iter().all(|&p| p >= T::zero()) {
                log::warn!("renormalizing row ({}, {}) with sum {}", k / self.n_actions, k % self.n_actions, sum.as_f64());
                row.iter_mut().for_each(|p| *p /= sum);
            }
        }
        let sum: T = self.initial_dist.iter().copied().fold(T::zero(), |a, b| a + b);
        let err = (sum - T::one()).abs();
        if err > tol && err <= loose && self.initial_dist.iter().all(|&p| p >= T::zero()) {
            log::warn!("renormalizing initial distribution with sum {}", sum.as_f64());
            self.initial_dist.iter_mut().for_each(|p| *p /= sum);
        }
    }

    /// Lists every violated invariant; an empty list means the MDP is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = self.shape_violations();
        if !out.is_empty() {
            return out;
        }
        let tol = T::tol(PROB_TOL);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                if let Some(p) = row.iter().find(|p| **p < T::zero() || **p > T::one() || !p.is_finite()) {
                    out.push(format!("transition entry of ({s},{a}) out of [0,1]: {}", p.as_f64()));
                }
                let sum: T = row.iter().copied().fold(T::zero(), |x, y| x + y);
                if (sum - T::one()).abs() > tol {
                    out.push(format!("row ({s},{a}) sums to {}", sum.as_f64()));
                }
                let r = self.reward(s, a);
                if !(r >= T::zero() && r <= T::one()) {
                    out.push(format!("reward out of [0,1] at ({s},{a}): {}", r.as_f64()));
                }
            }
        }
        if self.initial_dist.iter().any(|p| *p < T::zero() || !p.is_finite()) {
            out.push("initial_dist has a negative or non-finite entry".to_string());
        }
        let sum: T = self.initial_dist.iter().copied().fold(T::zero(), |x, y| x + y);
        if (sum - T::one()).abs() > tol {
            out.push(format!("initial_dist sums to {}", sum.as_f64()));
        }
        out
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `P(s' | s, a)`.
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> T {
        self.transitions[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// The next-state distribution of `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[T] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> T {
        self.rewards[s * self.n_actions + a]
    }

    pub fn initial_dist(&self) -> &[T] {
        &self.initial_dist
    }

    pub fn max_reward(&self) -> T {
        self.rewards.iter().copied().fold(T::zero(), |a, b| a.max(b))
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::InvalidIndex(format!("state {s} >= {}", self.n_states)));
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::InvalidIndex(format!("action {a} >= {}", self.n_actions)));
        }
        Ok(())
    }

    /// `P^π(s, s') = Σ_a P(s'|s,a) π(a|s)`.
    pub fn induced_kernel(&self, policy: &PolicyTable<T>) -> Result<StochasticMatrix<T>> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        let n = self.n_states;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == T::zero() {
                    continue;
                }
                for (s2, &p) in self.row(s, a).iter().enumerate() {
                    m[(s, s2)] += pa * p;
                }
            }
        }
        StochasticMatrix::new(m)
    }

    /// Expected one-step reward under the policy, `r^π(s)`.
    pub fn policy_reward(&self, policy: &PolicyTable<T>) -> nalgebra::DVector<T> {
        nalgebra::DVector::from_fn(self.n_states, |s, _| {
            (0..self.n_actions).fold(T::zero(), |acc, a| acc + policy.prob(s, a) * self.reward(s, a))
        })
    }

    /// Samples `s' ~ P(·|s,a)` and returns the transition with its reward.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<Transition<T>> {
        self.check_state(s)?;
        self.check_action(a)?;
        let s_next = sample_index(self.row(s, a), rng);
        Ok(Transition { s, a, r: self.reward(s, a), s_next })
    }

    /// Samples `s_0 ~ ρ`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.initial_dist, rng)
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{self, EnvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cycle2() -> TabularMdp<f64> {
        envs::build(&EnvSpec::Cycle2).unwrap()
    }

    #[test]
    fn fixtures_validate() {
        assert!(cycle2().validate().is_empty());
    }

    #[test]
    fn short_row_is_reported() {
        let mdp = TabularMdp::new_unchecked(2, 1, vec![0.0, 0.9, 1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]);
        let v = mdp.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("row (0,0) sums to 0.9"), "{v:?}");
    }

    #[test]
    fn large_reward_is_reported() {
        let mdp = TabularMdp::new_unchecked(1, 1, vec![1.0], vec![1.5], vec![1.0]);
        let v = mdp.validate();
        assert!(v.iter().any(|m| m.contains("reward out of [0,1]")), "{v:?}");
        assert!(matches!(TabularMdp::new(1, 1, vec![1.0], vec![1.5], vec![1.0]), Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn tiny_roundoff_is_renormalized() {
        let mdp = TabularMdp::new(1, 1, vec![1.0 + 5e-10], vec![0.5], vec![1.0]).unwrap();
        assert_eq!(mdp.p(0, 0, 0), 1.0);
    }

    #[test]
    fn induced_kernel_of_single_action_cycle() {
        let mdp = cycle2();
        let k = mdp.induced_kernel(&PolicyTable::uniform(2, 1)).unwrap();
        assert_eq!(k.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn induced_kernel_rejects_wrong_shape() {
        let mdp = cycle2();
        assert!(matches!(mdp.induced_kernel(&PolicyTable::uniform(3, 1)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn step_on_deterministic_cycle() {
        let mdp = cycle2();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = mdp.step(0, 0, &mut rng).unwrap();
        assert_eq!(t, Transition { s: 0, a: 0, r: 1.0, s_next: 1 });
        assert!(matches!(mdp.step(2, 0, &mut rng), Err(Error::InvalidIndex(_))));
        assert!(matches!(mdp.step(0, 1, &mut rng), Err(Error::InvalidIndex(_))));
    }

    #[test]
    fn step_on_bandit() {
        let mdp: TabularMdp<f64> = envs::build(&EnvSpec::Bandit).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mdp.step(0, 1, &mut rng).unwrap(), Transition { s: 0, a: 1, r: 1.0, s_next: 0 });
    }

    #[test]
    fn step_is_deterministic_given_seed() {
        let mdp: TabularMdp<f64> = envs::build(&EnvSpec::random(8, 3, 2, 7)).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| mdp.step(0, 0, &mut rng).unwrap().s_next).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn empirical_next_state_frequencies_match() {
        let mdp: TabularMdp<f64> = envs::build(&EnvSpec::random(8, 3, 2, 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        for (s, a) in [(0, 0), (3, 2), (7, 1)] {
            let mut counts = vec![0usize; mdp.n_states()];
            for _ in 0..n {
                counts[mdp.step(s, a, &mut rng).unwrap().s_next] += 1;
            }
            for (s2, &c) in counts.iter().enumerate() {
                let p = mdp.p(s, a, s2);
                let freq = c as f64 / n as f64;
                let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
                assert!((freq - p).abs() <= bound.max(1e-12), "({s},{a})->{s2}: {freq} vs {p}");
            }
        }
    }
}
