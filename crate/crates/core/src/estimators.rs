//! The two sampled subroutines of the actor-critic: a batched TD critic for
//! `ξ = [η, ζ]` and a batched natural-gradient estimator for `ω`. Both are
//! instances of the recursion in [`crate::linrec`], fed either by Markovian
//! batches from one continuing trajectory or by exact expectations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainAnalysis, CriticSystem};
use crate::linrec::{self, FixedSource, NoisyOperator, OperatorSource, RecursionReport, RecursionSpec, Reference};
use crate::mdp::{TabularMdp, Transition};
use crate::policy::{ScoreTable, SoftmaxPolicy};
use crate::{Error, Result, Scalar};

/// State features `φ(s)` for the critic, stored as an `|S| x m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticFeatures<T: Scalar> {
    phi: DMatrix<T>,
}

impl<T: Scalar> CriticFeatures<T> {
    /// Rejects any row with `‖φ(s)‖ > 1`.
    pub fn new(phi: DMatrix<T>) -> Result<Self> {
        let f = Self { phi };
        f.check_norms()?;
        Ok(f)
    }

    pub fn one_hot(n_states: usize) -> Self {
        Self { phi: DMatrix::identity(n_states, n_states) }
    }

    /// `φ(s) = [c]` for every state.
    pub fn constant(n_states: usize, c: T) -> Result<Self> {
        Self::new(DMatrix::from_element(n_states, 1, c))
    }

    /// Gaussian rows rescaled to norms uniform in `[0.5, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, dim: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut phi = DMatrix::from_fn(n_states, dim, |_, _| T::lit(StandardNormal.sample(rng)));
        for mut row in phi.row_iter_mut() {
            let norm = row.norm();
            let target = T::lit(0.5 + 0.5 * rng.random::<f64>());
            if norm > T::zero() {
                row *= target / norm;
            }
        }
        Self { phi }
    }

    pub fn check_norms(&self) -> Result<()> {
        for (s, row) in self.phi.row_iter().enumerate() {
            let norm = row.norm();
            if norm > T::one() + T::tol(1e-12) {
                return Err(Error::FeatureNormViolation { state: s, norm: norm.as_f64() });
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.phi
    }

    pub fn phi(&self, s: usize) -> DVector<T> {
        self.phi.row(s).transpose()
    }

    /// `ζ^T φ(s)` for every state.
    pub fn values(&self, zeta: &DVector<T>) -> DVector<T> {
        &self.phi * zeta
    }
}

/// Critic parameters `ξ = [η, ζ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState<T: Scalar> {
    pub xi: DVector<T>,
}

impl<T: Scalar> CriticState<T> {
    pub fn zeros(feature_dim: usize) -> Self {
        Self { xi: DVector::zeros(feature_dim + 1) }
    }

    pub fn new(eta: T, zeta: &DVector<T>) -> Self {
        let mut xi = DVector::zeros(zeta.len() + 1);
        xi[0] = eta;
        xi.rows_mut(1, zeta.len()).copy_from(zeta);
        Self { xi }
    }

    pub fn eta(&self) -> T {
        self.xi[0]
    }

    pub fn zeta(&self) -> DVector<T> {
        self.xi.rows(1, self.xi.len() - 1).into_owned()
    }
}

/// Natural-gradient estimate `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpgState<T: Scalar> {
    pub omega: DVector<T>,
}

impl<T: Scalar> NpgState<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { omega: DVector::zeros(dim) }
    }
}

/// Sign of the NPG inner update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpgSign {
    /// `ω ← ω − γ(A_u ω − b_u)`: gradient descent on the compatible loss.
    #[default]
    Descent,
    /// `ω ← ω + γ(A_u ω − b_u)`, as the update is sometimes written.
    Literal,
}

/// Per-sample critic operators:
/// `A_v = [[c_β, 0], [φ(s), φ(s)(φ(s) − φ(s'))^T]]`, `b_v = [c_β r, r φ(s)]`.
pub fn critic_sample_op<T: Scalar>(features: &CriticFeatures<T>, z: &Transition<T>, c_beta: T) -> (DMatrix<T>, DVector<T>) {
    let m = features.dim();
    let ps = features.phi(z.s);
    let diff = &ps - features.phi(z.s_next);
    let mut a = DMatrix::zeros(m + 1, m + 1);
    a[(0, 0)] = c_beta;
    a.view_mut((1, 0), (m, 1)).copy_from(&ps);
    a.view_mut((1, 1), (m, m)).copy_from(&(&ps * diff.transpose()));
    let mut b = DVector::zeros(m + 1);
    b[0] = c_beta * z.r;
    b.rows_mut(1, m).copy_from(&(ps * z.r));
    (a, b)
}

/// `Â = r − η + ζ^T(φ(s') − φ(s))`.
pub fn advantage_estimate<T: Scalar>(features: &CriticFeatures<T>, critic: &CriticState<T>, z: &Transition<T>) -> T {
    advantage_with_values(&features.values(&critic.zeta()), critic.eta(), z)
}

fn advantage_with_values<T: Scalar>(values: &DVector<T>, eta: T, z: &Transition<T>) -> T {
    z.r - eta + values[z.s_next] - values[z.s]
}

/// Per-sample NPG operators `A_u = g g^T`, `b_u = Â g` with `g` the score.
pub fn npg_sample_op<T: Scalar>(
    policy: &SoftmaxPolicy<T>,
    features: &CriticFeatures<T>,
    critic: &CriticState<T>,
    z: &Transition<T>,
) -> (DMatrix<T>, DVector<T>) {
    let g = policy.score(z.s, z.a);
    let adv = advantage_estimate(features, critic, z);
    (&g * g.transpose(), g * adv)
}

/// One continuing trajectory: the carried state, a sample budget and the
/// rewards observed so far, in interaction order.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    state: usize,
    consumed: usize,
    budget: Option<usize>,
    rewards: Vec<T>,
    transitions: Option<Vec<Transition<T>>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(s0: usize) -> Self {
        Self { state: s0, consumed: 0, budget: None, rewards: Vec::new(), transitions: None }
    }

    pub fn start<R: Rng + ?Sized>(mdp: &TabularMdp<T>, rng: &mut R) -> Self {
        Self::new(mdp.sample_initial(rng))
    }

    /// Fails with [`Error::SamplerExhausted`] after `budget` transitions.
    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    /// Keeps every transition, for continuity checks.
    pub fn recording(mut self) -> Self {
        self.transitions = Some(Vec::new());
        self
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn rewards(&self) -> &[T] {
        &self.rewards
    }

    pub fn into_rewards(self) -> Vec<T> {
        self.rewards
    }

    pub fn transitions(&self) -> Option<&[Transition<T>]> {
        self.transitions.as_deref()
    }

    /// Acts with `policy` in the carried state and advances it.
    pub fn next<R: Rng + ?Sized>(&mut self, mdp: &TabularMdp<T>, policy: &SoftmaxPolicy<T>, rng: &mut R) -> Result<Transition<T>> {
        if self.budget.is_some_and(|b| self.consumed >= b) {
            return Err(Error::SamplerExhausted(self.consumed));
        }
        let a = policy.sample_action(self.state, rng);
        let z = mdp.step(self.state, a, rng)?;
        self.state = z.s_next;
        self.consumed += 1;
        self.rewards.push(z.r);
        if let Some(log) = &mut self.transitions {
            log.push(z);
        }
        Ok(z)
    }
}

/// Averages `B` per-sample critic operators from the trajectory per step.
///
/// `A_v(z)` depends only on `(s, s')` and `b_v(z)` on `(s, r)`, so a batch is
/// reduced to pair counts before the matrices are formed.
pub struct CriticBatchSource<'a, T: Scalar> {
    pub mdp: &'a TabularMdp<T>,
    pub policy: &'a SoftmaxPolicy<T>,
    pub features: &'a CriticFeatures<T>,
    pub trajectory: &'a mut Trajectory<T>,
    pub batch: usize,
    pub c_beta: T,
}

impl<T: Scalar> OperatorSource<T> for CriticBatchSource<'_, T> {
    fn dim(&self) -> usize {
        self.features.dim() + 1
    }

    fn draw(&mut self, _h: usize, rng: &mut dyn RngCore) -> Result<NoisyOperator<T>> {
        let n = self.mdp.n_states();
        let m = self.features.dim();
        let mut pair_counts = vec![0usize; n * n];
        let mut reward_sums = vec![T::zero(); n];
        for _ in 0..self.batch {
            let z = self.trajectory.next(self.mdp, self.policy, rng)?;
            pair_counts[z.s * n + z.s_next] += 1;
            reward_sums[z.s] += z.r;
        }
        let inv_b = T::one() / T::lit(self.batch as f64);
        let mut p = DMatrix::zeros(m + 1, m + 1);
        let mut q = DVector::zeros(m + 1);
        let mut total_r = T::zero();
        for s in 0..n {
            let ps = self.features.phi(s);
            let mut state_count = 0usize;
            let mut next_mean = DVector::zeros(m);
            for s2 in 0..n {
                let c = pair_counts[s * n + s2];
                if c > 0 {
                    state_count += c;
                    next_mean.axpy(T::lit(c as f64), &self.features.phi(s2), T::one());
                }
            }
            if state_count == 0 {
                continue;
            }
            let w = T::lit(state_count as f64) * inv_b;
            // Σ_z φ(s)(φ(s) − φ(s'))^T over samples leaving s.
            let diff = &ps * w - next_mean * inv_b;
            let mut block = p.view_mut((1, 0), (m, 1));
            block += &ps * w;
            let mut lower = p.view_mut((1, 1), (m, m));
            lower.ger(T::one(), &ps, &diff, T::one());
            q.rows_mut(1, m).axpy(reward_sums[s] * inv_b, &ps, T::one());
            total_r += reward_sums[s];
        }
        p[(0, 0)] = self.c_beta;
        q[0] = self.c_beta * total_r * inv_b;
        Ok(NoisyOperator { p, q })
    }
}

/// Averages `B` per-sample NPG operators per step, with `ξ` frozen.
pub struct NpgBatchSource<'a, T: Scalar> {
    pub mdp: &'a TabularMdp<T>,
    pub policy: &'a SoftmaxPolicy<T>,
    pub scores: ScoreTable<T>,
    /// `ζ^T φ(s)` for every state.
    pub values: DVector<T>,
    pub eta: T,
    pub trajectory: &'a mut Trajectory<T>,
    pub batch: usize,
    pub sign: NpgSign,
}

impl<'a, T: Scalar> NpgBatchSource<'a, T> {
    pub fn new(
        mdp: &'a TabularMdp<T>,
        policy: &'a SoftmaxPolicy<T>,
        features: &CriticFeatures<T>,
        critic: &CriticState<T>,
        trajectory: &'a mut Trajectory<T>,
        batch: usize,
        sign: NpgSign,
    ) -> Self {
        Self {
            mdp,
            policy,
            scores: policy.scores(),
            values: features.values(&critic.zeta()),
            eta: critic.eta(),
            trajectory,
            batch,
            sign,
        }
    }
}

impl<T: Scalar> OperatorSource<T> for NpgBatchSource<'_, T> {
    fn dim(&self) -> usize {
        self.policy.dim()
    }

    fn draw(&mut self, _h: usize, rng: &mut dyn RngCore) -> Result<NoisyOperator<T>> {
        let na = self.mdp.n_actions();
        let pairs = self.mdp.n_states() * na;
        let mut counts = vec![0usize; pairs];
        let mut adv_sums = vec![T::zero(); pairs];
        for _ in 0..self.batch {
            let z = self.trajectory.next(self.mdp, self.policy, rng)?;
            let k = z.s * na + z.a;
            counts[k] += 1;
            adv_sums[k] += advantage_with_values(&self.values, self.eta, &z);
        }
        let inv_b = T::one() / T::lit(self.batch as f64);
        let d = self.policy.dim();
        let mut p = DMatrix::zeros(d, d);
        let mut q = DVector::zeros(d);
        for k in 0..pairs {
            if counts[k] == 0 {
                continue;
            }
            let g = self.scores.get(k / na, k % na);
            p.ger(T::lit(counts[k] as f64) * inv_b, g, g, T::one());
            q.axpy(adv_sums[k] * inv_b, g, T::one());
        }
        Ok(signed(NoisyOperator { p, q }, self.sign))
    }
}

fn signed<T: Scalar>(op: NoisyOperator<T>, sign: NpgSign) -> NoisyOperator<T> {
    match sign {
        NpgSign::Descent => op,
        NpgSign::Literal => NoisyOperator { p: -op.p, q: -op.q },
    }
}

/// `E[A_u]` and `E[b_u]` under `d(s) π(a|s) P(s'|s,a)` for a frozen critic.
pub fn npg_expected_ops<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &SoftmaxPolicy<T>,
    analysis: &ChainAnalysis<T>,
    features: &CriticFeatures<T>,
    critic: &CriticState<T>,
) -> (DMatrix<T>, DVector<T>) {
    let d = analysis.stationary_dist();
    let values = features.values(&critic.zeta());
    let eta = critic.eta();
    let table = policy.table();
    let scores = policy.scores();
    let dim = policy.dim();
    let mut a_u = DMatrix::zeros(dim, dim);
    let mut b_u = DVector::zeros(dim);
    for s in 0..mdp.n_states() {
        if d[s] == T::zero() {
            continue;
        }
        for a in 0..mdp.n_actions() {
            let w = d[s] * table.prob(s, a);
            let next = mdp.row(s, a).iter().zip(values.iter()).fold(T::zero(), |acc, (&p, &v)| acc + p * v);
            let adv = mdp.reward(s, a) - eta + next - values[s];
            let g = scores.get(s, a);
            a_u.ger(w, g, g, T::one());
            b_u.axpy(w * adv, g, T::one());
        }
    }
    (a_u, b_u)
}

/// Where the inner loops get their operators from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Markovian batches from the trajectory.
    Sampled,
    /// Exact expectations under the stationary distribution (no samples).
    Exact,
}

/// Runs `H` critic updates `ξ ← ξ − β(mean A_v ξ − mean b_v)` on `B`-sample
/// batches. `system`, when given, is used as the reference for the
/// projected error.
#[allow(clippy::too_many_arguments)]
pub fn critic_inner_loop<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &SoftmaxPolicy<T>,
    features: &CriticFeatures<T>,
    trajectory: &mut Trajectory<T>,
    xi0: &CriticState<T>,
    horizon: usize,
    batch: usize,
    beta: T,
    c_beta: T,
    system: Option<&CriticSystem<T>>,
    rng: &mut dyn RngCore,
) -> Result<(CriticState<T>, RecursionReport<T>)> {
    let mut spec = RecursionSpec::new(beta, horizon);
    if let Some(sys) = system {
        spec = spec.with_reference(critic_reference(sys));
    }
    let mut source = CriticBatchSource { mdp, policy, features, trajectory, batch, c_beta };
    let report = linrec::run(&spec, &mut source, xi0.xi.clone(), rng)?;
    Ok((CriticState { xi: report.x_final.clone() }, report))
}

/// The critic recursion driven by the exact expected operators.
pub fn critic_exact_loop<T: Scalar>(
    system: &CriticSystem<T>,
    xi0: &CriticState<T>,
    horizon: usize,
    beta: T,
    rng: &mut dyn RngCore,
) -> Result<(CriticState<T>, RecursionReport<T>)> {
    let spec = RecursionSpec::new(beta, horizon).with_reference(critic_reference(system));
    let mut source = FixedSource::new(system.a_v.clone(), system.b_v.clone());
    let report = linrec::run(&spec, &mut source, xi0.xi.clone(), rng)?;
    Ok((CriticState { xi: report.x_final.clone() }, report))
}

fn critic_reference<T: Scalar>(sys: &CriticSystem<T>) -> Reference<T> {
    let m = sys.kernel_basis.nrows();
    let mut kernel = DMatrix::zeros(m + 1, sys.kernel_basis.ncols());
    kernel.view_mut((1, 0), (m, sys.kernel_basis.ncols())).copy_from(&sys.kernel_basis);
    Reference::with_kernel(sys.a_v.clone(), sys.b_v.clone(), sys.xi_star.clone(), kernel)
}

/// Runs `H` NPG updates on `B`-sample batches with `ξ` frozen.
/// `reference`, when given, is `(F, ∇J)`.
#[allow(clippy::too_many_arguments)]
pub fn npg_inner_loop<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &SoftmaxPolicy<T>,
    features: &CriticFeatures<T>,
    critic: &CriticState<T>,
    trajectory: &mut Trajectory<T>,
    omega0: &NpgState<T>,
    horizon: usize,
    batch: usize,
    gamma: T,
    sign: NpgSign,
    reference: Option<Reference<T>>,
    rng: &mut dyn RngCore,
) -> Result<(NpgState<T>, RecursionReport<T>)> {
    if horizon == 0 || gamma == T::zero() {
        // Nothing to do, but the phase still consumes its samples.
        for _ in 0..horizon * batch {
            trajectory.next(mdp, policy, rng)?;
        }
        let report = RecursionReport {
            x_final: omega0.omega.clone(),
            projected_errors: Vec::new(),
            constants: None,
            kernel_violations: 0,
            kernel_drift: T::zero(),
        };
        return Ok((omega0.clone(), report));
    }
    let mut spec = RecursionSpec::new(gamma, horizon);
    if let Some(r) = reference {
        spec = spec.with_reference(r);
    }
    let mut source = NpgBatchSource::new(mdp, policy, features, critic, trajectory, batch, sign);
    let report = linrec::run(&spec, &mut source, omega0.omega.clone(), rng)?;
    Ok((NpgState { omega: report.x_final.clone() }, report))
}

/// The NPG recursion driven by the exact expected operators.
#[allow(clippy::too_many_arguments)]
pub fn npg_exact_loop<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &SoftmaxPolicy<T>,
    analysis: &ChainAnalysis<T>,
    features: &CriticFeatures<T>,
    critic: &CriticState<T>,
    omega0: &NpgState<T>,
    horizon: usize,
    gamma: T,
    sign: NpgSign,
    rng: &mut dyn RngCore,
) -> Result<(NpgState<T>, RecursionReport<T>)> {
    let (a_u, b_u) = npg_expected_ops(mdp, policy, analysis, features, critic);
    let reference = Reference::new(a_u.clone(), b_u.clone());
    let op = signed(NoisyOperator { p: a_u, q: b_u }, sign);
    if gamma == T::zero() {
        return Ok((omega0.clone(), RecursionReport {
            x_final: omega0.omega.clone(),
            projected_errors: vec![reference.projected_error(&omega0.omega)],
            constants: None,
            kernel_violations: 0,
            kernel_drift: T::zero(),
        }));
    }
    let spec = RecursionSpec::new(gamma, horizon).with_reference(reference);
    let mut source = FixedSource { op };
    let report = linrec::run(&spec, &mut source, omega0.omega.clone(), rng)?;
    Ok((NpgState { omega: report.x_final.clone() }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{critic_system, exact_npg, exact_policy_gradient, fisher_matrix, PolicyEvaluation};
    use crate::envs::{build, EnvSpec};
    use crate::linalg;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn env(spec: EnvSpec) -> TabularMdp<f64> {
        build(&spec).unwrap()
    }

    fn z(s: usize, a: usize, r: f64, s_next: usize) -> Transition<f64> {
        Transition { s, a, r, s_next }
    }

    #[test]
    fn critic_sample_op_example() {
        let f = CriticFeatures::one_hot(2);
        let (a, b) = critic_sample_op(&f, &z(0, 0, 1.0, 1), 2.0);
        let expected = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a, expected);
        assert_eq!(b.as_slice(), &[2.0, 1.0, 0.0]);
        let (_, b) = critic_sample_op(&f, &z(0, 0, 0.0, 1), 2.0);
        assert_eq!(b, DVector::zeros(3));
        let (a, _) = critic_sample_op(&f, &z(1, 0, 0.0, 1), 2.0);
        assert_eq!(a.view((1, 1), (2, 2)).into_owned(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn feature_norms_are_enforced() {
        assert!(matches!(
            CriticFeatures::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])),
            Err(Error::FeatureNormViolation { state: 0, .. })
        ));
        assert!(CriticFeatures::<f64>::constant(3, 2.0).is_err());
    }

    #[test]
    fn advantage_estimate_examples() {
        let f = CriticFeatures::one_hot(2);
        let exact = CriticState::new(0.5, &DVector::from_row_slice(&[0.25, -0.25]));
        assert_abs_diff_eq!(advantage_estimate(&f, &exact, &z(0, 0, 1.0, 1)), 0.0, epsilon = 1e-15);
        let c = CriticState::new(0.3, &DVector::from_row_slice(&[0.7, 0.1]));
        assert_abs_diff_eq!(advantage_estimate(&f, &c, &z(1, 0, 0.3, 1)), 0.0, epsilon = 1e-15);
        let c = CriticState::new(0.3, &DVector::zeros(2));
        assert_abs_diff_eq!(advantage_estimate(&f, &c, &z(0, 0, 1.0, 1)), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn npg_sample_op_example() {
        let p = SoftmaxPolicy::tabular(1, 2);
        let f = CriticFeatures::one_hot(1);
        let c = CriticState::new(0.5, &DVector::zeros(1));
        let (a, b) = npg_sample_op(&p, &f, &c, &z(0, 1, 1.0, 0));
        assert_abs_diff_eq!(b.as_slice(), &[-0.25, 0.25][..], epsilon = 1e-15);
        assert_abs_diff_eq!(a.as_slice(), &[0.25, -0.25, -0.25, 0.25][..], epsilon = 1e-15);
        let single = SoftmaxPolicy::tabular(2, 1);
        let (a, b) = npg_sample_op(&single, &CriticFeatures::one_hot(2), &CriticState::zeros(2), &z(0, 0, 1.0, 1));
        assert_eq!((a.amax(), b.amax()), (0.0, 0.0));
        let (_, b) = npg_sample_op(&p, &f, &CriticState::new(1.0, &DVector::zeros(1)), &z(0, 1, 1.0, 0));
        assert_eq!(b, DVector::zeros(2));
    }

    #[test]
    fn batched_operators_match_per_sample_average() {
        let mdp = env(EnvSpec::random(6, 2, 1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = SoftmaxPolicy::tabular(6, 2);
        let policy = base.with_theta(DVector::from_fn(12, |_, _| StandardNormal.sample(&mut rng))).unwrap();
        let features = CriticFeatures::random(6, 3, &mut rng);
        let critic = CriticState::new(0.4, &DVector::from_row_slice(&[0.3, -0.2, 0.9]));

        let mut traj = Trajectory::new(0).recording();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let op = CriticBatchSource { mdp: &mdp, policy: &policy, features: &features, trajectory: &mut traj, batch: 50, c_beta: 1.5 }
            .draw(0, &mut r1)
            .unwrap();
        let zs = traj.transitions().unwrap().to_vec();
        let (mut a, mut b) = (DMatrix::zeros(4, 4), DVector::zeros(4));
        for zz in &zs {
            let (ai, bi) = critic_sample_op(&features, zz, 1.5);
            a += ai / 50.0;
            b += bi / 50.0;
        }
        assert!((op.p - a).amax() <= 1e-12);
        assert!((op.q - b).amax() <= 1e-12);

        let mut traj = Trajectory::new(0).recording();
        let op = NpgBatchSource::new(&mdp, &policy, &features, &critic, &mut traj, 50, NpgSign::Descent)
            .draw(0, &mut r1)
            .unwrap();
        let (mut a, mut b) = (DMatrix::zeros(12, 12), DVector::zeros(12));
        for zz in traj.transitions().unwrap() {
            let (ai, bi) = npg_sample_op(&policy, &features, &critic, zz);
            a += ai / 50.0;
            b += bi / 50.0;
        }
        assert!((op.p - a).amax() <= 1e-12);
        assert!((op.q - b).amax() <= 1e-12);
    }

    #[test]
    fn trajectory_is_contiguous_and_budgeted() {
        let mdp = env(EnvSpec::random(5, 2, 1, 1));
        let policy = SoftmaxPolicy::tabular(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut traj = Trajectory::new(0).with_budget(10).recording();
        for _ in 0..10 {
            traj.next(&mdp, &policy, &mut rng).unwrap();
        }
        assert!(matches!(traj.next(&mdp, &policy, &mut rng), Err(Error::SamplerExhausted(10))));
        let zs = traj.transitions().unwrap();
        assert!(zs.windows(2).all(|w| w[0].s_next == w[1].s));
        assert_eq!(traj.rewards().len(), 10);
    }

    #[test]
    fn exact_critic_loop_converges_on_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in EnvSpec::fixtures() {
            let mdp = env(spec);
            let policy = SoftmaxPolicy::tabular(mdp.n_states(), mdp.n_actions());
            let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
            let features = CriticFeatures::one_hot(mdp.n_states());
            let lambda = critic_system(&mdp, &e.table, &e.analysis, &features, 1.0).unwrap().lambda().unwrap_or(1.0).min(1.0);
            let c_beta = lambda + (1.0 / (lambda * lambda) - 1.0).sqrt();
            let sys = critic_system(&mdp, &e.table, &e.analysis, &features, c_beta).unwrap();
            let beta = lambda * lambda / 2.0;
            let (_, report) = critic_exact_loop(&sys, &CriticState::zeros(mdp.n_states()), 500, beta, &mut rng).unwrap();
            assert!(report.max_step_factor(1e-14).unwrap_or(0.0) <= 1.0 + 1e-12, "{spec}");
            let sys = critic_system(&mdp, &e.table, &e.analysis, &features, 1.0).unwrap();
            let (fast, radius) = sys.fastest_step();
            assert!(radius < 0.95);
            let (xi, _) = critic_exact_loop(&sys, &CriticState::zeros(mdp.n_states()), 500, fast, &mut rng).unwrap();
            assert!(sys.projected_error(&xi.xi) <= 1e-8, "{spec}: {} (radius {radius})", sys.projected_error(&xi.xi));
        }
    }

    #[test]
    fn exact_critic_fixed_point_is_stationary() {
        let mdp = env(EnvSpec::TCycle);
        let policy = SoftmaxPolicy::tabular(3, 1);
        let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
        let sys = critic_system(&mdp, &e.table, &e.analysis, &CriticFeatures::one_hot(3), 2.0).unwrap();
        let start = CriticState { xi: sys.xi_star.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (xi, _) = critic_exact_loop(&sys, &start, 20, 0.5, &mut rng).unwrap();
        assert!((xi.xi - &sys.xi_star).amax() <= 1e-14);
    }

    #[test]
    fn large_batch_critic_direction_matches_expectation() {
        let mdp = env(EnvSpec::random(4, 2, 0, 2));
        let policy = SoftmaxPolicy::tabular(4, 2);
        let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
        let features = CriticFeatures::one_hot(4);
        let sys = critic_system(&mdp, &e.table, &e.analysis, &features, 1.0).unwrap();
        let xi0 = DVector::from_row_slice(&[0.2, 0.5, -0.5, 0.1, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Start from a stationary draw so the batch is not biased by the start.
        let s0 = crate::mdp::sample_index(e.analysis.stationary_dist().as_slice(), &mut rng);
        let mut traj = Trajectory::new(s0);
        let b = 100_000;
        let op = CriticBatchSource { mdp: &mdp, policy: &policy, features: &features, trajectory: &mut traj, batch: b, c_beta: 1.0 }
            .draw(0, &mut rng)
            .unwrap();
        let sampled = &op.p * &xi0 - &op.q;
        let exact = &sys.a_v * &xi0 - &sys.b_v;
        // Per-coordinate |v| ≤ 3 with autocorrelation; a generous 3σ envelope.
        let envelope = 3.0 * 3.0 * (8.0 * e.analysis.c_tar().max(1.0) / b as f64).sqrt();
        assert!((sampled - exact).amax() <= envelope);
    }

    #[test]
    fn exact_npg_loop_converges_on_bandit() {
        let mdp = env(EnvSpec::Bandit);
        let policy = SoftmaxPolicy::tabular(1, 2);
        let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
        let features = CriticFeatures::one_hot(1);
        let critic = CriticState::new(e.gain(), &e.values.v);
        let f = fisher_matrix(&policy, &e.analysis);
        let w_star = exact_npg(&exact_policy_gradient(&policy, &e.analysis, &e.values), &f);
        let gamma = 1.0 / linalg::spectral_norm(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, _) = npg_exact_loop(&mdp, &policy, &e.analysis, &features, &critic, &NpgState::zeros(2), 500, gamma, NpgSign::Descent, &mut rng).unwrap();
        let range = linalg::range_basis(&f);
        let err = (&range.transpose() * (&w.omega - &w_star)).norm();
        assert!(err <= 1e-8);
        assert_abs_diff_eq!(w_star.as_slice(), &[-0.5, 0.5][..], epsilon = 1e-12);

        let start = NpgState { omega: w_star.clone() };
        let (w, _) = npg_exact_loop(&mdp, &policy, &e.analysis, &features, &critic, &start, 50, gamma, NpgSign::Descent, &mut rng).unwrap();
        assert!((w.omega - &w_star).amax() <= 1e-14);
        let (w, _) = npg_exact_loop(&mdp, &policy, &e.analysis, &features, &critic, &start, 50, 0.0, NpgSign::Descent, &mut rng).unwrap();
        assert_eq!(w.omega, w_star);
    }

    #[test]
    fn literal_sign_diverges_where_descent_converges() {
        let mdp = env(EnvSpec::Bandit);
        let policy = SoftmaxPolicy::tabular(1, 2);
        let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
        let critic = CriticState::new(e.gain(), &e.values.v);
        let features = CriticFeatures::one_hot(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, report) = npg_exact_loop(&mdp, &policy, &e.analysis, &features, &critic, &NpgState::zeros(2), 100, 1.0, NpgSign::Literal, &mut rng).unwrap();
        assert!(report.projected_errors.last().unwrap() > &report.projected_errors[0]);
    }

    #[test]
    fn sampled_loops_consume_exact_sample_counts() {
        let mdp = env(EnvSpec::random(5, 2, 1, 5));
        let policy = SoftmaxPolicy::tabular(5, 2);
        let features = CriticFeatures::one_hot(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut traj = Trajectory::new(0);
        let (xi, _) = critic_inner_loop(&mdp, &policy, &features, &mut traj, &CriticState::zeros(5), 7, 11, 0.1, 1.0, None, &mut rng).unwrap();
        assert_eq!(traj.consumed(), 77);
        npg_inner_loop(&mdp, &policy, &features, &xi, &mut traj, &NpgState::zeros(10), 3, 13, 0.5, NpgSign::Descent, None, &mut rng).unwrap();
        assert_eq!(traj.consumed(), 77 + 39);
        let mut short = Trajectory::new(0).with_budget(20);
        let r = critic_inner_loop(&mdp, &policy, &features, &mut short, &CriticState::zeros(5), 3, 10, 0.1, 1.0, None, &mut rng);
        assert!(matches!(r, Err(Error::SamplerExhausted(20))));
    }

    #[test]
    fn sample_mean_operator_bias_shrinks_with_batch() {
        // Deterministic periodic chain: the batch mean is exact up to the
        // incomplete last period, so the bias halves when B doubles.
        let mdp = env(EnvSpec::PCycle { period: 3, n_actions: 2 });
        let policy = SoftmaxPolicy::tabular(3, 2);
        let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
        let features = CriticFeatures::one_hot(3);
        let sys = critic_system(&mdp, &e.table, &e.analysis, &features, 1.0).unwrap();
        let bias = |b: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let trials = 200;
            let mut mean = DMatrix::zeros(4, 4);
            for _ in 0..trials {
                let mut traj = Trajectory::new(0);
                let op = CriticBatchSource { mdp: &mdp, policy: &policy, features: &features, trajectory: &mut traj, batch: b, c_beta: 1.0 }
                    .draw(0, &mut rng)
                    .unwrap();
                mean += op.p / trials as f64;
            }
            linalg::spectral_norm(&(mean - &sys.a_v))
        };
        let (b1, b2) = (bias(4), bias(8));
        assert!(b2 <= 0.7 * b1, "{b1} {b2}");
    }
}
