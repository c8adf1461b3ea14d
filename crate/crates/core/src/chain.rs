//! Exact quantities for one fixed policy, by dense linear algebra.
//!
//! [`analyze_chain`] finds the recurrent class, period, stationary
//! distribution and the two hitting-time constants of a policy-induced
//! kernel. The rest of the module builds on that analysis: gain and bias
//! ([`value_bundle`]), policy gradient, Fisher matrix, natural gradient, the
//! TD critic's expected system and the constants the step-size rules use.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use crate::estimators::CriticFeatures;
use crate::linalg;
use crate::mdp::{StochasticMatrix, TabularMdp};
use crate::policy::{PolicyTable, SoftmaxPolicy};
use crate::{Error, Result, Scalar};

/// Largest condition number accepted for the Poisson system.
pub const MAX_CONDITION: f64 = 1e12;
/// Default cap on `|A|^|S|` for [`optimal_gain`].
pub const DEFAULT_ENUMERATION_CAP: f64 = 1e6;
/// Relative agreement required between target-time sums from two starts.
const HITTING_TARGET_TOL: f64 = 1e-8;

/// Recurrent structure and hitting-time constants of a unichain kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainAnalysis<T: Scalar> {
    recurrent_class: Vec<usize>,
    transient_states: Vec<usize>,
    period: usize,
    stationary_dist: DVector<T>,
    entry_times: DVector<T>,
    c_hit: T,
    c_tar: T,
}

impl<T: Scalar> ChainAnalysis<T> {
    /// States of the unique closed class, ascending.
    pub fn recurrent_class(&self) -> &[usize] {
        &self.recurrent_class
    }

    pub fn transient_states(&self) -> &[usize] {
        &self.transient_states
    }

    pub fn is_recurrent(&self, s: usize) -> bool {
        self.recurrent_class.binary_search(&s).is_ok()
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn stationary_dist(&self) -> &DVector<T> {
        &self.stationary_dist
    }

    /// `E_s[time to enter the recurrent class]` per state (0 on it).
    pub fn entry_times(&self) -> &DVector<T> {
        &self.entry_times
    }

    /// Worst-case expected time to enter the recurrent class.
    pub fn c_hit(&self) -> T {
        self.c_hit
    }

    /// Expected time from a recurrent state to a target drawn from `d`.
    pub fn c_tar(&self) -> T {
        self.c_tar
    }

    pub fn n_states(&self) -> usize {
        self.stationary_dist.len()
    }
}

/// Finds the unique closed communicating class and the chain constants.
pub fn analyze_chain<T: Scalar>(kernel: &StochasticMatrix<T>) -> Result<ChainAnalysis<T>> {
    let n = kernel.n();
    let p = kernel.matrix();
    let mut graph = DiGraph::<usize, ()>::with_capacity(n, n * n);
    let nodes: Vec<_> = (0..n).map(|s| graph.add_node(s)).collect();
    for s in 0..n {
        for s2 in 0..n {
            if p[(s, s2)] > T::zero() {
                graph.add_edge(nodes[s], nodes[s2], ());
            }
        }
    }
    let mut component = vec![0usize; n];
    let sccs = tarjan_scc(&graph);
    for (c, members) in sccs.iter().enumerate() {
        for node in members {
            component[graph[*node]] = c;
        }
    }
    let closed: Vec<usize> = (0..sccs.len())
        .filter(|&c| {
            sccs[c].iter().all(|node| {
                let s = graph[*node];
                (0..n).all(|s2| p[(s, s2)] == T::zero() || component[s2] == c)
            })
        })
        .collect();
    if closed.len() != 1 {
        return Err(Error::NotUnichain(closed.len()));
    }
    let mut recurrent: Vec<usize> = sccs[closed[0]].iter().map(|node| graph[*node]).collect();
    recurrent.sort_unstable();
    let transient: Vec<usize> = (0..n).filter(|s| recurrent.binary_search(s).is_err()).collect();

    let period = period_of(p, &recurrent);
    let stationary_dist = stationary_on(p, &recurrent, n)?;
    let entry_times = entry_times(p, &transient, n)?;
    let c_hit = entry_times.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let c_tar = target_time(p, &recurrent, &stationary_dist)?;
    Ok(ChainAnalysis {
        recurrent_class: recurrent,
        transient_states: transient,
        period,
        stationary_dist,
        entry_times,
        c_hit,
        c_tar,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// gcd of `level(u) + 1 - level(v)` over edges inside the class, with BFS
/// levels from its first state.
fn period_of<T: Scalar>(p: &DMatrix<T>, class: &[usize]) -> usize {
    let n = p.nrows();
    let mut level = vec![usize::MAX; n];
    level[class[0]] = 0;
    let mut queue = std::collections::VecDeque::from([class[0]]);
    let mut g = 0usize;
    while let Some(u) = queue.pop_front() {
        for &v in class {
            if p[(u, v)] == T::zero() {
                continue;
            }
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            } else {
                g = gcd(g, (level[u] + 1).abs_diff(level[v]));
            }
        }
    }
    g.max(1)
}

fn stationary_on<T: Scalar>(p: &DMatrix<T>, class: &[usize], n: usize) -> Result<DVector<T>> {
    let k = class.len();
    // (P_R^T - I) d = 0 with the last equation replaced by sum(d) = 1.
    let mut a = DMatrix::from_fn(k, k, |i, j| p[(class[j], class[i])] - if i == j { T::one() } else { T::zero() });
    a.row_mut(k - 1).fill(T::one());
    let mut rhs = DVector::zeros(k);
    rhs[k - 1] = T::one();
    let dr = linalg::solve(&a, &rhs, "stationary distribution")?;
    let mut d = DVector::zeros(n);
    for (i, &s) in class.iter().enumerate() {
        d[s] = dr[i].max(T::zero());
    }
    let total = d.sum();
    Ok(d / total)
}

/// Solves `(I - P_TT) h = 1` on the transient states.
fn entry_times<T: Scalar>(p: &DMatrix<T>, transient: &[usize], n: usize) -> Result<DVector<T>> {
    let mut h = DVector::zeros(n);
    if transient.is_empty() {
        return Ok(h);
    }
    let k = transient.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        (if i == j { T::one() } else { T::zero() }) - p[(transient[i], transient[j])]
    });
    let sol = linalg::solve(&a, &DVector::from_element(k, T::one()), "entry times")?;
    for (i, &s) in transient.iter().enumerate() {
        h[s] = sol[i];
    }
    Ok(h)
}

/// Expected hitting times of `target` from every state of the class
/// (0 at the target itself).
fn hitting_times_within<T: Scalar>(p: &DMatrix<T>, class: &[usize], target: usize) -> Result<Vec<T>> {
    let others: Vec<usize> = class.iter().copied().filter(|&s| s != target).collect();
    let k = others.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        (if i == j { T::one() } else { T::zero() }) - p[(others[i], others[j])]
    });
    let sol = linalg::solve(&a, &DVector::from_element(k, T::one()), "target hitting times")?;
    let mut out = vec![T::zero(); class.len()];
    let mut it = sol.iter();
    for (i, &s) in class.iter().enumerate() {
        if s != target {
            out[i] = *it.next().expect("one solution per non-target state");
        }
    }
    Ok(out)
}

/// `Σ_{s'} d(s') E_{s0}[T_{s'}]` from the first recurrent state, recomputed
/// from a second one; the two must agree since the sum is start-independent.
fn target_time<T: Scalar>(p: &DMatrix<T>, class: &[usize], d: &DVector<T>) -> Result<T> {
    let mut from_first = T::zero();
    let mut from_second = T::zero();
    for &target in class {
        if target == class[0] && class.len() == 1 {
            continue;
        }
        let h = hitting_times_within(p, class, target)?;
        from_first += d[target] * h[0];
        if class.len() > 1 {
            from_second += d[target] * h[1];
        }
    }
    if class.len() > 1 {
        let tol = T::tol(HITTING_TARGET_TOL) * from_first.abs().max(T::one());
        if (from_first - from_second).abs() > tol {
            return Err(Error::SingularSystem(format!(
                "target hitting time depends on the start state ({} vs {})",
                from_first.as_f64(),
                from_second.as_f64()
            )));
        }
    }
    Ok(from_first)
}

/// Gain, bias, action values and advantages of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle<T: Scalar> {
    pub gain: T,
    /// Bias `V`, normalized so that `Σ d(s) V(s) = 0`.
    pub v: DVector<T>,
    /// `Q(s, a)`, `|S| x |A|`.
    pub q: DMatrix<T>,
    /// `A = Q - V`.
    pub adv: DMatrix<T>,
}

impl<T: Scalar> ValueBundle<T> {
    pub fn max_abs_v(&self) -> T {
        self.v.amax()
    }

    pub fn max_abs_q(&self) -> T {
        self.q.amax()
    }

    pub fn max_abs_adv(&self) -> T {
        self.adv.amax()
    }
}

/// Solves the Poisson equation `(I - P + 1 d^T) V = r^π - J 1`.
pub fn value_bundle<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &PolicyTable<T>,
    analysis: &ChainAnalysis<T>,
) -> Result<ValueBundle<T>> {
    let kernel = mdp.induced_kernel(policy)?;
    let n = mdp.n_states();
    if analysis.n_states() != n {
        return Err(Error::DimensionMismatch(format!("analysis covers {} states, MDP has {n}", analysis.n_states())));
    }
    let d = analysis.stationary_dist();
    let r_pi = mdp.policy_reward(policy);
    let gain = d.dot(&r_pi);
    let ones = DVector::from_element(n, T::one());
    let system = DMatrix::identity(n, n) - kernel.matrix() + &ones * d.transpose();
    let cond = linalg::condition_number(&system);
    if !(cond <= T::lit(MAX_CONDITION)) {
        return Err(Error::SingularSystem(format!("Poisson system condition number {:.3e}", cond.as_f64())));
    }
    let mut v = linalg::solve(&system, &(&r_pi - &ones * gain), "Poisson equation")?;
    let shift = d.dot(&v);
    v.add_scalar_mut(-shift);

    let na = mdp.n_actions();
    let q = DMatrix::from_fn(n, na, |s, a| {
        let next = mdp.row(s, a).iter().zip(v.iter()).fold(T::zero(), |acc, (&p, &vs)| acc + p * vs);
        mdp.reward(s, a) - gain + next
    });
    let adv = DMatrix::from_fn(n, na, |s, a| q[(s, a)] - v[s]);
    Ok(ValueBundle { gain, v, q, adv })
}

/// Bias from its Cesàro definition: the average over `n = 1..=horizon` of the
/// partial sums `Σ_{t<n} (P^t r^π - J)`, by repeated kernel application.
pub fn cesaro_bias<T: Scalar>(mdp: &TabularMdp<T>, policy: &PolicyTable<T>, gain: T, horizon: usize) -> Result<DVector<T>> {
    let kernel = mdp.induced_kernel(policy)?;
    let p = kernel.matrix();
    let n = mdp.n_states();
    let mut expected_reward = mdp.policy_reward(policy);
    let mut partial = DVector::zeros(n);
    let mut total = DVector::zeros(n);
    for _ in 0..horizon {
        partial += expected_reward.add_scalar(-gain);
        total += &partial;
        expected_reward = p * expected_reward;
    }
    Ok(total / T::lit(horizon.max(1) as f64))
}

/// Everything the oracle knows about one softmax policy.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation<T: Scalar> {
    pub table: PolicyTable<T>,
    pub kernel: StochasticMatrix<T>,
    pub analysis: ChainAnalysis<T>,
    pub values: ValueBundle<T>,
}

impl<T: Scalar> PolicyEvaluation<T> {
    pub fn new(mdp: &TabularMdp<T>, policy: &SoftmaxPolicy<T>) -> Result<Self> {
        Self::of_table(mdp, policy.table())
    }

    pub fn of_table(mdp: &TabularMdp<T>, table: PolicyTable<T>) -> Result<Self> {
        let kernel = mdp.induced_kernel(&table)?;
        let analysis = analyze_chain(&kernel)?;
        let values = value_bundle(mdp, &table, &analysis)?;
        Ok(Self { table, kernel, analysis, values })
    }

    pub fn gain(&self) -> T {
        self.values.gain
    }
}

/// Gain `J(θ)` of a softmax policy.
pub fn gain<T: Scalar>(mdp: &TabularMdp<T>, policy: &SoftmaxPolicy<T>) -> Result<T> {
    Ok(PolicyEvaluation::new(mdp, policy)?.gain())
}

/// `∇J = Σ_{s,a} d(s) π(a|s) A(s,a) ∇log π(a|s)`.
pub fn exact_policy_gradient<T: Scalar>(
    policy: &SoftmaxPolicy<T>,
    analysis: &ChainAnalysis<T>,
    values: &ValueBundle<T>,
) -> DVector<T> {
    weighted_score_sum(policy, analysis, &values.adv)
}

/// The same gradient weighted by `Q` instead of `A`.
pub fn policy_gradient_q_form<T: Scalar>(
    policy: &SoftmaxPolicy<T>,
    analysis: &ChainAnalysis<T>,
    values: &ValueBundle<T>,
) -> DVector<T> {
    weighted_score_sum(policy, analysis, &values.q)
}

fn weighted_score_sum<T: Scalar>(policy: &SoftmaxPolicy<T>, analysis: &ChainAnalysis<T>, w: &DMatrix<T>) -> DVector<T> {
    let d = analysis.stationary_dist();
    let table = policy.table();
    let scores = policy.scores();
    let mut grad = DVector::zeros(policy.dim());
    for s in 0..policy.n_states() {
        if d[s] == T::zero() {
            continue;
        }
        for a in 0..policy.n_actions() {
            grad.axpy(d[s] * table.prob(s, a) * w[(s, a)], scores.get(s, a), T::one());
        }
    }
    grad
}

/// `F = Σ_{s,a} d(s) π(a|s) score score^T`.
pub fn fisher_matrix<T: Scalar>(policy: &SoftmaxPolicy<T>, analysis: &ChainAnalysis<T>) -> DMatrix<T> {
    let d = analysis.stationary_dist();
    let table = policy.table();
    let scores = policy.scores();
    let dim = policy.dim();
    let mut f = DMatrix::zeros(dim, dim);
    for s in 0..policy.n_states() {
        if d[s] == T::zero() {
            continue;
        }
        for a in 0..policy.n_actions() {
            let g = scores.get(s, a);
            f.ger(d[s] * table.prob(s, a), g, g, T::one());
        }
    }
    f
}

/// `ω* = F^† ∇J`.
pub fn exact_npg<T: Scalar>(gradient: &DVector<T>, fisher: &DMatrix<T>) -> DVector<T> {
    linalg::pinv(fisher) * gradient
}

/// The expected TD critic system for one policy and feature map.
#[derive(Debug, Clone)]
pub struct CriticSystem<T: Scalar> {
    pub c_beta: T,
    /// `E[A_v(θ, z)]`, `(m+1) x (m+1)`.
    pub a_v: DMatrix<T>,
    /// `E[b_v(θ, z)]`.
    pub b_v: DVector<T>,
    /// `A_v^† b_v`.
    pub xi_star: DVector<T>,
    /// `E[φ(s)(φ(s) - φ(s'))^T]`.
    pub m_theta: DMatrix<T>,
    /// Orthonormal basis of `Ker(M_θ)`.
    pub kernel_basis: DMatrix<T>,
    /// Projector onto `Ker(A_v)^⊥`; `Ker(A_v) = {0} x Ker(M_θ)`.
    pub projector: DMatrix<T>,
}

impl<T: Scalar> CriticSystem<T> {
    pub fn dim(&self) -> usize {
        self.b_v.len()
    }

    /// `‖Π(ξ - ξ*)‖`.
    pub fn projected_error(&self, xi: &DVector<T>) -> T {
        (&self.projector * (xi - &self.xi_star)).norm()
    }

    /// Orthonormal basis of `Ker(M_θ)^⊥` in `R^m`.
    pub fn kernel_complement(&self) -> DMatrix<T> {
        linalg::orth_complement(&self.kernel_basis, self.m_theta.nrows())
    }

    /// Smallest eigenvalue of the symmetric part of `M_θ` on `Ker(M_θ)^⊥`.
    pub fn lambda(&self) -> Option<T> {
        linalg::min_sym_eig_on(&self.m_theta, &self.kernel_complement())
    }

    /// Smallest eigenvalue of the symmetric part of `A_v` restricted to
    /// `R x Ker(M_θ)^⊥`, i.e. the exact minimum of `ξ^T A_v ξ / ‖ξ‖²` there.
    pub fn restricted_min_quadratic(&self) -> T {
        let comp = self.kernel_complement();
        let m = comp.nrows();
        let mut basis = DMatrix::zeros(m + 1, comp.ncols() + 1);
        basis[(0, 0)] = T::one();
        basis.view_mut((1, 1), (m, comp.ncols())).copy_from(&comp);
        linalg::min_sym_eig_on(&self.a_v, &basis).expect("the gain coordinate is always present")
    }

    /// Eigenvalues of `A_v` restricted to `Ker(A_v)^⊥`, which govern the
    /// error `Π(ξ_h − ξ*)` of the noiseless recursion.
    pub fn restricted_eigenvalues(&self) -> Vec<nalgebra::Complex<T>> {
        let q = linalg::range_basis(&self.projector);
        let restricted = q.transpose() * &self.a_v * &q;
        restricted.complex_eigenvalues().iter().copied().collect()
    }

    /// The step `β` minimizing the spectral radius of `I − βA_v` on
    /// `Ker(A_v)^⊥`, by grid search, with that radius.
    pub fn fastest_step(&self) -> (T, T) {
        linalg::fastest_step(&self.restricted_eigenvalues())
    }
}

/// Builds the expected critic system by exact summation over `d(s) π(a|s) P(s'|s,a)`.
pub fn critic_system<T: Scalar>(
    mdp: &TabularMdp<T>,
    table: &PolicyTable<T>,
    analysis: &ChainAnalysis<T>,
    features: &CriticFeatures<T>,
    c_beta: T,
) -> Result<CriticSystem<T>> {
    let n = mdp.n_states();
    if features.n_states() != n {
        return Err(Error::DimensionMismatch(format!("features cover {} states, MDP has {n}", features.n_states())));
    }
    features.check_norms()?;
    let kernel = mdp.induced_kernel(table)?;
    let phi = features.matrix();
    let m = features.dim();
    let d = analysis.stationary_dist();
    let r_pi = mdp.policy_reward(table);
    // Row s of `next` is E[φ(s') | s].
    let next = kernel.matrix() * phi;
    let mut m_theta = DMatrix::zeros(m, m);
    let mut second_moment = T::zero();
    let mut mean_phi = DVector::zeros(m);
    let mut mean_rphi = DVector::zeros(m);
    for s in 0..n {
        if d[s] == T::zero() {
            continue;
        }
        let ps = phi.row(s).transpose();
        let diff = &ps - next.row(s).transpose();
        m_theta.ger(d[s], &ps, &diff, T::one());
        second_moment += d[s] * ps.norm_squared();
        mean_phi.axpy(d[s], &ps, T::one());
        mean_rphi.axpy(d[s] * r_pi[s], &ps, T::one());
    }
    let mut a_v = DMatrix::zeros(m + 1, m + 1);
    a_v[(0, 0)] = c_beta;
    a_v.view_mut((1, 0), (m, 1)).copy_from(&mean_phi);
    a_v.view_mut((1, 1), (m, m)).copy_from(&m_theta);
    let mut b_v = DVector::zeros(m + 1);
    b_v[0] = c_beta * d.dot(&r_pi);
    b_v.rows_mut(1, m).copy_from(&mean_rphi);
    let xi_star = linalg::pinv(&a_v) * &b_v;
    let kernel_basis = linalg::null_space_scaled(&m_theta, second_moment);
    let mut av_kernel = DMatrix::zeros(m + 1, kernel_basis.ncols());
    av_kernel.view_mut((1, 0), (m, kernel_basis.ncols())).copy_from(&kernel_basis);
    let projector = DMatrix::identity(m + 1, m + 1) - linalg::projector(&av_kernel);
    Ok(CriticSystem { c_beta, a_v, b_v, xi_star, m_theta, kernel_basis, projector })
}

/// Orthonormal basis of `{z : Φz is constant on the recurrent class}`.
pub fn constant_on_recurrent_basis<T: Scalar>(features: &CriticFeatures<T>, analysis: &ChainAnalysis<T>) -> DMatrix<T> {
    let phi = features.matrix();
    let class = analysis.recurrent_class();
    let m = features.dim();
    if class.len() < 2 {
        return DMatrix::identity(m, m);
    }
    let anchor = phi.row(class[0]);
    let rows: Vec<_> = class[1..].iter().map(|&s| phi.row(s) - anchor).collect();
    linalg::null_space(&DMatrix::from_rows(&rows))
}

/// Assumption constants measured over a finite sample of policies.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionConstants<T: Scalar> {
    /// Min over the sample of the critic curvature on `Ker(M_θ)^⊥`; `None`
    /// when that subspace is trivial for every sampled policy.
    pub lambda: Option<T>,
    /// Min over the sample of the smallest positive Fisher eigenvalue;
    /// `None` when every sampled Fisher matrix is zero.
    pub mu: Option<T>,
    /// Max sampled score norm.
    pub g1: T,
    /// Max sampled finite-difference Lipschitz estimate of the score.
    pub g2: T,
    /// Max over the sample of the per-policy `C_hit` and `C_tar`.
    pub c_hit: T,
    pub c_tar: T,
    pub warnings: Vec<String>,
}

/// Measures `λ`, `μ`, `G1`, `G2`, `C_hit`, `C_tar` over `policies`.
pub fn assumption_constants<T: Scalar>(
    mdp: &TabularMdp<T>,
    policies: &[SoftmaxPolicy<T>],
    features: &CriticFeatures<T>,
) -> Result<AssumptionConstants<T>> {
    let mut lambda: Option<T> = None;
    let mut mu: Option<T> = None;
    let (mut g1, mut g2, mut c_hit, mut c_tar) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut warnings = Vec::new();
    let min_opt = |cur: Option<T>, x: Option<T>| match (cur, x) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    for policy in policies {
        let eval = PolicyEvaluation::new(mdp, policy)?;
        c_hit = c_hit.max(eval.analysis.c_hit());
        c_tar = c_tar.max(eval.analysis.c_tar());
        let sys = critic_system(mdp, &eval.table, &eval.analysis, features, T::one())?;
        lambda = min_opt(lambda, sys.lambda());
        let f = fisher_matrix(policy, &eval.analysis);
        let range = linalg::range_basis(&f);
        mu = min_opt(mu, linalg::min_sym_eig_on(&f, &range));
        g1 = g1.max(policy.scores().max_norm());
        g2 = g2.max(score_lipschitz(policy)?);
    }
    if mu.is_none() {
        warnings.push("Fisher matrix is zero for every sampled policy (no action choice); μ reported as 0".into());
    } else if policies.iter().any(|p| p.dim() > 0) {
        warnings.push("μ is the smallest positive Fisher eigenvalue (on range(F)); F itself is singular for softmax".into());
    }
    if lambda.is_none() {
        warnings.push("Ker(M_θ)^⊥ is trivial for every sampled policy; λ undefined".into());
    }
    Ok(AssumptionConstants { lambda, mu, g1, g2, c_hit, c_tar, warnings })
}

/// Largest spectral norm of the central-difference score Jacobians.
fn score_lipschitz<T: Scalar>(policy: &SoftmaxPolicy<T>) -> Result<T> {
    let h = T::lit(1e-5).max(T::default_epsilon().sqrt());
    let dim = policy.dim();
    let mut plus = Vec::with_capacity(dim);
    let mut minus = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = h;
        plus.push(policy.with_theta(policy.theta() + &e)?.scores());
        minus.push(policy.with_theta(policy.theta() - &e)?.scores());
    }
    let mut worst = T::zero();
    for s in 0..policy.n_states() {
        for a in 0..policy.n_actions() {
            let jac = DMatrix::from_fn(dim, dim, |r, c| (plus[c].get(s, a)[r] - minus[c].get(s, a)[r]) / (h + h));
            worst = worst.max(linalg::spectral_norm(&jac));
        }
    }
    Ok(worst)
}

/// Best gain over deterministic stationary policies, with one maximizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalGain<T: Scalar> {
    pub j_star: T,
    pub actions: Vec<usize>,
}

/// Enumerates all `|A|^|S|` deterministic policies (at most `cap`).
pub fn optimal_gain<T: Scalar>(mdp: &TabularMdp<T>, cap: f64) -> Result<OptimalGain<T>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let count = (na as f64).powi(ns as i32);
    if count > cap {
        return Err(Error::EnumerationCapExceeded { count, cap });
    }
    let mut actions = vec![0usize; ns];
    let mut best: Option<OptimalGain<T>> = None;
    loop {
        let table = PolicyTable::deterministic(na, &actions)?;
        let kernel = mdp.induced_kernel(&table)?;
        let analysis = analyze_chain(&kernel)?;
        let j = analysis.stationary_dist().dot(&mdp.policy_reward(&table));
        if best.as_ref().is_none_or(|b| j > b.j_star) {
            best = Some(OptimalGain { j_star: j, actions: actions.clone() });
        }
        // Odometer increment over action profiles.
        let mut i = 0;
        loop {
            if i == ns {
                return Ok(best.expect("at least one policy evaluated"));
            }
            actions[i] += 1;
            if actions[i] < na {
                break;
            }
            actions[i] = 0;
            i += 1;
        }
    }
}

/// Total-variation distance between the Cesàro average of the rows
/// `P^i(s0, ·)`, `i < t`, and `d`, for `t = 1..=t_max`.
pub fn cesaro_tv_curve<T: Scalar>(kernel: &StochasticMatrix<T>, s0: usize, t_max: usize) -> Result<Vec<T>> {
    let n = kernel.n();
    if s0 >= n {
        return Err(Error::InvalidIndex(format!("state {s0} >= {n}")));
    }
    let d = analyze_chain(kernel)?.stationary_dist().clone();
    let p_t = kernel.matrix().transpose();
    let mut row = DVector::zeros(n);
    row[s0] = T::one();
    let mut acc = DVector::zeros(n);
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        acc += &row;
        let tt = T::lit(t as f64);
        let tv = acc.iter().zip(d.iter()).fold(T::zero(), |s, (&a, &di)| s + (a / tt - di).abs()) * half;
        out.push(tv);
        row = &p_t * row;
    }
    Ok(out)
}
