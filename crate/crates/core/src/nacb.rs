//! The full actor-critic on one continuing trajectory.
//!
//! Each of the `K` epochs runs `H` critic updates on `B`-sample batches, then
//! `H` natural-gradient updates on fresh batches, then the policy step
//! `θ ← θ + α ω`. The state reached by the last sample of a phase is where
//! the next phase starts, and the policy step consumes no samples, so a run
//! interacts with the MDP exactly `2KHB` times.

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{self, critic_system, exact_npg, exact_policy_gradient, fisher_matrix, PolicyEvaluation};
use crate::estimators::{critic_inner_loop, npg_inner_loop, CriticFeatures, CriticState, NpgSign, NpgState, Trajectory};
use crate::linalg;
use crate::mdp::TabularMdp;
use crate::policy::SoftmaxPolicy;
use crate::{Error, Result, Scalar};

/// How inner-loop estimates are initialized at the start of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    /// Start from the previous epoch's `ξ` and `ω`.
    #[default]
    Reuse,
    /// Start both from zero.
    Reset,
}

/// Where the learning rates come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum RateMode {
    /// Use `alpha`, `beta`, `c_beta` and `gamma` from the config.
    Explicit,
    /// Derive them from constants measured at the initial policy, with the
    /// smoothness constant `l_smooth` supplied.
    Theory { l_smooth: f64 },
}

/// Run configuration. The horizon is `T = 2 * epochs * inner * batch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NacbConfig {
    pub epochs: usize,
    pub inner: usize,
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub c_beta: f64,
    pub gamma: f64,
    pub npg_sign: NpgSign,
    pub seed: u64,
    pub warm_start: WarmStart,
    pub rate_mode: RateMode,
    /// Compute exact per-epoch errors and gains (small MDPs only).
    pub oracle_diagnostics: bool,
    /// Optimal gain; computed by enumeration when absent.
    pub j_star: Option<f64>,
}

impl Default for NacbConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            inner: 20,
            batch: 32,
            alpha: 1.0,
            beta: 0.25,
            c_beta: 1.0,
            gamma: 0.5,
            npg_sign: NpgSign::Descent,
            seed: 0,
            warm_start: WarmStart::Reuse,
            rate_mode: RateMode::Explicit,
            oracle_diagnostics: false,
            j_star: None,
        }
    }
}

impl NacbConfig {
    pub fn horizon(&self) -> usize {
        2 * self.epochs * self.inner * self.batch
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.epochs = schedule.epochs;
        self.inner = schedule.inner;
        self.batch = schedule.batch;
        self
    }

    fn check(&self) -> Result<()> {
        if self.inner == 0 || self.batch == 0 {
            return Err(Error::Domain("inner iterations and batch size must be positive".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("c_beta", self.c_beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.beta == 0.0 {
            return Err(Error::Domain("beta must be positive".into()));
        }
        Ok(())
    }
}

/// The four learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub alpha: f64,
    pub beta: f64,
    pub c_beta: f64,
    pub gamma: f64,
}

/// `α = μ²/(4 G1² L)`, `β = λ²/2`, `c_β = λ + √(1/λ² − 1)`, `γ = μ/G1²`.
pub fn theory_rates(lambda: f64, mu: f64, g1: f64, l_smooth: f64) -> Result<Rates> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Domain(format!(
            "λ = {lambda} is outside (0, 1]; c_β would be undefined, use explicit rates"
        )));
    }
    if !(mu > 0.0) || !(g1 > 0.0) || !(l_smooth > 0.0) {
        return Err(Error::Domain(format!("μ, G1 and L must be positive (got {mu}, {g1}, {l_smooth})")));
    }
    Ok(Rates {
        alpha: mu * mu / (4.0 * g1 * g1 * l_smooth),
        beta: lambda * lambda / 2.0,
        c_beta: lambda + (1.0 / (lambda * lambda) - 1.0).sqrt(),
        gamma: mu / (g1 * g1),
    })
}

/// Epoch count, inner iterations and batch size for a target horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub epochs: usize,
    pub inner: usize,
    pub batch: usize,
    pub target: usize,
    /// `2 K H B`, the number of steps actually run.
    pub effective: usize,
}

/// `B = round(√(T/2))`, `H = max(1, round(log₂ T))`, `K = max(1, ⌊T/(2HB)⌋)`.
///
/// Because `K` is at least 1, `2KHB` can exceed `T` for small targets
/// (`T = 64` gives `2·1·6·6 = 72`).
pub fn schedule_for_horizon(target: usize) -> Result<Schedule> {
    if target < 64 {
        return Err(Error::Domain(format!("target horizon {target} is below 64")));
    }
    let t = target as f64;
    let batch = (t / 2.0).sqrt().round() as usize;
    let inner = (t.log2().round() as usize).max(1);
    let epochs = (target / (2 * inner * batch)).max(1);
    Ok(Schedule { epochs, inner, batch, target, effective: 2 * epochs * inner * batch })
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    /// FNV-1a hash of the bit patterns of `θ_k`.
    pub theta_hash: u64,
    pub eta: f64,
    pub xi_norm: f64,
    pub omega_norm: f64,
    /// State where the critic and NPG phases started.
    pub critic_start: usize,
    pub npg_start: usize,
    /// Exact gain of `θ_k` (oracle diagnostics only).
    pub gain: Option<f64>,
    /// `‖Π(ξ_k − ξ*_k)‖` (oracle diagnostics only).
    pub critic_error: Option<f64>,
    /// `‖ω_k − ω*_k‖` projected onto `range(F(θ_k))` (oracle diagnostics only).
    pub npg_error: Option<f64>,
}

/// Rewards of one run, in interaction order, with the regret reference.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace<T: Scalar> {
    pub rewards: Vec<T>,
    pub j_star: T,
    pub epochs: Vec<EpochDiagnostics>,
    pub final_theta: DVector<T>,
    pub rates: Rates,
}

impl<T: Scalar> RegretTrace<T> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `Reg_t = Σ_{i<t} (J* − r_i)` for `t = 1..=T`.
    pub fn cumulative_regret(&self) -> Vec<T> {
        let mut acc = T::zero();
        self.rewards
            .iter()
            .map(|&r| {
                acc += self.j_star - r;
                acc
            })
            .collect()
    }

    /// `Reg_T`.
    pub fn regret(&self) -> T {
        self.rewards.iter().fold(T::zero(), |acc, &r| acc + (self.j_star - r))
    }
}

fn fnv1a<T: Scalar>(v: &DVector<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in v.iter() {
        for b in x.as_f64().to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Resolves the rates for a run, measuring constants at `policy0` in theory mode.
pub fn resolve_rates<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy0: &SoftmaxPolicy<T>,
    features: &CriticFeatures<T>,
    config: &NacbConfig,
) -> Result<Rates> {
    match config.rate_mode {
        RateMode::Explicit => Ok(Rates { alpha: config.alpha, beta: config.beta, c_beta: config.c_beta, gamma: config.gamma }),
        RateMode::Theory { l_smooth } => {
            let c = chain::assumption_constants(mdp, std::slice::from_ref(policy0), features)?;
            let lambda = c.lambda.map_or(1.0, |l| l.as_f64().min(1.0));
            let mu = c.mu.map_or(0.0, |m| m.as_f64());
            theory_rates(lambda, mu, c.g1.as_f64(), l_smooth)
        }
    }
}

/// Runs the algorithm with a generator seeded from `config.seed`.
pub fn run_seeded<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy0: &SoftmaxPolicy<T>,
    features: &CriticFeatures<T>,
    config: &NacbConfig,
) -> Result<RegretTrace<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run(mdp, policy0, features, config, &mut rng)
}

/// Runs `K` epochs on one trajectory started from `s_0 ~ ρ`.
pub fn run<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy0: &SoftmaxPolicy<T>,
    features: &CriticFeatures<T>,
    config: &NacbConfig,
    rng: &mut dyn RngCore,
) -> Result<RegretTrace<T>> {
    config.check()?;
    if features.n_states() != mdp.n_states() || policy0.n_states() != mdp.n_states() || policy0.n_actions() != mdp.n_actions() {
        return Err(Error::DimensionMismatch("policy, features and MDP disagree on the state/action counts".into()));
    }
    features.check_norms()?;
    let j_star = match config.j_star {
        Some(j) => T::lit(j),
        None => chain::optimal_gain(mdp, chain::DEFAULT_ENUMERATION_CAP)?.j_star,
    };
    let rates = resolve_rates(mdp, policy0, features, config)?;
    let (alpha, beta, c_beta, gamma) = (T::lit(rates.alpha), T::lit(rates.beta), T::lit(rates.c_beta), T::lit(rates.gamma));

    let mut trajectory = Trajectory::start(mdp, rng);
    let mut policy = policy0.clone();
    let mut critic = CriticState::zeros(features.dim());
    let mut npg = NpgState::zeros(policy.dim());
    let mut epochs = Vec::with_capacity(config.epochs);
    for k in 0..config.epochs {
        if config.warm_start == WarmStart::Reset {
            critic = CriticState::zeros(features.dim());
            npg = NpgState::zeros(policy.dim());
        }
        let critic_start = trajectory.state();
        let (xi, _) = critic_inner_loop(mdp, &policy, features, &mut trajectory, &critic, config.inner, config.batch, beta, c_beta, None, rng)?;
        critic = xi;
        let npg_start = trajectory.state();
        let (omega, _) = npg_inner_loop(mdp, &policy, features, &critic, &mut trajectory, &npg, config.inner, config.batch, gamma, config.npg_sign, None, rng)?;
        npg = omega;
        let (mut gain, mut critic_error, mut npg_error) = (None, None, None);
        if config.oracle_diagnostics {
            let eval = PolicyEvaluation::new(mdp, &policy)?;
            let sys = critic_system(mdp, &eval.table, &eval.analysis, features, c_beta)?;
            let f = fisher_matrix(&policy, &eval.analysis);
            let w_star = exact_npg(&exact_policy_gradient(&policy, &eval.analysis, &eval.values), &f);
            let range = linalg::range_basis(&f);
            gain = Some(eval.gain().as_f64());
            critic_error = Some(sys.projected_error(&critic.xi).as_f64());
            npg_error = Some((range.transpose() * (&npg.omega - w_star)).norm().as_f64());
        }
        epochs.push(EpochDiagnostics {
            epoch: k,
            theta_hash: fnv1a(policy.theta()),
            eta: critic.eta().as_f64(),
            xi_norm: critic.xi.norm().as_f64(),
            omega_norm: npg.omega.norm().as_f64(),
            critic_start,
            npg_start,
            gain,
            critic_error,
            npg_error,
        });
        policy = policy.update(&npg.omega, alpha)?;
    }
    Ok(RegretTrace { rewards: trajectory.into_rewards(), j_star, epochs, final_theta: policy.theta().clone(), rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build, EnvSpec};
    use approx::assert_abs_diff_eq;

    fn setup(spec: EnvSpec) -> (TabularMdp<f64>, SoftmaxPolicy<f64>, CriticFeatures<f64>) {
        let mdp: TabularMdp<f64> = build(&spec).unwrap();
        let p = SoftmaxPolicy::tabular(mdp.n_states(), mdp.n_actions());
        let f = CriticFeatures::one_hot(mdp.n_states());
        (mdp, p, f)
    }

    #[test]
    fn theory_rate_examples() {
        let r = theory_rates(0.5, 0.1, 2f64.sqrt(), 1.0).unwrap();
        assert_abs_diff_eq!(r.alpha, 0.00125, epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta, 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(r.c_beta, 0.5 + 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(r.c_beta, 2.23205, epsilon = 1e-5);
        assert_abs_diff_eq!(r.gamma, 0.05, epsilon = 1e-15);
        assert_eq!(theory_rates(1.0, 0.1, 1.0, 1.0).unwrap().c_beta, 1.0);
        assert!(theory_rates(0.5, 0.0, 1.0, 1.0).is_err());
        assert!(theory_rates(1.5, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = schedule_for_horizon(1 << 18).unwrap();
        assert_eq!((s.batch, s.inner, s.epochs, s.effective), (362, 18, 20, 260_640));
        let s = schedule_for_horizon(64).unwrap();
        assert_eq!((s.batch, s.inner, s.epochs), (6, 6, 1));
        assert!(schedule_for_horizon(63).is_err());
        for e in 7..=24 {
            let s = schedule_for_horizon(1 << e).unwrap();
            assert!(s.effective <= s.target, "T = 2^{e}");
        }
    }

    #[test]
    fn cycle2_regret_is_a_boundary_effect() {
        let (mdp, p, f) = setup(EnvSpec::Cycle2);
        let config = NacbConfig { epochs: 5, inner: 3, batch: 7, ..NacbConfig::default() };
        let trace = run_seeded(&mdp, &p, &f, &config).unwrap();
        assert_eq!(trace.len(), 210);
        assert_eq!(trace.j_star, 0.5);
        for reg in trace.cumulative_regret() {
            assert!(reg.abs() <= 0.5);
        }
    }

    #[test]
    fn zero_epochs_is_empty() {
        let (mdp, p, f) = setup(EnvSpec::Bandit);
        let trace = run_seeded(&mdp, &p, &f, &NacbConfig { epochs: 0, ..NacbConfig::default() }).unwrap();
        assert!(trace.is_empty());
        assert_eq!(trace.regret(), 0.0);
    }

    #[test]
    fn bandit_learns_the_better_arm() {
        let (mdp, p, f) = setup(EnvSpec::Bandit);
        for seed in 0..10 {
            let config = NacbConfig { seed, ..NacbConfig::default() };
            let trace = run_seeded(&mdp, &p, &f, &config).unwrap();
            assert_eq!(trace.len(), config.horizon());
            let pi = p.with_theta(trace.final_theta.clone()).unwrap().action_probs(0)[1];
            assert!(pi >= 0.95, "seed {seed}: {pi}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (mdp, p, f) = setup(EnvSpec::random(8, 3, 2, 7));
        let config = NacbConfig { epochs: 10, inner: 4, batch: 16, seed: 3, oracle_diagnostics: true, ..NacbConfig::default() };
        let a = run_seeded(&mdp, &p, &f, &config).unwrap();
        let b = run_seeded(&mdp, &p, &f, &config).unwrap();
        assert_eq!(a, b);
        let c = run_seeded(&mdp, &p, &f, &NacbConfig { seed: 4, ..config }).unwrap();
        assert_ne!(a.rewards, c.rewards);
    }

    #[test]
    fn phases_continue_the_trajectory() {
        let (mdp, p, f) = setup(EnvSpec::random(6, 2, 1, 2));
        let config = NacbConfig { epochs: 4, inner: 2, batch: 5, seed: 1, ..NacbConfig::default() };
        let trace = run_seeded(&mdp, &p, &f, &config).unwrap();
        assert_eq!(trace.len(), 80);
        // Replaying the same generator reproduces the first state of each phase.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = mdp.sample_initial(&mut rng);
        assert_eq!(trace.epochs[0].critic_start, s0);
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let text = r#"{"epochs": 3, "inner": 2, "batch": 4, "npg_sign": "literal", "rate_mode": {"kind": "theory", "l_smooth": 2.0}}"#;
        let c: NacbConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.npg_sign, NpgSign::Literal);
        assert_eq!(c.rate_mode, RateMode::Theory { l_smooth: 2.0 });
        assert_eq!(c.alpha, NacbConfig::default().alpha);
        assert!(serde_json::from_str::<NacbConfig>(r#"{"epochs": 3, "lr": 1}"#).is_err());
    }

    #[test]
    fn theory_mode_rates_are_applied() {
        let (mdp, p, f) = setup(EnvSpec::random(4, 2, 1, 9));
        let config = NacbConfig { epochs: 2, inner: 2, batch: 4, rate_mode: RateMode::Theory { l_smooth: 1.0 }, ..NacbConfig::default() };
        let trace = run_seeded(&mdp, &p, &f, &config).unwrap();
        assert!(trace.rates.alpha > 0.0 && trace.rates.alpha < config.alpha);
    }
}
