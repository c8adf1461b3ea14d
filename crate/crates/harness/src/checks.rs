//! The verification suite. Every check compares the library against an
//! exact oracle or an analytic bound and becomes one report entry; a failing
//! check never aborts the suite.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use nacb_core::chain::{
    analyze_chain, cesaro_tv_curve, constant_on_recurrent_basis, critic_system, exact_npg, exact_policy_gradient,
    fisher_matrix, gain, CriticSystem, PolicyEvaluation,
};
use nacb_core::envs::{build, EnvSpec};
use nacb_core::estimators::{critic_exact_loop, critic_inner_loop, npg_exact_loop, CriticState, NpgSign, NpgState, Trajectory};
use nacb_core::linalg;
use nacb_core::linrec::{verify_recursion, StructureConfig};
use nacb_core::nacb::{run_seeded, NacbConfig};
use nacb_core::{Analysis, Features, Mdp, Policy, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::sweep::{regret_sweep, SweepConfig};

/// Check ids and the property each one verifies.
pub const CHECKS: &[(&str, &str)] = &[
    ("pg-theorem", "policy gradient theorem against finite differences"),
    ("cesaro", "cesaro-averaging bound"),
    ("value-bounds", "bias, action-value and advantage magnitude bounds"),
    ("hitting-probability", "recurrent-class hitting probability bound"),
    ("markov-bias-variance", "bias and variance of Markovian sample averages"),
    ("critic-kernel", "critic null space is the constant-on-recurrent-class span"),
    ("td-pd", "critic positive definiteness on the kernel complement"),
    ("critic-fixed-point", "noiseless critic convergence to the projected fixed point"),
    ("critic-noise-floor", "sampled critic error floor shrinks with batch size"),
    ("npg-fixed-point", "noiseless natural-gradient convergence on range(F)"),
    ("compatible-approximation", "compatible function approximation identity"),
    ("policy-score", "softmax score norm bound and zero mean"),
    ("chain-structure", "fixture periods, recurrent partition and stochastic kernels"),
    ("linear-recursion", "linear stochastic recursion decay and noise floor"),
    ("epoch-critic-floor", "per-epoch critic error shrinks with batch size"),
    ("regret-scaling", "sublinear regret exponent band"),
    ("regret-degenerate", "bounded regret without action choice"),
    ("determinism", "bit-identical reruns and sample accounting"),
];

pub fn reference_of(id: &str) -> Option<&'static str> {
    CHECKS.iter().find(|(i, _)| *i == id).map(|(_, r)| *r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fast" => Ok(Self::Fast),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown level {other:?} (expected fast or full)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub reference: String,
    pub status: Status,
    pub measured: BTreeMap<String, f64>,
    pub tolerance: String,
    /// Up to a few failure messages, or notes on skipped cases.
    pub detail: Vec<String>,
    pub runtime_secs: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub level: Level,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn get(&self, id: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// Same checks with bit-identical measurements and statuses; runtimes
    /// are ignored.
    pub fn same_numerics(&self, other: &Self) -> bool {
        self.checks.len() == other.checks.len()
            && self.checks.iter().zip(&other.checks).all(|(a, b)| {
                a.id == b.id
                    && a.status == b.status
                    && a.measured.len() == b.measured.len()
                    && a.measured.iter().zip(&b.measured).all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
            })
    }
}

/// What to run.
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub level: Level,
    /// Environments every per-environment check runs on. An empty list gives
    /// an empty report.
    pub envs: Vec<EnvSpec>,
    /// Environments for the regret-exponent sweep.
    pub sweep_envs: Vec<EnvSpec>,
    /// Forces `c_β` in the critic checks instead of the matched value.
    pub c_beta: Option<f64>,
    pub seed: u64,
}

impl SuiteConfig {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            envs: EnvSpec::fixtures(),
            sweep_envs: vec![EnvSpec::Bandit, EnvSpec::random(8, 3, 2, 7)],
            c_beta: None,
            seed: 0,
        }
    }
}

/// Trial counts per level.
#[derive(Debug, Clone, Copy)]
struct Counts {
    pg_pairs: usize,
    random_chains: usize,
    thetas: usize,
    cesaro_horizon: usize,
    hitting_trials: usize,
    average_trials: usize,
    pd_probes: usize,
    floor_seeds: usize,
    score_samples: usize,
    recursion_trials: usize,
    sweep_seeds: usize,
    sweep_grid: (usize, usize, usize),
    epoch_seeds: usize,
}

impl Counts {
    fn of(level: Level) -> Self {
        match level {
            Level::Full => Self {
                pg_pairs: 50,
                random_chains: 20,
                thetas: 5,
                cesaro_horizon: 10_000,
                hitting_trials: 10_000,
                average_trials: 10_000,
                pd_probes: 1000,
                floor_seeds: 10,
                score_samples: 10_000,
                recursion_trials: 1000,
                sweep_seeds: 10,
                sweep_grid: (1 << 14, 1 << 20, 7),
                epoch_seeds: 10,
            },
            Level::Fast => Self {
                pg_pairs: 20,
                random_chains: 6,
                thetas: 2,
                cesaro_horizon: 10_000,
                hitting_trials: 2000,
                average_trials: 2000,
                pd_probes: 200,
                floor_seeds: 10,
                score_samples: 2000,
                recursion_trials: 300,
                sweep_seeds: 5,
                sweep_grid: (1 << 13, 1 << 18, 6),
                epoch_seeds: 5,
            },
        }
    }
}

/// Accumulates one check's measurements and failures.
struct Check {
    id: &'static str,
    start: Instant,
    measured: BTreeMap<String, f64>,
    tolerance: String,
    failures: Vec<String>,
    notes: Vec<String>,
}

const MAX_DETAIL: usize = 5;

impl Check {
    fn new(id: &'static str, tolerance: impl Into<String>) -> Self {
        debug_assert!(reference_of(id).is_some(), "unregistered check {id}");
        Self { id, start: Instant::now(), measured: BTreeMap::new(), tolerance: tolerance.into(), failures: Vec::new(), notes: Vec::new() }
    }

    fn measure(&mut self, key: impl Into<String>, value: f64) {
        self.measured.insert(key.into(), value);
    }

    /// Keeps the largest value seen under `key`.
    fn max(&mut self, key: &str, value: f64) {
        let e = self.measured.entry(key.to_string()).or_insert(f64::NEG_INFINITY);
        if value > *e || value.is_nan() {
            *e = value;
        }
    }

    fn min(&mut self, key: &str, value: f64) {
        let e = self.measured.entry(key.to_string()).or_insert(f64::INFINITY);
        if value < *e || value.is_nan() {
            *e = value;
        }
    }

    fn count(&mut self, key: &str) {
        *self.measured.entry(key.to_string()).or_insert(0.0) += 1.0;
    }

    fn require(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(msg());
        }
    }

    fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }

    fn finish(mut self, outcome: Result<()>) -> CheckResult {
        if let Err(e) = outcome {
            self.failures.push(format!("error: {e}"));
        }
        let status = if self.failures.is_empty() { Status::Pass } else { Status::Fail };
        let total = self.failures.len();
        let mut detail: Vec<String> = self.failures.into_iter().take(MAX_DETAIL).collect();
        if total > MAX_DETAIL {
            detail.push(format!("... and {} more failures", total - MAX_DETAIL));
        }
        detail.extend(self.notes.into_iter().take(MAX_DETAIL));
        CheckResult {
            id: self.id.to_string(),
            reference: reference_of(self.id).unwrap_or("unregistered").to_string(),
            status,
            measured: self.measured,
            tolerance: self.tolerance,
            detail,
            runtime_secs: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn run_check(id: &'static str, tolerance: &str, body: impl FnOnce(&mut Check) -> Result<()>) -> CheckResult {
    let mut check = Check::new(id, tolerance);
    let outcome = body(&mut check);
    check.finish(outcome)
}

/// One environment under one policy.
struct Case {
    label: String,
    spec: EnvSpec,
    mdp: Mdp,
    policy: Policy,
}

struct Context {
    counts: Counts,
    /// Configured environments under the uniform policy and random policies.
    cases: Vec<Case>,
    /// Random unichains under random policies.
    random_cases: Vec<Case>,
}

fn random_theta(policy: &Policy, rng: &mut ChaCha8Rng) -> Policy {
    let theta = DVector::from_fn(policy.dim(), |_, _| rng.random_range(-2.0..2.0));
    policy.with_theta(theta).expect("dimension matches")
}

fn policies_for(spec: EnvSpec, mdp: Mdp, thetas: usize, include_uniform: bool, rng: &mut ChaCha8Rng) -> Vec<Case> {
    let uniform = Policy::tabular(mdp.n_states(), mdp.n_actions());
    let mut out = Vec::new();
    if include_uniform {
        out.push(Case { label: format!("{spec} uniform"), spec, mdp: mdp.clone(), policy: uniform.clone() });
    }
    // Without a choice of action every θ gives the same policy.
    let thetas = if mdp.n_actions() > 1 { thetas } else { 0 };
    for i in 0..thetas {
        out.push(Case { label: format!("{spec} θ#{i}"), spec, mdp: mdp.clone(), policy: random_theta(&uniform, rng) });
    }
    out
}

/// Random unichains with 3 to 12 states; generation failures are skipped.
fn random_specs(count: usize, rng: &mut ChaCha8Rng) -> Vec<(EnvSpec, Mdp)> {
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < count && attempts < 10 * count {
        attempts += 1;
        let n = rng.random_range(3..=12usize);
        let m = rng.random_range(1..=3usize);
        let nt = rng.random_range(0..=(n - 2).min(3));
        let spec = EnvSpec::random(n, m, nt, rng.random());
        if let Ok(mdp) = build(&spec) {
            out.push((spec, mdp));
        }
    }
    out
}

impl Context {
    fn new(config: &SuiteConfig) -> Result<Self> {
        let counts = Counts::of(config.level);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cases = Vec::new();
        for &spec in &config.envs {
            let mdp: Mdp = build(&spec)?;
            cases.extend(policies_for(spec, mdp, counts.thetas, true, &mut rng));
        }
        let mut random_cases = Vec::new();
        for (spec, mdp) in random_specs(counts.random_chains, &mut rng) {
            random_cases.extend(policies_for(spec, mdp, counts.thetas, true, &mut rng));
        }
        Ok(Self { counts, cases, random_cases })
    }

    fn all_cases(&self) -> impl Iterator<Item = &Case> {
        self.cases.iter().chain(&self.random_cases)
    }
}

/// Runs the suite at `level` on the built-in fixtures.
pub fn verify_all(level: Level) -> VerifyReport {
    verify_suite(&SuiteConfig::new(level))
}

pub fn verify_suite(config: &SuiteConfig) -> VerifyReport {
    let mut checks = Vec::new();
    if config.envs.is_empty() {
        return VerifyReport { level: config.level, checks };
    }
    let ctx = match Context::new(config) {
        Ok(ctx) => ctx,
        Err(e) => {
            let mut c = Check::new("chain-structure", "environments build");
            c.failures.push(format!("could not build the environments: {e}"));
            checks.push(c.finish(Ok(())));
            return VerifyReport { level: config.level, checks };
        }
    };
    let seed = config.seed;
    checks.push(pg_theorem(&ctx, seed));
    checks.push(cesaro(&ctx));
    checks.push(value_bounds(&ctx));
    checks.push(hitting_probability(&ctx, seed));
    checks.push(markov_bias_variance(&ctx, seed));
    checks.push(critic_kernel(&ctx, seed));
    checks.push(td_pd(&ctx, config.c_beta, seed));
    checks.push(critic_fixed_point(&ctx, config.c_beta));
    checks.push(critic_noise_floor(&ctx, config, seed));
    checks.push(npg_fixed_point(&ctx));
    checks.push(compatible_approximation(&ctx));
    checks.push(policy_score(&ctx, seed));
    checks.push(chain_structure(config, seed));
    checks.push(linear_recursion(&ctx, seed));
    checks.push(epoch_critic_floor(&ctx, seed));
    checks.push(regret_scaling(&ctx, config));
    checks.push(regret_degenerate(config));
    checks.push(determinism(config, seed));
    VerifyReport { level: config.level, checks }
}

fn uniform_cases(ctx: &Context) -> impl Iterator<Item = &Case> {
    ctx.cases.iter().filter(|c| c.label.ends_with("uniform"))
}

fn pg_theorem(ctx: &Context, seed: u64) -> CheckResult {
    run_check("pg-theorem", "‖∇J − FD‖ / max(‖FD‖, 1e-4) ≤ 1e-5, central step 1e-5", |c| {
        let pool: Vec<&Case> = ctx.all_cases().filter(|k| k.mdp.n_actions() > 1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        if pool.is_empty() {
            c.note("no environment with an action choice");
            return Ok(());
        }
        let h = 1e-5;
        for i in 0..ctx.counts.pg_pairs {
            let case = pool[i % pool.len()];
            let policy = random_theta(&case.policy, &mut rng);
            let e = PolicyEvaluation::new(&case.mdp, &policy)?;
            let g = exact_policy_gradient(&policy, &e.analysis, &e.values);
            let mut fd = DVector::zeros(policy.dim());
            for j in 0..policy.dim() {
                let mut step = DVector::zeros(policy.dim());
                step[j] = h;
                let jp = gain(&case.mdp, &policy.with_theta(policy.theta() + &step)?)?;
                let jm = gain(&case.mdp, &policy.with_theta(policy.theta() - &step)?)?;
                fd[j] = (jp - jm) / (2.0 * h);
            }
            let rel = (&g - &fd).norm() / fd.norm().max(1e-4);
            c.max("max_relative_error", rel);
            c.count("pairs");
            c.require(rel <= 1e-5, || format!("{}: relative error {rel:e}", case.label));
        }
        Ok(())
    })
}

fn cesaro(ctx: &Context) -> CheckResult {
    run_check("cesaro", "TV(t) ≤ (C_hit + C_tar)/t + 1e-9, ≤ C_tar/t + 1e-9 from recurrent starts", |c| {
        let t_max = ctx.counts.cesaro_horizon;
        for case in ctx.all_cases() {
            let kernel = case.mdp.induced_kernel(&case.policy.table())?;
            let a = analyze_chain(&kernel)?;
            let total = a.c_hit() + a.c_tar();
            for s0 in 0..case.mdp.n_states() {
                let curve = cesaro_tv_curve(&kernel, s0, t_max)?;
                let recurrent = a.is_recurrent(s0);
                for (i, &tv) in curve.iter().enumerate() {
                    let t = (i + 1) as f64;
                    if total > 0.0 {
                        c.max("max_t_tv_over_c", t * tv / total);
                    }
                    c.require(tv <= total / t + 1e-9, || format!("{} s0={s0} t={t}: TV {tv:e} > {:e}", case.label, total / t));
                    if recurrent {
                        c.require(tv <= a.c_tar() / t + 1e-9, || format!("{} s0={s0} t={t}: TV {tv:e} > C_tar/t", case.label));
                    }
                }
            }
            c.count("policies");
            if case.spec == EnvSpec::Cycle2 && case.label.ends_with("uniform") {
                let curve = cesaro_tv_curve(&kernel, 0, t_max)?;
                let dev = curve
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % 2 == 0)
                    .map(|(i, &tv)| (tv - 0.5 / (i + 1) as f64).abs())
                    .fold(0.0, f64::max);
                c.measure("cycle2_odd_t_deviation", dev);
                c.require(dev <= 1e-12, || format!("cycle2 odd-t values deviate from 1/(2t) by {dev:e}"));
            }
        }
        Ok(())
    })
}

fn value_bounds(ctx: &Context) -> CheckResult {
    run_check("value-bounds", "|V| ≤ 2C, |Q| ≤ 1 + 2C, |A| ≤ 1 + 4C with C = C_hit + C_tar, slack 1e-9", |c| {
        for case in ctx.all_cases() {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let k = e.analysis.c_hit() + e.analysis.c_tar();
            let v = &e.values;
            let (bv, bq, ba) = (2.0 * k, 1.0 + 2.0 * k, 1.0 + 4.0 * k);
            if k > 0.0 {
                c.max("max_v_ratio", v.max_abs_v() / bv);
            }
            c.max("max_q_ratio", v.max_abs_q() / bq);
            c.max("max_adv_ratio", v.max_abs_adv() / ba);
            c.require(v.max_abs_v() <= bv + 1e-9, || format!("{}: |V| {} > {bv}", case.label, v.max_abs_v()));
            c.require(v.max_abs_q() <= bq + 1e-9, || format!("{}: |Q| {} > {bq}", case.label, v.max_abs_q()));
            c.require(v.max_abs_adv() <= ba + 1e-9, || format!("{}: |A| {} > {ba}", case.label, v.max_abs_adv()));
            c.count("bundles");
        }
        Ok(())
    })
}

/// The state with the largest expected entry time into the recurrent class.
fn worst_start(a: &Analysis) -> usize {
    a.entry_times().argmax().0
}

fn hitting_probability(ctx: &Context, seed: u64) -> CheckResult {
    run_check("hitting-probability", "P(T ≤ B) ≥ 1 − 2^(−⌊B/(2 C_hit)⌋) − 3σ, B ∈ {1,2,4,8}·⌈C_hit⌉", |c| {
        let trials = ctx.counts.hitting_trials;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x417);
        for case in ctx.all_cases() {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let c_hit = e.analysis.c_hit();
            if c_hit == 0.0 {
                continue;
            }
            let start = worst_start(&e.analysis);
            let unit = c_hit.ceil() as usize;
            let horizons: Vec<usize> = [1, 2, 4, 8].iter().map(|m| m * unit).collect();
            let cap = *horizons.last().expect("nonempty");
            let mut hits = vec![0usize; horizons.len()];
            for _ in 0..trials {
                let mut traj = Trajectory::new(start);
                let mut t_hit = None;
                for t in 1..=cap {
                    let z = traj.next(&case.mdp, &case.policy, &mut rng)?;
                    if e.analysis.is_recurrent(z.s_next) {
                        t_hit = Some(t);
                        break;
                    }
                }
                if let Some(t) = t_hit {
                    for (i, &b) in horizons.iter().enumerate() {
                        if t <= b {
                            hits[i] += 1;
                        }
                    }
                }
            }
            for (i, &b) in horizons.iter().enumerate() {
                let freq = hits[i] as f64 / trials as f64;
                let bound = 1.0 - 2f64.powi(-((b as f64 / (2.0 * c_hit)).floor() as i32));
                let sigma = (bound * (1.0 - bound) / trials as f64).sqrt();
                if sigma > 0.0 {
                    c.min("min_z_score", (freq - bound) / sigma);
                }
                c.min("min_margin", freq - bound);
                c.require(freq >= bound - 3.0 * sigma, || format!("{} B={b}: frequency {freq} < bound {bound} − 3σ", case.label));
            }
            c.count("cases");
        }
        if !c.measured.contains_key("cases") {
            c.note("no case has transient states");
        }
        Ok(())
    })
}

/// Exact `‖p^T (1/B) Σ_{i=1..B} P^i − d‖` from a point mass at `start`.
fn exact_average_bias(kernel: &DMatrix<f64>, d: &DVector<f64>, start: usize, batch: usize) -> f64 {
    let pt = kernel.transpose();
    let mut row = DVector::zeros(d.len());
    row[start] = 1.0;
    let mut acc = DVector::zeros(d.len());
    for _ in 0..batch {
        row = &pt * row;
        acc += &row;
    }
    (acc / batch as f64 - d).norm()
}

struct AverageStats {
    bias: f64,
    /// Standard error of `bias` from the Monte-Carlo mean.
    bias_se: f64,
    mean_sq: f64,
    mean_sq_se: f64,
}

/// Monte-Carlo bias and mean squared error of the batch average of the
/// one-hot state indicator over `s_1..s_B` from `start`.
fn average_stats(case: &Case, start: usize, d: &DVector<f64>, batch: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<AverageStats> {
    let n = d.len();
    let mut sum = DVector::zeros(n);
    let mut sum_sq_coord = DVector::zeros(n);
    let mut sq = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut traj = Trajectory::new(start);
        let mut counts = DVector::zeros(n);
        for _ in 0..batch {
            let z = traj.next(&case.mdp, &case.policy, rng)?;
            counts[z.s_next] += 1.0;
        }
        let dev = counts / batch as f64 - d;
        sq.push(dev.norm_squared());
        sum_sq_coord += dev.component_mul(&dev);
        sum += dev;
    }
    let t = trials as f64;
    let mean = &sum / t;
    let coord_var = (&sum_sq_coord / t - mean.component_mul(&mean)).map(|v| v.max(0.0));
    let mean_sq = sq.iter().sum::<f64>() / t;
    let var_sq = sq.iter().map(|x| (x - mean_sq).powi(2)).sum::<f64>() / (t - 1.0);
    Ok(AverageStats { bias: mean.norm(), bias_se: (coord_var.sum() / t).sqrt(), mean_sq, mean_sq_se: (var_sq / t).sqrt() })
}

fn markov_bias_variance(ctx: &Context, seed: u64) -> CheckResult {
    run_check(
        "markov-bias-variance",
        "bias(2B) ≤ 0.7 bias(B) + 3σ, bias(B) ≤ √d C/B + 3σ, E‖avg − μ‖² ≤ 1.5 (1 + 2√d C)/B + 3σ",
        |c| {
            let trials = ctx.counts.average_trials;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
            for case in ctx.all_cases().filter(|k| k.label.ends_with("uniform") || k.label.ends_with("θ#0")) {
                let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
                let a = &e.analysis;
                let d = a.stationary_dist().clone();
                let dim = d.len() as f64;
                let big_c = a.c_hit() + a.c_tar();
                let start = worst_start(a);
                let period = a.period();
                // Whole periods keep the exact bias on its 1/B envelope.
                let b1 = period * (2.0 * big_c).max(2.0).ceil() as usize;
                let b2 = 2 * b1;
                let kernel = e.kernel.matrix();
                let (x1, x2) = (exact_average_bias(kernel, &d, start, b1), exact_average_bias(kernel, &d, start, b2));
                let s1 = average_stats(case, start, &d, b1, trials, &mut rng)?;
                let s2 = average_stats(case, start, &d, b2, trials, &mut rng)?;
                for (b, s) in [(b1, &s1), (b2, &s2)] {
                    let bound = dim.sqrt() * big_c / b as f64;
                    c.require(s.bias <= bound + 3.0 * s.bias_se, || format!("{} B={b}: bias {} > √d C/B = {bound}", case.label, s.bias));
                    let vbound = 1.5 * (1.0 + 2.0 * dim.sqrt() * big_c) / b as f64;
                    c.max("max_variance_ratio", s.mean_sq / vbound);
                    c.require(s.mean_sq <= vbound + 3.0 * s.mean_sq_se, || format!("{} B={b}: E‖avg−μ‖² {} > {vbound}", case.label, s.mean_sq));
                }
                if x1 > 1e-12 {
                    c.max("max_exact_bias_ratio", x2 / x1);
                    let slack = 3.0 * (s2.bias_se + 0.7 * s1.bias_se);
                    c.max("max_empirical_bias_ratio", s2.bias / s1.bias);
                    c.require(s2.bias <= 0.7 * s1.bias + slack, || {
                        format!("{} B={b1}: bias(2B) {} > 0.7·bias(B) {} + {slack}", case.label, s2.bias, s1.bias)
                    });
                } else {
                    c.note(format!("{}: exact bias vanishes at B={b1}; ratio not tested", case.label));
                }
                c.count("cases");
            }
            Ok(())
        },
    )
}

fn critic_kernel(ctx: &Context, seed: u64) -> CheckResult {
    run_check("critic-kernel", "sin(max principal angle) ≤ 1e-8", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for case in ctx.all_cases() {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let n = case.mdp.n_states();
            for features in [Features::one_hot(n), Features::random(n, n.min(3), &mut rng)] {
                let sys = critic_system(&case.mdp, &e.table, &e.analysis, &features, 1.0)?;
                let z = constant_on_recurrent_basis(&features, &e.analysis);
                let angle = linalg::max_principal_angle_sin(&sys.kernel_basis, &z);
                c.max("max_angle_sin", angle);
                c.require(angle <= 1e-8, || format!("{} (m = {}): sin angle {angle:e}", case.label, features.dim()));
            }
        }
        Ok(())
    })
}

/// `λ` clamped to `(0, 1]` (1 when `Ker(M_θ)^⊥` is trivial) and the matched
/// `c_β = λ + √(1/λ² − 1)`.
fn matched_c_beta(probe: &CriticSystem<f64>) -> (f64, f64) {
    let lambda = probe.lambda().unwrap_or(1.0).min(1.0);
    (lambda, lambda + (1.0 / (lambda * lambda) - 1.0).sqrt())
}

fn td_pd(ctx: &Context, c_beta: Option<f64>, seed: u64) -> CheckResult {
    run_check("td-pd", "ξᵀA_vξ ≥ (λ/2)‖ξ‖² − 1e-10 on probes and at the exact minimizer", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7d);
        for case in ctx.all_cases() {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let features = Features::one_hot(case.mdp.n_states());
            let probe = critic_system(&case.mdp, &e.table, &e.analysis, &features, 1.0)?;
            let (lambda, matched) = matched_c_beta(&probe);
            let cb = c_beta.unwrap_or(matched);
            let sys = critic_system(&case.mdp, &e.table, &e.analysis, &features, cb)?;
            let comp = sys.kernel_complement();
            let mut worst = f64::INFINITY;
            for _ in 0..ctx.counts.pd_probes {
                let mut xi = DVector::zeros(sys.dim());
                xi[0] = rng.random_range(-1.0..1.0);
                let w = DVector::from_fn(comp.ncols(), |_, _| rng.random_range(-1.0..1.0));
                xi.rows_mut(1, comp.nrows()).copy_from(&(&comp * w));
                let norm2 = xi.norm_squared();
                if norm2 == 0.0 {
                    continue;
                }
                worst = worst.min(xi.dot(&(&sys.a_v * &xi)) / norm2);
            }
            let exact = sys.restricted_min_quadratic();
            worst = worst.min(exact);
            c.min("min_margin", worst - lambda / 2.0);
            c.require(worst >= lambda / 2.0 - 1e-10, || {
                format!("{}: min ξᵀAξ/‖ξ‖² = {worst:.6} < λ/2 = {:.6} at c_β = {cb:.4}", case.label, lambda / 2.0)
            });
        }
        Ok(())
    })
}

fn critic_fixed_point(ctx: &Context, c_beta: Option<f64>) -> CheckResult {
    run_check("critic-fixed-point", "‖Π(ξ_500 − ξ*)‖ ≤ 1e-8; per-step factor ≤ 1 under β = λ²/2", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for case in ctx.cases.iter().filter(|k| k.label.ends_with("uniform") || k.label.ends_with("θ#0")) {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let features = Features::one_hot(case.mdp.n_states());
            let zero = CriticState::zeros(features.dim());

            let sys = critic_system(&case.mdp, &e.table, &e.analysis, &features, c_beta.unwrap_or(1.0))?;
            let (beta, radius) = sys.fastest_step();
            let (xi, _) = critic_exact_loop(&sys, &zero, 500, beta, &mut rng)?;
            let err = sys.projected_error(&xi.xi);
            c.max("max_final_error", err);
            c.max("max_spectral_radius", radius);
            c.require(err <= 1e-8, || format!("{}: error {err:e} after 500 steps (radius {radius:.4})", case.label));

            let (lambda, matched) = matched_c_beta(&critic_system(&case.mdp, &e.table, &e.analysis, &features, 1.0)?);
            let sys = critic_system(&case.mdp, &e.table, &e.analysis, &features, c_beta.unwrap_or(matched))?;
            let (_, report) = critic_exact_loop(&sys, &zero, 500, lambda * lambda / 2.0, &mut rng)?;
            let floor = 1e-10 * report.projected_errors[0];
            let factor = report.max_step_factor(floor).unwrap_or(0.0);
            c.max("max_theory_step_factor", factor);
            c.require(factor <= 1.0 + 1e-12, || format!("{}: step factor {factor} under theory rates", case.label));
        }
        Ok(())
    })
}

fn critic_noise_floor(ctx: &Context, config: &SuiteConfig, seed: u64) -> CheckResult {
    run_check("critic-noise-floor", "median over seeds of floor(4B)/floor(B) ≤ 0.6", |c| {
        let (b1, b2, horizon) = (12, 48, 100);
        for case in uniform_cases(ctx) {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let features = Features::one_hot(case.mdp.n_states());
            let sys = critic_system(&case.mdp, &e.table, &e.analysis, &features, config.c_beta.unwrap_or(1.0))?;
            let beta = 0.5 * sys.fastest_step().0;
            let start = CriticState { xi: sys.xi_star.clone() };
            let floor = |batch: usize, s: u64| -> Result<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut traj = Trajectory::start(&case.mdp, &mut rng);
                let (_, report) = critic_inner_loop(&case.mdp, &case.policy, &features, &mut traj, &start, horizon, batch, beta, sys.c_beta, Some(&sys), &mut rng)?;
                let tail = &report.projected_errors[horizon / 2..];
                Ok(tail.iter().map(|x| x * x).sum::<f64>() / tail.len() as f64)
            };
            let mut ratios = Vec::new();
            let mut noise_free = true;
            for k in 0..ctx.counts.floor_seeds as u64 {
                let s = seed.wrapping_mul(1000).wrapping_add(k);
                let (f1, f2) = (floor(b1, s)?, floor(b2, s ^ 0x5eed)?);
                if f1 > 1e-24 {
                    noise_free = false;
                    ratios.push(f2 / f1);
                } else {
                    ratios.push(0.0);
                }
            }
            if noise_free {
                c.note(format!("{}: noise-free transitions, floor is zero", case.spec));
                continue;
            }
            let med = median(&mut ratios);
            c.measure(format!("median_ratio {}", case.spec), med);
            c.require(med <= 0.6, || format!("{}: median floor ratio {med}", case.spec));
        }
        Ok(())
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn npg_fixed_point(ctx: &Context) -> CheckResult {
    run_check("npg-fixed-point", "‖R^T(ω_H − ω*)‖ ≤ 1e-8 with R a basis of range(F), exact critic, H = max(500, steps for 1e-12 at rate (κ−1)/(κ+1))", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for case in ctx.all_cases().filter(|k| k.mdp.n_actions() > 1 && (k.label.ends_with("uniform") || k.label.ends_with("θ#0"))) {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let features = Features::one_hot(case.mdp.n_states());
            let sys = critic_system(&case.mdp, &e.table, &e.analysis, &features, 1.0)?;
            let critic = CriticState { xi: sys.xi_star.clone() };
            let f = fisher_matrix(&case.policy, &e.analysis);
            let w_star = exact_npg(&exact_policy_gradient(&case.policy, &e.analysis, &e.values), &f);
            let range = linalg::range_basis(&f);
            let eig = linalg::sym_eigenvalues(&(range.transpose() * &f * &range));
            let (Some(&mu), Some(&big)) = (eig.first(), eig.last()) else {
                c.note(format!("{}: Fisher matrix is zero", case.label));
                continue;
            };
            let gamma = 2.0 / (mu + big);
            // The contraction factor is (κ − 1)/(κ + 1); ill-conditioned Fisher
            // matrices get a longer horizon than the default 500 steps.
            let kappa = big / mu;
            let rate = (kappa - 1.0) / (kappa + 1.0);
            let horizon = if rate > 0.0 { ((1e-12f64).ln() / rate.ln()).ceil().clamp(500.0, 200_000.0) as usize } else { 500 };
            c.max("max_horizon", horizon as f64);
            let (w, _) = npg_exact_loop(&case.mdp, &case.policy, &e.analysis, &features, &critic, &NpgState::zeros(case.policy.dim()), horizon, gamma, NpgSign::Descent, &mut rng)?;
            let err = (range.transpose() * (&w.omega - &w_star)).norm();
            c.max("max_final_error", err);
            c.max("max_condition", big / mu);
            c.require(err <= 1e-8, || format!("{}: error {err:e} (κ = {kappa:.1}, H = {horizon})", case.label));
        }
        Ok(())
    })
}

fn compatible_approximation(ctx: &Context) -> CheckResult {
    run_check("compatible-approximation", "|ω*ᵀ score(s,a) − A(s,a)| ≤ 1e-8 on the recurrent class", |c| {
        for case in ctx.all_cases().filter(|k| k.mdp.n_actions() > 1) {
            let e = PolicyEvaluation::new(&case.mdp, &case.policy)?;
            let w = exact_npg(&exact_policy_gradient(&case.policy, &e.analysis, &e.values), &fisher_matrix(&case.policy, &e.analysis));
            for &s in e.analysis.recurrent_class() {
                for a in 0..case.mdp.n_actions() {
                    let dev = (w.dot(&case.policy.score(s, a)) - e.values.adv[(s, a)]).abs();
                    c.max("max_deviation", dev);
                    c.require(dev <= 1e-8, || format!("{} s={s} a={a}: deviation {dev:e}", case.label));
                }
            }
        }
        Ok(())
    })
}

fn policy_score(ctx: &Context, seed: u64) -> CheckResult {
    run_check("policy-score", "‖score‖ ≤ √2 + 1e-12; ‖Σ_a π(a|s) score(s,a)‖ ≤ 1e-12", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c);
        let cases: Vec<&Case> = uniform_cases(ctx).collect();
        for i in 0..ctx.counts.score_samples {
            let case = cases[i % cases.len()];
            let policy = random_theta(&case.policy, &mut rng);
            let s = rng.random_range(0..case.mdp.n_states());
            let a = rng.random_range(0..case.mdp.n_actions());
            let norm = policy.score(s, a).norm();
            c.max("max_score_norm", norm);
            c.require(norm <= 2f64.sqrt() + 1e-12, || format!("{} s={s} a={a}: ‖score‖ = {norm}", case.spec));
            let probs = policy.action_probs(s);
            let mean = (0..case.mdp.n_actions()).fold(DVector::zeros(policy.dim()), |acc, b| acc + policy.score(s, b) * probs[b]);
            c.max("max_mean_score", mean.norm());
            c.require(mean.norm() <= 1e-12, || format!("{} s={s}: mean score {}", case.spec, mean.norm()));
        }
        Ok(())
    })
}

fn chain_structure(config: &SuiteConfig, seed: u64) -> CheckResult {
    run_check("chain-structure", "fixed periods and partitions across policies; row sums within 1e-12", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a1);
        for &spec in &config.envs {
            let mdp: Mdp = build(&spec)?;
            let uniform = Policy::tabular(mdp.n_states(), mdp.n_actions());
            let base = PolicyEvaluation::new(&mdp, &uniform)?.analysis;
            for _ in 0..20 {
                let policy = random_theta(&uniform, &mut rng);
                let kernel = mdp.induced_kernel(&policy.table())?;
                let dev = (0..kernel.n()).map(|s| (kernel.matrix().row(s).sum() - 1.0).abs()).fold(0.0, f64::max);
                c.max("max_row_sum_error", dev);
                c.require(dev <= 1e-12, || format!("{spec}: row sum off by {dev:e}"));
                let a = analyze_chain(&kernel)?;
                c.require(a.recurrent_class() == base.recurrent_class(), || format!("{spec}: recurrent class changed with θ"));
                c.require(a.period() == base.period(), || format!("{spec}: period changed with θ"));
                if let EnvSpec::PCycle { period, .. } = spec {
                    c.require(a.period() == period, || format!("{spec}: period {} ≠ {period}", a.period()));
                }
            }
        }
        Ok(())
    })
}

fn linear_recursion(ctx: &Context, seed: u64) -> CheckResult {
    run_check("linear-recursion", "decay factor ≤ 1 − βλ/4 + 1e-10; floor ratios ≤ 0.6 (σ) and ≤ 0.35 (δ)", |c| {
        let config = StructureConfig { trials: ctx.counts.recursion_trials, seed: seed.wrapping_add(2), ..StructureConfig::default() };
        let report = verify_recursion(&config)?;
        c.measure("lambda_p", report.lambda_p);
        c.measure("big_lambda_p", report.big_lambda_p);
        c.require(report.precondition_holds, || "δ_P > λ_P/8: rate checks skipped".into());
        for check in &report.checks {
            c.measure(check.name.clone(), check.measured);
            c.require(check.passed, || format!("{}: {} vs threshold {}", check.name, check.measured, check.threshold));
        }
        Ok(())
    })
}

fn epoch_critic_floor(ctx: &Context, seed: u64) -> CheckResult {
    run_check("epoch-critic-floor", "median over seeds of median_k ‖Π(ξ_k − ξ*_k)‖ ratio (4B vs B) ≤ 0.6, K = H = 40, α = 0.01", |c| {
        for case in uniform_cases(ctx).filter(|k| k.spec.has_choice()) {
            let features = Features::one_hot(case.mdp.n_states());
            let median_error = |batch: usize, s: u64| -> Result<f64> {
                // A small policy step keeps ξ*_k nearly fixed between epochs, so
                // the error is the sampling floor rather than tracking lag.
                let run_config = NacbConfig { epochs: 40, inner: 40, batch, alpha: 0.01, seed: s, oracle_diagnostics: true, ..NacbConfig::default() };
                let trace = run_seeded(&case.mdp, &case.policy, &features, &run_config)?;
                let mut errs: Vec<f64> = trace.epochs.iter().filter_map(|d| d.critic_error).collect();
                Ok(median(&mut errs))
            };
            let mut ratios = Vec::new();
            for k in 0..ctx.counts.epoch_seeds as u64 {
                let s = seed.wrapping_mul(7919).wrapping_add(k);
                let (e1, e4) = (median_error(32, s)?, median_error(128, s)?);
                ratios.push(if e1 > 0.0 { e4 / e1 } else { 0.0 });
            }
            let med = median(&mut ratios);
            c.measure(format!("median_ratio {}", case.spec), med);
            c.require(med <= 0.6, || format!("{}: median ratio {med}", case.spec));
        }
        Ok(())
    })
}

fn regret_scaling(ctx: &Context, config: &SuiteConfig) -> CheckResult {
    let (lo, hi, points) = ctx.counts.sweep_grid;
    run_check("regret-scaling", "log-log slope ∈ [0.35, 0.85] and Reg/T' strictly decreasing", |c| {
        for &env in &config.sweep_envs {
            let result = regret_sweep(&SweepConfig::geometric(env, lo, hi, points, ctx.counts.sweep_seeds))?;
            c.require(result.failed_cells() == 0, || format!("{env}: {} runs failed", result.failed_cells()));
            match result.fit {
                Some(fit) => {
                    c.measure(format!("slope {env}"), fit.slope);
                    c.measure(format!("slope_ci_low {env}"), fit.ci_low);
                    c.measure(format!("slope_ci_high {env}"), fit.ci_high);
                    c.require((0.35..=0.85).contains(&fit.slope), || format!("{env}: slope {:.3} outside [0.35, 0.85]", fit.slope));
                }
                None => c.require(false, || format!("{env}: no slope ({})", result.fit_skipped.clone().unwrap_or_default())),
            }
            c.require(result.per_step_decreasing, || format!("{env}: Reg/T' not strictly decreasing"));
            if !result.regret_nondecreasing {
                c.note(format!("{env}: mean regret decreased somewhere along the grid"));
            }
        }
        Ok(())
    })
}

fn regret_degenerate(config: &SuiteConfig) -> CheckResult {
    run_check("regret-degenerate", "|Reg| ≤ 0.5 at every T and no slope fitted", |c| {
        for &env in config.envs.iter().filter(|e| !e.has_choice()) {
            let result = regret_sweep(&SweepConfig::geometric(env, 256, 4096, 4, 5))?;
            let worst = result.cells.iter().filter_map(|x| x.regret).map(f64::abs).fold(0.0, f64::max);
            c.max("max_abs_regret", worst);
            c.require(worst <= 0.5 + 1e-9, || format!("{env}: |Reg| = {worst}"));
            c.require(result.fit.is_none(), || format!("{env}: a slope was fitted"));
        }
        Ok(())
    })
}

fn determinism(config: &SuiteConfig, seed: u64) -> CheckResult {
    run_check("determinism", "identical bits across reruns; trace length = 2KHB", |c| {
        for &env in &config.envs {
            let mdp: Mdp = build(&env)?;
            let policy = Policy::tabular(mdp.n_states(), mdp.n_actions());
            let features = Features::one_hot(mdp.n_states());
            let run_config = NacbConfig { epochs: 5, inner: 4, batch: 16, seed, oracle_diagnostics: true, ..NacbConfig::default() };
            let a = run_seeded(&mdp, &policy, &features, &run_config)?;
            let b = run_seeded(&mdp, &policy, &features, &run_config)?;
            let same = a.rewards.iter().zip(&b.rewards).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.rewards.len() == b.rewards.len()
                && a.epochs == b.epochs
                && a.final_theta.iter().zip(b.final_theta.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            c.require(same, || format!("{env}: reruns differ"));
            c.require(a.len() == run_config.horizon(), || format!("{env}: {} rewards for 2KHB = {}", a.len(), run_config.horizon()));
            c.count("runs");
        }
        let sweep = SweepConfig::new(EnvSpec::Bandit, vec![256, 512], 2);
        let (x, y) = (regret_sweep(&sweep)?, regret_sweep(&sweep)?);
        c.require(x.to_csv() == y.to_csv(), || "sweep output differs between reruns".into());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_ids_are_unique() {
        let mut ids: Vec<&str> = CHECKS.iter().map(|(i, _)| *i).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), CHECKS.len());
    }

    #[test]
    fn empty_environment_list_gives_empty_report() {
        let config = SuiteConfig { envs: vec![], ..SuiteConfig::new(Level::Fast) };
        let report = verify_suite(&config);
        assert!(report.checks.is_empty() && report.passed());
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn level_parses() {
        assert_eq!("fast".parse::<Level>().unwrap(), Level::Fast);
        assert!("slow".parse::<Level>().is_err());
    }
}
