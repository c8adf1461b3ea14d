//! Stochastic linear recursion `x ← x − β̄(P̂_h x − q̂_h)`.
//!
//! [`run`] drives the recursion from any [`OperatorSource`]. When a reference
//! system `(P, q)` is supplied it also tracks the projected error
//! `‖Π(x_h − x*)‖` with `x* = P^† q` and `Π` the projector onto `Ker(P)^⊥`,
//! and measures the noise and bias of the drawn operators against `(P, q)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::linalg;
use crate::{Error, Result, Scalar};

/// One draw `(P̂_h, q̂_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyOperator<T: Scalar> {
    pub p: DMatrix<T>,
    pub q: DVector<T>,
}

/// Yields the operator pair used at each step.
pub trait OperatorSource<T: Scalar> {
    fn dim(&self) -> usize;
    fn draw(&mut self, h: usize, rng: &mut dyn RngCore) -> Result<NoisyOperator<T>>;
}

/// The same operator at every step.
#[derive(Debug, Clone)]
pub struct FixedSource<T: Scalar> {
    pub op: NoisyOperator<T>,
}

impl<T: Scalar> FixedSource<T> {
    pub fn new(p: DMatrix<T>, q: DVector<T>) -> Self {
        Self { op: NoisyOperator { p, q } }
    }
}

impl<T: Scalar> OperatorSource<T> for FixedSource<T> {
    fn dim(&self) -> usize {
        self.op.q.len()
    }

    fn draw(&mut self, _h: usize, _rng: &mut dyn RngCore) -> Result<NoisyOperator<T>> {
        Ok(self.op.clone())
    }
}

/// `(P, q)` plus fixed bias and fresh symmetric Gaussian noise, all confined
/// to `Ker(P)^⊥` so that every draw keeps `Ker(P)` in its kernel.
#[derive(Debug, Clone)]
pub struct SyntheticSource<T: Scalar> {
    p: DMatrix<T>,
    q: DVector<T>,
    projector: DMatrix<T>,
    sigma_p: T,
    sigma_q: T,
    bias_p: DMatrix<T>,
    bias_q: DVector<T>,
}

impl<T: Scalar> SyntheticSource<T> {
    /// `delta_p` and `delta_q` are the norms of the fixed bias terms; the
    /// bias directions are drawn once from `rng`.
    pub fn new<R: Rng + ?Sized>(
        p: DMatrix<T>,
        q: DVector<T>,
        sigma_p: T,
        sigma_q: T,
        delta_p: T,
        delta_q: T,
        rng: &mut R,
    ) -> Self {
        let n = q.len();
        let projector = DMatrix::identity(n, n) - linalg::projector(&linalg::null_space(&p));
        let e = sym_gaussian::<T, R>(n, rng);
        let e = &projector * e * &projector;
        let norm = linalg::spectral_norm(&e);
        let bias_p = if norm > T::zero() { e * (delta_p / norm) } else { e };
        let u = &projector * gaussian_vec::<T, R>(n, rng);
        let norm = u.norm();
        let bias_q = if norm > T::zero() { u * (delta_q / norm) } else { u };
        Self { p, q, projector, sigma_p, sigma_q, bias_p, bias_q }
    }

    pub fn reference(&self) -> Reference<T> {
        Reference::new(self.p.clone(), self.q.clone())
    }
}

fn gaussian_vec<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<T> {
    DVector::from_fn(n, |_, _| T::lit(StandardNormal.sample(rng)))
}

/// Symmetric Gaussian matrix scaled to unit expected squared Frobenius norm
/// per row.
fn sym_gaussian<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<T> {
    let g = DMatrix::from_fn(n, n, |_, _| T::lit(StandardNormal.sample(rng)));
    (&g + g.transpose()) * T::lit(0.5 / (n as f64).sqrt())
}

impl<T: Scalar> OperatorSource<T> for SyntheticSource<T> {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn draw(&mut self, _h: usize, rng: &mut dyn RngCore) -> Result<NoisyOperator<T>> {
        let n = self.dim();
        let mut p = &self.p + &self.bias_p;
        if self.sigma_p > T::zero() {
            p += &self.projector * sym_gaussian::<T, _>(n, rng) * &self.projector * self.sigma_p;
        }
        let mut q = &self.q + &self.bias_q;
        if self.sigma_q > T::zero() {
            q += &self.projector * gaussian_vec::<T, _>(n, rng) * (self.sigma_q / T::lit((n as f64).sqrt()));
        }
        Ok(NoisyOperator { p, q })
    }
}

/// Reference system `(P, q)` with its derived `x*`, `Ker(P)` and `Π`.
#[derive(Debug, Clone)]
pub struct Reference<T: Scalar> {
    pub p: DMatrix<T>,
    pub q: DVector<T>,
    pub x_star: DVector<T>,
    pub kernel: DMatrix<T>,
    pub projector: DMatrix<T>,
}

impl<T: Scalar> Reference<T> {
    pub fn new(p: DMatrix<T>, q: DVector<T>) -> Self {
        let n = q.len();
        let x_star = linalg::pinv(&p) * &q;
        let kernel = linalg::null_space(&p);
        let projector = DMatrix::identity(n, n) - linalg::projector(&kernel);
        Self { p, q, x_star, kernel, projector }
    }

    /// Uses a kernel basis computed elsewhere (e.g. from the structure of
    /// the system) instead of the numerical null space.
    pub fn with_kernel(p: DMatrix<T>, q: DVector<T>, x_star: DVector<T>, kernel: DMatrix<T>) -> Self {
        let n = q.len();
        let projector = DMatrix::identity(n, n) - linalg::projector(&kernel);
        Self { p, q, x_star, kernel, projector }
    }

    pub fn projected_error(&self, x: &DVector<T>) -> T {
        (&self.projector * (x - &self.x_star)).norm()
    }

    /// Smallest eigenvalue of the symmetric part of `P` on `Ker(P)^⊥`.
    pub fn lambda_p(&self) -> Option<T> {
        linalg::min_sym_eig_on(&self.p, &linalg::orth_complement(&self.kernel, self.q.len()))
    }
}

/// Step size, horizon and optional reference for one run.
#[derive(Debug, Clone)]
pub struct RecursionSpec<T: Scalar> {
    pub beta: T,
    pub horizon: usize,
    pub reference: Option<Reference<T>>,
    /// Random unit probes on `Ker(P)^⊥` used to estimate `λ_P`.
    pub probes: usize,
}

impl<T: Scalar> RecursionSpec<T> {
    pub fn new(beta: T, horizon: usize) -> Self {
        Self { beta, horizon, reference: None, probes: 0 }
    }

    pub fn with_reference(mut self, reference: Reference<T>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_probes(mut self, probes: usize) -> Self {
        self.probes = probes;
        self
    }
}

/// Condition constants measured from the draws of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MeasuredConstants {
    /// `sqrt(mean ‖P̂_h − P‖²)`.
    pub sigma_p: f64,
    /// `‖mean P̂_h − P‖`.
    pub delta_p: f64,
    pub sigma_q: f64,
    pub delta_q: f64,
    /// `‖P‖` and `‖q‖`.
    pub big_lambda_p: f64,
    pub big_lambda_q: f64,
    /// Analytic smallest symmetric-part eigenvalue of `P` on `Ker(P)^⊥`.
    pub lambda_p: Option<f64>,
    /// Smallest Rayleigh quotient over the random probes.
    pub lambda_p_probed: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RecursionReport<T: Scalar> {
    pub x_final: DVector<T>,
    /// `‖Π(x_h − x*)‖` for `h = 0..=H` (empty without a reference).
    pub projected_errors: Vec<T>,
    pub constants: Option<MeasuredConstants>,
    /// Steps whose `P̂_h` did not annihilate `Ker(P)`.
    pub kernel_violations: usize,
    /// Max over steps of `‖K^T (x_h − x_0)‖`, the drift inside `Ker(P)`.
    pub kernel_drift: T,
}

impl<T: Scalar> RecursionReport<T> {
    /// Largest `err_{h+1} / err_h` over steps where `err_h` is above `floor`.
    pub fn max_step_factor(&self, floor: T) -> Option<T> {
        self.projected_errors
            .windows(2)
            .filter(|w| w[0] > floor)
            .map(|w| w[1] / w[0])
            .fold(None, |acc: Option<T>, f| Some(acc.map_or(f, |a| a.max(f))))
    }
}

const KERNEL_TOL: f64 = 1e-9;

/// Runs `H` steps of the recursion from `x0`.
pub fn run<T: Scalar>(
    spec: &RecursionSpec<T>,
    source: &mut dyn OperatorSource<T>,
    x0: DVector<T>,
    rng: &mut dyn RngCore,
) -> Result<RecursionReport<T>> {
    let n = source.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!("x0 has length {}, source has dim {n}", x0.len())));
    }
    if !(spec.beta > T::zero()) {
        return Err(Error::Domain("step size must be positive".into()));
    }
    let reference = spec.reference.as_ref();
    let mut x = x0.clone();
    let mut errors = Vec::new();
    let mut kernel_violations = 0;
    let mut kernel_drift = T::zero();
    let (mut sum_p, mut sum_q) = (DMatrix::zeros(n, n), DVector::zeros(n));
    let (mut sq_p, mut sq_q) = (T::zero(), T::zero());
    if let Some(r) = reference {
        errors.push(r.projected_error(&x));
    }
    for h in 0..spec.horizon {
        let op = source.draw(h, rng)?;
        if op.p.shape() != (n, n) || op.q.len() != n {
            return Err(Error::DimensionMismatch(format!("operator at step {h} has the wrong shape")));
        }
        let update = &op.p * &x - &op.q;
        x.axpy(-spec.beta, &update, T::one());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate {
                step: h,
                context: format!("‖x‖ before the step was {:.3e}", (&x - update * spec.beta).norm().as_f64()),
            });
        }
        if let Some(r) = reference {
            errors.push(r.projected_error(&x));
            if r.kernel.ncols() > 0 {
                let scale = linalg::spectral_norm(&op.p).max(T::one());
                if (&op.p * &r.kernel).norm() > T::tol(KERNEL_TOL) * scale {
                    kernel_violations += 1;
                }
                kernel_drift = kernel_drift.max((r.kernel.transpose() * (&x - &x0)).norm());
            }
            sq_p += linalg::spectral_norm(&(&op.p - &r.p)).powi(2);
            sq_q += (&op.q - &r.q).norm_squared();
            sum_p += &op.p;
            sum_q += &op.q;
        }
    }
    let constants = reference.map(|r| {
        let hh = T::lit(spec.horizon.max(1) as f64);
        let complement = linalg::orth_complement(&r.kernel, n);
        let lambda_p_probed = probe_lambda(&r.p, &complement, spec.probes, rng);
        MeasuredConstants {
            sigma_p: (sq_p / hh).sqrt().as_f64(),
            delta_p: linalg::spectral_norm(&(sum_p / hh - &r.p)).as_f64(),
            sigma_q: (sq_q / hh).sqrt().as_f64(),
            delta_q: (sum_q / hh - &r.q).norm().as_f64(),
            big_lambda_p: linalg::spectral_norm(&r.p).as_f64(),
            big_lambda_q: r.q.norm().as_f64(),
            lambda_p: linalg::min_sym_eig_on(&r.p, &complement).map(|v| v.as_f64()),
            lambda_p_probed,
        }
    });
    Ok(RecursionReport { x_final: x, projected_errors: errors, constants, kernel_violations, kernel_drift })
}

/// Smallest `x^T P x / ‖x‖²` over random `x` in the span of `basis`.
pub fn probe_lambda<T: Scalar>(p: &DMatrix<T>, basis: &DMatrix<T>, probes: usize, rng: &mut dyn RngCore) -> Option<f64> {
    if probes == 0 || basis.ncols() == 0 {
        return None;
    }
    let mut best = f64::INFINITY;
    for _ in 0..probes {
        let c: DVector<T> = gaussian_vec(basis.ncols(), rng);
        let x = basis * c;
        let quotient = (x.dot(&(p * &x)) / x.norm_squared()).as_f64();
        best = best.min(quotient);
    }
    Some(best)
}

/// Settings for [`verify_recursion`].
#[derive(Debug, Clone, Serialize)]
pub struct StructureConfig {
    pub dim: usize,
    /// Horizon of the noiseless geometric-decay runs.
    pub horizon: usize,
    /// Horizon of the noisy runs (long enough to reach the floor).
    pub noisy_horizon: usize,
    pub trials: usize,
    pub sigma: f64,
    pub delta_q: f64,
    pub delta_p: f64,
    pub seed: u64,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self { dim: 8, horizon: 200, noisy_horizon: 200, trials: 1000, sigma: 0.2, delta_q: 0.2, delta_p: 0.0, seed: 2 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub lambda_p: f64,
    pub big_lambda_p: f64,
    pub beta: f64,
    /// `δ_P ≤ λ_P / 8`; when false the rate checks are skipped.
    pub precondition_holds: bool,
    pub checks: Vec<StructureCheck>,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Random symmetric matrix with eigenvalues drawn from `[lo, hi]`, except
/// for `null_dim` zero eigenvalues.
pub fn random_psd<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, null_dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let eig = DVector::from_fn(n, |i, _| if i < null_dim { 0.0 } else { lo + (hi - lo) * rng.random::<f64>() });
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

/// Structural checks of the recursion's convergence theorem on synthetic
/// systems: geometric decay without noise, a noise floor that scales with
/// `σ²`, and a bias floor that scales with `δ̄_q²`.
pub fn verify_recursion(config: &StructureConfig) -> Result<StructureReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.dim;
    let mut checks = Vec::new();

    let mut decay = |null_dim: usize, label: &str, rng: &mut ChaCha8Rng| -> Result<(f64, f64, f64)> {
        let p = random_psd(n, 0.5, 1.0, null_dim, rng);
        let x_star_part = p.clone() * gaussian_vec::<f64, _>(n, rng);
        let reference = Reference::new(p.clone(), x_star_part);
        let lambda = reference.lambda_p().unwrap_or(1.0);
        let big = linalg::spectral_norm(&p);
        let beta = lambda / big;
        let spec = RecursionSpec::new(beta, config.horizon).with_reference(reference.clone()).with_probes(200);
        let mut source = FixedSource::new(p, reference.q.clone());
        let x0 = gaussian_vec::<f64, _>(n, rng) * 3.0;
        let report = run(&spec, &mut source, x0, rng)?;
        let bound = 1.0 - beta * lambda / 4.0 + 1e-10;
        let floor = 1e-10 * report.projected_errors[0];
        let factor = report.max_step_factor(floor).unwrap_or(0.0);
        checks.push(StructureCheck { name: format!("noiseless decay factor ({label})"), passed: factor <= bound, measured: factor, threshold: bound });
        let last = *report.projected_errors.last().expect("reference set");
        checks.push(StructureCheck { name: format!("noiseless final error ({label})"), passed: last <= 1e-12, measured: last, threshold: 1e-12 });
        if null_dim > 0 {
            checks.push(StructureCheck {
                name: format!("kernel component invariant ({label})"),
                passed: report.kernel_drift <= 1e-12 && report.kernel_violations == 0,
                measured: report.kernel_drift,
                threshold: 1e-12,
            });
        }
        if let Some(c) = &report.constants {
            if let (Some(analytic), Some(probed)) = (c.lambda_p, c.lambda_p_probed) {
                checks.push(StructureCheck {
                    name: format!("probed curvature not below analytic ({label})"),
                    passed: probed >= analytic - 1e-9,
                    measured: probed,
                    threshold: analytic - 1e-9,
                });
            }
        }
        Ok((lambda, big, beta))
    };
    let (lambda_p, big_lambda_p, beta) = decay(0, "positive definite", &mut rng)?;
    decay(2, "singular", &mut rng)?;

    // Noisy phase on a singular system.
    let p = random_psd(n, 0.5, 1.0, 2, &mut rng);
    let q = &p * gaussian_vec::<f64, _>(n, &mut rng);
    let reference = Reference::new(p.clone(), q.clone());
    let lam = reference.lambda_p().unwrap_or(1.0);
    let big = linalg::spectral_norm(&p);
    let step = lam / big;
    let precondition_holds = config.delta_p <= lam / 8.0;

    if precondition_holds {
        let floor = |sigma: f64, delta_q: f64, rng: &mut ChaCha8Rng| -> Result<(f64, f64)> {
            let mut source = SyntheticSource::new(p.clone(), q.clone(), sigma, sigma, config.delta_p, delta_q, &mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xB1A5));
            let spec = RecursionSpec::new(step, config.noisy_horizon).with_reference(reference.clone());
            let mut mean_sq = 0.0;
            let mut mean_x = DVector::zeros(n);
            for _ in 0..config.trials {
                let r = run(&spec, &mut source, reference.x_star.clone(), rng)?;
                mean_sq += r.projected_errors.last().expect("reference set").powi(2);
                mean_x += &r.x_final;
            }
            let t = config.trials as f64;
            let bias = reference.projected_error(&(mean_x / t)).powi(2);
            Ok((mean_sq / t, bias))
        };
        let (full, _) = floor(config.sigma, 0.0, &mut rng)?;
        let (half, _) = floor(config.sigma / 2.0, 0.0, &mut rng)?;
        let ratio = half / full;
        checks.push(StructureCheck { name: "noise floor ratio when σ is halved".into(), passed: ratio <= 0.6, measured: ratio, threshold: 0.6 });

        let small = config.sigma / 4.0;
        let (_, bias_full) = floor(small, config.delta_q, &mut rng)?;
        let (_, bias_half) = floor(small, config.delta_q / 2.0, &mut rng)?;
        let ratio = bias_half / bias_full;
        checks.push(StructureCheck { name: "bias floor ratio when δ̄_q is halved".into(), passed: ratio <= 0.35, measured: ratio, threshold: 0.35 });
    }
    Ok(StructureReport { lambda_p, big_lambda_p, beta, precondition_holds, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_system_converges_in_one_step() {
        let q0 = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let mut source = FixedSource::new(DMatrix::identity(3, 3), q0.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run(&RecursionSpec::new(1.0, 1), &mut source, DVector::zeros(3), &mut rng).unwrap();
        assert_eq!(r.x_final, q0);
    }

    #[test]
    fn pd_contraction_bound_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_psd(6, 0.5, 1.0, 0, &mut rng);
        let q = DVector::from_fn(6, |i, _| i as f64);
        let reference = Reference::new(p.clone(), q.clone());
        let lambda = reference.lambda_p().unwrap();
        let big = linalg::spectral_norm(&p);
        let beta = lambda / big;
        let spec = RecursionSpec::new(beta, 60).with_reference(reference);
        let x0 = DVector::from_element(6, 5.0);
        let r = run(&spec, &mut FixedSource::new(p, q), x0, &mut rng).unwrap();
        let e0 = r.projected_errors[0];
        for (h, e) in r.projected_errors.iter().enumerate() {
            assert!(*e <= (1.0 - beta * lambda).powi(h as i32) * e0 + 1e-12);
        }
    }

    #[test]
    fn kernel_component_is_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_psd(5, 0.5, 1.0, 2, &mut rng);
        let q = &p * DVector::from_element(5, 1.0);
        let reference = Reference::new(p.clone(), q.clone());
        let kernel = reference.kernel.clone();
        let spec = RecursionSpec::new(0.5, 50).with_reference(reference);
        let x0 = DVector::from_fn(5, |i, _| (i as f64) - 2.0);
        let mut source = SyntheticSource::new(p, q, 0.3, 0.3, 0.0, 0.0, &mut rng);
        let r = run(&spec, &mut source, x0.clone(), &mut rng).unwrap();
        assert_eq!(r.kernel_violations, 0);
        assert!(r.kernel_drift <= 1e-12);
        assert_abs_diff_eq!(kernel.transpose() * &r.x_final, kernel.transpose() * x0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_iterates_abort() {
        let mut source = FixedSource::new(DMatrix::from_element(1, 1, -1e300), DVector::from_element(1, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run(&RecursionSpec::new(1e10, 10), &mut source, DVector::from_element(1, 1.0), &mut rng);
        assert!(matches!(r, Err(Error::NonFiniteIterate { .. })));
    }

    #[test]
    fn measured_constants_track_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_psd(4, 0.5, 1.0, 0, &mut rng);
        let q = DVector::from_element(4, 1.0);
        let reference = Reference::new(p.clone(), q.clone());
        let spec = RecursionSpec::new(0.5, 2000).with_reference(reference).with_probes(500);
        let mut source = SyntheticSource::new(p, q, 0.0, 0.0, 0.05, 0.1, &mut rng);
        let r = run(&spec, &mut source, DVector::zeros(4), &mut rng).unwrap();
        let c = r.constants.unwrap();
        assert_abs_diff_eq!(c.delta_p, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(c.delta_q, 0.1, epsilon = 1e-12);
        assert!(c.lambda_p_probed.unwrap() >= c.lambda_p.unwrap() - 1e-9);
    }

    #[test]
    fn recursion_structure_holds() {
        let config = StructureConfig { trials: 300, ..StructureConfig::default() };
        let report = verify_recursion(&config).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}: {} vs {}", c.name, c.measured, c.threshold);
        }
        assert!(report.precondition_holds);
    }

    #[test]
    fn large_operator_bias_skips_rate_checks() {
        let config = StructureConfig { delta_p: 1.0, trials: 10, ..StructureConfig::default() };
        let report = verify_recursion(&config).unwrap();
        assert!(!report.precondition_holds);
        assert!(report.checks.iter().all(|c| !c.name.contains("floor")));
    }
}
