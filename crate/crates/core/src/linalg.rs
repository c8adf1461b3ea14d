//! Dense linear-algebra helpers shared by the oracle and the recursion engine.
//!
//! Every rank decision goes through one rule: a singular value is treated as
//! zero when it is below [`PINV_CUTOFF`] times the largest singular value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result, Scalar};

/// Relative singular-value cutoff for pseudoinverses and null spaces.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Singular triplets `(σ, u, v)` of `m` with `σ` above the relative cutoff,
/// and the largest singular value.
///
/// Computed from the symmetric eigenproblem of `[[0, M], [M^T, 0]]`, whose
/// eigenpairs are `(±σ, [u; ±v]/√2)`. `nalgebra`'s bidiagonal SVD can return
/// factors that do not recompose the input on rank-deficient matrices with
/// clustered zero singular values; the symmetric solver does not.
struct Singular<T: Scalar> {
    largest: T,
    triplets: Vec<(T, DVector<T>, DVector<T>)>,
}

fn singular<T: Scalar>(m: &DMatrix<T>) -> Singular<T> {
    singular_scaled(m, T::zero())
}

/// As [`singular`], with the cutoff taken relative to `max(σ_max, scale)`.
fn singular_scaled<T: Scalar>(m: &DMatrix<T>, scale: T) -> Singular<T> {
    let (r, c) = m.shape();
    let mut aug = DMatrix::zeros(r + c, r + c);
    aug.view_mut((0, r), (r, c)).copy_from(m);
    aug.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = SymmetricEigen::new(aug);
    let largest = eig.eigenvalues.iter().copied().fold(T::zero(), |a, b| a.max(b));
    // Single precision cannot resolve the global cutoff; fall back to its epsilon.
    let floor = T::default_epsilon() * T::lit((r + c) as f64);
    let cut = largest.max(scale) * T::lit(PINV_CUTOFF).max(floor);
    let root2 = T::lit(2.0).sqrt();
    let mut triplets: Vec<(T, DVector<T>, DVector<T>)> = (0..r + c)
        .filter(|&k| eig.eigenvalues[k] > cut && eig.eigenvalues[k] > T::zero())
        .map(|k| {
            let w = eig.eigenvectors.column(k);
            (eig.eigenvalues[k], w.rows(0, r) * root2, w.rows(r, c) * root2)
        })
        .collect();
    triplets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    Singular { largest, triplets }
}

/// Moore-Penrose pseudoinverse with the global relative cutoff.
pub fn pinv<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(c, r);
    if r == 0 || c == 0 {
        return out;
    }
    for (s, u, v) in singular(m).triplets {
        out += (v * u.transpose()) / s;
    }
    out
}

/// Orthonormal basis (as columns) of the null space of `m`.
pub fn null_space<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    null_space_scaled(m, T::zero())
}

/// Null space with singular values below `PINV_CUTOFF * max(σ_max, scale)`
/// treated as zero. Use when `m` is a difference of terms of size `scale`,
/// so a matrix that is zero up to roundoff is not mistaken for full rank.
pub fn null_space_scaled<T: Scalar>(m: &DMatrix<T>, scale: T) -> DMatrix<T> {
    let c = m.ncols();
    if c == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m.nrows() == 0 {
        return DMatrix::identity(c, c);
    }
    let rows: Vec<DVector<T>> = singular_scaled(m, scale).triplets.into_iter().map(|(_, _, v)| v).collect();
    complement_of(&orthonormalize(&rows, c), c)
}

/// Orthonormal basis of the column space of `m`.
pub fn range_basis<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let r = m.nrows();
    if r == 0 || m.ncols() == 0 {
        return DMatrix::zeros(r, 0);
    }
    let cols: Vec<DVector<T>> = singular(m).triplets.into_iter().map(|(_, u, _)| u).collect();
    orthonormalize(&cols, r)
}

/// Complement of the span of orthonormal columns `q`, from the unit
/// eigenvalues of `I - Q Q^T`.
fn complement_of<T: Scalar>(q: &DMatrix<T>, n: usize) -> DMatrix<T> {
    if q.ncols() == 0 {
        return DMatrix::identity(n, n);
    }
    if q.ncols() >= n {
        return DMatrix::zeros(n, 0);
    }
    let eig = SymmetricEigen::new(DMatrix::identity(n, n) - q * q.transpose());
    let half = T::lit(0.5);
    let cols: Vec<DVector<T>> = (0..n)
        .filter(|&k| eig.eigenvalues[k] > half)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    orthonormalize(&cols, n)
}

/// Orthonormal basis of the orthogonal complement of `span(basis)` in `R^n`.
pub fn orth_complement<T: Scalar>(basis: &DMatrix<T>, n: usize) -> DMatrix<T> {
    if basis.ncols() == 0 {
        return DMatrix::identity(n, n);
    }
    null_space(&basis.transpose())
}

/// Modified Gram-Schmidt; drops vectors that are (numerically) dependent.
pub fn orthonormalize<T: Scalar>(vectors: &[DVector<T>], n: usize) -> DMatrix<T> {
    let mut out: Vec<DVector<T>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let proj = q.dot(&w);
                w -= q * proj;
            }
        }
        let norm = w.norm();
        if norm > T::tol(1e-9) {
            out.push(w / norm);
        }
    }
    if out.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&out)
    }
}

/// Orthogonal projector `Q Q^T` onto the span of orthonormal columns `q`.
pub fn projector<T: Scalar>(q: &DMatrix<T>) -> DMatrix<T> {
    if q.ncols() == 0 {
        return DMatrix::zeros(q.nrows(), q.nrows());
    }
    q * q.transpose()
}

/// Largest singular value (0 for empty matrices).
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 || m.ncols() == 0 {
        return T::zero();
    }
    singular(m).largest
}

/// Ratio of the largest to the smallest singular value of a square matrix.
pub fn condition_number<T: Scalar>(m: &DMatrix<T>) -> T {
    let s = singular(m);
    let full_rank = s.triplets.len() == m.nrows().min(m.ncols());
    match s.triplets.last() {
        Some(&(smin, _, _)) if full_rank => s.largest / smin,
        _ => T::max_value().unwrap_or(s.largest / T::default_epsilon()),
    }
}

/// Solves `a x = b` by LU, rejecting singular or non-finite results.
pub fn solve<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>, what: &str) -> Result<DVector<T>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::SingularSystem(format!("{what}: LU factorization is singular")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(format!("{what}: non-finite solution")));
    }
    Ok(x)
}

/// Eigenvalues of the symmetric matrix `m`, ascending.
pub fn sym_eigenvalues<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let sym = (m + m.transpose()) * T::lit(0.5);
    let mut ev: Vec<T> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Smallest eigenvalue of the symmetric part of `m` restricted to the span of
/// the orthonormal columns of `basis`; `None` when the subspace is trivial.
pub fn min_sym_eig_on<T: Scalar>(m: &DMatrix<T>, basis: &DMatrix<T>) -> Option<T> {
    if basis.ncols() == 0 {
        return None;
    }
    let restricted = basis.transpose() * m * basis;
    sym_eigenvalues(&restricted).first().copied()
}

/// Sine of the largest principal angle between two subspaces given by
/// orthonormal columns. Subspaces of different dimension are at angle π/2.
pub fn max_principal_angle_sin<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    if a.ncols() != b.ncols() {
        return T::one();
    }
    if a.ncols() == 0 {
        return T::zero();
    }
    let residual = b - a * (a.transpose() * b);
    spectral_norm(&residual).min(T::one())
}

/// Grid search for the step `β > 0` minimizing `max_i |1 − β μ_i|` over the
/// given eigenvalues. Returns `(β, radius)`; eigenvalues with nonpositive
/// real part make every positive step non-contracting.
pub fn fastest_step<T: Scalar>(eigenvalues: &[nalgebra::Complex<T>]) -> (T, T) {
    let radius = |beta: T| {
        eigenvalues
            .iter()
            .map(|mu| ((T::one() - beta * mu.re).powi(2) + (beta * mu.im).powi(2)).sqrt())
            .fold(T::zero(), |a, b| a.max(b))
    };
    let largest = eigenvalues.iter().map(|mu| mu.norm_sqr()).fold(T::zero(), |a, b| a.max(b));
    if largest == T::zero() {
        return (T::one(), T::one());
    }
    // |1 − βμ| < 1 requires β < 2 Re(μ)/|μ|², so 2/max|μ| bounds the search.
    let upper = T::lit(2.0) / largest.sqrt();
    let steps = 4000;
    let mut best = (upper / T::lit(steps as f64), radius(upper / T::lit(steps as f64)));
    for i in 1..=steps {
        let beta = upper * T::lit(i as f64 / steps as f64);
        let r = radius(beta);
        if r < best.1 {
            best = (beta, r);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pinv_of_rank_one_matches_hand_computation() {
        let f = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        let p = pinv(&f);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_abs_diff_eq!(p, expected, epsilon = 1e-12);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        let z = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(pinv(&z), DMatrix::zeros(2, 3));
    }

    #[test]
    fn null_space_of_rectangular_matrix() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let k = null_space(&m);
        assert_eq!(k.ncols(), 2);
        assert!((&m * &k).norm() < 1e-12);
        assert_abs_diff_eq!(k.transpose() * &k, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn null_space_of_zero_is_everything() {
        let k = null_space(&DMatrix::<f64>::zeros(3, 3));
        assert_eq!(k.ncols(), 3);
    }

    #[test]
    fn complement_and_range_agree() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let k = null_space(&m);
        let r = range_basis(&m.transpose());
        let c = orth_complement(&k, 3);
        assert!(max_principal_angle_sin(&r, &c) < 1e-12);
    }

    #[test]
    fn restricted_min_eig_skips_kernel() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        let basis = orth_complement(&null_space(&m), 2);
        assert_abs_diff_eq!(min_sym_eig_on(&m, &basis).unwrap(), 1.0, epsilon = 1e-12);
        assert!(min_sym_eig_on(&m, &DMatrix::zeros(2, 0)).is_none());
    }

    #[test]
    fn singular_solve_is_an_error() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve(&a, &b, "t"), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn fastest_step_for_real_spectrum() {
        let ev: Vec<nalgebra::Complex<f64>> = [0.5, 1.0].iter().map(|&x| nalgebra::Complex::new(x, 0.0)).collect();
        let (beta, r) = fastest_step(&ev);
        assert!((beta - 4.0 / 3.0).abs() < 1e-3);
        assert!((r - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn roundoff_residue_is_null_at_given_scale() {
        let m = DMatrix::from_element(1, 1, 1.4e-17);
        assert_eq!(null_space(&m).ncols(), 0);
        assert_eq!(null_space_scaled(&m, 1.0).ncols(), 1);
    }

    #[test]
    fn works_in_single_precision() {
        let f = DMatrix::from_row_slice(2, 2, &[0.25f32, -0.25, -0.25, 0.25]);
        let p = pinv(&f);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-5);
    }
}
