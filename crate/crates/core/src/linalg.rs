//! Small dense helpers on top of nalgebra: real eigenvalues with an
//! iteration cap, complex solves and null vectors, polynomial roots.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

const SCHUR_MAX_ITER: usize = 10_000;

/// Eigenvalues of a real square matrix, conjugate pairs adjacent.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input"));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(Error::EigenNonConvergence(n))?;
    let mut out: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    // exact conjugate symmetry for pairs coming out of 2x2 blocks
    for z in out.iter_mut() {
        if z.im.abs() <= 1e-14 * z.norm().max(1.0) {
            z.im = 0.0;
        }
    }
    sort_spectrum(&mut out);
    Ok(out)
}

/// Deterministic ordering: descending real part, then descending imaginary part.
pub fn sort_spectrum(v: &mut [Complex64]) {
    v.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal))
    });
}

pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Solves `m x = rhs` for complex `m`; `None` when singular.
pub fn solve_complex(m: &DMatrix<Complex64>, rhs: &DMatrix<Complex64>) -> Option<DMatrix<Complex64>> {
    m.clone().lu().solve(rhs)
}

pub fn inverse_complex(m: &DMatrix<Complex64>) -> Option<DMatrix<Complex64>> {
    m.clone().try_inverse()
}

/// Unit vector spanning the (numerical) null space of `m`, from the right
/// singular vector of the smallest singular value.
pub fn null_vector(m: &DMatrix<Complex64>) -> DVector<Complex64> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    vt.row(imin).transpose().map(|z| z.conj())
}

/// Evaluates a polynomial with coefficients ordered highest degree first.
pub fn polyval(coeffs: &[f64], s: Complex64) -> Complex64 {
    coeffs.iter().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
}

fn polyval_with_derivative(coeffs: &[f64], s: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs {
        dp = dp * s + p;
        p = p * s + c;
    }
    (p, dp)
}

/// Roots of a real polynomial (highest degree first). Leading coefficients
/// that vanish relative to the largest one are dropped, so a degenerate
/// leading term yields a lower-degree root set. Companion-matrix eigenvalues
/// are polished with a few Newton steps.
pub fn poly_roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Ok(Vec::new());
    }
    let first = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    let c = &coeffs[first..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Ok(Vec::new());
    }
    let lead = c[0];
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        comp[(0, j)] = -c[j + 1] / lead;
    }
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    let mut roots = eigenvalues(&comp)?;
    for r in roots.iter_mut() {
        let mut z = *r;
        for _ in 0..4 {
            let (p, dp) = polyval_with_derivative(c, z);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            let next = z - step;
            // keep the polish only when it reduces the residual
            if polyval(c, next).norm() < p.norm() {
                z = next;
            } else {
                break;
            }
        }
        if r.im == 0.0 {
            z.im = 0.0;
        }
        *r = z;
    }
    sort_spectrum(&mut roots);
    Ok(roots)
}

/// Real coefficients (highest first) of the monic polynomial with the given roots.
pub fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.iter().map(|z| z.re).collect()
}

/// Greedy matching distance between two root sets: for each element of
/// `a`, the relative distance to the closest unused element of `b`.
/// Returns `None` when the sets differ in size.
pub fn match_roots(a: &[Complex64], b: &[Complex64], abs_floor: f64) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for &x in a {
        let (j, dist) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, &y)| (j, (x - y).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        used[j] = true;
        let rel = dist / x.norm().max(abs_floor);
        worst = worst.max(rel);
    }
    Some(worst)
}

/// `c (sI - A)^{-1} b + d` for a single-input single-output channel.
pub fn channel_response(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
    d: f64,
    s: Complex64,
) -> Option<Complex64> {
    let n = a.nrows();
    let mut m = to_complex(a) * Complex64::new(-1.0, 0.0);
    for i in 0..n {
        m[(i, i)] += s;
    }
    let rhs = DMatrix::from_iterator(n, 1, b.iter().map(|&v| Complex64::new(v, 0.0)));
    let x = solve_complex(&m, &rhs)?;
    let y = c
        .iter()
        .zip(x.iter())
        .fold(Complex64::new(0.0, 0.0), |acc, (&ci, &xi)| acc + xi * ci);
    Some(y + d)
}
