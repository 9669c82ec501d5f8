//! Dense matrix functions: exponential and principal logarithm.
//!
//! The logarithm is the workhorse here (it turns an identified discrete
//! transition matrix into a continuous-time generator). Two independent
//! routes are implemented:
//!
//! 1. complex Schur decomposition + triangular eigenvector back-substitution,
//!    i.e. `log A = V log(Lambda) V^-1` — fast and very accurate when the
//!    eigenbasis is well conditioned;
//! 2. inverse scaling-and-squaring: repeated principal square roots
//!    (product-form Denman–Beavers iteration) until the matrix is close to
//!    the identity, then Gauss–Legendre quadrature of
//!    `log(I + Y) = ∫_0^1 Y (I + tY)^-1 dt`, undone by powers of two —
//!    slower but robust to clustered or defective spectra.
//!
//! [`logm`] tries route 1, falls back to route 2, and *verifies* the winner
//! by exponentiating it back; if neither round-trips to the input within
//! `1e-8` relative Frobenius error, it reports a numerical failure rather
//! than returning a silently bad branch.
//!
//! The principal branch only exists when no eigenvalue lies on the closed
//! negative real axis; eigenvalues within `1e-12` of that axis (absolute
//! distance, including zero) are rejected up front with a domain error.

use crate::error::{Error, Result};
use nalgebra::{Complex, DMatrix};

type CMatrix = DMatrix<Complex<f64>>;

/// Absolute spectral distance to the closed negative real axis below which
/// the principal logarithm is refused.
pub const LOG_DOMAIN_TOL: f64 = 1e-12;

/// Relative Frobenius round-trip error `‖exp(log A) − A‖ / ‖A‖` above which
/// [`logm`] refuses to return a result.
pub const LOG_ROUNDTRIP_TOL: f64 = 1e-8;

/// Matrix exponential (Padé scaling-and-squaring via nalgebra).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension {
            what: "matrix exponential input columns".into(),
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    Ok(a.exp())
}

/// Principal matrix logarithm of a real square matrix.
///
/// Errors with a domain failure if any eigenvalue sits on (or within
/// [`LOG_DOMAIN_TOL`] of) the closed negative real axis, and with a
/// numerical failure if no route achieves the round-trip tolerance.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension {
            what: "matrix logarithm input columns".into(),
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    if a.is_empty() {
        return Err(Error::Invalid("matrix logarithm of an empty matrix".into()));
    }
    let (q, t) = schur_complex(a)?;
    check_log_domain(&t)?;

    let norm_a = a.norm();
    let residual = |x: &DMatrix<f64>| -> f64 {
        match expm(x) {
            Ok(back) => (back - a).norm() / norm_a,
            Err(_) => f64::INFINITY,
        }
    };

    let eig_result = log_via_eig(&q, &t).map(|x| {
        let r = residual(&x);
        (x, r)
    });
    if let Ok((x, r)) = &eig_result {
        if *r <= 1e-9 {
            return Ok(x.clone());
        }
    }
    let iss_result = log_via_iss(a).map(|x| {
        let r = residual(&x);
        (x, r)
    });
    let best = match (eig_result, iss_result) {
        (Ok(e), Ok(i)) => {
            if e.1 <= i.1 {
                e
            } else {
                i
            }
        }
        (Ok(e), Err(_)) => e,
        (Err(_), Ok(i)) => i,
        (Err(e), Err(_)) => return Err(e),
    };
    if best.1 <= LOG_ROUNDTRIP_TOL {
        Ok(best.0)
    } else {
        Err(Error::Numerical(format!(
            "matrix logarithm round-trip error {:.3e} exceeds {:.1e}",
            best.1, LOG_ROUNDTRIP_TOL
        )))
    }
}

/// Eigenvalues of a real square matrix, including complex pairs.
pub fn complex_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension {
            what: "eigenvalue input columns".into(),
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    let (_, t) = schur_complex(a)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

fn check_log_domain(t: &CMatrix) -> Result<()> {
    for i in 0..t.nrows() {
        let lambda = t[(i, i)];
        // Distance from the closed negative real axis {x <= 0, y = 0}:
        // right of the origin the closest axis point is the origin itself.
        let dist = if lambda.re > 0.0 {
            lambda.norm()
        } else {
            lambda.im.abs()
        };
        if dist <= LOG_DOMAIN_TOL {
            return Err(Error::LogDomain(format!(
                "eigenvalue {:.6e}{:+.6e}i lies within {:.0e} of the closed negative real axis",
                lambda.re, lambda.im, LOG_DOMAIN_TOL
            )));
        }
    }
    Ok(())
}

/// Real Schur decomposition refined to a *complex* triangular one:
/// returns unitary `Q` and upper-triangular `T` with `A = Q T Q^H`.
fn schur_complex(a: &DMatrix<f64>) -> Result<(CMatrix, CMatrix)> {
    let n = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("real Schur iteration did not converge".into()))?;
    let (q_re, t_re) = schur.unpack();
    let mut q = q_re.map(|v| Complex::new(v, 0.0));
    let mut t = t_re.map(|v| Complex::new(v, 0.0));
    // Rotate each 2x2 block (complex conjugate eigenvalue pair) into upper
    // triangular form with a 2x2 unitary similarity.
    let mut k = 0;
    while k + 1 < n {
        if t[(k + 1, k)].re == 0.0 {
            k += 1;
            continue;
        }
        let (ta, tb, tc, td) = (
            t[(k, k)].re,
            t[(k, k + 1)].re,
            t[(k + 1, k)].re,
            t[(k + 1, k + 1)].re,
        );
        let mu = 0.5 * (ta + td);
        let disc = 0.25 * (ta - td) * (ta - td) + tb * tc;
        if disc >= 0.0 {
            // Real eigenvalues inside a 2x2 block should not happen in a
            // converged real Schur form; treat defensively.
            return Err(Error::Numerical(
                "real Schur form left a non-rotated 2x2 block".into(),
            ));
        }
        let nu = (-disc).sqrt();
        let lambda = Complex::new(mu, nu);
        // Eigenvector (lambda - d, c) of the block for eigenvalue lambda.
        let v1 = lambda - Complex::new(td, 0.0);
        let v2 = Complex::new(tc, 0.0);
        let scale = (v1.norm_sqr() + v2.norm_sqr()).sqrt();
        let v1 = v1 / scale;
        let v2 = v2 / scale;
        // Unitary Z = [v, w] with w orthogonal to v.
        let w1 = -v2.conj();
        let w2 = v1.conj();
        // T <- Z^H T Z applied to the full rows/columns, Q <- Q Z.
        for r in 0..n {
            let c0 = t[(r, k)];
            let c1 = t[(r, k + 1)];
            t[(r, k)] = c0 * v1 + c1 * v2;
            t[(r, k + 1)] = c0 * w1 + c1 * w2;
        }
        for c in 0..n {
            let r0 = t[(k, c)];
            let r1 = t[(k + 1, c)];
            t[(k, c)] = v1.conj() * r0 + v2.conj() * r1;
            t[(k + 1, c)] = w1.conj() * r0 + w2.conj() * r1;
        }
        for r in 0..n {
            let c0 = q[(r, k)];
            let c1 = q[(r, k + 1)];
            q[(r, k)] = c0 * v1 + c1 * v2;
            q[(r, k + 1)] = c0 * w1 + c1 * w2;
        }
        t[(k + 1, k)] = Complex::new(0.0, 0.0);
        k += 2;
    }
    // Zero the strictly lower triangle (numerically negligible leftovers).
    for r in 1..n {
        for c in 0..r {
            t[(r, c)] = Complex::new(0.0, 0.0);
        }
    }
    Ok((q, t))
}

/// Route 1: `log A = V log(Lambda) V^-1` with eigenvectors obtained by
/// back-substitution on the complex triangular factor.
fn log_via_eig(q: &CMatrix, t: &CMatrix) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    // Eigenvectors of T: column k solves (T - lambda_k I) v = 0 with
    // v_k = 1 and zeros below.
    let mut vt = CMatrix::zeros(n, n);
    let scale: f64 = (0..n).map(|i| t[(i, i)].norm()).fold(0.0, f64::max);
    for k in 0..n {
        let lambda = t[(k, k)];
        vt[(k, k)] = Complex::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut acc = Complex::new(0.0, 0.0);
            for j in (i + 1)..=k {
                acc += t[(i, j)] * vt[(j, k)];
            }
            let denom = t[(i, i)] - lambda;
            if denom.norm() <= 1e-13 * scale.max(1.0) {
                return Err(Error::Numerical(
                    "clustered eigenvalues defeat the eigenvector route".into(),
                ));
            }
            vt[(i, k)] = -acc / denom;
        }
        // Normalize for conditioning.
        let norm = vt.column(k).norm();
        for i in 0..=k {
            vt[(i, k)] /= Complex::new(norm, 0.0);
        }
    }
    let v = q * &vt;
    let mut w = v.clone();
    for k in 0..n {
        let log_lambda = t[(k, k)].ln();
        for i in 0..n {
            w[(i, k)] *= log_lambda;
        }
    }
    // X = W V^-1  <=>  V^T X^T = W^T.
    let lu = v.transpose().lu();
    let xt = lu
        .solve(&w.transpose())
        .ok_or_else(|| Error::Numerical("singular eigenvector matrix".into()))?;
    let x = xt.transpose();
    let re = x.map(|z| z.re);
    let im_norm = x.map(|z| z.im).norm();
    if im_norm > 1e-8 * re.norm().max(1.0) {
        return Err(Error::Numerical(
            "eigenvector route produced a non-real logarithm".into(),
        ));
    }
    Ok(re)
}

/// Principal matrix square root by the product-form Denman–Beavers
/// iteration.
fn sqrtm_db(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut m = a.clone();
    let mut y = a.clone();
    for _ in 0..100 {
        let m_inv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in matrix square root".into()))?;
        y = 0.5 * &y * (&eye + &m_inv);
        m = 0.5 * (&eye + 0.5 * (&m + &m_inv));
        let err = (&m - &eye).norm();
        if err <= 1e-14 * (n as f64).sqrt().max(1.0) {
            return Ok(y);
        }
    }
    // Accept slow convergence only if the result is still a decent root.
    let back = &y * &y;
    if (back - a).norm() <= 1e-10 * a.norm().max(1.0) {
        Ok(y)
    } else {
        Err(Error::Numerical(
            "Denman–Beavers square root did not converge".into(),
        ))
    }
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|c| a.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Nodes and weights of `m`-point Gauss–Legendre quadrature on `[0, 1]`,
/// computed by Newton iteration on the Legendre polynomial.
fn gauss_legendre_01(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        // Initial guess (Chebyshev-like) on [-1, 1].
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_m(x) and P'_m(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=m {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        // Weight on [-1, 1], then map to [0, 1].
        let mut p0 = 1.0;
        let mut p1 = x;
        for k in 2..=m {
            let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = pk;
        }
        let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Route 2: inverse scaling and squaring.
fn log_via_iss(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut squarings = 0u32;
    while one_norm(&(&x - &eye)) > 0.3 {
        if squarings >= 60 {
            return Err(Error::Numerical(
                "inverse scaling-and-squaring failed to contract to the identity".into(),
            ));
        }
        x = sqrtm_db(&x)?;
        squarings += 1;
    }
    let y = &x - &eye;
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for (node, weight) in gauss_legendre_01(12) {
        let shifted = &eye + node * &y;
        let inv = shifted
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular quadrature node".into()))?;
        acc += weight * (&y * inv);
    }
    Ok(acc * 2f64.powi(squarings as i32))
}
