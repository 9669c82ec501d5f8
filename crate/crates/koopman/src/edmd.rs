//! EDMD identification of the Koopman matrix and realization extraction.
//!
//! Given snapshots `(p_k, q_k, u_k)` one sample period apart under a held
//! input, [`fit_koopman`] solves the (optionally ridge-regularized) least
//! squares problem
//!
//! ```text
//! K = argmin sum_k ‖Kᵀ psi(p_k, u_k) − psi(q_k, u_k)‖² + ridge ‖K‖_F²
//! ```
//!
//! Each column of `K` is an independent regression, so the whole fit reduces
//! to one factorization with `M` right-hand sides. Small dictionaries go
//! through Gram normal equations + Cholesky; larger ones (`M > 200`) use a
//! QR factorization of the stacked data matrix for conditioning.
//!
//! From the fitted matrix, [`extract_linear`], [`extract_bilinear`] and
//! [`extract_nonlinear`] read realization blocks straight out of `Kᵀ`, and
//! [`continuous_generator`] converts the discrete transition into a
//! continuous-time generator through the principal matrix logarithm.

use crate::basis::{Basis, BasisFamily};
use crate::error::{Error, Result};
use crate::matfun;
use crate::model::{ModelBilinear, ModelLinear, ModelNonlinear};
use crate::plant::SnapshotDataset;
use nalgebra::DMatrix;

/// Dictionary size above which the fit switches from normal equations to a
/// QR factorization of the stacked data matrix.
pub const NORMAL_EQUATIONS_LIMIT: usize = 200;

/// Ridge regularization policy for [`fit_koopman`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `1e-8 * trace(Gram) / M`: negligible bias, guards rank deficiency.
    Auto,
    /// Fixed non-negative weight (0 disables regularization).
    Fixed(f64),
}

/// Fitted discrete-time Koopman matrix over a dictionary.
///
/// Convention: `psi(q, u) ≈ k_tsᵀ psi(p, u)`, i.e. the stored matrix acts on
/// lifted states through its transpose, matching the least-squares objective
/// above.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanMatrix {
    pub k_ts: DMatrix<f64>,
    pub ts: f64,
    pub basis: Basis,
    /// Ridge weight actually used by the solve.
    pub ridge: f64,
}

impl KoopmanMatrix {
    /// Dictionary size `M`.
    pub fn dim(&self) -> usize {
        self.k_ts.nrows()
    }

    /// The transition matrix `k_tsᵀ` whose rows map a lifted state to the
    /// next value of each dictionary entry.
    pub fn transition(&self) -> DMatrix<f64> {
        self.k_ts.transpose()
    }
}

/// Continuous-time generator recovered from a discrete Koopman matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    pub kc: DMatrix<f64>,
    /// Sampling period of the discrete matrix this came from.
    pub ts: f64,
}

/// Build the lifted data matrices `Psi_p` and `Psi_q` (rows are lifted
/// snapshots).
fn lift_dataset(dataset: &SnapshotDataset, basis: &Basis) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = dataset.len();
    let m_dim = basis.dim();
    let mut psi_p = DMatrix::zeros(k, m_dim);
    let mut psi_q = DMatrix::zeros(k, m_dim);
    for (row, snap) in dataset.snapshots.iter().enumerate() {
        let lp = basis.lift(snap.p.as_slice(), snap.u.as_slice())?;
        let lq = basis.lift(snap.q.as_slice(), snap.u.as_slice())?;
        psi_p.row_mut(row).copy_from(&lp.transpose());
        psi_q.row_mut(row).copy_from(&lq.transpose());
    }
    Ok((psi_p, psi_q))
}

fn resolve_ridge(ridge: Ridge, psi_p: &DMatrix<f64>) -> Result<f64> {
    match ridge {
        Ridge::Auto => {
            // trace(Psi^T Psi) = ‖Psi‖_F².
            let gram_trace = psi_p.iter().map(|v| v * v).sum::<f64>();
            Ok(1e-8 * gram_trace / psi_p.ncols() as f64)
        }
        Ridge::Fixed(v) => {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid("ridge must be finite and >= 0".into()));
            }
            Ok(v)
        }
    }
}

/// Normal-equations route: `(Psi_pᵀ Psi_p + λI) K = Psi_pᵀ Psi_q`.
fn solve_normal(psi_p: &DMatrix<f64>, psi_q: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let m_dim = psi_p.ncols();
    let mut gram = psi_p.transpose() * psi_p;
    for i in 0..m_dim {
        gram[(i, i)] += lambda;
    }
    let rhs = psi_p.transpose() * psi_q;
    let chol = nalgebra::linalg::Cholesky::new(gram).ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&rhs))
}

/// QR route on the stacked matrix `[Psi_p; sqrt(λ) I]`.
fn solve_qr(psi_p: &DMatrix<f64>, psi_q: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let k = psi_p.nrows();
    let m_dim = psi_p.ncols();
    let extra = if lambda > 0.0 { m_dim } else { 0 };
    if k + extra < m_dim {
        return Err(Error::RankDeficient);
    }
    let mut stacked = DMatrix::zeros(k + extra, m_dim);
    stacked.rows_mut(0, k).copy_from(psi_p);
    if extra > 0 {
        let sqrt_l = lambda.sqrt();
        for i in 0..m_dim {
            stacked[(k + i, i)] = sqrt_l;
        }
    }
    let mut rhs = DMatrix::zeros(k + extra, m_dim);
    rhs.rows_mut(0, k).copy_from(psi_q);
    let qr = stacked.qr();
    let r = qr.r();
    // Rank check on the triangular factor.
    let max_diag = (0..m_dim).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let min_diag = (0..m_dim).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_diag > 1e-12 * max_diag.max(1e-300)) {
        return Err(Error::RankDeficient);
    }
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, m_dim).into_owned();
    r.solve_upper_triangular(&top).ok_or(Error::RankDeficient)
}

/// Fit the Koopman matrix from snapshots over a dictionary.
pub fn fit_koopman(dataset: &SnapshotDataset, basis: &Basis, ridge: Ridge) -> Result<KoopmanMatrix> {
    if dataset.is_empty() {
        return Err(Error::EmptyData("snapshot dataset".into()));
    }
    if !(dataset.ts.is_finite() && dataset.ts > 0.0) {
        return Err(Error::Invalid("dataset sample period must be > 0".into()));
    }
    let (psi_p, psi_q) = lift_dataset(dataset, basis)?;
    let lambda = resolve_ridge(ridge, &psi_p)?;
    let k_ts = if basis.dim() > NORMAL_EQUATIONS_LIMIT {
        solve_qr(&psi_p, &psi_q, lambda)?
    } else {
        solve_normal(&psi_p, &psi_q, lambda)?
    };
    Ok(KoopmanMatrix {
        k_ts,
        ts: dataset.ts,
        basis: basis.clone(),
        ridge: lambda,
    })
}

/// Mean squared one-step residual of the fitted matrix on a dataset:
/// `mean_k ‖k_tsᵀ psi(p_k,u_k) − psi(q_k,u_k)‖²`.
pub fn training_residual(k: &KoopmanMatrix, dataset: &SnapshotDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyData("snapshot dataset".into()));
    }
    let (psi_p, psi_q) = lift_dataset(dataset, &k.basis)?;
    let pred = &psi_p * &k.k_ts;
    let diff = pred - psi_q;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / dataset.len() as f64)
}

/// Convert the discrete matrix to its continuous-time generator
/// `Kc = log(K_Ts) / Ts` (principal branch), verifying the exponential
/// round-trip.
pub fn continuous_generator(k: &KoopmanMatrix) -> Result<GeneratorMatrix> {
    let log = matfun::logm(&k.k_ts)?;
    let kc = log / k.ts;
    let back = matfun::expm(&(&kc * k.ts))?;
    let rel = (&back - &k.k_ts).norm() / k.k_ts.norm();
    if rel > matfun::LOG_ROUNDTRIP_TOL {
        return Err(Error::Numerical(format!(
            "generator round-trip error {rel:.3e} exceeds {:.1e}",
            matfun::LOG_ROUNDTRIP_TOL
        )));
    }
    Ok(GeneratorMatrix { kc, ts: k.ts })
}

/// Output selector `C`: one unit entry per row picking the state projections
/// out of the lifted state.
fn output_selector(n: usize, n_lift: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n, n_lift);
    for i in 0..n {
        c[(i, i)] = 1.0;
    }
    c
}

/// Read the linear realization `(A, B, C)` out of a fitted matrix over a
/// linear-family dictionary.
pub fn extract_linear(k: &KoopmanMatrix) -> Result<ModelLinear> {
    if k.basis.family() != BasisFamily::Linear {
        return Err(Error::WrongFamily {
            expected: "linear",
            actual: k.basis.family().name(),
        });
    }
    let kt = k.transition();
    let m = k.basis.input_dim();
    let n_lift = k.basis.state_monomial_count();
    let a = kt.view((0, 0), (n_lift, n_lift)).into_owned();
    let b = kt.view((0, n_lift), (n_lift, m)).into_owned();
    let c = output_selector(k.basis.state_dim(), n_lift);
    Ok(ModelLinear {
        a,
        b,
        c,
        basis: k.basis.clone(),
        ts: k.ts,
    })
}

/// Read the bilinear realization `(A, {H_j}, B, C)` out of a fitted matrix
/// over a bilinear-family dictionary. The dictionary's `u_j` blocks are the
/// state monomials times `u_j`; the column of each block that corresponds to
/// `constant * u_j` is the plain input channel, so it is carved out as
/// column `j` of `B` and zeroed inside `H_j`.
pub fn extract_bilinear(k: &KoopmanMatrix) -> Result<ModelBilinear> {
    if k.basis.family() != BasisFamily::Bilinear {
        return Err(Error::WrongFamily {
            expected: "bilinear",
            actual: k.basis.family().name(),
        });
    }
    let kt = k.transition();
    let m = k.basis.input_dim();
    let n_lift = k.basis.state_monomial_count();
    let const_idx = k.basis.constant_index();
    let a = kt.view((0, 0), (n_lift, n_lift)).into_owned();
    let mut b = DMatrix::zeros(n_lift, m);
    let mut h = Vec::with_capacity(m);
    for j in 0..m {
        let mut hj = kt
            .view((0, n_lift * (j + 1)), (n_lift, n_lift))
            .into_owned();
        b.set_column(j, &hj.column(const_idx).into_owned());
        hj.column_mut(const_idx).fill(0.0);
        h.push(hj);
    }
    let c = output_selector(k.basis.state_dim(), n_lift);
    Ok(ModelBilinear {
        a,
        h,
        b,
        c,
        basis: k.basis.clone(),
        ts: k.ts,
    })
}

/// Read the nonlinear predictor (output rows of `Kᵀ`) out of a fitted matrix
/// over a nonlinear-family dictionary.
pub fn extract_nonlinear(k: &KoopmanMatrix) -> Result<ModelNonlinear> {
    if k.basis.family() != BasisFamily::Nonlinear {
        return Err(Error::WrongFamily {
            expected: "nonlinear",
            actual: k.basis.family().name(),
        });
    }
    let kt = k.transition();
    let c_psi = kt.rows(0, k.basis.state_dim()).into_owned();
    Ok(ModelNonlinear {
        c_psi,
        basis: k.basis.clone(),
        ts: k.ts,
    })
}
