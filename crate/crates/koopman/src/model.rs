//! Identified realizations and open-loop prediction scoring.
//!
//! Three realization shapes come out of the identification stage:
//!
//! * [`ModelLinear`] — `z+ = A z + B u`, `x = C z` on the lifted state
//!   `z = psi_state(x)`;
//! * [`ModelBilinear`] — `z+ = A z + sum_j H_j z u_j + B u`, `x = C z`;
//! * [`ModelNonlinear`] — `x+ = C_psi psi(x, u)` where the full dictionary
//!   is re-evaluated at every step.
//!
//! All three predict the plant *output* sequence from an initial output and
//! an input sequence; [`prediction_error`] scores those rollouts against
//! held-out plant episodes with a scale-free normalization (a predictor that
//! always answers zero scores exactly 1).

use crate::basis::{Basis, BasisFamily};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Linear realization on the lifted state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLinear {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub basis: Basis,
    pub ts: f64,
}

/// Bilinear realization on the lifted state; `h[j]` multiplies `z * u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBilinear {
    pub a: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub basis: Basis,
    pub ts: f64,
}

/// Nonlinear predictor: the output rows of the Koopman matrix applied to the
/// full lifting.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNonlinear {
    /// `n x M` coefficient matrix mapping `psi(x, u)` to the next output.
    pub c_psi: DMatrix<f64>,
    pub basis: Basis,
    pub ts: f64,
}

/// Any identified realization.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(ModelLinear),
    Bilinear(ModelBilinear),
    Nonlinear(ModelNonlinear),
}

fn check_finite(step: usize, x: &DVector<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

impl ModelLinear {
    /// Shape consistency against the stored basis.
    pub fn validate(&self) -> Result<()> {
        if self.basis.family() != BasisFamily::Linear {
            return Err(Error::WrongFamily {
                expected: "linear",
                actual: self.basis.family().name(),
            });
        }
        let n_lift = self.basis.state_monomial_count();
        let checks = [
            ("A rows", self.a.nrows(), n_lift),
            ("A cols", self.a.ncols(), n_lift),
            ("B rows", self.b.nrows(), n_lift),
            ("B cols", self.b.ncols(), self.basis.input_dim()),
            ("C rows", self.c.nrows(), self.basis.state_dim()),
            ("C cols", self.c.ncols(), n_lift),
        ];
        for (what, actual, expected) in checks {
            if actual != expected {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Lifted-space rollout from an arbitrary lifted state; returns the
    /// sequence of lifted states including `z0`. No re-lifting happens, so
    /// the trajectory is exactly linear in `z0` for a fixed input sequence.
    pub fn simulate_lifted(
        &self,
        z0: &DVector<f64>,
        u_seq: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        if z0.len() != self.a.nrows() {
            return Err(Error::Dimension {
                what: "lifted initial state".into(),
                expected: self.a.nrows(),
                actual: z0.len(),
            });
        }
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(z.clone());
        for (step, u) in u_seq.iter().enumerate() {
            z = &self.a * &z + &self.b * u;
            check_finite(step + 1, &z)?;
            out.push(z.clone());
        }
        Ok(out)
    }

    /// Roll the model out under an input sequence; returns `len(u_seq) + 1`
    /// outputs starting with `C psi_state(x0)`.
    pub fn simulate(&self, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut z = self.basis.lift_state(x0.as_slice())?;
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(&self.c * &z);
        for (step, u) in u_seq.iter().enumerate() {
            if u.len() != self.basis.input_dim() {
                return Err(Error::Dimension {
                    what: format!("input at step {step}"),
                    expected: self.basis.input_dim(),
                    actual: u.len(),
                });
            }
            z = &self.a * &z + &self.b * u;
            let x = &self.c * &z;
            check_finite(step + 1, &x)?;
            out.push(x);
        }
        Ok(out)
    }
}

impl ModelBilinear {
    pub fn validate(&self) -> Result<()> {
        if self.basis.family() != BasisFamily::Bilinear {
            return Err(Error::WrongFamily {
                expected: "bilinear",
                actual: self.basis.family().name(),
            });
        }
        let n_lift = self.basis.state_monomial_count();
        let m = self.basis.input_dim();
        if self.h.len() != m {
            return Err(Error::Dimension {
                what: "number of H blocks".into(),
                expected: m,
                actual: self.h.len(),
            });
        }
        let mut checks = vec![
            ("A rows", self.a.nrows(), n_lift),
            ("A cols", self.a.ncols(), n_lift),
            ("B rows", self.b.nrows(), n_lift),
            ("B cols", self.b.ncols(), m),
            ("C rows", self.c.nrows(), self.basis.state_dim()),
            ("C cols", self.c.ncols(), n_lift),
        ];
        for (j, h) in self.h.iter().enumerate() {
            let _ = j;
            checks.push(("H rows", h.nrows(), n_lift));
            checks.push(("H cols", h.ncols(), n_lift));
        }
        for (what, actual, expected) in checks {
            if actual != expected {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// One lifted transition `z+ = A z + sum_j H_j z u_j + B u`.
    pub fn step_lifted(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a * z + &self.b * u;
        for (j, h) in self.h.iter().enumerate() {
            next += (h * z) * u[j];
        }
        next
    }

    /// Lifted-space rollout from an arbitrary lifted state (see
    /// [`ModelLinear::simulate_lifted`]).
    pub fn simulate_lifted(
        &self,
        z0: &DVector<f64>,
        u_seq: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        if z0.len() != self.a.nrows() {
            return Err(Error::Dimension {
                what: "lifted initial state".into(),
                expected: self.a.nrows(),
                actual: z0.len(),
            });
        }
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(z.clone());
        for (step, u) in u_seq.iter().enumerate() {
            z = self.step_lifted(&z, u);
            check_finite(step + 1, &z)?;
            out.push(z.clone());
        }
        Ok(out)
    }

    pub fn simulate(&self, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut z = self.basis.lift_state(x0.as_slice())?;
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(&self.c * &z);
        for (step, u) in u_seq.iter().enumerate() {
            if u.len() != self.basis.input_dim() {
                return Err(Error::Dimension {
                    what: format!("input at step {step}"),
                    expected: self.basis.input_dim(),
                    actual: u.len(),
                });
            }
            z = self.step_lifted(&z, u);
            let x = &self.c * &z;
            check_finite(step + 1, &x)?;
            out.push(x);
        }
        Ok(out)
    }
}

impl ModelNonlinear {
    pub fn validate(&self) -> Result<()> {
        if self.basis.family() != BasisFamily::Nonlinear {
            return Err(Error::WrongFamily {
                expected: "nonlinear",
                actual: self.basis.family().name(),
            });
        }
        let checks = [
            ("coefficient rows", self.c_psi.nrows(), self.basis.state_dim()),
            ("coefficient cols", self.c_psi.ncols(), self.basis.dim()),
        ];
        for (what, actual, expected) in checks {
            if actual != expected {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn simulate(&self, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if x0.len() != self.basis.state_dim() {
            return Err(Error::Dimension {
                what: "initial output".into(),
                expected: self.basis.state_dim(),
                actual: x0.len(),
            });
        }
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(x.clone());
        for (step, u) in u_seq.iter().enumerate() {
            let psi = self.basis.lift(x.as_slice(), u.as_slice())?;
            x = &self.c_psi * psi;
            check_finite(step + 1, &x)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl Model {
    pub fn family(&self) -> BasisFamily {
        match self {
            Model::Linear(_) => BasisFamily::Linear,
            Model::Bilinear(_) => BasisFamily::Bilinear,
            Model::Nonlinear(_) => BasisFamily::Nonlinear,
        }
    }

    pub fn basis(&self) -> &Basis {
        match self {
            Model::Linear(m) => &m.basis,
            Model::Bilinear(m) => &m.basis,
            Model::Nonlinear(m) => &m.basis,
        }
    }

    pub fn ts(&self) -> f64 {
        match self {
            Model::Linear(m) => m.ts,
            Model::Bilinear(m) => m.ts,
            Model::Nonlinear(m) => m.ts,
        }
    }

    /// Dictionary size `M`.
    pub fn dim(&self) -> usize {
        self.basis().dim()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Linear(m) => m.validate(),
            Model::Bilinear(m) => m.validate(),
            Model::Nonlinear(m) => m.validate(),
        }
    }

    pub fn simulate(&self, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        match self {
            Model::Linear(m) => m.simulate(x0, u_seq),
            Model::Bilinear(m) => m.simulate(x0, u_seq),
            Model::Nonlinear(m) => m.simulate(x0, u_seq),
        }
    }
}

/// Open-loop rollout of any identified model.
pub fn simulate_model(
    model: &Model,
    x0: &DVector<f64>,
    u_seq: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    model.simulate(x0, u_seq)
}

/// One held-out trajectory of the true plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEpisode {
    pub x0: DVector<f64>,
    pub u_seq: Vec<DVector<f64>>,
    /// True outputs, `u_seq.len() + 1` entries starting with `x0`.
    pub x_true: Vec<DVector<f64>>,
}

impl PredictionEpisode {
    pub fn validate(&self) -> Result<()> {
        if self.x_true.len() != self.u_seq.len() + 1 {
            return Err(Error::Dimension {
                what: "episode trajectory length".into(),
                expected: self.u_seq.len() + 1,
                actual: self.x_true.len(),
            });
        }
        if self.x_true.is_empty() || self.u_seq.is_empty() {
            return Err(Error::EmptyData("prediction episode".into()));
        }
        Ok(())
    }
}

/// Multi-step prediction scores for one model over a set of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Mean Euclidean output error over all episodes and prediction steps.
    pub raw_mean_error: f64,
    /// `raw_mean_error` divided by the same mean for the all-zero predictor.
    pub normalized_error: f64,
    /// Mean error of the first prediction step only.
    pub one_step_raw: f64,
    /// One-step error under the same normalization.
    pub one_step_normalized: f64,
    /// Mean error per prediction step (index 0 = first step).
    pub per_step: Vec<f64>,
}

/// Score a model against held-out episodes. Errors are measured at steps
/// `1..=T` of each rollout (step 0 is the shared initial output) and
/// normalized by the error of the predictor that always answers zero, so a
/// value of 1 means "no better than predicting nothing".
pub fn prediction_error(model: &Model, episodes: &[PredictionEpisode]) -> Result<ErrorReport> {
    if episodes.is_empty() {
        return Err(Error::EmptyData("no validation episodes".into()));
    }
    let max_t = episodes.iter().map(|e| e.u_seq.len()).max().unwrap_or(0);
    let mut err_sum = 0.0;
    let mut base_sum = 0.0;
    let mut count = 0usize;
    let mut one_err = 0.0;
    let mut one_base = 0.0;
    let mut one_count = 0usize;
    let mut step_sum = vec![0.0; max_t];
    let mut step_count = vec![0usize; max_t];
    for episode in episodes {
        episode.validate()?;
        let pred = model.simulate(&episode.x0, &episode.u_seq)?;
        for t in 1..episode.x_true.len() {
            let err = (&pred[t] - &episode.x_true[t]).norm();
            let base = episode.x_true[t].norm();
            err_sum += err;
            base_sum += base;
            count += 1;
            step_sum[t - 1] += err;
            step_count[t - 1] += 1;
            if t == 1 {
                one_err += err;
                one_base += base;
                one_count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyData("episodes contain no prediction steps".into()));
    }
    let raw_mean_error = err_sum / count as f64;
    let baseline = base_sum / count as f64;
    if baseline <= 0.0 {
        return Err(Error::Invalid(
            "degenerate validation data: zero-response baseline is zero".into(),
        ));
    }
    let normalized_error = raw_mean_error / baseline;
    let one_step_raw = one_err / one_count as f64;
    let one_baseline = one_base / one_count as f64;
    let one_step_normalized = if one_baseline > 0.0 {
        one_step_raw / one_baseline
    } else {
        f64::INFINITY
    };
    let per_step = step_sum
        .iter()
        .zip(&step_count)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect();
    Ok(ErrorReport {
        raw_mean_error,
        normalized_error,
        one_step_raw,
        one_step_normalized,
        per_step,
    })
}
