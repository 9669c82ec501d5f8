//! Koopman model predictive control and the closed-loop harness.
//!
//! Three controllers share one quadratic cost
//!
//! ```text
//! J(u) = sum_{t=1}^{N_h} w_ee ‖S x[t] − r[t]‖² + w_u ‖u[t−1]‖²
//! ```
//!
//! over a horizon of `N_h` steps, where `S` selects the tracked output
//! components (the end-effector coordinates for the arm).
//!
//! * **K-MPC** rolls the lifted *linear* model forward, condenses the
//!   prediction into an unconstrained strictly convex quadratic in the
//!   stacked inputs, and solves it with one Cholesky back-substitution. The
//!   prediction matrices depend only on the model, so they are factored once
//!   per controller.
//! * **K-BMPC** freezes the current lifted state `z0` in the bilinear terms,
//!   giving an effective input matrix `B̃(z0) = B + [H_1 z0 | … | H_m z0]`,
//!   then runs the *same* condensed solve with `(A, B̃)`. The `A`-dependent
//!   prediction chain is shared across steps; only the small
//!   `B̃`-dependent factors are rebuilt per solve. With all `H_j = 0` it
//!   reduces to K-MPC exactly (identical code path).
//! * **K-NMPC** single-shoots the nonlinear predictor and minimizes the same
//!   cost with Gauss-Newton plus Levenberg damping, using the analytic
//!   lifting Jacobians. Local optimum only; warm-started by shifting the
//!   previous solution.
//!
//! [`run_closed_loop`] drives the simulated arm with any controller,
//! timing only the solver (plant integration is outside the clock) and
//! recording a per-step log.

use crate::error::{Error, Result};
use crate::model::{ModelBilinear, ModelLinear, ModelNonlinear};
use crate::plant::{forward_kinematics, plant_step, ArmParameters, PlantState};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use std::time::Instant;

/// Gradient-norm threshold that terminates the Gauss-Newton iteration.
pub const NMPC_GRADIENT_TOL: f64 = 1e-8;

/// Shared controller configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Prediction horizon in control steps.
    pub horizon: usize,
    /// Weight on the squared tracking error.
    pub weight_ee: f64,
    /// Weight on the squared input magnitude.
    pub weight_u: f64,
    /// Control period; must match the model's sample period.
    pub ts: f64,
    /// Gauss-Newton iteration cap for K-NMPC.
    pub nmpc_max_iters: usize,
    /// Initial/minimum Levenberg damping for K-NMPC.
    pub nmpc_damping: f64,
    /// Indices of the tracked components of the model state (the
    /// end-effector coordinates of the arm by default).
    pub tracked: Vec<usize>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            weight_ee: 1.0,
            weight_u: 1e-3,
            ts: 0.05,
            nmpc_max_iters: 30,
            nmpc_damping: 1e-6,
            tracked: vec![4, 5],
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be >= 1".into()));
        }
        if !(self.weight_ee.is_finite() && self.weight_ee > 0.0) {
            return Err(Error::Invalid("weight_ee must be > 0".into()));
        }
        if !(self.weight_u.is_finite() && self.weight_u > 0.0) {
            return Err(Error::Invalid("weight_u must be > 0".into()));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::Invalid("control period must be > 0".into()));
        }
        if self.nmpc_max_iters == 0 {
            return Err(Error::Invalid("nmpc_max_iters must be >= 1".into()));
        }
        if !(self.nmpc_damping.is_finite() && self.nmpc_damping > 0.0) {
            return Err(Error::Invalid("nmpc_damping must be > 0".into()));
        }
        if self.tracked.is_empty() {
            return Err(Error::Invalid("tracked output set must be non-empty".into()));
        }
        Ok(())
    }

    fn check_model_ts(&self, model_ts: f64) -> Result<()> {
        if (self.ts - model_ts).abs() > 1e-12 * self.ts.max(model_ts) {
            return Err(Error::Invalid(format!(
                "controller period {} does not match model period {}",
                self.ts, model_ts
            )));
        }
        Ok(())
    }

    fn check_tracked(&self, n: usize) -> Result<()> {
        for &i in &self.tracked {
            if i >= n {
                return Err(Error::Dimension {
                    what: "tracked output index".into(),
                    expected: n,
                    actual: i,
                });
            }
        }
        Ok(())
    }
}

/// Planar reference curve sampled at the control period.
///
/// `samples[k]` is the target for the output *after* control step `k`, i.e.
/// it sits at time `(k+1)·ts` along the curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub ts: f64,
    pub samples: Vec<Vector2<f64>>,
}

impl ReferenceTrajectory {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.ts
    }

    /// Every sample must stay inside the arm's reachable disc. Points on
    /// the boundary itself (like the hanging rest position) pass: the check
    /// carries a 1e-9 m slack so exact-radius references survive float
    /// rounding of the reach.
    pub fn validate(&self, reach: f64) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyData("reference trajectory".into()));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::Invalid("reference period must be > 0".into()));
        }
        for s in &self.samples {
            if s.norm() > reach + 1e-9 {
                return Err(Error::OutOfReach {
                    x: s.x,
                    y: s.y,
                    reach,
                });
            }
        }
        Ok(())
    }

    /// Reference window for the controller at step `start`: `n` samples,
    /// padded by holding the final sample past the end of the trajectory.
    pub fn window(&self, start: usize, n: usize) -> Vec<DVector<f64>> {
        let last = *self.samples.last().expect("validated non-empty");
        (0..n)
            .map(|k| {
                let s = self.samples.get(start + k).copied().unwrap_or(last);
                DVector::from_column_slice(&[s.x, s.y])
            })
            .collect()
    }
}

/// Unit-frame vertices of the block letter M, drawn in four strokes:
/// bottom-left, top-left, middle valley, top-right, bottom-right.
const BLOCK_M_VERTICES: [[f64; 2]; 5] = [
    [-0.5, -0.5],
    [-0.5, 0.5],
    [0.0, 0.0],
    [0.5, 0.5],
    [0.5, -0.5],
];

/// Constant-speed traversal of a block letter M.
///
/// The polyline is scaled by `scale`, centered at `center`, and traversed at
/// `arc length / duration`, starting from whichever end of the letter lies
/// nearer the hanging end-effector position `(0, -0.99)`. Produces
/// `round(duration / ts)` samples; `samples[k]` sits `(k+1)·ts` into the
/// traversal, so the final sample is exactly the far end of the letter.
pub fn block_m_reference(
    scale: f64,
    center: (f64, f64),
    duration: f64,
    ts: f64,
) -> Result<ReferenceTrajectory> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::Invalid("reference scale must be >= 0".into()));
    }
    if !(duration.is_finite() && duration > 0.0 && ts.is_finite() && ts > 0.0) {
        return Err(Error::Invalid("duration and ts must be > 0".into()));
    }
    let count = (duration / ts).round() as usize;
    if count == 0 {
        return Err(Error::Invalid("duration shorter than one period".into()));
    }
    let reach = ArmParameters::default().reach();
    let mut vertices: Vec<Vector2<f64>> = BLOCK_M_VERTICES
        .iter()
        .map(|[x, y]| Vector2::new(center.0 + scale * x, center.1 + scale * y))
        .collect();
    for v in &vertices {
        if v.norm() > reach + 1e-9 {
            return Err(Error::OutOfReach {
                x: v.x,
                y: v.y,
                reach,
            });
        }
    }
    // Start from the end of the letter closest to the hanging end effector.
    let hanging = Vector2::new(0.0, -reach);
    let first = vertices.first().expect("fixed vertex set");
    let last = vertices.last().expect("fixed vertex set");
    if (last - hanging).norm() < (first - hanging).norm() {
        vertices.reverse();
    }
    let seg_lengths: Vec<f64> = vertices
        .windows(2)
        .map(|w| (w[1] - w[0]).norm())
        .collect();
    let total: f64 = seg_lengths.iter().sum();
    let point_at = |s: f64| -> Vector2<f64> {
        if total == 0.0 {
            return vertices[0];
        }
        let mut rem = s.clamp(0.0, total);
        for (seg, len) in seg_lengths.iter().enumerate() {
            if rem <= *len || seg == seg_lengths.len() - 1 {
                let frac = if *len > 0.0 { rem / len } else { 0.0 };
                return vertices[seg] + (vertices[seg + 1] - vertices[seg]) * frac.min(1.0);
            }
            rem -= len;
        }
        *vertices.last().expect("fixed vertex set")
    };
    let speed = total / duration;
    let samples = (0..count)
        .map(|k| point_at(speed * ts * (k + 1) as f64))
        .collect();
    let traj = ReferenceTrajectory { ts, samples };
    traj.validate(reach)?;
    Ok(traj)
}

/// Input-independent part of the condensed prediction `Y = G z0 + Θ U`,
/// with `Y` the stacked tracked outputs over the horizon and `U` the stacked
/// inputs: the chain `S C Aᵗ` and its stacking `G`. The chain depends only
/// on the lifted transition matrix, so K-MPC builds it once per controller
/// and K-BMPC shares it across steps, rebuilding only the input-dependent
/// factors around each frozen lifted state.
struct PredictionPrefix {
    /// `sc_a[t] = S C Aᵗ` for `t = 0..=horizon`.
    sc_a: Vec<DMatrix<f64>>,
    /// Free-response map: stacked `sc_a[1..=horizon]`.
    g: DMatrix<f64>,
    horizon: usize,
    n_tracked: usize,
    weight_ee: f64,
}

impl PredictionPrefix {
    fn build(a: &DMatrix<f64>, s_c: &DMatrix<f64>, cfg: &MpcConfig) -> PredictionPrefix {
        let n_lift = a.nrows();
        let t_dim = s_c.nrows();
        let n_h = cfg.horizon;
        let mut sc_a = Vec::with_capacity(n_h + 1);
        sc_a.push(s_c.clone());
        for t in 0..n_h {
            let next = &sc_a[t] * a;
            sc_a.push(next);
        }
        let mut g = DMatrix::zeros(t_dim * n_h, n_lift);
        for t in 1..=n_h {
            g.rows_mut((t - 1) * t_dim, t_dim).copy_from(&sc_a[t]);
        }
        PredictionPrefix {
            sc_a,
            g,
            horizon: n_h,
            n_tracked: t_dim,
            weight_ee: cfg.weight_ee,
        }
    }

    /// Complete the condensed quadratic program for the input matrix `b`.
    /// The strictly convex cost has the unique minimizer
    /// `(w_ee ΘᵀΘ + w_u I) U = w_ee Θᵀ (R − G z0)`.
    fn condense(&self, b: &DMatrix<f64>, cfg: &MpcConfig) -> Result<CondensedQp> {
        let m = b.ncols();
        let t_dim = self.n_tracked;
        let n_h = self.horizon;
        let mut theta = DMatrix::zeros(t_dim * n_h, m * n_h);
        for t in 1..=n_h {
            for s in 0..t {
                let block = &self.sc_a[t - 1 - s] * b;
                theta
                    .view_mut(((t - 1) * t_dim, s * m), (t_dim, m))
                    .copy_from(&block);
            }
        }
        let mut hessian = theta.transpose() * &theta * cfg.weight_ee;
        for i in 0..m * n_h {
            hessian[(i, i)] += cfg.weight_u;
        }
        let chol = nalgebra::linalg::Cholesky::new(hessian).ok_or_else(|| {
            Error::Numerical("condensed MPC Hessian is not positive definite".into())
        })?;
        Ok(CondensedQp {
            theta,
            chol,
            n_inputs: m,
        })
    }
}

/// Input-dependent factors completing a [`PredictionPrefix`] into a solvable
/// quadratic program.
struct CondensedQp {
    theta: DMatrix<f64>,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    n_inputs: usize,
}

impl CondensedQp {
    fn solve(
        &self,
        prefix: &PredictionPrefix,
        z0: &DVector<f64>,
        refs: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        if refs.len() < prefix.horizon {
            return Err(Error::Dimension {
                what: "reference window".into(),
                expected: prefix.horizon,
                actual: refs.len(),
            });
        }
        let mut r = DVector::zeros(prefix.n_tracked * prefix.horizon);
        for (t, rt) in refs.iter().take(prefix.horizon).enumerate() {
            if rt.len() != prefix.n_tracked {
                return Err(Error::Dimension {
                    what: "reference sample".into(),
                    expected: prefix.n_tracked,
                    actual: rt.len(),
                });
            }
            r.rows_mut(t * prefix.n_tracked, prefix.n_tracked)
                .copy_from(rt);
        }
        let free = &prefix.g * z0;
        let rhs = self.theta.transpose() * (r - free) * prefix.weight_ee;
        let u = self.chol.solve(&rhs);
        Ok((0..prefix.horizon)
            .map(|t| u.rows(t * self.n_inputs, self.n_inputs).into_owned())
            .collect())
    }
}

/// Rows of the lifted output map that feed the tracking cost.
fn tracked_rows(c: &DMatrix<f64>, tracked: &[usize]) -> DMatrix<f64> {
    let mut s_c = DMatrix::zeros(tracked.len(), c.ncols());
    for (row, &i) in tracked.iter().enumerate() {
        s_c.row_mut(row).copy_from(&c.row(i));
    }
    s_c
}

/// A receding-horizon controller: maps the measured model state and a
/// reference window to a planned input sequence (the harness applies the
/// first element).
pub trait Controller {
    fn name(&self) -> &'static str;
    fn horizon(&self) -> usize;
    fn ts(&self) -> f64;
    /// May hold warm-start state, hence `&mut`.
    fn solve(&mut self, x_now: &DVector<f64>, refs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>>;
}

/// Koopman linear MPC: condensed QP over the lifted linear model, with the
/// prediction matrices factored once at construction.
pub struct KmpcController {
    model: ModelLinear,
    cfg: MpcConfig,
    prefix: PredictionPrefix,
    qp: CondensedQp,
}

impl KmpcController {
    pub fn new(model: ModelLinear, cfg: MpcConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        cfg.check_model_ts(model.ts)?;
        cfg.check_tracked(model.c.nrows())?;
        let s_c = tracked_rows(&model.c, &cfg.tracked);
        let prefix = PredictionPrefix::build(&model.a, &s_c, &cfg);
        let qp = prefix.condense(&model.b, &cfg)?;
        Ok(KmpcController {
            model,
            cfg,
            prefix,
            qp,
        })
    }
}

impl Controller for KmpcController {
    fn name(&self) -> &'static str {
        "kmpc"
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn ts(&self) -> f64 {
        self.cfg.ts
    }

    fn solve(&mut self, x_now: &DVector<f64>, refs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let z0 = self.model.basis.lift_state(x_now.as_slice())?;
        self.qp.solve(&self.prefix, &z0, refs)
    }
}

/// Effective input matrix of the bilinear model at a frozen lifted state:
/// `B̃(z0) = B + [H_1 z0 | … | H_m z0]`.
pub fn effective_input_matrix(model: &ModelBilinear, z0: &DVector<f64>) -> DMatrix<f64> {
    let mut b = model.b.clone();
    for (j, hj) in model.h.iter().enumerate() {
        let col = hj * z0;
        for i in 0..b.nrows() {
            b[(i, j)] += col[i];
        }
    }
    b
}

/// Koopman bilinear MPC: per step, freeze the current lifted state in the
/// bilinear terms and run the identical condensed solve as K-MPC with
/// `(A, B̃(z0))`.
pub struct KbmpcController {
    model: ModelBilinear,
    cfg: MpcConfig,
    prefix: PredictionPrefix,
}

impl KbmpcController {
    pub fn new(model: ModelBilinear, cfg: MpcConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        cfg.check_model_ts(model.ts)?;
        cfg.check_tracked(model.c.nrows())?;
        let s_c = tracked_rows(&model.c, &cfg.tracked);
        let prefix = PredictionPrefix::build(&model.a, &s_c, &cfg);
        Ok(KbmpcController { model, cfg, prefix })
    }
}

impl Controller for KbmpcController {
    fn name(&self) -> &'static str {
        "kbmpc"
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn ts(&self) -> f64 {
        self.cfg.ts
    }

    fn solve(&mut self, x_now: &DVector<f64>, refs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let z0 = self.model.basis.lift_state(x_now.as_slice())?;
        let b_eff = effective_input_matrix(&self.model, &z0);
        let qp = self.prefix.condense(&b_eff, &self.cfg)?;
        qp.solve(&self.prefix, &z0, refs)
    }
}

/// One-shot K-MPC solve (constructs the controller internally).
pub fn solve_kmpc(
    model: &ModelLinear,
    x_now: &DVector<f64>,
    ref_window: &[DVector<f64>],
    cfg: &MpcConfig,
) -> Result<Vec<DVector<f64>>> {
    KmpcController::new(model.clone(), cfg.clone())?.solve(x_now, ref_window)
}

/// One-shot K-BMPC solve.
pub fn solve_kbmpc(
    model: &ModelBilinear,
    x_now: &DVector<f64>,
    ref_window: &[DVector<f64>],
    cfg: &MpcConfig,
) -> Result<Vec<DVector<f64>>> {
    KbmpcController::new(model.clone(), cfg.clone())?.solve(x_now, ref_window)
}

/// Outcome of one K-NMPC solve.
#[derive(Debug, Clone)]
pub struct KnmpcSolution {
    pub inputs: Vec<DVector<f64>>,
    /// True when the warm-start rollout was non-finite and the warm start
    /// was returned unchanged.
    pub failed: bool,
    /// Cost after the initial rollout and after each accepted Gauss-Newton
    /// step; non-increasing by construction.
    pub costs: Vec<f64>,
    /// Gradient of the cost at the returned iterate.
    pub gradient: DVector<f64>,
}

struct NmpcProblem<'a> {
    model: &'a ModelNonlinear,
    s: DMatrix<f64>,
    refs: Vec<DVector<f64>>,
    cfg: &'a MpcConfig,
}

impl NmpcProblem<'_> {
    /// Roll the predictor forward; `None` when the trajectory leaves the
    /// finite floats.
    fn rollout(&self, x0: &DVector<f64>, u: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
        let mut xs = Vec::with_capacity(u.len() + 1);
        xs.push(x0.clone());
        for ut in u {
            let x = xs.last().expect("non-empty rollout");
            let z = self.model.basis.lift(x.as_slice(), ut.as_slice()).ok()?;
            let next = &self.model.c_psi * z;
            if !next.iter().all(|v| v.is_finite()) {
                return None;
            }
            xs.push(next);
        }
        Some(xs)
    }

    /// Stacked residual vector whose squared norm is the cost.
    fn residual(&self, xs: &[DVector<f64>], u: &[DVector<f64>]) -> DVector<f64> {
        let n_h = self.cfg.horizon;
        let t_dim = self.s.nrows();
        let m = self.model.basis.input_dim();
        let mut r = DVector::zeros(n_h * (t_dim + m));
        let we = self.cfg.weight_ee.sqrt();
        let wu = self.cfg.weight_u.sqrt();
        for t in 1..=n_h {
            let track = &self.s * &xs[t] - &self.refs[t - 1];
            r.rows_mut((t - 1) * t_dim, t_dim).copy_from(&(track * we));
        }
        for (s, us) in u.iter().enumerate() {
            r.rows_mut(n_h * t_dim + s * m, m).copy_from(&(us * wu));
        }
        r
    }

    /// Residual Jacobian with respect to the stacked inputs, built from the
    /// analytic lifting Jacobians by forward sensitivity propagation.
    fn jacobian(&self, xs: &[DVector<f64>], u: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let n_h = self.cfg.horizon;
        let n = self.model.basis.state_dim();
        let m = self.model.basis.input_dim();
        let t_dim = self.s.nrows();
        let we = self.cfg.weight_ee.sqrt();
        let wu = self.cfg.weight_u.sqrt();
        let mut jac = DMatrix::zeros(n_h * (t_dim + m), n_h * m);
        // sens[s] = d x[t] / d u[s] for the current t.
        let mut sens: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, m); n_h];
        for t in 0..n_h {
            let (jx, ju) = self
                .model
                .basis
                .lift_jacobians(xs[t].as_slice(), u[t].as_slice())?;
            let a_t = &self.model.c_psi * jx;
            let b_t = &self.model.c_psi * ju;
            for item in sens.iter_mut().take(t) {
                *item = &a_t * &*item;
            }
            sens[t] = b_t;
            for (s, sens_s) in sens.iter().enumerate().take(t + 1) {
                let block = &self.s * sens_s * we;
                jac.view_mut((t * t_dim, s * m), (t_dim, m)).copy_from(&block);
            }
        }
        for s in 0..n_h {
            for i in 0..m {
                jac[(n_h * t_dim + s * m + i, s * m + i)] = wu;
            }
        }
        Ok(jac)
    }
}

fn stack(u: &[DVector<f64>]) -> DVector<f64> {
    let m = u.first().map_or(0, |v| v.len());
    let mut out = DVector::zeros(u.len() * m);
    for (i, ui) in u.iter().enumerate() {
        out.rows_mut(i * m, m).copy_from(ui);
    }
    out
}

fn unstack(u: &DVector<f64>, m: usize) -> Vec<DVector<f64>> {
    (0..u.len() / m)
        .map(|i| u.rows(i * m, m).into_owned())
        .collect()
}

/// Koopman nonlinear MPC solve: Gauss-Newton with Levenberg damping on the
/// single-shooting cost. Returns the best iterate found; when the
/// warm-start rollout is already non-finite, returns the warm start
/// unchanged with `failed` set.
pub fn solve_knmpc(
    model: &ModelNonlinear,
    x_now: &DVector<f64>,
    ref_window: &[DVector<f64>],
    warm_start: &[DVector<f64>],
    cfg: &MpcConfig,
) -> Result<KnmpcSolution> {
    model.validate()?;
    cfg.validate()?;
    cfg.check_model_ts(model.ts)?;
    let n = model.basis.state_dim();
    let m = model.basis.input_dim();
    cfg.check_tracked(n)?;
    if x_now.len() != n {
        return Err(Error::Dimension {
            what: "controller state".into(),
            expected: n,
            actual: x_now.len(),
        });
    }
    if ref_window.len() < cfg.horizon {
        return Err(Error::Dimension {
            what: "reference window".into(),
            expected: cfg.horizon,
            actual: ref_window.len(),
        });
    }
    if warm_start.len() != cfg.horizon || warm_start.iter().any(|u| u.len() != m) {
        return Err(Error::Dimension {
            what: "warm start length".into(),
            expected: cfg.horizon,
            actual: warm_start.len(),
        });
    }
    let mut s = DMatrix::zeros(cfg.tracked.len(), n);
    for (row, &i) in cfg.tracked.iter().enumerate() {
        s[(row, i)] = 1.0;
    }
    let problem = NmpcProblem {
        model,
        s,
        refs: ref_window[..cfg.horizon].to_vec(),
        cfg,
    };

    let mut u = warm_start.to_vec();
    let Some(mut xs) = problem.rollout(x_now, &u) else {
        return Ok(KnmpcSolution {
            inputs: u,
            failed: true,
            costs: Vec::new(),
            gradient: DVector::zeros(cfg.horizon * m),
        });
    };
    let mut res = problem.residual(&xs, &u);
    let mut cost = res.norm_squared();
    let mut costs = vec![cost];
    let mut lambda = cfg.nmpc_damping;
    let dim = cfg.horizon * m;
    let mut gradient = DVector::zeros(dim);

    for _ in 0..cfg.nmpc_max_iters {
        let jac = problem.jacobian(&xs, &u)?;
        gradient = jac.transpose() * &res * 2.0;
        if gradient.norm() < NMPC_GRADIENT_TOL {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut accepted = false;
        while lambda <= 1e12 {
            let mut damped = jtj.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda;
            }
            let Some(chol) = nalgebra::linalg::Cholesky::new(damped) else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let u_stacked = stack(&u) + step;
            let candidate = unstack(&u_stacked, m);
            if let Some(xs_c) = problem.rollout(x_now, &candidate) {
                let res_c = problem.residual(&xs_c, &candidate);
                let cost_c = res_c.norm_squared();
                if cost_c.is_finite() && cost_c < cost {
                    u = candidate;
                    xs = xs_c;
                    res = res_c;
                    cost = cost_c;
                    costs.push(cost);
                    lambda = (lambda / 10.0).max(cfg.nmpc_damping);
                    accepted = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    // Gradient at the point actually returned.
    let jac = problem.jacobian(&xs, &u)?;
    gradient.copy_from(&(jac.transpose() * &res * 2.0));
    Ok(KnmpcSolution {
        inputs: u,
        failed: false,
        costs,
        gradient,
    })
}

/// Koopman nonlinear MPC with shift warm-starting across control steps.
pub struct KnmpcController {
    model: ModelNonlinear,
    cfg: MpcConfig,
    warm: Option<Vec<DVector<f64>>>,
    /// Accepted-iteration cost history of the most recent solve.
    pub last_costs: Vec<f64>,
}

impl KnmpcController {
    pub fn new(model: ModelNonlinear, cfg: MpcConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        cfg.check_model_ts(model.ts)?;
        cfg.check_tracked(model.basis.state_dim())?;
        Ok(KnmpcController {
            model,
            cfg,
            warm: None,
            last_costs: Vec::new(),
        })
    }

    /// Previous solution shifted one step with zeros appended (all zeros on
    /// the first solve).
    fn shifted_warm_start(&self) -> Vec<DVector<f64>> {
        let m = self.model.basis.input_dim();
        match &self.warm {
            Some(prev) => {
                let mut w: Vec<DVector<f64>> = prev.iter().skip(1).cloned().collect();
                w.push(DVector::zeros(m));
                w
            }
            None => vec![DVector::zeros(m); self.cfg.horizon],
        }
    }
}

impl Controller for KnmpcController {
    fn name(&self) -> &'static str {
        "knmpc"
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn ts(&self) -> f64 {
        self.cfg.ts
    }

    fn solve(&mut self, x_now: &DVector<f64>, refs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let warm = self.shifted_warm_start();
        let solution = solve_knmpc(&self.model, x_now, refs, &warm, &self.cfg)?;
        if solution.failed {
            self.warm = Some(warm);
            return Err(Error::Numerical(
                "nonlinear MPC rollout left the finite floats".into(),
            ));
        }
        self.warm = Some(solution.inputs.clone());
        self.last_costs = solution.costs;
        Ok(solution.inputs)
    }
}

/// One recorded control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep {
    pub t: usize,
    pub reference: Vector2<f64>,
    /// Measured end-effector position at the time of the solve.
    pub output: Vector2<f64>,
    pub input: Vector3<f64>,
    pub tracking_error: f64,
    /// Wall time of the controller solve alone (plant integration is not
    /// included).
    pub solve_time: f64,
    pub failed: bool,
}

/// Closed-loop run record.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLog {
    pub steps: Vec<ControlStep>,
    pub mean_tracking_error: f64,
    pub mean_solve_time: f64,
    pub seed: u64,
}

/// Drive the simulated arm with a receding-horizon controller along a
/// reference, starting from the hanging state.
///
/// Per step: measure the plant output, solve the controller (timed in
/// isolation), apply the first planned torque for one period, and log the
/// tracking error `‖(α3, β3) − r_t‖`. A controller failure applies zero
/// torque that step and flags the log row.
pub fn run_closed_loop(
    params: &ArmParameters,
    controller: &mut dyn Controller,
    reference: &ReferenceTrajectory,
    seed: u64,
) -> Result<ControlLog> {
    params.validate()?;
    reference.validate(params.reach())?;
    let ts = controller.ts();
    if (reference.ts - ts).abs() > 1e-12 * ts.max(reference.ts) {
        return Err(Error::Invalid(format!(
            "reference period {} does not match controller period {}",
            reference.ts, ts
        )));
    }
    let horizon = controller.horizon();
    let mut state = PlantState::hanging();
    let mut steps = Vec::with_capacity(reference.samples.len());
    for (t, &r_t) in reference.samples.iter().enumerate() {
        let y = forward_kinematics(&state.theta, params);
        let ee = Vector2::new(y[4], y[5]);
        let window = reference.window(t, horizon);
        let start = Instant::now();
        let solved = controller.solve(&y, &window);
        let solve_time = start.elapsed().as_secs_f64();
        let (input, failed) = match solved {
            Ok(seq) => {
                let first = seq.first().ok_or_else(|| {
                    Error::Invalid("controller returned an empty input sequence".into())
                })?;
                if first.len() != 3 {
                    return Err(Error::Dimension {
                        what: "controller input".into(),
                        expected: 3,
                        actual: first.len(),
                    });
                }
                (Vector3::new(first[0], first[1], first[2]), false)
            }
            Err(_) => (Vector3::zeros(), true),
        };
        state = plant_step(&state, &input, ts, params)?;
        steps.push(ControlStep {
            t,
            reference: r_t,
            output: ee,
            input,
            tracking_error: (ee - r_t).norm(),
            solve_time,
            failed,
        });
    }
    let n = steps.len() as f64;
    let mean_tracking_error = steps.iter().map(|s| s.tracking_error).sum::<f64>() / n;
    let mean_solve_time = steps.iter().map(|s| s.solve_time).sum::<f64>() / n;
    Ok(ControlLog {
        steps,
        mean_tracking_error,
        mean_solve_time,
        seed,
    })
}
