//! Three-link planar arm: rigid-body dynamics, integrator, data collection.
//!
//! The arm hangs from the origin in the vertical plane. Joint angles are
//! relative (angle of each link against the previous one) and `theta = 0`
//! is the arm hanging straight down. Each link is a uniform thin rod; every
//! joint carries a linear spring and a viscous damper. The equations of
//! motion are the standard manipulator form
//!
//! ```text
//! M(theta) theta'' + C(theta, theta') theta' + g(theta)
//!     + K_s theta + D theta' = tau
//! ```
//!
//! assembled from link-frame Jacobians (Christoffel symbols for the
//! Coriolis matrix). Integration is classical RK4 with a fixed number of
//! internal substeps per sample period.
//!
//! The *observed output* of the plant is the 6-vector of link end positions
//! `(x_1, y_1, x_2, y_2, x_3, y_3)`; snapshot datasets pair the output
//! before and after one sample period under a held torque.

use crate::error::{Error, Result};
use crate::model::PredictionEpisode;
use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Internal RK4 substeps per sample period.
///
/// The default arm is stiff: with joint damping of 1 N·m·s/rad against link
/// inertias of order 1e-3 kg·m², the fastest decay mode sits near 2.4e3 1/s
/// in every configuration. Classical RK4 is only stable for
/// `dt < 2.78 / 2430 ≈ 1.1e-3` s, so a 0.05 s sample period is subdivided
/// finely enough to sit well inside the stability region.
pub const SUBSTEPS: usize = 200;

/// Physical parameters of the arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmParameters {
    /// Link masses in kg.
    pub masses: [f64; 3],
    /// Link lengths in m.
    pub lengths: [f64; 3],
    /// Joint spring constants in N·m/rad.
    pub stiffness: [f64; 3],
    /// Joint viscous damping in N·m·s/rad.
    pub damping: [f64; 3],
    /// Gravitational acceleration in m/s^2.
    pub gravity: f64,
}

impl Default for ArmParameters {
    fn default() -> Self {
        Self {
            masses: [0.1; 3],
            lengths: [0.33; 3],
            stiffness: [1e-5; 3],
            damping: [1.0; 3],
            gravity: 9.81,
        }
    }
}

impl ArmParameters {
    pub fn validate(&self) -> Result<()> {
        for (name, vals) in [("mass", &self.masses), ("length", &self.lengths)] {
            if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Invalid(format!("every link {name} must be > 0")));
            }
        }
        for (name, vals) in [("stiffness", &self.stiffness), ("damping", &self.damping)] {
            if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Invalid(format!("joint {name} must be >= 0")));
            }
        }
        if !self.gravity.is_finite() {
            return Err(Error::Invalid("gravity must be finite".into()));
        }
        Ok(())
    }

    /// Radius of the reachable disc around the shoulder.
    pub fn reach(&self) -> f64 {
        self.lengths.iter().sum()
    }

    /// Output vector of the arm hanging at rest.
    pub fn hanging_output(&self) -> DVector<f64> {
        forward_kinematics(&Vector3::zeros(), self)
    }

    /// Rotational inertia of link `i` about its joint-side center of mass.
    fn rod_inertia(&self, i: usize) -> f64 {
        self.masses[i] * self.lengths[i] * self.lengths[i] / 12.0
    }
}

/// Mechanical state: relative joint angles and their rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub theta: Vector3<f64>,
    pub theta_dot: Vector3<f64>,
}

impl PlantState {
    pub fn new(theta: Vector3<f64>, theta_dot: Vector3<f64>) -> Self {
        Self { theta, theta_dot }
    }

    /// Arm hanging straight down at rest.
    pub fn hanging() -> Self {
        Self {
            theta: Vector3::zeros(),
            theta_dot: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.theta_dot.iter()).all(|v| v.is_finite())
    }
}

/// One training sample: output before and after one sample period under a
/// held input. Dimensions are generic so identification code can be tested
/// on plants other than the arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub u: DVector<f64>,
}

/// A batch of snapshots with the sampling metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub ts: f64,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotDataset {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Random-excitation settings for data collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationConfig {
    /// Torques are drawn uniformly from `[-torque_amplitude, torque_amplitude]`.
    pub torque_amplitude: f64,
    /// A fresh torque is drawn every `hold_steps` sample periods.
    pub hold_steps: usize,
    /// Initial joint angles are drawn uniformly from `[-init_angle_range, init_angle_range]`.
    pub init_angle_range: f64,
    /// Steps per episode; a new initial condition is drawn per episode.
    pub episode_length: usize,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        // Tuned so that low-degree polynomial dictionaries remain informative:
        // short episodes keep the arm near the sampled initial conditions, and a
        // fresh torque every step decorrelates the input columns.
        Self {
            torque_amplitude: 1.05,
            hold_steps: 1,
            init_angle_range: 1.5,
            episode_length: 40,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.torque_amplitude.is_finite() && self.torque_amplitude >= 0.0) {
            return Err(Error::Invalid("torque_amplitude must be >= 0".into()));
        }
        if !(self.init_angle_range.is_finite() && self.init_angle_range >= 0.0) {
            return Err(Error::Invalid("init_angle_range must be >= 0".into()));
        }
        if self.hold_steps == 0 {
            return Err(Error::Invalid("hold_steps must be >= 1".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Invalid("episode_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-link geometry shared by the dynamics terms: absolute link angles,
/// link directions `e`, their angle derivatives `e'`, and the Jacobians of
/// the link centers of mass with respect to the joint angles.
struct Kinematics {
    e: [Vector2<f64>; 3],
    /// `jac[i][a] = d c_i / d theta_a` where `c_i` is the COM of link `i`.
    jac: [[Vector2<f64>; 3]; 3],
}

/// COM weight of link `j`'s direction inside link `i`'s COM position.
fn com_weight(lengths: &[f64; 3], i: usize, j: usize) -> f64 {
    if j < i {
        lengths[j]
    } else {
        lengths[i] / 2.0
    }
}

fn kinematics(theta: &Vector3<f64>, params: &ArmParameters) -> Kinematics {
    let mut e = [Vector2::zeros(); 3];
    let mut ep = [Vector2::zeros(); 3];
    let mut phi = 0.0;
    for i in 0..3 {
        phi += theta[i];
        // theta = 0 hangs straight down, so a link at absolute angle phi
        // points along (sin phi, -cos phi).
        e[i] = Vector2::new(phi.sin(), -phi.cos());
        ep[i] = Vector2::new(phi.cos(), phi.sin());
    }
    let mut jac = [[Vector2::zeros(); 3]; 3];
    for i in 0..3 {
        for a in 0..=i {
            let mut acc = Vector2::zeros();
            for j in a..=i {
                acc += com_weight(&params.lengths, i, j) * ep[j];
            }
            jac[i][a] = acc;
        }
    }
    Kinematics { e, jac }
}

/// Positions of the three link ends, flattened to `(x1, y1, x2, y2, x3, y3)`.
pub fn forward_kinematics(theta: &Vector3<f64>, params: &ArmParameters) -> DVector<f64> {
    let mut out = DVector::zeros(6);
    let mut phi = 0.0;
    let mut pos = Vector2::zeros();
    for i in 0..3 {
        phi += theta[i];
        pos += params.lengths[i] * Vector2::new(phi.sin(), -phi.cos());
        out[2 * i] = pos.x;
        out[2 * i + 1] = pos.y;
    }
    out
}

/// Configuration-dependent inertia matrix.
pub fn mass_matrix(theta: &Vector3<f64>, params: &ArmParameters) -> Matrix3<f64> {
    let kin = kinematics(theta, params);
    let mut m = Matrix3::zeros();
    for i in 0..3 {
        let mi = params.masses[i];
        let inertia = params.rod_inertia(i);
        for a in 0..=i {
            for b in 0..=i {
                m[(a, b)] += mi * kin.jac[i][a].dot(&kin.jac[i][b]) + inertia;
            }
        }
    }
    m
}

/// Partial derivatives `dM/dtheta_c` for `c = 0, 1, 2`.
fn mass_matrix_partials(theta: &Vector3<f64>, params: &ArmParameters) -> [Matrix3<f64>; 3] {
    let kin = kinematics(theta, params);
    // d jac[i][a] / d theta_c = sum_{j = max(a,c)}^{i} w_ij * (-e_j).
    let djac = |i: usize, a: usize, c: usize| -> Vector2<f64> {
        let lo = a.max(c);
        let mut acc = Vector2::zeros();
        if a <= i && c <= i {
            for j in lo..=i {
                acc -= com_weight(&params.lengths, i, j) * kin.e[j];
            }
        }
        acc
    };
    let mut out = [Matrix3::zeros(); 3];
    for c in 0..3 {
        for i in 0..3 {
            let mi = params.masses[i];
            for a in 0..=i {
                for b in 0..=i {
                    out[c][(a, b)] += mi
                        * (djac(i, a, c).dot(&kin.jac[i][b]) + kin.jac[i][a].dot(&djac(i, b, c)));
                }
            }
        }
    }
    out
}

/// Coriolis/centrifugal matrix from Christoffel symbols; the Coriolis torque
/// is `C(theta, theta') * theta'`.
pub fn coriolis_matrix(
    theta: &Vector3<f64>,
    theta_dot: &Vector3<f64>,
    params: &ArmParameters,
) -> Matrix3<f64> {
    let dm = mass_matrix_partials(theta, params);
    let mut c = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                let gamma = 0.5 * (dm[k][(a, b)] + dm[b][(a, k)] - dm[a][(b, k)]);
                acc += gamma * theta_dot[k];
            }
            c[(a, b)] = acc;
        }
    }
    c
}

/// Gravity torque `g(theta)`.
pub fn gravity_torque(theta: &Vector3<f64>, params: &ArmParameters) -> Vector3<f64> {
    let kin = kinematics(theta, params);
    let mut g = Vector3::zeros();
    for i in 0..3 {
        for a in 0..=i {
            g[a] += params.masses[i] * params.gravity * kin.jac[i][a].y;
        }
    }
    g
}

/// Joint accelerations under a torque.
pub fn acceleration(
    state: &PlantState,
    torque: &Vector3<f64>,
    params: &ArmParameters,
) -> Result<Vector3<f64>> {
    let m = mass_matrix(&state.theta, params);
    let c = coriolis_matrix(&state.theta, &state.theta_dot, params);
    let g = gravity_torque(&state.theta, params);
    let mut rhs = torque - c * state.theta_dot - g;
    for a in 0..3 {
        rhs[a] -= params.stiffness[a] * state.theta[a] + params.damping[a] * state.theta_dot[a];
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("mass matrix lost positive definiteness".into()))?;
    Ok(chol.solve(&rhs))
}

fn rk4_step(
    state: &PlantState,
    torque: &Vector3<f64>,
    dt: f64,
    params: &ArmParameters,
) -> Result<PlantState> {
    let f = |s: &PlantState| -> Result<(Vector3<f64>, Vector3<f64>)> {
        Ok((s.theta_dot, acceleration(s, torque, params)?))
    };
    let shift = |s: &PlantState, k: &(Vector3<f64>, Vector3<f64>), h: f64| PlantState {
        theta: s.theta + h * k.0,
        theta_dot: s.theta_dot + h * k.1,
    };
    let k1 = f(state)?;
    let k2 = f(&shift(state, &k1, dt / 2.0))?;
    let k3 = f(&shift(state, &k2, dt / 2.0))?;
    let k4 = f(&shift(state, &k3, dt))?;
    Ok(PlantState {
        theta: state.theta + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        theta_dot: state.theta_dot + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    })
}

/// Integrate the plant over `ts` seconds under a held torque using
/// `substeps` internal RK4 steps.
pub fn advance(
    state: &PlantState,
    torque: &Vector3<f64>,
    ts: f64,
    substeps: usize,
    params: &ArmParameters,
) -> Result<PlantState> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::Invalid("integration period must be > 0".into()));
    }
    if substeps == 0 {
        return Err(Error::Invalid("substeps must be >= 1".into()));
    }
    let dt = ts / substeps as f64;
    let mut s = *state;
    for step in 0..substeps {
        s = rk4_step(&s, torque, dt, params)?;
        if !s.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(s)
}

/// One sample period of the plant with the canonical substep count.
pub fn plant_step(
    state: &PlantState,
    torque: &Vector3<f64>,
    ts: f64,
    params: &ArmParameters,
) -> Result<PlantState> {
    advance(state, torque, ts, SUBSTEPS, params)
}

/// Total mechanical energy: kinetic plus gravitational potential
/// (referenced to the hanging configuration) plus spring energy. Strictly
/// decreasing under zero torque and positive damping; conserved when the
/// damping is zero.
pub fn mechanical_energy(state: &PlantState, params: &ArmParameters) -> f64 {
    let m = mass_matrix(&state.theta, params);
    let kinetic = 0.5 * state.theta_dot.dot(&(m * state.theta_dot));
    // COM heights, and the same heights in the hanging configuration.
    let mut potential = 0.0;
    let mut phi = 0.0;
    let mut y = 0.0;
    let mut hang_y = 0.0;
    for i in 0..3 {
        phi += state.theta[i];
        let com_y = y - (params.lengths[i] / 2.0) * phi.cos();
        let com_hang = hang_y - params.lengths[i] / 2.0;
        potential += params.masses[i] * params.gravity * (com_y - com_hang);
        y -= params.lengths[i] * phi.cos();
        hang_y -= params.lengths[i];
    }
    let mut spring = 0.0;
    for a in 0..3 {
        spring += 0.5 * params.stiffness[a] * state.theta[a] * state.theta[a];
    }
    kinetic + potential + spring
}

fn sample_torque(rng: &mut ChaCha8Rng, amplitude: f64) -> Vector3<f64> {
    Vector3::new(
        rng.gen_range(-amplitude..=amplitude),
        rng.gen_range(-amplitude..=amplitude),
        rng.gen_range(-amplitude..=amplitude),
    )
}

fn sample_initial_state(rng: &mut ChaCha8Rng, range: f64) -> PlantState {
    PlantState {
        theta: Vector3::new(
            rng.gen_range(-range..=range),
            rng.gen_range(-range..=range),
            rng.gen_range(-range..=range),
        ),
        theta_dot: Vector3::zeros(),
    }
}

/// Collect `count` snapshots `(p, q, u)` of the arm under random held
/// torques. Episodes start from random settled initial angles; an episode
/// that diverges numerically is discarded and replaced, so the returned
/// dataset always has exactly `count` snapshots. Fully deterministic for a
/// given `seed`.
pub fn collect_snapshots(
    params: &ArmParameters,
    excitation: &ExcitationConfig,
    count: usize,
    ts: f64,
    seed: u64,
) -> Result<SnapshotDataset> {
    params.validate()?;
    excitation.validate()?;
    if count == 0 {
        return Err(Error::Invalid("snapshot count must be >= 1".into()));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::Invalid("sample period must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snapshots: Vec<Snapshot> = Vec::with_capacity(count);
    let episodes_needed = count.div_ceil(excitation.episode_length);
    let max_attempts = 10 * episodes_needed + 10;
    let mut attempts = 0;
    while snapshots.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Numerical(
                "snapshot collection: too many episodes diverged".into(),
            ));
        }
        let mut state = sample_initial_state(&mut rng, excitation.init_angle_range);
        let mut torque = Vector3::zeros();
        let mut episode: Vec<Snapshot> = Vec::with_capacity(excitation.episode_length);
        let mut diverged = false;
        for step in 0..excitation.episode_length {
            if snapshots.len() + episode.len() >= count {
                break;
            }
            if step % excitation.hold_steps == 0 {
                torque = sample_torque(&mut rng, excitation.torque_amplitude);
            }
            let p = forward_kinematics(&state.theta, params);
            match plant_step(&state, &torque, ts, params) {
                Ok(next) => {
                    let q = forward_kinematics(&next.theta, params);
                    episode.push(Snapshot {
                        p,
                        q,
                        u: DVector::from_column_slice(torque.as_slice()),
                    });
                    state = next;
                }
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        if !diverged {
            snapshots.extend(episode);
        }
    }
    Ok(SnapshotDataset { ts, seed, snapshots })
}

/// Collect held-out episodes for multi-step prediction scoring. Each episode
/// records the initial output, the applied input sequence and the true
/// output trajectory (`horizon + 1` samples including the start).
pub fn collect_validation_episodes(
    params: &ArmParameters,
    excitation: &ExcitationConfig,
    episodes: usize,
    horizon: usize,
    ts: f64,
    seed: u64,
) -> Result<Vec<PredictionEpisode>> {
    params.validate()?;
    excitation.validate()?;
    if episodes == 0 || horizon == 0 {
        return Err(Error::Invalid(
            "validation needs episodes >= 1 and horizon >= 1".into(),
        ));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::Invalid("sample period must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    let max_attempts = 10 * episodes + 10;
    let mut attempts = 0;
    while out.len() < episodes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Numerical(
                "validation collection: too many episodes diverged".into(),
            ));
        }
        let mut state = sample_initial_state(&mut rng, excitation.init_angle_range);
        let mut torque = Vector3::zeros();
        let x0 = forward_kinematics(&state.theta, params);
        let mut u_seq = Vec::with_capacity(horizon);
        let mut x_true = Vec::with_capacity(horizon + 1);
        x_true.push(x0.clone());
        let mut diverged = false;
        for step in 0..horizon {
            if step % excitation.hold_steps == 0 {
                torque = sample_torque(&mut rng, excitation.torque_amplitude);
            }
            match plant_step(&state, &torque, ts, params) {
                Ok(next) => {
                    u_seq.push(DVector::from_column_slice(torque.as_slice()));
                    x_true.push(forward_kinematics(&next.theta, params));
                    state = next;
                }
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        if !diverged {
            out.push(PredictionEpisode { x0, u_seq, x_true });
        }
    }
    Ok(out)
}

/// Split a dataset into its contiguous episodes. Snapshots chain within an
/// episode (`q` of one row is bitwise the `p` of the next, both being the
/// same forward-kinematics evaluation); a break in the chain starts a new
/// episode. Returns half-open row ranges covering the dataset in order.
pub fn episode_ranges(dataset: &SnapshotDataset) -> Vec<std::ops::Range<usize>> {
    let snaps = &dataset.snapshots;
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..snaps.len() {
        if snaps[k].p != snaps[k - 1].q {
            out.push(start..k);
            start = k;
        }
    }
    if start < snaps.len() {
        out.push(start..snaps.len());
    }
    out
}

/// Hold out `count` episodes of a dataset for multi-step validation. The
/// episodes are drawn deterministically from `seed` among those with at
/// least `horizon` steps; each is truncated to `horizon` prediction steps.
/// Returns the training remainder (held-out episodes removed entirely) and
/// the held-out [`PredictionEpisode`]s in dataset order.
pub fn split_validation(
    dataset: &SnapshotDataset,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<(SnapshotDataset, Vec<PredictionEpisode>)> {
    if count == 0 || horizon == 0 {
        return Err(Error::Invalid(
            "validation needs count >= 1 and horizon >= 1".into(),
        ));
    }
    let ranges = episode_ranges(dataset);
    let eligible: Vec<usize> = (0..ranges.len())
        .filter(|&i| ranges[i].len() >= horizon)
        .collect();
    if eligible.len() <= count {
        return Err(Error::Invalid(format!(
            "cannot hold out {count} episodes of {horizon}+ steps: dataset \
             has {} eligible episodes and some must remain for training",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, eligible.len(), count).into_vec();
    chosen.sort_unstable();
    let held: Vec<usize> = chosen.into_iter().map(|i| eligible[i]).collect();

    let mut episodes = Vec::with_capacity(count);
    for &e in &held {
        let s = ranges[e].start;
        let rows = &dataset.snapshots[s..s + horizon];
        let x0 = rows[0].p.clone();
        let u_seq: Vec<DVector<f64>> = rows.iter().map(|r| r.u.clone()).collect();
        let x_true: Vec<DVector<f64>> = std::iter::once(x0.clone())
            .chain(rows.iter().map(|r| r.q.clone()))
            .collect();
        episodes.push(PredictionEpisode { x0, u_seq, x_true });
    }

    let mut keep = vec![true; ranges.len()];
    for &e in &held {
        keep[e] = false;
    }
    let snapshots: Vec<Snapshot> = ranges
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .flat_map(|(_, r)| dataset.snapshots[r.clone()].iter().cloned())
        .collect();
    let training = SnapshotDataset {
        ts: dataset.ts,
        seed: dataset.seed,
        snapshots,
    };
    Ok((training, episodes))
}
