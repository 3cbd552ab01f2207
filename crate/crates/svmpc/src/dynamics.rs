//! Continuous-time system models, their RK4 discretization, and analytic
//! Hamiltonian maximization over the control box.
//!
//! All models here are control-affine, `f(x, u) = a(x) + B(x) u`, which is
//! what makes `max_u p . f(x, u)` solvable channel-by-channel (bang-bang).
//! The same discrete map `f_d` (one RK4 step with zero-order-hold control,
//! periodic dimensions wrapped, clamped dimensions projected onto the
//! simulation box) is used by the closed-loop simulator and inside the
//! trajectory optimizer, so "dynamics satisfied" means the same thing
//! everywhere.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("state has dimension {got}, model expects {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("control has dimension {got}, model expects {expected}")]
    ControlDim { expected: usize, got: usize },
    #[error("costate has dimension {got}, model expects {expected}")]
    CostateDim { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
}

/// A control-affine dynamical system `dx/dt = a(x) + B(x) u` together with
/// its control box, simulation box, and the bookkeeping the grid solvers
/// need (which dimensions wrap, which are clamped after a step).
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn control_lo(&self) -> &[f64];
    fn control_hi(&self) -> &[f64];
    fn state_lo(&self) -> &[f64];
    fn state_hi(&self) -> &[f64];

    /// State indices wrapped to `[-pi, pi)` after each step.
    fn periodic_dims(&self) -> &[usize] {
        &[]
    }

    /// State indices clamped to the simulation box after each step.
    fn clamped_dims(&self) -> &[usize] {
        &[]
    }

    /// Full vector field: `out = f(x, u)`.
    fn flow_into(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// Drift term `a(x)`.
    fn drift_into(&self, x: &[f64], out: &mut [f64]);

    /// Control matrix `B(x)`, column-major `n x m`.
    fn control_matrix_into(&self, x: &[f64], out: &mut [f64]);

    /// State Jacobian `df/dx` at `(x, u)`, column-major `n x n`.
    fn flow_jacobian_into(&self, x: &[f64], u: &[f64], out: &mut [f64]);
}

/// Wrap an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can return the modulus itself when `a + PI` is a tiny
    // negative number, which would map to +pi.
    if w >= PI {
        -PI
    } else {
        w
    }
}

fn check_dims(model: &dyn Dynamics, x: &[f64], u: Option<&[f64]>) -> Result<(), DynamicsError> {
    if x.len() != model.state_dim() {
        return Err(DynamicsError::StateDim { expected: model.state_dim(), got: x.len() });
    }
    if let Some(u) = u {
        if u.len() != model.control_dim() {
            return Err(DynamicsError::ControlDim { expected: model.control_dim(), got: u.len() });
        }
    }
    Ok(())
}

/// Time derivative of the state: `f(x, u)`.
pub fn flow(model: &dyn Dynamics, x: &State, u: &Control) -> Result<State, DynamicsError> {
    check_dims(model, x.as_slice(), Some(u.as_slice()))?;
    let mut out = DVector::zeros(model.state_dim());
    model.flow_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Scratch buffers for allocation-free RK4 stepping.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    xs: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Rk4Workspace { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], xs: vec![0.0; n] }
    }
}

/// One classical RK4 step with `u` held constant over `[0, dt]`; periodic
/// dimensions are wrapped afterward. No clamping.
pub fn step(model: &dyn Dynamics, x: &State, u: &Control, dt: f64) -> Result<State, DynamicsError> {
    check_dims(model, x.as_slice(), Some(u.as_slice()))?;
    if dt <= 0.0 {
        return Err(DynamicsError::NonPositiveDt(dt));
    }
    let mut ws = Rk4Workspace::new(model.state_dim());
    let mut out = DVector::zeros(model.state_dim());
    step_into(model, x.as_slice(), u.as_slice(), dt, &mut ws, out.as_mut_slice());
    Ok(out)
}

/// Allocation-free core of [`step`].
pub fn step_into(
    model: &dyn Dynamics,
    x: &[f64],
    u: &[f64],
    dt: f64,
    ws: &mut Rk4Workspace,
    out: &mut [f64],
) {
    let n = x.len();
    model.flow_into(x, u, &mut ws.k1);
    for i in 0..n {
        ws.xs[i] = x[i] + 0.5 * dt * ws.k1[i];
    }
    model.flow_into(&ws.xs, u, &mut ws.k2);
    for i in 0..n {
        ws.xs[i] = x[i] + 0.5 * dt * ws.k2[i];
    }
    model.flow_into(&ws.xs, u, &mut ws.k3);
    for i in 0..n {
        ws.xs[i] = x[i] + dt * ws.k3[i];
    }
    model.flow_into(&ws.xs, u, &mut ws.k4);
    for i in 0..n {
        out[i] = x[i] + dt / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
    for &i in model.periodic_dims() {
        out[i] = wrap_angle(out[i]);
    }
}

/// [`step`] followed by projection of the model's clamped dimensions onto
/// the simulation box. This is the discrete map `f_d` the simulator and the
/// trajectory optimizer share. Returns whether any clamp engaged.
pub fn step_clamped(
    model: &dyn Dynamics,
    x: &State,
    u: &Control,
    dt: f64,
) -> Result<(State, bool), DynamicsError> {
    let mut next = step(model, x, u, dt)?;
    let clamped = clamp_state(model, next.as_mut_slice());
    Ok((next, clamped))
}

/// Project the clamped dimensions onto the simulation box in place.
pub fn clamp_state(model: &dyn Dynamics, x: &mut [f64]) -> bool {
    let mut clamped = false;
    for &i in model.clamped_dims() {
        let v = x[i].clamp(model.state_lo()[i], model.state_hi()[i]);
        if v != x[i] {
            log::debug!("clamped state dim {} from {} to {}", i, x[i], v);
            x[i] = v;
            clamped = true;
        }
    }
    clamped
}

/// `f_d` together with its Jacobians, obtained by chaining the stage
/// Jacobians of the continuous flow through the RK4 tableau. Rows of both
/// Jacobians are zeroed for dimensions the final clamp saturated.
pub fn step_clamped_with_jacobians(
    model: &dyn Dynamics,
    x: &State,
    u: &Control,
    dt: f64,
) -> (State, DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let m = model.control_dim();
    let id = DMatrix::<f64>::identity(n, n);
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, m);
    let mut ks = DVector::<f64>::zeros(n);

    // Each stage s: k_s = f(x_s, u) with x_s = x + c_s k_{s-1}, so
    // dk_s/dx = A_s (I + c_s dk_{s-1}/dx) and dk_s/du = c_s A_s dk_{s-1}/du + B_s.
    let stage = |xs: &DVector<f64>,
                 c: f64,
                 prev_x: Option<&DMatrix<f64>>,
                 prev_u: Option<&DMatrix<f64>>,
                 ks: &mut DVector<f64>,
                 a: &mut DMatrix<f64>,
                 b: &mut DMatrix<f64>| {
        model.flow_into(xs.as_slice(), u.as_slice(), ks.as_mut_slice());
        model.flow_jacobian_into(xs.as_slice(), u.as_slice(), a.as_mut_slice());
        model.control_matrix_into(xs.as_slice(), b.as_mut_slice());
        match (prev_x, prev_u) {
            (Some(px), Some(pu)) => ((&*a) * (&id + px * c), (&*a) * (pu * c) + &*b),
            _ => (a.clone(), b.clone()),
        }
    };

    let (k1x, k1u) = stage(x, 0.0, None, None, &mut ks, &mut a, &mut b);
    let k1 = ks.clone();

    let xs = x + &k1 * (0.5 * dt);
    let (k2x, k2u) = stage(&xs, 0.5 * dt, Some(&k1x), Some(&k1u), &mut ks, &mut a, &mut b);
    let k2 = ks.clone();

    let xs = x + &k2 * (0.5 * dt);
    let (k3x, k3u) = stage(&xs, 0.5 * dt, Some(&k2x), Some(&k2u), &mut ks, &mut a, &mut b);
    let k3 = ks.clone();

    let xs = x + &k3 * dt;
    let (k4x, k4u) = stage(&xs, dt, Some(&k3x), Some(&k3u), &mut ks, &mut a, &mut b);
    let k4 = ks.clone();

    let mut next = x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0);
    let mut fx = &id + (&k1x + &k2x * 2.0 + &k3x * 2.0 + &k4x) * (dt / 6.0);
    let mut fu = (&k1u + &k2u * 2.0 + &k3u * 2.0 + &k4u) * (dt / 6.0);

    for &i in model.periodic_dims() {
        next[i] = wrap_angle(next[i]);
    }
    for &i in model.clamped_dims() {
        let v = next[i].clamp(model.state_lo()[i], model.state_hi()[i]);
        if v != next[i] {
            next[i] = v;
            fx.row_mut(i).fill(0.0);
            fu.row_mut(i).fill(0.0);
        }
    }
    (next, fx, fu)
}

/// Scratch for allocation-free Hamiltonian evaluation in grid sweeps.
#[derive(Debug, Clone)]
pub struct HamiltonianWorkspace {
    drift: Vec<f64>,
    bmat: Vec<f64>,
}

impl HamiltonianWorkspace {
    pub fn new(model: &dyn Dynamics) -> Self {
        HamiltonianWorkspace {
            drift: vec![0.0; model.state_dim()],
            bmat: vec![0.0; model.state_dim() * model.control_dim()],
        }
    }
}

/// `max_u p . f(x, u)` over the control box, and an attaining control.
///
/// For control-affine dynamics the maximizer is bang-bang per channel:
/// `u_j = hi_j` when the coefficient of `u_j` in `p . f` is positive, else
/// `lo_j` (ties, including `p = 0`, resolve to `lo_j`).
pub fn hamiltonian_max(
    model: &dyn Dynamics,
    x: &State,
    p: &DVector<f64>,
) -> Result<(f64, Control), DynamicsError> {
    check_dims(model, x.as_slice(), None)?;
    if p.len() != model.state_dim() {
        return Err(DynamicsError::CostateDim { expected: model.state_dim(), got: p.len() });
    }
    let mut ws = HamiltonianWorkspace::new(model);
    let mut u_star = DVector::zeros(model.control_dim());
    let h = hamiltonian_max_into(model, x.as_slice(), p.as_slice(), &mut ws, u_star.as_mut_slice());
    Ok((h, u_star))
}

/// Allocation-free core of [`hamiltonian_max`].
pub fn hamiltonian_max_into(
    model: &dyn Dynamics,
    x: &[f64],
    p: &[f64],
    ws: &mut HamiltonianWorkspace,
    u_star: &mut [f64],
) -> f64 {
    hamiltonian_max_bounded_into(model, x, p, model.control_lo(), model.control_hi(), ws, u_star)
}

/// [`hamiltonian_max_into`] with an explicit control box, for callers that
/// restrict the admissible set (e.g. at simulation-box boundaries of
/// clamped state dimensions, where the flow may not point outward).
pub fn hamiltonian_max_bounded_into(
    model: &dyn Dynamics,
    x: &[f64],
    p: &[f64],
    lo: &[f64],
    hi: &[f64],
    ws: &mut HamiltonianWorkspace,
    u_star: &mut [f64],
) -> f64 {
    let n = model.state_dim();
    let m = model.control_dim();
    model.drift_into(x, &mut ws.drift);
    model.control_matrix_into(x, &mut ws.bmat);
    let mut h = 0.0;
    for i in 0..n {
        h += p[i] * ws.drift[i];
    }
    for j in 0..m {
        let mut coeff = 0.0;
        for i in 0..n {
            coeff += p[i] * ws.bmat[j * n + i];
        }
        let u = if coeff > 0.0 { hi[j] } else { lo[j] };
        u_star[j] = u;
        h += coeff * u;
    }
    h
}

/// Shrink a control box in place so the flow cannot point outward along
/// `axis` at a simulation-box edge. Mirrors the post-step clamp of the
/// simulator: a clamped dimension sitting on its bound cannot move past it.
///
/// Only purely control-driven axes (zero drift, one driving channel) are
/// restricted; anything else is left alone.
pub fn restrict_controls_at_boundary(
    model: &dyn Dynamics,
    x: &[f64],
    axis: usize,
    at_upper: bool,
    ws: &mut HamiltonianWorkspace,
    lo: &mut [f64],
    hi: &mut [f64],
) {
    let n = model.state_dim();
    let m = model.control_dim();
    model.drift_into(x, &mut ws.drift);
    if ws.drift[axis] != 0.0 {
        return;
    }
    model.control_matrix_into(x, &mut ws.bmat);
    let mut driver = None;
    for j in 0..m {
        if ws.bmat[j * n + axis] != 0.0 {
            if driver.is_some() {
                return; // coupled channels: leave the box alone
            }
            driver = Some(j);
        }
    }
    let Some(j) = driver else { return };
    let gain = ws.bmat[j * n + axis];
    // Outward flow is f_axis > 0 at the upper bound, < 0 at the lower.
    if (gain > 0.0) == at_upper {
        hi[j] = hi[j].min(0.0).max(lo[j]);
    } else {
        lo[j] = lo[j].max(0.0).min(hi[j]);
    }
}

/// Per-axis bound on `|f_i(x, u)|` over admissible controls at a fixed
/// state. Exact for control-affine systems (the max sits on a corner of the
/// control box).
pub fn flow_component_bound(
    model: &dyn Dynamics,
    x: &[f64],
    ws: &mut HamiltonianWorkspace,
    out: &mut [f64],
) {
    let n = model.state_dim();
    let m = model.control_dim();
    model.drift_into(x, &mut ws.drift);
    model.control_matrix_into(x, &mut ws.bmat);
    for i in 0..n {
        // max over the control box of |a_i + sum_j B_ij u_j| splits per
        // channel because each term's sign can be chosen independently.
        let mut pos = 0.0;
        let mut neg = 0.0;
        for j in 0..m {
            let bij = ws.bmat[j * n + i];
            let (plo, phi) = (bij * model.control_lo()[j], bij * model.control_hi()[j]);
            pos += plo.max(phi);
            neg += plo.min(phi);
        }
        out[i] = (ws.drift[i] + pos).abs().max((ws.drift[i] + neg).abs());
    }
}

/// 4D Dubins car: state `(x, y, heading, speed)`, controls
/// `(turn rate, acceleration)`.
///
/// `dx/dt = (v cos(th), v sin(th), u1, u2)`. Heading wraps; speed is
/// clamped to the simulation box after each step.
#[derive(Debug, Clone)]
pub struct Dubins4d {
    control_lo: [f64; 2],
    control_hi: [f64; 2],
    state_lo: [f64; 4],
    state_hi: [f64; 4],
}

impl Dubins4d {
    pub fn new(control_lo: [f64; 2], control_hi: [f64; 2], state_lo: [f64; 4], state_hi: [f64; 4]) -> Self {
        assert!(control_lo.iter().zip(&control_hi).all(|(lo, hi)| lo < hi), "control_lo must be < control_hi");
        assert!(state_lo.iter().zip(&state_hi).all(|(lo, hi)| lo < hi), "state_lo must be < state_hi");
        Dubins4d { control_lo, control_hi, state_lo, state_hi }
    }
}

impl Dynamics for Dubins4d {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn control_lo(&self) -> &[f64] {
        &self.control_lo
    }
    fn control_hi(&self) -> &[f64] {
        &self.control_hi
    }
    fn state_lo(&self) -> &[f64] {
        &self.state_lo
    }
    fn state_hi(&self) -> &[f64] {
        &self.state_hi
    }
    fn periodic_dims(&self) -> &[usize] {
        &[2]
    }
    fn clamped_dims(&self) -> &[usize] {
        &[3]
    }

    fn flow_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (th, v) = (x[2], x[3]);
        out[0] = v * th.cos();
        out[1] = v * th.sin();
        out[2] = u[0];
        out[3] = u[1];
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let (th, v) = (x[2], x[3]);
        out[0] = v * th.cos();
        out[1] = v * th.sin();
        out[2] = 0.0;
        out[3] = 0.0;
    }

    fn control_matrix_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[2] = 1.0; // column 0: d/du1
        out[4 + 3] = 1.0; // column 1: d/du2
    }

    fn flow_jacobian_into(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        let (th, v) = (x[2], x[3]);
        out.fill(0.0);
        // column-major: out[col * 4 + row]
        out[2 * 4] = -v * th.sin();
        out[2 * 4 + 1] = v * th.cos();
        out[3 * 4] = th.cos();
        out[3 * 4 + 1] = th.sin();
    }
}

/// 1D double integrator: `dx/dt = v`, `dv/dt = u`, `|u| <= u_max`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    control_lo: [f64; 1],
    control_hi: [f64; 1],
    state_lo: [f64; 2],
    state_hi: [f64; 2],
}

impl DoubleIntegrator {
    pub fn new(u_max: f64, state_lo: [f64; 2], state_hi: [f64; 2]) -> Self {
        assert!(u_max > 0.0);
        DoubleIntegrator { control_lo: [-u_max], control_hi: [u_max], state_lo, state_hi }
    }
}

impl Dynamics for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control_lo(&self) -> &[f64] {
        &self.control_lo
    }
    fn control_hi(&self) -> &[f64] {
        &self.control_hi
    }
    fn state_lo(&self) -> &[f64] {
        &self.state_lo
    }
    fn state_hi(&self) -> &[f64] {
        &self.state_hi
    }

    fn flow_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = u[0];
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = 0.0;
    }

    fn control_matrix_into(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }

    fn flow_jacobian_into(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[1 * 2] = 1.0; // dx/dv
    }
}

/// 1D single integrator `dx/dt = u`; with `dt = 1` its RK4 step is exactly
/// `x + u`, handy for hand-checkable optimal control problems.
#[derive(Debug, Clone)]
pub struct SingleIntegrator {
    control_lo: [f64; 1],
    control_hi: [f64; 1],
    state_lo: [f64; 1],
    state_hi: [f64; 1],
}

impl SingleIntegrator {
    pub fn new(u_lo: f64, u_hi: f64, x_lo: f64, x_hi: f64) -> Self {
        SingleIntegrator { control_lo: [u_lo], control_hi: [u_hi], state_lo: [x_lo], state_hi: [x_hi] }
    }
}

impl Dynamics for SingleIntegrator {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control_lo(&self) -> &[f64] {
        &self.control_lo
    }
    fn control_hi(&self) -> &[f64] {
        &self.control_hi
    }
    fn state_lo(&self) -> &[f64] {
        &self.state_lo
    }
    fn state_hi(&self) -> &[f64] {
        &self.state_hi
    }

    fn flow_into(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }

    fn drift_into(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn control_matrix_into(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn flow_jacobian_into(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

/// A model with `f == 0`; every state is a fixed point.
#[derive(Debug, Clone)]
pub struct ZeroDynamics {
    state_lo: Vec<f64>,
    state_hi: Vec<f64>,
    control_lo: [f64; 1],
    control_hi: [f64; 1],
}

impl ZeroDynamics {
    pub fn new(state_lo: Vec<f64>, state_hi: Vec<f64>) -> Self {
        assert_eq!(state_lo.len(), state_hi.len());
        ZeroDynamics { state_lo, state_hi, control_lo: [0.0], control_hi: [1e-12] }
    }
}

impl Dynamics for ZeroDynamics {
    fn state_dim(&self) -> usize {
        self.state_lo.len()
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control_lo(&self) -> &[f64] {
        &self.control_lo
    }
    fn control_hi(&self) -> &[f64] {
        &self.control_hi
    }
    fn state_lo(&self) -> &[f64] {
        &self.state_lo
    }
    fn state_hi(&self) -> &[f64] {
        &self.state_hi
    }

    fn flow_into(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn drift_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn control_matrix_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn flow_jacobian_into(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use std::f64::consts::PI;

    fn dubins() -> Dubins4d {
        Dubins4d::new([-2.0, -1.0], [2.0, 1.0], [-4.0, -4.0, -PI, 0.1], [4.0, 4.0, PI, 3.0])
    }

    #[test]
    fn flow_matches_vector_field() {
        let m = dubins();
        let f = flow(&m, &dvector![0.0, 0.0, 0.0, 2.0], &dvector![0.5, -1.0]).unwrap();
        assert_eq!(f.as_slice(), &[2.0, 0.0, 0.5, -1.0]);

        let f = flow(&m, &dvector![0.0, 0.0, PI / 2.0, 1.0], &dvector![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 1.0, epsilon = 1e-15);
        assert_eq!(f[2], 0.0);
        assert_eq!(f[3], 0.0);

        let f = flow(&m, &dvector![1.0, 1.0, PI, 3.0], &dvector![-1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(f[0], -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], 0.0, epsilon = 1e-12);
        assert_eq!(f[2], -1.0);
        assert_eq!(f[3], 2.0);
    }

    #[test]
    fn flow_rejects_dimension_mismatch() {
        let m = dubins();
        let err = flow(&m, &dvector![0.0, 0.0, 0.0], &dvector![0.0, 0.0]).unwrap_err();
        assert_eq!(err, DynamicsError::StateDim { expected: 4, got: 3 });
        let err = flow(&m, &dvector![0.0, 0.0, 0.0, 1.0], &dvector![0.0]).unwrap_err();
        assert_eq!(err, DynamicsError::ControlDim { expected: 2, got: 1 });
    }

    #[test]
    fn step_is_exact_on_polynomial_flows() {
        let m = dubins();
        // Straight line at constant speed.
        let x1 = step(&m, &dvector![0.0, 0.0, 0.0, 1.0], &dvector![0.0, 0.0], 0.01).unwrap();
        assert_abs_diff_eq!(x1[0], 0.01, epsilon = 1e-15);
        assert_eq!(x1[1], 0.0);
        assert_eq!(x1[2], 0.0);
        assert_eq!(x1[3], 1.0);

        // Acceleration from rest: x(t) = t^2/2, v(t) = t. RK4 integrates this
        // cubic-degree flow exactly.
        let x1 = step(&m, &dvector![0.0, 0.0, 0.0, 0.0], &dvector![0.0, 1.0], 0.01).unwrap();
        assert_abs_diff_eq!(x1[0], 5e-5, epsilon = 1e-16);
        assert_eq!(x1[1], 0.0);
        assert_abs_diff_eq!(x1[3], 0.01, epsilon = 1e-16);
    }

    #[test]
    fn step_error_shrinks_at_fourth_order() {
        let m = dubins();
        let x0 = dvector![0.3, -0.2, 0.4, 1.5];
        let u = dvector![0.7, 0.3];
        let richardson = |dt: f64| {
            let full = step(&m, &x0, &u, dt).unwrap();
            let half = step(&m, &step(&m, &x0, &u, dt / 2.0).unwrap(), &u, dt / 2.0).unwrap();
            (full - half).norm()
        };
        let e1 = richardson(0.2);
        let e2 = richardson(0.1);
        assert!(e1 / e2 >= 8.0, "RK4 Richardson ratio too small: {}", e1 / e2);
    }

    #[test]
    fn step_is_deterministic_and_wraps_heading() {
        let m = dubins();
        let x0 = dvector![0.0, 0.0, PI - 1e-3, 1.0];
        let u = dvector![2.0, 0.0];
        let a = step(&m, &x0, &u, 0.01).unwrap();
        let b = step(&m, &x0, &u, 0.01).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a[2] >= -PI && a[2] < PI, "heading {} not wrapped", a[2]);
        // Crossing +pi lands just above -pi.
        assert!(a[2] < 0.0);
    }

    #[test]
    fn step_clamped_projects_speed() {
        let m = dubins();
        let (x1, clamped) = step_clamped(&m, &dvector![0.0, 0.0, 0.0, 0.15], &dvector![0.0, -1.0], 0.1).unwrap();
        assert!(clamped);
        assert_eq!(x1[3], 0.1);
        let (_, clamped) = step_clamped(&m, &dvector![0.0, 0.0, 0.0, 1.0], &dvector![0.0, 0.5], 0.1).unwrap();
        assert!(!clamped);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        for k in -20..20 {
            let a = 0.37 + k as f64 * 1.1;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{} wrapped to {}", a, w);
            let rem = (a - w).rem_euclid(2.0 * PI);
            assert!(rem.min(2.0 * PI - rem) < 1e-9, "{} and {} differ by non-multiple of 2pi", a, w);
        }
    }

    #[test]
    fn hamiltonian_matches_corner_enumeration() {
        let m = Dubins4d::new([-1.0, -0.5], [1.0, 0.5], [-4.0, -4.0, -PI, 0.1], [4.0, 4.0, PI, 3.0]);
        let x = dvector![0.0, 0.0, 0.0, 1.0];
        let p = dvector![1.0, 0.0, 2.0, -3.0];
        let (h, u_star) = hamiltonian_max(&m, &x, &p).unwrap();
        assert_abs_diff_eq!(h, 4.5, epsilon = 1e-12);
        assert_eq!(u_star.as_slice(), &[1.0, -0.5]);

        // Independent oracle: enumerate the four corners of the control box.
        let mut best = f64::NEG_INFINITY;
        for &u1 in &[-1.0, 1.0] {
            for &u2 in &[-0.5, 0.5] {
                let f = flow(&m, &x, &dvector![u1, u2]).unwrap();
                best = best.max(p.dot(&f));
            }
        }
        assert_abs_diff_eq!(h, best, epsilon = 1e-12);
    }

    #[test]
    fn hamiltonian_zero_costate_returns_lower_corner() {
        let m = dubins();
        let (h, u_star) = hamiltonian_max(&m, &dvector![0.0, 0.0, 0.0, 1.0], &dvector![0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(h, 0.0);
        assert_eq!(u_star.as_slice(), m.control_lo());
    }

    #[test]
    fn hamiltonian_dominates_sampled_controls() {
        let m = dubins();
        let x = dvector![0.5, -1.0, 0.7, 2.0];
        let p = dvector![0.3, -1.2, 0.9, 0.4];
        let (h, _) = hamiltonian_max(&m, &x, &p).unwrap();
        // Cheap deterministic sampler over the control box.
        let mut s = 0x9e3779b97f4a7c15u64;
        let mut unif = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let u = dvector![
                m.control_lo()[0] + unif() * (m.control_hi()[0] - m.control_lo()[0]),
                m.control_lo()[1] + unif() * (m.control_hi()[1] - m.control_lo()[1])
            ];
            let f = flow(&m, &x, &u).unwrap();
            assert!(h >= p.dot(&f) - 1e-12);
        }
    }

    #[test]
    fn flow_bound_is_tight_for_dubins() {
        let m = dubins();
        let mut ws = HamiltonianWorkspace::new(&m);
        let mut out = [0.0; 4];
        flow_component_bound(&m, &[0.0, 0.0, 0.0, 3.0], &mut ws, &mut out);
        assert_abs_diff_eq!(out[0], 3.0, epsilon = 1e-12); // v cos(0)
        assert_abs_diff_eq!(out[2], 2.0, epsilon = 1e-12); // |u1|
        assert_abs_diff_eq!(out[3], 1.0, epsilon = 1e-12); // |u2|
    }

    #[test]
    fn rk4_jacobians_match_finite_differences() {
        let m = dubins();
        let x = dvector![0.3, -0.2, 0.9, 1.4];
        let u = dvector![0.4, -0.3];
        let dt = 0.05;
        let (_, fx, fu) = step_clamped_with_jacobians(&m, &x, &u, dt);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = step(&m, &xp, &u, dt).unwrap();
            let fm = step(&m, &xm, &u, dt).unwrap();
            for i in 0..4 {
                assert_abs_diff_eq!(fx[(i, j)], (fp[i] - fm[i]) / (2.0 * h), epsilon = 1e-6);
            }
        }
        for j in 0..2 {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let fp = step(&m, &x, &up, dt).unwrap();
            let fm = step(&m, &x, &um, dt).unwrap();
            for i in 0..4 {
                assert_abs_diff_eq!(fu[(i, j)], (fp[i] - fm[i]) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }
}
