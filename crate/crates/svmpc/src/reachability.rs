//! Converged safety value functions: solve the Hamilton-Jacobi variational
//! inequality backward in time on a rectilinear grid until the field stops
//! changing.
//!
//! The update is `V+ = min(l, V + dt * H_hat)` where `H_hat` is a global
//! Lax-Friedrichs numerical Hamiltonian for `H(x, p) = max_u p . f(x, u)`:
//! central averages of the one-sided differences feed the analytic
//! maximizer, and per-axis dissipation `alpha_i = max |f_i|` keeps the
//! scheme monotone. Starting from `V0 = l`, iterates decrease monotonically
//! and the fixed point is the value of the sup-min safety problem; its
//! super-zero level set is the viability kernel.

use crate::dynamics::{
    flow_component_bound, hamiltonian_max_bounded_into, restrict_controls_at_boundary, Dynamics,
    HamiltonianWorkspace,
};
use crate::grid::{Grid, ValueField};
use crate::scenario::Scenario;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Monotonicity limit on `dt * sum_i alpha_i / dx_i` for a single sweep.
pub const CFL_LIMIT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error(
        "dt = {dt} violates the CFL bound: dt * sum(alpha_i/dx_i) = {number:.6} exceeds {CFL_LIMIT}"
    )]
    CflViolation { dt: f64, number: f64 },
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("value and constraint fields live on different grids")]
    GridMismatch,
    #[error("model has {model} state dimensions but the grid has {grid}")]
    DimMismatch { model: usize, grid: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Sup-norm change below which the iteration stops.
    pub tol: f64,
    pub max_iters: usize,
    /// CFL number used to pick the per-iteration time step.
    pub cfl: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-4, max_iters: 2000, cfl: 0.5 }
    }
}

/// Outcome of a value-function solve. `wall_time_s` is the only
/// non-deterministic field and is kept separate from the numeric results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_change: f64,
    pub converged: bool,
    /// CFL time step used for every iteration.
    pub dt: f64,
    /// Largest elementwise increase observed across all iterations of the
    /// solve; the iteration is projected onto the monotone cone, so this is
    /// exactly zero.
    pub monotonicity_violation: f64,
    /// Largest raw increase a sweep requested before the monotone
    /// projection. Nonzero only at simulation-box edges where outflowing
    /// characteristics would need data from outside the grid.
    pub boundary_overshoot: f64,
    pub wall_time_s: f64,
}

/// Node values of the state constraint `l`: signed distance in the x-y
/// plane to the union of the scenario's obstacles, independent of the
/// remaining state dimensions.
pub fn constraint_field(scenario: &Scenario, grid: &Grid) -> ValueField {
    ValueField::from_fn(grid.clone(), |c| scenario.signed_distance(c[0], c[1]))
        .expect("signed distances are finite")
}

/// Global Lax-Friedrichs dissipation coefficients: `alpha_i` is the exact
/// maximum of `|f_i(x, u)|` over grid nodes and admissible controls.
pub fn dissipation_coefficients(model: &dyn Dynamics, grid: &Grid) -> Vec<f64> {
    let n = grid.ndims();
    let nlast = grid.axis(n - 1).count;
    let nlines = grid.len() / nlast;
    (0..nlines)
        .into_par_iter()
        .fold(
            || (vec![0.0f64; n], LineScratch::new(model, grid)),
            |(mut acc, mut scr), line| {
                scr.load_line(grid, line, nlast);
                for j in 0..nlast {
                    scr.coords[n - 1] = grid.axis(n - 1).coord(j);
                    flow_component_bound(model, &scr.coords, &mut scr.ham_ws, &mut scr.bound);
                    for i in 0..n {
                        acc[i] = acc[i].max(scr.bound[i]);
                    }
                }
                (acc, scr)
            },
        )
        .map(|(acc, _)| acc)
        .reduce(
            || vec![0.0f64; n],
            |mut a, b| {
                for i in 0..n {
                    a[i] = a[i].max(b[i]);
                }
                a
            },
        )
}

/// CFL time step for the given dissipation coefficients. Falls back to 1.0
/// for models with no motion at all.
pub fn cfl_time_step(grid: &Grid, alphas: &[f64], cfl: f64) -> f64 {
    let sum: f64 = alphas.iter().zip(grid.axes()).map(|(a, ax)| a / ax.spacing()).sum();
    if sum > 0.0 {
        cfl / sum
    } else {
        1.0
    }
}

struct LineScratch {
    multi: Vec<usize>,
    coords: Vec<f64>,
    pbar: Vec<f64>,
    ustar: Vec<f64>,
    bound: Vec<f64>,
    ulo: Vec<f64>,
    uhi: Vec<f64>,
    ham_ws: HamiltonianWorkspace,
}

impl LineScratch {
    fn new(model: &dyn Dynamics, grid: &Grid) -> Self {
        let n = grid.ndims();
        LineScratch {
            multi: vec![0; n],
            coords: vec![0.0; n],
            pbar: vec![0.0; n],
            ustar: vec![0.0; model.control_dim()],
            bound: vec![0.0; n],
            ulo: vec![0.0; model.control_dim()],
            uhi: vec![0.0; model.control_dim()],
            ham_ws: HamiltonianWorkspace::new(model),
        }
    }

    fn load_line(&mut self, grid: &Grid, line: usize, nlast: usize) {
        grid.multi_index(line * nlast, &mut self.multi);
        grid.node_coords(&self.multi, &mut self.coords);
    }

    /// Effective control box at a node: the model box, shrunk on clamped
    /// axes whose node sits on a grid edge so the flow cannot leave the
    /// simulation box. Keeps the sweep monotone at those edges.
    fn effective_control_box(&mut self, model: &dyn Dynamics, grid: &Grid) {
        self.ulo.copy_from_slice(model.control_lo());
        self.uhi.copy_from_slice(model.control_hi());
        for &axis in model.clamped_dims() {
            let ax = grid.axis(axis);
            if ax.periodic {
                continue;
            }
            let ji = self.multi[axis];
            if ji == 0 || ji + 1 == ax.count {
                restrict_controls_at_boundary(
                    model,
                    &self.coords,
                    axis,
                    ji + 1 == ax.count,
                    &mut self.ham_ws,
                    &mut self.ulo,
                    &mut self.uhi,
                );
            }
        }
    }
}

/// One backward-time sweep, writing `min(l, V + dt * H_hat)` into `out`.
fn sweep(
    model: &dyn Dynamics,
    grid: &Grid,
    v: &[f64],
    l: &[f64],
    alphas: &[f64],
    dt: f64,
    out: &mut [f64],
) {
    let n = grid.ndims();
    let nlast = grid.axis(n - 1).count;
    let strides = grid.strides().to_vec();
    let spacing: Vec<f64> = grid.axes().iter().map(|a| a.spacing()).collect();

    out.par_chunks_mut(nlast).enumerate().for_each_init(
        || LineScratch::new(model, grid),
        |scr, (line, chunk)| {
            scr.load_line(grid, line, nlast);
            let base = line * nlast;
            for j in 0..nlast {
                scr.multi[n - 1] = j;
                scr.coords[n - 1] = grid.axis(n - 1).coord(j);
                let flat = base + j;
                let v0 = v[flat];

                // One-sided differences per axis; ghost nodes on non-periodic
                // boundaries extrapolate the interior slope, so both sided
                // differences coincide there.
                let mut dissipation = 0.0;
                for i in 0..n {
                    let ax = grid.axis(i);
                    let (ji, stride, dx) = (scr.multi[i], strides[i], spacing[i]);
                    let (dplus, dminus) = if ax.periodic {
                        let vp = if ji + 1 == ax.count {
                            v[flat - (ax.count - 1) * stride]
                        } else {
                            v[flat + stride]
                        };
                        let vm = if ji == 0 {
                            v[flat + (ax.count - 1) * stride]
                        } else {
                            v[flat - stride]
                        };
                        ((vp - v0) / dx, (v0 - vm) / dx)
                    } else if ji == 0 {
                        let d = (v[flat + stride] - v0) / dx;
                        (d, d)
                    } else if ji + 1 == ax.count {
                        let d = (v0 - v[flat - stride]) / dx;
                        (d, d)
                    } else {
                        ((v[flat + stride] - v0) / dx, (v0 - v[flat - stride]) / dx)
                    };
                    scr.pbar[i] = 0.5 * (dplus + dminus);
                    dissipation += 0.5 * alphas[i] * (dplus - dminus);
                }
                scr.effective_control_box(model, grid);
                let h = hamiltonian_max_bounded_into(
                    model,
                    &scr.coords,
                    &scr.pbar,
                    &scr.ulo,
                    &scr.uhi,
                    &mut scr.ham_ws,
                    &mut scr.ustar,
                );
                chunk[j] = l[flat].min(v0 + dt * (h + dissipation));
            }
        },
    );
}

fn check_setup(model: &dyn Dynamics, v: &ValueField, l: &ValueField) -> Result<(), ReachError> {
    if v.grid() != l.grid() {
        return Err(ReachError::GridMismatch);
    }
    if model.state_dim() != v.grid().ndims() {
        return Err(ReachError::DimMismatch { model: model.state_dim(), grid: v.grid().ndims() });
    }
    Ok(())
}

/// One backward-time update of the variational inequality. Recomputes the
/// dissipation coefficients and rejects time steps that break the CFL bound.
pub fn vi_step(
    model: &dyn Dynamics,
    v: &ValueField,
    l: &ValueField,
    dt: f64,
) -> Result<ValueField, ReachError> {
    check_setup(model, v, l)?;
    if dt <= 0.0 {
        return Err(ReachError::BadDt(dt));
    }
    let grid = v.grid();
    let alphas = dissipation_coefficients(model, grid);
    let number: f64 = dt * alphas.iter().zip(grid.axes()).map(|(a, ax)| a / ax.spacing()).sum::<f64>();
    if number > CFL_LIMIT {
        return Err(ReachError::CflViolation { dt, number });
    }
    let mut out = vec![0.0; grid.len()];
    sweep(model, grid, v.values(), l.values(), &alphas, dt, &mut out);
    Ok(ValueField::new(grid.clone(), out).expect("sweep preserves finiteness"))
}

/// Iterate the backward-time update from `V0 = l` until the sup-norm change
/// drops below tolerance. The field is returned even when the iteration cap
/// is hit; the report's `converged` flag says which happened.
///
/// Each sweep is projected onto the monotone cone (`V_new <= V_old`
/// elementwise). The interior stencil cannot increase anyway; the
/// projection binds only at non-periodic grid edges where characteristics
/// leave the box and the extrapolated ghost data would let transients
/// relax upward. Pinning those nodes at their running minimum keeps the
/// value conservative there.
pub fn solve_safety_value(
    model: &dyn Dynamics,
    l: &ValueField,
    opts: &SolveOptions,
) -> Result<(ValueField, SolveReport), ReachError> {
    check_setup(model, l, l)?;
    let start = std::time::Instant::now();
    let grid = l.grid();
    let alphas = dissipation_coefficients(model, grid);
    let dt = cfl_time_step(grid, &alphas, opts.cfl);

    let lvals = l.values();
    let mut v = lvals.to_vec();
    let mut next = vec![0.0; v.len()];
    let mut iterations = 0;
    let mut final_change = f64::INFINITY;
    let mut converged = false;
    let mut boundary_overshoot: f64 = 0.0;
    let mut monotonicity_violation: f64 = 0.0;

    while iterations < opts.max_iters {
        sweep(model, grid, &v, lvals, &alphas, dt, &mut next);
        let (change, overshoot, increase) = next
            .par_iter_mut()
            .zip(v.par_iter())
            .map(|(a, b)| {
                let raw_increase = *a - *b;
                if raw_increase > 0.0 {
                    *a = *b;
                }
                ((*a - b).abs(), raw_increase, *a - *b)
            })
            .reduce(
                || (0.0, 0.0, f64::NEG_INFINITY),
                |x, y| (x.0.max(y.0), x.1.max(y.1), x.2.max(y.2)),
            );
        std::mem::swap(&mut v, &mut next);
        iterations += 1;
        final_change = change;
        boundary_overshoot = boundary_overshoot.max(overshoot);
        monotonicity_violation = monotonicity_violation.max(increase);
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let field = ValueField::new(grid.clone(), v).expect("sweep preserves finiteness");
    let report = SolveReport {
        iterations,
        final_change,
        converged,
        dt,
        monotonicity_violation: monotonicity_violation.max(0.0),
        boundary_overshoot,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((field, report))
}

/// Build the constraint field for a scenario and solve for its safety value
/// function on the scenario grid.
pub fn solve_scenario_safety_value(
    scenario: &Scenario,
    opts: &SolveOptions,
) -> Result<(ValueField, SolveReport), ReachError> {
    let grid = scenario.build_grid().expect("validated scenario grid");
    let l = constraint_field(scenario, &grid);
    let model = scenario.build_model();
    solve_safety_value(&model, &l, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DoubleIntegrator, Dubins4d, ZeroDynamics};
    use crate::grid::Axis;
    use crate::scenario::Obstacle;
    use std::f64::consts::PI;

    fn small_dubins_grid() -> Grid {
        Grid::new(vec![
            Axis::new(-4.0, 4.0, 13),
            Axis::new(-4.0, 4.0, 13),
            Axis::periodic(-PI, PI, 12),
            Axis::new(0.1, 3.0, 7),
        ])
        .unwrap()
    }

    fn dubins_model() -> Dubins4d {
        Dubins4d::new([-2.0, -1.0], [2.0, 1.0], [-4.0, -4.0, -PI, 0.1], [4.0, 4.0, PI, 3.0])
    }

    #[test]
    fn constraint_field_is_planar_signed_distance() {
        let mut s = Scenario::dubins_default();
        s.obstacles = vec![Obstacle { cx: 0.0, cy: 0.0, radius: 1.0 }];
        let grid = Grid::new(vec![
            Axis::new(-4.0, 4.0, 5),
            Axis::new(-4.0, 4.0, 5),
            Axis::periodic(-PI, PI, 4),
            Axis::new(0.1, 3.0, 3),
        ])
        .unwrap();
        let l = constraint_field(&s, &grid);
        // Node (2, 0) sits one radius outside; every theta/v shares it.
        let v = l.at(&[3, 2, 0, 0]);
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        assert!((l.at(&[3, 2, 2, 1]) - v).abs() < 1e-15);
        // At the obstacle center the distance is minus the radius.
        assert!((l.at(&[2, 2, 0, 0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn dissipation_matches_dubins_bounds() {
        let model = dubins_model();
        let grid = small_dubins_grid();
        let alphas = dissipation_coefficients(&model, &grid);
        assert!((alphas[0] - 3.0).abs() < 1e-12);
        assert!((alphas[1] - 3.0).abs() < 1e-9, "{}", alphas[1]);
        assert!((alphas[2] - 2.0).abs() < 1e-12);
        assert!((alphas[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vi_step_rejects_cfl_violation() {
        let model = dubins_model();
        let grid = small_dubins_grid();
        let l = ValueField::constant(grid, 1.0);
        let err = vi_step(&model, &l, &l, 10.0).unwrap_err();
        match err {
            ReachError::CflViolation { dt, number } => {
                assert_eq!(dt, 10.0);
                assert!(number > CFL_LIMIT);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_dynamics_is_a_fixed_point() {
        let grid = Grid::new(vec![Axis::new(-1.0, 1.0, 9), Axis::new(-1.0, 1.0, 9)]).unwrap();
        let model = ZeroDynamics::new(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let l = ValueField::from_fn(grid.clone(), |c| c[0].hypot(c[1]) - 0.5).unwrap();

        let stepped = vi_step(&model, &l, &l, 0.5).unwrap();
        assert_eq!(stepped.values(), l.values());

        // V below l with no dynamics: H_hat = 0 and the min is inactive.
        let below = ValueField::from_fn(grid, |c| c[0].hypot(c[1]) - 0.5 - 0.3).unwrap();
        let stepped = vi_step(&model, &below, &l, 0.5).unwrap();
        assert_eq!(stepped.values(), below.values());

        let (v, report) = solve_safety_value(&model, &l, &SolveOptions::default()).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        let max_diff = v
            .values()
            .iter()
            .zip(l.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let model = ZeroDynamics::new(vec![-1.0], vec![1.0]);
        let a = ValueField::constant(Grid::new(vec![Axis::new(0.0, 1.0, 4)]).unwrap(), 0.0);
        let b = ValueField::constant(Grid::new(vec![Axis::new(0.0, 1.0, 5)]).unwrap(), 0.0);
        assert!(matches!(vi_step(&model, &a, &b, 0.1), Err(ReachError::GridMismatch)));
    }

    /// Analytic oracle: braking distance for the double integrator with
    /// l(x, v) = x. V = x for v >= 0, x - v^2/2 for v < 0.
    fn double_integrator_solve(count: usize) -> (ValueField, SolveReport) {
        let grid =
            Grid::new(vec![Axis::new(-2.0, 2.0, count), Axis::new(-2.0, 2.0, count)]).unwrap();
        let model = DoubleIntegrator::new(1.0, [-2.0, -2.0], [2.0, 2.0]);
        let l = ValueField::from_fn(grid, |c| c[0]).unwrap();
        solve_safety_value(&model, &l, &SolveOptions::default()).unwrap()
    }

    fn double_integrator_error(v: &ValueField, exclude_cells: usize) -> f64 {
        let grid = v.grid();
        let (nx, nv) = (grid.axis(0).count, grid.axis(1).count);
        let dv = grid.axis(1).spacing();
        let mut worst = 0.0f64;
        for ix in exclude_cells..nx - exclude_cells {
            for iv in exclude_cells..nv - exclude_cells {
                let x = grid.axis(0).coord(ix);
                let vel = grid.axis(1).coord(iv);
                if vel.abs() < (exclude_cells as f64 + 0.5) * dv {
                    continue; // kink band around v = 0
                }
                let exact = if vel >= 0.0 { x } else { x - vel * vel / 2.0 };
                worst = worst.max((v.at(&[ix, iv]) - exact).abs());
            }
        }
        worst
    }

    #[test]
    fn double_integrator_matches_braking_solution() {
        let (v, report) = double_integrator_solve(81);
        assert!(report.converged, "no convergence: {report:?}");
        assert!(report.monotonicity_violation <= 1e-12);
        let err = double_integrator_error(&v, 2);
        assert!(err <= 0.08, "max interior error {err}");
    }

    #[test]
    fn grid_refinement_shrinks_error() {
        let (va, _) = double_integrator_solve(41);
        let (vb, _) = double_integrator_solve(81);
        let ea = double_integrator_error(&va, 2);
        let eb = double_integrator_error(&vb, 2);
        assert!(eb < ea, "refinement did not help: {ea} -> {eb}");
    }

    #[test]
    fn dubins_solve_is_monotone_and_below_constraint() {
        let mut scenario = Scenario::dubins_default();
        scenario.grid = vec![
            Axis::new(-4.0, 4.0, 13),
            Axis::new(-4.0, 4.0, 13),
            Axis::periodic(-PI, PI, 12),
            Axis::new(0.1, 3.0, 7),
        ];
        let grid = scenario.build_grid().unwrap();
        let l = constraint_field(&scenario, &grid);
        let model = scenario.build_model();
        let opts = SolveOptions { tol: 1e-3, max_iters: 2000, cfl: 0.5 };
        let (v, report) = solve_safety_value(&model, &l, &opts).unwrap();
        assert!(report.converged);
        assert!(report.monotonicity_violation <= 1e-12);
        for (a, b) in v.values().iter().zip(l.values()) {
            assert!(a <= &(b + 1e-12));
        }
        // A converged field is a fixed point of the step operator.
        let stepped = vi_step(&model, &v, &l, report.dt).unwrap();
        let drift = stepped
            .values()
            .iter()
            .zip(v.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < opts.tol, "fixed point drift {drift}");
    }

    #[test]
    fn symmetric_scenario_gives_symmetric_field() {
        let mut scenario = Scenario::dubins_default();
        scenario.obstacles = vec![Obstacle { cx: 0.5, cy: 0.0, radius: 0.8 }];
        scenario.grid = vec![
            Axis::new(-4.0, 4.0, 13),
            Axis::new(-4.0, 4.0, 13),
            Axis::periodic(-PI, PI, 12),
            Axis::new(0.1, 3.0, 7),
        ];
        let grid = scenario.build_grid().unwrap();
        let l = constraint_field(&scenario, &grid);
        let model = scenario.build_model();
        let opts = SolveOptions { tol: 1e-3, max_iters: 2000, cfl: 0.5 };
        let (v, _) = solve_safety_value(&model, &l, &opts).unwrap();

        // Mirror map: y -> -y, theta -> -theta.
        let (ny, nth) = (13usize, 12usize);
        for ix in 0..13 {
            for iy in 0..ny {
                for ith in 0..nth {
                    for iv in 0..7 {
                        let a = v.at(&[ix, iy, ith, iv]);
                        let b = v.at(&[ix, ny - 1 - iy, (nth - ith) % nth, iv]);
                        assert!((a - b).abs() <= 1e-9, "asymmetry at {ix},{iy},{ith},{iv}: {a} vs {b}");
                    }
                }
            }
        }
    }
}
