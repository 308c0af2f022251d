//! Method-of-lines time integration of discretized problems and
//! measurement of empirical contraction rates from pairs of perturbed
//! solutions.
//!
//! Space is discretized with upwind convection (differencing against each
//! component's flow velocity) and conservative face-flux diffusion; time
//! uses explicit fourth-order Runge-Kutta behind a CFL guard
//! dt ≤ 0.4·min(Δ/|v|max, Δ²/(2·m·Λmax)).

use crate::error::{Error, Result};
use crate::grid::{centered_gradient, upwind_gradient, Field, Grid};
use crate::model::{BoundaryKind, BoundarySpec, PdeProblem, PointState};
use nalgebra::{DMatrix, DVector};

pub const CFL_SAFETY: f64 = 0.4;

/// Sequence of state snapshots at strictly increasing times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
}

impl Trajectory {
    pub fn last(&self) -> (&f64, &Field) {
        (self.times.last().unwrap(), self.snapshots.last().unwrap())
    }
}

/// Squared-distance series ∫δΦᵀδΦ dV between two runs, trapezoid
/// quadrature over the grid.
#[derive(Debug, Clone)]
pub struct DecaySeries {
    pub times: Vec<f64>,
    pub d2: Vec<f64>,
}

/// Integration controls. `snapshot_every` counts steps between stored
/// snapshots (the final state is always stored).
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub snapshot_every: usize,
    /// Skip the CFL guard (used by tests that deliberately exceed it).
    pub unchecked_dt: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { snapshot_every: 1, unchecked_dt: false }
    }
}

/// Prescribed-value mask for the current state/time: `given[i][k]` is
/// Some(value) when component i at node k is imposed by the boundary data.
fn given_values(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    velocity: &[DMatrix<f64>],
    t: f64,
) -> Result<Vec<Vec<Option<f64>>>> {
    let n = problem.n_state;
    let mut given = vec![vec![None; grid.len()]; n];
    for face in grid.faces() {
        let kind = bounds.kind(face).ok_or_else(|| Error::MissingBoundaryData {
            face: face.to_string(),
            component: 0,
        })?;
        for &k in &grid.face_nodes(face) {
            let x = grid.coords(k);
            match kind {
                BoundaryKind::Dirichlet(f) => {
                    let v = f(&x[..grid.dims()], t);
                    for i in 0..n {
                        given[i][k] = Some(v[i]);
                    }
                }
                BoundaryKind::InflowGiven(f) => {
                    for i in 0..n {
                        if velocity[i][(face.axis, k)] * face.normal_sign() < 0.0 {
                            let v = f(&x[..grid.dims()], t);
                            given[i][k] = Some(v[i]);
                        }
                    }
                }
                BoundaryKind::Neumann(_) => {
                    for i in 0..n {
                        if velocity[i][(face.axis, k)] * face.normal_sign() < 0.0 {
                            return Err(Error::MissingBoundaryData {
                                face: face.to_string(),
                                component: i,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(given)
}

fn eval_velocities(
    problem: &PdeProblem,
    grid: &Grid,
    state: &Field,
    t: f64,
) -> Vec<DMatrix<f64>> {
    let n = problem.n_state;
    let m = problem.n_coord;
    let grads: Vec<Field> = (0..m).map(|a| centered_gradient(grid, state, a)).collect();
    let mut velocity = vec![DMatrix::zeros(m, grid.len()); n];
    let mut phi_k = DVector::zeros(n);
    let mut grad_k = DMatrix::zeros(n, m);
    for k in 0..grid.len() {
        for i in 0..n {
            phi_k[i] = state.data[(i, k)];
            for a in 0..m {
                grad_k[(i, a)] = grads[a].data[(i, k)];
            }
        }
        let x = grid.coords(k);
        let ps = PointState { phi: &phi_k, grad: &grad_k, x: &x[..m], t };
        let vel = (problem.dh_dgrad)(&ps);
        for i in 0..n {
            for a in 0..m {
                velocity[i][(a, k)] = vel[(i, a)];
            }
        }
    }
    velocity
}

/// Face-flux divergence of G for all components: (∇·G)ᵢ at every node.
/// Face gradients use exact two-point differences along the face axis and
/// averaged centered differences across it; Neumann faces contribute the
/// prescribed normal-gradient flux, other outer faces reuse the one-sided
/// interior gradient.
fn diffusion_divergence(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    state: &Field,
    t: f64,
) -> DMatrix<f64> {
    let n = problem.n_state;
    let m = problem.n_coord;
    let g = match &problem.g_flux {
        Some(g) => g.clone(),
        None => return DMatrix::zeros(n, grid.len()),
    };
    let centered: Vec<Field> = (0..m).map(|a| centered_gradient(grid, state, a)).collect();
    let mut out = DMatrix::zeros(n, grid.len());

    // Flux through the face between k and its +axis neighbor.
    let face_flux = |k: usize, nb: usize, axis: usize| -> DMatrix<f64> {
        let dx = grid.spacing(axis);
        let mut grad = DMatrix::zeros(n, m);
        for i in 0..n {
            for a in 0..m {
                if a == axis {
                    grad[(i, a)] = (state.data[(i, nb)] - state.data[(i, k)]) / dx;
                } else {
                    grad[(i, a)] =
                        0.5 * (centered[a].data[(i, k)] + centered[a].data[(i, nb)]);
                }
            }
        }
        let xk = grid.coords(k);
        let xn = grid.coords(nb);
        let mut x_face = [0.0; 2];
        for a in 0..grid.dims() {
            x_face[a] = 0.5 * (xk[a] + xn[a]);
        }
        g(&grad, &x_face[..grid.dims()], t)
    };

    for k in 0..grid.len() {
        let xk = grid.coords(k);
        for axis in 0..m {
            let dx = grid.spacing(axis);
            let hi = grid.neighbor(k, axis, 1);
            let lo = grid.neighbor(k, axis, -1);

            let flux_hi = match hi {
                Some(nb) => face_flux(k, nb, axis),
                None => outer_flux(problem, grid, bounds, state, &centered, k, axis, 1, t, &g, &xk),
            };
            let flux_lo = match lo {
                Some(nb) => face_flux(nb, k, axis),
                None => outer_flux(problem, grid, bounds, state, &centered, k, axis, -1, t, &g, &xk),
            };
            for i in 0..n {
                out[(i, k)] += (flux_hi[(i, axis)] - flux_lo[(i, axis)]) / dx;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn outer_flux(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    _state: &Field,
    centered: &[Field],
    k: usize,
    axis: usize,
    side: i64,
    t: f64,
    g: &crate::model::FluxFn,
    xk: &[f64; 2],
) -> DMatrix<f64> {
    let n = problem.n_state;
    let m = problem.n_coord;
    let face = if side > 0 { crate::grid::Face::high(axis) } else { crate::grid::Face::low(axis) };
    let mut grad = DMatrix::zeros(n, m);
    for i in 0..n {
        for a in 0..m {
            grad[(i, a)] = centered[a].data[(i, k)];
        }
    }
    if let Some(BoundaryKind::Neumann(q)) = bounds.kind(face) {
        // Prescribed outward normal gradient: ∂φ/∂xⱼ = ±q on the face.
        let qv = q(&xk[..grid.dims()], t);
        for i in 0..n {
            grad[(i, axis)] = face.normal_sign() * qv[i];
        }
    }
    g(&grad, &xk[..grid.dims()], t)
}

/// Semi-discrete right-hand side dΦ/dt = −h − p + ∇·G at free nodes;
/// imposed nodes get zero (their values are rewritten from the boundary
/// data after each step).
fn rhs(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    state: &Field,
    t: f64,
) -> Result<DMatrix<f64>> {
    let n = problem.n_state;
    let m = problem.n_coord;
    let velocity = eval_velocities(problem, grid, state, t);
    let given = given_values(problem, grid, bounds, &velocity, t)?;

    // Upwind gradients per component against its own velocity.
    let mut upwind = vec![DMatrix::zeros(m, grid.len()); n];
    for i in 0..n {
        let row = Field { data: DMatrix::from_fn(1, grid.len(), |_, k| state.data[(i, k)]) };
        for a in 0..m {
            let gi = upwind_gradient(grid, &row, &velocity[i], a)?;
            for k in 0..grid.len() {
                upwind[i][(a, k)] = gi.data[(0, k)];
            }
        }
    }

    let diffusion = diffusion_divergence(problem, grid, bounds, state, t);

    let mut out = DMatrix::zeros(n, grid.len());
    let mut phi_k = DVector::zeros(n);
    let mut grad_k = DMatrix::zeros(n, m);
    for k in 0..grid.len() {
        for i in 0..n {
            phi_k[i] = state.data[(i, k)];
            for a in 0..m {
                grad_k[(i, a)] = upwind[i][(a, k)];
            }
        }
        let x = grid.coords(k);
        let ps = PointState { phi: &phi_k, grad: &grad_k, x: &x[..m], t };
        let h = (problem.h)(&ps);
        for i in 0..n {
            out[(i, k)] = if given[i][k].is_some() { 0.0 } else { -h[i] + diffusion[(i, k)] };
        }
    }

    // Constraint terms act by orthogonal projection of the derivative.
    if let Some(p) = &problem.projector {
        let stacked = DVector::from_fn(n * grid.len(), |idx, _| {
            out[(idx / grid.len(), idx % grid.len())]
        });
        let projected = p(&stacked);
        for i in 0..n {
            for k in 0..grid.len() {
                if given[i][k].is_none() {
                    out[(i, k)] = projected[i * grid.len() + k];
                }
            }
        }
    }
    Ok(out)
}

fn impose_bounds(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    state: &mut Field,
    t: f64,
) -> Result<()> {
    let velocity = eval_velocities(problem, grid, state, t);
    let given = given_values(problem, grid, bounds, &velocity, t)?;
    for (i, gi) in given.iter().enumerate() {
        for (k, gv) in gi.iter().enumerate() {
            if let Some(v) = gv {
                state.data[(i, k)] = *v;
            }
        }
    }
    Ok(())
}

/// Largest stable step per the guard dt ≤ 0.4·min(Δ/|v|, Δ²/(2 m Λ)).
pub fn cfl_limit(problem: &PdeProblem, grid: &Grid, state: &Field, t: f64) -> f64 {
    let m = problem.n_coord;
    let velocity = eval_velocities(problem, grid, state, t);
    let vmax = velocity
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));

    // Diffusion scale: largest flux-Jacobian entry at probed gradients.
    let mut diff_scale = 0.0f64;
    if let Some(dg) = &problem.dg_dgrad {
        let grads: Vec<Field> = (0..m).map(|a| centered_gradient(grid, state, a)).collect();
        let mut grad_k = DMatrix::zeros(problem.n_state, m);
        for k in (0..grid.len()).step_by((grid.len() / 16).max(1)) {
            for i in 0..problem.n_state {
                for a in 0..m {
                    grad_k[(i, a)] = grads[a].data[(i, k)];
                }
            }
            let x = grid.coords(k);
            let jac = dg(&grad_k, &x[..m], t);
            diff_scale = jac.iter().fold(diff_scale, |a, &b| a.max(b.abs()));
        }
    } else if let Some(l) = &problem.lambda_bound {
        diff_scale = l.iter().fold(0.0f64, |a, &b| a.max(b));
    }

    let mut limit = f64::INFINITY;
    for axis in 0..grid.dims() {
        let dx = grid.spacing(axis);
        if vmax > 0.0 {
            limit = limit.min(dx / vmax);
        }
        if diff_scale > 0.0 {
            limit = limit.min(dx * dx / (2.0 * m as f64 * diff_scale));
        }
    }
    CFL_SAFETY * limit
}

/// One explicit RK4 step of the semi-discrete system.
pub fn step(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    state: &Field,
    t: f64,
    dt: f64,
) -> Result<Field> {
    step_with(problem, grid, bounds, state, t, dt, RunOptions::default())
}

fn step_with(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    state: &Field,
    t: f64,
    dt: f64,
    opts: RunOptions,
) -> Result<Field> {
    if !opts.unchecked_dt {
        let limit = cfl_limit(problem, grid, state, t);
        if dt > limit {
            return Err(Error::CflViolation { dt, limit });
        }
    }
    let stage = |base: &Field, k: &DMatrix<f64>, scale: f64, ts: f64| -> Result<DMatrix<f64>> {
        let mut s = Field { data: &base.data + k * scale };
        impose_bounds(problem, grid, bounds, &mut s, ts)?;
        rhs(problem, grid, bounds, &s, ts)
    };

    let mut y0 = state.clone();
    impose_bounds(problem, grid, bounds, &mut y0, t)?;
    let k1 = rhs(problem, grid, bounds, &y0, t)?;
    let k2 = stage(&y0, &k1, 0.5 * dt, t + 0.5 * dt)?;
    let k3 = stage(&y0, &k2, 0.5 * dt, t + 0.5 * dt)?;
    let k4 = stage(&y0, &k3, dt, t + dt)?;

    let mut next = Field {
        data: &y0.data + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0),
    };
    impose_bounds(problem, grid, bounds, &mut next, t + dt)?;
    if !next.is_finite() {
        return Err(Error::NonFiniteState { t: t + dt });
    }
    Ok(next)
}

/// Integrate from t0 to t1 with fixed dt (the last step shrinks to land
/// exactly on t1).
pub fn run(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    init: &Field,
    t0: f64,
    t1: f64,
    dt: f64,
    opts: RunOptions,
) -> Result<Trajectory> {
    let mut times = vec![t0];
    let mut snapshots = vec![{
        let mut f = init.clone();
        impose_bounds(problem, grid, bounds, &mut f, t0)?;
        f
    }];
    let mut state = snapshots[0].clone();
    let mut t = t0;
    let mut steps = 0usize;
    while t < t1 - 1e-12 * (t1 - t0).abs().max(1.0) {
        let h = dt.min(t1 - t);
        state = step_with(problem, grid, bounds, &state, t, h, opts)?;
        t += h;
        steps += 1;
        if steps % opts.snapshot_every == 0 || t >= t1 - 1e-12 {
            times.push(t);
            snapshots.push(state.clone());
        }
    }
    Ok(Trajectory { times, snapshots })
}

/// Integrate two solutions of the same problem in lockstep and record
/// ∫(Φa−Φb)ᵀ(Φa−Φb) dV at every step.
pub fn perturbation_experiment(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    init_a: &Field,
    init_b: &Field,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<DecaySeries> {
    let w = grid.quad_weights();
    let d2_of = |a: &Field, b: &Field| -> f64 {
        let mut s = 0.0;
        for k in 0..grid.len() {
            for i in 0..a.n_state() {
                let d = a.data[(i, k)] - b.data[(i, k)];
                s += w[k] * d * d;
            }
        }
        s
    };

    let mut a = init_a.clone();
    let mut b = init_b.clone();
    impose_bounds(problem, grid, bounds, &mut a, t0)?;
    impose_bounds(problem, grid, bounds, &mut b, t0)?;
    let mut times = vec![t0];
    let mut d2 = vec![d2_of(&a, &b)];
    let mut t = t0;
    while t < t1 - 1e-12 * (t1 - t0).abs().max(1.0) {
        let h = dt.min(t1 - t);
        a = step(problem, grid, bounds, &a, t, h)?;
        b = step(problem, grid, bounds, &b, t, h)?;
        t += h;
        times.push(t);
        d2.push(d2_of(&a, &b));
    }
    Ok(DecaySeries { times, d2 })
}

#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub rate: f64,
    pub r_squared: f64,
}

/// Least-squares slope of ½·log d² against t over the window, negated,
/// i.e. the empirical norm convergence rate.
pub fn fit_rate(series: &DecaySeries, window: (f64, f64)) -> Result<RateFit> {
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in series.times.iter().zip(&series.d2) {
        if t >= window.0 - 1e-12 && t <= window.1 + 1e-12 {
            if v <= 0.0 {
                return Err(Error::DegenerateSeries {
                    reason: format!("d2 = {v} at t = {t} is not positive"),
                });
            }
            ts.push(t);
            ys.push(0.5 * v.ln());
        }
    }
    if ts.len() < 2 {
        return Err(Error::DegenerateSeries {
            reason: format!("window [{}, {}] holds {} samples", window.0, window.1, ts.len()),
        });
    }
    let n = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (t, y) in ts.iter().zip(&ys) {
        sxx += (t - tm) * (t - tm);
        sxy += (t - tm) * (y - ym);
        syy += (y - ym) * (y - ym);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateSeries { reason: "window too short".into() });
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { rate: -slope, r_squared })
}

/// CSV export of a decay series.
pub fn decay_csv(series: &DecaySeries) -> String {
    let mut out = String::from("t,d2\n");
    for (t, v) in series.times.iter().zip(&series.d2) {
        out.push_str(&format!(
            "{},{}\n",
            crate::report::fmt_float(*t),
            crate::report::fmt_float(*v)
        ));
    }
    out
}

/// CSV export of a trajectory in long format: one row per (time, node).
pub fn trajectory_csv(traj: &Trajectory, grid: &Grid, names: &[String]) -> String {
    let coord_names: &[&str] = if grid.dims() == 1 { &["x"] } else { &["x", "y"] };
    let mut out = String::from("t,");
    out.push_str(&coord_names.join(","));
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, snap) in traj.times.iter().zip(&traj.snapshots) {
        for k in 0..grid.len() {
            let x = grid.coords(k);
            out.push_str(&crate::report::fmt_float(*t));
            for a in 0..grid.dims() {
                out.push(',');
                out.push_str(&crate::report::fmt_float(x[a]));
            }
            for i in 0..snap.n_state() {
                out.push(',');
                out.push_str(&crate::report::fmt_float(snap.data[(i, k)]));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn no_dynamics() -> PdeProblem {
        PdeProblem::builder(1, 1)
            .h(|_| DVector::zeros(1))
            .dh_dphi(|_| DMatrix::zeros(1, 1))
            .dh_dgrad(|_| DMatrix::zeros(1, 1))
            .build()
            .unwrap()
    }

    fn scalar_decay(rate: f64) -> PdeProblem {
        PdeProblem::builder(1, 1)
            .h(move |s| DVector::from_element(1, rate * s.phi[0]))
            .dh_dphi(move |_| DMatrix::from_element(1, 1, rate))
            .dh_dgrad(|_| DMatrix::zeros(1, 1))
            .build()
            .unwrap()
    }

    fn heat_problem(g: f64) -> PdeProblem {
        PdeProblem::builder(1, 1)
            .h(|_| DVector::zeros(1))
            .dh_dphi(|_| DMatrix::zeros(1, 1))
            .dh_dgrad(|_| DMatrix::zeros(1, 1))
            .g_flux(move |grad, _x, _t| grad.map(|v| g * v))
            .dg_dgrad(move |_g, _x, _t| DMatrix::from_element(1, 1, g))
            .lambda_bound(DMatrix::from_element(1, 1, g))
            .build()
            .unwrap()
    }

    fn neumann_zero(grid: &Grid) -> BoundarySpec {
        BoundarySpec::all_neumann_zero(grid, 1)
    }

    #[test]
    fn zero_dynamics_leaves_state_unchanged() {
        let grid = Grid::line(1.0, 11).unwrap();
        let problem = no_dynamics();
        let init = Field::from_fn(&grid, 1, |x| vec![x[0].sin()]);
        let traj =
            run(&problem, &grid, &neumann_zero(&grid), &init, 0.0, 0.5, 0.1, RunOptions::default())
                .unwrap();
        for snap in &traj.snapshots {
            assert_relative_eq!((&snap.data - &init.data).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn rk4_matches_scalar_exponential() {
        // dφ/dt = −2φ from 1: φ(0.01) = e^{−0.02}, local error < 1e-10.
        let grid = Grid::line(1.0, 3).unwrap();
        let problem = scalar_decay(2.0);
        let mut init = Field::zeros(1, &grid);
        init.data.fill(1.0);
        let next = step(&problem, &grid, &neumann_zero(&grid), &init, 0.0, 0.01).unwrap();
        let exact = (-0.02f64).exp();
        for k in 0..grid.len() {
            assert!((next.data[(0, k)] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn rk4_error_shrinks_sixteenfold_when_dt_halves() {
        let grid = Grid::line(1.0, 3).unwrap();
        let problem = scalar_decay(2.0);
        let mut init = Field::zeros(1, &grid);
        init.data.fill(1.0);
        let bounds = neumann_zero(&grid);
        let exact = (-2.0f64).exp();
        let mut errs = Vec::new();
        for dt in [0.05, 0.025] {
            let traj =
                run(&problem, &grid, &bounds, &init, 0.0, 1.0, dt, RunOptions::default()).unwrap();
            errs.push((traj.snapshots.last().unwrap().data[(0, 0)] - exact).abs());
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 12.0 && ratio < 20.0, "ratio = {ratio}");
    }

    #[test]
    fn heat_equation_matches_analytic_mode_decay() {
        // ∂φ/∂t = φ'' on [0, π], φ₀ = sin x, Dirichlet 0: φ(t) = e^{−t}sin x.
        let grid = Grid::line(std::f64::consts::PI, 201).unwrap();
        let problem = heat_problem(1.0);
        let bounds = BoundarySpec::all_dirichlet(&grid, Arc::new(|_x, _t| DVector::zeros(1)));
        let init = Field::from_fn(&grid, 1, |x| vec![x[0].sin()]);
        let dt = 0.8 * cfl_limit(&problem, &grid, &init, 0.0);
        let traj = run(
            &problem,
            &grid,
            &bounds,
            &init,
            0.0,
            1.0,
            dt,
            RunOptions { snapshot_every: usize::MAX, unchecked_dt: false },
        )
        .unwrap();
        let (tf, last) = traj.last();
        let decay = (-tf).exp();
        let mut max_err = 0.0f64;
        for k in 0..grid.len() {
            let exact = decay * grid.coords(k)[0].sin();
            max_err = max_err.max((last.data[(0, k)] - exact).abs());
        }
        assert!(max_err < 1e-3, "max_err = {max_err}");
    }

    #[test]
    fn advected_bump_translates() {
        // v = 1 transport of a smooth bump over t = 0.5: the exact solution
        // translates by 0.5; first-order upwinding smears it O(Δ).
        let grid = Grid::line(2.0, 401).unwrap();
        let problem = PdeProblem::builder(1, 1)
            .h(|s| DVector::from_element(1, s.grad[(0, 0)]))
            .dh_dphi(|_| DMatrix::zeros(1, 1))
            .dh_dgrad(|_| DMatrix::from_element(1, 1, 1.0))
            .build()
            .unwrap();
        let mut bounds = neumann_zero(&grid);
        bounds.set(
            crate::grid::Face::low(0),
            BoundaryKind::InflowGiven(Arc::new(|_x, _t| DVector::zeros(1))),
        );
        let bump = |x: f64, c: f64| (-(x - c) * (x - c) / 0.02).exp();
        let init = Field::from_fn(&grid, 1, |x| vec![bump(x[0], 0.5)]);
        let dt = 0.9 * cfl_limit(&problem, &grid, &init, 0.0);
        let traj = run(
            &problem,
            &grid,
            &bounds,
            &init,
            0.0,
            0.5,
            dt,
            RunOptions { snapshot_every: usize::MAX, unchecked_dt: false },
        )
        .unwrap();
        let (_, last) = traj.last();
        // Peak near x = 1.0 and bounded smear error against the translated
        // reference.
        let mut peak_x = 0.0;
        let mut peak_v = 0.0;
        let mut l2_err = 0.0;
        for k in 0..grid.len() {
            let x = grid.coords(k)[0];
            let v = last.data[(0, k)];
            if v > peak_v {
                peak_v = v;
                peak_x = x;
            }
            let exact = bump(x, 1.0);
            l2_err += (v - exact) * (v - exact) * grid.spacing(0);
        }
        assert!((peak_x - 1.0).abs() < 0.02, "peak at {peak_x}");
        assert!(l2_err.sqrt() < 0.2, "l2 err {}", l2_err.sqrt());
    }

    #[test]
    fn cfl_violation_detected() {
        let grid = Grid::line(1.0, 51).unwrap();
        let problem = heat_problem(1.0);
        let bounds = BoundarySpec::all_dirichlet(&grid, Arc::new(|_x, _t| DVector::zeros(1)));
        let init = Field::zeros(1, &grid);
        let limit = cfl_limit(&problem, &grid, &init, 0.0);
        assert!(matches!(
            step(&problem, &grid, &bounds, &init, 0.0, 10.0 * limit),
            Err(Error::CflViolation { .. })
        ));
    }

    #[test]
    fn identical_inits_give_zero_series() {
        let grid = Grid::line(1.0, 21).unwrap();
        let problem = scalar_decay(1.0);
        let init = Field::from_fn(&grid, 1, |x| vec![x[0]]);
        let series = perturbation_experiment(
            &problem,
            &grid,
            &neumann_zero(&grid),
            &init,
            &init,
            0.0,
            0.2,
            0.01,
        )
        .unwrap();
        assert!(series.d2.iter().all(|&v| v == 0.0));
        assert!(matches!(
            fit_rate(&series, (0.0, 0.2)),
            Err(Error::DegenerateSeries { .. })
        ));
    }

    #[test]
    fn fit_rate_synthetic_exponential() {
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let d2: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        let fit = fit_rate(&DecaySeries { times, d2 }, (0.0, 5.0)).unwrap();
        assert_relative_eq!(fit.rate, 1.0, epsilon = 1e-9);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn fit_rate_constant_series_is_zero() {
        let times: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d2 = vec![3.0; 10];
        let fit = fit_rate(&DecaySeries { times, d2 }, (0.0, 9.0)).unwrap();
        assert_relative_eq!(fit.rate, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compressing_transport_decays_at_certificate_rate() {
        // v(x) = −x on [0, 1]: certificate rate 0.5 for the norm, so d²
        // decays like e^{−2·0.5·t}; the discrete energy must also be
        // non-increasing at every step.
        let grid = Grid::line(1.0, 201).unwrap();
        let problem = PdeProblem::builder(1, 1)
            .h(|s| DVector::from_element(1, -s.x[0] * s.grad[(0, 0)]))
            .dh_dphi(|_| DMatrix::zeros(1, 1))
            .dh_dgrad(|s| DMatrix::from_element(1, 1, -s.x[0]))
            .build()
            .unwrap();
        let mut bounds = BoundarySpec::all_neumann_zero(&grid, 1);
        bounds.set(
            crate::grid::Face::high(0),
            BoundaryKind::InflowGiven(Arc::new(|_x, _t| DVector::zeros(1))),
        );
        let init_a = Field::from_fn(&grid, 1, |x| {
            vec![(std::f64::consts::FRAC_PI_2 * x[0]).cos()]
        });
        let init_b = Field::from_fn(&grid, 1, |x| {
            vec![0.8 * (std::f64::consts::FRAC_PI_2 * x[0]).cos() + 0.05 * (3.0 * x[0]).sin()]
        });
        let dt = 0.002;
        let series = perturbation_experiment(
            &problem, &grid, &bounds, &init_a, &init_b, 0.0, 1.5, dt,
        )
        .unwrap();
        for w in series.d2.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "energy grew: {} -> {}", w[0], w[1]);
        }
        let fit = fit_rate(&series, (0.2, 1.2)).unwrap();
        assert!(fit.rate > 0.45 && fit.rate < 0.55, "rate = {}", fit.rate);
        // e^{−2·0.5·t} envelope with 10% headroom.
        let end = *series.d2.last().unwrap();
        assert!(end <= series.d2[0] * (-1.0 * 1.5f64).exp() * 1.1);
    }

    #[test]
    fn periodic_boundary_forcing_approaches_periodic_solution() {
        // Contracting reaction with boundary-independent rate driven by
        // periodic Dirichlet data: snapshots T apart converge to each other.
        let grid = Grid::line(1.0, 31).unwrap();
        let problem = PdeProblem::builder(1, 1)
            .h(move |s| DVector::from_element(1, 2.0 * s.phi[0] + s.grad[(0, 0)]))
            .dh_dphi(|_| DMatrix::from_element(1, 1, 2.0))
            .dh_dgrad(|_| DMatrix::from_element(1, 1, 1.0))
            .build()
            .unwrap();
        let period = 0.5;
        let mut bounds = BoundarySpec::all_neumann_zero(&grid, 1);
        bounds.set(
            crate::grid::Face::low(0),
            BoundaryKind::InflowGiven(Arc::new(move |_x, t| {
                DVector::from_element(1, (std::f64::consts::TAU * t / period).sin())
            })),
        );
        let init = Field::from_fn(&grid, 1, |x| vec![x[0]]);
        let dt = 0.005;
        let traj = run(
            &problem,
            &grid,
            &bounds,
            &init,
            0.0,
            4.0 * period,
            dt,
            RunOptions { snapshot_every: (period / dt).round() as usize, unchecked_dt: false },
        )
        .unwrap();
        let n = traj.snapshots.len();
        assert!(n >= 4);
        let dist = |a: &Field, b: &Field| (&a.data - &b.data).norm();
        let d1 = dist(&traj.snapshots[1], &traj.snapshots[2]);
        let d2 = dist(&traj.snapshots[n - 2], &traj.snapshots[n - 1]);
        assert!(d2 < 0.2 * d1, "period-distance did not shrink: {d1} -> {d2}");
    }
}
