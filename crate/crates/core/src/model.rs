//! Problem data model: right-hand sides, their derivatives, boundary
//! specifications, and linear constraint projectors for dynamics of the
//! form ∂φᵢ/∂t + hᵢ(Φ, ∇φᵢ, x, t) + pᵢ = ∇·Gᵢ(∇Φ, x, t).
//!
//! All callables must be pure and thread-safe; problems are immutable
//! once built.

use crate::error::{Error, Result};
use crate::grid::{Face, Grid};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Everything a pointwise callable may look at: state values, per-component
/// spatial gradients (row i = ∇φᵢ), coordinates and time.
///
/// By the structure of the dynamics, component i of `h` may read the full
/// state vector but only row i of `grad`.
pub struct PointState<'a> {
    pub phi: &'a DVector<f64>,
    /// n_state × dims matrix; row i holds ∇φᵢ.
    pub grad: &'a DMatrix<f64>,
    pub x: &'a [f64],
    pub t: f64,
}

pub type RhsFn = Arc<dyn Fn(&PointState) -> DVector<f64> + Send + Sync>;
pub type JacFn = Arc<dyn Fn(&PointState) -> DMatrix<f64> + Send + Sync>;
/// Returns the n_state × dims matrix whose row i is ∂hᵢ/∂∇φᵢ, the flow
/// velocity of component i.
pub type VelFn = Arc<dyn Fn(&PointState) -> DMatrix<f64> + Send + Sync>;
/// Flux G as an n_state × dims matrix from (∇Φ, x, t).
pub type FluxFn = Arc<dyn Fn(&DMatrix<f64>, &[f64], f64) -> DMatrix<f64> + Send + Sync>;
/// Flux Jacobian ∂G_ij/∂∇ₖφ_l flattened to (i·m + j, l·m + k).
pub type FluxJacFn = Arc<dyn Fn(&DMatrix<f64>, &[f64], f64) -> DMatrix<f64> + Send + Sync>;
/// Orthogonal projector onto the constraint plane, acting on the stacked
/// state vector (component-major: all nodes of component 0, then 1, ...).
pub type ProjectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type BoundaryFn = Arc<dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync>;

/// The tuple (h, G, constraints, boundary data) with all partial
/// derivatives supplied as callables.
#[derive(Clone)]
pub struct PdeProblem {
    pub n_state: usize,
    pub n_coord: usize,
    pub names: Vec<String>,
    pub h: RhsFn,
    pub dh_dphi: JacFn,
    pub dh_dgrad: VelFn,
    pub g_flux: Option<FluxFn>,
    pub dg_dgrad: Option<FluxJacFn>,
    /// Entry (i, j) holds Λ_ijij, the nonnegative lower bound of
    /// ∂G_ij/∂∇ⱼφᵢ. Off-pair entries of the full tensor are zero by
    /// construction.
    pub lambda_bound: Option<DMatrix<f64>>,
    pub projector: Option<ProjectorFn>,
    /// Box of state values used when probing callables (validation,
    /// certificate defaults): per-component (lo, hi).
    pub phi_box: (DVector<f64>, DVector<f64>),
    /// Box of gradient values used when probing callables.
    pub grad_box: (DMatrix<f64>, DMatrix<f64>),
}

impl PdeProblem {
    pub fn builder(n_state: usize, n_coord: usize) -> PdeProblemBuilder {
        PdeProblemBuilder::new(n_state, n_coord)
    }

    /// Flow velocity matrix (dims × nodes) of one component over a field.
    pub fn velocity_of_component(
        &self,
        grid: &Grid,
        phi: &crate::grid::Field,
        grad: &[crate::grid::Field],
        t: f64,
        component: usize,
    ) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(grid.dims(), grid.len());
        let mut phi_k = DVector::zeros(self.n_state);
        let mut grad_k = DMatrix::zeros(self.n_state, self.n_coord);
        for k in 0..grid.len() {
            for i in 0..self.n_state {
                phi_k[i] = phi.data[(i, k)];
                for a in 0..self.n_coord {
                    grad_k[(i, a)] = grad[a].data[(i, k)];
                }
            }
            let x = grid.coords(k);
            let ps = PointState { phi: &phi_k, grad: &grad_k, x: &x[..grid.dims()], t };
            let vel = (self.dh_dgrad)(&ps);
            for a in 0..grid.dims() {
                v[(a, k)] = vel[(component, a)];
            }
        }
        v
    }
}

pub struct PdeProblemBuilder {
    n_state: usize,
    n_coord: usize,
    names: Option<Vec<String>>,
    h: Option<RhsFn>,
    dh_dphi: Option<JacFn>,
    dh_dgrad: Option<VelFn>,
    g_flux: Option<FluxFn>,
    dg_dgrad: Option<FluxJacFn>,
    lambda_bound: Option<DMatrix<f64>>,
    projector: Option<ProjectorFn>,
    phi_box: Option<(DVector<f64>, DVector<f64>)>,
    grad_box: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl PdeProblemBuilder {
    fn new(n_state: usize, n_coord: usize) -> Self {
        PdeProblemBuilder {
            n_state,
            n_coord,
            names: None,
            h: None,
            dh_dphi: None,
            dh_dgrad: None,
            g_flux: None,
            dg_dgrad: None,
            lambda_bound: None,
            projector: None,
            phi_box: None,
            grad_box: None,
        }
    }

    pub fn names(mut self, names: Vec<String>) -> Self {
        self.names = Some(names);
        self
    }

    pub fn h(mut self, f: impl Fn(&PointState) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.h = Some(Arc::new(f));
        self
    }

    pub fn dh_dphi(
        mut self,
        f: impl Fn(&PointState) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.dh_dphi = Some(Arc::new(f));
        self
    }

    pub fn dh_dgrad(
        mut self,
        f: impl Fn(&PointState) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.dh_dgrad = Some(Arc::new(f));
        self
    }

    pub fn g_flux(
        mut self,
        f: impl Fn(&DMatrix<f64>, &[f64], f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.g_flux = Some(Arc::new(f));
        self
    }

    pub fn dg_dgrad(
        mut self,
        f: impl Fn(&DMatrix<f64>, &[f64], f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.dg_dgrad = Some(Arc::new(f));
        self
    }

    pub fn lambda_bound(mut self, l: DMatrix<f64>) -> Self {
        self.lambda_bound = Some(l);
        self
    }

    pub fn projector(
        mut self,
        p: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.projector = Some(Arc::new(p));
        self
    }

    pub fn phi_box(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.phi_box = Some((lo, hi));
        self
    }

    pub fn grad_box(mut self, lo: DMatrix<f64>, hi: DMatrix<f64>) -> Self {
        self.grad_box = Some((lo, hi));
        self
    }

    pub fn build(self) -> Result<PdeProblem> {
        let n = self.n_state;
        let m = self.n_coord;
        if n == 0 || m == 0 || m > 2 {
            return Err(Error::BadParams {
                reason: format!("n_state={n}, n_coord={m} out of range"),
            });
        }
        if let Some(l) = &self.lambda_bound {
            if l.nrows() != n || l.ncols() != m {
                return Err(Error::ShapeMismatch {
                    what: format!("lambda_bound must be {n}x{m}"),
                });
            }
            if l.iter().any(|&v| v < 0.0) {
                return Err(Error::BadParams {
                    reason: "lambda_bound entries must be nonnegative".into(),
                });
            }
        }
        let names = self
            .names
            .unwrap_or_else(|| (0..n).map(|i| format!("phi{i}")).collect());
        if names.len() != n {
            return Err(Error::ShapeMismatch { what: "component name count".into() });
        }
        Ok(PdeProblem {
            n_state: n,
            n_coord: m,
            names,
            h: self.h.ok_or_else(|| Error::BadParams { reason: "h is required".into() })?,
            dh_dphi: self
                .dh_dphi
                .ok_or_else(|| Error::BadParams { reason: "dh_dphi is required".into() })?,
            dh_dgrad: self
                .dh_dgrad
                .ok_or_else(|| Error::BadParams { reason: "dh_dgrad is required".into() })?,
            g_flux: self.g_flux,
            dg_dgrad: self.dg_dgrad,
            lambda_bound: self.lambda_bound,
            projector: self.projector,
            phi_box: self.phi_box.unwrap_or((
                DVector::from_element(n, -1.0),
                DVector::from_element(n, 1.0),
            )),
            grad_box: self.grad_box.unwrap_or((
                DMatrix::from_element(n, m, -1.0),
                DMatrix::from_element(n, m, 1.0),
            )),
        })
    }
}

/// Boundary condition of one face.
#[derive(Clone)]
pub enum BoundaryKind {
    /// Value prescribed for all components, fn of (x, t).
    Dirichlet(BoundaryFn),
    /// Outward normal gradient prescribed for all components.
    Neumann(BoundaryFn),
    /// Value prescribed, applied only where the face is inflowing.
    InflowGiven(BoundaryFn),
}

impl BoundaryKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryKind::Dirichlet(_) => "dirichlet",
            BoundaryKind::Neumann(_) => "neumann",
            BoundaryKind::InflowGiven(_) => "inflow-given",
        }
    }

    pub fn has_values(&self) -> bool {
        !matches!(self, BoundaryKind::Neumann(_))
    }
}

/// Per-face boundary classification for a rectangular domain.
#[derive(Clone)]
pub struct BoundarySpec {
    conds: Vec<(Face, BoundaryKind)>,
}

impl BoundarySpec {
    pub fn new(conds: Vec<(Face, BoundaryKind)>) -> Self {
        BoundarySpec { conds }
    }

    /// Same condition on every face of the grid.
    pub fn uniform(grid: &Grid, make: impl Fn() -> BoundaryKind) -> Self {
        BoundarySpec { conds: grid.faces().into_iter().map(|f| (f, make())).collect() }
    }

    pub fn all_dirichlet(grid: &Grid, f: BoundaryFn) -> Self {
        Self::uniform(grid, || BoundaryKind::Dirichlet(f.clone()))
    }

    pub fn all_neumann_zero(grid: &Grid, n_state: usize) -> Self {
        Self::uniform(grid, || {
            BoundaryKind::Neumann(Arc::new(move |_x, _t| DVector::zeros(n_state)))
        })
    }

    pub fn all_inflow_given(grid: &Grid, f: BoundaryFn) -> Self {
        Self::uniform(grid, || BoundaryKind::InflowGiven(f.clone()))
    }

    pub fn kind(&self, face: Face) -> Option<&BoundaryKind> {
        self.conds.iter().find(|(f, _)| *f == face).map(|(_, k)| k)
    }

    pub fn set(&mut self, face: Face, kind: BoundaryKind) {
        if let Some(entry) = self.conds.iter_mut().find(|(f, _)| *f == face) {
            entry.1 = kind;
        } else {
            self.conds.push((face, kind));
        }
    }

    /// True when both faces of `axis` carry Dirichlet values.
    pub fn axis_is_dirichlet(&self, axis: usize) -> bool {
        [Face::low(axis), Face::high(axis)].iter().all(|&f| {
            matches!(self.kind(f), Some(BoundaryKind::Dirichlet(_)))
        })
    }
}

/// Validation output: derivative-consistency residuals and boundary
/// coverage.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub jacobian_residual: f64,
    pub velocity_residual: f64,
    pub faces: Vec<FaceReport>,
    pub projector_checked: bool,
}

#[derive(Debug, Clone)]
pub struct FaceReport {
    pub face: Face,
    pub kind: String,
    /// Components for which some node of the face is inflowing.
    pub inflowing: Vec<usize>,
    pub covered: bool,
}

const FD_TOL: f64 = 1e-5;
const PROJ_TOL: f64 = 1e-10;

fn fd_step(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

fn sample_in(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Check the supplied Jacobians against central finite differences of `h`
/// on random probes drawn from the problem's state box, verify the
/// constraint projector (linearity, idempotence, symmetry), and confirm
/// that every inflowing face carries value data.
pub fn validate_problem(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    t: f64,
) -> Result<ValidationReport> {
    if grid.dims() != problem.n_coord {
        return Err(Error::ShapeMismatch {
            what: format!("problem has {} coords, grid has {}", problem.n_coord, grid.dims()),
        });
    }
    let n = problem.n_state;
    let m = problem.n_coord;
    let mut rng = ChaCha8Rng::seed_from_u64(0x614d);

    let mut jac_res: f64 = 0.0;
    let mut vel_res: f64 = 0.0;
    for _probe in 0..5 {
        let node = rng.gen_range(0..grid.len());
        let x = grid.coords(node);
        let x = &x[..m];
        let mut phi = DVector::zeros(n);
        for i in 0..n {
            phi[i] = sample_in(problem.phi_box.0[i], problem.phi_box.1[i], &mut rng);
        }
        let mut grad = DMatrix::zeros(n, m);
        for i in 0..n {
            for a in 0..m {
                grad[(i, a)] = sample_in(problem.grad_box.0[(i, a)], problem.grad_box.1[(i, a)], &mut rng);
            }
        }

        let supplied_jac = (problem.dh_dphi)(&PointState { phi: &phi, grad: &grad, x, t });
        let supplied_vel = (problem.dh_dgrad)(&PointState { phi: &phi, grad: &grad, x, t });

        // ∂h/∂Φ by central differences in each state component.
        for j in 0..n {
            let dp = fd_step(phi[j]);
            let mut hi = phi.clone();
            hi[j] += dp;
            let mut lo = phi.clone();
            lo[j] -= dp;
            let f_hi = (problem.h)(&PointState { phi: &hi, grad: &grad, x, t });
            let f_lo = (problem.h)(&PointState { phi: &lo, grad: &grad, x, t });
            for i in 0..n {
                let fd = (f_hi[i] - f_lo[i]) / (2.0 * dp);
                jac_res = jac_res.max((fd - supplied_jac[(i, j)]).abs());
            }
        }

        // ∂hᵢ/∂∇ⱼφᵢ by central differences in the own-row gradient.
        for i in 0..n {
            for a in 0..m {
                let dg = fd_step(grad[(i, a)]);
                let mut hi = grad.clone();
                hi[(i, a)] += dg;
                let mut lo = grad.clone();
                lo[(i, a)] -= dg;
                let f_hi = (problem.h)(&PointState { phi: &phi, grad: &hi, x, t });
                let f_lo = (problem.h)(&PointState { phi: &phi, grad: &lo, x, t });
                let fd = (f_hi[i] - f_lo[i]) / (2.0 * dg);
                vel_res = vel_res.max((fd - supplied_vel[(i, a)]).abs());
            }
        }
    }

    // Scale-aware acceptance: absolute residual relative to the probed
    // derivative magnitudes.
    let scale = {
        let mut s: f64 = 1.0;
        let mid_phi = (&problem.phi_box.0 + &problem.phi_box.1) * 0.5;
        let mid_grad = (&problem.grad_box.0 + &problem.grad_box.1) * 0.5;
        let x0 = grid.coords(grid.len() / 2);
        let ps = PointState { phi: &mid_phi, grad: &mid_grad, x: &x0[..m], t };
        for v in (problem.dh_dphi)(&ps).iter() {
            s = s.max(v.abs());
        }
        for v in (problem.dh_dgrad)(&ps).iter() {
            s = s.max(v.abs());
        }
        s
    };
    if jac_res > FD_TOL * scale {
        return Err(Error::DerivativeMismatch { what: "dh_dphi".into(), residual: jac_res });
    }
    if vel_res > FD_TOL * scale {
        return Err(Error::DerivativeMismatch { what: "dh_dgrad".into(), residual: vel_res });
    }

    // Projector: linear, idempotent, symmetric on random stacked vectors.
    let mut projector_checked = false;
    if let Some(p) = &problem.projector {
        let len = n * grid.len();
        let rand_vec = |rng: &mut ChaCha8Rng| {
            DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0))
        };
        for _ in 0..3 {
            let u = rand_vec(&mut rng);
            let v = rand_vec(&mut rng);
            let pu = p(&u);
            let pv = p(&v);
            let ppu = p(&pu);
            let norm = pu.norm().max(1.0);
            if (&ppu - &pu).norm() > PROJ_TOL * norm {
                return Err(Error::ProjectorInvalid {
                    what: format!("not idempotent (drift {:.3e})", (&ppu - &pu).norm()),
                });
            }
            let sym_gap = (pu.dot(&v) - u.dot(&pv)).abs();
            if sym_gap > PROJ_TOL * norm * v.norm().max(1.0) {
                return Err(Error::ProjectorInvalid {
                    what: format!("not symmetric (gap {sym_gap:.3e})"),
                });
            }
            let a = 0.7;
            let b = -1.3;
            let lin_gap = (p(&(&u * a + &v * b)) - (&pu * a + &pv * b)).norm();
            if lin_gap > PROJ_TOL * (norm + pv.norm().max(1.0)) {
                return Err(Error::ProjectorInvalid {
                    what: format!("nonlinear (gap {lin_gap:.3e}); only linear constraints are supported"),
                });
            }
        }
        projector_checked = true;
    }

    // Boundary coverage: every inflowing face must carry value data.
    let mid_phi = (&problem.phi_box.0 + &problem.phi_box.1) * 0.5;
    let zero_grad = DMatrix::zeros(n, m);
    let mut faces = Vec::new();
    for face in grid.faces() {
        let kind = bounds.kind(face).ok_or_else(|| Error::MissingBoundaryData {
            face: face.to_string(),
            component: 0,
        })?;
        let mut inflowing = Vec::new();
        for &node in &grid.face_nodes(face) {
            let x = grid.coords(node);
            let ps = PointState { phi: &mid_phi, grad: &zero_grad, x: &x[..m], t };
            let vel = (problem.dh_dgrad)(&ps);
            for i in 0..n {
                if vel[(i, face.axis)] * face.normal_sign() < 0.0 && !inflowing.contains(&i) {
                    inflowing.push(i);
                }
            }
        }
        let covered = inflowing.is_empty() || kind.has_values();
        faces.push(FaceReport {
            face,
            kind: kind.name().into(),
            inflowing: inflowing.clone(),
            covered,
        });
        if !covered {
            return Err(Error::MissingBoundaryData {
                face: face.to_string(),
                component: inflowing[0],
            });
        }
    }

    Ok(ValidationReport {
        jacobian_residual: jac_res,
        velocity_residual: vel_res,
        faces,
        projector_checked,
    })
}

/// Per-component inflow test of one face at a reference state: true when
/// ∂hᵢ/∂∇φᵢ·n < 0 somewhere on the face.
pub fn face_is_inflowing(
    problem: &PdeProblem,
    grid: &Grid,
    face: Face,
    t: f64,
    component: usize,
) -> bool {
    let mid_phi = (&problem.phi_box.0 + &problem.phi_box.1) * 0.5;
    let zero_grad = DMatrix::zeros(problem.n_state, problem.n_coord);
    grid.face_nodes(face).iter().any(|&node| {
        let x = grid.coords(node);
        let ps = PointState { phi: &mid_phi, grad: &zero_grad, x: &x[..grid.dims()], t };
        let vel = (problem.dh_dgrad)(&ps);
        vel[(component, face.axis)] * face.normal_sign() < 0.0
    })
}
