//! Contraction certificates: the first-order pointwise rate, the Fourier
//! diffusion bound under Dirichlet conditions, their combination, and
//! constant-metric coordinate transforms.
//!
//! The first-order certificate evaluates
//! F = sym(−∂h/∂Φ) + ½·diag(∇·vᵢ), with vᵢ = ∂hᵢ/∂∇φᵢ,
//! at every node of every supplied state/time sample; λ_V is the largest
//! eigenvalue found. Uniform negativity over the samples certifies
//! exponential convergence of the norm √∫δΦᵀδΦ at rate |λ_V| (the squared
//! norm decays at twice that rate). The certificate is a *sampled* bound:
//! uniformity beyond the probed states is the caller's claim, not ours.

use crate::error::{Error, Result};
use crate::grid::{centered_gradient, Field, Grid};
use crate::model::{BoundarySpec, PdeProblem, PointState};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::sync::Arc;

/// Eigenvalue magnitudes below this are treated as exactly zero when
/// classifying.
pub const CLASSIFY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Contracting,
    SemiContracting,
    Indifferent,
    Inconclusive,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Classification::Contracting => "contracting",
            Classification::SemiContracting => "semi-contracting",
            Classification::Indifferent => "indifferent",
            Classification::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// Computed contraction certificate with its per-term breakdown.
#[derive(Debug, Clone)]
pub struct Certificate {
    /// Largest eigenvalue of F over all probed nodes/states/times.
    pub lambda_v: f64,
    /// Extra decay contributed by diffusion under Dirichlet conditions.
    pub diffusion_bound: f64,
    /// Guaranteed norm convergence rate when contracting, else 0.
    pub rate: f64,
    pub classification: Classification,
    /// Largest Frobenius norm of F seen; zero means the certificate
    /// matrix vanishes identically on the samples.
    pub max_f_norm: f64,
}

impl Certificate {
    fn classify(lambda_eff: f64, max_f_norm: f64, diffusion_bound: f64) -> (Classification, f64) {
        if max_f_norm <= CLASSIFY_TOL && diffusion_bound <= CLASSIFY_TOL {
            return (Classification::Indifferent, 0.0);
        }
        if lambda_eff < -CLASSIFY_TOL {
            (Classification::Contracting, -lambda_eff)
        } else if lambda_eff <= CLASSIFY_TOL {
            (Classification::SemiContracting, 0.0)
        } else {
            (Classification::Inconclusive, 0.0)
        }
    }

    pub fn csv_header() -> &'static str {
        "lambda_v,diffusion_bound,rate,classification"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            crate::report::fmt_float(self.lambda_v),
            crate::report::fmt_float(self.diffusion_bound),
            crate::report::fmt_float(self.rate),
            self.classification
        )
    }

    /// Flat key-value report.
    pub fn text_report(&self) -> String {
        format!(
            "lambda_v: {}\ndiffusion_bound: {}\nrate: {}\nclassification: {}\nnote: rates are for the norm sqrt(int dPhi^T dPhi); the squared norm decays at twice the rate\n",
            crate::report::fmt_float(self.lambda_v),
            crate::report::fmt_float(self.diffusion_bound),
            crate::report::fmt_float(self.rate),
            self.classification
        )
    }
}

/// Largest eigenvalue of F over the sampled states and times, with the
/// divergence of each component's velocity estimated by centered
/// differences of its nodal values.
fn lambda_v_over_samples(
    problem: &PdeProblem,
    grid: &Grid,
    states: &[Field],
    t_samples: &[f64],
) -> Result<(f64, f64)> {
    if states.is_empty() || t_samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let n = problem.n_state;
    let m = problem.n_coord;
    let mut lambda_v = f64::NEG_INFINITY;
    let mut max_f_norm: f64 = 0.0;

    let mut phi_k = DVector::zeros(n);
    let mut grad_k = DMatrix::zeros(n, m);
    for &t in t_samples {
        for state in states {
            if state.n_state() != n || state.n_nodes() != grid.len() {
                return Err(Error::ShapeMismatch { what: "sample state shape".into() });
            }
            let grads: Vec<Field> =
                (0..m).map(|a| centered_gradient(grid, state, a)).collect();

            // Nodal velocity values per component, then their divergence.
            let mut velocity = vec![DMatrix::zeros(m, grid.len()); n];
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
            let mut div_v: DMatrix<f64> = DMatrix::zeros(n, grid.len());
            for i in 0..n {
                let vfield = Field { data: velocity[i].clone() };
                for a in 0..m {
                    let d = centered_gradient(grid, &vfield, a);
                    for k in 0..grid.len() {
                        div_v[(i, k)] += d.data[(a, k)];
                    }
                }
            }

            for k in 0..grid.len() {
                for i in 0..n {
                    phi_k[i] = state.data[(i, k)];
                    for a in 0..m {
                        grad_k[(i, a)] = grads[a].data[(i, k)];
                    }
                }
                let x = grid.coords(k);
                let ps = PointState { phi: &phi_k, grad: &grad_k, x: &x[..m], t };
                let jac = (problem.dh_dphi)(&ps);
                let mut f = DMatrix::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        f[(r, c)] = -0.5 * (jac[(r, c)] + jac[(c, r)]);
                    }
                    f[(r, r)] += 0.5 * div_v[(r, k)];
                }
                max_f_norm = max_f_norm.max(f.norm());
                let eig = SymmetricEigen::new(f);
                for &l in eig.eigenvalues.iter() {
                    lambda_v = lambda_v.max(l);
                }
            }
        }
    }
    Ok((lambda_v, max_f_norm))
}

/// First-order certificate: transport/reaction terms only.
pub fn first_order_rate(
    problem: &PdeProblem,
    grid: &Grid,
    states: &[Field],
    t_samples: &[f64],
) -> Result<Certificate> {
    let (lambda_v, max_f_norm) = lambda_v_over_samples(problem, grid, states, t_samples)?;
    let (classification, rate) = Certificate::classify(lambda_v, max_f_norm, 0.0);
    Ok(Certificate { lambda_v, diffusion_bound: 0.0, rate, classification, max_f_norm })
}

/// Fourier lower bound on the extra decay contributed by diffusion:
/// min over components i of Σⱼ Λ_ijij·π²/lⱼ², with axis j contributing
/// only when both of its faces carry Dirichlet values.
///
/// The per-component Poincaré inequality ∫(∇ⱼδφᵢ)² ≥ (π²/lⱼ²)∫δφᵢ² sums
/// over axes for each component separately, so the guaranteed rate for
/// the full state is the worst component's sum.
pub fn diffusion_rate_bound(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
) -> Result<f64> {
    let lambda = problem.lambda_bound.as_ref().ok_or(Error::MissingLambdaBound)?;
    let mut worst = f64::INFINITY;
    for i in 0..problem.n_state {
        let mut total = 0.0;
        for axis in 0..grid.dims() {
            if bounds.axis_is_dirichlet(axis) {
                let l = grid.lengths()[axis];
                total += lambda[(i, axis)] * std::f64::consts::PI.powi(2) / (l * l);
            }
        }
        worst = worst.min(total);
    }
    Ok(worst)
}

/// Combined certificate: rate |λ_V − bound| when λ_V − bound is negative.
pub fn combined_certificate(
    problem: &PdeProblem,
    grid: &Grid,
    bounds: &BoundarySpec,
    states: &[Field],
    t_samples: &[f64],
) -> Result<Certificate> {
    let (lambda_v, max_f_norm) = lambda_v_over_samples(problem, grid, states, t_samples)?;
    let diffusion_bound = match diffusion_rate_bound(problem, grid, bounds) {
        Ok(b) => b,
        Err(Error::MissingLambdaBound) => 0.0,
        Err(e) => return Err(e),
    };
    let effective = lambda_v - diffusion_bound;
    let (classification, rate) = Certificate::classify(effective, max_f_norm, diffusion_bound);
    Ok(Certificate { lambda_v, diffusion_bound, rate, classification, max_f_norm })
}

/// Constant linear change of differential coordinates δΨ = Θ·δΦ with
/// metric M = ΘᵀΘ.
#[derive(Debug, Clone)]
pub struct MetricTransform {
    theta: DMatrix<f64>,
    theta_inv: DMatrix<f64>,
}

impl MetricTransform {
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() != theta.ncols() {
            return Err(Error::ShapeMismatch { what: "theta must be square".into() });
        }
        let theta_inv = theta.clone().try_inverse().ok_or(Error::SingularTheta)?;
        // Uniform positive definiteness of M = ΘᵀΘ follows from
        // invertibility, but reject numerically marginal transforms.
        let metric = theta.transpose() * &theta;
        let eig = SymmetricEigen::new(metric);
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min <= 1e-14 {
            return Err(Error::SingularTheta);
        }
        Ok(MetricTransform { theta, theta_inv })
    }

    pub fn identity(n: usize) -> Self {
        MetricTransform { theta: DMatrix::identity(n, n), theta_inv: DMatrix::identity(n, n) }
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn metric(&self) -> DMatrix<f64> {
        self.theta.transpose() * &self.theta
    }
}

/// Rewrites the problem in transformed coordinates Φ' = ΘΦ: the reaction
/// Jacobian becomes Θ(∂h/∂Φ)Θ⁻¹ while convection velocities, flux terms
/// and their bounds are unchanged (they commute with a constant state
/// transform when the velocity is shared across components and the flux
/// is componentwise, the setting this transform is meant for).
pub fn apply_metric(problem: &PdeProblem, transform: &MetricTransform) -> Result<PdeProblem> {
    let n = problem.n_state;
    if transform.theta.nrows() != n {
        return Err(Error::ShapeMismatch { what: format!("theta must be {n}x{n}") });
    }
    let theta = transform.theta.clone();
    let theta_inv = transform.theta_inv.clone();

    let h = problem.h.clone();
    let dh_dphi = problem.dh_dphi.clone();
    let dh_dgrad = problem.dh_dgrad.clone();
    let th = theta.clone();
    let ti = theta_inv.clone();
    let new_h = move |s: &PointState| -> DVector<f64> {
        let phi = &ti * s.phi;
        let grad = &ti * s.grad;
        &th * h(&PointState { phi: &phi, grad: &grad, x: s.x, t: s.t })
    };
    let th2 = theta.clone();
    let ti2 = theta_inv.clone();
    let new_jac = move |s: &PointState| -> DMatrix<f64> {
        let phi = &ti2 * s.phi;
        let grad = &ti2 * s.grad;
        &th2 * dh_dphi(&PointState { phi: &phi, grad: &grad, x: s.x, t: s.t }) * &ti2
    };
    let ti3 = theta_inv.clone();
    let new_vel = move |s: &PointState| -> DMatrix<f64> {
        let phi = &ti3 * s.phi;
        let grad = &ti3 * s.grad;
        dh_dgrad(&PointState { phi: &phi, grad: &grad, x: s.x, t: s.t })
    };

    // Transform the probe box through Θ (interval image of the corners).
    let (lo, hi) = &problem.phi_box;
    let mut new_lo = DVector::zeros(n);
    let mut new_hi = DVector::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let a = theta[(i, j)] * lo[j];
            let b = theta[(i, j)] * hi[j];
            new_lo[i] += a.min(b);
            new_hi[i] += a.max(b);
        }
    }

    let mut builder = PdeProblem::builder(n, problem.n_coord)
        .names(problem.names.clone())
        .h(new_h)
        .dh_dphi(new_jac)
        .dh_dgrad(new_vel)
        .phi_box(new_lo, new_hi)
        .grad_box(problem.grad_box.0.clone(), problem.grad_box.1.clone());
    if let Some(g) = &problem.g_flux {
        let g = g.clone();
        builder = builder.g_flux(move |grad, x, t| g(grad, x, t));
    }
    if let Some(dg) = &problem.dg_dgrad {
        let dg = dg.clone();
        builder = builder.dg_dgrad(move |grad, x, t| dg(grad, x, t));
    }
    if let Some(l) = &problem.lambda_bound {
        builder = builder.lambda_bound(l.clone());
    }
    if let Some(p) = &problem.projector {
        let p = p.clone();
        builder = builder.projector(move |v| p(v));
    }
    builder.build()
}

/// Convenience: transform by a diagonal Θ given as a slice.
pub fn diagonal_metric(diag: &[f64]) -> Result<MetricTransform> {
    let n = diag.len();
    let theta = DMatrix::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 });
    MetricTransform::new(theta)
}

/// Helper shared by scenarios and tests: a sample-set of constant fields.
pub fn constant_states(grid: &Grid, values: &[DVector<f64>]) -> Vec<Field> {
    values
        .iter()
        .map(|v| {
            let mut f = Field::zeros(v.len(), grid);
            for k in 0..grid.len() {
                for i in 0..v.len() {
                    f.data[(i, k)] = v[i];
                }
            }
            f
        })
        .collect()
}

pub type SampleSet = (Vec<Field>, Vec<f64>);

/// Samples the problem's state box with a seeded RNG: constant fields at
/// the box corners plus smooth random fields inside the box.
pub fn sample_states_from_box(
    problem: &PdeProblem,
    grid: &Grid,
    n_random: usize,
    seed: u64,
) -> Vec<Field> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = problem.n_state;
    let (lo, hi) = &problem.phi_box;
    let mut states = constant_states(grid, &[lo.clone(), hi.clone(), (lo + hi) * 0.5]);
    for _ in 0..n_random {
        let mut f = Field::zeros(n, grid);
        let freq: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        for k in 0..grid.len() {
            let x = grid.coords(k);
            let s = x[0] + if grid.dims() > 1 { 0.7 * x[1] } else { 0.0 };
            for i in 0..n {
                let unit = 0.5 * (1.0 + (freq[i] * s + phase[i]).sin());
                f.data[(i, k)] = lo[i] + (hi[i] - lo[i]) * unit;
            }
        }
        states.push(f);
    }
    states
}

pub use crate::grid::upwind_psd_check;
