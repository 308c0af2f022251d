//! Hamiltonian characteristics and Hessian propagation.
//!
//! Along trajectories ẋ = ∂h/∂p, ṗ = −∂h/∂x of a Hamiltonian h(p, x, t),
//! the Hessian H = ∇∇φ of the underlying scalar field obeys the matrix
//! Riccati flow
//!
//! Ḣ = −∂²h/∂x² − (∂²h/∂x∂p)H − H(∂²h/∂p∂x) − H(∂²h/∂p²)H,
//!
//! which reduces to the classical Riccati equation for linear-quadratic
//! problems. This module integrates that flow forward or backward,
//! propagates H⁻¹ by the mirrored dynamics, monitors convexity, and
//! evaluates the Lie-derivative positivity chains that certify convexity
//! is preserved.

pub mod lie;

pub use lie::{lie_condition_p, lie_condition_x, LieLevel, LieReport};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::sync::Arc;

pub type ValueFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type HessFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// Hamiltonian h(p, x, t) with first and second derivative callables.
/// The cross-derivative convention is (∂²h/∂x∂p)ᵢⱼ = ∂²h/∂xᵢ∂pⱼ.
#[derive(Clone)]
pub struct Hamiltonian {
    pub dim: usize,
    pub value: ValueFn,
    pub dh_dx: GradFn,
    pub dh_dp: GradFn,
    pub d2h_dx2: HessFn,
    pub d2h_dxdp: HessFn,
    pub d2h_dp2: HessFn,
}

fn fd_step(scale: f64) -> f64 {
    1e-6 * (1.0 + scale.abs())
}

impl Hamiltonian {
    /// Build all derivatives from the value alone by central differences
    /// (first derivatives at step 1e-6·(1+|z|), second derivatives by
    /// second differences at step 6e-4·(1+|z|)). Adequate for smooth
    /// Hamiltonians at roughly 1e-4 accuracy in the Hessians.
    pub fn from_value(
        dim: usize,
        value: impl Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let v: ValueFn = Arc::new(value);

        let v1 = v.clone();
        let dh_dp: GradFn = Arc::new(move |p, x, t| {
            DVector::from_fn(p.len(), |i, _| {
                let e = fd_step(p[i]);
                let mut hi = p.clone();
                hi[i] += e;
                let mut lo = p.clone();
                lo[i] -= e;
                (v1(&hi, x, t) - v1(&lo, x, t)) / (2.0 * e)
            })
        });
        let v2 = v.clone();
        let dh_dx: GradFn = Arc::new(move |p, x, t| {
            DVector::from_fn(x.len(), |i, _| {
                let e = fd_step(x[i]);
                let mut hi = x.clone();
                hi[i] += e;
                let mut lo = x.clone();
                lo[i] -= e;
                (v2(p, &hi, t) - v2(p, &lo, t)) / (2.0 * e)
            })
        });

        let second = |f: ValueFn| -> (HessFn, HessFn, HessFn) {
            let fx = f.clone();
            let d2h_dx2: HessFn = Arc::new(move |p, x, t| {
                let n = x.len();
                let mut m = DMatrix::zeros(n, n);
                let base = fx(p, x, t);
                for i in 0..n {
                    for j in i..n {
                        let ei = 6e-4 * (1.0 + x[i].abs());
                        let ej = 6e-4 * (1.0 + x[j].abs());
                        let val = if i == j {
                            let mut hi = x.clone();
                            hi[i] += ei;
                            let mut lo = x.clone();
                            lo[i] -= ei;
                            (fx(p, &hi, t) - 2.0 * base + fx(p, &lo, t)) / (ei * ei)
                        } else {
                            let mut pp = x.clone();
                            pp[i] += ei;
                            pp[j] += ej;
                            let mut pm = x.clone();
                            pm[i] += ei;
                            pm[j] -= ej;
                            let mut mp = x.clone();
                            mp[i] -= ei;
                            mp[j] += ej;
                            let mut mm = x.clone();
                            mm[i] -= ei;
                            mm[j] -= ej;
                            (fx(p, &pp, t) - fx(p, &pm, t) - fx(p, &mp, t) + fx(p, &mm, t))
                                / (4.0 * ei * ej)
                        };
                        m[(i, j)] = val;
                        m[(j, i)] = val;
                    }
                }
                m
            });
            let fp = f.clone();
            let d2h_dp2: HessFn = Arc::new(move |p, x, t| {
                let n = p.len();
                let mut m = DMatrix::zeros(n, n);
                let base = fp(p, x, t);
                for i in 0..n {
                    for j in i..n {
                        let ei = 6e-4 * (1.0 + p[i].abs());
                        let ej = 6e-4 * (1.0 + p[j].abs());
                        let val = if i == j {
                            let mut hi = p.clone();
                            hi[i] += ei;
                            let mut lo = p.clone();
                            lo[i] -= ei;
                            (fp(&hi, x, t) - 2.0 * base + fp(&lo, x, t)) / (ei * ei)
                        } else {
                            let mut pp = p.clone();
                            pp[i] += ei;
                            pp[j] += ej;
                            let mut pm = p.clone();
                            pm[i] += ei;
                            pm[j] -= ej;
                            let mut mp = p.clone();
                            mp[i] -= ei;
                            mp[j] += ej;
                            let mut mm = p.clone();
                            mm[i] -= ei;
                            mm[j] -= ej;
                            (fp(&pp, x, t) - fp(&pm, x, t) - fp(&mp, x, t) + fp(&mm, x, t))
                                / (4.0 * ei * ej)
                        };
                        m[(i, j)] = val;
                        m[(j, i)] = val;
                    }
                }
                m
            });
            let fc = f.clone();
            let d2h_dxdp: HessFn = Arc::new(move |p, x, t| {
                let n = x.len();
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let ei = 6e-4 * (1.0 + x[i].abs());
                        let ej = 6e-4 * (1.0 + p[j].abs());
                        let mut xp = x.clone();
                        xp[i] += ei;
                        let mut xm = x.clone();
                        xm[i] -= ei;
                        let mut pp = p.clone();
                        pp[j] += ej;
                        let mut pm = p.clone();
                        pm[j] -= ej;
                        m[(i, j)] = (fc(&pp, &xp, t) - fc(&pm, &xp, t) - fc(&pp, &xm, t)
                            + fc(&pm, &xm, t))
                            / (4.0 * ei * ej);
                    }
                }
                m
            });
            (d2h_dx2, d2h_dxdp, d2h_dp2)
        };
        let (d2h_dx2, d2h_dxdp, d2h_dp2) = second(v.clone());

        Hamiltonian { dim, value: v, dh_dx, dh_dp, d2h_dx2, d2h_dxdp, d2h_dp2 }
    }

    /// Build second derivatives by central differences of analytically
    /// supplied first derivatives; exact for gradients linear in their
    /// argument and ~1e-10 accurate otherwise.
    pub fn from_grads(
        dim: usize,
        value: impl Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync + 'static,
        dh_dx: impl Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
        dh_dp: impl Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        let dh_dx: GradFn = Arc::new(dh_dx);
        let dh_dp: GradFn = Arc::new(dh_dp);

        let gx = dh_dx.clone();
        let d2h_dx2: HessFn = Arc::new(move |p, x, t| {
            let n = x.len();
            let mut m = DMatrix::zeros(n, n);
            for j in 0..n {
                let e = fd_step(x[j]);
                let mut hi = x.clone();
                hi[j] += e;
                let mut lo = x.clone();
                lo[j] -= e;
                let col = (gx(p, &hi, t) - gx(p, &lo, t)) / (2.0 * e);
                for i in 0..n {
                    m[(i, j)] = col[i];
                }
            }
            // Symmetrize away the finite-difference noise.
            let mt = m.transpose();
            (m + mt) * 0.5
        });
        let gp = dh_dp.clone();
        let d2h_dp2: HessFn = Arc::new(move |p, x, t| {
            let n = p.len();
            let mut m = DMatrix::zeros(n, n);
            for j in 0..n {
                let e = fd_step(p[j]);
                let mut hi = p.clone();
                hi[j] += e;
                let mut lo = p.clone();
                lo[j] -= e;
                let col = (gp(&hi, x, t) - gp(&lo, x, t)) / (2.0 * e);
                for i in 0..n {
                    m[(i, j)] = col[i];
                }
            }
            let mt = m.transpose();
            (m + mt) * 0.5
        });
        let gx2 = dh_dx.clone();
        let d2h_dxdp: HessFn = Arc::new(move |p, x, t| {
            let n = x.len();
            let mut m = DMatrix::zeros(n, n);
            for j in 0..n {
                let e = fd_step(p[j]);
                let mut hi = p.clone();
                hi[j] += e;
                let mut lo = p.clone();
                lo[j] -= e;
                let col = (gx2(&hi, x, t) - gx2(&lo, x, t)) / (2.0 * e);
                for i in 0..n {
                    m[(i, j)] = col[i];
                }
            }
            m
        });

        Hamiltonian { dim, value: Arc::new(value), dh_dx, dh_dp, d2h_dx2, d2h_dxdp, d2h_dp2 }
    }

    /// Verify Hessian symmetry and the finite-difference consistency of
    /// the cross derivative at a probe point.
    pub fn check_consistency(&self, p: &DVector<f64>, x: &DVector<f64>, t: f64) -> Result<()> {
        let hxx = (self.d2h_dx2)(p, x, t);
        let hpp = (self.d2h_dp2)(p, x, t);
        let sym_tol = 1e-10 * (1.0 + hxx.norm().max(hpp.norm()));
        if (&hxx - hxx.transpose()).norm() > sym_tol {
            return Err(Error::DerivativeMismatch {
                what: "d2h_dx2 symmetry".into(),
                residual: (&hxx - hxx.transpose()).norm(),
            });
        }
        if (&hpp - hpp.transpose()).norm() > sym_tol {
            return Err(Error::DerivativeMismatch {
                what: "d2h_dp2 symmetry".into(),
                residual: (&hpp - hpp.transpose()).norm(),
            });
        }
        // Cross-derivative: FD of dh_dx in p must match d2h_dxdp.
        let hxp = (self.d2h_dxdp)(p, x, t);
        let mut worst = 0.0f64;
        for j in 0..self.dim {
            let e = 1e-5 * (1.0 + p[j].abs());
            let mut hi = p.clone();
            hi[j] += e;
            let mut lo = p.clone();
            lo[j] -= e;
            let col = ((self.dh_dx)(&hi, x, t) - (self.dh_dx)(&lo, x, t)) / (2.0 * e);
            for i in 0..self.dim {
                worst = worst.max((col[i] - hxp[(i, j)]).abs());
            }
        }
        let tol = 1e-4 * (1.0 + hxp.norm());
        if worst > tol {
            return Err(Error::DerivativeMismatch { what: "d2h_dxdp".into(), residual: worst });
        }
        Ok(())
    }
}

/// Point on a characteristic: position, momentum (∇φ), Hessian (∇∇φ), time.
#[derive(Debug, Clone)]
pub struct CharState {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub t: f64,
}

impl CharState {
    pub fn new(x: DVector<f64>, p: DVector<f64>, hess: DMatrix<f64>, t: f64) -> Self {
        CharState { x, p, hess, t }
    }

    pub fn min_hess_eig(&self) -> f64 {
        let eig = SymmetricEigen::new(self.hess.clone());
        eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(&self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

fn riccati_rhs(ham: &Hamiltonian, s: &CharState) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let dx = (ham.dh_dp)(&s.p, &s.x, s.t);
    let dp = -(ham.dh_dx)(&s.p, &s.x, s.t);
    let hxx = (ham.d2h_dx2)(&s.p, &s.x, s.t);
    let hxp = (ham.d2h_dxdp)(&s.p, &s.x, s.t);
    let hpp = (ham.d2h_dp2)(&s.p, &s.x, s.t);
    let dh = -hxx - &hxp * &s.hess - &s.hess * hxp.transpose() - &s.hess * &hpp * &s.hess;
    (dx, dp, dh)
}

/// One RK4 step of the coupled (x, p, H) system; dt > 0, the direction
/// selects the sign of the time increment. H is symmetrized after the
/// step (the projection is asserted to be small).
pub fn characteristic_step(
    ham: &Hamiltonian,
    s: &CharState,
    dt: f64,
    direction: Direction,
) -> Result<CharState> {
    let h = dt * direction.sign();
    let eval = |x: &DVector<f64>, p: &DVector<f64>, hess: &DMatrix<f64>, t: f64| {
        riccati_rhs(ham, &CharState { x: x.clone(), p: p.clone(), hess: hess.clone(), t })
    };
    let (k1x, k1p, k1h) = eval(&s.x, &s.p, &s.hess, s.t);
    let (k2x, k2p, k2h) = eval(
        &(&s.x + &k1x * (0.5 * h)),
        &(&s.p + &k1p * (0.5 * h)),
        &(&s.hess + &k1h * (0.5 * h)),
        s.t + 0.5 * h,
    );
    let (k3x, k3p, k3h) = eval(
        &(&s.x + &k2x * (0.5 * h)),
        &(&s.p + &k2p * (0.5 * h)),
        &(&s.hess + &k2h * (0.5 * h)),
        s.t + 0.5 * h,
    );
    let (k4x, k4p, k4h) = eval(
        &(&s.x + &k3x * h),
        &(&s.p + &k3p * h),
        &(&s.hess + &k3h * h),
        s.t + h,
    );
    let x = &s.x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
    let p = &s.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
    let hess = &s.hess + (k1h + k2h * 2.0 + k3h * 2.0 + k4h) * (h / 6.0);

    let drift = (&hess - hess.transpose()).norm();
    debug_assert!(drift < 1e-9 * (1.0 + hess.norm()), "symmetry drift {drift}");
    let hess = (&hess + hess.transpose()) * 0.5;

    let out = CharState { x, p, hess, t: s.t + h };
    if !out.x.iter().all(|v| v.is_finite())
        || !out.p.iter().all(|v| v.is_finite())
        || !out.hess.iter().all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteState { t: out.t });
    }
    Ok(out)
}

/// Integrate a characteristic over |t_span| with fixed dt, collecting
/// every state (including the initial one).
pub fn integrate_characteristic(
    ham: &Hamiltonian,
    s0: &CharState,
    t_span: f64,
    dt: f64,
    direction: Direction,
) -> Result<Vec<CharState>> {
    let steps = (t_span / dt).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(s0.clone());
    let mut s = s0.clone();
    for _ in 0..steps {
        s = characteristic_step(ham, &s, dt, direction)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// Point on a characteristic carrying H⁻¹ instead of H.
#[derive(Debug, Clone)]
pub struct InverseCharState {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub hess_inv: DMatrix<f64>,
    pub t: f64,
}

impl InverseCharState {
    /// Initialize from a CharState by inverting its Hessian.
    pub fn from_char(s: &CharState) -> Result<Self> {
        let inv = s.hess.clone().try_inverse().ok_or(Error::SingularHessian)?;
        Ok(InverseCharState { x: s.x.clone(), p: s.p.clone(), hess_inv: inv, t: s.t })
    }
}

/// One RK4 step of the mirrored dynamics
/// d(H⁻¹)/dt = H⁻¹(∂²h/∂x²)H⁻¹ + H⁻¹(∂²h/∂x∂p) + (∂²h/∂p∂x)H⁻¹ + ∂²h/∂p².
pub fn inverse_riccati_step(
    ham: &Hamiltonian,
    s: &InverseCharState,
    dt: f64,
    direction: Direction,
) -> Result<InverseCharState> {
    let h = dt * direction.sign();
    let eval = |x: &DVector<f64>, p: &DVector<f64>, w: &DMatrix<f64>, t: f64| {
        let dx = (ham.dh_dp)(p, x, t);
        let dp = -(ham.dh_dx)(p, x, t);
        let hxx = (ham.d2h_dx2)(p, x, t);
        let hxp = (ham.d2h_dxdp)(p, x, t);
        let hpp = (ham.d2h_dp2)(p, x, t);
        let dw = w * &hxx * w + w * &hxp + hxp.transpose() * w + hpp;
        (dx, dp, dw)
    };
    let (k1x, k1p, k1w) = eval(&s.x, &s.p, &s.hess_inv, s.t);
    let (k2x, k2p, k2w) = eval(
        &(&s.x + &k1x * (0.5 * h)),
        &(&s.p + &k1p * (0.5 * h)),
        &(&s.hess_inv + &k1w * (0.5 * h)),
        s.t + 0.5 * h,
    );
    let (k3x, k3p, k3w) = eval(
        &(&s.x + &k2x * (0.5 * h)),
        &(&s.p + &k2p * (0.5 * h)),
        &(&s.hess_inv + &k2w * (0.5 * h)),
        s.t + 0.5 * h,
    );
    let (k4x, k4p, k4w) = eval(
        &(&s.x + &k3x * h),
        &(&s.p + &k3p * h),
        &(&s.hess_inv + &k3w * h),
        s.t + h,
    );
    let x = &s.x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
    let p = &s.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
    let w = &s.hess_inv + (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * (h / 6.0);
    let w = (&w + w.transpose()) * 0.5;
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularHessian);
    }
    Ok(InverseCharState { x, p, hess_inv: w, t: s.t + h })
}

/// Convexity record along a characteristic.
#[derive(Debug, Clone)]
pub struct ConvexityReport {
    pub times: Vec<f64>,
    pub min_eigs: Vec<f64>,
    /// First time (in integration order) where min eig H < −threshold.
    pub first_loss: Option<f64>,
    pub threshold: f64,
}

pub const CONVEXITY_LOSS_TOL: f64 = 1e-8;

/// Integrate and record the minimum eigenvalue of H over the span.
pub fn convexity_monitor(
    ham: &Hamiltonian,
    s0: &CharState,
    t_span: f64,
    dt: f64,
    direction: Direction,
) -> Result<ConvexityReport> {
    let states = integrate_characteristic(ham, s0, t_span, dt, direction)?;
    Ok(convexity_of(&states))
}

/// Convexity record of an already-integrated trajectory.
pub fn convexity_of(states: &[CharState]) -> ConvexityReport {
    let mut times = Vec::with_capacity(states.len());
    let mut min_eigs = Vec::with_capacity(states.len());
    let mut first_loss = None;
    for s in states {
        let me = s.min_hess_eig();
        if first_loss.is_none() && me < -CONVEXITY_LOSS_TOL {
            first_loss = Some(s.t);
        }
        times.push(s.t);
        min_eigs.push(me);
    }
    ConvexityReport { times, min_eigs, first_loss, threshold: CONVEXITY_LOSS_TOL }
}

/// CSV export of a characteristic: t, x, p, and the eigenvalues of H.
pub fn characteristic_csv(states: &[CharState]) -> String {
    if states.is_empty() {
        return String::new();
    }
    let m = states[0].x.len();
    let mut header = vec!["t".to_string()];
    header.extend((0..m).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("p{i}")));
    header.extend((0..m).map(|i| format!("hess_eig{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for s in states {
        let mut row = vec![crate::report::fmt_float(s.t)];
        row.extend(s.x.iter().map(|v| crate::report::fmt_float(*v)));
        row.extend(s.p.iter().map(|v| crate::report::fmt_float(*v)));
        let mut eigs: Vec<f64> =
            SymmetricEigen::new(s.hess.clone()).eigenvalues.iter().cloned().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        row.extend(eigs.iter().map(|v| crate::report::fmt_float(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Scalar LQ Hamiltonian h = ½qx² + axp − ½(b²/r)p², the workhorse of the
/// test suite.
pub fn lq_scalar_hamiltonian(a: f64, b: f64, q: f64, r: f64) -> Hamiltonian {
    Hamiltonian {
        dim: 1,
        value: Arc::new(move |p, x, _t| {
            0.5 * q * x[0] * x[0] + a * x[0] * p[0] - 0.5 * (b * b / r) * p[0] * p[0]
        }),
        dh_dx: Arc::new(move |p, x, _t| DVector::from_element(1, q * x[0] + a * p[0])),
        dh_dp: Arc::new(move |p, x, _t| DVector::from_element(1, a * x[0] - (b * b / r) * p[0])),
        d2h_dx2: Arc::new(move |_p, _x, _t| DMatrix::from_element(1, 1, q)),
        d2h_dxdp: Arc::new(move |_p, _x, _t| DMatrix::from_element(1, 1, a)),
        d2h_dp2: Arc::new(move |_p, _x, _t| DMatrix::from_element(1, 1, -b * b / r)),
    }
}
