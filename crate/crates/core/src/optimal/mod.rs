//! Optimal controller and observer designs built on the Hamiltonian
//! characteristics machinery, with classical LQ and Kalman-Bucy oracles
//! for validation.
//!
//! The controller minimizes a running cost ℓ plus terminal cost through
//! the reduced Hamiltonian h = ℓ(x, u*, t) + p·f(x, u*, t); its value
//! function Hessian is swept backward from the terminal time. The
//! observer minimizes measurement/disturbance mismatch forward in time;
//! its state estimate rides the minimum ∇φ = 0 and carries the
//! information matrix Π = ∇∇φ.

pub mod oracles;

use crate::error::{Error, Result};
use crate::hamilton::{
    characteristic_step, convexity_of, CharState, ConvexityReport, Direction, Hamiltonian,
};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use std::sync::Arc;

pub type StateFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type StateJacFn = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
pub type RefFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Plant dynamics ẋ = f(x, u, t).
#[derive(Clone)]
pub enum Plant {
    /// Control-affine: f = drift(x, t) + B·u with constant input matrix.
    Affine { drift: StateFn, drift_jac: StateJacFn, input: DMatrix<f64> },
    /// General plant with supplied Jacobians (no closed-form control).
    General {
        f: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
        df_dx: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>,
        df_du: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>,
    },
}

/// Running cost ℓ(x, u, t).
#[derive(Clone)]
pub enum Cost {
    /// ½(x−x_ref)ᵀ·state_weight·(x−x_ref) + ½(u−u_ref)ᵀ·control_weight·(u−u_ref).
    Quadratic {
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
        x_ref: RefFn,
        u_ref: RefFn,
    },
    Custom {
        l: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>,
        dl_dx: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
        dl_du: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
    },
}

#[derive(Clone)]
pub struct ControlProblem {
    pub state_dim: usize,
    pub input_dim: usize,
    pub plant: Plant,
    pub cost: Cost,
    pub terminal_value: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub terminal_grad: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub terminal_hess: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub t_f: f64,
}

impl ControlProblem {
    /// Scalar LTI plant ẋ = a·x + b·u with cost ½(q x² + r u²) and
    /// terminal cost ½ p_f x².
    pub fn lti_scalar(a: f64, b: f64, q: f64, r: f64, p_f: f64, t_f: f64) -> Self {
        Self::lti(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            DMatrix::from_element(1, 1, p_f),
            t_f,
        )
    }

    /// LTI plant ẋ = Ax + Bu with quadratic cost weights (Q_state, R_ctrl)
    /// and terminal Hessian P_f.
    pub fn lti(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q_state: DMatrix<f64>,
        r_ctrl: DMatrix<f64>,
        p_f: DMatrix<f64>,
        t_f: f64,
    ) -> Self {
        let m = a.nrows();
        let p = b.ncols();
        let a1 = a.clone();
        let a2 = a.clone();
        let pf1 = p_f.clone();
        let pf2 = p_f.clone();
        ControlProblem {
            state_dim: m,
            input_dim: p,
            plant: Plant::Affine {
                drift: Arc::new(move |x, _t| &a1 * x),
                drift_jac: Arc::new(move |_x, _t| a2.clone()),
                input: b,
            },
            cost: Cost::Quadratic {
                state_weight: q_state,
                control_weight: r_ctrl,
                x_ref: Arc::new(move |_t| DVector::zeros(m)),
                u_ref: Arc::new(move |_t| DVector::zeros(p)),
            },
            terminal_value: Arc::new(move |x| 0.5 * (x.transpose() * &pf1 * x)[(0, 0)]),
            terminal_grad: Arc::new(move |x| &pf2 * x),
            terminal_hess: Arc::new(move |x| {
                let _ = x;
                p_f.clone()
            }),
            t_f,
        }
    }

    /// Value of the pre-minimization Hamiltonian ℓ(x, u, t) + pᵀf(x, u, t).
    pub fn full_hamiltonian(
        &self,
        p: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: f64,
    ) -> f64 {
        let l = match &self.cost {
            Cost::Quadratic { state_weight, control_weight, x_ref, u_ref } => {
                let dx = x - x_ref(t);
                let du = u - u_ref(t);
                0.5 * (dx.transpose() * state_weight * &dx)[(0, 0)]
                    + 0.5 * (du.transpose() * control_weight * &du)[(0, 0)]
            }
            Cost::Custom { l, .. } => l(x, u, t),
        };
        let f = match &self.plant {
            Plant::Affine { drift, input, .. } => drift(x, t) + input * u,
            Plant::General { f, .. } => f(x, u, t),
        };
        l + p.dot(&f)
    }

    /// Running cost at (x, u, t).
    pub fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> f64 {
        match &self.cost {
            Cost::Quadratic { state_weight, control_weight, x_ref, u_ref } => {
                let dx = x - x_ref(t);
                let du = u - u_ref(t);
                0.5 * (dx.transpose() * state_weight * &dx)[(0, 0)]
                    + 0.5 * (du.transpose() * control_weight * &du)[(0, 0)]
            }
            Cost::Custom { l, .. } => l(x, u, t),
        }
    }

    pub fn plant_rhs(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
        match &self.plant {
            Plant::Affine { drift, input, .. } => drift(x, t) + input * u,
            Plant::General { f, .. } => f(x, u, t),
        }
    }
}

/// Reduced Hamiltonian plus the minimizing control law.
pub struct ControlHamiltonian {
    pub ham: Hamiltonian,
    pub u_star: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
    /// Feedback gain W⁻¹Bᵀ applied to the Hessian: K(t) = gain_factor·H(t).
    pub gain_factor: DMatrix<f64>,
}

/// Eliminate the control from the Hamiltonian h = ℓ + p·f by stationarity.
/// Interior minimality of ℓ + p·f in u requires ∂ℓ/∂u + p·∂f/∂u = 0, so
/// for the built-in quadratic cost and affine plant
/// u* = u_ref − W⁻¹Bᵀp with W the control weight. Closed form exists only
/// for that pairing.
pub fn synthesize_hamiltonian_control(cp: &ControlProblem) -> Result<ControlHamiltonian> {
    let (drift, drift_jac, input) = match &cp.plant {
        Plant::Affine { drift, drift_jac, input } => (drift.clone(), drift_jac.clone(), input.clone()),
        Plant::General { .. } => {
            return Err(Error::NoClosedFormControl {
                reason: "plant is not control-affine".into(),
            })
        }
    };
    let (state_w, control_w, x_ref, u_ref) = match &cp.cost {
        Cost::Quadratic { state_weight, control_weight, x_ref, u_ref } => (
            state_weight.clone(),
            control_weight.clone(),
            x_ref.clone(),
            u_ref.clone(),
        ),
        Cost::Custom { .. } => {
            return Err(Error::NoClosedFormControl {
                reason: "running cost is not the built-in quadratic form".into(),
            })
        }
    };
    let w_inv = control_w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NoClosedFormControl { reason: "singular control weight".into() })?;
    let gain_factor = &w_inv * input.transpose();

    let bt = input.transpose();
    let u_ref_c = u_ref.clone();
    let winv_c = w_inv.clone();
    let u_star: Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync> =
        Arc::new(move |p, _x, t| u_ref_c(t) - &winv_c * &bt * p);

    // Reduced h(p, x, t) = ℓ(x, u*) + pᵀ(f₀ + B u*)
    //                    = ℓ_state + pᵀf₀ + pᵀB·u_ref − ½ pᵀ B W⁻¹Bᵀ p.
    let bwb = &input * &w_inv * input.transpose();
    let dim = cp.state_dim;

    let value = {
        let drift = drift.clone();
        let state_w = state_w.clone();
        let x_ref = x_ref.clone();
        let u_ref = u_ref.clone();
        let input = input.clone();
        let bwb = bwb.clone();
        move |p: &DVector<f64>, x: &DVector<f64>, t: f64| -> f64 {
            let dx = x - x_ref(t);
            0.5 * (dx.transpose() * &state_w * &dx)[(0, 0)]
                + p.dot(&(drift(x, t) + &input * u_ref(t)))
                - 0.5 * (p.transpose() * &bwb * p)[(0, 0)]
        }
    };
    let dh_dx = {
        let drift_jac = drift_jac.clone();
        let state_w = state_w.clone();
        let x_ref = x_ref.clone();
        move |p: &DVector<f64>, x: &DVector<f64>, t: f64| -> DVector<f64> {
            &state_w * (x - x_ref(t)) + drift_jac(x, t).transpose() * p
        }
    };
    let dh_dp = {
        let drift = drift.clone();
        let input = input.clone();
        let u_ref = u_ref.clone();
        let bwb = bwb.clone();
        move |p: &DVector<f64>, x: &DVector<f64>, t: f64| -> DVector<f64> {
            drift(x, t) + &input * u_ref(t) - &bwb * p
        }
    };

    // Second derivatives: the p-block and the cross block are exact; the
    // x-block needs drift curvature, taken by central differences of
    // dh_dx (exact when the drift is linear).
    let ham = Hamiltonian::from_grads(dim, value, dh_dx, dh_dp);
    let d2h_dp2: crate::hamilton::HessFn = {
        let bwb = bwb.clone();
        Arc::new(move |_p, _x, _t| -bwb.clone())
    };
    let d2h_dxdp: crate::hamilton::HessFn = {
        let drift_jac = drift_jac.clone();
        Arc::new(move |_p, x, t| drift_jac(x, t).transpose())
    };
    let ham = Hamiltonian { d2h_dp2, d2h_dxdp, ..ham };
    Ok(ControlHamiltonian { ham, u_star, gain_factor })
}

/// One optimal characteristic: backward sweep from a terminal anchor and
/// its forward presentation with controls and gains.
pub struct HjbCharacteristic {
    pub anchor: DVector<f64>,
    /// Integration order (t_f down to t0); use this for condition checks.
    pub sweep: Vec<CharState>,
    /// Forward time order (t0 up to t_f).
    pub trajectory: Vec<CharState>,
    /// u*(t) along `trajectory`.
    pub controls: Vec<DVector<f64>>,
    /// Feedback gain K(t) = W⁻¹BᵀH(t) along `trajectory`.
    pub gains: Vec<DMatrix<f64>>,
    pub convexity: ConvexityReport,
    /// Round-trip distance after re-integrating forward to t_f.
    pub replay_gap: f64,
    pub convexity_lost: bool,
}

pub struct HjbSolution {
    pub characteristics: Vec<HjbCharacteristic>,
    pub control: ControlHamiltonian,
}

/// Sweep characteristics backward from terminal anchors at t_f (where the
/// terminal cost pins ∇φ and ∇∇φ), then replay forward. The convexity
/// monitor runs during the sweep; loss of convexity is reported, not
/// fatal.
pub fn hjb_solve(
    cp: &ControlProblem,
    anchors: &[DVector<f64>],
    t0: f64,
    dt: f64,
) -> Result<HjbSolution> {
    let control = synthesize_hamiltonian_control(cp)?;
    let span = cp.t_f - t0;
    if span <= 0.0 || dt <= 0.0 {
        return Err(Error::BadParams { reason: "need t0 < t_f and dt > 0".into() });
    }
    let steps = (span / dt).round().max(1.0) as usize;
    let mut characteristics = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let s_f = CharState::new(
            anchor.clone(),
            (cp.terminal_grad)(anchor),
            (cp.terminal_hess)(anchor),
            cp.t_f,
        );
        let mut sweep = Vec::with_capacity(steps + 1);
        sweep.push(s_f.clone());
        let mut s = s_f;
        for _ in 0..steps {
            s = characteristic_step(&control.ham, &s, dt, Direction::Backward)?;
            sweep.push(s.clone());
        }
        let convexity = convexity_of(&sweep);
        let convexity_lost = convexity.first_loss.is_some();

        let trajectory: Vec<CharState> = sweep.iter().rev().cloned().collect();
        // Forward replay of (x, p) from the landed initial state as a
        // consistency gauge. The Hessian is not re-integrated: forward is
        // the unstable direction of its Riccati flow.
        let (mut rx, mut rp) = (trajectory[0].x.clone(), trajectory[0].p.clone());
        let mut rt = trajectory[0].t;
        for _ in 0..steps {
            let eval = |x: &DVector<f64>, p: &DVector<f64>, t: f64| {
                ((control.ham.dh_dp)(p, x, t), -(control.ham.dh_dx)(p, x, t))
            };
            let (k1x, k1p) = eval(&rx, &rp, rt);
            let (k2x, k2p) =
                eval(&(&rx + &k1x * (0.5 * dt)), &(&rp + &k1p * (0.5 * dt)), rt + 0.5 * dt);
            let (k3x, k3p) =
                eval(&(&rx + &k2x * (0.5 * dt)), &(&rp + &k2p * (0.5 * dt)), rt + 0.5 * dt);
            let (k4x, k4p) = eval(&(&rx + &k3x * dt), &(&rp + &k3p * dt), rt + dt);
            rx += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
            rp += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (dt / 6.0);
            rt += dt;
        }
        let replay_gap = (&rx - anchor).norm() + (&rp - &trajectory.last().unwrap().p).norm();

        let controls: Vec<DVector<f64>> =
            trajectory.iter().map(|s| (control.u_star)(&s.p, &s.x, s.t)).collect();
        let gains: Vec<DMatrix<f64>> =
            trajectory.iter().map(|s| &control.gain_factor * &s.hess).collect();
        // Present times in forward order.
        trajectory.iter_mut().for_each(|_| {});
        characteristics.push(HjbCharacteristic {
            anchor: anchor.clone(),
            sweep,
            trajectory,
            controls,
            gains,
            convexity,
            replay_gap,
            convexity_lost,
        });
    }
    Ok(HjbSolution { characteristics, control })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopVerdict {
    Contracting,
    SemiContracting,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct ContractionCheck {
    pub times: Vec<f64>,
    /// Spectrum floor of W(t) = ∂²h/∂x² − H(∂²h/∂p²)H.
    pub w_min_eigs: Vec<f64>,
    pub hess_min_eigs: Vec<f64>,
    pub verdict: LoopVerdict,
}

/// Closed-loop contraction in the metric H: along the optimal flow,
/// d/dt(δxᵀHδx) = −δxᵀWδx with W = ∂²h/∂x² − H(∂²h/∂p²)H, so uniformly
/// positive definite W (with H ≻ 0) certifies contraction and W ⪰ 0
/// semi-contraction.
pub fn closed_loop_contraction_check(ham: &Hamiltonian, traj: &[CharState]) -> ContractionCheck {
    let mut times = Vec::with_capacity(traj.len());
    let mut w_min = Vec::with_capacity(traj.len());
    let mut h_min = Vec::with_capacity(traj.len());
    let mut scale = 0.0f64;
    for s in traj {
        let hxx = (ham.d2h_dx2)(&s.p, &s.x, s.t);
        let hpp = (ham.d2h_dp2)(&s.p, &s.x, s.t);
        let w = &hxx - &s.hess * &hpp * &s.hess;
        let w = (&w + w.transpose()) * 0.5;
        scale = scale.max(w.norm());
        let we = SymmetricEigen::new(w);
        w_min.push(we.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b)));
        h_min.push(s.min_hess_eig());
        times.push(s.t);
    }
    let tol = 1e-9 * (1.0 + scale);
    let wfloor = w_min.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let hfloor = h_min.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let verdict = if wfloor > tol && hfloor > tol {
        LoopVerdict::Contracting
    } else if wfloor >= -tol && hfloor >= -tol {
        LoopVerdict::SemiContracting
    } else {
        LoopVerdict::Inconclusive
    };
    ContractionCheck { times, w_min_eigs: w_min, hess_min_eigs: h_min, verdict }
}

/// Simulate the plant under a given open-loop control, returning the
/// realized cost ∫ℓ dt + terminal (trapezoid in time, RK4 states).
pub fn realized_cost(
    cp: &ControlProblem,
    x0: &DVector<f64>,
    u_of_t: &dyn Fn(f64) -> DVector<f64>,
    t0: f64,
    dt: f64,
) -> Result<f64> {
    let steps = ((cp.t_f - t0) / dt).round().max(1.0) as usize;
    let h = (cp.t_f - t0) / steps as f64;
    let mut x = x0.clone();
    let mut t = t0;
    let mut cost = 0.0;
    for _ in 0..steps {
        let l0 = cp.running_cost(&x, &u_of_t(t), t);
        let k1 = cp.plant_rhs(&x, &u_of_t(t), t);
        let k2 = cp.plant_rhs(&(&x + &k1 * (0.5 * h)), &u_of_t(t + 0.5 * h), t + 0.5 * h);
        let k3 = cp.plant_rhs(&(&x + &k2 * (0.5 * h)), &u_of_t(t + 0.5 * h), t + 0.5 * h);
        let k4 = cp.plant_rhs(&(&x + &k3 * h), &u_of_t(t + h), t + h);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t += h;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        let l1 = cp.running_cost(&x, &u_of_t(t), t);
        cost += 0.5 * h * (l0 + l1);
    }
    Ok(cost + (cp.terminal_value)(&x))
}

/// Optimal observer problem data.
#[derive(Clone)]
pub struct ObserverProblem {
    pub state_dim: usize,
    pub meas_dim: usize,
    pub dist_dim: usize,
    /// Plant drift with known inputs folded in.
    pub drift: StateFn,
    pub drift_jac: StateJacFn,
    /// Disturbance input matrix B (state_dim × dist_dim).
    pub disturbance: DMatrix<f64>,
    pub measure: StateFn,
    pub measure_jac: StateJacFn,
    /// Information weight of measurement residuals.
    pub meas_weight: DMatrix<f64>,
    /// Weight penalizing disturbance magnitude.
    pub dist_weight: DMatrix<f64>,
    pub info0: DMatrix<f64>,
    pub xhat0: DVector<f64>,
}

impl ObserverProblem {
    /// LTI observer data: ẋ = Ax + w, y = Cx with weights (r_meas, q_dist).
    pub fn lti(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        meas_weight: DMatrix<f64>,
        dist_weight: DMatrix<f64>,
        info0: DMatrix<f64>,
        xhat0: DVector<f64>,
    ) -> Self {
        let m = a.nrows();
        let q = c.nrows();
        let p = m;
        let a1 = a.clone();
        let c1 = c.clone();
        ObserverProblem {
            state_dim: m,
            meas_dim: q,
            dist_dim: p,
            drift: Arc::new(move |x, _t| &a1 * x),
            drift_jac: Arc::new(move |_x, _t| a.clone()),
            disturbance: DMatrix::identity(m, m),
            measure: Arc::new(move |x, _t| &c1 * x),
            measure_jac: Arc::new(move |_x, _t| c.clone()),
            meas_weight,
            dist_weight,
            info0,
            xhat0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObserverState {
    pub xhat: DVector<f64>,
    pub info: DMatrix<f64>,
    pub t: f64,
}

fn chol_ok(m: &DMatrix<f64>) -> bool {
    Cholesky::new(m.clone()).is_some()
}

/// One RK4 step of the observer: the estimate follows
/// dx̂/dt = f(x̂) + Π⁻¹Cᵀ·R·(y_m − y(x̂)) and the information matrix obeys
/// dΠ/dt = ℓ_xx − AᵀΠ − ΠA − Π·B·Q⁻¹·Bᵀ·Π, the Hessian flow of the
/// observer Hamiltonian evaluated at ∇φ = 0. The measurement is held
/// constant over the step.
pub fn observer_step(
    op: &ObserverProblem,
    est: &ObserverState,
    y_m: &DVector<f64>,
    dt: f64,
) -> Result<ObserverState> {
    if !chol_ok(&est.info) {
        return Err(Error::SingularInformation { t: est.t });
    }
    let q_inv = op
        .dist_weight
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::BadParams { reason: "singular disturbance weight".into() })?;
    let bqb = &op.disturbance * q_inv * op.disturbance.transpose();

    // ℓ_x(x) = C(x)ᵀR(y(x) − y_m); its x-derivative by central differences
    // (exact for linear measurement maps).
    let lx = |x: &DVector<f64>, t: f64| -> DVector<f64> {
        (op.measure_jac)(x, t).transpose() * &op.meas_weight * ((op.measure)(x, t) - y_m)
    };
    let lxx = |x: &DVector<f64>, t: f64| -> DMatrix<f64> {
        let n = x.len();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let e = 1e-6 * (1.0 + x[j].abs());
            let mut hi = x.clone();
            hi[j] += e;
            let mut lo = x.clone();
            lo[j] -= e;
            let col = (lx(&hi, t) - lx(&lo, t)) / (2.0 * e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        (&m + m.transpose()) * 0.5
    };

    let rhs = |x: &DVector<f64>, pi: &DMatrix<f64>, t: f64| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let pi_inv = pi.clone().try_inverse().ok_or(Error::SingularInformation { t })?;
        let a = (op.drift_jac)(x, t);
        let dx = (op.drift)(x, t) - pi_inv * lx(x, t);
        let dpi = lxx(x, t) - a.transpose() * pi - pi * &a - pi * &bqb * pi;
        Ok((dx, dpi))
    };

    let (k1x, k1p) = rhs(&est.xhat, &est.info, est.t)?;
    let (k2x, k2p) = rhs(
        &(&est.xhat + &k1x * (0.5 * dt)),
        &(&est.info + &k1p * (0.5 * dt)),
        est.t + 0.5 * dt,
    )?;
    let (k3x, k3p) = rhs(
        &(&est.xhat + &k2x * (0.5 * dt)),
        &(&est.info + &k2p * (0.5 * dt)),
        est.t + 0.5 * dt,
    )?;
    let (k4x, k4p) = rhs(&(&est.xhat + &k3x * dt), &(&est.info + &k3p * dt), est.t + dt)?;

    let xhat = &est.xhat + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
    let info = &est.info + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (dt / 6.0);
    let info = (&info + info.transpose()) * 0.5;
    if !xhat.iter().all(|v| v.is_finite()) || !info.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { t: est.t + dt });
    }
    if !chol_ok(&info) {
        return Err(Error::SingularInformation { t: est.t + dt });
    }
    Ok(ObserverState { xhat, info, t: est.t + dt })
}

/// Run the observer across a measurement stream, holding each sample
/// between its timestamp and the next and substepping at `dt`.
pub fn run_observer(
    op: &ObserverProblem,
    measurements: &[(f64, DVector<f64>)],
    dt: f64,
) -> Result<Vec<ObserverState>> {
    if measurements.is_empty() {
        return Err(Error::BadParams { reason: "empty measurement stream".into() });
    }
    let mut est = ObserverState { xhat: op.xhat0.clone(), info: op.info0.clone(), t: measurements[0].0 };
    let mut out = vec![est.clone()];
    for idx in 0..measurements.len() - 1 {
        let (t_now, y) = &measurements[idx];
        let t_next = measurements[idx + 1].0;
        let span = t_next - t_now;
        let steps = (span / dt).round().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            est = observer_step(op, &est, y, h)?;
        }
        out.push(est.clone());
    }
    Ok(out)
}

/// Observer gain K = Π⁻¹CᵀR at an observer state.
pub fn observer_gain(op: &ObserverProblem, est: &ObserverState) -> Result<DMatrix<f64>> {
    let pi_inv = est.info.clone().try_inverse().ok_or(Error::SingularInformation { t: est.t })?;
    Ok(pi_inv * (op.measure_jac)(&est.xhat, est.t).transpose() * &op.meas_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_stationarity_algebra() {
        // f = ax + bu, ℓ = ½(qx² + ru²): u* = −(b/r)p and
        // h = ½qx² + axp − ½(b²/r)p².
        let (a, b, q, r) = (0.7, 1.3, 0.9, 0.5);
        let cp = ControlProblem::lti_scalar(a, b, q, r, 1.0, 1.0);
        let ch = synthesize_hamiltonian_control(&cp).unwrap();
        let p = DVector::from_element(1, 0.4);
        let x = DVector::from_element(1, -0.8);
        let u = (ch.u_star)(&p, &x, 0.0);
        assert_relative_eq!(u[0], -(b / r) * p[0], epsilon = 1e-12);
        let h = (ch.ham.value)(&p, &x, 0.0);
        let expect = 0.5 * q * x[0] * x[0] + a * x[0] * p[0] - 0.5 * (b * b / r) * p[0] * p[0];
        assert_relative_eq!(h, expect, epsilon = 1e-12);
        // Analytic second derivatives.
        assert_relative_eq!((ch.ham.d2h_dp2)(&p, &x, 0.0)[(0, 0)], -b * b / r, epsilon = 1e-12);
        assert_relative_eq!((ch.ham.d2h_dxdp)(&p, &x, 0.0)[(0, 0)], a, epsilon = 1e-12);
        assert_relative_eq!((ch.ham.d2h_dx2)(&p, &x, 0.0)[(0, 0)], q, epsilon = 1e-7);
    }

    #[test]
    fn no_input_authority_returns_reference_control() {
        let cp = ControlProblem::lti_scalar(0.5, 0.0, 1.0, 1.0, 1.0, 1.0);
        let ch = synthesize_hamiltonian_control(&cp).unwrap();
        let p = DVector::from_element(1, 3.0);
        let x = DVector::from_element(1, 1.0);
        assert_relative_eq!((ch.u_star)(&p, &x, 0.0)[0], 0.0, epsilon = 1e-14);
        // h reduces to ℓ(x, u_ref) + p·f(x, u_ref).
        let h = (ch.ham.value)(&p, &x, 0.0);
        assert_relative_eq!(h, 0.5 * x[0] * x[0] + p[0] * 0.5 * x[0], epsilon = 1e-12);
    }

    #[test]
    fn u_star_minimizes_hamiltonian_over_random_probes() {
        let cp = ControlProblem::lti_scalar(0.3, 1.1, 0.8, 0.6, 1.0, 1.0);
        let ch = synthesize_hamiltonian_control(&cp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = DVector::from_element(1, rng.gen_range(-2.0..2.0));
            let x = DVector::from_element(1, rng.gen_range(-2.0..2.0));
            let us = (ch.u_star)(&p, &x, 0.0);
            let h_star = cp.full_hamiltonian(&p, &x, &us, 0.0);
            let u = DVector::from_element(1, rng.gen_range(-4.0..4.0));
            let h_other = cp.full_hamiltonian(&p, &x, &u, 0.0);
            assert!(h_star <= h_other + 1e-12, "u* not minimal: {h_star} > {h_other}");
        }
    }

    #[test]
    fn non_affine_plant_is_rejected() {
        let cp = ControlProblem {
            state_dim: 1,
            input_dim: 1,
            plant: Plant::General {
                f: Arc::new(|x, u, _t| DVector::from_element(1, x[0] * u[0] * u[0])),
                df_dx: Arc::new(|_x, u, _t| DMatrix::from_element(1, 1, u[0] * u[0])),
                df_du: Arc::new(|x, u, _t| DMatrix::from_element(1, 1, 2.0 * x[0] * u[0])),
            },
            cost: Cost::Quadratic {
                state_weight: DMatrix::identity(1, 1),
                control_weight: DMatrix::identity(1, 1),
                x_ref: Arc::new(|_t| DVector::zeros(1)),
                u_ref: Arc::new(|_t| DVector::zeros(1)),
            },
            terminal_value: Arc::new(|_x| 0.0),
            terminal_grad: Arc::new(|_x| DVector::zeros(1)),
            terminal_hess: Arc::new(|_x| DMatrix::zeros(1, 1)),
            t_f: 1.0,
        };
        assert!(matches!(
            synthesize_hamiltonian_control(&cp),
            Err(Error::NoClosedFormControl { .. })
        ));
    }

    #[test]
    fn hjb_long_horizon_gain_converges_to_one() {
        // a=0, b=q=r=1: H → 1 backward, so K = bH/r → 1.
        let cp = ControlProblem::lti_scalar(0.0, 1.0, 1.0, 1.0, 0.2, 20.0);
        let sol = hjb_solve(&cp, &[DVector::from_element(1, 1.0)], 0.0, 1e-3).unwrap();
        let ch = &sol.characteristics[0];
        assert!(!ch.convexity_lost);
        // Early times (long to go): gain is at the stationary value.
        assert_relative_eq!(ch.gains[0][(0, 0)], 1.0, epsilon = 1e-6);
        assert!(ch.replay_gap < 1e-6, "replay gap {}", ch.replay_gap);
    }

    #[test]
    fn hjb_zero_cost_follows_open_loop() {
        // q = 0 and zero terminal cost: p ≡ 0, u* = u_ref = 0.
        let cp = ControlProblem::lti_scalar(0.4, 1.0, 0.0, 1.0, 0.0, 2.0);
        let sol = hjb_solve(&cp, &[DVector::from_element(1, 0.7)], 0.0, 1e-3).unwrap();
        let ch = &sol.characteristics[0];
        for (s, u) in ch.trajectory.iter().zip(&ch.controls) {
            assert!(s.p.norm() < 1e-12);
            assert!(u.norm() < 1e-12);
        }
    }

    #[test]
    fn hjb_time_varying_matches_riccati_oracle() {
        // Time-varying a(t): the characteristic Hessian must match an
        // independent integration of the classical Riccati ODE.
        let tf = 4.0;
        let a_of_t = |t: f64| 0.3 + 0.2 * (1.5 * t).sin();
        let (b, q, r, pf) = (1.0, 1.2, 0.7, 0.5);
        let cp = ControlProblem {
            state_dim: 1,
            input_dim: 1,
            plant: Plant::Affine {
                drift: Arc::new(move |x, t| DVector::from_element(1, a_of_t(t) * x[0])),
                drift_jac: Arc::new(move |_x, t| DMatrix::from_element(1, 1, a_of_t(t))),
                input: DMatrix::from_element(1, 1, b),
            },
            cost: Cost::Quadratic {
                state_weight: DMatrix::from_element(1, 1, q),
                control_weight: DMatrix::from_element(1, 1, r),
                x_ref: Arc::new(|_t| DVector::zeros(1)),
                u_ref: Arc::new(|_t| DVector::zeros(1)),
            },
            terminal_value: Arc::new(move |x| 0.5 * pf * x[0] * x[0]),
            terminal_grad: Arc::new(move |x| DVector::from_element(1, pf * x[0])),
            terminal_hess: Arc::new(move |_x| DMatrix::from_element(1, 1, pf)),
            t_f: tf,
        };
        let dt = 1e-3;
        let sol = hjb_solve(&cp, &[DVector::from_element(1, 1.0)], 0.0, dt).unwrap();
        let sweep = &sol.characteristics[0].sweep;

        // Independent Riccati: dP/dτ = 2a(t)P + q − (b²/r)P², τ = tf − t.
        let mut p_ref = pf;
        let mut t = tf;
        for (k, s) in sweep.iter().enumerate() {
            assert!(
                (s.hess[(0, 0)] - p_ref).abs() < 1e-6,
                "k={k} char={} ref={p_ref}",
                s.hess[(0, 0)]
            );
            let f = |p: f64, t: f64| 2.0 * a_of_t(t) * p + q - (b * b / r) * p * p;
            let k1 = f(p_ref, t);
            let k2 = f(p_ref + 0.5 * dt * k1, t - 0.5 * dt);
            let k3 = f(p_ref + 0.5 * dt * k2, t - 0.5 * dt);
            let k4 = f(p_ref + dt * k3, t - dt);
            p_ref += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t -= dt;
        }
    }

    #[test]
    fn closed_loop_check_contracting_and_boundary_cases() {
        // At the stationary point H = 1 (a=0, b=q=r=1): W = q + H²b²/r = 2.
        let cp = ControlProblem::lti_scalar(0.0, 1.0, 1.0, 1.0, 1.0, 10.0);
        let sol = hjb_solve(&cp, &[DVector::from_element(1, 1.0)], 0.0, 1e-2).unwrap();
        let ch = &sol.characteristics[0];
        let check = closed_loop_contraction_check(&sol.control.ham, &ch.trajectory);
        assert_eq!(check.verdict, LoopVerdict::Contracting);
        for w in &check.w_min_eigs {
            assert_relative_eq!(*w, 2.0, epsilon = 1e-9);
        }

        // b = 0, q > 0: W = q.
        let cp0 = ControlProblem::lti_scalar(-0.5, 0.0, 1.0, 1.0, 1.0, 2.0);
        let sol0 = hjb_solve(&cp0, &[DVector::from_element(1, 1.0)], 0.0, 1e-2).unwrap();
        let check0 =
            closed_loop_contraction_check(&sol0.control.ham, &sol0.characteristics[0].trajectory);
        assert_eq!(check0.verdict, LoopVerdict::Contracting);
        for w in &check0.w_min_eigs {
            assert_relative_eq!(*w, 1.0, epsilon = 1e-9);
        }

        // q = 0 with positive terminal Hessian: W = H²b²/r by direct
        // substitution. On a finite horizon every sample is strictly
        // positive, but the floor decays with H — no uniform margin
        // survives a growing horizon.
        let cpq = ControlProblem::lti_scalar(0.0, 1.0, 0.0, 1.0, 1.0, 30.0);
        let solq = hjb_solve(&cpq, &[DVector::from_element(1, 1.0)], 0.0, 1e-2).unwrap();
        let chq = &solq.characteristics[0];
        let checkq = closed_loop_contraction_check(&solq.control.ham, &chq.trajectory);
        for (s, w) in chq.trajectory.iter().zip(&checkq.w_min_eigs) {
            let h = s.hess[(0, 0)];
            assert_relative_eq!(*w, h * h, epsilon = 1e-9);
            assert!(*w >= 0.0);
        }
        assert_ne!(checkq.verdict, LoopVerdict::Inconclusive);
        let w0 = checkq.w_min_eigs[0];
        let wf = *checkq.w_min_eigs.last().unwrap();
        assert!(w0 < 0.01 * wf, "floor did not decay: {w0} vs {wf}");
    }

    #[test]
    fn hjb_matches_lq_oracle_scalar_and_double_integrator() {
        let dt = 1e-3;
        // Scalar.
        let cp = ControlProblem::lti_scalar(0.2, 1.0, 1.0, 1.0, 0.5, 8.0);
        let sol = hjb_solve(&cp, &[DVector::from_element(1, 1.0)], 0.0, dt).unwrap();
        let oracle = oracles::lq_riccati(
            &DMatrix::from_element(1, 1, 0.2),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.5),
            8.0,
            8.0,
            dt,
        );
        let sweep = &sol.characteristics[0].sweep;
        assert_eq!(sweep.len(), oracle.len());
        let mut worst = 0.0f64;
        for (s, (t, p)) in sweep.iter().zip(&oracle) {
            assert!((s.t - t).abs() < 1e-9);
            worst = worst.max((s.hess[(0, 0)] - p[(0, 0)]).abs());
        }
        assert!(worst < 1e-6, "worst gap {worst}");

        // Double integrator.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let pf = DMatrix::zeros(2, 2);
        let cp2 = ControlProblem::lti(a.clone(), b.clone(), q.clone(), r.clone(), pf.clone(), 10.0);
        let sol2 = hjb_solve(&cp2, &[DVector::from_vec(vec![1.0, 0.0])], 0.0, dt).unwrap();
        let oracle2 = oracles::lq_riccati(&a, &b, &q, &r, &pf, 10.0, 10.0, dt);
        let sweep2 = &sol2.characteristics[0].sweep;
        let mut worst2 = 0.0f64;
        for (s, (_t, p)) in sweep2.iter().zip(&oracle2) {
            worst2 = worst2.max((&s.hess - p).norm());
        }
        assert!(worst2 < 1e-6, "worst gap {worst2}");
    }

    #[test]
    fn perturbing_the_optimal_control_never_beats_it() {
        let dt = 1e-3;
        let cp = ControlProblem::lti_scalar(0.1, 1.0, 1.0, 1.0, 0.8, 4.0);
        let anchor = DVector::from_element(1, 0.9);
        let sol = hjb_solve(&cp, &[anchor], 0.0, dt).unwrap();
        let ch = &sol.characteristics[0];
        let x0 = ch.trajectory[0].x.clone();
        let t0 = ch.trajectory[0].t;
        let controls = ch.controls.clone();
        let u_opt = move |t: f64| -> DVector<f64> {
            let idx = (((t - t0) / dt).round() as usize).min(controls.len() - 1);
            controls[idx].clone()
        };
        let j_star = realized_cost(&cp, &x0, &u_opt, t0, dt).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let amp = rng.gen_range(0.01..0.3);
            let freq = rng.gen_range(0.5..4.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let base = u_opt.clone();
            let u_pert =
                move |t: f64| &base(t) + DVector::from_element(1, amp * (freq * t + phase).sin());
            let j = realized_cost(&cp, &x0, &u_pert, t0, dt).unwrap();
            assert!(j >= j_star - 1e-6, "perturbation beat the optimum: {j} < {j_star}");
        }
    }

    #[test]
    fn observer_matches_kalman_bucy_scalar() {
        // f = ax + u, y = cx, weights (r_m, q): the estimate and P = Π⁻¹
        // must track an independent Kalman-Bucy integration.
        let (a, c, r_m, q) = (-0.3, 1.2, 2.0, 0.5);
        let op = ObserverProblem::lti(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, r_m),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, 0.5),
        );
        // Synthetic measurement stream.
        let dt = 1e-3;
        let stream: Vec<(f64, DVector<f64>)> = (0..2000)
            .map(|k| {
                let t = k as f64 * dt;
                (t, DVector::from_element(1, (2.0 * t).sin()))
            })
            .collect();
        let ests = run_observer(&op, &stream, dt).unwrap();
        let oracle = oracles::kalman_bucy(
            &DMatrix::from_element(1, 1, a),
            &DMatrix::from_element(1, 1, c),
            &DMatrix::from_element(1, 1, 1.0 / q),
            &DMatrix::from_element(1, 1, r_m),
            &DVector::from_element(1, 0.5),
            &DMatrix::from_element(1, 1, 0.5),
            &stream,
            dt,
        );
        assert_eq!(ests.len(), oracle.len());
        let mut worst = 0.0f64;
        for (est, (_t, x, p)) in ests.iter().zip(&oracle) {
            worst = worst.max((est.xhat[0] - x[0]).abs());
            let p_from_info = 1.0 / est.info[(0, 0)];
            worst = worst.max((p_from_info - p[(0, 0)]).abs());
        }
        assert!(worst < 1e-6, "worst gap {worst}");
    }

    #[test]
    fn no_measurement_information_decays_with_closed_form() {
        // r_m = 0, a = 0: x̂ constant and Π(t) = Π₀/(1 + Π₀t/q).
        let q = 0.7;
        let pi0 = 2.0;
        let op = ObserverProblem::lti(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, pi0),
            DVector::from_element(1, 0.3),
        );
        let dt = 1e-3;
        let mut est = ObserverState { xhat: op.xhat0.clone(), info: op.info0.clone(), t: 0.0 };
        let y = DVector::zeros(1);
        for _ in 0..5000 {
            est = observer_step(&op, &est, &y, dt).unwrap();
        }
        assert_relative_eq!(est.xhat[0], 0.3, epsilon = 1e-12);
        let exact = pi0 / (1.0 + pi0 * est.t / q);
        assert!((est.info[(0, 0)] - exact).abs() < 1e-8);
    }

    #[test]
    fn zero_innovation_follows_pure_plant() {
        // y_m always equals the predicted measurement: the correction
        // vanishes and x̂ follows ẋ = f(x̂).
        let a = -0.4;
        let op = ObserverProblem::lti(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        );
        let dt = 1e-3;
        let mut est = ObserverState { xhat: op.xhat0.clone(), info: op.info0.clone(), t: 0.0 };
        for _ in 0..1000 {
            let y = DVector::from_element(1, 2.0 * est.xhat[0]);
            est = observer_step(&op, &est, &y, dt).unwrap();
        }
        // After t = 1: x̂ = e^{a·t}·x̂₀ up to the sample-hold bias of the
        // innovation (the measurement is frozen while x̂ moves inside each
        // step, so the correction is O(dt) overall).
        assert_relative_eq!(est.xhat[0], (a * 1.0f64).exp(), epsilon = 2e-3);
    }

    #[test]
    fn information_stays_symmetric_positive_definite() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let op = ObserverProblem::lti(
            a,
            c,
            DMatrix::from_element(1, 1, 1.5),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 2.0,
            DVector::zeros(2),
        );
        let dt = 1e-3;
        let stream: Vec<(f64, DVector<f64>)> = (0..3000)
            .map(|k| (k as f64 * dt, DVector::from_element(1, (k as f64 * dt).cos())))
            .collect();
        let ests = run_observer(&op, &stream, dt).unwrap();
        for est in &ests {
            let sym_gap = (&est.info - est.info.transpose()).norm();
            assert!(sym_gap < 1e-10);
            let eig = SymmetricEigen::new(est.info.clone());
            assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        }
    }
}
