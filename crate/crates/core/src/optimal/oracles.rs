//! Classical finite-horizon LQ and Kalman-Bucy reference implementations.
//!
//! These integrate the textbook Riccati/covariance equations directly
//! with plain RK4 and deliberately share no code with the
//! characteristic-based machinery they validate.

use nalgebra::{DMatrix, DVector};

/// Backward solution of −dP/dt = AᵀP + PA − PBR⁻¹BᵀP + Q from P(t_f) = P_f.
/// Returns samples (t, P(t)) in decreasing t, one per step, starting at t_f.
pub fn lq_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
    t_f: f64,
    horizon: f64,
    dt: f64,
) -> Vec<(f64, DMatrix<f64>)> {
    let r_inv = r.clone().try_inverse().expect("control weight must be invertible");
    let s = b * &r_inv * b.transpose();
    // dP/dτ with τ = t_f − t.
    let rhs = |p: &DMatrix<f64>| -> DMatrix<f64> {
        a.transpose() * p + p * a - p * &s * p + q
    };
    let steps = (horizon / dt).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut p = p_f.clone();
    let mut t = t_f;
    out.push((t, p.clone()));
    for _ in 0..steps {
        let k1 = rhs(&p);
        let k2 = rhs(&(&p + &k1 * (0.5 * dt)));
        let k3 = rhs(&(&p + &k2 * (0.5 * dt)));
        let k4 = rhs(&(&p + &k3 * dt));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        p = (&p + p.transpose()) * 0.5;
        t -= dt;
        out.push((t, p.clone()));
    }
    out
}

/// Feedback gain K = R⁻¹BᵀP.
pub fn lq_gain(b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    r.clone().try_inverse().expect("control weight must be invertible") * b.transpose() * p
}

/// Continuous Kalman-Bucy filter: dP/dt = AP + PAᵀ + Q_n − PCᵀR_wCP and
/// dx̂/dt = Ax̂ + PCᵀR_w(y_m − Cx̂), with R_w the measurement information
/// weight (inverse noise covariance) and Q_n the process covariance.
/// Measurements are sampled-and-held per step. Returns (t, x̂, P) samples.
pub fn kalman_bucy(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q_n: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    measurements: &[(f64, DVector<f64>)],
    dt: f64,
) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut out = Vec::with_capacity(measurements.len());
    for (idx, (t, y)) in measurements.iter().enumerate() {
        out.push((*t, x.clone(), p.clone()));
        if idx + 1 == measurements.len() {
            break;
        }
        let h = measurements[idx + 1].0 - t;
        let steps = (h / dt).round().max(1.0) as usize;
        let hs = h / steps as f64;
        for _ in 0..steps {
            let fx = |x: &DVector<f64>, p: &DMatrix<f64>| -> DVector<f64> {
                a * x + p * c.transpose() * r_w * (y - c * x)
            };
            let fp = |p: &DMatrix<f64>| -> DMatrix<f64> {
                a * p + p * a.transpose() + q_n - p * c.transpose() * r_w * c * p
            };
            let k1x = fx(&x, &p);
            let k1p = fp(&p);
            let k2x = fx(&(&x + &k1x * (0.5 * hs)), &(&p + &k1p * (0.5 * hs)));
            let k2p = fp(&(&p + &k1p * (0.5 * hs)));
            let k3x = fx(&(&x + &k2x * (0.5 * hs)), &(&p + &k2p * (0.5 * hs)));
            let k3p = fp(&(&p + &k2p * (0.5 * hs)));
            let k4x = fx(&(&x + &k3x * hs), &(&p + &k3p * hs));
            let k4p = fp(&(&p + &k3p * hs));
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (hs / 6.0);
            p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (hs / 6.0);
            p = (&p + p.transpose()) * 0.5;
        }
    }
    out
}
