//! Lie-derivative positivity chains certifying that convexity of the
//! underlying field persists along characteristics.
//!
//! Near a zero crossing of an eigenvalue of H, the derivatives of H along
//! the flow are governed by the transported curvature chain
//!
//! K₀ = −σ·∂²h/∂x²,  K_{c+1} = d/dτ(K_c) − σ·[(∂²h/∂x∂p)K_c + K_c(∂²h/∂p∂x)]
//!
//! (growth condition) and the mirrored chain with base σ·∂²h/∂p²
//! (boundedness condition), where τ is time along the direction of
//! integration and σ = ±1 its sign. The convexity certificate asks each
//! chain to be positive semidefinite level by level, with the residual
//! nullspace becoming uniformly positive at some level. For
//! linear time-invariant data the levels collapse onto the familiar
//! controllability/observability rank chains [B, AB, …] and
//! [C; CA; …], rank filling at block g corresponding to chain index
//! 2(g−1); the reported order counts those blocks.

use super::{CharState, Hamiltonian};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};

/// Per-level diagnostics of a chain evaluation.
#[derive(Debug, Clone)]
pub struct LieLevel {
    pub chain_index: usize,
    /// Worst (smallest) eigenvalue of the nullspace-restricted chain
    /// matrix over the trajectory window.
    pub min_eig: f64,
    pub max_norm: f64,
    /// Dimension of the residual nullspace carried to the next level.
    pub nullspace_dim_after: usize,
}

#[derive(Debug, Clone)]
pub struct LieReport {
    /// Grammian-style order at which the condition succeeded, or None.
    pub order: Option<usize>,
    pub levels: Vec<LieLevel>,
}

#[derive(Clone, Copy)]
enum Chain {
    Growth,
    Boundedness,
}

fn chain_order_from_index(c: usize) -> usize {
    if c == 0 {
        1
    } else {
        c.div_ceil(2) + 1
    }
}

fn evaluate_chain(
    ham: &Hamiltonian,
    traj: &[CharState],
    j_max: usize,
    chain: Chain,
) -> Result<LieReport> {
    if !(1..=3).contains(&j_max) {
        return Err(Error::BadParams { reason: format!("j_max = {j_max} must be 1, 2 or 3") });
    }
    let c_max = 2 * (j_max - 1);
    if traj.len() < 2 * c_max + 1 {
        return Err(Error::InsufficientTrajectory { needed: 2 * c_max + 1, got: traj.len() });
    }
    let m = ham.dim;
    // Direction of integration from the stored time ordering.
    let sigma = if traj.len() < 2 || traj[1].t >= traj[0].t { 1.0 } else { -1.0 };

    // Coefficient matrices along the trajectory.
    let hxp: Vec<DMatrix<f64>> =
        traj.iter().map(|s| (ham.d2h_dxdp)(&s.p, &s.x, s.t)).collect();
    let base: Vec<DMatrix<f64>> = traj
        .iter()
        .map(|s| match chain {
            Chain::Growth => (ham.d2h_dx2)(&s.p, &s.x, s.t) * (-sigma),
            Chain::Boundedness => (ham.d2h_dp2)(&s.p, &s.x, s.t) * sigma,
        })
        .collect();

    // Chain levels: level c is valid on samples [c, len−1−c].
    let mut levels: Vec<Vec<DMatrix<f64>>> = vec![base];
    for c in 0..c_max {
        let prev = &levels[c];
        let mut next = Vec::with_capacity(prev.len());
        for k in 0..prev.len() {
            if k == 0 || k + 1 == prev.len() {
                next.push(DMatrix::zeros(m, m));
                continue;
            }
            // d/dτ by central differences in stored (integration) order.
            let span = (traj[k + 1].t - traj[k - 1].t).abs();
            let ddt = (&prev[k + 1] - &prev[k - 1]) / span;
            let kmat = match chain {
                Chain::Growth => &ddt - (&hxp[k] * &prev[k] + &prev[k] * hxp[k].transpose()) * sigma,
                Chain::Boundedness => {
                    &ddt + (hxp[k].transpose() * &prev[k] + &prev[k] * &hxp[k]) * sigma
                }
            };
            next.push(kmat);
        }
        levels.push(next);
    }

    // Nested-nullspace scan.
    let mut basis = DMatrix::<f64>::identity(m, m);
    let mut reports = Vec::new();
    for (c, series) in levels.iter().enumerate() {
        let lo = c;
        let hi = series.len() - c;
        let r = basis.ncols();
        let mut min_eig = f64::INFINITY;
        let mut max_norm = 0.0f64;
        let mut avg = DMatrix::zeros(r, r);
        let mut count = 0.0;
        for item in series.iter().take(hi).skip(lo) {
            let restricted = basis.transpose() * item * &basis;
            let restricted = (&restricted + restricted.transpose()) * 0.5;
            max_norm = max_norm.max(restricted.norm());
            let eig = SymmetricEigen::new(restricted.clone());
            min_eig = eig.eigenvalues.iter().fold(min_eig, |a, &b| a.min(b));
            avg += restricted;
            count += 1.0;
        }
        avg /= count;

        let tol_pos = 1e-7 * (1.0 + max_norm);
        let tol_psd = 1e-8 * (1.0 + max_norm);
        if min_eig >= tol_pos {
            reports.push(LieLevel {
                chain_index: c,
                min_eig,
                max_norm,
                nullspace_dim_after: 0,
            });
            return Ok(LieReport { order: Some(chain_order_from_index(c)), levels: reports });
        }
        if min_eig < -tol_psd {
            reports.push(LieLevel {
                chain_index: c,
                min_eig,
                max_norm,
                nullspace_dim_after: r,
            });
            return Ok(LieReport { order: None, levels: reports });
        }
        // Residual nullspace of the averaged restricted matrix.
        let eig = SymmetricEigen::new(avg);
        let mut null_cols = Vec::new();
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l < tol_pos {
                null_cols.push(eig.eigenvectors.column(i).into_owned());
            }
        }
        let mut next_basis = DMatrix::zeros(m, null_cols.len());
        for (j, col) in null_cols.iter().enumerate() {
            let v = &basis * col;
            for i in 0..m {
                next_basis[(i, j)] = v[i];
            }
        }
        reports.push(LieLevel {
            chain_index: c,
            min_eig,
            max_norm,
            nullspace_dim_after: next_basis.ncols(),
        });
        if next_basis.ncols() == 0 {
            // Everything restricted became positive: treat as success at
            // this level.
            return Ok(LieReport { order: Some(chain_order_from_index(c)), levels: reports });
        }
        basis = next_basis;
    }
    Ok(LieReport { order: None, levels: reports })
}

/// Growth condition: the transported −∂²h/∂x² chain, evaluated along the
/// direction of integration of `traj`.
pub fn lie_condition_x(ham: &Hamiltonian, traj: &[CharState], j_max: usize) -> Result<LieReport> {
    evaluate_chain(ham, traj, j_max, Chain::Growth)
}

/// Boundedness condition: the transported ∂²h/∂p² chain.
pub fn lie_condition_p(ham: &Hamiltonian, traj: &[CharState], j_max: usize) -> Result<LieReport> {
    evaluate_chain(ham, traj, j_max, Chain::Boundedness)
}

/// Brute-force oracle for LTI data: the order is the smallest number of
/// blocks g with rank [W, MW, …, M^{g−1}W] = dim, or None if the rank
/// never fills by `g_max` blocks.
pub fn grammian_block_order(m_mat: &DMatrix<f64>, w: &DMatrix<f64>, g_max: usize) -> Option<usize> {
    let n = m_mat.nrows();
    let mut blocks: Vec<DMatrix<f64>> = vec![w.clone()];
    for g in 1..=g_max {
        let mut stacked = DMatrix::zeros(n, w.ncols() * g);
        for (bi, b) in blocks.iter().enumerate() {
            for c in 0..w.ncols() {
                for r in 0..n {
                    stacked[(r, bi * w.ncols() + c)] = b[(r, c)];
                }
            }
        }
        let svd = stacked.svd(false, false);
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax.max(1.0))
            .count();
        if rank == n {
            return Some(g);
        }
        blocks.push(m_mat * blocks.last().unwrap());
    }
    None
}
