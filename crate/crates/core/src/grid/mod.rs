//! Rectangular grids, node fields, and upwind differencing.
//!
//! Grids are uniform per axis over [0, lᵢ]; node k along axis j sits at
//! k·Δⱼ with Δⱼ = lⱼ/(nⱼ − 1). Two-dimensional node indices are flattened
//! x-fastest: `idx = iy * nx + ix`.

mod banded;
mod operators;

pub use banded::BandedSym;
pub use operators::{
    convection_matrix, convection_matrices, diffusion_matrix, given_node_mask, upwind_psd_check,
    upwind_psd_matrix, PsdCheck, ReducedMatrix,
};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::Write;

/// Boundary face of a rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Low,
    High,
}

impl Face {
    pub fn low(axis: usize) -> Self {
        Face { axis, side: Side::Low }
    }

    pub fn high(axis: usize) -> Self {
        Face { axis, side: Side::High }
    }

    /// Component of the outward unit normal along the face axis.
    pub fn normal_sign(&self) -> f64 {
        match self.side {
            Side::Low => -1.0,
            Side::High => 1.0,
        }
    }
}

impl std::fmt::Display for Face {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let axis = ["x", "y"][self.axis.min(1)];
        let side = match self.side {
            Side::Low => "low",
            Side::High => "high",
        };
        write!(f, "{axis}-{side}")
    }
}

/// Uniform rectangular grid in one or two dimensions.
#[derive(Debug, Clone)]
pub struct Grid {
    lengths: Vec<f64>,
    n_nodes: Vec<usize>,
}

impl Grid {
    pub fn new(lengths: Vec<f64>, n_nodes: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.len() > 2 || lengths.len() != n_nodes.len() {
            return Err(Error::BadGrid {
                reason: format!(
                    "need 1 or 2 axes with matching node counts, got {} lengths / {} counts",
                    lengths.len(),
                    n_nodes.len()
                ),
            });
        }
        for (&l, &n) in lengths.iter().zip(&n_nodes) {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::BadGrid { reason: format!("axis length {l} must be positive") });
            }
            if n < 3 {
                return Err(Error::BadGrid { reason: format!("need at least 3 nodes per axis, got {n}") });
            }
        }
        Ok(Grid { lengths, n_nodes })
    }

    pub fn line(length: f64, n: usize) -> Result<Self> {
        Grid::new(vec![length], vec![n])
    }

    pub fn rect(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        Grid::new(vec![lx, ly], vec![nx, ny])
    }

    pub fn dims(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn shape(&self) -> &[usize] {
        &self.n_nodes
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / (self.n_nodes[axis] - 1) as f64
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.n_nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        match self.dims() {
            1 => ix,
            _ => iy * self.n_nodes[0] + ix,
        }
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        match self.dims() {
            1 => [idx, 0],
            _ => [idx % self.n_nodes[0], idx / self.n_nodes[0]],
        }
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let mi = self.multi_index(idx);
        let mut x = [0.0; 2];
        for axis in 0..self.dims() {
            x[axis] = mi[axis] as f64 * self.spacing(axis);
        }
        x
    }

    /// Neighbor `steps` nodes away along `axis`, or None outside the grid.
    pub fn neighbor(&self, idx: usize, axis: usize, steps: i64) -> Option<usize> {
        let mi = self.multi_index(idx);
        let pos = mi[axis] as i64 + steps;
        if pos < 0 || pos >= self.n_nodes[axis] as i64 {
            return None;
        }
        let mut mi = mi;
        mi[axis] = pos as usize;
        Some(self.index(mi[0], mi[1]))
    }

    pub fn faces(&self) -> Vec<Face> {
        (0..self.dims()).flat_map(|a| [Face::low(a), Face::high(a)]).collect()
    }

    pub fn is_on_face(&self, idx: usize, face: Face) -> bool {
        let mi = self.multi_index(idx);
        match face.side {
            Side::Low => mi[face.axis] == 0,
            Side::High => mi[face.axis] == self.n_nodes[face.axis] - 1,
        }
    }

    pub fn face_nodes(&self, face: Face) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_on_face(k, face)).collect()
    }

    /// Trapezoidal quadrature weights, one per node.
    pub fn quad_weights(&self) -> DVector<f64> {
        let axis_w = |axis: usize| -> Vec<f64> {
            let n = self.n_nodes[axis];
            let dx = self.spacing(axis);
            (0..n)
                .map(|i| if i == 0 || i == n - 1 { 0.5 * dx } else { dx })
                .collect()
        };
        let wx = axis_w(0);
        if self.dims() == 1 {
            return DVector::from_vec(wx);
        }
        let wy = axis_w(1);
        let mut w = DVector::zeros(self.len());
        for iy in 0..self.n_nodes[1] {
            for ix in 0..self.n_nodes[0] {
                w[self.index(ix, iy)] = wx[ix] * wy[iy];
            }
        }
        w
    }
}

/// Nodal values of the state vector: one row per state component.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub data: DMatrix<f64>,
}

impl Field {
    pub fn zeros(n_state: usize, grid: &Grid) -> Self {
        Field { data: DMatrix::zeros(n_state, grid.len()) }
    }

    /// Build a field by evaluating `f(x) -> component values` at every node.
    pub fn from_fn<F>(grid: &Grid, n_state: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut data = DMatrix::zeros(n_state, grid.len());
        for k in 0..grid.len() {
            let x = grid.coords(k);
            let vals = f(&x[..grid.dims()]);
            assert_eq!(vals.len(), n_state, "component count mismatch in Field::from_fn");
            for i in 0..n_state {
                data[(i, k)] = vals[i];
            }
        }
        Field { data }
    }

    pub fn n_state(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Discrete L² norm, ‖Φ‖ = √(Σ_nodes w·ΦᵀΦ) with trapezoid weights.
    pub fn l2_norm(&self, grid: &Grid) -> f64 {
        let w = grid.quad_weights();
        let mut s = 0.0;
        for k in 0..self.n_nodes() {
            for i in 0..self.n_state() {
                s += w[k] * self.data[(i, k)] * self.data[(i, k)];
            }
        }
        s.sqrt()
    }

    /// CSV serialization: one row per node, coordinates then components.
    pub fn write_csv<W: Write>(
        &self,
        grid: &Grid,
        names: &[String],
        out: &mut W,
    ) -> std::io::Result<()> {
        let coord_names: &[&str] = if grid.dims() == 1 { &["x"] } else { &["x", "y"] };
        let mut header: Vec<String> = coord_names.iter().map(|s| s.to_string()).collect();
        header.extend(names.iter().cloned());
        writeln!(out, "{}", header.join(","))?;
        for k in 0..grid.len() {
            let x = grid.coords(k);
            let mut row: Vec<String> =
                (0..grid.dims()).map(|a| crate::report::fmt_float(x[a])).collect();
            for i in 0..self.n_state() {
                row.push(crate::report::fmt_float(self.data[(i, k)]));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// One-sided difference of every component of `field` along `axis`,
/// directed against the sign of the matching velocity component.
///
/// The velocity is given per node as an m-row matrix (row = axis). At a
/// node where the velocity component is zero the forward difference is
/// used; at boundary nodes where the selected side has no neighbor the
/// stencil falls back to the inward side.
pub fn upwind_gradient(
    grid: &Grid,
    field: &Field,
    velocity: &DMatrix<f64>,
    axis: usize,
) -> Result<Field> {
    if velocity.nrows() != grid.dims() || velocity.ncols() != grid.len() {
        return Err(Error::ShapeMismatch {
            what: format!(
                "velocity must be {}x{}, got {}x{}",
                grid.dims(),
                grid.len(),
                velocity.nrows(),
                velocity.ncols()
            ),
        });
    }
    if field.n_nodes() != grid.len() {
        return Err(Error::ShapeMismatch {
            what: format!("field has {} nodes, grid has {}", field.n_nodes(), grid.len()),
        });
    }
    let dx = grid.spacing(axis);
    let mut out = DMatrix::zeros(field.n_state(), field.n_nodes());
    for k in 0..grid.len() {
        let v = velocity[(axis, k)];
        // Backward against positive flow; forward for v <= 0.
        let step: i64 = if v > 0.0 { -1 } else { 1 };
        let (nb, h) = match grid.neighbor(k, axis, step) {
            Some(nb) => (nb, step as f64 * dx),
            None => {
                let nb = grid
                    .neighbor(k, axis, -step)
                    .expect("grid has at least 3 nodes per axis");
                (nb, -step as f64 * dx)
            }
        };
        for i in 0..field.n_state() {
            out[(i, k)] = (field.data[(i, nb)] - field.data[(i, k)]) / h;
        }
    }
    Ok(Field { data: out })
}

/// Centered differences of every component along `axis` (one-sided at the
/// boundary). Used where a direction-neutral gradient estimate is wanted,
/// e.g. when evaluating Jacobians at sampled states.
pub fn centered_gradient(grid: &Grid, field: &Field, axis: usize) -> Field {
    let dx = grid.spacing(axis);
    let mut out = DMatrix::zeros(field.n_state(), field.n_nodes());
    for k in 0..grid.len() {
        let lo = grid.neighbor(k, axis, -1);
        let hi = grid.neighbor(k, axis, 1);
        for i in 0..field.n_state() {
            out[(i, k)] = match (lo, hi) {
                (Some(l), Some(h)) => (field.data[(i, h)] - field.data[(i, l)]) / (2.0 * dx),
                (None, Some(h)) => (field.data[(i, h)] - field.data[(i, k)]) / dx,
                (Some(l), None) => (field.data[(i, k)] - field.data[(i, l)]) / dx,
                (None, None) => unreachable!("axis has at least 3 nodes"),
            };
        }
    }
    Field { data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn grid_basics() {
        let g = Grid::line(1.0, 5).unwrap();
        assert_eq!(g.spacing(0), 0.25);
        assert_eq!(g.len(), 5);
        let g2 = Grid::rect(1.0, 2.0, 4, 3).unwrap();
        assert_eq!(g2.len(), 12);
        assert_eq!(g2.index(3, 2), 11);
        assert_eq!(g2.multi_index(11), [3, 2]);
        assert_eq!(g2.coords(11), [1.0, 2.0]);
        assert!(Grid::line(0.0, 5).is_err());
        assert!(Grid::line(1.0, 2).is_err());
    }

    #[test]
    fn quad_weights_integrate_linear_exactly() {
        let g = Grid::line(2.0, 9).unwrap();
        let w = g.quad_weights();
        // ∫₀² x dx = 2
        let s: f64 = (0..g.len()).map(|k| w[k] * g.coords(k)[0]).sum();
        assert_relative_eq!(s, 2.0, epsilon = 1e-12);

        let g2 = Grid::rect(1.0, 1.0, 5, 7).unwrap();
        let w2 = g2.quad_weights();
        let total: f64 = w2.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn upwind_gradient_linear_field_both_signs() {
        let g = Grid::line(1.0, 11).unwrap();
        let f = Field::from_fn(&g, 1, |x| vec![x[0]]);
        for v in [1.0, -1.0] {
            let vel = DMatrix::from_element(1, g.len(), v);
            let grad = upwind_gradient(&g, &f, &vel, 0).unwrap();
            for k in 0..g.len() {
                assert_relative_eq!(grad.data[(0, k)], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn upwind_gradient_quadratic_backward_stencil() {
        // φ(x) = x², v = +1: interior value (x² − (x−Δ)²)/Δ = 2x − Δ.
        let g = Grid::line(1.0, 6).unwrap();
        let dx = g.spacing(0);
        let f = Field::from_fn(&g, 1, |x| vec![x[0] * x[0]]);
        let vel = DMatrix::from_element(1, g.len(), 1.0);
        let grad = upwind_gradient(&g, &f, &vel, 0).unwrap();
        for k in 1..g.len() {
            let x = g.coords(k)[0];
            assert_relative_eq!(grad.data[(0, k)], 2.0 * x - dx, epsilon = 1e-12);
        }
    }

    #[test]
    fn upwind_gradient_shape_mismatch() {
        let g = Grid::line(1.0, 5).unwrap();
        let f = Field::zeros(1, &g);
        let vel = DMatrix::zeros(1, 4);
        assert!(matches!(
            upwind_gradient(&g, &f, &vel, 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        /// Linear fields are differenced exactly for any velocity sign pattern.
        #[test]
        fn upwind_exact_for_linear(signs in proptest::collection::vec(-1.0f64..=1.0, 16),
                                   a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = Grid::line(2.0, 16).unwrap();
            let f = Field::from_fn(&g, 1, |x| vec![a * x[0] + b]);
            let mut vel = DMatrix::zeros(1, g.len());
            for (k, s) in signs.iter().enumerate() {
                vel[(0, k)] = *s;
            }
            let grad = upwind_gradient(&g, &f, &vel, 0).unwrap();
            for k in 0..g.len() {
                prop_assert!((grad.data[(0, k)] - a).abs() < 1e-10);
            }
        }
    }
}
