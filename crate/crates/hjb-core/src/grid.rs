//! Regular tensor grids with optional domain masks.
//!
//! Grids discretize a truncation box `[lo, hi]` in up to [`MAX_DIM`]
//! dimensions. A mask marks which nodes belong to the domain (used when the
//! box is the coordinate image of a cone and some nodes fall outside it).
//! Differences fall back from central to inward one-sided stencils at nodes
//! whose neighbors are out of range or masked off; second differences at such
//! nodes are continued constant from the nearest node where the centered
//! formula is available.

use crate::error::{HjbError, Result};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Maximum supported grid dimension (vector domains up to 3, cone images of
/// matrix domains up to d(d+1)/2 = 6).
pub const MAX_DIM: usize = 6;

/// A regular tensor-product grid on a box, with optional node mask.
#[derive(Clone, Debug)]
pub struct Grid<T: Scalar> {
    lo: Vec<T>,
    hi: Vec<T>,
    counts: Vec<usize>,
    spacing: Vec<T>,
    strides: Vec<usize>,
    mask: Option<Vec<bool>>,
}

impl<T: Scalar> Grid<T> {
    /// Builds a regular grid with `counts[k]` nodes along axis `k`, spanning
    /// `[lo[k], hi[k]]` inclusively. Each axis needs at least 3 nodes so
    /// centered stencils exist somewhere.
    pub fn regular(lo: &[T], hi: &[T], counts: &[usize]) -> Result<Self> {
        let d = lo.len();
        if d == 0 || d > MAX_DIM {
            return Err(HjbError::invalid(format!(
                "grid dimension must be in 1..={MAX_DIM}, got {d}"
            )));
        }
        if hi.len() != d || counts.len() != d {
            return Err(HjbError::DimensionMismatch {
                expected: d,
                got: hi.len().max(counts.len()),
                context: "grid bounds/counts".to_string(),
            });
        }
        let mut spacing = Vec::with_capacity(d);
        for k in 0..d {
            if counts[k] < 3 {
                return Err(HjbError::invalid(format!(
                    "grid axis {k} needs at least 3 nodes, got {}",
                    counts[k]
                )));
            }
            let bad_extent =
                lo[k].as_f64().is_nan() || hi[k].as_f64().is_nan() || hi[k] <= lo[k];
            if bad_extent {
                return Err(HjbError::invalid(format!(
                    "grid axis {k} has empty extent [{}, {}]",
                    lo[k].as_f64(),
                    hi[k].as_f64()
                )));
            }
            spacing.push((hi[k] - lo[k]) / T::from_count(counts[k] - 1));
        }
        let mut strides = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * counts[k + 1];
        }
        Ok(Grid {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            counts: counts.to_vec(),
            spacing,
            strides,
            mask: None,
        })
    }

    /// Attaches a domain mask computed from node positions (`true` = node is
    /// inside the domain). Errors if the active set is empty.
    pub fn with_mask(mut self, inside: impl Fn(&[T]) -> bool) -> Result<Self> {
        let n = self.node_count();
        let mut mask = vec![false; n];
        let mut pos = vec![T::zero(); self.dim()];
        let mut any = false;
        for (idx, slot) in mask.iter_mut().enumerate() {
            self.position_into(idx, &mut pos);
            let m = inside(&pos);
            *slot = m;
            any |= m;
        }
        if !any {
            return Err(HjbError::DomainViolation {
                details: "domain mask excludes every grid node".to_string(),
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    /// Grid dimension.
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Total node count (including masked-off nodes).
    pub fn node_count(&self) -> usize {
        self.counts.iter().product()
    }

    /// Per-axis node counts.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Per-axis spacings.
    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    /// Lower box corner.
    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    /// Upper box corner.
    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    /// Optional node mask (`true` = active).
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Whether node `idx` participates in the domain.
    #[inline]
    pub fn is_active(&self, idx: usize) -> bool {
        match &self.mask {
            Some(m) => m[idx],
            None => true,
        }
    }

    /// Flat index strides per axis.
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Decodes a flat index into per-axis indices stored in `out`.
    #[inline]
    pub fn decode_into(&self, idx: usize, out: &mut [usize]) {
        let mut rem = idx;
        for (slot, stride) in out.iter_mut().zip(&self.strides) {
            *slot = rem / stride;
            rem %= stride;
        }
    }

    /// Encodes per-axis indices into a flat index.
    #[inline]
    pub fn encode(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum()
    }

    /// Writes the coordinates of node `idx` into `out`.
    #[inline]
    pub fn position_into(&self, idx: usize, out: &mut [T]) {
        let mut rem = idx;
        for (k, slot) in out.iter_mut().enumerate() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            *slot = self.lo[k] + self.spacing[k] * T::from_count(i);
        }
    }

    /// Coordinates of node `idx` (allocating convenience).
    pub fn position(&self, idx: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.position_into(idx, &mut out);
        out
    }

    /// Flat index of the active node nearest to `x` (Euclidean distance via
    /// per-axis rounding, then local mask search). Used for anchor selection.
    pub fn nearest_active_node(&self, x: &[T]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(HjbError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "nearest_active_node".to_string(),
            });
        }
        let mut multi = vec![0usize; self.dim()];
        for k in 0..self.dim() {
            let u = ((x[k] - self.lo[k]) / self.spacing[k]).round();
            let u = u.max(T::zero()).as_f64() as usize;
            multi[k] = u.min(self.counts[k] - 1);
        }
        let idx = self.encode(&multi);
        if self.is_active(idx) {
            return Ok(idx);
        }
        // fall back to a global scan for the nearest active node
        let mut best: Option<(usize, T)> = None;
        let mut pos = vec![T::zero(); self.dim()];
        for i in 0..self.node_count() {
            if !self.is_active(i) {
                continue;
            }
            self.position_into(i, &mut pos);
            let mut d2 = T::zero();
            for k in 0..self.dim() {
                let dk = pos[k] - x[k];
                d2 += dk * dk;
            }
            match best {
                Some((_, bd)) if bd <= d2 => {}
                _ => best = Some((i, d2)),
            }
        }
        best.map(|(i, _)| i).ok_or_else(|| HjbError::DomainViolation {
            details: "no active nodes on grid".to_string(),
        })
    }

    /// Neighbor of `idx` one step along `axis` in direction `dir` (±1), if it
    /// exists and is active.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, dir: i8, multi: &[usize]) -> Option<usize> {
        let i = multi[axis];
        let n = if dir > 0 {
            if i + 1 >= self.counts[axis] {
                return None;
            }
            idx + self.strides[axis]
        } else {
            if i == 0 {
                return None;
            }
            idx - self.strides[axis]
        };
        if self.is_active(n) {
            Some(n)
        } else {
            None
        }
    }

    /// Multilinear interpolation of nodal `values` at point `x`, clamped to
    /// the box. Masked-off corner nodes contribute via the nearest active
    /// value along the cell (falls back to clamping weights); callers on
    /// masked grids should keep sample points inside the domain.
    pub fn interpolate(&self, values: &[T], x: &[T]) -> T {
        debug_assert_eq!(values.len(), self.node_count());
        let d = self.dim();
        let mut base = [0usize; MAX_DIM];
        let mut w = [T::zero(); MAX_DIM];
        for k in 0..d {
            let u = (x[k] - self.lo[k]) / self.spacing[k];
            let u = u.max(T::zero()).min(T::from_count(self.counts[k] - 1));
            let mut i0 = u.floor().as_f64() as usize;
            if i0 >= self.counts[k] - 1 {
                i0 = self.counts[k] - 2;
            }
            base[k] = i0;
            w[k] = u - T::from_count(i0);
        }
        let corners = 1usize << d;
        let mut acc = T::zero();
        for c in 0..corners {
            let mut weight = T::one();
            let mut flat = 0usize;
            for k in 0..d {
                let hi_side = (c >> k) & 1 == 1;
                weight *= if hi_side { w[k] } else { T::one() - w[k] };
                flat += (base[k] + usize::from(hi_side)) * self.strides[k];
            }
            acc += weight * values[flat];
        }
        acc
    }

    /// Whether `x` lies inside the truncation box (inclusive).
    pub fn contains(&self, x: &[T]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(xi, (l, h))| *xi >= *l && *xi <= *h)
    }

    /// Flat indices of active nodes whose position satisfies `pred`.
    pub fn indices_where(&self, pred: impl Fn(&[T]) -> bool) -> Vec<usize> {
        let mut pos = vec![T::zero(); self.dim()];
        (0..self.node_count())
            .filter(|&i| {
                if !self.is_active(i) {
                    return false;
                }
                self.position_into(i, &mut pos);
                pred(&pos)
            })
            .collect()
    }
}

/// Stencil choice for a first derivative along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffScheme {
    /// Centered second-order difference.
    Central,
    /// One-sided difference pointing in +axis (inward from a low boundary).
    Forward,
    /// One-sided difference pointing in -axis (inward from a high boundary).
    Backward,
}

/// Per-node stencil description: the scheme used on each axis plus the node
/// (possibly shifted inward) at which centered second differences are taken.
#[derive(Clone, Debug)]
pub struct Stencil {
    /// Flat node index the stencil is anchored at.
    pub node: usize,
    /// First-derivative scheme per axis.
    pub grad_scheme: Vec<DiffScheme>,
    /// Flat index of the node used for the pure second difference per axis
    /// (equals `node` in the interior; shifted inward at boundaries).
    pub second_diff_center: Vec<usize>,
}

/// Reference (allocating) discrete derivative evaluation at a node. Hot loops
/// in the solvers use specialized plans; this path serves operator residuals,
/// gradient fields, and tests.
pub struct FieldDerivatives<'a, T: Scalar> {
    grid: &'a Grid<T>,
    values: &'a [T],
}

impl<'a, T: Scalar> FieldDerivatives<'a, T> {
    /// Borrows a grid plus nodal values.
    pub fn new(grid: &'a Grid<T>, values: &'a [T]) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        FieldDerivatives { grid, values }
    }

    /// Discrete gradient at node `idx`: centered where both neighbors exist,
    /// second-order one-sided (falling back to first-order) otherwise.
    pub fn gradient(&self, idx: usize) -> DVector<T> {
        let d = self.grid.dim();
        let mut multi = [0usize; MAX_DIM];
        self.grid.decode_into(idx, &mut multi[..d]);
        let mut g = DVector::zeros(d);
        for k in 0..d {
            g[k] = self.gradient_axis(idx, k, &multi[..d]);
        }
        g
    }

    pub(crate) fn gradient_axis(&self, idx: usize, k: usize, multi: &[usize]) -> T {
        let grid = self.grid;
        let h = grid.spacing()[k];
        let p = grid.neighbor(idx, k, 1, multi);
        let m = grid.neighbor(idx, k, -1, multi);
        let v = self.values;
        match (m, p) {
            (Some(m), Some(p)) => (v[p] - v[m]) / (h + h),
            (None, Some(p)) => {
                // try second-order forward: (-3 v0 + 4 v1 - v2) / (2h)
                let mut multi2 = [0usize; MAX_DIM];
                multi2[..multi.len()].copy_from_slice(multi);
                multi2[k] += 1;
                if let Some(pp) = grid.neighbor(p, k, 1, &multi2[..multi.len()]) {
                    (T::lit(-3.0) * v[idx] + T::lit(4.0) * v[p] - v[pp]) / (h + h)
                } else {
                    (v[p] - v[idx]) / h
                }
            }
            (Some(m), None) => {
                let mut multi2 = [0usize; MAX_DIM];
                multi2[..multi.len()].copy_from_slice(multi);
                multi2[k] -= 1;
                if let Some(mm) = grid.neighbor(m, k, -1, &multi2[..multi.len()]) {
                    (T::lit(3.0) * v[idx] - T::lit(4.0) * v[m] + v[mm]) / (h + h)
                } else {
                    (v[idx] - v[m]) / h
                }
            }
            (None, None) => T::zero(),
        }
    }

    /// Discrete Hessian at node `idx`. Pure second differences are continued
    /// constant from the nearest inward node at boundaries; cross terms use
    /// the four-point formula, shifting the evaluation center inward when a
    /// corner is unavailable.
    pub fn hessian(&self, idx: usize) -> DMatrix<T> {
        let d = self.grid.dim();
        let mut h = DMatrix::zeros(d, d);
        let mut multi = [0usize; MAX_DIM];
        self.grid.decode_into(idx, &mut multi[..d]);
        for k in 0..d {
            h[(k, k)] = self.second_diff(idx, k, &multi[..d], 0);
            for l in (k + 1)..d {
                let v = self.cross_diff(&multi[..d], k, l);
                h[(k, l)] = v;
                h[(l, k)] = v;
            }
        }
        h
    }

    pub(crate) fn second_diff(&self, idx: usize, k: usize, multi: &[usize], depth: usize) -> T {
        let grid = self.grid;
        let h = grid.spacing()[k];
        let p = grid.neighbor(idx, k, 1, multi);
        let m = grid.neighbor(idx, k, -1, multi);
        let v = self.values;
        match (m, p) {
            (Some(m), Some(p)) => (v[p] - (v[idx] + v[idx]) + v[m]) / (h * h),
            _ if depth >= 2 => T::zero(),
            (None, Some(p)) => {
                let mut multi2 = [0usize; MAX_DIM];
                multi2[..multi.len()].copy_from_slice(multi);
                multi2[k] += 1;
                self.second_diff(p, k, &multi2[..multi.len()], depth + 1)
            }
            (Some(m), None) => {
                let mut multi2 = [0usize; MAX_DIM];
                multi2[..multi.len()].copy_from_slice(multi);
                multi2[k] -= 1;
                self.second_diff(m, k, &multi2[..multi.len()], depth + 1)
            }
            (None, None) => T::zero(),
        }
    }

    pub(crate) fn cross_diff(&self, multi: &[usize], k: usize, l: usize) -> T {
        let grid = self.grid;
        let d = grid.dim();
        // shift center inward so all four diagonal corners exist and are active
        let mut center = [0usize; MAX_DIM];
        center[..d].copy_from_slice(multi);
        for axis in [k, l] {
            if center[axis] == 0 {
                center[axis] = 1;
            } else if center[axis] + 1 >= grid.counts()[axis] {
                center[axis] = grid.counts()[axis] - 2;
            }
        }
        let c = grid.encode(&center[..d]);
        let (sk, sl) = (grid.strides()[k], grid.strides()[l]);
        let corners = [c + sk + sl, c + sk - sl, c - sk + sl, c - sk - sl];
        if corners.iter().any(|&i| !grid.is_active(i)) {
            // masked corner: give up on the cross term rather than invent data
            return T::zero();
        }
        let v = self.values;
        let hk = grid.spacing()[k];
        let hl = grid.spacing()[l];
        (v[corners[0]] - v[corners[1]] - v[corners[2]] + v[corners[3]])
            / (T::lit(4.0) * hk * hl)
    }
}

/// A field of nodal values bound to a shared grid.
#[derive(Clone, Debug)]
pub struct GridField<T: Scalar> {
    /// The grid the values live on.
    pub grid: Arc<Grid<T>>,
    /// Nodal values in flat index order.
    pub values: Vec<T>,
}

impl<T: Scalar> GridField<T> {
    /// Builds a field by evaluating `f` at every node (masked nodes get the
    /// value too — harmless, they are never read through active stencils).
    pub fn from_fn(grid: Arc<Grid<T>>, f: impl Fn(&[T]) -> T) -> Self {
        let n = grid.node_count();
        let mut values = Vec::with_capacity(n);
        let mut pos = vec![T::zero(); grid.dim()];
        for idx in 0..n {
            grid.position_into(idx, &mut pos);
            values.push(f(&pos));
        }
        GridField { grid, values }
    }

    /// Constant-zero field.
    pub fn zeros(grid: Arc<Grid<T>>) -> Self {
        let n = grid.node_count();
        GridField {
            grid,
            values: vec![T::zero(); n],
        }
    }

    /// Sup-norm over active nodes.
    pub fn sup_norm(&self) -> T {
        let mut s = T::zero();
        for (i, v) in self.values.iter().enumerate() {
            if self.grid.is_active(i) && v.abs() > s {
                s = v.abs();
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_2d() -> Grid<f64> {
        Grid::regular(&[-1.0, -1.0], &[1.0, 1.0], &[21, 21]).unwrap()
    }

    #[test]
    fn encode_decode_roundtrip() {
        let g = grid_2d();
        let mut multi = [0usize; 2];
        for idx in [0usize, 7, 20, 21, 440] {
            g.decode_into(idx, &mut multi);
            assert_eq!(g.encode(&multi), idx);
        }
    }

    #[test]
    fn positions_hit_box_corners() {
        let g = grid_2d();
        assert_eq!(g.position(0), vec![-1.0, -1.0]);
        assert_eq!(g.position(g.node_count() - 1), vec![1.0, 1.0]);
        let mid = g.encode(&[10, 10]);
        let p = g.position(mid);
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_exact_for_linear_field() {
        // centered AND one-sided stencils reproduce linear functions exactly
        let g = Arc::new(grid_2d());
        let f = GridField::from_fn(g.clone(), |x| 2.0 * x[0] - 3.0 * x[1] + 0.5);
        let der = FieldDerivatives::new(&g, &f.values);
        for idx in [0, 10, 220, g.node_count() - 1] {
            let grad = der.gradient(idx);
            assert_relative_eq!(grad[0], 2.0, epsilon = 1e-12);
            assert_relative_eq!(grad[1], -3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hessian_exact_for_quadratic_field() {
        let g = Arc::new(grid_2d());
        // f = x^2 + 4xy - 2y^2 : hessian [[2,4],[4,-4]] everywhere
        let f = GridField::from_fn(g.clone(), |x| {
            x[0] * x[0] + 4.0 * x[0] * x[1] - 2.0 * x[1] * x[1]
        });
        let der = FieldDerivatives::new(&g, &f.values);
        for idx in [0, 5, 230, g.node_count() - 1] {
            let h = der.hessian(idx);
            assert_relative_eq!(h[(0, 0)], 2.0, epsilon = 1e-9);
            assert_relative_eq!(h[(0, 1)], 4.0, epsilon = 1e-9);
            assert_relative_eq!(h[(1, 1)], -4.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn one_sided_gradient_second_order() {
        // f = x^2 on [0,1]: at node 0 the second-order one-sided formula is
        // exact for quadratics
        let g = Arc::new(Grid::<f64>::regular(&[0.0], &[1.0], &[11]).unwrap());
        let f = GridField::from_fn(g.clone(), |x| x[0] * x[0]);
        let der = FieldDerivatives::new(&g, &f.values);
        assert_relative_eq!(der.gradient(0)[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(der.gradient(10)[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_reproduces_multilinear() {
        let g = Arc::new(grid_2d());
        let f = GridField::from_fn(g.clone(), |x| 1.0 + 2.0 * x[0] - x[1] + 3.0 * x[0] * x[1]);
        for &(x, y) in &[(0.13, -0.49), (-0.9999, 0.9999), (0.05, 0.05)] {
            let v = g.interpolate(&f.values, &[x, y]);
            assert_relative_eq!(v, 1.0 + 2.0 * x - y + 3.0 * x * y, epsilon = 1e-10);
        }
    }

    #[test]
    fn interpolation_clamps_outside_box() {
        let g = Arc::new(grid_2d());
        let f = GridField::from_fn(g.clone(), |x| x[0]);
        let v = g.interpolate(&f.values, &[5.0, 0.0]);
        assert_relative_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mask_excluding_everything_errors() {
        let res = grid_2d().with_mask(|_| false);
        assert!(res.is_err());
    }

    #[test]
    fn masked_neighbors_are_invisible() {
        // mask off the right half; nodes at the mask edge use one-sided stencils
        let g = grid_2d().with_mask(|x| x[0] <= 0.0).unwrap();
        let g = Arc::new(g);
        let f = GridField::from_fn(g.clone(), |x| 2.0 * x[0]);
        let der = FieldDerivatives::new(&g, &f.values);
        let edge = g.encode(&[10, 10]); // x = 0, boundary of the mask
        assert!(g.is_active(edge));
        assert!(!g.is_active(edge + g.strides()[0]));
        assert_relative_eq!(der.gradient(edge)[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_active_node_respects_mask() {
        let g = grid_2d().with_mask(|x| x[0] <= 0.0).unwrap();
        let idx = g.nearest_active_node(&[0.8, 0.0]).unwrap();
        let p = g.position(idx);
        assert!(p[0] <= 0.0);
    }

    #[test]
    fn rejects_tiny_axes() {
        assert!(Grid::<f64>::regular(&[0.0], &[1.0], &[2]).is_err());
        assert!(Grid::<f64>::regular(&[0.0], &[0.0], &[5]).is_err());
    }
}
