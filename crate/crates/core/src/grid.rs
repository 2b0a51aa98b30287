//! Domain grids, trapezoidal quadrature and the functional norms used by the
//! estimators.
//!
//! A [`Surface`] is a dense evaluation of a bivariate function on a pair of
//! grids; a [`CovField`] is the p x p array of surfaces representing a
//! covariance function, symmetric under (j, k, u, v) -> (k, j, v, u).

use crate::error::{Error, Result};
use std::sync::Arc;

/// Discretization of [0, 1] carrying trapezoidal quadrature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    quad_weights: Vec<f64>,
}

impl Grid {
    /// Build a grid from strictly increasing points in [0, 1].
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("grid needs at least 2 points".into()));
        }
        if points[0] < 0.0 || *points.last().unwrap() > 1.0 {
            return Err(Error::Config("grid points must lie in [0, 1]".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid points must be strictly increasing".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("grid points must be finite".into()));
        }
        let quad_weights = trapezoid_weights(&points);
        Ok(Grid { points, quad_weights })
    }

    /// Uniform grid of `r` points spanning [0, 1].
    pub fn uniform(r: usize) -> Self {
        assert!(r >= 2, "uniform grid needs at least 2 points");
        let step = 1.0 / (r - 1) as f64;
        let points: Vec<f64> = (0..r).map(|i| i as f64 * step).collect();
        let quad_weights = trapezoid_weights(&points);
        Grid { points, quad_weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Spacing of a uniform grid; `None` when spacing varies by more than
    /// 1e-12 relative.
    pub fn uniform_step(&self) -> Option<f64> {
        let step = self.points[1] - self.points[0];
        let ok = self
            .points
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-12 * step.max(1e-300));
        ok.then_some(step)
    }
}

fn trapezoid_weights(points: &[f64]) -> Vec<f64> {
    let r = points.len();
    let mut w = vec![0.0; r];
    w[0] = 0.5 * (points[1] - points[0]);
    w[r - 1] = 0.5 * (points[r - 1] - points[r - 2]);
    for i in 1..r - 1 {
        w[i] = 0.5 * (points[i + 1] - points[i - 1]);
    }
    w
}

/// Dense evaluation of a bivariate function on a grid pair, row-major.
#[derive(Clone, Debug)]
pub struct Surface {
    values: Vec<f64>,
    row_grid: Arc<Grid>,
    col_grid: Arc<Grid>,
}

impl Surface {
    pub fn new(values: Vec<f64>, row_grid: Arc<Grid>, col_grid: Arc<Grid>) -> Result<Self> {
        if values.len() != row_grid.len() * col_grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "surface has {} values for a {} x {} grid pair",
                values.len(),
                row_grid.len(),
                col_grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("surface values must be finite".into()));
        }
        Ok(Surface { values, row_grid, col_grid })
    }

    /// All-zero surface on a square grid.
    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.len() * grid.len();
        Surface { values: vec![0.0; n], row_grid: grid.clone(), col_grid: grid }
    }

    /// Constant surface on a square grid.
    pub fn constant(c: f64, grid: Arc<Grid>) -> Self {
        let n = grid.len() * grid.len();
        Surface { values: vec![c; n], row_grid: grid.clone(), col_grid: grid }
    }

    /// Evaluate `f(u, v)` on a square grid.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let pts = grid.points();
        let r = pts.len();
        let mut values = Vec::with_capacity(r * r);
        for &u in pts {
            for &v in pts {
                values.push(f(u, v));
            }
        }
        Surface { values, row_grid: grid.clone(), col_grid: grid }
    }

    pub fn rows(&self) -> usize {
        self.row_grid.len()
    }

    pub fn cols(&self) -> usize {
        self.col_grid.len()
    }

    pub fn row_grid(&self) -> &Arc<Grid> {
        &self.row_grid
    }

    pub fn col_grid(&self) -> &Arc<Grid> {
        &self.col_grid
    }

    #[inline]
    pub fn get(&self, r1: usize, r2: usize) -> f64 {
        self.values[r1 * self.col_grid.len() + r2]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Entrywise scalar multiple; `c = 0` produces a genuine all-zero surface.
    pub fn scaled(&self, c: f64) -> Surface {
        let values = if c == 0.0 {
            vec![0.0; self.values.len()]
        } else {
            self.values.iter().map(|v| c * v).collect()
        };
        Surface { values, row_grid: self.row_grid.clone(), col_grid: self.col_grid.clone() }
    }

    /// Transposed surface with grids swapped.
    pub fn transposed(&self) -> Surface {
        let (nr, nc) = (self.rows(), self.cols());
        let mut values = vec![0.0; nr * nc];
        for r in 0..nr {
            for c in 0..nc {
                values[c * nr + r] = self.values[r * nc + c];
            }
        }
        Surface { values, row_grid: self.col_grid.clone(), col_grid: self.row_grid.clone() }
    }

    pub fn same_shape(&self, other: &Surface) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }
}

/// Integral of the surface over the grid rectangle (trapezoidal rule).
pub fn integral(q: &Surface) -> f64 {
    let wr = q.row_grid().quad_weights();
    let wc = q.col_grid().quad_weights();
    let mut acc = 0.0;
    for (r1, &w1) in wr.iter().enumerate() {
        let mut row = 0.0;
        for (r2, &w2) in wc.iter().enumerate() {
            row += w2 * q.get(r1, r2);
        }
        acc += w1 * row;
    }
    acc
}

/// Squared weighted sum driving the Hilbert-Schmidt norm. Square surfaces
/// are accumulated over symmetric index pairs so that the result is
/// bit-identical under transposition (addition is commutative; only the
/// association order has to be pinned).
fn hs_sq(f: impl Fn(usize, usize) -> f64, wr: &[f64], wc: &[f64]) -> f64 {
    if wr.len() == wc.len() {
        let mut acc = 0.0;
        for (a, &wa) in wr.iter().enumerate() {
            let da = f(a, a);
            acc += wa * wa * da * da;
            for (b, &wb) in wc.iter().enumerate().skip(a + 1) {
                let x = f(a, b);
                let y = f(b, a);
                acc += wa * wb * (x * x + y * y);
            }
        }
        acc
    } else {
        let mut acc = 0.0;
        for (r1, &w1) in wr.iter().enumerate() {
            let mut row = 0.0;
            for (r2, &w2) in wc.iter().enumerate() {
                let v = f(r1, r2);
                row += w2 * v * v;
            }
            acc += w1 * row;
        }
        acc
    }
}

/// Hilbert-Schmidt norm sqrt(integral of Q^2) under trapezoidal quadrature.
pub fn hs_norm(q: &Surface) -> f64 {
    hs_sq(|a, b| q.get(a, b), q.row_grid().quad_weights(), q.col_grid().quad_weights()).sqrt()
}

/// Hilbert-Schmidt norm of the entrywise difference a - b.
pub fn hs_norm_diff(a: &Surface, b: &Surface) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("surfaces differ in shape".into()));
    }
    Ok(hs_sq(
        |r1, r2| a.get(r1, r2) - b.get(r1, r2),
        a.row_grid().quad_weights(),
        a.col_grid().quad_weights(),
    )
    .sqrt())
}

/// Supremum norm: max over the grid of |Q|.
pub fn sup_norm(q: &Surface) -> f64 {
    q.values().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// A p x p field of covariance surfaces on a shared square grid.
///
/// Constructors only take the upper triangle; the lower triangle is filled by
/// the symmetry (j, k, u, v) -> (k, j, v, u), so symmetry is exact.
#[derive(Clone, Debug)]
pub struct CovField {
    p: usize,
    grid: Arc<Grid>,
    entries: Vec<Surface>,
}

impl CovField {
    /// Build from upper-triangle entries given in (j, k) lexicographic order
    /// with j <= k.
    pub fn from_upper(p: usize, grid: Arc<Grid>, upper: Vec<Surface>) -> Result<Self> {
        if upper.len() != p * (p + 1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} upper-triangle surfaces, got {}",
                p * (p + 1) / 2,
                upper.len()
            )));
        }
        let r = grid.len();
        for s in &upper {
            if s.rows() != r || s.cols() != r {
                return Err(Error::ShapeMismatch("surface shape differs from field grid".into()));
            }
        }
        let zero = Surface::zero(grid.clone());
        let mut entries = vec![zero; p * p];
        let mut it = upper.into_iter();
        for j in 0..p {
            for k in j..p {
                let mut s = it.next().unwrap();
                if k > j {
                    entries[k * p + j] = s.transposed();
                } else {
                    // diagonal blocks are symmetric in (u, v); mirror the
                    // upper triangle so the identity is structural
                    let n = r;
                    let vals = s.values_mut();
                    for r1 in 0..n {
                        for r2 in r1 + 1..n {
                            vals[r2 * n + r1] = vals[r1 * n + r2];
                        }
                    }
                }
                entries[j * p + k] = s;
            }
        }
        Ok(CovField { p, grid, entries })
    }

    pub fn zero(p: usize, grid: Arc<Grid>) -> Self {
        let zero = Surface::zero(grid.clone());
        CovField { p, grid, entries: vec![zero; p * p] }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn r(&self) -> usize {
        self.grid.len()
    }

    pub fn entry(&self, j: usize, k: usize) -> &Surface {
        &self.entries[j * self.p + k]
    }

    /// Iterate upper-triangle indices (j, k) with j <= k.
    pub fn upper_indices(p: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..p).flat_map(move |j| (j..p).map(move |k| (j, k)))
    }

    pub fn same_shape(&self, other: &CovField) -> bool {
        self.p == other.p && self.r() == other.r()
    }
}

/// Functional Frobenius distance: sqrt of the sum over all (j, k) of the
/// squared Hilbert-Schmidt norms of the entry differences.
pub fn functional_frobenius(a: &CovField, b: &CovField) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("fields differ in p or grid size".into()));
    }
    let p = a.p();
    let mut acc = 0.0;
    for j in 0..p {
        for k in 0..p {
            let d = hs_norm_diff(a.entry(j, k), b.entry(j, k))?;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Functional matrix l1 distance: max over columns k of the column sum of
/// Hilbert-Schmidt norms of the entry differences.
pub fn functional_matrix_l1(a: &CovField, b: &CovField) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("fields differ in p or grid size".into()));
    }
    let p = a.p();
    let mut best = 0.0_f64;
    for k in 0..p {
        let mut col = 0.0;
        for j in 0..p {
            col += hs_norm_diff(a.entry(j, k), b.entry(j, k))?;
        }
        best = best.max(col);
    }
    Ok(best)
}

/// Integrated p x p matrix M_jk = integral of Sigma_jk over the grid square.
pub fn integrated_matrix(field: &CovField) -> Vec<f64> {
    let p = field.p();
    let mut m = vec![0.0; p * p];
    for j in 0..p {
        for k in 0..p {
            m[j * p + k] = integral(field.entry(j, k));
        }
    }
    m
}
