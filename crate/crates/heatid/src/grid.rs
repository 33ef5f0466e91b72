//! Tensor-product grids, nodal scalar fields, and the discrete L²/H¹ inner
//! products every other module builds on.
//!
//! Nodes are ordered lexicographically with x fastest, boundary nodes carry
//! homogeneous Dirichlet data in all solver outputs, and quadrature uses
//! trapezoidal weights (exact for constants, diagonal mass operator).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

/// Errors from grid construction, field validation, and field I/O.
#[derive(Debug, Error)]
pub enum GridError {
    /// A constructor argument is out of range; names the offending field.
    #[error("invalid {field}: {message}")]
    InvalidParameter { field: &'static str, message: String },
    /// Two fields that must share a grid do not.
    #[error("grid mismatch: operands live on different grids")]
    GridMismatch,
    /// A field value is NaN or infinite.
    #[error("non-finite value {value} at node {index}")]
    NonFinite { index: usize, value: f64 },
    /// Field data has the wrong length for its grid.
    #[error("field has {got} values but grid has {expected} nodes")]
    LengthMismatch { got: usize, expected: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> GridError {
    GridError::InvalidParameter {
        field,
        message: message.into(),
    }
}

/// Spatial mesh (1D interval or 2D rectangle) plus time-stepping parameters.
///
/// Immutable after construction; shared between fields via `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dim: usize,
    extents: [f64; 2],
    nodes: [usize; 2],
    spacing: [f64; 2],
    final_time: f64,
    time_steps: usize,
    dt: f64,
}

impl GridSpec {
    /// Nodes per axis must be ≥ 3 so at least one interior node exists.
    pub const MIN_NODES_PER_AXIS: usize = 3;

    /// Builds a grid, deriving node spacing and the time step.
    pub fn build(
        dim: usize,
        extents: &[f64],
        nodes_per_axis: &[usize],
        final_time: f64,
        time_steps: usize,
    ) -> Result<Arc<Self>, GridError> {
        if dim != 1 && dim != 2 {
            return Err(invalid("dim", format!("must be 1 or 2, got {dim}")));
        }
        if extents.len() != dim {
            return Err(invalid(
                "extents",
                format!("expected {dim} entries, got {}", extents.len()),
            ));
        }
        if nodes_per_axis.len() != dim {
            return Err(invalid(
                "nodes_per_axis",
                format!("expected {dim} entries, got {}", nodes_per_axis.len()),
            ));
        }
        let mut ext = [0.0_f64; 2];
        let mut nds = [1_usize; 2];
        let mut spc = [0.0_f64; 2];
        for axis in 0..dim {
            let length = extents[axis];
            if !length.is_finite() || length <= 0.0 {
                return Err(invalid("extents", format!("axis {axis} must be > 0, got {length}")));
            }
            let n = nodes_per_axis[axis];
            if n < Self::MIN_NODES_PER_AXIS {
                return Err(invalid(
                    "nodes_per_axis",
                    format!("axis {axis} needs ≥ {} nodes (no interior node otherwise), got {n}", Self::MIN_NODES_PER_AXIS),
                ));
            }
            ext[axis] = length;
            nds[axis] = n;
            spc[axis] = length / (n - 1) as f64;
        }
        if !final_time.is_finite() || final_time <= 0.0 {
            return Err(invalid("final_time", format!("must be > 0, got {final_time}")));
        }
        if time_steps < 1 {
            return Err(invalid("time_steps", "must be ≥ 1".to_string()));
        }
        Ok(Arc::new(Self {
            dim,
            extents: ext,
            nodes: nds,
            spacing: spc,
            final_time,
            time_steps,
            dt: final_time / time_steps as f64,
        }))
    }

    /// 1D convenience constructor.
    pub fn line(extent: f64, nodes: usize, final_time: f64, time_steps: usize) -> Result<Arc<Self>, GridError> {
        Self::build(1, &[extent], &[nodes], final_time, time_steps)
    }

    /// 2D convenience constructor.
    pub fn rectangle(
        extents: (f64, f64),
        nodes: (usize, usize),
        final_time: f64,
        time_steps: usize,
    ) -> Result<Arc<Self>, GridError> {
        Self::build(2, &[extents.0, extents.1], &[nodes.0, nodes.1], final_time, time_steps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nodes[0]
    }

    /// Nodes along y; 1 in one dimension.
    pub fn ny(&self) -> usize {
        self.nodes[1]
    }

    pub fn hx(&self) -> f64 {
        self.spacing[0]
    }

    pub fn hy(&self) -> f64 {
        self.spacing[1]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.extents[axis]
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn node_count(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    /// Flat index of node (i, j); x runs fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nodes[0] + i
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nodes[0], idx / self.nodes[0])
    }

    /// Physical coordinates of a node; y is 0 in one dimension.
    #[inline]
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.ij(idx);
        (i as f64 * self.spacing[0], j as f64 * self.spacing[1])
    }

    /// Boundary/interior classification is total and disjoint.
    #[inline]
    pub fn is_boundary(&self, idx: usize) -> bool {
        let (i, j) = self.ij(idx);
        i == 0 || i == self.nodes[0] - 1 || (self.dim == 2 && (j == 0 || j == self.nodes[1] - 1))
    }

    pub fn interior_count(&self) -> usize {
        let ix = self.nodes[0] - 2;
        if self.dim == 1 {
            ix
        } else {
            ix * (self.nodes[1] - 2)
        }
    }

    /// Trapezoidal quadrature weight of a node (tensor product in 2D).
    #[inline]
    pub fn quad_weight(&self, idx: usize) -> f64 {
        let (i, j) = self.ij(idx);
        let wx = edge_weight(i, self.nodes[0], self.spacing[0]);
        if self.dim == 1 {
            wx
        } else {
            wx * edge_weight(j, self.nodes[1], self.spacing[1])
        }
    }

    /// True when two specs describe the same discretization.
    pub fn same_as(&self, other: &GridSpec) -> bool {
        self == other
    }
}

#[inline]
fn edge_weight(i: usize, n: usize, h: f64) -> f64 {
    if i == 0 || i == n - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Builds a grid; the spec-facing free-function form of [`GridSpec::build`].
pub fn build_grid(
    dim: usize,
    extents: &[f64],
    nodes_per_axis: &[usize],
    final_time: f64,
    time_steps: usize,
) -> Result<Arc<GridSpec>, GridError> {
    GridSpec::build(dim, extents, nodes_per_axis, final_time, time_steps)
}

/// A real-valued function sampled at every grid node.
///
/// Values are validated finite on construction; all public operations keep
/// that invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                expected: grid.node_count(),
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(GridError::NonFinite { index, value });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Arc<GridSpec>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn constant(grid: &Arc<GridSpec>, value: f64) -> Result<Self, GridError> {
        Self::new(Arc::clone(grid), vec![value; grid.node_count()])
    }

    /// Samples `f(x, y)` at every node (y = 0 in one dimension).
    pub fn from_fn(grid: &Arc<GridSpec>, f: impl Fn(f64, f64) -> f64) -> Result<Self, GridError> {
        let values = (0..grid.node_count())
            .map(|idx| {
                let (x, y) = grid.coords(idx);
                f(x, y)
            })
            .collect();
        Self::new(Arc::clone(grid), values)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Consumes the field, returning its raw values.
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Internal constructor for values produced by arithmetic that cannot
    /// introduce non-finite entries from finite inputs. Still checked in
    /// debug builds.
    pub(crate) fn from_computed(grid: Arc<GridSpec>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { grid, values }
    }

    fn check_same_grid(&self, other: &ScalarField) -> Result<(), GridError> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(GridError::GridMismatch)
        }
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Pointwise (Hadamard) product.
    pub fn mul(&self, other: &ScalarField) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_computed(
            Arc::clone(&self.grid),
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// `self + factor * other`.
    pub fn axpy(&self, factor: f64, other: &ScalarField) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a + factor * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        Self::new(
            Arc::clone(&self.grid),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self, GridError> {
        self.check_same_grid(other)?;
        Ok(Self::from_computed(
            Arc::clone(&self.grid),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// True when the field vanishes on every boundary node.
    pub fn vanishes_on_boundary(&self, tol: f64) -> bool {
        self.values
            .iter()
            .enumerate()
            .all(|(idx, &v)| !self.grid.is_boundary(idx) || v.abs() <= tol)
    }

    /// Copy with boundary nodes forced to exactly zero.
    pub fn with_zero_boundary(&self) -> Self {
        let mut values = self.values.clone();
        for (idx, v) in values.iter_mut().enumerate() {
            if self.grid.is_boundary(idx) {
                *v = 0.0;
            }
        }
        Self::from_computed(Arc::clone(&self.grid), values)
    }

    /// Writes the field as CSV: one header line with the spatial metadata,
    /// then one value per line in lexicographic node order, 17 significant
    /// digits (exact f64 round trip).
    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut out = String::new();
        let g = &self.grid;
        if g.dim() == 1 {
            let _ = writeln!(
                out,
                "# dim=1 nx={} extent_x={}",
                g.nx(),
                fmt_full(g.extent(0))
            );
        } else {
            let _ = writeln!(
                out,
                "# dim=2 nx={} ny={} extent_x={} extent_y={}",
                g.nx(),
                g.ny(),
                fmt_full(g.extent(0)),
                fmt_full(g.extent(1))
            );
        }
        for v in &self.values {
            let _ = writeln!(out, "{}", fmt_full(*v));
        }
        fs::write(path, out).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a field written by [`ScalarField::write_csv`] onto `grid`,
    /// validating the header against the grid's spatial part.
    pub fn read_csv(grid: &Arc<GridSpec>, path: &Path) -> Result<Self, GridError> {
        let (header, values) = read_csv_raw(path)?;
        let perr = |message: String| GridError::Parse {
            path: path.display().to_string(),
            message,
        };
        if header.dim != grid.dim() {
            return Err(perr(format!(
                "file is {}D but grid is {}D",
                header.dim,
                grid.dim()
            )));
        }
        if header.nodes[0] != grid.nx() || (header.dim == 2 && header.nodes[1] != grid.ny()) {
            return Err(perr("node counts do not match the target grid".into()));
        }
        for axis in 0..header.dim {
            let rel = (header.extents[axis] - grid.extent(axis)).abs();
            if rel > 1e-12 * grid.extent(axis).abs() {
                return Err(perr(format!("extent on axis {axis} does not match the target grid")));
            }
        }
        Self::new(Arc::clone(grid), values)
    }
}

/// Spatial metadata parsed from a field CSV header.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvHeader {
    pub dim: usize,
    pub nodes: [usize; 2],
    pub extents: [f64; 2],
}

/// Full-precision decimal text (17 significant digits).
pub(crate) fn fmt_full(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads header and values from a field CSV without a target grid.
pub fn read_csv_raw(path: &Path) -> Result<(CsvHeader, Vec<f64>), GridError> {
    let text = fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let perr = |message: String| GridError::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| perr("empty file".into()))?;
    let header_line = header_line
        .strip_prefix('#')
        .ok_or_else(|| perr("missing `#` header line".into()))?;
    let mut dim = 0usize;
    let mut nodes = [0usize; 2];
    let mut extents = [0.0f64; 2];
    for token in header_line.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| perr(format!("malformed header token `{token}`")))?;
        match key {
            "dim" => dim = value.parse().map_err(|_| perr(format!("bad dim `{value}`")))?,
            "nx" => nodes[0] = value.parse().map_err(|_| perr(format!("bad nx `{value}`")))?,
            "ny" => nodes[1] = value.parse().map_err(|_| perr(format!("bad ny `{value}`")))?,
            "extent_x" => {
                extents[0] = value.parse().map_err(|_| perr(format!("bad extent_x `{value}`")))?
            }
            "extent_y" => {
                extents[1] = value.parse().map_err(|_| perr(format!("bad extent_y `{value}`")))?
            }
            other => return Err(perr(format!("unknown header key `{other}`"))),
        }
    }
    if dim != 1 && dim != 2 {
        return Err(perr(format!("header dim must be 1 or 2, got {dim}")));
    }
    if dim == 1 {
        nodes[1] = 1;
    }
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| perr(format!("bad value `{line}` on line {}", lineno + 2)))?;
        values.push(v);
    }
    let expected = nodes[0] * nodes[1];
    if values.len() != expected {
        return Err(perr(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok((CsvHeader { dim, nodes, extents }, values))
}

/// Mass-weighted discrete L² inner product (trapezoidal weights).
pub fn l2_inner(u: &ScalarField, v: &ScalarField) -> Result<f64, GridError> {
    u.check_same_grid(v)?;
    let g = u.grid();
    Ok(u.values()
        .iter()
        .zip(v.values())
        .enumerate()
        .map(|(idx, (&a, &b))| g.quad_weight(idx) * a * b)
        .sum())
}

/// Discrete L² norm induced by [`l2_inner`].
pub fn l2_norm(u: &ScalarField) -> f64 {
    l2_inner(u, u).expect("field agrees with itself").max(0.0).sqrt()
}

/// Discrete H¹ inner product: L² part plus the L² product of finite
/// difference gradients (central interior, one-sided at the boundary).
pub fn h1_inner(u: &ScalarField, v: &ScalarField) -> Result<f64, GridError> {
    u.check_same_grid(v)?;
    let g = u.grid();
    let mut total = l2_inner(u, v)?;
    for axis in 0..g.dim() {
        let du = axis_gradient(u, axis);
        let dv = axis_gradient(v, axis);
        total += du
            .iter()
            .zip(&dv)
            .enumerate()
            .map(|(idx, (&a, &b))| g.quad_weight(idx) * a * b)
            .sum::<f64>();
    }
    Ok(total)
}

/// Discrete H¹ norm induced by [`h1_inner`].
pub fn h1_norm(u: &ScalarField) -> f64 {
    h1_inner(u, u).expect("field agrees with itself").max(0.0).sqrt()
}

/// The Gram operator of [`h1_inner`]: the unique B with
/// `l2_inner(B u, v) = h1_inner(u, v)` for all v. Self-adjoint and positive
/// definite in the weighted L² inner product (spectrum ≥ 1).
pub fn h1_gram(u: &ScalarField) -> ScalarField {
    let g = u.grid();
    let mut out = u.values().to_vec();
    for axis in 0..g.dim() {
        let mut du = axis_gradient(u, axis);
        for (idx, v) in du.iter_mut().enumerate() {
            *v *= g.quad_weight(idx);
        }
        let dtw = axis_gradient_transpose(g, &du, axis);
        for (idx, v) in dtw.iter().enumerate() {
            out[idx] += v / g.quad_weight(idx);
        }
    }
    ScalarField::from_computed(Arc::clone(g), out)
}

/// Transpose of the [`axis_gradient`] matrix applied to `w`.
fn axis_gradient_transpose(g: &Arc<GridSpec>, w: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny) = (g.nx(), g.ny());
    let h = g.spacing(axis);
    let n_axis = if axis == 0 { nx } else { ny };
    let stride = if axis == 0 { 1 } else { nx };
    let mut out = vec![0.0; w.len()];
    for j in 0..ny {
        for i in 0..nx {
            let idx = g.index(i, j);
            let pos = if axis == 0 { i } else { j };
            if pos == 0 {
                out[idx] -= w[idx] / h;
                out[idx + stride] += w[idx] / h;
            } else if pos == n_axis - 1 {
                out[idx] += w[idx] / h;
                out[idx - stride] -= w[idx] / h;
            } else {
                out[idx + stride] += w[idx] / (2.0 * h);
                out[idx - stride] -= w[idx] / (2.0 * h);
            }
        }
    }
    out
}

/// Finite-difference gradient along one axis over the whole node set:
/// central differences at interior nodes, first-order one-sided at the ends.
pub(crate) fn axis_gradient(u: &ScalarField, axis: usize) -> Vec<f64> {
    let g = u.grid();
    let vals = u.values();
    let (nx, ny) = (g.nx(), g.ny());
    let h = g.spacing(axis);
    let n_axis = if axis == 0 { nx } else { ny };
    let stride = if axis == 0 { 1 } else { nx };
    let mut out = vec![0.0; vals.len()];
    for j in 0..ny {
        for i in 0..nx {
            let idx = g.index(i, j);
            let pos = if axis == 0 { i } else { j };
            out[idx] = if pos == 0 {
                (vals[idx + stride] - vals[idx]) / h
            } else if pos == n_axis - 1 {
                (vals[idx] - vals[idx - stride]) / h
            } else {
                (vals[idx + stride] - vals[idx - stride]) / (2.0 * h)
            };
        }
    }
    out
}

/// Time-indexed sequence of fields: snapshots at levels 0..=M.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: Arc<GridSpec>,
    snapshots: Vec<ScalarField>,
}

impl Trajectory {
    /// Wraps snapshots, checking the count is `time_steps + 1` and every
    /// snapshot lives on `grid`.
    pub fn new(grid: Arc<GridSpec>, snapshots: Vec<ScalarField>) -> Result<Self, GridError> {
        if snapshots.len() != grid.time_steps() + 1 {
            return Err(GridError::LengthMismatch {
                got: snapshots.len(),
                expected: grid.time_steps() + 1,
            });
        }
        if snapshots.iter().any(|s| !s.grid().same_as(&grid)) {
            return Err(GridError::GridMismatch);
        }
        Ok(Self { grid, snapshots })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Snapshot at time level `m` (level 0 is the initial condition).
    pub fn snapshot(&self, m: usize) -> &ScalarField {
        &self.snapshots[m]
    }

    pub fn final_snapshot(&self) -> &ScalarField {
        self.snapshots.last().expect("trajectory has M+1 ≥ 2 snapshots")
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScalarField> {
        self.snapshots.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: &Arc<GridSpec>, rng: &mut ChaCha8Rng) -> ScalarField {
        let values = (0..grid.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ScalarField::new(Arc::clone(grid), values).unwrap()
    }

    #[test]
    fn build_grid_derives_spacing_and_dt() {
        let g = build_grid(1, &[1.0], &[5], 1.0, 10).unwrap();
        assert_eq!(g.hx(), 0.25);
        assert_eq!(g.dt(), 0.1);

        let g2 = build_grid(2, &[1.0, 2.0], &[3, 5], 0.5, 5).unwrap();
        assert_eq!(g2.hx(), 0.5);
        assert_eq!(g2.hy(), 0.5);
        assert_eq!(g2.dt(), 0.1);
    }

    #[test]
    fn build_grid_rejects_degenerate_input() {
        let err = build_grid(1, &[1.0], &[2], 1.0, 10).unwrap_err();
        match err {
            GridError::InvalidParameter { field, .. } => assert_eq!(field, "nodes_per_axis"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(build_grid(1, &[0.0], &[5], 1.0, 10).is_err());
        assert!(build_grid(1, &[1.0], &[5], -1.0, 10).is_err());
        assert!(build_grid(1, &[1.0], &[5], 1.0, 0).is_err());
        assert!(build_grid(3, &[1.0, 1.0, 1.0], &[5, 5, 5], 1.0, 10).is_err());
    }

    #[test]
    fn boundary_classification_is_total_and_disjoint() {
        let g = build_grid(2, &[1.0, 1.0], &[5, 4], 1.0, 1).unwrap();
        let boundary = (0..g.node_count()).filter(|&i| g.is_boundary(i)).count();
        let interior = g.interior_count();
        assert_eq!(boundary + interior, g.node_count());
        assert_eq!(interior, 3 * 2);
    }

    #[test]
    fn trapezoid_is_exact_for_constants() {
        for n in [3, 8, 51] {
            let g = build_grid(1, &[1.0], &[n], 1.0, 1).unwrap();
            let one = ScalarField::constant(&g, 1.0).unwrap();
            assert!((l2_inner(&one, &one).unwrap() - 1.0).abs() < 1e-14);
        }
        let g = build_grid(2, &[1.0, 2.0], &[7, 9], 1.0, 1).unwrap();
        let one = ScalarField::constant(&g, 1.0).unwrap();
        assert!((l2_inner(&one, &one).unwrap() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn l2_of_sine_matches_analytic_half() {
        // ∫₀¹ sin²(πx) dx = 1/2.
        let g = build_grid(1, &[1.0], &[201], 1.0, 1).unwrap();
        let u = ScalarField::from_fn(&g, |x, _| (PI * x).sin()).unwrap();
        assert!((l2_inner(&u, &u).unwrap() - 0.5).abs() < 1e-4);
    }

    #[test]
    fn l2_against_zero_field_vanishes() {
        let g = build_grid(1, &[1.0], &[33], 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_field(&g, &mut rng);
        let z = ScalarField::zeros(&g);
        assert_eq!(l2_inner(&u, &z).unwrap(), 0.0);
    }

    #[test]
    fn h1_of_constant_equals_l2() {
        let g = build_grid(1, &[1.0], &[41], 1.0, 1).unwrap();
        let one = ScalarField::constant(&g, 1.0).unwrap();
        assert!((h1_inner(&one, &one).unwrap() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn h1_of_sine_matches_analytic_value() {
        // ∫ sin² + ∫ π² cos² = 1/2 + π²/2.
        let g = build_grid(1, &[1.0], &[201], 1.0, 1).unwrap();
        let u = ScalarField::from_fn(&g, |x, _| (PI * x).sin()).unwrap();
        let expected = 0.5 + PI * PI / 2.0;
        assert!((h1_inner(&u, &u).unwrap() - expected).abs() < 1e-3);
    }

    #[test]
    fn h1_dominates_l2_on_random_fields() {
        let g = build_grid(1, &[1.0], &[51], 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let u = random_field(&g, &mut rng);
            assert!(h1_inner(&u, &u).unwrap() >= l2_inner(&u, &u).unwrap());
        }
    }

    #[test]
    fn inner_products_are_symmetric_to_machine_precision() {
        let g = build_grid(2, &[1.0, 1.5], &[9, 11], 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let u = random_field(&g, &mut rng);
            let v = random_field(&g, &mut rng);
            let bound = |uu: f64, vv: f64| 1e-14 * (uu.abs() + vv.abs());
            let (uu, vv) = (l2_inner(&u, &u).unwrap(), l2_inner(&v, &v).unwrap());
            assert!(
                (l2_inner(&u, &v).unwrap() - l2_inner(&v, &u).unwrap()).abs() <= bound(uu, vv)
            );
            let (uu, vv) = (h1_inner(&u, &u).unwrap(), h1_inner(&v, &v).unwrap());
            assert!(
                (h1_inner(&u, &v).unwrap() - h1_inner(&v, &u).unwrap()).abs() <= bound(uu, vv)
            );
        }
    }

    #[test]
    fn quadrature_converges_at_second_order() {
        // Trapezoid is exact for sin²(πx) on (0,1) (periodic integrand), so
        // the order is measured on eˣ, whose endpoint derivatives differ:
        // ∫₀¹ e²ˣ dx = (e² − 1)/2.
        let exact = (1.0f64.exp().powi(2) - 1.0) / 2.0;
        let mut errors = Vec::new();
        for n in [26usize, 51, 101, 201] {
            let g = build_grid(1, &[1.0], &[n], 1.0, 1).unwrap();
            let u = ScalarField::from_fn(&g, |x, _| x.exp()).unwrap();
            errors.push((l2_inner(&u, &u).unwrap() - exact).abs());
        }
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((1.8..=2.2).contains(&order), "observed order {order}");
        }
        // And sin²(πx) itself is integrated essentially exactly.
        let g = build_grid(1, &[1.0], &[26], 1.0, 1).unwrap();
        let u = ScalarField::from_fn(&g, |x, _| (PI * x).sin()).unwrap();
        assert!((l2_inner(&u, &u).unwrap() - 0.5).abs() < 1e-13);
    }

    #[test]
    fn h1_gram_reproduces_the_h1_inner_product() {
        for g in [
            build_grid(1, &[1.0], &[33], 1.0, 1).unwrap(),
            build_grid(2, &[1.0, 2.0], &[9, 13], 1.0, 1).unwrap(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            for _ in 0..5 {
                let u = random_field(&g, &mut rng);
                let v = random_field(&g, &mut rng);
                let lhs = l2_inner(&h1_gram(&u), &v).unwrap();
                let rhs = h1_inner(&u, &v).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn field_construction_rejects_non_finite_values() {
        let g = build_grid(1, &[1.0], &[5], 1.0, 1).unwrap();
        let mut vals = vec![0.0; 5];
        vals[2] = f64::NAN;
        assert!(matches!(
            ScalarField::new(Arc::clone(&g), vals),
            Err(GridError::NonFinite { index: 2, .. })
        ));
        let mut vals = vec![0.0; 5];
        vals[4] = f64::INFINITY;
        assert!(ScalarField::new(Arc::clone(&g), vals).is_err());
        assert!(ScalarField::new(Arc::clone(&g), vec![0.0; 4]).is_err());
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let g1 = build_grid(1, &[1.0], &[5], 1.0, 1).unwrap();
        let g2 = build_grid(1, &[1.0], &[7], 1.0, 1).unwrap();
        let u = ScalarField::zeros(&g1);
        let v = ScalarField::zeros(&g2);
        assert!(matches!(l2_inner(&u, &v), Err(GridError::GridMismatch)));
        assert!(matches!(h1_inner(&u, &v), Err(GridError::GridMismatch)));
        assert!(u.add(&v).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.csv");
        let g = build_grid(2, &[1.0, 2.0], &[5, 4], 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_field(&g, &mut rng);
        u.write_csv(&path).unwrap();
        let back = ScalarField::read_csv(&g, &path).unwrap();
        assert_eq!(u.values(), back.values());

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# dim=2 nx=5 ny=4 "));
    }

    #[test]
    fn csv_read_validates_header_against_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.csv");
        let g = build_grid(1, &[1.0], &[5], 1.0, 1).unwrap();
        ScalarField::zeros(&g).write_csv(&path).unwrap();
        let other = build_grid(1, &[1.0], &[7], 1.0, 1).unwrap();
        assert!(matches!(
            ScalarField::read_csv(&other, &path),
            Err(GridError::Parse { .. })
        ));
    }

    #[test]
    fn trajectory_checks_snapshot_count_and_initial_condition() {
        let g = build_grid(1, &[1.0], &[5], 1.0, 3).unwrap();
        let phi = ScalarField::from_fn(&g, |x, _| x).unwrap();
        let snaps = vec![phi.clone(); 4];
        let traj = Trajectory::new(Arc::clone(&g), snaps).unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(traj.snapshot(0).values(), phi.values());
        assert!(Trajectory::new(Arc::clone(&g), vec![phi; 3]).is_err());
    }

    proptest! {
        #[test]
        fn l2_inner_bilinear_in_first_argument(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = build_grid(1, &[1.0], &[17], 1.0, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u1 = random_field(&g, &mut rng);
            let u2 = random_field(&g, &mut rng);
            let v = random_field(&g, &mut rng);
            let lhs = l2_inner(&u1.scale(a).add(&u2.scale(b)).unwrap(), &v).unwrap();
            let rhs = a * l2_inner(&u1, &v).unwrap() + b * l2_inner(&u2, &v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs() + rhs.abs()));
        }
    }
}
