//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! [`Array`] is the plain value type (shape + row-major data). Differentiable
//! computation happens on a [`Tape`]: every operation validates its operands,
//! computes the forward value, checks it for non-finite entries, and records
//! how it was produced. [`Tape::backward`] walks the recording in reverse and
//! accumulates gradients, summing contributions over every path from the root.
//!
//! The tape is append-only and single-threaded, so a given seed always
//! produces bit-identical results.

mod adam;
mod grad_check;
mod ops;
mod params;
#[cfg(test)]
mod tests;

pub use adam::{Adam, AdamConfig};
pub use grad_check::{grad_check, grad_check_multi, CoordReport, GradCheckReport};
pub use ops::Primitive;
pub use params::ParamSet;

pub(crate) use ops::Op;

use crate::error::{Error, Result};
use rand::Rng;

// ===== Array: the plain value type =====

/// A dense tensor: shape plus row-major data. `product(shape) == data.len()`
/// always holds; constructors reject anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Array> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.is_empty() {
            return Err(Error::InvalidArgument(
                "rank-0 arrays are not supported; use shape [1] for scalars".into(),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Array {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Array {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Scalar as a shape-`[1]` array.
    pub fn scalar(value: f64) -> Array {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Array {
        let mut a = Array::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Array> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("from_rows: no rows given".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::InvalidArgument(format!(
                    "from_rows: row 0 has {} columns but row {} has {}",
                    cols,
                    i,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Array::new(vec![rows.len(), cols], data)
    }

    /// Entries drawn i.i.d. from `U[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Array {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Array {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn i.i.d. from `N(mean, std^2)` (Box-Muller).
    pub fn rand_normal<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Array {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(mean + std * r * theta.cos());
            if data.len() < numel {
                data.push(mean + std * r * theta.sin());
            }
        }
        Array {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a rank-2 array (rank-1 arrays count as one row).
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns of a rank-2 array (length of a rank-1 array).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Rank-2 element access.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One row of a rank-2 array as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }
}

// ===== Tape =====

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) struct Node {
    pub value: Array,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Array) -> Result<TensorId> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Insert a non-differentiable leaf (data, masks, fixed coefficients).
    pub fn constant(&mut self, value: Array) -> Result<TensorId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, id: TensorId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let v = self.value(id);
        if v.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected a scalar tensor, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }

    pub(crate) fn push(
        &mut self,
        value: Array,
        op: Op,
        requires_grad: bool,
        op_name: &'static str,
    ) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub(crate) fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reverse-mode sweep from a scalar root. Gradient contributions are
    /// summed over every path; tensors not on any path to the root (and
    /// non-differentiable leaves) simply have no entry and read back as zero.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            ops::backward_step(self, idx, &g, &mut grads);
            // Re-store the output gradient so callers can inspect interior
            // gradients too (useful in tests and diagnostics).
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

// ===== Gradients =====

/// Result of a backward sweep: per-tensor gradients, indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if any path reached it.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an [`Array`] shaped like the tensor; zeros when no path
    /// from the root reached it (e.g. a detached leaf).
    pub fn get_or_zeros(&self, tape: &Tape, id: TensorId) -> Array {
        let shape = tape.shape(id);
        match self.get(id) {
            Some(g) => Array::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Array::zeros(shape),
        }
    }
}
