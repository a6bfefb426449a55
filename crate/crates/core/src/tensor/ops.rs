//! Tape primitives: forward computation and the matching gradient rules.
//!
//! Every operation validates operand shapes up front (errors name the
//! operation and both shapes), computes the forward value, and records enough
//! information for [`backward_step`] to push gradients to its inputs.

use super::{Array, Tape, TensorId};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How the right-hand operand of `add`/`mul` maps onto the left-hand shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    /// Identical shapes.
    Same,
    /// Single-element rhs applied everywhere.
    Scalar,
    /// Rhs is one row (`[c]` or `[1, c]`) repeated down a `(r, c)` lhs.
    Row,
    /// Rhs is one column (`(r, 1)`) repeated across a `(r, c)` lhs.
    Col,
}

pub(crate) enum Op {
    Leaf,
    Matmul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
        bcast: Bcast,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
        bcast: Bcast,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        input: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum {
        input: TensorId,
        axis: Option<usize>,
    },
    Mean {
        input: TensorId,
        axis: Option<usize>,
    },
    Softmax {
        input: TensorId,
        axis: usize,
    },
    LogSoftmax {
        input: TensorId,
        axis: usize,
    },
    Sigmoid {
        input: TensorId,
    },
    Tanh {
        input: TensorId,
    },
    Relu {
        input: TensorId,
    },
    LeakyRelu {
        input: TensorId,
        slope: f64,
    },
    Exp {
        input: TensorId,
    },
    Log {
        input: TensorId,
    },
    LayerNorm {
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    L2Normalize {
        input: TensorId,
    },
    Dropout {
        input: TensorId,
        scaled_mask: Vec<f64>,
    },
    Transpose {
        input: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
}

/// Enumerable handle on the primitive set, used by gradient-check tooling to
/// drive every operation through one uniform interface. `dropout` is absent
/// because it draws randomness; it is exercised separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
    Exp,
    Log,
    LayerNorm { eps: f64 },
    L2Normalize,
    Transpose,
    Scale { factor: f64 },
}

/// Guard added inside the L2 norm square root so zero rows normalize to zero
/// instead of dividing by zero. Small enough that unit-scale rows stay within
/// 1e-12 of unit norm.
const L2_EPS_SQ: f64 = 1e-24;

// (outer, axis length, inner) decomposition of a shape around `axis`.
fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn bcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Same);
    }
    let rhs_numel: usize = rhs.iter().product();
    if rhs_numel == 1 {
        return Ok(Bcast::Scalar);
    }
    if lhs.len() == 2 {
        let (r, c) = (lhs[0], lhs[1]);
        if rhs == [c] || rhs == [1, c] {
            return Ok(Bcast::Row);
        }
        if rhs == [r, 1] {
            return Ok(Bcast::Col);
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

// Value of the broadcast rhs at flat position `i` of the lhs.
#[inline]
fn bcast_at(rhs: &[f64], bcast: Bcast, i: usize, cols: usize) -> f64 {
    match bcast {
        Bcast::Same => rhs[i],
        Bcast::Scalar => rhs[0],
        Bcast::Row => rhs[i % cols],
        Bcast::Col => rhs[i / cols],
    }
}

// Flat position in the rhs that position `i` of the lhs reduces onto.
#[inline]
fn bcast_target(bcast: Bcast, i: usize, cols: usize) -> usize {
    match bcast {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

impl Tape {
    fn unary_map(
        &mut self,
        x: TensorId,
        op_name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<TensorId> {
        let v = self.value(x);
        let out = Array {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| f(e)).collect(),
        };
        let rg = self.requires_grad(x);
        self.push(out, op, rg, op_name)
    }

    /// Matrix product of two rank-2 tensors, `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data[i * k + p];
                let brow = &bv.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            Array {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul { lhs: a, rhs: b },
            rg,
            "matmul",
        )
    }

    /// Elementwise sum. The rhs may be a scalar, a row or a column of the lhs
    /// shape; anything else is a shape error naming both operands.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bcast = bcast_kind("add", &self.value(a).shape, &self.value(b).shape)?;
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bcast_at(&bv.data, bcast, i, cols))
            .collect();
        let out = Array {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Add { lhs: a, rhs: b, bcast }, rg, "add")
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bcast = bcast_kind("mul", &self.value(a).shape, &self.value(b).shape)?;
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bcast_at(&bv.data, bcast, i, cols))
            .collect();
        let out = Array {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Mul { lhs: a, rhs: b, bcast }, rg, "mul")
    }

    /// Concatenate tensors of equal rank along `axis`; all other axes must
    /// agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first_shape = self.value(parts[0]).shape.clone();
        check_axis("concat", &first_shape, axis)?;
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.value(p).shape;
            let compatible = s.len() == first_shape.len()
                && s.iter()
                    .zip(first_shape.iter())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_dims(&out_shape, axis);
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let v = self.value(p);
            let alen = v.shape[axis];
            for o in 0..outer {
                let src = &v.data[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                out[dst_start..dst_start + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(
            Array {
                shape: out_shape,
                data: out,
            },
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.value(x).shape.clone();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice range {}..{} out of bounds for axis {} of length {}",
                start,
                start + len,
                axis,
                shape[axis]
            )));
        }
        let (outer, alen, inner) = axis_dims(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let v = self.value(x);
        for o in 0..outer {
            let src_start = o * alen * inner + start * inner;
            let dst_start = o * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&v.data[src_start..src_start + len * inner]);
        }
        let rg = self.requires_grad(x);
        self.push(
            Array {
                shape: out_shape,
                data: out,
            },
            Op::Slice {
                input: x,
                axis,
                start,
                len,
            },
            rg,
            "slice",
        )
    }

    /// Sum over one axis (kept as size 1) or over all entries (`None`,
    /// yielding shape `[1]`).
    pub fn sum(&mut self, x: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let v = self.value(x);
        let out = match axis {
            None => Array::scalar(v.data.iter().sum()),
            Some(a) => {
                check_axis("sum", &v.shape, a)?;
                let (outer, len, inner) = axis_dims(&v.shape, a);
                let mut out_shape = v.shape.clone();
                out_shape[a] = 1;
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            data[o * inner + i] += v.data[(o * len + k) * inner + i];
                        }
                    }
                }
                Array {
                    shape: out_shape,
                    data,
                }
            }
        };
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum { input: x, axis }, rg, "sum")
    }

    /// Arithmetic mean over one axis (kept as size 1) or over all entries.
    pub fn mean(&mut self, x: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let v = self.value(x);
        let out = match axis {
            None => Array::scalar(v.data.iter().sum::<f64>() / v.numel() as f64),
            Some(a) => {
                check_axis("mean", &v.shape, a)?;
                let (outer, len, inner) = axis_dims(&v.shape, a);
                let mut out_shape = v.shape.clone();
                out_shape[a] = 1;
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            data[o * inner + i] += v.data[(o * len + k) * inner + i];
                        }
                    }
                }
                for d in data.iter_mut() {
                    *d /= len as f64;
                }
                Array {
                    shape: out_shape,
                    data,
                }
            }
        };
        let rg = self.requires_grad(x);
        self.push(out, Op::Mean { input: x, axis }, rg, "mean")
    }

    /// Softmax along `axis`, computed with max subtraction so large inputs
    /// cannot overflow.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = self.value(x);
        check_axis("softmax", &v.shape, axis)?;
        let (outer, len, inner) = axis_dims(&v.shape, axis);
        let mut data = vec![0.0; v.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(v.data[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (v.data[idx(k)] - mx).exp();
                    data[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    data[idx(k)] /= z;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(
            Array {
                shape: v.shape.clone(),
                data,
            },
            Op::Softmax { input: x, axis },
            rg,
            "softmax",
        )
    }

    /// `log(softmax(x))` fused for numerical stability: entries pushed far
    /// negative (e.g. masked attention candidates) stay finite instead of
    /// producing `log(0)`.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = self.value(x);
        check_axis("log_softmax", &v.shape, axis)?;
        let (outer, len, inner) = axis_dims(&v.shape, axis);
        let mut data = vec![0.0; v.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(v.data[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    z += (v.data[idx(k)] - mx).exp();
                }
                let lse = mx + z.ln();
                for k in 0..len {
                    data[idx(k)] = v.data[idx(k)] - lse;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(
            Array {
                shape: v.shape.clone(),
                data,
            },
            Op::LogSoftmax { input: x, axis },
            rg,
            "log_softmax",
        )
    }

    /// Logistic function, evaluated tail-stably.
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "sigmoid", Op::Sigmoid { input: x }, |e| {
            if e >= 0.0 {
                1.0 / (1.0 + (-e).exp())
            } else {
                let z = e.exp();
                z / (1.0 + z)
            }
        })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "tanh", Op::Tanh { input: x }, f64::tanh)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "relu", Op::Relu { input: x }, |e| e.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId> {
        if !slope.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must be finite, got {slope}"
            )));
        }
        self.unary_map(x, "leaky_relu", Op::LeakyRelu { input: x, slope }, move |e| {
            if e > 0.0 {
                e
            } else {
                slope * e
            }
        })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "exp", Op::Exp { input: x }, f64::exp)
    }

    /// Natural log. Non-positive inputs produce non-finite values and are
    /// rejected as such.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "log", Op::Log { input: x }, f64::ln)
    }

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// learned elementwise gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let d = *self.value(x).shape.last().unwrap();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = &self.value(id).shape;
            if s.as_slice() != [d] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: self.value(x).shape.clone(),
                    rhs: s.clone(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let v = self.value(x);
        let rows = v.numel() / d;
        let (gv, bv) = (&self.value(gain).data, &self.value(bias).data);
        let mut data = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = gv[j] * (row[j] - mean) * inv + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push(
            Array {
                shape: v.shape.clone(),
                data,
            },
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                eps,
            },
            rg,
            "layer_norm",
        )
    }

    /// Scale each last-axis row to unit L2 norm (eps-guarded so zero rows map
    /// to zero).
    pub fn l2_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        let d = *v.shape.last().unwrap();
        let rows = v.numel() / d;
        let mut data = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data[r * d..(r + 1) * d];
            let norm = (row.iter().map(|e| e * e).sum::<f64>() + L2_EPS_SQ).sqrt();
            for j in 0..d {
                data[r * d + j] = row[j] / norm;
            }
        }
        let rg = self.requires_grad(x);
        self.push(
            Array {
                shape: v.shape.clone(),
                data,
            },
            Op::L2Normalize { input: x },
            rg,
            "l2_normalize",
        )
    }

    /// Inverted dropout: each entry is dropped with probability `p` and the
    /// survivors are scaled by `1/(1-p)`, so the output is unbiased. `p = 0`
    /// is exactly the identity.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let v = self.value(x);
        let scaled_mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data = v
            .data
            .iter()
            .zip(scaled_mask.iter())
            .map(|(&e, &m)| e * m)
            .collect();
        let out = Array {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.requires_grad(x);
        self.push(
            out,
            Op::Dropout {
                input: x,
                scaled_mask,
            },
            rg,
            "dropout",
        )
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose requires a rank-2 tensor, got shape {:?}",
                v.shape
            )));
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data[i * n + j];
            }
        }
        let rg = self.requires_grad(x);
        self.push(
            Array {
                shape: vec![n, m],
                data,
            },
            Op::Transpose { input: x },
            rg,
            "transpose",
        )
    }

    /// Multiply every entry by a fixed finite factor.
    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be finite, got {factor}"
            )));
        }
        self.unary_map(x, "scale", Op::Scale { input: x, factor }, |e| e * factor)
    }

    /// Uniform dispatcher over the primitive set (minus dropout), for tooling
    /// that iterates "every primitive".
    pub fn apply(&mut self, prim: &Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        fn arity(n: usize, inputs: &[TensorId], name: &str) -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{name} takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        }
        match *prim {
            Primitive::Matmul => {
                arity(2, inputs, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2, inputs, "add")?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2, inputs, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Slice { axis, start, len } => {
                arity(1, inputs, "slice")?;
                self.slice(inputs[0], axis, start, len)
            }
            Primitive::Sum { axis } => {
                arity(1, inputs, "sum")?;
                self.sum(inputs[0], axis)
            }
            Primitive::Mean { axis } => {
                arity(1, inputs, "mean")?;
                self.mean(inputs[0], axis)
            }
            Primitive::Softmax { axis } => {
                arity(1, inputs, "softmax")?;
                self.softmax(inputs[0], axis)
            }
            Primitive::LogSoftmax { axis } => {
                arity(1, inputs, "log_softmax")?;
                self.log_softmax(inputs[0], axis)
            }
            Primitive::Sigmoid => {
                arity(1, inputs, "sigmoid")?;
                self.sigmoid(inputs[0])
            }
            Primitive::Tanh => {
                arity(1, inputs, "tanh")?;
                self.tanh(inputs[0])
            }
            Primitive::Relu => {
                arity(1, inputs, "relu")?;
                self.relu(inputs[0])
            }
            Primitive::LeakyRelu { slope } => {
                arity(1, inputs, "leaky_relu")?;
                self.leaky_relu(inputs[0], slope)
            }
            Primitive::Exp => {
                arity(1, inputs, "exp")?;
                self.exp(inputs[0])
            }
            Primitive::Log => {
                arity(1, inputs, "log")?;
                self.log(inputs[0])
            }
            Primitive::LayerNorm { eps } => {
                arity(3, inputs, "layer_norm")?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], eps)
            }
            Primitive::L2Normalize => {
                arity(1, inputs, "l2_normalize")?;
                self.l2_normalize(inputs[0])
            }
            Primitive::Transpose => {
                arity(1, inputs, "transpose")?;
                self.transpose(inputs[0])
            }
            Primitive::Scale { factor } => {
                arity(1, inputs, "scale")?;
                self.scale(inputs[0], factor)
            }
        }
    }
}

// ===== Backward rules =====

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    id: TensorId,
    numel: usize,
) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; numel])
}

/// Push the output gradient `g` of node `idx` onto that node's inputs.
pub(crate) fn backward_step(tape: &Tape, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &tape.nodes[idx];
    match &node.op {
        Op::Leaf => {}

        Op::Matmul { lhs, rhs } => {
            let (a, b) = (tape.value(*lhs), tape.value(*rhs));
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if tape.requires_grad(*lhs) {
                // dA = g . B^T
                let da = grad_buf(grads, *lhs, m * k);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if tape.requires_grad(*rhs) {
                // dB = A^T . g
                let db = grad_buf(grads, *rhs, k * n);
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.data[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            }
        }

        Op::Add { lhs, rhs, bcast } => {
            let cols = tape.value(*lhs).cols();
            if tape.requires_grad(*lhs) {
                let da = grad_buf(grads, *lhs, g.len());
                for (d, &gi) in da.iter_mut().zip(g.iter()) {
                    *d += gi;
                }
            }
            if tape.requires_grad(*rhs) {
                let rn = tape.value(*rhs).numel();
                let db = grad_buf(grads, *rhs, rn);
                for (i, &gi) in g.iter().enumerate() {
                    db[bcast_target(*bcast, i, cols)] += gi;
                }
            }
        }

        Op::Mul { lhs, rhs, bcast } => {
            let a = tape.value(*lhs);
            let b = tape.value(*rhs);
            let cols = a.cols();
            if tape.requires_grad(*lhs) {
                let da = grad_buf(grads, *lhs, g.len());
                for (i, &gi) in g.iter().enumerate() {
                    da[i] += gi * bcast_at(&b.data, *bcast, i, cols);
                }
            }
            if tape.requires_grad(*rhs) {
                let db = grad_buf(grads, *rhs, b.numel());
                for (i, &gi) in g.iter().enumerate() {
                    db[bcast_target(*bcast, i, cols)] += gi * a.data[i];
                }
            }
        }

        Op::Concat { inputs, axis } => {
            let out_shape = &node.value.shape;
            let (outer, total, inner) = axis_dims(out_shape, *axis);
            let mut offset = 0usize;
            for &p in inputs {
                let alen = tape.value(p).shape[*axis];
                if tape.requires_grad(p) {
                    let numel = tape.value(p).numel();
                    let dp = grad_buf(grads, p, numel);
                    for o in 0..outer {
                        let src_start = o * total * inner + offset * inner;
                        let dst_start = o * alen * inner;
                        for t in 0..alen * inner {
                            dp[dst_start + t] += g[src_start + t];
                        }
                    }
                }
                offset += alen;
            }
        }

        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            if tape.requires_grad(*input) {
                let in_shape = tape.value(*input).shape.clone();
                let (outer, alen, inner) = axis_dims(&in_shape, *axis);
                let numel = tape.value(*input).numel();
                let dx = grad_buf(grads, *input, numel);
                for o in 0..outer {
                    let dst_start = o * alen * inner + start * inner;
                    let src_start = o * len * inner;
                    for t in 0..len * inner {
                        dx[dst_start + t] += g[src_start + t];
                    }
                }
            }
        }

        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            if !tape.requires_grad(*input) {
                return;
            }
            let v = tape.value(*input);
            let scale = match &node.op {
                Op::Mean { .. } => match axis {
                    None => 1.0 / v.numel() as f64,
                    Some(a) => 1.0 / v.shape[*a] as f64,
                },
                _ => 1.0,
            };
            let numel = v.numel();
            match axis {
                None => {
                    let dx = grad_buf(grads, *input, numel);
                    let gs = g[0] * scale;
                    for d in dx.iter_mut() {
                        *d += gs;
                    }
                }
                Some(a) => {
                    let (outer, len, inner) = axis_dims(&v.shape, *a);
                    let dx = grad_buf(grads, *input, numel);
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                dx[(o * len + k) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
        }

        Op::Softmax { input, axis } => {
            if !tape.requires_grad(*input) {
                return;
            }
            let s = &node.value;
            let (outer, len, inner) = axis_dims(&s.shape, *axis);
            let numel = s.numel();
            let dx = grad_buf(grads, *input, numel);
            for o in 0..outer {
                for i in 0..inner {
                    let idx_of = |k: usize| (o * len + k) * inner + i;
                    let mut dot = 0.0;
                    for k in 0..len {
                        dot += g[idx_of(k)] * s.data[idx_of(k)];
                    }
                    for k in 0..len {
                        dx[idx_of(k)] += s.data[idx_of(k)] * (g[idx_of(k)] - dot);
                    }
                }
            }
        }

        Op::LogSoftmax { input, axis } => {
            if !tape.requires_grad(*input) {
                return;
            }
            let y = &node.value;
            let (outer, len, inner) = axis_dims(&y.shape, *axis);
            let numel = y.numel();
            let dx = grad_buf(grads, *input, numel);
            for o in 0..outer {
                for i in 0..inner {
                    let idx_of = |k: usize| (o * len + k) * inner + i;
                    let mut gsum = 0.0;
                    for k in 0..len {
                        gsum += g[idx_of(k)];
                    }
                    for k in 0..len {
                        dx[idx_of(k)] += g[idx_of(k)] - y.data[idx_of(k)].exp() * gsum;
                    }
                }
            }
        }

        Op::Sigmoid { input } => {
            if tape.requires_grad(*input) {
                let s = &node.value.data;
                let dx = grad_buf(grads, *input, s.len());
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi * s[i] * (1.0 - s[i]);
                }
            }
        }

        Op::Tanh { input } => {
            if tape.requires_grad(*input) {
                let t = &node.value.data;
                let dx = grad_buf(grads, *input, t.len());
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi * (1.0 - t[i] * t[i]);
                }
            }
        }

        Op::Relu { input } => {
            if tape.requires_grad(*input) {
                let x = &tape.value(*input).data;
                let dx = grad_buf(grads, *input, x.len());
                for (i, &gi) in g.iter().enumerate() {
                    // Subgradient at exactly 0 follows the negative side: 0.
                    if x[i] > 0.0 {
                        dx[i] += gi;
                    }
                }
            }
        }

        Op::LeakyRelu { input, slope } => {
            if tape.requires_grad(*input) {
                let x = &tape.value(*input).data;
                let dx = grad_buf(grads, *input, x.len());
                for (i, &gi) in g.iter().enumerate() {
                    // Subgradient at exactly 0 follows the negative side.
                    dx[i] += gi * if x[i] > 0.0 { 1.0 } else { *slope };
                }
            }
        }

        Op::Exp { input } => {
            if tape.requires_grad(*input) {
                let y = &node.value.data;
                let dx = grad_buf(grads, *input, y.len());
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi * y[i];
                }
            }
        }

        Op::Log { input } => {
            if tape.requires_grad(*input) {
                let x = &tape.value(*input).data;
                let dx = grad_buf(grads, *input, x.len());
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi / x[i];
                }
            }
        }

        Op::LayerNorm {
            input,
            gain,
            bias,
            eps,
        } => {
            let v = tape.value(*input);
            let d = *v.shape.last().unwrap();
            let rows = v.numel() / d;
            let gv = &tape.value(*gain).data;
            let in_rg = tape.requires_grad(*input);
            let gain_rg = tape.requires_grad(*gain);
            let bias_rg = tape.requires_grad(*bias);
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut dinput = vec![0.0; v.numel()];
            for r in 0..rows {
                let row = &v.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let grow = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    let dxhat = grow[j] * gv[j];
                    dgain[j] += grow[j] * xhat;
                    dbias[j] += grow[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if in_rg {
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv[j];
                        dinput[r * d + j] += (inv / d as f64)
                            * (d as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
            if in_rg {
                let dx = grad_buf(grads, *input, v.numel());
                for (a, b) in dx.iter_mut().zip(dinput.iter()) {
                    *a += b;
                }
            }
            if gain_rg {
                let dgn = grad_buf(grads, *gain, d);
                for (a, b) in dgn.iter_mut().zip(dgain.iter()) {
                    *a += b;
                }
            }
            if bias_rg {
                let dbs = grad_buf(grads, *bias, d);
                for (a, b) in dbs.iter_mut().zip(dbias.iter()) {
                    *a += b;
                }
            }
        }

        Op::L2Normalize { input } => {
            if !tape.requires_grad(*input) {
                return;
            }
            let v = tape.value(*input);
            let y = &node.value;
            let d = *v.shape.last().unwrap();
            let rows = v.numel() / d;
            let dx = grad_buf(grads, *input, v.numel());
            for r in 0..rows {
                let xrow = &v.data[r * d..(r + 1) * d];
                let yrow = &y.data[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let norm = (xrow.iter().map(|e| e * e).sum::<f64>() + L2_EPS_SQ).sqrt();
                let gy: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] += (grow[j] - yrow[j] * gy) / norm;
                }
            }
        }

        Op::Dropout { input, scaled_mask } => {
            if tape.requires_grad(*input) {
                let dx = grad_buf(grads, *input, scaled_mask.len());
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi * scaled_mask[i];
                }
            }
        }

        Op::Transpose { input } => {
            if tape.requires_grad(*input) {
                let v = tape.value(*input);
                let (m, n) = (v.shape[0], v.shape[1]);
                let dx = grad_buf(grads, *input, m * n);
                // g has shape (n, m)
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }

        Op::Scale { input, factor } => {
            if tape.requires_grad(*input) {
                let dx = grad_buf(grads, *input, g.len());
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi * factor;
                }
            }
        }
    }
}
