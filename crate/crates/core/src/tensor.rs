//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to the [`Var`] handles it
//! hands out. Leaves created with [`Tape::leaf`] are tracked; values
//! registered with [`Tape::constant`] are not, and any node whose inputs are
//! all untracked is stored as a plain value without a backward rule.
//!
//! A tape supports exactly one backward pass. Optimization loops build a
//! fresh tape per iteration.
//!
//! ```
//! use amicable::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major n-dimensional array of `f64`.
///
/// A scalar has shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor owning `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A linear operator with an explicit adjoint, recorded on the tape as one
/// node. Used for transforms (STFT, overlap-add) whose adjoint is far cheaper
/// than differentiating through their scalar implementation.
pub trait LinearMap: Send + Sync {
    fn name(&self) -> &'static str;
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    fn apply(&self, input: &[f64]) -> Vec<f64>;
    fn adjoint(&self, cotangent: &[f64]) -> Vec<f64>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Square,
    Sqrt,
    Ln,
    Sigmoid,
    Abs,
}

enum Op {
    Leaf,
    Constant,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        mode: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    AddScalar {
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumRows {
        a: usize,
        cols: usize,
    },
    RowNorms {
        a: usize,
        cols: usize,
    },
    AddRowBias {
        a: usize,
        bias: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Slice {
        a: usize,
        offset: usize,
        len: usize,
    },
    Reshape {
        a: usize,
    },
    Linear {
        a: usize,
        map: Arc<dyn LinearMap>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of operations. Parents always precede children.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `out (+)= op(a) * op(b)` for row-major matrices, with optional transposes.
/// `a` is `m x k` after transposition, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the row-major layouts of `a`, `b` and `out`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Clears all nodes so the tape can record a new graph. Previously issued
    /// handles become invalid.
    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers an untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable used with a foreign tape");
        &self.nodes[var.index].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        var.tape == self.id && self.nodes[var.index].tracked
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        check_finite(op_name, &value.data)?;
        let tracked = parents.iter().any(|&p| self.nodes[p].tracked);
        let op = if tracked { op } else { Op::Constant };
        Ok(self.push_raw(value, op, tracked))
    }

    fn shape_of(&self, index: usize) -> &[usize] {
        &self.nodes[index].value.shape
    }

    fn data_of(&self, index: usize) -> &[f64] {
        &self.nodes[index].value.data
    }

    fn binary(&mut self, op_name: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (sa, sb) = (self.shape_of(ia), self.shape_of(ib));
        let (la, lb) = (self.data_of(ia).len(), self.data_of(ib).len());
        let (mode, shape) = if sa == sb {
            (Broadcast::Same, sa.to_vec())
        } else if la == 1 {
            (Broadcast::LeftScalar, sb.to_vec())
        } else if lb == 1 {
            (Broadcast::RightScalar, sa.to_vec())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let n = la.max(lb);
        let da = self.data_of(ia);
        let db = self.data_of(ib);
        let at = |i: usize| match mode {
            Broadcast::LeftScalar => da[0],
            _ => da[i],
        };
        let bt = |i: usize| match mode {
            Broadcast::RightScalar => db[0],
            _ => db[i],
        };
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => at(i) + bt(i),
                BinaryKind::Sub => at(i) - bt(i),
                BinaryKind::Mul => at(i) * bt(i),
                BinaryKind::Div => at(i) / bt(i),
            })
            .collect();
        let value = Tensor { shape, data };
        self.push(
            op_name,
            value,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                mode,
            },
            &[ia, ib],
        )
    }

    /// Elementwise sum. One operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    fn unary(&mut self, op_name: &'static str, kind: UnaryKind, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.data_of(ia);
        match kind {
            UnaryKind::Sqrt => {
                if let Some(v) = src.iter().find(|v| **v < 0.0) {
                    return Err(TensorError::Domain {
                        op: op_name,
                        detail: format!("negative argument {v}"),
                    });
                }
            }
            UnaryKind::Ln => {
                if let Some(v) = src.iter().find(|v| **v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: op_name,
                        detail: format!("non-positive argument {v}"),
                    });
                }
            }
            _ => {}
        }
        let data: Vec<f64> = src
            .iter()
            .map(|&v| match kind {
                UnaryKind::Square => v * v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Ln => v.ln(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Abs => v.abs(),
            })
            .collect();
        let value = Tensor {
            shape: self.shape_of(ia).to_vec(),
            data,
        };
        self.push(op_name, value, Op::Unary { kind, a: ia }, &[ia])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", UnaryKind::Square, a)
    }

    /// Elementwise square root; negative arguments are a domain error.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", UnaryKind::Sqrt, a)
    }

    /// Natural logarithm; non-positive arguments are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", UnaryKind::Ln, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", UnaryKind::Sigmoid, a)
    }

    /// Elementwise absolute value. The derivative at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", UnaryKind::Abs, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor {
            shape: self.shape_of(ia).to_vec(),
            data: self.data_of(ia).iter().map(|v| v * factor).collect(),
        };
        self.push("scale", value, Op::Scale { a: ia, factor }, &[ia])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor {
            shape: self.shape_of(ia).to_vec(),
            data: self.data_of(ia).iter().map(|v| v + offset).collect(),
        };
        self.push("add_scalar", value, Op::AddScalar { a: ia }, &[ia])
    }

    /// Matrix product of `[m, k]` and `[k, n]` tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (sa, sb) = (self.shape_of(ia), self.shape_of(ib));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, self.data_of(ia), false, self.data_of(ib), false, &mut data, false);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        self.push("matmul", value, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = self.data_of(ia).iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { a: ia }, &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let data = self.data_of(ia);
        if data.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = data.iter().sum::<f64>() / data.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean { a: ia }, &[ia])
    }

    fn rows_cols(&self, op: &'static str, index: usize) -> Result<(usize, usize)> {
        let shape = self.shape_of(index);
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                detail: format!("expected a 2-D tensor, got shape {shape:?}"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Row sums of a `[r, c]` tensor, giving `[r]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = self.rows_cols("sum_rows", ia)?;
        let data: Vec<f64> = self
            .data_of(ia)
            .chunks_exact(cols.max(1))
            .map(|r| r.iter().sum())
            .take(rows)
            .collect();
        let data = if cols == 0 { vec![0.0; rows] } else { data };
        let value = Tensor {
            shape: vec![rows],
            data,
        };
        self.push("sum_rows", value, Op::SumRows { a: ia, cols }, &[ia])
    }

    /// Euclidean norm of each row of a `[r, c]` tensor, giving `[r]`.
    /// A zero row has norm zero and receives a zero (sub)gradient.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = self.rows_cols("row_norms", ia)?;
        let data: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            self.data_of(ia)
                .chunks_exact(cols)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let value = Tensor {
            shape: vec![rows],
            data,
        };
        self.push("row_norms", value, Op::RowNorms { a: ia, cols }, &[ia])
    }

    /// Adds a `[c]` bias to every row of a `[r, c]` tensor.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(bias)?;
        let (_, cols) = self.rows_cols("add_row_bias", ia)?;
        if self.shape_of(ib) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape_of(ia).to_vec(),
                rhs: self.shape_of(ib).to_vec(),
            });
        }
        let b = self.data_of(ib);
        let mut data = self.data_of(ia).to_vec();
        if cols > 0 {
            for row in data.chunks_exact_mut(cols) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        let value = Tensor {
            shape: self.shape_of(ia).to_vec(),
            data,
        };
        self.push("add_row_bias", value, Op::AddRowBias { a: ia, bias: ib, cols }, &[ia, ib])
    }

    /// Concatenates along the first axis. Trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let i0 = self.check(first)?;
        if self.shape_of(i0).is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "cannot concatenate scalars".into(),
            });
        }
        let tail = self.shape_of(i0)[1..].to_vec();
        let mut indices = Vec::with_capacity(parts.len());
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let ip = self.check(p)?;
            let s = self.shape_of(ip);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape_of(i0).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.data_of(ip));
            indices.push(ip);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor { shape, data };
        self.push("concat", value, Op::Concat { parts: indices.clone() }, &indices)
    }

    /// Rows `start..end` along the first axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.shape_of(ia);
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!("range {start}..{end} out of bounds for shape {shape:?}"),
            });
        }
        let row: usize = shape[1..].iter().product();
        let mut new_shape = shape.to_vec();
        new_shape[0] = end - start;
        let (offset, len) = (start * row, (end - start) * row);
        let value = Tensor {
            shape: new_shape,
            data: self.data_of(ia)[offset..offset + len].to_vec(),
        };
        self.push("slice", value, Op::Slice { a: ia, offset, len }, &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        if shape.iter().product::<usize>() != self.data_of(ia).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape_of(ia).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.data_of(ia).to_vec(),
        };
        self.push("reshape", value, Op::Reshape { a: ia }, &[ia])
    }

    /// Applies a linear operator whose adjoint drives the backward pass.
    pub fn linear(&mut self, a: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let ia = self.check(a)?;
        if self.shape_of(ia) != map.input_shape() {
            return Err(TensorError::ShapeMismatch {
                op: map.name(),
                lhs: map.input_shape().to_vec(),
                rhs: self.shape_of(ia).to_vec(),
            });
        }
        let data = map.apply(self.data_of(ia));
        let value = Tensor::new(map.output_shape().to_vec(), data)?;
        let name = map.name();
        self.push(name, value, Op::Linear { a: ia, map }, &[ia])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let loss_value = &self.nodes[il].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        let nodes = &self.nodes;

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], index: usize) -> Option<&'g mut Vec<f64>> {
            if !nodes[index].tracked {
                return None;
            }
            let len = nodes[index].value.data.len();
            Some(grads[index].get_or_insert_with(|| vec![0.0; len]))
        }

        for i in (0..=il).rev() {
            if !nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &nodes[i].value.data;
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::Binary { kind, a, b, mode } => {
                    let (a, b, mode, kind) = (*a, *b, *mode, *kind);
                    let da = &nodes[a].value.data;
                    let db = &nodes[b].value.data;
                    let av = |j: usize| match mode {
                        Broadcast::LeftScalar => da[0],
                        _ => da[j],
                    };
                    let bv = |j: usize| match mode {
                        Broadcast::RightScalar => db[0],
                        _ => db[j],
                    };
                    let left_scalar = matches!(mode, Broadcast::LeftScalar);
                    let right_scalar = matches!(mode, Broadcast::RightScalar);
                    if let Some(ga) = acc(&mut grads, nodes, a) {
                        for (j, gj) in g.iter().enumerate() {
                            let local = match kind {
                                BinaryKind::Add | BinaryKind::Sub => 1.0,
                                BinaryKind::Mul => bv(j),
                                BinaryKind::Div => 1.0 / bv(j),
                            };
                            ga[if left_scalar { 0 } else { j }] += gj * local;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, b) {
                        for (j, gj) in g.iter().enumerate() {
                            let local = match kind {
                                BinaryKind::Add => 1.0,
                                BinaryKind::Sub => -1.0,
                                BinaryKind::Mul => av(j),
                                BinaryKind::Div => -av(j) / (bv(j) * bv(j)),
                            };
                            gb[if right_scalar { 0 } else { j }] += gj * local;
                        }
                    }
                }
                Op::Unary { kind, a } => {
                    let (kind, a) = (*kind, *a);
                    let src = &nodes[a].value.data;
                    if let Some(ga) = acc(&mut grads, nodes, a) {
                        for j in 0..g.len() {
                            let local = match kind {
                                UnaryKind::Square => 2.0 * src[j],
                                UnaryKind::Sqrt => 0.5 / out[j],
                                UnaryKind::Ln => 1.0 / src[j],
                                UnaryKind::Sigmoid => out[j] * (1.0 - out[j]),
                                UnaryKind::Abs => {
                                    if src[j] > 0.0 {
                                        1.0
                                    } else if src[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            ga[j] += g[j] * local;
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let factor = *factor;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (x, gj) in ga.iter_mut().zip(&g) {
                            *x += gj * factor;
                        }
                    }
                }
                Op::AddScalar { a } | Op::Reshape { a } => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (x, gj) in ga.iter_mut().zip(&g) {
                            *x += gj;
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    let a_tracked = nodes[a].tracked;
                    let b_tracked = nodes[b].tracked;
                    if a_tracked {
                        let bd = &nodes[b].value.data;
                        let ga = acc(&mut grads, nodes, a).expect("tracked");
                        // dA = dC * B^T
                        gemm(m, n, k, &g, false, bd, true, ga, true);
                    }
                    if b_tracked {
                        let ad = &nodes[a].value.data;
                        let gb = acc(&mut grads, nodes, b).expect("tracked");
                        // dB = A^T * dC
                        gemm(k, m, n, ad, true, &g, false, gb, true);
                    }
                }
                Op::Sum { a } => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    }
                }
                Op::Mean { a } => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        let s = g[0] / ga.len() as f64;
                        for x in ga.iter_mut() {
                            *x += s;
                        }
                    }
                }
                Op::SumRows { a, cols } => {
                    let cols = *cols;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        if cols > 0 {
                            for (row, gj) in ga.chunks_exact_mut(cols).zip(&g) {
                                for x in row {
                                    *x += gj;
                                }
                            }
                        }
                    }
                }
                Op::RowNorms { a, cols } => {
                    let (a, cols) = (*a, *cols);
                    let src = &nodes[a].value.data;
                    if let Some(ga) = acc(&mut grads, nodes, a) {
                        if cols > 0 {
                            for (r, (row, gj)) in ga.chunks_exact_mut(cols).zip(&g).enumerate() {
                                let norm = out[r];
                                if norm > 0.0 {
                                    let s = gj / norm;
                                    for (x, v) in row.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                                        *x += s * v;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AddRowBias { a, bias, cols } => {
                    let (a, bias, cols) = (*a, *bias, *cols);
                    if let Some(ga) = acc(&mut grads, nodes, a) {
                        for (x, gj) in ga.iter_mut().zip(&g) {
                            *x += gj;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, bias) {
                        if cols > 0 {
                            for row in g.chunks_exact(cols) {
                                for (x, gj) in gb.iter_mut().zip(row) {
                                    *x += gj;
                                }
                            }
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.data.len();
                        if let Some(gp) = acc(&mut grads, nodes, p) {
                            for (x, gj) in gp.iter_mut().zip(&g[offset..offset + len]) {
                                *x += gj;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, offset, len } => {
                    let (offset, len) = (*offset, *len);
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (x, gj) in ga[offset..offset + len].iter_mut().zip(&g) {
                            *x += gj;
                        }
                    }
                }
                Op::Linear { a, map } => {
                    let back = map.adjoint(&g);
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (x, gj) in ga.iter_mut().zip(&back) {
                            *x += gj;
                        }
                    }
                }
            }
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(il + 1) {
            if matches!(node.op, Op::Leaf) {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                check_finite("backward", &data)?;
                out.insert(
                    i,
                    Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    },
                );
            }
        }
        for (i, node) in self.nodes.iter().enumerate().skip(il + 1) {
            if matches!(node.op, Op::Leaf) {
                out.insert(i, Tensor::zeros(&node.value.shape));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|analytic - numeric| / (|numeric| + 1e-12)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: format!("step must be positive, got {step}"),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).expect("leaf gradient").data().to_vec();

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let out = f(&mut t, v)?;
        let value = t.value(out).item().ok_or_else(|| TensorError::NonScalarLoss(t.value(out).shape.clone()))?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for j in 0..point.len() {
        let mut plus = point.clone();
        plus.data[j] += step;
        let mut minus = point.clone();
        minus.data[j] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[j] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
