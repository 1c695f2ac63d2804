use std::cell::{Cell, RefCell};

use super::tensor::{check_finite, numel, Tensor};
use crate::error::{Error, Result};

/// Guard for normalization and distance denominators.
pub const EPS_NORM: f64 = 1e-8;
/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// sqrt(2/pi), the constant of the tanh approximation to gelu.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation to gelu.
pub const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanPool(Var),
    L2Normalize(Var, Vec<f64>),
    Dot(Var, Var),
    Norm(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding(Var, Vec<u32>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    MaskedFill(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, so parents
/// always precede children and a single reverse sweep suffices.
///
/// Operations take `&self` so that expressions can nest; the tape is not
/// `Sync` and belongs to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c (+)= a * b` for row-major `a: m x k`, `b: k x n`, with optional
/// transposed views expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that stay within `a`, `b` and `c`,
    // whose lengths are checked by the callers against m, k, n.
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn finish(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are finite")
    }

    /// Records a leaf. It participates in the gradient iff the tensor
    /// requires grad.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that always participates in the gradient.
    pub fn variable(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, true))
    }

    /// Records a leaf that never participates in the gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Copy of `v` cut off from the gradient.
    pub fn detach(&self, v: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            (nodes[v.0].shape.clone(), nodes[v.0].value.clone())
        };
        self.push(shape, value, Op::Leaf, false)
    }

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa == sb {
            Ok(Bcast::Same)
        } else if numel(sb) == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            Ok(Bcast::Row)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            })
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = self.bcast_kind(name, a, b)?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let value: Vec<f64> = match kind {
                Bcast::Same => na
                    .value
                    .iter()
                    .zip(&nb.value)
                    .map(|(x, y)| f(*x, *y))
                    .collect(),
                Bcast::Scalar => na.value.iter().map(|x| f(*x, nb.value[0])).collect(),
                Bcast::Row => {
                    let cols = nb.value.len();
                    na.value
                        .iter()
                        .enumerate()
                        .map(|(i, x)| f(*x, nb.value[i % cols]))
                        .collect()
                }
            };
            (na.shape.clone(), value)
        };
        let ng = self.needs(a) || self.needs(b);
        self.finish(name, shape, value, make(a, b, kind), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.iter().map(|x| f(*x)).collect())
        };
        let ng = self.needs(a);
        self.finish(name, shape, value, op, ng)
    }

    pub fn scalar_mul(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scalar_mul", a, |x| c * x, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scalar_mul(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated gelu: `0.5 x (1 + tanh(GELU_C (x + GELU_A x^3)))`.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.with_value(a, |v| v.iter().sum::<f64>());
        let ng = self.needs(a);
        self.finish("sum", vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = self.with_value(a, |v| v.iter().sum::<f64>() / v.len() as f64);
        let ng = self.needs(a);
        self.finish("mean", vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Mean over rows: `[m, n] -> [n]`.
    pub fn mean_pool(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (m, n) = rows_cols(&shape);
        let value = self.with_value(a, |v| {
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, x) in out.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
            out
        });
        let ng = self.needs(a);
        self.finish("mean_pool", vec![n], value, Op::MeanPool(a), ng)
    }

    /// Divides every row by its euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (m, n) = rows_cols(&shape);
        let (norms, value) = self.with_value(a, |v| {
            let mut norms = Vec::with_capacity(m);
            let mut out = Vec::with_capacity(v.len());
            for r in 0..m {
                let row = &v[r * n..(r + 1) * n];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                norms.push(norm);
                out.extend(row.iter().map(|x| x / norm));
            }
            (norms, out)
        });
        if let Some(&bad) = norms.iter().find(|&&nm| nm <= EPS_NORM) {
            return Err(Error::Degenerate {
                op: "l2_normalize",
                norm: bad,
                eps: EPS_NORM,
            });
        }
        let ng = self.needs(a);
        self.finish("l2_normalize", shape, value, Op::L2Normalize(a, norms), ng)
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: sa,
                right: sb,
            });
        }
        let s = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let ng = self.needs(a) || self.needs(b);
        self.finish("dot", vec![1], vec![s], Op::Dot(a, b), ng)
    }

    /// Euclidean norm of the whole tensor.
    pub fn euclidean_norm(&self, a: Var) -> Result<Var> {
        let norm = self.with_value(a, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
        if norm <= EPS_NORM {
            return Err(Error::Degenerate {
                op: "euclidean_norm",
                norm,
                eps: EPS_NORM,
            });
        }
        let ng = self.needs(a);
        self.finish("euclidean_norm", vec![1], vec![norm], Op::Norm(a), ng)
    }

    /// `a @ b` for `a: [m, k]` (or `[k]`, treated as one row) and `b: [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "matmul",
                    shape: sa,
                    reason: "expected rank 1 or 2".into(),
                })
            }
        };
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let n = sb[1];
        let mut value = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(
                m,
                k,
                n,
                &nodes[a.0].value,
                (k as isize, 1),
                &nodes[b.0].value,
                (n as isize, 1),
                &mut value,
                false,
            );
        }
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let ng = self.needs(a) || self.needs(b);
        self.finish("matmul", shape, value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: sa,
                reason: "expected rank 2".into(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let value = self.with_value(a, |v| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = v[i * n + j];
                }
            }
            out
        });
        let ng = self.needs(a);
        self.finish("transpose", vec![n, m], value, Op::Transpose(a), ng)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (m, n) = rows_cols(&shape);
        let value = self.with_value(a, |v| {
            let mut out = Vec::with_capacity(v.len());
            for r in 0..m {
                let row = &v[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
            out
        });
        let ng = self.needs(a);
        self.finish("log_softmax", shape, value, Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ls = self.log_softmax(a)?;
        self.exp(ls)
    }

    /// Row-wise layer normalization with affine `gain` and `bias` of width
    /// equal to the last axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let (m, n) = rows_cols(&shape);
        for p in [gain, bias] {
            let sp = self.shape(p);
            if numel(&sp) != n {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: shape,
                    right: sp,
                });
            }
        }
        let (xhat, inv_std, value) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let (g, b) = (&nodes[gain.0].value, &nodes[bias.0].value);
            let mut xhat = Vec::with_capacity(v.len());
            let mut inv_std = Vec::with_capacity(m);
            let mut out = Vec::with_capacity(v.len());
            for r in 0..m {
                let row = &v[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                for (j, t) in row.iter().enumerate() {
                    let h = (t - mean) * is;
                    xhat.push(h);
                    out.push(g[j] * h + b[j]);
                }
            }
            (xhat, inv_std, out)
        };
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.finish(
            "layer_norm",
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Gathers rows of `table: [V, d]` for each id, giving `[ids.len(), d]`.
    pub fn embedding_lookup(&self, table: Var, ids: &[u32]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding_lookup",
                shape,
                reason: "table must be rank 2".into(),
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "embedding_lookup",
                shape,
                reason: "no ids".into(),
            });
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::OutOfVocabulary { id, vocab });
        }
        let value = self.with_value(table, |v| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                let r = id as usize;
                out.extend_from_slice(&v[r * d..(r + 1) * d]);
            }
            out
        });
        let ng = self.needs(table);
        self.finish(
            "embedding_lookup",
            vec![ids.len(), d],
            value,
            Op::Embedding(table, ids.to_vec()),
            ng,
        )
    }

    /// Stacks rows. Rank-1 inputs count as a single row.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "nothing to concatenate".into(),
            });
        }
        let first = self.shape(parts[0]);
        let cols = *first.last().unwrap();
        let mut rows = 0;
        let mut value = Vec::new();
        let mut ng = false;
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let node = &nodes[p.0];
                if node.shape.len() > 2 || *node.shape.last().unwrap() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: first,
                        right: node.shape.clone(),
                    });
                }
                rows += node.value.len() / cols;
                value.extend_from_slice(&node.value);
                ng |= node.needs_grad;
            }
        }
        self.finish(
            "concat",
            vec![rows, cols],
            value,
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Contiguous view `[offset, offset + numel(shape))` of the flat values,
    /// reinterpreted with `shape`.
    pub fn slice_flat(&self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let len = numel(shape);
        if len == 0 || offset + len > numel(&sa) {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("range {offset}..{} with shape {shape:?}", offset + len),
            });
        }
        let value = self.with_value(a, |v| v[offset..offset + len].to_vec());
        let ng = self.needs(a);
        self.finish("slice", shape.to_vec(), value, Op::Slice(a, offset), ng)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        let (_, n) = rows_cols(&sa);
        if end <= start {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("empty row range {start}..{end}"),
            });
        }
        self.slice_flat(a, start * n, &[end - start, n])
    }

    /// Row `i` as a rank-1 tensor.
    pub fn row(&self, a: Var, i: usize) -> Result<Var> {
        let sa = self.shape(a);
        let (_, n) = rows_cols(&sa);
        self.slice_flat(a, i * n, &[n])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if numel(&sa) != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: sa,
                right: shape.to_vec(),
            });
        }
        self.slice_flat(a, 0, shape)
    }

    /// Picks `a[r, ids[r]]` for every row, giving `[rows]`.
    pub fn gather(&self, a: Var, ids: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let (m, n) = rows_cols(&sa);
        if ids.len() != m {
            return Err(Error::LengthMismatch {
                op: "gather",
                left: m,
                right: ids.len(),
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= n) {
            return Err(Error::OutOfVocabulary {
                id: id as u32,
                vocab: n,
            });
        }
        let value = self.with_value(a, |v| {
            ids.iter().enumerate().map(|(r, &c)| v[r * n + c]).collect()
        });
        let ng = self.needs(a);
        self.finish("gather", vec![m], value, Op::Gather(a, ids.to_vec()), ng)
    }

    /// Replaces entries where `mask` is true by `fill`; those entries receive
    /// no gradient.
    pub fn masked_fill(&self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let sa = self.shape(a);
        if mask.len() != numel(&sa) {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                left: sa,
                right: vec![mask.len()],
            });
        }
        let value = self.with_value(a, |v| {
            v.iter()
                .zip(mask)
                .map(|(x, &m)| if m { fill } else { *x })
                .collect()
        });
        let ng = self.needs(a);
        self.finish(
            "masked_fill",
            sa,
            value,
            Op::MaskedFill(a, mask.to_vec()),
            ng,
        )
    }

    /// Reverse sweep from a single-element `loss`. The graph can be swept
    /// once; a second call returns [`Error::StaleGraph`] until [`Graph::reset`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::StaleGraph);
        }
        let nodes = self.nodes.borrow();
        let ln = nodes.get(loss.0).ok_or(Error::StaleGraph)?;
        if ln.value.len() != 1 {
            return Err(Error::NotScalar {
                shape: ln.shape.clone(),
            });
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if ln.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            backprop(&nodes, node, &gy, &mut grads);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn reduce_bcast(kind: Bcast, contrib: impl Fn(usize) -> f64, len: usize, target: &mut [f64]) {
    match kind {
        Bcast::Same => target
            .iter_mut()
            .enumerate()
            .for_each(|(i, t)| *t += contrib(i)),
        Bcast::Scalar => target[0] += (0..len).map(&contrib).sum::<f64>(),
        Bcast::Row => {
            let cols = target.len();
            for i in 0..len {
                target[i % cols] += contrib(i);
            }
        }
    }
}

fn bval(kind: Bcast, v: &[f64], i: usize) -> f64 {
    match kind {
        Bcast::Same => v[i],
        Bcast::Scalar => v[0],
        Bcast::Row => v[i % v.len()],
    }
}

fn backprop(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    let n = gy.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, k) | Op::Sub(a, b, k) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                reduce_bcast(*k, |i| sign * gy[i], n, gb);
            }
        }
        Op::Mul(a, b, k) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += gy[i] * bval(*k, vb, i);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                reduce_bcast(*k, |i| gy[i] * va[i], n, gb);
            }
        }
        Op::Div(a, b, k) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += gy[i] / bval(*k, vb, i);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                reduce_bcast(
                    *k,
                    |i| {
                        let d = bval(*k, vb, i);
                        -gy[i] * va[i] / (d * d)
                    },
                    n,
                    gb,
                );
            }
        }
        Op::ScalarMul(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k) = if sa.len() == 1 {
                (1, sa[0])
            } else {
                (sa[0], sa[1])
            };
            let nn = sb[1];
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                // dA = dY B^T
                gemm(
                    m,
                    nn,
                    k,
                    gy,
                    (nn as isize, 1),
                    vb,
                    (1, nn as isize),
                    ga,
                    true,
                );
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // dB = A^T dY
                gemm(
                    k,
                    m,
                    nn,
                    va,
                    (1, k as isize),
                    gy,
                    (nn as isize, 1),
                    gb,
                    true,
                );
            }
        }
        Op::Transpose(a) => {
            let (m, nn) = (node.shape[1], node.shape[0]);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..nn {
                        ga[i * nn + j] += gy[j * m + i];
                    }
                }
            }
        }
        Op::Relu(a) => {
            let va = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    if va[i] > 0.0 {
                        ga[i] += gy[i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let va = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += gy[i] * gelu_grad(va[i]);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += gy[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            let va = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += gy[i] / va[i];
                }
            }
        }
        Op::Square(a) => {
            let va = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += 2.0 * va[i] * gy[i];
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    ga[i] += 0.5 * gy[i] / y[i];
                }
            }
        }
        Op::Abs(a) => {
            let va = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    let s = if va[i] > 0.0 {
                        1.0
                    } else if va[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += s * gy[i];
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|g| *g += gy[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = gy[0] / ga.len() as f64;
                ga.iter_mut().for_each(|g| *g += c);
            }
        }
        Op::MeanPool(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let cols = n;
                let rows = ga.len() / cols;
                for r in 0..rows {
                    for j in 0..cols {
                        ga[r * cols + j] += gy[j] / rows as f64;
                    }
                }
            }
        }
        Op::L2Normalize(a, norms) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let cols = *node.shape.last().unwrap();
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gy[r * cols..(r + 1) * cols];
                    let proj: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += (gr[j] - yr[j] * proj) / norm;
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(vb).for_each(|(g, x)| *g += gy[0] * x);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(va).for_each(|(g, x)| *g += gy[0] * x);
            }
        }
        Op::Norm(a) => {
            let va = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = gy[0] / y[0];
                ga.iter_mut().zip(va).for_each(|(g, x)| *g += c * x);
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let cols = *node.shape.last().unwrap();
                for r in 0..n / cols {
                    let gr = &gy[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for j in 0..cols {
                        ga[r * cols + j] += gr[j] - y[r * cols + j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let cols = *node.shape.last().unwrap();
            let rows = n / cols;
            let g = &nodes[gain.0].value;
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..rows {
                    let off = r * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        let d = gy[off + j] * g[j];
                        mean_d += d;
                        mean_dx += d * xhat[off + j];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for j in 0..cols {
                        let d = gy[off + j] * g[j];
                        gx[off + j] += inv_std[r] * (d - mean_d - xhat[off + j] * mean_dx);
                    }
                }
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                for i in 0..n {
                    gg[i % cols] += gy[i] * xhat[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for i in 0..n {
                    gb[i % cols] += gy[i];
                }
            }
        }
        Op::Embedding(table, ids) => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = node.shape[1];
                for (r, &id) in ids.iter().enumerate() {
                    let base = id as usize * d;
                    for j in 0..d {
                        gt[base + j] += gy[r * d + j];
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, grads, *p) {
                    gp.iter_mut()
                        .zip(&gy[off..off + len])
                        .for_each(|(g, d)| *g += d);
                }
                off += len;
            }
        }
        Op::Slice(a, offset) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga[*offset..*offset + n]
                    .iter_mut()
                    .zip(gy)
                    .for_each(|(g, d)| *g += d);
            }
        }
        Op::Gather(a, ids) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let cols = ga.len() / ids.len();
                for (r, &c) in ids.iter().enumerate() {
                    ga[r * cols + c] += gy[r];
                }
            }
        }
        Op::MaskedFill(a, mask) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    if !mask[i] {
                        ga[i] += gy[i];
                    }
                }
            }
        }
    }
}
