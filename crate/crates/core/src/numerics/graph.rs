//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation executed through a [`Var`] handle in
//! execution order, which is already a topological order. [`Var::backward`]
//! walks the tape once in reverse and accumulates vector-Jacobian products.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::{NumericsError, ParamStore, Tensor};

/// Logit used for masked positions before a softmax.
pub const MASKED_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    Transpose {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    IndexSelect {
        a: usize,
        indices: Vec<usize>,
        row: usize,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    Sum(usize),
    MseMean(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Record of executed operations for one forward pass.
///
/// A graph is single-use: build it, call [`Var::backward`] at most once,
/// read gradients, drop it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
    differentiated: Cell<bool>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            false,
        )
    }

    /// Records every parameter of `store` as a leaf, in store order.
    ///
    /// With `track = false` the leaves are constants and nothing downstream
    /// is differentiable, which is what inference wants.
    pub fn bind_params(&self, store: &ParamStore, track: bool) -> Vec<Var<'_>> {
        store
            .tensors()
            .map(|t| {
                if track {
                    self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
                } else {
                    self.constant(t)
                }
            })
            .collect()
    }

    /// Gradient of the last `backward` call with respect to `var`.
    ///
    /// Differentiable leaves that the loss does not depend on report zeros.
    /// Returns `None` for untracked values or before `backward` ran.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !node.tracked {
            return None;
        }
        let data = grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.data.len()]);
        Some(Tensor::new(&node.shape, data).expect("gradient shape"))
    }

    /// Adds the gradients of bound parameters into the store's buffers.
    pub fn accumulate_into(
        &self,
        params: &[Var<'_>],
        store: &mut ParamStore,
        scale: f64,
    ) -> Result<(), NumericsError> {
        for (var, tensor) in params.iter().zip(store.tensors_mut()) {
            if let Some(g) = self.grad(*var) {
                tensor.accumulate_grad(g.data(), scale)?;
            }
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node(&self) -> Ref<'g, Node> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().tracked
    }

    /// Copies the current value out of the graph.
    pub fn value(&self) -> Tensor {
        let n = self.node();
        Tensor::new(&n.shape, n.data.clone()).expect("node shape")
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        let n = self.node();
        assert_eq!(n.data.len(), 1, "item() on non-scalar {:?}", n.shape);
        n.data[0]
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands recorded on different graphs"
        );
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let (shape, data, tracked) = {
            let n = self.node();
            (
                n.shape.clone(),
                n.data.iter().map(|&x| f(x)).collect(),
                n.tracked,
            )
        };
        self.graph.push(shape, data, op, tracked)
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>, NumericsError> {
        self.same_graph(&other);
        let (shape, data, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if !suffix_broadcast(&a.shape, &b.shape) {
                return Err(NumericsError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let bl = b.data.len();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data[i % bl]))
                .collect();
            (a.shape.clone(), data, a.tracked || b.tracked)
        };
        Ok(self.graph.push(shape, data, op, tracked))
    }

    /// Elementwise sum; `other` may have a shape equal to a suffix of `self`'s
    /// and is then repeated over the leading dimensions.
    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.unary(|x| x + s, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self).expect("same shape")
    }

    /// `[m, n] x [n, p] -> [m, p]`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.same_graph(&other);
        let (data, m, n, p, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, n, p) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * p];
            gemm(&a.data, &b.data, &mut out, m, n, p);
            (out, m, n, p, a.tracked || b.tracked)
        };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            m,
            n,
            p,
        };
        Ok(self.graph.push(vec![m, p], data, op, tracked))
    }

    /// `[B, m, n] x [B, n, p] -> [B, m, p]`.
    pub fn bmm(&self, other: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.same_graph(&other);
        let (data, batch, m, n, p, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 3
                || b.shape.len() != 3
                || a.shape[0] != b.shape[0]
                || a.shape[2] != b.shape[1]
            {
                return Err(NumericsError::ShapeMismatch {
                    op: "bmm",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (batch, m, n, p) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut out = vec![0.0; batch * m * p];
            for bi in 0..batch {
                gemm(
                    &a.data[bi * m * n..(bi + 1) * m * n],
                    &b.data[bi * n * p..(bi + 1) * n * p],
                    &mut out[bi * m * p..(bi + 1) * m * p],
                    m,
                    n,
                    p,
                );
            }
            (out, batch, m, n, p, a.tracked || b.tracked)
        };
        let op = Op::BatchMatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            n,
            p,
        };
        Ok(self.graph.push(vec![batch, m, p], data, op, tracked))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'g>, NumericsError> {
        let (shape, data, batch, rows, cols, tracked) = {
            let n = self.node();
            let r = n.shape.len();
            if r < 2 {
                return Err(NumericsError::Rank {
                    op: "transpose",
                    shape: n.shape.clone(),
                });
            }
            let (rows, cols) = (n.shape[r - 2], n.shape[r - 1]);
            let batch = n.data.len() / (rows * cols);
            let mut out = vec![0.0; n.data.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[off + j * rows + i] = n.data[off + i * cols + j];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.swap(r - 2, r - 1);
            (shape, out, batch, rows, cols, n.tracked)
        };
        let op = Op::Transpose {
            a: self.id,
            batch,
            rows,
            cols,
        };
        Ok(self.graph.push(shape, data, op, tracked))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>, NumericsError> {
        let (data, tracked) = {
            let n = self.node();
            if shape.iter().product::<usize>() != n.data.len() || shape.contains(&0) {
                return Err(NumericsError::ShapeMismatch {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (n.data.clone(), n.tracked)
        };
        Ok(self
            .graph
            .push(shape.to_vec(), data, Op::Reshape(self.id), tracked))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>, NumericsError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { op, axis, shape });
        }
        Ok(shape)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>, NumericsError> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = lanes(&shape, axis);
        let (data, tracked) = {
            let n = self.node();
            let mut out = vec![0.0; n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len)
                        .map(|a| n.data[idx(a)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for a in 0..len {
                        let e = (n.data[idx(a)] - max).exp();
                        out[idx(a)] = e;
                        sum += e;
                    }
                    for a in 0..len {
                        out[idx(a)] /= sum;
                    }
                }
            }
            (out, n.tracked)
        };
        let op = Op::Softmax {
            a: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.graph.push(shape, data, op, tracked))
    }

    /// Normalises each slice along `axis` to zero mean and unit variance
    /// (population variance, epsilon 1e-5), then applies `gain` and `bias`,
    /// both of length `shape[axis]`.
    pub fn layer_norm(
        &self,
        gain: Var<'g>,
        bias: Var<'g>,
        axis: usize,
    ) -> Result<Var<'g>, NumericsError> {
        self.same_graph(&gain);
        self.same_graph(&bias);
        let shape = self.check_axis("layer_norm", axis)?;
        let (outer, len, inner) = lanes(&shape, axis);
        let (data, xhat, rstd, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            for p in [g, b] {
                if p.shape != [len] {
                    return Err(NumericsError::ShapeMismatch {
                        op: "layer_norm",
                        lhs: shape.clone(),
                        rhs: p.shape.clone(),
                    });
                }
            }
            let mut out = vec![0.0; x.data.len()];
            let mut xhat = vec![0.0; x.data.len()];
            let mut rstd = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let mean = (0..len).map(|a| x.data[idx(a)]).sum::<f64>() / len as f64;
                    let var = (0..len)
                        .map(|a| (x.data[idx(a)] - mean).powi(2))
                        .sum::<f64>()
                        / len as f64;
                    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    rstd[o * inner + i] = r;
                    for a in 0..len {
                        let h = (x.data[idx(a)] - mean) * r;
                        xhat[idx(a)] = h;
                        out[idx(a)] = h * g.data[a] + b.data[a];
                    }
                }
            }
            (out, xhat, rstd, x.tracked || g.tracked || b.tracked)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            outer,
            len,
            inner,
            xhat,
            rstd,
        };
        Ok(self.graph.push(shape, data, op, tracked))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        let base = first.check_axis("concat", axis)?;
        let graph = first.graph;
        let (shape, data, outer, lens, inner, tracked) = {
            let nodes = graph.nodes.borrow();
            let mut lens = Vec::with_capacity(parts.len());
            for p in parts {
                first.same_graph(p);
                let s = &nodes[p.id].shape;
                let ok = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !ok {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.clone(),
                    });
                }
                lens.push(s[axis]);
            }
            let (outer, _, inner) = lanes(&base, axis);
            let total: usize = lens.iter().sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (p, &l) in parts.iter().zip(&lens) {
                    let src = &nodes[p.id].data;
                    out.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let tracked = parts.iter().any(|p| nodes[p.id].tracked);
            (shape, out, outer, lens, inner, tracked)
        };
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            outer,
            lens,
            inner,
        };
        Ok(graph.push(shape, data, op, tracked))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>, NumericsError> {
        let shape = self.check_axis("narrow", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(NumericsError::Range {
                op: "narrow",
                start,
                len,
                shape,
            });
        }
        let (outer, full, inner) = lanes(&shape, axis);
        let (data, tracked) = {
            let n = self.node();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let off = (o * full + start) * inner;
                out.extend_from_slice(&n.data[off..off + len * inner]);
            }
            (out, n.tracked)
        };
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Narrow {
            a: self.id,
            outer,
            full,
            start,
            len,
            inner,
        };
        Ok(self.graph.push(out_shape, data, op, tracked))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g>>, NumericsError> {
        let shape = self.check_axis("split", axis)?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(NumericsError::ShapeMismatch {
                op: "split",
                lhs: shape,
                rhs: sizes.to_vec(),
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    /// Gathers slices along the first axis; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'g>, NumericsError> {
        let shape = self.check_axis("index_select", 0)?;
        if indices.is_empty() {
            return Err(NumericsError::Empty { op: "index_select" });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(NumericsError::Range {
                op: "index_select",
                start: bad,
                len: 1,
                shape,
            });
        }
        let row: usize = shape[1..].iter().product();
        let (data, tracked) = {
            let n = self.node();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                out.extend_from_slice(&n.data[i * row..(i + 1) * row]);
            }
            (out, n.tracked)
        };
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let op = Op::IndexSelect {
            a: self.id,
            indices: indices.to_vec(),
            row,
        };
        Ok(self.graph.push(out_shape, data, op, tracked))
    }

    /// Replaces entries whose mask is `true` with `value`. `mask` has the
    /// length of a suffix of the shape and is repeated over leading dims.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Var<'g>, NumericsError> {
        let (shape, data, tracked) = {
            let n = self.node();
            if mask.is_empty() || !n.data.len().is_multiple_of(mask.len()) {
                return Err(NumericsError::ShapeMismatch {
                    op: "masked_fill",
                    lhs: n.shape.clone(),
                    rhs: vec![mask.len()],
                });
            }
            let ml = mask.len();
            let data = n
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| if mask[i % ml] { value } else { x })
                .collect();
            (n.shape.clone(), data, n.tracked)
        };
        let op = Op::MaskedFill {
            a: self.id,
            mask: mask.to_vec(),
        };
        Ok(self.graph.push(shape, data, op, tracked))
    }

    pub fn sum(&self) -> Var<'g> {
        let (s, tracked) = {
            let n = self.node();
            (n.data.iter().sum::<f64>(), n.tracked)
        };
        self.graph.push(vec![1], vec![s], Op::Sum(self.id), tracked)
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean of squared elementwise differences; shapes must match exactly.
    pub fn mse_mean(&self, other: Var<'g>) -> Result<Var<'g>, NumericsError> {
        self.same_graph(&other);
        let (v, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(NumericsError::ShapeMismatch {
                    op: "mse_mean",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let s: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            (s / a.data.len() as f64, a.tracked || b.tracked)
        };
        Ok(self
            .graph
            .push(vec![1], vec![v], Op::MseMean(self.id, other.id), tracked))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g>, NumericsError> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let classes = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NumericsError::Range {
                op: "cross_entropy",
                start: bad,
                len: 1,
                shape,
            });
        }
        let (loss, probs, tracked) = {
            let n = self.node();
            let mut probs = vec![0.0; n.data.len()];
            let mut loss = 0.0;
            for (b, &t) in targets.iter().enumerate() {
                let row = &n.data[b * classes..(b + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for c in 0..classes {
                    probs[b * classes + c] = (row[c] - lse).exp();
                }
                loss += lse - row[t];
            }
            (loss / targets.len() as f64, probs, n.tracked)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
            classes,
        };
        Ok(self.graph.push(vec![1], vec![loss], op, tracked))
    }

    /// Reverse pass from this scalar. Populates gradients for every tracked
    /// node; may be called once per graph.
    pub fn backward(&self) -> Result<(), NumericsError> {
        let graph = self.graph;
        if graph.differentiated.get() {
            return Err(NumericsError::AlreadyDifferentiated);
        }
        let nodes = graph.nodes.borrow();
        let root = &nodes[self.id];
        if root.data.len() != 1 {
            return Err(NumericsError::NonScalarLoss(root.shape.clone()));
        }
        if !root.tracked {
            return Err(NumericsError::Detached);
        }
        graph.differentiated.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *graph.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

/// `out += a[m,n] * b[n,p]`.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,n] * b[p,n]^T`.
fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            out[i * p + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[m,n]^T * b[m,p]`.
fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let tracked = |i: usize| nodes[i].tracked;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if tracked(a) {
                add_into(&mut grads[a], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            if tracked(b) {
                let bl = nodes[b].data.len();
                add_into(&mut grads[b], bl, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bl] += sign * y;
                    }
                });
            }
        }
        &Op::Mul(a, b) => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            let bl = bd.len();
            if tracked(a) {
                add_into(&mut grads[a], g.len(), |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bd[i % bl];
                    }
                });
            }
            if tracked(b) {
                add_into(&mut grads[b], bl, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bl] += y * ad[i];
                    }
                });
            }
        }
        &Op::Scale(a, s) => add_into(&mut grads[a], g.len(), |ga| {
            ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
        }),
        &Op::AddScalar(a) | &Op::Reshape(a) => add_into(&mut grads[a], g.len(), |ga| {
            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
        }),
        &Op::Relu(a) => {
            let ad = &nodes[a].data;
            add_into(&mut grads[a], g.len(), |ga| {
                for i in 0..g.len() {
                    if ad[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            })
        }
        &Op::Sigmoid(a) => {
            let y = &node.data;
            add_into(&mut grads[a], g.len(), |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            })
        }
        &Op::Tanh(a) => {
            let y = &node.data;
            add_into(&mut grads[a], g.len(), |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            })
        }
        &Op::MatMul { a, b, m, n, p } => {
            if tracked(a) {
                let bd = &nodes[b].data;
                add_into(&mut grads[a], m * n, |ga| gemm_bt(g, bd, ga, m, p, n));
            }
            if tracked(b) {
                let ad = &nodes[a].data;
                add_into(&mut grads[b], n * p, |gb| gemm_at(ad, g, gb, m, n, p));
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            n,
            p,
        } => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            if tracked(a) {
                add_into(&mut grads[a], batch * m * n, |ga| {
                    for bi in 0..batch {
                        gemm_bt(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &bd[bi * n * p..(bi + 1) * n * p],
                            &mut ga[bi * m * n..(bi + 1) * m * n],
                            m,
                            p,
                            n,
                        );
                    }
                });
            }
            if tracked(b) {
                add_into(&mut grads[b], batch * n * p, |gb| {
                    for bi in 0..batch {
                        gemm_at(
                            &ad[bi * m * n..(bi + 1) * m * n],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[bi * n * p..(bi + 1) * n * p],
                            m,
                            n,
                            p,
                        );
                    }
                });
            }
        }
        &Op::Transpose {
            a,
            batch,
            rows,
            cols,
        } => {
            add_into(&mut grads[a], g.len(), |ga| {
                for bi in 0..batch {
                    let off = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            });
        }
        &Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = &node.data;
            add_into(&mut grads[a], g.len(), |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            outer,
            len,
            inner,
            xhat,
            rstd,
        } => {
            let (x, gain, bias, outer, len, inner) = (*x, *gain, *bias, *outer, *len, *inner);
            let gd = &nodes[gain].data;
            if tracked(gain) {
                add_into(&mut grads[gain], len, |gg| {
                    for (i, y) in g.iter().enumerate() {
                        gg[(i / inner) % len] += y * xhat[i];
                    }
                });
            }
            if tracked(bias) {
                add_into(&mut grads[bias], len, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[(i / inner) % len] += y;
                    }
                });
            }
            if tracked(x) {
                add_into(&mut grads[x], g.len(), |gx| {
                    let nf = len as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let r = rstd[o * inner + i];
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for k in 0..len {
                                let d = g[idx(k)] * gd[k];
                                mean_d += d;
                                mean_dx += d * xhat[idx(k)];
                            }
                            mean_d /= nf;
                            mean_dx /= nf;
                            for k in 0..len {
                                let d = g[idx(k)] * gd[k];
                                gx[idx(k)] += r * (d - mean_d - xhat[idx(k)] * mean_dx);
                            }
                        }
                    }
                });
            }
        }
        Op::Concat {
            inputs,
            outer,
            lens,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&p, &l) in inputs.iter().zip(lens) {
                if tracked(p) {
                    add_into(&mut grads[p], outer * l * inner, |gp| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * l * inner;
                            for k in 0..l * inner {
                                gp[dst + k] += g[src + k];
                            }
                        }
                    });
                }
                offset += l;
            }
        }
        &Op::Narrow {
            a,
            outer,
            full,
            start,
            len,
            inner,
        } => {
            add_into(&mut grads[a], outer * full * inner, |ga| {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        ga[dst + k] += g[src + k];
                    }
                }
            });
        }
        Op::IndexSelect { a, indices, row } => {
            let (a, row) = (*a, *row);
            let n = nodes[a].data.len();
            add_into(&mut grads[a], n, |ga| {
                for (r, &i) in indices.iter().enumerate() {
                    for k in 0..row {
                        ga[i * row + k] += g[r * row + k];
                    }
                }
            });
        }
        Op::MaskedFill { a, mask } => {
            let ml = mask.len();
            add_into(&mut grads[*a], g.len(), |ga| {
                for (i, y) in g.iter().enumerate() {
                    if !mask[i % ml] {
                        ga[i] += y;
                    }
                }
            });
        }
        &Op::Sum(a) => {
            let n = nodes[a].data.len();
            add_into(&mut grads[a], n, |ga| {
                ga.iter_mut().for_each(|x| *x += g[0])
            });
        }
        &Op::MseMean(a, b) => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            let c = 2.0 * g[0] / ad.len() as f64;
            if tracked(a) {
                add_into(&mut grads[a], ad.len(), |ga| {
                    for i in 0..ad.len() {
                        ga[i] += c * (ad[i] - bd[i]);
                    }
                });
            }
            if tracked(b) {
                add_into(&mut grads[b], bd.len(), |gb| {
                    for i in 0..bd.len() {
                        gb[i] -= c * (ad[i] - bd[i]);
                    }
                });
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            classes,
        } => {
            let scale = g[0] / targets.len() as f64;
            add_into(&mut grads[*logits], probs.len(), |gl| {
                for (b, &t) in targets.iter().enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            });
        }
    }
}
