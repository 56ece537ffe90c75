//! Reverse-mode autodiff on a record-and-replay tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! outputs); [`Tape::backward`] walks the record once in reverse,
//! accumulating gradients into parents. A tape is confined to one thread;
//! kernels may parallelize internally over output rows.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// View passed to backward rules.
struct BackCtx<'a, E: Element> {
    values: &'a [Tensor<E>],
    parents: &'a [usize],
    out: usize,
    grad: &'a Tensor<E>,
    needs: &'a [bool],
}

impl<'a, E: Element> BackCtx<'a, E> {
    fn input(&self, i: usize) -> &Tensor<E> {
        &self.values[self.parents[i]]
    }
    fn output(&self) -> &Tensor<E> {
        &self.values[self.out]
    }
    fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Each rule returns one gradient slot per parent; `None` skips a parent
/// that does not require gradients.
type BackFn<E> = Box<dyn Fn(&BackCtx<'_, E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E: Element> {
    parents: Vec<usize>,
    back: Option<BackFn<E>>,
    /// Leaf explicitly marked as a differentiation target.
    leaf_requires: bool,
    /// True when any ancestor (or the node itself) requires gradients.
    needs: bool,
}

struct TapeInner<E: Element> {
    values: Vec<Tensor<E>>,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

pub struct Tape<E: Element = f32> {
    inner: RefCell<TapeInner<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                nodes: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input node. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(
            value,
            Vec::new(),
            None,
            requires_grad,
            requires_grad,
        )
    }

    /// Constant input: participates in forward math, never in gradients.
    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Tensor<E> {
        self.inner.borrow().values[var.0].clone()
    }

    pub fn shape_of(&self, var: Var) -> Vec<usize> {
        self.inner.borrow().values[var.0].shape().to_vec()
    }

    /// Gradient of a leaf after [`Tape::backward`]. `None` when the leaf
    /// did not require gradients or backward has not run.
    pub fn grad(&self, var: Var) -> Option<Tensor<E>> {
        self.inner.borrow().grads[var.0].clone()
    }

    /// Like [`Tape::grad`] but moves the buffer out of the tape.
    pub fn take_grad(&self, var: Var) -> Option<Tensor<E>> {
        self.inner.borrow_mut().grads[var.0].take()
    }

    fn push(
        &self,
        value: Tensor<E>,
        parents: Vec<usize>,
        back: Option<BackFn<E>>,
        leaf_requires: bool,
        needs: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.grads.push(None);
        inner.nodes.push(Node {
            parents,
            back: if needs { back } else { None },
            leaf_requires,
            needs,
        });
        Var(id)
    }

    fn needs_any(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].needs)
    }

    /// Record an op: forward already evaluated to `value`; `back` computes
    /// parent gradients on demand.
    fn op(&self, value: Tensor<E>, parents: &[Var], back: BackFn<E>) -> Var {
        let needs = self.needs_any(parents);
        self.push(
            value,
            parents.iter().map(|v| v.0).collect(),
            Some(back),
            false,
            needs,
        )
    }

    /// Reverse pass from a scalar output. Visits each recorded node exactly
    /// once; leaf gradients remain retrievable afterwards.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut borrow = self.inner.borrow_mut();
        let inner = &mut *borrow;
        let root_shape = inner.values[root.0].shape().to_vec();
        if inner.values[root.0].numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (root must be scalar)",
                left: root_shape,
                right: vec![1],
            });
        }
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.grads[root.0] = Some(Tensor::filled(&root_shape, E::one()));

        let values = &inner.values;
        let nodes = &inner.nodes;
        let grads = &mut inner.grads;

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            let Some(back) = node.back.as_ref() else {
                // Leaf or frozen subgraph boundary: keep the gradient only
                // for differentiation targets.
                if !node.leaf_requires {
                    grads[i] = None;
                }
                continue;
            };
            let grad = grads[i].take().expect("checked above");
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].needs)
                .collect();
            let ctx = BackCtx {
                values,
                parents: &node.parents,
                out: i,
                grad: &grad,
                needs: &needs,
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (slot, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[*slot].needs {
                    continue;
                }
                debug_assert_eq!(g.shape(), values[*slot].shape(), "gradient shape mismatch");
                match &mut grads[*slot] {
                    Some(acc) => acc.add_assign(&g),
                    empty => *empty = Some(g),
                }
            }
        }
        Ok(())
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let inner = self.inner.borrow();
            inner.values[a.0].add(&inner.values[b.0])?
        };
        Ok(self.op(
            v,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let inner = self.inner.borrow();
            inner.values[a.0].sub(&inner.values[b.0])?
        };
        Ok(self.op(
            v,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.clone()),
                    Some(ctx.grad.map(|g| -g)),
                ]
            }),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let inner = self.inner.borrow();
            inner.values[a.0].mul(&inner.values[b.0])?
        };
        Ok(self.op(
            v,
            &[a, b],
            Box::new(|ctx| {
                let da = ctx
                    .needs(0)
                    .then(|| ctx.grad.mul(ctx.input(1)).expect("same shape"));
                let db = ctx
                    .needs(1)
                    .then(|| ctx.grad.mul(ctx.input(0)).expect("same shape"));
                vec![da, db]
            }),
        ))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let inner = self.inner.borrow();
            inner.values[a.0].zip_map(&inner.values[b.0], "div", |x, y| x / y)?
        };
        Ok(self.op(
            v,
            &[a, b],
            Box::new(|ctx| {
                let b_val = ctx.input(1);
                let da = ctx
                    .needs(0)
                    .then(|| ctx.grad.zip_map(b_val, "div_da", |g, y| g / y).expect("same shape"));
                let db = ctx.needs(1).then(|| {
                    let a_val = ctx.input(0);
                    let mut out = ctx.grad.clone();
                    for ((o, &x), &y) in out
                        .data_mut()
                        .iter_mut()
                        .zip(a_val.data())
                        .zip(b_val.data())
                    {
                        *o = -*o * x / (y * y);
                    }
                    out
                });
                vec![da, db]
            }),
        ))
    }

    // ── scalar-constant ops ─────────────────────────────────────────────

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = E::of_f64(c);
        let v = self.inner.borrow().values[x.0].map(|a| a + c);
        self.op(v, &[x], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Var {
        let ce = E::of_f64(c);
        let v = self.inner.borrow().values[x.0].scale(ce);
        self.op(
            v,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.scale(E::of_f64(c)))]),
        )
    }

    pub fn neg(&self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    /// `x[r, d] + v[d]`, the bias-add broadcast over rows.
    pub fn add_rowvec(&self, x: Var, v: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let vv = &inner.values[v.0];
            let d = *xv.shape().last().unwrap_or(&0);
            if vv.numel() != d || d == 0 || xv.numel() % d != 0 {
                return Err(Error::ShapeMismatch {
                    op: "add_rowvec",
                    left: xv.shape().to_vec(),
                    right: vv.shape().to_vec(),
                });
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                for (o, &b) in row.iter_mut().zip(vv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.op(
            out,
            &[x, v],
            Box::new(|ctx| {
                let dx = ctx.needs(0).then(|| ctx.grad.clone());
                let dv = ctx.needs(1).then(|| {
                    let vshape = ctx.input(1).shape().to_vec();
                    let d = ctx.input(1).numel();
                    let mut acc = vec![E::zero(); d];
                    for row in ctx.grad.data().chunks(d) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::from_vec(&vshape, acc).expect("shape matches")
                });
                vec![dx, dv]
            }),
        ))
    }

    /// Rows of copies of a vector: `v[d] -> [rows, d]`.
    pub fn broadcast_row(&self, v: Var, rows: usize) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let vv = &inner.values[v.0];
            let d = vv.numel();
            let mut data = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                data.extend_from_slice(vv.data());
            }
            Tensor::from_vec(&[rows, d], data)?
        };
        Ok(self.op(
            out,
            &[v],
            Box::new(|ctx| {
                let vshape = ctx.input(0).shape().to_vec();
                let d = ctx.input(0).numel();
                let mut acc = vec![E::zero(); d];
                for row in ctx.grad.data().chunks(d) {
                    for (a, &g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                vec![Some(Tensor::from_vec(&vshape, acc).expect("shape matches"))]
            }),
        ))
    }

    // ── linear algebra and shape ────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let inner = self.inner.borrow();
            inner.values[a.0].matmul(&inner.values[b.0])?
        };
        Ok(self.op(
            v,
            &[a, b],
            Box::new(|ctx| {
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let da = ctx.needs(0).then(|| {
                    let bt = ctx.input(1).transposed().expect("2-d");
                    ctx.grad.matmul(&bt).expect("shapes agree")
                });
                let db = ctx.needs(1).then(|| {
                    let at = ctx.input(0).transposed().expect("2-d");
                    at.matmul(ctx.grad).expect("shapes agree")
                });
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let v = self.inner.borrow().values[x.0].transposed()?;
        Ok(self.op(
            v,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.transposed().expect("2-d"))]),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.inner.borrow().values[x.0].reshaped(shape)?;
        Ok(self.op(
            v,
            &[x],
            Box::new(|ctx| {
                let in_shape = ctx.input(0).shape().to_vec();
                vec![Some(ctx.grad.reshaped(&in_shape).expect("same numel"))]
            }),
        ))
    }

    /// Flat-index gather: `out[i] = x[idx[i]]`; backward scatter-adds, so
    /// repeated indices are fine. With a bijective `idx` this is an element
    /// permutation (patchify/unpatchify use it that way).
    pub fn gather_flat(&self, x: Var, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let n: usize = out_shape.iter().product();
            if n != idx.len() {
                return Err(Error::ShapeMismatch {
                    op: "gather_flat",
                    left: out_shape.to_vec(),
                    right: vec![idx.len()],
                });
            }
            let data = xv.data();
            let mut out = Vec::with_capacity(n);
            for &j in idx.iter() {
                if j >= data.len() {
                    return Err(Error::IndexOutOfRange {
                        op: "gather_flat",
                        index: j,
                        len: data.len(),
                    });
                }
                out.push(data[j]);
            }
            Tensor::from_vec(out_shape, out)?
        };
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx| {
                let in_shape = ctx.input(0).shape().to_vec();
                let mut gin = Tensor::zeros(&in_shape);
                for (&j, &g) in idx.iter().zip(ctx.grad.data()) {
                    gin.data_mut()[j] += g;
                }
                vec![Some(gin)]
            }),
        ))
    }

    /// Row selection: `x[r, d]` with indices -> `[k, d]`. Repeats allowed.
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let idx: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            if xv.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    left: xv.shape().to_vec(),
                    right: vec![],
                });
            }
            let (r, d) = (xv.shape()[0], xv.shape()[1]);
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx.iter() {
                if i >= r {
                    return Err(Error::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: r,
                    });
                }
                data.extend_from_slice(&xv.data()[i * d..(i + 1) * d]);
            }
            Tensor::from_vec(&[idx.len(), d], data)?
        };
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx| {
                let in_shape = ctx.input(0).shape().to_vec();
                let d = in_shape[1];
                let mut gin = Tensor::zeros(&in_shape);
                for (k, &i) in idx.iter().enumerate() {
                    let src = &ctx.grad.data()[k * d..(k + 1) * d];
                    let dst = &mut gin.data_mut()[i * d..(i + 1) * d];
                    for (o, &g) in dst.iter_mut().zip(src) {
                        *o += g;
                    }
                }
                vec![Some(gin)]
            }),
        ))
    }

    /// Row placement into a zero matrix: `x[k, d]` scattered to `[rows, d]`.
    /// Indices must be distinct and in range.
    pub fn scatter_rows(&self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let mut seen = vec![false; rows];
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    len: rows,
                });
            }
            if seen[i] {
                return Err(Error::config(format!(
                    "scatter_rows: duplicate target row {i}"
                )));
            }
            seen[i] = true;
        }
        let idx: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            if xv.rank() != 2 || xv.shape()[0] != idx.len() {
                return Err(Error::ShapeMismatch {
                    op: "scatter_rows",
                    left: xv.shape().to_vec(),
                    right: vec![idx.len()],
                });
            }
            let d = xv.shape()[1];
            let mut out = Tensor::zeros(&[rows, d]);
            for (k, &i) in idx.iter().enumerate() {
                out.data_mut()[i * d..(i + 1) * d]
                    .copy_from_slice(&xv.data()[k * d..(k + 1) * d]);
            }
            out
        };
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx| {
                let d = ctx.input(0).shape()[1];
                let k = idx.len();
                let mut gin = Tensor::zeros(&[k, d]);
                for (kk, &i) in idx.iter().enumerate() {
                    gin.data_mut()[kk * d..(kk + 1) * d]
                        .copy_from_slice(&ctx.grad.data()[i * d..(i + 1) * d]);
                }
                vec![Some(gin)]
            }),
        ))
    }

    /// Contiguous column slice of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            if xv.rank() != 2 || start + len > xv.shape()[1] {
                return Err(Error::IndexOutOfRange {
                    op: "slice_cols",
                    index: start + len,
                    len: if xv.rank() == 2 { xv.shape()[1] } else { 0 },
                });
            }
            let (r, c) = (xv.shape()[0], xv.shape()[1]);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
            }
            Tensor::from_vec(&[r, len], data)?
        };
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx| {
                let in_shape = ctx.input(0).shape().to_vec();
                let (r, c) = (in_shape[0], in_shape[1]);
                let mut gin = Tensor::zeros(&in_shape);
                for i in 0..r {
                    gin.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&ctx.grad.data()[i * len..(i + 1) * len]);
                }
                vec![Some(gin)]
            }),
        ))
    }

    /// Column-wise concatenation of equal-row 2-D tensors.
    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::config("concat_cols: empty input list"));
        }
        let (rows, widths, out) = {
            let inner = self.inner.borrow();
            let rows = inner.values[xs[0].0].shape()[0];
            let mut widths = Vec::with_capacity(xs.len());
            for v in xs {
                let t = &inner.values[v.0];
                if t.rank() != 2 || t.shape()[0] != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        left: inner.values[xs[0].0].shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                widths.push(t.shape()[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (v, &w) in xs.iter().zip(&widths) {
                    let t = &inner.values[v.0];
                    data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
            }
            (rows, widths.clone(), Tensor::from_vec(&[rows, total], data)?)
        };
        Ok(self.op(
            out,
            xs,
            Box::new(move |ctx| {
                let total: usize = widths.iter().sum();
                let mut grads = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (pi, &w) in widths.iter().enumerate() {
                    if !ctx.needs(pi) {
                        grads.push(None);
                        offset += w;
                        continue;
                    }
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(
                            &ctx.grad.data()[i * total + offset..i * total + offset + w],
                        );
                    }
                    grads.push(Some(
                        Tensor::from_vec(&[rows, w], data).expect("shape matches"),
                    ));
                    offset += w;
                }
                grads
            }),
        ))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis` (row-max subtraction).
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            if axis >= xv.rank() {
                return Err(Error::IndexOutOfRange {
                    op: "softmax axis",
                    index: axis,
                    len: xv.rank(),
                });
            }
            let mut out = xv.clone();
            for_each_lane(out.shape().to_vec().as_slice(), axis, |lane| {
                softmax_lane(out.data_mut(), &lane);
            });
            out
        };
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx| {
                // dx = y ⊙ (g − <g, y>) per lane
                let y = ctx.output();
                let mut gin = ctx.grad.clone();
                let shape = y.shape().to_vec();
                for_each_lane(&shape, axis, |lane| {
                    let mut dot = E::zero();
                    for idx in lane.iter() {
                        dot += gin.data()[idx] * y.data()[idx];
                    }
                    for idx in lane.iter() {
                        let g = gin.data()[idx];
                        gin.data_mut()[idx] = y.data()[idx] * (g - dot);
                    }
                });
                vec![Some(gin)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let gv = &inner.values[gamma.0];
            let bv = &inner.values[beta.0];
            let d = *xv.shape().last().unwrap_or(&0);
            if d == 0 || gv.numel() != d || bv.numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    left: xv.shape().to_vec(),
                    right: gv.shape().to_vec(),
                });
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                let (m, inv_std) = row_moments(row, eps);
                for (j, v) in row.iter_mut().enumerate() {
                    let xhat = (*v - m) * inv_std;
                    *v = gv.data()[j] * xhat + bv.data()[j];
                }
            }
            out
        };
        Ok(self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let xv = ctx.input(0);
                let gv = ctx.input(1);
                let d = gv.numel();
                let rows = xv.numel() / d;
                let mut dx = ctx.needs(0).then(|| Tensor::zeros(xv.shape()));
                let mut dgamma = ctx.needs(1).then(|| vec![E::zero(); d]);
                let mut dbeta = ctx.needs(2).then(|| vec![E::zero(); d]);
                for r in 0..rows {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &ctx.grad.data()[r * d..(r + 1) * d];
                    let (m, inv_std) = row_moments(xr, eps);
                    let inv_d = E::of_f64(1.0 / d as f64);
                    // dgamma/dbeta accumulate over rows
                    if dgamma.is_some() || dbeta.is_some() {
                        for j in 0..d {
                            let xhat = (xr[j] - m) * inv_std;
                            if let Some(dg) = dgamma.as_mut() {
                                dg[j] += gr[j] * xhat;
                            }
                            if let Some(db) = dbeta.as_mut() {
                                db[j] += gr[j];
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut mean_dxhat = E::zero();
                        let mut mean_dxhat_xhat = E::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - m) * inv_std;
                            let dxhat = gr[j] * gv.data()[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        let row_out = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - m) * inv_std;
                            let dxhat = gr[j] * gv.data()[j];
                            row_out[j] =
                                inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                vec![
                    dx,
                    dgamma.map(|d_| Tensor::from_vec(gv.shape(), d_).expect("shape matches")),
                    dbeta.map(|d_| Tensor::from_vec(gv.shape(), d_).expect("shape matches")),
                ]
            }),
        ))
    }

    /// GELU, tanh approximation (the ViT convention).
    pub fn gelu(&self, x: Var) -> Var {
        let c = E::of_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::of_f64(0.044715);
        let half = E::of_f64(0.5);
        let v = self.inner.borrow().values[x.0]
            .map(|a| half * a * (E::one() + (c * (a + k * a * a * a)).tanh()));
        self.op(
            v,
            &[x],
            Box::new(move |ctx| {
                let xv = ctx.input(0);
                let three = E::of_f64(3.0);
                let mut gin = ctx.grad.clone();
                for (g, &a) in gin.data_mut().iter_mut().zip(xv.data()) {
                    let u = c * (a + k * a * a * a);
                    let t = u.tanh();
                    let du = c * (E::one() + three * k * a * a);
                    let dy = half * (E::one() + t) + half * a * (E::one() - t * t) * du;
                    *g = *g * dy;
                }
                vec![Some(gin)]
            }),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.inner.borrow().values[x.0].map(sigmoid_scalar);
        self.op(
            v,
            &[x],
            Box::new(|ctx| {
                let y = ctx.output();
                let mut gin = ctx.grad.clone();
                for (g, &yv) in gin.data_mut().iter_mut().zip(y.data()) {
                    *g = *g * yv * (E::one() - yv);
                }
                vec![Some(gin)]
            }),
        )
    }

    /// `ln(1 + exp(x))` in overflow-free form; derivative is the sigmoid.
    pub fn softplus(&self, x: Var) -> Var {
        let v = self.inner.borrow().values[x.0].map(softplus_scalar);
        self.op(
            v,
            &[x],
            Box::new(|ctx| {
                let xv = ctx.input(0);
                let mut gin = ctx.grad.clone();
                for (g, &a) in gin.data_mut().iter_mut().zip(xv.data()) {
                    *g = *g * sigmoid_scalar(a);
                }
                vec![Some(gin)]
            }),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements to a rank-0 scalar (f64 accumulation).
    pub fn sum(&self, x: Var) -> Var {
        let v = Tensor::scalar(E::of_f64(self.inner.borrow().values[x.0].sum_f64()));
        self.op(
            v,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::filled(ctx.input(0).shape(), g))]
            }),
        )
    }

    /// Mean of all elements to a rank-0 scalar (f64 accumulation).
    pub fn mean(&self, x: Var) -> Var {
        let v = Tensor::scalar(E::of_f64(self.inner.borrow().values[x.0].mean_f64()));
        self.op(
            v,
            &[x],
            Box::new(|ctx| {
                let n = ctx.input(0).numel();
                let g = ctx.grad.item() / E::of_f64(n as f64);
                vec![Some(Tensor::filled(ctx.input(0).shape(), g))]
            }),
        )
    }
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn softplus_scalar<E: Element>(x: E) -> E {
    x.max(E::zero()) + (E::one() + (-x.abs()).exp()).ln()
}

fn row_moments<E: Element>(row: &[E], eps: f64) -> (E, E) {
    let d = row.len() as f64;
    let mut sum = 0.0;
    for &v in row {
        sum += v.to_f64_val();
    }
    let mean = sum / d;
    let mut var = 0.0;
    for &v in row {
        let c = v.to_f64_val() - mean;
        var += c * c;
    }
    var /= d;
    (E::of_f64(mean), E::of_f64(1.0 / (var + eps).sqrt()))
}

/// Flat indices of one lane along `axis`, for every (outer, inner) pair.
struct Lane {
    base: usize,
    stride: usize,
    len: usize,
}

impl Lane {
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).map(move |j| self.base + j * self.stride)
    }
}

fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Lane)) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(Lane {
                base: o * n * inner + i,
                stride: inner,
                len: n,
            });
        }
    }
}

fn softmax_lane<E: Element>(data: &mut [E], lane: &Lane) {
    let mut max = E::neg_infinity();
    for idx in lane.iter() {
        if data[idx] > max {
            max = data[idx];
        }
    }
    let mut sum = E::zero();
    for idx in lane.iter() {
        let e = (data[idx] - max).exp();
        data[idx] = e;
        sum += e;
    }
    for idx in lane.iter() {
        data[idx] = data[idx] / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!(close(v as f64, 1.0 / 3.0, 1e-6));
        }
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![1000.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!(v.is_all_finite());
        assert!(close(v.data()[0] as f64, 1.0, 1e-6));
        assert!(close(v.data()[1] as f64, 0.0, 1e-6));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform(&[4, 7], -3.0, 3.0, &mut rng));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for row in v.data().chunks(7) {
            let s: f32 = row.iter().sum();
            assert!(close(s as f64, 1.0, 1e-6));
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layernorm_constant_row_maps_to_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::filled(&[2, 4], 3.5));
        let gamma = tape.constant(Tensor::filled(&[4], 1.0));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm(x, gamma, beta, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn layernorm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng));
        let gamma = tape.constant(Tensor::zeros(&[5]));
        let beta = tape.constant(Tensor::from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let y = tape.layernorm(x, gamma, beta, 1e-6).unwrap();
        let v = tape.value(y);
        for row in v.data().chunks(5) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn gather_identity_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::<f32>::new();
        let t = Tensor::uniform(&[6, 3], 0.0, 1.0, &mut rng);
        let x = tape.constant(t.clone());
        let idx: Vec<usize> = (0..6).collect();
        let y = tape.gather_rows(x, &idx).unwrap();
        assert_eq!(tape.value(y), t);
    }

    #[test]
    fn scatter_gather_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::<f32>::new();
        let t = Tensor::uniform(&[8, 4], 0.0, 1.0, &mut rng);
        let x = tape.constant(t.clone());
        let idx = [5usize, 1, 6];
        let g = tape.gather_rows(x, &idx).unwrap();
        let s = tape.scatter_rows(g, &idx, 8).unwrap();
        let sv = tape.value(s);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(
                &sv.data()[i * 4..(i + 1) * 4],
                &tape.value(g).data()[k * 4..(k + 1) * 4]
            );
        }
        // untouched rows are zero
        assert_eq!(&sv.data()[0..4], &[0.0; 4]);
    }

    #[test]
    fn gather_out_of_range_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.gather_rows(x, &[3]).is_err());
    }

    #[test]
    fn scatter_duplicate_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.scatter_rows(x, &[1, 1], 4).is_err());
    }

    #[test]
    fn backward_through_composition_has_parameter_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng), true);
        let w = tape.leaf(Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng), true);
        let b = tape.leaf(Tensor::uniform(&[5], -1.0, 1.0, &mut rng), true);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_rowvec(h, b).unwrap();
        let h = tape.gelu(h);
        let loss = tape.sum(h);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().shape(), &[3, 4]);
        assert_eq!(tape.grad(w).unwrap().shape(), &[4, 5]);
        assert_eq!(tape.grad(b).unwrap().shape(), &[5]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tape = Tape::<f32>::new();
        let frozen = tape.leaf(Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng), false);
        let w = tape.leaf(Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng), true);
        let y = tape.matmul(frozen, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // d/dx of x*x at 3 is 6
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::<f32>::new();
        let a = Tensor::uniform(&[3, 2], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng);
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let cat = tape.concat_cols(&[va, vb]).unwrap();
        let sa = tape.slice_cols(cat, 0, 2).unwrap();
        let sb = tape.slice_cols(cat, 2, 4).unwrap();
        assert_eq!(tape.value(sa), a);
        assert_eq!(tape.value(sb), b);
    }
}
