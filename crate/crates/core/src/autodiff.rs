//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//!
//! Broadcasting is limited to leading axes: for binary elementwise ops the
//! right-hand operand's shape must equal a suffix of the left-hand shape.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::{gemm, numel, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Mean {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Gelu {
        a: usize,
        /// `GELU'(x)` stored during the forward pass.
        slope: Vec<f64>,
    },
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        d: usize,
    },
    Softmax {
        a: usize,
        tau: f64,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        n: usize,
    },
    Concat {
        parts: Vec<usize>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: usize,
        outer: usize,
        n_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Transpose {
        a: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    Reshape(usize),
    Embedding {
        table: usize,
        indices: Vec<usize>,
        d: usize,
    },
    Gather {
        a: usize,
        indices: Vec<usize>,
        c: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of a backward sweep: gradients of the loss w.r.t. every leaf that
/// requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `var` out, leaving nothing behind.
    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Deliberate backward-rule corruption, used as a negative control for
/// gradient checking. Scoped to the current thread.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Fault {
        /// Scales the layer-norm gain gradient by 1.01.
        LayerNormGamma,
    }

    thread_local! {
        static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
    }

    /// Runs `f` with `fault` injected.
    pub fn with<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
        struct Reset;
        impl Drop for Reset {
            fn drop(&mut self) {
                ACTIVE.with(|a| a.set(None));
            }
        }
        ACTIVE.with(|a| a.set(Some(fault)));
        let _reset = Reset;
        f()
    }

    pub(super) fn active(fault: Fault) -> bool {
        ACTIVE.with(|a| a.get() == Some(fault))
    }
}

/// `1 / sqrt(2π)`.
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor as a leaf. Gradients are tracked iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_unchecked(
            tensor.shape().to_vec(),
            tensor.shared_data(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_unchecked(
            tensor.shape().to_vec(),
            tensor.shared_data(),
            Op::Leaf,
            false,
        )
    }

    fn push_unchecked(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>, TensorError> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(shape, Arc::new(value), op, requires_grad))
    }

    fn get(&self, id: usize) -> (Vec<usize>, Arc<Vec<f64>>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.shape.clone(), Arc::clone(&n.value), n.requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(node, &g, &nodes, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn backprop(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let rg = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| nodes[id].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            if rg(a) {
                let bv = val(b);
                let da = grad_slot(grads, a, batch * m * k);
                for bi in 0..batch {
                    let boff = if shared_rhs { 0 } else { bi * k * n };
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &bv[boff..boff + k * n],
                        true,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        true,
                    );
                }
            }
            if rg(b) {
                let av = val(a);
                let len = if shared_rhs { k * n } else { batch * k * n };
                let db = grad_slot(grads, b, len);
                for bi in 0..batch {
                    let boff = if shared_rhs { 0 } else { bi * k * n };
                    gemm(
                        k,
                        m,
                        n,
                        &av[bi * m * k..(bi + 1) * m * k],
                        true,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &mut db[boff..boff + k * n],
                        true,
                    );
                }
            }
        }
        &Op::Linear {
            x,
            w,
            b,
            rows,
            inp,
            out,
        } => {
            if rg(x) {
                let wv = val(w);
                let dx = grad_slot(grads, x, rows * inp);
                gemm(rows, out, inp, g, false, wv, false, dx, true);
            }
            if rg(w) {
                let xv = val(x);
                let dw = grad_slot(grads, w, out * inp);
                gemm(out, rows, inp, g, true, xv, false, dw, true);
            }
            if let Some(b) = b {
                if rg(b) {
                    let db = grad_slot(grads, b, out);
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if rg(a) {
                let da = grad_slot(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if rg(b) {
                let nb = nodes[b].value.len();
                let db = grad_slot(grads, b, nb);
                for chunk in g.chunks_exact(nb) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += sign * v);
                }
            }
        }
        &Op::Mul(a, b) => {
            let nb = nodes[b].value.len();
            if rg(a) {
                let bv = val(b);
                let da = grad_slot(grads, a, g.len());
                for (dc, gc) in da.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                    for ((d, gv), bv) in dc.iter_mut().zip(gc).zip(bv) {
                        *d += gv * bv;
                    }
                }
            }
            if rg(b) {
                let av = val(a);
                let db = grad_slot(grads, b, nb);
                for (gc, ac) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                    for ((d, gv), av) in db.iter_mut().zip(gc).zip(ac) {
                        *d += gv * av;
                    }
                }
            }
        }
        &Op::Scale(a, c) => {
            if rg(a) {
                let da = grad_slot(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
        }
        &Op::Sum { a, outer, n, inner } | &Op::Mean { a, outer, n, inner } => {
            if rg(a) {
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let da = grad_slot(grads, a, outer * n * inner);
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        for j in 0..inner {
                            da[base + j] += scale * g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::Gelu { a, slope } => {
            if rg(*a) {
                let da = grad_slot(grads, *a, g.len());
                for ((d, gv), s) in da.iter_mut().zip(g).zip(slope) {
                    *d += gv * s;
                }
            }
        }
        &Op::Relu(a) => {
            if rg(a) {
                let av = val(a);
                let da = grad_slot(grads, a, g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            d,
        } => {
            let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
            if rg(gamma) {
                let skew = if fault::active(fault::Fault::LayerNormGamma) {
                    1.01
                } else {
                    1.0
                };
                let dg = grad_slot(grads, gamma, d);
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += skew * gr[j] * xr[j];
                    }
                }
            }
            if rg(beta) {
                let db = grad_slot(grads, beta, d);
                for gr in g.chunks_exact(d) {
                    db.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                }
            }
            if rg(x) {
                let gv = val(gamma);
                let dx = grad_slot(grads, x, g.len());
                let mut dxhat = vec![0.0; d];
                for (r, (gr, xr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let s = inv_std[r];
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += s * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        &Op::Softmax {
            a,
            tau,
            outer,
            n,
            inner,
        } => {
            if rg(a) {
                let y = node.value.as_slice();
                let da = grad_slot(grads, a, g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            da[idx(i)] += y[idx(i)] * (g[idx(i)] - dot) / tau;
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { a, n } => {
            if rg(a) {
                let y = node.value.as_slice();
                let da = grad_slot(grads, a, g.len());
                for (r, (gr, yr)) in g.chunks_exact(n).zip(y.chunks_exact(n)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for i in 0..n {
                        da[r * n + i] += gr[i] - yr[i].exp() * total;
                    }
                }
            }
        }
        Op::Concat {
            parts,
            sizes,
            outer,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&p, &sz) in parts.iter().zip(sizes) {
                if rg(p) {
                    let dp = grad_slot(grads, p, outer * sz * inner);
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * sz * inner;
                        for j in 0..sz * inner {
                            dp[dst + j] += g[src + j];
                        }
                    }
                }
                offset += sz;
            }
        }
        &Op::Slice {
            a,
            outer,
            n_in,
            start,
            len,
            inner,
        } => {
            if rg(a) {
                let da = grad_slot(grads, a, outer * n_in * inner);
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * n_in + start) * inner;
                    for j in 0..len * inner {
                        da[dst + j] += g[src + j];
                    }
                }
            }
        }
        &Op::Transpose { a, batch, m, n } => {
            if rg(a) {
                let da = grad_slot(grads, a, g.len());
                for bi in 0..batch {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            da[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
        }
        &Op::Reshape(a) => {
            if rg(a) {
                let da = grad_slot(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::Embedding { table, indices, d } => {
            let (table, d) = (*table, *d);
            if rg(table) {
                let len = nodes[table].value.len();
                let dt = grad_slot(grads, table, len);
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Gather { a, indices, c } => {
            let (a, c) = (*a, *c);
            if rg(a) {
                let len = nodes[a].value.len();
                let da = grad_slot(grads, a, len);
                for (r, &idx) in indices.iter().enumerate() {
                    da[r * c + idx] += g[r];
                }
            }
        }
    }
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(TensorError::Param {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        })
    }
}

fn check_tau(op: &'static str, tau: f64) -> Result<(), TensorError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Param {
            op,
            msg: format!("temperature must be positive, got {tau}"),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.as_ref().clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.as_ref().clone()).expect("node shape matches value")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// Matrix product over the last two axes. `other` is either 2-D (shared
    /// across all leading batch axes of `self`) or has the same leading axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (sa, va, ra) = self.tape.get(self.id);
        let (sb, vb, rb) = self.tape.get(other.id);
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if shared_rhs { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &va[bi * m * k..(bi + 1) * m * k],
                false,
                &vb[boff..boff + k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.tape.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            ra || rb,
        )
    }

    /// Affine map over the last axis: `self · weightᵀ + bias`, with `weight`
    /// shaped `[out, in]` and `bias` shaped `[out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&weight);
        let (sx, vx, rx) = self.tape.get(self.id);
        let (sw, vw, rw) = self.tape.get(weight.id);
        let inp = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[1] != inp || sx.is_empty() {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let out_dim = sw[0];
        let rows = vx.len() / inp.max(1);
        let mut out = vec![0.0; rows * out_dim];
        gemm(rows, inp, out_dim, &vx, false, &vw, true, &mut out, false);
        let mut rb = false;
        if let Some(bias) = bias {
            self.same_tape(&bias);
            let (sb, vb, r) = self.tape.get(bias.id);
            if sb != [out_dim] {
                return Err(TensorError::Shape {
                    op: "linear bias",
                    lhs: sw,
                    rhs: sb,
                });
            }
            rb = r;
            for row in out.chunks_exact_mut(out_dim) {
                row.iter_mut().zip(vb.iter()).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(out_dim);
        self.tape.push(
            "linear",
            shape,
            out,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                rows,
                inp,
                out: out_dim,
            },
            rx || rw || rb,
        )
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (sa, va, ra) = self.tape.get(self.id);
        let (sb, vb, rb) = self.tape.get(other.id);
        check_suffix(name, &sa, &sb)?;
        let nb = vb.len();
        let mut out = Vec::with_capacity(va.len());
        if nb > 0 {
            for chunk in va.chunks_exact(nb) {
                out.extend(chunk.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)));
            }
        }
        self.tape
            .push(name, sa, out, op(self.id, other.id), ra || rb)
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the operator trait
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the operator trait
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the operator trait
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        let out = v.iter().map(|x| x * c).collect();
        self.tape.push("scale", s, out, Op::Scale(self.id, c), r)
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>, TensorError> {
        let name = if mean { "mean" } else { "sum" };
        let (s, v, r) = self.tape.get(self.id);
        check_axis(name, &s, axis)?;
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += v[base + j];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= n as f64);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let op = if mean {
            Op::Mean {
                a: self.id,
                outer,
                n,
                inner,
            }
        } else {
            Op::Sum {
                a: self.id,
                outer,
                n,
                inner,
            }
        };
        self.tape.push(name, shape, out, op, r)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce(axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce(axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        let n = numel(&self.shape());
        self.reshape(&[n])?.sum_axis(0)
    }

    /// Mean of every element, as a scalar.
    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        let n = numel(&self.shape());
        self.reshape(&[n])?.mean_axis(0)
    }

    pub fn gelu(self) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        let mut out = Vec::with_capacity(v.len());
        let mut slope = Vec::with_capacity(if r { v.len() } else { 0 });
        for &x in v.iter() {
            let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
            out.push(x * cdf);
            if r {
                slope.push(cdf + x * (-0.5 * x * x).exp() * FRAC_1_SQRT_2PI);
            }
        }
        self.tape
            .push("gelu", s, out, Op::Gelu { a: self.id, slope }, r)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        let out = v.iter().map(|&x| x.max(0.0)).collect();
        self.tape.push("relu", s, out, Op::Relu(self.id), r)
    }

    /// Layer normalization over the last axis with learnable `gamma`/`beta`.
    /// Uses the population variance plus `1e-5` under the square root.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (s, v, rx) = self.tape.get(self.id);
        let (sg, vg, rg) = self.tape.get(gamma.id);
        let (sb, vb, rb) = self.tape.get(beta.id);
        let d = *s.last().unwrap_or(&0);
        if d == 0 || sg != [d] || sb != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: sg,
            });
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * vg[j] + vb[j];
            }
        }
        self.tape.push(
            "layer_norm",
            s,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                d,
            },
            rx || rg || rb,
        )
    }

    /// `softmax(self / tau)` along `axis`, stabilized by subtracting the
    /// per-slice maximum.
    pub fn softmax_temp(self, tau: f64, axis: usize) -> Result<Var<'t>, TensorError> {
        check_tau("softmax_temp", tau)?;
        let (s, v, r) = self.tape.get(self.id);
        check_axis("softmax_temp", &s, axis)?;
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    let x = v[idx(i)];
                    if x.is_nan() {
                        return Err(TensorError::NonFinite { op: "softmax_temp" });
                    }
                    max = max.max(x);
                }
                let mut total = 0.0;
                for i in 0..n {
                    let e = ((v[idx(i)] - max) / tau).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[idx(i)] /= total;
                }
            }
        }
        self.tape.push(
            "softmax_temp",
            s,
            out,
            Op::Softmax {
                a: self.id,
                tau,
                outer,
                n,
                inner,
            },
            r,
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        let n = *s.last().ok_or(TensorError::Shape {
            op: "log_softmax",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter().zip(o).for_each(|(x, y)| *y = x - lse);
        }
        self.tape
            .push("log_softmax", s, out, Op::LogSoftmax { a: self.id, n }, r)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
        let first = parts
            .first()
            .ok_or(TensorError::Usage("concat needs at least one input".into()))?;
        let tape = first.tape;
        let (s0, _, _) = tape.get(first.id);
        check_axis("concat", &s0, axis)?;
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut sizes = Vec::with_capacity(parts.len());
        let mut vals = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            first.same_tape(p);
            let (s, v, r) = tape.get(p.id);
            let compatible =
                s.len() == s0.len() && s[..axis] == s0[..axis] && s[axis + 1..] == s0[axis + 1..];
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: s,
                });
            }
            sizes.push(s[axis]);
            vals.push(v);
            rg |= r;
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in vals.iter().zip(&sizes) {
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        tape.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                sizes,
                outer,
                inner,
            },
            rg,
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        check_axis("slice", &s, axis)?;
        if start + len > s[axis] {
            return Err(TensorError::Param {
                op: "slice",
                msg: format!(
                    "range {start}..{} exceeds axis {axis} of {s:?}",
                    start + len
                ),
            });
        }
        let (outer, n_in, inner) = split_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n_in + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        self.tape.push(
            "slice",
            shape,
            out,
            Op::Slice {
                a: self.id,
                outer,
                n_in,
                start,
                len,
                inner,
            },
            r,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        if s.len() < 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let mut out = vec![0.0; v.len()];
        for bi in 0..batch {
            let off = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = v[off + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.tape.push(
            "transpose",
            shape,
            out,
            Op::Transpose {
                a: self.id,
                batch,
                m,
                n,
            },
            r,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        if numel(shape) != v.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        Ok(self
            .tape
            .push_unchecked(shape.to_vec(), v, Op::Reshape(self.id), r))
    }

    /// Row lookup into a `[rows, d]` table.
    pub fn embedding(self, indices: &[usize]) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= rows {
                return Err(TensorError::Param {
                    op: "embedding",
                    msg: format!("row {idx} out of range for table of {rows} rows"),
                });
            }
            out.extend_from_slice(&v[idx * d..(idx + 1) * d]);
        }
        self.tape.push(
            "embedding",
            vec![indices.len(), d],
            out,
            Op::Embedding {
                table: self.id,
                indices: indices.to_vec(),
                d,
            },
            r,
        )
    }

    /// Picks `self[r, indices[r]]` from a `[rows, c]` tensor.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>, TensorError> {
        let (s, v, r) = self.tape.get(self.id);
        if s.len() != 2 || s[0] != indices.len() {
            return Err(TensorError::Shape {
                op: "gather",
                lhs: s,
                rhs: vec![indices.len()],
            });
        }
        let c = s[1];
        let mut out = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= c {
                return Err(TensorError::Param {
                    op: "gather",
                    msg: format!("index {idx} out of range for {c} columns"),
                });
            }
            out.push(v[row * c + idx]);
        }
        self.tape.push(
            "gather",
            vec![indices.len()],
            out,
            Op::Gather {
                a: self.id,
                indices: indices.to_vec(),
                c,
            },
            r,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let tape = Tape::new();
        let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i3 = tape.constant(&Tensor::identity(3));
        let out = i3.matmul(tape.constant(&a)).unwrap();
        assert_eq!(out.to_vec(), a.data());

        let m = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let ones = tape.constant(&t(&[2, 1], &[1., 1.]));
        let out = m.matmul(ones).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.to_vec(), vec![3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn softmax_known_values() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[0., 0.]));
        assert_eq!(x.softmax_temp(1.0, 0).unwrap().to_vec(), vec![0.5, 0.5]);
        let x = tape.constant(&t(&[2], &[2f64.ln(), 0.]));
        let y = x.softmax_temp(1.0, 0).unwrap().to_vec();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature_and_nan_rows() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[0., 1.]));
        assert!(matches!(
            x.softmax_temp(0.0, 0),
            Err(TensorError::Param { .. })
        ));
        assert!(matches!(
            x.softmax_temp(-1.0, 0),
            Err(TensorError::Param { .. })
        ));
        let nan = tape.constant(&t(&[2], &[f64::NAN, f64::NAN]));
        assert!(matches!(
            nan.softmax_temp(1.0, 0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn higher_temperature_raises_entropy() {
        let entropy = |p: &[f64]| -p.iter().map(|x| x * x.ln()).sum::<f64>();
        let tape = Tape::new();
        let x = tape.constant(&t(&[3], &[3., 1., -2.]));
        let cold = x.softmax_temp(1.0, 0).unwrap().to_vec();
        let hot = x.softmax_temp(10.0, 0).unwrap().to_vec();
        assert!(entropy(&hot) > entropy(&cold));
    }

    #[test]
    fn softmax_along_middle_axis() {
        let tape = Tape::new();
        let x = tape.constant(&t(
            &[2, 3, 2],
            &[1., 2., 3., 4., 5., 6., 0., 0., 1., 1., 2., 2.],
        ));
        let y = x.softmax_temp(1.0, 1).unwrap().to_vec();
        for o in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..3).map(|i| y[(o * 3 + i) * 2 + j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::full(&[2, 3], 0.7).with_grad());
        let loss = w.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mse_at_target_is_zero() {
        let tape = Tape::new();
        let target = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = tape.leaf(&target.clone().with_grad());
        let diff = w.sub(tape.constant(&target)).unwrap();
        let loss = diff.mul(diff).unwrap().mean().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(w), Err(TensorError::Usage(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1], &[1e308]));
        assert!(matches!(
            x.scale(10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[4, 2, 3]));
        assert!(a.add(tape.constant(&Tensor::zeros(&[2, 3]))).is_ok());
        assert!(a.add(tape.constant(&Tensor::zeros(&[3]))).is_ok());
        assert!(a.add(tape.constant(&Tensor::zeros(&[4, 1, 3]))).is_err());
        assert!(a.add(tape.constant(&Tensor::zeros(&[2]))).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 4], &[1., 2., 3., 4., -10., 0., 10., 40.]));
        let g = tape.constant(&Tensor::full(&[4], 1.0));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b).unwrap().to_vec();
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_transpose_gather_embedding() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(&t(&[2, 1, 2], &[5., 6., 7., 8.]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        assert_eq!(c.to_vec(), vec![1., 2., 5., 6., 3., 4., 7., 8.]);
        let s = c.slice(2, 1, 1).unwrap();
        assert_eq!(s.to_vec(), vec![2., 6., 4., 8.]);
        let tr = c.transpose().unwrap();
        assert_eq!(tr.to_vec(), vec![1., 5., 2., 6., 3., 7., 4., 8.]);
        let m = tape.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(m.gather(&[2, 0]).unwrap().to_vec(), vec![3., 4.]);
        assert_eq!(m.embedding(&[1, 1, 0]).unwrap().shape(), vec![3, 3]);
        assert!(m.embedding(&[2]).is_err());
    }
}
