//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes in reverse once and returns the
//! gradient of a scalar with respect to every node that requires one. A tape
//! can be differentiated only once; build a fresh tape per forward pass.
//!
//! Broadcasting is deliberately narrow: the right-hand operand of a binary
//! elementwise op must either match the left shape, be a one-element tensor,
//! or have a shape equal to a suffix of the left shape (bias-style rows).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Suffix,
}

enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Abs(usize),
    Log(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Mean {
        a: usize,
        axis: usize,
    },
    Sum(usize),
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Gather {
        a: usize,
        row_len: usize,
        index: Rc<Vec<Option<usize>>>,
    },
    BceWithLogits {
        logits: usize,
        target: Rc<Tensor>,
    },
    Cosine {
        a: usize,
        b: usize,
        clamped: bool,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Backward(
                "graph already consumed; build a new tape for another pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            // leaves keep their gradient; interior nodes keep theirs too so
            // callers may inspect intermediate sensitivities
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast(g: &Tensor, b_shape: &[usize], mode: Bcast) -> Tensor {
    match mode {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::full(b_shape, g.sum()),
        Bcast::Suffix => {
            let n: usize = b_shape.iter().product();
            let mut out = vec![0.0; n];
            for chunk in g.data().chunks_exact(n) {
                for (o, x) in out.iter_mut().zip(chunk) {
                    *o += x;
                }
            }
            Tensor::new(b_shape, out).expect("bcast reduce")
        }
    }
}

fn bcast_get(b: &[f64], mode: Bcast, i: usize) -> f64 {
    match mode {
        Bcast::Same => b[i],
        Bcast::Scalar => b[0],
        Bcast::Suffix => b[i % b.len()],
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let req = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &*nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, mode) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, reduce_bcast(g, val(*b).shape(), *mode));
            }
        }
        Op::Sub(a, b, mode) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                let r = reduce_bcast(g, val(*b).shape(), *mode).map(|x| -x);
                accumulate(grads, *b, r);
            }
        }
        Op::Mul(a, b, mode) => {
            let av = val(*a);
            let bv = val(*b);
            if req(*a) {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bcast_get(bv.data(), *mode, i))
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape(), d)?);
            }
            if req(*b) {
                let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                let prod = Tensor::new(av.shape(), prod)?;
                accumulate(grads, *b, reduce_bcast(&prod, bv.shape(), *mode));
            }
        }
        Op::Scale(a, s) => {
            if req(*a) {
                accumulate(grads, *a, g.map(|x| x * s));
            }
        }
        Op::AddScalar(a) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
        }
        Op::MatMul {
            a,
            b,
            trans_b,
            shared_b,
            batch,
            m,
            k,
            n,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = val(*a);
            let bv = val(*b);
            if req(*a) {
                // dA = dC . B^T   (or dC . B when B was given transposed)
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    let bo = if *shared_b { 0 } else { bi * k * n };
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let bs = &bv.data()[bo..bo + k * n];
                    let out = &mut da[bi * m * k..(bi + 1) * m * k];
                    // B stored (k,n) when !trans_b, (n,k) otherwise; we need (n,k) view
                    if *trans_b {
                        gemm(m, n, k, gs, (n, 1), bs, (k, 1), out, false);
                    } else {
                        gemm(m, n, k, gs, (n, 1), bs, (1, n), out, false);
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape(), da)?);
            }
            if req(*b) {
                let mut db = vec![0.0; if *shared_b { k * n } else { batch * k * n }];
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let bo = if *shared_b { 0 } else { bi * k * n };
                    let out = &mut db[bo..bo + k * n];
                    if *trans_b {
                        // dB (n,k) = dC^T (n,m) . A (m,k)
                        gemm(n, m, k, gs, (1, n), as_, (k, 1), out, true);
                    } else {
                        // dB (k,n) = A^T (k,m) . dC (m,n)
                        gemm(k, m, n, as_, (1, k), gs, (n, 1), out, true);
                    }
                }
                accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
        }
        Op::Softmax(a) => {
            if req(*a) {
                let y = val(id);
                let c = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(d.chunks_exact_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape(), d)?);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let c = gv.numel();
            let rows = xhat.len() / c;
            if req(*x) {
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        mean_d += dh;
                        mean_dx += dh * xr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        dx[r * c + j] = rstd[r] * (dh - mean_d - xr[j] * mean_dx);
                    }
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape(), dx)?);
            }
            if req(*gamma) {
                let mut dg = vec![0.0; c];
                for (gr, xr) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dg[j] += gr[j] * xr[j];
                    }
                }
                accumulate(grads, *gamma, Tensor::new(gv.shape(), dg)?);
            }
            if req(*beta) {
                accumulate(grads, *beta, reduce_bcast(g, val(*beta).shape(), Bcast::Suffix));
            }
        }
        Op::Gelu(a) => {
            if req(*a) {
                let x = val(*a);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| gi * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape(), d)?);
            }
        }
        Op::Sigmoid(a) => {
            if req(*a) {
                let y = val(id);
                let d: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gi)| gi * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, Tensor::new(y.shape(), d)?);
            }
        }
        Op::Abs(a) => {
            if req(*a) {
                let x = val(*a);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape(), d)?);
            }
        }
        Op::Log(a) => {
            if req(*a) {
                let x = val(*a);
                let d: Vec<f64> = x.data().iter().zip(g.data()).map(|(x, gi)| gi / x).collect();
                accumulate(grads, *a, Tensor::new(x.shape(), d)?);
            }
        }
        Op::Concat {
            inputs,
            axis,
            sizes,
        } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for (&inp, &sz) in inputs.iter().zip(sizes) {
                if req(inp) {
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + sz * inner]);
                    }
                    accumulate(grads, inp, Tensor::new(val(inp).shape(), d)?);
                }
                offset += sz;
            }
        }
        Op::Slice { a, axis, start } => {
            if req(*a) {
                let in_shape = val(*a).shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[*axis];
                let len = g.shape()[*axis];
                let mut d = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * full + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *a, Tensor::new(&in_shape, d)?);
            }
        }
        Op::Mean { a, axis } => {
            if req(*a) {
                let in_shape = val(*a).shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let n = in_shape[*axis];
                let mut d = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            d[(o * n + k) * inner + i] = g.data()[o * inner + i] / n as f64;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(&in_shape, d)?);
            }
        }
        Op::Sum(a) => {
            if req(*a) {
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0]));
            }
        }
        Op::Reshape(a) => {
            if req(*a) {
                accumulate(grads, *a, g.clone().reshape(val(*a).shape())?);
            }
        }
        Op::Permute { a, perm } => {
            if req(*a) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *a, permute_tensor(g, &inv));
            }
        }
        Op::Gather { a, row_len, index } => {
            if req(*a) {
                let src = val(*a);
                let mut d = vec![0.0; src.numel()];
                for (r, slot) in index.iter().enumerate() {
                    if let Some(s) = slot {
                        let gr = &g.data()[r * row_len..(r + 1) * row_len];
                        let dr = &mut d[s * row_len..(s + 1) * row_len];
                        for (x, y) in dr.iter_mut().zip(gr) {
                            *x += y;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(src.shape(), d)?);
            }
        }
        Op::BceWithLogits { logits, target } => {
            if req(*logits) {
                let x = val(*logits);
                let n = x.numel() as f64;
                let s = g.data()[0];
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| s * (sigmoid(x) - t) / n)
                    .collect();
                accumulate(grads, *logits, Tensor::new(x.shape(), d)?);
            }
        }
        Op::Cosine { a, b, clamped } => {
            let av = val(*a);
            let bv = val(*b);
            let s = g.data()[0];
            let na2: f64 = av.sq_norm();
            let nb2: f64 = bv.sq_norm();
            let cos = val(id).data()[0];
            let denom = if *clamped {
                COSINE_EPS
            } else {
                (na2 * nb2).sqrt()
            };
            let grad_of = |x: &Tensor, y: &Tensor, nx2: f64| -> Vec<f64> {
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&xi, &yi)| {
                        if *clamped {
                            s * yi / denom
                        } else {
                            s * (yi / denom - cos * xi / nx2)
                        }
                    })
                    .collect()
            };
            if req(*a) {
                accumulate(grads, *a, Tensor::new(av.shape(), grad_of(&av, &bv, na2))?);
            }
            if req(*b) {
                accumulate(grads, *b, Tensor::new(bv.shape(), grad_of(&bv, &av, nb2))?);
            }
        }
    }
    Ok(())
}

/// `out (+)= A . B` for an `m x k` by `k x n` product with arbitrary strides
/// given as `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    // SAFETY: slice lengths cover every index reachable through the given
    // dimensions and strides, which callers derive from tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = t.data();
    if rank == 0 {
        return t.clone();
    }
    let last = rank - 1;
    let last_len = out_shape[last];
    let last_stride = strides[last];
    let mut produced = 0;
    while produced < n {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        produced += last_len;
        // odometer over all but the last axis
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute shape")
}

fn bcast_mode(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.iter().product::<usize>() == 1 {
        Ok(Bcast::Scalar)
    } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Ok(Bcast::Suffix)
    } else {
        Err(Error::shape(op, format!("{a:?} and {b:?} are not broadcast-compatible")))
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands recorded on different tapes"))
        }
    }

    fn binary(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs, op)?;
        let a = self.value();
        let b = rhs.value();
        let mode = bcast_mode(op, a.shape(), b.shape())?;
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bcast_get(b.data(), mode, i)))
            .collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(a.shape(), data)?, mk(self.id, rhs.id, mode), rg))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `(..., m, k) x (k, n)` or batched `(..., m, k) x (..., k, n)`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// `self . rhs^T` over the last two axes: `(..., m, k) x (..., n, k)`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&rhs, "matmul")?;
        let a = self.value();
        let b = rhs.value();
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}: rank < 2")));
        }
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        let (bk, n) = if trans_b {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!("{ash:?} x {bsh:?}: contraction dims {k} vs {bk}"),
            ));
        }
        let batch_dims = &ash[..ash.len() - 2];
        let batch: usize = batch_dims.iter().product();
        let shared_b = bsh.len() == 2;
        if !shared_b && &bsh[..bsh.len() - 2] != batch_dims {
            return Err(Error::shape(
                "matmul",
                format!("{ash:?} x {bsh:?}: batch dims differ"),
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = if shared_b { 0 } else { bi * k * n };
            let bstr = if trans_b { (1, k) } else { (n, 1) };
            gemm(
                m,
                k,
                n,
                &a.data()[ao..ao + m * k],
                (k, 1),
                &b.data()[bo..bo + k * n],
                bstr,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        let c = *a
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = a.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Ok(self.unary(Tensor::new(a.shape(), out)?, Op::Softmax(self.id)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma, "layer_norm")?;
        let x = self.value();
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        let gv = gamma.value();
        let bv = beta.value();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "features {c}, gamma {:?}, beta {:?}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Tensor::new(x.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Elementwise absolute value; the derivative at 0 is taken as 0.
    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(x) = a.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive element {x}"),
            });
        }
        Ok(self.unary(a.map(f64::ln), Op::Log(self.id)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", axis, base.len())?;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p, "concat")?;
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                let start = o * sz * inner;
                out.extend_from_slice(&v.data()[start..start + sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
                sizes,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        check_axis("slice", axis, shape.len())?;
        if start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut os = shape.to_vec();
        os[axis] = len;
        Ok(self.unary(
            Tensor::new(&os, out)?,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        check_axis("mean", axis, shape.len())?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *x += y;
                }
            }
        }
        for x in &mut out {
            *x /= n as f64;
        }
        let mut os = shape.to_vec();
        os.remove(axis);
        Ok(self.unary(Tensor::new(&os, out)?, Op::Mean { a: self.id, axis }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let v = permute_tensor(&a, perm);
        Ok(self.unary(
            v,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Row gather: views the input as rows of `row_len` contiguous elements
    /// and emits one row per `index` entry (`None` yields a zero row).
    pub fn gather(
        self,
        row_len: usize,
        index: Rc<Vec<Option<usize>>>,
        out_shape: &[usize],
    ) -> Result<Var<'t>> {
        let a = self.value();
        if row_len == 0 || a.numel() % row_len != 0 {
            return Err(Error::shape(
                "gather",
                format!("row length {row_len} does not divide {:?}", a.shape()),
            ));
        }
        let rows = a.numel() / row_len;
        if out_shape.iter().product::<usize>() != index.len() * row_len {
            return Err(Error::shape(
                "gather",
                format!("{} rows of {row_len} cannot fill {out_shape:?}", index.len()),
            ));
        }
        let mut out = Vec::with_capacity(index.len() * row_len);
        for slot in index.iter() {
            match slot {
                Some(s) if *s < rows => {
                    out.extend_from_slice(&a.data()[s * row_len..(s + 1) * row_len])
                }
                Some(s) => {
                    return Err(Error::shape(
                        "gather",
                        format!("row {s} out of range ({rows} rows)"),
                    ))
                }
                None => out.extend(std::iter::repeat(0.0).take(row_len)),
            }
        }
        Ok(self.unary(
            Tensor::new(out_shape, out)?,
            Op::Gather {
                a: self.id,
                row_len,
                index,
            },
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `target`,
    /// evaluated in the overflow-free logits form.
    pub fn bce_with_logits(self, target: Rc<Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", x.shape(), target.shape()),
            ));
        }
        let n = x.numel() as f64;
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: self.id,
                target,
            },
        ))
    }

    /// Cosine similarity of two equally shaped tensors viewed as vectors.
    /// The norm product is floored at [`COSINE_EPS`].
    pub fn cosine(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs, "cosine")?;
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "cosine",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let prod = (a.sq_norm() * b.sq_norm()).sqrt();
        let clamped = prod < COSINE_EPS;
        let cos = dot / prod.max(COSINE_EPS);
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            Tensor::scalar(cos),
            Op::Cosine {
                a: self.id,
                b: rhs.id,
                clamped,
            },
            rg,
        ))
    }
}
