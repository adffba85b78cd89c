//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable building block of the fusion adapter, the causal
//! decoder and the losses lives here, together with a central
//! finite-difference gradient checker. Storage is row-major, values are
//! always 64-bit floats, and graphs are single-threaded tapes of `Rc` nodes.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{LumError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static ATTN_ENTRIES: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Reset the attention-entry instrumentation counter.
pub fn attn_entries_reset() {
    ATTN_ENTRIES.with(|c| c.set(0));
}

/// Number of attention score entries computed since the last reset.
pub fn attn_entries() -> u64 {
    ATTN_ENTRIES.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense row-major tensor; cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("data", &*self.inner.data.borrow())
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[1], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; shape.iter().product()], shape, false)
    }

    fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite value in forward op");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Overwrite the values of a leaf tensor (optimizer step, FD probing).
    pub fn set_data(&self, data: &[f64]) {
        assert!(self.inner.parents.is_empty(), "set_data only on leaves");
        assert_eq!(data.len(), self.len());
        self.inner.data.borrow_mut().copy_from_slice(data);
    }

    pub fn nudge(&self, idx: usize, delta: f64) {
        assert!(self.inner.parents.is_empty(), "nudge only on leaves");
        self.inner.data.borrow_mut()[idx] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep seeded with d(self)/d(self) = 1 for scalars.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        self.backward_with(&[1.0]);
    }

    pub fn backward_with(&self, seed: &[f64]) {
        assert_eq!(seed.len(), self.len());
        // Iterative topological order over the tape.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if !seen.insert(node.inner.id) {
                    continue;
                }
            }
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if !seen.contains(&parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(seed);
        for node in order.iter().rev() {
            if let Some(bw) = &node.inner.backward {
                let g = node.inner.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and arithmetic primitives
// ---------------------------------------------------------------------------

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape("add", a, b);
    let data: Vec<f64> = a
        .inner
        .data
        .borrow()
        .iter()
        .zip(b.inner.data.borrow().iter())
        .map(|(x, y)| x + y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g);
            }
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    add(a, &scale(b, -1.0))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape("mul", a, b);
    let data: Vec<f64> = a
        .inner
        .data
        .borrow()
        .iter()
        .zip(b.inner.data.borrow().iter())
        .map(|(x, y)| x * y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.requires_grad() {
                let bd = pb.inner.data.borrow();
                let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, y)| gi * y).collect();
                drop(bd);
                pa.accumulate_grad(&ga);
            }
            if pb.requires_grad() {
                let ad = pa.inner.data.borrow();
                let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, x)| gi * x).collect();
                drop(ad);
                pb.accumulate_grad(&gb);
            }
        }),
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.inner.data.borrow().iter().map(|x| x * c).collect();
    let pa = a.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| {
            let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.inner.data.borrow().iter().map(|x| x + c).collect();
    let pa = a.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| pa.accumulate_grad(g)),
    )
}

/// Add a constant (non-differentiable) buffer, e.g. an additive mask.
pub fn add_const(a: &Tensor, c: &[f64]) -> Tensor {
    assert_eq!(a.len(), c.len(), "add_const length mismatch");
    let data: Vec<f64> = a
        .inner
        .data
        .borrow()
        .iter()
        .zip(c.iter())
        .map(|(x, y)| x + y)
        .collect();
    let pa = a.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| pa.accumulate_grad(g)),
    )
}

macro_rules! unary_op {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(a: &Tensor) -> Tensor {
            let data: Vec<f64> = a.inner.data.borrow().iter().map($fwd).collect();
            let pa = a.clone();
            let out = data.clone();
            Tensor::from_op(
                data,
                a.shape().to_vec(),
                vec![a.clone()],
                Box::new(move |g| {
                    let xd = pa.inner.data.borrow();
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * $bwd(xd[i], out[i]))
                        .collect();
                    drop(xd);
                    pa.accumulate_grad(&ga);
                }),
            )
        }
    };
}

unary_op!(exp, |x: &f64| x.exp(), |_x: f64, y: f64| y);
unary_op!(log, |x: &f64| x.ln(), |x: f64, _y: f64| 1.0 / x);
unary_op!(sqrt, |x: &f64| x.sqrt(), |_x: f64, y: f64| 0.5 / y);
unary_op!(tanh, |x: &f64| x.tanh(), |_x: f64, y: f64| 1.0 - y * y);
unary_op!(sigmoid, |x: &f64| sigmoid_f(*x), |_x: f64, y: f64| y * (1.0 - y));
unary_op!(recip, |x: &f64| 1.0 / x, |x: f64, _y: f64| -1.0 / (x * x));
unary_op!(silu, |x: &f64| x * sigmoid_f(*x), |x: f64, _y: f64| {
    let s = sigmoid_f(x);
    s + x * s * (1.0 - s)
});
unary_op!(softplus, |x: &f64| softplus_f(*x), |x: f64, _y: f64| sigmoid_f(x));

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sum(a: &Tensor) -> Tensor {
    let s: f64 = a.inner.data.borrow().iter().sum();
    let pa = a.clone();
    let n = a.len();
    Tensor::from_op(
        vec![s],
        vec![1],
        vec![a.clone()],
        Box::new(move |g| {
            let ga = vec![g[0]; n];
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    scale(&sum(a), 1.0 / a.len() as f64)
}

/// Column-wise mean over the rows of a matrix: [n, d] -> [d].
pub fn mean_rows(a: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 2, "mean_rows expects a matrix");
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let ad = a.inner.data.borrow();
    let mut out = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            out[c] += ad[r * d + c];
        }
    }
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    drop(ad);
    let pa = a.clone();
    Tensor::from_op(
        out,
        vec![d],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * d];
            for r in 0..n {
                for c in 0..d {
                    ga[r * d + c] = g[c] / n as f64;
                }
            }
            pa.accumulate_grad(&ga);
        }),
    )
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// out[m,n] += a[k,m]^T · b[k,n]
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// out[m,k] = a[m,n] · b[k,n]^T
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(LumError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let data = matmul_raw(&a.inner.data.borrow(), &b.inner.data.borrow(), m, k, n);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.requires_grad() {
                // dA = dC · B^T
                let ga = matmul_nt_raw(g, &pb.inner.data.borrow(), m, n, k);
                pa.accumulate_grad(&ga);
            }
            if pb.requires_grad() {
                // dB = A^T · dC
                let gb = matmul_tn_raw(&pa.inner.data.borrow(), g, m, k, n);
                pb.accumulate_grad(&gb);
            }
        }),
    ))
}

pub fn transpose(a: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 2, "transpose expects a matrix");
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.inner.data.borrow();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    drop(ad);
    let pa = a.clone();
    Tensor::from_op(
        out,
        vec![n, m],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            pa.accumulate_grad(&ga);
        }),
    )
}

/// Dot product of two equal-length vectors, returns a scalar tensor.
pub fn dot(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape("dot", a, b);
    sum(&mul(a, b))
}

// ---------------------------------------------------------------------------
// Row-structured primitives
// ---------------------------------------------------------------------------

fn rows_of(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [d] => (1, *d),
        [n, d] => (*n, *d),
        s => panic!("expected vector or matrix, got {s:?}"),
    }
}

/// Softmax along the last axis, max-subtracted for stability.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let (n, d) = rows_of(a);
    let ad = a.inner.data.borrow();
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &ad[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (x - m).exp();
            s += *o;
        }
        for o in out[r * d..(r + 1) * d].iter_mut() {
            *o /= s;
        }
    }
    drop(ad);
    let pa = a.clone();
    let saved = out.clone();
    Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * d];
            for r in 0..n {
                let p = &saved[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dotpg: f64 = p.iter().zip(gr).map(|(pi, gi)| pi * gi).sum();
                for c in 0..d {
                    ga[r * d + c] = p[c] * (gr[c] - dotpg);
                }
            }
            pa.accumulate_grad(&ga);
        }),
    )
}

/// Per-row standardization (population variance, eps inside the sqrt)
/// followed by an elementwise affine with `gain` and `bias` of length d.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = rows_of(x);
    if d < 2 {
        return Err(LumError::Dimension(format!(
            "layer_norm requires row width >= 2, got {d}"
        )));
    }
    assert_eq!(gain.len(), d, "layer_norm gain length");
    assert_eq!(bias.len(), d, "layer_norm bias length");
    let xd = x.inner.data.borrow();
    let gd = gain.inner.data.borrow();
    let bd = bias.inner.data.borrow();
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_sigma = vec![0.0; n];
    for r in 0..n {
        let row = &xd[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let isg = 1.0 / (var + eps).sqrt();
        inv_sigma[r] = isg;
        for c in 0..d {
            let xh = (row[c] - mu) * isg;
            xhat[r * d + c] = xh;
            out[r * d + c] = gd[c] * xh + bd[c];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g| {
            let gd = pg.inner.data.borrow();
            if px.requires_grad() {
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    // dxhat = dy * gain
                    let dxhat: Vec<f64> = (0..d).map(|c| gr[c] * gd[c]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        gx[r * d + c] =
                            inv_sigma[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                    }
                }
                px.accumulate_grad(&gx);
            }
            drop(gd);
            if pg.requires_grad() {
                let mut gg = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        gg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
                pg.accumulate_grad(&gg);
            }
            if pb.requires_grad() {
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += g[r * d + c];
                    }
                }
                pb.accumulate_grad(&gb);
            }
        }),
    ))
}

/// Row lookup into an embedding table; backward scatter-adds.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Tensor {
    assert_eq!(table.shape().len(), 2, "gather_rows expects a table");
    let (v, d) = (table.shape()[0], table.shape()[1]);
    for &i in indices {
        assert!(i < v, "gather index {i} out of range {v}");
    }
    let td = table.inner.data.borrow();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&td[i * d..(i + 1) * d]);
    }
    drop(td);
    let pt = table.clone();
    let idx = indices.to_vec();
    Tensor::from_op(
        out,
        vec![indices.len(), d],
        vec![table.clone()],
        Box::new(move |g| {
            let mut gt = vec![0.0; v * d];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    gt[i * d + c] += g[r * d + c];
                }
            }
            pt.accumulate_grad(&gt);
        }),
    )
}

/// Stack row tensors (each [d] or [r, d] with equal d) into one matrix.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let d = rows_of(&parts[0]).1;
    let mut data = Vec::new();
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, pd) = rows_of(p);
        assert_eq!(pd, d, "concat_rows width mismatch");
        row_counts.push(r);
        data.extend_from_slice(&p.inner.data.borrow());
    }
    let total: usize = row_counts.iter().sum();
    let owned: Vec<Tensor> = parts.to_vec();
    let counts = row_counts.clone();
    Tensor::from_op(
        data,
        vec![total, d],
        owned.clone(),
        Box::new(move |g| {
            let mut offset = 0;
            for (p, &r) in owned.iter().zip(&counts) {
                if p.requires_grad() {
                    p.accumulate_grad(&g[offset..offset + r * d]);
                }
                offset += r * d;
            }
        }),
    )
}

/// Stack scalar tensors into one vector.
pub fn stack_scalars(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "stack_scalars of nothing");
    let data: Vec<f64> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.len(), 1, "stack_scalars expects scalars");
            p.inner.data.borrow()[0]
        })
        .collect();
    let owned: Vec<Tensor> = parts.to_vec();
    Tensor::from_op(
        data,
        vec![parts.len()],
        owned.clone(),
        Box::new(move |g| {
            for (i, p) in owned.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate_grad(&[g[i]]);
                }
            }
        }),
    )
}

pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Tensor {
    let (n, d) = rows_of(a);
    assert!(start < end && end <= n, "slice_rows range {start}..{end} of {n}");
    let data = a.inner.data.borrow()[start * d..end * d].to_vec();
    let pa = a.clone();
    Tensor::from_op(
        data,
        vec![end - start, d],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * d];
            ga[start * d..end * d].copy_from_slice(g);
            pa.accumulate_grad(&ga);
        }),
    )
}

/// Last row of a matrix as a [d] vector.
pub fn last_row(a: &Tensor) -> Tensor {
    let (n, d) = rows_of(a);
    let r = slice_rows(a, n - 1, n);
    reshape(&r, &[d])
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(a.len(), shape.iter().product::<usize>(), "reshape size");
    let pa = a.clone();
    Tensor::from_op(
        a.data(),
        shape.to_vec(),
        vec![a.clone()],
        Box::new(move |g| pa.accumulate_grad(g)),
    )
}

pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Tensor {
    let (n, d) = rows_of(a);
    assert!(start < end && end <= d, "slice_cols range {start}..{end} of {d}");
    let w = end - start;
    let ad = a.inner.data.borrow();
    let mut out = Vec::with_capacity(n * w);
    for r in 0..n {
        out.extend_from_slice(&ad[r * d + start..r * d + end]);
    }
    drop(ad);
    let pa = a.clone();
    Tensor::from_op(
        out,
        vec![n, w],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * d];
            for r in 0..n {
                ga[r * d + start..r * d + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let n = rows_of(&parts[0]).0;
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (r, w) = rows_of(p);
            assert_eq!(r, n, "concat_cols row mismatch");
            w
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; n * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.inner.data.borrow();
        for r in 0..n {
            data[r * total + offset..r * total + offset + w]
                .copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let owned: Vec<Tensor> = parts.to_vec();
    Tensor::from_op(
        data,
        vec![n, total],
        owned.clone(),
        Box::new(move |g| {
            let mut offset = 0;
            for (p, &w) in owned.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut gp = vec![0.0; n * w];
                    for r in 0..n {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    p.accumulate_grad(&gp);
                }
                offset += w;
            }
        }),
    )
}

/// Rotary position transform: consecutive dim pairs of row i rotated by
/// angle theta_j * positions[i], theta_j = base^(-2j/d).
pub fn rope(a: &Tensor, positions: &[f64], base: f64) -> Tensor {
    let (n, d) = rows_of(a);
    assert_eq!(positions.len(), n, "rope positions length");
    assert_eq!(d % 2, 0, "rope requires even width");
    let half = d / 2;
    let thetas: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / d as f64))
        .collect();
    let ad = a.inner.data.borrow();
    let mut out = vec![0.0; n * d];
    let mut cs = vec![0.0; n * half];
    let mut sn = vec![0.0; n * half];
    for r in 0..n {
        for j in 0..half {
            let ang = thetas[j] * positions[r];
            let (s, c) = ang.sin_cos();
            cs[r * half + j] = c;
            sn[r * half + j] = s;
            let x0 = ad[r * d + 2 * j];
            let x1 = ad[r * d + 2 * j + 1];
            out[r * d + 2 * j] = x0 * c - x1 * s;
            out[r * d + 2 * j + 1] = x0 * s + x1 * c;
        }
    }
    drop(ad);
    let pa = a.clone();
    Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * d];
            for r in 0..n {
                for j in 0..half {
                    let c = cs[r * half + j];
                    let s = sn[r * half + j];
                    let g0 = g[r * d + 2 * j];
                    let g1 = g[r * d + 2 * j + 1];
                    // inverse rotation
                    ga[r * d + 2 * j] = g0 * c + g1 * s;
                    ga[r * d + 2 * j + 1] = -g0 * s + g1 * c;
                }
            }
            pa.accumulate_grad(&ga);
        }),
    )
}

/// Mean token-level cross entropy of logits [L, V] against target indices.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Tensor {
    let (l, v) = rows_of(logits);
    assert_eq!(targets.len(), l, "cross_entropy target length");
    let ld = logits.inner.data.borrow();
    let mut probs = vec![0.0; l * v];
    let mut loss = 0.0;
    for r in 0..l {
        let row = &ld[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
            *p = (x - m).exp();
            s += *p;
        }
        for p in probs[r * v..(r + 1) * v].iter_mut() {
            *p /= s;
        }
        loss += s.ln() + m - row[targets[r]];
    }
    loss /= l as f64;
    drop(ld);
    let pl = logits.clone();
    let tg = targets.to_vec();
    Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gl = probs.clone();
            for (r, &t) in tg.iter().enumerate() {
                gl[r * v + t] -= 1.0;
            }
            for x in gl.iter_mut() {
                *x *= g[0] / l as f64;
            }
            pl.accumulate_grad(&gl);
        }),
    )
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Boolean visibility mask over [Lq, Lk] attention scores.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub lq: usize,
    pub lk: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn causal(l: usize) -> AttnMask {
        let mut allow = vec![false; l * l];
        for i in 0..l {
            for j in 0..=i {
                allow[i * l + j] = true;
            }
        }
        AttnMask { lq: l, lk: l, allow }
    }

    fn additive(&self) -> Result<Vec<f64>> {
        let mut add = vec![0.0; self.lq * self.lk];
        for r in 0..self.lq {
            let row = &self.allow[r * self.lk..(r + 1) * self.lk];
            if !row.iter().any(|&b| b) {
                return Err(LumError::InvalidMask { row: r });
            }
            for (c, &ok) in row.iter().enumerate() {
                if !ok {
                    add[r * self.lk + c] = -1e30;
                }
            }
        }
        Ok(add)
    }
}

/// Scaled dot-product attention: softmax(q k^T / sqrt(d) + mask) v.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    let (lq, d) = rows_of(q);
    let (lk, dk) = rows_of(k);
    let (lv, _dv) = rows_of(v);
    if d != dk || lk != lv {
        return Err(LumError::ShapeMismatch {
            op: "attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    ATTN_ENTRIES.with(|c| c.set(c.get() + (lq * lk) as u64));
    let scores = scale(&matmul(q, &transpose(k))?, 1.0 / (d as f64).sqrt());
    let scores = match mask {
        Some(m) => {
            if m.lq != lq || m.lk != lk {
                return Err(LumError::ShapeMismatch {
                    op: "attention mask",
                    left: vec![m.lq, m.lk],
                    right: vec![lq, lk],
                });
            }
            add_const(&scores, &m.additive()?)
        }
        None => scores,
    };
    let weights = softmax_rows(&scores);
    matmul(&weights, v)
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

/// Numerically stable log(sum(exp(x))) over all entries.
pub fn log_sum_exp(x: &Tensor) -> Tensor {
    let m = x
        .inner
        .data
        .borrow()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    add_scalar(&log(&sum(&exp(&add_scalar(x, -m)))), m)
}

/// Euclidean norm of a vector as a scalar tensor.
pub fn norm(x: &Tensor) -> Tensor {
    sqrt(&sum(&mul(x, x)))
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Tensor {
    mul(&dot(a, b), &recip(&mul(&norm(a), &norm(b))))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: Vec<(usize, usize, f64, f64, f64)>, // (param, element, analytic, numeric, rel)
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences at the given leaf tensors.
pub fn grad_check<F>(f: F, points: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(LumError::Contract(format!(
            "grad_check step must be in (0, 1e-2], got {step}"
        )));
    }
    let out = f(points);
    if out.len() != 1 {
        return Err(LumError::Contract(format!(
            "grad_check requires a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    for p in points {
        p.zero_grad();
    }
    out.backward();
    let analytic: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    for (pi, p) in points.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        for ei in 0..p.len() {
            p.nudge(ei, step);
            let hi = f(points).item();
            p.nudge(ei, -2.0 * step);
            let lo = f(points).item();
            p.nudge(ei, step);
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs())).max(1e-3);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > tolerance {
                report.failures.push((pi, ei, a, numeric, rel));
            }
        }
    }
    Ok(report)
}
