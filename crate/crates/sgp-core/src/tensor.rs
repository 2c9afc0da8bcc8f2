//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! Design constraints, in order: correctness under finite-difference
//! checking, bitwise-deterministic results (including under internal
//! data parallelism), and enough throughput to train the desk-scale
//! model on a CPU. Storage and arithmetic are f32; every reduction
//! accumulates in f64.
//!
//! A tensor is an `Rc` handle onto an immutable value plus an optional
//! gradient buffer and a backward closure. Creation order doubles as a
//! topological order for the backward sweep, so node ids are just a
//! thread-local counter. Graphs are confined to one thread; parallelism
//! lives inside individual kernels and is structured per output row so
//! thread count never changes results.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f32])>;

struct Inner {
    id: u64,
    dims: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
    requires_grad: bool,
    /// f64 value of a scalar reduction, kept alongside the f32 store so
    /// the finite-difference oracle can subtract losses without f32
    /// cancellation noise.
    exact: Cell<Option<f64>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(dims={:?}, grad={})", self.dims(), self.requires_grad())
    }
}

fn numel_of(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    fn make(
        dims: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&dims), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward_fn) = if requires_grad {
            (parents, backward_fn)
        } else {
            (Vec::new(), None) // constant subgraph: prune the tape
        };
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                dims,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward_fn,
                requires_grad,
                exact: Cell::new(None),
            }),
        }
    }

    /// Fused scalar reduction: records the exact f64 value.
    pub(crate) fn scalar_op(value: f64, parents: Vec<Tensor>, backward_fn: BackwardFn) -> Tensor {
        let t = Tensor::make(vec![1], vec![value as f32], parents, Some(backward_fn));
        t.set_exact(value);
        t
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(dims: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert_eq!(numel_of(&dims), data.len(), "constant: dims/data mismatch");
        Tensor::make(dims, data, Vec::new(), None)
    }

    /// Trainable leaf: participates in backward and receives a gradient.
    pub fn param(dims: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert_eq!(numel_of(&dims), data.len(), "param: dims/data mismatch");
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                dims,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
                requires_grad: true,
                exact: Cell::new(None),
            }),
        }
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let n = numel_of(&dims);
        Tensor::constant(dims, vec![0.0; n])
    }

    pub fn full(dims: Vec<usize>, v: f32) -> Tensor {
        let n = numel_of(&dims);
        Tensor::constant(dims, vec![v; n])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.dims)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    /// Scalar value at full f64 precision when the producing reduction
    /// recorded one; falls back to the f32 store.
    pub fn item_f64(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item_f64() on non-scalar");
        self.inner
            .exact
            .get()
            .unwrap_or_else(|| self.inner.data.borrow()[0] as f64)
    }

    fn set_exact(&self, v: f64) {
        self.inner.exact.set(Some(v));
    }

    fn exact(&self) -> Option<f64> {
        self.inner.exact.get()
    }

    /// Overwrite the stored values. Only sensible on leaves between steps
    /// (optimizer updates, checkpoint restore).
    pub fn set_data(&self, new: &[f32]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data: length mismatch");
        d.copy_from_slice(new);
    }

    /// In-place elementwise update on a leaf.
    pub fn update_data(&self, f: impl FnMut(usize, &mut f32)) {
        let mut d = self.inner.data.borrow_mut();
        let mut f = f;
        for (i, v) in d.iter_mut().enumerate() {
            f(i, v);
        }
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, no history: gradients never flow through the result.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.dims.clone(), self.to_vec())
    }

    /// View with new dims over the same element count.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor> {
        if numel_of(&dims) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.dims(),
                dims
            )));
        }
        let src = self.clone();
        Ok(Tensor::make(
            dims,
            self.to_vec(),
            vec![self.clone()],
            Some(Box::new(move |g: &[f32]| src.accumulate_grad(g))),
        ))
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f32]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        debug_assert_eq!(buf.len(), contrib.len());
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += *c;
        }
    }

    pub(crate) fn accumulate_grad_with(&self, write: impl FnOnce(&mut [f32])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        write(buf);
    }

    /// Reverse-mode sweep from a scalar loss. Each reachable tape node is
    /// visited exactly once, children before parents; leaf gradients
    /// accumulate (a second call without `zero_grad` doubles them).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.dims()
            )));
        }
        if !self.requires_grad() {
            return Ok(()); // nothing reachable
        }
        // Collect ancestors, then replay in descending creation order.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accumulate_grad(&[1.0]);
        for node in &order {
            if let Some(f) = &node.inner.backward_fn {
                let g = node.inner.grad.borrow();
                if let Some(g) = g.as_ref() {
                    f(g);
                }
            }
        }
        // Leaf gradients persist and accumulate across sweeps; gradients of
        // interior nodes are scratch space for one sweep only.
        for node in &order {
            if node.inner.backward_fn.is_some() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────
//
// All kernels parallelize over output rows; each output element is reduced
// sequentially in f64, so results do not depend on thread count.

/// c[m,n] = a[m,k] · b[k,n]
pub(crate) fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut acc = vec![0.0f64; n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[t * n..t * n + n];
            for (ac, &bv) in acc.iter_mut().zip(brow) {
                *ac += av * bv as f64;
            }
        }
        for (o, ac) in row.iter_mut().zip(&acc) {
            *o = *ac as f32;
        }
    });
}

/// c[m,p] = a[m,k] · b[p,k]ᵀ  (rows dotted with rows)
pub(crate) fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, p: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * p);
    out.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            *o = acc as f32;
        }
    });
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), k * n);
    out.par_chunks_mut(n).enumerate().for_each(|(t, row)| {
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[i * n..i * n + n];
            for (ac, &bv) in acc.iter_mut().zip(brow) {
                *ac += av * bv as f64;
            }
        }
        for (o, ac) in row.iter_mut().zip(&acc) {
            *o = *ac as f32;
        }
    });
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Shape(format!("{what}: expected rank-2 tensor, got {other:?}"))),
    }
}

// ── differentiable operations ───────────────────────────────────────────

/// Matrix product a[m,k] · b[k,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner extents differ: lhs {:?} vs rhs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    mm_nn(&a.data(), &b.data(), m, k, n, &mut out);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::make(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g: &[f32]| {
            if pa.requires_grad() {
                let mut da = vec![0.0f32; m * k];
                mm_nt(g, &pb.data(), m, n, k, &mut da);
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0f32; k * n];
                mm_tn(&pa.data(), g, m, k, n, &mut db);
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

/// a[m,k] · b[p,k]ᵀ without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (p, k2) = dims2(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt: inner extents differ: lhs {:?} vs rhs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![0.0f32; m * p];
    mm_nt(&a.data(), &b.data(), m, k, p, &mut out);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::make(
        vec![m, p],
        out,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g: &[f32]| {
            if pa.requires_grad() {
                let mut da = vec![0.0f32; m * k];
                mm_nn(g, &pb.data(), m, p, k, &mut da);
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0f32; p * k];
                mm_tn(g, &pa.data(), m, p, k, &mut db);
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

/// Materialized 2-D transpose.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "transpose")?;
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::make(
        vec![n, m],
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            });
        })),
    ))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: shapes differ:.{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    let t = Tensor::make(
        a.dims().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g: &[f32]| {
            pa.accumulate_grad(g);
            pb.accumulate_grad(g);
        })),
    );
    if t.numel() == 1 {
        if let (Some(ea), Some(eb)) = (a.exact(), b.exact()) {
            t.set_exact(ea + eb);
        }
    }
    Ok(t)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::make(
        a.dims().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g: &[f32]| {
            pa.accumulate_grad(g);
            pb.accumulate_grad_with(|buf| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b -= *gv;
                }
            });
        })),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::make(
        a.dims().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g: &[f32]| {
            if pa.requires_grad() {
                let bd = pb.data();
                pa.accumulate_grad_with(|buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(bd.iter()) {
                        *o += gv * bv;
                    }
                });
            }
            if pb.requires_grad() {
                let ad = pa.data();
                pb.accumulate_grad_with(|buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(ad.iter()) {
                        *o += gv * av;
                    }
                });
            }
        })),
    ))
}

pub fn mul_scalar(x: &Tensor, s: f32) -> Tensor {
    let out: Vec<f32> = x.data().iter().map(|v| v * s).collect();
    let px = x.clone();
    let t = Tensor::make(
        x.dims().to_vec(),
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b += gv * s;
                }
            });
        })),
    );
    if t.numel() == 1 {
        if let Some(e) = x.exact() {
            t.set_exact(e * s as f64);
        }
    }
    t
}

pub fn relu(x: &Tensor) -> Tensor {
    let xd = x.to_vec();
    let out: Vec<f32> = xd.iter().map(|v| v.max(0.0)).collect();
    let px = x.clone();
    Tensor::make(
        x.dims().to_vec(),
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for ((b, gv), xv) in buf.iter_mut().zip(g).zip(&xd) {
                    if *xv > 0.0 {
                        *b += gv;
                    }
                }
            });
        })),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| (1.0 / (1.0 + (-v as f64).exp())) as f32)
        .collect();
    let saved = out.clone();
    let px = x.clone();
    Tensor::make(
        x.dims().to_vec(),
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for ((b, gv), sv) in buf.iter_mut().zip(g).zip(&saved) {
                    *b += gv * *sv * (1.0 - *sv);
                }
            });
        })),
    )
}

/// Row-wise softmax with max-shift; rows sum to 1 within 1e-6.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "softmax_rows")?;
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - mx) as f64).exp();
            out[i * n + j] = e as f32;
            sum += e;
        }
        for o in &mut out[i * n..(i + 1) * n] {
            *o = (*o as f64 / sum) as f32;
        }
    }
    drop(xd);
    let saved = out.clone();
    let px = x.clone();
    Ok(Tensor::make(
        vec![m, n],
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for i in 0..m {
                    let s = &saved[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut dot = 0.0f64;
                    for (sv, gv) in s.iter().zip(gr) {
                        dot += *sv as f64 * *gv as f64;
                    }
                    let b = &mut buf[i * n..(i + 1) * n];
                    for ((o, sv), gv) in b.iter_mut().zip(s).zip(gr) {
                        *o += (*sv as f64 * (*gv as f64 - dot)) as f32;
                    }
                }
            });
        })),
    ))
}

/// Per-row layer normalization over the last axis with learned gain/bias.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n) = dims2(x, "layer_norm input")?;
    if gamma.dims() != [n] || beta.dims() != [n] {
        return Err(Error::Shape(format!(
            "layer_norm: gain/bias must be [{n}], got {:?} and {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0f32; m * n];
    let mut xhat = vec![0.0f32; m * n];
    let mut inv_std = vec![0.0f64; m];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..n {
            let h = ((row[j] as f64 - mean) * inv) as f32;
            xhat[i * n + j] = h;
            out[i * n + j] = h * gd[j] + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::make(
        vec![m, n],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Some(Box::new(move |g: &[f32]| {
            let gd = pg.data();
            if px.requires_grad() {
                px.accumulate_grad_with(|buf| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        // dgy = gamma ⊙ g; dx = (dgy − mean(dgy) − x̂·mean(dgy⊙x̂))·inv_std
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..n {
                            let dgy = gd[j] as f64 * gr[j] as f64;
                            s1 += dgy;
                            s2 += dgy * xh[j] as f64;
                        }
                        s1 /= n as f64;
                        s2 /= n as f64;
                        let b = &mut buf[i * n..(i + 1) * n];
                        for j in 0..n {
                            let dgy = gd[j] as f64 * gr[j] as f64;
                            b[j] += ((dgy - s1 - xh[j] as f64 * s2) * inv_std[i]) as f32;
                        }
                    }
                });
            }
            drop(gd);
            if pg.requires_grad() {
                pg.accumulate_grad_with(|buf| {
                    for (j, b) in buf.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[i * n + j] as f64 * xhat[i * n + j] as f64;
                        }
                        *b += acc as f32;
                    }
                });
            }
            if pb.requires_grad() {
                pb.accumulate_grad_with(|buf| {
                    for (j, b) in buf.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[i * n + j] as f64;
                        }
                        *b += acc as f32;
                    }
                });
            }
        })),
    ))
}

/// Bias indexed by row: out[i,j] = x[i,j] + b[i]  (channel-major layouts).
pub fn add_bias_rows(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "add_bias_rows input")?;
    if bias.numel() != m {
        return Err(Error::Shape(format!(
            "add_bias_rows: bias {:?} does not match {m} rows",
            bias.dims()
        )));
    }
    let bd = bias.data();
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let bv = bd[i];
        for j in 0..n {
            out[i * n + j] = xd[i * n + j] + bv;
        }
    }
    drop(bd);
    drop(xd);
    let (px, pb) = (x.clone(), bias.clone());
    Ok(Tensor::make(
        vec![m, n],
        out,
        vec![x.clone(), bias.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad(g);
            if pb.requires_grad() {
                pb.accumulate_grad_with(|buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += g[i * n + j] as f64;
                        }
                        *b += acc as f32;
                    }
                });
            }
        })),
    ))
}

/// Bias indexed by column: out[i,j] = x[i,j] + b[j]  (token-major layouts).
pub fn add_bias_cols(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "add_bias_cols input")?;
    if bias.numel() != n {
        return Err(Error::Shape(format!(
            "add_bias_cols: bias {:?} does not match {n} cols",
            bias.dims()
        )));
    }
    let bd = bias.data();
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = xd[i * n + j] + bd[j];
        }
    }
    drop(bd);
    drop(xd);
    let (px, pb) = (x.clone(), bias.clone());
    Ok(Tensor::make(
        vec![m, n],
        out,
        vec![x.clone(), bias.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad(g);
            if pb.requires_grad() {
                pb.accumulate_grad_with(|buf| {
                    for (j, b) in buf.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[i * n + j] as f64;
                        }
                        *b += acc as f32;
                    }
                });
            }
        })),
    ))
}

/// Concatenate along rows: inputs [n_i, d] → [Σn_i, d].
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Param("concat_rows: no inputs".into()));
    }
    let (_, d) = dims2(&parts[0], "concat_rows input")?;
    let mut rows = 0;
    for p in parts {
        let (m, dp) = dims2(p, "concat_rows input")?;
        if dp != d {
            return Err(Error::Shape(format!(
                "concat_rows: column counts differ: {d} vs {dp}"
            )));
        }
        rows += m;
    }
    let mut out = Vec::with_capacity(rows * d);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let owned: Vec<Tensor> = parts.to_vec();
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let owned2 = owned.clone();
    Ok(Tensor::make(
        vec![rows, d],
        out,
        owned,
        Some(Box::new(move |g: &[f32]| {
            let mut off = 0;
            for (p, sz) in owned2.iter().zip(&sizes) {
                p.accumulate_grad(&g[off..off + sz]);
                off += sz;
            }
        })),
    ))
}

/// Rows [start, start+len) of x.
pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = dims2(x, "slice_rows")?;
    if start + len > m {
        return Err(Error::Shape(format!(
            "slice_rows: rows {start}..{} out of bounds for {m} rows",
            start + len
        )));
    }
    let out = x.data()[start * n..(start + len) * n].to_vec();
    let px = x.clone();
    Ok(Tensor::make(
        vec![len, n],
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for (b, gv) in buf[start * n..(start + len) * n].iter_mut().zip(g) {
                    *b += gv;
                }
            });
        })),
    ))
}

/// out[i,j] = gate[i]·attn[i,j] + residual[i,j].
///
/// A gate of exactly 0 passes the residual through bit-for-bit (the
/// product is skipped, not multiplied out), which the mask-attention
/// identity relies on.
pub fn scale_rows_add(attn: &Tensor, gate: &Tensor, residual: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(attn, "scale_rows_add attn")?;
    same_shape(attn, residual, "scale_rows_add residual")?;
    if gate.numel() != m {
        return Err(Error::Shape(format!(
            "scale_rows_add: gate {:?} does not match {m} rows",
            gate.dims()
        )));
    }
    let ad = attn.data();
    let gd = gate.data();
    let rd = residual.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let gv = gd[i];
        let (a, r, o) = (
            &ad[i * n..(i + 1) * n],
            &rd[i * n..(i + 1) * n],
            &mut out[i * n..(i + 1) * n],
        );
        if gv == 0.0 {
            o.copy_from_slice(r);
        } else {
            for j in 0..n {
                o[j] = gv * a[j] + r[j];
            }
        }
    }
    drop(ad);
    drop(gd);
    drop(rd);
    let (pa, pg, pr) = (attn.clone(), gate.clone(), residual.clone());
    Ok(Tensor::make(
        vec![m, n],
        out,
        vec![attn.clone(), gate.clone(), residual.clone()],
        Some(Box::new(move |g: &[f32]| {
            if pa.requires_grad() {
                let gd = pg.data();
                pa.accumulate_grad_with(|buf| {
                    for i in 0..m {
                        let gv = gd[i];
                        for j in 0..n {
                            buf[i * n + j] += gv * g[i * n + j];
                        }
                    }
                });
            }
            if pg.requires_grad() {
                let ad = pa.data();
                pg.accumulate_grad_with(|buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += ad[i * n + j] as f64 * g[i * n + j] as f64;
                        }
                        *b += acc as f32;
                    }
                });
            }
            pr.accumulate_grad(g);
        })),
    ))
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let n = x.numel();
    let px = x.clone();
    let out = Tensor::make(
        vec![1],
        vec![s as f32],
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            let gv = g[0];
            px.accumulate_grad_with(|buf| {
                for b in buf.iter_mut().take(n) {
                    *b += gv;
                }
            });
        })),
    );
    out.set_exact(s);
    out
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let px = x.clone();
    let out = Tensor::make(
        vec![1],
        vec![(s / n as f64) as f32],
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            let gv = g[0] / n as f32;
            px.accumulate_grad_with(|buf| {
                for b in buf.iter_mut() {
                    *b += gv;
                }
            });
        })),
    );
    out.set_exact(s / n as f64);
    out
}

/// Σ x², squared and accumulated in f64 (exact enough for the
/// finite-difference oracle on quadratics).
pub fn sum_squares(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
    let px = x.clone();
    let out = Tensor::make(
        vec![1],
        vec![s as f32],
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            let gv = g[0];
            let xd = px.to_vec();
            px.accumulate_grad_with(|buf| {
                for (b, xv) in buf.iter_mut().zip(&xd) {
                    *b += gv * 2.0 * xv;
                }
            });
        })),
    );
    out.set_exact(s);
    out
}

// ── spatial operations ──────────────────────────────────────────────────

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::Shape(format!("{what}: expected rank-3 tensor, got {other:?}"))),
    }
}

/// Unfold x[C,H,W] into columns [C·k·k, oh·ow] with zero padding k/2.
pub fn im2col(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "im2col")?;
    if stride < 1 {
        return Err(Error::Param("im2col: stride must be >= 1".into()));
    }
    if k % 2 == 0 || k == 0 {
        return Err(Error::Param(format!("im2col: kernel extent must be odd, got {k}")));
    }
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "im2col: input {h}x{w} smaller than kernel {k}x{k}"
        )));
    }
    let pad = k / 2;
    let oh = (h - k + 2 * pad) / stride + 1;
    let ow = (w - k + 2 * pad) / stride + 1;
    let rows = c * k * k;
    let cols = oh * ow;
    let xd_guard = x.data();
    let xd: &[f32] = &xd_guard;
    let mut out = vec![0.0f32; rows * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(r, dst)| {
        let ci = r / (k * k);
        let ki = (r / k) % k;
        let kj = r % k;
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let iy = (oy * stride + ki) as isize - pad as isize;
            for ox in 0..ow {
                let ix = (ox * stride + kj) as isize - pad as isize;
                dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                {
                    plane[iy as usize * w + ix as usize]
                } else {
                    0.0
                };
            }
        }
    });
    drop(xd_guard);
    let px = x.clone();
    Ok(Tensor::make(
        vec![rows, cols],
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                buf.par_chunks_mut(h * w).enumerate().for_each(|(ci, plane)| {
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = ci * k * k + ki * k + kj;
                            let grow = &g[r * cols..(r + 1) * cols];
                            for oy in 0..oh {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    plane[iy as usize * w + ix as usize] += grow[oy * ow + ox];
                                }
                            }
                        }
                    }
                });
            });
        })),
    ))
}

/// 2-D convolution, odd kernel, zero padding k/2, any stride ≥ 1.
/// kernels are stored flattened as [C', C·k·k].
pub fn conv2d(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, k: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "conv2d input")?;
    if stride < 1 {
        return Err(Error::Param("conv2d: stride must be >= 1".into()));
    }
    let (co, ckk) = dims2(kernels, "conv2d kernels")?;
    if ckk != c * k * k {
        return Err(Error::Shape(format!(
            "conv2d: kernels {:?} incompatible with input {:?} and k={k}",
            kernels.dims(),
            x.dims()
        )));
    }
    let pad = k / 2;
    let oh = (h - k + 2 * pad) / stride + 1;
    let ow = (w - k + 2 * pad) / stride + 1;
    let col = im2col(x, k, stride)?;
    let out = matmul(kernels, &col)?;
    let out = match bias {
        Some(b) => add_bias_rows(&out, b)?,
        None => out,
    };
    out.reshape(vec![co, oh, ow])
}

/// Non-overlapping p×p patch extraction: x[C,H,W] → [nh·nw, C·p·p].
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "patchify")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "patchify: spatial extents {h}x{w} not divisible by patch {p}; \
             valid inputs are multiples of {p}"
        )));
    }
    let (nh, nw) = (h / p, w / p);
    let n = nh * nw;
    let d = c * p * p;
    let xd = x.data();
    let mut out = vec![0.0f32; n * d];
    for ty in 0..nh {
        for tx in 0..nw {
            let t = ty * nw + tx;
            for ci in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[t * d + ci * p * p + dy * p + dx] =
                            xd[ci * h * w + (ty * p + dy) * w + (tx * p + dx)];
                    }
                }
            }
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::make(
        vec![n, d],
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                for ty in 0..nh {
                    for tx in 0..nw {
                        let t = ty * nw + tx;
                        for ci in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    buf[ci * h * w + (ty * p + dy) * w + (tx * p + dx)] +=
                                        g[t * d + ci * p * p + dy * p + dx];
                                }
                            }
                        }
                    }
                }
            });
        })),
    ))
}

fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    // align-corners mapping; identity when src == dst
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                (0, 0, 0.0)
            } else {
                let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            }
        })
        .collect()
}

/// Bilinear resample x[C,H,W] → [C,h,w] (align-corners; exact identity at
/// the same size, constants stay constant).
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = dims3(x, "resize_bilinear")?;
    if h == 0 || w == 0 {
        return Err(Error::Param("resize_bilinear: target extents must be >= 1".into()));
    }
    let ys = bilinear_axis(sh, h);
    let xs = bilinear_axis(sw, w);
    let xd = x.data();
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &xd[ci * sh * sw..(ci + 1) * sh * sw];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = plane[y0 * sw + x0] as f64;
                let v01 = plane[y0 * sw + x1] as f64;
                let v10 = plane[y1 * sw + x0] as f64;
                let v11 = plane[y1 * sw + x1] as f64;
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[oy * w + ox] = (top + (bot - top) * fy) as f32;
            }
        }
    }
    drop(xd);
    let px = x.clone();
    let (ys2, xs2) = (ys, xs);
    Ok(Tensor::make(
        vec![c, h, w],
        out,
        vec![x.clone()],
        Some(Box::new(move |g: &[f32]| {
            px.accumulate_grad_with(|buf| {
                buf.par_chunks_mut(sh * sw).enumerate().for_each(|(ci, plane)| {
                    let gp = &g[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys2.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs2.iter().enumerate() {
                            let gv = gp[oy * w + ox] as f64;
                            plane[y0 * sw + x0] += (gv * (1.0 - fy) * (1.0 - fx)) as f32;
                            plane[y0 * sw + x1] += (gv * (1.0 - fy) * fx) as f32;
                            plane[y1 * sw + x0] += (gv * fy * (1.0 - fx)) as f32;
                            plane[y1 * sw + x1] += (gv * fy * fx) as f32;
                        }
                    }
                });
            });
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t2(rows: usize, cols: usize, vals: &[f32]) -> Tensor {
        Tensor::constant(vec![rows, cols], vals.to_vec())
    }

    fn randn(dims: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        Tensor::param(dims, data)
    }

    #[test]
    fn matmul_identity_is_bitwise_exact() {
        let a = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let i = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let left = matmul(&i, &a).unwrap();
        let right = matmul(&a, &i).unwrap();
        assert_eq!(left.to_vec(), a.to_vec());
        assert_eq!(right.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_zero_rhs_gives_zero() {
        let mut rng = Rng::new(1);
        let a = randn(vec![3, 4], &mut rng);
        let z = Tensor::zeros(vec![4, 2]);
        let c = matmul(&a, &z).unwrap();
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = Rng::new(2);
        let a = randn(vec![3, 5], &mut rng);
        let b = randn(vec![4, 5], &mut rng);
        let via_nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &transpose(&b).unwrap()).unwrap();
        for (x, y) in via_nt.to_vec().iter().zip(via_t.to_vec()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let x = t2(1, 2, &[0.0, 0.0]);
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);

        for c in [-3.0f32, 0.0, 2.5] {
            let x = t2(1, 3, &[c, c, c]);
            let s = softmax_rows(&x).unwrap();
            for v in s.to_vec() {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let x = t2(1, 2, &[std::f32::consts::LN_2, 0.0]);
        let s = softmax_rows(&x).unwrap().to_vec();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant_fuzz() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let x = randn(vec![4, 7], &mut rng).detach();
            let s = softmax_rows(&x).unwrap();
            let sd = s.to_vec();
            for i in 0..4 {
                let sum: f32 = sd[i * 7..(i + 1) * 7].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            let c = rng.range(-5.0, 5.0) as f32;
            let shifted =
                Tensor::constant(vec![4, 7], x.to_vec().iter().map(|v| v + c).collect());
            let s2 = softmax_rows(&shifted).unwrap().to_vec();
            for (a, b) in sd.iter().zip(&s2) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv2d_one_by_one_stride_two_subsamples() {
        let x = Tensor::constant(
            vec![1, 4, 4],
            (0..16).map(|v| v as f32).collect(),
        );
        let k = t2(1, 1, &[1.0]);
        let y = conv2d(&x, &k, None, 1, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv2d_ones_kernel_interior_tap_count() {
        let x = Tensor::full(vec![1, 5, 5], 1.0);
        let k = Tensor::constant(vec![1, 9], vec![1.0; 9]);
        let y = conv2d(&x, &k, None, 3, 1).unwrap();
        assert_eq!(y.dims(), &[1, 5, 5]);
        let yd = y.to_vec();
        assert_eq!(yd[2 * 5 + 2], 9.0); // interior: all taps inside
        assert_eq!(yd[0], 4.0); // corner: 2x2 taps inside
    }

    #[test]
    fn conv2d_zero_kernel_zero_output() {
        let mut rng = Rng::new(4);
        let x = randn(vec![2, 6, 6], &mut rng).detach();
        let k = Tensor::zeros(vec![3, 2 * 9]);
        let y = conv2d(&x, &k, None, 3, 1).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_stride_zero_is_parameter_error() {
        let x = Tensor::zeros(vec![1, 4, 4]);
        let k = t2(1, 1, &[1.0]);
        let err = conv2d(&x, &k, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(vec![1, 3, 5], 0.7);
        for (h, w) in [(1, 1), (3, 5), (7, 2), (10, 10)] {
            let y = resize_bilinear(&x, h, w).unwrap();
            for v in y.to_vec() {
                assert!((v - 0.7).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let mut rng = Rng::new(5);
        let x = randn(vec![2, 4, 6], &mut rng).detach();
        let y = resize_bilinear(&x, 4, 6).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn resize_columns_interpolate_linearly() {
        let x = Tensor::constant(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let y = resize_bilinear(&x, 2, 4).unwrap();
        let yd = y.to_vec();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in 0..2 {
            for (j, e) in expect.iter().enumerate() {
                assert!((yd[row * 4 + j] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_linear_loss_gradient_structure() {
        // loss = sum(W·x): dW[i,t] = x[t] in every row
        let w = Tensor::param(vec![3, 2], vec![0.5; 6]);
        let x = t2(2, 1, &[2.0, -1.5]);
        let loss = sum_all(&matmul(&w, &x).unwrap());
        loss.backward().unwrap();
        let g = w.grad().unwrap();
        for i in 0..3 {
            assert_eq!(g[i * 2], 2.0);
            assert_eq!(g[i * 2 + 1], -1.5);
        }
    }

    #[test]
    fn backward_unreached_param_gets_no_grad() {
        let p = Tensor::param(vec![2], vec![1.0, 2.0]);
        let q = Tensor::param(vec![2], vec![3.0, 4.0]);
        let loss = sum_all(&mul_scalar(&q, 2.0));
        loss.backward().unwrap();
        assert!(p.grad().is_none());
        assert_eq!(q.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let w = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let x = t2(2, 1, &[1.0, 1.0]);
        let build = || sum_all(&matmul(&w, &x).unwrap());
        let loss = build();
        loss.backward().unwrap();
        let single = w.grad().unwrap();
        loss.backward().unwrap();
        let double = w.grad().unwrap();
        for (s, d) in single.iter().zip(&double) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let run = || {
            let mut rng = Rng::new(77);
            let w = randn(vec![8, 8], &mut rng);
            let x = randn(vec![8, 8], &mut rng).detach();
            let y = matmul(&w, &x).unwrap();
            let s = softmax_rows(&y).unwrap();
            let loss = mean_all(&s);
            loss.backward().unwrap();
            w.grad().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn visits_shared_node_once() {
        // y = x + x reuses the same parent twice; grad must be 2, not 4.
        let x = Tensor::param(vec![1], vec![3.0]);
        let y = add(&x, &x).unwrap();
        let loss = sum_all(&y);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn scale_rows_add_zero_gate_is_bitwise_passthrough() {
        let mut rng = Rng::new(6);
        let attn = randn(vec![4, 3], &mut rng).detach();
        let res = randn(vec![4, 3], &mut rng).detach();
        let gate = Tensor::zeros(vec![4]);
        let out = scale_rows_add(&attn, &gate, &res).unwrap();
        assert_eq!(out.to_vec(), res.to_vec());
    }

    #[test]
    fn patchify_roundtrip_structure() {
        let x = Tensor::constant(vec![1, 4, 4], (0..16).map(|v| v as f32).collect());
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.dims(), &[4, 4]);
        // first patch is the top-left 2x2 block
        assert_eq!(&t.to_vec()[0..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let x = Tensor::zeros(vec![1, 5, 4]);
        assert!(patchify(&x, 2).is_err());
    }
}
