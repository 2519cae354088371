//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::gradients`] on a scalar result replays the tape backwards and
//! accumulates vector-Jacobian products into every node that depends on a
//! parameter or a differentiable input.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, numel, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize },
    Softmax(usize),
    LayerNorm(usize),
    Silu(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { src: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Operation tape. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
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
    names: Vec<(String, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// participate.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    /// Gradients of named parameters that appear on the tape.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.names {
            let g = self.grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[*id]));
            match out.get_mut(name) {
                Some(acc) => *acc = acc.add(&g).expect("same parameter, same shape"),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            name,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, None)
    }

    /// An unnamed differentiable input.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, None)
    }

    /// A named trainable parameter.
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, Some(name.to_string()))
    }

    /// Register `name` from the store on this tape.
    pub fn param_from(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?;
        Ok(self.param(name, t.clone()))
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let needs = parts.iter().any(|p| self.needs(p.id));
        Ok(self.push(
            out,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            needs,
            None,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.as_ref();
            let mut send = |i: usize, t: Tensor| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, g.sum_to_shape(val(*a).shape())?);
                    send(*b, g.sum_to_shape(val(*b).shape())?);
                }
                Op::Sub(a, b) => {
                    send(*a, g.sum_to_shape(val(*a).shape())?);
                    send(*b, g.scale(-1.0).sum_to_shape(val(*b).shape())?);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].needs_grad {
                        send(*a, g.mul(vb)?.sum_to_shape(va.shape())?);
                    }
                    if nodes[*b].needs_grad {
                        send(*b, g.mul(va)?.sum_to_shape(vb.shape())?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(val(*a), val(*b), &g);
                    if nodes[*a].needs_grad {
                        send(*a, ga);
                    }
                    if nodes[*b].needs_grad {
                        send(*b, gb);
                    }
                }
                Op::Conv2d { x, w } => {
                    let (gx, gw) = conv2d_backward(val(*x), val(*w), &g);
                    if nodes[*x].needs_grad {
                        send(*x, gx);
                    }
                    if nodes[*w].needs_grad {
                        send(*w, gw);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref();
                    let n = *y.shape().last().unwrap_or(&1);
                    let mut out = vec![0.0; y.numel()];
                    for ((o, yr), gr) in out
                        .chunks_mut(n)
                        .zip(y.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for i in 0..n {
                            o[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    send(*a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::LayerNorm(a) => {
                    let x = val(*a);
                    let n = *x.shape().last().unwrap_or(&1);
                    let nf = n as f64;
                    let mut out = vec![0.0; x.numel()];
                    for ((o, xr), gr) in out
                        .chunks_mut(n)
                        .zip(x.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let mu = xr.iter().sum::<f64>() / nf;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr
                            .iter()
                            .zip(xr)
                            .map(|(gv, xv)| gv * (xv - mu) * inv)
                            .sum();
                        for i in 0..n {
                            let xhat = (xr[i] - mu) * inv;
                            o[i] = inv / nf * (nf * gr[i] - sum_g - xhat * sum_gx);
                        }
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), out)?);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let out = x.zip_with(&g, |xv, gv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })?;
                    send(*a, out);
                }
                Op::Reshape(a) => {
                    send(*a, g.reshape(val(*a).shape())?);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(*a, g.permute(&inv)?);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if nodes[p].needs_grad {
                            send(p, g.narrow(*axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let src_shape = val(*src).shape().to_vec();
                    let len = g.shape()[*axis];
                    let mut parts: Vec<Tensor> = Vec::new();
                    if *start > 0 {
                        let mut s = src_shape.clone();
                        s[*axis] = *start;
                        parts.push(Tensor::zeros(&s));
                    }
                    parts.push(g.clone());
                    let rest = src_shape[*axis] - start - len;
                    if rest > 0 {
                        let mut s = src_shape.clone();
                        s[*axis] = rest;
                        parts.push(Tensor::zeros(&s));
                    }
                    let refs: Vec<&Tensor> = parts.iter().collect();
                    send(*src, Tensor::concat(&refs, *axis)?);
                }
                Op::Sum(a) => {
                    let s = g.item()?;
                    send(*a, Tensor::full(val(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let s = g.item()? / x.numel() as f64;
                    send(*a, Tensor::full(x.shape(), s));
                }
            }
        }

        let names = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, i)))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            names,
            shapes,
        })
    }

    /// Gradients for every parameter in `store`, zero-filled for parameters
    /// that did not participate in computing `loss`.
    pub fn backward(&self, loss: Var<'_>, store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.gradients(loss)?.named();
        let mut out = BTreeMap::new();
        for (name, p) in store.iter() {
            let g = grads
                .get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decomposes matmul operands into (batch, m, k, n, b_shared).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2, got {a:?} @ {b:?}")));
    }
    let k = a[a.len() - 1];
    if b[b.len() - 2] != k {
        return Err(Error::shape(format!("matmul inner mismatch {a:?} @ {b:?}")));
    }
    let n = b[b.len() - 1];
    if b.len() == 2 {
        let m = numel(&a[..a.len() - 1]);
        return Ok((1, m, k, n, true));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape(format!("matmul batch mismatch {a:?} @ {b:?}")));
    }
    Ok((numel(&a[..a.len() - 2]), a[a.len() - 2], k, n, false))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, _) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        let bs = if b.rank() == 2 { 0 } else { bi * k * n };
        gemm_acc(
            &ad[bi * m * k..(bi + 1) * m * k],
            &bd[bs..bs + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(n);
    Tensor::new(shape, out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, n, shared) =
        matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for bi in 0..batch {
        let bs = if shared { 0 } else { bi * k * n };
        let gslice = &gd[bi * m * n..(bi + 1) * m * n];
        // dA = G @ B^T
        gemm_nt_acc(
            gslice,
            &bd[bs..bs + k * n],
            &mut ga[bi * m * k..(bi + 1) * m * k],
            m,
            n,
            k,
        );
        // dB = A^T @ G
        gemm_tn_acc(
            &ad[bi * m * k..(bi + 1) * m * k],
            gslice,
            &mut gb[bs..bs + k * n],
            k,
            m,
            n,
        );
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2].is_multiple_of(2) || w[3].is_multiple_of(2) {
        return Err(Error::shape(format!(
            "conv2d expects x (N,Cin,H,W) and odd-kernel w (Cout,Cin,kh,kw), got {x:?} and {w:?}"
        )));
    }
    Ok(ConvDims {
        n: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        kh: w[2],
        kw: w[3],
    })
}

/// Column buffer of shape (cin*kh*kw, h*w) for one image, zero padded.
fn im2col(img: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let hw = d.h * d.w;
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..d.h {
                    let sy = y as isize + ki as isize - ph as isize;
                    for x in 0..d.w {
                        let sx = x as isize + kj as isize - pw as isize;
                        dst[y * d.w + x] = if sy >= 0
                            && sx >= 0
                            && (sy as usize) < d.h
                            && (sx as usize) < d.w
                        {
                            img[(c * d.h + sy as usize) * d.w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc(col: &[f64], d: &ConvDims, img: &mut [f64]) {
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let hw = d.h * d.w;
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..d.h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy as usize >= d.h {
                        continue;
                    }
                    for x in 0..d.w {
                        let sx = x as isize + kj as isize - pw as isize;
                        if sx < 0 || sx as usize >= d.w {
                            continue;
                        }
                        img[(c * d.h + sy as usize) * d.w + sx as usize] += src[y * d.w + x];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x.shape(), w.shape())?;
    let hw = d.h * d.w;
    let kk = d.cin * d.kh * d.kw;
    let mut col = vec![0.0; kk * hw];
    let mut out = vec![0.0; d.n * d.cout * hw];
    for i in 0..d.n {
        im2col(&x.data()[i * d.cin * hw..(i + 1) * d.cin * hw], &d, &mut col);
        gemm_acc(
            w.data(),
            &col,
            &mut out[i * d.cout * hw..(i + 1) * d.cout * hw],
            d.cout,
            kk,
            hw,
        );
    }
    Tensor::new(vec![d.n, d.cout, d.h, d.w], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = conv_dims(x.shape(), w.shape()).expect("validated in forward");
    let hw = d.h * d.w;
    let kk = d.cin * d.kh * d.kw;
    let mut col = vec![0.0; kk * hw];
    let mut dcol = vec![0.0; kk * hw];
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for i in 0..d.n {
        let gi = &g.data()[i * d.cout * hw..(i + 1) * d.cout * hw];
        im2col(&x.data()[i * d.cin * hw..(i + 1) * d.cin * hw], &d, &mut col);
        // dW += G (cout, hw) @ col^T (hw, kk)
        gemm_nt_acc(gi, &col, &mut gw, d.cout, hw, kk);
        // dcol = W^T (kk, cout) @ G (cout, hw)
        dcol.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn_acc(w.data(), gi, &mut dcol, kk, d.cout, hw);
        col2im_acc(&dcol, &d, &mut gx[i * d.cin * hw..(i + 1) * d.cin * hw]);
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
    )
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(self.id);
        self.graph.push(value, op, needs, None)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(value, op, needs, None)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        let c = self.graph.constant(Tensor::scalar(s));
        self.mul(c)
    }

    /// `(.., m, k) @ (k, n)` or batched `(b.., m, k) @ (b.., k, n)`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = matmul_forward(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// Stride-1, zero-padded "same" convolution. `self` is (N, Cin, H, W).
    pub fn conv2d(&self, weight: Var<'g>) -> Result<Var<'g>> {
        let v = conv2d_forward(&self.value(), &weight.value())?;
        Ok(self.binary(
            weight,
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::shape("softmax on scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm(&self) -> Result<Var<'g>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(v, Op::LayerNorm(self.id)))
    }

    pub fn silu(&self) -> Result<Var<'g>> {
        let v = self.value().map(|x| x * sigmoid(x));
        Ok(self.unary(v, Op::Silu(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let v = self.value().permute(perm)?;
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.unary(
            v,
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().sum());
        Ok(self.unary(v, Op::Sum(self.id)))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().mean());
        Ok(self.unary(v, Op::Mean(self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use crate::numerics::rng::SeededRng;

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        rng.uniform_tensor(shape, -1.0, 1.0)
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.sub(b).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
            + b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            2.0 * num / den
        }
    }

    /// Gradient of `f` w.r.t. its single input, via the tape and via finite
    /// differences; returns the relative error.
    fn check(x: Tensor, f: impl Fn(Var<'_>) -> Result<Var<'_>>) -> f64 {
        let g = Graph::new();
        let v = g.input(x.clone());
        let loss = f(v).unwrap();
        let analytic = g.gradients(loss).unwrap().wrt(v);
        let numeric = finite_difference_gradient(
            |t| {
                let g = Graph::new();
                let v = g.input(t.clone());
                f(v).unwrap().value().item().unwrap()
            },
            &x,
            1e-5,
        );
        rel_err(&analytic, &numeric)
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1., 2., 3.]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        assert_eq!(g.gradients(loss).unwrap().wrt(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-4., 0.5, 9.]));
        let loss = x.sum().unwrap();
        assert_eq!(g.gradients(loss).unwrap().wrt(x).data(), &[1., 1., 1.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1., 2.]));
        assert!(matches!(g.gradients(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let m = rand_tensor(&mut rng, &[4, 5]);
        let bias = rand_tensor(&mut rng, &[5]);
        let other = rand_tensor(&mut rng, &[2, 3, 4]);
        #[allow(clippy::type_complexity)]
        let cases: Vec<(&str, Tensor, Box<dyn Fn(Var<'_>) -> Result<Var<'_>>>)> = vec![
            ("conv2d", rand_tensor(&mut rng, &[2, 2, 4, 5]), {
                let w = w.clone();
                Box::new(move |x| {
                    let wv = x.graph().constant(w.clone());
                    let y = x.conv2d(wv)?;
                    y.mul(y)?.sum()
                })
            }),
            ("conv2d weight", w.clone(), {
                let mut r = SeededRng::new(3);
                let x0 = rand_tensor(&mut r, &[1, 2, 3, 3]);
                Box::new(move |wv| {
                    let x = wv.graph().constant(x0.clone());
                    let y = x.conv2d(wv)?;
                    y.mul(y)?.sum()
                })
            }),
            ("matmul+bias", rand_tensor(&mut rng, &[3, 4]), {
                let (m, bias) = (m.clone(), bias.clone());
                Box::new(move |x| {
                    let g = x.graph();
                    let y = x.matmul(g.constant(m.clone()))?.add(g.constant(bias.clone()))?;
                    y.silu()?.mul(y)?.sum()
                })
            }),
            ("batched matmul", rand_tensor(&mut rng, &[2, 2, 3]), {
                let o = other.clone();
                Box::new(move |x| {
                    let y = x.matmul(x.graph().constant(o.clone()))?;
                    y.mul(y)?.mean()
                })
            }),
            ("softmax", rand_tensor(&mut rng, &[3, 4]), {
                let m = m.clone();
                Box::new(move |x| {
                    let y = x.softmax()?;
                    y.matmul(x.graph().constant(m.clone()))?.sum()
                })
            }),
            ("layer_norm", rand_tensor(&mut rng, &[3, 6]), {
                let c = rand_tensor(&mut rng, &[3, 6]);
                Box::new(move |x| x.layer_norm()?.mul(x.graph().constant(c.clone()))?.sum())
            }),
            ("permute/reshape/narrow/concat", rand_tensor(&mut rng, &[2, 3, 4]), {
                let c = rand_tensor(&mut rng, &[4, 5, 2]);
                Box::new(move |x| {
                    let p = x.permute(&[2, 0, 1])?; // (4,2,3)
                    let r = p.reshape(&[4, 6])?;
                    let a = r.narrow(1, 1, 3)?;
                    let cat = x.graph().concat(&[a, r.narrow(1, 0, 2)?], 1)?; // (4,5)
                    let y = cat.reshape(&[4, 5, 1])?.mul(x.graph().constant(c.clone()))?;
                    y.mul(y)?.sum()
                })
            }),
            ("sub/broadcast mul", rand_tensor(&mut rng, &[3, 1]), {
                let c = rand_tensor(&mut rng, &[2, 3, 4]);
                Box::new(move |x| {
                    let k = x.graph().constant(c.clone());
                    let y = k.sub(x)?.mul(x)?;
                    y.mul(y)?.mean()
                })
            }),
        ];
        for (name, x, f) in cases {
            let err = check(x, f);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn backward_zero_fills_unused_params() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        store.insert("unused", Tensor::from_vec(vec![5.0])).unwrap();
        let g = Graph::new();
        let u = g.param_from(&store, "used").unwrap();
        let loss = u.mul(u).unwrap().sum().unwrap();
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads["used"].data(), &[2.0, 4.0]);
        assert_eq!(grads["unused"].data(), &[0.0]);
    }
}
