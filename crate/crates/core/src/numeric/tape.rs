//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably for the whole forward pass,
//! so many tapes can run against the same parameters at once (one per
//! sentence). Parameter leaves are never copied; `backward` returns a
//! [`Gradients`] set keyed by parameter id that the caller reduces.

use rand::Rng;

use super::ops::{normalize, softmax_in_place};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule for a fused op: maps the output gradient to one gradient
/// buffer per input, in input order.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Param(ParamId),
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.params.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * c).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `[n × m] + [m]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let (r, c) = x.dims2();
        if b.len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", x.shape(), b.shape()),
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(p, q)| *p += q);
        }
        let t = Tensor::matrix(r, c, data)?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(t, Op::AddRow(a, bias), ng))
    }

    /// `[n × k] · [k × m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, k) = x.dims2();
        let (k2, m) = y.dims2();
        if k != k2 || y.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", x.shape(), y.shape()),
            ));
        }
        let data = matmul_nn(x.data(), y.data(), n, k, m);
        let t = Tensor::matrix(n, m, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `[n × k] · [m × k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, k) = x.dims2();
        let (m, k2) = y.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", x.shape(), y.shape()),
            ));
        }
        let data = matmul_nt(x.data(), y.data(), n, k, m);
        let t = Tensor::matrix(n, m, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMulT(a, b), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, op, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get probability
    /// zero in every row; at least one column must be allowed.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::shape("softmax_rows", format!("mask {} vs {c}", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidValue("softmax_rows: every key is masked".into()));
            }
        }
        let mut data = x.data().to_vec();
        let allowed: Vec<usize> = match key_mask {
            Some(m) => (0..c).filter(|&j| m[j]).collect(),
            None => (0..c).collect(),
        };
        let mut buf = vec![0.0; allowed.len()];
        for row in data.chunks_mut(c) {
            for (b, &j) in buf.iter_mut().zip(&allowed) {
                *b = row[j];
            }
            softmax_in_place(&mut buf);
            row.iter_mut().for_each(|v| *v = 0.0);
            for (b, &j) in buf.iter().zip(&allowed) {
                row[j] = *b;
            }
        }
        let t = Tensor::matrix(r, c, data)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::SoftmaxRows(a), ng))
    }

    /// Layer norm applied independently to each row.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::shape(
                "layer_norm_rows",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.data().chunks(c) {
            let (h, inv) = normalize(row, eps);
            for j in 0..c {
                out.push(h[j] * g.data()[j] + b.data()[j]);
            }
            xhat.extend(h);
            inv_std.push(inv);
        }
        let t = Tensor::matrix(r, c, out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows by index; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfBounds {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let t = Tensor::matrix(r, end - start, data)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::SliceCols(a, start, end), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let r = self.value(parts[0]).dims2().0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(Error::shape("concat_cols", format!("rows {pr} vs {r}")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let c = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pc != c {
                return Err(Error::shape("concat_rows", format!("cols {pc} vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Inverted dropout. Returns `a` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Dropout(a, mask), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Records a fused op whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom(inputs.to_vec(), backward), ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => out.add_into(*id, &g),
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, || mul(&g, y));
                    self.acc(&mut grads, *b, || mul(&g, x));
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, || g.iter().map(|v| v * c).collect()),
                Op::AddRow(a, bias) => {
                    self.acc(&mut grads, *a, || g.clone());
                    let c = self.value(*bias).len();
                    self.acc(&mut grads, *bias, || col_sums(&g, c));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k) = x.dims2();
                    let m = y.dims2().1;
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    self.acc(&mut grads, *a, || matmul_nt(&g, y.data(), n, m, k));
                    self.acc(&mut grads, *b, || matmul_tn(x.data(), &g, n, k, m));
                }
                Op::MatMulT(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k) = x.dims2();
                    let m = y.dims2().0;
                    // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    self.acc(&mut grads, *a, || matmul_nn(&g, y.data(), n, m, k));
                    self.acc(&mut grads, *b, || matmul_tn(&g, x.data(), n, m, k));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut grads, *a, || {
                        g.iter().zip(x).map(|(gv, &x)| gv * gelu_grad(x)).collect()
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    self.acc(&mut grads, *a, || {
                        g.iter().zip(y).map(|(gv, y)| gv * (1.0 - y * y)).collect()
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    self.acc(&mut grads, *a, || {
                        g.iter().zip(y).map(|(gv, y)| gv * y * (1.0 - y)).collect()
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let c = y.dims2().1;
                    self.acc(&mut grads, *a, || {
                        let mut dx = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                            dx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                        }
                        dx
                    });
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = self.value(*gamma).len();
                    let gam = self.value(*gamma).data();
                    self.acc(&mut grads, *gamma, || {
                        let mut dg = vec![0.0; c];
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        dg
                    });
                    self.acc(&mut grads, *beta, || col_sums(&g, c));
                    self.acc(&mut grads, *x, || {
                        let n = c as f64;
                        let mut dx = Vec::with_capacity(g.len());
                        for ((gr, hr), inv) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                            let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            dx.extend(
                                dh.iter()
                                    .zip(hr)
                                    .map(|(d, h)| inv / n * (n * d - sum_dh - h * sum_dh_h)),
                            );
                        }
                        dx
                    });
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let c = x.dims2().1;
                    self.acc(&mut grads, *a, || {
                        let mut dx = vec![0.0; x.len()];
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                dx[i * c + j] += g[r * c + j];
                            }
                        }
                        dx
                    });
                }
                Op::SliceCols(a, s, e) => {
                    let x = self.value(*a);
                    let c = x.dims2().1;
                    let w = e - s;
                    self.acc(&mut grads, *a, || {
                        let mut dx = vec![0.0; x.len()];
                        for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(w)) {
                            dr[*s..*e].copy_from_slice(gr);
                        }
                        dx
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.as_ref().unwrap().dims2().1;
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).dims2().1;
                        self.acc(&mut grads, p, || {
                            g.chunks(total)
                                .flat_map(|row| row[off..off + pc].iter().copied())
                                .collect()
                        });
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.acc(&mut grads, p, || g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Dropout(a, mask) => self.acc(&mut grads, *a, || mul(&g, mask)),
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.acc(&mut grads, *a, || vec![g[0]; n]);
                }
                Op::Custom(inputs, bw) => {
                    let parts = bw(&g);
                    debug_assert_eq!(parts.len(), inputs.len());
                    for (&inp, part) in inputs.iter().zip(parts) {
                        self.acc(&mut grads, inp, || part);
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let delta = f();
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Runs the backward pass of `tape` from `loss` and accumulates the result
/// into `params`' gradient buffers.
pub fn backward(loss: Var, tape: &Tape<'_>, params: &mut ParamStore) -> Result<()> {
    let grads = tape.backward(loss)?;
    params.accumulate(&grads)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p * q).collect()
}

fn col_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in g.chunks(c) {
        out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    out
}

/// `[n × k] · [k × m]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// `[n × k] · [m × k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(p, q)| p * q).sum();
        }
    }
    out
}

/// `[n × k]ᵀ · [n × m]` giving `[k × m]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * m..(p + 1) * m]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}
