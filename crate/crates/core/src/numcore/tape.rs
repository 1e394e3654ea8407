//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and the
//! identifiers of its operands. Nodes are only ever appended after their
//! operands, so the tape order is a topological order and the backward
//! sweep is a single reverse pass over it.
//!
//! Broadcasting is restricted to leading dimensions: in `add_bcast` and
//! `mul_bcast` the right operand's shape must equal a suffix of the left
//! operand's shape. Trailing dimensions never broadcast.

use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    SelectLast {
        x: Var,
        index: usize,
        width: usize,
    },
    OuterSum {
        s: Var,
        t: Var,
        n: usize,
    },
    MaskedSoftmax {
        x: Var,
        mask: Arc<[bool]>,
        n: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records one forward evaluation for a later backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a copy of a trainable tensor on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng, "mul")
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(self.value(b).len())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("add_bcast", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % inner])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddBcast(a, b), ng, "add_bcast")
    }

    /// `a ∘ b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("mul_bcast", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tb.data()[i % inner])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulBcast(a, b), ng, "mul_bcast")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, c), ng, "scale")
    }

    /// Matrix product over the last two dimensions.
    ///
    /// Supported forms: `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]` and `[B,m,k]·[k,n]`
    /// (right operand shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (batch, m, k, n, shared_rhs, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], true, vec![sa[0], sb[1]]),
            (3, 2) if sa[2] == sb[0] => {
                (sa[0], sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]])
            }
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                gemm_nn(ta, tb, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm_nn(
                        &ta[bi * m * k..(bi + 1) * m * k],
                        &tb[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let v = Tensor::new(out_shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(
            v,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            ng,
            "matmul",
        )
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(Error::Shape {
                    op: "transpose",
                    left: s,
                    right: vec![],
                })
            }
        };
        let data = transpose_data(self.value(x).data(), batch, rows, cols);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let v = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        self.push(
            v,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            ng,
            "transpose",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng, "reshape")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng, "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(x);
        self.push(v, Op::LeakyRelu(x, slope), ng, "leaky_relu")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng, "sum")
    }

    /// Picks entry `index` of the last dimension, dropping that dimension.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::Shape {
            op: "select_last",
            left: s.clone(),
            right: vec![index],
        })?;
        if index >= width {
            return Err(Error::Shape {
                op: "select_last",
                left: s,
                right: vec![index],
            });
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(width)
            .map(|row| row[index])
            .collect();
        let v = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        let ng = self.needs(x);
        self.push(v, Op::SelectLast { x, index, width }, ng, "select_last")
    }

    /// `out[b,i,j] = s[b,i] + t[b,j]` for `s`, `t` of shape `[B,n]`.
    pub fn outer_sum(&mut self, s: Var, t: Var) -> Result<Var> {
        self.same_shape("outer_sum", s, t)?;
        let shape = self.shape(s).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "outer_sum",
                left: shape.clone(),
                right: shape,
            });
        }
        let (batch, n) = (shape[0], shape[1]);
        let (ts, tt) = (self.value(s).data(), self.value(t).data());
        let mut out = Vec::with_capacity(batch * n * n);
        for b in 0..batch {
            for i in 0..n {
                let si = ts[b * n + i];
                out.extend(tt[b * n..(b + 1) * n].iter().map(|&tj| si + tj));
            }
        }
        let v = Tensor::new(vec![batch, n, n], out)?;
        let ng = self.needs(s) || self.needs(t);
        self.push(v, Op::OuterSum { s, t, n }, ng, "outer_sum")
    }

    /// Row-wise softmax over `[B,n,n]` restricted to entries where `mask`
    /// (`n×n`, shared across the batch) is set; masked-out entries are 0.
    /// Each row is shifted by its masked maximum before exponentiation.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != s[2] || mask.len() != s[1] * s[2] {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: s,
                right: vec![mask.len()],
            });
        }
        let n = s[1];
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for (row_idx, (row, o)) in xs.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let i = row_idx % n;
            let m = &mask[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..n {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    denom += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= denom;
            }
        }
        let v = Tensor::new(s, out)?;
        let ng = self.needs(x);
        self.push(v, Op::MaskedSoftmax { x, mask, n }, ng, "masked_softmax")
    }

    /// `Σ‖pred_b − target_b‖² / B`: the squared error summed over every
    /// non-batch dimension, averaged over the leading batch dimension.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let batch = self.shape(pred).first().copied().unwrap_or(1).max(1);
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq)?;
        self.scale(total, 1.0 / batch as f64)
    }

    /// Reverse sweep from a scalar `loss`. Parameters not reachable from the
    /// loss receive zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = out[id.index()].data_mut();
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, || g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    self.accumulate(&mut grads, *b, || g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Op::AddBcast(a, b) => {
                    let inner = self.value(*b).len();
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || reduce_leading(&g, inner));
                }
                Op::MulBcast(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let inner = vb.len();
                    self.accumulate(&mut grads, *a, || {
                        g.iter()
                            .enumerate()
                            .map(|(i, g)| g * vb[i % inner])
                            .collect()
                    });
                    self.accumulate(&mut grads, *b, || {
                        let prod: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                        reduce_leading(&prod, inner)
                    });
                }
                Op::Scale(x, c) => {
                    self.accumulate(&mut grads, *x, || g.iter().map(|v| v * c).collect());
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, || {
                        let mut ga = vec![0.0; batch * m * k];
                        if *shared_rhs {
                            gemm_nt(&g, vb, &mut ga, batch * m, n, k);
                        } else {
                            for bi in 0..batch {
                                gemm_nt(
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &vb[bi * k * n..(bi + 1) * k * n],
                                    &mut ga[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                        ga
                    });
                    self.accumulate(&mut grads, *b, || {
                        if *shared_rhs {
                            let mut gb = vec![0.0; k * n];
                            gemm_tn(va, &g, &mut gb, batch * m, k, n);
                            gb
                        } else {
                            let mut gb = vec![0.0; batch * k * n];
                            for bi in 0..batch {
                                gemm_tn(
                                    &va[bi * m * k..(bi + 1) * m * k],
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &mut gb[bi * k * n..(bi + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                            gb
                        }
                    });
                }
                Op::Transpose {
                    x,
                    batch,
                    rows,
                    cols,
                } => {
                    self.accumulate(&mut grads, *x, || transpose_data(&g, *batch, *cols, *rows));
                }
                Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, || g.clone());
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *x, || {
                        g.iter()
                            .zip(y)
                            .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                            .collect()
                    });
                }
                Op::LeakyRelu(x, slope) => {
                    let xs = self.value(*x).data();
                    self.accumulate(&mut grads, *x, || {
                        g.iter()
                            .zip(xs)
                            .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                            .collect()
                    });
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut grads, *x, || vec![g[0]; n]);
                }
                Op::SelectLast { x, index, width } => {
                    self.accumulate(&mut grads, *x, || {
                        let mut gx = vec![0.0; g.len() * width];
                        for (r, gv) in g.iter().enumerate() {
                            gx[r * width + index] = *gv;
                        }
                        gx
                    });
                }
                Op::OuterSum { s, t, n } => {
                    let n = *n;
                    let batch = g.len() / (n * n);
                    self.accumulate(&mut grads, *s, || {
                        let mut gs = vec![0.0; batch * n];
                        for b in 0..batch {
                            for i in 0..n {
                                let row = &g[(b * n + i) * n..(b * n + i + 1) * n];
                                gs[b * n + i] = row.iter().fold(0.0, |acc, v| acc + v);
                            }
                        }
                        gs
                    });
                    self.accumulate(&mut grads, *t, || {
                        let mut gt = vec![0.0; batch * n];
                        for b in 0..batch {
                            for i in 0..n {
                                let row = &g[(b * n + i) * n..(b * n + i + 1) * n];
                                for (dst, v) in gt[b * n..(b + 1) * n].iter_mut().zip(row) {
                                    *dst += v;
                                }
                            }
                        }
                        gt
                    });
                }
                Op::MaskedSoftmax { x, mask, n } => {
                    let n = *n;
                    let y = node.value.data();
                    self.accumulate(&mut grads, *x, || {
                        let mut gx = vec![0.0; y.len()];
                        for (row_idx, ((yr, gr), out)) in y
                            .chunks(n)
                            .zip(g.chunks(n))
                            .zip(gx.chunks_mut(n))
                            .enumerate()
                        {
                            let i = row_idx % n;
                            let m = &mask[i * n..(i + 1) * n];
                            let inner = (0..n)
                                .filter(|&j| m[j])
                                .fold(0.0, |acc, j| acc + yr[j] * gr[j]);
                            for j in 0..n {
                                if m[j] {
                                    out[j] = yr[j] * (gr[j] - inner);
                                }
                            }
                        }
                        gx
                    });
                }
            }
        }

        for (id, g) in store.ids().zip(&out) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, make: impl FnOnce() -> Vec<f64>) {
        if !self.needs(target) {
            return;
        }
        let contribution = make();
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Sums a `[outer, inner]` buffer over its leading dimension.
fn reduce_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn transpose_data(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = x[off + i * cols + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn relu_and_leaky_relu() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(Tensor::from_vec(vec![-1.0]));
        let l = tape.leaky_relu(y, 0.2).unwrap();
        assert_eq!(tape.value(l).data(), &[-0.2]);
    }

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get(id).item(), Some(6.0));
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let unused = store.add("unused", Tensor::ones(&[2, 2]));
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(unused), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(c, &store), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
        let c = tape.constant(Tensor::ones(&[3, 2]));
        assert!(tape.add(a, c).is_err());
        // trailing dims never broadcast
        let d = tape.constant(Tensor::ones(&[2]));
        assert!(tape.add_bcast(a, d).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![f64::MAX]));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mask: Arc<[bool]> = vec![true, false, true, true, true, false, false, false, true].into();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 1.7).sin() * 50.0));
        let y = tape.masked_softmax(x, mask.clone()).unwrap();
        for (r, row) in tape.value(y).data().chunks(3).enumerate() {
            let i = r % 3;
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..3 {
                if !mask[i * 3 + j] {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}
