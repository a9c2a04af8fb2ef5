//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs already live on the tape, so the
//! node order is a topological order and backward is a single reverse sweep.
//! Any op that produces a NaN or infinity fails immediately with the op name.

use crate::tensor::{gemm, Lanes, Layout, Scalar, Tensor, TensorError};

/// Stabiliser used by both layer norm and RMS norm.
pub const NORM_EPS: f64 = 1e-5;
/// Floor on the norm inside the spherical projection.
pub const SPHERE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a fused multi-head attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub seq_len: usize,
    /// Positions (within each sequence) that issue queries, in output order.
    pub query_positions: Vec<usize>,
    /// Replace every pre-softmax score with zero.
    pub uniform: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
        eps: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    RmsNorm {
        x: Var,
        gamma: Var,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], add: impl FnOnce(&mut [T])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    add(t.data_mut());
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Attention weights saved by an attention node, laid out as
    /// `[batch][query][head][key]` with masked keys set to zero.
    pub fn attention_weights(&self, var: Var) -> Option<&[T]> {
        match &self.nodes[var.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, requires_grad: bool) -> Result<Var, TensorError> {
        check_finite(op, &value)?;
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, TensorError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != [xv.last_dim()] {
            return Err(TensorError::shape(
                "add_row",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, bv.data());
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_row", out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::from_f64(c);
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v * c).collect())?;
        let rg = self.rg(x);
        self.push("scale", out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.max(T::zero())).collect(),
        )?;
        let rg = self.rg(x);
        self.push("relu", out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let lanes = Lanes::new(xv.shape(), axis, "softmax")?;
        let mut data = xv.data().to_vec();
        for l in 0..lanes.count() {
            softmax_lane(&mut data, lanes.indices(l));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("softmax", out, Op::Softmax { x, axis }, rg)
    }

    /// `x / max(‖x‖₂, eps)` for every slice along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        let eps = T::from_f64(eps);
        let xv = self.value(x);
        let lanes = Lanes::new(xv.shape(), axis, "l2_normalize")?;
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(lanes.count());
        for l in 0..lanes.count() {
            let sq: T = lanes.indices(l).map(|i| data[i] * data[i]).sum();
            let n = sq.sqrt();
            let denom = n.max(eps);
            for i in lanes.indices(l) {
                data[i] = data[i] / denom;
            }
            norms.push(n);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("l2_normalize", out, Op::L2Normalize { x, axis, norms, eps }, rg)
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gamma {:?} beta {:?} for width {d}", gv.shape(), bv.shape()),
            ));
        }
        let eps = T::from_f64(NORM_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        let (gam, bet) = (gv.data(), bv.data());
        let mut centered = vec![T::zero(); d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = sum(row) * inv_d;
            for (c, v) in centered.iter_mut().zip(row) {
                *c = *v - mean;
            }
            let rs = T::one() / (dot(&centered, &centered) * inv_d + eps).sqrt();
            rstd.push(rs);
            xhat.extend(centered.iter().map(|c| *c * rs));
            let h = &xhat[r * d..];
            out.extend(h.iter().zip(gam).zip(bet).map(|((h, g), b)| *h * *g + *b));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// RMS norm over the last axis with gain `gamma`.
    pub fn rms_norm(&mut self, x: Var, gamma: Var) -> Result<Var, TensorError> {
        let (xv, gv) = (self.value(x), self.value(gamma));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(TensorError::shape(
                "rms_norm",
                format!("gamma {:?} for width {d}", gv.shape()),
            ));
        }
        let eps = T::from_f64(NORM_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let rows = xv.rows();
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let ms = dot(row, row) * inv_d;
            let rs = T::one() / (ms + eps).sqrt();
            rstd.push(rs);
            out.extend(row.iter().zip(gv.data()).map(|(v, g)| *v * rs * *g));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma);
        self.push("rms_norm", out, Op::RmsNorm { x, gamma, rstd }, rg)
    }

    /// Embedding lookup: row `indices[i]` of a 2-D table becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (n, d) = tv.as_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![indices.len(), d], out)?;
        let rg = self.rg(table);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (b, c) = lv.as_matrix("cross_entropy")?;
        if labels.len() != b {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: c,
                });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let shifted_y = row[y] - max;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
            }
            let z = sum(row);
            total += (z.ln() - shifted_y).as_f64();
            let inv_z = T::one() / z;
            row.iter_mut().for_each(|v| *v = *v * inv_z);
        }
        let loss = Tensor::scalar(T::from_f64(total / b as f64));
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Causal multi-head attention over sequences of `spec.seq_len` tokens.
    ///
    /// `q` has one row per (sequence, query position); `k` and `v` have one row
    /// per (sequence, position). Heads split the feature axis evenly. The
    /// result has the row layout of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (q_rows, width) = qv.as_matrix("attention")?;
        let (k_rows, kw) = kv.as_matrix("attention")?;
        same_shape("attention", kv, vv)?;
        let s = spec.seq_len;
        let nq = spec.query_positions.len();
        if kw != width || spec.n_heads == 0 || width % spec.n_heads != 0 || s == 0 || nq == 0 {
            return Err(TensorError::shape(
                "attention",
                format!("q {:?} k {:?} heads {}", qv.shape(), kv.shape(), spec.n_heads),
            ));
        }
        if k_rows % s != 0 || q_rows != (k_rows / s) * nq {
            return Err(TensorError::shape(
                "attention",
                format!("{q_rows} query rows vs {k_rows} key rows at seq_len {s}"),
            ));
        }
        if let Some(&p) = spec.query_positions.iter().find(|&&p| p >= s) {
            return Err(TensorError::Index {
                op: "attention",
                index: p,
                bound: s,
            });
        }
        let batch = k_rows / s;
        let h = spec.n_heads;
        let dh = width / h;
        let inv_sqrt = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut weights = vec![T::zero(); batch * nq * h * s];
        let mut out = vec![T::zero(); q_rows * width];
        let mut scores = vec![T::zero(); s];
        for b in 0..batch {
            for (qi, &pos) in spec.query_positions.iter().enumerate() {
                let qrow = (b * nq + qi) * width;
                for head in 0..h {
                    let off = head * dh;
                    let visible = &mut scores[..=pos];
                    for (j, sc) in visible.iter_mut().enumerate() {
                        *sc = if spec.uniform {
                            T::zero()
                        } else {
                            let krow = (b * s + j) * width + off;
                            dot(&qd[qrow + off..qrow + off + dh], &kd[krow..krow + dh]) * inv_sqrt
                        };
                    }
                    softmax_lane(visible, 0..=pos);
                    let wbase = ((b * nq + qi) * h + head) * s;
                    weights[wbase..=wbase + pos].copy_from_slice(visible);
                    let o = &mut out[qrow + off..qrow + off + dh];
                    for (j, w) in visible.iter().enumerate() {
                        let vrow = (b * s + j) * width + off;
                        for (oc, vc) in o.iter_mut().zip(&vd[vrow..vrow + dh]) {
                            *oc = *oc + *w * *vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![q_rows, width], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                weights,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.as_matrix("matmul")?;
                let n = bv.last_dim();
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], av.shape(), |ga| {
                        gemm(m, n, k, gd, Layout::Plain, bv.data(), Layout::Transposed, ga, true)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], bv.shape(), |gb| {
                        gemm(k, m, n, av.data(), Layout::Transposed, gd, Layout::Plain, gb, true)
                    });
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], g.shape(), |gx| add_into(gx, gd));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |ga| {
                        for ((o, gi), y) in ga.iter_mut().zip(gd).zip(bv.data()) {
                            *o = *o + *gi * *y;
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.shape(), |gb| {
                        for ((o, gi), x) in gb.iter_mut().zip(gd).zip(av.data()) {
                            *o = *o + *gi * *x;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.shape(), |gx| add_into(gx, gd));
                }
                if self.rg(*bias) {
                    let d = g.last_dim();
                    accumulate(&mut grads[bias.0], &[d], |gb| {
                        for row in gd.chunks(d) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.shape(), |gx| {
                        gx.iter_mut().zip(gd).for_each(|(o, gi)| *o = *o + *gi * *c)
                    });
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], g.shape(), |gx| {
                        for ((o, gi), v) in gx.iter_mut().zip(gd).zip(xv.data()) {
                            if *v > T::zero() {
                                *o = *o + *gi;
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let gs = gd[0];
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], &shape, |gx| gx.iter_mut().for_each(|o| *o = *o + gs));
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let lanes = Lanes::new(node.value.shape(), *axis, "softmax")?;
                    accumulate(&mut grads[x.0], g.shape(), |gx| {
                        for l in 0..lanes.count() {
                            let dot: T = lanes.indices(l).map(|i| gd[i] * y[i]).sum();
                            for i in lanes.indices(l) {
                                gx[i] = gx[i] + y[i] * (gd[i] - dot);
                            }
                        }
                    });
                }
            }
            Op::L2Normalize { x, axis, norms, eps } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let lanes = Lanes::new(node.value.shape(), *axis, "l2_normalize")?;
                    accumulate(&mut grads[x.0], g.shape(), |gx| {
                        for (l, &n) in norms.iter().enumerate() {
                            if n > *eps {
                                let dot: T = lanes.indices(l).map(|i| gd[i] * y[i]).sum();
                                for i in lanes.indices(l) {
                                    gx[i] = gx[i] + (gd[i] - y[i] * dot) / n;
                                }
                            } else {
                                for i in lanes.indices(l) {
                                    gx[i] = gx[i] + gd[i] / *eps;
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.rg(*beta) {
                    accumulate(&mut grads[beta.0], &[d], |gb| {
                        for row in gd.chunks(d) {
                            add_into(gb, row);
                        }
                    });
                }
                if self.rg(*gamma) {
                    accumulate(&mut grads[gamma.0], &[d], |gg| {
                        for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, gi), h) in gg.iter_mut().zip(row).zip(hrow) {
                                *o = *o + *gi * *h;
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    accumulate(&mut grads[x.0], g.shape(), |gx| {
                        let mut dxhat = vec![T::zero(); d];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let grow = &gd[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            for ((o, gi), gm) in dxhat.iter_mut().zip(grow).zip(gam) {
                                *o = *gi * *gm;
                            }
                            let mean_dx = sum(&dxhat) * inv_d;
                            let mean_dxh = dot(&dxhat, hrow) * inv_d;
                            for ((o, dh), h) in gx[r * d..(r + 1) * d].iter_mut().zip(&dxhat).zip(hrow) {
                                *o = *o + rs * (*dh - mean_dx - *h * mean_dxh);
                            }
                        }
                    });
                }
            }
            Op::RmsNorm { x, gamma, rstd } => {
                let d = g.last_dim();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    accumulate(&mut grads[gamma.0], &[d], |gg| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let (grow, xrow) = (&gd[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                            for ((o, gi), xi) in gg.iter_mut().zip(grow).zip(xrow) {
                                *o = *o + *gi * *xi * rs;
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    accumulate(&mut grads[x.0], g.shape(), |gx| {
                        let mut dn = vec![T::zero(); d];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let base = r * d;
                            let (grow, xrow) = (&gd[base..base + d], &xv[base..base + d]);
                            for ((o, gi), gm) in dn.iter_mut().zip(grow).zip(gam) {
                                *o = *gi * *gm;
                            }
                            let c = rs * rs * dot(&dn, xrow) * inv_d;
                            for ((o, n), xi) in gx[base..base + d].iter_mut().zip(&dn).zip(xrow) {
                                *o = *o + rs * (*n - *xi * c);
                            }
                        }
                    });
                }
            }
            Op::GatherRows { table, indices } => {
                if self.rg(*table) {
                    let tv = self.value(*table);
                    let d = tv.last_dim();
                    accumulate(&mut grads[table.0], tv.shape(), |gt| {
                        for (r, &i) in indices.iter().enumerate() {
                            add_into(&mut gt[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.rg(*logits) {
                    let lv = self.value(*logits);
                    let c = lv.last_dim();
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    accumulate(&mut grads[logits.0], lv.shape(), |gl| {
                        for (r, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == y { T::one() } else { T::zero() };
                                let o = &mut gl[r * c + j];
                                *o = *o + (probs[r * c + j] - onehot) * scale;
                            }
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                weights,
            } => self.attention_backward(*q, *k, *v, spec, weights, gd, grads),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        weights: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.last_dim();
        let s = spec.seq_len;
        let nq = spec.query_positions.len();
        let h = spec.n_heads;
        let dh = width / h;
        let batch = kv.rows() / s;
        let inv_sqrt = T::one() / T::from_f64(dh as f64).sqrt();
        let scores_live = !spec.uniform && (self.rg(q) || self.rg(k));
        let mut gq = vec![T::zero(); qv.numel()];
        let mut gk = vec![T::zero(); kv.numel()];
        let mut gv = vec![T::zero(); vv.numel()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dw = vec![T::zero(); s];
        for b in 0..batch {
            let kbase = b * s * width;
            for (qi, &pos) in spec.query_positions.iter().enumerate() {
                let qrow = (b * nq + qi) * width;
                for head in 0..h {
                    let off = head * dh;
                    let wbase = ((b * nq + qi) * h + head) * s;
                    let w = &weights[wbase..=wbase + pos];
                    let go = &gd[qrow + off..qrow + off + dh];
                    for j in 0..=pos {
                        let r = kbase + j * width + off;
                        dw[j] = dot(go, &vd[r..r + dh]);
                        axpy(&mut gv[r..r + dh], w[j], go);
                    }
                    if !scores_live {
                        continue;
                    }
                    let wdw = dot(w, &dw[..=pos]);
                    for j in 0..=pos {
                        let ds = w[j] * (dw[j] - wdw) * inv_sqrt;
                        let r = kbase + j * width + off;
                        axpy(&mut gq[qrow + off..qrow + off + dh], ds, &kd[r..r + dh]);
                        axpy(&mut gk[r..r + dh], ds, &qd[qrow + off..qrow + off + dh]);
                    }
                }
            }
        }
        for (var, buf, shape) in [(q, gq, qv.shape()), (k, gk, kv.shape()), (v, gv, vv.shape())] {
            if self.rg(var) {
                merge(&mut grads[var.0], shape, buf);
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, x: &[T]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d = *d + a * *v;
    }
}

/// Adds a freshly computed gradient buffer into a slot, moving it in when empty.
fn merge<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], buf: Vec<T>) {
    match slot {
        Some(t) => add_into(t.data_mut(), &buf),
        None => *slot = Some(Tensor::new(shape.to_vec(), buf).expect("gradient matches its value's shape")),
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (x, y)| s + *x * *y);
    acc.iter().fold(tail, |s, v| s + *v)
}

fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let tail = chunks.remainder().iter().fold(T::zero(), |s, v| s + *v);
    for x in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + x[i];
        }
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

/// In-place max-subtracted softmax over the given flat indices.
fn softmax_lane<T: Scalar>(data: &mut [T], idx: impl Iterator<Item = usize> + Clone) {
    let max = idx.clone().fold(T::neg_infinity(), |m, i| m.max(data[i]));
    let mut total = T::zero();
    for i in idx.clone() {
        data[i] = (data[i] - max).exp();
        total = total + data[i];
    }
    for i in idx {
        data[i] = data[i] / total;
    }
}

/// Gradient check of a scalar function at 64-bit against a fourth-order
/// central difference. The wide step keeps roundoff well below the
/// tolerance even for gradient coordinates near 1e-8.
///
/// Returns the largest `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
/// over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    const STEP: f64 = 1e-4;
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (n, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[n].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        for i in 0..inputs[n].numel() {
            let x0 = inputs[n].data()[i];
            let mut at = |offset: f64| {
                probe[n].data_mut()[i] = x0 + offset * STEP;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            probe[n].data_mut()[i] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert_eq!(p, 1.0 / 3.0);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[1000.0, 0.0, 0.0]).unwrap()).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] < 1e-30);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let y = tape.l2_normalize(x, 0, SPHERE_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
        let z = tape.constant(t(&[4], &[0.0; 4])).unwrap();
        let zy = tape.l2_normalize(z, 0, SPHERE_EPS).unwrap();
        assert_eq!(tape.value(zy).data(), &[0.0; 4]);
        let u = tape.constant(t(&[3], &[0.0, 1.0, 0.0])).unwrap();
        let uy = tape.l2_normalize(u, 0, SPHERE_EPS).unwrap();
        assert_eq!(tape.value(uy).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn l2_normalize_tiny_input_has_finite_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[6e-14, 8e-14])).unwrap();
        let y = tape.l2_normalize(x, 0, SPHERE_EPS).unwrap();
        let w = tape.constant(t(&[2], &[1.0, -2.0])).unwrap();
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[2.5; 4])).unwrap();
        let g = tape.constant(t(&[4], &[1.0; 4])).unwrap();
        let b = tape.constant(t(&[4], &[0.0; 4])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rms_norm_of_unit_rms_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[1.0, -1.0, 1.0, -1.0])).unwrap();
        let g = tape.constant(t(&[4], &[1.0; 4])).unwrap();
        let y = tape.rms_norm(x, g).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let logits = tape.constant(Tensor::zeros(&[2, 114])).unwrap();
        let ce = tape.cross_entropy(logits, &[0, 113]).unwrap();
        assert!((tape.value(ce).data()[0] - 114f64.ln()).abs() < 1e-12);
        assert!((114f64.ln() - 4.736).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn non_finite_fails_fast_with_op_name() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[1], &[3e38]).unwrap()).unwrap();
        let err = tape.scale(x, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[t(&[2], &[1.0, 2.0])],
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f(x) = sum((x*x) + (x*x)*x) uses x*x twice; df/dx = 2*(2x) ... expanded: 2x + 3x^2.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let cube = tape.mul(sq, x).unwrap();
        let total = tape.add(sq, cube).unwrap();
        let s = tape.sum(total).unwrap();
        let g = tape.backward(s).unwrap();
        let expect: Vec<f64> = [0.5f64, -1.0, 2.0].iter().map(|x| 2.0 * x + 3.0 * x * x).collect();
        for (a, b) in g.get(x).unwrap().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).unwrap();
        let n: usize = shape.iter().product();
        t(shape, &(0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>())
    }

    /// Contracts `y` against fixed random weights so every output coordinate
    /// carries a distinct, order-one sensitivity.
    fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
        let shape = tape.value(y).shape().to_vec();
        let w = tape.constant(randn(&shape, 999, 1.0))?;
        let prod = tape.mul(y, w)?;
        tape.sum(prod)
    }

    const TOL: f64 = 1e-4;

    fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>, inputs: &[Tensor<f64>]) {
        let err = grad_check(f, inputs).unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn grad_matmul() {
        check(
            |tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                project(tp, y)
            },
            &[randn(&[4, 4], 1, 1.0), randn(&[4, 4], 2, 1.0)],
        );
        check(
            |tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                project(tp, y)
            },
            &[randn(&[3, 5], 3, 1.0), randn(&[5, 2], 4, 1.0)],
        );
    }

    #[test]
    fn grad_elementwise() {
        let inputs = [randn(&[3, 4], 5, 1.0), randn(&[3, 4], 6, 1.0), randn(&[4], 7, 1.0)];
        check(
            |tp, v| {
                let a = tp.add(v[0], v[1])?;
                let m = tp.mul(a, v[0])?;
                let r = tp.add_row(m, v[2])?;
                let s = tp.scale(r, -1.7)?;
                project(tp, s)
            },
            &inputs,
        );
    }

    #[test]
    fn grad_relu_away_from_kink() {
        let x = t(&[2, 3], &[0.5, -0.4, 1.2, -2.0, 0.3, 0.9]);
        check(
            |tp, v| {
                let y = tp.relu(v[0])?;
                project(tp, y)
            },
            &[x],
        );
    }

    #[test]
    fn grad_softmax_both_axes() {
        for axis in 0..2 {
            check(
                |tp, v| {
                    let y = tp.softmax(v[0], axis)?;
                    project(tp, y)
                },
                &[randn(&[3, 4], 8, 2.0)],
            );
        }
    }

    #[test]
    fn grad_l2_normalize_both_axes() {
        for axis in 0..2 {
            check(
                |tp, v| {
                    let y = tp.l2_normalize(v[0], axis, SPHERE_EPS)?;
                    project(tp, y)
                },
                &[randn(&[3, 5], 9, 1.0)],
            );
        }
    }

    #[test]
    fn grad_layer_norm() {
        check(
            |tp, v| {
                let y = tp.layer_norm(v[0], v[1], v[2])?;
                project(tp, y)
            },
            &[randn(&[4, 6], 10, 1.0), randn(&[6], 11, 1.0), randn(&[6], 12, 1.0)],
        );
    }

    #[test]
    fn grad_rms_norm() {
        check(
            |tp, v| {
                let y = tp.rms_norm(v[0], v[1])?;
                project(tp, y)
            },
            &[randn(&[4, 6], 13, 1.0), randn(&[6], 14, 1.0)],
        );
    }

    #[test]
    fn grad_gather_with_repeats() {
        check(
            |tp, v| {
                let y = tp.gather_rows(v[0], &[2, 0, 2, 2, 1])?;
                project(tp, y)
            },
            &[randn(&[4, 3], 15, 1.0)],
        );
    }

    #[test]
    fn grad_cross_entropy() {
        check(|tp, v| tp.cross_entropy(v[0], &[1, 0, 4]), &[randn(&[3, 5], 16, 1.5)]);
    }

    fn attention_case(query_positions: Vec<usize>, uniform: bool) {
        let (batch, s, width) = (2, 3, 8);
        let nq = query_positions.len();
        let spec = AttentionSpec {
            n_heads: 2,
            seq_len: s,
            query_positions,
            uniform,
        };
        check(
            |tp, v| {
                let y = tp.attention(v[0], v[1], v[2], spec.clone())?;
                project(tp, y)
            },
            &[
                randn(&[batch * nq, width], 17, 1.0),
                randn(&[batch * s, width], 18, 1.0),
                randn(&[batch * s, width], 19, 1.0),
            ],
        );
    }

    #[test]
    fn grad_attention_last_query() {
        attention_case(vec![2], false);
    }

    #[test]
    fn grad_attention_every_query() {
        attention_case(vec![0, 1, 2], false);
    }

    #[test]
    fn grad_attention_uniform() {
        attention_case(vec![0, 1, 2], true);
    }

    #[test]
    fn attention_weights_are_causal_and_normalized() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(randn(&[3, 4], 20, 1.0)).unwrap();
        let k = tape.constant(randn(&[3, 4], 21, 1.0)).unwrap();
        let v = tape.constant(randn(&[3, 4], 22, 1.0)).unwrap();
        let spec = AttentionSpec {
            n_heads: 2,
            seq_len: 3,
            query_positions: vec![0, 1, 2],
            uniform: false,
        };
        let out = tape.attention(q, k, v, spec).unwrap();
        let w = tape.attention_weights(out).unwrap();
        for (qi, chunk) in w.chunks(2 * 3).enumerate() {
            for head in chunk.chunks(3) {
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(head[qi + 1..].iter().all(|&x| x == 0.0));
            }
        }
        // the first position sees only itself, so its output is its own value
        let vd = tape.value(v).data()[..4].to_vec();
        assert_eq!(&tape.value(out).data()[..4], &vd[..]);
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let k = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let v = tape.constant(t(&[3, 2], &[3.0, 0.0, 0.0, 6.0, 3.0, 3.0])).unwrap();
        let spec = AttentionSpec {
            n_heads: 1,
            seq_len: 3,
            query_positions: vec![2],
            uniform: true,
        };
        let out = tape.attention(q, k, v, spec).unwrap();
        assert_eq!(tape.attention_weights(out).unwrap(), &[1.0 / 3.0; 3]);
        let o = tape.value(out).data();
        assert!((o[0] - 2.0).abs() < 1e-12 && (o[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fast_reductions_match_naive() {
        let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..21).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(sum::<f64>(&[]), 0.0);
    }

    #[test]
    fn all_finite_bit_test() {
        assert!(f32::all_finite(&[0.0, -1.0, f32::MAX, f32::MIN_POSITIVE]));
        assert!(!f32::all_finite(&[1.0, f32::NAN]));
        assert!(!f32::all_finite(&[f32::NEG_INFINITY]));
        assert!(f64::all_finite(&[f64::MAX, -0.0]));
        assert!(!f64::all_finite(&[f64::INFINITY, 0.0]));
    }
}
