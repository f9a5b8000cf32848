use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn};
use super::{split_axis, ParameterStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
        b_batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        index: Vec<usize>,
    },
    Repeat(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L1(Var, Var),
    MaskedL1 {
        pred: Var,
        target: Var,
        mask: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Wengert list of forward operations.
///
/// Nodes are appended in evaluation order, so ids are already a topological
/// order and `backward` is a single reverse sweep. Operations whose inputs
/// carry no gradient are recorded as constants.
pub struct Tape {
    nodes: Vec<Node>,
    live_params: HashMap<String, Var>,
    frozen_params: HashMap<String, Var>,
    param_log: Vec<(String, Var)>,
    grad_enabled: bool,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            live_params: HashMap::new(),
            frozen_params: HashMap::new(),
            param_log: Vec::new(),
            grad_enabled: true,
            checked: true,
        }
    }

    /// Disables the non-finite value check performed after every operation.
    pub fn unchecked(mut self) -> Self {
        self.checked = false;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Runs `f` with parameters entering the tape as constants.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = std::mem::replace(&mut self.grad_enabled, false);
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Looks up a named parameter. Repeated lookups return the same node, so
    /// gradients from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let live = self.grad_enabled;
        let cache = if live {
            &self.live_params
        } else {
            &self.frozen_params
        };
        let v = match cache.get(name) {
            Some(&v) => v,
            None => {
                let t = store
                    .value(name)
                    .ok_or_else(|| Error::usage(format!("unknown parameter '{name}'")))?
                    .clone();
                self.nodes.push(Node {
                    value: t,
                    requires_grad: live,
                    op: Op::Leaf,
                });
                let v = Var(self.nodes.len() - 1);
                if live {
                    self.live_params.insert(name.to_string(), v);
                } else {
                    self.frozen_params.insert(name.to_string(), v);
                }
                v
            }
        };
        self.param_log.push((name.to_string(), v));
        Ok(v)
    }

    /// Every parameter lookup so far, in call order.
    pub fn param_log(&self) -> &[(String, Var)] {
        &self.param_log
    }

    /// The gradient-carrying leaf for `name`, if it was used on this tape.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.live_params.get(name).copied()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[…, P, Q] × [Q, R]` or `[…, P, Q] × […, Q, R]` with identical
    /// leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_batched = sb.len() > 2;
        if q != q2 || (b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * p * r];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if b_batched {
                for i in 0..batch {
                    gemm_nn(
                        &av[i * p * q..(i + 1) * p * q],
                        &bv[i * q * r..(i + 1) * q * r],
                        &mut out[i * p * r..(i + 1) * p * r],
                        p,
                        q,
                        r,
                    );
                }
            } else {
                // A shared right operand sees the batch as extra rows.
                gemm_nn(av, bv, &mut out, batch * p, q, r);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([p, r]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            p,
            q,
            r,
            b_batched,
        };
        self.push("matmul", Tensor { shape, data: out }, op, &[a, b])
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(name, Tensor { shape, data }, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(name, Tensor { shape, data }, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a `[D]` vector to every row of `[…, D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&1);
        if tb.shape() != [d] || tx.rank() == 0 {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let bv = tb.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let shape = tx.shape().to_vec();
        self.push(
            "add_bias",
            Tensor { shape, data },
            Op::AddBias(x, bias),
            &[x, bias],
        )
    }

    // ── shape manipulation ──────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::usage(format!(
                "concat axis {axis} out of range for {s0:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", Tensor { shape, data }, op, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::usage(format!(
                "slice [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let op = Op::Slice { x, axis, start };
        self.push("slice", Tensor { shape, data }, op, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if a0 >= s.len() || a1 >= s.len() {
            return Err(Error::usage(format!(
                "transpose axes ({a0}, {a1}) invalid for {s:?}"
            )));
        }
        let mut out_shape = s.clone();
        out_shape.swap(a0, a1);
        let mut in_strides = vec![1; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let mut strides = in_strides.clone();
        strides.swap(a0, a1);
        let n = self.value(x).numel();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        for _ in 0..n {
            index.push(counter.iter().zip(&strides).map(|(c, st)| c * st).sum());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor {
            shape: out_shape,
            data,
        };
        self.push("transpose", t, Op::Permute { x, index }, &[x])
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::usage("repeat count must be positive"));
        }
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(n);
        self.push("repeat", Tensor { shape, data }, Op::Repeat(x), &[x])
    }

    /// Rows of a `[R, D]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather", t.shape(), &[rows.len()]));
        }
        let (nr, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= nr) {
            return Err(Error::usage(format!(
                "gather row {bad} out of range for {nr} rows"
            )));
        }
        let data = rows
            .iter()
            .flat_map(|&r| t.row(r).iter().copied())
            .collect();
        let op = Op::Gather {
            table,
            rows: rows.to_vec(),
        };
        let out = Tensor {
            shape: vec![rows.len(), d],
            data,
        };
        self.push("gather", out, op, &[table])
    }

    // ── normalisation ───────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::usage(format!(
                "softmax axis {axis} invalid for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    data[at(k)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            "softmax",
            Tensor { shape, data },
            Op::Softmax { x, axis },
            &[x],
        )
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.numel()];
        for (r, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor { shape, data }, op, &[x, gain, bias])
    }

    // ── reductions and losses ───────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::shape("mse_loss", tp.shape(), tt.shape()));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let v = s / tp.numel() as f64;
        self.push(
            "mse_loss",
            Tensor::scalar(v),
            Op::Mse(pred, target),
            &[pred, target],
        )
    }

    /// Sum of per-point L1 distances divided by the number of points, where
    /// a point is one slice along the last axis.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() || tp.rank() == 0 {
            return Err(Error::shape("l1_loss", tp.shape(), tt.shape()));
        }
        let points = tp.numel() / tp.shape()[tp.rank() - 1];
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let v = s / points as f64;
        self.push(
            "l1_loss",
            Tensor::scalar(v),
            Op::L1(pred, target),
            &[pred, target],
        )
    }

    /// [`Tape::l1_loss`] restricted to points with a non-zero mask weight,
    /// averaged over the total mask weight. Fully masked input gives 0.
    pub fn masked_l1_loss(&mut self, pred: Var, target: Var, mask: &[f64]) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() || tp.rank() == 0 {
            return Err(Error::shape("masked_l1_loss", tp.shape(), tt.shape()));
        }
        let c = tp.shape()[tp.rank() - 1];
        if mask.len() * c != tp.numel() {
            return Err(Error::shape("masked_l1_loss", tp.shape(), &[mask.len()]));
        }
        let weight: f64 = mask.iter().sum();
        let denom = if weight > 0.0 { weight } else { 1.0 };
        let s: f64 = tp
            .data()
            .chunks(c)
            .zip(tt.data().chunks(c))
            .zip(mask)
            .map(|((p, t), m)| m * p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum();
        let op = Op::MaskedL1 {
            pred,
            target,
            mask: mask.to_vec(),
        };
        self.push(
            "masked_l1_loss",
            Tensor::scalar(s / denom),
            op,
            &[pred, target],
        )
    }

    // ── reverse sweep ───────────────────────────────────────────────

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                p,
                q,
                r,
                b_batched,
            } => {
                // A shared right operand sees the batch as extra rows.
                let (batch, p) = if b_batched {
                    (batch, p)
                } else {
                    (1, batch * p)
                };
                if let Some(da) = slot(nodes, grads, a) {
                    let bv = val(b);
                    for i in 0..batch {
                        gemm_nt(
                            &g[i * p * r..(i + 1) * p * r],
                            &bv[i * q * r..(i + 1) * q * r],
                            &mut da[i * p * q..(i + 1) * p * q],
                            p,
                            q,
                            r,
                        );
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    let av = val(a);
                    for i in 0..batch {
                        gemm_tn(
                            &av[i * p * q..(i + 1) * p * q],
                            &g[i * p * r..(i + 1) * p * r],
                            &mut db[i * q * r..(i + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += g * y;
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += g * x;
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(nodes, grads, bias) {
                    let d = db.len();
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Relu(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((d, g), v) in dx.iter_mut().zip(g).zip(val(x)) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((d, g), &v) in dx.iter_mut().zip(g).zip(val(x)) {
                        *d += g * gelu_grad(v);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Concat { parts, axis } => {
                let s0 = nodes[parts[0].0].value.shape();
                let (outer, _, inner) = split_axis(s0, *axis);
                let mut offset = 0;
                let total: usize = g.len() / outer;
                for &part in parts {
                    let chunk = nodes[part.0].value.shape()[*axis] * inner;
                    if let Some(dp) = slot(nodes, grads, part) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            dp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(s, axis);
                let len = node.value.shape()[axis];
                if let Some(dx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Permute { x, index } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (&i, g) in index.iter().zip(g) {
                        dx[i] += g;
                    }
                }
            }
            &Op::Repeat(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    let n = dx.len();
                    for chunk in g.chunks(n) {
                        dx.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Gather { table, rows } => {
                if let Some(dt) = slot(nodes, grads, *table) {
                    let d = node.value.shape()[1];
                    for (k, &r) in rows.iter().enumerate() {
                        dt[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = inv_std.first().map_or(0, |_| xhat.len() / inv_std.len());
                let gv = val(*gain).to_vec();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let rh = &xhat[r * d..(r + 1) * d];
                        let mut sum_g = 0.0;
                        let mut sum_gh = 0.0;
                        for j in 0..d {
                            let gh = rg[j] * gv[j];
                            sum_g += gh;
                            sum_gh += gh * rh[j];
                        }
                        let (mg, mgh) = (sum_g / d as f64, sum_gh / d as f64);
                        for j in 0..d {
                            dx[r * d + j] += is * (rg[j] * gv[j] - mg - rh[j] * mgh);
                        }
                    }
                }
                if let Some(dg) = slot(nodes, grads, *gain) {
                    for (k, (gg, h)) in g.iter().zip(xhat).enumerate() {
                        dg[k % d] += gg * h;
                    }
                }
                if let Some(db) = slot(nodes, grads, *bias) {
                    for (k, gg) in g.iter().enumerate() {
                        db[k % d] += gg;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(dx) = slot(nodes, grads, x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::Mse(pred, target) => {
                let (pv, tv) = (val(pred), val(target));
                let s = 2.0 * g[0] / pv.len() as f64;
                if let Some(dp) = slot(nodes, grads, pred) {
                    for ((d, p), t) in dp.iter_mut().zip(pv).zip(tv) {
                        *d += s * (p - t);
                    }
                }
                if let Some(dt) = slot(nodes, grads, target) {
                    for ((d, p), t) in dt.iter_mut().zip(pv).zip(tv) {
                        *d -= s * (p - t);
                    }
                }
            }
            &Op::L1(pred, target) => {
                let (pv, tv) = (val(pred), val(target));
                let c = *nodes[pred.0].value.shape().last().unwrap_or(&1);
                let s = g[0] / (pv.len() / c) as f64;
                let sign = |p: f64, t: f64| -> f64 {
                    if p > t {
                        1.0
                    } else if p < t {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(dp) = slot(nodes, grads, pred) {
                    for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(tv) {
                        *d += s * sign(p, t);
                    }
                }
                if let Some(dt) = slot(nodes, grads, target) {
                    for ((d, &p), &t) in dt.iter_mut().zip(pv).zip(tv) {
                        *d -= s * sign(p, t);
                    }
                }
            }
            Op::MaskedL1 { pred, target, mask } => {
                let (pv, tv) = (val(*pred), val(*target));
                let c = pv.len() / mask.len();
                let weight: f64 = mask.iter().sum();
                let s = g[0] / if weight > 0.0 { weight } else { 1.0 };
                let term = |k: usize| -> f64 {
                    let (p, t) = (pv[k], tv[k]);
                    let sg = if p > t {
                        1.0
                    } else if p < t {
                        -1.0
                    } else {
                        0.0
                    };
                    s * mask[k / c] * sg
                };
                if let Some(dp) = slot(nodes, grads, *pred) {
                    for (k, d) in dp.iter_mut().enumerate() {
                        *d += term(k);
                    }
                }
                if let Some(dt) = slot(nodes, grads, *target) {
                    for (k, d) in dt.iter_mut().enumerate() {
                        *d -= term(k);
                    }
                }
            }
        }
    }
}

/// Gradient buffer for an input, or None when it is a constant.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is constant
    /// or was not reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but unreached nodes read as zeros of the
    /// node's size.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    }
}
