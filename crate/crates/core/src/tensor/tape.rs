//! Wengert tape: ops are recorded in execution order; `backward` replays them
//! in reverse, accumulating gradients additively across fan-out. Gradients
//! persist on leaves only, so repeated backward calls accumulate (callers
//! reset by rebuilding the tape, which is the per-step pattern anyway).

use super::{
    broadcast_shapes, broadcast_strides, for_each_broadcast2, matmul_nn_acc, matmul_nt_acc,
    matmul_tn_acc, TResult, Tensor,
};
use crate::error::TensorError;

const LN_EPS: f64 = 1e-5;
/// Log-probabilities are clamped to this ceiling before `log(1 - exp(l))`;
/// bounds the y=0 BCE branch at about 16.1 and keeps its gradient finite.
pub const LOG_PROB_CLAMP: f64 = -1e-7;
/// Additive mask value for invalid attention keys; finite so the
/// non-finiteness checks stay meaningful.
pub const NEG_MASK: f64 = -1e30;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Maximum { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Sigmoid { a: Var },
    LogSigmoid { a: Var },
    Softplus { a: Var },
    Log1mExp { a: Var },
    Ln { a: Var },
    SoftmaxLast { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    MeanPoolMasked { x: Var, mask: Vec<f64>, counts: Vec<f64> },
    Transpose { a: Var, d0: usize, d1: usize },
    Reshape { a: Var },
    Sum { a: Var },
    SumLast { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Recording tape. Single-threaded by construction; independent tapes are
/// independent computations.
pub struct Tape {
    nodes: Vec<Node>,
    /// Persistent gradients for leaf nodes (lazily allocated).
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── stable scalar kernels ────────────────────────────────────────────

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) as -softplus(-x); never log(sigmoid(x)) directly.
pub(crate) fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// log(1 - exp(x)) for x < 0, two-regime form.
pub(crate) fn log1mexp_scalar(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf; gradients accumulate here after backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Register data that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor, op: Op, requires: bool) -> TResult<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let _ = name;
        Ok(self.push_node(value, op, requires))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ── elementwise binary ops ──────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> TResult<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(va.shape(), vb.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            }
        })?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
                data[o] = f(da[ia], db[ib]);
            });
            data
        };
        let requires = self.requires(a) || self.requires(b);
        self.push_op(name, Tensor { shape: out_shape, data }, op(a, b), requires)
    }

    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.binary("maximum", a, b, f64::max, |a, b| Op::Maximum { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TResult<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    // ── scalar affine and activations ───────────────────────────────

    pub fn scale(&mut self, a: Var, c: f64) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        let t = Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|&x| x * c).collect() };
        let requires = self.requires(a);
        self.push_op("scale", t, Op::Scale { a, c }, requires)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        let t = Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|&x| x + c).collect() };
        let requires = self.requires(a);
        self.push_op("add_scalar", t, Op::AddScalar { a }, requires)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl Fn(Var) -> Op,
    ) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        let t = Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|&x| f(x)).collect() };
        let requires = self.requires(a);
        self.push_op(name, t, op(a), requires)
    }

    pub fn sigmoid(&mut self, a: Var) -> TResult<Var> {
        self.unary("sigmoid", a, sigmoid_scalar, |a| Op::Sigmoid { a })
    }

    pub fn log_sigmoid(&mut self, a: Var) -> TResult<Var> {
        self.unary("log_sigmoid", a, log_sigmoid_scalar, |a| Op::LogSigmoid { a })
    }

    pub fn softplus(&mut self, a: Var) -> TResult<Var> {
        self.unary("softplus", a, softplus_scalar, |a| Op::Softplus { a })
    }

    /// Stable `log(1 - exp(l))` with the input clamped to `LOG_PROB_CLAMP`.
    pub fn log1mexp(&mut self, a: Var) -> TResult<Var> {
        self.unary(
            "log1mexp",
            a,
            |x| log1mexp_scalar(x.min(LOG_PROB_CLAMP)),
            |a| Op::Log1mExp { a },
        )
    }

    /// Natural log; positive inputs are the caller's contract.
    pub fn ln(&mut self, a: Var) -> TResult<Var> {
        self.unary("ln", a, f64::ln, |a| Op::Ln { a })
    }

    // ── structured ops ──────────────────────────────────────────────

    pub fn softmax_lastdim(&mut self, a: Var) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape().is_empty() {
            return Err(TensorError::ShapeMismatch { op: "softmax", details: "rank-0 input".into() });
        }
        let d = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor { shape: v.shape().to_vec(), data };
        let requires = self.requires(a);
        self.push_op("softmax", t, Op::SoftmaxLast { a }, requires)
    }

    /// Per-position normalization over the last dim, then affine.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> TResult<Var> {
        let (vx, vg, vb) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let c = *vx.shape().last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "layernorm",
            details: "rank-0 input".into(),
        })?;
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                details: format!("affine shapes {:?}/{:?} vs C={c}", vg.shape(), vb.shape()),
            });
        }
        let mut data = vec![0.0; vx.numel()];
        for (row_out, row_in) in data.chunks_mut(c).zip(vx.data().chunks(c)) {
            let mean = row_in.iter().sum::<f64>() / c as f64;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                row_out[j] = (row_in[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor { shape: vx.shape().to_vec(), data };
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push_op("layernorm", t, Op::LayerNorm { x, gamma, beta }, requires)
    }

    /// Mean over valid positions of the second-to-last dim.
    /// `x: [.., T, C]`, `mask: [.., T]` with entries in {0,1}.
    pub fn mean_pool_masked(&mut self, x: Var, mask: &Tensor) -> TResult<Var> {
        let vx = &self.nodes[x.0].value;
        let rank = vx.shape().len();
        if rank < 2 {
            return Err(TensorError::ShapeMismatch { op: "mean_pool", details: "rank < 2".into() });
        }
        let (t_dim, c) = (vx.shape()[rank - 2], vx.shape()[rank - 1]);
        if mask.shape() != &vx.shape()[..rank - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool",
                details: format!("mask {:?} vs x {:?}", mask.shape(), vx.shape()),
            });
        }
        let rows = vx.numel() / (t_dim * c);
        let mut counts = vec![0.0; rows];
        for (r, chunk) in mask.data().chunks(t_dim).enumerate() {
            debug_assert!(chunk.iter().all(|&m| m == 0.0 || m == 1.0), "mask must be binary");
            counts[r] = chunk.iter().sum();
            if counts[r] == 0.0 {
                return Err(TensorError::DegenerateInput {
                    op: "mean_pool",
                    details: format!("row {r} has zero valid tokens"),
                });
            }
        }
        let mut out_shape = vx.shape()[..rank - 2].to_vec();
        out_shape.push(c);
        let mut data = vec![0.0; rows * c];
        for r in 0..rows {
            let base = r * t_dim * c;
            for t in 0..t_dim {
                let m = mask.data()[r * t_dim + t];
                if m == 0.0 {
                    continue;
                }
                for j in 0..c {
                    data[r * c + j] += vx.data()[base + t * c + j];
                }
            }
            for j in 0..c {
                data[r * c + j] /= counts[r];
            }
        }
        let t = Tensor { shape: out_shape, data };
        let requires = self.requires(x);
        self.push_op(
            "mean_pool",
            t,
            Op::MeanPoolMasked { x, mask: mask.data().to_vec(), counts },
            requires,
        )
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        let rank = v.shape().len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                details: format!("dims ({d0},{d1}) out of range for rank {rank}"),
            });
        }
        let t = transpose_data(v, d0, d1);
        let requires = self.requires(a);
        self.push_op("transpose", t, Op::Transpose { a, d0, d1 }, requires)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", v.shape(), shape),
            });
        }
        let t = Tensor { shape, data: v.data().to_vec() };
        let requires = self.requires(a);
        self.push_op("reshape", t, Op::Reshape { a }, requires)
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        let t = Tensor { shape: vec![], data: vec![v.data().iter().sum()] };
        let requires = self.requires(a);
        self.push_op("sum", t, Op::Sum { a }, requires)
    }

    pub fn sum_lastdim(&mut self, a: Var) -> TResult<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape().is_empty() {
            return Err(TensorError::ShapeMismatch { op: "sum_lastdim", details: "rank-0 input".into() });
        }
        let d = *v.shape().last().unwrap();
        let out_shape = v.shape()[..v.shape().len() - 1].to_vec();
        let data: Vec<f64> = v.data().chunks(d).map(|row| row.iter().sum()).collect();
        let t = Tensor { shape: out_shape, data };
        let requires = self.requires(a);
        self.push_op("sum_lastdim", t, Op::SumLast { a }, requires)
    }

    /// Batched matrix product `[.., M, P] x [.., P, Q] -> [.., M, Q]` with
    /// broadcasting over leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, rb) = (va.shape().len(), vb.shape().len());
        if ra < 2 || rb < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("operands must be rank >= 2, got {:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, p) = (va.shape()[ra - 2], va.shape()[ra - 1]);
        let (p2, q) = (vb.shape()[rb - 2], vb.shape()[rb - 1]);
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("inner dims {p} vs {p2}"),
            });
        }
        let batch_a = &va.shape()[..ra - 2];
        let batch_b = &vb.shape()[..rb - 2];
        let batch_out = broadcast_shapes(batch_a, batch_b).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            details: format!("batch dims {batch_a:?} vs {batch_b:?}"),
        })?;
        let sa = broadcast_strides(batch_a, &batch_out);
        let sb = broadcast_strides(batch_b, &batch_out);
        let nbatch: usize = batch_out.iter().product();
        let mut data = vec![0.0; nbatch * m * q];
        let (da, db) = (va.data(), vb.data());
        for_each_broadcast2(&batch_out, &sa, &sb, |o, ia, ib| {
            matmul_nn_acc(
                &da[ia * m * p..ia * m * p + m * p],
                &db[ib * p * q..ib * p * q + p * q],
                &mut data[o * m * q..o * m * q + m * q],
                m,
                p,
                q,
            );
        });
        let mut out_shape = batch_out;
        out_shape.push(m);
        out_shape.push(q);
        let t = Tensor { shape: out_shape, data };
        let requires = self.requires(a) || self.requires(b);
        self.push_op("matmul", t, Op::MatMul { a, b }, requires)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// repeated calls; intermediate gradients are scratch.
    pub fn backward(&mut self, loss: Var) -> TResult<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; n];
        scratch[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if scratch[id].is_none() || !self.nodes[id].requires {
                continue;
            }
            let g = scratch[id].take().unwrap();
            match &self.nodes[id].op {
                Op::Leaf => {
                    let slot = &mut self.leaf_grads[id];
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                op => self.backprop_op(id, op_inputs(op), g, &mut scratch),
            }
        }
        Ok(())
    }

    fn backprop_op(&self, id: usize, inputs: Vec<Var>, g: Vec<f64>, scratch: &mut Vec<Option<Vec<f64>>>) {
        // Allocate scratch grads for inputs that need them.
        for v in &inputs {
            if self.nodes[v.0].requires && scratch[v.0].is_none() {
                scratch[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
            }
        }
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ra, rb) = (va.shape().len(), vb.shape().len());
                let (m, p) = (va.shape()[ra - 2], va.shape()[ra - 1]);
                let q = vb.shape()[rb - 1];
                let batch_a = &va.shape()[..ra - 2];
                let batch_b = &vb.shape()[..rb - 2];
                let batch_out = broadcast_shapes(batch_a, batch_b).unwrap();
                let sa = broadcast_strides(batch_a, &batch_out);
                let sb = broadcast_strides(batch_b, &batch_out);
                let need_a = self.nodes[a.0].requires;
                let need_b = self.nodes[b.0].requires;
                let same = a.0 == b.0;
                let (da, db) = (va.data(), vb.data());
                // Take buffers out so the closure can borrow values freely.
                let mut ga = if need_a { Some(std::mem::take(scratch[a.0].as_mut().unwrap())) } else { None };
                let mut gb = if need_b && !same { Some(std::mem::take(scratch[b.0].as_mut().unwrap())) } else { None };
                for_each_broadcast2(&batch_out, &sa, &sb, |o, ia, ib| {
                    let gmat = &g[o * m * q..o * m * q + m * q];
                    if let Some(ga) = ga.as_mut() {
                        matmul_nt_acc(gmat, &db[ib * p * q..ib * p * q + p * q], &mut ga[ia * m * p..ia * m * p + m * p], m, q, p);
                    }
                    let gbuf = if same { ga.as_mut() } else { gb.as_mut() };
                    if let Some(gbuf) = gbuf {
                        matmul_tn_acc(&da[ia * m * p..ia * m * p + m * p], gmat, &mut gbuf[ib * p * q..ib * p * q + p * q], m, p, q);
                    }
                });
                if let Some(ga) = ga {
                    scratch[a.0] = Some(ga);
                }
                if let Some(gb) = gb {
                    scratch[b.0] = Some(gb);
                }
            }
            Op::Add { a, b } => {
                self.binary_backward(*a, *b, &g, node.value.shape(), scratch, |_, _| (1.0, 1.0));
            }
            Op::Mul { a, b } => {
                self.binary_backward(*a, *b, &g, node.value.shape(), scratch, |x, y| (y, x));
            }
            Op::Div { a, b } => {
                self.binary_backward(*a, *b, &g, node.value.shape(), scratch, |x, y| (1.0 / y, -x / (y * y)));
            }
            Op::Maximum { a, b } => {
                self.binary_backward(*a, *b, &g, node.value.shape(), scratch, |x, y| {
                    if x >= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                });
            }
            Op::Scale { a, c } => {
                if let Some(ga) = scratch[a.0].as_mut() {
                    ga.iter_mut().zip(&g).for_each(|(o, gi)| *o += c * gi);
                }
            }
            Op::AddScalar { a } => {
                if let Some(ga) = scratch[a.0].as_mut() {
                    ga.iter_mut().zip(&g).for_each(|(o, gi)| *o += gi);
                }
            }
            Op::Sigmoid { a } => {
                let s = node.value.data();
                if let Some(ga) = scratch[a.0].as_mut() {
                    for i in 0..g.len() {
                        ga[i] += g[i] * s[i] * (1.0 - s[i]);
                    }
                }
            }
            Op::LogSigmoid { a } => {
                let x = self.nodes[a.0].value.data();
                if let Some(ga) = scratch[a.0].as_mut() {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid_scalar(-x[i]);
                    }
                }
            }
            Op::Softplus { a } => {
                let x = self.nodes[a.0].value.data();
                if let Some(ga) = scratch[a.0].as_mut() {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid_scalar(x[i]);
                    }
                }
            }
            Op::Log1mExp { a } => {
                let x = self.nodes[a.0].value.data();
                if let Some(ga) = scratch[a.0].as_mut() {
                    for i in 0..g.len() {
                        let xc = x[i].min(LOG_PROB_CLAMP);
                        // d/dx log(1-e^x) = e^x / (e^x - 1)
                        ga[i] += g[i] * xc.exp() / xc.exp_m1();
                    }
                }
            }
            Op::Ln { a } => {
                let x = self.nodes[a.0].value.data();
                if let Some(ga) = scratch[a.0].as_mut() {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::SoftmaxLast { a } => {
                let s = node.value.data();
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = scratch[a.0].as_mut() {
                    for r in 0..s.len() / d {
                        let (srow, grow) = (&s[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                debug_assert!(x.0 != gamma.0 && x.0 != beta.0 && gamma.0 != beta.0);
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gamma.0].value.data();
                let c = *node.value.shape().last().unwrap();
                let rows = vx.len() / c;
                let need_x = self.nodes[x.0].requires;
                let need_g = self.nodes[gamma.0].requires;
                let need_b = self.nodes[beta.0].requires;
                let mut gx = if need_x { Some(std::mem::take(scratch[x.0].as_mut().unwrap())) } else { None };
                let mut gg = if need_g { Some(std::mem::take(scratch[gamma.0].as_mut().unwrap())) } else { None };
                let mut gb = if need_b { Some(std::mem::take(scratch[beta.0].as_mut().unwrap())) } else { None };
                for r in 0..rows {
                    let xin = &vx[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let mean = xin.iter().sum::<f64>() / c as f64;
                    let var = xin.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    if let Some(gb) = gb.as_mut() {
                        for j in 0..c {
                            gb[j] += grow[j];
                        }
                    }
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..c {
                            gg[j] += grow[j] * (xin[j] - mean) * inv;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut mean_gy = 0.0;
                        let mut mean_gyx = 0.0;
                        for j in 0..c {
                            let gy = grow[j] * vg[j];
                            let xh = (xin[j] - mean) * inv;
                            mean_gy += gy;
                            mean_gyx += gy * xh;
                        }
                        mean_gy /= c as f64;
                        mean_gyx /= c as f64;
                        for j in 0..c {
                            let gy = grow[j] * vg[j];
                            let xh = (xin[j] - mean) * inv;
                            gx[r * c + j] += (gy - mean_gy - xh * mean_gyx) * inv;
                        }
                    }
                }
                if let Some(gx) = gx {
                    scratch[x.0] = Some(gx);
                }
                if let Some(gg) = gg {
                    scratch[gamma.0] = Some(gg);
                }
                if let Some(gb) = gb {
                    scratch[beta.0] = Some(gb);
                }
            }
            Op::MeanPoolMasked { x, mask, counts } => {
                let c = *node.value.shape().last().unwrap();
                let t_dim = self.nodes[x.0].value.shape()[self.nodes[x.0].value.shape().len() - 2];
                if let Some(gx) = scratch[x.0].as_mut() {
                    for r in 0..counts.len() {
                        let inv = 1.0 / counts[r];
                        for t in 0..t_dim {
                            let m = mask[r * t_dim + t];
                            if m == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                gx[(r * t_dim + t) * c + j] += g[r * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Transpose { a, d0, d1 } => {
                if scratch[a.0].is_some() {
                    let gt = Tensor { shape: node.value.shape().to_vec(), data: g.clone() };
                    let back = transpose_data(&gt, *d0, *d1);
                    let ga = scratch[a.0].as_mut().unwrap();
                    ga.iter_mut().zip(back.data()).for_each(|(o, v)| *o += v);
                }
            }
            Op::Reshape { a } | Op::Sum { a } | Op::SumLast { a } => {
                if let Some(ga) = scratch[a.0].as_mut() {
                    match &node.op {
                        Op::Reshape { .. } => ga.iter_mut().zip(&g).for_each(|(o, v)| *o += v),
                        Op::Sum { .. } => ga.iter_mut().for_each(|o| *o += g[0]),
                        Op::SumLast { .. } => {
                            let d = ga.len() / g.len();
                            for (r, gv) in g.iter().enumerate() {
                                for j in 0..d {
                                    ga[r * d + j] += gv;
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }

    /// Shared backward for broadcasting elementwise binaries; `partials`
    /// returns (dout/da, dout/db) at each element.
    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        out_shape: &[usize],
        scratch: &mut [Option<Vec<f64>>],
        partials: impl Fn(f64, f64) -> (f64, f64),
    ) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let need_a = self.nodes[a.0].requires;
        let need_b = self.nodes[b.0].requires;
        let same = a.0 == b.0;
        let mut ga = if need_a { Some(std::mem::take(scratch[a.0].as_mut().unwrap())) } else { None };
        let mut gb = if need_b && !same { Some(std::mem::take(scratch[b.0].as_mut().unwrap())) } else { None };
        if va.shape() == vb.shape() {
            for i in 0..g.len() {
                let (pa, pb) = partials(va.data()[i], vb.data()[i]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] += g[i] * if same { pa + pb } else { pa };
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] += g[i] * pb;
                }
            }
        } else {
            let sa = broadcast_strides(va.shape(), out_shape);
            let sb = broadcast_strides(vb.shape(), out_shape);
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast2(out_shape, &sa, &sb, |o, ia, ib| {
                let (pa, pb) = partials(da[ia], db[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g[o] * pa;
                    if same {
                        ga[ib] += g[o] * pb;
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g[o] * pb;
                }
            });
        }
        if let Some(ga) = ga {
            scratch[a.0] = Some(ga);
        }
        if let Some(gb) = gb {
            scratch[b.0] = Some(gb);
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b }
        | Op::Add { a, b }
        | Op::Mul { a, b }
        | Op::Div { a, b }
        | Op::Maximum { a, b } => vec![*a, *b],
        Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        Op::Scale { a, .. }
        | Op::AddScalar { a }
        | Op::Sigmoid { a }
        | Op::LogSigmoid { a }
        | Op::Softplus { a }
        | Op::Log1mExp { a }
        | Op::Ln { a }
        | Op::SoftmaxLast { a }
        | Op::Transpose { a, .. }
        | Op::Reshape { a }
        | Op::Sum { a }
        | Op::SumLast { a } => vec![*a],
        Op::MeanPoolMasked { x, .. } => vec![*x],
    }
}

fn transpose_data(v: &Tensor, d0: usize, d1: usize) -> Tensor {
    if d0 == d1 {
        return v.clone();
    }
    let mut out_shape = v.shape().to_vec();
    out_shape.swap(d0, d1);
    let rank = out_shape.len();
    // input strides, permuted to output coordinate order
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * v.shape()[i + 1];
    }
    in_strides.swap(d0, d1);
    let mut data = vec![0.0; v.numel()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in data.iter_mut() {
        *slot = v.data()[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += in_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= in_strides[d] * out_shape[d];
        }
    }
    Tensor { shape: out_shape, data }
}
