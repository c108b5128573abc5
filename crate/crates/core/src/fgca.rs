//! Feature-Gated Cross-Attention.
//!
//! The category branch conditions queries through plain multi-head
//! cross-attention. Each attribute branch produces a sigmoid gate from its
//! own cross-attention readout; absent attributes are neutralized to an
//! exact 1.0 so they vanish from the multiplicative AND composition:
//!
//!   Q_c     = LN(CA(Q, T_c))
//!   G_k     = sigmoid(W * LN(CA(Q, T_k)) + b)
//!   G_k     <- m_k * G_k + (1 - m_k)
//!   F_out   = alpha * Q_c * prod_k G_k
//!
//! All attribute branches share one attention stack; independence comes from
//! their inputs, which keeps the parameter count flat in the group count.

use crate::error::TensorError;
use crate::tensor::{TResult, Tape, Tensor, Var, NEG_MASK};

/// Feature-fusion behavior, the ablation axis of the feature level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Multiplicative AND gating (the full method).
    Gated,
    /// No attribute interaction at the feature level.
    Bypass,
    /// Attribute features are summed onto the category features.
    Additive,
}

/// One multi-head cross-attention stack plus its post-attention LayerNorm.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl AttnParams {
    pub fn init(dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        AttnParams {
            wq: Tensor::randn(vec![dim, dim], std, rng),
            wk: Tensor::randn(vec![dim, dim], std, rng),
            wv: Tensor::randn(vec![dim, dim], std, rng),
            wo: Tensor::randn(vec![dim, dim], std, rng),
            ln_gamma: Tensor::full(vec![dim], 1.0),
            ln_beta: Tensor::zeros(vec![dim]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.wo"), &self.wo));
        out.push((format!("{prefix}.ln_gamma"), &self.ln_gamma));
        out.push((format!("{prefix}.ln_beta"), &self.ln_beta));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        out.push((format!("{prefix}.wo"), &mut self.wo));
        out.push((format!("{prefix}.ln_gamma"), &mut self.ln_gamma));
        out.push((format!("{prefix}.ln_beta"), &mut self.ln_beta));
    }

    pub fn register(&self, tape: &mut Tape) -> AttnVars {
        AttnVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            ln_gamma: tape.leaf(self.ln_gamma.clone()),
            ln_beta: tape.leaf(self.ln_beta.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

/// Parameters of one FGCA block: category stack, shared attribute stack, and
/// the gate projection. The gate bias starts at +2.0 so initial gates sit
/// near 0.88 and the K-fold product does not annihilate the signal early.
#[derive(Debug, Clone)]
pub struct FgcaParams {
    pub heads: usize,
    pub dim: usize,
    pub cat: AttnParams,
    pub attr: AttnParams,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

impl FgcaParams {
    pub fn init(dim: usize, heads: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by head count");
        let std = (1.0 / dim as f64).sqrt();
        FgcaParams {
            heads,
            dim,
            cat: AttnParams::init(dim, rng),
            attr: AttnParams::init(dim, rng),
            gate_w: Tensor::randn(vec![dim, dim], std, rng),
            gate_b: Tensor::full(vec![dim], 2.0),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.cat.visit(&format!("{prefix}.cat"), out);
        self.attr.visit(&format!("{prefix}.attr"), out);
        out.push((format!("{prefix}.gate_w"), &self.gate_w));
        out.push((format!("{prefix}.gate_b"), &self.gate_b));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.cat.visit_mut(&format!("{prefix}.cat"), out);
        self.attr.visit_mut(&format!("{prefix}.attr"), out);
        out.push((format!("{prefix}.gate_w"), &mut self.gate_w));
        out.push((format!("{prefix}.gate_b"), &mut self.gate_b));
    }

    pub fn register(&self, tape: &mut Tape) -> FgcaVars {
        FgcaVars {
            heads: self.heads,
            dim: self.dim,
            cat: self.cat.register(tape),
            attr: self.attr.register(tape),
            gate_w: tape.leaf(self.gate_w.clone()),
            gate_b: tape.leaf(self.gate_b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FgcaVars {
    pub heads: usize,
    pub dim: usize,
    pub cat: AttnVars,
    pub attr: AttnVars,
    pub gate_w: Var,
    pub gate_b: Var,
}

/// Everything a composed FGCA pass produces; attention maps and gates are
/// kept so the visualizer can read them back off the tape.
pub struct GatedFeatures {
    /// `LN(CA(Q, T_c))`, `[B,N,C]`.
    pub q_c: Var,
    /// Neutralized per-group gates; `None` when the group was absent in every
    /// batch row (its gate is identically 1).
    pub gates: Vec<Option<Var>>,
    /// Product of neutralized gates, `None` when no group is active.
    pub g_total: Option<Var>,
    /// Final output features, `[B,N,C]`.
    pub f_out: Var,
    /// Category attention weights, `[B,h,N,N_t]`.
    pub cat_attn: Var,
    /// Attribute attention weights per group.
    pub attr_attn: Vec<Option<Var>>,
}

fn validity_to_mask(validity: &Tensor) -> Tensor {
    let (b, nt) = (validity.shape()[0], validity.shape()[1]);
    // 0 where valid, NEG_MASK where invalid
    let data = validity.data().iter().map(|&v| (v - 1.0) * -NEG_MASK).collect();
    Tensor::new(vec![b, 1, 1, nt], data).expect("mask shape")
}

/// Multi-head scaled dot-product cross-attention with key-validity masking
/// and output projection. Returns `(output [B,N,C], weights [B,h,N,N_t])`.
/// LayerNorm is applied by the caller, matching its placement in the block.
pub fn cross_attend(
    tape: &mut Tape,
    q: Var,
    t: Var,
    validity: &Tensor,
    params: &AttnVars,
    heads: usize,
) -> TResult<(Var, Var)> {
    let (b, n, c) = dims3(tape, q)?;
    let (tb, nt, tc) = dims3(tape, t)?;
    if tb != b || tc != c {
        return Err(TensorError::ShapeMismatch {
            op: "cross_attend",
            details: format!("queries {:?} vs tokens {:?}", tape.shape(q), tape.shape(t)),
        });
    }
    if validity.shape() != [b, nt] {
        return Err(TensorError::ShapeMismatch {
            op: "cross_attend",
            details: format!("validity {:?}, expected [{b}, {nt}]", validity.shape()),
        });
    }
    for (row, chunk) in validity.data().chunks(nt).enumerate() {
        if chunk.iter().sum::<f64>() == 0.0 {
            return Err(TensorError::DegenerateInput {
                op: "cross_attend",
                details: format!("batch row {row} has no valid key tokens"),
            });
        }
    }
    let d = c / heads;

    let qp = tape.matmul(q, params.wq)?;
    let kp = tape.matmul(t, params.wk)?;
    let vp = tape.matmul(t, params.wv)?;

    let qh = split_heads(tape, qp, b, n, heads, d)?;
    let kh = split_heads(tape, kp, b, nt, heads, d)?;
    let vh = split_heads(tape, vp, b, nt, heads, d)?;

    let kt = tape.transpose(kh, 2, 3)?;
    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let mask = tape.constant(validity_to_mask(validity));
    let masked = tape.add(scaled, mask)?;
    let attn = tape.softmax_lastdim(masked)?;

    let ctx = tape.matmul(attn, vh)?;
    let merged = merge_heads(tape, ctx, b, n, heads, d)?;
    let out = tape.matmul(merged, params.wo)?;
    Ok((out, attn))
}

/// One attribute gate: `sigmoid(W * LN(CA(Q, T_k)) + b)`, values in (0,1).
pub fn attribute_gate(
    tape: &mut Tape,
    q: Var,
    t_k: Var,
    validity: &Tensor,
    params: &FgcaVars,
) -> TResult<(Var, Var)> {
    let (ca, attn) = cross_attend(tape, q, t_k, validity, &params.attr, params.heads)?;
    let normed = tape.layernorm(ca, params.attr.ln_gamma, params.attr.ln_beta)?;
    let pre = tape.matmul(normed, params.gate_w)?;
    let shifted = tape.add(pre, params.gate_b)?;
    let gate = tape.sigmoid(shifted)?;
    Ok((gate, attn))
}

/// `m_k * G + (1 - m_k)` per batch row: absent rows become exactly 1.0.
pub fn neutralize(tape: &mut Tape, gate: Var, m_k: &[f64]) -> TResult<Var> {
    let b = tape.shape(gate)[0];
    debug_assert_eq!(m_k.len(), b);
    let m = tape.constant(Tensor::new(vec![b, 1, 1], m_k.to_vec()).expect("mask shape"));
    let inv = tape.constant(
        Tensor::new(vec![b, 1, 1], m_k.iter().map(|&v| 1.0 - v).collect()).expect("mask shape"),
    );
    let gm = tape.mul(gate, m)?;
    tape.add(gm, inv)
}

/// Full FGCA block over one batch of queries and one decomposed prompt.
///
/// `presence[b][k]` marks group k active in batch row b. Rows where a group
/// is absent attend against a dummy-valid first token; neutralization then
/// erases both the value and the gradient of that branch, so the dummy never
/// leaks. When a group is absent in every row its branch is skipped outright,
/// which keeps `F_out` bit-identical to the fewer-group computation.
#[allow(clippy::too_many_arguments)]
pub fn compose(
    tape: &mut Tape,
    q: Var,
    t_c: Var,
    t_attrs: &[Var],
    cat_validity: &Tensor,
    attr_validity: &[Tensor],
    presence: &[Vec<u8>],
    params: &FgcaVars,
    mode: GateMode,
    alpha: f64,
) -> TResult<GatedFeatures> {
    let b = tape.shape(q)[0];
    let k = t_attrs.len();
    debug_assert_eq!(presence.len(), b);
    debug_assert!(presence.iter().all(|p| p.len() == k));

    let (ca, cat_attn) = cross_attend(tape, q, t_c, cat_validity, &params.cat, params.heads)?;
    let q_c = tape.layernorm(ca, params.cat.ln_gamma, params.cat.ln_beta)?;

    if mode == GateMode::Bypass {
        return Ok(GatedFeatures {
            q_c,
            gates: vec![None; k],
            g_total: None,
            f_out: q_c,
            cat_attn,
            attr_attn: vec![None; k],
        });
    }

    let mut gates: Vec<Option<Var>> = vec![None; k];
    let mut attr_attn: Vec<Option<Var>> = vec![None; k];
    let mut additive_terms: Vec<Var> = Vec::new();
    for gi in 0..k {
        let m_col: Vec<f64> = presence.iter().map(|p| f64::from(p[gi])).collect();
        if m_col.iter().all(|&m| m == 0.0) {
            continue;
        }
        // Patch validity for absent rows so attention stays well-defined;
        // the neutralization mask multiplies those rows away afterwards.
        let nt = attr_validity[gi].shape()[1];
        let mut vdata = attr_validity[gi].data().to_vec();
        for (row, &m) in m_col.iter().enumerate() {
            if m == 0.0 {
                vdata[row * nt..(row + 1) * nt].fill(0.0);
                vdata[row * nt] = 1.0;
            }
        }
        let validity = Tensor::new(vec![b, nt], vdata).expect("validity shape");

        match mode {
            GateMode::Gated => {
                let (gate, attn) = attribute_gate(tape, q, t_attrs[gi], &validity, params)?;
                let neutral = neutralize(tape, gate, &m_col)?;
                gates[gi] = Some(neutral);
                attr_attn[gi] = Some(attn);
            }
            GateMode::Additive => {
                let (ca, attn) = cross_attend(tape, q, t_attrs[gi], &validity, &params.attr, params.heads)?;
                let feats = tape.layernorm(ca, params.attr.ln_gamma, params.attr.ln_beta)?;
                let m = tape.constant(Tensor::new(vec![b, 1, 1], m_col.clone()).expect("mask"));
                additive_terms.push(tape.mul(feats, m)?);
                attr_attn[gi] = Some(attn);
            }
            GateMode::Bypass => unreachable!(),
        }
    }

    let (g_total, f_out) = match mode {
        GateMode::Gated => {
            let mut total: Option<Var> = None;
            for gate in gates.iter().flatten() {
                total = Some(match total {
                    Some(t) => tape.mul(t, *gate)?,
                    None => *gate,
                });
            }
            match total {
                Some(gt) => {
                    let gated = tape.mul(q_c, gt)?;
                    let out = if alpha == 1.0 { gated } else { tape.scale(gated, alpha)? };
                    (Some(gt), out)
                }
                None => (None, q_c),
            }
        }
        GateMode::Additive => {
            let mut out = q_c;
            for term in additive_terms {
                out = tape.add(out, term)?;
            }
            (None, out)
        }
        GateMode::Bypass => unreachable!(),
    };

    Ok(GatedFeatures { q_c, gates, g_total, f_out, cat_attn, attr_attn })
}

fn dims3(tape: &Tape, v: Var) -> TResult<(usize, usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "cross_attend",
            details: format!("expected rank-3, got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2]))
}

fn split_heads(tape: &mut Tape, x: Var, b: usize, n: usize, h: usize, d: usize) -> TResult<Var> {
    let r = tape.reshape(x, vec![b, n, h, d])?;
    tape.transpose(r, 1, 2)
}

fn merge_heads(tape: &mut Tape, x: Var, b: usize, n: usize, h: usize, d: usize) -> TResult<Var> {
    let t = tape.transpose(x, 1, 2)?;
    tape.reshape(t, vec![b, n, h * d])
}

#[cfg(test)]
mod tests;
