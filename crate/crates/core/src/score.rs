//! Decomposed matching scores and compositional aggregation.
//!
//! Each semantic unit (category, each attribute) forms an independent
//! matching branch: pooled text embedding and query features are projected
//! into a shared space and compared by a scaled dot product. Branch logits
//! are mapped to log-probabilities and aggregated additively — the log-space
//! equivalent of multiplying per-branch probabilities (AND semantics) —
//! normalized by the number of active components. The ablation variants
//! (mean, max/OR, prob-space product, additive passthrough) live behind the
//! same interface.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{TResult, Tape, Tensor, Var};

/// Shared projection into the matching space, used by every branch.
#[derive(Debug, Clone)]
pub struct ScoreParams {
    pub proj_query: Tensor,
    pub proj_text: Tensor,
    /// Temperature; logits scale as 1/tau.
    pub tau: f64,
}

impl ScoreParams {
    pub fn init(dim: usize, embed_dim: usize, tau: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        assert!(tau > 0.0, "temperature must be positive");
        let std = (1.0 / dim as f64).sqrt();
        ScoreParams {
            proj_query: Tensor::randn(vec![dim, embed_dim], std, rng),
            proj_text: Tensor::randn(vec![dim, embed_dim], std, rng),
            tau,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.proj_query"), &self.proj_query));
        out.push((format!("{prefix}.proj_text"), &self.proj_text));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.proj_query"), &mut self.proj_query));
        out.push((format!("{prefix}.proj_text"), &mut self.proj_text));
    }

    pub fn register(&self, tape: &mut Tape) -> ScoreVars {
        ScoreVars {
            proj_query: tape.leaf(self.proj_query.clone()),
            proj_text: tape.leaf(self.proj_text.clone()),
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub proj_query: Var,
    pub proj_text: Var,
    pub tau: f64,
}

/// Score-level aggregation across branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Normalized sum of per-branch log-sigmoid scores (the full method).
    LogSpaceAnd,
    /// Literal probability product, trained with prob-space BCE.
    ProbProduct,
    /// Normalized mean of branch logits.
    MeanLogit,
    /// Max over branch logits: OR semantics.
    MaxLogit,
    /// Category branch only; attribute fusion happened at the feature level.
    AdditiveFusion,
}

/// Per-branch matching logits for one batch of queries.
pub struct BranchLogits {
    pub s_c: Var,
    /// One entry per attribute group; `None` when absent in every batch row.
    pub s_a: Vec<Option<Var>>,
    /// presence[b][k]
    pub presence: Vec<Vec<u8>>,
}

/// `S[b,n] = <P_q H[b,n], P_t tbar[b]> / (tau * sqrt(d_e))`
pub fn branch_logits(
    tape: &mut Tape,
    h: Var,
    pooled_text: Var,
    params: &ScoreVars,
) -> TResult<Var> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "branch_logits",
            details: format!("queries must be [B,N,C], got {hs:?}"),
        });
    }
    let (b, n, c) = (hs[0], hs[1], hs[2]);
    if tape.shape(pooled_text) != [b, c] {
        return Err(TensorError::ShapeMismatch {
            op: "branch_logits",
            details: format!("pooled text {:?}, expected [{b}, {c}]", tape.shape(pooled_text)),
        });
    }
    let d_e = tape.shape(params.proj_query)[1];
    let hq = tape.matmul(h, params.proj_query)?;
    let t2 = tape.reshape(pooled_text, vec![b, 1, c])?;
    let tq = tape.matmul(t2, params.proj_text)?;
    let tqt = tape.transpose(tq, 1, 2)?;
    let dots = tape.matmul(hq, tqt)?;
    let flat = tape.reshape(dots, vec![b, n])?;
    tape.scale(flat, 1.0 / (params.tau * (d_e as f64).sqrt()))
}

/// Logits for the category branch and every active attribute branch.
///
/// Rows where a group is absent pool over a dummy-valid first token; their
/// logits are multiplied away by the presence mask during aggregation.
#[allow(clippy::too_many_arguments)]
pub fn all_branch_logits(
    tape: &mut Tape,
    h: Var,
    t_c: Var,
    t_attrs: &[Var],
    cat_validity: &Tensor,
    attr_validity: &[Tensor],
    presence: &[Vec<u8>],
    params: &ScoreVars,
) -> TResult<BranchLogits> {
    let pooled_c = tape.mean_pool_masked(t_c, cat_validity)?;
    let s_c = branch_logits(tape, h, pooled_c, params)?;
    let mut s_a = Vec::with_capacity(t_attrs.len());
    for (k, t_k) in t_attrs.iter().enumerate() {
        let m_col: Vec<f64> = presence.iter().map(|p| f64::from(p[k])).collect();
        if m_col.iter().all(|&m| m == 0.0) {
            s_a.push(None);
            continue;
        }
        let nt = attr_validity[k].shape()[1];
        let mut vdata = attr_validity[k].data().to_vec();
        for (row, &m) in m_col.iter().enumerate() {
            if m == 0.0 {
                vdata[row * nt..(row + 1) * nt].fill(0.0);
                vdata[row * nt] = 1.0;
            }
        }
        let validity = Tensor::new(vec![presence.len(), nt], vdata).expect("validity shape");
        let pooled = tape.mean_pool_masked(*t_k, &validity)?;
        s_a.push(Some(branch_logits(tape, h, pooled, params)?));
    }
    Ok(BranchLogits { s_c, s_a, presence: presence.to_vec() })
}

fn presence_column(presence: &[Vec<u8>], k: usize) -> Vec<f64> {
    presence.iter().map(|p| f64::from(p[k])).collect()
}

fn active_counts(presence: &[Vec<u8>]) -> Vec<f64> {
    presence
        .iter()
        .map(|p| 1.0 + p.iter().map(|&m| f64::from(m)).sum::<f64>())
        .collect()
}

/// Eq.-style log-space AND: `(log s(S_c) + sum_k m_k log s(S_ak)) / (1 + sum_k m_k)`.
pub fn aggregate_log_and(
    tape: &mut Tape,
    s_c: Var,
    s_a: &[Option<Var>],
    presence: &[Vec<u8>],
) -> TResult<Var> {
    let b = presence.len();
    let mut acc = tape.log_sigmoid(s_c)?;
    for (k, branch) in s_a.iter().enumerate() {
        let Some(s_k) = branch else { continue };
        let l_k = tape.log_sigmoid(*s_k)?;
        let m = tape.constant(Tensor::new(vec![b, 1], presence_column(presence, k)).unwrap());
        let masked = tape.mul(l_k, m)?;
        acc = tape.add(acc, masked)?;
    }
    let inv: Vec<f64> = active_counts(presence).iter().map(|&c| 1.0 / c).collect();
    let invt = tape.constant(Tensor::new(vec![b, 1], inv).unwrap());
    tape.mul(acc, invt)
}

/// The raw aggregated score of each mode, exactly as specified:
/// log-probability for LogSpaceAnd, probability for ProbProduct, a logit for
/// the rest.
pub fn aggregate_variant(
    tape: &mut Tape,
    mode: AggregationMode,
    s_c: Var,
    s_a: &[Option<Var>],
    presence: &[Vec<u8>],
) -> TResult<Var> {
    let b = presence.len();
    match mode {
        AggregationMode::LogSpaceAnd => aggregate_log_and(tape, s_c, s_a, presence),
        AggregationMode::MeanLogit => {
            let mut acc = s_c;
            for (k, branch) in s_a.iter().enumerate() {
                let Some(s_k) = branch else { continue };
                let m = tape.constant(Tensor::new(vec![b, 1], presence_column(presence, k)).unwrap());
                let masked = tape.mul(*s_k, m)?;
                acc = tape.add(acc, masked)?;
            }
            let inv: Vec<f64> = active_counts(presence).iter().map(|&c| 1.0 / c).collect();
            let invt = tape.constant(Tensor::new(vec![b, 1], inv).unwrap());
            tape.mul(acc, invt)
        }
        AggregationMode::MaxLogit => {
            let mut acc = s_c;
            for (k, branch) in s_a.iter().enumerate() {
                let Some(s_k) = branch else { continue };
                let col = presence_column(presence, k);
                if col.iter().all(|&m| m == 1.0) {
                    acc = tape.maximum(acc, *s_k)?;
                } else {
                    // absent rows must not compete: push them far below
                    let shift: Vec<f64> = col.iter().map(|&m| (m - 1.0) * 1e9).collect();
                    let sh = tape.constant(Tensor::new(vec![b, 1], shift).unwrap());
                    let damped = tape.add(*s_k, sh)?;
                    acc = tape.maximum(acc, damped)?;
                }
            }
            Ok(acc)
        }
        AggregationMode::ProbProduct => {
            let pi_c = tape.sigmoid(s_c)?;
            let mut acc = pi_c;
            for (k, branch) in s_a.iter().enumerate() {
                let Some(s_k) = branch else { continue };
                let pi_k = tape.sigmoid(*s_k)?;
                let col = presence_column(presence, k);
                if col.iter().all(|&m| m == 1.0) {
                    acc = tape.mul(acc, pi_k)?;
                } else {
                    // m*pi + (1-m): absent rows contribute a neutral factor 1
                    let m = tape.constant(Tensor::new(vec![b, 1], col.clone()).unwrap());
                    let inv = tape.constant(
                        Tensor::new(vec![b, 1], col.iter().map(|&v| 1.0 - v).collect()).unwrap(),
                    );
                    let masked = tape.mul(pi_k, m)?;
                    let neutral = tape.add(masked, inv)?;
                    acc = tape.mul(acc, neutral)?;
                }
            }
            Ok(acc)
        }
        AggregationMode::AdditiveFusion => Ok(s_c),
    }
}

/// Map a raw aggregated score to the final matching log-probability.
pub fn score_to_log_prob(tape: &mut Tape, mode: AggregationMode, raw: Var) -> TResult<Var> {
    match mode {
        AggregationMode::LogSpaceAnd => Ok(raw),
        AggregationMode::MeanLogit | AggregationMode::MaxLogit | AggregationMode::AdditiveFusion => {
            tape.log_sigmoid(raw)
        }
        AggregationMode::ProbProduct => {
            let floor = tape.constant(Tensor::full(tape.shape(raw).to_vec(), 1e-300));
            let safe = tape.maximum(raw, floor)?;
            tape.ln(safe)
        }
    }
}

/// Log-space binary cross-entropy over log-probabilities `l <= 0`:
/// `mean(-y*l - (1-y)*log(1 - exp(l)))`, negative branch stabilized by the
/// expm1/log1p split and the -1e-7 clamp inside `log1mexp`.
pub fn log_space_bce(tape: &mut Tape, log_probs: Var, targets: &Tensor) -> TResult<Var> {
    if targets.shape() != tape.shape(log_probs) {
        return Err(TensorError::ShapeMismatch {
            op: "log_space_bce",
            details: format!("targets {:?} vs scores {:?}", targets.shape(), tape.shape(log_probs)),
        });
    }
    let n = targets.numel() as f64;
    let y = tape.constant(targets.clone());
    let y_inv = tape.constant(
        Tensor::new(targets.shape().to_vec(), targets.data().iter().map(|&v| 1.0 - v).collect())
            .unwrap(),
    );
    let pos = tape.mul(y, log_probs)?;
    let lneg = tape.log1mexp(log_probs)?;
    let neg = tape.mul(y_inv, lneg)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0 / n)
}

/// BCE evaluated literally in probability space — the unstable baseline the
/// prob-space-product arm trains with.
pub fn prob_space_bce(tape: &mut Tape, probs: Var, targets: &Tensor) -> TResult<Var> {
    if targets.shape() != tape.shape(probs) {
        return Err(TensorError::ShapeMismatch {
            op: "prob_space_bce",
            details: format!("targets {:?} vs probs {:?}", targets.shape(), tape.shape(probs)),
        });
    }
    let n = targets.numel() as f64;
    let shape = tape.shape(probs).to_vec();
    let floor = tape.constant(Tensor::full(shape.clone(), 1e-300));
    let y = tape.constant(targets.clone());
    let y_inv = tape.constant(
        Tensor::new(shape.clone(), targets.data().iter().map(|&v| 1.0 - v).collect()).unwrap(),
    );
    let p_safe = tape.maximum(probs, floor)?;
    let ln_p = tape.ln(p_safe)?;
    let pos = tape.mul(y, ln_p)?;
    let neg_p = tape.scale(probs, -1.0)?;
    let one_m = tape.add_scalar(neg_p, 1.0)?;
    let q_safe = tape.maximum(one_m, floor)?;
    let ln_q = tape.ln(q_safe)?;
    let neg = tape.mul(y_inv, ln_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0 / n)
}

/// One row of the per-query score dump emitted for debugging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDump {
    pub scene_id: String,
    pub prompt: String,
    pub query: usize,
    pub log_category: f64,
    pub log_attributes: Vec<f64>,
    pub log_score: f64,
}
