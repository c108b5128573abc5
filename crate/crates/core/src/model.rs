//! Desk-scale query-based segmenter.
//!
//! Pipeline: linear patch embedding with learned positions, gated
//! cross-attention conditioning of the pixel tokens (stage i), a decoder of
//! cross-attention layers whose object queries are conditioned the same way
//! (stage ii), a final gating of the queries right before the mask head
//! (stage iii), per-query masks from a scaled dot product against the pixel
//! tokens upsampled bilinearly to image resolution, and decomposed matching
//! scores from the score module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::eval::Detector;
use crate::fgca::{self, AttnParams, AttnVars, FgcaParams, FgcaVars, GateMode, GatedFeatures};
use crate::matching::{self, MatchWeights};
use crate::prompt::{self, EmbeddingTable, PromptBundle, Vocabulary, PHRASE_TOKENS};
use crate::rng;
use crate::score::{self, AggregationMode, BranchLogits, ScoreParams, ScoreVars};
use crate::synth::{Dataset, PromptSpec, SynthScene};
use crate::tensor::{Tape, Tensor, Var};

/// How the textual prompt reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    /// Category and each attribute as separate branches.
    Decomposed,
    /// Whole prompt as one sequence on the category branch.
    Concatenated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub decoder_depth: usize,
    pub groups: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub aggregation: AggregationMode,
    pub gating: bool,
    pub prompt_strategy: PromptStrategy,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub score_threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            heads: 4,
            queries: 8,
            decoder_depth: 2,
            groups: 2,
            embed_dim: 32,
            tau: 1.0,
            aggregation: AggregationMode::LogSpaceAnd,
            gating: true,
            prompt_strategy: PromptStrategy::Decomposed,
            alpha: 1.0,
            learning_rate: 3e-3,
            epochs: 30,
            score_threshold: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn pixel_tokens(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config("image size must be divisible by patch size".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config("dim must be divisible by head count".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold) || self.score_threshold <= 0.0 {
            return Err(Error::Config("score threshold must lie in (0,1)".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    fn gate_mode(&self) -> GateMode {
        if self.aggregation == AggregationMode::AdditiveFusion {
            GateMode::Additive
        } else if self.gating {
            GateMode::Gated
        } else {
            GateMode::Bypass
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub attn: AttnParams,
    pub fgca: FgcaParams,
}

/// All trainable state plus the derived (constant) upsampling operator.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub embed: EmbeddingTable,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos_emb: Tensor,
    pub query_emb: Tensor,
    pub fgca_pixels: FgcaParams,
    pub decoder: Vec<DecoderLayer>,
    pub fgca_mask: FgcaParams,
    pub score: ScoreParams,
    upsample: Tensor,
}

impl ModelState {
    pub fn init(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let patch_in = config.patch_size * config.patch_size * 3;
        let embed = EmbeddingTable::init(vocab_size, c, &mut rng::stream(config.seed, "init/embed"));
        let patch_w = Tensor::randn(
            vec![patch_in, c],
            (1.0 / patch_in as f64).sqrt(),
            &mut rng::stream(config.seed, "init/patch"),
        );
        let patch_b = Tensor::zeros(vec![c]);
        let pos_emb = Tensor::randn(
            vec![config.pixel_tokens(), c],
            0.02,
            &mut rng::stream(config.seed, "init/pos"),
        );
        let query_emb =
            Tensor::randn(vec![config.queries, c], 0.5, &mut rng::stream(config.seed, "init/query"));
        let fgca_pixels =
            FgcaParams::init(c, config.heads, &mut rng::stream(config.seed, "init/fgca-pixels"));
        let decoder = (0..config.decoder_depth)
            .map(|l| DecoderLayer {
                attn: AttnParams::init(c, &mut rng::stream(config.seed, &format!("init/dec{l}-attn"))),
                fgca: FgcaParams::init(
                    c,
                    config.heads,
                    &mut rng::stream(config.seed, &format!("init/dec{l}-fgca")),
                ),
            })
            .collect();
        let fgca_mask =
            FgcaParams::init(c, config.heads, &mut rng::stream(config.seed, "init/fgca-mask"));
        let score = ScoreParams::init(
            c,
            config.embed_dim,
            config.tau,
            &mut rng::stream(config.seed, "init/score"),
        );
        let upsample = bilinear_upsample_matrix(config.patch_grid(), config.image_size);
        Ok(ModelState {
            config,
            vocab_size,
            embed,
            patch_w,
            patch_b,
            pos_emb,
            query_emb,
            fgca_pixels,
            decoder,
            fgca_mask,
            score,
            upsample,
        })
    }

    /// Canonical parameter order; checkpoints, the optimizer and gradient
    /// extraction all follow it.
    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("embed.weights".into(), &self.embed.weights));
        out.push(("patch.w".into(), &self.patch_w));
        out.push(("patch.b".into(), &self.patch_b));
        out.push(("pos_emb".into(), &self.pos_emb));
        out.push(("query_emb".into(), &self.query_emb));
        self.fgca_pixels.visit("fgca_pixels", out);
        for (l, layer) in self.decoder.iter().enumerate() {
            layer.attn.visit(&format!("decoder{l}.attn"), out);
            layer.fgca.visit(&format!("decoder{l}.fgca"), out);
        }
        self.fgca_mask.visit("fgca_mask", out);
        self.score.visit("score", out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("embed.weights".into(), &mut self.embed.weights));
        out.push(("patch.w".into(), &mut self.patch_w));
        out.push(("patch.b".into(), &mut self.patch_b));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        out.push(("query_emb".into(), &mut self.query_emb));
        self.fgca_pixels.visit_mut("fgca_pixels", out);
        for (l, layer) in self.decoder.iter().enumerate() {
            layer.attn.visit_mut(&format!("decoder{l}.attn"), out);
            layer.fgca.visit_mut(&format!("decoder{l}.fgca"), out);
        }
        self.fgca_mask.visit_mut("fgca_mask", out);
        self.score.visit_mut("score", out);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![];
        self.visit(&mut out);
        out.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuild a state from `(name, tensor)` pairs, e.g. a checkpoint body.
    pub fn from_named_tensors(
        config: ModelConfig,
        vocab_size: usize,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut state = ModelState::init(config, vocab_size)?;
        let mut slots = vec![];
        state.visit_mut(&mut slots);
        if slots.len() != tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, model expects {}",
                tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), (got_name, got)) in slots.into_iter().zip(tensors) {
            if &name != got_name {
                return Err(Error::Config(format!(
                    "checkpoint array {got_name:?} does not match expected {name:?}"
                )));
            }
            if slot.shape() != got.shape() {
                return Err(Error::Config(format!("array {name:?} has shape {:?}", got.shape())));
            }
            *slot = got.clone();
        }
        Ok(state)
    }

    fn register(&self, tape: &mut Tape) -> StateVars {
        let mut named = vec![];
        self.visit(&mut named);
        let ordered: Vec<(String, Var)> =
            named.into_iter().map(|(n, t)| (n, tape.leaf(t.clone()))).collect();
        StateVars::from_ordered(&self.config, ordered)
    }
}

/// Bilinear interpolation from the patch grid to image resolution as a
/// `[P, H*W]` matrix, so upsampling is a plain matmul.
fn bilinear_upsample_matrix(grid: usize, image: usize) -> Tensor {
    let p = image / grid;
    let mut data = vec![0.0; grid * grid * image * image];
    let hw = image * image;
    for y in 0..image {
        for x in 0..image {
            let gy = ((y as f64 + 0.5) / p as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let gx = ((x as f64 + 0.5) / p as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let px = y * image + x;
            data[(y0 * grid + x0) * hw + px] += (1.0 - fy) * (1.0 - fx);
            data[(y0 * grid + x1) * hw + px] += (1.0 - fy) * fx;
            data[(y1 * grid + x0) * hw + px] += fy * (1.0 - fx);
            data[(y1 * grid + x1) * hw + px] += fy * fx;
        }
    }
    Tensor::new(vec![grid * grid, hw], data).expect("upsample shape")
}

/// Flatten a CHW f32 image into per-patch rows `[P, p*p*3]`.
pub fn patchify(image: &[f32], image_size: usize, patch: usize) -> Tensor {
    let grid = image_size / patch;
    let hw = image_size * image_size;
    let mut data = vec![0.0; grid * grid * patch * patch * 3];
    let row_len = patch * patch * 3;
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let mut i = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let y = gy * patch + py;
                    let x = gx * patch + px;
                    for ch in 0..3 {
                        data[row * row_len + i] = f64::from(image[ch * hw + y * image_size + x]);
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, row_len], data).expect("patch shape")
}

struct StateVars {
    embed: Var,
    patch_w: Var,
    patch_b: Var,
    pos_emb: Var,
    query_emb: Var,
    fgca_pixels: FgcaVars,
    decoder: Vec<(AttnVars, FgcaVars)>,
    fgca_mask: FgcaVars,
    score: ScoreVars,
    ordered: Vec<(String, Var)>,
}

impl StateVars {
    fn from_ordered(config: &ModelConfig, ordered: Vec<(String, Var)>) -> StateVars {
        let mut it = ordered.iter().map(|(_, v)| *v);
        let mut next = || it.next().expect("parameter order");
        let mut attn = |next: &mut dyn FnMut() -> Var| AttnVars {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln_gamma: next(),
            ln_beta: next(),
        };
        let mut fgca = |next: &mut dyn FnMut() -> Var| FgcaVars {
            heads: config.heads,
            dim: config.dim,
            cat: attn(next),
            attr: attn(next),
            gate_w: next(),
            gate_b: next(),
        };
        let embed = next();
        let patch_w = next();
        let patch_b = next();
        let pos_emb = next();
        let query_emb = next();
        let fgca_pixels = fgca(&mut next);
        let decoder = (0..config.decoder_depth).map(|_| (attn(&mut next), fgca(&mut next))).collect();
        let fgca_mask = fgca(&mut next);
        let score = ScoreVars { proj_query: next(), proj_text: next(), tau: config.tau };
        assert!(it.next().is_none(), "parameter order mismatch");
        StateVars {
            embed,
            patch_w,
            patch_b,
            pos_emb,
            query_emb,
            fgca_pixels,
            decoder,
            fgca_mask,
            score,
            ordered,
        }
    }
}

/// One forward pass: the tape plus handles to everything downstream
/// consumers read (scores, masks, attention maps).
pub struct ForwardPass {
    pub tape: Tape,
    params: Vec<(String, Var)>,
    /// `[1, N]` final matching log-probabilities.
    pub log_probs: Var,
    /// Raw aggregated score of the configured mode.
    pub raw_score: Var,
    /// `[N, H*W]` sigmoid masks.
    pub masks: Var,
    /// `[N, H*W]` pre-sigmoid mask logits.
    pub mask_logits: Var,
    pub branches: BranchLogits,
    /// Stage-(i) gated features over pixel tokens, for visualization.
    pub stage_pixels: GatedFeatures,
    pub presence: Vec<u8>,
}

impl ForwardPass {
    pub fn log_prob_values(&self) -> Vec<f64> {
        self.tape.value(self.log_probs).data().to_vec()
    }

    pub fn mask_values(&self) -> Vec<Vec<f64>> {
        let hw = self.tape.shape(self.masks)[1];
        self.tape.value(self.masks).data().chunks(hw).map(|c| c.to_vec()).collect()
    }
}

fn validity_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("validity")
}

/// Run the model on one image and one decomposed prompt.
pub fn forward(state: &ModelState, image: &[f32], bundle: &PromptBundle) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let vars = state.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, state, image, bundle)?;
    Ok(ForwardPass {
        params: vars.ordered.clone(),
        log_probs: out.0,
        raw_score: out.1,
        masks: out.2,
        mask_logits: out.3,
        branches: out.4,
        stage_pixels: out.5,
        presence: out.6,
        tape,
    })
}

type ForwardHandles = (Var, Var, Var, Var, BranchLogits, GatedFeatures, Vec<u8>);

fn forward_on_tape(
    tape: &mut Tape,
    vars: &StateVars,
    state: &ModelState,
    image: &[f32],
    bundle: &PromptBundle,
) -> Result<ForwardHandles> {
    let cfg = &state.config;
    let bundle = match cfg.prompt_strategy {
        PromptStrategy::Decomposed => bundle.clone(),
        PromptStrategy::Concatenated => prompt::to_concatenated_bundle(bundle)?,
    };
    let k = bundle.group_count();
    let presence = bundle.presence.clone();
    let presence_rows = vec![presence.clone()];
    let mode = cfg.gate_mode();

    // pixel tokens
    let patches = tape.constant(patchify(image, cfg.image_size, cfg.patch_size));
    let projected = tape.matmul(patches, vars.patch_w)?;
    let biased = tape.add(projected, vars.patch_b)?;
    let located = tape.add(biased, vars.pos_emb)?;
    let p = cfg.pixel_tokens();
    let mut pixels = tape.reshape(located, vec![1, p, cfg.dim])?;

    // text branches
    let (t_c_flat, t_a_flat) = prompt::embed(tape, &bundle, vars.embed)?;
    let t_c = tape.reshape(t_c_flat, vec![1, PHRASE_TOKENS, cfg.dim])?;
    let mut t_attrs = Vec::with_capacity(k);
    for t in t_a_flat {
        t_attrs.push(tape.reshape(t, vec![1, PHRASE_TOKENS, cfg.dim])?);
    }
    let cat_validity = validity_tensor(bundle.category_validity());
    let attr_validity: Vec<Tensor> =
        (0..k).map(|g| validity_tensor(bundle.attribute_validity(g))).collect();

    // stage (i): condition pixel tokens
    let stage_pixels = fgca::compose(
        tape,
        pixels,
        t_c,
        &t_attrs,
        &cat_validity,
        &attr_validity,
        &presence_rows,
        &vars.fgca_pixels,
        mode,
        cfg.alpha,
    )?;
    pixels = stage_pixels.f_out;

    // stage (ii): decode object queries against conditioned pixels
    let all_pixels_valid = Tensor::full(vec![1, p], 1.0);
    let mut queries = tape.reshape(vars.query_emb, vec![1, cfg.queries, cfg.dim])?;
    for (attn_vars, fgca_vars) in &vars.decoder {
        let (ca, _) = fgca::cross_attend(tape, queries, pixels, &all_pixels_valid, attn_vars, cfg.heads)?;
        let normed = tape.layernorm(ca, attn_vars.ln_gamma, attn_vars.ln_beta)?;
        let gf = fgca::compose(
            tape,
            normed,
            t_c,
            &t_attrs,
            &cat_validity,
            &attr_validity,
            &presence_rows,
            fgca_vars,
            mode,
            cfg.alpha,
        )?;
        queries = gf.f_out;
    }

    // stage (iii): gate queries right before the mask head
    let gated = fgca::compose(
        tape,
        queries,
        t_c,
        &t_attrs,
        &cat_validity,
        &attr_validity,
        &presence_rows,
        &vars.fgca_mask,
        mode,
        cfg.alpha,
    )?;
    let mask_queries = gated.f_out;

    // mask head: dot against pixel tokens, bilinear-upsample the logits
    let pixels_t = tape.transpose(pixels, 1, 2)?;
    let coarse = tape.matmul(mask_queries, pixels_t)?;
    let scaled = tape.scale(coarse, 1.0 / (cfg.dim as f64).sqrt())?;
    let coarse2 = tape.reshape(scaled, vec![cfg.queries, p])?;
    let up = tape.constant(state.upsample.clone());
    let mask_logits = tape.matmul(coarse2, up)?;
    let masks = tape.sigmoid(mask_logits)?;

    // decomposed matching scores on the decoder output queries
    let branches = score::all_branch_logits(
        tape,
        queries,
        t_c,
        &t_attrs,
        &cat_validity,
        &attr_validity,
        &presence_rows,
        &vars.score,
    )?;
    let raw_score = score::aggregate_variant(tape, cfg.aggregation, branches.s_c, &branches.s_a, &presence_rows)?;
    let log_probs = score::score_to_log_prob(tape, cfg.aggregation, raw_score)?;

    Ok((log_probs, raw_score, masks, mask_logits, branches, stage_pixels, presence))
}

// ── prediction ───────────────────────────────────────────────────────

/// Thresholded instance predictions, sorted by score descending.
pub fn predict(
    state: &ModelState,
    image: &[f32],
    bundle: &PromptBundle,
    threshold: f64,
) -> Result<Vec<(f64, Vec<bool>)>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Tensor(TensorError::Contract(format!(
            "score threshold must lie in (0,1], got {threshold}"
        ))));
    }
    let fwd = forward(state, image, bundle)?;
    let scores = fwd.log_prob_values();
    let masks = fwd.mask_values();
    let mut out: Vec<(f64, Vec<bool>)> = scores
        .iter()
        .zip(masks)
        .filter_map(|(&l, m)| {
            // the clamp keeps every score strictly below 1
            let s = l.min(crate::tensor::LOG_PROB_CLAMP).exp();
            (s >= threshold).then(|| (s, m.iter().map(|&v| v >= 0.5).collect()))
        })
        .collect();
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    Ok(out)
}

/// Adapter running the model inside the evaluation protocol.
pub struct ModelDetector<'a> {
    pub state: &'a ModelState,
    pub vocab: Vocabulary,
    pub space: crate::synth::CompositionSpace,
}

impl<'a> ModelDetector<'a> {
    pub fn new(state: &'a ModelState, space: &crate::synth::CompositionSpace) -> Self {
        ModelDetector { state, vocab: space.vocabulary(), space: space.clone() }
    }
}

impl Detector for ModelDetector<'_> {
    fn detect(&self, scene: &SynthScene, prompt_spec: &PromptSpec) -> Vec<(f64, Vec<bool>)> {
        let (cat, attrs) = prompt_spec.names(&self.space);
        let bundle = prompt::decompose(cat, &attrs, &self.vocab).expect("prompt from space");
        predict(self.state, &scene.image, &bundle, self.state.config.score_threshold)
            .expect("forward pass")
    }
}

// ── training ─────────────────────────────────────────────────────────

/// Adam over the canonical parameter order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![], v: vec![] }
    }

    pub fn apply(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Option<Tensor>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub samples: usize,
    pub loss: f64,
    pub score_loss: f64,
    pub mask_loss: f64,
}

const DICE_WEIGHT: f64 = 5.0;
const MASK_BCE_WEIGHT: f64 = 1.0;

/// Score BCE plus Dice and mask BCE over matched pairs, appended to the
/// forward tape.
#[allow(clippy::too_many_arguments)]
fn loss_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    log_probs: Var,
    raw_score: Var,
    masks: Var,
    mask_logits: Var,
    labels: &Tensor,
    gt_rows: &Tensor,
    selection: &[f64],
) -> Result<(Var, Var, Var)> {
    let score_loss = if cfg.aggregation == AggregationMode::ProbProduct {
        score::prob_space_bce(tape, raw_score, labels)?
    } else {
        score::log_space_bce(tape, log_probs, labels)?
    };

    let matched: f64 = selection.iter().sum();
    let mask_loss = if matched > 0.0 {
        let n = cfg.queries;
        let hw = cfg.image_size * cfg.image_size;
        let gt = tape.constant(gt_rows.clone());
        let sel = tape.constant(
            Tensor::new(vec![n], selection.iter().map(|&s| s / matched).collect()).unwrap(),
        );

        // soft dice per query
        let inter = tape.mul(masks, gt)?;
        let inter_sum = tape.sum_lastdim(inter)?;
        let pred_sum = tape.sum_lastdim(masks)?;
        let gt_sum = tape.sum_lastdim(gt)?;
        let num = tape.scale(inter_sum, 2.0)?;
        let num_s = tape.add_scalar(num, 1.0)?;
        let den = tape.add(pred_sum, gt_sum)?;
        let den_s = tape.add_scalar(den, 1.0)?;
        let dice = tape.div(num_s, den_s)?;
        let dice_loss_q = tape.scale(dice, -1.0)?;
        let dice_loss_q = tape.add_scalar(dice_loss_q, 1.0)?;
        let dice_sel = tape.mul(dice_loss_q, sel)?;
        let dice_loss = tape.sum(dice_sel)?;

        // per-pixel bce via log-sigmoid on the logits
        let log_p = tape.log_sigmoid(mask_logits)?;
        let neg_logits = tape.scale(mask_logits, -1.0)?;
        let log_q = tape.log_sigmoid(neg_logits)?;
        let gt_inv = tape.constant(
            Tensor::new(vec![n, hw], gt_rows.data().iter().map(|&v| 1.0 - v).collect()).unwrap(),
        );
        let pos = tape.mul(gt, log_p)?;
        let neg = tape.mul(gt_inv, log_q)?;
        let ce = tape.add(pos, neg)?;
        let ce_q = tape.sum_lastdim(ce)?;
        let ce_scaled = tape.scale(ce_q, -1.0 / hw as f64)?;
        let ce_sel = tape.mul(ce_scaled, sel)?;
        let bce_loss = tape.sum(ce_sel)?;

        let d = tape.scale(dice_loss, DICE_WEIGHT)?;
        let b = tape.scale(bce_loss, MASK_BCE_WEIGHT)?;
        tape.add(d, b)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let total = tape.add(score_loss, mask_loss)?;
    Ok((total, score_loss, mask_loss))
}

/// One optimizer step on one labeled sample. Returns (total, score, mask)
/// loss values.
pub fn train_step(
    state: &mut ModelState,
    scene: &SynthScene,
    bundle: &PromptBundle,
    target_instances: &[usize],
    opt: &mut Adam,
) -> Result<(f64, f64, f64)> {
    let cfg = state.config.clone();
    let mut fwd = forward(state, &scene.image, bundle)?;

    let log_scores = fwd.log_prob_values();
    let pred_masks = fwd.mask_values();
    let gt_masks: Vec<Vec<f64>> =
        target_instances.iter().map(|&ix| scene.instances[ix].mask_f64()).collect();
    let assignment = matching::match_queries(&log_scores, &pred_masks, &gt_masks, &MatchWeights::default());

    let n = cfg.queries;
    let hw = cfg.image_size * cfg.image_size;
    let mut gt_rows = vec![0.0; n * hw];
    let mut selection = vec![0.0; n];
    for &(q, t) in &assignment.pairs {
        gt_rows[q * hw..(q + 1) * hw].copy_from_slice(&gt_masks[t]);
        selection[q] = 1.0;
    }
    let labels = Tensor::new(vec![1, n], assignment.labels.clone()).unwrap();
    let gt_rows = Tensor::new(vec![n, hw], gt_rows).unwrap();

    let (total, score_l, mask_l) = loss_on_tape(
        &mut fwd.tape,
        &cfg,
        fwd.log_probs,
        fwd.raw_score,
        fwd.masks,
        fwd.mask_logits,
        &labels,
        &gt_rows,
        &selection,
    )?;
    let loss_val = fwd.tape.value(total).item();
    if !loss_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss on scene {} (prompt bundle {:?})",
            scene.id, bundle.presence
        )));
    }
    fwd.tape.backward(total)?;

    let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(fwd.params.len());
    for (name, var) in &fwd.params {
        let mut g = fwd.tape.grad(*var);
        if name == "embed.weights" {
            if let Some(g) = g.as_mut() {
                let c = state.config.dim;
                g.data_mut()[..c].fill(0.0); // padding row stays frozen
            }
        }
        grads.push(g);
    }
    let score_val = fwd.tape.value(score_l).item();
    let mask_val = fwd.tape.value(mask_l).item();
    drop(fwd);

    let mut params = vec![];
    state.visit_mut(&mut params);
    opt.apply(&mut params, &grads);
    Ok((loss_val, score_val, mask_val))
}

/// One pass over the training samples in a seed-derived shuffled order.
pub fn train_epoch(
    dataset: &Dataset,
    state: &mut ModelState,
    opt: &mut Adam,
    epoch: usize,
) -> Result<EpochStats> {
    if dataset.samples.is_empty() {
        return Err(Error::Training("dataset has no training samples".into()));
    }
    let vocab = dataset.spec.space.vocabulary();
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng::stream(state.config.seed, &format!("shuffle/{epoch}")));

    let (mut total, mut score_sum, mut mask_sum) = (0.0, 0.0, 0.0);
    for &ix in &order {
        let sample = &dataset.samples[ix];
        let scene = dataset
            .scene(&sample.scene_id)
            .ok_or_else(|| Error::Training(format!("sample references unknown scene {}", sample.scene_id)))?;
        let (cat, attrs) = sample.prompt.names(&dataset.spec.space);
        let bundle = prompt::decompose(cat, &attrs, &vocab).map_err(Error::Prompt)?;
        let (l, s, m) = train_step(state, scene, &bundle, &sample.targets, opt)?;
        total += l;
        score_sum += s;
        mask_sum += m;
    }
    let n = order.len() as f64;
    Ok(EpochStats {
        epoch,
        samples: order.len(),
        loss: total / n,
        score_loss: score_sum / n,
        mask_loss: mask_sum / n,
    })
}

#[cfg(test)]
mod tests;
