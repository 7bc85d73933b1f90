//! Toy vision-language surrogate.
//!
//! 32×32×3 image → 64 patch tokens → shared 2-layer, 4-head transformer over
//! the sequence `[BOS] image [SEP] question(+trigger) [SEP] answer [EOS]`.
//! The forward pass runs on the autodiff tape and returns a `ForwardTrace`
//! with per-position logits, every head's causal attention matrix, the token
//! partition, and the teacher-forcing loss. Gradients are available for three
//! leaf families: raw pixels (differentiable processor mode only), the text
//! embeddings at trigger slots, and the trainable parameters.
//!
//! Frozen vs trainable split: the patch projection and both positional tables
//! stay fixed after construction; everything else (projector, text embedding,
//! transformer blocks, output head) trains.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::processor::{self, Image, N_PATCHES, PATCH_DIM, PIXELS};
pub use crate::processor::ProcMode;
use crate::rng::Stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Mat;
use crate::tokenizer::{self, MiniTokenizer};

pub const D_MODEL: usize = 32;
pub const N_HEADS: usize = 4;
pub const HEAD_DIM: usize = D_MODEL / N_HEADS;
pub const N_LAYERS: usize = 2;
pub const D_MLP: usize = 4 * D_MODEL;
pub const MAX_SEQ: usize = 160;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelError {
    SequenceTooLong { got: usize },
    TokenOutOfVocab { id: u32 },
    TriggerSpanOutOfRange,
    PixelGradsInDeployMode,
    FrozenInMask { index: usize },
    BadMaskIndex { index: usize },
    GradShapeMismatch { name: String },
    NoAdapters,
    BlobSizeMismatch { want: usize, got: usize },
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::SequenceTooLong { got } => {
                write!(f, "sequence of {} tokens exceeds the {} limit", got, MAX_SEQ)
            }
            ModelError::TokenOutOfVocab { id } => write!(f, "token id {} outside vocabulary", id),
            ModelError::TriggerSpanOutOfRange => write!(f, "trigger span exceeds text length"),
            ModelError::PixelGradsInDeployMode => {
                write!(f, "pixel gradients require the differentiable processor mode")
            }
            ModelError::FrozenInMask { index } => {
                write!(f, "update mask touches frozen parameter {}", index)
            }
            ModelError::BadMaskIndex { index } => write!(f, "mask index {} out of range", index),
            ModelError::GradShapeMismatch { name } => {
                write!(f, "gradient shape mismatch for {}", name)
            }
            ModelError::NoAdapters => write!(f, "model has no low-rank adapters"),
            ModelError::BlobSizeMismatch { want, got } => {
                write!(f, "parameter blob holds {} values, expected {}", got, want)
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// One named tensor in the registry.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub frozen: bool,
    pub value: Mat,
}

/// Optional rank-r factors on each layer's query/value projections.
#[derive(Clone, Debug)]
pub struct LoraAdapters {
    pub rank: usize,
    /// Per layer: `[a_q, b_q, a_v, b_v]` with a (d×r) and b (r×d).
    pub mats: Vec<Mat>,
}

#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub seed: u64,
    vocab: usize,
    params: Vec<Param>,
    lora: Option<LoraAdapters>,
}

/// Which positions play which role. The five sets are disjoint and cover
/// `0..len` exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenPartition {
    pub image: Vec<usize>,
    pub text: Vec<usize>,
    pub trigger: Vec<usize>,
    pub answer: Vec<usize>,
    pub template: Vec<usize>,
    pub len: usize,
}

impl TokenPartition {
    /// Check disjointness and coverage; used by tests and debug assertions.
    pub fn is_valid(&self) -> bool {
        let mut seen = vec![0u8; self.len];
        for set in [&self.image, &self.text, &self.trigger, &self.answer, &self.template] {
            for &p in set {
                if p >= self.len {
                    return false;
                }
                seen[p] += 1;
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Everything a forward pass exposes for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Mat,
    /// `[layer][head]`, each row-stochastic and causal (strict upper zeros).
    pub attention: Vec<Vec<Mat>>,
    pub partition: TokenPartition,
    pub loss: f64,
}

/// Forward pass plus the tape handles needed to build losses and pull grads.
pub struct ForwardPass {
    pub tape: Tape,
    pub trace: ForwardTrace,
    pub mode: ProcMode,
    pub loss_node: NodeId,
    pub attn_nodes: Vec<Vec<NodeId>>,
    pixel_leaf: Option<NodeId>,
    text_rows_node: NodeId,
    text_start: usize,
    param_nodes: Vec<NodeId>,
    lora_nodes: Vec<NodeId>,
}

/// Inputs for one sample. `trigger_span` marks which positions of `text_ids`
/// are trigger tokens (for the partition and trigger-embedding gradients).
#[derive(Clone, Copy, Debug)]
pub struct SampleView<'a> {
    pub image: &'a Image,
    pub text_ids: &'a [u32],
    pub trigger_span: Option<(usize, usize)>,
    pub answer_ids: &'a [u32],
}

/// Which gradient leaves to extract after backward.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradRequest {
    pub pixels: bool,
    pub trigger_embeddings: bool,
    pub theta: bool,
}

/// Gradients of the trainable registry (`base`, aligned to the param order,
/// `None` on frozen entries) and of the adapters when present.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub base: Vec<Option<Vec<f64>>>,
    pub lora: Option<Vec<Vec<f64>>>,
}

impl ParamGrads {
    pub fn add_scaled(&mut self, other: &ParamGrads, w: f64) {
        for (a, b) in self.base.iter_mut().zip(&other.base) {
            match (a, b) {
                (Some(x), Some(y)) => x.iter_mut().zip(y).for_each(|(p, q)| *p += w * q),
                (a @ None, Some(y)) => *a = Some(y.iter().map(|q| w * q).collect()),
                _ => {}
            }
        }
        if let (Some(a), Some(b)) = (self.lora.as_mut(), other.lora.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += w * q);
            }
        }
    }

    pub fn scale(&mut self, w: f64) {
        for g in self.base.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= w);
        }
        for g in self.lora.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= w);
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradBundle {
    pub pixels: Option<Vec<f64>>,
    /// One d-vector per trigger slot, in slot order.
    pub trigger_embeddings: Option<Vec<Vec<f64>>>,
    pub theta: Option<ParamGrads>,
}

/// Parameter subset an SGD step may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    pub base: Vec<usize>,
    pub lora: bool,
}

// Registry indices (see `SurrogateModel::new` for the full order).
pub const P_PATCH_PROJ: usize = 0;
pub const P_IMG_POS: usize = 1;
pub const P_SEQ_POS: usize = 2;
pub const P_PROJECTOR_W: usize = 3;
pub const P_PROJECTOR_B: usize = 4;
pub const P_TEXT_EMBED: usize = 5;
pub const LAYER_BASE: usize = 6;
pub const PER_LAYER: usize = 10;
// within a layer block:
pub const L_WQ: usize = 0;
pub const L_WK: usize = 1;
pub const L_WV: usize = 2;
pub const L_WO: usize = 3;
pub const L_NORM1: usize = 4;
pub const L_NORM2: usize = 5;
pub const L_MLP_W1: usize = 6;
pub const L_MLP_B1: usize = 7;
pub const L_MLP_W2: usize = 8;
pub const L_MLP_B2: usize = 9;
pub const P_FINAL_NORM: usize = LAYER_BASE + N_LAYERS * PER_LAYER;
pub const P_HEAD_W: usize = P_FINAL_NORM + 1;
pub const P_HEAD_B: usize = P_FINAL_NORM + 2;
pub const N_PARAMS: usize = P_HEAD_B + 1;

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl SurrogateModel {
    /// Fresh model: frozen front end and trainable stack drawn from per-tensor
    /// streams of `seed`. Values are snapped to f32 so a fresh model is
    /// exactly representable in the on-disk parameter blob.
    pub fn new(seed: u64, vocab: usize) -> Self {
        assert!(vocab > tokenizer::N_SPECIAL, "vocabulary too small");
        let mut params = Vec::new();
        let mut push = |name: String, frozen: bool, rows: usize, cols: usize, kind: InitKind| {
            let mut s = Stream::derive(seed, &format!("param:{name}"), 0);
            let mut m = Mat::zeros(rows, cols);
            match kind {
                InitKind::Xavier => {
                    let std = libm::sqrt(2.0 / (rows + cols) as f64);
                    for v in m.data.iter_mut() {
                        *v = round_f32(s.normal() * std);
                    }
                }
                InitKind::Pos => {
                    for v in m.data.iter_mut() {
                        *v = round_f32(s.normal() * 0.02);
                    }
                }
                InitKind::Ones => m.data.iter_mut().for_each(|v| *v = 1.0),
                InitKind::Zeros => {}
            }
            params.push(Param { name, frozen, value: m });
        };

        push("patch_proj".into(), true, PATCH_DIM, D_MODEL, InitKind::Xavier);
        push("img_pos".into(), true, N_PATCHES, D_MODEL, InitKind::Pos);
        push("seq_pos".into(), true, MAX_SEQ, D_MODEL, InitKind::Pos);
        push("projector_w".into(), false, D_MODEL, D_MODEL, InitKind::Xavier);
        push("projector_b".into(), false, 1, D_MODEL, InitKind::Zeros);
        push("text_embed".into(), false, vocab, D_MODEL, InitKind::Pos);
        for l in 0..N_LAYERS {
            push(format!("layer{l}.attn_wq"), false, D_MODEL, D_MODEL, InitKind::Xavier);
            push(format!("layer{l}.attn_wk"), false, D_MODEL, D_MODEL, InitKind::Xavier);
            push(format!("layer{l}.attn_wv"), false, D_MODEL, D_MODEL, InitKind::Xavier);
            push(format!("layer{l}.attn_wo"), false, D_MODEL, D_MODEL, InitKind::Xavier);
            push(format!("layer{l}.norm1_gain"), false, 1, D_MODEL, InitKind::Ones);
            push(format!("layer{l}.norm2_gain"), false, 1, D_MODEL, InitKind::Ones);
            push(format!("layer{l}.mlp_w1"), false, D_MODEL, D_MLP, InitKind::Xavier);
            push(format!("layer{l}.mlp_b1"), false, 1, D_MLP, InitKind::Zeros);
            push(format!("layer{l}.mlp_w2"), false, D_MLP, D_MODEL, InitKind::Xavier);
            push(format!("layer{l}.mlp_b2"), false, 1, D_MODEL, InitKind::Zeros);
        }
        push("final_norm_gain".into(), false, 1, D_MODEL, InitKind::Ones);
        push("head_w".into(), false, D_MODEL, vocab, InitKind::Xavier);
        push("head_b".into(), false, 1, vocab, InitKind::Zeros);

        SurrogateModel { seed, vocab, params, lora: None }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn lora(&self) -> Option<&LoraAdapters> {
        self.lora.as_ref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraAdapters> {
        self.lora.as_mut()
    }

    /// Attach zero-initialized b / small-random a factors of the given rank
    /// to every layer's query and value projections.
    pub fn attach_lora(&mut self, rank: usize, seed: u64) {
        let mut mats = Vec::new();
        for l in 0..N_LAYERS {
            for tag in ["q", "v"] {
                let mut sa = Stream::derive(seed, &format!("lora:{l}:{tag}:a"), 0);
                let mut a = Mat::zeros(D_MODEL, rank);
                let std = libm::sqrt(1.0 / D_MODEL as f64);
                for v in a.data.iter_mut() {
                    *v = round_f32(sa.normal() * std);
                }
                // b starts at zero so fresh adapters leave the function unchanged.
                mats.push(a);
                mats.push(Mat::zeros(rank, D_MODEL));
            }
        }
        self.lora = Some(LoraAdapters { rank, mats });
    }

    /// Fold `W + A·B` into the base weights and drop the adapters.
    pub fn merge_lora(&mut self) {
        let Some(lora) = self.lora.take() else { return };
        let r = lora.rank;
        for l in 0..N_LAYERS {
            for (slot, which) in [(0usize, L_WQ), (1, L_WV)] {
                let a = &lora.mats[l * 4 + slot * 2];
                let b = &lora.mats[l * 4 + slot * 2 + 1];
                let delta = crate::tensor::matmul(&a.data, &b.data, D_MODEL, r, D_MODEL);
                let w = &mut self.params[LAYER_BASE + l * PER_LAYER + which].value;
                for (x, d) in w.data.iter_mut().zip(&delta) {
                    *x += d;
                }
            }
        }
    }

    pub fn mask_all_trainable(&self) -> ParamMask {
        ParamMask {
            base: self
                .params
                .iter()
                .enumerate()
                .filter(|(_, p)| !p.frozen)
                .map(|(i, _)| i)
                .collect(),
            lora: false,
        }
    }

    pub fn mask_projector(&self) -> ParamMask {
        ParamMask { base: vec![P_PROJECTOR_W, P_PROJECTOR_B], lora: false }
    }

    pub fn mask_lora(&self) -> ParamMask {
        ParamMask { base: Vec::new(), lora: true }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.vocab) {
            Some(&id) => Err(ModelError::TokenOutOfVocab { id }),
            None => Ok(()),
        }
    }

    /// Run the traced forward pass.
    pub fn forward(&self, view: &SampleView, mode: ProcMode) -> Result<ForwardPass, ModelError> {
        self.forward_impl(view, mode, false)
    }

    /// Differentiable forward that skips pixel quantization. Quantization has
    /// zero derivative almost everywhere, so finite differences through the
    /// real pipeline are degenerate; this smooth path is the oracle they run
    /// against. At grid points (pixels that are exact multiples of 1/255) it
    /// agrees with `forward` bit for bit, gradients included.
    pub fn forward_smooth_pixels(&self, view: &SampleView) -> Result<ForwardPass, ModelError> {
        self.forward_impl(view, ProcMode::Differentiable, true)
    }

    fn forward_impl(
        &self,
        view: &SampleView,
        mode: ProcMode,
        skip_quant: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_ids(view.text_ids)?;
        self.check_ids(view.answer_ids)?;
        let lt = view.text_ids.len();
        let la = view.answer_ids.len();
        if let Some((s, e)) = view.trigger_span {
            if s > e || e > lt {
                return Err(ModelError::TriggerSpanOutOfRange);
            }
        }
        let t = 1 + N_PATCHES + 1 + lt + 1 + la + 1;
        if t > MAX_SEQ {
            return Err(ModelError::SequenceTooLong { got: t });
        }

        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.rows, p.value.cols, p.value.data.clone(), !p.frozen))
            .collect();
        let lora_nodes: Vec<NodeId> = match &self.lora {
            Some(l) => l
                .mats
                .iter()
                .map(|m| tape.leaf(m.rows, m.cols, m.data.clone(), true))
                .collect(),
            None => Vec::new(),
        };

        // --- image path ---
        let (pixel_leaf, feats) = match mode {
            ProcMode::Deploy => {
                let q = processor::quantize_pixels(view.image.pixels());
                let m = processor::patchify(&q);
                (None, tape.constant(N_PATCHES, PATCH_DIM, m.data))
            }
            ProcMode::Differentiable => {
                let leaf = tape.leaf(PIXELS, 1, view.image.pixels().to_vec(), true);
                let q = if skip_quant { leaf } else { tape.quantize_ste(leaf) };
                let mut perm = Vec::with_capacity(PIXELS);
                for p in 0..N_PATCHES {
                    perm.extend_from_slice(&processor::patch_pixel_indices(p));
                }
                let gathered = tape.gather_rows(q, &perm);
                (Some(leaf), tape.reshape(gathered, N_PATCHES, PATCH_DIM))
            }
        };
        let projected = tape.matmul(feats, param_nodes[P_PATCH_PROJ]);
        let with_pos = tape.add(projected, param_nodes[P_IMG_POS]);
        let proj = tape.matmul(with_pos, param_nodes[P_PROJECTOR_W]);
        let img_tokens = tape.add_row(proj, param_nodes[P_PROJECTOR_B]);

        // --- text path ---
        let embed = param_nodes[P_TEXT_EMBED];
        let bos = tape.gather_rows(embed, &[tokenizer::BOS as usize]);
        let sep1 = tape.gather_rows(embed, &[tokenizer::SEP as usize]);
        let text_idx: Vec<usize> = view.text_ids.iter().map(|&i| i as usize).collect();
        // Trigger-slot gradients read from this node's rows.
        let text_rows = if lt > 0 {
            tape.gather_rows(embed, &text_idx)
        } else {
            tape.constant(0, D_MODEL, Vec::new())
        };
        let sep2 = tape.gather_rows(embed, &[tokenizer::SEP as usize]);
        let mut tail_idx: Vec<usize> = view.answer_ids.iter().map(|&i| i as usize).collect();
        tail_idx.push(tokenizer::EOS as usize);
        let tail = tape.gather_rows(embed, &tail_idx);

        let seq = if lt > 0 {
            tape.concat_rows(&[bos, img_tokens, sep1, text_rows, sep2, tail])
        } else {
            tape.concat_rows(&[bos, img_tokens, sep1, sep2, tail])
        };
        let pos_idx: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(param_nodes[P_SEQ_POS], &pos_idx);
        let mut h = tape.add(seq, pos);

        // --- transformer stack ---
        let mut attn_nodes: Vec<Vec<NodeId>> = Vec::with_capacity(N_LAYERS);
        let scale = 1.0 / libm::sqrt(HEAD_DIM as f64);
        for l in 0..N_LAYERS {
            let base = LAYER_BASE + l * PER_LAYER;
            let n1 = tape.rmsnorm(h, param_nodes[base + L_NORM1]);
            let wq = self.eff_weight(&mut tape, &param_nodes, &lora_nodes, base + L_WQ, l, 0);
            let wv = self.eff_weight(&mut tape, &param_nodes, &lora_nodes, base + L_WV, l, 1);
            let q = tape.matmul(n1, wq);
            let k = tape.matmul(n1, param_nodes[base + L_WK]);
            let v = tape.matmul(n1, wv);
            let mut heads = Vec::with_capacity(N_HEADS);
            let mut layer_attn = Vec::with_capacity(N_HEADS);
            for hh in 0..N_HEADS {
                let qh = tape.slice_cols(q, hh * HEAD_DIM, HEAD_DIM);
                let kh = tape.slice_cols(k, hh * HEAD_DIM, HEAD_DIM);
                let vh = tape.slice_cols(v, hh * HEAD_DIM, HEAD_DIM);
                let scores = tape.matmul_abt(qh, kh);
                let scaled = tape.scale(scores, scale);
                let attn = tape.causal_softmax(scaled);
                layer_attn.push(attn);
                heads.push(tape.matmul(attn, vh));
            }
            attn_nodes.push(layer_attn);
            let ctx = tape.concat_cols(&heads);
            let out = tape.matmul(ctx, param_nodes[base + L_WO]);
            h = tape.add(h, out);

            let n2 = tape.rmsnorm(h, param_nodes[base + L_NORM2]);
            let m1 = tape.matmul(n2, param_nodes[base + L_MLP_W1]);
            let m1b = tape.add_row(m1, param_nodes[base + L_MLP_B1]);
            let act = tape.gelu(m1b);
            let m2 = tape.matmul(act, param_nodes[base + L_MLP_W2]);
            let m2b = tape.add_row(m2, param_nodes[base + L_MLP_B2]);
            h = tape.add(h, m2b);
        }
        let fin = tape.rmsnorm(h, param_nodes[P_FINAL_NORM]);
        let logits_raw = tape.matmul(fin, param_nodes[P_HEAD_W]);
        let logits = tape.add_row(logits_raw, param_nodes[P_HEAD_B]);

        // --- teacher-forcing loss over answer tokens (+ EOS when nonempty) ---
        let text_start = 1 + N_PATCHES + 1;
        let ans_start = text_start + lt + 1;
        let mut targets: Vec<(usize, usize)> = Vec::with_capacity(la + 1);
        for (j, &a) in view.answer_ids.iter().enumerate() {
            targets.push((ans_start + j - 1, a as usize));
        }
        if la > 0 {
            targets.push((ans_start + la - 1, tokenizer::EOS as usize));
        }
        let loss_node = tape.cross_entropy(logits, &targets);

        // --- partition ---
        let mut partition = TokenPartition { len: t, ..Default::default() };
        partition.template.push(0);
        partition.image.extend(1..1 + N_PATCHES);
        partition.template.push(1 + N_PATCHES);
        let (ts, te) = view.trigger_span.unwrap_or((0, 0));
        for i in 0..lt {
            let pos = text_start + i;
            if view.trigger_span.is_some() && i >= ts && i < te {
                partition.trigger.push(pos);
            } else {
                partition.text.push(pos);
            }
        }
        partition.template.push(text_start + lt);
        partition.answer.extend(ans_start..ans_start + la);
        partition.template.push(ans_start + la);
        debug_assert!(partition.is_valid());

        let attention: Vec<Vec<Mat>> = attn_nodes
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&n| Mat::from_vec(t, t, tape.value(n).to_vec()))
                    .collect()
            })
            .collect();
        let trace = ForwardTrace {
            logits: Mat::from_vec(t, self.vocab, tape.value(logits).to_vec()),
            attention,
            partition,
            loss: tape.scalar(loss_node),
        };

        Ok(ForwardPass {
            tape,
            trace,
            mode,
            loss_node,
            attn_nodes,
            pixel_leaf,
            text_rows_node: text_rows,
            text_start,
            param_nodes,
            lora_nodes,
        })
    }

    /// Base weight, or base + a·b when adapters are attached. `which` is 0
    /// for the query projection and 1 for the value projection.
    fn eff_weight(
        &self,
        tape: &mut Tape,
        param_nodes: &[NodeId],
        lora_nodes: &[NodeId],
        index: usize,
        layer: usize,
        which: usize,
    ) -> NodeId {
        if self.lora.is_none() {
            return param_nodes[index];
        }
        let a = lora_nodes[layer * 4 + which * 2];
        let b = lora_nodes[layer * 4 + which * 2 + 1];
        let ab = tape.matmul(a, b);
        tape.add(param_nodes[index], ab)
    }

    /// Convenience: forward in deploy mode, returning only the trace.
    pub fn trace(&self, view: &SampleView) -> Result<ForwardTrace, ModelError> {
        Ok(self.forward(view, ProcMode::Deploy)?.trace)
    }

    /// Greedy decoding from `[BOS] image [SEP] text [SEP]`; stops at any
    /// special token or after `max_tokens`. Ties resolve to the lowest id.
    pub fn generate(
        &self,
        image: &Image,
        text_ids: &[u32],
        max_tokens: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let mut out: Vec<u32> = Vec::new();
        for _ in 0..max_tokens {
            let view = SampleView {
                image,
                text_ids,
                trigger_span: None,
                answer_ids: &out,
            };
            let pass = self.forward(&view, ProcMode::Deploy)?;
            let t = pass.trace.partition.len;
            // The position holding EOS predicts the next token; its logits row
            // sits right after the last answer token (or the second SEP).
            let row = pass.trace.logits.row(t - 2);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let id = best as u32;
            if MiniTokenizer::is_special(id) {
                break;
            }
            out.push(id);
            if 1 + N_PATCHES + 1 + text_ids.len() + 1 + out.len() + 1 >= MAX_SEQ {
                break;
            }
        }
        Ok(out)
    }

    /// One SGD step over the masked parameters: `p ← p − lr · g`.
    pub fn sgd_step(
        &mut self,
        grads: &ParamGrads,
        lr: f64,
        mask: &ParamMask,
    ) -> Result<(), ModelError> {
        for &i in &mask.base {
            if i >= self.params.len() {
                return Err(ModelError::BadMaskIndex { index: i });
            }
            if self.params[i].frozen {
                return Err(ModelError::FrozenInMask { index: i });
            }
        }
        if mask.lora && self.lora.is_none() {
            return Err(ModelError::NoAdapters);
        }
        for &i in &mask.base {
            let Some(g) = grads.base.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let p = &mut self.params[i].value;
            if g.len() != p.data.len() {
                return Err(ModelError::GradShapeMismatch { name: self.params[i].name.clone() });
            }
            for (x, d) in p.data.iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
        if mask.lora {
            let lora = self.lora.as_mut().unwrap();
            let Some(lg) = grads.lora.as_ref() else {
                return Ok(());
            };
            for (m, g) in lora.mats.iter_mut().zip(lg) {
                if g.len() != m.data.len() {
                    return Err(ModelError::GradShapeMismatch { name: "lora".into() });
                }
                for (x, d) in m.data.iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
        }
        Ok(())
    }

    /// (name, rows, cols, frozen) in blob order.
    pub fn param_specs(&self) -> Vec<(String, usize, usize, bool)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.rows, p.value.cols, p.frozen))
            .collect()
    }

    /// All parameters flattened to f32 in registry order (no adapters).
    pub fn flat_f32(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend(p.value.data.iter().map(|&v| v as f32));
        }
        out
    }

    pub fn load_flat_f32(&mut self, blob: &[f32]) -> Result<(), ModelError> {
        let want: usize = self.params.iter().map(|p| p.value.data.len()).sum();
        if blob.len() != want {
            return Err(ModelError::BlobSizeMismatch { want, got: blob.len() });
        }
        let mut off = 0;
        for p in &mut self.params {
            for v in p.value.data.iter_mut() {
                *v = blob[off] as f64;
                off += 1;
            }
        }
        Ok(())
    }
}

enum InitKind {
    Xavier,
    Pos,
    Ones,
    Zeros,
}

impl ForwardPass {
    /// Extract the requested leaf gradients of `root` (any scalar node built
    /// on this tape — the train loss or a composed protection loss).
    pub fn gradients(&self, root: NodeId, req: GradRequest) -> Result<GradBundle, ModelError> {
        if req.pixels && self.pixel_leaf.is_none() {
            return Err(ModelError::PixelGradsInDeployMode);
        }
        let mut grads = self.tape.backward(root);
        let pixels = if req.pixels {
            let leaf = self.pixel_leaf.unwrap();
            Some(grads.take(leaf).unwrap_or_else(|| vec![0.0; PIXELS]))
        } else {
            None
        };
        let trigger_embeddings = if req.trigger_embeddings {
            let span = self.trigger_slots();
            let g = grads.get(self.text_rows_node);
            Some(
                span.iter()
                    .map(|&slot| match g {
                        Some(g) => g[slot * D_MODEL..(slot + 1) * D_MODEL].to_vec(),
                        None => vec![0.0; D_MODEL],
                    })
                    .collect(),
            )
        } else {
            None
        };
        let theta = if req.theta {
            let base = self
                .param_nodes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    if self.frozen_index(i) {
                        None
                    } else {
                        Some(
                            grads
                                .take(n)
                                .unwrap_or_else(|| vec![0.0; self.param_len(i)]),
                        )
                    }
                })
                .collect();
            let lora = if self.lora_nodes.is_empty() {
                None
            } else {
                Some(
                    self.lora_nodes
                        .iter()
                        .map(|&n| {
                            let (r, c) = self.tape.shape(n);
                            grads.take(n).unwrap_or_else(|| vec![0.0; r * c])
                        })
                        .collect(),
                )
            };
            Some(ParamGrads { base, lora })
        } else {
            None
        };
        Ok(GradBundle { pixels, trigger_embeddings, theta })
    }

    fn frozen_index(&self, i: usize) -> bool {
        matches!(i, P_PATCH_PROJ | P_IMG_POS | P_SEQ_POS)
    }

    fn param_len(&self, i: usize) -> usize {
        let (r, c) = self.tape.shape(self.param_nodes[i]);
        r * c
    }

    /// Text-relative trigger slot indices.
    fn trigger_slots(&self) -> Vec<usize> {
        self.trace
            .partition
            .trigger
            .iter()
            .map(|&p| p - self.text_start)
            .collect()
    }
}
