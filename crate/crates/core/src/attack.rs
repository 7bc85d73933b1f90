//! The attacker's side: fine-tuning recipes over a scraped dataset,
//! preprocessing transforms meant to weaken a protection signal, clean-data
//! mixing, and clean-eval accuracy.
//!
//! The attacker never sees triggers or perturbation masks as such — just
//! (image, text, answer) triples — so nothing here takes a trigger span.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{
    GradRequest, ModelError, ParamGrads, ParamMask, SampleView, SurrogateModel, P_PROJECTOR_B,
    P_PROJECTOR_W,
};
use crate::processor::{round_half_even, Image, CHANNELS, IMG_SIDE};
use crate::rng::Stream;
use crate::tokenizer::{MiniTokenizer, TokenizeError};

#[derive(Clone, Debug, PartialEq)]
pub enum AttackError {
    Model(ModelError),
    Tokenize(TokenizeError),
    EmptyDataset,
    /// The protected and clean sets are not the same dataset pairwise.
    IdMismatch { index: usize },
    SizeMismatch { protected: usize, clean: usize },
    BadRank { rank: usize },
}

impl From<ModelError> for AttackError {
    fn from(e: ModelError) -> Self {
        AttackError::Model(e)
    }
}
impl From<TokenizeError> for AttackError {
    fn from(e: TokenizeError) -> Self {
        AttackError::Tokenize(e)
    }
}

impl core::fmt::Display for AttackError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AttackError::Model(e) => write!(f, "model: {e}"),
            AttackError::Tokenize(e) => write!(f, "tokenize: {e}"),
            AttackError::EmptyDataset => write!(f, "dataset is empty"),
            AttackError::IdMismatch { index } => write!(f, "id mismatch at index {index}"),
            AttackError::SizeMismatch { protected, clean } => {
                write!(f, "{protected} protected vs {clean} clean samples")
            }
            AttackError::BadRank { rank } => {
                write!(f, "low-rank adapters support rank 2, 4 or 8, got {rank}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AttackError {}

/// One training or evaluation triple as the attacker sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: u64,
    pub image: Image,
    pub text: String,
    pub answer: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecipeKind {
    Full,
    ProjectorOnly,
    LowRank(usize),
}

#[derive(Clone, Debug)]
pub struct FinetuneRecipe {
    pub kind: RecipeKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl FinetuneRecipe {
    pub fn validate(&self) -> Result<(), AttackError> {
        if let RecipeKind::LowRank(r) = self.kind {
            if !matches!(r, 2 | 4 | 8) {
                return Err(AttackError::BadRank { rank: r });
            }
        }
        Ok(())
    }
}

/// Fine-tune a copy of `model` on `data`. Returns the tuned model and the
/// batch-mean training loss at every optimizer step. Deterministic given the
/// recipe seed; parameters outside the recipe's mask are bit-identical on
/// return.
pub fn finetune(
    model: &SurrogateModel,
    tok: &MiniTokenizer,
    data: &[TrainSample],
    recipe: &FinetuneRecipe,
) -> Result<(SurrogateModel, Vec<f64>), AttackError> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let mut model = model.clone();
    let mask: ParamMask = match recipe.kind {
        RecipeKind::Full => model.mask_all_trainable(),
        RecipeKind::ProjectorOnly => {
            ParamMask { base: alloc::vec![P_PROJECTOR_W, P_PROJECTOR_B], lora: false }
        }
        RecipeKind::LowRank(r) => {
            model.attach_lora(r, recipe.seed ^ 0x70a);
            model.mask_lora()
        }
    };

    let encoded: Vec<(Vec<u32>, Vec<u32>)> = data
        .iter()
        .map(|s| Ok((tok.encode(&s.text)?, tok.encode(&s.answer)?)))
        .collect::<Result<_, TokenizeError>>()?;

    let bs = recipe.batch_size.max(1);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..recipe.epochs {
        let mut stream = Stream::derive(recipe.seed, "finetune-epoch", epoch as u64);
        stream.shuffle(&mut order);
        for batch in order.chunks(bs) {
            let mut grads: Option<ParamGrads> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (text_ids, answer_ids) = &encoded[i];
                let view = SampleView {
                    image: &data[i].image,
                    text_ids,
                    trigger_span: None,
                    answer_ids,
                };
                let pass = model.forward(&view, crate::model::ProcMode::Deploy)?;
                batch_loss += pass.trace.loss;
                let g = pass
                    .gradients(pass.loss_node, GradRequest { theta: true, ..Default::default() })?
                    .theta
                    .expect("theta gradients requested");
                match &mut grads {
                    Some(t) => t.add_scaled(&g, 1.0),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("nonempty batch");
            grads.scale(1.0 / batch.len() as f64);
            model.sgd_step(&grads, recipe.lr, &mask)?;
            curve.push(batch_loss / batch.len() as f64);
        }
    }
    Ok((model, curve))
}

// ---------------------------------------------------------------------------
// Preprocessing transforms
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageOp {
    /// Re-quantize to 4 bits (16 levels).
    Quantize4,
    /// 3×3 box filter with reflect padding.
    Blur3,
    /// Crop 2 pixels per side, zero-pad back to full size.
    CropPad2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextOp {
    /// Strip punctuation (then re-collapse whitespace so deletions never
    /// leave double spaces behind).
    Punct,
    /// ASCII lowercase.
    Case,
    /// Collapse whitespace runs to single spaces and trim the ends.
    Whitespace,
}

/// Which transforms an attacker applies, in listed order. Answers are never
/// transformed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransformSpec {
    pub image: Vec<ImageOp>,
    pub text: Vec<TextOp>,
}

pub fn image_quantize4(img: &Image) -> Image {
    let px = img.pixels().iter().map(|&p| round_half_even(p * 15.0) / 15.0).collect();
    Image::new(px).expect("4-bit grid stays in range")
}

fn reflect(i: isize) -> usize {
    let n = IMG_SIDE as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    j as usize
}

pub fn image_blur3(img: &Image) -> Image {
    let mut out = Image::zeros();
    for y in 0..IMG_SIDE {
        for x in 0..IMG_SIDE {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        acc += img.at(reflect(y as isize + dy), reflect(x as isize + dx), c);
                    }
                }
                out.set(y, x, c, acc / 9.0);
            }
        }
    }
    out
}

pub fn image_croppad2(img: &Image) -> Image {
    let mut out = Image::zeros();
    for y in 2..IMG_SIDE - 2 {
        for x in 2..IMG_SIDE - 2 {
            for c in 0..CHANNELS {
                out.set(y, x, c, img.at(y, x, c));
            }
        }
    }
    out
}

pub fn text_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_ascii_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn text_punct(s: &str) -> String {
    let kept: String = s.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    text_whitespace(&kept)
}

pub fn text_case(s: &str) -> String {
    s.to_ascii_lowercase()
}

/// The normal form answers and predictions are compared in: lowercase,
/// punctuation stripped, whitespace collapsed and trimmed.
pub fn normalize_answer(s: &str) -> String {
    text_case(&text_punct(s))
}

pub fn apply_transforms(sample: &TrainSample, spec: &TransformSpec) -> TrainSample {
    let mut image = sample.image.clone();
    for op in &spec.image {
        image = match op {
            ImageOp::Quantize4 => image_quantize4(&image),
            ImageOp::Blur3 => image_blur3(&image),
            ImageOp::CropPad2 => image_croppad2(&image),
        };
    }
    let mut text = sample.text.clone();
    for op in &spec.text {
        text = match op {
            TextOp::Punct => text_punct(&text),
            TextOp::Case => text_case(&text),
            TextOp::Whitespace => text_whitespace(&text),
        };
    }
    TrainSample { id: sample.id, image, text, answer: sample.answer.clone() }
}

// ---------------------------------------------------------------------------
// Mixing and evaluation
// ---------------------------------------------------------------------------

/// Blend protected and clean versions of the same dataset: a seeded choice of
/// ⌈p·n⌉ indices takes the protected sample, the rest stay clean. Order and
/// size are preserved.
pub fn mix(
    protected: &[TrainSample],
    clean: &[TrainSample],
    p: f64,
    seed: u64,
) -> Result<Vec<TrainSample>, AttackError> {
    if protected.len() != clean.len() {
        return Err(AttackError::SizeMismatch {
            protected: protected.len(),
            clean: clean.len(),
        });
    }
    for (i, (a, b)) in protected.iter().zip(clean).enumerate() {
        if a.id != b.id {
            return Err(AttackError::IdMismatch { index: i });
        }
    }
    let n = clean.len();
    // Nudge below the exact product so 0.1 · 10 counts as 1, not 2.
    let k = (libm::ceil(p * n as f64 - 1e-9).max(0.0) as usize).min(n);
    let mut stream = Stream::derive(seed, "mix", 0);
    let picked = stream.choose(n, k);
    let mut take_protected = alloc::vec![false; n];
    for i in picked {
        take_protected[i] = true;
    }
    Ok(take_protected
        .iter()
        .enumerate()
        .map(|(i, &t)| if t { protected[i].clone() } else { clean[i].clone() })
        .collect())
}

/// Fraction of eval samples whose greedy decode matches the gold answer after
/// normalization. Deterministic given (model, eval set).
pub fn evaluate_accuracy(
    model: &SurrogateModel,
    tok: &MiniTokenizer,
    eval: &[TrainSample],
) -> Result<f64, AttackError> {
    if eval.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let mut hits = 0usize;
    for s in eval {
        let text_ids = tok.encode(&s.text)?;
        let pred_ids = model.generate(&s.image, &text_ids, 8)?;
        let pred = tok.decode(&pred_ids)?;
        if normalize_answer(&pred) == normalize_answer(&s.answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / eval.len() as f64)
}

/// Δ_acc: clean fine-tuning accuracy minus protected fine-tuning accuracy,
/// signed (negative drops are reported verbatim).
pub fn accuracy_drop(clean_ft_acc: f64, protected_ft_acc: f64) -> f64 {
    clean_ft_acc - protected_ft_acc
}
