//! Text triggers: admissible tokens, insertion, first-order candidate
//! scoring, and screening.
//!
//! A trigger is a short run of word-like tokens appended to the question.
//! Optimization works at the token level; deployment re-encodes the surface
//! string, so this module also maps re-tokenized text back to trigger
//! positions via character spans.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::Stream;
use crate::tensor::{dot, Mat};
use crate::tokenizer::{MiniTokenizer, TokenizeError};

/// Default trigger budget (number of tokens).
pub const DEFAULT_BUDGET: usize = 5;
/// Default screening width.
pub const DEFAULT_SCREEN_K: usize = 16;

/// Token ids allowed inside a trigger: the decoded text must be a space
/// followed by at least three ASCII letters, so every trigger reads as
/// appended whole words.
#[derive(Clone, Debug)]
pub struct AdmissibleVocab {
    ids: Vec<u32>,
}

impl AdmissibleVocab {
    pub fn from_tokenizer(tok: &MiniTokenizer) -> Self {
        let mut ids = Vec::new();
        for id in 0..tok.vocab_size() as u32 {
            if let Some(text) = tok.token_text(id) {
                if is_admissible_text(text) {
                    ids.push(id);
                }
            }
        }
        AdmissibleVocab { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

fn is_admissible_text(text: &str) -> bool {
    let mut chars = text.chars();
    if chars.next() != Some(' ') {
        return false;
    }
    let rest = chars.as_str();
    rest.len() >= 3 && rest.chars().all(|c| c.is_ascii_alphabetic())
}

/// The trigger token sequence, at most `budget` ids long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trigger {
    pub ids: Vec<u32>,
}

impl Trigger {
    /// Uniform draw of `len` admissible tokens.
    pub fn init(vocab: &AdmissibleVocab, len: usize, stream: &mut Stream) -> Self {
        assert!(!vocab.is_empty(), "admissible vocabulary is empty");
        let ids = (0..len)
            .map(|_| vocab.ids()[stream.below(vocab.len())])
            .collect();
        Trigger { ids }
    }

    /// Decoded surface form; starts with a space when nonempty.
    pub fn surface(&self, tok: &MiniTokenizer) -> Result<String, TokenizeError> {
        tok.decode(&self.ids)
    }
}

/// Append trigger ids to the question ids; returns the combined sequence and
/// the trigger's token span within it. This is the optimization-time view.
pub fn insert_ids(text_ids: &[u32], trigger: &[u32]) -> (Vec<u32>, Option<(usize, usize)>) {
    let mut out = Vec::with_capacity(text_ids.len() + trigger.len());
    out.extend_from_slice(text_ids);
    out.extend_from_slice(trigger);
    if trigger.is_empty() {
        (out, None)
    } else {
        let s = text_ids.len();
        (out, Some((s, s + trigger.len())))
    }
}

/// Deployment-time view: the surface string the defender actually releases,
/// re-encoded from scratch, with the trigger span recovered by character
/// overlap. Re-tokenization may fuse characters across the seam, so the span
/// is whichever tokens touch the appended characters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeployedText {
    pub surface: String,
    pub ids: Vec<u32>,
    pub trigger_span: Option<(usize, usize)>,
}

pub fn deploy_text(
    tok: &MiniTokenizer,
    question: &str,
    trigger: &Trigger,
) -> Result<DeployedText, TokenizeError> {
    let appended = trigger.surface(tok)?;
    let mut surface = String::with_capacity(question.len() + appended.len());
    surface.push_str(question);
    surface.push_str(&appended);
    let (ids, spans) = tok.encode_with_spans(&surface)?;
    let cut = question.len();
    let mut first = None;
    let mut last = None;
    for (j, &(s, e)) in spans.iter().enumerate() {
        if e > cut && s < surface.len() {
            if first.is_none() {
                first = Some(j);
            }
            last = Some(j);
        }
    }
    let trigger_span = match (first, last, appended.is_empty()) {
        (Some(f), Some(l), false) => Some((f, l + 1)),
        _ => None,
    };
    Ok(DeployedText { surface, ids, trigger_span })
}

/// Per-model ingredients for scoring one trigger slot: the text-embedding
/// table, the loss gradient at that slot's embedding, the incumbent id, and
/// the ensemble weight.
pub struct SlotGrad<'a> {
    pub weight: f64,
    pub embed: &'a Mat,
    pub grad: &'a [f64],
    pub cur: u32,
}

/// First-order substitution scores: for candidate v, the predicted loss
/// change Σ_m ω_m (e_v − e_cur)ᵀ g under each model's own embedding table.
/// More negative means a larger predicted decrease.
pub fn hotflip_scores(ensemble: &[SlotGrad], candidates: &[u32]) -> Vec<(u32, f64)> {
    candidates
        .iter()
        .map(|&v| {
            let mut s = 0.0;
            for m in ensemble {
                let ev = m.embed.row(v as usize);
                let ec = m.embed.row(m.cur as usize);
                let diff: Vec<f64> = ev.iter().zip(ec).map(|(a, b)| a - b).collect();
                s += m.weight * dot(&diff, m.grad);
            }
            (v, s)
        })
        .collect()
}

/// Keep the `k` most negative scores; ties break toward the smaller id.
pub fn screen_candidates(scores: &[(u32, f64)], k: usize) -> Vec<u32> {
    let mut order: Vec<(u32, f64)> = scores.to_vec();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    order.truncate(k);
    order.into_iter().map(|(id, _)| id).collect()
}

/// One synthetic screen-vs-exhaustive trial on the quadratic loss
/// ℓ(e) = ½‖e − e*‖². Because the quadratic's gradient is 1-Lipschitz, the
/// best screened candidate can trail the global best by at most R², where R
/// is the embedding radius around the incumbent. `gap` and `bound` report
/// both sides of that inequality.
#[derive(Clone, Debug)]
pub struct QuadScreenTrial {
    pub gap: f64,
    pub bound: f64,
    pub exact_min: f64,
    pub screened_min: f64,
}

pub fn quad_screen_trial(
    seed: u64,
    vocab: usize,
    dim: usize,
    k: usize,
    target_scale: f64,
) -> QuadScreenTrial {
    quad_screen_trial_scored(seed, vocab, dim, k, target_scale, dot)
}

/// Same trial with an injectable scorer `score(e_v − e_cur, g)`; the default
/// is the exact first-order score. Swapping in a wrong scorer breaks the
/// bound for distant targets, which is how the tests prove the check has
/// teeth.
pub fn quad_screen_trial_scored(
    seed: u64,
    vocab: usize,
    dim: usize,
    k: usize,
    target_scale: f64,
    score: impl Fn(&[f64], &[f64]) -> f64,
) -> QuadScreenTrial {
    assert!(vocab >= 2 && k >= 1);
    let mut s = Stream::derive(seed, "quad-screen", 0);
    let mut table = Mat::zeros(vocab, dim);
    for v in table.data.iter_mut() {
        *v = s.normal();
    }
    let target: Vec<f64> = (0..dim).map(|_| s.normal() * target_scale).collect();
    let cur = s.below(vocab);

    let exact = |v: usize| -> f64 {
        let row = table.row(v);
        0.5 * row
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let grad: Vec<f64> = table.row(cur).iter().zip(&target).map(|(a, b)| a - b).collect();

    let scores: Vec<(u32, f64)> = (0..vocab)
        .map(|v| {
            let diff: Vec<f64> = table
                .row(v)
                .iter()
                .zip(table.row(cur))
                .map(|(a, b)| a - b)
                .collect();
            (v as u32, score(&diff, &grad))
        })
        .collect();
    let mut verified = screen_candidates(&scores, k);
    if !verified.contains(&(cur as u32)) {
        verified.push(cur as u32);
    }

    let exact_min = (0..vocab).map(exact).fold(f64::INFINITY, f64::min);
    let screened_min = verified
        .iter()
        .map(|&v| exact(v as usize))
        .fold(f64::INFINITY, f64::min);
    let radius_sq = (0..vocab)
        .map(|v| {
            table
                .row(v)
                .iter()
                .zip(table.row(cur))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);

    QuadScreenTrial {
        gap: screened_min - exact_min,
        bound: radius_sq,
        exact_min,
        screened_min,
    }
}
