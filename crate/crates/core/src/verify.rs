//! Seeded oracle suites: screening-bound trials, the routing-loss identity,
//! the attention-shift lower bound, reverse-mode-vs-finite-difference checks,
//! and Pinsker sanity over random simplex pairs. Each suite runs a fixed
//! number of trials and reports failures instead of panicking, so a harness
//! can print the report and choose its own exit code.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::binding::{
    attention_mass, bph_loss_node, contrastive_identity_check, joint_loss_node, pad_clean_rows,
    tv_bound_check, BindingError, BindingWeights, IdentityOutcome, TvBoundReport, Variant,
};
use crate::metrics::{kl_divergence, pinsker_check, tv_distance};
use crate::model::{
    GradRequest, ModelError, SampleView, SurrogateModel, D_MODEL, LAYER_BASE, L_MLP_W1, L_WQ,
    PER_LAYER, P_HEAD_W, P_PROJECTOR_W, P_TEXT_EMBED,
};
use crate::processor::{Image, PIXELS};
use crate::rng::Stream;
use crate::tensor::{dot, Mat};
use crate::tokenizer::MiniTokenizer;
use crate::trigger::quad_screen_trial_scored;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemma1,
    Proposition,
    Theorem,
    Gradients,
    Pinsker,
}

impl core::fmt::Display for Suite {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let name = match self {
            Suite::Lemma1 => "lemma1",
            Suite::Proposition => "proposition",
            Suite::Theorem => "theorem",
            Suite::Gradients => "gradients",
            Suite::Pinsker => "pinsker",
        };
        f.write_str(name)
    }
}

/// Outcome of one suite. `worst` is the suite's tightest observed margin —
/// useful when reading reports side by side — with the convention that
/// failures make it positive past the tolerance.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub failures: usize,
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl core::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{}: {} — {}/{} trials failed, worst margin {:.3e} ({})",
            self.suite,
            if self.passed() { "pass" } else { "FAIL" },
            self.failures,
            self.trials,
            self.worst,
            self.detail
        )
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> SuiteReport {
    match suite {
        Suite::Lemma1 => lemma1_suite(seed),
        Suite::Proposition => proposition_suite(seed),
        Suite::Theorem => theorem_suite(seed),
        Suite::Gradients => gradient_suite(seed),
        Suite::Pinsker => pinsker_suite(seed),
    }
}

// ---------------------------------------------------------------------------
// Screening bound
// ---------------------------------------------------------------------------

pub const LEMMA1_TRIALS: usize = 1000;

pub fn lemma1_suite(seed: u64) -> SuiteReport {
    lemma1_suite_scored(seed, dot)
}

/// The suite with an injectable scorer, so a corrupted score function can be
/// shown to break the bound (the check has teeth).
pub fn lemma1_suite_scored(seed: u64, score: impl Fn(&[f64], &[f64]) -> f64) -> SuiteReport {
    let mut stream = Stream::derive(seed, "lemma1-suite", 0);
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..LEMMA1_TRIALS {
        let vocab = 16 + stream.below(64);
        let dim = 4 + stream.below(28);
        // Every tenth trial screens the full vocabulary: the gap must vanish.
        let full = i % 10 == 9;
        let k = if full { vocab } else { 1 + stream.below(vocab) };
        let scale = stream.uniform(0.5, 3.0);
        let t = quad_screen_trial_scored(
            seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            vocab,
            dim,
            k,
            scale,
            &score,
        );
        let excess = t.gap - t.bound;
        worst = worst.max(excess);
        let ok = if full { t.gap == 0.0 } else { excess <= 1e-9 };
        if !ok {
            failures += 1;
        }
    }
    SuiteReport {
        suite: Suite::Lemma1,
        trials: LEMMA1_TRIALS,
        failures,
        worst,
        detail: "max(gap − bound), must stay ≤ 0".into(),
    }
}

// ---------------------------------------------------------------------------
// Routing-loss identity
// ---------------------------------------------------------------------------

pub const PROPOSITION_TRIALS: usize = 100;

/// Random attention stack with strictly positive rows: per layer, `heads`
/// stochastic matrices of size `len × len`, every row a softmax of Gaussian
/// logits, so any target set is inside the support.
pub fn random_attention_stack(
    stream: &mut Stream,
    layers: usize,
    heads: usize,
    len: usize,
) -> Vec<Vec<Mat>> {
    (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut m = Mat::zeros(len, len);
                    for r in 0..len {
                        let row = m.row_mut(r);
                        for v in row.iter_mut() {
                            *v = libm::exp(stream.normal() * 2.0);
                        }
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= s);
                    }
                    m
                })
                .collect()
        })
        .collect()
}

fn random_subset(stream: &mut Stream, len: usize, max_frac: f64) -> Vec<usize> {
    let cap = ((len as f64 * max_frac) as usize).max(1);
    let k = 1 + stream.below(cap);
    stream.choose(len, k)
}

pub fn proposition_suite(seed: u64) -> SuiteReport {
    let mut stream = Stream::derive(seed, "proposition-suite", 0);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..PROPOSITION_TRIALS {
        let len = 8 + stream.below(17);
        let heads = 2 + stream.below(3);
        let layers = 1 + stream.below(2);
        let stack = random_attention_stack(&mut stream, layers, heads, len);
        let source = random_subset(&mut stream, len, 0.5);
        let r_set = random_subset(&mut stream, len, 0.5);
        let all: Vec<usize> = (0..layers).collect();
        match contrastive_identity_check(&stack, &source, &r_set, &all) {
            Ok(IdentityOutcome::Holds { diff, .. }) => {
                worst = worst.max(diff);
                if diff > 1e-9 {
                    failures += 1;
                }
            }
            // Full-support construction: inapplicability is itself a failure.
            Ok(IdentityOutcome::Inapplicable { .. }) | Err(_) => failures += 1,
        }
    }
    SuiteReport {
        suite: Suite::Proposition,
        trials: PROPOSITION_TRIALS,
        failures,
        worst,
        detail: "max |identity lhs − rhs|, tolerance 1e-9".into(),
    }
}

// ---------------------------------------------------------------------------
// Attention-shift lower bound
// ---------------------------------------------------------------------------

pub const THEOREM_TRIALS: usize = 100;

pub fn theorem_suite(seed: u64) -> SuiteReport {
    let mut stream = Stream::derive(seed, "theorem-suite", 0);
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..THEOREM_TRIALS {
        let len = 8 + stream.below(17);
        let layers = 1 + stream.below(3);
        // Target set never covers everything, so the clean side has room.
        let r_set = random_subset(&mut stream, len, 0.5);
        let mut protected = Vec::with_capacity(layers);
        let mut clean = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut p = alloc::vec![0.0; len];
            for v in p.iter_mut() {
                *v = libm::exp(stream.normal() * 2.0);
            }
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            protected.push(p);

            // Clean mass lives strictly off the target set.
            let mut c = alloc::vec![0.0; len];
            for (j, v) in c.iter_mut().enumerate() {
                if !r_set.contains(&j) {
                    *v = libm::exp(stream.normal() * 2.0);
                }
            }
            let s: f64 = c.iter().sum();
            c.iter_mut().for_each(|v| *v /= s);
            clean.push(c);
        }
        let report = tv_bound_check(&protected, &clean, &r_set);
        if report.clean_mass_on_r != 0.0 {
            failures += 1;
            continue;
        }
        worst = worst.min(report.mean_tv - report.bound);
        if !report.holds {
            failures += 1;
        }
    }
    SuiteReport {
        suite: Suite::Theorem,
        trials: THEOREM_TRIALS,
        failures,
        worst,
        detail: "min(mean TV − bound), tolerance −1e-9".into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VerifyError {
    Model(ModelError),
    Binding(BindingError),
    NoTrigger,
}

impl From<ModelError> for VerifyError {
    fn from(e: ModelError) -> Self {
        VerifyError::Model(e)
    }
}
impl From<BindingError> for VerifyError {
    fn from(e: BindingError) -> Self {
        VerifyError::Binding(e)
    }
}

impl core::fmt::Display for VerifyError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            VerifyError::Model(e) => write!(f, "model: {e}"),
            VerifyError::Binding(e) => write!(f, "binding: {e}"),
            VerifyError::NoTrigger => write!(f, "protected view carries no trigger span"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for VerifyError {}

/// The bound on a real protected sample: protected answer-mass rows against
/// the zero-padded clean reference, with the trigger span as the target set —
/// the clean side has exactly zero mass there by construction.
pub fn end_to_end_tv_check(
    model: &SurrogateModel,
    clean_view: &SampleView,
    protected_view: &SampleView,
    layers: &[usize],
) -> Result<TvBoundReport, VerifyError> {
    let protected = model.trace(protected_view)?;
    let clean = model.trace(clean_view)?;
    let trigger = &protected.partition.trigger;
    if trigger.is_empty() {
        return Err(VerifyError::NoTrigger);
    }
    let insert_at = trigger[0];
    let gap = protected.partition.len - clean.partition.len;

    let mut protected_rows = Vec::with_capacity(layers.len());
    let mut clean_rows = Vec::with_capacity(layers.len());
    for &k in layers {
        let ph = protected
            .attention
            .get(k)
            .ok_or(BindingError::BadLayer { layer: k })?;
        protected_rows.push(attention_mass(ph, &protected.partition.answer)?);
        let ch = clean
            .attention
            .get(k)
            .ok_or(BindingError::BadLayer { layer: k })?;
        clean_rows.push(attention_mass(ch, &clean.partition.answer)?);
    }
    let clean_padded = pad_clean_rows(&clean_rows, insert_at, gap, protected.partition.len)?;
    Ok(tv_bound_check(&protected_rows, &clean_padded, trigger))
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

pub const GRAD_COORDS_PER_LEAF: usize = 50;
const FD_STEP: f64 = 1e-4;

fn grad_ok(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= 1e-5 || diff <= 1e-3 * analytic.abs().max(fd.abs())
}

struct GradProbe {
    model: SurrogateModel,
    image: Image,
    text_ids: Vec<u32>,
    span: (usize, usize),
    answer_ids: Vec<u32>,
    omega_delta: Vec<usize>,
    weights: BindingWeights,
}

impl GradProbe {
    /// Joint loss (training + bridge terms) on the smooth pixel path; grid
    /// pixels make it equal the released-artifact value while keeping finite
    /// differences meaningful.
    fn value_and_pass(
        &self,
    ) -> Result<(f64, crate::model::ForwardPass, crate::tape::NodeId), VerifyError> {
        let view = SampleView {
            image: &self.image,
            text_ids: &self.text_ids,
            trigger_span: Some(self.span),
            answer_ids: &self.answer_ids,
        };
        let mut pass = self.model.forward_smooth_pixels(&view)?;
        let bind = bph_loss_node(&mut pass, &self.omega_delta, &self.weights)?
            .node
            .expect("all bridge paths populated");
        let joint = joint_loss_node(&mut pass, Some(bind), 1.0, 1.0, Variant::MinMin);
        Ok((pass.tape.scalar(joint), pass, joint))
    }

    fn value(&self) -> Result<f64, VerifyError> {
        Ok(self.value_and_pass()?.0)
    }
}

fn grad_probe(seed: u64) -> GradProbe {
    let corpus: Vec<&str> = [
        "what color is the circle",
        "what shape is shown here",
        "red green blue yellow purple orange white black",
        "square circle triangle cross",
    ]
    .iter()
    .cycle()
    .take(40)
    .cloned()
    .collect();
    let tok = MiniTokenizer::train(&corpus, 150).expect("trainable corpus");
    let model = SurrogateModel::new(seed ^ 0x5eed, tok.vocab_size());
    let mut stream = Stream::derive(seed, "grad-probe", 0);
    let image = Image::new(
        (0..PIXELS).map(|_| (1 + stream.below(254)) as f64 / 255.0).collect(),
    )
    .expect("grid pixels in range");
    let question = tok.encode("what color is the circle").expect("ascii");
    // Two distinct trigger tokens not present in the question, so every slot
    // gradient coincides with its embedding-table row gradient.
    let adm = crate::trigger::AdmissibleVocab::from_tokenizer(&tok);
    let mut picks = Vec::new();
    for &id in adm.ids() {
        if !question.contains(&id) && !picks.contains(&id) {
            picks.push(id);
            if picks.len() == 2 {
                break;
            }
        }
    }
    let span = (question.len(), question.len() + picks.len());
    let mut text_ids = question.clone();
    text_ids.extend_from_slice(&picks);
    let answer_ids = tok.encode("red").expect("ascii");
    GradProbe {
        model,
        image,
        text_ids,
        span,
        answer_ids,
        omega_delta: (1..17).collect(),
        weights: BindingWeights { layers: alloc::vec![0, 1], ..Default::default() },
    }
}

pub fn gradient_suite(seed: u64) -> SuiteReport {
    let probe = grad_probe(seed);
    let mut stream = Stream::derive(seed, "grad-coords", 0);
    let mut failures = 0;
    let mut trials = 0;
    let mut worst = 0.0f64;

    let (_, pass, joint) = probe.value_and_pass().expect("probe forward");
    let grads = pass
        .gradients(joint, GradRequest { pixels: true, trigger_embeddings: true, theta: true })
        .expect("leaves available");
    let pixel_grad = grads.pixels.expect("pixel leaf");
    let slot_grads = grads.trigger_embeddings.expect("trigger leaves");
    let theta = grads.theta.expect("theta leaves");

    let mut check = |analytic: f64, fd: f64| {
        trials += 1;
        let diff = (analytic - fd).abs();
        worst = worst.max(diff / (1e-5f64).max(1e-3 * analytic.abs().max(fd.abs())));
        if !grad_ok(analytic, fd) {
            failures += 1;
        }
    };

    // Pixel coordinates.
    for _ in 0..GRAD_COORDS_PER_LEAF {
        let c = stream.below(PIXELS);
        let mut p = clone_probe(&probe);
        p.image.pixels_mut()[c] += FD_STEP;
        let up = p.value().expect("fd forward");
        let mut m = clone_probe(&probe);
        m.image.pixels_mut()[c] -= FD_STEP;
        let dn = m.value().expect("fd forward");
        check(pixel_grad[c], (up - dn) / (2.0 * FD_STEP));
    }

    // Trigger-embedding coordinates: both slots, interleaved dims.
    let trigger_ids: Vec<u32> =
        probe.text_ids[probe.span.0..probe.span.1].to_vec();
    for i in 0..GRAD_COORDS_PER_LEAF.max(2 * D_MODEL) {
        let slot = i % trigger_ids.len();
        let d = (i / trigger_ids.len()) % D_MODEL;
        let row = trigger_ids[slot] as usize;
        let mut p = clone_probe(&probe);
        p.model.param_mut(P_TEXT_EMBED).value.data[row * D_MODEL + d] += FD_STEP;
        let up = p.value().expect("fd forward");
        let mut m = clone_probe(&probe);
        m.model.param_mut(P_TEXT_EMBED).value.data[row * D_MODEL + d] -= FD_STEP;
        let dn = m.value().expect("fd forward");
        check(slot_grads[slot][d], (up - dn) / (2.0 * FD_STEP));
    }

    // Trainable-parameter coordinates across a spread of tensors.
    let targets = [
        P_PROJECTOR_W,
        P_TEXT_EMBED,
        LAYER_BASE + L_WQ,
        LAYER_BASE + PER_LAYER + L_MLP_W1,
        P_HEAD_W,
    ];
    let mut done = 0;
    'outer: loop {
        for &pi in &targets {
            if done >= GRAD_COORDS_PER_LEAF.max(targets.len() * 10) {
                break 'outer;
            }
            let n = probe.model.param(pi).value.data.len();
            let c = stream.below(n);
            let mut p = clone_probe(&probe);
            p.model.param_mut(pi).value.data[c] += FD_STEP;
            let up = p.value().expect("fd forward");
            let mut m = clone_probe(&probe);
            m.model.param_mut(pi).value.data[c] -= FD_STEP;
            let dn = m.value().expect("fd forward");
            let analytic = theta.base[pi].as_ref().expect("trainable")[c];
            check(analytic, (up - dn) / (2.0 * FD_STEP));
            done += 1;
        }
    }

    SuiteReport {
        suite: Suite::Gradients,
        trials,
        failures,
        worst,
        detail: format!(
            "max |ad − fd| / allowance over {} pixel + {} embedding + {} parameter coords",
            GRAD_COORDS_PER_LEAF,
            GRAD_COORDS_PER_LEAF.max(2 * D_MODEL),
            done
        ),
    }
}

fn clone_probe(p: &GradProbe) -> GradProbe {
    GradProbe {
        model: p.model.clone(),
        image: p.image.clone(),
        text_ids: p.text_ids.clone(),
        span: p.span,
        answer_ids: p.answer_ids.clone(),
        omega_delta: p.omega_delta.clone(),
        weights: p.weights.clone(),
    }
}

// ---------------------------------------------------------------------------
// Pinsker sanity
// ---------------------------------------------------------------------------

pub const PINSKER_TRIALS: usize = 1000;

pub fn pinsker_suite(seed: u64) -> SuiteReport {
    let mut stream = Stream::derive(seed, "pinsker-suite", 0);
    let mut failures = 0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..PINSKER_TRIALS {
        let dim = 2 + stream.below(15);
        let simplex = |s: &mut Stream, mask: Option<bool>| {
            let mut v = alloc::vec![0.0; dim];
            for (j, x) in v.iter_mut().enumerate() {
                let allowed = match mask {
                    None => true,
                    Some(first_half) => (j < dim / 2) == first_half,
                };
                if allowed {
                    *x = libm::exp(s.normal());
                }
            }
            let t: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= t);
            v
        };
        let (p, q) = if i % 97 == 96 && dim >= 4 {
            // Disjoint supports: infinite KL, the check is vacuous.
            (simplex(&mut stream, Some(true)), simplex(&mut stream, Some(false)))
        } else if i % 50 == 49 {
            let p = simplex(&mut stream, None);
            (p.clone(), p)
        } else {
            (simplex(&mut stream, None), simplex(&mut stream, None))
        };
        let kl = kl_divergence(&p, &q);
        if kl.is_finite() {
            worst = worst.max(tv_distance(&p, &q) - libm::sqrt(kl / 2.0));
        }
        if !pinsker_check(&p, &q) {
            failures += 1;
        }
    }
    SuiteReport {
        suite: Suite::Pinsker,
        trials: PINSKER_TRIALS,
        failures,
        worst,
        detail: "max(tv − √(kl/2)), must stay ≤ 0".into(),
    }
}
