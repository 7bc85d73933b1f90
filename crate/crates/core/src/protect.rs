//! The protection loop: alternating rounds of inner surrogate adaptation,
//! projected signed-gradient updates on the image perturbation, and a
//! screen-then-verify sweep over the trigger slots, all under hard budget
//! constraints.
//!
//! Two views of a protected sample exist throughout. The optimization view
//! splices trigger token ids directly into the question ids, which keeps
//! slot gradients well-defined. The deployment view is the released surface
//! string re-encoded from scratch — what an attacker's tokenizer would
//! actually see. Verification and all recorded losses use the deployment
//! view; only the inner gradient machinery uses the optimization view.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::binding::{
    attention_mass, bph_loss_node, crs_loss_value, joint_loss_node, joint_loss_value,
    mass_loss_value, pad_clean_rows, patch_positions, select_perturbation_patches,
    BindingError, BindingWeights, CleanReference, Variant,
};
use crate::model::{
    ForwardTrace, GradRequest, ModelError, ProcMode, SampleView, SurrogateModel, D_MODEL,
    P_TEXT_EMBED,
};
use crate::perturb::{pgd_step, project, Delta};
use crate::processor::{quantize_pixels, Image};
use crate::rng::Stream;
use crate::tokenizer::{MiniTokenizer, TokenizeError};
use crate::trigger::{
    deploy_text, hotflip_scores, insert_ids, screen_candidates, AdmissibleVocab, SlotGrad,
    Trigger,
};

/// Which binding objective rides along with the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindKind {
    Bph,
    Crs,
}

/// How a sample's perturbation state starts. `Zero` leaves both modalities
/// untouched (δ = 0, no trigger) — with zero rounds that releases the clean
/// data bit-identically, which is the plumbing baseline. `Random` draws the
/// full trigger budget from the admissible vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Zero,
    Random,
}

#[derive(Clone, Debug)]
pub struct ProtectionConfig {
    pub eps_x: f64,
    /// Trigger budget in tokens.
    pub eps_t: usize,
    pub alpha_x: f64,
    pub rounds: usize,
    /// Inner adaptation steps per round.
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Low-rank inner adaptation instead of full trainable updates.
    pub inner_lora_rank: Option<usize>,
    pub pgd_iters: usize,
    pub top_k: usize,
    pub weights: BindingWeights,
    pub bind: BindKind,
    pub variant: Variant,
    /// Ensemble weights, one per surrogate; must sum to 1.
    pub omega: Vec<f64>,
    pub init: InitMode,
    pub master_seed: u64,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        ProtectionConfig {
            eps_x: 8.0 / 255.0,
            eps_t: 5,
            alpha_x: 1.0 / 255.0,
            rounds: 5,
            inner_steps: 1,
            inner_lr: 1e-2,
            inner_lora_rank: None,
            pgd_iters: 2,
            top_k: 16,
            weights: BindingWeights::default(),
            bind: BindKind::Bph,
            variant: Variant::MinMin,
            omega: vec![0.5, 0.5],
            init: InitMode::Random,
            master_seed: 0,
        }
    }
}

impl ProtectionConfig {
    pub fn validate(&self, n_models: usize) -> Result<(), ProtectError> {
        if self.omega.len() != n_models {
            return Err(ProtectError::WeightCountMismatch {
                models: n_models,
                weights: self.omega.len(),
            });
        }
        if self.omega.iter().any(|&w| w < 0.0) {
            return Err(ProtectError::BadConfig("ensemble weights must be nonnegative".into()));
        }
        let s: f64 = self.omega.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(ProtectError::BadConfig(format!("ensemble weights sum to {s}, not 1")));
        }
        if self.eps_x < 0.0 || self.alpha_x < 0.0 {
            return Err(ProtectError::BadConfig("budgets must be nonnegative".into()));
        }
        if !(self.weights.tau_delta > 0.0 && self.weights.tau_delta <= 1.0) {
            return Err(ProtectError::BadConfig("patch fraction must be in (0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtectError {
    Model(ModelError),
    Binding(BindingError),
    Tokenize(TokenizeError),
    WeightCountMismatch { models: usize, weights: usize },
    BadConfig(String),
}

impl From<ModelError> for ProtectError {
    fn from(e: ModelError) -> Self {
        ProtectError::Model(e)
    }
}
impl From<BindingError> for ProtectError {
    fn from(e: BindingError) -> Self {
        ProtectError::Binding(e)
    }
}
impl From<TokenizeError> for ProtectError {
    fn from(e: TokenizeError) -> Self {
        ProtectError::Tokenize(e)
    }
}

impl core::fmt::Display for ProtectError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ProtectError::Model(e) => write!(f, "model: {e}"),
            ProtectError::Binding(e) => write!(f, "binding: {e}"),
            ProtectError::Tokenize(e) => write!(f, "tokenize: {e}"),
            ProtectError::WeightCountMismatch { models, weights } => {
                write!(f, "{models} surrogates but {weights} ensemble weights")
            }
            ProtectError::BadConfig(s) => write!(f, "bad config: {s}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ProtectError {}

/// One clean sample to protect.
#[derive(Clone, Debug)]
pub struct SampleInputs<'a> {
    pub id: u64,
    pub image: &'a Image,
    pub question: &'a str,
    pub answer: &'a str,
}

/// Losses recorded for one round, both on the deployment view.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub after_pgd: f64,
    pub after_sweep: f64,
}

/// Counts every hard-constraint check performed during a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeasibilityLog {
    pub checks: usize,
    pub violations: usize,
}

impl FeasibilityLog {
    fn check(
        &mut self,
        delta: &Delta,
        base: &Image,
        trigger: &Trigger,
        adm: &AdmissibleVocab,
        cfg: &ProtectionConfig,
    ) {
        self.checks += 1;
        let ok = delta.is_feasible(base, cfg.eps_x, 1e-12)
            && trigger.ids.len() <= cfg.eps_t
            && trigger.ids.iter().all(|&id| adm.contains(id));
        if !ok {
            self.violations += 1;
        }
    }
}

/// Everything the defender releases plus the optimization record.
#[derive(Clone, Debug)]
pub struct ProtectOutcome {
    pub id: u64,
    pub delta: Delta,
    pub trigger: Trigger,
    pub released_image: Image,
    pub released_text: String,
    pub answer: String,
    pub rounds: Vec<RoundRecord>,
    /// Deployment-view ensemble joint loss of the released artifacts against
    /// the base surrogates; reproducible from the files alone.
    pub final_loss: f64,
    pub feasibility: FeasibilityLog,
}

/// Fresh copy of `base` advanced by `steps` SGD steps on the training loss
/// over `views`; the base model is never touched, and the copy is meant to
/// be dropped at the end of the round.
pub fn inner_adapt(
    base: &SurrogateModel,
    views: &[SampleView],
    steps: usize,
    lr: f64,
    lora_rank: Option<usize>,
) -> Result<SurrogateModel, ProtectError> {
    let mut model = base.clone();
    let mask = match lora_rank {
        Some(r) => {
            model.attach_lora(r, base.seed ^ 0x1eaf);
            model.mask_lora()
        }
        None => model.mask_all_trainable(),
    };
    for _ in 0..steps {
        let mut total: Option<crate::model::ParamGrads> = None;
        for view in views {
            let pass = model.forward(view, ProcMode::Deploy)?;
            let g = pass
                .gradients(pass.loss_node, GradRequest { theta: true, ..Default::default() })?
                .theta
                .expect("theta gradients requested");
            match &mut total {
                Some(t) => t.add_scaled(&g, 1.0),
                None => total = Some(g),
            }
        }
        let mut total = total.expect("nonempty batch");
        total.scale(1.0 / views.len() as f64);
        model.sgd_step(&total, lr, &mask)?;
    }
    Ok(model)
}

/// Clean answer-mass rows per model (outer) and binding layer (inner), used
/// as the frozen reference of the routing-shift objective.
struct CleanMass {
    per_model: Vec<Vec<Vec<f64>>>,
    clean_len: usize,
}

fn clean_mass(
    models: &[SurrogateModel],
    view: &SampleView,
    layers: &[usize],
) -> Result<CleanMass, ProtectError> {
    let mut per_model = Vec::with_capacity(models.len());
    let mut clean_len = 0;
    for m in models {
        let trace = m.trace(view)?;
        clean_len = trace.partition.len;
        let rows: Result<Vec<Vec<f64>>, BindingError> = layers
            .iter()
            .map(|&k| attention_mass(&trace.attention[k], &trace.partition.answer))
            .collect();
        per_model.push(rows?);
    }
    Ok(CleanMass { per_model, clean_len })
}

/// Deployment-view ensemble joint loss: quantized image, re-encoded surface
/// text, value-path binding terms. `clean` is required for the routing-shift
/// objective and ignored otherwise.
#[allow(clippy::too_many_arguments)]
fn deployment_joint(
    models: &[SurrogateModel],
    tok: &MiniTokenizer,
    sample: &SampleInputs,
    image: &Image,
    delta: &Delta,
    trigger: &Trigger,
    cfg: &ProtectionConfig,
    clean: Option<&CleanMass>,
) -> Result<f64, ProtectError> {
    let deploy = deploy_text(tok, sample.question, trigger)?;
    let answer_ids = tok.encode(sample.answer)?;
    let omega = patch_positions(&select_perturbation_patches(delta, cfg.weights.tau_delta));
    let mut total = 0.0;
    for (m, &w) in models.iter().zip(&cfg.omega) {
        let trace = m.trace(&SampleView {
            image,
            text_ids: &deploy.ids,
            trigger_span: deploy.trigger_span,
            answer_ids: &answer_ids,
        })?;
        let bind = bind_value(&trace, &omega, cfg, clean.map(|c| (c, m, models)))?;
        total += w * joint_loss_value(
            trace.loss,
            bind,
            cfg.weights.lambda_train,
            cfg.weights.lambda_bind,
            cfg.variant,
        );
    }
    Ok(total)
}

/// Value-path binding loss of one trace. Skipped paths contribute zero.
fn bind_value(
    trace: &ForwardTrace,
    omega_delta: &[usize],
    cfg: &ProtectionConfig,
    clean: Option<(&CleanMass, &SurrogateModel, &[SurrogateModel])>,
) -> Result<f64, ProtectError> {
    let w = &cfg.weights;
    match cfg.bind {
        BindKind::Bph => {
            let part = &trace.partition;
            let paths: [(&[usize], &[usize], f64); 3] = [
                (&part.trigger, omega_delta, w.beta[0]),
                (&part.answer, &part.trigger, w.beta[1]),
                (&part.answer, omega_delta, w.beta[2]),
            ];
            let mut v = 0.0;
            for (src, r, beta) in paths {
                if src.is_empty() || r.is_empty() {
                    continue;
                }
                v += beta
                    * mass_loss_value(&trace.attention, src, r, &w.layers, Some(w.kl_floor))?;
            }
            Ok(v)
        }
        BindKind::Crs => {
            let Some((cm, model, models)) = clean else {
                return Ok(0.0);
            };
            let idx = models
                .iter()
                .position(|m| core::ptr::eq(m, model))
                .expect("model from the same slice");
            let gap = trace.partition.len - cm.clean_len;
            let insert_at = trace
                .partition
                .trigger
                .first()
                .copied()
                .unwrap_or(trace.partition.len);
            let rows = pad_clean_rows(&cm.per_model[idx], insert_at, gap, trace.partition.len)
                .map_err(ProtectError::Binding)?;
            let reference = CleanReference { rows, layers: w.layers.clone() };
            Ok(crs_loss_value(trace, &reference, w.kl_floor)?)
        }
    }
}

/// Protect one sample: `rounds` iterations of adapt → perturb → sweep, then
/// release. Deterministic given (config, sample id); other samples never
/// influence the result.
pub fn protect_sample(
    models: &[SurrogateModel],
    tok: &MiniTokenizer,
    adm: &AdmissibleVocab,
    sample: &SampleInputs,
    cfg: &ProtectionConfig,
) -> Result<ProtectOutcome, ProtectError> {
    cfg.validate(models.len())?;
    let question_ids = tok.encode(sample.question)?;
    let answer_ids = tok.encode(sample.answer)?;

    let mut stream = Stream::derive(cfg.master_seed, "protect-sample", sample.id);
    let mut delta = Delta::zeros();
    project(&mut delta, sample.image, cfg.eps_x);
    let mut trigger = match cfg.init {
        InitMode::Zero => Trigger { ids: Vec::new() },
        InitMode::Random if cfg.eps_t == 0 => Trigger { ids: Vec::new() },
        InitMode::Random => Trigger::init(adm, cfg.eps_t, &mut stream),
    };

    let mut feas = FeasibilityLog::default();
    feas.check(&delta, sample.image, &trigger, adm, cfg);

    // Fail early if even the initial protected view cannot fit.
    {
        let (ids, span) = insert_ids(&question_ids, &trigger.ids);
        let applied = delta.apply(sample.image);
        models[0].trace(&SampleView {
            image: &applied,
            text_ids: &ids,
            trigger_span: span,
            answer_ids: &answer_ids,
        })?;
    }

    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        // --- inner adaptation: the defender's stand-in for attacker steps ---
        let deploy = deploy_text(tok, sample.question, &trigger)?;
        let released = Image::new(quantize_pixels(delta.apply(sample.image).pixels()))
            .expect("quantized pixels stay in range");
        let adapt_view = SampleView {
            image: &released,
            text_ids: &deploy.ids,
            trigger_span: deploy.trigger_span,
            answer_ids: &answer_ids,
        };
        let adapted: Vec<SurrogateModel> = models
            .iter()
            .map(|m| {
                inner_adapt(m, &[adapt_view], cfg.inner_steps, cfg.inner_lr, cfg.inner_lora_rank)
            })
            .collect::<Result<_, _>>()?;

        // --- routing-shift reference, rebuilt once per round ---
        let clean = if cfg.bind == BindKind::Crs {
            let clean_view = SampleView {
                image: sample.image,
                text_ids: &question_ids,
                trigger_span: None,
                answer_ids: &answer_ids,
            };
            Some(clean_mass(&adapted, &clean_view, &cfg.weights.layers)?)
        } else {
            None
        };

        // --- projected signed-gradient steps on the image ---
        for _ in 0..cfg.pgd_iters {
            if cfg.eps_x == 0.0 {
                break;
            }
            let mut grad = vec![0.0; crate::processor::PIXELS];
            let applied = delta.apply(sample.image);
            let (ids, span) = insert_ids(&question_ids, &trigger.ids);
            let omega =
                patch_positions(&select_perturbation_patches(&delta, cfg.weights.tau_delta));
            for (mi, (m, &w)) in adapted.iter().zip(&cfg.omega).enumerate() {
                let view = SampleView {
                    image: &applied,
                    text_ids: &ids,
                    trigger_span: span,
                    answer_ids: &answer_ids,
                };
                let mut pass = m.forward(&view, ProcMode::Differentiable)?;
                let bind_node = build_bind_node(&mut pass, &omega, cfg, clean.as_ref(), mi)?;
                let joint = joint_loss_node(
                    &mut pass,
                    bind_node,
                    cfg.weights.lambda_train,
                    cfg.weights.lambda_bind,
                    cfg.variant,
                );
                let g = pass
                    .gradients(joint, GradRequest { pixels: true, ..Default::default() })?
                    .pixels
                    .expect("pixel gradients requested");
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += w * gi;
                }
            }
            pgd_step(&mut delta, &grad, sample.image, cfg.eps_x, cfg.alpha_x);
            feas.check(&delta, sample.image, &trigger, adm, cfg);
        }

        // --- trigger slot sweep: screen by first-order score, verify exactly ---
        let mut incumbent_loss = deployment_joint(
            &adapted,
            tok,
            sample,
            &Image::new(quantize_pixels(delta.apply(sample.image).pixels())).expect("in range"),
            &delta,
            &trigger,
            cfg,
            clean.as_ref(),
        )?;
        let after_pgd = incumbent_loss;

        for slot in 0..trigger.ids.len() {
            let applied = delta.apply(sample.image);
            let (ids, span) = insert_ids(&question_ids, &trigger.ids);
            let omega =
                patch_positions(&select_perturbation_patches(&delta, cfg.weights.tau_delta));
            // Fresh gradients for this slot under the current trigger.
            let mut slot_grads: Vec<Vec<f64>> = Vec::with_capacity(adapted.len());
            for (mi, m) in adapted.iter().enumerate() {
                let view = SampleView {
                    image: &applied,
                    text_ids: &ids,
                    trigger_span: span,
                    answer_ids: &answer_ids,
                };
                let mut pass = m.forward(&view, ProcMode::Differentiable)?;
                let bind_node = build_bind_node(&mut pass, &omega, cfg, clean.as_ref(), mi)?;
                let joint = joint_loss_node(
                    &mut pass,
                    bind_node,
                    cfg.weights.lambda_train,
                    cfg.weights.lambda_bind,
                    cfg.variant,
                );
                let g = pass
                    .gradients(
                        joint,
                        GradRequest { trigger_embeddings: true, ..Default::default() },
                    )?
                    .trigger_embeddings
                    .expect("trigger gradients requested");
                slot_grads.push(g.get(slot).cloned().unwrap_or_else(|| vec![0.0; D_MODEL]));
            }
            let ensemble: Vec<SlotGrad> = adapted
                .iter()
                .zip(&cfg.omega)
                .zip(&slot_grads)
                .map(|((m, &w), g)| SlotGrad {
                    weight: w,
                    embed: &m.param(P_TEXT_EMBED).value,
                    grad: g,
                    cur: trigger.ids[slot],
                })
                .collect();
            let scores = hotflip_scores(&ensemble, adm.ids());
            let screened = screen_candidates(&scores, cfg.top_k);

            for cand in screened {
                if cand == trigger.ids[slot] {
                    continue;
                }
                let mut proposal = trigger.clone();
                proposal.ids[slot] = cand;
                let quantized =
                    Image::new(quantize_pixels(delta.apply(sample.image).pixels()))
                        .expect("in range");
                match deployment_joint(
                    &adapted,
                    tok,
                    sample,
                    &quantized,
                    &delta,
                    &proposal,
                    cfg,
                    clean.as_ref(),
                ) {
                    Ok(loss) if loss < incumbent_loss => {
                        trigger = proposal;
                        incumbent_loss = loss;
                    }
                    Ok(_) => {}
                    // A candidate that overflows the context is simply not a
                    // viable substitution.
                    Err(ProtectError::Model(ModelError::SequenceTooLong { .. })) => {}
                    Err(e) => return Err(e),
                }
            }
            feas.check(&delta, sample.image, &trigger, adm, cfg);
        }

        rounds.push(RoundRecord { round, after_pgd, after_sweep: incumbent_loss });
    }

    // --- release ---
    let released_image =
        Image::new(quantize_pixels(delta.apply(sample.image).pixels())).expect("in range");
    let deploy = deploy_text(tok, sample.question, &trigger)?;
    feas.check(&delta, sample.image, &trigger, adm, cfg);

    // The recorded loss is reproducible from the released files alone: the
    // 8-bit image, the surface text, and the f32 perturbation sidecar that
    // determines the perturbation-token set.
    let sidecar = delta.round_f32();
    let clean_final = if cfg.bind == BindKind::Crs {
        let clean_view = SampleView {
            image: sample.image,
            text_ids: &question_ids,
            trigger_span: None,
            answer_ids: &answer_ids,
        };
        Some(clean_mass(models, &clean_view, &cfg.weights.layers)?)
    } else {
        None
    };
    let final_loss = deployment_joint(
        models,
        tok,
        sample,
        &released_image,
        &sidecar,
        &trigger,
        cfg,
        clean_final.as_ref(),
    )?;

    Ok(ProtectOutcome {
        id: sample.id,
        delta,
        trigger,
        released_image,
        released_text: deploy.surface,
        answer: sample.answer.into(),
        rounds,
        final_loss,
        feasibility: feas,
    })
}

/// Recompute the released-artifact loss for a manifest audit: same value
/// `protect_sample` recorded, derived only from (released image, released
/// text, clean sample, f32 delta sidecar, base models, config).
pub fn recompute_final_loss(
    models: &[SurrogateModel],
    tok: &MiniTokenizer,
    sample: &SampleInputs,
    released_image: &Image,
    released_text: &str,
    sidecar: &Delta,
    cfg: &ProtectionConfig,
) -> Result<f64, ProtectError> {
    cfg.validate(models.len())?;
    let answer_ids = tok.encode(sample.answer)?;
    let question_ids = tok.encode(sample.question)?;
    if !released_text.starts_with(sample.question) {
        return Err(ProtectError::BadConfig(
            "released text does not extend the clean question".into(),
        ));
    }
    let (ids, spans) = tok.encode_with_spans(released_text)?;
    let cut = sample.question.len();
    let mut first = None;
    let mut last = None;
    for (j, &(s, e)) in spans.iter().enumerate() {
        if e > cut && s < released_text.len() {
            if first.is_none() {
                first = Some(j);
            }
            last = Some(j);
        }
    }
    let span = match (first, last) {
        (Some(f), Some(l)) => Some((f, l + 1)),
        _ => None,
    };
    let omega = patch_positions(&select_perturbation_patches(sidecar, cfg.weights.tau_delta));
    let clean = if cfg.bind == BindKind::Crs {
        let clean_view = SampleView {
            image: sample.image,
            text_ids: &question_ids,
            trigger_span: None,
            answer_ids: &answer_ids,
        };
        Some(clean_mass(models, &clean_view, &cfg.weights.layers)?)
    } else {
        None
    };
    let mut total = 0.0;
    for (m, &w) in models.iter().zip(&cfg.omega) {
        let trace = m.trace(&SampleView {
            image: released_image,
            text_ids: &ids,
            trigger_span: span,
            answer_ids: &answer_ids,
        })?;
        let bind = bind_value(&trace, &omega, cfg, clean.as_ref().map(|c| (c, m, models)))?;
        total += w * joint_loss_value(
            trace.loss,
            bind,
            cfg.weights.lambda_train,
            cfg.weights.lambda_bind,
            cfg.variant,
        );
    }
    Ok(total)
}

/// Tape-path binding node for one model's pass.
fn build_bind_node(
    pass: &mut crate::model::ForwardPass,
    omega_delta: &[usize],
    cfg: &ProtectionConfig,
    clean: Option<&CleanMass>,
    model_index: usize,
) -> Result<Option<crate::tape::NodeId>, ProtectError> {
    match cfg.bind {
        BindKind::Bph => Ok(bph_loss_node(pass, omega_delta, &cfg.weights)?.node),
        BindKind::Crs => {
            let Some(cm) = clean else { return Ok(None) };
            let gap = pass.trace.partition.len - cm.clean_len;
            let insert_at = pass
                .trace
                .partition
                .trigger
                .first()
                .copied()
                .unwrap_or(pass.trace.partition.len);
            let rows = pad_clean_rows(
                &cm.per_model[model_index],
                insert_at,
                gap,
                pass.trace.partition.len,
            )?;
            let reference = CleanReference { rows, layers: cfg.weights.layers.clone() };
            Ok(Some(crate::binding::crs_loss_node(pass, &reference, cfg.weights.kl_floor)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processor::PIXELS;

    fn tok() -> MiniTokenizer {
        let lines = [
            "what color is the circle",
            "what color is the square",
            "what shape is shown here",
            "is there a triangle above",
            "red green blue yellow purple orange white black",
        ];
        let corpus: Vec<&str> = lines.iter().cycle().take(50).cloned().collect();
        MiniTokenizer::train(&corpus, 160).unwrap()
    }

    fn rand_image(seed: u64) -> Image {
        let mut s = Stream::derive(seed, "pimg", 0);
        // On-grid pixels, like a PNG-backed dataset image.
        Image::new((0..PIXELS).map(|_| s.below(256) as f64 / 255.0).collect()).unwrap()
    }

    fn small_cfg(models: usize) -> ProtectionConfig {
        ProtectionConfig {
            rounds: 1,
            pgd_iters: 1,
            top_k: 4,
            eps_t: 2,
            omega: vec![1.0 / models as f64; models],
            ..Default::default()
        }
    }

    #[test]
    fn inner_adapt_zero_steps_is_identity_and_zero_loss_is_fixed_point() {
        let t = tok();
        let base = SurrogateModel::new(3, t.vocab_size());
        let img = rand_image(1);
        let text = t.encode("what color is the circle").unwrap();
        let ans = t.encode("red").unwrap();
        let view = SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans };
        let adapted = inner_adapt(&base, &[view], 0, 1e-2, None).unwrap();
        for (a, b) in base.params().iter().zip(adapted.params()) {
            assert_eq!(a.value, b.value);
        }
        // An empty answer has exactly zero loss, so one step moves nothing.
        let zero_view =
            SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &[] };
        let adapted = inner_adapt(&base, &[zero_view], 1, 1e-2, None).unwrap();
        for (a, b) in base.params().iter().zip(adapted.params()) {
            assert_eq!(a.value, b.value, "{} moved on a zero-loss batch", a.name);
        }
    }

    #[test]
    fn inner_adapt_reduces_training_loss() {
        let t = tok();
        let base = SurrogateModel::new(4, t.vocab_size());
        let img = rand_image(2);
        let text = t.encode("what shape is shown").unwrap();
        let ans = t.encode("circle").unwrap();
        let view = SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans };
        let before = base.trace(&view).unwrap().loss;
        let adapted = inner_adapt(&base, &[view], 5, 0.05, None).unwrap();
        let after = adapted.trace(&view).unwrap().loss;
        assert!(after < before, "{after} !< {before}");
        // Base model untouched.
        let again = base.trace(&view).unwrap().loss;
        assert_eq!(before.to_bits(), again.to_bits());
    }

    #[test]
    fn inner_adapt_lora_touches_only_adapters() {
        let t = tok();
        let base = SurrogateModel::new(5, t.vocab_size());
        let img = rand_image(3);
        let text = t.encode("what color is the square").unwrap();
        let ans = t.encode("blue").unwrap();
        let view = SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans };
        let adapted = inner_adapt(&base, &[view], 3, 0.1, Some(2)).unwrap();
        for (a, b) in base.params().iter().zip(adapted.params()) {
            assert_eq!(a.value, b.value, "{} must stay fixed under low-rank adaptation", a.name);
        }
        assert!(adapted.lora().is_some());
        let before = base.trace(&view).unwrap().loss;
        let after = adapted.trace(&view).unwrap().loss;
        assert!(after < before);
    }

    #[test]
    fn protect_is_deterministic_and_feasible() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(11, t.vocab_size())];
        let img = rand_image(4);
        let sample = SampleInputs { id: 7, image: &img, question: "what color is the circle", answer: "red" };
        let cfg = small_cfg(1);
        let a = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        let b = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.trigger, b.trigger);
        assert_eq!(a.released_text, b.released_text);
        assert_eq!(a.released_image.pixels(), b.released_image.pixels());
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());

        assert_eq!(a.feasibility.violations, 0);
        assert!(a.feasibility.checks >= cfg.rounds * (cfg.pgd_iters + cfg.eps_t) + 2);
        assert!(a.delta.is_feasible(&img, cfg.eps_x, 0.0));
        assert!(a.trigger.ids.len() <= cfg.eps_t);
        assert!(a.trigger.ids.iter().all(|&id| adm.contains(id)));
        assert!(a.released_text.starts_with(sample.question));
        assert_eq!(a.answer, "red");
    }

    #[test]
    fn sweep_never_increases_the_verified_loss() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(21, t.vocab_size()), SurrogateModel::new(22, t.vocab_size())];
        let img = rand_image(5);
        let sample = SampleInputs { id: 1, image: &img, question: "what shape is shown", answer: "square" };
        let mut cfg = small_cfg(2);
        cfg.rounds = 2;
        cfg.eps_t = 3;
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        for r in &out.rounds {
            assert!(
                r.after_sweep <= r.after_pgd + 1e-12,
                "round {}: sweep {} vs pgd {}",
                r.round,
                r.after_sweep,
                r.after_pgd
            );
        }
    }

    #[test]
    fn zero_rounds_zero_init_releases_clean_data() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(31, t.vocab_size())];
        let img = rand_image(6);
        let sample = SampleInputs { id: 2, image: &img, question: "what color is the square", answer: "green" };
        let mut cfg = small_cfg(1);
        cfg.rounds = 0;
        cfg.init = InitMode::Zero;
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        // The dataset image is already on the 8-bit grid, so quantization is
        // the identity and the release is bit-identical.
        assert_eq!(out.released_image.pixels(), img.pixels());
        assert_eq!(out.released_text, sample.question);
        assert!(out.trigger.ids.is_empty());
        assert!(out.delta.linf() == 0.0);
    }

    #[test]
    fn image_only_and_text_only_reductions() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(41, t.vocab_size())];
        let img = rand_image(7);
        let sample = SampleInputs { id: 3, image: &img, question: "what color is the circle", answer: "blue" };

        // Text budget zero → released text is the bare question, image moves.
        let mut cfg = small_cfg(1);
        cfg.eps_t = 0;
        cfg.weights.lambda_bind = 0.0;
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        assert_eq!(out.released_text, sample.question);
        assert!(out.delta.linf() > 0.0, "image-only run must move the image");

        // Image budget zero → delta identically zero, trigger present.
        let mut cfg = small_cfg(1);
        cfg.eps_x = 0.0;
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        assert_eq!(out.delta.linf(), 0.0);
        assert_eq!(out.released_image.pixels(), img.pixels());
        assert!(!out.trigger.ids.is_empty());
        assert_ne!(out.released_text, sample.question);
    }

    #[test]
    fn final_loss_is_reproducible_from_released_artifacts() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models =
            [SurrogateModel::new(51, t.vocab_size()), SurrogateModel::new(52, t.vocab_size())];
        let img = rand_image(8);
        let sample = SampleInputs { id: 4, image: &img, question: "what shape is shown here", answer: "cross" };
        let cfg = small_cfg(2);
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        // Rebuild the surrogates from their seeds, as an auditor would.
        let rebuilt =
            [SurrogateModel::new(51, t.vocab_size()), SurrogateModel::new(52, t.vocab_size())];
        let re = recompute_final_loss(
            &rebuilt,
            &t,
            &sample,
            &out.released_image,
            &out.released_text,
            &out.delta.round_f32(),
            &cfg,
        )
        .unwrap();
        assert!(
            (re - out.final_loss).abs() <= 1e-5,
            "recomputed {} vs recorded {}",
            re,
            out.final_loss
        );
    }

    #[test]
    fn samples_are_protected_independently() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(61, t.vocab_size())];
        let img_a = rand_image(9);
        let img_b = rand_image(10);
        let sa = SampleInputs { id: 100, image: &img_a, question: "what color is the circle", answer: "red" };
        let sb = SampleInputs { id: 200, image: &img_b, question: "what shape is shown", answer: "circle" };
        let cfg = small_cfg(1);
        // Protect in both orders; per-sample outcomes must not change.
        let a1 = protect_sample(&models, &t, &adm, &sa, &cfg).unwrap();
        let b1 = protect_sample(&models, &t, &adm, &sb, &cfg).unwrap();
        let b2 = protect_sample(&models, &t, &adm, &sb, &cfg).unwrap();
        let a2 = protect_sample(&models, &t, &adm, &sa, &cfg).unwrap();
        assert_eq!(a1.delta, a2.delta);
        assert_eq!(a1.trigger, a2.trigger);
        assert_eq!(b1.delta, b2.delta);
        assert_eq!(b1.trigger, b2.trigger);
        // Distinct ids draw distinct trigger initializations.
        assert_ne!(a1.trigger, b1.trigger);
    }

    #[test]
    fn crs_variant_runs_and_records_losses() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(71, t.vocab_size())];
        let img = rand_image(11);
        let sample = SampleInputs { id: 5, image: &img, question: "what color is the square", answer: "yellow" };
        let mut cfg = small_cfg(1);
        cfg.bind = BindKind::Crs;
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(out.feasibility.violations, 0);
        // And the recompute contract holds for this variant too.
        let rebuilt = [SurrogateModel::new(71, t.vocab_size())];
        let re = recompute_final_loss(
            &rebuilt,
            &t,
            &sample,
            &out.released_image,
            &out.released_text,
            &out.delta.round_f32(),
            &cfg,
        )
        .unwrap();
        assert!((re - out.final_loss).abs() <= 1e-5);
    }

    #[test]
    fn max_variant_flips_only_the_training_term() {
        let t = tok();
        let adm = AdmissibleVocab::from_tokenizer(&t);
        let models = [SurrogateModel::new(81, t.vocab_size())];
        let img = rand_image(12);
        let sample = SampleInputs { id: 6, image: &img, question: "what shape is shown", answer: "triangle" };
        let mut cfg = small_cfg(1);
        cfg.variant = Variant::Max;
        let out = protect_sample(&models, &t, &adm, &sample, &cfg).unwrap();
        assert_eq!(out.feasibility.violations, 0);
        for r in &out.rounds {
            assert!(r.after_sweep <= r.after_pgd + 1e-12);
        }
    }

    #[test]
    fn config_validation_rejects_bad_weights() {
        let cfg = ProtectionConfig { omega: vec![0.5, 0.6], ..Default::default() };
        assert!(matches!(cfg.validate(2), Err(ProtectError::BadConfig(_))));
        let cfg = ProtectionConfig { omega: vec![1.0], ..Default::default() };
        assert!(matches!(
            cfg.validate(2),
            Err(ProtectError::WeightCountMismatch { models: 2, weights: 1 })
        ));
        let cfg = ProtectionConfig { omega: vec![1.5, -0.5], ..Default::default() };
        assert!(matches!(cfg.validate(2), Err(ProtectError::BadConfig(_))));
    }
}
