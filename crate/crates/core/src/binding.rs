//! Cross-modal attention binding: perturbation-token selection, attention
//! mass, the KL routing loss, the bridge-path and routing-shift objectives,
//! the joint protection loss, and two executable checks — the contrastive
//! identity behind the routing loss and the total-variation lower bound it
//! implies.
//!
//! Everything exists twice: a value path over plain attention stacks
//! (`Vec<Vec<Mat>>`, `[layer][head]`) for diagnostics and synthetic checks,
//! and a tape path over a `ForwardPass` for optimization.

use alloc::vec;
use alloc::vec::Vec;

use crate::metrics::tv_distance;
use crate::model::{ForwardPass, ForwardTrace, N_HEADS};
use crate::perturb::Delta;
use crate::processor::{patch_pixel_indices, N_PATCHES, PATCH_DIM};
use crate::tape::NodeId;

/// Floor applied inside KL terms during optimization so off-support mass
/// keeps a finite value and gradient. Diagnostics use the unfloored value
/// with an infinity sentinel instead.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BindingError {
    EmptySource,
    EmptyTarget,
    BadLayer { layer: usize },
    LengthMismatch { want: usize, got: usize },
}

impl core::fmt::Display for BindingError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BindingError::EmptySource => write!(f, "attention mass needs a nonempty query set"),
            BindingError::EmptyTarget => write!(f, "KL target set is empty"),
            BindingError::BadLayer { layer } => write!(f, "layer {} out of range", layer),
            BindingError::LengthMismatch { want, got } => {
                write!(f, "distribution length {} does not match {}", got, want)
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BindingError {}

/// Loss weights and structural knobs shared by the binding objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct BindingWeights {
    /// Path weights: trigger→perturbation, answer→trigger, answer→perturbation.
    pub beta: [f64; 3],
    pub lambda_train: f64,
    pub lambda_bind: f64,
    /// Zero-based attention-layer indices the losses average over.
    pub layers: Vec<usize>,
    /// Fraction of image patches counted as perturbation tokens.
    pub tau_delta: f64,
    pub kl_floor: f64,
}

impl Default for BindingWeights {
    fn default() -> Self {
        BindingWeights {
            beta: [1.0, 1.0, 1.0],
            lambda_train: 1.0,
            lambda_bind: 1.0,
            layers: vec![0],
            tau_delta: 0.25,
            kl_floor: KL_FLOOR,
        }
    }
}

/// Which protection objective the joint loss implements: make the protected
/// data easy to fit through a shortcut, or hard to fit at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    MinMin,
    Max,
}

// ---------------------------------------------------------------------------
// Perturbation-token selection
// ---------------------------------------------------------------------------

/// Indices of the ⌈τ·n⌉ largest scores, ties broken toward the smaller
/// index. An all-zero score vector therefore selects the lowest indices —
/// a documented degenerate case, not an error, so text-only runs still work.
pub fn select_top_fraction(scores: &[f64], tau: f64) -> Vec<usize> {
    assert!(tau > 0.0 && tau <= 1.0, "fraction must be in (0,1]");
    let n = scores.len();
    let keep = ((tau * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(keep).collect();
    picked.sort_unstable();
    picked
}

/// Mean |δ| over each 4×4×3 patch region.
pub fn patch_magnitudes(delta: &Delta) -> Vec<f64> {
    (0..N_PATCHES)
        .map(|b| {
            let idx = patch_pixel_indices(b);
            idx.iter().map(|&i| delta.data[i].abs()).sum::<f64>() / PATCH_DIM as f64
        })
        .collect()
}

/// Patch indices of the perturbation-token set Ω_δ.
pub fn select_perturbation_patches(delta: &Delta, tau: f64) -> Vec<usize> {
    select_top_fraction(&patch_magnitudes(delta), tau)
}

/// Map patch indices to sequence positions (image tokens start right after
/// the leading template token).
pub fn patch_positions(patches: &[usize]) -> Vec<usize> {
    patches.iter().map(|&b| 1 + b).collect()
}

// ---------------------------------------------------------------------------
// Attention mass and the routing loss — value path
// ---------------------------------------------------------------------------

/// Head-averaged attention distribution cast by the query set `source` at one
/// layer: mean over heads and source rows. Convex combination of stochastic
/// rows, so the result is on the simplex.
pub fn attention_mass(
    heads: &[crate::tensor::Mat],
    source: &[usize],
) -> Result<Vec<f64>, BindingError> {
    if source.is_empty() {
        return Err(BindingError::EmptySource);
    }
    let n = heads[0].cols;
    let mut out = vec![0.0; n];
    for h in heads {
        for &r in source {
            for (o, v) in out.iter_mut().zip(h.row(r)) {
                *o += v;
            }
        }
    }
    let denom = (heads.len() * source.len()) as f64;
    out.iter_mut().for_each(|v| *v /= denom);
    Ok(out)
}

/// Total mass a distribution puts on a set of positions.
pub fn mass_on(dist: &[f64], positions: &[usize]) -> f64 {
    positions.iter().map(|&p| dist[p]).sum()
}

/// KL(uniform over `r_set` ‖ q), floored when `floor` is given; unfloored
/// otherwise, where zero mass on any target yields the infinity sentinel.
pub fn kl_uniform_value(q: &[f64], r_set: &[usize], floor: Option<f64>) -> f64 {
    assert!(!r_set.is_empty());
    let r = r_set.len() as f64;
    let mut v = -libm::log(r);
    for &j in r_set {
        let qj = match floor {
            Some(fl) => q[j].max(fl),
            None if q[j] == 0.0 => return f64::INFINITY,
            None => q[j],
        };
        v -= libm::log(qj) / r;
    }
    v
}

/// Layer-averaged routing loss on an attention stack: the KL between the
/// uniform target over `r_set` and the mass distribution of `source`, meaned
/// over `layers`. `floor: None` is the diagnostics mode.
pub fn mass_loss_value(
    stack: &[Vec<crate::tensor::Mat>],
    source: &[usize],
    r_set: &[usize],
    layers: &[usize],
    floor: Option<f64>,
) -> Result<f64, BindingError> {
    if r_set.is_empty() {
        return Err(BindingError::EmptyTarget);
    }
    let mut acc = 0.0;
    for &k in layers {
        let heads = stack.get(k).ok_or(BindingError::BadLayer { layer: k })?;
        let m = attention_mass(heads, source)?;
        acc += kl_uniform_value(&m, r_set, floor);
    }
    Ok(acc / layers.len() as f64)
}

/// Outcome of the contrastive decomposition check: the routing loss must
/// equal the layer-averaged softmax cross-entropy over log-mass logits minus
/// log |r_set|, whenever every target position carries positive mass.
#[derive(Clone, Debug, PartialEq)]
pub enum IdentityOutcome {
    Holds { lhs: f64, rhs: f64, diff: f64 },
    Inapplicable { layer: usize, position: usize },
}

pub fn contrastive_identity_check(
    stack: &[Vec<crate::tensor::Mat>],
    source: &[usize],
    r_set: &[usize],
    layers: &[usize],
) -> Result<IdentityOutcome, BindingError> {
    if r_set.is_empty() {
        return Err(BindingError::EmptyTarget);
    }
    let mut nce_sum = 0.0;
    for &k in layers {
        let heads = stack.get(k).ok_or(BindingError::BadLayer { layer: k })?;
        let m = attention_mass(heads, source)?;
        for &rpos in r_set {
            if m[rpos] == 0.0 {
                return Ok(IdentityOutcome::Inapplicable { layer: k, position: rpos });
            }
        }
        // Logits z = log mass on the support; cross-entropy of each positive
        // under softmax(z), evaluated through an explicit logsumexp so the
        // right-hand side is an independent numerical path.
        let z: Vec<f64> = m
            .iter()
            .map(|&q| if q > 0.0 { libm::log(q) } else { f64::NEG_INFINITY })
            .collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax
            + libm::log(
                z.iter()
                    .filter(|v| v.is_finite())
                    .map(|&v| libm::exp(v - zmax))
                    .sum::<f64>(),
            );
        let mean_ce = r_set.iter().map(|&rpos| -z[rpos] + lse).sum::<f64>() / r_set.len() as f64;
        nce_sum += mean_ce;
    }
    let rhs = nce_sum / layers.len() as f64 - libm::log(r_set.len() as f64);
    let lhs = mass_loss_value(stack, source, r_set, layers, None)?;
    let diff = (lhs - rhs).abs();
    Ok(IdentityOutcome::Holds { lhs, rhs, diff })
}

// ---------------------------------------------------------------------------
// Attention mass and losses — tape path
// ---------------------------------------------------------------------------

/// Tape node holding the head-averaged mass distribution of `source` at
/// `layer`, differentiable back to the attention scores.
pub fn attention_mass_node(
    pass: &mut ForwardPass,
    layer: usize,
    source: &[usize],
) -> Result<NodeId, BindingError> {
    if source.is_empty() {
        return Err(BindingError::EmptySource);
    }
    if layer >= pass.attn_nodes.len() {
        return Err(BindingError::BadLayer { layer });
    }
    let heads = pass.attn_nodes[layer].clone();
    let mut acc: Option<NodeId> = None;
    for h in heads {
        let m = pass.tape.rows_mean(h, source);
        acc = Some(match acc {
            Some(a) => pass.tape.add(a, m),
            None => m,
        });
    }
    Ok(pass.tape.scale(acc.expect("at least one head"), 1.0 / N_HEADS as f64))
}

/// Differentiable routing loss: layer-averaged floored KL(U_{r_set} ‖ mass).
pub fn mass_loss_node(
    pass: &mut ForwardPass,
    source: &[usize],
    r_set: &[usize],
    layers: &[usize],
    floor: f64,
) -> Result<NodeId, BindingError> {
    if r_set.is_empty() {
        return Err(BindingError::EmptyTarget);
    }
    let mut acc: Option<NodeId> = None;
    for &k in layers {
        let m = attention_mass_node(pass, k, source)?;
        let kl = pass.tape.kl_uniform(m, r_set, floor);
        acc = Some(match acc {
            Some(a) => pass.tape.add(a, kl),
            None => kl,
        });
    }
    Ok(pass.tape.scale(acc.expect("layer set nonempty"), 1.0 / layers.len() as f64))
}

/// The three bridge paths, in weight order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BridgePath {
    TriggerToPerturbation,
    AnswerToTrigger,
    AnswerToPerturbation,
}

/// Bridge-path loss and which paths actually contributed. A path whose query
/// or key set is empty is skipped and listed, not an error, so ablations with
/// no trigger or no perturbation still run.
#[derive(Debug)]
pub struct BridgeLoss {
    pub node: Option<NodeId>,
    pub used: Vec<BridgePath>,
    pub skipped: Vec<BridgePath>,
}

pub fn bph_loss_node(
    pass: &mut ForwardPass,
    omega_delta: &[usize],
    weights: &BindingWeights,
) -> Result<BridgeLoss, BindingError> {
    let trigger = pass.trace.partition.trigger.clone();
    let answer = pass.trace.partition.answer.clone();
    let paths = [
        (BridgePath::TriggerToPerturbation, trigger.clone(), omega_delta.to_vec(), weights.beta[0]),
        (BridgePath::AnswerToTrigger, answer.clone(), trigger, weights.beta[1]),
        (BridgePath::AnswerToPerturbation, answer, omega_delta.to_vec(), weights.beta[2]),
    ];
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    let mut node: Option<NodeId> = None;
    for (path, source, r_set, beta) in paths {
        if source.is_empty() || r_set.is_empty() {
            skipped.push(path);
            continue;
        }
        used.push(path);
        let term = mass_loss_node(pass, &source, &r_set, &weights.layers, weights.kl_floor)?;
        let weighted = pass.tape.scale(term, beta);
        node = Some(match node {
            Some(a) => pass.tape.add(a, weighted),
            None => weighted,
        });
    }
    Ok(BridgeLoss { node, used, skipped })
}

/// Frozen clean-side answer-mass rows, zero-padded at the trigger positions
/// so both sides live on the protected sequence's key universe. One row per
/// entry of the layer set, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanReference {
    pub rows: Vec<Vec<f64>>,
    pub layers: Vec<usize>,
}

/// Zero-pad clean-side mass rows onto the protected key universe: clean key
/// positions at or beyond `insert_at` shift right by `gap`, the gap itself
/// gets zero mass. Each input row must have length `target_len - gap`.
pub fn pad_clean_rows(
    rows: &[Vec<f64>],
    insert_at: usize,
    gap: usize,
    target_len: usize,
) -> Result<Vec<Vec<f64>>, BindingError> {
    let mut out = Vec::with_capacity(rows.len());
    for m in rows {
        if m.len() + gap != target_len {
            return Err(BindingError::LengthMismatch { want: target_len, got: m.len() + gap });
        }
        let mut padded = vec![0.0; target_len];
        for (j, &v) in m.iter().enumerate() {
            let pos = if j < insert_at { j } else { j + gap };
            padded[pos] = v;
        }
        out.push(padded);
    }
    Ok(out)
}

/// Build the reference from a clean forward (no trigger, no perturbation).
/// `insert_at`/`gap` describe where the protected sequence holds its trigger
/// tokens.
pub fn clean_reference(
    clean: &ForwardTrace,
    layers: &[usize],
    insert_at: usize,
    gap: usize,
    protected_len: usize,
) -> Result<CleanReference, BindingError> {
    let mut mass = Vec::with_capacity(layers.len());
    for &k in layers {
        let heads = clean.attention.get(k).ok_or(BindingError::BadLayer { layer: k })?;
        mass.push(attention_mass(heads, &clean.partition.answer)?);
    }
    let rows = pad_clean_rows(&mass, insert_at, gap, protected_len)?;
    Ok(CleanReference { rows, layers: layers.to_vec() })
}

/// Routing-shift loss: the negated layer-averaged KL from the frozen clean
/// answer-mass to the protected one. Minimizing it pushes the protected
/// routing away from the clean reference; no gradient reaches the clean side
/// because the reference enters as plain data.
pub fn crs_loss_node(
    pass: &mut ForwardPass,
    reference: &CleanReference,
    kl_floor: f64,
) -> Result<NodeId, BindingError> {
    let answer = pass.trace.partition.answer.clone();
    let mut acc: Option<NodeId> = None;
    for (&k, row) in reference.layers.iter().zip(&reference.rows) {
        if row.len() != pass.trace.partition.len {
            return Err(BindingError::LengthMismatch {
                want: pass.trace.partition.len,
                got: row.len(),
            });
        }
        let m = attention_mass_node(pass, k, &answer)?;
        let kl = pass.tape.kl_const_ref(m, row, kl_floor, -1.0);
        acc = Some(match acc {
            Some(a) => pass.tape.add(a, kl),
            None => kl,
        });
    }
    Ok(pass
        .tape
        .scale(acc.expect("layer set nonempty"), 1.0 / reference.layers.len() as f64))
}

/// Value-path analogue of `crs_loss_node` for reporting.
pub fn crs_loss_value(
    protected: &ForwardTrace,
    reference: &CleanReference,
    kl_floor: f64,
) -> Result<f64, BindingError> {
    let mut acc = 0.0;
    for (&k, row) in reference.layers.iter().zip(&reference.rows) {
        let heads = protected
            .attention
            .get(k)
            .ok_or(BindingError::BadLayer { layer: k })?;
        let m = attention_mass(heads, &protected.partition.answer)?;
        let mut kl = 0.0;
        for (&p, &q) in row.iter().zip(&m) {
            if p > 0.0 {
                kl += p * libm::log(p / q.max(kl_floor));
            }
        }
        acc += -kl;
    }
    Ok(acc / reference.layers.len() as f64)
}

// ---------------------------------------------------------------------------
// Joint loss
// ---------------------------------------------------------------------------

/// Combine training and binding terms on the tape. The binding sign never
/// flips; the max variant only reverses the training term.
pub fn joint_loss_node(
    pass: &mut ForwardPass,
    bind: Option<NodeId>,
    lambda_train: f64,
    lambda_bind: f64,
    variant: Variant,
) -> NodeId {
    let sign = match variant {
        Variant::MinMin => 1.0,
        Variant::Max => -1.0,
    };
    let train = pass.tape.scale(pass.loss_node, sign * lambda_train);
    match bind {
        Some(b) => {
            let wb = pass.tape.scale(b, lambda_bind);
            pass.tape.add(train, wb)
        }
        None => train,
    }
}

pub fn joint_loss_value(
    train: f64,
    bind: f64,
    lambda_train: f64,
    lambda_bind: f64,
    variant: Variant,
) -> f64 {
    match variant {
        Variant::MinMin => lambda_train * train + lambda_bind * bind,
        Variant::Max => -lambda_train * train + lambda_bind * bind,
    }
}

// ---------------------------------------------------------------------------
// Total-variation lower bound
// ---------------------------------------------------------------------------

/// Report of the routing-shift bound: when the clean side carries no mass on
/// `r_set`, the protected-vs-clean attention shift must be at least
/// 1 − √(η/2), where η is the unfloored routing loss of the protected side.
#[derive(Clone, Debug, PartialEq)]
pub struct TvBoundReport {
    pub eta: f64,
    pub mean_tv: f64,
    pub bound: f64,
    pub clean_mass_on_r: f64,
    pub holds: bool,
}

/// `protected_rows` and `clean_rows` are per-layer answer-mass distributions
/// on the same key universe (clean side already zero-padded).
pub fn tv_bound_check(
    protected_rows: &[Vec<f64>],
    clean_rows: &[Vec<f64>],
    r_set: &[usize],
) -> TvBoundReport {
    assert_eq!(protected_rows.len(), clean_rows.len());
    assert!(!protected_rows.is_empty() && !r_set.is_empty());
    let layers = protected_rows.len() as f64;
    let mut eta = 0.0;
    let mut mean_tv = 0.0;
    let mut clean_mass = 0.0f64;
    for (p, c) in protected_rows.iter().zip(clean_rows) {
        eta += kl_uniform_value(p, r_set, None);
        mean_tv += tv_distance(p, c);
        clean_mass = clean_mass.max(mass_on(c, r_set));
    }
    eta /= layers;
    mean_tv /= layers;
    let bound = 1.0 - libm::sqrt(eta / 2.0);
    TvBoundReport {
        eta,
        mean_tv,
        bound,
        clean_mass_on_r: clean_mass,
        holds: mean_tv >= bound - 1e-9,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GradRequest, ProcMode, SampleView, SurrogateModel};
    use crate::processor::{Image, PIXELS};
    use crate::rng::Stream;
    use crate::tape::Tape;
    use crate::tensor::Mat;
    use crate::tokenizer::MiniTokenizer;

    fn stochastic_stack(seed: u64, layers: usize, heads: usize, n: usize) -> Vec<Vec<Mat>> {
        let mut s = Stream::derive(seed, "stack", 0);
        (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        let mut m = Mat::zeros(n, n);
                        for i in 0..n {
                            let mut sum = 0.0;
                            for j in 0..n {
                                let v = s.unit() + 1e-3;
                                m.row_mut(i)[j] = v;
                                sum += v;
                            }
                            for j in 0..n {
                                m.row_mut(i)[j] /= sum;
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn top_fraction_selection_matches_hand_ranks() {
        // τ=1 keeps everything.
        assert_eq!(select_top_fraction(&[0.3, 0.1], 1.0), vec![0, 1]);
        // ⌈0.25·4⌉ = 1 patch, the largest score.
        assert_eq!(select_top_fraction(&[0.1, 0.4, 0.2, 0.3], 0.25), vec![1]);
        // Uniform scores fall back to the lowest indices.
        assert_eq!(select_top_fraction(&[0.5; 8], 0.25), vec![0, 1]);
        // All-zero scores behave the same way.
        assert_eq!(select_top_fraction(&[0.0; 8], 0.5), vec![0, 1, 2, 3]);
    }

    #[test]
    fn patch_magnitudes_average_over_the_pixel_region() {
        let mut d = Delta::zeros();
        for &i in patch_pixel_indices(10).iter() {
            d.data[i] = -0.5;
        }
        let rho = patch_magnitudes(&d);
        assert!((rho[10] - 0.5).abs() < 1e-15);
        assert!(rho.iter().enumerate().all(|(b, &v)| b == 10 || v == 0.0));
        // A fraction small enough for one patch picks exactly the loud one.
        assert_eq!(select_perturbation_patches(&d, 0.01), vec![10]);
        // At a quarter, the loud patch plus the lowest-index zero patches.
        let quarter = select_perturbation_patches(&d, 0.25);
        assert_eq!(quarter.len(), 16);
        assert!(quarter.contains(&10));
        assert_eq!(quarter, (0..16).collect::<Vec<_>>());
        assert_eq!(patch_positions(&[0, 10]), vec![1, 11]);
    }

    #[test]
    fn attention_mass_matches_hand_average_and_errors_on_empty() {
        let h = Mat::from_vec(3, 3, vec![0.2, 0.6, 0.2, 0.5, 0.3, 0.2, 1.0, 0.0, 0.0]);
        let m = attention_mass(core::slice::from_ref(&h), &[0, 1]).unwrap();
        assert!((m[0] - 0.35).abs() < 1e-12);
        assert!((m[1] - 0.45).abs() < 1e-12);
        assert!((m[2] - 0.2).abs() < 1e-12);
        assert_eq!(attention_mass(&[h], &[]), Err(BindingError::EmptySource));
    }

    #[test]
    fn attention_mass_stays_on_the_simplex() {
        let stack = stochastic_stack(3, 2, 4, 12);
        for layer in &stack {
            let m = attention_mass(layer, &[2, 5, 7]).unwrap();
            assert!(m.iter().all(|&v| v >= 0.0));
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mass_loss_known_values() {
        // A uniform match over the target set gives exactly zero.
        let mut m = Mat::zeros(2, 4);
        for i in 0..2 {
            m.row_mut(i).copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        }
        let stack = vec![vec![m]];
        let v = mass_loss_value(&stack, &[0, 1], &[0, 1], &[0], None).unwrap();
        assert!(v.abs() < 1e-12);

        // Hand value: Ā=[0.35,0.45,0.2], R={0} → ln(1/0.35).
        let h = Mat::from_vec(3, 3, vec![0.2, 0.6, 0.2, 0.5, 0.3, 0.2, 0.1, 0.1, 0.8]);
        let stack = vec![vec![h]];
        let v = mass_loss_value(&stack, &[0, 1], &[0], &[0], None).unwrap();
        assert!((v - libm::log(1.0 / 0.35)).abs() < 1e-12);

        // Zero mass on a target: diagnostics mode reports infinity, the
        // floored mode stays finite.
        let h = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let stack = vec![vec![h]];
        let inf = mass_loss_value(&stack, &[0], &[1], &[0], None).unwrap();
        assert!(inf.is_infinite());
        let fin = mass_loss_value(&stack, &[0], &[1], &[0], Some(KL_FLOOR)).unwrap();
        assert!(fin.is_finite() && fin > 0.0);
    }

    #[test]
    fn identity_uniform_closed_form() {
        // Uniform mass over n tokens with |R|=m gives ln(n/m) on both sides.
        let n = 10;
        let m_sz = 4;
        let row = vec![1.0 / n as f64; n * n];
        let stack = vec![vec![Mat::from_vec(n, n, row)]];
        let r: Vec<usize> = (0..m_sz).collect();
        match contrastive_identity_check(&stack, &[3, 7], &r, &[0]).unwrap() {
            IdentityOutcome::Holds { lhs, rhs, diff } => {
                let want = libm::log(n as f64 / m_sz as f64);
                assert!((lhs - want).abs() < 1e-12);
                assert!((rhs - want).abs() < 1e-12);
                assert!(diff <= 1e-9);
            }
            other => panic!("unexpected outcome {:?}", other),
        }
    }

    #[test]
    fn identity_holds_on_random_stacks() {
        for seed in 0..25 {
            let stack = stochastic_stack(seed, 2, 4, 16);
            let out = contrastive_identity_check(&stack, &[4, 9, 12], &[1, 2, 6], &[0, 1]).unwrap();
            match out {
                IdentityOutcome::Holds { diff, .. } => assert!(diff <= 1e-9, "diff {diff}"),
                other => panic!("unexpected {:?}", other),
            }
        }
    }

    #[test]
    fn identity_reports_inapplicable_off_support() {
        let h = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let stack = vec![vec![h]];
        let out = contrastive_identity_check(&stack, &[0, 1], &[1], &[0]).unwrap();
        assert_eq!(out, IdentityOutcome::Inapplicable { layer: 0, position: 1 });
    }

    fn tok() -> MiniTokenizer {
        let lines = [
            "what color is the circle",
            "what shape is shown here",
            "red green blue yellow purple",
        ];
        let corpus: Vec<&str> = lines.iter().cycle().take(30).cloned().collect();
        MiniTokenizer::train(&corpus, 120).unwrap()
    }

    fn protected_pass(seed: u64) -> (SurrogateModel, crate::model::ForwardPass) {
        let t = tok();
        let model = SurrogateModel::new(seed, t.vocab_size());
        let mut s = Stream::derive(seed, "img", 0);
        let img = Image::new((0..PIXELS).map(|_| s.unit()).collect()).unwrap();
        let mut text = t.encode("what color is the circle").unwrap();
        let trig = t.encode(" here").unwrap();
        let span = (text.len(), text.len() + trig.len());
        text.extend(&trig);
        let ans = t.encode("red").unwrap();
        let pass = model
            .forward(
                &SampleView {
                    image: &img,
                    text_ids: &text,
                    trigger_span: Some(span),
                    answer_ids: &ans,
                },
                ProcMode::Differentiable,
            )
            .unwrap();
        (model, pass)
    }

    #[test]
    fn tape_mass_matches_value_path() {
        let (_, mut pass) = protected_pass(31);
        let src = pass.trace.partition.answer.clone();
        let node = attention_mass_node(&mut pass, 1, &src).unwrap();
        let tape_val = pass.tape.value(node).to_vec();
        let value = attention_mass(&pass.trace.attention[1], &src).unwrap();
        for (a, b) in tape_val.iter().zip(&value) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bph_single_path_reduces_to_mass_loss() {
        let (_, mut pass) = protected_pass(32);
        let omega = patch_positions(&[0, 1, 2, 3]);
        let w = BindingWeights { beta: [1.0, 0.0, 0.0], ..Default::default() };
        let bph = bph_loss_node(&mut pass, &omega, &w).unwrap();
        assert_eq!(bph.used.len(), 3);
        let trigger = pass.trace.partition.trigger.clone();
        let single = mass_loss_node(&mut pass, &trigger, &omega, &w.layers, w.kl_floor).unwrap();
        let a = pass.tape.scalar(bph.node.unwrap());
        let b = pass.tape.scalar(single);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn bph_skips_and_logs_empty_paths() {
        let t = tok();
        let model = SurrogateModel::new(33, t.vocab_size());
        let mut s = Stream::derive(33, "img", 0);
        let img = Image::new((0..PIXELS).map(|_| s.unit()).collect()).unwrap();
        let text = t.encode("what shape is shown").unwrap();
        let ans = t.encode("cross").unwrap();
        // No trigger span → Ω_γ empty → paths 1 and 2 skipped.
        let mut pass = model
            .forward(
                &SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans },
                ProcMode::Differentiable,
            )
            .unwrap();
        let omega = patch_positions(&[5, 6]);
        let bph = bph_loss_node(&mut pass, &omega, &BindingWeights::default()).unwrap();
        assert_eq!(bph.used, vec![BridgePath::AnswerToPerturbation]);
        assert_eq!(
            bph.skipped,
            vec![BridgePath::TriggerToPerturbation, BridgePath::AnswerToTrigger]
        );
        assert!(bph.node.is_some());

        // Empty Ω_δ on top → everything skipped, no node.
        let mut pass2 = model
            .forward(
                &SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans },
                ProcMode::Differentiable,
            )
            .unwrap();
        let bph2 = bph_loss_node(&mut pass2, &[], &BindingWeights::default()).unwrap();
        assert!(bph2.node.is_none());
        assert_eq!(bph2.skipped.len(), 3);
    }

    #[test]
    fn bph_gradient_raises_target_logits_and_lowers_others() {
        // One-layer stub: a 4×4 score leaf through the causal softmax; the
        // mass of the last row targets position 1. Descent must push score
        // (3,1) up (negative gradient) and the other reachable scores down.
        let mut tape = Tape::new();
        let mut s = Stream::derive(4, "stub", 0);
        let scores = tape.leaf(4, 4, (0..16).map(|_| s.normal()).collect(), true);
        let attn = tape.causal_softmax(scores);
        let mass = tape.rows_mean(attn, &[3]);
        let loss = tape.kl_uniform(mass, &[1], KL_FLOOR);
        let mut g = tape.backward(loss);
        let gs = g.take(scores).unwrap();
        let row3 = &gs[12..16];
        assert!(row3[1] < 0.0, "target logit gradient must be negative, got {}", row3[1]);
        assert!(row3[0] > 0.0 && row3[2] > 0.0 && row3[3] > 0.0);
    }

    #[test]
    fn clean_reference_pads_trigger_positions_with_zeros() {
        let t = tok();
        let model = SurrogateModel::new(35, t.vocab_size());
        let mut s = Stream::derive(35, "img", 0);
        let img = Image::new((0..PIXELS).map(|_| s.unit()).collect()).unwrap();
        let text = t.encode("what color is the circle").unwrap();
        let ans = t.encode("red").unwrap();
        let clean = model
            .trace(&SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans })
            .unwrap();
        let gap = 2;
        let insert_at = 66 + text.len(); // first position after the clean question
        let refr =
            clean_reference(&clean, &[0, 1], insert_at, gap, clean.partition.len + gap).unwrap();
        for row in &refr.rows {
            assert_eq!(row.len(), clean.partition.len + gap);
            for &x in &row[insert_at..insert_at + gap] {
                assert_eq!(x, 0.0);
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // Length mismatch is rejected.
        assert!(matches!(
            clean_reference(&clean, &[0], insert_at, gap, clean.partition.len),
            Err(BindingError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn crs_is_zero_against_itself_and_negative_when_shifted() {
        let (_, mut pass) = protected_pass(36);
        let layers = vec![0usize, 1];
        // Reference equal to the protected mass itself → KL = 0.
        let own_rows: Vec<Vec<f64>> = layers
            .iter()
            .map(|&k| attention_mass(&pass.trace.attention[k], &pass.trace.partition.answer).unwrap())
            .collect();
        let same = CleanReference { rows: own_rows.clone(), layers: layers.clone() };
        let node = crs_loss_node(&mut pass, &same, KL_FLOOR).unwrap();
        assert!(pass.tape.scalar(node).abs() < 1e-12);

        // Moving reference mass away from the protected distribution makes
        // the loss strictly negative. Position 0 (the leading token) always
        // carries attention mass, unlike the final position, which no answer
        // query can reach under causality.
        let mut shifted = own_rows;
        for row in &mut shifted {
            assert!(row[0] > 1e-9);
            let take = row[0] * 0.9;
            row[0] -= take;
            row[2] += take;
        }
        let moved = CleanReference { rows: shifted, layers: layers.clone() };
        let node2 = crs_loss_node(&mut pass, &moved, KL_FLOOR).unwrap();
        assert!(pass.tape.scalar(node2) < -1e-6);
        // Value path agrees with the tape path.
        let v = crs_loss_value(&pass.trace, &moved, KL_FLOOR).unwrap();
        assert!((v - pass.tape.scalar(node2)).abs() < 1e-12);
    }

    #[test]
    fn crs_gradients_reach_pixels_but_reference_is_inert() {
        let (_, mut pass) = protected_pass(37);
        let layers = vec![0usize];
        let rows: Vec<Vec<f64>>= layers
            .iter()
            .map(|&k| {
                let mut m =
                    attention_mass(&pass.trace.attention[k], &pass.trace.partition.answer).unwrap();
                let take = m[0] * 0.5;
                m[0] -= take;
                m[2] += take;
                m
            })
            .collect();
        let before = rows.clone();
        let refr = CleanReference { rows, layers };
        let node = crs_loss_node(&mut pass, &refr, KL_FLOOR).unwrap();
        let g = pass
            .gradients(node, GradRequest { pixels: true, ..Default::default() })
            .unwrap();
        assert!(g.pixels.unwrap().iter().any(|&x| x != 0.0));
        assert_eq!(refr.rows, before, "reference data is plain input, never updated");
    }

    #[test]
    fn joint_loss_arithmetic_and_sign() {
        assert_eq!(joint_loss_value(2.0, 0.5, 1.0, 2.0, Variant::MinMin), 3.0);
        assert_eq!(joint_loss_value(2.0, 0.0, 1.0, 0.0, Variant::Max), -2.0);
        let (_, mut pass) = protected_pass(38);
        let train = pass.trace.loss;
        let jm = joint_loss_node(&mut pass, None, 1.0, 0.0, Variant::MinMin);
        assert!((pass.tape.scalar(jm) - train).abs() < 1e-12);
        let jx = joint_loss_node(&mut pass, None, 1.0, 0.0, Variant::Max);
        assert!((pass.tape.scalar(jx) + train).abs() < 1e-12);
    }

    #[test]
    fn tv_bound_disjoint_and_hand_cases() {
        // Protected mass exactly uniform on R, clean mass zero there.
        let p = vec![0.5, 0.5, 0.0, 0.0];
        let c = vec![0.0, 0.0, 0.7, 0.3];
        let rep = tv_bound_check(&[p], &[c], &[0, 1]);
        assert!(rep.eta.abs() < 1e-12);
        assert!((rep.mean_tv - 1.0).abs() < 1e-12);
        assert!((rep.bound - 1.0).abs() < 1e-12);
        assert!(rep.holds);
        assert_eq!(rep.clean_mass_on_r, 0.0);

        // Hand case: p puts 0.45+0.45 on R.
        let p = vec![0.45, 0.45, 0.06, 0.04];
        let c = vec![0.0, 0.0, 0.55, 0.45];
        let rep = tv_bound_check(core::slice::from_ref(&p), &[c], &[0, 1]);
        let want_eta = libm::log(0.5 / 0.45);
        assert!((rep.eta - want_eta).abs() < 1e-12);
        assert!((rep.bound - (1.0 - libm::sqrt(want_eta / 2.0))).abs() < 1e-12);
        assert!(rep.mean_tv >= rep.bound && rep.holds);

        // η ≥ 2 → bound ≤ 0: vacuously holds even for identical sides.
        let q = vec![0.001, 0.001, 0.5, 0.498];
        let rep = tv_bound_check(core::slice::from_ref(&q), core::slice::from_ref(&q), &[0, 1]);
        assert!(rep.eta > 2.0 && rep.bound < 0.0 && rep.holds);
        assert_eq!(rep.mean_tv, 0.0);
    }

    #[test]
    fn binding_losses_backpropagate_to_pixels_and_triggers() {
        let (_, mut pass) = protected_pass(39);
        let omega = patch_positions(&select_top_fraction(&[0.4; 64], 0.25));
        let w = BindingWeights::default();
        let bph = bph_loss_node(&mut pass, &omega, &w).unwrap();
        let joint = joint_loss_node(&mut pass, bph.node, w.lambda_train, w.lambda_bind, Variant::MinMin);
        let g = pass
            .gradients(
                joint,
                GradRequest { pixels: true, trigger_embeddings: true, theta: false },
            )
            .unwrap();
        assert!(g.pixels.unwrap().iter().any(|&x| x != 0.0));
        let tg = g.trigger_embeddings.unwrap();
        assert!(!tg.is_empty());
        assert!(tg.iter().any(|row| row.iter().any(|&x| x != 0.0)));
    }
}
