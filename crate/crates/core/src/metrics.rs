//! Stealth and distribution metrics: PSNR, windowed SSIM, character edit
//! distance, BLEU-4, KL/TV with the Pinsker sanity check, and the per-layer
//! attention-routing breakdown.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::binding::{attention_mass, mass_on, BindingError};
use crate::model::ForwardTrace;
use crate::processor::{Image, CHANNELS, IMG_SIDE};

/// Peak signal-to-noise ratio in dB on unit-range images; identical inputs
/// return the +∞ sentinel.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(1.0 / mse)
    }
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn luma(img: &Image) -> Vec<f64> {
    let mut out = vec![0.0; IMG_SIDE * IMG_SIDE];
    for y in 0..IMG_SIDE {
        for x in 0..IMG_SIDE {
            let base = (y * IMG_SIDE + x) * CHANNELS;
            let p = img.pixels();
            out[y * IMG_SIDE + x] = 0.299 * p[base] + 0.587 * p[base + 1] + 0.114 * p[base + 2];
        }
    }
    out
}

/// Mean structural similarity over non-overlapping 8×8 luma windows with the
/// standard stabilizing constants on unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let la = luma(a);
    let lb = luma(b);
    let per_axis = IMG_SIDE / SSIM_WINDOW;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for wy in 0..per_axis {
        for wx in 0..per_axis {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let i = (wy * SSIM_WINDOW + dy) * IMG_SIDE + wx * SSIM_WINDOW + dx;
                    ma += la[i];
                    mb += lb[i];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let i = (wy * SSIM_WINDOW + dy) * IMG_SIDE + wx * SSIM_WINDOW + dx;
                    let da = la[i] - ma;
                    let db = lb[i] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / (per_axis * per_axis) as f64
}

/// Character-level Levenshtein distance.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let ac: Vec<char> = a.chars().collect();
    let bc: Vec<char> = b.chars().collect();
    if ac.is_empty() {
        return bc.len();
    }
    let mut prev: Vec<usize> = (0..=bc.len()).collect();
    let mut cur = vec![0usize; bc.len() + 1];
    for (i, &ca) in ac.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in bc.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[bc.len()]
}

/// BLEU-4 of `candidate` against the single `reference`, on whitespace
/// tokens, add-one smoothed n-gram precisions, with the usual brevity
/// penalty. Order of arguments matters: the first is the reference.
pub fn bleu(reference: &str, candidate: &str) -> f64 {
    let rt: Vec<&str> = reference.split_whitespace().collect();
    let ct: Vec<&str> = candidate.split_whitespace().collect();
    if ct.is_empty() {
        return if rt.is_empty() { 1.0 } else { 0.0 };
    }
    fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
        let mut m = BTreeMap::new();
        if toks.len() >= n {
            for w in toks.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    }
    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let rc = ngram_counts(&rt, n);
        let cc = ngram_counts(&ct, n);
        let total: usize = cc.values().sum();
        let matched: usize = cc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        log_sum += libm::log((matched + 1) as f64 / (total + 1) as f64);
    }
    let precision = libm::exp(log_sum / 4.0);
    let bp = if ct.len() >= rt.len() {
        1.0
    } else {
        libm::exp(1.0 - rt.len() as f64 / ct.len() as f64)
    };
    bp * precision
}

/// KL(p ‖ q); +∞ sentinel when p has mass where q has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut v = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi == 0.0 {
                return f64::INFINITY;
            }
            v += pi * libm::log(pi / qi);
        }
    }
    v
}

/// Total variation distance ½Σ|p−q|.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// TV(p,q) ≤ √(KL(p‖q)/2); vacuously true for infinite KL.
pub fn pinsker_check(p: &[f64], q: &[f64]) -> bool {
    let kl = kl_divergence(p, q);
    if !kl.is_finite() {
        return true;
    }
    tv_distance(p, q) <= libm::sqrt(kl / 2.0) + 1e-12
}

/// Where one layer's answer-query attention mass lands, split over the key
/// categories. The seven fields sum to 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathMasses {
    pub answer_to_trigger: f64,
    pub answer_to_perturbation: f64,
    pub trigger_to_perturbation: f64,
    pub answer_to_clean_image: f64,
    pub answer_to_text: f64,
    pub answer_to_answer: f64,
    pub answer_to_template: f64,
}

/// Per-layer routing breakdown for a clean and a protected trace of the same
/// sample. The clean side has no trigger and no perturbation by definition,
/// so its first three categories are exact zeros and its image mass is
/// reported whole.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub clean: Vec<PathMasses>,
    pub protected: Vec<PathMasses>,
}

fn trace_paths(trace: &ForwardTrace, omega_delta: &[usize]) -> Result<Vec<PathMasses>, BindingError> {
    let part = &trace.partition;
    let delta_set: Vec<usize> = omega_delta.to_vec();
    let clean_image: Vec<usize> = part
        .image
        .iter()
        .copied()
        .filter(|p| !delta_set.contains(p))
        .collect();
    let mut out = Vec::with_capacity(trace.attention.len());
    for heads in &trace.attention {
        let ans = attention_mass(heads, &part.answer)?;
        let trig_to_pert = if part.trigger.is_empty() || delta_set.is_empty() {
            0.0
        } else {
            mass_on(&attention_mass(heads, &part.trigger)?, &delta_set)
        };
        out.push(PathMasses {
            answer_to_trigger: mass_on(&ans, &part.trigger),
            answer_to_perturbation: mass_on(&ans, &delta_set),
            trigger_to_perturbation: trig_to_pert,
            answer_to_clean_image: mass_on(&ans, &clean_image),
            answer_to_text: mass_on(&ans, &part.text),
            answer_to_answer: mass_on(&ans, &part.answer),
            answer_to_template: mass_on(&ans, &part.template),
        });
    }
    Ok(out)
}

/// `omega_delta` holds the perturbation-token sequence positions of the
/// protected sample; the clean side is always scored with an empty set.
pub fn routing_report(
    clean: &ForwardTrace,
    protected: &ForwardTrace,
    omega_delta: &[usize],
) -> Result<RoutingReport, BindingError> {
    Ok(RoutingReport {
        clean: trace_paths(clean, &[])?,
        protected: trace_paths(protected, omega_delta)?,
    })
}

impl PathMasses {
    /// Answer-query categories only (the trigger→perturbation path is a
    /// different query set and not part of the decomposition).
    pub fn answer_total(&self) -> f64 {
        self.answer_to_trigger
            + self.answer_to_perturbation
            + self.answer_to_clean_image
            + self.answer_to_text
            + self.answer_to_answer
            + self.answer_to_template
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProcMode, SampleView, SurrogateModel};
    use crate::processor::PIXELS;
    use crate::rng::Stream;
    use crate::tokenizer::MiniTokenizer;

    fn rand_image(seed: u64) -> Image {
        let mut s = Stream::derive(seed, "mimg", 0);
        Image::new((0..PIXELS).map(|_| s.unit()).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite_and_uniform_noise_closed_form() {
        let a = rand_image(1);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        // A uniform |δ| of 8/255 has MSE (8/255)² → 20·log10(255/8) dB.
        let mut s = Stream::derive(2, "sign", 0);
        let shifted = Image::new(
            a.pixels()
                .iter()
                .map(|&x| {
                    let d = if x > 0.5 { -8.0 / 255.0 } else { 8.0 / 255.0 };
                    let _ = s.next_u64();
                    x + d
                })
                .collect(),
        )
        .unwrap();
        let want = 20.0 * libm::log10(255.0 / 8.0);
        assert!((psnr(&a, &shifted) - want).abs() < 1e-9);
        assert!((psnr(&shifted, &a) - want).abs() < 1e-12, "psnr is symmetric");
    }

    #[test]
    fn ssim_identity_constants_and_inversion() {
        let a = rand_image(3);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
        let c1 = Image::new(vec![0.4; PIXELS]).unwrap();
        let c2 = Image::new(vec![0.4; PIXELS]).unwrap();
        assert!((ssim(&c1, &c2) - 1.0).abs() < 1e-12);
        // Mid-contrast image against its negative scores poorly.
        let mut s = Stream::derive(4, "mc", 0);
        let mid = Image::new((0..PIXELS).map(|_| s.uniform(0.25, 0.75)).collect()).unwrap();
        let inv = Image::new(mid.pixels().iter().map(|&x| 1.0 - x).collect()).unwrap();
        let v = ssim(&mid, &inv);
        assert!(v < 0.5, "inverted image must score low, got {v}");
        assert!((ssim(&inv, &mid) - v).abs() < 1e-12, "ssim is symmetric");
    }

    #[test]
    fn edit_distance_hand_cases() {
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("abc", "abcd"), 1);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "xyz"), 3);
        assert_eq!(edit_distance("xyz", ""), 3);
        assert_eq!(
            edit_distance("what color", "what color here"),
            edit_distance("what color here", "what color"),
        );
    }

    #[test]
    fn bleu_identity_and_asymmetry() {
        assert_eq!(bleu("what color is this", "what color is this"), 1.0);
        assert_eq!(bleu("", ""), 1.0);
        // Appending tokens: candidate longer than reference → no brevity
        // penalty but diluted precision.
        let b1 = bleu("what color is this", "what color is this extra junk");
        assert!(b1 < 1.0 && b1 > 0.0);
        // Reference-directedness: swapping arguments changes the value.
        let b2 = bleu("what color is this extra junk", "what color is this");
        assert!((b1 - b2).abs() > 1e-6, "bleu must be direction-sensitive");
        // Fully disjoint two-token strings: p1=1/3, p2=1/2, p3=p4=1 under
        // add-one smoothing → ((1/3)(1/2))^(1/4).
        let want = libm::pow(1.0 / 6.0, 0.25);
        assert!((bleu("abc def", "zzz qqq") - want).abs() < 1e-12);
    }

    #[test]
    fn kl_tv_pinsker_hand_cases() {
        let p = [1.0, 0.0];
        let q = [0.5, 0.5];
        assert!((kl_divergence(&p, &q) - libm::log(2.0)).abs() < 1e-12);
        assert!((tv_distance(&p, &q) - 0.5).abs() < 1e-12);
        assert!(pinsker_check(&p, &q));
        assert_eq!(kl_divergence(&q, &p), f64::INFINITY);
        assert!(pinsker_check(&q, &p), "infinite KL is vacuous");
        let r = [0.0, 1.0];
        assert!((tv_distance(&p, &r) - 1.0).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert_eq!(tv_distance(&p, &p), 0.0);
    }

    #[test]
    fn pinsker_holds_on_random_simplex_pairs() {
        let mut s = Stream::derive(9, "simplex", 0);
        for _ in 0..200 {
            let n = 2 + s.below(12);
            let draw = |s: &mut Stream| -> Vec<f64> {
                let mut v: Vec<f64> = (0..n).map(|_| s.unit() + 1e-9).collect();
                let sum: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= sum);
                v
            };
            let p = draw(&mut s);
            let q = draw(&mut s);
            assert!(pinsker_check(&p, &q));
            assert!(pinsker_check(&q, &p));
        }
    }

    #[test]
    fn routing_report_categories_partition_the_mass() {
        let lines = [
            "what color is the circle",
            "what shape is shown here",
            "red green blue yellow",
        ];
        let corpus: Vec<&str> = lines.iter().cycle().take(30).cloned().collect();
        let tok = MiniTokenizer::train(&corpus, 120).unwrap();
        let model = SurrogateModel::new(44, tok.vocab_size());
        let img = rand_image(5);
        let text = tok.encode("what color is the circle").unwrap();
        let ans = tok.encode("red").unwrap();
        let clean = model
            .trace(&SampleView { image: &img, text_ids: &text, trigger_span: None, answer_ids: &ans })
            .unwrap();
        let mut ptext = text.clone();
        let trig = tok.encode(" here").unwrap();
        let span = (ptext.len(), ptext.len() + trig.len());
        ptext.extend(&trig);
        let protected = model
            .forward(
                &SampleView {
                    image: &img,
                    text_ids: &ptext,
                    trigger_span: Some(span),
                    answer_ids: &ans,
                },
                ProcMode::Deploy,
            )
            .unwrap()
            .trace;
        let omega: Vec<usize> = (1..17).collect();
        let rep = routing_report(&clean, &protected, &omega).unwrap();
        for layer in &rep.clean {
            assert_eq!(layer.answer_to_trigger, 0.0);
            assert_eq!(layer.answer_to_perturbation, 0.0);
            assert_eq!(layer.trigger_to_perturbation, 0.0);
            assert!((layer.answer_total() - 1.0).abs() < 1e-6);
        }
        for layer in &rep.protected {
            assert!((layer.answer_total() - 1.0).abs() < 1e-6);
            assert!(layer.answer_to_trigger >= 0.0);
            assert!(layer.answer_to_perturbation >= 0.0);
        }
    }
}
