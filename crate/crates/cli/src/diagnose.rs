//! Stealth, routing, and divergence diagnostics comparing a protection run
//! against the clean split it came from. Outputs one JSON report plus CSVs
//! for plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use unlearn_core::attack::TrainSample;
use unlearn_core::binding::select_perturbation_patches;
use unlearn_core::binding::patch_positions;
use unlearn_core::metrics::{bleu, edit_distance, psnr, routing_report, ssim, PathMasses};
use unlearn_core::model::SampleView;
use unlearn_core::tokenizer::MiniTokenizer;
use unlearn_core::verify::{end_to_end_tv_check, VerifyError};

use crate::config::RunConfig;
use crate::dataset::{self, canonical_tokenizer, claim_out_dir};
use crate::protect_run::{self, require_tokenizer_match, ProtectedSample};

/// PSNR of identical images is infinite; JSON has no literal for that, so
/// infinities round-trip as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaybeInf(pub f64);

impl Serialize for MaybeInf {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for MaybeInf {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MaybeInf(v)),
            Raw::Str(s) if s == "inf" => Ok(MaybeInf(f64::INFINITY)),
            Raw::Str(s) => Err(D::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TvJson {
    pub eta: f64,
    pub mean_tv: f64,
    pub bound: f64,
    pub clean_mass_on_r: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingJson {
    /// Mean over the scored layers of the protected trace.
    pub answer_to_trigger: f64,
    pub answer_to_perturbation: f64,
    pub trigger_to_perturbation: f64,
    /// Same mean on the clean trace (its trigger/perturbation masses are
    /// zero by definition, so only the image share is informative).
    pub clean_answer_to_image: f64,
    pub protected_answer_to_clean_image: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleDiag {
    pub id: u64,
    pub psnr: MaybeInf,
    pub ssim: f64,
    pub edit_distance: usize,
    pub bleu: f64,
    pub final_loss: f64,
    pub trigger_len: usize,
    pub tv: Option<TvJson>,
    pub routing: RoutingJson,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub kind: String,
    pub n: usize,
    /// Mean over samples with a finite PSNR; `psnr_inf` counts the rest.
    pub psnr_mean: f64,
    pub psnr_inf: usize,
    pub psnr_min: MaybeInf,
    pub ssim_mean: f64,
    pub ssim_min: f64,
    pub edit_distance_mean: f64,
    pub bleu_mean: f64,
    pub tv_checked: usize,
    pub tv_holds_all: bool,
    pub mean_final_loss: f64,
    pub config_sha256: String,
    pub per_sample: Vec<SampleDiag>,
}

fn layer_mean(rows: &[PathMasses], f: impl Fn(&PathMasses) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(&f).sum::<f64>() / rows.len() as f64
}

fn diagnose_sample(
    tok: &MiniTokenizer,
    model: &unlearn_core::model::SurrogateModel,
    cfg: &RunConfig,
    clean: &TrainSample,
    prot: &ProtectedSample,
) -> Result<SampleDiag> {
    if !prot.row.text.starts_with(&clean.text) {
        bail!("sample {}: released text does not extend the clean question", prot.row.id);
    }
    let q_ids = tok.encode(&clean.text).map_err(|e| anyhow::anyhow!("{e}"))?;
    let p_ids = tok.encode(&prot.row.text).map_err(|e| anyhow::anyhow!("{e}"))?;
    let a_ids = tok.encode(&prot.row.answer).map_err(|e| anyhow::anyhow!("{e}"))?;
    if p_ids[..q_ids.len().min(p_ids.len())] != q_ids[..] {
        bail!("sample {}: question tokens are not a prefix of the released text", prot.row.id);
    }
    let clean_view = SampleView {
        image: &clean.image,
        text_ids: &q_ids,
        trigger_span: None,
        answer_ids: &a_ids,
    };
    let span = (q_ids.len(), p_ids.len());
    let protected_view = SampleView {
        image: &prot.image,
        text_ids: &p_ids,
        trigger_span: (span.0 < span.1).then_some(span),
        answer_ids: &a_ids,
    };

    let layers = &cfg.protect.layers;
    let tv = match end_to_end_tv_check(model, &clean_view, &protected_view, layers) {
        Ok(r) => Some(TvJson {
            eta: r.eta,
            mean_tv: r.mean_tv,
            bound: r.bound,
            clean_mass_on_r: r.clean_mass_on_r,
            holds: r.holds,
        }),
        Err(VerifyError::NoTrigger) => None,
        Err(e) => bail!("sample {}: {e}", prot.row.id),
    };

    let clean_trace = model.trace(&clean_view).map_err(|e| anyhow::anyhow!("{e}"))?;
    let prot_trace = model.trace(&protected_view).map_err(|e| anyhow::anyhow!("{e}"))?;
    let omega = patch_positions(&select_perturbation_patches(&prot.delta, cfg.protect.tau_delta));
    let routing =
        routing_report(&clean_trace, &prot_trace, &omega).map_err(|e| anyhow::anyhow!("{e}"))?;
    let scored: Vec<PathMasses> =
        layers.iter().filter_map(|&l| routing.protected.get(l).cloned()).collect();
    let scored_clean: Vec<PathMasses> =
        layers.iter().filter_map(|&l| routing.clean.get(l).cloned()).collect();

    Ok(SampleDiag {
        id: prot.row.id,
        psnr: MaybeInf(psnr(&clean.image, &prot.image)),
        ssim: ssim(&clean.image, &prot.image),
        edit_distance: edit_distance(&clean.text, &prot.row.text),
        bleu: bleu(&clean.text, &prot.row.text),
        final_loss: prot.row.final_loss,
        trigger_len: prot.row.trigger.len(),
        tv,
        routing: RoutingJson {
            answer_to_trigger: layer_mean(&scored, |m| m.answer_to_trigger),
            answer_to_perturbation: layer_mean(&scored, |m| m.answer_to_perturbation),
            trigger_to_perturbation: layer_mean(&scored, |m| m.trigger_to_perturbation),
            clean_answer_to_image: layer_mean(&scored_clean, |m| m.answer_to_clean_image),
            protected_answer_to_clean_image: layer_mean(&scored, |m| m.answer_to_clean_image),
        },
    })
}

pub fn run(
    cfg: &RunConfig,
    clean_dir: &Path,
    protected_dir: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<DiagnoseReport> {
    let tok = canonical_tokenizer();
    let clean = dataset::load_dataset(clean_dir)?;
    require_tokenizer_match(&tok, &clean.header.tokenizer_sha256, "clean data")?;
    let (header, protected) = protect_run::load_protected(protected_dir)?;
    require_tokenizer_match(&tok, &header.tokenizer_sha256, "protected data")?;
    let by_id: BTreeMap<u64, &TrainSample> =
        clean.samples.iter().map(|s| (s.id, s)).collect();
    let model = unlearn_core::model::SurrogateModel::new(
        *header.surrogate_seeds.first().context("no surrogate seeds recorded")?,
        tok.vocab_size(),
    );

    let mut per_sample = Vec::new();
    for prot in &protected {
        let clean_sample = by_id
            .get(&prot.row.id)
            .with_context(|| format!("protected id {} missing from clean split", prot.row.id))?;
        per_sample.push(diagnose_sample(&tok, &model, cfg, clean_sample, prot)?);
    }
    if per_sample.is_empty() {
        bail!("no protected samples to diagnose");
    }

    let n = per_sample.len();
    let finite: Vec<f64> =
        per_sample.iter().map(|s| s.psnr.0).filter(|v| v.is_finite()).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let report = DiagnoseReport {
        kind: "diagnose-report".into(),
        n,
        psnr_mean: mean(&finite),
        psnr_inf: n - finite.len(),
        psnr_min: MaybeInf(per_sample.iter().map(|s| s.psnr.0).fold(f64::INFINITY, f64::min)),
        ssim_mean: mean(&per_sample.iter().map(|s| s.ssim).collect::<Vec<_>>()),
        ssim_min: per_sample.iter().map(|s| s.ssim).fold(f64::INFINITY, f64::min),
        edit_distance_mean: per_sample.iter().map(|s| s.edit_distance as f64).sum::<f64>()
            / n as f64,
        bleu_mean: mean(&per_sample.iter().map(|s| s.bleu).collect::<Vec<_>>()),
        tv_checked: per_sample.iter().filter(|s| s.tv.is_some()).count(),
        tv_holds_all: per_sample.iter().all(|s| s.tv.as_ref().is_none_or(|t| t.holds)),
        mean_final_loss: mean(&per_sample.iter().map(|s| s.final_loss).collect::<Vec<_>>()),
        config_sha256: cfg.hash(),
        per_sample,
    };

    claim_out_dir(out_dir, force)?;
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(out_dir.join("report.json"), bytes)?;
    write_csvs(&report, &protected, out_dir)?;
    Ok(report)
}

fn write_csvs(report: &DiagnoseReport, protected: &[ProtectedSample], dir: &Path) -> Result<()> {
    let mut stealth = String::from("id,psnr,ssim,edit_distance,bleu,trigger_len,final_loss\n");
    for s in &report.per_sample {
        let p = if s.psnr.0.is_finite() { format!("{}", s.psnr.0) } else { "inf".into() };
        writeln!(
            stealth,
            "{},{},{},{},{},{},{}",
            s.id, p, s.ssim, s.edit_distance, s.bleu, s.trigger_len, s.final_loss
        )?;
    }
    fs::write(dir.join("stealth.csv"), stealth)?;

    let mut routing = String::from(
        "id,answer_to_trigger,answer_to_perturbation,trigger_to_perturbation,\
         clean_answer_to_image,protected_answer_to_clean_image\n",
    );
    for s in &report.per_sample {
        let r = &s.routing;
        writeln!(
            routing,
            "{},{},{},{},{},{}",
            s.id,
            r.answer_to_trigger,
            r.answer_to_perturbation,
            r.trigger_to_perturbation,
            r.clean_answer_to_image,
            r.protected_answer_to_clean_image
        )?;
    }
    fs::write(dir.join("routing.csv"), routing)?;

    let mut curves = String::from("id,round,after_pgd,after_sweep\n");
    for p in protected {
        for r in &p.row.rounds {
            writeln!(curves, "{},{},{},{}", p.row.id, r.round, r.after_pgd, r.after_sweep)?;
        }
    }
    fs::write(dir.join("loss_curves.csv"), curves)?;
    Ok(())
}
