//! The protection pipeline: read a clean split, optimize every sample
//! against the surrogate ensemble, and write released images, perturbation
//! sidecars, and a manifest that makes each recorded loss reproducible.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use unlearn_core::model::SurrogateModel;
use unlearn_core::perturb::Delta;
use unlearn_core::processor::Image;
use unlearn_core::protect::{protect_sample, ProtectOutcome, SampleInputs};
use unlearn_core::tokenizer::MiniTokenizer;
use unlearn_core::trigger::AdmissibleVocab;

use crate::config::RunConfig;
use crate::dataset::{
    self, canonical_tokenizer, claim_out_dir, image_to_png_bytes, read_png, tokenizer_hash,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtectHeader {
    pub kind: String,
    pub n: usize,
    pub master_seed: u64,
    pub surrogate_seeds: Vec<u64>,
    pub variant: String,
    pub bind: String,
    pub config_sha256: String,
    pub tokenizer_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundJson {
    pub round: usize,
    pub after_pgd: f64,
    pub after_sweep: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtectRow {
    pub id: u64,
    pub image: String,
    pub delta: String,
    pub text: String,
    pub answer: String,
    pub trigger: Vec<u32>,
    pub final_loss: f64,
    pub rounds: Vec<RoundJson>,
    pub feasibility_checks: usize,
    pub feasibility_violations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtectSummary {
    pub n: usize,
    pub wall_secs: f64,
    pub mean_final_loss: f64,
    pub feasibility_checks: usize,
    pub feasibility_violations: usize,
}

pub fn surrogates(cfg: &RunConfig, vocab: usize) -> Vec<SurrogateModel> {
    cfg.surrogate_seeds.iter().map(|&s| SurrogateModel::new(s, vocab)).collect()
}

/// Check that a manifest was generated against the tokenizer this build
/// constructs; everything downstream assumes the same token ids.
pub fn require_tokenizer_match(tok: &MiniTokenizer, recorded: &str, what: &str) -> Result<()> {
    let here = tokenizer_hash(tok);
    if here != recorded {
        bail!("{what} was built with tokenizer {recorded}, this build has {here}");
    }
    Ok(())
}

pub fn run(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    workers: usize,
    force: bool,
) -> Result<ProtectSummary> {
    let started = Instant::now();
    let data = dataset::load_dataset(data_dir)?;
    let tok = canonical_tokenizer();
    require_tokenizer_match(&tok, &data.header.tokenizer_sha256, "dataset")?;
    let models = surrogates(cfg, tok.vocab_size());
    let pcfg = cfg.protection_config()?;
    pcfg.validate(models.len()).map_err(|e| anyhow::anyhow!("{e}"))?;
    let adm = AdmissibleVocab::from_tokenizer(&tok);

    claim_out_dir(out_dir, force)?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("delta"))?;
    cfg.write_echo(out_dir)?;

    // Workers race over a shared cursor; results land in id-indexed slots,
    // so the files written below never depend on scheduling.
    let n = data.samples.len();
    let slots: Mutex<Vec<Option<ProtectOutcome>>> = Mutex::new((0..n).map(|_| None).collect());
    let cursor = Mutex::new(0usize);
    let workers = workers.clamp(1, n.max(1));
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| -> Result<(), unlearn_core::protect::ProtectError> {
                loop {
                    let i = {
                        let mut c = cursor.lock().unwrap();
                        let i = *c;
                        *c += 1;
                        i
                    };
                    if i >= n {
                        return Ok(());
                    }
                    let s = &data.samples[i];
                    let inputs = SampleInputs {
                        id: s.id,
                        image: &s.image,
                        question: &s.text,
                        answer: &s.answer,
                    };
                    let out = protect_sample(&models, &tok, &adm, &inputs, &pcfg)?;
                    slots.lock().unwrap()[i] = Some(out);
                }
            }));
        }
        for h in handles {
            h.join().expect("protection worker panicked")?;
        }
        Ok(())
    })?;

    let outcomes: Vec<ProtectOutcome> =
        slots.into_inner().unwrap().into_iter().map(|o| o.expect("slot filled")).collect();

    let header = ProtectHeader {
        kind: "header".into(),
        n,
        master_seed: pcfg.master_seed,
        surrogate_seeds: cfg.surrogate_seeds.clone(),
        variant: cfg.protect.variant.clone(),
        bind: cfg.protect.bind.clone(),
        config_sha256: cfg.hash(),
        tokenizer_sha256: data.header.tokenizer_sha256.clone(),
    };
    let mut manifest = serde_json::to_string(&header)?;
    manifest.push('\n');
    let mut loss_sum = 0.0;
    let mut checks = 0usize;
    let mut violations = 0usize;
    for out in &outcomes {
        let image_rel = format!("images/{:06}.png", out.id);
        let delta_rel = format!("delta/{:06}.bin", out.id);
        let png = image::RgbImage::from_raw(32, 32, image_to_png_bytes(&out.released_image))
            .expect("raw buffer sized");
        png.save(out_dir.join(&image_rel))?;
        let sidecar: Vec<u8> =
            out.delta.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(out_dir.join(&delta_rel), sidecar)?;
        let row = ProtectRow {
            id: out.id,
            image: image_rel,
            delta: delta_rel,
            text: out.released_text.clone(),
            answer: out.answer.clone(),
            trigger: out.trigger.ids.clone(),
            final_loss: out.final_loss,
            rounds: out
                .rounds
                .iter()
                .map(|r| RoundJson {
                    round: r.round,
                    after_pgd: r.after_pgd,
                    after_sweep: r.after_sweep,
                })
                .collect(),
            feasibility_checks: out.feasibility.checks,
            feasibility_violations: out.feasibility.violations,
        };
        manifest.push_str(&serde_json::to_string(&row)?);
        manifest.push('\n');
        loss_sum += out.final_loss;
        checks += out.feasibility.checks;
        violations += out.feasibility.violations;
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest)?;

    let summary = ProtectSummary {
        n,
        wall_secs: started.elapsed().as_secs_f64(),
        mean_final_loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
        feasibility_checks: checks,
        feasibility_violations: violations,
    };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    fs::write(out_dir.join("summary.json"), bytes)?;
    Ok(summary)
}

/// One protected sample loaded back from disk.
#[derive(Clone, Debug)]
pub struct ProtectedSample {
    pub row: ProtectRow,
    pub image: Image,
    pub delta: Delta,
}

pub fn load_protected(dir: &Path) -> Result<(ProtectHeader, Vec<ProtectedSample>)> {
    let path = dir.join("manifest.jsonl");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: ProtectHeader = serde_json::from_str(
        lines.next().with_context(|| format!("{} is empty", path.display()))?,
    )?;
    if header.kind != "header" {
        bail!("{} does not start with a header record", path.display());
    }
    let mut samples = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: ProtectRow = serde_json::from_str(line)?;
        let image = read_png(&dir.join(&row.image))?;
        let raw = fs::read(dir.join(&row.delta))
            .with_context(|| format!("reading {}", row.delta))?;
        if raw.len() % 4 != 0 {
            bail!("{}: not an f32 stream", row.delta);
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        samples.push(ProtectedSample { row, image, delta: Delta::from_vec(data) });
    }
    if samples.len() != header.n {
        bail!("{}: header says {} rows, found {}", path.display(), header.n, samples.len());
    }
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_toy_data;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.protect.rounds = 1;
        cfg.protect.pgd_iters = 1;
        cfg.protect.inner_steps = 1;
        cfg.protect.eps_t = 1;
        cfg.protect.top_k = 4;
        cfg.surrogate_seeds = vec![101];
        cfg.protect.omega = vec![1.0];
        cfg
    }

    #[test]
    fn protect_run_is_reproducible_and_loadable() {
        let data = tempfile::tempdir().unwrap();
        gen_toy_data(3, 2, 11, data.path(), true).unwrap();
        let cfg = tiny_cfg();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let s1 = run(&cfg, &data.path().join("train"), out1.path(), 1, true).unwrap();
        let s2 = run(&cfg, &data.path().join("train"), out2.path(), 2, true).unwrap();
        assert_eq!(s1.n, 3);
        assert_eq!(s1.feasibility_violations, 0);
        assert_eq!(s1.mean_final_loss, s2.mean_final_loss, "worker count changed results");
        for rel in ["manifest.jsonl", "images/000001.png", "delta/000002.bin"] {
            assert_eq!(
                fs::read(out1.path().join(rel)).unwrap(),
                fs::read(out2.path().join(rel)).unwrap(),
                "{rel} differs across worker counts"
            );
        }
        let (header, rows) = load_protected(out1.path()).unwrap();
        assert_eq!(header.n, 3);
        assert_eq!(rows.len(), 3);
        // The released loss is recomputable from the files alone.
        let tok = canonical_tokenizer();
        let models = surrogates(&cfg, tok.vocab_size());
        let pcfg = cfg.protection_config().unwrap();
        let clean = dataset::load_dataset(&data.path().join("train")).unwrap();
        let r = &rows[0];
        let inputs = SampleInputs {
            id: r.row.id,
            image: &clean.samples[0].image,
            question: &clean.samples[0].text,
            answer: &r.row.answer,
        };
        let again = unlearn_core::protect::recompute_final_loss(
            &models, &tok, &inputs, &r.image, &r.row.text, &r.delta, &pcfg,
        )
        .unwrap();
        assert!((again - r.row.final_loss).abs() <= 1e-5, "{again} vs {}", r.row.final_loss);
    }
}
