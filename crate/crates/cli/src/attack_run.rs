//! The attacker pipeline: assemble a training set (protected, clean, or a
//! seeded mixture), optionally transform it, fine-tune a fresh surrogate,
//! and score it on the held-out evaluation split.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use unlearn_core::attack::{apply_transforms, evaluate_accuracy, finetune, mix, TrainSample};
use unlearn_core::model::SurrogateModel;

use crate::config::RunConfig;
use crate::dataset::{self, canonical_tokenizer};
use crate::protect_run::{self, require_tokenizer_match};

/// A training split plus where it came from.
pub struct TrainSource {
    pub samples: Vec<TrainSample>,
    pub kind: String,
    pub tokenizer_sha256: String,
}

/// Load either a generated clean split or a protection-run directory,
/// sniffed from the header record.
pub fn load_train_samples(dir: &Path) -> Result<TrainSource> {
    let path = dir.join("manifest.jsonl");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let head: serde_json::Value = serde_json::from_str(
        text.lines().next().with_context(|| format!("{} is empty", path.display()))?,
    )?;
    if head.get("surrogate_seeds").is_some() {
        let (header, rows) = protect_run::load_protected(dir)?;
        let samples = rows
            .into_iter()
            .map(|r| TrainSample {
                id: r.row.id,
                image: r.image,
                text: r.row.text,
                answer: r.row.answer,
            })
            .collect();
        Ok(TrainSource {
            samples,
            kind: "protected".into(),
            tokenizer_sha256: header.tokenizer_sha256,
        })
    } else {
        let data = dataset::load_dataset(dir)?;
        Ok(TrainSource {
            samples: data.samples,
            kind: "clean".into(),
            tokenizer_sha256: data.header.tokenizer_sha256,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: String,
    pub train_source: String,
    pub n_train: usize,
    pub n_eval: usize,
    pub recipe: String,
    pub transforms: Vec<String>,
    pub mix_ratio: f64,
    pub model_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub wall_secs: f64,
    pub config_sha256: String,
    pub loss_curve: Vec<f64>,
}

pub fn write_report(report: &AttackReport, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Mean step loss over the final epoch — steadier than the last batch alone.
fn final_epoch_mean(curve: &[f64], epochs: usize) -> f64 {
    if curve.is_empty() || epochs == 0 {
        return 0.0;
    }
    let per_epoch = curve.len() / epochs;
    let tail = &curve[curve.len() - per_epoch..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

pub fn run(
    cfg: &RunConfig,
    train_dir: &Path,
    clean_dir: Option<&Path>,
    eval_dir: &Path,
    report_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
) -> Result<AttackReport> {
    let started = Instant::now();
    let tok = canonical_tokenizer();
    let source = load_train_samples(train_dir)?;
    require_tokenizer_match(&tok, &source.tokenizer_sha256, "training data")?;
    let eval = dataset::load_dataset(eval_dir)?;
    require_tokenizer_match(&tok, &eval.header.tokenizer_sha256, "eval data")?;

    let mut train = source.samples;
    let mix_ratio = cfg.attack.mix_ratio;
    if mix_ratio < 1.0 {
        let clean_dir = clean_dir
            .with_context(|| format!("mix_ratio {mix_ratio} < 1 needs a clean split to mix in"))?;
        let clean = dataset::load_dataset(clean_dir)?;
        require_tokenizer_match(&tok, &clean.header.tokenizer_sha256, "mix-in data")?;
        train = mix(&train, &clean.samples, mix_ratio, cfg.attack.seed)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    let spec = cfg.transform_spec()?;
    let train: Vec<TrainSample> = train.iter().map(|s| apply_transforms(s, &spec)).collect();

    let recipe = cfg.recipe()?;
    let model_seed = cfg.attacker_model_seed();
    let model = SurrogateModel::new(model_seed, tok.vocab_size());
    let (tuned, curve) =
        finetune(&model, &tok, &train, &recipe).map_err(|e| anyhow::anyhow!("{e}"))?;
    let accuracy =
        evaluate_accuracy(&tuned, &tok, &eval.samples).map_err(|e| anyhow::anyhow!("{e}"))?;

    let report = AttackReport {
        kind: "attack-report".into(),
        train_source: source.kind,
        n_train: train.len(),
        n_eval: eval.samples.len(),
        recipe: cfg.attack.recipe.clone(),
        transforms: cfg.attack.transforms.clone(),
        mix_ratio,
        model_seed,
        epochs: recipe.epochs,
        batch_size: recipe.batch_size,
        lr: recipe.lr,
        steps: curve.len(),
        final_loss: final_epoch_mean(&curve, recipe.epochs),
        accuracy,
        wall_secs: started.elapsed().as_secs_f64(),
        config_sha256: cfg.hash(),
        loss_curve: curve,
    };
    if let Some(path) = report_path {
        write_report(&report, path)?;
    }
    if let Some(path) = checkpoint_path {
        crate::checkpoint::save(&tuned, path)?;
    }
    Ok(report)
}

/// Score a saved checkpoint on an evaluation split.
pub fn evaluate_checkpoint(ckpt: &Path, eval_dir: &Path) -> Result<f64> {
    let tok = canonical_tokenizer();
    let eval = dataset::load_dataset(eval_dir)?;
    require_tokenizer_match(&tok, &eval.header.tokenizer_sha256, "eval data")?;
    let model = crate::checkpoint::load(ckpt)?;
    if model.vocab() != tok.vocab_size() {
        bail!("checkpoint vocabulary {} does not match tokenizer {}", model.vocab(), tok.vocab_size());
    }
    evaluate_accuracy(&model, &tok, &eval.samples).map_err(|e| anyhow::anyhow!("{e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_toy_data;

    #[test]
    fn clean_attack_runs_and_reports() {
        let data = tempfile::tempdir().unwrap();
        gen_toy_data(8, 4, 21, data.path(), true).unwrap();
        let mut cfg = RunConfig::default();
        cfg.attack.epochs = 2;
        cfg.attack.batch_size = 4;
        let out = tempfile::tempdir().unwrap();
        let report_path = out.path().join("report.json");
        let ckpt_path = out.path().join("attacker.ckpt");
        let report = run(
            &cfg,
            &data.path().join("train"),
            None,
            &data.path().join("eval"),
            Some(&report_path),
            Some(&ckpt_path),
        )
        .unwrap();
        assert_eq!(report.train_source, "clean");
        assert_eq!(report.steps, 2 * 2, "8 samples in batches of 4 over 2 epochs");
        assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
        let parsed: AttackReport =
            serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
        assert_eq!(parsed.loss_curve.len(), report.steps);
        let acc = evaluate_checkpoint(&ckpt_path, &data.path().join("eval")).unwrap();
        assert!((acc - report.accuracy).abs() < 1e-12, "checkpoint drifts from live model");
    }

    #[test]
    fn mix_needs_clean_dir() {
        let data = tempfile::tempdir().unwrap();
        gen_toy_data(4, 2, 3, data.path(), true).unwrap();
        let mut cfg = RunConfig::default();
        cfg.attack.mix_ratio = 0.5;
        let err = run(&cfg, &data.path().join("train"), None, &data.path().join("eval"), None, None)
            .unwrap_err();
        assert!(err.to_string().contains("clean split"));
    }
}
