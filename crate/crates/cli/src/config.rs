//! Run configuration: one JSON document covering dataset generation, the
//! protection optimizer, and the attacker. Unknown keys are rejected, missing
//! keys take documented defaults, and every pipeline output embeds the fully
//! resolved document plus its hash so a run can be reproduced from its own
//! artifacts.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::attack::{FinetuneRecipe, ImageOp, RecipeKind, TextOp, TransformSpec};
use unlearn_core::binding::{BindingWeights, Variant};
use unlearn_core::protect::{BindKind, InitMode, ProtectionConfig};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    /// One surrogate per entry; the protection ensemble weights must match.
    pub surrogate_seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub protect: ProtectSection,
    pub attack: AttackSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 7,
            surrogate_seeds: vec![101, 202],
            dataset: DatasetSection::default(),
            protect: ProtectSection::default(),
            attack: AttackSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n_train: 256, n_eval: 128, seed: 11 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectSection {
    pub eps_x: f64,
    pub eps_t: usize,
    pub alpha_x: f64,
    pub rounds: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub inner_lora_rank: Option<usize>,
    pub pgd_iters: usize,
    pub top_k: usize,
    pub beta: [f64; 3],
    pub lambda_train: f64,
    pub lambda_bind: f64,
    /// Zero-based attention-layer indices the binding losses average over.
    pub layers: Vec<usize>,
    pub tau_delta: f64,
    pub kl_floor: f64,
    pub bind: String,
    pub variant: String,
    pub init: String,
    pub omega: Vec<f64>,
}

impl Default for ProtectSection {
    fn default() -> Self {
        let w = BindingWeights::default();
        ProtectSection {
            eps_x: 8.0 / 255.0,
            eps_t: 5,
            alpha_x: 1.0 / 255.0,
            rounds: 5,
            inner_steps: 1,
            inner_lr: 1e-2,
            inner_lora_rank: None,
            pgd_iters: 2,
            top_k: 16,
            beta: w.beta,
            lambda_train: w.lambda_train,
            lambda_bind: w.lambda_bind,
            layers: w.layers,
            tau_delta: w.tau_delta,
            kl_floor: w.kl_floor,
            bind: "bph".into(),
            variant: "minmin".into(),
            init: "random".into(),
            omega: vec![0.5, 0.5],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub recipe: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mix_ratio: f64,
    pub transforms: Vec<String>,
    /// Attacker's model seed; defaults to the first surrogate (white-box).
    pub model_seed: Option<u64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            recipe: "full".into(),
            epochs: 80,
            lr: 0.2,
            batch_size: 16,
            seed: 5,
            mix_ratio: 1.0,
            transforms: vec![],
            model_seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.surrogate_seeds.is_empty() {
            bail!("at least one surrogate seed is required");
        }
        if self.surrogate_seeds.len() != self.protect.omega.len() {
            bail!(
                "{} surrogate seeds but {} ensemble weights",
                self.surrogate_seeds.len(),
                self.protect.omega.len()
            );
        }
        if self.dataset.n_train == 0 || self.dataset.n_eval == 0 {
            bail!("dataset sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.attack.mix_ratio) {
            bail!("mix_ratio must be in [0,1], got {}", self.attack.mix_ratio);
        }
        self.protection_config()?;
        self.recipe()?;
        self.transform_spec()?;
        Ok(())
    }

    pub fn protection_config(&self) -> Result<ProtectionConfig> {
        let p = &self.protect;
        let bind = match p.bind.as_str() {
            "bph" => BindKind::Bph,
            "crs" => BindKind::Crs,
            other => bail!("unknown binding objective {other:?} (expected \"bph\" or \"crs\")"),
        };
        let variant = match p.variant.as_str() {
            "minmin" => Variant::MinMin,
            "max" => Variant::Max,
            other => bail!("unknown variant {other:?} (expected \"minmin\" or \"max\")"),
        };
        let init = match p.init.as_str() {
            "random" => InitMode::Random,
            "zero" => InitMode::Zero,
            other => bail!("unknown init mode {other:?} (expected \"random\" or \"zero\")"),
        };
        let cfg = ProtectionConfig {
            eps_x: p.eps_x,
            eps_t: p.eps_t,
            alpha_x: p.alpha_x,
            rounds: p.rounds,
            inner_steps: p.inner_steps,
            inner_lr: p.inner_lr,
            inner_lora_rank: p.inner_lora_rank,
            pgd_iters: p.pgd_iters,
            top_k: p.top_k,
            weights: BindingWeights {
                beta: p.beta,
                lambda_train: p.lambda_train,
                lambda_bind: p.lambda_bind,
                layers: p.layers.clone(),
                tau_delta: p.tau_delta,
                kl_floor: p.kl_floor,
            },
            bind,
            variant,
            omega: p.omega.clone(),
            init,
            master_seed: self.master_seed,
        };
        cfg.validate(self.surrogate_seeds.len())
            .map_err(|e| anyhow::anyhow!("protection config: {e}"))?;
        Ok(cfg)
    }

    pub fn recipe(&self) -> Result<FinetuneRecipe> {
        let a = &self.attack;
        let kind = match a.recipe.as_str() {
            "full" => RecipeKind::Full,
            "projector-only" => RecipeKind::ProjectorOnly,
            "low-rank-2" => RecipeKind::LowRank(2),
            "low-rank-4" => RecipeKind::LowRank(4),
            "low-rank-8" => RecipeKind::LowRank(8),
            other => bail!(
                "unknown recipe {other:?} (expected full, projector-only, or low-rank-{{2,4,8}})"
            ),
        };
        Ok(FinetuneRecipe {
            kind,
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            seed: a.seed,
        })
    }

    pub fn transform_spec(&self) -> Result<TransformSpec> {
        let mut spec = TransformSpec::default();
        for name in &self.attack.transforms {
            match name.as_str() {
                "quantize4" => spec.image.push(ImageOp::Quantize4),
                "blur3" => spec.image.push(ImageOp::Blur3),
                "croppad2" => spec.image.push(ImageOp::CropPad2),
                "punct" => spec.text.push(TextOp::Punct),
                "case" => spec.text.push(TextOp::Case),
                "whitespace" => spec.text.push(TextOp::Whitespace),
                other => bail!("unknown transform {other:?}"),
            }
        }
        Ok(spec)
    }

    pub fn attacker_model_seed(&self) -> u64 {
        self.attack.model_seed.unwrap_or(self.surrogate_seeds[0])
    }

    /// Hash of the fully resolved document; stable across reruns because
    /// struct serialization order is fixed.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(dir.join("config.json"), text + "\n")
            .with_context(|| format!("writing config echo into {}", dir.display()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
