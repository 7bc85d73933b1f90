//! Model checkpoints: a one-line JSON header followed by a little-endian
//! f32 blob holding the base parameters and, when present, the low-rank
//! adapter factors in layer order.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use unlearn_core::model::SurrogateModel;

const MAGIC: &str = "unlearn-ckpt";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    seed: u64,
    vocab: usize,
    params: Vec<(String, usize, usize, bool)>,
    lora_rank: Option<usize>,
    blob_f32: usize,
}

fn lora_values(model: &SurrogateModel) -> Vec<f32> {
    model
        .lora()
        .map(|l| l.mats.iter().flat_map(|m| m.data.iter().map(|&v| v as f32)).collect())
        .unwrap_or_default()
}

pub fn save(model: &SurrogateModel, path: &Path) -> Result<()> {
    let mut blob = model.flat_f32();
    blob.extend(lora_values(model));
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        seed: model.seed,
        vocab: model.vocab(),
        params: model.param_specs(),
        lora_rank: model.lora().map(|l| l.rank),
        blob_f32: blob.len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend(blob.iter().flat_map(|v| v.to_le_bytes()));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<SurrogateModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .with_context(|| format!("{}: missing header line", path.display()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .with_context(|| format!("{}: bad header", path.display()))?;
    if header.magic != MAGIC || header.version != VERSION {
        bail!("{}: not a version-{VERSION} checkpoint", path.display());
    }
    let raw = &bytes[nl + 1..];
    if raw.len() != header.blob_f32 * 4 {
        bail!("{}: blob is {} bytes, header says {}", path.display(), raw.len(), header.blob_f32 * 4);
    }
    let blob: Vec<f32> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    let mut model = SurrogateModel::new(header.seed, header.vocab);
    if model.param_specs() != header.params {
        bail!("{}: parameter layout does not match this build", path.display());
    }
    let n_base: usize = header.params.iter().map(|&(_, r, c, _)| r * c).sum();
    if blob.len() < n_base {
        bail!("{}: blob shorter than the parameter table", path.display());
    }
    model.load_flat_f32(&blob[..n_base]).map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(rank) = header.lora_rank {
        model.attach_lora(rank, model.seed);
        let lora = model.lora_mut().expect("just attached");
        let mut at = n_base;
        for m in &mut lora.mats {
            for v in &mut m.data {
                *v = blob[at] as f64;
                at += 1;
            }
        }
        if at != blob.len() {
            bail!("{}: adapter blob length mismatch", path.display());
        }
    } else if blob.len() != n_base {
        bail!("{}: trailing values without an adapter header", path.display());
    }
    Ok(model)
}
