//! Synthetic shape-color VQA: one colored shape per 32×32 image on a
//! textured gray background, questions from six fixed templates, answers
//! from closed color/shape sets. Everything is derived from named RNG
//! streams, so a (seed, split, index) triple pins a sample forever.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::attack::TrainSample;
use unlearn_core::processor::{Image, CHANNELS, IMG_SIDE};
use unlearn_core::rng::Stream;
use unlearn_core::tokenizer::MiniTokenizer;

use crate::config::hex;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// All fills are bright against the dark textured background, so "shape
/// pixel vs background" has the same contrast sign for every color and a
/// color-independent footprint detector is linearly reachable.
pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [230, 40, 40]),
    ("green", [60, 200, 60]),
    ("blue", [70, 90, 230]),
    ("yellow", [240, 225, 60]),
    ("purple", [170, 70, 210]),
    ("orange", [245, 150, 40]),
    ("white", [250, 250, 250]),
    ("pink", [250, 130, 190]),
];

/// Templates 0, 1, and 3 ask for the shape, the others for the color. The
/// interleaving gives shape questions the larger share of small runs, which
/// they need: shapes are the harder attribute to read through the frozen
/// patch projection.
fn is_shape_template(t: usize) -> bool {
    matches!(t, 0 | 1 | 3)
}

fn template(t: usize, shape: &str) -> String {
    match t {
        0 => "what shape is in the image".into(),
        1 => "what shape is shown".into(),
        2 => format!("what color is the {shape}"),
        3 => "which shape is drawn".into(),
        4 => "what color is the shape".into(),
        _ => "which color is shown".into(),
    }
}

/// The tokenizer every pipeline stage shares: trained on the closed question
/// and answer vocabulary plus a pool of short filler words that keeps the
/// admissible-token set rich enough for trigger search. Answer words appear
/// standalone so they merge into single tokens, and the fillers share
/// two-letter prefixes so the merge budget covers all of them.
pub fn canonical_tokenizer() -> MiniTokenizer {
    let mut corpus: Vec<String> = Vec::new();
    for shape in SHAPES {
        for t in 0..6 {
            corpus.push(template(t, shape));
        }
    }
    for (name, _) in COLORS {
        corpus.push(name.into());
        corpus.push(name.into());
    }
    for shape in SHAPES {
        corpus.push(shape.into());
        corpus.push(shape.into());
    }
    let fillers = "the cat car can cap cod cot bat bag bad bar bed \
                   mud map mat man pan pat pen pit rat ram rag rim tap tan tar tin \
                   card cart cane cape case cast band bank bend belt mast mask \
                   pant past raft rant tint dust dusk dart dent fort fork form \
                   gate gaze hint hand harm lamp land lane";
    for _ in 0..3 {
        corpus.push(fillers.into());
    }
    let refs: Vec<&str> = corpus.iter().map(|s| s.as_str()).collect();
    MiniTokenizer::train(&refs, 200).expect("ascii corpus trains")
}

pub fn tokenizer_hash(tok: &MiniTokenizer) -> String {
    hex(&Sha256::digest(tok.canonical_bytes()))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestHeader {
    pub kind: String,
    pub split: String,
    pub n: usize,
    pub seed: u64,
    pub tokenizer_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub id: u64,
    pub image: String,
    pub text: String,
    pub answer: String,
}

/// One sample drawn from the generator, before any file IO.
pub fn make_sample(seed: u64, split: &str, i: usize) -> (Vec<u8>, String, String) {
    let mut stream = Stream::derive(seed, &format!("toy-{split}"), i as u64);
    let color = i % COLORS.len();
    let shape = (i / COLORS.len()) % SHAPES.len();
    let tmpl = (i / 32) % 6;

    let mut px = vec![0u8; IMG_SIDE * IMG_SIDE * CHANNELS];
    for p in px.chunks_mut(CHANNELS) {
        let g = 40 + stream.below(21) as u8;
        p.copy_from_slice(&[g, g, g]);
    }
    let cx = (13 + stream.below(4)) as i64;
    let cy = (13 + stream.below(4)) as i64;
    // Fixed radius: the four shapes then cover clearly separated pixel
    // areas (square 289, circle 197, triangle 145, cross 93), which keeps
    // them distinguishable through the frozen patch projection.
    let r = 8i64;
    let rgb = COLORS[color].1;
    for y in 0..IMG_SIDE as i64 {
        for x in 0..IMG_SIDE as i64 {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r && dy.abs() <= r,
                // Downward-growing width from the apex at cy − r.
                2 => dy >= -r && dy <= r && 2 * dx.abs() <= dy + r,
                _ => (dx.abs() <= 1 && dy.abs() <= r) || (dy.abs() <= 1 && dx.abs() <= r),
            };
            if inside {
                let o = (y as usize * IMG_SIDE + x as usize) * CHANNELS;
                px[o..o + CHANNELS].copy_from_slice(&rgb);
            }
        }
    }

    let text = template(tmpl, SHAPES[shape]);
    let answer = if is_shape_template(tmpl) { SHAPES[shape] } else { COLORS[color].0 };
    (px, text, answer.to_string())
}

fn write_png(path: &Path, raw: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(IMG_SIDE as u32, IMG_SIDE as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let rgb = img.into_rgb8();
    if rgb.width() as usize != IMG_SIDE || rgb.height() as usize != IMG_SIDE {
        bail!("{} is {}x{}, expected {IMG_SIDE}x{IMG_SIDE}", path.display(), rgb.width(), rgb.height());
    }
    let px: Vec<f64> = rgb.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(px).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn image_to_png_bytes(img: &Image) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|&v| unlearn_core::processor::round_half_even(v * 255.0) as u8)
        .collect()
}

/// Refuse to write into a nonempty directory unless forced.
pub fn claim_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            bail!("{} exists and is not empty (pass --force to overwrite)", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Write one split (images/ + manifest.jsonl) under `dir`.
pub fn write_split(dir: &Path, split: &str, n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let tok_hash = tokenizer_hash(&canonical_tokenizer());
    let header = ManifestHeader {
        kind: "header".into(),
        split: split.into(),
        n,
        seed,
        tokenizer_sha256: tok_hash,
    };
    let mut manifest = serde_json::to_string(&header)?;
    manifest.push('\n');
    for i in 0..n {
        let (raw, text, answer) = make_sample(seed, split, i);
        let rel = format!("images/{i:06}.png");
        write_png(&dir.join(&rel), raw)?;
        let row = ManifestRow { id: i as u64, image: rel, text, answer };
        manifest.push_str(&serde_json::to_string(&row)?);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(())
}

/// Generate `train/` and `eval/` splits under `out_dir`. The splits use
/// differently labeled RNG streams, so they are disjoint by construction.
pub fn gen_toy_data(n_train: usize, n_eval: usize, seed: u64, out_dir: &Path, force: bool) -> Result<()> {
    if n_train == 0 || n_eval == 0 {
        bail!("dataset sizes must be at least 1");
    }
    claim_out_dir(out_dir, force)?;
    write_split(&out_dir.join("train"), "train", n_train, seed)?;
    write_split(&out_dir.join("eval"), "eval", n_eval, seed)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub samples: Vec<TrainSample>,
}

/// Load a manifest directory back into memory, checking id uniqueness and
/// image dimensions.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let path = dir.join("manifest.jsonl");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: ManifestHeader = serde_json::from_str(
        lines.next().with_context(|| format!("{} is empty", path.display()))?,
    )
    .with_context(|| format!("parsing header of {}", path.display()))?;
    if header.kind != "header" {
        bail!("{} does not start with a header record", path.display());
    }
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .with_context(|| format!("parsing {} line {}", path.display(), ln + 2))?;
        if !seen.insert(row.id) {
            bail!("duplicate id {} in {}", row.id, path.display());
        }
        let image = read_png(&dir.join(&row.image))?;
        samples.push(TrainSample { id: row.id, image, text: row.text, answer: row.answer });
    }
    if samples.len() != header.n {
        bail!("{}: header says {} rows, found {}", path.display(), header.n, samples.len());
    }
    Ok(LoadedDataset { root: dir.to_path_buf(), header, samples })
}
