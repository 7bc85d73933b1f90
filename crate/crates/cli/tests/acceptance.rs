//! Acceptance checks for the whole pipeline. The heavy 256/128 artifacts
//! build once and are shared, so run this serially with output shown:
//!
//! ```text
//! cargo test --release --test acceptance -- --test-threads=1 --nocapture
//! ```
//!
//! Each check prints one `criterion N ...: PASS` line with the measured
//! numbers; tolerances and time budgets are pinned in the assertions.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use tempfile::TempDir;
use unlearn_cli::config::RunConfig;
use unlearn_cli::diagnose::DiagnoseReport;
use unlearn_cli::endtoend::{self, EndToEndReport, Profile};
use unlearn_cli::{attack_run, dataset, protect_run};
use unlearn_core::model::{SampleView, SurrogateModel};
use unlearn_core::protect::{protect_sample, SampleInputs};
use unlearn_core::trigger::AdmissibleVocab;
use unlearn_core::verify::{end_to_end_tv_check, run_suite, Suite};

struct Desk {
    _root: TempDir,
    out: PathBuf,
    report: EndToEndReport,
    diag: DiagnoseReport,
}

impl Desk {
    fn stage_wall(&self, name: &str) -> f64 {
        self.report
            .stages
            .iter()
            .find(|s| s.stage == name)
            .unwrap_or_else(|| panic!("stage {name} missing"))
            .wall_secs
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let root = TempDir::new().expect("tempdir");
        let out = root.path().join("desk");
        println!("[desk] building full 256/128 artifacts (several minutes, single worker)");
        let report = endtoend::run(Profile::FullDesk, &RunConfig::default(), &out, 1, true)
            .expect("full-desk pipeline");
        for s in &report.stages {
            println!("[desk] {} took {:.1}s", s.stage, s.wall_secs);
        }
        let diag: DiagnoseReport = serde_json::from_slice(
            &fs::read(out.join("reports/diagnose/report.json")).expect("diagnose report"),
        )
        .expect("parse diagnose report");
        Desk { _root: root, out, report, diag }
    })
}

#[test]
fn criterion_01_mass_nce_identity() {
    let t = Instant::now();
    let r = run_suite(Suite::Proposition, 0);
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(r.trials, 100, "expected 100 stacks");
    assert!(r.passed(), "identity violated beyond 1e-9: {r}");
    assert!(secs < 10.0, "took {secs:.1}s, budget 10s");
    println!(
        "criterion 1 (attention-mass/NCE identity): PASS — {} stacks, worst {:.2e}, {secs:.2}s",
        r.trials, r.worst
    );
}

#[test]
fn criterion_02_screening_gap_bound() {
    let t = Instant::now();
    let r = run_suite(Suite::Lemma1, 0);
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(r.trials, 1000, "expected 1000 trials");
    assert!(r.passed(), "screen-and-verify gap exceeded the bound: {r}");
    assert!(secs < 30.0, "took {secs:.1}s, budget 30s");
    println!(
        "criterion 2 (screening gap ≤ R², exact at full width): PASS — {} trials, {secs:.2}s",
        r.trials
    );
}

#[test]
fn criterion_03_divergence_bound() {
    let t = Instant::now();
    let r = run_suite(Suite::Theorem, 0);
    assert_eq!(r.trials, 100, "expected 100 constructions");
    assert!(r.passed(), "synthetic divergence bound failed: {r}");

    // And on real protected samples end to end.
    let tok = dataset::canonical_tokenizer();
    let adm = AdmissibleVocab::from_tokenizer(&tok);
    let mut cfg = RunConfig::default();
    cfg.protect.rounds = 1;
    cfg.protect.pgd_iters = 1;
    cfg.protect.inner_steps = 0;
    cfg.protect.eps_t = 2;
    cfg.protect.top_k = 8;
    let pcfg = cfg.protection_config().unwrap();
    let models: Vec<SurrogateModel> =
        cfg.surrogate_seeds.iter().map(|&s| SurrogateModel::new(s, tok.vocab_size())).collect();
    let mut checked = 0;
    for i in 0..5u64 {
        let (raw, question, answer) = dataset::make_sample(77, "train", i as usize);
        let image = unlearn_core::processor::Image::new(
            raw.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .unwrap();
        let sample = SampleInputs { id: i, image: &image, question: &question, answer: &answer };
        let out = protect_sample(&models, &tok, &adm, &sample, &pcfg).unwrap();

        let q_ids = tok.encode(&question).unwrap();
        let a_ids = tok.encode(&answer).unwrap();
        let (p_ids, p_spans) = tok.encode_with_spans(&out.released_text).unwrap();
        let first = p_spans.iter().position(|&(_, e)| e > question.len()).unwrap();
        let clean_view =
            SampleView { image: &image, text_ids: &q_ids, trigger_span: None, answer_ids: &a_ids };
        let protected_view = SampleView {
            image: &out.released_image,
            text_ids: &p_ids,
            trigger_span: Some((first, p_ids.len())),
            answer_ids: &a_ids,
        };
        let report =
            end_to_end_tv_check(&models[0], &clean_view, &protected_view, &cfg.protect.layers)
                .unwrap();
        assert_eq!(report.clean_mass_on_r, 0.0, "sample {i}: clean mass leaked onto the trigger");
        assert!(
            report.mean_tv >= report.bound - 1e-9,
            "sample {i}: mean TV {} below 1−√(η/2) = {}",
            report.mean_tv,
            report.bound
        );
        checked += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(checked >= 5);
    assert!(secs < 60.0, "took {secs:.1}s, budget 60s");
    println!(
        "criterion 3 (TV ≥ 1−√(η/2)): PASS — 100 synthetic + {checked} end-to-end, {secs:.2}s"
    );
}

#[test]
fn criterion_04_gradient_correctness() {
    let t = Instant::now();
    let r = run_suite(Suite::Gradients, 0);
    let secs = t.elapsed().as_secs_f64();
    assert!(r.trials >= 150, "need ≥50 coords per leaf family, got {} total", r.trials);
    assert!(r.passed(), "analytic and finite-difference gradients disagree: {r}");
    assert!(secs < 60.0, "took {secs:.1}s, budget 60s");
    println!(
        "criterion 4 (reverse-mode vs finite differences): PASS — {} coords, {secs:.2}s",
        r.trials
    );
}

#[test]
fn criterion_05_feasibility() {
    let d = desk();
    assert!(
        d.report.feasibility_checks >= 256 * 10,
        "only {} constraint checks recorded",
        d.report.feasibility_checks
    );
    assert_eq!(
        d.report.feasibility_violations, 0,
        "hard budget violated during the full-desk runs"
    );
    println!(
        "criterion 5 (zero feasibility violations): PASS — {} checks, 0 violations",
        d.report.feasibility_checks
    );
}

#[test]
fn criterion_06_protection_direction() {
    let d = desk();
    let budget = d.stage_wall("protect-minmin")
        + d.stage_wall("finetune-clean")
        + d.stage_wall("finetune-minmin");
    assert!(
        d.report.acc_clean_ft >= 0.85,
        "clean fine-tuning reached only {:.4}",
        d.report.acc_clean_ft
    );
    assert!(
        d.report.delta_acc >= 0.10,
        "accuracy drop {:.4} (clean {:.4}, protected {:.4})",
        d.report.delta_acc,
        d.report.acc_clean_ft,
        d.report.acc_minmin_ft
    );
    assert!(budget <= 900.0, "protect + two fine-tunes took {budget:.0}s, budget 900s");
    println!(
        "criterion 6 (clean FT ≥ 0.85, drop ≥ 0.10): PASS — clean {:.4}, protected {:.4}, {budget:.0}s",
        d.report.acc_clean_ft, d.report.acc_minmin_ft
    );
}

#[test]
fn criterion_07_loss_regimes() {
    let d = desk();
    assert!(
        d.report.train_loss_minmin_ft < d.report.train_loss_clean_ft,
        "shortcut data should fit below clean: {:.4} vs {:.4}",
        d.report.train_loss_minmin_ft,
        d.report.train_loss_clean_ft
    );
    assert!(
        d.report.train_loss_max_ft > d.report.train_loss_clean_ft,
        "adversarial data should fit above clean: {:.4} vs {:.4}",
        d.report.train_loss_max_ft,
        d.report.train_loss_clean_ft
    );
    println!(
        "criterion 7 (final train loss minmin < clean < max): PASS — {:.4} < {:.4} < {:.4}",
        d.report.train_loss_minmin_ft,
        d.report.train_loss_clean_ft,
        d.report.train_loss_max_ft
    );
}

#[test]
fn criterion_08_stealthiness() {
    let d = desk();
    assert!(
        d.diag.psnr_min.0 >= 30.07,
        "worst released image at {:.2} dB, floor 30.07 dB",
        d.diag.psnr_min.0
    );
    assert!(d.diag.ssim_min >= 0.80, "worst SSIM {:.4}, floor 0.80", d.diag.ssim_min);
    println!(
        "criterion 8 (PSNR ≥ 30.07 dB, SSIM ≥ 0.80): PASS — min PSNR {:.2} dB, min SSIM {:.4}",
        d.diag.psnr_min.0, d.diag.ssim_min
    );
}

#[test]
fn criterion_09_mixing_endpoints() {
    let d = desk();
    // Ratio endpoints resolve to exactly the protected and clean splits.
    let clean = dataset::load_dataset(&d.out.join("data/train")).unwrap();
    let source = attack_run::load_train_samples(&d.out.join("protected-minmin")).unwrap();
    let all = unlearn_core::attack::mix(&source.samples, &clean.samples, 1.0, 5).unwrap();
    let none = unlearn_core::attack::mix(&source.samples, &clean.samples, 0.0, 5).unwrap();
    for (a, b) in all.iter().zip(&source.samples) {
        assert_eq!((a.id, &a.text), (b.id, &b.text), "ratio 1.0 must keep every protected row");
    }
    for (a, b) in none.iter().zip(&clean.samples) {
        assert_eq!((a.id, &a.text), (b.id, &b.text), "ratio 0.0 must return the clean split");
    }
    assert!(
        d.report.acc_minmin_ft <= d.report.acc_clean_ft,
        "fully protected training beat clean training: {:.4} vs {:.4}",
        d.report.acc_minmin_ft,
        d.report.acc_clean_ft
    );
    println!(
        "criterion 9 (ratio 1.0 accuracy ≤ ratio 0.0): PASS — {:.4} ≤ {:.4}",
        d.report.acc_minmin_ft, d.report.acc_clean_ft
    );
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                // Wall-clock times differ between runs by construction.
                if rel != "summary.json" {
                    out.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism_and_scaling() {
    let root = TempDir::new().unwrap();
    let mut cfg = RunConfig::default();
    cfg.protect.rounds = 2;
    cfg.protect.eps_t = 2;
    cfg.protect.pgd_iters = 1;
    cfg.protect.top_k = 8;

    let small = root.path().join("data-small");
    let large = root.path().join("data-large");
    dataset::gen_toy_data(24, 2, cfg.dataset.seed, &small, true).unwrap();
    dataset::gen_toy_data(48, 2, cfg.dataset.seed, &large, true).unwrap();

    let out_a = root.path().join("out-a");
    let out_b = root.path().join("out-b");
    let out_2n = root.path().join("out-2n");
    let t = Instant::now();
    protect_run::run(&cfg, &small.join("train"), &out_a, 1, true).unwrap();
    let wall_n = t.elapsed().as_secs_f64();
    let t = Instant::now();
    protect_run::run(&cfg, &large.join("train"), &out_2n, 1, true).unwrap();
    let wall_2n = t.elapsed().as_secs_f64();
    protect_run::run(&cfg, &small.join("train"), &out_b, 1, true).unwrap();

    let a = tree_bytes(&out_a);
    let b = tree_bytes(&out_b);
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between identically seeded runs");
    }

    let ratio = wall_2n / wall_n;
    assert!(
        (1.4..=2.6).contains(&ratio),
        "doubling the dataset scaled wall time by {ratio:.2} (n: {wall_n:.1}s, 2n: {wall_2n:.1}s)"
    );
    println!(
        "criterion 10 (byte-identical reruns, linear scaling): PASS — {} files identical, ratio {ratio:.2}",
        a.len()
    );
}
