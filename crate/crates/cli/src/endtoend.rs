//! One-command pipeline: generate data, protect it under both optimization
//! variants, fine-tune attackers on clean and protected copies, and collect
//! the headline numbers into a single report.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::attack_run;
use crate::config::RunConfig;
use crate::dataset;
use crate::diagnose;
use crate::protect_run;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Tiny sizes and short schedules; checks pipeline integrity in minutes.
    Smoke,
    /// The full 256/128 configuration the headline numbers are quoted on.
    FullDesk,
}

impl Profile {
    pub fn apply(self, cfg: &mut RunConfig) {
        if let Profile::Smoke = self {
            cfg.dataset.n_train = 32;
            cfg.dataset.n_eval = 32;
            cfg.protect.rounds = 2;
            cfg.protect.eps_t = 2;
            cfg.protect.pgd_iters = 2;
            cfg.protect.inner_steps = 1;
            cfg.protect.top_k = 8;
            cfg.attack.epochs = 8;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub kind: String,
    pub profile: String,
    pub n_train: usize,
    pub n_eval: usize,
    pub acc_clean_ft: f64,
    pub acc_minmin_ft: f64,
    pub acc_max_ft: f64,
    pub delta_acc: f64,
    pub train_loss_clean_ft: f64,
    pub train_loss_minmin_ft: f64,
    pub train_loss_max_ft: f64,
    pub protect_mean_final_loss_minmin: f64,
    pub protect_mean_final_loss_max: f64,
    pub feasibility_checks: usize,
    pub feasibility_violations: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub bleu_mean: f64,
    pub tv_holds_all: bool,
    pub stages: Vec<StageTime>,
    pub wall_secs: f64,
    pub config_sha256: String,
}

pub fn run(
    profile: Profile,
    base_cfg: &RunConfig,
    out_dir: &Path,
    workers: usize,
    force: bool,
) -> Result<EndToEndReport> {
    let started = Instant::now();
    let mut cfg = base_cfg.clone();
    profile.apply(&mut cfg);
    cfg.validate()?;

    dataset::claim_out_dir(out_dir, force)?;
    let data_dir = out_dir.join("data");
    let train_dir = data_dir.join("train");
    let eval_dir = data_dir.join("eval");
    let reports = out_dir.join("reports");
    fs::create_dir_all(&reports)?;

    let mut stages: Vec<StageTime> = Vec::new();
    let timed = |stages: &mut Vec<StageTime>, name: &str, t: Instant| {
        stages.push(StageTime { stage: name.into(), wall_secs: t.elapsed().as_secs_f64() });
    };

    let t = Instant::now();
    dataset::gen_toy_data(cfg.dataset.n_train, cfg.dataset.n_eval, cfg.dataset.seed, &data_dir, true)
        .context("stage gen-toy-data")?;
    timed(&mut stages, "gen-toy-data", t);

    let mut minmin_cfg = cfg.clone();
    minmin_cfg.protect.variant = "minmin".into();
    // The disruption variant spends its whole budget raising the attacker's
    // starting loss surface: no binding term, ascent against the base models.
    let mut max_cfg = cfg.clone();
    max_cfg.protect.variant = "max".into();
    max_cfg.protect.lambda_bind = 0.0;
    max_cfg.protect.inner_steps = 0;

    let t = Instant::now();
    let minmin_dir = out_dir.join("protected-minmin");
    let prot_minmin = protect_run::run(&minmin_cfg, &train_dir, &minmin_dir, workers, true)
        .context("stage protect-minmin")?;
    timed(&mut stages, "protect-minmin", t);

    let t = Instant::now();
    let max_dir = out_dir.join("protected-max");
    let prot_max = protect_run::run(&max_cfg, &train_dir, &max_dir, workers, true)
        .context("stage protect-max")?;
    timed(&mut stages, "protect-max", t);

    let t = Instant::now();
    let clean_ft = attack_run::run(
        &cfg,
        &train_dir,
        None,
        &eval_dir,
        Some(&reports.join("attack-clean.json")),
        None,
    )
    .context("stage finetune-clean")?;
    timed(&mut stages, "finetune-clean", t);

    let t = Instant::now();
    let minmin_ft = attack_run::run(
        &cfg,
        &minmin_dir,
        None,
        &eval_dir,
        Some(&reports.join("attack-minmin.json")),
        None,
    )
    .context("stage finetune-minmin")?;
    timed(&mut stages, "finetune-minmin", t);

    let t = Instant::now();
    let max_ft = attack_run::run(
        &cfg,
        &max_dir,
        None,
        &eval_dir,
        Some(&reports.join("attack-max.json")),
        None,
    )
    .context("stage finetune-max")?;
    timed(&mut stages, "finetune-max", t);

    let t = Instant::now();
    let diag = diagnose::run(&minmin_cfg, &train_dir, &minmin_dir, &reports.join("diagnose"), true)
        .context("stage diagnose")?;
    timed(&mut stages, "diagnose", t);

    let report = EndToEndReport {
        kind: "end-to-end-report".into(),
        profile: match profile {
            Profile::Smoke => "smoke".into(),
            Profile::FullDesk => "full-desk".into(),
        },
        n_train: cfg.dataset.n_train,
        n_eval: cfg.dataset.n_eval,
        acc_clean_ft: clean_ft.accuracy,
        acc_minmin_ft: minmin_ft.accuracy,
        acc_max_ft: max_ft.accuracy,
        delta_acc: clean_ft.accuracy - minmin_ft.accuracy,
        train_loss_clean_ft: clean_ft.final_loss,
        train_loss_minmin_ft: minmin_ft.final_loss,
        train_loss_max_ft: max_ft.final_loss,
        protect_mean_final_loss_minmin: prot_minmin.mean_final_loss,
        protect_mean_final_loss_max: prot_max.mean_final_loss,
        feasibility_checks: prot_minmin.feasibility_checks + prot_max.feasibility_checks,
        feasibility_violations: prot_minmin.feasibility_violations
            + prot_max.feasibility_violations,
        psnr_mean: diag.psnr_mean,
        ssim_mean: diag.ssim_mean,
        bleu_mean: diag.bleu_mean,
        tv_holds_all: diag.tv_holds_all,
        stages,
        wall_secs: started.elapsed().as_secs_f64(),
        config_sha256: cfg.hash(),
    };

    // Integrity gates that hold for any profile: budgets respected and every
    // score a probability.
    ensure!(report.feasibility_violations == 0, "feasibility violations recorded");
    for (name, acc) in [
        ("clean", report.acc_clean_ft),
        ("minmin", report.acc_minmin_ft),
        ("max", report.acc_max_ft),
    ] {
        ensure!((0.0..=1.0).contains(&acc), "{name} accuracy {acc} outside [0,1]");
    }
    ensure!(report.tv_holds_all, "attention divergence bound failed");

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(out_dir.join("endtoend.json"), bytes)?;
    Ok(report)
}
