//! `unlearn` — generate the toy VQA corpus, protect it, attack it, and
//! check the math. Exit codes: 0 success, 1 invalid input or config,
//! 2 a pipeline stage or verification suite failed.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use unlearn_cli::config::RunConfig;
use unlearn_cli::{attack_run, dataset, diagnose, endtoend, protect_run};
use unlearn_core::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Unlearnable multimodal data pipeline")]
struct Cli {
    /// Override the master seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Path to a JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-sample protection.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/ and eval/ splits of the shape-color corpus.
    GenToyData {
        /// Directory to create (gets train/ and eval/ subdirectories).
        #[arg(long)]
        out: PathBuf,
        /// Training samples; defaults to the config value.
        #[arg(long)]
        n_train: Option<usize>,
        /// Evaluation samples; defaults to the config value.
        #[arg(long)]
        n_eval: Option<usize>,
        /// Wipe a nonempty output directory instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Optimize perturbations and triggers for every sample of a split.
    Protect {
        /// Dataset split to protect (a directory with manifest.jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Directory for released images, sidecars, and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Wipe a nonempty output directory instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune a fresh surrogate on a (possibly protected) split.
    Attack {
        /// Training split: a protection run or a clean dataset split.
        #[arg(long)]
        train: PathBuf,
        /// Clean evaluation split to score on.
        #[arg(long)]
        eval: PathBuf,
        /// Clean split to mix in when mix_ratio < 1.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Write the run report (loss curve, accuracy) as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Save the fine-tuned model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a saved checkpoint on an evaluation split.
    Evaluate {
        /// Checkpoint written by `attack --checkpoint`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clean evaluation split to score on.
        #[arg(long)]
        eval: PathBuf,
    },
    /// Stealth/routing/divergence report for a protection run.
    Diagnose {
        /// Clean split the protection run was built from.
        #[arg(long)]
        clean: PathBuf,
        /// Protection run directory to analyze.
        #[arg(long)]
        protected: PathBuf,
        /// Directory for report.json and the CSV summaries.
        #[arg(long)]
        out: PathBuf,
        /// Wipe a nonempty output directory instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Run the analytical self-check suites.
    Verify {
        /// One of lemma1, proposition, theorem, gradients, pinsker; all when omitted.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Full pipeline: generate, protect both variants, attack, diagnose.
    EndToEnd {
        /// Directory for all artifacts and the final endtoend.json.
        #[arg(long)]
        out: PathBuf,
        /// "smoke" (32/32, minutes) or "full-desk" (256/128).
        #[arg(long, default_value = "smoke")]
        profile: String,
        /// Wipe a nonempty output directory instead of refusing.
        #[arg(long)]
        force: bool,
    },
}

enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
}

fn validation<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Validation)
}

fn stage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Stage)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version go to stdout and are not failures.
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_suite(name: &str) -> Result<Suite> {
    Ok(match name {
        "lemma1" => Suite::Lemma1,
        "proposition" => Suite::Proposition,
        "theorem" => Suite::Theorem,
        "gradients" => Suite::Gradients,
        "pinsker" => Suite::Pinsker,
        other => anyhow::bail!(
            "unknown suite {other:?}; expected lemma1, proposition, theorem, gradients, or pinsker"
        ),
    })
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let cfg = validation(load_config(&cli))?;
    match &cli.command {
        Command::GenToyData { out, n_train, n_eval, force } => {
            let n_train = n_train.unwrap_or(cfg.dataset.n_train);
            let n_eval = n_eval.unwrap_or(cfg.dataset.n_eval);
            let seed = cli.seed.unwrap_or(cfg.dataset.seed);
            stage(dataset::gen_toy_data(n_train, n_eval, seed, out, *force))?;
            println!("wrote {n_train} train and {n_eval} eval samples to {}", out.display());
        }
        Command::Protect { data, out, force } => {
            let s = stage(protect_run::run(&cfg, data, out, cli.workers.max(1), *force))?;
            println!("protected {} samples in {:.1}s", s.n, s.wall_secs);
            println!("mean final loss = {:.6}", s.mean_final_loss);
            println!(
                "feasibility checks = {}, violations = {}",
                s.feasibility_checks, s.feasibility_violations
            );
        }
        Command::Attack { train, eval, clean, report, checkpoint } => {
            let r = stage(attack_run::run(
                &cfg,
                train,
                clean.as_deref(),
                eval,
                report.as_deref(),
                checkpoint.as_deref(),
            ))?;
            println!("fine-tuned on {} ({} steps) in {:.1}s", r.train_source, r.steps, r.wall_secs);
            println!("final train loss = {:.6}", r.final_loss);
            println!("eval accuracy = {:.4}", r.accuracy);
        }
        Command::Evaluate { checkpoint, eval } => {
            let acc = stage(attack_run::evaluate_checkpoint(checkpoint, eval))?;
            println!("eval accuracy = {acc:.4}");
        }
        Command::Diagnose { clean, protected, out, force } => {
            let d = stage(diagnose::run(&cfg, clean, protected, out, *force))?;
            println!("diagnosed {} samples", d.n);
            println!("psnr mean = {:.2} dB ({} identical)", d.psnr_mean, d.psnr_inf);
            println!("ssim mean = {:.4}, bleu mean = {:.4}", d.ssim_mean, d.bleu_mean);
            println!("divergence bound holds on all checked: {}", d.tv_holds_all);
        }
        Command::Verify { suite } => {
            let suites = match suite {
                Some(name) => vec![validation(parse_suite(name))?],
                None => vec![
                    Suite::Lemma1,
                    Suite::Proposition,
                    Suite::Theorem,
                    Suite::Gradients,
                    Suite::Pinsker,
                ],
            };
            let mut all_ok = true;
            for s in suites {
                let report = run_suite(s, cfg.master_seed);
                println!("{report}");
                all_ok &= report.passed();
            }
            if !all_ok {
                return Err(Failure::Stage(anyhow::anyhow!("one or more suites failed")));
            }
        }
        Command::EndToEnd { out, profile, force } => {
            let profile = validation(match profile.as_str() {
                "smoke" => Ok(endtoend::Profile::Smoke),
                "full-desk" => Ok(endtoend::Profile::FullDesk),
                other => Err(anyhow::anyhow!("unknown profile {other:?}")),
            })?;
            let r = stage(endtoend::run(profile, &cfg, out, cli.workers.max(1), *force))?;
            println!("profile = {}", r.profile);
            println!(
                "accuracy: clean-ft {:.4}, minmin-ft {:.4}, max-ft {:.4}",
                r.acc_clean_ft, r.acc_minmin_ft, r.acc_max_ft
            );
            println!("accuracy drop from protection = {:.4}", r.delta_acc);
            println!(
                "train loss: minmin {:.4} < clean {:.4} < max {:.4} expected",
                r.train_loss_minmin_ft, r.train_loss_clean_ft, r.train_loss_max_ft
            );
            println!("psnr mean = {:.2} dB, ssim mean = {:.4}", r.psnr_mean, r.ssim_mean);
            println!("total wall = {:.1}s", r.wall_secs);
        }
    }
    Ok(())
}
