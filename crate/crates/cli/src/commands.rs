//! Subcommand implementations. Output layout under the root:
//!
//! ```text
//! sysid/theta_base.ckpt, dataset.json, fit_curve.csv, manifest.json
//! train/<variant>-s<seed>/policy.ckpt, value.ckpt, curve.csv, policy_config.json, manifest.json
//! eval/results.csv, results.accel.csv, manifest.json
//! ablation/<variant>.csv (+ .accel.csv), report/
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mpcrrl_core::dynamics::DynamicsParams;
use mpcrrl_core::envsim::GroundTruthParams;
use mpcrrl_core::policy::{Policy, PolicyConfig, PolicyKind};
use mpcrrl_core::training::sysid::open_loop_position_error;
use mpcrrl_core::training::{collect_sysid_data, fit_sysid, train, TrainConfig};
use mpcrrl_nn::{load_checkpoint, save_checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{apply_ablations, variant_name, Ablation, Cell, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::eval::{append_results, Controller, Evaluator, Summary};
use crate::manifest::Manifest;
use crate::report::{build_report, load_results, write_report, Report};

#[derive(Debug, Parser)]
#[command(name = "mpcrrl", version, about = "MPC with a learned residual policy: sysid, training, evaluation and reports")]
pub struct Cli {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides MPCRRL_OUT and the config's out_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect simulator transitions and fit the warm-start model.
    Sysid(SysidArgs),
    /// Train a policy on top of the warm-start model.
    Train(TrainArgs),
    /// Evaluate a controller over perturbation cells.
    Eval(EvalArgs),
    /// Train and evaluate every ablation variant, then report.
    Ablate(AblateArgs),
    /// Summarize evaluation records into tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SysidArgs {
    #[arg(long)]
    pub transitions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Components to remove: rnn, si, cr.
    #[arg(long, num_args = 1..)]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `mpc`, `mpc-rrl` or a policy checkpoint path.
    #[arg(long, default_value = "mpc")]
    pub controller: String,
    /// `name=value` cell, repeatable; `none` is the training environment.
    #[arg(long)]
    pub perturb: Vec<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// First episode seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record file to append to.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Controller id written into the records.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Retrain even when a finished run with the same settings exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding record files; defaults to the output root.
    pub dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let root = cfg.out_root(cli.out.as_deref());
    match cli.command {
        Command::Sysid(a) => cmd_sysid(&cfg, &root, &a).map(|_| ()),
        Command::Train(a) => {
            let ablations = parse_ablations(&a.ablate)?;
            let mut cfg = cfg;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(k) = a.iterations {
                cfg.train.iterations = k;
            }
            cmd_train(&cfg, &root, &ablations, true).map(|_| ())
        }
        Command::Eval(a) => cmd_eval(&cfg, &root, &a).map(|_| ()),
        Command::Ablate(a) => {
            let mut cfg = cfg;
            if let Some(n) = a.episodes {
                cfg.ablation.episodes = n;
            }
            cmd_ablate(&cfg, &root, a.force).map(|_| ())
        }
        Command::Report(a) => {
            let dir = a.dir.unwrap_or(root);
            let (report, out) = cmd_report(&dir)?;
            print_report(&report);
            println!("tables written to {}", out.display());
            Ok(())
        }
    }
}

pub fn parse_ablations(flags: &[String]) -> Result<Vec<Ablation>> {
    flags.iter().map(|f| f.parse()).collect()
}

pub fn sysid_dir(root: &Path) -> PathBuf {
    root.join("sysid")
}

pub fn theta_path(root: &Path) -> PathBuf {
    sysid_dir(root).join("theta_base.ckpt")
}

pub fn train_dir(root: &Path, ablations: &[Ablation], seed: u64) -> PathBuf {
    root.join("train").join(format!("{}-s{seed}", variant_name(ablations)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub transitions: usize,
    pub train: usize,
    pub validation: usize,
    pub seed: u64,
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Clone, Debug)]
pub struct SysidOutcome {
    pub theta: DynamicsParams,
    pub held_out_mse: f64,
    pub open_loop_mean: f64,
    pub open_loop_max: f64,
}

pub fn cmd_sysid(cfg: &ExperimentConfig, root: &Path, args: &SysidArgs) -> Result<SysidOutcome> {
    let n = args.transitions.unwrap_or(cfg.sysid.transitions);
    let seed = args.seed.unwrap_or(cfg.sysid.seed);
    if n == 0 {
        return Err(CliError::Usage("--transitions must be ≥ 1".into()));
    }
    let dir = sysid_dir(root);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let started = Instant::now();
    let ds = collect_sysid_data(n, seed, &GroundTruthParams::default(), &cfg.sysid.collect)?;
    let (vmin, vmax) = ds.speed_range();
    let summary = DatasetSummary {
        transitions: ds.len(),
        train: ds.train.len(),
        validation: ds.validation.len(),
        seed,
        speed_min: vmin,
        speed_max: vmax,
    };
    write_json(&dir.join("dataset.json"), &summary)?;
    println!(
        "collected {} transitions ({} train / {} held out), speed {vmin:.2}..{vmax:.2} m/s",
        summary.transitions, summary.train, summary.validation
    );
    let init = DynamicsParams::init(cfg.sysid.fit.theta0_init, &mut ChaCha8Rng::seed_from_u64(cfg.sysid.init_seed));
    let fit = fit_sysid(&ds, &init, &cfg.sysid.fit)?;
    let mut curve = String::from("step,train_loss,val_loss\n");
    for (i, (t, v)) in fit.train_losses.iter().zip(&fit.val_losses).enumerate() {
        curve += &format!("{i},{t},{v}\n");
    }
    let cpath = dir.join("fit_curve.csv");
    std::fs::write(&cpath, curve).map_err(|e| CliError::io(&cpath, e))?;
    save_checkpoint(&fit.theta.to_paramset(), &theta_path(root))?;
    // NaN when no held-out segment is long enough.
    let (ol_max, ol_mean, _) = open_loop_position_error(&fit.theta, &ds, 10).unwrap_or((f64::NAN, f64::NAN, 0));
    Manifest::new(
        "sysid",
        cfg,
        json!({"data": seed, "init": cfg.sysid.init_seed, "fit": cfg.sysid.fit.seed}),
        json!({"transitions": n, "held_out_mse": fit.best_val, "theta0": fit.theta.theta0()}),
    )
    .write(&dir)?;
    println!("held-out MSE {:.4e}", fit.best_val);
    println!("10-step open-loop position error: mean {ol_mean:.3} m, max {ol_max:.3} m");
    println!("θ_base written to {} ({:.0} s)", theta_path(root).display(), started.elapsed().as_secs_f64());
    Ok(SysidOutcome {
        theta: fit.theta,
        held_out_mse: fit.best_val,
        open_loop_mean: ol_mean,
        open_loop_max: ol_max,
    })
}

pub fn load_base(root: &Path) -> Result<DynamicsParams> {
    let p = theta_path(root);
    if !p.exists() {
        return Err(CliError::Usage(format!(
            "no warm start at {}; run `mpcrrl sysid` with the same --out / MPCRRL_OUT first",
            p.display()
        )));
    }
    Ok(DynamicsParams::from_paramset(&load_checkpoint(&p)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub kind: PolicyKind,
    pub config: PolicyConfig,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn train_hash(t: &TrainConfig, cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.train = t.clone();
    c.eval = Default::default();
    c.ablation = Default::default();
    c.hash()
}

/// Train one variant into its run directory. With `reuse`, a finished run
/// whose manifest matches the effective settings is loaded instead.
pub fn cmd_train(cfg: &ExperimentConfig, root: &Path, ablations: &[Ablation], verbose: bool) -> Result<PathBuf> {
    train_variant(cfg, root, ablations, verbose, false)
}

fn train_variant(cfg: &ExperimentConfig, root: &Path, ablations: &[Ablation], verbose: bool, reuse: bool) -> Result<PathBuf> {
    let tcfg = apply_ablations(&cfg.train, ablations)?;
    let base = load_base(root)?;
    let dir = train_dir(root, ablations, tcfg.seed);
    let hash = train_hash(&tcfg, cfg);
    if reuse {
        if let Ok(m) = Manifest::read(&dir) {
            if m.effective["train_hash"] == json!(hash) && m.effective["complete"] == json!(true) {
                if verbose {
                    println!("{}: reusing finished run", dir.display());
                }
                return Ok(dir);
            }
        }
    }
    let variant = variant_name(ablations);
    let effective = |complete: bool| {
        json!({
            "variant": variant,
            "alpha": tcfg.alpha,
            "policy_kind": tcfg.policy_kind,
            "sysid_only": tcfg.sysid_only,
            "iterations": tcfg.iterations,
            "train_hash": hash,
            "complete": complete,
        })
    };
    let seeds = json!({"train": tcfg.seed, "sysid": cfg.sysid.seed});
    Manifest::new("train", cfg, seeds.clone(), effective(false)).write(&dir)?;
    write_json(
        &dir.join("policy_config.json"),
        &PolicyMeta {
            kind: tcfg.policy_kind,
            config: tcfg.policy.clone(),
        },
    )?;
    if verbose {
        println!(
            "training {variant} (seed {}, α = {}, {:?} policy, sysid_only = {}) into {}",
            tcfg.seed,
            tcfg.alpha,
            tcfg.policy_kind,
            tcfg.sysid_only,
            dir.display()
        );
    }
    train(&tcfg, &base, &cfg.mpc, &cfg.env, Some(&dir), |it| {
        if verbose {
            println!(
                "iter {:>4}  return {:>8.3}  goal {:>5.2}  J2 {:.3e}  V-loss {:.3e}  kl {:.2e}  {:.0}s",
                it.iteration, it.mean_return, it.goal_rate, it.j2, it.value_loss, it.kl, it.wall_time
            );
        }
    })?;
    Manifest::new("train", cfg, seeds, effective(true)).write(&dir)?;
    Ok(dir)
}

/// Load a trained policy; the config comes from `policy_config.json` next to
/// the checkpoint when present.
pub fn load_policy(ckpt: &Path, fallback: &PolicyConfig) -> Result<Policy> {
    if !ckpt.exists() {
        return Err(CliError::Usage(format!(
            "no policy checkpoint at {}; run `mpcrrl train` first or pass a checkpoint path",
            ckpt.display()
        )));
    }
    let meta = ckpt.with_file_name("policy_config.json");
    let pcfg = if meta.exists() {
        let text = std::fs::read_to_string(&meta).map_err(|e| CliError::io(&meta, e))?;
        serde_json::from_str::<PolicyMeta>(&text).map_err(|e| CliError::io(&meta, e))?.config
    } else {
        fallback.clone()
    };
    Ok(Policy::from_params(pcfg, load_checkpoint(ckpt)?)?)
}

pub fn resolve_controller(cfg: &ExperimentConfig, root: &Path, spec: &str) -> Result<(String, Controller)> {
    match spec {
        "mpc" => Ok(("mpc".into(), Controller::Static)),
        "mpc-rrl" => {
            let ckpt = train_dir(root, &[], cfg.train.seed).join("policy.ckpt");
            Ok(("mpc-rrl".into(), Controller::Adaptive(load_policy(&ckpt, &cfg.train.policy)?)))
        }
        path => {
            let p = Path::new(path);
            let id = p
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| path.to_string(), |n| n.to_string_lossy().into_owned());
            Ok((id, Controller::Adaptive(load_policy(p, &cfg.train.policy)?)))
        }
    }
}

pub fn parse_cells(specs: &[String]) -> Result<Vec<Cell>> {
    specs.iter().map(|s| s.parse()).collect()
}

pub fn cmd_eval(cfg: &ExperimentConfig, root: &Path, args: &EvalArgs) -> Result<Vec<(Cell, Summary)>> {
    let episodes = args.episodes.unwrap_or(cfg.eval.episodes);
    if episodes == 0 {
        return Err(CliError::Usage("contract error: --episodes must be ≥ 1".into()));
    }
    let cells = if args.perturb.is_empty() {
        cfg.eval.cells.clone()
    } else {
        parse_cells(&args.perturb)?
    };
    let (default_id, controller) = resolve_controller(cfg, root, &args.controller)?;
    let id = args.id.clone().unwrap_or(default_id);
    let base = load_base(root)?;
    let seed = args.seed.unwrap_or(cfg.eval.seed);
    let ev = Evaluator::new(&id, controller, &base, &cfg.mpc, &cfg.env)?;
    let rows = ev.run(&cells, episodes, seed)?;
    let csv = args.csv.clone().unwrap_or_else(|| root.join("eval").join("results.csv"));
    append_results(&csv, &rows)?;
    if let Some(dir) = csv.parent() {
        Manifest::new(
            "eval",
            cfg,
            json!({"first_episode": seed}),
            json!({"controller": args.controller, "id": id, "episodes": episodes,
                   "cells": cells.iter().map(|c| c.to_string()).collect::<Vec<_>>()}),
        )
        .write(dir)?;
    }
    println!("{:<28} {:>9} {:>9} {:>9}  (goal error, m; {episodes} episodes)", "cell", "median", "mean", "IQR");
    let mut out = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let g: Vec<f64> = rows[i * episodes..(i + 1) * episodes].iter().map(|r| r.0.goal_error).collect();
        let s = Summary::of(&g).expect("episodes ≥ 1");
        println!("{:<28} {:>9.3} {:>9.3} {:>9.3}", c.to_string(), s.median, s.mean, s.iqr());
        out.push((*c, s));
    }
    println!("records appended to {}", csv.display());
    Ok(out)
}

/// Train every variant for every seed, evaluate on the ablation cells and
/// write the report under `<root>/ablation`.
pub fn cmd_ablate(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<Report> {
    if cfg.ablation.episodes == 0 {
        return Err(CliError::Usage("contract error: ablation.episodes must be ≥ 1".into()));
    }
    for v in &cfg.ablation.variants {
        apply_ablations(&cfg.train, v)?;
    }
    let base = load_base(root)?;
    let out = root.join("ablation");
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    for v in &cfg.ablation.variants {
        let name = variant_name(v);
        let csv = out.join(format!("{name}.csv"));
        for p in [csv.clone(), crate::eval::accel_path(&csv)] {
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
            }
        }
        for &seed in &cfg.ablation.seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let dir = train_variant(&c, root, v, true, !force)?;
            let policy = load_policy(&dir.join("policy.ckpt"), &c.train.policy)?;
            let ev = Evaluator::new(&format!("{name}@s{seed}"), Controller::Adaptive(policy), &base, &cfg.mpc, &cfg.env)?;
            let rows = ev.run(&cfg.ablation.cells, cfg.ablation.episodes, cfg.eval.seed)?;
            append_results(&csv, &rows)?;
            println!("{name}@s{seed}: evaluated {} episodes", rows.len());
        }
    }
    Manifest::new(
        "ablate",
        cfg,
        json!({"train": cfg.ablation.seeds, "first_episode": cfg.eval.seed}),
        json!({"variants": cfg.ablation.variants.iter().map(|v| variant_name(v)).collect::<Vec<_>>()}),
    )
    .write(&out)?;
    let (report, dir) = cmd_report(&out)?;
    print_report(&report);
    println!("tables written to {}", dir.display());
    Ok(report)
}

pub fn cmd_report(dir: &Path) -> Result<(Report, PathBuf)> {
    let (records, accels) = load_results(dir)?;
    let report = build_report(&records, &accels)?;
    let out = write_report(dir, &report)?;
    Ok((report, out))
}

pub fn print_report(r: &Report) {
    println!("{:<20} {:<18} {:>8} {:>6} {:>10}", "controller", "perturbation", "value", "n", "median e_g");
    for g in &r.goal {
        println!(
            "{:<20} {:<18} {:>8} {:>6} {:>10.3}",
            g.controller, g.perturbation, g.value, g.goal.n, g.goal.median
        );
    }
    if !r.avg_rank.is_empty() {
        println!("average rank:");
        for (c, a) in &r.avg_rank {
            println!("  {c:<20} {a:.2}");
        }
    }
}
