//! Episode evaluation of a fixed controller over perturbation cells.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use mpcrrl_core::dynamics::DynamicsParams;
use mpcrrl_core::envsim::{Env, EnvConfig, EpisodeResult};
use mpcrrl_core::mpc::MpcConfig;
use mpcrrl_core::policy::{action_scale, Policy, PolicyConfig};
use mpcrrl_core::training::{rollout, ControlContext};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Cell;
use crate::error::{CliError, Result};

/// One evaluated episode. Column order is the CSV schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub controller: String,
    pub perturbation: String,
    pub value: String,
    pub seed: u64,
    pub goal_error: f64,
    pub route_error_total: f64,
    pub route_error_mean: f64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: usize,
    pub reason: String,
}

pub const RECORD_HEADER: [&str; 10] = [
    "controller",
    "perturbation",
    "value",
    "seed",
    "goal_error",
    "route_error_total",
    "route_error_mean",
    "return",
    "steps",
    "reason",
];

/// Per-episode mean absolute acceleration, kept beside the record CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelRecord {
    pub controller: String,
    pub perturbation: String,
    pub value: String,
    pub seed: u64,
    pub mean_abs_accel: f64,
}

/// Static MPC or the adaptive loop around a trained policy.
#[derive(Clone, Debug)]
pub enum Controller {
    Static,
    Adaptive(Policy),
}

/// Controller plus the context it runs in.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub id: String,
    pub controller: Controller,
    pub ctx: ControlContext,
    pub env: EnvConfig,
}

impl Evaluator {
    pub fn new(id: &str, controller: Controller, base: &DynamicsParams, mpc: &MpcConfig, env: &EnvConfig) -> Result<Self> {
        let pcfg = match &controller {
            Controller::Adaptive(p) => p.cfg.clone(),
            Controller::Static => PolicyConfig::default(),
        };
        let ctx = ControlContext::new(base.clone(), action_scale(base, &pcfg), mpc.clone())?;
        Ok(Self {
            id: id.to_string(),
            controller,
            ctx,
            env: env.clone(),
        })
    }

    fn policy(&self) -> Option<&Policy> {
        match &self.controller {
            Controller::Static => None,
            Controller::Adaptive(p) => Some(p),
        }
    }

    /// One deterministic episode.
    pub fn episode(&self, cell: &Cell, seed: u64) -> Result<(EvalRecord, AccelRecord)> {
        let (mut env, x0) = Env::reset(&cell.perturbations(), seed, self.env.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buf = rollout(self.policy(), &self.ctx, &mut env, x0, false, &mut rng);
        if let Some(f) = &buf.fault {
            return Err(CliError::Runtime(format!("{} on {cell} seed {seed}: {f}", self.id)));
        }
        let r = &buf.result;
        let rec = EvalRecord {
            controller: self.id.clone(),
            perturbation: cell.name().to_string(),
            value: cell.value_label(),
            seed,
            goal_error: r.goal_error,
            route_error_total: r.route_error_total,
            route_error_mean: r.route_error_mean,
            ret: r.discounted_return,
            steps: r.steps,
            reason: r.reason.as_str().to_string(),
        };
        let acc = AccelRecord {
            controller: rec.controller.clone(),
            perturbation: rec.perturbation.clone(),
            value: rec.value.clone(),
            seed,
            mean_abs_accel: mean_abs_accel(r, self.env.dt),
        };
        Ok((rec, acc))
    }

    /// `episodes` runs per cell with seeds `seed0 + i`, in cell-major order.
    pub fn run(&self, cells: &[Cell], episodes: usize, seed0: u64) -> Result<Vec<(EvalRecord, AccelRecord)>> {
        if episodes == 0 {
            return Err(CliError::Usage("--episodes must be ≥ 1".into()));
        }
        let jobs: Vec<(Cell, u64)> = cells
            .iter()
            .flat_map(|c| (0..episodes as u64).map(move |i| (*c, seed0 + i)))
            .collect();
        jobs.par_iter().map(|(c, s)| self.episode(c, *s)).collect()
    }
}

/// Mean of `|v_{t+1} − v_t| / Δt` over the observed speeds.
pub fn mean_abs_accel(r: &EpisodeResult, dt: f64) -> f64 {
    let v = &r.speeds;
    if v.len() < 2 {
        return 0.0;
    }
    v.windows(2).map(|w| (w[1] - w[0]).abs() / dt).sum::<f64>() / (v.len() - 1) as f64
}

/// Sidecar path for the acceleration records of `csv`.
pub fn accel_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    csv.with_file_name(format!("{stem}.accel.csv"))
}

fn append<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Append records to `csv` and accelerations to its sidecar, writing headers
/// only into new files.
pub fn append_results(csv: &Path, rows: &[(EvalRecord, AccelRecord)]) -> Result<()> {
    append(csv, rows.iter().map(|r| &r.0))?;
    append(&accel_path(csv), rows.iter().map(|r| &r.1))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(CliError::Runtime(format!("{}: not an evaluation record file", path.display())));
    }
    r.deserialize().map(|x| x.map_err(CliError::from)).collect()
}

pub fn read_accels(path: &Path) -> Result<Vec<AccelRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(CliError::from)).collect()
}

/// Median, mean and interquartile range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            median: quantile(&v, 0.5),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    Summary::of(values).map_or(f64::NAN, |s| s.median)
}
