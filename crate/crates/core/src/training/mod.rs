//! System identification warm start and policy training.

pub mod ppo;
pub mod rollout;
pub mod sysid;

use mpcrrl_nn::{save_checkpoint, Adam, AdamConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::dynamics::DynamicsParams;
use crate::envsim::params::{GroundTruthParams, Perturbation};
use crate::envsim::sim::{Env, EnvConfig};
use crate::error::{CoreError, Result};
use crate::mpc::MpcConfig;
use crate::policy::{action_scale, Policy, PolicyConfig, PolicyKind, ValueConfig, ValueFunction};

pub use ppo::{objective_terms, ppo_update, ModelTemplate, Objective, ObjectiveTerms, PpoConfig, UpdateStats};
pub use rollout::{discounted_returns, replay_sysid_loss, rollout, ControlContext, StepRecord, TrajectoryBuffer};
pub use sysid::{collect_sysid_data, fit_sysid, CollectConfig, FitConfig, SysidDataset, SysidFit, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    /// Outer iterations `K`.
    pub iterations: usize,
    /// Episodes per iteration `N`.
    pub episodes: usize,
    pub max_steps: usize,
    pub clip: f64,
    pub ppo: PpoConfig,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub seed: u64,
    pub policy_kind: PolicyKind,
    /// Drop the reward surrogate and minimize `α·J2` only.
    pub sysid_only: bool,
    /// Each training episode draws one entry uniformly (empty: training column).
    pub train_perturbations: Vec<Vec<Perturbation>>,
    pub policy: PolicyConfig,
    pub value: ValueConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 1.0,
            iterations: 200,
            episodes: 16,
            max_steps: 500,
            clip: 0.2,
            ppo: PpoConfig::default(),
            policy_lr: 3e-4,
            value_lr: 1e-3,
            seed: 0,
            policy_kind: PolicyKind::Recurrent,
            sysid_only: false,
            train_perturbations: Vec::new(),
            policy: PolicyConfig::default(),
            value: ValueConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            use_reward: !self.sysid_only,
            clip: self.clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CoreError::Config(format!("γ must be in [0, 1], got {}", self.gamma)));
        }
        if self.episodes == 0 || self.max_steps == 0 || self.ppo.epochs == 0 || self.ppo.bptt == 0 {
            return Err(CoreError::Config("episodes, max_steps, epochs and bptt must be ≥ 1".into()));
        }
        if !(self.policy_lr > 0.0 && self.value_lr > 0.0) {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        for set in &self.train_perturbations {
            GroundTruthParams::with_perturbations(set)?;
        }
        self.policy.validate()?;
        self.objective().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_return: f64,
    pub goal_rate: f64,
    pub j2: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub explained_variance: f64,
    pub invalid_episodes: usize,
    pub wall_time: f64,
}

pub const CURVE_HEADER: &str = "iteration,mean_return,j2,value_loss,kl,wall_time,goal_rate,explained_variance,invalid_episodes";

impl IterationStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{},{},{}",
            self.iteration,
            self.mean_return,
            self.j2,
            self.value_loss,
            self.kl,
            self.wall_time,
            self.goal_rate,
            self.explained_variance,
            self.invalid_episodes
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub value: ValueFunction,
    pub curve: Vec<IterationStats>,
}

/// Per-episode seed derived from the run seed, iteration and slot.
pub fn episode_seed(seed: u64, iteration: usize, slot: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_0000_0000);
    r.set_stream(((iteration as u64) << 20) | slot as u64);
    r.gen()
}

/// Collect `n` stochastic episodes in parallel under the current policy.
pub fn collect_rollouts(
    policy: &Policy,
    ctx: &ControlContext,
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<TrajectoryBuffer>> {
    (0..cfg.episodes)
        .into_par_iter()
        .map(|slot| {
            let seed = episode_seed(cfg.seed, iteration, slot);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perturbations = if cfg.train_perturbations.is_empty() {
                Vec::new()
            } else {
                cfg.train_perturbations[rng.gen_range(0..cfg.train_perturbations.len())].clone()
            };
            let env_cfg = EnvConfig {
                gamma: cfg.gamma,
                max_steps: cfg.max_steps,
                ..env_cfg.clone()
            };
            let (mut env, x0) = Env::reset(&perturbations, seed, env_cfg)?;
            Ok(rollout(Some(policy), ctx, &mut env, x0, true, &mut rng))
        })
        .collect()
}

/// Algorithm 2: `K` rounds of rollouts and PPO updates starting from a fresh
/// policy. When `out_dir` is given, checkpoints and the learning curve are
/// written after every iteration.
pub fn train(
    cfg: &TrainConfig,
    base: &DynamicsParams,
    mpc: &MpcConfig,
    env_cfg: &EnvConfig,
    out_dir: Option<&Path>,
    mut on_iteration: impl FnMut(&IterationStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::new(cfg.policy_kind, cfg.policy.clone(), &mut rng)?;
    let mut value = ValueFunction::new(&cfg.value, &mut rng);
    let scale = action_scale(base, &cfg.policy);
    let ctx = ControlContext::new(base.clone(), scale.clone(), mpc.clone())?;
    let model = ModelTemplate::new(base, &scale)?;
    let mut popt = Adam::new(&policy.params, AdamConfig::with_lr(cfg.policy_lr));
    let mut vopt = Adam::new(&value.params, AdamConfig::with_lr(cfg.value_lr));
    let obj = cfg.objective();
    let mut curve = Vec::new();
    let mut calibrated = false;
    let started = Instant::now();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::Config(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("curve.csv"), format!("{CURVE_HEADER}\n"))
            .map_err(|e| CoreError::Config(format!("curve.csv: {e}")))?;
        save_checkpoint(&policy.params, &dir.join("policy.ckpt"))?;
        save_checkpoint(&value.params, &dir.join("value.ckpt"))?;
    }
    for k in 0..cfg.iterations {
        let buffers = collect_rollouts(&policy, &ctx, env_cfg, cfg, k)?;
        let valid: Vec<&TrajectoryBuffer> = buffers.iter().filter(|b| b.valid && !b.is_empty()).collect();
        let invalid = buffers.len() - valid.len();
        let mean_return = if valid.is_empty() {
            0.0
        } else {
            valid.iter().map(|b| b.returns[0]).sum::<f64>() / valid.len() as f64
        };
        let goal_rate = buffers
            .iter()
            .filter(|b| b.result.reason == crate::envsim::sim::TerminationReason::Goal)
            .count() as f64
            / buffers.len() as f64;
        let stats = if valid.is_empty() {
            UpdateStats::default()
        } else {
            if !calibrated {
                ppo::calibrate_value(&mut value, &valid)?;
                calibrated = true;
            }
            ppo_update(&mut policy, &mut value, &mut popt, &mut vopt, &buffers, &model, &obj, &cfg.ppo, &mut rng)?
        };
        let it = IterationStats {
            iteration: k,
            mean_return,
            goal_rate,
            j2: stats.j2,
            value_loss: stats.value_loss,
            kl: stats.approx_kl,
            explained_variance: stats.explained_variance,
            invalid_episodes: invalid,
            wall_time: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            save_checkpoint(&policy.params, &dir.join("policy.ckpt"))?;
            save_checkpoint(&value.params, &dir.join("value.ckpt"))?;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(dir.join("curve.csv"))
                .map_err(|e| CoreError::Config(format!("curve.csv: {e}")))?;
            writeln!(f, "{}", it.csv_row()).map_err(|e| CoreError::Config(format!("curve.csv: {e}")))?;
        }
        on_iteration(&it);
        curve.push(it);
    }
    Ok(TrainOutcome { policy, value, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            episodes: 2,
            max_steps: 12,
            policy: PolicyConfig {
                embed: 6,
                hidden: 5,
                ..PolicyConfig::default()
            },
            value: ValueConfig { hidden: 8 },
            ..TrainConfig::default()
        }
    }

    fn base() -> DynamicsParams {
        DynamicsParams::init(1.4, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn zero_iterations_return_initial_parameters() {
        let cfg = small(0);
        let out = train(&cfg, &base(), &MpcConfig::default(), &EnvConfig::default(), None, |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = Policy::new(cfg.policy_kind, cfg.policy.clone(), &mut rng).unwrap();
        let value = ValueFunction::new(&cfg.value, &mut rng);
        assert_eq!(out.policy.params, fresh.params);
        assert_eq!(out.value.params, value.params);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let cfg = small(2);
        let dir = tempfile::tempdir().unwrap();
        let run = |out: Option<&Path>| train(&cfg, &base(), &MpcConfig::default(), &EnvConfig::default(), out, |_| {}).unwrap();
        let a = run(Some(dir.path()));
        let b = run(None);
        assert_eq!(a.policy.params, b.policy.params);
        assert_eq!(a.curve.len(), 2);
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(
                (x.mean_return, x.j2, x.value_loss, x.kl),
                (y.mean_return, y.j2, y.value_loss, y.kl)
            );
        }
        let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(CURVE_HEADER));
        let saved = mpcrrl_nn::load_checkpoint(&dir.path().join("policy.ckpt")).unwrap();
        assert_eq!(saved, a.policy.params);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            episodes: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
        let cfg = TrainConfig {
            alpha: 0.0,
            sysid_only: true,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }
}
