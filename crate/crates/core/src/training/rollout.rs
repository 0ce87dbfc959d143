//! Episode execution: the static MPC baseline and the adaptive loop
//! (policy → θ_t → MPC → simulator), recorded into trajectory buffers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{model_step, pack_theta, unpack_theta, CompiledDynamics, Control, DynamicsParams, VehicleState, CONTROL_DIM, DT, STATE_DIM};
use crate::envsim::sim::{Env, EpisodeResult};
use crate::error::{CoreError, Result};
use crate::mpc::{MpcConfig, MpcController};
use crate::policy::{apply_action, features, BeliefState, Policy, NUM_FEATURES};

/// Everything a controller needs besides the policy itself.
#[derive(Clone, Debug)]
pub struct ControlContext {
    pub base: DynamicsParams,
    pub compiled: CompiledDynamics,
    pub scale: Vec<f64>,
    pub mpc: MpcConfig,
}

impl ControlContext {
    pub fn new(base: DynamicsParams, scale: Vec<f64>, mpc: MpcConfig) -> Result<Self> {
        mpc.validate()?;
        Ok(Self {
            compiled: base.compile()?,
            base,
            scale,
            mpc,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub u_prev: [f64; CONTROL_DIM],
    pub belief_prev: BeliefState,
    pub x: [f64; STATE_DIM],
    pub features: [f64; NUM_FEATURES],
    pub action: Vec<f64>,
    pub noise: Vec<f64>,
    pub log_prob: f64,
    /// Packed adaptable parameters `θ_t` used by the MPC at this step.
    pub theta: Vec<f64>,
    pub u: [f64; CONTROL_DIM],
    pub x_next: [f64; STATE_DIM],
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBuffer {
    pub steps: Vec<StepRecord>,
    pub returns: Vec<f64>,
    pub result: EpisodeResult,
    /// False when a solver or simulator fault aborted the episode.
    pub valid: bool,
    pub fault: Option<String>,
}

impl TrajectoryBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// `R_t = r_t + γ·R_{t+1}` with `R_{T+1} = 0`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Run one episode to termination. With `policy = None` this is the static
/// MPC baseline (`θ_t = θ_base` throughout).
pub fn rollout(
    policy: Option<&Policy>,
    ctx: &ControlContext,
    env: &mut Env,
    x0: VehicleState,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
) -> TrajectoryBuffer {
    let mut steps = Vec::new();
    let mut fault = None;
    let mut mpc = MpcController::new(ctx.mpc.clone()).expect("validated in ControlContext");
    let mut belief = policy.map(Policy::initial_belief).unwrap_or_else(|| BeliefState::zeros(0));
    let mut u_prev = Control::NEUTRAL;
    let mut x = x0;
    let mut hint = 0;
    let base_packed = pack_theta(&ctx.base);
    while !env.is_done() {
        let step = (|| -> Result<StepRecord> {
            hint = env.route.nearest_index_near([x.p, x.q], hint);
            let feats = features(&x, &u_prev, &env.route, hint);
            let (action, noise, log_prob, theta, next_belief) = match policy {
                None => (Vec::new(), Vec::new(), 0.0, base_packed.clone(), belief.clone()),
                Some(p) => {
                    let (nb, a) = p.step(&feats, &belief, stochastic, rng)?;
                    let th = apply_action(&ctx.base, &a.action, &ctx.scale)?;
                    (a.action, a.noise, a.log_prob, pack_theta(&th), nb)
                }
            };
            let u = if policy.is_none() {
                mpc.control(&x, &ctx.compiled, &env.route)?.0
            } else {
                let model = unpack_theta(&theta, &ctx.base)?.compile()?;
                mpc.control(&x, &model, &env.route)?.0
            };
            let out = env.step(&u)?;
            let rec = StepRecord {
                u_prev: u_prev.to_array(),
                belief_prev: std::mem::replace(&mut belief, next_belief),
                x: x.to_array(),
                features: feats,
                action,
                noise,
                log_prob,
                theta,
                u: u.to_array(),
                x_next: out.observation.to_array(),
                reward: out.reward,
            };
            u_prev = u;
            x = out.observation;
            Ok(rec)
        })();
        match step {
            Ok(rec) => steps.push(rec),
            Err(e) => {
                fault = Some(e.to_string());
                break;
            }
        }
    }
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let gamma = env.cfg.gamma;
    TrajectoryBuffer {
        returns: discounted_returns(&rewards, gamma),
        steps,
        result: env.result(),
        valid: fault.is_none(),
        fault,
    }
}

/// Mean one-step prediction error `‖x_t + f(x_t,u_t;θ_t)Δt − x_{t+1}‖²` over
/// the buffers, recomputed from the recorded `θ_t` with the scalar model.
pub fn replay_sysid_loss(buffers: &[TrajectoryBuffer], base: &DynamicsParams) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for b in buffers {
        for s in &b.steps {
            let th = unpack_theta(&s.theta, base)?;
            let pred = model_step(
                &VehicleState::from_array(s.x),
                &Control::from_array(s.u),
                &th,
                DT,
            )?
            .to_array();
            total += pred.iter().zip(&s.x_next).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Contract("no recorded steps".into()));
    }
    Ok(total / n as f64)
}
