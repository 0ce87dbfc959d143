//! Recurrent adaptation policy: a single LSTM network that tracks the belief
//! state and emits residual updates to the 65 adaptable dynamics parameters,
//! plus the value function and the feed-forward ablation.

use mpcrrl_nn::{tanh, Bound, LstmSpec, MlpSpec, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dynamics::{
    output_weight_name, pack_theta, unpack_theta, Control, DynamicsParams, VehicleState, F1, F2, HIDDEN,
    NUM_ADAPTABLE,
};
use crate::envsim::route::Route;
use crate::error::{CoreError, Result};

pub const NUM_FEATURES: usize = 10;
pub const ACTION_DIM: usize = NUM_ADAPTABLE;

pub const EMBED: &str = "pi.embed";
pub const LSTM: &str = "pi.lstm";
pub const FF: &str = "pi.ff";
pub const HEAD: &str = "pi.head";
pub const LOG_STD: &str = "pi.log_std";
pub const VALUE: &str = "v";

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// Observation features in the frame of the nearest route waypoint:
/// `[along, lateral, sin Δψ, cos Δψ, v/V, sin β, cos β, w, y, z]` where `u`
/// is the previous control.
pub fn features(x: &VehicleState, u_prev: &Control, route: &Route, idx: usize) -> [f64; NUM_FEATURES] {
    let wp = route.waypoints[idx.min(route.len() - 1)];
    let heading = route.heading_at(idx);
    let (sh, ch) = heading.sin_cos();
    let (dx, dy) = (x.p - wp[0], x.q - wp[1]);
    let dpsi = x.psi - heading;
    let speed_scale = if route.target_speed > 0.0 { route.target_speed } else { 1.0 };
    [
        dx * ch + dy * sh,
        -dx * sh + dy * ch,
        dpsi.sin(),
        dpsi.cos(),
        x.v / speed_scale,
        x.beta.sin(),
        x.beta.cos(),
        u_prev.w,
        u_prev.y,
        u_prev.z,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Recurrent,
    /// Memoryless ablation.
    FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed: usize,
    pub hidden: usize,
    pub log_std_init: f64,
    /// Residual scale as a fraction of each output layer's weight spread.
    pub scale_factor: f64,
    /// Residual scale of `theta0_raw`.
    pub theta0_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            hidden: 256,
            log_std_init: -2.0,
            scale_factor: 0.5,
            theta0_scale: 0.5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 {
            return Err(CoreError::Config("policy layer sizes must be positive".into()));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.log_std_init) {
            return Err(CoreError::Config(format!(
                "log_std_init must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]"
            )));
        }
        if !(self.scale_factor >= 0.0 && self.theta0_scale >= 0.0) {
            return Err(CoreError::Config("residual scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// LSTM memory `(h, c)`; all zeros at the start of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl BeliefState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyAction {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub action: Vec<f64>,
    /// Standard-normal draw behind `action` (zeros for the mean action).
    pub noise: Vec<f64>,
    pub log_prob: f64,
}

/// Diagonal-Gaussian log density.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = -0.5 * action.len() as f64 * (2.0 * PI).ln();
    for ((a, m), s) in action.iter().zip(mean).zip(log_std) {
        let z = (a - m) / s.exp();
        lp -= 0.5 * z * z + s;
    }
    lp
}

fn matvec_acc(out: &mut [f64], x: &[f64], w: &[f64]) {
    // `w` is `x.len() × out.len()`, row-major.
    let n = out.len();
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense(ps: &ParamSet, prefix: &str, layer: usize, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = ps.get(&MlpSpec::bias_name(prefix, layer))?.data().to_vec();
    matvec_acc(&mut out, x, ps.get(&MlpSpec::weight_name(prefix, layer))?.data());
    Ok(out)
}

/// Recurrent (or feed-forward) Gaussian policy `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub cfg: PolicyConfig,
    pub params: ParamSet,
}

impl Policy {
    /// Fresh policy with a zero action head and constant log-std.
    pub fn new<R: Rng + ?Sized>(kind: PolicyKind, cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = MlpSpec::new(vec![NUM_FEATURES, cfg.embed]).init(EMBED, rng);
        let head_in = match kind {
            PolicyKind::Recurrent => {
                params.extend(LstmSpec { input: cfg.embed, hidden: cfg.hidden }.init(LSTM, rng))?;
                cfg.hidden
            }
            PolicyKind::FeedForward => {
                params.extend(MlpSpec::new(vec![cfg.embed, cfg.embed]).init(FF, rng))?;
                cfg.embed
            }
        };
        params.insert(MlpSpec::weight_name(HEAD, 0), Tensor::zeros(&[head_in, ACTION_DIM]))?;
        params.insert(MlpSpec::bias_name(HEAD, 0), Tensor::zeros(&[ACTION_DIM]))?;
        params.insert(LOG_STD, Tensor::full(&[ACTION_DIM], cfg.log_std_init))?;
        Ok(Self { kind, cfg, params })
    }

    /// Rebuild from stored parameters; the kind is inferred from the tensors.
    pub fn from_params(cfg: PolicyConfig, params: ParamSet) -> Result<Self> {
        let kind = if params.contains(&LstmSpec::weight_name(LSTM)) {
            PolicyKind::Recurrent
        } else {
            PolicyKind::FeedForward
        };
        let template = Self::new(kind, cfg.clone(), &mut rand::rngs::mock::StepRng::new(0, 0))?;
        template.params.check_same_layout(&params)?;
        Ok(Self { kind, cfg, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn initial_belief(&self) -> BeliefState {
        match self.kind {
            PolicyKind::Recurrent => BeliefState::zeros(self.cfg.hidden),
            PolicyKind::FeedForward => BeliefState::zeros(0),
        }
    }

    pub fn log_std(&self) -> Result<Vec<f64>> {
        Ok(self
            .params
            .get(LOG_STD)?
            .data()
            .iter()
            .map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect())
    }

    /// Head input and next belief for one step.
    fn trunk(&self, feats: &[f64; NUM_FEATURES], belief: &BeliefState) -> Result<(Vec<f64>, BeliefState)> {
        let e: Vec<f64> = dense(&self.params, EMBED, 0, feats)?.iter().map(|v| tanh(*v)).collect();
        match self.kind {
            PolicyKind::FeedForward => {
                let h: Vec<f64> = dense(&self.params, FF, 0, &e)?.iter().map(|v| tanh(*v)).collect();
                Ok((h, BeliefState::zeros(0)))
            }
            PolicyKind::Recurrent => {
                let hs = self.cfg.hidden;
                if belief.h.len() != hs || belief.c.len() != hs {
                    return Err(CoreError::Dimension(format!(
                        "belief has {}/{} entries, policy hidden size is {hs}",
                        belief.h.len(),
                        belief.c.len()
                    )));
                }
                let w = self.params.get(&LstmSpec::weight_name(LSTM))?.data();
                let mut z = self.params.get(&LstmSpec::bias_name(LSTM))?.data().to_vec();
                let xh: Vec<f64> = e.iter().chain(&belief.h).copied().collect();
                matvec_acc(&mut z, &xh, w);
                let mut h = vec![0.0; hs];
                let mut c = vec![0.0; hs];
                for k in 0..hs {
                    let i = sigmoid(z[k]);
                    let f = sigmoid(z[hs + k]);
                    let g = tanh(z[2 * hs + k]);
                    let o = sigmoid(z[3 * hs + k]);
                    c[k] = f * belief.c[k] + i * g;
                    h[k] = o * tanh(c[k]);
                }
                Ok((h.clone(), BeliefState { h, c }))
            }
        }
    }

    /// One step of the policy: update the belief and emit an action. The
    /// action is sampled when `stochastic`, otherwise it is the mean.
    pub fn step<R: Rng + ?Sized>(
        &self,
        feats: &[f64; NUM_FEATURES],
        belief: &BeliefState,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<(BeliefState, PolicyAction)> {
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Domain(format!("non-finite policy features {feats:?}")));
        }
        let (trunk, next) = self.trunk(feats, belief)?;
        let mean = dense(&self.params, HEAD, 0, &trunk)?;
        let log_std = self.log_std()?;
        let noise: Vec<f64> = if stochastic {
            (0..ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; ACTION_DIM]
        };
        let action: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .zip(&noise)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        let log_prob = gaussian_log_prob(&action, &mean, &log_std);
        if !(log_prob.is_finite() && next.is_finite() && mean.iter().all(|m| m.is_finite())) {
            return Err(CoreError::Numeric("non-finite policy output".into()));
        }
        Ok((
            next,
            PolicyAction {
                mean,
                log_std,
                action,
                noise,
                log_prob,
            },
        ))
    }

    /// Memoryless step for the feed-forward variant.
    pub fn feedforward_step<R: Rng + ?Sized>(
        &self,
        feats: &[f64; NUM_FEATURES],
        stochastic: bool,
        rng: &mut R,
    ) -> Result<PolicyAction> {
        if self.kind != PolicyKind::FeedForward {
            return Err(CoreError::Contract("feedforward_step on a recurrent policy".into()));
        }
        Ok(self.step(feats, &BeliefState::zeros(0), stochastic, rng)?.1)
    }

    /// Batched trunk on a tape for one time step: `feats` is `B × 10`, `h`
    /// and `c` are `B × hidden` (ignored for the feed-forward variant).
    pub fn tape_step(&self, tape: &mut Tape, bound: &Bound, feats: Var, h: Var, c: Var) -> Result<TapeStep> {
        let e = MlpSpec::new(vec![NUM_FEATURES, self.cfg.embed]).forward(tape, bound, EMBED, feats)?;
        let e = tape.tanh(e);
        let (trunk, h2, c2) = match self.kind {
            PolicyKind::FeedForward => {
                let f = MlpSpec::new(vec![self.cfg.embed, self.cfg.embed]).forward(tape, bound, FF, e)?;
                (tape.tanh(f), h, c)
            }
            PolicyKind::Recurrent => {
                let spec = LstmSpec {
                    input: self.cfg.embed,
                    hidden: self.cfg.hidden,
                };
                let (h2, c2) = spec.step(tape, bound, LSTM, e, h, c)?;
                (h2, h2, c2)
            }
        };
        let head_in = tape.value(trunk).cols();
        let mean = MlpSpec::new(vec![head_in, ACTION_DIM]).forward(tape, bound, HEAD, trunk)?;
        Ok(TapeStep { mean, h: h2, c: c2 })
    }

    /// Clamped log-std on a tape.
    pub fn tape_log_std(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let s = bound.get(LOG_STD)?;
        Ok(tape.clamp(s, LOG_STD_MIN, LOG_STD_MAX))
    }
}

pub struct TapeStep {
    pub mean: Var,
    pub h: Var,
    pub c: Var,
}

/// Per-entry residual scales for the 65 adaptable parameters.
pub fn action_scale(base: &DynamicsParams, cfg: &PolicyConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(ACTION_DIM);
    out.push(cfg.theta0_scale);
    for prefix in [F1, F2] {
        let w = base.nets.get(&output_weight_name(prefix)).expect("network layout").data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        out.extend(std::iter::repeat(cfg.scale_factor * std).take(HIDDEN));
    }
    out
}

/// `θ_t = θ_base + tanh(action)·scale` on the adaptable entries.
pub fn apply_action(base: &DynamicsParams, action: &[f64], scale: &[f64]) -> Result<DynamicsParams> {
    if action.len() != ACTION_DIM || scale.len() != ACTION_DIM {
        return Err(CoreError::Dimension(format!(
            "action/scale lengths {}/{}, expected {ACTION_DIM}",
            action.len(),
            scale.len()
        )));
    }
    let packed: Vec<f64> = pack_theta(base)
        .iter()
        .zip(action)
        .zip(scale)
        .map(|((b, a), s)| b + tanh(*a) * s)
        .collect();
    unpack_theta(&packed, base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub hidden: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// Critic `Q(x_t, θ_t; φ)` over the features and the policy action.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl ValueFunction {
    pub fn new<R: Rng + ?Sized>(cfg: &ValueConfig, rng: &mut R) -> Self {
        let spec = Self::spec_for(cfg);
        let params = spec.init(VALUE, rng);
        Self { spec, params }
    }

    pub fn spec_for(cfg: &ValueConfig) -> MlpSpec {
        MlpSpec::new(vec![NUM_FEATURES + ACTION_DIM, cfg.hidden, cfg.hidden, 1])
    }

    pub fn from_params(cfg: &ValueConfig, params: ParamSet) -> Result<Self> {
        let spec = Self::spec_for(cfg);
        let template = spec.init(VALUE, &mut rand::rngs::mock::StepRng::new(0, 0));
        template.check_same_layout(&params)?;
        Ok(Self { spec, params })
    }

    fn input(feats: &[f64; NUM_FEATURES], action: &[f64]) -> Result<Tensor> {
        if action.len() != ACTION_DIM {
            return Err(CoreError::Dimension(format!("action has {} entries", action.len())));
        }
        Ok(Tensor::row(feats.iter().chain(action).copied().collect()))
    }

    pub fn value(&self, feats: &[f64; NUM_FEATURES], action: &[f64]) -> Result<f64> {
        let x = Self::input(feats, action)?;
        Ok(mpcrrl_nn::mlp_forward(&self.params, VALUE, &self.spec, &x)?.data()[0])
    }

    /// Value and its gradient with respect to the action.
    pub fn value_action_grad(&self, feats: &[f64; NUM_FEATURES], action: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let f = tape.constant(Tensor::row(feats.to_vec()));
        let a = tape.leaf(Tensor::row(action.to_vec()));
        let x = tape.concat_cols(&[f, a])?;
        let y = self.spec.forward(&mut tape, &bound, VALUE, x)?;
        let s = tape.sum(y);
        let g = tape.backward(s)?;
        Ok((tape.value(y).data()[0], g.wrt(a).into_data()))
    }

    /// Add `delta` to the output bias.
    pub fn shift_output(&mut self, delta: f64) -> Result<()> {
        let last = self.spec.num_layers() - 1;
        self.params.values_mut(&MlpSpec::bias_name(VALUE, last))?[0] += delta;
        Ok(())
    }

    /// Batched values on a tape; `x` is `B × (features + action)`.
    pub fn tape_value(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(self.spec.forward(tape, bound, VALUE, x)?)
    }
}
