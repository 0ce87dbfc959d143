//! Ground-truth vehicle: a dynamic bicycle with saturating tires, blended
//! into the kinematic bicycle at walking speed, integrated with RK4.

use serde::{Deserialize, Serialize};

use super::params::{GroundTruthParams, Perturbation, GRAVITY};
use super::route::{generate_route, Route};
use crate::dynamics::{Control, VehicleState};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimModel {
    /// Dynamic bicycle with tire forces (the default ground truth).
    Dynamic,
    /// Pure kinematic bicycle, used as a model-matched oracle.
    Kinematic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub inner_steps: usize,
    pub target_speed: f64,
    pub capture_radius: f64,
    pub off_route_distance: f64,
    pub max_steps: usize,
    /// Weight on the previous value in the slip-angle readout filter.
    pub beta_smoothing: f64,
    pub gamma: f64,
    pub model: SimModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            inner_steps: 10,
            target_speed: 5.0,
            capture_radius: 2.0,
            off_route_distance: 20.0,
            max_steps: 500,
            beta_smoothing: 0.9,
            gamma: 0.99,
            model: SimModel::Dynamic,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.inner_steps == 0 || self.max_steps == 0 {
            return Err(CoreError::Config("Δt, inner steps and max steps must be positive".into()));
        }
        if !(self.capture_radius > 0.0 && self.off_route_distance > 0.0 && self.target_speed >= 0.0) {
            return Err(CoreError::Config("capture radius, off-route distance and target speed must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta_smoothing) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(CoreError::Config("smoothing must be in [0, 1) and γ in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    Goal,
    OffRoute,
    Timeout,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Goal => "goal",
            Self::OffRoute => "off_route",
            Self::Timeout => "timeout",
        }
    }
}

/// Hidden simulator state: world pose, body-frame velocities and yaw rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub beta_obs: f64,
    pub steps: usize,
}

impl SimState {
    fn vector(&self) -> [f64; 6] {
        [self.x, self.y, self.psi, self.vx, self.vy, self.r]
    }

    fn is_finite(&self) -> bool {
        self.vector().iter().all(|v| v.is_finite()) && self.beta_obs.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: VehicleState,
    pub reward: f64,
    pub done: bool,
    pub reason: Option<TerminationReason>,
    pub goal_error: f64,
    pub route_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub goal_error: f64,
    pub route_error_total: f64,
    pub route_error_mean: f64,
    pub discounted_return: f64,
    pub steps: usize,
    pub reason: TerminationReason,
    /// Observed speed at every step, starting with the reset observation.
    pub speeds: Vec<f64>,
}

/// `exp(−e_g/100)·exp(−e_r)`.
pub fn reward(goal_error: f64, route_error: f64) -> Result<f64> {
    if !(goal_error >= 0.0 && route_error >= 0.0) {
        return Err(CoreError::Contract(format!(
            "errors must be non-negative, got ({goal_error}, {route_error})"
        )));
    }
    Ok((-goal_error / 100.0).exp() * (-route_error).exp())
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Speeds (m/s) between which the lateral model blends from kinematic to
/// dynamic, and the kinematic relaxation time (s).
const BLEND_LO: f64 = 1.0;
const BLEND_HI: f64 = 3.0;
const KIN_TAU: f64 = 0.05;

fn derivative(g: &GroundTruthParams, model: SimModel, s: &[f64; 6], u: &Control) -> [f64; 6] {
    let [_, _, psi, vx, vy, r] = *s;
    let vx = vx.max(0.0);
    let delta = g.max_steer * u.w;
    let speed = vx.hypot(vy);
    let fx = g.longitudinal_force(speed, u.y, u.z);
    let (sp, cp) = psi.sin_cos();
    let x_dot = vx * cp - vy * sp;
    let y_dot = vx * sp + vy * cp;

    let tan_beta = g.l_r / g.wheelbase() * delta.tan();
    let vy_kin = vx * tan_beta;
    let r_kin = vx * delta.tan() / g.wheelbase();
    let kin = [fx / g.mass, (vy_kin - vy) / KIN_TAU, (r_kin - r) / KIN_TAU];
    let lambda = match model {
        SimModel::Kinematic => 0.0,
        SimModel::Dynamic => smoothstep((vx - BLEND_LO) / (BLEND_HI - BLEND_LO)),
    };
    let mut body = kin;
    if lambda > 0.0 {
        let c = g.tire_friction * g.cornering_gain;
        let fmax = g.tire_friction * g.mass * GRAVITY / 2.0;
        let vxe = vx.max(BLEND_LO);
        let alpha_f = delta - (vy + g.l_f * r).atan2(vxe);
        let alpha_r = -(vy - g.l_r * r).atan2(vxe);
        let fyf = fmax * (c * alpha_f / fmax).tanh();
        let fyr = fmax * (c * alpha_r / fmax).tanh();
        let (sd, cd) = delta.sin_cos();
        let dynm = [
            (fx - fyf * sd) / g.mass + vy * r,
            (fyf * cd + fyr) / g.mass - vx * r,
            (g.l_f * fyf * cd - g.l_r * fyr) / g.yaw_inertia(),
        ];
        for k in 0..3 {
            body[k] = lambda * dynm[k] + (1.0 - lambda) * kin[k];
        }
    }
    [x_dot, y_dot, r, body[0], body[1], body[2]]
}

fn rk4(g: &GroundTruthParams, model: SimModel, s: [f64; 6], u: &Control, h: f64) -> [f64; 6] {
    let add = |a: &[f64; 6], b: &[f64; 6], k: f64| {
        let mut o = *a;
        for i in 0..6 {
            o[i] += k * b[i];
        }
        o
    };
    let k1 = derivative(g, model, &s, u);
    let k2 = derivative(g, model, &add(&s, &k1, h / 2.0), u);
    let k3 = derivative(g, model, &add(&s, &k2, h / 2.0), u);
    let k4 = derivative(g, model, &add(&s, &k3, h), u);
    let mut out = s;
    for i in 0..6 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    // No reverse gear.
    if out[3] < 0.0 {
        out[3] = 0.0;
        out[4] = 0.0;
        out[5] = 0.0;
    }
    out
}

/// One episode's simulator: ground-truth parameters, route and hidden state.
#[derive(Clone, Debug)]
pub struct Env {
    pub cfg: EnvConfig,
    pub params: GroundTruthParams,
    pub route: Route,
    state: SimState,
    done: bool,
    route_error_total: f64,
    discounted_return: f64,
    discount: f64,
    last_goal_error: f64,
    speeds: Vec<f64>,
    reason: Option<TerminationReason>,
}

impl Env {
    /// Training defaults overridden by `perturbations`; the route comes from
    /// `(seed, town)`. The vehicle starts at rest on the first waypoint,
    /// aligned with the route.
    pub fn reset(perturbations: &[Perturbation], seed: u64, cfg: EnvConfig) -> Result<(Env, VehicleState)> {
        let params = GroundTruthParams::with_perturbations(perturbations)?;
        Self::reset_with(params, seed, cfg)
    }

    pub fn reset_with(params: GroundTruthParams, seed: u64, cfg: EnvConfig) -> Result<(Env, VehicleState)> {
        params.validate()?;
        cfg.validate()?;
        let route = generate_route(seed, params.town, cfg.target_speed);
        Self::reset_on_route(params, route, cfg)
    }

    pub fn reset_on_route(params: GroundTruthParams, route: Route, cfg: EnvConfig) -> Result<(Env, VehicleState)> {
        params.validate()?;
        cfg.validate()?;
        let start = route.waypoints[0];
        let state = SimState {
            x: start[0],
            y: start[1],
            psi: route.heading_at(0),
            vx: 0.0,
            vy: 0.0,
            r: 0.0,
            beta_obs: 0.0,
            steps: 0,
        };
        let env = Env {
            last_goal_error: route.goal_error(start),
            cfg,
            params,
            route,
            state,
            done: false,
            route_error_total: 0.0,
            discounted_return: 0.0,
            discount: 1.0,
            speeds: vec![0.0],
            reason: None,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observe(&self) -> VehicleState {
        let s = &self.state;
        VehicleState::new(s.x, s.y, s.psi, s.vx.hypot(s.vy), s.beta_obs)
    }

    fn raw_beta(&self) -> f64 {
        let s = &self.state;
        if s.vx.hypot(s.vy) < 1e-3 {
            0.0
        } else {
            s.vy.atan2(s.vx)
        }
    }

    pub fn step(&mut self, u: &Control) -> Result<StepOutcome> {
        if self.done {
            return Err(CoreError::Contract("step called on a finished episode".into()));
        }
        if !u.in_box() {
            return Err(CoreError::Domain(format!("control outside the box: {u:?}")));
        }
        let h = self.cfg.dt / self.cfg.inner_steps as f64;
        let mut v = self.state.vector();
        for _ in 0..self.cfg.inner_steps {
            v = rk4(&self.params, self.cfg.model, v, u, h);
        }
        let [x, y, psi, vx, vy, r] = v;
        self.state = SimState {
            x,
            y,
            psi,
            vx,
            vy,
            r,
            beta_obs: self.state.beta_obs,
            steps: self.state.steps + 1,
        };
        let a = self.cfg.beta_smoothing;
        self.state.beta_obs = a * self.state.beta_obs + (1.0 - a) * self.raw_beta();
        if !self.state.is_finite() {
            self.done = true;
            return Err(CoreError::Simulation(format!(
                "non-finite state after step {}: {:?}",
                self.state.steps, self.state
            )));
        }
        let pos = [x, y];
        let e_g = self.route.goal_error(pos);
        let e_r = self.route.route_error(pos);
        let r = reward(e_g, e_r)?;
        self.route_error_total += e_r;
        self.discounted_return += self.discount * r;
        self.discount *= self.cfg.gamma;
        self.last_goal_error = e_g;
        let obs = self.observe();
        self.speeds.push(obs.v);
        let reason = if e_g <= self.cfg.capture_radius {
            Some(TerminationReason::Goal)
        } else if e_r > self.cfg.off_route_distance {
            Some(TerminationReason::OffRoute)
        } else if self.state.steps >= self.cfg.max_steps {
            Some(TerminationReason::Timeout)
        } else {
            None
        };
        self.done = reason.is_some();
        self.reason = reason;
        Ok(StepOutcome {
            observation: obs,
            reward: r,
            done: self.done,
            reason,
            goal_error: e_g,
            route_error: e_r,
        })
    }

    /// Summary of the episode so far (final once `is_done`).
    pub fn result(&self) -> EpisodeResult {
        let steps = self.state.steps;
        EpisodeResult {
            goal_error: self.last_goal_error,
            route_error_total: self.route_error_total,
            route_error_mean: if steps == 0 { 0.0 } else { self.route_error_total / steps as f64 },
            discounted_return: self.discounted_return,
            steps,
            reason: self.reason.unwrap_or(TerminationReason::Timeout),
            speeds: self.speeds.clone(),
        }
    }
}
