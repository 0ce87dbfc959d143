//! Receding-horizon tracking controller solved with iLQR over squashed
//! controls.

pub mod cost;
pub mod ilqr;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::dynamics::{CompiledDynamics, Control, ControlMatrix, StateMatrix, VehicleState, CONTROL_DIM, STATE_DIM};
use crate::envsim::route::Route;
use crate::error::{CoreError, Result};

pub use cost::{soft_distance, squash, stage_cost, terminal_cost, CostConfig, ReferenceWindow, Smoothing};
pub use ilqr::{IlqrOptions, IlqrSolution, StageQuadratic, TrajectoryProblem};

/// Discrete-time model the controller plans with. Controls are physical
/// (already squashed).
pub trait InternalModel: Sync {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], dt: f64) -> [f64; STATE_DIM];
    fn step_jacobians(
        &self,
        x: &[f64; STATE_DIM],
        u: &[f64; CONTROL_DIM],
        dt: f64,
    ) -> ([f64; STATE_DIM], StateMatrix, ControlMatrix);
}

impl InternalModel for CompiledDynamics {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], dt: f64) -> [f64; STATE_DIM] {
        CompiledDynamics::step(self, x, u, dt)
    }

    fn step_jacobians(
        &self,
        x: &[f64; STATE_DIM],
        u: &[f64; CONTROL_DIM],
        dt: f64,
    ) -> ([f64; STATE_DIM], StateMatrix, ControlMatrix) {
        CompiledDynamics::step_jacobians(self, x, u, dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Waypoints ahead of the nearest one that form the reference window.
    pub window: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_factor: f64,
    pub backtracks: u32,
    /// Raw throttle/brake offset from the neutral point used on a cold start.
    pub cold_start_offset: f64,
    pub cost: CostConfig,
    pub smoothing: Smoothing,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            window: 10,
            max_iters: 10,
            tolerance: 1e-6,
            mu_init: 1e-6,
            mu_min: 1e-6,
            mu_max: 1e10,
            mu_factor: 10.0,
            backtracks: 10,
            cold_start_offset: 0.1,
            cost: CostConfig::default(),
            smoothing: Smoothing::default(),
        }
    }
}

impl MpcConfig {
    pub fn ilqr_options(&self) -> IlqrOptions {
        IlqrOptions {
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            mu_init: self.mu_init,
            mu_min: self.mu_min,
            mu_max: self.mu_max,
            mu_factor: self.mu_factor,
            backtracks: self.backtracks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(CoreError::Config("MPC horizon must be ≥ 1".into()));
        }
        if self.window == 0 {
            return Err(CoreError::Config("MPC window must be ≥ 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(CoreError::Config("MPC Δt must be positive".into()));
        }
        self.cost.validate()?;
        self.ilqr_options().validate()
    }

    /// Neutral steering, throttle and brake slightly off their stationary
    /// point so the solver sees a non-zero gradient.
    pub fn cold_start(&self) -> Vec<[f64; 3]> {
        let r = -FRAC_PI_2 + self.cold_start_offset;
        vec![[0.0, r, r]; self.horizon]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub states: Vec<VehicleState>,
    pub raw: Vec<[f64; 3]>,
    pub controls: Vec<Control>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub accepted_costs: Vec<f64>,
}

impl MpcSolution {
    /// Previous raw controls shifted by one step, last one repeated.
    pub fn shifted_raw(&self) -> Vec<[f64; 3]> {
        let mut out: Vec<[f64; 3]> = self.raw.iter().skip(1).copied().collect();
        out.push(*self.raw.last().expect("non-empty solution"));
        out
    }
}

struct VehicleProblem<'a, M: InternalModel + ?Sized> {
    model: &'a M,
    window: &'a ReferenceWindow,
    cfg: &'a MpcConfig,
}

fn to_state(x: &SVector<f64, STATE_DIM>) -> VehicleState {
    VehicleState::new(x[0], x[1], x[2], x[3], x[4])
}

fn raw_of(u: &SVector<f64, CONTROL_DIM>) -> [f64; 3] {
    [u[0], u[1], u[2]]
}

impl<M: InternalModel + ?Sized> TrajectoryProblem<STATE_DIM, CONTROL_DIM> for VehicleProblem<'_, M> {
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn step(&self, x: &SVector<f64, STATE_DIM>, u: &SVector<f64, CONTROL_DIM>) -> SVector<f64, STATE_DIM> {
        let xa = [x[0], x[1], x[2], x[3], x[4]];
        SVector::from(self.model.step(&xa, &squash(raw_of(u)).to_array(), self.cfg.dt))
    }

    fn linearize(
        &self,
        x: &SVector<f64, STATE_DIM>,
        u: &SVector<f64, CONTROL_DIM>,
    ) -> (StateMatrix, ControlMatrix) {
        let xa = [x[0], x[1], x[2], x[3], x[4]];
        let raw = raw_of(u);
        let (_, a, b) = self.model.step_jacobians(&xa, &squash(raw).to_array(), self.cfg.dt);
        let j = Matrix3::from_diagonal(&Vector3::new(raw[0].cos(), raw[1].cos() / 2.0, raw[2].cos() / 2.0));
        (a, b * j)
    }

    fn stage_cost(&self, _: usize, x: &SVector<f64, STATE_DIM>, u: &SVector<f64, CONTROL_DIM>) -> f64 {
        cost::stage_cost_fast(&to_state(x), raw_of(u), self.window, &self.cfg.cost)
    }

    fn stage_quadratic(
        &self,
        _: usize,
        x: &SVector<f64, STATE_DIM>,
        u: &SVector<f64, CONTROL_DIM>,
    ) -> StageQuadratic<STATE_DIM, CONTROL_DIM> {
        let d = cost::stage_derivs(&to_state(x), raw_of(u), self.window, &self.cfg.cost, &self.cfg.smoothing);
        let mut q = StageQuadratic::zeros();
        q.lx[0] = d.pos_grad[0];
        q.lx[1] = d.pos_grad[1];
        q.lx[3] = d.v_grad;
        for r in 0..2 {
            for c in 0..2 {
                q.lxx[(r, c)] = d.pos_hess[(r, c)];
            }
        }
        q.lxx[(3, 3)] = d.v_hess;
        q.lu = d.u_grad;
        q.luu = d.u_hess;
        q
    }

    fn terminal_cost(&self, x: &SVector<f64, STATE_DIM>) -> f64 {
        let g = self.window.goal();
        (x[0] - g[0]).hypot(x[1] - g[1])
    }

    fn terminal_quadratic(&self, x: &SVector<f64, STATE_DIM>) -> (SVector<f64, STATE_DIM>, StateMatrix) {
        let (g, h) = cost::terminal_derivs(&to_state(x), self.window, &self.cfg.smoothing);
        let mut lx = SVector::zeros();
        lx[0] = g[0];
        lx[1] = g[1];
        let mut lxx = SMatrix::zeros();
        for r in 0..2 {
            for c in 0..2 {
                lxx[(r, c)] = h[(r, c)];
            }
        }
        (lx, lxx)
    }
}

/// Solve the horizon problem from `x_init`. `warm` supplies the initial raw
/// control sequence (use [`MpcSolution::shifted_raw`] between calls); `None`
/// is a cold start.
pub fn ilqr_solve<M: InternalModel + ?Sized>(
    x_init: &VehicleState,
    model: &M,
    window: &ReferenceWindow,
    cfg: &MpcConfig,
    warm: Option<Vec<[f64; 3]>>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    if !x_init.is_finite() || x_init.v < 0.0 {
        return Err(CoreError::Domain(format!("invalid initial state {x_init:?}")));
    }
    let init = warm.unwrap_or_else(|| cfg.cold_start());
    if init.len() != cfg.horizon {
        return Err(CoreError::Dimension(format!(
            "warm start has {} controls, horizon is {}",
            init.len(),
            cfg.horizon
        )));
    }
    let problem = VehicleProblem { model, window, cfg };
    let us: Vec<SVector<f64, CONTROL_DIM>> = init.iter().map(|r| SVector::from(*r)).collect();
    let x0 = SVector::from(x_init.to_array());
    let sol = ilqr::solve(&problem, &x0, us, &cfg.ilqr_options())?;
    if !sol.cost.is_finite() {
        return Err(CoreError::Numeric(format!("MPC cost {}", sol.cost)));
    }
    let raw: Vec<[f64; 3]> = sol.us.iter().map(raw_of).collect();
    Ok(MpcSolution {
        states: sol.xs.iter().map(to_state).collect(),
        controls: raw.iter().map(|r| squash(*r)).collect(),
        raw,
        cost: sol.cost,
        iterations: sol.iterations,
        converged: sol.converged,
        accepted_costs: sol.accepted_costs,
    })
}

/// Stateful wrapper: tracks route progress and warm-starts each solve from
/// the previous one.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub cfg: MpcConfig,
    warm: Option<MpcSolution>,
    progress: usize,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            warm: None,
            progress: 0,
        })
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.progress = 0;
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.warm.as_ref()
    }

    /// Reference window for a vehicle at `x`, advancing the progress index.
    pub fn window_for(&mut self, x: &VehicleState, route: &Route) -> Result<ReferenceWindow> {
        let idx = route.nearest_index_near([x.p, x.q], self.progress);
        self.progress = idx;
        route.window(idx, self.cfg.window)
    }

    pub fn control<M: InternalModel + ?Sized>(
        &mut self,
        x: &VehicleState,
        model: &M,
        route: &Route,
    ) -> Result<(Control, MpcSolution)> {
        let window = self.window_for(x, route)?;
        let warm = self.warm.as_ref().map(MpcSolution::shifted_raw);
        let sol = ilqr_solve(x, model, &window, &self.cfg, warm)?;
        let u = sol.controls[0];
        self.warm = Some(sol.clone());
        Ok((u, sol))
    }
}
