//! Kinematic bicycle model and a discrete planning model built on it.

use super::params::GroundTruthParams;
use crate::dynamics::{ControlMatrix, StateMatrix, VehicleState, CONTROL_DIM, STATE_DIM};
use crate::error::{CoreError, Result};
use crate::mpc::InternalModel;

/// Time derivative of `(p, q, ψ, v)` plus the algebraic slip angle `β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinematicDerivative {
    pub p_dot: f64,
    pub q_dot: f64,
    pub psi_dot: f64,
    pub v_dot: f64,
    pub beta: f64,
}

pub fn slip_angle(delta_f: f64, l_f: f64, l_r: f64) -> f64 {
    (l_r / (l_f + l_r) * delta_f.tan()).atan()
}

pub fn kinematic_bicycle_derivative(
    x: &VehicleState,
    accel: f64,
    delta_f: f64,
    l_f: f64,
    l_r: f64,
) -> Result<KinematicDerivative> {
    if !(l_f > 0.0 && l_r > 0.0) {
        return Err(CoreError::Domain(format!("axle distances must be positive: {l_f}, {l_r}")));
    }
    if delta_f.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(CoreError::Domain(format!("|δ_f| must be < π/2, got {delta_f}")));
    }
    let beta = slip_angle(delta_f, l_f, l_r);
    Ok(KinematicDerivative {
        p_dot: x.v * (x.psi + beta).cos(),
        q_dot: x.v * (x.psi + beta).sin(),
        psi_dot: x.v / l_r * beta.sin(),
        v_dot: accel,
        beta,
    })
}

/// Euler-discretized kinematic bicycle using the ground-truth drivetrain,
/// brake and resistance terms. The state's `β` is replaced by the slip angle
/// implied by the applied steering.
#[derive(Clone, Debug)]
pub struct KinematicModel {
    pub params: GroundTruthParams,
}

impl KinematicModel {
    pub fn new(params: GroundTruthParams) -> Self {
        Self { params }
    }
}

impl InternalModel for KinematicModel {
    fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], dt: f64) -> [f64; STATE_DIM] {
        self.step_jacobians(x, u, dt).0
    }

    fn step_jacobians(
        &self,
        x: &[f64; STATE_DIM],
        u: &[f64; CONTROL_DIM],
        dt: f64,
    ) -> ([f64; STATE_DIM], StateMatrix, ControlMatrix) {
        let g = &self.params;
        let [p, q, psi, v, _] = *x;
        let v = v.max(0.0);
        let delta = g.max_steer * u[0];
        let ratio = g.l_r / g.wheelbase();
        let tan_d = delta.tan();
        let beta = (ratio * tan_d).atan();
        let dbeta_dw = ratio * g.max_steer * (1.0 + tan_d * tan_d) / (1.0 + (ratio * tan_d).powi(2));
        let heading = psi + beta;
        let (sh, ch) = heading.sin_cos();
        let (sb, cb) = beta.sin_cos();
        let force = g.longitudinal_force(v, u[1], u[2]);
        let fg = g.longitudinal_force_grad(v, u[1], u[2]);
        let v_raw = v + dt * force / g.mass;
        let v_next = v_raw.max(0.0);
        let next = [
            p + dt * v * ch,
            q + dt * v * sh,
            psi + dt * v * sb / g.l_r,
            v_next,
            beta,
        ];

        let mut a = StateMatrix::zeros();
        let mut b = ControlMatrix::zeros();
        a[(0, 0)] = 1.0;
        a[(0, 2)] = -dt * v * sh;
        a[(0, 3)] = dt * ch;
        b[(0, 0)] = -dt * v * sh * dbeta_dw;
        a[(1, 1)] = 1.0;
        a[(1, 2)] = dt * v * ch;
        a[(1, 3)] = dt * sh;
        b[(1, 0)] = dt * v * ch * dbeta_dw;
        a[(2, 2)] = 1.0;
        a[(2, 3)] = dt * sb / g.l_r;
        b[(2, 0)] = dt * v * cb / g.l_r * dbeta_dw;
        if v_raw > 0.0 {
            a[(3, 3)] = 1.0 + dt * fg[0] / g.mass;
            b[(3, 1)] = dt * fg[1] / g.mass;
            b[(3, 2)] = dt * fg[2] / g.mass;
        }
        b[(4, 0)] = dbeta_dw;
        (next, a, b)
    }
}
