//! Tracking cost: soft-min distance to the waypoint window, speed deviation,
//! control magnitude, and a terminal distance to the window's last waypoint.
//! Controls enter the cost after squashing.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Control, VehicleState};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub c_position: f64,
    pub c_speed: f64,
    pub c_control: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            c_position: 0.04,
            c_speed: 0.002,
            c_control: 0.0005,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.c_position, self.c_speed, self.c_control]
            .iter()
            .any(|c| !(*c >= 0.0) || !c.is_finite())
        {
            return Err(CoreError::Config(format!("cost weights must be ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Widths of the smooth surrogates used for the cost derivatives (values
/// stay exact).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub speed: f64,
    pub control: f64,
    pub terminal: f64,
    pub distance: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            speed: 0.5,
            control: 0.1,
            terminal: 1.0,
            distance: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceWindow {
    pub waypoints: Vec<[f64; 2]>,
    pub target_speed: f64,
}

impl ReferenceWindow {
    pub fn new(waypoints: Vec<[f64; 2]>, target_speed: f64) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(CoreError::Contract("reference window has no waypoints".into()));
        }
        if !waypoints.iter().flatten().all(|v| v.is_finite()) || !target_speed.is_finite() {
            return Err(CoreError::Domain("non-finite reference window".into()));
        }
        Ok(Self {
            waypoints,
            target_speed,
        })
    }

    pub fn goal(&self) -> [f64; 2] {
        *self.waypoints.last().expect("non-empty window")
    }
}

pub fn squash(raw: [f64; 3]) -> Control {
    Control::new(raw[0].sin(), (raw[1].sin() + 1.0) / 2.0, (raw[2].sin() + 1.0) / 2.0)
}

/// Diagonal of `∂squash/∂raw` and of the second derivative.
fn squash_derivs(raw: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    (
        [raw[0].cos(), raw[1].cos() / 2.0, raw[2].cos() / 2.0],
        [-raw[0].sin(), -raw[1].sin() / 2.0, -raw[2].sin() / 2.0],
    )
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `−log((1/|G|) Σ exp(−‖pos − g_k‖))`, evaluated stably.
pub fn soft_distance(pos: [f64; 2], waypoints: &[[f64; 2]]) -> Result<f64> {
    if waypoints.is_empty() {
        return Err(CoreError::Contract("soft distance over an empty waypoint set".into()));
    }
    Ok(soft_distance_unchecked(pos, waypoints))
}

fn soft_distance_unchecked(pos: [f64; 2], waypoints: &[[f64; 2]]) -> f64 {
    let d: Vec<f64> = waypoints.iter().map(|g| distance(pos, *g)).collect();
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = d.iter().map(|di| (-(di - dmin)).exp()).sum::<f64>() / d.len() as f64;
    dmin - mean.ln()
}

pub fn stage_cost(x: &VehicleState, raw_u: [f64; 3], window: &ReferenceWindow, cfg: &CostConfig) -> Result<f64> {
    if window.waypoints.is_empty() {
        return Err(CoreError::Contract("stage cost over an empty window".into()));
    }
    Ok(stage_cost_unchecked(x, raw_u, window, cfg))
}

fn stage_cost_unchecked(x: &VehicleState, raw_u: [f64; 3], window: &ReferenceWindow, cfg: &CostConfig) -> f64 {
    let u = squash(raw_u);
    let unorm = (u.w * u.w + u.y * u.y + u.z * u.z).sqrt();
    cfg.c_position * soft_distance_unchecked([x.p, x.q], &window.waypoints)
        + cfg.c_speed * (x.v - window.target_speed).abs()
        + cfg.c_control * unorm
}

pub fn terminal_cost(x: &VehicleState, window: &ReferenceWindow) -> Result<f64> {
    if window.waypoints.is_empty() {
        return Err(CoreError::Contract("terminal cost over an empty window".into()));
    }
    Ok(distance([x.p, x.q], window.goal()))
}

/// Gradient and positive-semidefinite Hessian approximation of the stage cost
/// in `(p, q)`, `v` and the raw controls.
pub(crate) struct StageDerivs {
    pub pos_grad: Vector2<f64>,
    pub pos_hess: Matrix2<f64>,
    pub v_grad: f64,
    pub v_hess: f64,
    pub u_grad: Vector3<f64>,
    pub u_hess: Matrix3<f64>,
}

pub(crate) fn stage_derivs(
    x: &VehicleState,
    raw_u: [f64; 3],
    window: &ReferenceWindow,
    cfg: &CostConfig,
    smooth: &Smoothing,
) -> StageDerivs {
    // Soft-min distance: weights π_k = softmax(−d_k); Gauss-Newton Hessian
    // keeps Σ π_k ∇²d_k + ḡḡᵀ and drops the negative covariance term.
    let pos = Vector2::new(x.p, x.q);
    let eps2 = smooth.distance * smooth.distance;
    let d: Vec<f64> = window
        .waypoints
        .iter()
        .map(|g| distance([x.p, x.q], *g))
        .collect();
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|di| (-(di - dmin)).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let mut g = Vector2::zeros();
    let mut hdist = Matrix2::zeros();
    for (k, gk) in window.waypoints.iter().enumerate() {
        let pi = w[k] / wsum;
        let r = pos - Vector2::new(gk[0], gk[1]);
        let ds = (r.norm_squared() + eps2).sqrt();
        let n = r / ds;
        g += pi * n;
        hdist += pi * (Matrix2::identity() - n * n.transpose()) / ds;
    }
    let pos_hess = cfg.c_position * (hdist + g * g.transpose());
    let pos_grad = cfg.c_position * g;

    let dv = x.v - window.target_speed;
    let sv = (dv * dv + smooth.speed * smooth.speed).sqrt();
    let v_grad = cfg.c_speed * dv / sv;
    let v_hess = cfg.c_speed * smooth.speed * smooth.speed / (sv * sv * sv);

    let u = squash(raw_u).to_array();
    let uvec = Vector3::new(u[0], u[1], u[2]);
    let su = (uvec.norm_squared() + smooth.control * smooth.control).sqrt();
    let gu = cfg.c_control * uvec / su;
    let hu = cfg.c_control * (Matrix3::identity() - uvec * uvec.transpose() / (su * su)) / su;
    let (j, j2) = squash_derivs(raw_u);
    let jm = Matrix3::from_diagonal(&Vector3::new(j[0], j[1], j[2]));
    let u_grad = jm * gu;
    let mut u_hess = jm * hu * jm;
    for k in 0..3 {
        u_hess[(k, k)] += (gu[k] * j2[k]).max(0.0);
    }
    StageDerivs {
        pos_grad,
        pos_hess,
        v_grad,
        v_hess,
        u_grad,
        u_hess,
    }
}

/// Gradient and Hessian of the smoothed terminal distance in `(p, q)`.
pub(crate) fn terminal_derivs(x: &VehicleState, window: &ReferenceWindow, smooth: &Smoothing) -> (Vector2<f64>, Matrix2<f64>) {
    let goal = window.goal();
    let r = Vector2::new(x.p - goal[0], x.q - goal[1]);
    let e2 = smooth.terminal * smooth.terminal;
    let s = (r.norm_squared() + e2).sqrt();
    let grad = r / s;
    let hess = (Matrix2::identity() * (r.norm_squared() + e2) - r * r.transpose()) / (s * s * s);
    (grad, hess)
}

/// Evaluate the exact stage cost without the emptiness check (hot path).
pub(crate) fn stage_cost_fast(x: &VehicleState, raw_u: [f64; 3], window: &ReferenceWindow, cfg: &CostConfig) -> f64 {
    stage_cost_unchecked(x, raw_u, window, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn on_waypoint(v: f64) -> (VehicleState, ReferenceWindow) {
        (
            VehicleState::new(2.0, 3.0, 0.0, v, 0.0),
            ReferenceWindow::new(vec![[2.0, 3.0]], 5.0).unwrap(),
        )
    }

    #[test]
    fn soft_distance_examples() {
        assert_eq!(soft_distance([0.0, 0.0], &[[3.0, 0.0]]).unwrap(), 3.0);
        let d = soft_distance([0.0, 0.0], &[[0.0, 2.0], [2.0, 0.0]]).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
        let d = soft_distance([0.0, 0.0], &[[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let want = 2f64.ln() - (1.0 + (-10f64).exp()).ln();
        assert!((d - want).abs() < 1e-15);
        assert!((d - 0.69310).abs() < 1e-5);
        assert!(matches!(soft_distance([0.0, 0.0], &[]), Err(CoreError::Contract(_))));
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash([0.0, -FRAC_PI_2, -FRAC_PI_2]), Control::new(0.0, 0.0, 0.0));
        assert_eq!(squash([FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2]), Control::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn stage_cost_examples() {
        let cfg = CostConfig::default();
        let neutral = [0.0, -FRAC_PI_2, -FRAC_PI_2];
        let (x, win) = on_waypoint(5.0);
        assert_eq!(stage_cost(&x, neutral, &win, &cfg).unwrap(), 0.0);
        let (x, win) = on_waypoint(6.0);
        assert!((stage_cost(&x, neutral, &win, &cfg).unwrap() - 0.002).abs() < 1e-15);
        let (x, win) = on_waypoint(5.0);
        let c = stage_cost(&x, [FRAC_PI_2, -FRAC_PI_2, -FRAC_PI_2], &win, &cfg).unwrap();
        assert!((c - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn terminal_cost_examples() {
        let win = ReferenceWindow::new(vec![[0.0, 0.0], [1.0, 1.0]], 5.0).unwrap();
        let at = VehicleState::new(1.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(terminal_cost(&at, &win).unwrap(), 0.0);
        let off = VehicleState::new(4.0, 5.0, 0.0, 0.0, 0.0);
        assert_eq!(terminal_cost(&off, &win).unwrap(), 5.0);
        let shifted_win = ReferenceWindow::new(vec![[10.0, -7.0], [11.0, -6.0]], 5.0).unwrap();
        let shifted = VehicleState::new(14.0, -2.0, 0.0, 0.0, 0.0);
        assert_eq!(terminal_cost(&shifted, &shifted_win).unwrap(), 5.0);
    }

    #[test]
    fn empty_window_is_rejected() {
        assert!(matches!(ReferenceWindow::new(vec![], 5.0), Err(CoreError::Contract(_))));
    }

    #[test]
    fn derivative_surrogates_agree_far_from_kinks() {
        // Away from the smoothing scale the surrogate gradients match the
        // exact cost gradient closely.
        let cfg = CostConfig::default();
        let smooth = Smoothing {
            speed: 1e-4,
            control: 1e-4,
            terminal: 1e-4,
            distance: 1e-4,
        };
        let win = ReferenceWindow::new(vec![[3.0, 1.0], [4.0, 1.5], [5.0, 1.2]], 5.0).unwrap();
        let x = VehicleState::new(0.5, -0.3, 0.0, 2.0, 0.0);
        let raw = [0.3, 0.4, -1.0];
        let d = stage_derivs(&x, raw, &win, &cfg, &smooth);
        let h = 1e-6;
        let f = |x: &VehicleState, r: [f64; 3]| stage_cost(x, r, &win, &cfg).unwrap();
        let mut xp = x;
        xp.p += h;
        let mut xm = x;
        xm.p -= h;
        assert!(((f(&xp, raw) - f(&xm, raw)) / (2.0 * h) - d.pos_grad[0]).abs() < 1e-7);
        let mut xp = x;
        xp.v += h;
        let mut xm = x;
        xm.v -= h;
        assert!(((f(&xp, raw) - f(&xm, raw)) / (2.0 * h) - d.v_grad).abs() < 1e-7);
        for k in 0..3 {
            let (mut rp, mut rm) = (raw, raw);
            rp[k] += h;
            rm[k] -= h;
            assert!(((f(&x, rp) - f(&x, rm)) / (2.0 * h) - d.u_grad[k]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn soft_min_bounds(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..30),
            px in -50.0f64..50.0,
            py in -50.0f64..50.0,
        ) {
            let g: Vec<[f64; 2]> = pts.iter().map(|(a, b)| [*a, *b]).collect();
            let d = soft_distance([px, py], &g).unwrap();
            let dmin = g.iter().map(|w| distance([px, py], *w)).fold(f64::INFINITY, f64::min);
            prop_assert!(d >= dmin - 1e-12);
            prop_assert!(d <= dmin + (g.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn squash_stays_in_box(a in -1e6f64..1e6, b in -1e6f64..1e6, c in -1e6f64..1e6) {
            prop_assert!(squash([a, b, c]).in_box());
        }
    }
}
