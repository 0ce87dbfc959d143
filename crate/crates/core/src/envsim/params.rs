//! Ground-truth vehicle parameters and the perturbation protocol.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::route::RouteFamily;
use crate::error::{CoreError, Result};

pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthParams {
    /// Multiplies the drive force.
    pub final_ratio: f64,
    /// Multiplies the nominal yaw inertia `mass·l_f·l_r`.
    pub moi: f64,
    /// Sets tire cornering stiffness and lateral force saturation.
    pub tire_friction: f64,
    /// Velocity-proportional resistance, scaled by `damping_gain`.
    pub damping_rate: f64,
    /// Quadratic aerodynamic drag coefficient (N·s²/m²).
    pub drag_coefficient: f64,
    pub town: RouteFamily,
    pub mass: f64,
    pub l_f: f64,
    pub l_r: f64,
    /// Drive force per unit `final_ratio·throttle` (N).
    pub engine_gain: f64,
    /// Brake force at full brake (N).
    pub brake_gain: f64,
    /// `c₀` in `damping_rate·c₀·v` (N·s/m).
    pub damping_gain: f64,
    /// Cornering stiffness per unit tire_friction, per axle (N/rad).
    pub cornering_gain: f64,
    /// Front wheel angle at full steering (rad).
    pub max_steer: f64,
}

impl Default for GroundTruthParams {
    fn default() -> Self {
        Self {
            final_ratio: 4.0,
            moi: 1.0,
            tire_friction: 3.5,
            damping_rate: 0.25,
            drag_coefficient: 0.15,
            town: RouteFamily::Town01,
            mass: 1000.0,
            l_f: 1.2,
            l_r: 1.4,
            engine_gain: 1000.0,
            brake_gain: 6000.0,
            damping_gain: 40.0,
            cornering_gain: 20000.0,
            max_steer: 0.6,
        }
    }
}

/// Below this speed the brake force fades out smoothly.
const BRAKE_FADE: f64 = 0.05;

impl GroundTruthParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("final_ratio", self.final_ratio),
            ("moi", self.moi),
            ("tire_friction", self.tire_friction),
            ("damping_rate", self.damping_rate),
            ("drag_coefficient", self.drag_coefficient),
            ("mass", self.mass),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("engine_gain", self.engine_gain),
            ("brake_gain", self.brake_gain),
            ("damping_gain", self.damping_gain),
            ("cornering_gain", self.cornering_gain),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.max_steer > 0.0 && self.max_steer < std::f64::consts::FRAC_PI_2) {
            return Err(CoreError::Config(format!("max_steer must be in (0, π/2), got {}", self.max_steer)));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn yaw_inertia(&self) -> f64 {
        self.moi * self.mass * self.l_f * self.l_r
    }

    /// Net longitudinal force at speed `v ≥ 0`.
    pub fn longitudinal_force(&self, v: f64, throttle: f64, brake: f64) -> f64 {
        self.final_ratio * self.engine_gain * throttle
            - self.brake_gain * brake * (v / BRAKE_FADE).tanh()
            - self.drag_coefficient * v * v
            - self.damping_rate * self.damping_gain * v
    }

    /// `(∂F/∂v, ∂F/∂y, ∂F/∂z)`.
    pub fn longitudinal_force_grad(&self, v: f64, _throttle: f64, brake: f64) -> [f64; 3] {
        let t = (v / BRAKE_FADE).tanh();
        [
            -self.brake_gain * brake * (1.0 - t * t) / BRAKE_FADE
                - 2.0 * self.drag_coefficient * v
                - self.damping_rate * self.damping_gain,
            self.final_ratio * self.engine_gain,
            -self.brake_gain * t,
        ]
    }

    pub fn apply(&mut self, p: &Perturbation) -> Result<()> {
        match *p {
            Perturbation::FinalRatio(v) => self.final_ratio = v,
            Perturbation::Moi(v) => self.moi = v,
            Perturbation::TireFriction(v) => self.tire_friction = v,
            Perturbation::DampingRate(v) => self.damping_rate = v,
            Perturbation::DragCoefficient(v) => self.drag_coefficient = v,
            Perturbation::Town(f) => self.town = f,
        }
        self.validate()
    }

    pub fn with_perturbations(perturbations: &[Perturbation]) -> Result<Self> {
        let mut out = Self::default();
        for p in perturbations {
            out.apply(p)?;
        }
        Ok(out)
    }
}

/// One Table 1 parameter override. Serialized as `name=value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Perturbation {
    FinalRatio(f64),
    Moi(f64),
    TireFriction(f64),
    DampingRate(f64),
    DragCoefficient(f64),
    Town(RouteFamily),
}

pub const PERTURBATION_NAMES: [&str; 6] = [
    "final_ratio",
    "moi",
    "tire_friction",
    "damping_rate",
    "drag_coefficient",
    "town",
];

impl Perturbation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FinalRatio(_) => "final_ratio",
            Self::Moi(_) => "moi",
            Self::TireFriction(_) => "tire_friction",
            Self::DampingRate(_) => "damping_rate",
            Self::DragCoefficient(_) => "drag_coefficient",
            Self::Town(_) => "town",
        }
    }

    pub fn value_label(&self) -> String {
        match self {
            Self::FinalRatio(v)
            | Self::Moi(v)
            | Self::TireFriction(v)
            | Self::DampingRate(v)
            | Self::DragCoefficient(v) => format!("{v}"),
            Self::Town(f) => f.name().to_string(),
        }
    }

    /// Numeric value; towns map to their index among the testing towns.
    pub fn numeric(&self) -> f64 {
        match *self {
            Self::FinalRatio(v)
            | Self::Moi(v)
            | Self::TireFriction(v)
            | Self::DampingRate(v)
            | Self::DragCoefficient(v) => v,
            Self::Town(f) => RouteFamily::TOWNS.iter().position(|t| *t == f).unwrap_or(0) as f64,
        }
    }

    pub fn parse(name: &str, value: &str) -> Result<Self> {
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| CoreError::Config(format!("`{value}` is not a number for {name}")))
        };
        let p = match name.trim() {
            "final_ratio" => Self::FinalRatio(num()?),
            "moi" => Self::Moi(num()?),
            "tire_friction" => Self::TireFriction(num()?),
            "damping_rate" => Self::DampingRate(num()?),
            "drag_coefficient" => Self::DragCoefficient(num()?),
            "town" => Self::Town(value.trim().parse()?),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown perturbation `{other}`; expected one of {}",
                    PERTURBATION_NAMES.join(", ")
                )))
            }
        };
        GroundTruthParams::default().apply(&p)?;
        Ok(p)
    }

    /// Training-column value of the same parameter.
    pub fn training_value(name: &str) -> Result<Perturbation> {
        let d = GroundTruthParams::default();
        Ok(match name {
            "final_ratio" => Self::FinalRatio(d.final_ratio),
            "moi" => Self::Moi(d.moi),
            "tire_friction" => Self::TireFriction(d.tire_friction),
            "damping_rate" => Self::DampingRate(d.damping_rate),
            "drag_coefficient" => Self::DragCoefficient(d.drag_coefficient),
            "town" => Self::Town(d.town),
            other => return Err(CoreError::Config(format!("unknown perturbation `{other}`"))),
        })
    }

    /// The three testing-column values for `name`.
    pub fn testing_values(name: &str) -> Result<[Perturbation; 3]> {
        Ok(match name {
            "final_ratio" => [2.0, 5.0, 10.0].map(Self::FinalRatio),
            "moi" => [0.4, 1.3, 1.9].map(Self::Moi),
            "tire_friction" => [0.5, 2.25, 4.0].map(Self::TireFriction),
            "damping_rate" => [5e-3, 0.5, 50.0].map(Self::DampingRate),
            "drag_coefficient" => [1e-4, 0.2, 100.0].map(Self::DragCoefficient),
            "town" => [RouteFamily::Town04, RouteFamily::Town02, RouteFamily::Town06].map(Self::Town),
            other => return Err(CoreError::Config(format!("unknown perturbation `{other}`"))),
        })
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.name(), self.value_label())
    }
}

impl From<Perturbation> for String {
    fn from(p: Perturbation) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Perturbation {
    type Error = CoreError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Perturbation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("perturbation `{s}` must be name=value")))?;
        Self::parse(name, value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub perturbation: Perturbation,
    pub phase: Phase,
}
