//! Ground-truth simulator, routes and perturbations.

pub mod kinematic;
pub mod params;
pub mod route;
pub mod sim;

pub use params::{GroundTruthParams, Perturbation, Phase, PerturbationSpec, PERTURBATION_NAMES};
pub use route::{generate_route, Route, RouteFamily};
pub use sim::{reward, Env, EnvConfig, EpisodeResult, SimModel, SimState, StepOutcome, TerminationReason};
