//! Simulated control tasks and dataset generators.

mod cartpole;
mod generate;
mod lqr;
mod mountaincar;
mod pendulum;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cartpole::{CartPole, CartPoleParams};
pub use generate::{
    generate_random_agent, generate_uniform_grid, scripted_demonstrator, BehaviorPolicy, DemonstratorParams,
    StartSampler,
};
pub use lqr::{Lqr, LqrParams};
pub use mountaincar::MountainCar;
pub use pendulum::Pendulum;

use crate::error::NopgError;
use crate::rng::StreamRng;

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    /// Dimension of the observation the dataset and the policy see.
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub dt: f64,
    pub discount: f64,
    /// Bound on `|r|`; infinite for the unbounded LQR task.
    pub r_max: f64,
    pub initial_state: String,
}

/// Outcome of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// A control task. `state` arguments are internal simulator states; the
/// dataset and the policy operate on [`observe`](Environment::observe)d states.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvironmentSpec;

    /// Dimension of the internal simulator state.
    fn internal_dim(&self) -> usize {
        self.spec().state_dim
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome;

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }

    /// Sample from the initial-state distribution `μ₀`.
    fn initial_state(&self, rng: &mut StreamRng) -> Vec<f64>;

    /// Start state for trajectory-based data collection.
    fn collection_start(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.initial_state(rng)
    }

    /// Start state for evaluation rollouts.
    fn evaluation_start(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.initial_state(rng)
    }

    /// Whether data collection stops (and marks the row terminal) after reaching `state`.
    fn collection_done(&self, _state: &[f64]) -> bool {
        false
    }

    /// Ranges of the internal state dimensions followed by the action dimensions,
    /// used by the uniform-grid generator.
    fn grid_ranges(&self) -> Vec<(f64, f64)>;

    fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let spec = self.spec();
        action
            .iter()
            .zip(spec.action_low.iter().zip(&spec.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }
}

/// The four shipped tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Lqr,
    Pendulum,
    Cartpole,
    Mountaincar,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [EnvName::Lqr, EnvName::Pendulum, EnvName::Cartpole, EnvName::Mountaincar];

    pub fn build(self) -> AnyEnv {
        match self {
            EnvName::Lqr => AnyEnv::Lqr(Lqr::new(LqrParams::default())),
            EnvName::Pendulum => AnyEnv::Pendulum(Pendulum::new()),
            EnvName::Cartpole => AnyEnv::Cartpole(CartPole::new(CartPoleParams::default())),
            EnvName::Mountaincar => AnyEnv::Mountaincar(MountainCar::new()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Lqr => "lqr",
            EnvName::Pendulum => "pendulum",
            EnvName::Cartpole => "cartpole",
            EnvName::Mountaincar => "mountaincar",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = NopgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lqr" => Ok(EnvName::Lqr),
            "pendulum" => Ok(EnvName::Pendulum),
            "cartpole" => Ok(EnvName::Cartpole),
            "mountaincar" => Ok(EnvName::Mountaincar),
            other => Err(NopgError::InvalidInput(format!("unknown environment {other:?}"))),
        }
    }
}

/// Closed set of environments, dispatching statically.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Lqr(Lqr),
    Pendulum(Pendulum),
    Cartpole(CartPole),
    Mountaincar(MountainCar),
}

macro_rules! dispatch {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            AnyEnv::Lqr($env) => $body,
            AnyEnv::Pendulum($env) => $body,
            AnyEnv::Cartpole($env) => $body,
            AnyEnv::Mountaincar($env) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn spec(&self) -> &EnvironmentSpec {
        dispatch!(self, e => e.spec())
    }
    fn internal_dim(&self) -> usize {
        dispatch!(self, e => e.internal_dim())
    }
    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        dispatch!(self, e => e.step(state, action))
    }
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        dispatch!(self, e => e.observe(state))
    }
    fn initial_state(&self, rng: &mut StreamRng) -> Vec<f64> {
        dispatch!(self, e => e.initial_state(rng))
    }
    fn collection_start(&self, rng: &mut StreamRng) -> Vec<f64> {
        dispatch!(self, e => e.collection_start(rng))
    }
    fn evaluation_start(&self, rng: &mut StreamRng) -> Vec<f64> {
        dispatch!(self, e => e.evaluation_start(rng))
    }
    fn collection_done(&self, state: &[f64]) -> bool {
        dispatch!(self, e => e.collection_done(state))
    }
    fn grid_ranges(&self) -> Vec<(f64, f64)> {
        dispatch!(self, e => e.grid_ranges())
    }
    fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        dispatch!(self, e => e.clip_action(action))
    }
}

impl AnyEnv {
    pub fn name(&self) -> EnvName {
        match self {
            AnyEnv::Lqr(_) => EnvName::Lqr,
            AnyEnv::Pendulum(_) => EnvName::Pendulum,
            AnyEnv::Cartpole(_) => EnvName::Cartpole,
            AnyEnv::Mountaincar(_) => EnvName::Mountaincar,
        }
    }
}
