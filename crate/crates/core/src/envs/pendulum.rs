use std::f64::consts::PI;

use super::{Environment, EnvironmentSpec, StepOutcome};
use crate::rng::StreamRng;

const G: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;

/// Under-actuated swing-up pendulum with gym dynamics. `θ = 0` is upright.
///
/// Internal state is `(θ, θ̇)`; the observation is `(cos θ, sin θ, θ̇)`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvironmentSpec,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

/// Wraps an angle to `[−π, π)`.
pub fn angle_normalize(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            spec: EnvironmentSpec {
                name: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-MAX_TORQUE],
                action_high: vec![MAX_TORQUE],
                dt: DT,
                discount: 0.97,
                r_max: PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE,
                initial_state: "fixed bottom position (θ = π, θ̇ = 0)".into(),
            },
        }
    }

    /// `(θ′, θ̇′, reward)`.
    pub fn pendulum_step(theta: f64, theta_dot: f64, torque: f64) -> (f64, f64, f64) {
        let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
        let th = angle_normalize(theta);
        let cost = th * th + 0.1 * theta_dot * theta_dot + 0.001 * u * u;
        let new_dot = (theta_dot + (3.0 * G / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u) * DT)
            .clamp(-MAX_SPEED, MAX_SPEED);
        let new_th = angle_normalize(theta + new_dot * DT);
        (new_th, new_dot, -cost)
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn internal_dim(&self) -> usize {
        2
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let (th, dot, reward) = Self::pendulum_step(state[0], state[1], action[0]);
        StepOutcome {
            next_state: vec![th, dot],
            reward,
            terminal: false,
        }
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0].cos(), state[0].sin(), state[1]]
    }

    fn initial_state(&self, _rng: &mut StreamRng) -> Vec<f64> {
        vec![PI, 0.0]
    }

    /// Random-agent trajectories start upright.
    fn collection_start(&self, _rng: &mut StreamRng) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn grid_ranges(&self) -> Vec<(f64, f64)> {
        vec![(-PI, PI), (-MAX_SPEED, MAX_SPEED), (-MAX_TORQUE, MAX_TORQUE)]
    }
}
