use rand::Rng;

use super::{Environment, EnvironmentSpec, StepOutcome};
use crate::rng::StreamRng;

pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.45;
const POWER: f64 = 0.0015;

/// Continuous mountain car with a constant −1 reward per step.
#[derive(Debug, Clone)]
pub struct MountainCar {
    spec: EnvironmentSpec,
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl MountainCar {
    pub fn new() -> Self {
        Self {
            spec: EnvironmentSpec {
                name: "mountaincar".into(),
                state_dim: 2,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                dt: 1.0,
                discount: 0.99,
                r_max: 1.0,
                initial_state: "position ~ U(-0.6, -0.4), velocity 0".into(),
            },
        }
    }

    /// `(next_state, reward, terminal)`.
    pub fn mountaincar_step(state: &[f64], force: f64) -> (Vec<f64>, f64, bool) {
        let u = force.clamp(-1.0, 1.0);
        let (pos, vel) = (state[0], state[1]);
        let mut vel = (vel + u * POWER - 0.0025 * (3.0 * pos).cos()).clamp(-MAX_SPEED, MAX_SPEED);
        let pos = (pos + vel).clamp(MIN_POSITION, MAX_POSITION);
        if pos == MIN_POSITION && vel < 0.0 {
            vel = 0.0;
        }
        (vec![pos, vel], -1.0, pos >= GOAL_POSITION)
    }
}

impl Environment for MountainCar {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let (next_state, reward, terminal) = Self::mountaincar_step(state, action[0]);
        StepOutcome {
            next_state,
            reward,
            terminal,
        }
    }

    /// Position and velocity in units of the speed limit, so both inputs of
    /// a policy network are of order one.
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0], state[1] / MAX_SPEED]
    }

    fn initial_state(&self, rng: &mut StreamRng) -> Vec<f64> {
        vec![rng.random_range(-0.6..-0.4), 0.0]
    }

    fn grid_ranges(&self) -> Vec<(f64, f64)> {
        vec![(MIN_POSITION, MAX_POSITION), (-MAX_SPEED, MAX_SPEED), (-1.0, 1.0)]
    }
}
