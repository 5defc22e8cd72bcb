use rand::Rng;

use super::{Environment, EnvironmentSpec, StepOutcome};
use crate::rng::StreamRng;

/// Physical constants of the simulated cart-pole. `θ = 0` is upright.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub track_half_length: f64,
    pub max_force: f64,
    /// Random-agent collection stops once `|θ|` exceeds this angle (radians).
    pub collection_angle_limit: f64,
    /// Half-widths of the uniform initial box on `x` and `θ`.
    pub initial_spread: (f64, f64),
    pub gamma: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.57,
            pole_mass: 0.23,
            half_length: 0.32,
            gravity: 9.81,
            dt: 0.01,
            track_half_length: 0.4,
            max_force: 5.0,
            collection_angle_limit: 3f64.to_radians(),
            initial_spread: (0.02, 0.01),
            gamma: 0.99,
        }
    }
}

/// Pole on a cart, state `(x, ẋ, θ, θ̇)`, reward `cos θ`.
#[derive(Debug, Clone)]
pub struct CartPole {
    params: CartPoleParams,
    spec: EnvironmentSpec,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Self {
        let spec = EnvironmentSpec {
            name: "cartpole".into(),
            state_dim: 4,
            action_dim: 1,
            action_low: vec![-params.max_force],
            action_high: vec![params.max_force],
            dt: params.dt,
            discount: params.gamma,
            r_max: 1.0,
            initial_state: format!(
                "upright, x ~ U(±{}), θ ~ U(±{}), velocities 0",
                params.initial_spread.0, params.initial_spread.1
            ),
        };
        Self { params, spec }
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    /// Semi-implicit Euler step; returns `(next_state, reward, terminal)`.
    pub fn cartpole_step(&self, state: &[f64], force: f64) -> (Vec<f64>, f64, bool) {
        let p = &self.params;
        let f = force.clamp(-p.max_force, p.max_force);
        let (x, x_dot, theta, theta_dot) = (state[0], state[1], state[2], state[3]);
        let total = p.cart_mass + p.pole_mass;
        let (sin, cos) = theta.sin_cos();
        let temp = (f + p.pole_mass * p.half_length * theta_dot * theta_dot * sin) / total;
        let theta_acc =
            (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
        let x_acc = temp - p.pole_mass * p.half_length * theta_acc * cos / total;

        let x_dot = x_dot + p.dt * x_acc;
        let x = x + p.dt * x_dot;
        let theta_dot = theta_dot + p.dt * theta_acc;
        let theta = theta + p.dt * theta_dot;
        let terminal = x.abs() > p.track_half_length;
        (vec![x, x_dot, theta, theta_dot], cos, terminal)
    }
}

impl Environment for CartPole {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let (next_state, reward, terminal) = self.cartpole_step(state, action[0]);
        StepOutcome {
            next_state,
            reward,
            terminal,
        }
    }

    fn initial_state(&self, rng: &mut StreamRng) -> Vec<f64> {
        let (sx, st) = self.params.initial_spread;
        let x = if sx > 0.0 { rng.random_range(-sx..sx) } else { 0.0 };
        let theta = if st > 0.0 { rng.random_range(-st..st) } else { 0.0 };
        vec![x, 0.0, theta, 0.0]
    }

    fn collection_done(&self, state: &[f64]) -> bool {
        state[2].abs() > self.params.collection_angle_limit
    }

    fn grid_ranges(&self) -> Vec<(f64, f64)> {
        let p = &self.params;
        vec![
            (-p.track_half_length, p.track_half_length),
            (-1.0, 1.0),
            (-p.collection_angle_limit, p.collection_angle_limit),
            (-1.0, 1.0),
            (-p.max_force, p.max_force),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn upright_rest_rewards_one() {
        let env = CartPole::new(CartPoleParams::default());
        let (next, r, done) = env.cartpole_step(&[0.0; 4], 0.0);
        assert_eq!(r, 1.0);
        assert!(!done);
        assert_eq!(next, vec![0.0; 4]);
    }

    #[test]
    fn horizontal_pole_rewards_zero() {
        let env = CartPole::new(CartPoleParams::default());
        let (_, r, _) = env.cartpole_step(&[0.0, 0.0, FRAC_PI_2, 0.0], 0.0);
        assert!(r.abs() < 1e-15);
    }

    #[test]
    fn leaving_track_is_terminal() {
        let env = CartPole::new(CartPoleParams::default());
        let (_, _, done) = env.cartpole_step(&[0.399, 1.0, 0.0, 0.0], 5.0);
        assert!(done);
    }

    #[test]
    fn pushing_right_accelerates_cart_right_and_tips_pole_left() {
        let env = CartPole::new(CartPoleParams::default());
        let (next, _, _) = env.cartpole_step(&[0.0; 4], 5.0);
        assert!(next[1] > 0.0);
        assert!(next[3] < 0.0);
        // Force is clipped.
        let (clipped, _, _) = env.cartpole_step(&[0.0; 4], 50.0);
        assert_relative_eq!(clipped[1], next[1]);
    }

    #[test]
    fn collection_stops_past_three_degrees() {
        let env = CartPole::new(CartPoleParams::default());
        assert!(!env.collection_done(&[0.0, 0.0, 2.9f64.to_radians(), 0.0]));
        assert!(env.collection_done(&[0.0, 0.0, -3.1f64.to_radians(), 0.0]));
    }
}
