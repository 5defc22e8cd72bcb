use nalgebra::{DMatrix, DVector};

use super::{Environment, EnvironmentSpec, StepOutcome};
use crate::rng::StreamRng;

/// Discrete linear-quadratic system `x′ = Ax + Bu`, reward `½(xᵀQx + uᵀRu)`.
///
/// The reward is maximized with the matrices as given (negative `Q`, positive
/// `R` by default). `negate_r` flips the sign of `R` for the conventional
/// cost-penalizing form.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub gamma: f64,
    pub negate_r: bool,
}

impl Default for LqrParams {
    fn default() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 1.1]),
            b: DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]),
            q: DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, -0.25]),
            r: DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 0.01]),
            x0: DVector::from_vec(vec![1.0, 1.0]),
            gamma: 0.9,
            negate_r: false,
        }
    }
}

impl LqrParams {
    /// `R` with the configured sign convention applied.
    pub fn effective_r(&self) -> DMatrix<f64> {
        if self.negate_r {
            -&self.r
        } else {
            self.r.clone()
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct Lqr {
    params: LqrParams,
    r_eff: DMatrix<f64>,
    spec: EnvironmentSpec,
}

impl Lqr {
    pub fn new(params: LqrParams) -> Self {
        let ds = params.state_dim();
        let da = params.action_dim();
        let spec = EnvironmentSpec {
            name: "lqr".into(),
            state_dim: ds,
            action_dim: da,
            action_low: vec![-1e6; da],
            action_high: vec![1e6; da],
            dt: 1.0,
            discount: params.gamma,
            r_max: f64::INFINITY,
            initial_state: format!("fixed x0 = {:?}", params.x0.as_slice()),
        };
        Self {
            r_eff: params.effective_r(),
            params,
            spec,
        }
    }

    pub fn params(&self) -> &LqrParams {
        &self.params
    }

    /// `(x′, r)` for state `x` and action `u`.
    pub fn lqr_step(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
        let xv = DVector::from_column_slice(x);
        let uv = DVector::from_column_slice(u);
        let next = &self.params.a * &xv + &self.params.b * &uv;
        let reward = 0.5 * ((xv.transpose() * &self.params.q * &xv)[0] + (uv.transpose() * &self.r_eff * &uv)[0]);
        (next.as_slice().to_vec(), reward)
    }
}

impl Environment for Lqr {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let (next_state, reward) = self.lqr_step(state, action);
        StepOutcome {
            next_state,
            reward,
            terminal: false,
        }
    }

    fn initial_state(&self, _rng: &mut StreamRng) -> Vec<f64> {
        self.params.x0.as_slice().to_vec()
    }

    fn grid_ranges(&self) -> Vec<(f64, f64)> {
        let mut r = vec![(-2.0, 2.0); self.params.state_dim()];
        r.extend(vec![(-4.0, 4.0); self.params.action_dim()]);
        r
    }
}
