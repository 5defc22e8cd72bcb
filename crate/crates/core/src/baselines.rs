//! Reference gradient estimators: importance-weighted G(PO)MDP and an offline
//! semi-gradient DPG with a quadratic critic.

use nalgebra::{DMatrix, DVector};

use crate::dataset::TransitionDataset;
use crate::error::{NopgError, Result};
use crate::policy::{DifferentiablePolicy, LinearPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub behavior_logp: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Vec<Step>>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Vec<Step>>) -> Result<Self> {
        for (k, traj) in trajectories.iter().enumerate() {
            for step in traj {
                let finite = step.reward.is_finite()
                    && step.behavior_logp.is_finite()
                    && step.state.iter().chain(&step.action).all(|v| v.is_finite());
                if !finite {
                    return Err(NopgError::InvalidDataset(format!("non-finite step in trajectory {k}")));
                }
            }
        }
        Ok(Self { trajectories })
    }

    /// Regroups a dataset by its trajectory columns.
    pub fn from_dataset(dataset: &TransitionDataset) -> Result<Self> {
        let logp = dataset
            .behavior_logp()
            .ok_or_else(|| NopgError::InvalidDataset("importance weighting needs behavior log-densities".into()))?;
        let groups = dataset
            .trajectories()
            .ok_or_else(|| NopgError::InvalidDataset("importance weighting needs trajectory ids".into()))?;
        Self::new(
            groups
                .into_iter()
                .map(|rows| {
                    rows.into_iter()
                        .map(|i| Step {
                            state: dataset.state(i).to_vec(),
                            action: dataset.action(i).to_vec(),
                            reward: dataset.reward(i),
                            behavior_logp: logp[i],
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Per-trajectory G(PO)MDP term
/// `Σₜ γᵗ ρₜ rₜ Σ_{t′≤t} ∇log π(aₜ′|sₜ′)`, with `ρₜ = ∏_{z≤t} π/π_β`.
fn pwis_trajectory<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    traj: &[Step],
    gamma: f64,
    out: &mut [f64],
) -> Result<()> {
    let mut score = vec![0.0; policy.num_params()];
    let mut log_ratio = 0.0;
    let mut discount = 1.0;
    for step in traj {
        log_ratio += policy.log_density_and_grad(&step.state, &step.action, &mut score)? - step.behavior_logp;
        let w = discount * log_ratio.exp() * step.reward;
        if w != 0.0 {
            out.iter_mut().zip(&score).for_each(|(o, s)| *o += w * s);
        }
        discount *= gamma;
    }
    Ok(())
}

/// Importance-weighted G(PO)MDP estimate of `∇J`, averaged over trajectories.
///
/// No baseline and no self-normalization.
pub fn pwis_gradient<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    batch: &TrajectoryBatch,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !policy.is_stochastic() {
        return Err(NopgError::UnsupportedMode {
            mode: policy.mode().as_str(),
            op: "pwis_gradient",
        });
    }
    let mut grad = vec![0.0; policy.num_params()];
    if batch.is_empty() {
        return Ok(grad);
    }
    for traj in &batch.trajectories {
        pwis_trajectory(policy, traj, gamma, &mut grad)?;
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(grad)
}

/// Ridge strength added to the critic's normal equations.
pub const DPG_RIDGE: f64 = 1e-8;

/// Critic `Q(x,u) = xᵀQ̂x + uᵀR̂u` fit by regularized least-squares TD.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCritic {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

fn quad_features(v: &[f64], out: &mut Vec<f64>) {
    for i in 0..v.len() {
        for j in i..v.len() {
            out.push(v[i] * v[j]);
        }
    }
}

fn features(x: &[f64], u: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() * (x.len() + 1) / 2 + u.len() * (u.len() + 1) / 2);
    quad_features(x, &mut f);
    quad_features(u, &mut f);
    f
}

fn unpack_symmetric(w: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                m[(i, i)] = w[k];
            } else {
                m[(i, j)] = 0.5 * w[k];
                m[(j, i)] = 0.5 * w[k];
            }
            k += 1;
        }
    }
    m
}

impl QuadraticCritic {
    /// LSTD fit of the critic for `policy`:
    /// `Σ φ(s,a)(φ(s,a) − γφ(s′,π(s′)))ᵀ w = Σ φ(s,a) r`.
    ///
    /// The system is solved with a ridge floor [`DPG_RIDGE`] scaled by the
    /// design's trace, so singular designs still return the minimum-norm-like
    /// regularized solution.
    pub fn fit<P: DifferentiablePolicy + ?Sized>(policy: &P, dataset: &TransitionDataset, gamma: f64) -> Result<Self> {
        let ds = dataset.state_dim();
        let da = dataset.action_dim();
        let nf = ds * (ds + 1) / 2 + da * (da + 1) / 2;
        let mut a = DMatrix::<f64>::zeros(nf, nf);
        let mut b = DVector::<f64>::zeros(nf);
        for i in 0..dataset.len() {
            let phi = DVector::from_vec(features(dataset.state(i), dataset.action(i)));
            let next = if dataset.is_terminal(i) {
                DVector::zeros(nf)
            } else {
                let s2 = dataset.next_state(i);
                DVector::from_vec(features(s2, &policy.act(s2)))
            };
            a += &phi * (&phi - gamma * next).transpose();
            b += &phi * dataset.reward(i);
        }
        let scale = (0..nf).map(|k| a[(k, k)].abs()).sum::<f64>().max(1.0) / nf as f64;
        for k in 0..nf {
            a[(k, k)] += DPG_RIDGE * scale;
        }
        let w = a.lu().solve(&b).ok_or(NopgError::SolverFailure {
            best_residual: f64::INFINITY,
        })?;
        let nq = ds * (ds + 1) / 2;
        Ok(Self {
            q: unpack_symmetric(&w.as_slice()[..nq], ds),
            r: unpack_symmetric(&w.as_slice()[nq..], da),
        })
    }

    pub fn value(&self, x: &[f64], u: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        let u = DVector::from_column_slice(u);
        (x.transpose() * &self.q * &x)[0] + (u.transpose() * &self.r * &u)[0]
    }

    /// `∇ᵤQ = 2R̂u`.
    pub fn action_gradient(&self, u: &[f64]) -> Vec<f64> {
        (2.0 * &self.r * DVector::from_column_slice(u)).as_slice().to_vec()
    }
}

/// Offline semi-gradient `mean_s ∇θπ(s)·∇ₐQ(s,a)|_{a=π(s)}` over the dataset
/// states, with the critic refit for the current policy. The derivative of
/// `Q_π` with respect to `θ` is ignored.
pub fn dpg_lite_gradient(policy: &LinearPolicy, dataset: &TransitionDataset, gamma: f64) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(NopgError::InvalidDataset("empty dataset".into()));
    }
    let critic = QuadraticCritic::fit(policy, dataset, gamma)?;
    let mut grad = vec![0.0; policy.num_params()];
    for i in 0..dataset.len() {
        let s = dataset.state(i);
        let cot = critic.action_gradient(&policy.act(s));
        policy.vjp(s, &cot, None, &mut grad);
    }
    let inv = 1.0 / dataset.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, StreamRng};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rollout(behavior: &LinearPolicy, rng: &mut StreamRng, horizon: usize) -> Vec<Step> {
        let mut x = vec![1.0, -0.5];
        (0..horizon)
            .map(|_| {
                let u = behavior.sample(&x, rng);
                let logp = behavior.log_density_and_grad(&x, &u, &mut [0.0; 2]).unwrap();
                let r = -(x[0] * x[0] + x[1] * x[1]) - 0.1 * (u[0] * u[0] + u[1] * u[1]);
                let step = Step {
                    state: x.clone(),
                    action: u.clone(),
                    reward: r,
                    behavior_logp: logp,
                };
                x = vec![1.1 * x[0] + 0.2 * u[0], 0.9 * x[1] + 0.3 * u[1]];
                step
            })
            .collect()
    }

    #[test]
    fn deterministic_policy_is_rejected() {
        let p = LinearPolicy::deterministic(vec![0.1, 0.1]).unwrap();
        assert!(matches!(
            pwis_gradient(&p, &TrajectoryBatch::default(), 0.9),
            Err(NopgError::UnsupportedMode { .. })
        ));
    }

    #[test]
    fn on_policy_ratios_are_one() {
        let p = LinearPolicy::gaussian(vec![-0.3, 0.2], vec![0.5, 0.4]).unwrap();
        let mut rng = substream(1, "pwis");
        let batch = TrajectoryBatch::new((0..5).map(|_| rollout(&p, &mut rng, 6)).collect()).unwrap();
        // Vanilla G(PO)MDP computed directly, without ratios.
        let mut expected = [0.0; 2];
        for traj in &batch.trajectories {
            let mut score = vec![0.0; 2];
            for (t, step) in traj.iter().enumerate() {
                p.log_density_and_grad(&step.state, &step.action, &mut score).unwrap();
                for k in 0..2 {
                    expected[k] += 0.9f64.powi(t as i32) * step.reward * score[k] / 5.0;
                }
            }
        }
        let g = pwis_gradient(&p, &batch, 0.9).unwrap();
        for k in 0..2 {
            assert_relative_eq!(g[k], expected[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_rewards_give_zero_gradient() {
        let p = LinearPolicy::gaussian(vec![-0.3, 0.2], vec![0.5, 0.4]).unwrap();
        let mut rng = substream(2, "pwis");
        let mut traj = rollout(&p, &mut rng, 4);
        traj.iter_mut().for_each(|s| s.reward = 0.0);
        let g = pwis_gradient(&p, &TrajectoryBatch::new(vec![traj]).unwrap(), 0.9).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // 1-D: π = N(kx, σ²), β = N(0, 1).
        let (k, sigma, x, a, r) = (0.4, 0.7, 1.5, 0.2, -2.0);
        let p = LinearPolicy::gaussian(vec![k], vec![sigma]).unwrap();
        let logp_b = -0.5 * a * a - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mean = k * x;
        let logp_pi = -0.5 * ((a - mean) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let rho = (logp_pi - logp_b).exp();
        let score = (a - mean) / (sigma * sigma) * x;
        let batch = TrajectoryBatch::new(vec![vec![Step {
            state: vec![x],
            action: vec![a],
            reward: r,
            behavior_logp: logp_b,
        }]])
        .unwrap();
        let g = pwis_gradient(&p, &batch, 0.9).unwrap();
        assert_relative_eq!(g[0], rho * r * score, max_relative = 1e-12);
    }

    #[test]
    fn batch_from_dataset_requires_trajectory_columns() {
        let ds = TransitionDataset::empty(1, 1);
        assert!(TrajectoryBatch::from_dataset(&ds).is_err());
    }

    fn lqr_like_dataset(noise: f64, seed: u64) -> TransitionDataset {
        use crate::dataset::Transition;
        let mut rng = substream(seed, "dpg");
        let rows: Vec<Transition> = (0..200)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u: Vec<f64> = (0..2)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        noise * z
                    })
                    .collect();
                Transition {
                    next_state: vec![1.2 * x[0] + 0.1 * u[0], 1.1 * x[1] + 0.2 * u[1]],
                    reward: 0.5 * (-0.5 * x[0] * x[0] - 0.25 * x[1] * x[1] + 0.01 * (u[0] * u[0] + u[1] * u[1])),
                    state: x,
                    action: u,
                    terminal: false,
                    behavior_logp: None,
                    trajectory: None,
                }
            })
            .collect();
        TransitionDataset::from_transitions(2, 2, &rows).unwrap()
    }

    #[test]
    fn zero_rewards_give_zero_critic_and_gradient() {
        let mut ds = lqr_like_dataset(1.0, 3);
        let rows: Vec<_> = (0..ds.len())
            .map(|i| crate::dataset::Transition {
                reward: 0.0,
                ..ds.row(i)
            })
            .collect();
        ds = TransitionDataset::from_transitions(2, 2, &rows).unwrap();
        let p = LinearPolicy::deterministic(vec![-2.0, -2.0]).unwrap();
        let g = dpg_lite_gradient(&p, &ds, 0.9).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn critic_recovers_reward_when_gamma_is_zero() {
        let ds = lqr_like_dataset(1.0, 4);
        let p = LinearPolicy::deterministic(vec![-2.0, -2.0]).unwrap();
        let c = QuadraticCritic::fit(&p, &ds, 0.0).unwrap();
        assert_relative_eq!(c.q[(0, 0)], -0.25, epsilon = 1e-6);
        assert_relative_eq!(c.q[(1, 1)], -0.125, epsilon = 1e-6);
        assert_relative_eq!(c.r[(0, 0)], 0.005, epsilon = 1e-6);
        assert_relative_eq!(c.q[(0, 1)], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn singular_design_still_solves() {
        // Zero actions make the action features identically zero.
        let ds = lqr_like_dataset(0.0, 5);
        let p = LinearPolicy::deterministic(vec![-2.0, -2.0]).unwrap();
        let g = dpg_lite_gradient(&p, &ds, 0.9).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
