use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Environment, MountainCar};
use crate::dataset::{Transition, TransitionDataset};
use crate::error::{NopgError, Result};
use crate::rng::{indexed_substream, StreamRng, DATASET};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Behavior policy driving random-agent data collection. Acts on observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorPolicy {
    /// Independent uniform actions in a box.
    Uniform { low: Vec<f64>, high: Vec<f64> },
    /// State-independent mixture of diagonal Gaussians.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<Vec<f64>>,
    },
    /// `u = K s + N(0, diag(std²))` with `gain` given row-major as `da × ds`.
    LinearGaussian { gain: Vec<Vec<f64>>, std: Vec<f64> },
    /// Deterministic `u = (K + ε·1) s` where one `ε ~ N(0, perturbation_std²)`
    /// is drawn per trajectory and added to every gain entry.
    PerturbedLinear { gain: Vec<Vec<f64>>, perturbation_std: f64 },
}

impl BehaviorPolicy {
    /// Whether per-step actions are random (and so carry a log density).
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, BehaviorPolicy::PerturbedLinear { .. })
    }

    pub fn action_dim(&self) -> usize {
        match self {
            BehaviorPolicy::Uniform { low, .. } => low.len(),
            BehaviorPolicy::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            BehaviorPolicy::LinearGaussian { gain, .. } | BehaviorPolicy::PerturbedLinear { gain, .. } => gain.len(),
        }
    }

    fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let bad = |msg: &str| Err(NopgError::InvalidInput(format!("behavior policy: {msg}")));
        if self.action_dim() != action_dim {
            return Err(NopgError::DimensionMismatch {
                expected: action_dim,
                got: self.action_dim(),
                context: "behavior policy action dimension",
            });
        }
        match self {
            BehaviorPolicy::Uniform { low, high } => {
                if high.len() != low.len() || low.iter().zip(high).any(|(l, h)| !(h > l)) {
                    return bad("uniform bounds must satisfy low < high");
                }
            }
            BehaviorPolicy::GaussianMixture { weights, means, stds } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
                    return bad("mixture weights, means and stds must have equal length");
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return bad("mixture weights must be non-negative with positive sum");
                }
                if means.iter().chain(stds).any(|v| v.len() != action_dim) || stds.iter().flatten().any(|s| !(*s > 0.0))
                {
                    return bad("mixture components must match the action dimension with positive stds");
                }
            }
            BehaviorPolicy::LinearGaussian { gain, std } => {
                if gain.iter().any(|row| row.len() != state_dim) || std.len() != action_dim {
                    return bad("gain must be da x ds and std length da");
                }
                if std.iter().any(|s| !(*s > 0.0)) {
                    return bad("std must be positive");
                }
            }
            BehaviorPolicy::PerturbedLinear { gain, perturbation_std } => {
                if gain.iter().any(|row| row.len() != state_dim) || !(*perturbation_std >= 0.0) {
                    return bad("gain must be da x ds and perturbation std non-negative");
                }
            }
        }
        Ok(())
    }

    /// Natural-log density of `action` at observation `obs`; `None` when deterministic.
    pub fn log_density(&self, obs: &[f64], action: &[f64]) -> Option<f64> {
        match self {
            BehaviorPolicy::Uniform { low, high } => {
                let inside = action
                    .iter()
                    .zip(low.iter().zip(high))
                    .all(|(a, (l, h))| a >= l && a <= h);
                Some(if inside {
                    -low.iter().zip(high).map(|(l, h)| (h - l).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                })
            }
            BehaviorPolicy::GaussianMixture { weights, means, stds } => {
                let total: f64 = weights.iter().sum();
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(means.iter().zip(stds))
                    .map(|(w, (m, s))| (w / total).ln() + diag_gaussian_logpdf(action, m, s))
                    .collect();
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Some(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
            }
            BehaviorPolicy::LinearGaussian { gain, std } => {
                let mean = mat_vec(gain, obs);
                Some(diag_gaussian_logpdf(action, &mean, std))
            }
            BehaviorPolicy::PerturbedLinear { .. } => None,
        }
    }

    fn begin_trajectory(&self, rng: &mut StreamRng) -> f64 {
        match self {
            BehaviorPolicy::PerturbedLinear { perturbation_std, .. } => {
                let z: f64 = StandardNormal.sample(rng);
                perturbation_std * z
            }
            _ => 0.0,
        }
    }

    fn sample(&self, obs: &[f64], offset: f64, rng: &mut StreamRng) -> Vec<f64> {
        match self {
            BehaviorPolicy::Uniform { low, high } => {
                low.iter().zip(high).map(|(l, h)| rng.random_range(*l..*h)).collect()
            }
            BehaviorPolicy::GaussianMixture { weights, means, stds } => {
                let total: f64 = weights.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut k = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        k = i;
                        break;
                    }
                    pick -= w;
                }
                means[k]
                    .iter()
                    .zip(&stds[k])
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect()
            }
            BehaviorPolicy::LinearGaussian { gain, std } => mat_vec(gain, obs)
                .into_iter()
                .zip(std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
            BehaviorPolicy::PerturbedLinear { gain, .. } => gain
                .iter()
                .map(|row| row.iter().zip(obs).map(|(k, x)| (k + offset) * x).sum())
                .collect(),
        }
    }
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn diag_gaussian_logpdf(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean.iter().zip(std))
        .map(|(x, (m, s))| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Where collected trajectories start, in internal simulator coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StartSampler {
    /// The environment's own collection start.
    Environment,
    Fixed(Vec<f64>),
    /// Independent uniform draws per coordinate.
    UniformBox(Vec<(f64, f64)>),
}

impl StartSampler {
    fn sample<E: Environment + ?Sized>(&self, env: &E, rng: &mut StreamRng) -> Vec<f64> {
        match self {
            StartSampler::Environment => env.collection_start(rng),
            StartSampler::Fixed(s) => s.clone(),
            StartSampler::UniformBox(ranges) => ranges
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect(),
        }
    }
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// One environment step from every point of a Cartesian grid over internal
/// state and action ranges (`counts` ordered as [`Environment::grid_ranges`]).
pub fn generate_uniform_grid<E: Environment + ?Sized>(env: &E, counts: &[usize]) -> Result<TransitionDataset> {
    let ranges = env.grid_ranges();
    if counts.len() != ranges.len() {
        return Err(NopgError::DimensionMismatch {
            expected: ranges.len(),
            got: counts.len(),
            context: "grid counts",
        });
    }
    if counts.contains(&0) {
        return Err(NopgError::InvalidInput("grid counts must be at least 1".into()));
    }
    let axes: Vec<Vec<f64>> = ranges
        .iter()
        .zip(counts)
        .map(|(&(lo, hi), &c)| linspace(lo, hi, c))
        .collect();
    let internal = env.internal_dim();
    let spec = env.spec();
    let mut data = TransitionDataset::empty(spec.state_dim, spec.action_dim);
    let mut index = vec![0usize; axes.len()];
    loop {
        let point: Vec<f64> = index.iter().zip(&axes).map(|(&i, axis)| axis[i]).collect();
        let (state, action) = point.split_at(internal);
        let out = env.step(state, action);
        data.push(Transition {
            state: env.observe(state),
            action: action.to_vec(),
            reward: out.reward,
            next_state: env.observe(&out.next_state),
            terminal: out.terminal,
            behavior_logp: None,
            trajectory: None,
        })?;
        // Odometer increment, last axis fastest.
        let mut d = axes.len();
        loop {
            if d == 0 {
                return Ok(data);
            }
            d -= 1;
            index[d] += 1;
            if index[d] < axes[d].len() {
                break;
            }
            index[d] = 0;
        }
    }
}

/// Roll out `behavior` for `n_trajectories` episodes of at most `max_steps`.
///
/// Each trajectory draws from its own stream derived from `seed`, so results
/// do not depend on the order trajectories are generated in. Actions are
/// recorded as sampled (before any clipping by the environment).
pub fn generate_random_agent<E: Environment + ?Sized>(
    env: &E,
    n_trajectories: usize,
    max_steps: usize,
    behavior: &BehaviorPolicy,
    start: &StartSampler,
    seed: u64,
) -> Result<TransitionDataset> {
    let spec = env.spec();
    behavior.validate(spec.state_dim, spec.action_dim)?;
    let mut data = TransitionDataset::empty(spec.state_dim, spec.action_dim);
    let stochastic = behavior.is_stochastic();
    for traj in 0..n_trajectories {
        let mut rng = indexed_substream(seed, DATASET, traj as u64);
        let mut state = start.sample(env, &mut rng);
        if state.len() != env.internal_dim() {
            return Err(NopgError::DimensionMismatch {
                expected: env.internal_dim(),
                got: state.len(),
                context: "start state",
            });
        }
        let offset = behavior.begin_trajectory(&mut rng);
        for step in 0..max_steps {
            let obs = env.observe(&state);
            let action = behavior.sample(&obs, offset, &mut rng);
            let out = env.step(&state, &action);
            let terminal = out.terminal || env.collection_done(&out.next_state);
            data.push(Transition {
                behavior_logp: if stochastic {
                    behavior.log_density(&obs, &action)
                } else {
                    None
                },
                trajectory: stochastic.then_some((traj, step)),
                state: obs,
                action,
                reward: out.reward,
                next_state: env.observe(&out.next_state),
                terminal,
            })?;
            if terminal {
                break;
            }
            state = out.next_state;
        }
    }
    Ok(data)
}

/// Randomization of the scripted mountain-car demonstrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstratorParams {
    /// Range of the per-demo push magnitude.
    pub magnitude: (f64, f64),
    /// Range of the per-demo velocity hysteresis before reversing the push.
    pub hysteresis: (f64, f64),
    /// Std of per-step action noise.
    pub action_noise: f64,
    pub max_steps: usize,
}

impl Default for DemonstratorParams {
    fn default() -> Self {
        Self {
            magnitude: (0.5, 0.9),
            hysteresis: (0.0, 0.006),
            action_noise: 0.1,
            max_steps: 500,
        }
    }
}

/// Suboptimal energy-pumping demonstrations on the mountain car.
///
/// The car pushes in the direction of its motion but only reverses once the
/// velocity has crossed a randomized hysteresis band, wasting effort on every
/// swing. Demonstrations end at the goal (terminal) or after `max_steps`.
pub fn scripted_demonstrator(
    env: &MountainCar,
    n_trajectories: usize,
    params: &DemonstratorParams,
    seed: u64,
) -> Result<TransitionDataset> {
    let mut data = TransitionDataset::empty(2, 1);
    for traj in 0..n_trajectories {
        let mut rng = indexed_substream(seed, DATASET, traj as u64);
        let mut state = env.initial_state(&mut rng);
        let magnitude = uniform_in(params.magnitude, &mut rng);
        let band = uniform_in(params.hysteresis, &mut rng);
        let mut direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for step in 0..params.max_steps {
            let vel = state[1];
            if direction > 0.0 && vel < -band {
                direction = -1.0;
            } else if direction < 0.0 && vel > band {
                direction = 1.0;
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            let action = (direction * magnitude + params.action_noise * noise).clamp(-1.0, 1.0);
            let out = env.step(&state, &[action]);
            data.push(Transition {
                state: env.observe(&state),
                action: vec![action],
                reward: out.reward,
                next_state: env.observe(&out.next_state),
                terminal: out.terminal,
                behavior_logp: None,
                trajectory: Some((traj, step)),
            })?;
            if out.terminal {
                break;
            }
            state = out.next_state;
        }
    }
    Ok(data)
}

fn uniform_in((lo, hi): (f64, f64), rng: &mut StreamRng) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
