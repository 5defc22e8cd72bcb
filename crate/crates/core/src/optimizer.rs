//! Gradient-ascent training loop, ADAM, and policy evaluation rollouts.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{format_float, TransitionDataset};
use crate::envs::{AnyEnv, Environment};
use crate::error::{NopgError, Result};
use crate::gradient::full_gradient;
use crate::npbe::{KernelBandwidths, McCounts, McSamples, Npbe};
use crate::policy::{DifferentiablePolicy, LinearPolicy, MlpArchitecture, MlpPolicy, Policy, PolicyMode};
use crate::rng::{indexed_substream, substream, EVAL, INIT};
use crate::solver::SolverConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM step in the ascent direction.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grad.len());
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Linear decay of the policy std scale over the update budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub end: f64,
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        Self { initial: 1.0, end: 0.1 }
    }
}

impl VarianceSchedule {
    /// `initial + (final − initial)·t/(updates − 1)`.
    pub fn scale(&self, t: usize, updates: usize) -> f64 {
        if updates <= 1 {
            return self.initial;
        }
        self.initial + (self.end - self.initial) * t as f64 / (updates - 1) as f64
    }
}

/// How kernel bandwidths are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandwidthSpec {
    /// Cross-validated bandwidths times per-dimension factors.
    Factors {
        state: Vec<f64>,
        action: Vec<f64>,
    },
    Explicit {
        state: Vec<f64>,
        action: Vec<f64>,
    },
}

impl BandwidthSpec {
    pub fn resolve(&self, dataset: &TransitionDataset) -> Result<KernelBandwidths> {
        match self {
            BandwidthSpec::Factors { state, action } => KernelBandwidths::select(dataset, state, action),
            BandwidthSpec::Explicit { state, action } => KernelBandwidths::new(state.clone(), action.clone()),
        }
    }
}

/// Policy to start training from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// One hidden ReLU layer, mean `output_scale·tanh(·)`. `output_scale`
    /// defaults to the environment's action bound.
    Mlp {
        hidden: usize,
        #[serde(default)]
        output_scale: Option<f64>,
    },
    /// Diagonal linear controller; `std` is used in stochastic mode.
    Linear { gains: Vec<f64>, std: Vec<f64> },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Mlp {
            hidden: 50,
            output_scale: None,
        }
    }
}

impl PolicySpec {
    pub fn build(&self, env: &AnyEnv, mode: PolicyMode, seed: u64) -> Result<Policy> {
        let spec = env.spec();
        match self {
            PolicySpec::Mlp { hidden, output_scale } => {
                let arch = MlpArchitecture {
                    hidden: *hidden,
                    ..MlpArchitecture::new(
                        spec.state_dim,
                        spec.action_dim,
                        output_scale.unwrap_or(spec.action_high[0]),
                        mode,
                    )
                };
                Ok(Policy::Mlp(MlpPolicy::init(arch, &mut substream(seed, INIT))?))
            }
            PolicySpec::Linear { gains, std } => Ok(Policy::Linear(match mode {
                PolicyMode::Deterministic => LinearPolicy::deterministic(gains.clone())?,
                PolicyMode::Gaussian => LinearPolicy::gaussian(gains.clone(), std.clone())?,
            })),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub horizon: usize,
    /// Evaluate every this many iterations during training; 0 disables.
    #[serde(default)]
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub policy_updates: usize,
    pub mode: PolicyMode,
    pub bandwidths: BandwidthSpec,
    pub mc: McCounts,
    /// Keep the `k` largest entries per transition row.
    #[serde(default)]
    pub sparsify: Option<usize>,
    #[serde(default)]
    pub variance: VarianceSchedule,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub eval: Option<EvalProtocol>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(NopgError::InvalidInput(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NopgError::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.mc.n_pi == 0 || self.mc.n_phi == 0 || self.mc.n_mu0 == 0 {
            return Err(NopgError::InvalidInput("Monte-Carlo counts must be at least 1".into()));
        }
        if self.sparsify == Some(0) {
            return Err(NopgError::InvalidInput("sparsification k must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub iter: usize,
    pub j_hat: f64,
    pub grad_norm: f64,
    pub solver_iters: usize,
    pub eval_return: Option<f64>,
}

pub const CURVE_HEADER: &str = "iter,J_hat,grad_norm,solver_iters,eval_return";

pub fn write_curve<W: Write>(records: &[CurveRecord], mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "{CURVE_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            format_float(r.j_hat),
            format_float(r.grad_norm),
            r.solver_iters,
            r.eval_return.map(format_float).unwrap_or_default()
        )?;
    }
    Ok(())
}

pub fn save_curve(records: &[CurveRecord], path: &Path, comment: Option<&str>) -> Result<()> {
    write_curve(records, std::io::BufWriter::new(std::fs::File::create(path)?), comment)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<CurveRecord>,
    pub bandwidths: KernelBandwidths,
}

/// Samples an observed initial state of `env`.
pub fn observed_initial_state(env: &AnyEnv) -> impl FnMut(&mut crate::rng::StreamRng) -> Vec<f64> + '_ {
    move |rng| env.observe(&env.initial_state(rng))
}

/// Trains a freshly initialized policy. See [`train_from`].
pub fn train(dataset: &TransitionDataset, env: &AnyEnv, config: &TrainConfig) -> Result<TrainOutcome> {
    let policy = config.policy.build(env, config.mode, config.seed)?;
    train_from(dataset, env, config, policy, |_, _, _| Ok(()))
}

/// Runs exactly `policy_updates` iterations of build → solve → gradient →
/// ADAM from `policy`. Monte-Carlo samples are redrawn every iteration and
/// frozen within it. `on_iteration` sees each record and the policy before
/// its update.
pub fn train_from(
    dataset: &TransitionDataset,
    env: &AnyEnv,
    config: &TrainConfig,
    mut policy: Policy,
    mut on_iteration: impl FnMut(usize, &Policy, &CurveRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(NopgError::InvalidDataset("training needs a nonempty dataset".into()));
    }
    dataset.validate(f64::INFINITY)?;
    if policy.mode() != config.mode {
        return Err(NopgError::InvalidInput(format!(
            "policy is {} but the configuration asks for {}",
            policy.mode().as_str(),
            config.mode.as_str()
        )));
    }
    let bandwidths = config.bandwidths.resolve(dataset)?;
    let npbe = Npbe::new(dataset.clone(), bandwidths.clone(), config.gamma)?;
    let stochastic = config.mode == PolicyMode::Gaussian;
    let mut adam = AdamState::new(policy.num_params());
    let mut curve = Vec::with_capacity(config.policy_updates);

    for t in 0..config.policy_updates {
        if stochastic {
            policy.set_std_scale(config.variance.scale(t, config.policy_updates));
        }
        let samples = McSamples::draw(
            dataset.len(),
            dataset.state_dim(),
            dataset.action_dim(),
            stochastic,
            &config.mc,
            observed_initial_state(env),
            config.seed,
            t as u64,
        )?;
        let solution = npbe
            .build_and_solve(&policy, &samples, config.sparsify, &config.solver)
            .map_err(|e| NopgError::TrainingSolver {
                iteration: t,
                source: Box::new(e),
            })?;
        let est = full_gradient(&npbe, &policy, &solution, &samples)?;
        if est.grad.iter().any(|g| !g.is_finite()) {
            return Err(NopgError::NonFiniteGradient { iteration: t });
        }
        let eval_return = match config.eval {
            Some(p) if p.every > 0 && t % p.every == 0 => {
                Some(evaluate(&policy, env, p.episodes, p.horizon, config.seed)?.mean)
            }
            _ => None,
        };
        let record = CurveRecord {
            iter: t,
            j_hat: solution.objective(),
            grad_norm: est.norm(),
            solver_iters: solution.solver_iterations(),
            eval_return,
        };
        on_iteration(t, &policy, &record)?;
        curve.push(record);
        let mut params = policy.params().to_vec();
        adam_update(&mut params, &est.grad, &mut adam, config.learning_rate);
        policy.set_params(&params)?;
    }
    if stochastic && config.policy_updates > 0 {
        policy.set_std_scale(config.variance.scale(config.policy_updates - 1, config.policy_updates));
    }
    Ok(TrainOutcome {
        policy,
        curve,
        bandwidths,
    })
}

/// One rollout of the policy's mean action.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Internal states `s₀ … s_T` (one more than the number of steps).
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
}

impl Rollout {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

pub fn rollout<P: DifferentiablePolicy + ?Sized>(policy: &P, env: &AnyEnv, start: Vec<f64>, horizon: usize) -> Rollout {
    let mut states = vec![start];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut terminated = false;
    for _ in 0..horizon {
        let s = states.last().expect("nonempty");
        let a = env.clip_action(&policy.act(&env.observe(s)));
        let out = env.step(s, &a);
        actions.push(a);
        rewards.push(out.reward);
        states.push(out.next_state);
        if out.terminal {
            terminated = true;
            break;
        }
    }
    Rollout {
        states,
        actions,
        rewards,
        terminated,
    }
}

/// Undiscounted return statistics over seeded rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    /// Half-width of the 95% Student-t confidence interval of the mean.
    pub ci95: f64,
    pub returns: Vec<f64>,
}

/// Rolls out the policy's mean action for `n_episodes` episodes of at most
/// `horizon` steps from `env.evaluation_start`, episode `k` seeded by
/// `(seed, "eval", k)`.
pub fn evaluate<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    env: &AnyEnv,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalStats> {
    let returns = evaluation_rollouts(policy, env, n_episodes, horizon, seed)
        .iter()
        .map(Rollout::total_return)
        .collect();
    Ok(summarize(returns))
}

/// The rollouts behind [`evaluate`].
pub fn evaluation_rollouts<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    env: &AnyEnv,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Vec<Rollout> {
    (0..n_episodes)
        .map(|k| {
            let start = env.evaluation_start(&mut indexed_substream(seed, EVAL, k as u64));
            rollout(policy, env, start, horizon)
        })
        .collect()
}

pub fn summarize(returns: Vec<f64>) -> EvalStats {
    let n = returns.len();
    if n == 0 {
        return EvalStats {
            mean: 0.0,
            std: 0.0,
            ci95: 0.0,
            returns,
        };
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let ci95 = if n > 1 {
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.96);
        t * std / (n as f64).sqrt()
    } else {
        0.0
    };
    EvalStats {
        mean,
        std,
        ci95,
        returns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_uniform_grid, EnvName};
    use approx::assert_relative_eq;

    #[test]
    fn adam_scalar_trace() {
        // Hand-rolled reference with the textbook update order.
        let grads = [1.0, -0.5, 0.25, 2.0, 0.0, -1.0, 0.3, 0.3, -0.7, 1.5];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        let mut params = [0.5];
        let mut state = AdamState::new(1);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x += 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            adam_update(&mut params, &[*g], &mut state, 0.01);
            assert_relative_eq!(params[0], x, max_relative = 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut p = vec![0.0; 4];
        let mut s = AdamState::new(4);
        adam_update(&mut p, &[3.0, -1e-3, 50.0, -7.0], &mut s, 0.1);
        for (x, sign) in p.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert_relative_eq!(*x, 0.1 * sign, max_relative = 1e-4);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        adam_update(&mut p, &[1.0, 1.0], &mut s, 0.1);
        let after_first = p.clone();
        let m_before = s.m.clone();
        let mut q = after_first.clone();
        let mut s2 = AdamState {
            m: vec![0.0; 2],
            v: s.v.clone(),
            t: s.t,
        };
        adam_update(&mut q, &[0.0, 0.0], &mut s2, 0.1);
        assert_eq!(q, after_first);
        adam_update(&mut p, &[0.0, 0.0], &mut s, 0.1);
        for (a, b) in s.m.iter().zip(&m_before) {
            assert_relative_eq!(*a, 0.9 * b, max_relative = 1e-15);
        }
    }

    #[test]
    fn variance_schedule_is_linear_and_exact() {
        let s = VarianceSchedule::default();
        assert_eq!(s.scale(0, 11), 1.0);
        for t in 0..11 {
            assert_eq!(s.scale(t, 11), 1.0 + (0.1 - 1.0) * t as f64 / 10.0);
        }
        assert_relative_eq!(s.scale(10, 11), 0.1, max_relative = 1e-15);
        assert_relative_eq!(s.scale(5, 11), 0.55, max_relative = 1e-15);
        assert_eq!(s.scale(0, 1), 1.0);
    }

    fn small_config(updates: usize, mode: PolicyMode) -> TrainConfig {
        TrainConfig {
            gamma: 0.9,
            learning_rate: 1e-2,
            policy_updates: updates,
            mode,
            bandwidths: BandwidthSpec::Factors {
                state: vec![1.0, 1.0, 1.0],
                action: vec![10.0],
            },
            mc: McCounts {
                n_pi: 3,
                n_phi: 1,
                n_mu0: 1,
            },
            sparsify: None,
            variance: VarianceSchedule::default(),
            policy: PolicySpec::Mlp {
                hidden: 8,
                output_scale: None,
            },
            solver: SolverConfig::default(),
            eval: None,
            seed: 3,
        }
    }

    fn pendulum_grid() -> (AnyEnv, TransitionDataset) {
        let env = EnvName::Pendulum.build();
        let ds = generate_uniform_grid(&env, &[6, 6, 2]).unwrap();
        (env, ds)
    }

    #[test]
    fn zero_updates_returns_initial_policy() {
        let (env, ds) = pendulum_grid();
        let cfg = small_config(0, PolicyMode::Deterministic);
        let initial = cfg.policy.build(&env, cfg.mode, cfg.seed).unwrap();
        let out = train(&ds, &env, &cfg).unwrap();
        assert_eq!(out.policy, initial);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_bounded() {
        let (env, ds) = pendulum_grid();
        for mode in [PolicyMode::Deterministic, PolicyMode::Gaussian] {
            let cfg = small_config(5, mode);
            let a = train(&ds, &env, &cfg).unwrap();
            let b = train(&ds, &env, &cfg).unwrap();
            assert_eq!(a.curve, b.curve);
            assert_eq!(a.policy, b.policy);
            assert_eq!(a.curve.len(), 5);
            let bound = 2.0 * ds.max_abs_reward() / (1.0 - cfg.gamma);
            assert!(a.curve.iter().all(|r| r.j_hat.abs() <= bound));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (env, ds) = pendulum_grid();
        let cfg = TrainConfig {
            gamma: 1.0,
            ..small_config(1, PolicyMode::Deterministic)
        };
        assert!(train(&ds, &env, &cfg).is_err());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_config(1, PolicyMode::Deterministic)
        };
        assert!(train(&ds, &env, &cfg).is_err());
    }

    #[test]
    fn zero_horizon_and_identical_starts() {
        let env = EnvName::Pendulum.build();
        let p = PolicySpec::default().build(&env, PolicyMode::Deterministic, 1).unwrap();
        let stats = evaluate(&p, &env, 3, 0, 1).unwrap();
        assert_eq!(stats.mean, 0.0);
        let stats = evaluate(&p, &env, 4, 50, 1).unwrap();
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.ci95, 0.0);
    }

    #[test]
    fn curve_csv_layout() {
        let recs = vec![
            CurveRecord {
                iter: 0,
                j_hat: -1.5,
                grad_norm: 0.25,
                solver_iters: 7,
                eval_return: None,
            },
            CurveRecord {
                iter: 1,
                j_hat: -1.0,
                grad_norm: 0.5,
                solver_iters: 6,
                eval_return: Some(-100.0),
            },
        ];
        let mut buf = Vec::new();
        write_curve(&recs, &mut buf, Some("seed 1")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[..2], ["# seed 1", CURVE_HEADER]);
        let fields: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!((fields[0], fields[3], fields[4]), ("0", "7", ""));
        assert_eq!(fields[1].parse::<f64>().unwrap(), -1.5);
        assert_eq!(lines[3].split(',').nth(4).unwrap().parse::<f64>().unwrap(), -100.0);
    }
}
