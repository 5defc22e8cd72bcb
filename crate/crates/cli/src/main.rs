use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nopg::analysis::{npbe_bias_bound, BiasBoundInputs};
use nopg::config::{config_hash, provenance_comment, DatasetSource, ExperimentConfig};
use nopg::dataset::{format_float, TransitionDataset};
use nopg::envs::{AnyEnv, BehaviorPolicy, DemonstratorParams, EnvName, Environment, StartSampler};
use nopg::experiments::{save_field, summarize_fields, value_and_density_fields, GradientFieldConfig};
use nopg::npbe::Npbe;
use nopg::optimizer::{evaluation_rollouts, save_curve, summarize, train_from};
use nopg::policy::{DifferentiablePolicy, Policy, PolicyMode};
use nopg::NopgError;

#[derive(Parser)]
#[command(
    name = "nopg",
    version,
    about = "Nonparametric off-policy policy gradient experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (CSV plus JSON sidecar).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<EnvName>,
        /// Uniform grid counts per internal state and action dimension, e.g. 15,15,2.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["demos", "random"])]
        grid: Option<Vec<usize>>,
        /// Number of scripted mountain-car demonstrations.
        #[arg(long, conflicts_with = "random")]
        demos: Option<usize>,
        /// Number of uniform random-agent trajectories.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long, default_value_t = 200)]
        max_steps: usize,
    },
    /// Train a policy; writes the learning curve, checkpoints and final policy.
    Train {
        #[command(flatten)]
        common: Common,
        /// deterministic, or stochastic/gaussian.
        #[arg(long)]
        mode: Option<PolicyMode>,
        #[arg(long)]
        updates: Option<usize>,
        /// Dataset CSV replacing the configured source.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll out a policy checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// LQR gradient fields of several estimators over a gain grid.
    GradientField {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of nopg-d,nopg-s,pwis,dpg-lite,exact.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<nopg::experiments::Estimator>>,
        #[arg(long)]
        datasets: Option<usize>,
    },
    /// Value and state-density fields of a policy on a state grid.
    Fields {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Dataset CSV replacing the configured source.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Internal state dimensions spanning the grid.
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1])]
        dims: Vec<usize>,
        /// Grid points per dimension.
        #[arg(long, value_delimiter = ',', default_values_t = [41, 41])]
        size: Vec<usize>,
    },
    /// Value-bias bound over a bandwidth sweep.
    BiasBound {
        #[command(flatten)]
        common: Common,
    },
}

/// Raised for unusable configuration or arguments (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<clap::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<NopgError>() {
            return match e {
                NopgError::SolverFailure { .. } | NopgError::TrainingSolver { .. } => 3,
                NopgError::InvalidInput(_)
                | NopgError::InvalidBandwidth(_)
                | NopgError::InvalidDataset(_)
                | NopgError::Json(_)
                | NopgError::Parse(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let value: T =
        serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
    Ok((value, text))
}

fn load_experiment(path: Option<&Path>) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let path = path.ok_or_else(|| config_error("--config is required"))?;
    let (cfg, _): (ExperimentConfig, _) = read_config(path)?;
    cfg.validate()
        .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
    Ok((cfg, path.parent().map(Path::to_path_buf)))
}

fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(config_hash(&serde_json::to_string(value)?))
}

fn create_out(out: Option<PathBuf>, fallback: impl FnOnce() -> PathBuf) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(fallback);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_with_comment(path: &Path, comment: &str, body: &str) -> Result<()> {
    let mut text = String::new();
    for line in comment.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(body);
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct GenerateSpec<'a> {
    env: EnvName,
    dataset: &'a DatasetSource,
}

fn cmd_generate(
    common: Common,
    env: Option<EnvName>,
    grid: Option<Vec<usize>>,
    demos: Option<usize>,
    random: Option<usize>,
    max_steps: usize,
) -> Result<()> {
    let (env_name, source, seed, base) = if let Some(path) = common.config.as_deref() {
        let (cfg, base) = load_experiment(Some(path))?;
        (cfg.env, cfg.dataset, common.seed.unwrap_or(cfg.train.seed), base)
    } else {
        let env_name = env.ok_or_else(|| config_error("either --config or --env is required"))?;
        let built = env_name.build();
        let source = match (grid, demos, random) {
            (Some(counts), _, _) => DatasetSource::Grid { counts },
            (_, Some(count), _) => DatasetSource::Demonstrations {
                count,
                params: DemonstratorParams::default(),
            },
            (_, _, Some(trajectories)) => DatasetSource::RandomAgent {
                trajectories,
                max_steps,
                behavior: BehaviorPolicy::Uniform {
                    low: built.spec().action_low.clone(),
                    high: built.spec().action_high.clone(),
                },
                start: StartSampler::Environment,
                max_rows: None,
            },
            _ => return Err(config_error("one of --grid, --demos or --random is required")),
        };
        (env_name, source, common.seed.unwrap_or(0), None)
    };
    let env = env_name.build();
    let dataset = source.materialize(&env, seed, base.as_deref())?;
    let hash = canonical_hash(&GenerateSpec {
        env: env_name,
        dataset: &source,
    })?;
    let out = create_out(common.out, || PathBuf::from("data").join(env_name.as_str()))?;
    let comment = provenance_comment(
        &hash,
        seed,
        &format!("environment {env_name}\nsource {}", source.describe()),
    );
    dataset.save_csv(&out.join("dataset.csv"), Some(&comment))?;
    let mut meta = source.metadata(&env, &dataset, seed)?;
    meta.config_hash = Some(hash);
    meta.save(&out.join("dataset.json"))?;
    eprintln!("wrote {} rows to {}", dataset.len(), out.join("dataset.csv").display());
    Ok(())
}

fn experiment_dataset(cfg: &ExperimentConfig, base: Option<&Path>, env: &AnyEnv) -> Result<TransitionDataset> {
    Ok(cfg.dataset.materialize(env, cfg.train.seed, base)?)
}

#[derive(Serialize)]
struct EvalReport {
    config_sha256: String,
    seed: u64,
    episodes: usize,
    horizon: usize,
    mean: f64,
    std: f64,
    ci95: f64,
    returns: Vec<f64>,
    steps: Vec<usize>,
    terminated: Vec<bool>,
}

fn eval_report(policy: &Policy, env: &AnyEnv, episodes: usize, horizon: usize, seed: u64, hash: &str) -> EvalReport {
    let rollouts = evaluation_rollouts(policy, env, episodes, horizon, seed);
    let stats = summarize(rollouts.iter().map(|r| r.total_return()).collect());
    EvalReport {
        config_sha256: hash.to_string(),
        seed,
        episodes,
        horizon,
        mean: stats.mean,
        std: stats.std,
        ci95: stats.ci95,
        returns: stats.returns,
        steps: rollouts.iter().map(|r| r.rewards.len()).collect(),
        terminated: rollouts.iter().map(|r| r.terminated).collect(),
    }
}

fn cmd_train(common: Common, mode: Option<PolicyMode>, updates: Option<usize>, dataset: Option<PathBuf>) -> Result<()> {
    let (mut cfg, base) = load_experiment(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.train.mode = mode;
    }
    if let Some(n) = updates {
        cfg.train.policy_updates = n;
    }
    if let Some(path) = dataset {
        cfg.dataset = DatasetSource::File {
            path: std::path::absolute(path)?,
        };
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let env = cfg.env.build();
    let data = experiment_dataset(&cfg, base.as_deref(), &env)?;
    let hash = cfg.hash()?;
    let seed = cfg.train.seed;
    let out = create_out(common.out.or_else(|| cfg.output_dir.clone()), || {
        PathBuf::from("runs").join(&cfg.name)
    })?;
    write_json(&out.join("config.json"), &cfg)?;

    let checkpoints = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(&checkpoints)?;
    }
    let policy = cfg.train.policy.build(&env, cfg.train.mode, seed)?;
    eprintln!(
        "training {} on {} rows ({} updates, {})",
        cfg.name,
        data.len(),
        cfg.train.policy_updates,
        cfg.train.mode.as_str()
    );
    let report_every = (cfg.train.policy_updates / 20).max(1);
    let outcome = train_from(&data, &env, &cfg.train, policy, |t, policy, record| {
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
            policy.save(&checkpoints.join(format!("policy_{t:05}.json")))?;
        }
        if t % report_every == 0 {
            eprintln!(
                "iter {t:5}  J_hat {:>12.5}  |grad| {:.3e}  solver iters {}",
                record.j_hat, record.grad_norm, record.solver_iters
            );
        }
        Ok(())
    })?;
    let comment = provenance_comment(&hash, seed, &format!("experiment {}", cfg.name));
    save_curve(&outcome.curve, &out.join("curve.csv"), Some(&comment))?;
    outcome.policy.save(&out.join("policy.json"))?;
    let report = eval_report(&outcome.policy, &env, cfg.eval.episodes, cfg.eval.horizon, seed, &hash);
    eprintln!(
        "evaluation: mean return {:.3} ± {:.3} over {} episodes",
        report.mean, report.ci95, report.episodes
    );
    write_json(&out.join("eval.json"), &report)?;
    write_json(
        &out.join("bandwidths.json"),
        &serde_json::json!({
            "config_sha256": hash,
            "seed": seed,
            "state": outcome.bandwidths.state.as_slice(),
            "action": outcome.bandwidths.action.as_slice(),
        }),
    )?;
    Ok(())
}

fn cmd_eval(common: Common, policy_path: PathBuf, episodes: Option<usize>, horizon: Option<usize>) -> Result<()> {
    let (cfg, _) = load_experiment(common.config.as_deref())?;
    let policy = Policy::load(&policy_path).map_err(|e| config_error(format!("cannot load policy: {e}")))?;
    let env = cfg.env.build();
    if policy.state_dim() != env.spec().state_dim || policy.action_dim() != env.spec().action_dim {
        return Err(config_error("policy dimensions do not match the environment"));
    }
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let hash = cfg.hash()?;
    let report = eval_report(
        &policy,
        &env,
        episodes.unwrap_or(cfg.eval.episodes),
        horizon.unwrap_or(cfg.eval.horizon),
        seed,
        &hash,
    );
    println!(
        "mean return {:.4}  std {:.4}  ci95 {:.4}  episodes {}",
        report.mean, report.std, report.ci95, report.episodes
    );
    if let Some(out) = common.out {
        fs::create_dir_all(&out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FieldSummaryReport {
    config_sha256: String,
    seed: u64,
    points: Vec<nopg::experiments::PointSummary>,
}

fn cmd_gradient_field(
    common: Common,
    estimators: Option<Vec<nopg::experiments::Estimator>>,
    datasets: Option<usize>,
) -> Result<()> {
    let mut cfg: GradientFieldConfig = match common.config.as_deref() {
        Some(path) => read_config(path)?.0,
        None => GradientFieldConfig::default(),
    };
    if let Some(e) = estimators {
        cfg.estimators = e;
    }
    if let Some(d) = datasets {
        cfg.datasets = d;
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let seed = common.seed.unwrap_or(0);
    let hash = canonical_hash(&cfg)?;
    let out = create_out(common.out, || PathBuf::from("runs/gradient_field"))?;
    let sweeps = cfg.run(seed)?;
    for (d, rows) in sweeps.iter().enumerate() {
        let comment = provenance_comment(&hash, seed.wrapping_add(d as u64), &format!("dataset {d}"));
        save_field(rows, &out.join(format!("field_{d}.csv")), Some(&comment))?;
    }
    let points = summarize_fields(&sweeps)?;
    write_json(
        &out.join("summary.json"),
        &FieldSummaryReport {
            config_sha256: hash,
            seed,
            points,
        },
    )?;
    eprintln!("wrote {} field files to {}", sweeps.len(), out.display());
    Ok(())
}

fn cmd_fields(
    common: Common,
    policy_path: PathBuf,
    dataset: Option<PathBuf>,
    dims: Vec<usize>,
    size: Vec<usize>,
) -> Result<()> {
    let (mut cfg, base) = load_experiment(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(path) = dataset {
        cfg.dataset = DatasetSource::File {
            path: std::path::absolute(path)?,
        };
    }
    let (dims, size) = match (dims.as_slice(), size.as_slice()) {
        (&[a, b], &[n, m]) => ([a, b], [n, m]),
        _ => bail!(config_error("--dims and --size take exactly two values")),
    };
    let policy = Policy::load(&policy_path).map_err(|e| config_error(format!("cannot load policy: {e}")))?;
    let env = cfg.env.build();
    let ranges = env.grid_ranges();
    if dims.iter().any(|d| *d >= env.internal_dim()) {
        return Err(config_error(format!(
            "state dimensions must be below {}",
            env.internal_dim()
        )));
    }
    let data = experiment_dataset(&cfg, base.as_deref(), &env)?;
    let r_max = env.spec().r_max;
    let bandwidths = cfg.train.bandwidths.resolve(&data)?;
    let npbe = Npbe::new(data, bandwidths, cfg.train.gamma)?;
    let seed = cfg.train.seed;
    let grid = value_and_density_fields(
        &npbe,
        &env,
        &policy,
        &cfg.train.mc,
        cfg.train.sparsify,
        &cfg.train.solver,
        dims,
        [ranges[dims[0]], ranges[dims[1]]],
        size,
        &vec![0.0; env.internal_dim()],
        seed,
    )?;
    let bound = 2.0 * r_max / (1.0 - cfg.train.gamma);
    let violations = grid.value.iter().filter(|v| v.abs() > bound).count();
    let hash = cfg.hash()?;
    let out = create_out(common.out, || PathBuf::from("runs").join(&cfg.name).join("fields"))?;
    let comment = provenance_comment(
        &hash,
        seed,
        &format!(
            "policy {}\nvalue bound {bound} violations {violations}",
            policy_path.display()
        ),
    );
    let mut buf = Vec::new();
    grid.write_csv(&mut buf, Some(&comment))?;
    fs::write(out.join("fields.csv"), buf)?;
    if grid.negative_mu {
        eprintln!("warning: the state-distribution weights have negative entries");
    }
    eprintln!(
        "wrote {}x{} field to {}",
        size[0],
        size[1],
        out.join("fields.csv").display()
    );
    Ok(())
}

/// Bias-bound sweep: every bandwidth is multiplied by each scale in turn.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BiasBoundSweep {
    inputs: BiasBoundInputs,
    scales: Vec<f64>,
}

impl Default for BiasBoundSweep {
    fn default() -> Self {
        Self {
            inputs: BiasBoundInputs {
                l_r: 1.0,
                l_beta: 1.0,
                l_v: 10.0,
                h_state: vec![0.1],
                h_action: vec![0.1],
                h_next_state: vec![0.1],
                gamma: 0.9,
            },
            scales: (0..10).map(|i| 0.1 * 2f64.powi(i) / 8.0).collect(),
        }
    }
}

fn cmd_bias_bound(common: Common) -> Result<()> {
    let sweep: BiasBoundSweep = match common.config.as_deref() {
        Some(path) => read_config(path)?.0,
        None => BiasBoundSweep::default(),
    };
    sweep.inputs.validate().map_err(|e| config_error(e.to_string()))?;
    if sweep.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(config_error("scales must be positive"));
    }
    let hash = canonical_hash(&sweep)?;
    let seed = common.seed.unwrap_or(0);
    let mut body = String::from("scale,bound,overflow\n");
    for &s in &sweep.scales {
        let scaled = |h: &[f64]| h.iter().map(|x| x * s).collect::<Vec<_>>();
        let inputs = BiasBoundInputs {
            h_state: scaled(&sweep.inputs.h_state),
            h_action: scaled(&sweep.inputs.h_action),
            h_next_state: scaled(&sweep.inputs.h_next_state),
            ..sweep.inputs.clone()
        };
        let b = npbe_bias_bound(&inputs)?;
        body.push_str(&format!(
            "{},{},{}\n",
            format_float(s),
            format_float(b.value),
            b.overflow
        ));
    }
    let out = create_out(common.out, || PathBuf::from("runs/bias_bound"))?;
    write_with_comment(&out.join("bias_bound.csv"), &provenance_comment(&hash, seed, ""), &body)?;
    print!("{body}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            env,
            grid,
            demos,
            random,
            max_steps,
        } => cmd_generate(common, env, grid, demos, random, max_steps),
        Command::Train {
            common,
            mode,
            updates,
            dataset,
        } => cmd_train(common, mode, updates, dataset),
        Command::Eval {
            common,
            policy,
            episodes,
            horizon,
        } => cmd_eval(common, policy, episodes, horizon),
        Command::GradientField {
            common,
            estimators,
            datasets,
        } => cmd_gradient_field(common, estimators, datasets),
        Command::Fields {
            common,
            policy,
            dataset,
            dims,
            size,
        } => cmd_fields(common, policy, dataset, dims, size),
        Command::BiasBound { common } => cmd_bias_bound(common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
