//! LQR gradient-field sweeps and value / state-density field dumps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::lqr_exact;
use crate::baselines::{dpg_lite_gradient, pwis_gradient, TrajectoryBatch};
use crate::dataset::{format_float, TransitionDataset};
use crate::envs::{generate_random_agent, AnyEnv, BehaviorPolicy, Environment, Lqr, LqrParams, StartSampler};
use crate::error::{NopgError, Result};
use crate::gradient::full_gradient;
use crate::npbe::{McCounts, McSamples, Npbe, NpbeSolution};
use crate::optimizer::{observed_initial_state, BandwidthSpec};
use crate::policy::{DifferentiablePolicy, LinearPolicy};
use crate::rng::substream;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    NopgD,
    NopgS,
    Pwis,
    DpgLite,
    Exact,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::NopgD,
        Estimator::NopgS,
        Estimator::Pwis,
        Estimator::DpgLite,
        Estimator::Exact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::NopgD => "nopg-d",
            Estimator::NopgS => "nopg-s",
            Estimator::Pwis => "pwis",
            Estimator::DpgLite => "dpg-lite",
            Estimator::Exact => "exact",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = NopgError;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| NopgError::InvalidInput(format!("unknown estimator {s:?}")))
    }
}

/// Regular grid over the two diagonal gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainGrid {
    pub k1: (f64, f64),
    pub k2: (f64, f64),
    pub n1: usize,
    pub n2: usize,
}

fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl GainGrid {
    /// Points with `k2` varying fastest.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let k2s = linspace(self.k2, self.n2);
        linspace(self.k1, self.n1)
            .into_iter()
            .flat_map(|a| k2s.iter().map(move |&b| [a, b]))
            .collect()
    }
}

/// Estimator settings for the LQR gradient-field sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrFieldConfig {
    pub trajectories: usize,
    pub steps: usize,
    /// Behavior for the deterministic-policy data.
    pub deterministic_behavior: BehaviorPolicy,
    /// Behavior for the stochastic-policy data; must carry log densities.
    pub stochastic_behavior: BehaviorPolicy,
    pub nopg_d_bandwidths: BandwidthSpec,
    pub nopg_s_bandwidths: BandwidthSpec,
    pub nopg_d_sparsify: Option<usize>,
    pub nopg_s_sparsify: Option<usize>,
    /// Std of the Gaussian policies evaluated by NOPG-S and PWIS.
    pub policy_std: Vec<f64>,
    pub n_pi: usize,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Default for LqrFieldConfig {
    fn default() -> Self {
        Self {
            trajectories: 100,
            steps: 30,
            // Behavior gains sit inside the default sweep. Gains with a
            // closed-loop pole outside the unit circle make 30-step data blow up.
            deterministic_behavior: BehaviorPolicy::PerturbedLinear {
                gain: vec![vec![-3.0, 0.0], vec![0.0, -2.0]],
                perturbation_std: 1.0,
            },
            stochastic_behavior: BehaviorPolicy::LinearGaussian {
                gain: vec![vec![-3.0, 0.0], vec![0.0, -2.0]],
                std: vec![1.0, 1.0],
            },
            nopg_d_bandwidths: BandwidthSpec::Factors {
                state: vec![1.0, 1.0],
                action: vec![1.0, 1.0],
            },
            nopg_s_bandwidths: BandwidthSpec::Factors {
                state: vec![1.0, 1.0],
                action: vec![1.0, 1.0],
            },
            nopg_d_sparsify: Some(5),
            nopg_s_sparsify: Some(10),
            policy_std: vec![0.1, 0.1],
            n_pi: 4,
            solver: SolverConfig::default(),
        }
    }
}

/// The two datasets of one sweep.
#[derive(Debug, Clone)]
pub struct LqrFieldData {
    pub deterministic: TransitionDataset,
    pub stochastic: TransitionDataset,
}

impl LqrFieldData {
    /// Both datasets from one master seed; the stochastic one uses a seed
    /// drawn from the `"dataset-stochastic"` stream.
    pub fn generate(env: &Lqr, cfg: &LqrFieldConfig, seed: u64) -> Result<Self> {
        let stochastic_seed: u64 = substream(seed, "dataset-stochastic").random();
        Ok(Self {
            deterministic: generate_random_agent(
                env,
                cfg.trajectories,
                cfg.steps,
                &cfg.deterministic_behavior,
                &StartSampler::Environment,
                seed,
            )?,
            stochastic: generate_random_agent(
                env,
                cfg.trajectories,
                cfg.steps,
                &cfg.stochastic_behavior,
                &StartSampler::Environment,
                stochastic_seed,
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldRow {
    pub k1: f64,
    pub k2: f64,
    pub estimator: Estimator,
    /// `None` when the estimator is undefined at the point (unstable gains for
    /// the exact gradient).
    pub grad: Option<[f64; 2]>,
}

pub const FIELD_HEADER: &str = "k1,k2,estimator,g1,g2";

/// NOPG gradient of `J` with respect to the diagonal gains of `policy`.
fn nopg_gains_gradient(
    npbe: &Npbe,
    env: &AnyEnv,
    policy: &LinearPolicy,
    n_pi: usize,
    sparsify: Option<usize>,
    solver: &SolverConfig,
    seed: u64,
) -> Result<[f64; 2]> {
    let counts = McCounts {
        n_pi,
        n_phi: 1,
        n_mu0: 1,
    };
    let samples = McSamples::draw(
        npbe.len(),
        2,
        2,
        policy.is_stochastic(),
        &counts,
        observed_initial_state(env),
        seed,
        0,
    )?;
    let solution: NpbeSolution = npbe.build_and_solve(policy, &samples, sparsify, solver)?;
    let g = full_gradient(npbe, policy, &solution, &samples)?.grad;
    Ok([g[0], g[1]])
}

/// Gradient of every requested estimator at every grid point, on one pair
/// of datasets.
pub fn lqr_gradient_field(
    params: &LqrParams,
    cfg: &LqrFieldConfig,
    data: &LqrFieldData,
    estimators: &[Estimator],
    grid: &GainGrid,
    seed: u64,
) -> Result<Vec<FieldRow>> {
    let env = AnyEnv::Lqr(Lqr::new(params.clone()));
    let gamma = params.gamma;
    let wants = |e: Estimator| estimators.contains(&e);
    let npbe_d = if wants(Estimator::NopgD) {
        let bw = cfg.nopg_d_bandwidths.resolve(&data.deterministic)?;
        Some(Npbe::new(data.deterministic.clone(), bw, gamma)?)
    } else {
        None
    };
    let npbe_s = if wants(Estimator::NopgS) {
        let bw = cfg.nopg_s_bandwidths.resolve(&data.stochastic)?;
        Some(Npbe::new(data.stochastic.clone(), bw, gamma)?)
    } else {
        None
    };
    let batch = if wants(Estimator::Pwis) {
        Some(TrajectoryBatch::from_dataset(&data.stochastic)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for [k1, k2] in grid.points() {
        let det = LinearPolicy::deterministic(vec![k1, k2])?;
        let stoch = LinearPolicy::gaussian(vec![k1, k2], cfg.policy_std.clone())?;
        for &e in estimators {
            let grad = match e {
                Estimator::NopgD => Some(nopg_gains_gradient(
                    npbe_d.as_ref().expect("built"),
                    &env,
                    &det,
                    1,
                    cfg.nopg_d_sparsify,
                    &cfg.solver,
                    seed,
                )?),
                Estimator::NopgS => Some(nopg_gains_gradient(
                    npbe_s.as_ref().expect("built"),
                    &env,
                    &stoch,
                    cfg.n_pi,
                    cfg.nopg_s_sparsify,
                    &cfg.solver,
                    seed,
                )?),
                Estimator::Pwis => {
                    let g = pwis_gradient(&stoch, batch.as_ref().expect("built"), gamma)?;
                    Some([g[0], g[1]])
                }
                Estimator::DpgLite => {
                    let g = dpg_lite_gradient(&det, &data.deterministic, gamma)?;
                    Some([g[0], g[1]])
                }
                Estimator::Exact => lqr_exact(&[k1, k2], params)?.grad.map(|g| [g[0], g[1]]),
            };
            rows.push(FieldRow {
                k1,
                k2,
                estimator: e,
                grad,
            });
        }
    }
    Ok(rows)
}

pub fn write_field<W: Write>(rows: &[FieldRow], mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "{FIELD_HEADER}")?;
    for r in rows {
        let (g1, g2) = match r.grad {
            Some([a, b]) => (format_float(a), format_float(b)),
            None => ("nan".to_string(), "nan".to_string()),
        };
        writeln!(
            out,
            "{},{},{},{},{}",
            format_float(r.k1),
            format_float(r.k2),
            r.estimator,
            g1,
            g2
        )?;
    }
    Ok(())
}

pub fn save_field(rows: &[FieldRow], path: &Path, comment: Option<&str>) -> Result<()> {
    write_field(rows, std::io::BufWriter::new(std::fs::File::create(path)?), comment)
}

/// Cosine similarity; `None` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// `1 − ‖mean of unit vectors‖²`: 0 when all directions agree, 1 for
/// directions that cancel. Zero vectors are skipped.
pub fn direction_variance(vectors: &[[f64; 2]]) -> f64 {
    let units: Vec<[f64; 2]> = vectors
        .iter()
        .filter_map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n])
        })
        .collect();
    if units.is_empty() {
        return 1.0;
    }
    let m = [
        units.iter().map(|u| u[0]).sum::<f64>() / units.len() as f64,
        units.iter().map(|u| u[1]).sum::<f64>() / units.len() as f64,
    ];
    1.0 - (m[0] * m[0] + m[1] * m[1])
}

/// A full gradient-field sweep: estimator settings, gain grid and the number
/// of independent datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFieldConfig {
    #[serde(default)]
    pub field: LqrFieldConfig,
    pub grid: GainGrid,
    pub estimators: Vec<Estimator>,
    pub datasets: usize,
}

impl Default for GradientFieldConfig {
    fn default() -> Self {
        Self {
            field: LqrFieldConfig::default(),
            grid: GainGrid {
                k1: (-4.0, -2.0),
                k2: (-3.0, -1.0),
                n1: 5,
                n2: 5,
            },
            estimators: Estimator::ALL.to_vec(),
            datasets: 5,
        }
    }
}

impl GradientFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.datasets == 0 || self.grid.n1 == 0 || self.grid.n2 == 0 || self.estimators.is_empty() {
            return Err(NopgError::InvalidInput(
                "gradient field needs at least one dataset, grid point and estimator".into(),
            ));
        }
        if self.field.trajectories == 0 || self.field.steps == 0 || self.field.n_pi == 0 {
            return Err(NopgError::InvalidInput(
                "trajectories, steps and n_pi must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Field rows for each dataset; dataset `d` uses master seed `seed + d`.
    pub fn run(&self, seed: u64) -> Result<Vec<Vec<FieldRow>>> {
        self.validate()?;
        let params = LqrParams::default();
        let env = Lqr::new(params.clone());
        (0..self.datasets as u64)
            .map(|d| {
                let data = LqrFieldData::generate(&env, &self.field, seed.wrapping_add(d))?;
                lqr_gradient_field(
                    &params,
                    &self.field,
                    &data,
                    &self.estimators,
                    &self.grid,
                    seed.wrapping_add(d),
                )
            })
            .collect()
    }
}

/// Across-dataset statistics at one gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub k1: f64,
    pub k2: f64,
    /// Mean cosine to the exact gradient, per estimator.
    pub cosine_to_exact: Vec<(Estimator, f64)>,
    /// [`direction_variance`] across datasets, per estimator.
    pub direction_variance: Vec<(Estimator, f64)>,
}

impl PointSummary {
    pub fn cosine_of(&self, e: Estimator) -> Option<f64> {
        self.cosine_to_exact.iter().find(|(x, _)| *x == e).map(|(_, v)| *v)
    }

    pub fn variance_of(&self, e: Estimator) -> Option<f64> {
        self.direction_variance.iter().find(|(x, _)| *x == e).map(|(_, v)| *v)
    }
}

/// Per-point summaries of field sweeps over several datasets. All sweeps
/// must share the grid and estimator order. Points where the exact gradient
/// is undefined get no cosine entries; a missing cosine counts as 0.
pub fn summarize_fields(per_dataset: &[Vec<FieldRow>]) -> Result<Vec<PointSummary>> {
    let first = per_dataset
        .first()
        .ok_or_else(|| NopgError::InvalidInput("no field sweeps to summarize".into()))?;
    if per_dataset.iter().any(|rows| rows.len() != first.len()) {
        return Err(NopgError::InvalidInput("field sweeps differ in length".into()));
    }
    let mut estimators: Vec<Estimator> = Vec::new();
    for r in first {
        if !estimators.contains(&r.estimator) {
            estimators.push(r.estimator);
        }
    }
    let per_point = estimators.len();
    let mut out = Vec::with_capacity(first.len() / per_point);
    for chunk in first.chunks(per_point) {
        let base = out.len() * per_point;
        let (k1, k2) = (chunk[0].k1, chunk[0].k2);
        let grads = |e: Estimator| -> Vec<Option<[f64; 2]>> {
            let offset = estimators.iter().position(|x| *x == e).expect("listed");
            per_dataset.iter().map(|rows| rows[base + offset].grad).collect()
        };
        let exact = estimators
            .contains(&Estimator::Exact)
            .then(|| grads(Estimator::Exact)[0])
            .flatten();
        let mut cosine_to_exact = Vec::new();
        let mut direction_var = Vec::new();
        for &e in estimators.iter().filter(|e| **e != Estimator::Exact) {
            let g = grads(e);
            if let Some(ex) = exact {
                let total: f64 = g.iter().map(|v| v.and_then(|v| cosine(&v, &ex)).unwrap_or(0.0)).sum();
                cosine_to_exact.push((e, total / g.len() as f64));
            }
            let vs: Vec<[f64; 2]> = g.into_iter().flatten().collect();
            direction_var.push((e, direction_variance(&vs)));
        }
        out.push(PointSummary {
            k1,
            k2,
            cosine_to_exact,
            direction_variance: direction_var,
        });
    }
    Ok(out)
}

/// Values `V̂(s)` and densities `ε(s)·μ` on a regular grid over two
/// internal state dimensions (other dimensions fixed at `base`), queried
/// through the environment's observation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub dims: [usize; 2],
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major `x.len() × y.len()`.
    pub value: Vec<f64>,
    pub density: Vec<f64>,
    /// Whether `μ` had negative entries (densities are reported unclamped).
    pub negative_mu: bool,
}

/// Value and state-density fields of `policy` on `dataset`.
#[allow(clippy::too_many_arguments)]
pub fn value_and_density_fields<P: DifferentiablePolicy + ?Sized>(
    npbe: &Npbe,
    env: &AnyEnv,
    policy: &P,
    counts: &McCounts,
    sparsify: Option<usize>,
    solver: &SolverConfig,
    dims: [usize; 2],
    ranges: [(f64, f64); 2],
    sizes: [usize; 2],
    base: &[f64],
    seed: u64,
) -> Result<FieldGrid> {
    let ds = npbe.dataset().state_dim();
    let internal = env.internal_dim();
    if dims.iter().any(|d| *d >= internal) || dims[0] == dims[1] || base.len() != internal {
        return Err(NopgError::InvalidInput(format!(
            "field dimensions {dims:?} and base point must fit a {internal}-dimensional state"
        )));
    }
    let samples = McSamples::draw(
        npbe.len(),
        ds,
        npbe.dataset().action_dim(),
        policy.is_stochastic(),
        counts,
        observed_initial_state(env),
        seed,
        0,
    )?;
    let solution = npbe.build_and_solve(policy, &samples, sparsify, solver)?;
    let x = linspace(ranges[0], sizes[0]);
    let y = linspace(ranges[1], sizes[1]);
    let mut value = Vec::with_capacity(x.len() * y.len());
    let mut density = Vec::with_capacity(x.len() * y.len());
    let noise = samples.initial_noise.first().cloned().unwrap_or_default();
    for &xi in &x {
        for &yi in &y {
            let mut s = base.to_vec();
            s[dims[0]] = xi;
            s[dims[1]] = yi;
            let obs = env.observe(&s);
            value.push(npbe.value_at(&obs, policy, &solution, &noise)?);
            density.push(npbe.state_density_at(&obs, policy, &solution, &noise)?);
        }
    }
    Ok(FieldGrid {
        dims,
        x,
        y,
        value,
        density,
        negative_mu: solution.mu.iter().any(|m| *m < 0.0),
    })
}

impl FieldGrid {
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        if self.negative_mu {
            writeln!(out, "# warning: mu has negative entries; densities are unclamped")?;
        }
        writeln!(out, "s{},s{},value,density", self.dims[0], self.dims[1])?;
        let mut k = 0;
        for xi in &self.x {
            for yi in &self.y {
                writeln!(
                    out,
                    "{},{},{},{}",
                    format_float(*xi),
                    format_float(*yi),
                    format_float(self.value[k]),
                    format_float(self.density[k])
                )?;
                k += 1;
            }
        }
        Ok(())
    }
}
