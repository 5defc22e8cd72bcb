//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string.
//! The `*_json` functions hold the logic and run natively as well.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use nopg::analysis::{npbe_bias_bound, BiasBoundInputs};
use nopg::envs::{generate_uniform_grid, EnvName, Environment};
use nopg::envs::{Lqr, LqrParams};
use nopg::experiments::{
    lqr_gradient_field, value_and_density_fields, Estimator, GainGrid, LqrFieldConfig, LqrFieldData,
};
use nopg::npbe::{KernelBandwidths, McCounts, Npbe};
use nopg::optimizer::PolicySpec;
use nopg::policy::{Policy, PolicyMode};
use nopg::solver::SolverConfig;

const MAX_GRID: usize = 60;

#[derive(Serialize)]
struct Arrow {
    k1: f64,
    k2: f64,
    estimator: String,
    g: Option<[f64; 2]>,
}

/// Gradient arrows of the listed estimators (comma separated) over an
/// `n × n` gain grid, from one small off-policy dataset.
pub fn gradient_field_json(
    k1: (f64, f64),
    k2: (f64, f64),
    n: usize,
    estimators: &str,
    trajectories: usize,
    seed: u64,
) -> Result<String, String> {
    if n == 0 || n > MAX_GRID || trajectories == 0 {
        return Err(format!("grid size must be in 1..={MAX_GRID} and trajectories positive"));
    }
    let estimators = estimators
        .split(',')
        .map(|s| s.trim().parse::<Estimator>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let params = LqrParams::default();
    let cfg = LqrFieldConfig {
        trajectories,
        ..Default::default()
    };
    let grid = GainGrid { k1, k2, n1: n, n2: n };
    let data = LqrFieldData::generate(&Lqr::new(params.clone()), &cfg, seed).map_err(|e| e.to_string())?;
    let rows = lqr_gradient_field(&params, &cfg, &data, &estimators, &grid, seed).map_err(|e| e.to_string())?;
    let arrows: Vec<Arrow> = rows
        .into_iter()
        .map(|r| Arrow {
            k1: r.k1,
            k2: r.k2,
            estimator: r.estimator.to_string(),
            g: r.grad,
        })
        .collect();
    serde_json::to_string(&arrows).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Fields {
    theta: Vec<f64>,
    theta_dot: Vec<f64>,
    value: Vec<f64>,
    density: Vec<f64>,
    negative_mu: bool,
}

/// Value and state-density fields of a pendulum policy over `(θ, θ̇)` on a
/// `size × size` grid, from a uniform `grid × grid × 2` dataset. An empty
/// `policy_json` uses a freshly initialized deterministic policy.
pub fn pendulum_fields_json(policy_json: &str, grid: usize, size: usize, seed: u64) -> Result<String, String> {
    if !(2..=25).contains(&grid) || size == 0 || size > MAX_GRID {
        return Err(format!(
            "dataset grid must be in 2..=25 and field size in 1..={MAX_GRID}"
        ));
    }
    let env = EnvName::Pendulum.build();
    let policy: Policy = if policy_json.trim().is_empty() {
        PolicySpec::default()
            .build(&env, PolicyMode::Deterministic, seed)
            .map_err(|e| e.to_string())?
    } else {
        serde_json::from_str(policy_json).map_err(|e| e.to_string())?
    };
    let data = generate_uniform_grid(&env, &[grid, grid, 2]).map_err(|e| e.to_string())?;
    let bw = KernelBandwidths::select(&data, &[1.0; 3], &[50.0]).map_err(|e| e.to_string())?;
    let npbe = Npbe::new(data, bw, 0.97).map_err(|e| e.to_string())?;
    let ranges = env.grid_ranges();
    let field = value_and_density_fields(
        &npbe,
        &env,
        &policy,
        &McCounts {
            n_pi: 10,
            n_phi: 1,
            n_mu0: 1,
        },
        Some(10),
        &SolverConfig::default(),
        [0, 1],
        [ranges[0], ranges[1]],
        [size, size],
        &[0.0, 0.0],
        seed,
    )
    .map_err(|e| e.to_string())?;
    serde_json::to_string(&Fields {
        theta: field.x,
        theta_dot: field.y,
        value: field.value,
        density: field.density,
        negative_mu: field.negative_mu,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct BoundPoint {
    h: f64,
    bound: Option<f64>,
}

/// Value-bias bound for a 1-D state, 1-D action task with every bandwidth
/// equal to `h`, for `n` log-spaced `h` in `[h_min, h_max]`. Overflowing
/// points carry `null`.
pub fn bias_bound_curve_json(
    l_r: f64,
    l_beta: f64,
    l_v: f64,
    gamma: f64,
    h_min: f64,
    h_max: f64,
    n: usize,
) -> Result<String, String> {
    if !(h_min > 0.0 && h_max >= h_min && h_max.is_finite()) || n == 0 || n > 1000 {
        return Err("need 0 < h_min <= h_max and 1 <= n <= 1000".into());
    }
    let ratio = if n > 1 {
        (h_max / h_min).ln() / (n - 1) as f64
    } else {
        0.0
    };
    let points = (0..n)
        .map(|i| {
            let h = h_min * (ratio * i as f64).exp();
            let b = npbe_bias_bound(&BiasBoundInputs {
                l_r,
                l_beta,
                l_v,
                h_state: vec![h],
                h_action: vec![h],
                h_next_state: vec![h],
                gamma,
            })
            .map_err(|e| e.to_string())?;
            Ok(BoundPoint {
                h,
                bound: (!b.overflow).then_some(b.value),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn gradient_field(
    k1_min: f64,
    k1_max: f64,
    k2_min: f64,
    k2_max: f64,
    n: usize,
    estimators: &str,
    trajectories: usize,
    seed: u32,
) -> Result<String, JsValue> {
    gradient_field_json(
        (k1_min, k1_max),
        (k2_min, k2_max),
        n,
        estimators,
        trajectories,
        seed as u64,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn pendulum_fields(policy_json: &str, grid: usize, size: usize, seed: u32) -> Result<String, JsValue> {
    pendulum_fields_json(policy_json, grid, size, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bias_bound_curve(
    l_r: f64,
    l_beta: f64,
    l_v: f64,
    gamma: f64,
    h_min: f64,
    h_max: f64,
    n: usize,
) -> Result<String, JsValue> {
    bias_bound_curve_json(l_r, l_beta, l_v, gamma, h_min, h_max, n).map_err(|e| JsValue::from_str(&e))
}
