//! Differentiable policies: a one-hidden-layer MLP and a diagonal linear
//! controller, both in deterministic or Gaussian form.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NopgError, Result};
use crate::rng::StreamRng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Deterministic,
    #[serde(alias = "stochastic")]
    Gaussian,
}

impl std::str::FromStr for PolicyMode {
    type Err = NopgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deterministic" => Ok(PolicyMode::Deterministic),
            "gaussian" | "stochastic" => Ok(PolicyMode::Gaussian),
            other => Err(NopgError::InvalidInput(format!("unknown policy mode {other:?}"))),
        }
    }
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::Deterministic => "deterministic",
            PolicyMode::Gaussian => "gaussian",
        }
    }
}

/// Action distribution at one state. `std` is `None` for deterministic policies.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub std: Option<Vec<f64>>,
}

/// Policy with a flat parameter vector and reverse-mode action derivatives.
pub trait DifferentiablePolicy {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn mode(&self) -> PolicyMode;
    fn params(&self) -> &[f64];

    /// Replace the parameters; non-finite entries are rejected.
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Multiplier applied to the std output (variance schedule). Ignored by
    /// deterministic policies.
    fn set_std_scale(&mut self, scale: f64);

    fn forward(&self, state: &[f64]) -> ActionDistribution;

    /// Accumulate `(∂mean/∂θ)ᵀ cot_mean + (∂std/∂θ)ᵀ cot_std` into `grad`.
    fn vjp(&self, state: &[f64], cot_mean: &[f64], cot_std: Option<&[f64]>, grad: &mut [f64]);

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn is_stochastic(&self) -> bool {
        self.mode() == PolicyMode::Gaussian
    }

    /// Diagonal-Gaussian `log π(a|s)`, accumulating its parameter gradient into `grad`.
    fn log_density_and_grad(&self, state: &[f64], action: &[f64], grad: &mut [f64]) -> Result<f64> {
        let dist = self.forward(state);
        let std = dist.std.ok_or(NopgError::UnsupportedMode {
            mode: "deterministic",
            op: "log density",
        })?;
        let mut logp = 0.0;
        let mut g_mean = vec![0.0; action.len()];
        let mut g_std = vec![0.0; action.len()];
        for k in 0..action.len() {
            let d = action[k] - dist.mean[k];
            let s = std[k];
            logp += -0.5 * (d / s).powi(2) - s.ln() - HALF_LN_2PI;
            g_mean[k] = d / (s * s);
            g_std[k] = -1.0 / s + d * d / (s * s * s);
        }
        self.vjp(state, &g_mean, Some(&g_std), grad);
        Ok(logp)
    }

    /// Action used at evaluation time: the mean.
    fn act(&self, state: &[f64]) -> Vec<f64> {
        self.forward(state).mean
    }

    /// Reparameterized sample `mean + std·ζ`; the mean for deterministic policies.
    fn sample(&self, state: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let dist = self.forward(state);
        match dist.std {
            None => dist.mean,
            Some(std) => dist
                .mean
                .iter()
                .zip(&std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
        }
    }
}

fn check_finite(params: &[f64]) -> Result<()> {
    match params.iter().position(|p| !p.is_finite()) {
        Some(i) => Err(NopgError::InvalidParameters(format!("parameter {i} is {}", params[i]))),
        None => Ok(()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shape of an [`MlpPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub state_dim: usize,
    pub hidden: usize,
    pub action_dim: usize,
    /// Mean is `output_scale · tanh(·)`.
    pub output_scale: f64,
    pub mode: PolicyMode,
}

impl MlpArchitecture {
    pub fn new(state_dim: usize, action_dim: usize, output_scale: f64, mode: PolicyMode) -> Self {
        Self {
            state_dim,
            hidden: 50,
            action_dim,
            output_scale,
            mode,
        }
    }

    fn heads(&self) -> usize {
        match self.mode {
            PolicyMode::Deterministic => self.action_dim,
            PolicyMode::Gaussian => 2 * self.action_dim,
        }
    }

    /// Layer shapes `[W1, b1, W2, b2]` as `(rows, cols)`.
    pub fn layout(&self) -> [(usize, usize); 4] {
        [
            (self.hidden, self.state_dim),
            (self.hidden, 1),
            (self.heads(), self.hidden),
            (self.heads(), 1),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(r, c)| r * c).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(NopgError::InvalidInput("MLP dimensions must be at least 1".into()));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(NopgError::InvalidInput(format!(
                "output scale must be positive, got {}",
                self.output_scale
            )));
        }
        Ok(())
    }
}

fn default_std_scale() -> f64 {
    1.0
}

/// One hidden ReLU layer. The Gaussian variant adds a std head
/// `sigmoid(·)` sharing the hidden layer with the mean head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct MlpPolicy {
    arch: MlpArchitecture,
    params: Vec<f64>,
    std_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    architecture: MlpArchitecture,
    params: Vec<f64>,
    #[serde(default = "default_std_scale")]
    std_scale: f64,
}

impl TryFrom<MlpRepr> for MlpPolicy {
    type Error = NopgError;
    fn try_from(r: MlpRepr) -> Result<Self> {
        let mut p = MlpPolicy::from_params(r.architecture, r.params)?;
        p.std_scale = r.std_scale;
        Ok(p)
    }
}

impl From<MlpPolicy> for MlpRepr {
    fn from(p: MlpPolicy) -> Self {
        MlpRepr {
            architecture: p.arch,
            params: p.params,
            std_scale: p.std_scale,
        }
    }
}

struct Hidden {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

impl MlpPolicy {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: MlpArchitecture, rng: &mut StreamRng) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.num_params());
        for (i, (rows, cols)) in arch.layout().into_iter().enumerate() {
            if i % 2 == 0 {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                params.extend((0..rows * cols).map(|_| rng.random_range(-limit..limit)));
            } else {
                params.extend(std::iter::repeat_n(0.0, rows));
            }
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: MlpArchitecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(NopgError::DimensionMismatch {
                expected: arch.num_params(),
                got: params.len(),
                context: "MLP parameter vector",
            });
        }
        check_finite(&params)?;
        Ok(Self {
            arch,
            params,
            std_scale: 1.0,
        })
    }

    pub fn zeros(arch: MlpArchitecture) -> Result<Self> {
        Self::from_params(arch, vec![0.0; arch.num_params()])
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn std_scale(&self) -> f64 {
        self.std_scale
    }

    /// Start offsets of `b1`, `W2` and `b2` (`W1` starts at 0).
    fn offsets(&self) -> (usize, usize, usize) {
        let h = self.arch.hidden;
        let b1 = h * self.arch.state_dim;
        let w2 = b1 + h;
        (b1, w2, w2 + self.arch.heads() * h)
    }

    fn hidden(&self, state: &[f64]) -> Hidden {
        let a = &self.arch;
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut pre = vec![0.0; a.hidden];
        for (j, pj) in pre.iter_mut().enumerate() {
            let row = &p[j * a.state_dim..(j + 1) * a.state_dim];
            *pj = p[b1 + j] + row.iter().zip(state).map(|(w, x)| w * x).sum::<f64>();
        }
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let heads = a.heads();
        let mut out = vec![0.0; heads];
        for (k, ok) in out.iter_mut().enumerate() {
            let row = &p[w2 + k * a.hidden..w2 + (k + 1) * a.hidden];
            *ok = p[b2 + k] + row.iter().zip(&act).map(|(w, h)| w * h).sum::<f64>();
        }
        Hidden { pre, act, out }
    }
}

impl DifferentiablePolicy for MlpPolicy {
    fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    fn action_dim(&self) -> usize {
        self.arch.action_dim
    }

    fn mode(&self) -> PolicyMode {
        self.arch.mode
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NopgError::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
                context: "MLP parameter vector",
            });
        }
        check_finite(params)?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn set_std_scale(&mut self, scale: f64) {
        self.std_scale = scale;
    }

    fn forward(&self, state: &[f64]) -> ActionDistribution {
        let da = self.arch.action_dim;
        let h = self.hidden(state);
        let c = self.arch.output_scale;
        let mean = h.out[..da].iter().map(|z| c * z.tanh()).collect();
        let std = match self.arch.mode {
            PolicyMode::Deterministic => None,
            PolicyMode::Gaussian => Some(h.out[da..].iter().map(|z| self.std_scale * sigmoid(*z)).collect()),
        };
        ActionDistribution { mean, std }
    }

    fn vjp(&self, state: &[f64], cot_mean: &[f64], cot_std: Option<&[f64]>, grad: &mut [f64]) {
        let a = &self.arch;
        let da = a.action_dim;
        let h = self.hidden(state);
        let c = a.output_scale;
        let mut g_out = vec![0.0; a.heads()];
        for k in 0..da {
            let t = h.out[k].tanh();
            g_out[k] = cot_mean[k] * c * (1.0 - t * t);
        }
        if let (PolicyMode::Gaussian, Some(cs)) = (a.mode, cot_std) {
            for k in 0..da {
                let s = sigmoid(h.out[da + k]);
                g_out[da + k] = cs[k] * self.std_scale * s * (1.0 - s);
            }
        }
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut g_hidden = vec![0.0; a.hidden];
        for (k, gk) in g_out.iter().enumerate() {
            if *gk == 0.0 {
                continue;
            }
            grad[b2 + k] += gk;
            let base = w2 + k * a.hidden;
            for j in 0..a.hidden {
                grad[base + j] += gk * h.act[j];
                g_hidden[j] += gk * p[base + j];
            }
        }
        for j in 0..a.hidden {
            if h.pre[j] <= 0.0 {
                continue;
            }
            let g = g_hidden[j];
            grad[b1 + j] += g;
            let base = j * a.state_dim;
            for (i, x) in state.iter().enumerate() {
                grad[base + i] += g * x;
            }
        }
    }
}

/// Diagonal linear controller `a = diag(k)·s`, optionally with fixed
/// Gaussian noise `std` (times the std scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    gains: Vec<f64>,
    /// Fixed std per action dimension; `None` for a deterministic controller.
    std: Option<Vec<f64>>,
    #[serde(default = "default_std_scale")]
    std_scale: f64,
}

impl LinearPolicy {
    pub fn deterministic(gains: Vec<f64>) -> Result<Self> {
        check_finite(&gains)?;
        Ok(Self {
            gains,
            std: None,
            std_scale: 1.0,
        })
    }

    pub fn gaussian(gains: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_finite(&gains)?;
        if std.len() != gains.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(NopgError::InvalidInput(
                "linear policy std must be positive per dimension".into(),
            ));
        }
        Ok(Self {
            gains,
            std: Some(std),
            std_scale: 1.0,
        })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }
}

impl DifferentiablePolicy for LinearPolicy {
    fn state_dim(&self) -> usize {
        self.gains.len()
    }

    fn action_dim(&self) -> usize {
        self.gains.len()
    }

    fn mode(&self) -> PolicyMode {
        if self.std.is_some() {
            PolicyMode::Gaussian
        } else {
            PolicyMode::Deterministic
        }
    }

    fn params(&self) -> &[f64] {
        &self.gains
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.gains.len() {
            return Err(NopgError::DimensionMismatch {
                expected: self.gains.len(),
                got: params.len(),
                context: "linear gains",
            });
        }
        check_finite(params)?;
        self.gains.copy_from_slice(params);
        Ok(())
    }

    fn set_std_scale(&mut self, scale: f64) {
        self.std_scale = scale;
    }

    fn forward(&self, state: &[f64]) -> ActionDistribution {
        ActionDistribution {
            mean: self.gains.iter().zip(state).map(|(k, x)| k * x).collect(),
            std: self
                .std
                .as_ref()
                .map(|s| s.iter().map(|v| v * self.std_scale).collect()),
        }
    }

    fn vjp(&self, state: &[f64], cot_mean: &[f64], _cot_std: Option<&[f64]>, grad: &mut [f64]) {
        for k in 0..self.gains.len() {
            grad[k] += cot_mean[k] * state[k];
        }
    }
}

/// Serializable policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Policy {
    Mlp(MlpPolicy),
    Linear(LinearPolicy),
}

macro_rules! dispatch {
    ($self:ident, $p:ident => $body:expr) => {
        match $self {
            Policy::Mlp($p) => $body,
            Policy::Linear($p) => $body,
        }
    };
}

impl DifferentiablePolicy for Policy {
    fn state_dim(&self) -> usize {
        dispatch!(self, p => p.state_dim())
    }
    fn action_dim(&self) -> usize {
        dispatch!(self, p => p.action_dim())
    }
    fn mode(&self) -> PolicyMode {
        dispatch!(self, p => p.mode())
    }
    fn params(&self) -> &[f64] {
        dispatch!(self, p => p.params())
    }
    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        dispatch!(self, p => p.set_params(params))
    }
    fn set_std_scale(&mut self, scale: f64) {
        dispatch!(self, p => p.set_std_scale(scale))
    }
    fn forward(&self, state: &[f64]) -> ActionDistribution {
        dispatch!(self, p => p.forward(state))
    }
    fn vjp(&self, state: &[f64], cot_mean: &[f64], cot_std: Option<&[f64]>, grad: &mut [f64]) {
        dispatch!(self, p => p.vjp(state, cot_mean, cot_std, grad))
    }
}

impl Policy {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, INIT};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_vec(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn mlp(mode: PolicyMode, seed: u64) -> MlpPolicy {
        let arch = MlpArchitecture {
            hidden: 7,
            ..MlpArchitecture::new(3, 2, 2.0, mode)
        };
        let mut rng = substream(seed, INIT);
        let params = random_vec(&mut rng, arch.num_params(), 1.0);
        MlpPolicy::from_params(arch, params).unwrap()
    }

    #[test]
    fn zero_parameters() {
        let arch = MlpArchitecture::new(3, 1, 2.0, PolicyMode::Gaussian);
        let p = MlpPolicy::zeros(arch).unwrap();
        let d = p.forward(&[0.3, -1.0, 4.0]);
        assert_eq!(d.mean, vec![0.0]);
        assert_eq!(d.std, Some(vec![0.5]));
        let det = MlpPolicy::zeros(MlpArchitecture::new(3, 1, 2.0, PolicyMode::Deterministic)).unwrap();
        assert_eq!(det.forward(&[1.0, 1.0, 1.0]).mean, vec![0.0]);
    }

    #[test]
    fn outputs_are_bounded() {
        let arch = MlpArchitecture::new(2, 1, 5.0, PolicyMode::Gaussian);
        let params = vec![100.0; arch.num_params()];
        let p = MlpPolicy::from_params(arch, params).unwrap();
        let d = p.forward(&[10.0, 10.0]);
        assert!(d.mean[0] <= 5.0);
        let s = d.std.unwrap()[0];
        assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let arch = MlpArchitecture::new(2, 1, 1.0, PolicyMode::Deterministic);
        let mut params = vec![0.0; arch.num_params()];
        params[3] = f64::NAN;
        assert!(matches!(
            MlpPolicy::from_params(arch, params),
            Err(NopgError::InvalidParameters(_))
        ));
        let mut p = MlpPolicy::zeros(arch).unwrap();
        assert!(p.set_params(&vec![f64::INFINITY; arch.num_params()]).is_err());
    }

    #[test]
    fn glorot_init_has_zero_biases_and_bounded_weights() {
        let arch = MlpArchitecture::new(3, 1, 2.0, PolicyMode::Deterministic);
        let p = MlpPolicy::init(arch, &mut substream(1, INIT)).unwrap();
        let limit = (6.0f64 / 53.0).sqrt();
        assert!(p.params()[..150].iter().all(|w| w.abs() <= limit));
        assert!(p.params()[150..200].iter().all(|b| *b == 0.0));
        assert_eq!(p.params()[250], 0.0);
        assert_eq!(p, MlpPolicy::init(arch, &mut substream(1, INIT)).unwrap());
    }

    /// Central differences of `⟨cot, output⟩` against the VJP.
    fn check_vjp(p: &mut MlpPolicy, state: &[f64], cot_mean: &[f64], cot_std: Option<&[f64]>, step: f64, tol: f64) {
        let mut grad = vec![0.0; p.num_params()];
        p.vjp(state, cot_mean, cot_std, &mut grad);
        let objective = |p: &MlpPolicy| {
            let d = p.forward(state);
            let mut v: f64 = d.mean.iter().zip(cot_mean).map(|(a, b)| a * b).sum();
            if let (Some(s), Some(c)) = (d.std, cot_std) {
                v += s.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            }
            v
        };
        let theta = p.params().to_vec();
        let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-8);
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += step;
            p.set_params(&t).unwrap();
            let up = objective(p);
            t[i] -= 2.0 * step;
            p.set_params(&t).unwrap();
            let down = objective(p);
            let fd = (up - down) / (2.0 * step);
            assert!(
                (fd - grad[i]).abs() <= tol * scale,
                "param {i}: fd {fd} vs vjp {}",
                grad[i]
            );
        }
        p.set_params(&theta).unwrap();
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..100 {
            let mode = if seed % 2 == 0 {
                PolicyMode::Deterministic
            } else {
                PolicyMode::Gaussian
            };
            let mut p = mlp(mode, seed);
            p.set_std_scale(0.7);
            let mut rng = substream(seed, "vjp-test");
            let s = random_vec(&mut rng, 3, 2.0);
            let cm = random_vec(&mut rng, 2, 1.0);
            let cs = random_vec(&mut rng, 2, 1.0);
            check_vjp(&mut p, &s, &cm, Some(&cs), 1e-5, 1e-4);
        }
    }

    #[test]
    fn vjp_zero_and_linear_in_cotangent() {
        let p = mlp(PolicyMode::Gaussian, 3);
        let s = [0.2, -0.4, 1.0];
        let mut g = vec![0.0; p.num_params()];
        p.vjp(&s, &[0.0, 0.0], Some(&[0.0, 0.0]), &mut g);
        assert!(g.iter().all(|v| *v == 0.0));
        let (u, v) = ([0.3, -1.2], [0.5, 0.25]);
        let mut gu = vec![0.0; p.num_params()];
        let mut gv = vec![0.0; p.num_params()];
        let mut guv = vec![0.0; p.num_params()];
        p.vjp(&s, &u, None, &mut gu);
        p.vjp(&s, &v, None, &mut gv);
        p.vjp(&s, &[u[0] + v[0], u[1] + v[1]], None, &mut guv);
        for i in 0..g.len() {
            assert!((guv[i] - gu[i] - gv[i]).abs() < 1e-14 * (1.0 + guv[i].abs()));
        }
    }

    #[test]
    fn log_density_peak_and_gradient() {
        let mut p = mlp(PolicyMode::Gaussian, 9);
        let s = [0.5, 0.1, -0.3];
        let d = p.forward(&s);
        let std = d.std.clone().unwrap();
        let mut g = vec![0.0; p.num_params()];
        let lp = p.log_density_and_grad(&s, &d.mean, &mut g).unwrap();
        let expected: f64 = -std
            .iter()
            .map(|s| (s * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum::<f64>();
        assert_relative_eq!(lp, expected, epsilon = 1e-12);

        for seed in 0..20 {
            let mut rng = substream(seed, "logp-test");
            let a = random_vec(&mut rng, 2, 1.5);
            let mut grad = vec![0.0; p.num_params()];
            p.log_density_and_grad(&s, &a, &mut grad).unwrap();
            let theta = p.params().to_vec();
            let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
            for i in 0..theta.len() {
                let mut t = theta.clone();
                let mut scratch = vec![0.0; theta.len()];
                t[i] += 1e-5;
                p.set_params(&t).unwrap();
                let up = p.log_density_and_grad(&s, &a, &mut scratch).unwrap();
                t[i] -= 2e-5;
                p.set_params(&t).unwrap();
                let down = p.log_density_and_grad(&s, &a, &mut scratch).unwrap();
                p.set_params(&theta).unwrap();
                assert!(((up - down) / 2e-5 - grad[i]).abs() <= 1e-4 * scale.max(1e-8));
            }
        }
    }

    #[test]
    fn log_density_integrates_to_one() {
        let arch = MlpArchitecture::new(1, 1, 2.0, PolicyMode::Gaussian);
        let p = MlpPolicy::init(arch, &mut substream(4, INIT)).unwrap();
        let d = p.forward(&[0.4]);
        let (m, s) = (d.mean[0], d.std.unwrap()[0]);
        let (lo, hi, n) = (m - 12.0 * s, m + 12.0 * s, 20_000);
        let step = (hi - lo) / n as f64;
        let mut scratch = vec![0.0; p.num_params()];
        let total: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * p
                    .log_density_and_grad(&[0.4], &[lo + i as f64 * step], &mut scratch)
                    .unwrap()
                    .exp()
            })
            .sum::<f64>()
            * step;
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn deterministic_log_density_is_unsupported() {
        let p = mlp(PolicyMode::Deterministic, 1);
        let mut g = vec![0.0; p.num_params()];
        assert!(matches!(
            p.log_density_and_grad(&[0.0; 3], &[0.0; 2], &mut g),
            Err(NopgError::UnsupportedMode { .. })
        ));
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = mlp(PolicyMode::Gaussian, 2);
        let a = p.sample(&[0.1, 0.2, 0.3], &mut substream(5, "s"));
        let b = p.sample(&[0.1, 0.2, 0.3], &mut substream(5, "s"));
        assert_eq!(a, b);
        assert_ne!(a, p.forward(&[0.1, 0.2, 0.3]).mean);
    }

    #[test]
    fn std_scale_multiplies_std() {
        let mut p = MlpPolicy::zeros(MlpArchitecture::new(1, 1, 1.0, PolicyMode::Gaussian)).unwrap();
        p.set_std_scale(0.2);
        assert_relative_eq!(p.forward(&[0.0]).std.unwrap()[0], 0.1);
        let mut lin = LinearPolicy::gaussian(vec![0.35, -0.35], vec![0.1, 0.1]).unwrap();
        lin.set_std_scale(0.5);
        assert_eq!(lin.forward(&[1.0, 2.0]).std.unwrap(), vec![0.05, 0.05]);
    }

    #[test]
    fn linear_policy_gradients() {
        let lin = LinearPolicy::gaussian(vec![0.35, -0.35], vec![0.1, 0.1]).unwrap();
        assert_eq!(lin.forward(&[2.0, 1.0]).mean, vec![0.7, -0.35]);
        let mut g = vec![0.0; 2];
        lin.vjp(&[2.0, 1.0], &[1.0, -3.0], None, &mut g);
        assert_eq!(g, vec![2.0, -3.0]);
        let mut g = vec![0.0; 2];
        let lp = lin.log_density_and_grad(&[1.0, 1.0], &[0.45, -0.35], &mut g).unwrap();
        // d logp / dk1 = (a - k x) x / σ² = 0.1 / 0.01 = 10.
        assert_relative_eq!(g[0], 10.0, epsilon = 1e-9);
        assert_eq!(g[1], 0.0);
        assert!(lp.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let mut mlp = mlp(PolicyMode::Gaussian, 8);
        mlp.set_std_scale(0.3);
        for policy in [
            Policy::Mlp(mlp),
            Policy::Linear(LinearPolicy::deterministic(vec![-2.5, 1.0 / 3.0]).unwrap()),
        ] {
            policy.save(&path).unwrap();
            assert_eq!(Policy::load(&path).unwrap(), policy);
        }
        std::fs::write(&path, r#"{"kind":"mlp","architecture":{"state_dim":1,"hidden":1,"action_dim":1,"output_scale":1.0,"mode":"deterministic"},"params":[1.0]}"#).unwrap();
        assert!(Policy::load(&path).is_err());
    }
}
