//! Nonparametric Bellman equation over a fixed dataset: responsibility
//! vectors, the kernelized transition matrix `P̃`, and the solves
//! `q = Λ⁻¹r`, `μ = Λ⁻ᵀε₀` with `Λ = I − γP̃`.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{format_float, TransitionDataset};
use crate::error::{NopgError, Result};
use crate::kernels::{
    apply_h_factor, argmax, select_bandwidths, softmax_in_place, BandwidthVector, DEGENERATE_SQ_DIST,
};
use crate::policy::DifferentiablePolicy;
use crate::rng::{indexed_substream, StreamRng, MC_MU0, MC_PHI, MC_PI};
use crate::solver::{solve_linear, LinearOperator, SolveReport, SolverConfig};

/// Tolerance of the stochastic-vector checks.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Bandwidths of the state kernel `ψ`, the action kernel `ϕ` and the
/// next-state kernel `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBandwidths {
    pub state: BandwidthVector,
    pub action: BandwidthVector,
    pub next_state: BandwidthVector,
}

impl KernelBandwidths {
    /// Cross-validated per-dimension bandwidths multiplied by the given
    /// factors. The next-state kernel shares the state bandwidths.
    pub fn select(dataset: &TransitionDataset, state_factor: &[f64], action_factor: &[f64]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(NopgError::InvalidDataset(
                "cannot select bandwidths on an empty dataset".into(),
            ));
        }
        let state = apply_h_factor(&select_bandwidths(&dataset.states_vec())?.bandwidths, state_factor)?;
        let action = apply_h_factor(&select_bandwidths(&dataset.actions_vec())?.bandwidths, action_factor)?;
        Ok(Self {
            next_state: state.clone(),
            state,
            action,
        })
    }

    pub fn new(state: Vec<f64>, action: Vec<f64>) -> Result<Self> {
        let state = BandwidthVector::new(state)?;
        Ok(Self {
            next_state: state.clone(),
            state,
            action: BandwidthVector::new(action)?,
        })
    }
}

/// Monte-Carlo sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McCounts {
    /// Action samples per query for Gaussian policies.
    pub n_pi: usize,
    /// Next-state samples per transition; 1 means the kernel mean `s′ᵢ`.
    pub n_phi: usize,
    /// Initial-state samples.
    pub n_mu0: usize,
}

impl Default for McCounts {
    fn default() -> Self {
        Self {
            n_pi: 10,
            n_phi: 1,
            n_mu0: 1,
        }
    }
}

impl McCounts {
    fn validate(&self) -> Result<()> {
        if self.n_pi == 0 || self.n_phi == 0 || self.n_mu0 == 0 {
            return Err(NopgError::InvalidInput("Monte-Carlo counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Frozen Monte-Carlo draws for one gradient evaluation. Everything built from
/// the same samples carries the same `token`.
#[derive(Debug, Clone, PartialEq)]
pub struct McSamples {
    pub token: u64,
    /// Action samples per query (1 for deterministic policies).
    pub per_query: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub n_phi: usize,
    /// Observed initial states.
    pub initial_states: Vec<Vec<f64>>,
    /// `ζ` for each initial state, `per_query × da` flattened; empty when deterministic.
    pub initial_noise: Vec<Vec<f64>>,
    /// `ζ` for each (row, next-state sample), `per_query × da` flattened.
    pub row_noise: Vec<Vec<f64>>,
    /// Standard-normal offsets for next-state samples, `ds` per (row, sample);
    /// empty when `n_phi = 1`.
    pub next_state_noise: Vec<Vec<f64>>,
}

fn mix_token(seed: u64, iteration: u64) -> u64 {
    let mut z = seed ^ iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xd1b5_4a32_d192_ed03;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn normals(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl McSamples {
    /// Draw the samples for iteration `iteration` under `seed`. `initial`
    /// samples an observed initial state.
    #[allow(clippy::too_many_arguments)]
    pub fn draw(
        n_rows: usize,
        state_dim: usize,
        action_dim: usize,
        stochastic: bool,
        counts: &McCounts,
        mut initial: impl FnMut(&mut StreamRng) -> Vec<f64>,
        seed: u64,
        iteration: u64,
    ) -> Result<Self> {
        counts.validate()?;
        let per_query = if stochastic { counts.n_pi } else { 1 };
        let mut mu0_rng = indexed_substream(seed, MC_MU0, iteration);
        let initial_states: Vec<Vec<f64>> = (0..counts.n_mu0).map(|_| initial(&mut mu0_rng)).collect();
        if let Some(bad) = initial_states.iter().find(|s| s.len() != state_dim) {
            return Err(NopgError::DimensionMismatch {
                expected: state_dim,
                got: bad.len(),
                context: "initial state sample",
            });
        }
        let mut pi_rng = indexed_substream(seed, MC_PI, iteration);
        let noise_len = if stochastic { per_query * action_dim } else { 0 };
        let initial_noise = (0..counts.n_mu0).map(|_| normals(&mut pi_rng, noise_len)).collect();
        let row_noise = (0..n_rows * counts.n_phi)
            .map(|_| normals(&mut pi_rng, noise_len))
            .collect();
        let mut phi_rng = indexed_substream(seed, MC_PHI, iteration);
        let next_state_noise = if counts.n_phi > 1 {
            (0..n_rows * counts.n_phi)
                .map(|_| normals(&mut phi_rng, state_dim))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            token: mix_token(seed, iteration),
            per_query,
            action_dim,
            state_dim,
            n_phi: counts.n_phi,
            initial_states,
            initial_noise,
            row_noise,
            next_state_noise,
        })
    }

    fn check(&self, n_rows: usize, state_dim: usize, action_dim: usize, stochastic: bool) -> Result<()> {
        let consistent = self.state_dim == state_dim
            && self.action_dim == action_dim
            && self.row_noise.len() == n_rows * self.n_phi
            && (self.per_query == 1 || stochastic)
            && (!stochastic
                || self
                    .initial_noise
                    .iter()
                    .chain(&self.row_noise)
                    .all(|z| z.len() == self.per_query * action_dim));
        if consistent {
            Ok(())
        } else {
            Err(NopgError::InvalidInput(
                "Monte-Carlo samples were drawn for a different dataset or policy mode".into(),
            ))
        }
    }
}

/// Actions and, for Gaussian policies, the reparameterization noise used at
/// one query state.
pub(crate) struct QueryActions {
    pub actions: Vec<Vec<f64>>,
    pub noise: Option<Vec<Vec<f64>>>,
}

pub(crate) fn query_actions<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    state: &[f64],
    noise: &[f64],
) -> QueryActions {
    let dist = policy.forward(state);
    match dist.std {
        None => QueryActions {
            actions: vec![dist.mean],
            noise: None,
        },
        Some(std) => {
            let da = dist.mean.len();
            let zetas: Vec<Vec<f64>> = noise.chunks(da).map(<[f64]>::to_vec).collect();
            let actions = zetas
                .iter()
                .map(|z| dist.mean.iter().zip(&std).zip(z).map(|((m, s), z)| m + s * z).collect())
                .collect();
            QueryActions {
                actions,
                noise: Some(zetas),
            }
        }
    }
}

/// Responsibilities of one query state-action pair plus the first moment
/// `Σⱼ εⱼ (aⱼ − a)/hϕ²` needed for action derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionResponsibility {
    pub weights: Vec<f64>,
    /// `Σⱼ εⱼ (aⱼ − a) / hϕ²`; zero when `degenerate`.
    pub moment: Vec<f64>,
    /// All kernel weights underflowed and `weights` is one-hot on the nearest row.
    pub degenerate: bool,
}

/// Kernel geometry of a dataset, prescaled by the bandwidths.
#[derive(Debug, Clone)]
pub struct Npbe {
    dataset: TransitionDataset,
    bandwidths: KernelBandwidths,
    gamma: f64,
    scaled_states: Vec<f64>,
    scaled_actions: Vec<f64>,
    inv_h_state: Vec<f64>,
    inv_h_action: Vec<f64>,
}

impl Npbe {
    pub fn new(dataset: TransitionDataset, bandwidths: KernelBandwidths, gamma: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(NopgError::InvalidDataset("dataset is empty".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(NopgError::InvalidInput(format!(
                "discount must be in [0, 1), got {gamma}"
            )));
        }
        let (ds, da) = (dataset.state_dim(), dataset.action_dim());
        for (h, d, ctx) in [
            (&bandwidths.state, ds, "state bandwidth"),
            (&bandwidths.action, da, "action bandwidth"),
            (&bandwidths.next_state, ds, "next-state bandwidth"),
        ] {
            if h.len() != d {
                return Err(NopgError::DimensionMismatch {
                    expected: d,
                    got: h.len(),
                    context: ctx,
                });
            }
        }
        dataset.validate(f64::INFINITY)?;
        let inv_h_state = bandwidths.state.inverse();
        let inv_h_action = bandwidths.action.inverse();
        let scale = |flat: &[f64], inv: &[f64]| -> Vec<f64> {
            flat.chunks(inv.len())
                .flat_map(|row| row.iter().zip(inv).map(|(x, i)| x * i).collect::<Vec<_>>())
                .collect()
        };
        Ok(Self {
            scaled_states: scale(dataset.states_flat(), &inv_h_state),
            scaled_actions: scale(dataset.actions_flat(), &inv_h_action),
            inv_h_state,
            inv_h_action,
            dataset,
            bandwidths,
            gamma,
        })
    }

    pub fn dataset(&self) -> &TransitionDataset {
        &self.dataset
    }

    pub fn bandwidths(&self) -> &KernelBandwidths {
        &self.bandwidths
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dataset.state_dim() {
            return Err(NopgError::DimensionMismatch {
                expected: self.dataset.state_dim(),
                got: s.len(),
                context: "query state",
            });
        }
        Ok(())
    }

    fn check_policy<P: DifferentiablePolicy + ?Sized>(&self, policy: &P) -> Result<()> {
        if policy.state_dim() != self.dataset.state_dim() || policy.action_dim() != self.dataset.action_dim() {
            return Err(NopgError::InvalidInput(format!(
                "policy maps {}-d states to {}-d actions but the dataset has {}-d states and {}-d actions",
                policy.state_dim(),
                policy.action_dim(),
                self.dataset.state_dim(),
                self.dataset.action_dim()
            )));
        }
        Ok(())
    }

    /// `Σⱼ wⱼ (aⱼ − a)/hϕ²` over `(j, wⱼ)` pairs.
    pub(crate) fn weighted_action_offset(&self, terms: impl Iterator<Item = (usize, f64)>, action: &[f64]) -> Vec<f64> {
        let da = self.inv_h_action.len();
        let mut acc = vec![0.0; da];
        let mut total = 0.0;
        for (j, w) in terms {
            let row = &self.scaled_actions[j * da..(j + 1) * da];
            for k in 0..da {
                acc[k] += w * row[k];
            }
            total += w;
        }
        for k in 0..da {
            acc[k] = (acc[k] - total * action[k] * self.inv_h_action[k]) * self.inv_h_action[k];
        }
        acc
    }

    /// `−½‖(s − sⱼ)/hψ‖²` for every row.
    pub(crate) fn state_logits(&self, s: &[f64]) -> Vec<f64> {
        let ds = self.inv_h_state.len();
        let scaled: Vec<f64> = s.iter().zip(&self.inv_h_state).map(|(x, i)| x * i).collect();
        self.scaled_states
            .chunks(ds)
            .map(|row| -0.5 * row.iter().zip(&scaled).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect()
    }

    /// Responsibilities of `(s, a)` given precomputed state logits.
    pub(crate) fn action_responsibility(&self, state_logits: &[f64], action: &[f64]) -> ActionResponsibility {
        let da = self.inv_h_action.len();
        let scaled: Vec<f64> = action.iter().zip(&self.inv_h_action).map(|(x, i)| x * i).collect();
        let mut logits: Vec<f64> = self
            .scaled_actions
            .chunks(da)
            .zip(state_logits)
            .map(|(row, ls)| ls - 0.5 * row.iter().zip(&scaled).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let nearest = argmax(&logits);
        if -2.0 * logits[nearest] > DEGENERATE_SQ_DIST {
            let mut weights = vec![0.0; logits.len()];
            weights[nearest] = 1.0;
            return ActionResponsibility {
                weights,
                moment: vec![0.0; da],
                degenerate: true,
            };
        }
        softmax_in_place(&mut logits);
        // Σ εⱼ (aⱼ − a)/h² = (Σ εⱼ ãⱼ − ã)/h with ã = a/h.
        let mut moment = vec![0.0; da];
        for (w, row) in logits.iter().zip(self.scaled_actions.chunks(da)) {
            for k in 0..da {
                moment[k] += w * row[k];
            }
        }
        for k in 0..da {
            moment[k] = (moment[k] - scaled[k]) * self.inv_h_action[k];
        }
        ActionResponsibility {
            weights: logits,
            moment,
            degenerate: false,
        }
    }

    /// Responsibilities of `s` for each action sample (one for deterministic policies).
    pub(crate) fn query<P: DifferentiablePolicy + ?Sized>(
        &self,
        policy: &P,
        s: &[f64],
        noise: &[f64],
    ) -> (QueryActions, Vec<ActionResponsibility>) {
        let logits = self.state_logits(s);
        let qa = query_actions(policy, s, noise);
        let resp = qa
            .actions
            .iter()
            .map(|a| self.action_responsibility(&logits, a))
            .collect();
        (qa, resp)
    }

    /// `ε_π(s)` for a deterministic policy (the mean action of a Gaussian one).
    pub fn responsibilities_det<P: DifferentiablePolicy + ?Sized>(&self, s: &[f64], policy: &P) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_policy(policy)?;
        let logits = self.state_logits(s);
        Ok(self.action_responsibility(&logits, &policy.forward(s).mean).weights)
    }

    /// `ε_π(s)` averaged over `n_mc` reparameterized action samples.
    pub fn responsibilities_stoch<P: DifferentiablePolicy + ?Sized>(
        &self,
        s: &[f64],
        policy: &P,
        n_mc: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_policy(policy)?;
        if !policy.is_stochastic() {
            return Err(NopgError::UnsupportedMode {
                mode: "deterministic",
                op: "stochastic responsibilities",
            });
        }
        if n_mc == 0 {
            return Err(NopgError::InvalidInput("n_mc must be at least 1".into()));
        }
        let noise = normals(rng, n_mc * policy.action_dim());
        Ok(self.mean_responsibility(policy, s, &noise))
    }

    fn mean_responsibility<P: DifferentiablePolicy + ?Sized>(&self, policy: &P, s: &[f64], noise: &[f64]) -> Vec<f64> {
        let (_, resp) = self.query(policy, s, noise);
        average_weights(&resp)
    }

    /// `ε_π(s)` using the policy's native form: deterministic, or averaged
    /// over the given reparameterization noise.
    pub fn responsibilities_with_noise<P: DifferentiablePolicy + ?Sized>(
        &self,
        s: &[f64],
        policy: &P,
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_policy(policy)?;
        Ok(self.mean_responsibility(policy, s, noise))
    }

    /// `ε₀ = mean of ε_π(s₀)` over the frozen initial-state samples.
    pub fn epsilon_zero<P: DifferentiablePolicy + ?Sized>(&self, policy: &P, samples: &McSamples) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        samples.check(
            self.len(),
            self.dataset.state_dim(),
            self.dataset.action_dim(),
            policy.is_stochastic(),
        )?;
        let mut eps0 = vec![0.0; self.len()];
        for (s0, z) in samples.initial_states.iter().zip(&samples.initial_noise) {
            let e = self.mean_responsibility(policy, s0, z);
            eps0.iter_mut().zip(&e).for_each(|(acc, v)| *acc += v);
        }
        let inv = 1.0 / samples.initial_states.len() as f64;
        eps0.iter_mut().for_each(|v| *v *= inv);
        Ok(eps0)
    }

    /// Next-state sample `phi` of row `i`.
    pub(crate) fn next_state_sample(&self, i: usize, phi: usize, samples: &McSamples) -> Vec<f64> {
        let base = self.dataset.next_state(i);
        if samples.n_phi == 1 {
            return base.to_vec();
        }
        let xi = &samples.next_state_noise[i * samples.n_phi + phi];
        base.iter()
            .zip(self.bandwidths.next_state.as_slice())
            .zip(xi)
            .map(|((m, h), z)| m + h * z)
            .collect()
    }

    /// Build `P̃` (keeping the `sparsify` largest entries per row when given)
    /// and `ε₀` on the frozen samples.
    pub fn build<P: DifferentiablePolicy + ?Sized>(
        &self,
        policy: &P,
        samples: &McSamples,
        sparsify: Option<usize>,
    ) -> Result<NpbeSystem> {
        self.check_policy(policy)?;
        samples.check(
            self.len(),
            self.dataset.state_dim(),
            self.dataset.action_dim(),
            policy.is_stochastic(),
        )?;
        if sparsify == Some(0) {
            return Err(NopgError::InvalidInput(
                "sparsification budget must be at least 1".into(),
            ));
        }
        let n = self.len();
        let keep = sparsify.unwrap_or(n).min(n);
        let per_row = samples.n_phi * samples.per_query;
        let inv_per_row = 1.0 / per_row as f64;

        let mut initial = Vec::with_capacity(samples.initial_states.len());
        let mut eps0 = vec![0.0; n];
        for (s0, z) in samples.initial_states.iter().zip(&samples.initial_noise) {
            let (qa, resp) = self.query(policy, s0, z);
            for r in &resp {
                eps0.iter_mut().zip(&r.weights).for_each(|(acc, v)| *acc += v);
            }
            initial.push(QueryRecord {
                state: s0.clone(),
                noise: qa.noise,
                actions: qa.actions,
                resp,
            });
        }
        let inv0 = 1.0 / (samples.initial_states.len() * samples.per_query) as f64;
        eps0.iter_mut().for_each(|v| *v *= inv0);

        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut kept_mass = vec![0.0; n];
        let mut rows = Vec::with_capacity(n);
        let mut dense = vec![0.0; n];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for i in 0..n {
            if self.dataset.is_terminal(i) {
                row_ptr.push(cols.len());
                rows.push(None);
                continue;
            }
            dense.iter_mut().for_each(|v| *v = 0.0);
            let mut sample_records = Vec::with_capacity(samples.n_phi);
            for phi in 0..samples.n_phi {
                let s_next = self.next_state_sample(i, phi, samples);
                let (qa, resp) = self.query(policy, &s_next, &samples.row_noise[i * samples.n_phi + phi]);
                for r in &resp {
                    dense
                        .iter_mut()
                        .zip(&r.weights)
                        .for_each(|(acc, v)| *acc += v * inv_per_row);
                }
                sample_records.push((s_next, qa, resp));
            }
            order.clear();
            order.extend(0..n);
            if keep < n {
                order.select_nth_unstable_by(keep - 1, |&a, &b| dense[b].total_cmp(&dense[a]).then(a.cmp(&b)));
                order.truncate(keep);
            }
            order.sort_unstable();
            let mass: f64 = order.iter().map(|&j| dense[j]).sum();
            kept_mass[i] = mass;
            for &j in &order {
                cols.push(j);
                vals.push(dense[j] / mass);
            }
            row_ptr.push(cols.len());
            let records = sample_records
                .into_iter()
                .map(|(state, qa, resp)| SampleRecord {
                    state,
                    noise: qa.noise,
                    actions: qa.actions,
                    kept_weights: resp
                        .iter()
                        .map(|r| order.iter().map(|&j| r.weights[j]).collect())
                        .collect(),
                    moments: resp.iter().map(|r| r.moment.clone()).collect(),
                    degenerate: resp.iter().map(|r| r.degenerate).collect(),
                })
                .collect();
            rows.push(Some(records));
        }
        Ok(NpbeSystem {
            token: samples.token,
            eps0,
            p: SparseTransitionMatrix {
                n,
                row_ptr,
                cols,
                vals,
                kept_mass,
            },
            initial,
            rows,
            per_row,
        })
    }

    /// Solve `q = Λ⁻¹r` and `μ = Λ⁻ᵀε₀`.
    pub fn solve(&self, system: NpbeSystem, cfg: &SolverConfig) -> Result<NpbeSolution> {
        let lambda = LambdaOperator {
            p: &system.p,
            gamma: self.gamma,
            transpose: false,
        };
        let (q, q_report) = solve_linear(&lambda, self.dataset.rewards(), cfg)?;
        let lambda_t = LambdaOperator {
            transpose: true,
            ..lambda
        };
        let (mu, mu_report) = solve_linear(&lambda_t, &system.eps0, cfg)?;
        Ok(NpbeSolution {
            q,
            mu,
            q_report,
            mu_report,
            system,
        })
    }

    /// Build and solve in one go.
    pub fn build_and_solve<P: DifferentiablePolicy + ?Sized>(
        &self,
        policy: &P,
        samples: &McSamples,
        sparsify: Option<usize>,
        cfg: &SolverConfig,
    ) -> Result<NpbeSolution> {
        let system = self.build(policy, samples, sparsify)?;
        self.solve(system, cfg)
    }

    /// `V̂(s) = ε_π(s)·q`. Gaussian policies use `noise` (`n × da` standard
    /// normals) for the action samples; pass an empty slice for the mean action.
    pub fn value_at<P: DifferentiablePolicy + ?Sized>(
        &self,
        s: &[f64],
        policy: &P,
        solution: &NpbeSolution,
        noise: &[f64],
    ) -> Result<f64> {
        let e = self.query_weights(s, policy, noise)?;
        Ok(dot(&e, &solution.q))
    }

    /// `ε_π(s)·μ`, the unnormalized state-distribution estimate at `s`.
    pub fn state_density_at<P: DifferentiablePolicy + ?Sized>(
        &self,
        s: &[f64],
        policy: &P,
        solution: &NpbeSolution,
        noise: &[f64],
    ) -> Result<f64> {
        let e = self.query_weights(s, policy, noise)?;
        Ok(dot(&e, &solution.mu))
    }

    fn query_weights<P: DifferentiablePolicy + ?Sized>(
        &self,
        s: &[f64],
        policy: &P,
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_policy(policy)?;
        if policy.is_stochastic() && !noise.is_empty() {
            if !noise.len().is_multiple_of(policy.action_dim()) {
                return Err(NopgError::InvalidInput(
                    "noise length must be a multiple of the action dimension".into(),
                ));
            }
            Ok(self.mean_responsibility(policy, s, noise))
        } else {
            self.responsibilities_det(s, policy)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn average_weights(resp: &[ActionResponsibility]) -> Vec<f64> {
    let mut out = vec![0.0; resp[0].weights.len()];
    for r in resp {
        out.iter_mut().zip(&r.weights).for_each(|(acc, v)| *acc += v);
    }
    let inv = 1.0 / resp.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Row-sparse `P̃` in CSR layout. Terminal rows are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTransitionMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    /// Mass of the kept entries before renormalization (1 without sparsification).
    pub kept_mass: Vec<f64>,
}

impl SparseTransitionMatrix {
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `y = P̃ x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            *yi = c.iter().zip(v).map(|(&j, p)| p * x[j]).sum();
        }
    }

    /// `y = P̃ᵀ x`.
    pub fn mul_vec_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, xi) in x.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&j, p) in c.iter().zip(v) {
                y[j] += p * xi;
            }
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, p) in c.iter().zip(v) {
                m[(i, j)] = *p;
            }
        }
        m
    }

    /// Coordinate triplets `row,col,value`.
    pub fn write_triplets<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        writeln!(out, "row,col,value")?;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, p) in c.iter().zip(v) {
                writeln!(out, "{i},{j},{}", format_float(*p))?;
            }
        }
        Ok(())
    }
}

/// Keep the `k` largest entries of each row of a dense row-stochastic matrix
/// and renormalize every nonzero row to sum to one. Ties keep the lower column.
/// `kept_mass` is relative to the incoming row sum.
pub fn sparsify(dense: &nalgebra::DMatrix<f64>, k: usize) -> Result<SparseTransitionMatrix> {
    if k == 0 {
        return Err(NopgError::InvalidInput(
            "sparsification budget must be at least 1".into(),
        ));
    }
    let n = dense.nrows();
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut kept_mass = vec![0.0; n];
    for i in 0..n {
        let row: Vec<f64> = dense.row(i).iter().copied().collect();
        if row.iter().all(|v| *v == 0.0) {
            row_ptr.push(cols.len());
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        if k < n {
            order.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k);
        }
        order.sort_unstable();
        let mass: f64 = order.iter().map(|&j| row[j]).sum();
        kept_mass[i] = mass;
        for &j in &order {
            cols.push(j);
            vals.push(row[j] / mass);
        }
        row_ptr.push(cols.len());
    }
    Ok(SparseTransitionMatrix {
        n,
        row_ptr,
        cols,
        vals,
        kept_mass,
    })
}

/// `Λ = I − γP̃` or its transpose, applied matrix-free.
pub struct LambdaOperator<'a> {
    pub p: &'a SparseTransitionMatrix,
    pub gamma: f64,
    pub transpose: bool,
}

impl LinearOperator for LambdaOperator<'_> {
    fn dim(&self) -> usize {
        self.p.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        if self.transpose {
            self.p.mul_vec_transpose(x, y);
        } else {
            self.p.mul_vec(x, y);
        }
        y.iter_mut().zip(x).for_each(|(yi, xi)| *yi = xi - self.gamma * *yi);
    }

    fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let p = self.p.to_dense();
        let p = if self.transpose { p.transpose() } else { p };
        nalgebra::DMatrix::identity(self.p.n, self.p.n) - p * self.gamma
    }
}

/// Query data kept from building `ε₀` for the gradient pass.
#[derive(Debug, Clone)]
pub(crate) struct QueryRecord {
    pub state: Vec<f64>,
    pub noise: Option<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<f64>>,
    pub resp: Vec<ActionResponsibility>,
}

/// Per next-state sample of a `P̃` row: responsibilities restricted to the
/// kept columns plus the full first moment, enough for exact row gradients.
#[derive(Debug, Clone)]
pub(crate) struct SampleRecord {
    pub state: Vec<f64>,
    pub noise: Option<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<f64>>,
    pub kept_weights: Vec<Vec<f64>>,
    pub moments: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

/// Assembled linear system on one set of frozen samples.
#[derive(Debug, Clone)]
pub struct NpbeSystem {
    pub token: u64,
    pub eps0: Vec<f64>,
    pub p: SparseTransitionMatrix,
    pub(crate) initial: Vec<QueryRecord>,
    pub(crate) rows: Vec<Option<Vec<SampleRecord>>>,
    /// Number of (next-state, action) samples averaged per row.
    pub(crate) per_row: usize,
}

/// Solved system: `q`, `μ` and solver diagnostics.
#[derive(Debug, Clone)]
pub struct NpbeSolution {
    pub q: Vec<f64>,
    pub mu: Vec<f64>,
    pub q_report: SolveReport,
    pub mu_report: SolveReport,
    pub system: NpbeSystem,
}

impl NpbeSolution {
    pub fn token(&self) -> u64 {
        self.system.token
    }

    /// `Ĵ = ε₀ᵀq`.
    pub fn objective(&self) -> f64 {
        dot(&self.system.eps0, &self.q)
    }

    pub fn epsilon0(&self) -> &[f64] {
        &self.system.eps0
    }

    pub fn transition_matrix(&self) -> &SparseTransitionMatrix {
        &self.system.p
    }

    pub fn solver_iterations(&self) -> usize {
        self.q_report.iterations + self.mu_report.iterations
    }

    /// `q` and `μ` as CSV `row,q,mu`.
    pub fn write_vectors<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        writeln!(out, "row,q,mu")?;
        for (i, (q, mu)) in self.q.iter().zip(&self.mu).enumerate() {
            writeln!(out, "{i},{},{}", format_float(*q), format_float(*mu))?;
        }
        Ok(())
    }

    pub fn save_dumps(&self, dir: &Path, comment: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join("transition_matrix.csv"))?);
        self.system.p.write_triplets(f, comment)?;
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join("q_mu.csv"))?);
        self.write_vectors(f, comment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;
    use crate::policy::{MlpArchitecture, MlpPolicy, PolicyMode};
    use crate::rng::{substream, INIT};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_dataset(n: usize, ds: usize, da: usize, terminal_frac: f64, seed: u64) -> TransitionDataset {
        let mut rng = substream(seed, "npbe-test");
        let rows: Vec<Transition> = (0..n)
            .map(|_| Transition {
                state: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..da).map(|_| rng.random_range(-1.0..1.0)).collect(),
                reward: rng.random_range(-1.0..1.0),
                next_state: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
                terminal: rng.random::<f64>() < terminal_frac,
                behavior_logp: None,
                trajectory: None,
            })
            .collect();
        TransitionDataset::from_transitions(ds, da, &rows).unwrap()
    }

    fn mlp(ds: usize, da: usize, mode: PolicyMode, seed: u64) -> MlpPolicy {
        MlpPolicy::init(MlpArchitecture::new(ds, da, 1.0, mode), &mut substream(seed, INIT)).unwrap()
    }

    fn samples(npbe: &Npbe, stochastic: bool, counts: McCounts, seed: u64) -> McSamples {
        let ds = npbe.dataset().state_dim();
        McSamples::draw(
            npbe.len(),
            ds,
            npbe.dataset().action_dim(),
            stochastic,
            &counts,
            |rng| (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
            seed,
            0,
        )
        .unwrap()
    }

    fn assert_stochastic(v: &[f64]) {
        assert!(v.iter().all(|x| *x >= 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < STOCHASTIC_TOL);
    }

    #[test]
    fn single_row_is_self_loop() {
        let ds = random_dataset(1, 2, 1, 0.0, 1);
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.5, 0.5], vec![0.5]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 1);
        assert_eq!(npbe.responsibilities_det(&[0.3, 0.3], &policy).unwrap(), vec![1.0]);
        let sol = npbe
            .build_and_solve(
                &policy,
                &samples(&npbe, false, McCounts::default(), 1),
                None,
                &SolverConfig::default(),
            )
            .unwrap();
        assert_eq!(sol.transition_matrix().to_dense(), DMatrix::from_element(1, 1, 1.0));
        let r = npbe.dataset().reward(0);
        assert!((sol.q[0] - r / 0.1).abs() < 1e-8 * (1.0 + r.abs() * 10.0));
    }

    #[test]
    fn all_terminal_gives_zero_matrix() {
        let ds = random_dataset(6, 2, 1, 1.1, 2);
        let rewards = ds.rewards().to_vec();
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.5, 0.5], vec![0.5]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 1);
        let sol = npbe
            .build_and_solve(
                &policy,
                &samples(&npbe, false, McCounts::default(), 1),
                None,
                &SolverConfig::default(),
            )
            .unwrap();
        assert_eq!(sol.transition_matrix().nnz(), 0);
        for (q, r) in sol.q.iter().zip(&rewards) {
            assert!((q - r).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_and_responsibilities_are_stochastic() {
        for (seed, mode) in [(3, PolicyMode::Deterministic), (4, PolicyMode::Gaussian)] {
            let ds = random_dataset(40, 3, 2, 0.2, seed);
            let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.3; 3], vec![0.4; 2]).unwrap(), 0.95).unwrap();
            let policy = mlp(3, 2, mode, seed);
            let counts = McCounts {
                n_pi: 4,
                n_phi: 3,
                n_mu0: 5,
            };
            let smp = samples(&npbe, mode == PolicyMode::Gaussian, counts, seed);
            let sys = npbe.build(&policy, &smp, None).unwrap();
            assert_stochastic(&sys.eps0);
            for i in 0..40 {
                if npbe.dataset().is_terminal(i) {
                    assert_eq!(sys.p.row(i).0.len(), 0);
                } else {
                    assert!((sys.p.row_sum(i) - 1.0).abs() < STOCHASTIC_TOL);
                    assert!(sys.p.row(i).1.iter().all(|v| *v >= 0.0));
                }
            }
            let e = npbe.responsibilities_det(&[0.1, 0.2, 0.3], &policy).unwrap();
            assert_stochastic(&e);
        }
    }

    #[test]
    fn huge_action_bandwidth_reduces_to_state_softmin() {
        let ds = random_dataset(10, 2, 1, 0.0, 5);
        let states = ds.states_vec();
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.4, 0.4], vec![1e9]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 2);
        let s = states[3].clone();
        let e = npbe.responsibilities_det(&s, &policy).unwrap();
        let logits: Vec<f64> = states
            .iter()
            .map(|x| -0.5 * x.iter().zip(&s).map(|(a, b)| ((a - b) / 0.4).powi(2)).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (w, l) in e.iter().zip(&logits) {
            assert!((w - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_permutes_responsibilities() {
        let ds = random_dataset(12, 2, 1, 0.0, 6);
        let perm: Vec<usize> = (0..12).rev().collect();
        let bw = KernelBandwidths::new(vec![0.4, 0.4], vec![0.3]).unwrap();
        let a = Npbe::new(ds.clone(), bw.clone(), 0.9).unwrap();
        let b = Npbe::new(ds.permuted(&perm).unwrap(), bw, 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 3);
        let ea = a.responsibilities_det(&[0.2, -0.1], &policy).unwrap();
        let eb = b.responsibilities_det(&[0.2, -0.1], &policy).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!((eb[k] - ea[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_std_matches_deterministic() {
        let ds = random_dataset(15, 2, 1, 0.0, 7);
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.4, 0.4], vec![0.3]).unwrap(), 0.9).unwrap();
        let mut policy = mlp(2, 1, PolicyMode::Gaussian, 4);
        policy.set_std_scale(0.0);
        let s = [0.3, 0.1];
        let det = npbe.responsibilities_det(&s, &policy).unwrap();
        let stoch = npbe
            .responsibilities_stoch(&s, &policy, 5, &mut substream(1, "x"))
            .unwrap();
        for (a, b) in det.iter().zip(&stoch) {
            assert!((a - b).abs() < 1e-6);
        }
        let once = |seed| {
            npbe.responsibilities_stoch(&s, &mlp(2, 1, PolicyMode::Gaussian, 4), 1, &mut substream(seed, "x"))
                .unwrap()
        };
        assert_eq!(once(2), once(2));
        assert_stochastic(&once(3));
        let det_policy = mlp(2, 1, PolicyMode::Deterministic, 4);
        assert!(npbe
            .responsibilities_stoch(&s, &det_policy, 1, &mut substream(1, "x"))
            .is_err());
    }

    #[test]
    fn epsilon_zero_at_fixed_state() {
        let ds = random_dataset(20, 2, 1, 0.0, 8);
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.4, 0.4], vec![0.3]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 5);
        let counts = McCounts {
            n_mu0: 1,
            ..Default::default()
        };
        let draw = |seed| McSamples::draw(20, 2, 1, false, &counts, |_| vec![0.5, -0.5], seed, 3).unwrap();
        let e0 = npbe.epsilon_zero(&policy, &draw(1)).unwrap();
        assert_eq!(e0, npbe.responsibilities_det(&[0.5, -0.5], &policy).unwrap());
        assert_stochastic(&e0);
        assert_eq!(draw(1), draw(1));
    }

    #[test]
    fn constant_reward_gives_geometric_value() {
        let mut rows: Vec<Transition> = (0..30).map(|i| random_dataset(30, 2, 1, 0.0, 9).row(i)).collect();
        rows.iter_mut().for_each(|r| r.reward = 2.0);
        let ds = TransitionDataset::from_transitions(2, 1, &rows).unwrap();
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.3, 0.3], vec![0.3]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 6);
        let sol = npbe
            .build_and_solve(
                &policy,
                &samples(&npbe, false, McCounts::default(), 2),
                Some(4),
                &SolverConfig::default(),
            )
            .unwrap();
        for s in [[0.0, 0.0], [0.9, -0.9], [-0.3, 0.5]] {
            assert!((npbe.value_at(&s, &policy, &sol, &[]).unwrap() - 20.0).abs() < 1e-6);
        }
        assert!((sol.objective() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_and_balance_hold() {
        let ds = random_dataset(60, 2, 1, 0.1, 10);
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.2, 0.2], vec![0.3]).unwrap(), 0.95).unwrap();
        let policy = mlp(2, 1, PolicyMode::Gaussian, 7);
        let counts = McCounts {
            n_pi: 3,
            n_phi: 2,
            n_mu0: 4,
        };
        let sol = npbe
            .build_and_solve(
                &policy,
                &samples(&npbe, true, counts, 3),
                Some(8),
                &SolverConfig::default(),
            )
            .unwrap();
        let n = npbe.len();
        let mut pq = vec![0.0; n];
        sol.system.p.mul_vec(&sol.q, &mut pq);
        let mut rng = substream(4, "queries");
        for _ in 0..50 {
            let s: Vec<f64> = (0..2).map(|_| rng.random_range(-1.2..1.2)).collect();
            let e = npbe.responsibilities_det(&s, &policy).unwrap();
            let v = dot(&e, &sol.q);
            let backup: f64 = e
                .iter()
                .enumerate()
                .map(|(j, w)| w * (npbe.dataset().reward(j) + 0.95 * pq[j]))
                .sum();
            assert!((v - backup).abs() <= 1e-6 * (1.0 + v.abs()));
        }
        let mut ptmu = vec![0.0; n];
        sol.system.p.mul_vec_transpose(&sol.mu, &mut ptmu);
        for j in 0..n {
            assert!((sol.mu[j] - sol.epsilon0()[j] - 0.95 * ptmu[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn sparsify_examples() {
        let mut rng = substream(11, "sparse");
        let n = 8;
        let mut p = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        p.row_mut(2).fill(0.0);
        let full = sparsify(&p, n).unwrap();
        assert!((full.to_dense() - &p).abs().max() < 1e-15);
        let one = sparsify(&p, 1).unwrap();
        for i in 0..n {
            if i == 2 {
                assert_eq!(one.row(i).0.len(), 0);
                continue;
            }
            let (c, v) = one.row(i);
            assert_eq!(v, &[1.0]);
            let argmax = (0..n).max_by(|&a, &b| p[(i, a)].total_cmp(&p[(i, b)])).unwrap();
            assert_eq!(c, &[argmax]);
        }
        // Spectral radius ≤ 1 by power iteration on |x|.
        let three = sparsify(&p, 3).unwrap();
        let mut x = vec![1.0; n];
        let mut y = vec![0.0; n];
        for _ in 0..200 {
            three.mul_vec(&x, &mut y);
            let m = y.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            x = y.iter().map(|v| v / m.max(1e-300)).collect();
        }
        three.mul_vec(&x, &mut y);
        let rho = y.iter().fold(0.0f64, |a, b| a.max(b.abs())) / x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(rho <= 1.0 + 1e-9);
        assert!(sparsify(&p, 0).is_err());
    }

    #[test]
    fn built_matrix_matches_dense_then_sparsified() {
        let ds = random_dataset(25, 2, 1, 0.1, 12);
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.3, 0.3], vec![0.3]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 8);
        let smp = samples(&npbe, false, McCounts::default(), 5);
        let full = npbe.build(&policy, &smp, None).unwrap();
        let sparse = npbe.build(&policy, &smp, Some(5)).unwrap();
        let reference = sparsify(&full.p.to_dense(), 5).unwrap();
        assert_eq!(sparse.p.cols, reference.cols);
        assert_eq!(sparse.p.row_ptr, reference.row_ptr);
        for (a, b) in sparse.p.vals.iter().zip(&reference.vals) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn value_iteration_oracle_on_embedded_chain() {
        // Five states on a line, two actions (left/right), deterministic moves,
        // reward depends on the state. Embedded with tiny bandwidths.
        let gamma = 0.9;
        let reward = |s: usize| [0.0, 0.1, 0.2, 0.5, 1.0][s];
        let step = |s: usize, a: usize| if a == 1 { (s + 1).min(4) } else { s.saturating_sub(1) };
        let mut rows = Vec::new();
        for s in 0..5 {
            for a in 0..2 {
                rows.push(Transition {
                    state: vec![s as f64],
                    action: vec![a as f64],
                    reward: reward(s),
                    next_state: vec![step(s, a) as f64],
                    terminal: false,
                    behavior_logp: None,
                    trajectory: None,
                });
            }
        }
        let ds = TransitionDataset::from_transitions(1, 1, &rows).unwrap();
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![1e-3], vec![1e-3]).unwrap(), gamma).unwrap();
        // Policy: always move right (action 1); a linear policy a = k·s cannot
        // express that, so use an MLP with bias only.
        let arch = MlpArchitecture {
            hidden: 1,
            ..MlpArchitecture::new(1, 1, 1.0, PolicyMode::Deterministic)
        };
        // tanh(z) = 1 only asymptotically; use z large so the action is 1 - 1e-12.
        let policy = MlpPolicy::from_params(arch, vec![0.0, 0.0, 0.0, 20.0]).unwrap();
        let counts = McCounts::default();
        let smp = McSamples::draw(10, 1, 1, false, &counts, |_| vec![0.0], 1, 0).unwrap();
        let sol = npbe
            .build_and_solve(&policy, &smp, None, &SolverConfig::default())
            .unwrap();
        let mut v = [0.0; 5];
        for _ in 0..1000 {
            let mut next = [0.0; 5];
            for s in 0..5 {
                next[s] = reward(s) + gamma * v[step(s, 1)];
            }
            v = next;
        }
        for s in 0..5 {
            let est = npbe.value_at(&[s as f64], &policy, &sol, &[]).unwrap();
            assert!((est - v[s]).abs() <= 0.02 * v.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = random_dataset(5, 2, 1, 0.0, 13);
        let bw = KernelBandwidths::new(vec![0.3, 0.3], vec![0.3]).unwrap();
        assert!(Npbe::new(ds.clone(), bw.clone(), 1.0).is_err());
        assert!(Npbe::new(TransitionDataset::empty(2, 1), bw.clone(), 0.9).is_err());
        assert!(Npbe::new(ds.clone(), KernelBandwidths::new(vec![0.3], vec![0.3]).unwrap(), 0.9).is_err());
        let npbe = Npbe::new(ds, bw, 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 1);
        let smp = samples(&npbe, false, McCounts::default(), 1);
        assert!(npbe.build(&policy, &smp, Some(0)).is_err());
        let wrong = McSamples::draw(6, 2, 1, false, &McCounts::default(), |_| vec![0.0, 0.0], 1, 0).unwrap();
        assert!(npbe.build(&policy, &wrong, None).is_err());
    }

    #[test]
    fn dumps_are_written() {
        let ds = random_dataset(6, 2, 1, 0.0, 14);
        let npbe = Npbe::new(ds, KernelBandwidths::new(vec![0.3, 0.3], vec![0.3]).unwrap(), 0.9).unwrap();
        let policy = mlp(2, 1, PolicyMode::Deterministic, 1);
        let sol = npbe
            .build_and_solve(
                &policy,
                &samples(&npbe, false, McCounts::default(), 1),
                Some(2),
                &SolverConfig::default(),
            )
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        sol.save_dumps(dir.path(), Some("seed 1")).unwrap();
        let triplets = std::fs::read_to_string(dir.path().join("transition_matrix.csv")).unwrap();
        assert_eq!(triplets.lines().count(), 2 + 12);
        let qmu = std::fs::read_to_string(dir.path().join("q_mu.csv")).unwrap();
        assert!(qmu.starts_with("# seed 1\nrow,q,mu\n"));
        assert_eq!(qmu.lines().count(), 8);
    }
}
