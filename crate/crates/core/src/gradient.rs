//! Closed-form gradient of `Ĵ = ε₀ᵀΛ⁻¹r`:
//! `∇Ĵ = (∇ε₀ᵀ)q + γμᵀ(∇P̃)q`.
//!
//! Every term is a cotangent-weighted derivative of responsibilities, which
//! reduces to an action-space cotangent per query followed by one policy VJP.

use crate::error::{NopgError, Result};
use crate::npbe::{McSamples, Npbe, NpbeSolution};
use crate::policy::DifferentiablePolicy;
use crate::solver::SolverConfig;

/// `grad = term_a + term_b`, split by source.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    /// `(∇ε₀ᵀ)q`.
    pub term_a: Vec<f64>,
    /// `γμᵀ(∇P̃)q`.
    pub term_b: Vec<f64>,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Pushes the action cotangents of one query state's samples through the policy.
///
/// `g` holds one action cotangent per sample, already weighted. For Gaussian
/// policies `a = mean + std·ζ`, so the std cotangent is `g ⊙ ζ`.
fn pull_back<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    state: &[f64],
    g: &[Vec<f64>],
    noise: Option<&Vec<Vec<f64>>>,
    out: &mut [f64],
) {
    let da = policy.action_dim();
    let mut cot_mean = vec![0.0; da];
    for gm in g {
        cot_mean.iter_mut().zip(gm).for_each(|(c, v)| *c += v);
    }
    if cot_mean.iter().all(|v| *v == 0.0) {
        return;
    }
    match noise {
        Some(zetas) => {
            let mut cot_std = vec![0.0; da];
            for (gm, z) in g.iter().zip(zetas) {
                for k in 0..da {
                    cot_std[k] += gm[k] * z[k];
                }
            }
            policy.vjp(state, &cot_mean, Some(&cot_std), out);
        }
        None => policy.vjp(state, &cot_mean, None, out),
    }
}

/// `Σᵢ cotᵢ ∇θ εᵢ(s)`, with `ε` averaged over the reparameterization `noise`
/// (`k × da` standard normals) for Gaussian policies.
pub fn grad_responsibility<P: DifferentiablePolicy + ?Sized>(
    npbe: &Npbe,
    policy: &P,
    state: &[f64],
    cotangent: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    if cotangent.len() != npbe.len() {
        return Err(NopgError::DimensionMismatch {
            expected: npbe.len(),
            got: cotangent.len(),
            context: "responsibility cotangent",
        });
    }
    if policy.is_stochastic() && (noise.is_empty() || !noise.len().is_multiple_of(policy.action_dim())) {
        return Err(NopgError::InvalidInput(
            "Gaussian policies need frozen noise with a multiple of action_dim entries".into(),
        ));
    }
    let (qa, resp) = npbe.query(policy, state, noise);
    let inv = 1.0 / resp.len() as f64;
    let g: Vec<Vec<f64>> = qa
        .actions
        .iter()
        .zip(&resp)
        .map(|(a, r)| {
            if r.degenerate {
                return vec![0.0; a.len()];
            }
            let mean_c: f64 = r.weights.iter().zip(cotangent).map(|(w, c)| w * c).sum();
            npbe.weighted_action_offset(
                r.weights
                    .iter()
                    .zip(cotangent)
                    .enumerate()
                    .map(|(j, (w, c))| (j, w * (c - mean_c))),
                a,
            )
            .into_iter()
            .map(|v| v * inv)
            .collect()
        })
        .collect();
    let mut out = vec![0.0; policy.num_params()];
    pull_back(policy, state, &g, qa.noise.as_ref(), &mut out);
    Ok(out)
}

/// Full gradient on the samples `solution` was built from.
pub fn full_gradient<P: DifferentiablePolicy + ?Sized>(
    npbe: &Npbe,
    policy: &P,
    solution: &NpbeSolution,
    samples: &McSamples,
) -> Result<GradientEstimate> {
    if solution.token() != samples.token {
        return Err(NopgError::StaleSolution {
            solution: solution.token(),
            samples: samples.token,
        });
    }
    let sys = &solution.system;
    let q = &solution.q;
    let n_params = policy.num_params();

    let mut term_a = vec![0.0; n_params];
    let w0 = 1.0 / (sys.initial.len() * samples.per_query) as f64;
    for rec in &sys.initial {
        let g: Vec<Vec<f64>> = rec
            .actions
            .iter()
            .zip(&rec.resp)
            .map(|(a, r)| {
                if r.degenerate {
                    return vec![0.0; a.len()];
                }
                let mean_q: f64 = r.weights.iter().zip(q).map(|(w, qj)| w * qj).sum();
                let terms = r
                    .weights
                    .iter()
                    .zip(q)
                    .enumerate()
                    .map(|(j, (w, qj))| (j, w * (qj - mean_q)));
                npbe.weighted_action_offset(terms, a)
                    .into_iter()
                    .map(|v| v * w0)
                    .collect()
            })
            .collect();
        pull_back(policy, &rec.state, &g, rec.noise.as_ref(), &mut term_a);
    }

    let mut term_b = vec![0.0; n_params];
    let gamma = npbe.gamma();
    if gamma > 0.0 {
        for (i, row) in sys.rows.iter().enumerate() {
            let Some(records) = row else { continue };
            let weight = gamma * solution.mu[i] / sys.per_row as f64;
            if weight == 0.0 {
                continue;
            }
            let (cols, vals) = sys.p.row(i);
            let mass = sys.p.kept_mass[i];
            // Kept entries are P_ij / S_K, so d(Σ P̃_ij q_j) = Σ_K dP_ij (q_j − q̄_K)/S_K.
            let q_bar: f64 = cols.iter().zip(vals).map(|(&j, p)| p * q[j]).sum();
            let c: Vec<f64> = cols.iter().map(|&j| (q[j] - q_bar) / mass).collect();
            for rec in records {
                let g: Vec<Vec<f64>> = rec
                    .actions
                    .iter()
                    .enumerate()
                    .map(|(m, a)| {
                        if rec.degenerate[m] {
                            return vec![0.0; a.len()];
                        }
                        let eps = &rec.kept_weights[m];
                        let c_bar: f64 = eps.iter().zip(&c).map(|(e, cj)| e * cj).sum();
                        let kept = npbe.weighted_action_offset(
                            cols.iter().zip(eps.iter().zip(&c)).map(|(&j, (e, cj))| (j, e * cj)),
                            a,
                        );
                        kept.iter()
                            .zip(&rec.moments[m])
                            .map(|(k, mom)| weight * (k - c_bar * mom))
                            .collect()
                    })
                    .collect();
                pull_back(policy, &rec.state, &g, rec.noise.as_ref(), &mut term_b);
            }
        }
    }

    let grad: Vec<f64> = term_a.iter().zip(&term_b).map(|(a, b)| a + b).collect();
    Ok(GradientEstimate { grad, term_a, term_b })
}

/// `Ĵ = ε₀ᵀΛ⁻¹r` on frozen samples.
pub fn surrogate_objective<P: DifferentiablePolicy + ?Sized>(
    npbe: &Npbe,
    policy: &P,
    samples: &McSamples,
    sparsify: Option<usize>,
    cfg: &SolverConfig,
) -> Result<f64> {
    Ok(npbe.build_and_solve(policy, samples, sparsify, cfg)?.objective())
}
