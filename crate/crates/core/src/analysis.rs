//! Closed-form bias bounds for kernel regression and the NPBE value, and an
//! exact evaluator for linear policies on the LQR task.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::envs::LqrParams;
use crate::error::{NopgError, Result};

/// A bound value; `overflow` is set when the expression is not representable
/// (the value is then `+∞`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub value: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBoundInputs {
    /// Lipschitz constant of the mean reward.
    pub l_r: f64,
    /// Log-Lipschitz constant of the sampling density.
    pub l_beta: f64,
    /// Lipschitz constant of the estimated value function.
    pub l_v: f64,
    pub h_state: Vec<f64>,
    pub h_action: Vec<f64>,
    pub h_next_state: Vec<f64>,
    pub gamma: f64,
}

impl BiasBoundInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("l_r", self.l_r), ("l_beta", self.l_beta), ("l_v", self.l_v)] {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(NopgError::InvalidInput(format!(
                    "{name} must be finite and nonnegative, got {c}"
                )));
            }
        }
        let all = self.h_state.iter().chain(&self.h_action).chain(&self.h_next_state);
        if let Some(h) = all.clone().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(NopgError::InvalidBandwidth(format!(
                "bandwidths must be positive and finite, got {h}"
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(NopgError::InvalidInput(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `ln χ = L²h²/2 + ln(1 + erf(hL/√2))`.
fn ln_chi(h: f64, l: f64) -> f64 {
    let z = h * l / std::f64::consts::SQRT_2;
    z * z + (1.0 + erf(z)).ln()
}

/// `ln(e^{L²h²/2}(1 − erf(hL/√2)))`; `-∞` once `erfc` underflows.
fn ln_denominator(h: f64, l: f64) -> f64 {
    let z = h * l / std::f64::consts::SQRT_2;
    z * z + erfc(z).ln()
}

/// Bias bound of Gaussian-kernel Nadaraya-Watson regression in the
/// infinite-sample limit, for a target with Lipschitz constant `l_f` and a
/// sampling density with log-Lipschitz constant `l_beta`:
///
/// `L_f Σₖ hₖ (∏_{i≠k} χᵢ)(1/√(2π) + L_β hₖ χₖ/2) / ∏ᵢ e^{L_β²hᵢ²/2}(1 − erf(hᵢL_β/√2))`
/// with `χᵢ = e^{L_β²hᵢ²/2}(1 + erf(hᵢL_β/√2))`.
pub fn nw_bias_bound(l_f: f64, l_beta: f64, h: &[f64]) -> Bound {
    let ln_chis: Vec<f64> = h.iter().map(|&hi| ln_chi(hi, l_beta)).collect();
    let ln_chi_total: f64 = ln_chis.iter().sum();
    let ln_den: f64 = h.iter().map(|&hi| ln_denominator(hi, l_beta)).sum();
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for (k, &hk) in h.iter().enumerate() {
        let others = (ln_chi_total - ln_chis[k] - ln_den).exp();
        let own = inv_sqrt_2pi + 0.5 * l_beta * hk * ln_chis[k].exp();
        total += hk * others * own;
    }
    let value = l_f * total;
    if value.is_finite() {
        Bound { value, overflow: false }
    } else {
        Bound {
            value: f64::INFINITY,
            overflow: true,
        }
    }
}

/// Bound on `|E[V̂(s)] − V(s)|`:
/// `(A + γ L_V Σₖ h_{φ,k}/√(2π)) / (1 − γ)`, where `A` is
/// [`nw_bias_bound`] with `L_f = L_R` over the concatenated state and action
/// bandwidths.
pub fn npbe_bias_bound(inputs: &BiasBoundInputs) -> Result<Bound> {
    inputs.validate()?;
    let h: Vec<f64> = inputs.h_state.iter().chain(&inputs.h_action).copied().collect();
    let a = nw_bias_bound(inputs.l_r, inputs.l_beta, &h);
    let transition =
        inputs.gamma * inputs.l_v * inputs.h_next_state.iter().sum::<f64>() / (2.0 * std::f64::consts::PI).sqrt();
    let value = (a.value + transition) / (1.0 - inputs.gamma);
    Ok(Bound {
        value,
        overflow: a.overflow || !value.is_finite(),
    })
}

/// Largest slope between consecutive points of a 1-D function sampled on a
/// sorted grid.
pub fn empirical_lipschitz(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
        .fold(0.0, f64::max)
}

/// Exact discounted return of a linear policy `u = Kx` on the LQR task.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrEvaluation {
    /// `x₀ᵀPx₀`, or `-∞` when the discounted closed loop is unstable.
    pub j: f64,
    /// `∂J/∂kᵢ` for the diagonal gains; `None` when unstable at the point or
    /// at one of the finite-difference neighbours.
    pub grad: Option<Vec<f64>>,
    pub diverged: bool,
    pub iterations: usize,
}

pub const LQR_FIXED_POINT_TOL: f64 = 1e-12;
pub const LQR_FD_STEP: f64 = 1e-6;
const LQR_MAX_ITER: usize = 1_000_000;

fn diag(gains: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(gains))
}

/// Spectral radius of `√γ(A + BK)`.
pub fn discounted_spectral_radius(params: &LqrParams, k: &DMatrix<f64>) -> f64 {
    let m = (&params.a + &params.b * k) * params.gamma.sqrt();
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// `P` solving `P = ½(Q + KᵀRK) + γ(A+BK)ᵀP(A+BK)` by fixed-point
/// iteration, with the Frobenius norm of successive differences recorded.
pub fn lqr_value_matrix(params: &LqrParams, k: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>)> {
    if discounted_spectral_radius(params, k) >= 1.0 {
        return None;
    }
    let m = &params.a + &params.b * k;
    let c = (&params.q + k.transpose() * params.effective_r() * k) * 0.5;
    let mt = m.transpose();
    let mut p = c.clone();
    let mut residuals = Vec::new();
    for _ in 0..LQR_MAX_ITER {
        let next = &c + (&mt * &p * &m) * params.gamma;
        let delta = (&next - &p).norm();
        let scale = next.norm().max(1.0);
        residuals.push(delta);
        p = next;
        if delta <= LQR_FIXED_POINT_TOL * scale {
            return Some((p, residuals));
        }
    }
    None
}

fn lqr_return(params: &LqrParams, k: &DMatrix<f64>) -> Option<(f64, usize)> {
    let (p, res) = lqr_value_matrix(params, k)?;
    Some(((params.x0.transpose() * p * &params.x0)[0], res.len()))
}

/// Exact `J` of the diagonal gain policy and its gradient by central
/// differences on the exact `J`.
pub fn lqr_exact(gains: &[f64], params: &LqrParams) -> Result<LqrEvaluation> {
    if gains.len() != params.action_dim() || params.action_dim() != params.state_dim() {
        return Err(NopgError::DimensionMismatch {
            expected: params.state_dim(),
            got: gains.len(),
            context: "diagonal LQR gains",
        });
    }
    let Some((j, iterations)) = lqr_return(params, &diag(gains)) else {
        return Ok(LqrEvaluation {
            j: f64::NEG_INFINITY,
            grad: None,
            diverged: true,
            iterations: 0,
        });
    };
    let mut grad = Some(Vec::with_capacity(gains.len()));
    for i in 0..gains.len() {
        let mut up = gains.to_vec();
        let mut down = gains.to_vec();
        up[i] += LQR_FD_STEP;
        down[i] -= LQR_FD_STEP;
        match (lqr_return(params, &diag(&up)), lqr_return(params, &diag(&down))) {
            (Some((ju, _)), Some((jd, _))) => {
                if let Some(g) = grad.as_mut() {
                    g.push((ju - jd) / (2.0 * LQR_FD_STEP));
                }
            }
            _ => grad = None,
        }
    }
    Ok(LqrEvaluation {
        j,
        grad,
        diverged: false,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn flat_density_reduces_to_mean_offset() {
        let h = [0.1, 0.3, 0.7];
        let b = nw_bias_bound(2.0, 0.0, &h);
        assert!(!b.overflow);
        assert_relative_eq!(
            b.value,
            2.0 * 1.1 / (2.0 * std::f64::consts::PI).sqrt(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn vanishing_bandwidth_gives_zero_bound() {
        assert!(nw_bias_bound(1.0, 5.0, &[1e-12, 1e-12]).value < 1e-11);
        let inputs = BiasBoundInputs {
            l_r: 1.0,
            l_beta: 3.0,
            l_v: 2.0,
            h_state: vec![1e-12],
            h_action: vec![1e-12],
            h_next_state: vec![1e-12],
            gamma: 0.9,
        };
        assert!(npbe_bias_bound(&inputs).unwrap().value < 1e-9);
    }

    #[test]
    fn monotone_in_bandwidth_and_lipschitz_constant() {
        for l_beta in [0.0, 0.5, 2.0, 10.0] {
            let mut prev = 0.0;
            for i in 1..60 {
                let h = 0.02 * i as f64;
                let b = nw_bias_bound(1.0, l_beta, &[h, 0.3]).value;
                assert!(b >= prev, "l_beta {l_beta}, h {h}");
                prev = b;
            }
            let mut prev = 0.0;
            for i in 0..20 {
                let b = nw_bias_bound(0.25 * i as f64, l_beta, &[0.2, 0.3]).value;
                assert!(b >= prev);
                prev = b;
            }
        }
    }

    #[test]
    fn one_dimensional_value_by_hand() {
        let (l, h) = (1.5f64, 0.4f64);
        let z = h * l / 2f64.sqrt();
        let chi = (z * z).exp() * (1.0 + erf(z));
        let den = (z * z).exp() * (1.0 - erf(z));
        let expected = 0.7 * h * (1.0 / (2.0 * std::f64::consts::PI).sqrt() + l * h * chi / 2.0) / den;
        assert_relative_eq!(nw_bias_bound(0.7, l, &[h]).value, expected, max_relative = 1e-12);
    }

    #[test]
    fn underflowing_denominator_is_flagged() {
        let b = nw_bias_bound(1.0, 100.0, &[1.0]);
        assert!(b.overflow);
        assert_eq!(b.value, f64::INFINITY);
    }

    #[test]
    fn pendulum_bandwidths_give_finite_positive_bound() {
        let b = nw_bias_bound(1.0, 1.0, &[0.14, 0.14, 1.1, 0.2]);
        assert!(b.value.is_finite() && b.value > 0.0 && !b.overflow);
    }

    #[test]
    fn zero_discount_keeps_only_reward_term() {
        let inputs = BiasBoundInputs {
            l_r: 1.0,
            l_beta: 0.5,
            l_v: 4.0,
            h_state: vec![0.2, 0.1],
            h_action: vec![0.3],
            h_next_state: vec![0.5, 0.5],
            gamma: 0.0,
        };
        let a = nw_bias_bound(1.0, 0.5, &[0.2, 0.1, 0.3]).value;
        assert_relative_eq!(npbe_bias_bound(&inputs).unwrap().value, a, max_relative = 1e-14);
        let bad = BiasBoundInputs { gamma: 1.0, ..inputs };
        assert!(npbe_bias_bound(&bad).is_err());
    }

    #[test]
    fn deadbeat_gain_gives_one_step_value() {
        let params = LqrParams::default();
        let gains = [-12.0, -5.5];
        let k = diag(&gains);
        let eval = lqr_exact(&gains, &params).unwrap();
        let p = (&params.q + k.transpose() * &params.r * &k) * 0.5;
        assert_relative_eq!(
            eval.j,
            (params.x0.transpose() * p * &params.x0)[0],
            max_relative = 1e-12
        );
    }

    #[test]
    fn no_actuation_gradient_is_the_action_penalty_term() {
        // 1-D: P = ½(q + k²r)/(1 − γa²), so dJ/dk = x₀² k r/(1 − γa²).
        let params = LqrParams {
            a: DMatrix::from_element(1, 1, 0.8),
            b: DMatrix::zeros(1, 1),
            q: DMatrix::from_element(1, 1, -1.0),
            r: DMatrix::from_element(1, 1, 0.3),
            x0: DVector::from_element(1, 2.0),
            gamma: 0.9,
            negate_r: false,
        };
        let k = 0.7;
        let eval = lqr_exact(&[k], &params).unwrap();
        let denom = 1.0 - 0.9 * 0.64;
        assert_relative_eq!(eval.j, 4.0 * 0.5 * (-1.0 + k * k * 0.3) / denom, max_relative = 1e-10);
        assert_relative_eq!(eval.grad.unwrap()[0], 4.0 * k * 0.3 / denom, max_relative = 1e-6);
    }

    #[test]
    fn unstable_gain_is_flagged() {
        // With the default matrices, diag(0.35, −0.35) leaves the first mode at
        // √0.9·1.235 > 1.
        let eval = lqr_exact(&[0.35, -0.35], &LqrParams::default()).unwrap();
        assert!(eval.diverged);
        assert_eq!(eval.j, f64::NEG_INFINITY);
        assert!(eval.grad.is_none());
    }

    #[test]
    fn stable_gain_has_finite_value_and_monotone_residuals() {
        let params = LqrParams::default();
        for gains in [[-3.0, -2.0], [-2.0, -1.0], [-8.0, -4.0], [-20.0, -0.5]] {
            let eval = lqr_exact(&gains, &params).unwrap();
            assert!(eval.j.is_finite() && eval.grad.is_some());
            let (_, res) = lqr_value_matrix(&params, &diag(&gains)).unwrap();
            assert!(res.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
        }
    }

    #[test]
    fn exact_value_matches_long_rollout() {
        let params = LqrParams::default();
        let gains = [-3.0, -2.0];
        let (mut x, mut ret, mut disc) = (params.x0.clone(), 0.0, 1.0);
        let k = diag(&gains);
        for _ in 0..2000 {
            let u = &k * &x;
            ret += disc * 0.5 * ((x.transpose() * &params.q * &x)[0] + (u.transpose() * &params.r * &u)[0]);
            x = &params.a * &x + &params.b * &u;
            disc *= params.gamma;
        }
        assert_relative_eq!(lqr_exact(&gains, &params).unwrap().j, ret, max_relative = 1e-10);
    }

    #[test]
    fn empirical_lipschitz_of_a_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        assert_relative_eq!(empirical_lipschitz(&xs, &ys), 3.0, max_relative = 1e-12);
    }
}
