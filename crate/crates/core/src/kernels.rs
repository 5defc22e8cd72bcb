//! Normalized Gaussian product kernels and Nadaraya-Watson regression.
//!
//! All arithmetic is carried out on per-dimension log terms. Ratios of kernel
//! weights (responsibilities) are formed with a max-shifted exponential sum, so
//! far-away queries keep meaningful relative weights long after the raw
//! densities have underflowed.

use serde::{Deserialize, Serialize};

use crate::error::{NopgError, Result};

/// `ln(2π) / 2`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A query whose smallest squared scaled distance to any sample exceeds this
/// value is treated as degenerate.
pub const DEGENERATE_SQ_DIST: f64 = 700.0;

/// Number of grid points of the bandwidth search.
pub const BANDWIDTH_GRID_POINTS: usize = 40;
/// Grid span, as multiples of the per-dimension standard deviation.
pub const BANDWIDTH_GRID_LOW: f64 = 1e-3;
pub const BANDWIDTH_GRID_HIGH: f64 = 10.0;
/// Above this many distinct values the leave-one-out scan runs on a strided subsample.
const CV_MAX_DISTINCT: usize = 1500;

/// Per-dimension Gaussian bandwidths. Every entry is finite and strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BandwidthVector(Vec<f64>);

impl BandwidthVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NopgError::InvalidBandwidth("empty bandwidth vector".into()));
        }
        if let Some(bad) = values.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(NopgError::InvalidBandwidth(format!(
                "bandwidth {bad} is not strictly positive"
            )));
        }
        Ok(Self(values))
    }

    /// Same bandwidth `h` in each of `dim` dimensions.
    pub fn uniform(h: f64, dim: usize) -> Result<Self> {
        Self::new(vec![h; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> Vec<f64> {
        self.0.iter().map(|h| 1.0 / h).collect()
    }

    /// `Σ ln hᵢ`, the per-kernel log normalizer excluding the `2π` terms.
    pub fn log_det(&self) -> f64 {
        self.0.iter().map(|h| h.ln()).sum()
    }
}

impl TryFrom<Vec<f64>> for BandwidthVector {
    type Error = NopgError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<BandwidthVector> for Vec<f64> {
    fn from(h: BandwidthVector) -> Self {
        h.0
    }
}

/// Elementwise product of bandwidths and empirical factors.
pub fn apply_h_factor(h: &BandwidthVector, factor: &[f64]) -> Result<BandwidthVector> {
    check_dims(h.len(), factor.len(), "h_factor")?;
    if let Some(bad) = factor.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(NopgError::InvalidBandwidth(format!(
            "h_factor {bad} is not strictly positive"
        )));
    }
    BandwidthVector::new(h.0.iter().zip(factor).map(|(h, f)| h * f).collect())
}

/// One kernel evaluation kept as per-dimension log terms.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEvaluation {
    pub log_terms: Vec<f64>,
}

impl KernelEvaluation {
    pub fn log_value(&self) -> f64 {
        self.log_terms.iter().sum()
    }

    pub fn value(&self) -> f64 {
        self.log_value().exp()
    }
}

fn check_dims(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(NopgError::DimensionMismatch { expected, got, context });
    }
    Ok(())
}

/// Squared Mahalanobis distance under a diagonal bandwidth, given `1/h`.
#[inline]
pub fn scaled_sq_dist(x: &[f64], center: &[f64], inv_h: &[f64]) -> f64 {
    x.iter()
        .zip(center)
        .zip(inv_h)
        .map(|((x, c), ih)| {
            let z = (x - c) * ih;
            z * z
        })
        .sum()
}

pub fn evaluate_kernel(x: &[f64], center: &[f64], h: &BandwidthVector) -> Result<KernelEvaluation> {
    check_dims(h.len(), x.len(), "kernel point")?;
    check_dims(h.len(), center.len(), "kernel center")?;
    let log_terms = x
        .iter()
        .zip(center)
        .zip(h.as_slice())
        .map(|((x, c), h)| {
            let z = (x - c) / h;
            -0.5 * z * z - h.ln() - HALF_LN_2PI
        })
        .collect();
    Ok(KernelEvaluation { log_terms })
}

/// `∏ᵢ N(xᵢ − centerᵢ; 0, hᵢ²)`.
pub fn gaussian_kernel(x: &[f64], center: &[f64], h: &BandwidthVector) -> Result<f64> {
    evaluate_kernel(x, center, h).map(|k| k.value())
}

/// Gradient of [`gaussian_kernel`] with respect to `x`: `k · (center − x) / h²`.
pub fn kernel_grad_wrt_point(x: &[f64], center: &[f64], h: &BandwidthVector) -> Result<Vec<f64>> {
    let k = gaussian_kernel(x, center, h)?;
    Ok(x.iter()
        .zip(center)
        .zip(h.as_slice())
        .map(|((x, c), h)| k * (c - x) / (h * h))
        .collect())
}

/// Normalizes log-weights in place into a probability vector and returns the largest logit.
pub(crate) fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    max
}

/// Index of the largest entry (ties resolved to the lowest index).
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Nadaraya-Watson estimate `Σ k(q,xᵢ) yᵢ / Σ k(q,xᵢ)`.
pub fn nadaraya_watson(query: &[f64], xs: &[Vec<f64>], ys: &[f64], h: &BandwidthVector) -> Result<f64> {
    if xs.is_empty() {
        return Err(NopgError::InvalidInput(
            "Nadaraya-Watson needs at least one sample".into(),
        ));
    }
    check_dims(xs.len(), ys.len(), "Nadaraya-Watson targets")?;
    check_dims(h.len(), query.len(), "Nadaraya-Watson query")?;
    let inv_h = h.inverse();
    let mut logits = Vec::with_capacity(xs.len());
    for x in xs {
        check_dims(h.len(), x.len(), "Nadaraya-Watson sample")?;
        logits.push(-0.5 * scaled_sq_dist(query, x, &inv_h));
    }
    let nearest = argmax(&logits);
    if -2.0 * logits[nearest] > DEGENERATE_SQ_DIST {
        return Err(NopgError::DegenerateQuery { nearest });
    }
    softmax_in_place(&mut logits);
    Ok(logits.iter().zip(ys).map(|(w, y)| w * y).sum())
}

/// Outcome of the per-dimension bandwidth search.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSelection {
    pub bandwidths: BandwidthVector,
    /// `true` for dimensions that had no spread and received the floor bandwidth.
    pub floored: Vec<bool>,
}

impl BandwidthSelection {
    pub fn any_floored(&self) -> bool {
        self.floored.iter().any(|f| *f)
    }
}

/// Floor bandwidth for a dimension without spread.
pub fn floor_bandwidth(mean: f64) -> f64 {
    1e-3 * (1.0 + mean.abs())
}

/// Log-spaced candidate bandwidths `[10⁻³, 10]·std`.
pub fn bandwidth_grid(std: f64) -> Vec<f64> {
    let lo = (BANDWIDTH_GRID_LOW * std).ln();
    let hi = (BANDWIDTH_GRID_HIGH * std).ln();
    let steps = (BANDWIDTH_GRID_POINTS - 1) as f64;
    (0..BANDWIDTH_GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / steps).exp())
        .collect()
}

/// Leave-one-out log-likelihood of a 1-D Gaussian KDE.
///
/// The held-out point also leaves out every exact duplicate of itself, so
/// repeated coordinates (grids, duplicated records) do not drive the bandwidth
/// to zero and duplicating a dataset does not change the score's argmax.
/// `values` must be sorted distinct values with their multiplicities.
pub fn loo_log_likelihood(values: &[f64], counts: &[usize], h: f64) -> f64 {
    let total: usize = counts.iter().sum();
    let mut ll = 0.0;
    let mut terms = Vec::with_capacity(values.len());
    for (i, xi) in values.iter().enumerate() {
        let others = total - counts[i];
        if others == 0 {
            continue;
        }
        terms.clear();
        for (j, xj) in values.iter().enumerate() {
            if i != j {
                let z = (xi - xj) / h;
                terms.push((counts[j] as f64).ln() - 0.5 * z * z);
            }
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        let log_density = lse - (others as f64).ln() - h.ln() - HALF_LN_2PI;
        ll += counts[i] as f64 * log_density;
    }
    ll
}

fn distinct_with_counts(column: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut sorted = column.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut values: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for x in sorted {
        match values.last() {
            Some(last) if *last == x => *counts.last_mut().unwrap() += 1,
            _ => {
                values.push(x);
                counts.push(1);
            }
        }
    }
    if values.len() > CV_MAX_DISTINCT {
        let stride = values.len().div_ceil(CV_MAX_DISTINCT);
        let mut sub_v = Vec::new();
        let mut sub_c = Vec::new();
        for (chunk_v, chunk_c) in values.chunks(stride).zip(counts.chunks(stride)) {
            sub_v.push(chunk_v[chunk_v.len() / 2]);
            sub_c.push(chunk_c.iter().sum());
        }
        return (sub_v, sub_c);
    }
    (values, counts)
}

/// Per-dimension bandwidth maximizing the leave-one-out KDE log-likelihood
/// over a 40-point log-spaced grid spanning `[10⁻³, 10]` standard deviations.
///
/// `data` is a list of points of equal dimension. Dimensions without spread
/// fall back to [`floor_bandwidth`] and are reported in
/// [`BandwidthSelection::floored`].
pub fn select_bandwidths(data: &[Vec<f64>]) -> Result<BandwidthSelection> {
    if data.len() < 2 {
        return Err(NopgError::InvalidInput(
            "bandwidth selection needs at least two points".into(),
        ));
    }
    let dim = data[0].len();
    let columns: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            data.iter()
                .map(|p| {
                    check_dims(dim, p.len(), "bandwidth selection point")?;
                    Ok(p[d])
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut bandwidths = Vec::with_capacity(dim);
    let mut floored = Vec::with_capacity(dim);
    for column in &columns {
        let (h, was_floored) = select_bandwidth_1d(column);
        bandwidths.push(h);
        floored.push(was_floored);
    }
    Ok(BandwidthSelection {
        bandwidths: BandwidthVector::new(bandwidths)?,
        floored,
    })
}

/// Bandwidth search along one coordinate. Returns `(h, floored)`.
pub fn select_bandwidth_1d(column: &[f64]) -> (f64, bool) {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let (values, counts) = distinct_with_counts(column);
    if values.len() < 2 || !(std > 0.0) {
        return (floor_bandwidth(mean), true);
    }
    let mut best = (f64::NEG_INFINITY, std);
    for h in bandwidth_grid(std) {
        let ll = loo_log_likelihood(&values, &counts, h);
        if ll > best.0 {
            best = (ll, h);
        }
    }
    (best.1, false)
}
