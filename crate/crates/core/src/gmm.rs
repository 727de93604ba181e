//! One-dimensional Gaussian mixtures parameterized by a raw `3m`-vector.
//!
//! The raw vector is laid out as `[means | scales | priors]`, each block of
//! length `m`. Means are used as-is, variances are `softplus(scale) + floor`
//! and priors are the sparsemax projection of the raw prior block, so some
//! components can carry exactly zero weight. Zero-weight components are
//! excluded from the density and receive no gradient.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{IkError, Result};

/// Variance floor in rad².
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// Proposal cap for neighborhood-restricted sampling.
pub const TRUNCATION_MAX_PROPOSALS: usize = 1000;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Raw mixture parameters as emitted by a primary network.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub raw_means: Vec<f64>,
    pub raw_scales: Vec<f64>,
    pub raw_priors: Vec<f64>,
    pub var_floor: f64,
}

impl GmmParams {
    /// Splits a `3m` vector laid out as `[means | scales | priors]`.
    pub fn from_raw(raw: &[f64], var_floor: f64) -> Result<Self> {
        if raw.is_empty() || raw.len() % 3 != 0 {
            return Err(IkError::shape("gmm", &[raw.len()], &[3]));
        }
        if !(var_floor > 0.0) {
            return Err(IkError::Config(format!("var_floor must be > 0, got {var_floor}")));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(IkError::NonFiniteInput("gmm parameters".into()));
        }
        let m = raw.len() / 3;
        Ok(GmmParams {
            raw_means: raw[..m].to_vec(),
            raw_scales: raw[m..2 * m].to_vec(),
            raw_priors: raw[2 * m..].to_vec(),
            var_floor,
        })
    }

    pub fn components(&self) -> usize {
        self.raw_means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.raw_means
    }

    pub fn variances(&self) -> Vec<f64> {
        self.raw_scales
            .iter()
            .map(|&s| softplus(s) + self.var_floor)
            .collect()
    }

    pub fn priors(&self) -> Vec<f64> {
        sparsemax(&self.raw_priors)
    }

    pub fn mixture(&self) -> Mixture {
        Mixture {
            means: self.raw_means.clone(),
            variances: self.variances(),
            priors: self.priors(),
        }
    }

    pub fn log_prob(&self, y: f64) -> f64 {
        self.mixture().log_prob(y)
    }

    /// Log-density and its gradient with respect to the raw `3m` vector.
    pub fn log_prob_with_grad(&self, y: f64) -> (f64, Vec<f64>) {
        log_prob_with_grad(&self.raw_means, &self.raw_scales, &self.raw_priors, self.var_floor, y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mixture().sample(rng)
    }

    pub fn sample_truncated<R: Rng + ?Sized>(&self, nb: Neighborhood, rng: &mut R) -> f64 {
        self.mixture().sample_truncated(nb, rng)
    }
}

/// Log-density of the mixture described by a raw `[means | scales | priors]`
/// slice, with its gradient with respect to that slice.
pub fn raw_log_prob_with_grad(raw: &[f64], var_floor: f64, y: f64) -> (f64, Vec<f64>) {
    let m = raw.len() / 3;
    log_prob_with_grad(&raw[..m], &raw[m..2 * m], &raw[2 * m..], var_floor, y)
}

fn log_prob_with_grad(
    means: &[f64],
    scales: &[f64],
    raw_priors: &[f64],
    var_floor: f64,
    y: f64,
) -> (f64, Vec<f64>) {
    let m = means.len();
    let priors = sparsemax(raw_priors);
    let variances: Vec<f64> = scales.iter().map(|&s| softplus(s) + var_floor).collect();

    let mut log_n = vec![f64::NEG_INFINITY; m];
    let mut max_term = f64::NEG_INFINITY;
    for j in 0..m {
        if priors[j] > 0.0 {
            let d = y - means[j];
            log_n[j] = -0.5 * (LN_2PI + variances[j].ln() + d * d / variances[j]);
            max_term = max_term.max(priors[j].ln() + log_n[j]);
        }
    }
    let sum: f64 = (0..m)
        .filter(|&j| priors[j] > 0.0)
        .map(|j| (priors[j].ln() + log_n[j] - max_term).exp())
        .sum();
    let lp = max_term + sum.ln();

    let mut grad = vec![0.0; 3 * m];
    let mut q = vec![0.0; m];
    let mut q_sum = 0.0;
    let mut support = 0usize;
    for j in 0..m {
        if priors[j] <= 0.0 {
            continue;
        }
        let r = (priors[j].ln() + log_n[j] - lp).exp();
        let d = y - means[j];
        let v = variances[j];
        grad[j] = r * d / v;
        grad[m + j] = r * (d * d / (2.0 * v * v) - 1.0 / (2.0 * v)) * sigmoid(scales[j]);
        q[j] = (log_n[j] - lp).exp();
        q_sum += q[j];
        support += 1;
    }
    let q_mean = q_sum / support as f64;
    for j in 0..m {
        if priors[j] > 0.0 {
            grad[2 * m + j] = q[j] - q_mean;
        }
    }
    (lp, grad)
}

/// Closed interval `[center - radius, center + radius]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighborhood {
    pub center: f64,
    pub radius: f64,
}

impl Neighborhood {
    pub fn new(center: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !center.is_finite() {
            return Err(IkError::Config(format!(
                "neighborhood needs radius > 0 and finite center, got ({center}, {radius})"
            )));
        }
        Ok(Neighborhood { center, radius })
    }

    pub fn lo(&self) -> f64 {
        self.center - self.radius
    }

    pub fn hi(&self) -> f64 {
        self.center + self.radius
    }

    pub fn contains(&self, y: f64) -> bool {
        (y - self.center).abs() <= self.radius
    }

    pub fn clamp(&self, y: f64) -> f64 {
        y.clamp(self.lo(), self.hi())
    }
}

/// A resolved mixture: means, variances and priors summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub priors: Vec<f64>,
}

impl Mixture {
    pub fn log_prob(&self, y: f64) -> f64 {
        let terms: Vec<f64> = (0..self.means.len())
            .filter(|&j| self.priors[j] > 0.0)
            .map(|j| {
                let d = y - self.means[j];
                let v = self.variances[j];
                self.priors[j].ln() - 0.5 * (LN_2PI + v.ln() + d * d / v)
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// `y ↦ scale·y + shift` applied to the random variable.
    pub fn affine(&self, scale: f64, shift: f64) -> Mixture {
        Mixture {
            means: self.means.iter().map(|m| scale * m + shift).collect(),
            variances: self.variances.iter().map(|v| scale * scale * v).collect(),
            priors: self.priors.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.priors.iter().zip(&self.means).map(|(p, m)| p * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.priors
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((p, m), v)| p * (v + m * m))
            .sum::<f64>()
            - mu * mu
    }

    /// Index of the highest-prior component (lowest index on ties).
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (j, &p) in self.priors.iter().enumerate() {
            if p > self.priors[best] {
                best = j;
            }
        }
        best
    }

    pub fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_active = self.dominant();
        for (j, &p) in self.priors.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_active = j;
                if u < acc {
                    return j;
                }
            }
        }
        last_active
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let j = self.pick_component(rng);
        let z: f64 = rng.sample(StandardNormal);
        self.means[j] + self.variances[j].sqrt() * z
    }

    /// Rejection sampling restricted to `nb`. When no proposal lands inside
    /// within [`TRUNCATION_MAX_PROPOSALS`] draws, returns the dominant
    /// component's mean clamped into the neighborhood.
    pub fn sample_truncated<R: Rng + ?Sized>(&self, nb: Neighborhood, rng: &mut R) -> f64 {
        self.sample_truncated_detailed(nb, rng).0
    }

    /// As [`Mixture::sample_truncated`], also reporting whether the fallback
    /// was taken.
    pub fn sample_truncated_detailed<R: Rng + ?Sized>(
        &self,
        nb: Neighborhood,
        rng: &mut R,
    ) -> (f64, bool) {
        for _ in 0..TRUNCATION_MAX_PROPOSALS {
            let y = self.sample(rng);
            if nb.contains(y) {
                return (y, false);
            }
        }
        (nb.clamp(self.means[self.dominant()]), true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(mean: f64, var: f64) -> Mixture {
        Mixture {
            means: vec![mean],
            variances: vec![var],
            priors: vec![1.0],
        }
    }

    #[test]
    fn sparsemax_symmetric() {
        assert_eq!(sparsemax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn sparsemax_single_support() {
        assert_eq!(sparsemax(&[2.0, 0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn sparsemax_shift_invariant() {
        let z = [0.3, -1.2, 0.9, 0.1];
        let a = sparsemax(&z);
        let b = sparsemax(&z.map(|v| v + 7.5));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_at_mean() {
        let lp = single(0.0, 1.0).log_prob(0.0);
        assert!((lp - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((lp + 0.918_938_533).abs() < 1e-8);
    }

    #[test]
    fn two_components_match_direct_sum() {
        let mix = Mixture {
            means: vec![-0.4, 0.7],
            variances: vec![0.3, 0.8],
            priors: vec![0.5, 0.5],
        };
        for &y in &[-1.0, 0.0, 0.2, 1.3] {
            let direct: f64 = (0..2)
                .map(|j| {
                    let v = mix.variances[j];
                    let d: f64 = y - mix.means[j];
                    0.5 * (-d * d / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
                })
                .sum();
            let lp = mix.log_prob(y);
            assert!(((lp - direct.ln()) / direct.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_invariance() {
        let mix = Mixture {
            means: vec![-0.4, 0.7],
            variances: vec![0.3, 0.8],
            priors: vec![0.25, 0.75],
        };
        let shifted = mix.affine(1.0, 3.0);
        assert!((mix.log_prob(0.1) - shifted.log_prob(3.1)).abs() < 1e-12);
    }

    #[test]
    fn floor_concentration() {
        let mix = single(0.3, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            assert!((mix.sample(&mut rng) - 0.3).abs() < 6.0 * 1e-2);
        }
    }

    #[test]
    fn component_frequencies() {
        let mix = Mixture {
            means: vec![-1.0, 1.0],
            variances: vec![1e-6, 1e-6],
            priors: vec![0.5, 0.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos = (0..10_000).filter(|_| mix.sample(&mut rng) > 0.0).count();
        let frac = pos as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mix = Mixture {
            means: vec![-1.0, 1.0],
            variances: vec![0.1, 0.2],
            priors: vec![0.3, 0.7],
        };
        let a: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| mix.sample(&mut rng)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| mix.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_fallback_clamps_to_nearest_boundary() {
        let mix = single(5.0, 1e-4);
        let nb = Neighborhood::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, fell_back) = mix.sample_truncated_detailed(nb, &mut rng);
        assert!(fell_back);
        assert_eq!(y, 0.1);

        let mix = single(-5.0, 1e-4);
        assert_eq!(mix.sample_truncated(nb, &mut rng), -0.1);
    }

    #[test]
    fn zero_prior_components_get_zero_gradient() {
        let params = GmmParams::from_raw(&[0.0, 3.0, 0.0, 0.0, 5.0, 0.0], 1e-4).unwrap();
        assert_eq!(params.priors(), vec![1.0, 0.0]);
        let (_, g) = params.log_prob_with_grad(0.2);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert_eq!(g[5], 0.0);
    }

    #[test]
    fn from_raw_rejects_bad_length() {
        assert!(GmmParams::from_raw(&[0.0; 4], 1e-4).is_err());
    }
}
