//! Exact Gaussian-process beliefs over a finite set of points.
//!
//! The model tracks the posterior mean vector and the full posterior
//! covariance matrix over its domain. Each observation `(i, y)` with noise
//! variance `σ²` conditions the belief in closed form:
//!
//! ```text
//! μ ← μ + Σ[:, i] (y − μ_i) / (Σ_ii + σ²)
//! Σ ← Σ − Σ[:, i] Σ[i, :] / (Σ_ii + σ²)
//! ```
//!
//! which is the same posterior as `k_tᵀ (K_t + σ²I)⁻¹ y_t` evaluated from
//! scratch, at `O(N²)` cost per observation instead of a refactorization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal jitter used in place of a zero noise variance.
pub const NOISELESS_JITTER: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("kernel lengthscale must be positive and finite, got {0}")]
    BadLengthscale(f64),
    #[error("kernel prior variance must be positive and finite, got {0}")]
    BadVariance(f64),
    #[error("noise variance must be nonnegative and finite, got {0}")]
    BadNoise(f64),
    #[error("observation value must be finite, got {0}")]
    NonFiniteObservation(f64),
    #[error("state index {index} outside a domain of {len} points")]
    OutOfDomain { index: usize, len: usize },
    #[error("ill-conditioned model: predictive variance {0:e} at an observed point")]
    IllConditioned(f64),
    #[error("confidence schedule: {0}")]
    Schedule(String),
    #[error("information gain needs a positive noise variance")]
    ZeroNoiseInfoGain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern52,
}

/// A stationary covariance function on physical positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub variance: f64,
}

impl Kernel {
    pub fn new(family: KernelFamily, lengthscale: f64, variance: f64) -> Result<Self, GpError> {
        let k = Kernel {
            family,
            lengthscale,
            variance,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(GpError::BadLengthscale(self.lengthscale));
        }
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(GpError::BadVariance(self.variance));
        }
        Ok(())
    }

    /// Covariance as a function of distance.
    pub fn at_distance(&self, d: f64) -> f64 {
        let r = d / self.lengthscale;
        match self.family {
            KernelFamily::Rbf => self.variance * (-0.5 * r * r).exp(),
            KernelFamily::Matern52 => {
                let s5 = 5f64.sqrt() * r;
                self.variance * (1.0 + s5 + 5.0 * r * r / 3.0) * (-s5).exp()
            }
        }
    }

    pub fn eval(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        self.at_distance((dx * dx + dy * dy).sqrt())
    }
}

/// GP posterior over a fixed finite domain of points.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: Kernel,
    noise_variance: f64,
    points: Vec<[f64; 2]>,
    observations: Vec<(usize, f64)>,
    mean: Vec<f64>,
    /// Row-major `N × N` posterior covariance.
    cov: Vec<f64>,
}

impl GpModel {
    pub fn new(kernel: Kernel, noise_variance: f64, points: Vec<[f64; 2]>) -> Result<Self, GpError> {
        kernel.validate()?;
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(GpError::BadNoise(noise_variance));
        }
        let n = points.len();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = kernel.variance;
            for j in (i + 1)..n {
                let k = kernel.eval(points[i], points[j]);
                cov[i * n + j] = k;
                cov[j * n + i] = k;
            }
        }
        Ok(GpModel {
            kernel,
            noise_variance,
            points,
            observations: Vec::new(),
            mean: vec![0.0; n],
            cov,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Noise variance actually placed on the diagonal.
    pub fn effective_noise(&self) -> f64 {
        self.noise_variance.max(NOISELESS_JITTER)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The observation archive, in arrival order. Repeats are kept.
    pub fn observations(&self) -> &[(usize, f64)] {
        &self.observations
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    fn check_index(&self, index: usize) -> Result<(), GpError> {
        if index < self.points.len() {
            Ok(())
        } else {
            Err(GpError::OutOfDomain {
                index,
                len: self.points.len(),
            })
        }
    }

    pub fn add_observation(&mut self, index: usize, y: f64) -> Result<(), GpError> {
        if !y.is_finite() {
            return Err(GpError::NonFiniteObservation(y));
        }
        self.check_index(index)?;
        self.condition(index, y)?;
        self.observations.push((index, y));
        Ok(())
    }

    fn condition(&mut self, index: usize, y: f64) -> Result<(), GpError> {
        let n = self.points.len();
        let denom = self.cov[index * n + index].max(0.0) + self.effective_noise();
        if !(denom.is_finite() && denom > 0.0) {
            return Err(GpError::IllConditioned(denom));
        }
        let col: Vec<f64> = (0..n).map(|k| self.cov[k * n + index]).collect();
        let inv = 1.0 / denom;
        let gain = (y - self.mean[index]) * inv;
        for (m, c) in self.mean.iter_mut().zip(&col) {
            *m += c * gain;
        }
        for (r, row) in self.cov.chunks_exact_mut(n).enumerate() {
            let scale = col[r] * inv;
            if scale == 0.0 {
                continue;
            }
            for (v, c) in row.iter_mut().zip(&col) {
                *v -= scale * c;
            }
        }
        Ok(())
    }

    pub fn mean(&self, index: usize) -> f64 {
        self.mean[index]
    }

    pub fn variance(&self, index: usize) -> f64 {
        let n = self.points.len();
        self.cov[index * n + index].max(0.0)
    }

    pub fn std(&self, index: usize) -> f64 {
        self.variance(index).sqrt()
    }

    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        self.cov[a * self.points.len() + b]
    }

    /// Posterior `(mean, std)` at the requested domain indices.
    pub fn posterior(&self, indices: &[usize]) -> Result<Vec<(f64, f64)>, GpError> {
        indices
            .iter()
            .map(|&i| {
                self.check_index(i)?;
                Ok((self.mean(i), self.std(i)))
            })
            .collect()
    }

    /// Posterior `(mean, std)` over the whole domain.
    pub fn beliefs(&self) -> Beliefs {
        let n = self.points.len();
        Beliefs {
            mean: self.mean.clone(),
            std: (0..n).map(|i| self.std(i)).collect(),
        }
    }
}

/// Per-state posterior mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beliefs {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Beliefs {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Beliefs {
            mean: pairs.iter().map(|p| p.0).collect(),
            std: pairs.iter().map(|p| p.1).collect(),
        }
    }
}

/// Confidence-scaling schedule for `β_t` (safety) or `α_t` (reward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConfidenceSchedule {
    Fixed {
        value: f64,
    },
    /// `B + σ √(2 (Γ_{t−1} + 1 + ln(1/Δ)))`.
    Theoretical {
        rkhs_bound: f64,
        noise_scale: f64,
        failure_probability: f64,
    },
}

impl ConfidenceSchedule {
    pub fn validate(&self) -> Result<(), GpError> {
        match *self {
            ConfidenceSchedule::Fixed { value } => {
                if !(value.is_finite() && value > 0.0) {
                    return Err(GpError::Schedule(format!("fixed value must be positive, got {value}")));
                }
            }
            ConfidenceSchedule::Theoretical {
                rkhs_bound,
                noise_scale,
                failure_probability,
            } => {
                if !(rkhs_bound.is_finite() && rkhs_bound > 0.0) {
                    return Err(GpError::Schedule(format!("RKHS bound must be positive, got {rkhs_bound}")));
                }
                if !(noise_scale.is_finite() && noise_scale > 0.0) {
                    return Err(GpError::Schedule(format!("noise scale must be positive, got {noise_scale}")));
                }
                if !(failure_probability > 0.0 && failure_probability < 1.0) {
                    return Err(GpError::Schedule(format!(
                        "failure probability must lie in (0, 1), got {failure_probability}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_theoretical(&self) -> bool {
        matches!(self, ConfidenceSchedule::Theoretical { .. })
    }

    /// The schedule value at step `t >= 1` given `Γ_{t−1}`.
    pub fn confidence_scale(&self, t: usize, info_gain_prev: f64) -> Result<f64, GpError> {
        self.validate()?;
        if t == 0 {
            return Err(GpError::Schedule("t must be at least 1".into()));
        }
        Ok(match *self {
            ConfidenceSchedule::Fixed { value } => value,
            ConfidenceSchedule::Theoretical {
                rkhs_bound,
                noise_scale,
                failure_probability,
            } => {
                rkhs_bound
                    + noise_scale * (2.0 * (info_gain_prev + 1.0 + (1.0 / failure_probability).ln())).sqrt()
            }
        })
    }

    /// The factor that multiplies a posterior standard deviation.
    ///
    /// Theoretical schedules produce `β_t`, so the multiplier is `√β_t`.
    /// Fixed values are taken as the multiplier itself unless
    /// `scale_is_squared` is set, in which case they are square-rooted too.
    pub fn multiplier(&self, t: usize, info_gain_prev: f64, scale_is_squared: bool) -> Result<f64, GpError> {
        let v = self.confidence_scale(t, info_gain_prev)?;
        Ok(match self {
            ConfidenceSchedule::Fixed { .. } if !scale_is_squared => v,
            _ => v.sqrt(),
        })
    }
}

fn greedy_pick(model: &GpModel, candidates: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        let v = model.variance(c);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((c, v));
        }
    }
    best
}

/// Greedy estimate of the information gain `Γ` from `budget` noisy
/// observations drawn (with replacement) from `candidates`.
///
/// Each round picks the candidate with the largest posterior variance and
/// accumulates `½ ln(1 + σ²_t(s)/σ²)`.
pub fn info_gain_estimate(model: &GpModel, candidates: &[usize], budget: usize) -> Result<f64, GpError> {
    let mut seq = GreedyInfoGain::new(model.clone(), candidates.to_vec())?;
    Ok(seq.gamma(budget))
}

/// Incrementally extended greedy `Γ_0, Γ_1, …` sequence.
#[derive(Debug, Clone)]
pub struct GreedyInfoGain {
    model: GpModel,
    candidates: Vec<usize>,
    prefix: Vec<f64>,
}

impl GreedyInfoGain {
    pub fn new(model: GpModel, candidates: Vec<usize>) -> Result<Self, GpError> {
        if model.noise_variance() <= 0.0 {
            return Err(GpError::ZeroNoiseInfoGain);
        }
        for &c in &candidates {
            model.check_index(c)?;
        }
        Ok(GreedyInfoGain {
            model,
            candidates,
            prefix: vec![0.0],
        })
    }

    /// `Γ_budget`, extending the greedy sequence as needed.
    pub fn gamma(&mut self, budget: usize) -> f64 {
        if self.candidates.is_empty() {
            return 0.0;
        }
        while self.prefix.len() <= budget {
            let (s, var) = greedy_pick(&self.model, &self.candidates).expect("nonempty candidates");
            let noise = self.model.noise_variance();
            let gain = 0.5 * (1.0 + var / noise).ln();
            let mean = self.model.mean(s);
            self.model
                .condition(s, mean)
                .expect("positive noise keeps the update well posed");
            let last = *self.prefix.last().unwrap();
            self.prefix.push(last + gain);
        }
        self.prefix[budget]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rbf(ell: f64, v: f64) -> Kernel {
        Kernel::new(KernelFamily::Rbf, ell, v).unwrap()
    }

    fn line(n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| [i as f64, 0.0]).collect()
    }

    #[test]
    fn kernel_values() {
        let k = rbf(2.0, 1.0);
        assert_eq!(k.eval([1.0, 1.0], [1.0, 1.0]), 1.0);
        assert!((k.at_distance(2.0) - 0.606_530_659_712_633_4).abs() < 1e-12);

        let m = Kernel::new(KernelFamily::Matern52, 15.0, 100.0).unwrap();
        assert_eq!(m.at_distance(0.0), 100.0);
        let expected = 100.0 * (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        assert!((m.at_distance(15.0) - expected).abs() < 1e-12);
        assert!((m.at_distance(15.0) - 52.399).abs() < 5e-4);
    }

    #[test]
    fn kernel_rejects_bad_parameters() {
        assert!(Kernel::new(KernelFamily::Rbf, 0.0, 1.0).is_err());
        assert!(Kernel::new(KernelFamily::Rbf, 1.0, -1.0).is_err());
        assert!(GpModel::new(rbf(1.0, 1.0), -1e-3, line(2)).is_err());
    }

    #[test]
    fn prior_recovery() {
        let gp = GpModel::new(rbf(2.0, 4.0), 0.1, line(5)).unwrap();
        for (m, s) in gp.posterior(&[0, 2, 4]).unwrap() {
            assert_eq!(m, 0.0);
            assert_eq!(s, 2.0);
        }
    }

    #[test]
    fn noiseless_interpolation() {
        let mut gp = GpModel::new(rbf(2.0, 1.0), 0.0, line(4)).unwrap();
        gp.add_observation(1, 3.0).unwrap();
        assert_eq!(gp.num_observations(), 1);
        let (m, s) = gp.posterior(&[1]).unwrap()[0];
        assert!((m - 3.0).abs() < 1e-6);
        assert!(s < 1e-4);
        // exact duplicate with zero noise stays well posed
        gp.add_observation(1, 3.0).unwrap();
        let (m, _) = gp.posterior(&[1]).unwrap()[0];
        assert!((m - 3.0).abs() < 1e-6);
    }

    #[test]
    fn duplicate_observations_shrink_variance() {
        let mut gp = GpModel::new(rbf(1.0, 1.0), 0.5, line(3)).unwrap();
        gp.add_observation(0, 1.0).unwrap();
        let once = gp.variance(0);
        // closed form for one observation: v - v²/(v + σ²)
        assert!((once - (1.0 - 1.0 / 1.5)).abs() < 1e-12);
        gp.add_observation(0, 1.2).unwrap();
        let twice = gp.variance(0);
        // two observations at one point act like one with noise σ²/2
        assert!((twice - (1.0 - 1.0 / 1.25)).abs() < 1e-12);
        assert!(twice < once);
    }

    #[test]
    fn rejects_bad_observations() {
        let mut gp = GpModel::new(rbf(1.0, 1.0), 0.5, line(3)).unwrap();
        assert!(matches!(gp.add_observation(0, f64::NAN), Err(GpError::NonFiniteObservation(_))));
        assert!(matches!(gp.add_observation(0, f64::INFINITY), Err(GpError::NonFiniteObservation(_))));
        assert!(matches!(gp.add_observation(7, 1.0), Err(GpError::OutOfDomain { index: 7, len: 3 })));
        assert_eq!(gp.num_observations(), 0);
    }

    #[test]
    fn schedule_values() {
        let fixed = ConfidenceSchedule::Fixed { value: 2.0 };
        for t in [1, 5, 1000] {
            assert_eq!(fixed.confidence_scale(t, 0.0).unwrap(), 2.0);
        }
        assert_eq!(fixed.multiplier(3, 0.0, false).unwrap(), 2.0);
        assert!((fixed.multiplier(3, 0.0, true).unwrap() - 2f64.sqrt()).abs() < 1e-15);

        let theo = ConfidenceSchedule::Theoretical {
            rkhs_bound: 1.0,
            noise_scale: 1.0,
            failure_probability: (-1.0f64).exp(),
        };
        assert!((theo.confidence_scale(1, 0.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((theo.multiplier(1, 0.0, false).unwrap() - 3f64.sqrt()).abs() < 1e-12);

        let mut last = 0.0;
        for (t, gamma) in [0.0, 0.5, 0.5, 2.0, 7.0].into_iter().enumerate() {
            let v = theo.confidence_scale(t + 1, gamma).unwrap();
            assert!(v >= last);
            last = v;
        }

        let bad = ConfidenceSchedule::Theoretical {
            rkhs_bound: 1.0,
            noise_scale: 1.0,
            failure_probability: 1.0,
        };
        assert!(bad.confidence_scale(1, 0.0).is_err());
        assert!(fixed.confidence_scale(0, 0.0).is_err());
    }

    #[test]
    fn info_gain_small_cases() {
        let gp = GpModel::new(rbf(1.0, 2.0), 0.5, line(3)).unwrap();
        assert_eq!(info_gain_estimate(&gp, &[], 4).unwrap(), 0.0);
        let one = info_gain_estimate(&gp, &[1], 1).unwrap();
        assert!((one - 0.5 * (1.0f64 + 2.0 / 0.5).ln()).abs() < 1e-12);
        let noiseless = GpModel::new(rbf(1.0, 2.0), 0.0, line(3)).unwrap();
        assert_eq!(info_gain_estimate(&noiseless, &[0], 1), Err(GpError::ZeroNoiseInfoGain));
    }
}
