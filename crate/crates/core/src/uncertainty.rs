//! Temperature-perturbation uncertainty and the uncertainty → rejection model.
//!
//! The device re-samples its own logits at `M` random temperatures and counts
//! how often the resample disagrees with the draft. That disagreement rate is
//! regressed linearly onto the server's rejection probability, which yields
//! the skip thresholds and the rejection-risk bound below.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{LogitVec, TokenId, MIN_TEMPERATURE};
use crate::error::{Error, Result};
use crate::kde::{DiscretePmf, GaussianKde};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Number of perturbed temperatures per round.
    #[serde(default = "default_m")]
    pub m: u32,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
}

fn default_m() -> u32 {
    20
}

fn default_theta_max() -> f64 {
    2.0
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            m: default_m(),
            theta_max: default_theta_max(),
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParameter("perturbation count M must be ≥ 1".into()));
        }
        if !(self.theta_max > 0.0) || !self.theta_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "theta_max = {} must be positive",
                self.theta_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertaintySample {
    pub disagreements: u32,
    pub m: u32,
}

impl UncertaintySample {
    pub fn u(&self) -> f64 {
        self.disagreements as f64 / self.m as f64
    }
}

/// Estimates the draft's uncertainty from `M` temperature-perturbed resamples.
pub fn estimate_u<R: Rng + ?Sized>(
    z: &LogitVec,
    d: TokenId,
    cfg: &UncertaintyConfig,
    rng: &mut R,
) -> Result<UncertaintySample> {
    cfg.validate()?;
    if d.index() >= z.len() {
        return Err(Error::InvalidInput(format!(
            "draft {d} outside vocabulary of size {}",
            z.len()
        )));
    }
    let mut scratch = vec![0.0; z.len()];
    let max = z.max();
    let mut disagreements = 0;
    for _ in 0..cfg.m {
        let theta = draw_temperature(cfg.theta_max, rng);
        let resampled = sample_tempered(z.as_slice(), max, theta, rng.random(), &mut scratch);
        if resampled != d {
            disagreements += 1;
        }
    }
    Ok(UncertaintySample {
        disagreements,
        m: cfg.m,
    })
}

/// Uniform on `(0, θ_max]`, floored at the minimum softmax temperature.
fn draw_temperature<R: Rng + ?Sized>(theta_max: f64, rng: &mut R) -> f64 {
    ((1.0 - rng.random::<f64>()) * theta_max).max(MIN_TEMPERATURE)
}

/// Inverse-CDF draw from `softmax(z / θ)` without materializing a `ProbVec`.
fn sample_tempered(z: &[f64], max: f64, theta: f64, uniform: f64, scratch: &mut [f64]) -> TokenId {
    let inv = 1.0 / theta;
    let mut total = 0.0;
    for (w, &v) in scratch.iter_mut().zip(z) {
        *w = ((v - max) * inv).exp();
        total += *w;
    }
    let target = uniform * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &w) in scratch.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last = i;
            if target < cum {
                return TokenId::from(i);
            }
        }
    }
    TokenId::from(last)
}

/// `β̂ = a·u + b`, fitted by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearRejectionModel {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub mse: f64,
    #[serde(default)]
    pub r2: f64,
}

impl LinearRejectionModel {
    pub fn new(a: f64, b: f64) -> Self {
        LinearRejectionModel {
            a,
            b,
            mse: 0.0,
            r2: 1.0,
        }
    }

    /// Uncertainty below which the predicted rejection probability is zero.
    pub fn zero_crossing(&self) -> f64 {
        -self.b / self.a
    }
}

pub fn fit_linear(pairs: &[(f64, f64)]) -> Result<LinearRejectionModel> {
    if pairs.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {}", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mean_u = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_b = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(u, beta) in pairs {
        let du = u - mean_u;
        let db = beta - mean_b;
        sxx += du * du;
        sxy += du * db;
        syy += db * db;
    }
    if sxx <= f64::EPSILON * n * mean_u.abs().max(1.0).powi(2) {
        return Err(Error::Fit("all uncertainty values are equal".into()));
    }
    let a = sxy / sxx;
    let b = mean_b - a * mean_u;
    let ss_res: f64 = pairs.iter().map(|&(u, beta)| (beta - (a * u + b)).powi(2)).sum();
    let r2 = if syy > 0.0 {
        1.0 - ss_res / syy
    } else {
        // Constant response, fitted exactly by the flat line.
        1.0
    };
    Ok(LinearRejectionModel {
        a,
        b,
        mse: ss_res / n,
        r2,
    })
}

pub fn predict_beta(m: &LinearRejectionModel, u: f64) -> f64 {
    (m.a * u + m.b).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    /// `−b/a`: only deterministically accepted drafts are skipped.
    pub risk_averse: f64,
    /// `(Δ − b)/a`.
    pub risk_prone: f64,
}

pub fn thresholds(m: &LinearRejectionModel, delta: f64) -> Result<ThresholdPair> {
    if !(m.a > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "slope a = {} must be positive to invert the rejection model",
            m.a
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidParameter(format!("Δ = {delta} outside [0, 1]")));
    }
    Ok(ThresholdPair {
        risk_averse: -m.b / m.a,
        risk_prone: (delta - m.b) / m.a,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskEstimator {
    /// Histogram with cells of width `1/m` centred on the levels `j/m`.
    DiscretePmf { m: u32 },
    /// Gaussian KDE with Silverman's bandwidth.
    GaussianKde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdfEstimator {
    DiscretePmf { m: u32 },
    GaussianKde { bandwidth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub empirical_r: f64,
    pub bound: f64,
    /// `a·u_th + b`, the Δ implied by the threshold.
    pub delta: f64,
    pub pdf_estimator: PdfEstimator,
}

/// Rejection risk of skipping every draft with `u ≤ u_th`, and its
/// Cauchy–Schwarz bound `Δ^{3/2} / √(3a) · √(∫ f²)` over `(−b/a, u_th]`.
pub fn rejection_risk(
    m: &LinearRejectionModel,
    u_values: &[f64],
    u_th: f64,
    estimator: RiskEstimator,
) -> Result<RiskReport> {
    if u_values.is_empty() {
        return Err(Error::InvalidInput("no uncertainty samples".into()));
    }
    if !(m.a > 0.0) {
        return Err(Error::InvalidParameter(format!("slope a = {} must be positive", m.a)));
    }
    let lo = m.zero_crossing();
    let n = u_values.len() as f64;
    let empirical_r = u_values
        .iter()
        .filter(|&&u| u > lo && u <= u_th)
        .map(|&u| predict_beta(m, u))
        .sum::<f64>()
        / n;

    let delta = (m.a * u_th + m.b).max(0.0);
    let (sq_integral, pdf_estimator) = match estimator {
        RiskEstimator::DiscretePmf { m: levels } => {
            let pmf = DiscretePmf::new(u_values, levels)?;
            (pmf.squared_integral(lo, u_th), PdfEstimator::DiscretePmf { m: levels })
        }
        RiskEstimator::GaussianKde => {
            let kde = GaussianKde::silverman(u_values)?;
            (
                kde.squared_integral(lo, u_th),
                PdfEstimator::GaussianKde {
                    bandwidth: kde.bandwidth(),
                },
            )
        }
    };
    let bound = if delta > 0.0 {
        delta.powf(1.5) / (3.0 * m.a).sqrt() * sq_integral.sqrt()
    } else {
        0.0
    };
    Ok(RiskReport {
        empirical_r,
        bound,
        delta,
        pdf_estimator,
    })
}

pub fn rejection_risk_samples(
    m: &LinearRejectionModel,
    samples: &[UncertaintySample],
    u_th: f64,
    estimator: RiskEstimator,
) -> Result<RiskReport> {
    let u: Vec<f64> = samples.iter().map(UncertaintySample::u).collect();
    rejection_risk(m, &u, u_th, estimator)
}

/// Fraction of `(x_d, y_d)` pairs that are not deterministically accepted.
pub fn estimate_delta(calib: &[(f64, f64)]) -> Result<f64> {
    if calib.is_empty() {
        return Err(Error::InvalidInput("empty calibration set".into()));
    }
    let hits = calib.iter().filter(|(x_d, y_d)| y_d < x_d).count();
    Ok(hits as f64 / calib.len() as f64)
}
