//! Density estimators for the uncertainty distribution.
//!
//! Only `∫ f(u)² du` over an interval is needed downstream, so both
//! estimators expose that directly.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const MIN_BANDWIDTH: f64 = 1e-3;
const BINS_PER_BANDWIDTH: f64 = 8.0;
const KERNEL_CUTOFF: f64 = 6.0;

/// Binned Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct GaussianKde {
    bandwidth: f64,
    origin: f64,
    bin_width: f64,
    /// Linear-binned sample weights, each already divided by `n`.
    weights: Vec<f64>,
}

impl GaussianKde {
    /// Silverman's rule of thumb: `0.9 · min(σ, IQR/1.34) · n^{-1/5}`.
    pub fn silverman(samples: &[f64]) -> Result<Self> {
        let bandwidth = silverman_bandwidth(samples)?;
        Self::with_bandwidth(samples, bandwidth)
    }

    pub fn with_bandwidth(samples: &[f64], bandwidth: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no samples".into()));
        }
        if samples.iter().any(|u| !u.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!("bandwidth {bandwidth} must be positive")));
        }
        let (min, max) = min_max(samples);
        let bin_width = bandwidth / BINS_PER_BANDWIDTH;
        let n_bins = ((max - min) / bin_width).floor() as usize + 2;
        let mut weights = vec![0.0; n_bins];
        let share = 1.0 / samples.len() as f64;
        for &u in samples {
            let pos = (u - min) / bin_width;
            let i = (pos.floor() as usize).min(n_bins - 2);
            let frac = pos - i as f64;
            weights[i] += share * (1.0 - frac);
            weights[i + 1] += share * frac;
        }
        Ok(GaussianKde {
            bandwidth,
            origin: min,
            bin_width,
            weights,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, u: f64) -> f64 {
        let h = self.bandwidth;
        let reach = (KERNEL_CUTOFF * BINS_PER_BANDWIDTH).ceil() as isize;
        let centre = ((u - self.origin) / self.bin_width).round() as isize;
        let lo = (centre - reach).max(0);
        let hi = (centre + reach).min(self.weights.len() as isize - 1);
        if lo > hi {
            return 0.0;
        }
        let norm = 1.0 / (h * (2.0 * PI).sqrt());
        (lo..=hi)
            .map(|i| {
                let x = self.origin + i as f64 * self.bin_width;
                let t = (u - x) / h;
                self.weights[i as usize] * (-0.5 * t * t).exp()
            })
            .sum::<f64>()
            * norm
    }

    /// Composite Simpson estimate of `∫_lo^hi f̂(u)² du`.
    pub fn squared_integral(&self, lo: f64, hi: f64) -> f64 {
        let margin = KERNEL_CUTOFF * self.bandwidth;
        let support_hi = self.origin + (self.weights.len() - 1) as f64 * self.bin_width;
        let a = lo.max(self.origin - margin);
        let b = hi.min(support_hi + margin);
        if !(b > a) {
            return 0.0;
        }
        let step_target = self.bandwidth / 4.0;
        let mut n = ((b - a) / step_target).ceil() as usize;
        n = n.max(2);
        if n % 2 == 1 {
            n += 1;
        }
        let step = (b - a) / n as f64;
        let f2 = |u: f64| self.density(u).powi(2);
        let mut acc = f2(a) + f2(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f2(a + i as f64 * step);
        }
        acc * step / 3.0
    }
}

pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = if samples.len() > 1 {
        (samples.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok((0.9 * spread * n.powf(-0.2)).max(MIN_BANDWIDTH))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

fn min_max(samples: &[f64]) -> (f64, f64) {
    samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| (lo.min(u), hi.max(u)))
}

/// Piecewise-constant density over the `m + 1` uncertainty levels `j/m`.
#[derive(Debug, Clone)]
pub struct DiscretePmf {
    m: u32,
    pmf: Vec<f64>,
}

impl DiscretePmf {
    pub fn new(samples: &[f64], m: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no samples".into()));
        }
        if m == 0 {
            return Err(Error::InvalidParameter("resolution m must be ≥ 1".into()));
        }
        let mut pmf = vec![0.0; m as usize + 1];
        let share = 1.0 / samples.len() as f64;
        for &u in samples {
            if !u.is_finite() {
                return Err(Error::InvalidInput("non-finite sample".into()));
            }
            let j = (u * m as f64).round().clamp(0.0, m as f64) as usize;
            pmf[j] += share;
        }
        Ok(DiscretePmf { m, pmf })
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Exact `∫_lo^hi f²` for the histogram density of height `m · pmf_j`.
    pub fn squared_integral(&self, lo: f64, hi: f64) -> f64 {
        if !(hi > lo) {
            return 0.0;
        }
        let m = self.m as f64;
        let half = 0.5 / m;
        self.pmf
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let c = j as f64 / m;
                let overlap = (hi.min(c + half) - lo.max(c - half)).max(0.0);
                (p * m).powi(2) * overlap
            })
            .sum()
    }
}
