//! Single-token speculative verification.
//!
//! The device drafts `d ~ x`; the server accepts it outright when
//! `y_d ≥ x_d`, otherwise with probability `y_d / x_d`, and on rejection
//! draws a replacement from a resampling law. With the exact law
//! `p ∝ (y − x)^+` the output token is distributed exactly as `y`; with the
//! compressed-vocabulary law `q ∝ (y − x̂)^+` it is not, and
//! [`round_bias`] measures by how much.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{check_same_len, sample, ProbVec, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Accepted { token: TokenId },
    Rejected { resampled: TokenId },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    /// `min(1, y_d / x_d)`.
    pub accept_prob_used: f64,
}

impl Verdict {
    pub fn token(&self) -> TokenId {
        match self.outcome {
            Outcome::Accepted { token } => token,
            Outcome::Rejected { resampled } => resampled,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self.outcome, Outcome::Accepted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiasValue(pub f64);

/// A resampling law, flagged when it had to fall back to the target law.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampling {
    pub dist: ProbVec,
    pub fallback: bool,
}

/// `(1 − y_d / x_d)^+`.
pub fn rejection_prob(x_d: f64, y_d: f64) -> Result<f64> {
    if !(x_d > 0.0) || !x_d.is_finite() {
        return Err(Error::InvalidInput(format!(
            "draft probability x_d = {x_d} must be positive"
        )));
    }
    if !(y_d >= 0.0) || !y_d.is_finite() {
        return Err(Error::InvalidInput(format!(
            "target probability y_d = {y_d} must be non-negative"
        )));
    }
    Ok((1.0 - y_d / x_d).max(0.0))
}

#[inline]
fn beta_or_zero(x_v: f64, y_v: f64) -> f64 {
    if x_v > 0.0 {
        (1.0 - y_v / x_v).max(0.0)
    } else {
        0.0
    }
}

/// Verifies draft `d` against the server law `y`, using `x` as the device law
/// seen by the server (exact, or reconstructed from the uplink payload).
pub fn verify<R: Rng + ?Sized>(
    d: TokenId,
    x: &ProbVec,
    y: &ProbVec,
    resample_from: &ProbVec,
    rng: &mut R,
) -> Result<Verdict> {
    x.check_token(d)?;
    y.check_token(d)?;
    verify_draft(d, x.get(d), y.get(d), resample_from, rng)
}

pub fn verify_draft<R: Rng + ?Sized>(
    d: TokenId,
    x_d: f64,
    y_d: f64,
    resample_from: &ProbVec,
    rng: &mut R,
) -> Result<Verdict> {
    let beta = rejection_prob(x_d, y_d)?;
    let accept_prob_used = 1.0 - beta;
    if beta == 0.0 {
        return Ok(Verdict {
            outcome: Outcome::Accepted { token: d },
            accept_prob_used,
        });
    }
    let draw: f64 = rng.random();
    let outcome = if draw < accept_prob_used {
        Outcome::Accepted { token: d }
    } else {
        Outcome::Rejected {
            resampled: sample(resample_from, rng),
        }
    };
    Ok(Verdict {
        outcome,
        accept_prob_used,
    })
}

/// Exact resampling law `p_v = (y_v − x_v)^+ / Σ (y_i − x_i)^+`.
pub fn resample_dist(x: &ProbVec, y: &ProbVec) -> Result<ProbVec> {
    check_same_len(x, y)?;
    positive_part_law(x, y).ok_or_else(|| {
        Error::ZeroDenominator("target law never exceeds device law; no resampling possible".into())
    })
}

/// Resampling law against a reconstructed device law. Falls back to `y`
/// when `x̂ ≥ y` everywhere.
pub fn distorted_resample_dist(x_hat: &ProbVec, y: &ProbVec) -> Result<Resampling> {
    check_same_len(x_hat, y)?;
    Ok(match positive_part_law(x_hat, y) {
        Some(dist) => Resampling {
            dist,
            fallback: false,
        },
        None => Resampling {
            dist: y.clone(),
            fallback: true,
        },
    })
}

fn positive_part_law(x: &ProbVec, y: &ProbVec) -> Option<ProbVec> {
    let w: Vec<f64> = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (b - a).max(0.0))
        .collect();
    ProbVec::from_weights(w).ok()
}

/// Per-token output law of one verification round when rejections resample
/// from `q`: `x_v (1 − β_v) + (Σ_i x_i β_i) q_v`.
pub fn hybrid_output_dist(x: &ProbVec, y: &ProbVec, q: &ProbVec) -> Result<ProbVec> {
    check_same_len(x, y)?;
    check_same_len(x, q)?;
    let mass = rejection_mass(x, y);
    let out = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .zip(q.as_slice())
        .map(|((&xv, &yv), &qv)| xv * (1.0 - beta_or_zero(xv, yv)) + mass * qv)
        .collect();
    ProbVec::new(out)
}

/// `Σ_i x_i β_i`, the probability that a round ends in resampling.
pub fn rejection_mass(x: &ProbVec, y: &ProbVec) -> f64 {
    x.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&xv, &yv)| xv * beta_or_zero(xv, yv))
        .sum()
}

/// ℓ1 gap between the hybrid output law under `q` and the target law `y`.
pub fn round_bias(x: &ProbVec, y: &ProbVec, q: &ProbVec) -> Result<BiasValue> {
    check_same_len(x, y)?;
    check_same_len(x, q)?;
    let mass = rejection_mass(x, y);
    let total = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .zip(q.as_slice())
        .map(|((&xv, &yv), &qv)| (xv * (1.0 - beta_or_zero(xv, yv)) + mass * qv - yv).abs())
        .sum();
    Ok(BiasValue(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::tvd;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Repeats one 64-bit word forever.
    struct Constant(u64);

    impl RngCore for Constant {
        fn next_u32(&mut self) -> u32 {
            (self.0 >> 32) as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            for (i, b) in dst.iter_mut().enumerate() {
                *b = self.0.to_le_bytes()[i % 8];
            }
        }
    }

    fn pv(v: &[f64]) -> ProbVec {
        ProbVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejection_prob_examples() {
        assert_eq!(rejection_prob(0.3, 0.5).unwrap(), 0.0);
        assert!((rejection_prob(0.8, 0.4).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(rejection_prob(0.5, 0.0).unwrap(), 1.0);
        assert!(matches!(rejection_prob(0.0, 0.1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn deterministic_acceptance() {
        let x = pv(&[0.3, 0.7]);
        let y = pv(&[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = verify(TokenId(0), &x, &y, &y, &mut rng).unwrap();
            assert_eq!(v.outcome, Outcome::Accepted { token: TokenId(0) });
            assert_eq!(v.accept_prob_used, 1.0);
        }
    }

    #[test]
    fn identical_laws_always_accept() {
        let x = pv(&[0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 0..4 {
            let v = verify(TokenId(d), &x, &x, &x, &mut rng).unwrap();
            assert!(v.is_accepted());
            assert_eq!(v.accept_prob_used, 1.0);
        }
    }

    #[test]
    fn rejection_on_large_draw() {
        let x = pv(&[0.8, 0.2]);
        let y = pv(&[0.4, 0.6]);
        let p = resample_dist(&x, &y).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 1.0]);
        // Every f64 draw is 0.7.
        let bits = (0.7f64 * (1u64 << 53) as f64) as u64;
        let mut rng = Constant(bits << 11);
        let v = verify(TokenId(0), &x, &y, &p, &mut rng).unwrap();
        assert!((v.accept_prob_used - 0.5).abs() < 1e-15);
        assert_eq!(v.outcome, Outcome::Rejected { resampled: TokenId(1) });
    }

    #[test]
    fn resample_examples() {
        let p = resample_dist(&pv(&[0.6, 0.4]), &pv(&[0.2, 0.8])).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 1.0]);

        let p = resample_dist(&pv(&[0.5, 0.3, 0.2]), &pv(&[0.1, 0.5, 0.4])).unwrap();
        for (a, b) in p.as_slice().iter().zip([0.0, 0.5, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }

        let x = pv(&[0.25, 0.75]);
        assert!(matches!(resample_dist(&x, &x), Err(Error::ZeroDenominator(_))));
    }

    #[test]
    fn distorted_resample_examples() {
        let x = pv(&[0.5, 0.3, 0.2]);
        let y = pv(&[0.1, 0.5, 0.4]);
        let r = distorted_resample_dist(&x, &y).unwrap();
        assert!(!r.fallback);
        assert_eq!(r.dist, resample_dist(&x, &y).unwrap());

        let x_hat = pv(&[0.6, 0.2, 0.2]);
        let y = pv(&[0.2, 0.5, 0.3]);
        let q = distorted_resample_dist(&x_hat, &y).unwrap();
        for (a, b) in q.dist.as_slice().iter().zip([0.0, 0.75, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }

        let y = pv(&[0.2, 0.4, 0.4]);
        let x_hat = y.clone();
        let q = distorted_resample_dist(&x_hat, &y).unwrap();
        assert!(q.fallback);
        assert_eq!(q.dist, y);
    }

    #[test]
    fn exact_resampling_is_unbiased() {
        let x = pv(&[0.5, 0.3, 0.2]);
        let y = pv(&[0.1, 0.5, 0.4]);
        let p = resample_dist(&x, &y).unwrap();
        assert!(round_bias(&x, &y, &p).unwrap().0 < 1e-12);
        let h = hybrid_output_dist(&x, &y, &p).unwrap();
        assert!(tvd(&h, &y).unwrap() < 1e-12);
    }

    #[test]
    fn zero_rejection_mass_has_zero_bias() {
        let x = pv(&[0.2, 0.3, 0.5]);
        let q = pv(&[0.9, 0.05, 0.05]);
        assert_eq!(round_bias(&x, &x, &q).unwrap().0, 0.0);
    }

    #[test]
    fn degenerate_one_hot_hybrid() {
        let x = ProbVec::one_hot(3, TokenId(2)).unwrap();
        let h = hybrid_output_dist(&x, &x, &pv(&[0.3, 0.3, 0.4])).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn distorted_bias_matches_rescaled_tvd() {
        let x = pv(&[0.6, 0.3, 0.1]);
        let y = pv(&[0.2, 0.5, 0.3]);
        let x_hat = pv(&[0.6, 0.2, 0.2]);
        let p = resample_dist(&x, &y).unwrap();
        let q = distorted_resample_dist(&x_hat, &y).unwrap().dist;
        // p = [0, 0.5, 0.5], q = [0, 0.75, 0.25], Σ xβ = 0.4.
        let b = round_bias(&x, &y, &q).unwrap().0;
        assert!((b - 0.4 * 0.5).abs() < 1e-12);
        assert!((b - 2.0 * rejection_mass(&x, &y) * tvd(&p, &q).unwrap()).abs() < 1e-12);
    }
}
