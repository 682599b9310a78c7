//! Probability-vector arithmetic over a fixed vocabulary.
//!
//! Every distribution in the protocol (device draft law, server target law,
//! resampling laws, reconstructions) is carried as a [`ProbVec`]. Construction
//! validates normalization: drift up to [`RENORMALIZE_TOLERANCE`] is corrected
//! with a warning, anything beyond is rejected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accepted deviation of `Σ p` from 1 without any correction.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Largest deviation that is silently renormalized (with a log warning).
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;
/// Smallest temperature accepted by [`softmax`].
pub const MIN_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raw model scores over the vocabulary. All entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVec(Vec<f64>);

impl LogitVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty logit vector".into()));
        }
        if let Some(i) = values.iter().position(|z| !z.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite logit {} at index {i}",
                values[i]
            )));
        }
        Ok(LogitVec(values))
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

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TryFrom<Vec<f64>> for LogitVec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LogitVec::new(v)
    }
}

impl From<LogitVec> for Vec<f64> {
    fn from(z: LogitVec) -> Self {
        z.0
    }
}

/// A normalized, non-negative distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "entry {i} = {} is not a non-negative finite probability",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift > RENORMALIZE_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, outside 1 ± {RENORMALIZE_TOLERANCE}"
            )));
        }
        if drift > SUM_TOLERANCE {
            log::warn!("renormalizing probability vector with sum drift {drift:.3e}");
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(ProbVec(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "weight {i} = {} is not non-negative and finite",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroDenominator("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(ProbVec(weights))
    }

    pub fn one_hot(len: usize, at: TokenId) -> Result<Self> {
        if at.index() >= len {
            return Err(Error::InvalidInput(format!(
                "token {at} outside vocabulary of size {len}"
            )));
        }
        let mut v = vec![0.0; len];
        v[at.index()] = 1.0;
        Ok(ProbVec(v))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidInput("empty vocabulary".into()));
        }
        Ok(ProbVec(vec![1.0 / len as f64; len]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token.index()]
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if token.index() >= self.len() {
            return Err(Error::InvalidInput(format!(
                "token {token} outside vocabulary of size {}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        TokenId::from(best)
    }
}

impl<'de> Deserialize<'de> for ProbVec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(de)?;
        ProbVec::new(v).map_err(serde::de::Error::custom)
    }
}

/// A distribution sorted in non-increasing order, with the rank → token map.
///
/// Ties are broken by ascending token id, so the ordering is a pure function
/// of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedProbVec {
    probs: Vec<f64>,
    perm: Vec<TokenId>,
    rank: Vec<u32>,
}

impl SortedProbVec {
    /// Probabilities by rank (rank 0 is the most likely token).
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `perm()[r]` is the token at rank `r`.
    pub fn perm(&self) -> &[TokenId] {
        &self.perm
    }

    pub fn rank_of(&self, token: TokenId) -> usize {
        self.rank[token.index()] as usize
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Undoes the sort.
    pub fn unsort(&self) -> ProbVec {
        let mut out = vec![0.0; self.probs.len()];
        for (p, t) in self.probs.iter().zip(&self.perm) {
            out[t.index()] = *p;
        }
        ProbVec(out)
    }
}

pub fn softmax(z: &LogitVec, temperature: f64) -> Result<ProbVec> {
    check_temperature(temperature)?;
    let max = z.max();
    let mut out: Vec<f64> = z
        .as_slice()
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(ProbVec(out))
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature >= MIN_TEMPERATURE) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature {temperature} must be finite and at least {MIN_TEMPERATURE}"
        )));
    }
    Ok(())
}

/// Inverse-CDF sampling in ascending index order.
pub fn sample<R: Rng + ?Sized>(p: &ProbVec, rng: &mut R) -> TokenId {
    sample_at(p, rng.random::<f64>())
}

/// Inverse-CDF lookup for a uniform draw in `[0, 1)`.
pub fn sample_at(p: &ProbVec, uniform: f64) -> TokenId {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.as_slice().iter().enumerate() {
        if pi > 0.0 {
            cum += pi;
            last_positive = i;
            if uniform < cum {
                return TokenId::from(i);
            }
        }
    }
    // Rounding left the cumulative sum a hair under the draw.
    TokenId::from(last_positive)
}

pub fn tvd(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    check_same_len(p, q)?;
    Ok(tvd_slices(p.as_slice(), q.as_slice()))
}

pub(crate) fn tvd_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub(crate) fn check_same_len(p: &ProbVec, q: &ProbVec) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

pub fn sort_desc(p: &ProbVec) -> SortedProbVec {
    let src = p.as_slice();
    let mut idx: Vec<u32> = (0..src.len() as u32).collect();
    idx.sort_unstable_by(|&a, &b| {
        src[b as usize]
            .total_cmp(&src[a as usize])
            .then(a.cmp(&b))
    });
    let mut rank = vec![0u32; src.len()];
    for (r, &t) in idx.iter().enumerate() {
        rank[t as usize] = r as u32;
    }
    SortedProbVec {
        probs: idx.iter().map(|&t| src[t as usize]).collect(),
        perm: idx.into_iter().map(TokenId).collect(),
        rank,
    }
}
