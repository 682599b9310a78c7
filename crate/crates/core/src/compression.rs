//! Top-k vocabulary compression of the uplink payload.
//!
//! The device sends the `k` highest-ranked entries of its distribution plus
//! the draft entry; the server spreads the residual mass uniformly over the
//! rest. The distortion this causes in the resampling law is controlled
//! through two upper bounds on `D_TV(p, q)`:
//!
//! * [`utv_bound`], which divides the tail ℓ1 reconstruction error by
//!   `D_TV(x, y)` and therefore needs the server law;
//! * [`utv_bound_online`], which replaces that denominator with a softplus
//!   lower bound built only from `x_d` and a predicted rejection probability.
//!
//! [`TailProfile`] evaluates the shared numerator for every `k` in
//! logarithmic time, which is what the k-selection rules scan over.

use serde::{Deserialize, Serialize};

use crate::dist::{sort_desc, ProbVec, SortedProbVec, TokenId};
use crate::error::{Error, Result};
use crate::uncertainty::{predict_beta, LinearRejectionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedVocab {
    pub k: usize,
    /// Ranks `1..=k` of the device distribution, in rank order.
    pub entries: Vec<(TokenId, f64)>,
    pub draft_entry: (TokenId, f64),
    pub vocab_size: usize,
}

impl CompressedVocab {
    pub fn draft_in_top_k(&self) -> bool {
        let d = self.draft_entry.0;
        self.entries.iter().any(|(t, _)| *t == d)
    }

    /// Entries on the wire: the top-k plus the draft entry when it lies outside them.
    pub fn n_entries(&self) -> usize {
        self.k + usize::from(!self.draft_in_top_k())
    }

    /// Transmitted `(token, prob)` pairs without duplicates.
    pub fn transmitted(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        let extra = (!self.draft_in_top_k()).then_some(self.draft_entry);
        self.entries.iter().copied().chain(extra)
    }
}

pub fn compress(x_sorted: &SortedProbVec, k: usize, d: TokenId) -> Result<CompressedVocab> {
    let v = x_sorted.len();
    if k == 0 || k > v {
        return Err(Error::InvalidParameter(format!("k = {k} outside [1, {v}]")));
    }
    if d.index() >= v {
        return Err(Error::InvalidInput(format!("draft {d} outside vocabulary of size {v}")));
    }
    let entries = x_sorted.perm()[..k]
        .iter()
        .zip(x_sorted.probs())
        .map(|(&t, &p)| (t, p))
        .collect();
    let x_d = x_sorted.probs()[x_sorted.rank_of(d)];
    Ok(CompressedVocab {
        k,
        entries,
        draft_entry: (d, x_d),
        vocab_size: v,
    })
}

/// Server-side reconstruction: transmitted entries verbatim, residual mass
/// spread uniformly over the others. A negative residual (possible after
/// quantization) is clamped to zero and the result renormalized.
pub fn reconstruct(c: &CompressedVocab) -> Result<ProbVec> {
    let mut out = vec![f64::NAN; c.vocab_size];
    let mut sent = 0.0;
    let mut n_sent = 0;
    for (t, p) in c.transmitted() {
        if t.index() >= c.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token {t} outside vocabulary of size {}",
                c.vocab_size
            )));
        }
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidInput(format!("entry {t} has probability {p}")));
        }
        if out[t.index()].is_nan() {
            n_sent += 1;
        }
        out[t.index()] = p;
        sent += p;
    }
    let rest = c.vocab_size - n_sent;
    let fill = if rest > 0 {
        (1.0 - sent).max(0.0) / rest as f64
    } else {
        0.0
    };
    for p in out.iter_mut().filter(|p| p.is_nan()) {
        *p = fill;
    }
    ProbVec::from_weights(out)
}

/// `1 − Σ_{i≤k} x_i`, clamped at zero.
pub fn residual_mass(x_sorted: &SortedProbVec, k: usize) -> f64 {
    let k = k.min(x_sorted.len());
    let tail: f64 = x_sorted.probs()[k..].iter().rev().sum();
    tail.max(0.0)
}

/// `Σ_{rank > k} |x − x̂|`, the reconstruction error outside the top-k.
pub fn tail_l1(x_sorted: &SortedProbVec, x_hat: &ProbVec, k: usize) -> f64 {
    let k = k.min(x_sorted.len());
    x_sorted.perm()[k..]
        .iter()
        .zip(&x_sorted.probs()[k..])
        .map(|(&t, &p)| (p - x_hat.get(t)).abs())
        .sum::<f64>()
        + 0.0
}

/// Server-side bound `Σ_{rank > k} |x − x̂| / D_TV(x, y)` on `D_TV(p, q)`.
pub fn utv_bound(x: &ProbVec, x_hat: &ProbVec, y: &ProbVec, k: usize) -> Result<f64> {
    let d_xy = crate::dist::tvd(x, y)?;
    crate::dist::check_same_len(x, x_hat)?;
    if d_xy <= 0.0 {
        return Err(Error::UndefinedBound(
            "device and server laws coincide; no rejection is possible".into(),
        ));
    }
    Ok(tail_l1(&sort_desc(x), x_hat, k) / d_xy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftplusConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_eta() -> f64 {
    10.0
}

impl Default for SoftplusConfig {
    fn default() -> Self {
        SoftplusConfig { eta: default_eta() }
    }
}

impl SoftplusConfig {
    pub fn new(eta: f64) -> Result<Self> {
        let cfg = SoftplusConfig { eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("η = {} must be positive", self.eta)));
        }
        Ok(())
    }

    /// Worst-case gap between softplus and ReLU, attained at zero.
    pub fn max_error(&self) -> f64 {
        std::f64::consts::LN_2 / self.eta
    }
}

/// `ln(1 + e^{ηz}) / η`.
pub fn softplus(z: f64, cfg: &SoftplusConfig) -> f64 {
    let t = cfg.eta * z;
    if t > 30.0 {
        z + (-t).exp() / cfg.eta
    } else {
        t.exp().ln_1p() / cfg.eta
    }
}

/// Softplus surrogate `Σ x_i ℓ(y_i / x_i − 1)` for `D_TV(x, y)`.
pub fn softplus_tvd(x: &ProbVec, y: &ProbVec, cfg: &SoftplusConfig) -> Result<f64> {
    crate::dist::check_same_len(x, y)?;
    Ok(x.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&xi, &yi)| {
            if xi > 0.0 {
                xi * softplus(yi / xi - 1.0, cfg)
            } else {
                // x ℓ(y/x − 1) → y as x → 0.
                yi
            }
        })
        .sum())
}

/// Device-observable lower bound `(1 − x_d) ℓ(−1) + x_d ℓ(−β)` on the softplus surrogate.
pub fn online_denominator(x_d: f64, beta: f64, cfg: &SoftplusConfig) -> f64 {
    (1.0 - x_d) * softplus(-1.0, cfg) + x_d * softplus(-beta, cfg)
}

pub fn utv_bound_online(
    x_sorted: &SortedProbVec,
    x_hat: &ProbVec,
    x_d: f64,
    beta_hat: f64,
    k: usize,
    cfg: &SoftplusConfig,
) -> Result<f64> {
    check_online_inputs(x_d, beta_hat)?;
    cfg.validate()?;
    Ok(tail_l1(x_sorted, x_hat, k) / online_denominator(x_d, beta_hat, cfg))
}

fn check_online_inputs(x_d: f64, beta_hat: f64) -> Result<()> {
    if !(x_d > 0.0 && x_d <= 1.0) {
        return Err(Error::InvalidInput(format!("x_d = {x_d} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&beta_hat) {
        return Err(Error::InvalidInput(format!("β̂ = {beta_hat} outside [0, 1]")));
    }
    Ok(())
}

/// Closed-form tail reconstruction error for every `k`, given the draft rank.
///
/// Uses suffix sums of the sorted distribution and a binary search for the
/// split between tail entries above and below the uniform fill level.
#[derive(Debug, Clone)]
pub struct TailProfile {
    probs: Vec<f64>,
    /// `suffix[r] = Σ_{i ≥ r} probs[i]`, accumulated from the smallest entry.
    suffix: Vec<f64>,
    draft_rank: usize,
}

impl TailProfile {
    pub fn new(x_sorted: &SortedProbVec, d: TokenId) -> Result<Self> {
        if d.index() >= x_sorted.len() {
            return Err(Error::InvalidInput(format!(
                "draft {d} outside vocabulary of size {}",
                x_sorted.len()
            )));
        }
        let probs = x_sorted.probs().to_vec();
        let mut suffix = vec![0.0; probs.len() + 1];
        for r in (0..probs.len()).rev() {
            suffix[r] = suffix[r + 1] + probs[r];
        }
        Ok(TailProfile {
            probs,
            suffix,
            draft_rank: x_sorted.rank_of(d),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn x_d(&self) -> f64 {
        self.probs[self.draft_rank]
    }

    pub fn draft_rank(&self) -> usize {
        self.draft_rank
    }

    /// `Σ_{rank > k} |x − x̂|` for the reconstruction of `compress(x, k, d)`.
    pub fn numerator(&self, k: usize) -> f64 {
        let v = self.probs.len();
        let k = k.min(v);
        let draft_outside = self.draft_rank >= k;
        let rest = v - k - usize::from(draft_outside);
        if rest == 0 {
            return 0.0;
        }
        let x_d = self.probs[self.draft_rank];
        let residual = if draft_outside {
            (self.suffix[k] - x_d).max(0.0)
        } else {
            self.suffix[k]
        };
        let fill = residual / rest as f64;
        let tail = &self.probs[k..];
        let above = k + tail.partition_point(|&p| p >= fill);
        let upper = (self.suffix[k] - self.suffix[above]) - fill * (above - k) as f64;
        let lower = fill * (v - above) as f64 - self.suffix[above];
        let mut total = upper + lower;
        if draft_outside {
            total -= (x_d - fill).abs();
        }
        total.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KPolicy {
    Offline { theta: f64 },
    Online { theta: f64, eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k_star: usize,
    pub bound_value_at_k: f64,
    pub policy: KPolicy,
    /// No compression meets the tolerance; the full vocabulary is sent.
    pub saturated: bool,
}

/// Expected server-side bound per `k` on a sparse grid, interpolated linearly between points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtvTable {
    pub vocab_size: usize,
    pub entries: Vec<(usize, f64)>,
}

impl UtvTable {
    pub fn new(vocab_size: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        entries.dedup_by_key(|e| e.0);
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty U_TV table".into()));
        }
        if entries.iter().any(|&(k, v)| k == 0 || k > vocab_size || !(v >= 0.0)) {
            return Err(Error::InvalidInput(
                "U_TV table needs k in [1, |V|] and non-negative finite bounds".into(),
            ));
        }
        if entries.last().map(|e| e.0) != Some(vocab_size) {
            return Err(Error::InvalidInput("U_TV table must end at k = |V|".into()));
        }
        Ok(UtvTable {
            vocab_size,
            entries,
        })
    }

    pub fn value_at(&self, k: usize) -> f64 {
        let e = &self.entries;
        let j = e.partition_point(|&(g, _)| g < k);
        if j == 0 {
            return e[0].1;
        }
        if j == e.len() {
            return e[e.len() - 1].1;
        }
        let (k0, v0) = e[j - 1];
        let (k1, v1) = e[j];
        if k1 == k {
            return v1;
        }
        v0 + (v1 - v0) * (k - k0) as f64 / (k1 - k0) as f64
    }
}

/// Up to `points` distinct, logarithmically spaced sizes in `[1, vocab_size]`, both ends included.
pub fn log_k_grid(vocab_size: usize, points: usize) -> Vec<usize> {
    let points = points.max(2);
    let mut grid: Vec<usize> = (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            ((vocab_size as f64).powf(t).round() as usize).clamp(1, vocab_size)
        })
        .collect();
    grid.dedup();
    grid
}

/// Smallest `k` whose interpolated expected bound is within `theta`.
pub fn select_k_offline(table: &UtvTable, theta: f64) -> KSelection {
    let policy = KPolicy::Offline { theta };
    let e = &table.entries;
    let Some(j) = e.iter().position(|&(_, v)| v <= theta) else {
        return KSelection {
            k_star: table.vocab_size,
            bound_value_at_k: table.value_at(table.vocab_size),
            policy,
            saturated: true,
        };
    };
    let mut k_star = e[j].0;
    if j > 0 {
        let lo = e[j - 1].0;
        if let Some(k) = (lo + 1..=e[j].0).find(|&k| table.value_at(k) <= theta) {
            k_star = k;
        }
    }
    KSelection {
        k_star,
        bound_value_at_k: table.value_at(k_star),
        policy,
        saturated: k_star == table.vocab_size,
    }
}

pub fn select_k_online(
    profile: &TailProfile,
    u: f64,
    model: &LinearRejectionModel,
    theta: f64,
    cfg: &SoftplusConfig,
) -> Result<KSelection> {
    select_k_online_beta(profile, predict_beta(model, u), theta, cfg)
}

/// Geometric probe `k = 1, 2, 4, …`, then a linear scan back to the previous
/// probe. A probe sequence that fails to decrease means the bound is not
/// monotone here, and the whole range is scanned instead.
pub fn select_k_online_beta(
    profile: &TailProfile,
    beta_hat: f64,
    theta: f64,
    cfg: &SoftplusConfig,
) -> Result<KSelection> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("θ = {theta} must be positive")));
    }
    cfg.validate()?;
    check_online_inputs(profile.x_d(), beta_hat)?;
    let denom = online_denominator(profile.x_d(), beta_hat, cfg);
    let v = profile.vocab_size();
    let bound = |k: usize| profile.numerator(k) / denom;
    let policy = KPolicy::Online {
        theta,
        eta: cfg.eta,
    };
    let done = |k: usize, b: f64| KSelection {
        k_star: k,
        bound_value_at_k: b,
        policy,
        saturated: k == v,
    };

    let mut prev_k = 0;
    let mut prev_bound = f64::INFINITY;
    let mut k = 1;
    loop {
        let b = bound(k);
        if b > prev_bound {
            break;
        }
        if b <= theta {
            let first = (prev_k + 1..k).find(|&j| bound(j) <= theta).unwrap_or(k);
            return Ok(done(first, bound(first)));
        }
        if k == v {
            return Ok(done(v, b));
        }
        prev_k = k;
        prev_bound = b;
        k = (k * 2).min(v);
    }
    let first = (1..=v).find(|&j| bound(j) <= theta).unwrap_or(v);
    Ok(done(first, bound(first)))
}
