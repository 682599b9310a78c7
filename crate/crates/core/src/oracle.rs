//! Sources of device/server logits.
//!
//! [`SyntheticOracle`] produces long-tailed, correlated logit pairs keyed by
//! the sequence so far; [`TraceOracle`] replays recorded pairs from JSONL.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{LogitVec, TokenId};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, fnv1a_start, substream, Stream};

/// Token reserved as end-of-sequence by the synthetic oracle.
pub const SYNTHETIC_EOS: TokenId = TokenId(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleKind {
    Synthetic {
        #[serde(default = "default_zipf")]
        zipf_s: f64,
        #[serde(default = "default_divergence")]
        divergence: f64,
        #[serde(default = "default_vocab")]
        vocab_size: usize,
        #[serde(default)]
        eos_prob: f64,
        /// Log-normal spread of a per-context multiplier on `zipf_s`; 0 gives one shape everywhere.
        #[serde(default = "default_sharpness_spread")]
        sharpness_spread: f64,
    },
    Trace {
        path: PathBuf,
    },
}

fn default_zipf() -> f64 {
    1.5
}
fn default_divergence() -> f64 {
    1.0
}
fn default_vocab() -> usize {
    32_000
}
fn default_sharpness_spread() -> f64 {
    SPREAD_DEFAULT
}

const SPREAD_DEFAULT: f64 = 0.8;

// Unknown keys are still rejected: they reach the flattened variant, which denies them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    #[serde(flatten)]
    pub kind: OracleKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            kind: OracleKind::Synthetic {
                zipf_s: default_zipf(),
                divergence: default_divergence(),
                vocab_size: default_vocab(),
                eos_prob: 0.0,
                sharpness_spread: default_sharpness_spread(),
            },
            seed: 0,
        }
    }
}

impl OracleSpec {
    pub fn synthetic(zipf_s: f64, divergence: f64, vocab_size: usize, seed: u64) -> Self {
        OracleSpec {
            kind: OracleKind::Synthetic {
                zipf_s,
                divergence,
                vocab_size,
                eos_prob: 0.0,
                sharpness_spread: default_sharpness_spread(),
            },
            seed,
        }
    }

    /// Sets the per-context sharpness spread of a synthetic spec.
    pub fn with_spread(mut self, spread: f64) -> Self {
        if let OracleKind::Synthetic { sharpness_spread, .. } = &mut self.kind {
            *sharpness_spread = spread;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            OracleKind::Synthetic {
                zipf_s,
                divergence,
                vocab_size,
                eos_prob,
                sharpness_spread,
            } => {
                if !(*sharpness_spread >= 0.0) || !sharpness_spread.is_finite() {
                    return Err(Error::Config(format!(
                        "sharpness_spread = {sharpness_spread} must be finite and non-negative"
                    )));
                }
                if !(*zipf_s > 0.0) || !zipf_s.is_finite() {
                    return Err(Error::Config(format!("zipf_s = {zipf_s} must be positive")));
                }
                if !(*divergence >= 0.0) || !divergence.is_finite() {
                    return Err(Error::Config(format!(
                        "divergence = {divergence} must be finite and non-negative"
                    )));
                }
                if *vocab_size < 2 || *vocab_size > u32::MAX as usize {
                    return Err(Error::Config(format!("vocab_size = {vocab_size} out of range")));
                }
                if !(0.0..1.0).contains(eos_prob) {
                    return Err(Error::Config(format!("eos_prob = {eos_prob} outside [0, 1)")));
                }
                Ok(())
            }
            OracleKind::Trace { .. } => Ok(()),
        }
    }

    /// Vocabulary size, when known without reading a trace.
    pub fn vocab_size(&self) -> Option<usize> {
        match self.kind {
            OracleKind::Synthetic { vocab_size, .. } => Some(vocab_size),
            OracleKind::Trace { .. } => None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Oracle>> {
        self.validate()?;
        Ok(match &self.kind {
            OracleKind::Synthetic { .. } => Box::new(SyntheticOracle::new(self.clone())?),
            OracleKind::Trace { path } => Box::new(TraceOracle::open(path)?),
        })
    }
}

/// The token sequence produced so far, with its running fingerprint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<TokenId>,
    fingerprint: u64,
}

impl SequenceState {
    pub fn new() -> Self {
        Self::with_prompt(0)
    }

    /// A fresh sequence whose context is keyed by `prompt`.
    pub fn with_prompt(prompt: u64) -> Self {
        SequenceState {
            tokens: Vec::new(),
            fingerprint: fnv1a(&prompt.to_le_bytes(), fnv1a_start()),
        }
    }

    pub fn push(&mut self, t: TokenId) {
        self.tokens.push(t);
        self.fingerprint = fnv1a(&t.0.to_le_bytes(), self.fingerprint);
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

impl Default for SequenceState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundInputs {
    pub slm_logits: LogitVec,
    pub llm_logits: LogitVec,
    pub context_fingerprint: u64,
    /// Trace-provided end of sequence after this round.
    pub eos: bool,
}

pub trait Oracle: Send {
    fn vocab_size(&self) -> usize;

    /// Token that terminates a sequence when emitted.
    fn eos_token(&self) -> Option<TokenId>;

    fn next_round(&mut self, state: &SequenceState) -> Result<RoundInputs>;
}

/// Zipf-shaped base logits under a context-keyed rank permutation, with
/// independent Gaussian perturbations for the two models.
///
/// Each context also draws its own exponent `zipf_s · exp(spread · N(0, 1))`,
/// so some contexts are sharp (both models agree) and some flat.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    seed: u64,
    zipf_s: f64,
    divergence: f64,
    eos_prob: f64,
    sharpness_spread: f64,
    neg_ln_rank: Vec<f64>,
}

impl SyntheticOracle {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        let OracleKind::Synthetic {
            zipf_s,
            divergence,
            vocab_size,
            eos_prob,
            sharpness_spread,
        } = spec.kind
        else {
            return Err(Error::Config("not a synthetic oracle spec".into()));
        };
        let neg_ln_rank = (1..=vocab_size).map(|r| -(r as f64).ln()).collect();
        Ok(SyntheticOracle {
            seed: spec.seed,
            zipf_s,
            divergence,
            eos_prob,
            sharpness_spread,
            neg_ln_rank,
        })
    }

    /// Exponent used for the context with fingerprint `fp`.
    pub fn context_exponent(&self, fp: u64) -> f64 {
        if self.sharpness_spread == 0.0 {
            return self.zipf_s;
        }
        let n: f64 = StandardNormal.sample(&mut substream(self.seed, fp, Stream::OracleSharpness));
        self.zipf_s * (self.sharpness_spread * n).exp()
    }

    pub fn zipf_s(&self) -> f64 {
        self.zipf_s
    }

    fn perturbed(&self, base: &[f64], fp: u64, stream: Stream) -> Result<LogitVec> {
        let mut z = base.to_vec();
        if self.divergence > 0.0 {
            let mut rng = substream(self.seed, fp, stream);
            for v in z.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += self.divergence * n;
            }
        }
        if self.eos_prob > 0.0 {
            set_eos_mass(&mut z, self.eos_prob);
        }
        LogitVec::new(z)
    }
}

/// Sets the EOS logit so that its softmax probability is exactly `mass`.
fn set_eos_mass(z: &mut [f64], mass: f64) {
    let e = SYNTHETIC_EOS.index();
    let max = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != e)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + z.iter()
            .enumerate()
            .filter(|&(i, _)| i != e)
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    z[e] = lse + (mass / (1.0 - mass)).ln();
}

impl Oracle for SyntheticOracle {
    fn vocab_size(&self) -> usize {
        self.neg_ln_rank.len()
    }

    fn eos_token(&self) -> Option<TokenId> {
        (self.eos_prob > 0.0).then_some(SYNTHETIC_EOS)
    }

    fn next_round(&mut self, state: &SequenceState) -> Result<RoundInputs> {
        let fp = state.fingerprint();
        let v = self.vocab_size();
        let mut tokens: Vec<u32> = (0..v as u32).collect();
        tokens.shuffle(&mut substream(self.seed, fp, Stream::OraclePermutation));
        let s = self.context_exponent(fp);
        let mut base = vec![0.0; v];
        for (rank, &t) in tokens.iter().enumerate() {
            base[t as usize] = s * self.neg_ln_rank[rank];
        }
        Ok(RoundInputs {
            slm_logits: self.perturbed(&base, fp, Stream::OracleNoiseSlm)?,
            llm_logits: self.perturbed(&base, fp, Stream::OracleNoiseLlm)?,
            context_fingerprint: fp,
            eos: false,
        })
    }
}

/// One recorded round: `{"slm_logits": [...], "llm_logits": [...], "eos": bool}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub slm_logits: LogitVec,
    pub llm_logits: LogitVec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub eos: bool,
}

pub fn parse_trace_line(line: &str) -> Result<TraceRecord> {
    let rec: TraceRecord =
        serde_json::from_str(line).map_err(|e| Error::json("trace record", e))?;
    if rec.slm_logits.len() != rec.llm_logits.len() {
        return Err(Error::InvalidInput(format!(
            "trace record logit lengths differ: {} vs {}",
            rec.slm_logits.len(),
            rec.llm_logits.len()
        )));
    }
    if rec.slm_logits.len() < 2 {
        return Err(Error::InvalidInput("trace vocabulary needs at least 2 tokens".into()));
    }
    Ok(rec)
}

/// Parses a whole JSONL trace, skipping blank lines. All records must share one vocabulary size.
pub fn parse_trace<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_trace_line(&line).map_err(|e| {
            Error::InvalidInput(format!("{}:{}: {e}", origin.display(), lineno + 1))
        })?;
        if let Some(first) = out.first() {
            if first.slm_logits.len() != rec.slm_logits.len() {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: vocabulary size changed from {} to {}",
                    origin.display(),
                    lineno + 1,
                    first.slm_logits.len(),
                    rec.slm_logits.len()
                )));
            }
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("{}: empty trace", origin.display())));
    }
    Ok(out)
}

/// Materializes `n_rounds` of `oracle` along the greedy server-model path
/// from `prompt`, so a history-dependent oracle can be replayed unchanged
/// under policies that would otherwise steer it into different contexts.
pub fn record_trace(oracle: &mut dyn Oracle, prompt: u64, n_rounds: usize) -> Result<Vec<TraceRecord>> {
    let mut state = SequenceState::with_prompt(prompt);
    let mut out = Vec::with_capacity(n_rounds);
    for _ in 0..n_rounds {
        let r = oracle.next_round(&state)?;
        let greedy = crate::dist::softmax(&r.llm_logits, 1.0)?.argmax();
        state.push(greedy);
        out.push(TraceRecord {
            slm_logits: r.slm_logits,
            llm_logits: r.llm_logits,
            eos: r.eos,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TraceOracle {
    records: Vec<TraceRecord>,
    cursor: usize,
}

impl TraceOracle {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_records(parse_trace(std::io::BufReader::new(f), path)?)
    }

    pub fn from_records(records: Vec<TraceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("empty trace".into()));
        }
        Ok(TraceOracle { records, cursor: 0 })
    }
}

impl Oracle for TraceOracle {
    fn vocab_size(&self) -> usize {
        self.records[0].slm_logits.len()
    }

    fn eos_token(&self) -> Option<TokenId> {
        None
    }

    fn next_round(&mut self, state: &SequenceState) -> Result<RoundInputs> {
        let rec = self.records.get(self.cursor).ok_or(Error::EndOfTrace)?;
        self.cursor += 1;
        Ok(RoundInputs {
            slm_logits: rec.slm_logits.clone(),
            llm_logits: rec.llm_logits.clone(),
            context_fingerprint: state.fingerprint(),
            eos: rec.eos,
        })
    }
}
