//! Uplink model: payload sizing, block-fading SNR, Shannon-rate latency and
//! per-round token throughput, plus the byte-level wire transcript.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compression::CompressedVocab;
use crate::dist::TokenId;
use crate::error::{Error, Result};

/// Instantaneous SNR floor; keeps deep-fade latency finite.
pub const MIN_SNR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fading {
    Fixed,
    Rayleigh,
    Rician { k_db: f64 },
}

impl std::fmt::Display for Fading {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fading::Fixed => f.write_str("fixed"),
            Fading::Rayleigh => f.write_str("rayleigh"),
            Fading::Rician { k_db } => write!(f, "rician:{k_db}"),
        }
    }
}

impl std::str::FromStr for Fading {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.split_once(':') {
            None if lower == "fixed" => Ok(Fading::Fixed),
            None if lower == "rayleigh" => Ok(Fading::Rayleigh),
            None if lower == "rician" => Ok(Fading::Rician { k_db: 10.0 }),
            Some(("rician", k)) => k
                .parse()
                .map(|k_db| Fading::Rician { k_db })
                .map_err(|_| Error::Config(format!("bad Rician K factor {k:?}"))),
            _ => Err(Error::Config(format!(
                "unknown fading {s:?} (expected fixed, rayleigh, rician[:K_dB])"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    #[serde(default = "default_fading")]
    pub fading: Fading,
    #[serde(default = "default_snr_db")]
    pub mean_snr_db: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_hz: f64,
}

fn default_fading() -> Fading {
    Fading::Rayleigh
}
fn default_snr_db() -> f64 {
    10.0
}
fn default_bandwidth() -> f64 {
    10e6
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            fading: default_fading(),
            mean_snr_db: default_snr_db(),
            bandwidth_hz: default_bandwidth(),
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) || !self.bandwidth_hz.is_finite() {
            return Err(Error::Config(format!("bandwidth {} Hz must be positive", self.bandwidth_hz)));
        }
        if !self.mean_snr_db.is_finite() {
            return Err(Error::Config("mean SNR must be finite".into()));
        }
        if let Fading::Rician { k_db } = self.fading {
            if !k_db.is_finite() {
                return Err(Error::Config("Rician K factor must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn mean_snr_linear(&self) -> f64 {
        db_to_linear(self.mean_snr_db)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySpec {
    #[serde(default = "default_tau_slm")]
    pub tau_slm_s: f64,
    #[serde(default = "default_tau_llm")]
    pub tau_llm_s: f64,
}

fn default_tau_slm() -> f64 {
    0.0256
}
fn default_tau_llm() -> f64 {
    0.1046
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec {
            tau_slm_s: default_tau_slm(),
            tau_llm_s: default_tau_llm(),
        }
    }
}

impl LatencySpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_slm_s", self.tau_slm_s), ("tau_llm_s", self.tau_llm_s)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSpec {
    #[serde(default = "default_b_prob")]
    pub b_prob: u32,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Whether the server sees fixed-point probabilities instead of exact ones.
    #[serde(default)]
    pub quantize: bool,
}

fn default_b_prob() -> u32 {
    8
}
fn default_vocab() -> usize {
    32_000
}

impl Default for PayloadSpec {
    fn default() -> Self {
        PayloadSpec {
            b_prob: default_b_prob(),
            vocab_size: default_vocab(),
            quantize: false,
        }
    }
}

impl PayloadSpec {
    pub fn new(b_prob: u32, vocab_size: usize) -> Self {
        PayloadSpec {
            b_prob,
            vocab_size,
            quantize: false,
        }
    }

    /// `⌈log2 |V|⌉`.
    pub fn b_index(&self) -> u32 {
        if self.vocab_size <= 1 {
            0
        } else {
            usize::BITS - (self.vocab_size - 1).leading_zeros()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least 2 tokens".into()));
        }
        if self.b_prob == 0 || self.b_prob > 32 {
            return Err(Error::Config(format!("b_prob = {} outside [1, 32]", self.b_prob)));
        }
        Ok(())
    }
}

/// `n · (b_prob + b_index)` bits.
pub fn payload_bits(n_entries: usize, spec: &PayloadSpec) -> u64 {
    n_entries as u64 * u64::from(spec.b_prob + spec.b_index())
}

/// Per-round linear SNR under block fading.
pub fn sample_snr<R: Rng + ?Sized>(spec: &ChannelSpec, rng: &mut R) -> f64 {
    let mean = spec.mean_snr_linear();
    let gain = match spec.fading {
        Fading::Fixed => 1.0,
        Fading::Rayleigh => Exp1.sample(rng),
        Fading::Rician { k_db } => {
            let k = db_to_linear(k_db);
            let los = (k / (k + 1.0)).sqrt();
            let sigma = (0.5 / (k + 1.0)).sqrt();
            let n_re: f64 = StandardNormal.sample(rng);
            let n_im: f64 = StandardNormal.sample(rng);
            let re = los + sigma * n_re;
            let im = sigma * n_im;
            re * re + im * im
        }
    };
    (gain * mean).max(MIN_SNR)
}

/// `B / (W log2(1 + SNR))` seconds.
pub fn uplink_latency(bits: u64, bandwidth_hz: f64, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::InvalidInput(format!("SNR {snr} must be positive")));
    }
    if !(bandwidth_hz > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth {bandwidth_hz} must be positive")));
    }
    if bits == 0 {
        return Ok(0.0);
    }
    Ok(bits as f64 / (bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2))
}

pub fn token_throughput(lat: &LatencySpec, tau_comm_s: f64, skipped: bool) -> f64 {
    if skipped {
        1.0 / lat.tau_slm_s
    } else {
        1.0 / (lat.tau_slm_s + tau_comm_s + lat.tau_llm_s)
    }
}

pub fn quantize_prob(p: f64, b_prob: u32) -> u32 {
    let levels = ((1u64 << b_prob) - 1) as f64;
    (p.clamp(0.0, 1.0) * levels).round() as u32
}

pub fn dequantize_prob(q: u32, b_prob: u32) -> f64 {
    q as f64 / ((1u64 << b_prob) - 1) as f64
}

/// Applies the wire's fixed-point rounding to every entry. The draft entry
/// keeps at least one quantization step so the server never sees `x_d = 0`.
pub fn quantize_vocab(c: &CompressedVocab, b_prob: u32) -> CompressedVocab {
    let round = |p: f64| dequantize_prob(quantize_prob(p, b_prob), b_prob);
    let (d, x_d) = c.draft_entry;
    let x_d_q = dequantize_prob(quantize_prob(x_d, b_prob).max(1), b_prob);
    CompressedVocab {
        k: c.k,
        entries: c
            .entries
            .iter()
            .map(|&(t, p)| (t, if t == d { x_d_q } else { round(p) }))
            .collect(),
        draft_entry: (d, x_d_q),
        vocab_size: c.vocab_size,
    }
}

pub const WIRE_HEADER_LEN: usize = 10;
pub const WIRE_RECORD_LEN: usize = 3;

/// One uplink payload as bytes: little-endian header
/// `{round: u32, draft_index: u16, k: u16, n_entries: u16}` followed by
/// `n_entries` records `{index: u16, prob_q: u8}`. The draft record, when it
/// lies outside the top-k, comes last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireFrame {
    pub round: u32,
    pub draft_index: u16,
    pub k: u16,
    pub entries: Vec<(u16, u8)>,
}

impl WireFrame {
    pub fn from_vocab(round: u32, c: &CompressedVocab) -> Result<Self> {
        if c.vocab_size > usize::from(u16::MAX) + 1 {
            return Err(Error::Wire(format!(
                "vocabulary of {} tokens does not fit 16-bit indices",
                c.vocab_size
            )));
        }
        let k = u16::try_from(c.k).map_err(|_| Error::Wire(format!("k = {} exceeds u16", c.k)))?;
        let entries = c
            .transmitted()
            .map(|(t, p)| (t.0 as u16, quantize_prob(p, 8) as u8))
            .collect::<Vec<_>>();
        if entries.len() > usize::from(u16::MAX) {
            return Err(Error::Wire("too many entries for one frame".into()));
        }
        Ok(WireFrame {
            round,
            draft_index: c.draft_entry.0 .0 as u16,
            k,
            entries,
        })
    }

    pub fn encoded_len(&self) -> usize {
        WIRE_HEADER_LEN + WIRE_RECORD_LEN * self.entries.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.draft_index.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u16).to_le_bytes());
        for &(idx, q) in &self.entries {
            out.extend_from_slice(&idx.to_le_bytes());
            out.push(q);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it with the bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize)> {
        if buf.len() < WIRE_HEADER_LEN {
            return Err(Error::Wire(format!("truncated header: {} bytes", buf.len())));
        }
        let u16_at = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
        let round = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
        let draft_index = u16_at(4);
        let k = u16_at(6);
        let n = usize::from(u16_at(8));
        if n != usize::from(k) && n != usize::from(k) + 1 {
            return Err(Error::Wire(format!("n_entries = {n} inconsistent with k = {k}")));
        }
        if k == 0 {
            return Err(Error::Wire("k = 0".into()));
        }
        let need = WIRE_HEADER_LEN + WIRE_RECORD_LEN * n;
        if buf.len() < need {
            return Err(Error::Wire(format!("truncated body: need {need} bytes, have {}", buf.len())));
        }
        let entries: Vec<(u16, u8)> = buf[WIRE_HEADER_LEN..need]
            .chunks_exact(WIRE_RECORD_LEN)
            .map(|r| (u16::from_le_bytes([r[0], r[1]]), r[2]))
            .collect();
        let draft_pos = entries.iter().position(|e| e.0 == draft_index);
        match draft_pos {
            None => return Err(Error::Wire("draft record missing".into())),
            Some(pos) if n > usize::from(k) && pos != n - 1 => {
                return Err(Error::Wire("draft record outside top-k must come last".into()))
            }
            Some(_) => {}
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if !entries.iter().all(|e| seen.insert(e.0)) {
            return Err(Error::Wire("duplicate token index".into()));
        }
        Ok((
            WireFrame {
                round,
                draft_index,
                k,
                entries,
            },
            need,
        ))
    }

    /// Server view of the frame as a compressed vocabulary.
    pub fn to_vocab(&self, vocab_size: usize) -> Result<CompressedVocab> {
        if let Some(&(idx, _)) = self.entries.iter().find(|e| usize::from(e.0) >= vocab_size) {
            return Err(Error::Wire(format!("index {idx} outside vocabulary of size {vocab_size}")));
        }
        let k = usize::from(self.k);
        let prob = |q: u8| dequantize_prob(u32::from(q), 8);
        let entries: Vec<(TokenId, f64)> = self.entries[..k]
            .iter()
            .map(|&(i, q)| (TokenId(u32::from(i)), prob(q)))
            .collect();
        let draft = self
            .entries
            .iter()
            .find(|e| e.0 == self.draft_index)
            .map(|&(i, q)| (TokenId(u32::from(i)), prob(q)))
            .ok_or_else(|| Error::Wire("draft record missing".into()))?;
        Ok(CompressedVocab {
            k,
            entries,
            draft_entry: draft,
            vocab_size,
        })
    }
}

/// Splits a concatenated transcript into frames.
pub fn decode_transcript(mut buf: &[u8]) -> Result<Vec<WireFrame>> {
    let mut frames = Vec::new();
    while !buf.is_empty() {
        let (frame, used) = WireFrame::decode(buf)?;
        frames.push(frame);
        buf = &buf[used..];
    }
    Ok(frames)
}
