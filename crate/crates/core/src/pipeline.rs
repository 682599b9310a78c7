//! Round-by-round orchestration of every policy, with per-round telemetry
//! and aggregate metrics.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{fmt_sig9, CalibrationSet};
use crate::channel::{
    payload_bits, quantize_vocab, sample_snr, uplink_latency, ChannelSpec, LatencySpec, PayloadSpec, WireFrame,
};
use crate::compression::{
    compress, reconstruct, select_k_offline, select_k_online, tail_l1, KSelection, SoftplusConfig, TailProfile,
};
use crate::dist::{sample, softmax, sort_desc, tvd, ProbVec, TokenId};
use crate::error::{Error, Result};
use crate::oracle::{Oracle, SequenceState};
use crate::rng::{substream, Stream};
use crate::specdec::{distorted_resample_dist, rejection_prob, resample_dist, round_bias, verify_draft};
use crate::uncertainty::{estimate_u, predict_beta, UncertaintyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    LlmOnly,
    SlmOnly,
    Hlm,
    RandHlm {
        #[serde(default = "default_skip_prob")]
        skip_prob: f64,
    },
    Uhlm {
        #[serde(default = "default_u_th")]
        u_th: f64,
    },
    /// Fixed `k_star`, or one chosen from the calibrated table at tolerance `theta`.
    CuhlmOffline {
        #[serde(default = "default_u_th")]
        u_th: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k_star: Option<usize>,
        #[serde(default = "default_theta")]
        theta: f64,
    },
    CuhlmOnline {
        #[serde(default = "default_u_th")]
        u_th: f64,
        #[serde(default = "default_theta")]
        theta: f64,
        #[serde(default = "default_eta")]
        eta: f64,
    },
}

fn default_skip_prob() -> f64 {
    0.5
}
fn default_u_th() -> f64 {
    0.8
}
fn default_theta() -> f64 {
    0.1
}
fn default_eta() -> f64 {
    10.0
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::CuhlmOnline {
            u_th: default_u_th(),
            theta: default_theta(),
            eta: default_eta(),
        }
    }
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::LlmOnly => "llm_only",
            PolicySpec::SlmOnly => "slm_only",
            PolicySpec::Hlm => "hlm",
            PolicySpec::RandHlm { .. } => "rand_hlm",
            PolicySpec::Uhlm { .. } => "uhlm",
            PolicySpec::CuhlmOffline { .. } => "cuhlm_offline",
            PolicySpec::CuhlmOnline { .. } => "cuhlm_online",
        }
    }

    pub fn u_th(&self) -> Option<f64> {
        match *self {
            PolicySpec::Uhlm { u_th }
            | PolicySpec::CuhlmOffline { u_th, .. }
            | PolicySpec::CuhlmOnline { u_th, .. } => Some(u_th),
            _ => None,
        }
    }

    /// Replaces the skip threshold of uncertainty-gated variants.
    pub fn with_u_th(self, new: f64) -> Self {
        match self {
            PolicySpec::Uhlm { .. } => PolicySpec::Uhlm { u_th: new },
            PolicySpec::CuhlmOffline { k_star, theta, .. } => PolicySpec::CuhlmOffline {
                u_th: new,
                k_star,
                theta,
            },
            PolicySpec::CuhlmOnline { theta, eta, .. } => PolicySpec::CuhlmOnline { u_th: new, theta, eta },
            other => other,
        }
    }

    pub fn with_theta(self, new: f64) -> Self {
        match self {
            PolicySpec::CuhlmOffline { u_th, k_star, .. } => PolicySpec::CuhlmOffline {
                u_th,
                k_star,
                theta: new,
            },
            PolicySpec::CuhlmOnline { u_th, eta, .. } => PolicySpec::CuhlmOnline { u_th, theta: new, eta },
            other => other,
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(
            self,
            PolicySpec::CuhlmOnline { .. } | PolicySpec::CuhlmOffline { k_star: None, .. }
        )
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        match *self {
            PolicySpec::LlmOnly | PolicySpec::SlmOnly | PolicySpec::Hlm => Ok(()),
            PolicySpec::RandHlm { skip_prob } => unit("skip_prob", skip_prob),
            PolicySpec::Uhlm { u_th } => unit("u_th", u_th),
            PolicySpec::CuhlmOffline { u_th, k_star, theta } => {
                unit("u_th", u_th)?;
                positive("theta", theta)?;
                match k_star {
                    Some(k) if k == 0 || k > vocab_size => {
                        Err(Error::Config(format!("k_star = {k} outside [1, {vocab_size}]")))
                    }
                    _ => Ok(()),
                }
            }
            PolicySpec::CuhlmOnline { u_th, theta, eta } => {
                unit("u_th", u_th)?;
                positive("theta", theta)?;
                positive("eta", eta)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundVerdict {
    Skipped,
    Accepted,
    Rejected,
    /// The server model generated the token itself (LLM-only baseline).
    LlmDirect,
}

impl RoundVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundVerdict::Skipped => "skipped",
            RoundVerdict::Accepted => "accepted",
            RoundVerdict::Rejected => "rejected",
            RoundVerdict::LlmDirect => "llm_direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub sequence: u32,
    pub round: u32,
    pub u: f64,
    /// 1 when the distribution was sent uplink.
    pub delta: u8,
    pub k_used: Option<usize>,
    pub payload_bits: u64,
    pub snr_linear: Option<f64>,
    pub tau_comm_s: f64,
    pub latency_s: f64,
    pub verdict: RoundVerdict,
    /// For skipped rounds: whether the server would have accepted the draft.
    pub counterfactual_accept: Option<bool>,
    pub fallback_used: bool,
    pub bias: f64,
    pub tvd_xy: f64,
    pub tvd_pq: Option<f64>,
    /// Server-side bound on `tvd_pq` for the `k` actually used.
    pub utv_bound: Option<f64>,
    /// Bound value the k-selection rule compared against θ.
    pub selection_bound: Option<f64>,
    pub beta_hat: Option<f64>,
    pub draft: TokenId,
    pub token: TokenId,
    pub x_d: f64,
    pub y_d: f64,
}

/// Column order of CSV record output.
pub const RECORD_COLUMNS: [&str; 22] = [
    "sequence",
    "round",
    "u",
    "delta",
    "k_used",
    "payload_bits",
    "snr_linear",
    "tau_comm_s",
    "latency_s",
    "verdict",
    "counterfactual_accept",
    "fallback_used",
    "bias",
    "tvd_xy",
    "tvd_pq",
    "utv_bound",
    "selection_bound",
    "beta_hat",
    "draft",
    "token",
    "x_d",
    "y_d",
];

impl RoundRecord {
    pub fn transmitted(&self) -> bool {
        self.delta == 1
    }

    fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        vec![
            self.sequence.to_string(),
            self.round.to_string(),
            fmt_sig9(self.u),
            self.delta.to_string(),
            self.k_used.map(|k| k.to_string()).unwrap_or_default(),
            self.payload_bits.to_string(),
            opt(self.snr_linear),
            fmt_sig9(self.tau_comm_s),
            fmt_sig9(self.latency_s),
            self.verdict.as_str().to_string(),
            self.counterfactual_accept.map(|b| b.to_string()).unwrap_or_default(),
            self.fallback_used.to_string(),
            fmt_sig9(self.bias),
            fmt_sig9(self.tvd_xy),
            opt(self.tvd_pq),
            opt(self.utv_bound),
            opt(self.selection_bound),
            opt(self.beta_hat),
            self.draft.to_string(),
            self.token.to_string(),
            fmt_sig9(self.x_d),
            fmt_sig9(self.y_d),
        ]
    }
}

/// Everything a round needs besides the oracle and sequence state.
#[derive(Debug, Clone)]
pub struct RoundContext<'a> {
    pub policy: PolicySpec,
    pub calibration: Option<&'a CalibrationSet>,
    pub channel: ChannelSpec,
    pub latency: LatencySpec,
    pub payload: PayloadSpec,
    pub uncertainty: UncertaintyConfig,
    pub seed: u64,
    /// Fixed selection for the offline variant, resolved once per run.
    pub offline: Option<KSelection>,
    /// Replaces the estimated uncertainty; test hook for boundary policies.
    pub u_override: Option<f64>,
    pub emit_frames: bool,
}

impl<'a> RoundContext<'a> {
    pub fn new(
        policy: PolicySpec,
        calibration: Option<&'a CalibrationSet>,
        channel: ChannelSpec,
        latency: LatencySpec,
        payload: PayloadSpec,
        uncertainty: UncertaintyConfig,
        seed: u64,
    ) -> Result<Self> {
        policy.validate(payload.vocab_size)?;
        channel.validate()?;
        latency.validate()?;
        payload.validate()?;
        uncertainty.validate()?;
        if policy.needs_calibration() && calibration.is_none() {
            return Err(Error::Config(format!("policy {} needs a calibration set", policy.name())));
        }
        if let Some(c) = calibration {
            if policy.needs_calibration() && c.vocab_size() != payload.vocab_size {
                return Err(Error::Config(format!(
                    "calibration vocabulary {} differs from payload vocabulary {}",
                    c.vocab_size(),
                    payload.vocab_size
                )));
            }
        }
        let offline = match policy {
            PolicySpec::CuhlmOffline { k_star: Some(k), theta, .. } => Some(KSelection {
                k_star: k,
                bound_value_at_k: calibration.map_or(f64::NAN, |c| c.utv_table.value_at(k)),
                policy: crate::compression::KPolicy::Offline { theta },
                saturated: k == payload.vocab_size,
            }),
            PolicySpec::CuhlmOffline { k_star: None, theta, .. } => {
                calibration.map(|c| select_k_offline(&c.utv_table, theta))
            }
            _ => None,
        };
        Ok(RoundContext {
            policy,
            calibration,
            channel,
            latency,
            payload,
            uncertainty,
            seed,
            offline,
            u_override: None,
            emit_frames: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub record: RoundRecord,
    pub frame: Option<WireFrame>,
    /// The sequence ends after this round.
    pub end_of_sequence: bool,
}

/// Per-round substream key.
pub fn round_key(sequence: u32, round: u32) -> u64 {
    (u64::from(sequence) << 32) | u64::from(round)
}

/// Runs one round of the configured policy and appends the final token to `state`.
pub fn run_round(
    ctx: &RoundContext<'_>,
    oracle: &mut dyn Oracle,
    state: &mut SequenceState,
    sequence: u32,
    round: u32,
) -> Result<RoundOutput> {
    let v = ctx.payload.vocab_size;
    let inputs = oracle.next_round(state)?;
    if inputs.slm_logits.len() != v || inputs.llm_logits.len() != v {
        return Err(Error::InvalidInput(format!(
            "oracle produced {} logits, payload expects |V| = {v}",
            inputs.slm_logits.len()
        )));
    }
    let key = round_key(sequence, round);
    let stream = |s: Stream| substream(ctx.seed, key, s);
    let x = softmax(&inputs.slm_logits, 1.0)?;
    let y = softmax(&inputs.llm_logits, 1.0)?;
    let tvd_xy = tvd(&x, &y)?;

    let d = sample(&x, &mut stream(Stream::Draft));
    let (x_d, y_d) = (x.get(d), y.get(d));
    let u = match ctx.u_override {
        Some(u) => u,
        None if ctx.policy == PolicySpec::LlmOnly => 0.0,
        None => estimate_u(&inputs.slm_logits, d, &ctx.uncertainty, &mut stream(Stream::Uncertainty))?.u(),
    };

    let mut record = RoundRecord {
        sequence,
        round,
        u,
        delta: 0,
        k_used: None,
        payload_bits: 0,
        snr_linear: None,
        tau_comm_s: 0.0,
        latency_s: ctx.latency.tau_slm_s,
        verdict: RoundVerdict::Skipped,
        counterfactual_accept: None,
        fallback_used: false,
        bias: 0.0,
        tvd_xy,
        tvd_pq: None,
        utv_bound: None,
        selection_bound: None,
        beta_hat: None,
        draft: d,
        token: d,
        x_d,
        y_d,
    };

    if ctx.policy == PolicySpec::LlmOnly {
        record.token = sample(&y, &mut stream(Stream::Verify));
        record.verdict = RoundVerdict::LlmDirect;
        record.latency_s = ctx.latency.tau_llm_s;
        return Ok(finish(oracle, state, record, None, inputs.eos));
    }

    let skip = match ctx.policy {
        PolicySpec::SlmOnly => true,
        PolicySpec::Hlm => false,
        PolicySpec::RandHlm { skip_prob } => stream(Stream::Skip).random::<f64>() < skip_prob,
        PolicySpec::Uhlm { u_th } | PolicySpec::CuhlmOffline { u_th, .. } | PolicySpec::CuhlmOnline { u_th, .. } => {
            u <= u_th
        }
        PolicySpec::LlmOnly => unreachable!("handled above"),
    };
    if let Some(cal) = ctx.calibration {
        record.beta_hat = Some(predict_beta(&cal.model, u));
    }

    if skip {
        let accept = 1.0 - rejection_prob(x_d, y_d)?;
        let cf = accept >= 1.0 || stream(Stream::Verify).random::<f64>() < accept;
        record.counterfactual_accept = Some(cf);
        return Ok(finish(oracle, state, record, None, inputs.eos));
    }

    let x_sorted = sort_desc(&x);
    let selection = match ctx.policy {
        PolicySpec::CuhlmOnline { theta, eta, .. } => {
            let cal = ctx.calibration.ok_or_else(|| Error::Config("online policy needs calibration".into()))?;
            let profile = TailProfile::new(&x_sorted, d)?;
            Some(select_k_online(&profile, u, &cal.model, theta, &SoftplusConfig::new(eta)?)?)
        }
        PolicySpec::CuhlmOffline { .. } => ctx.offline,
        _ => None,
    };
    let k = selection.map_or(v, |s| s.k_star);
    let exact = compress(&x_sorted, k, d)?;
    let sent = if ctx.payload.quantize {
        quantize_vocab(&exact, ctx.payload.b_prob)
    } else {
        exact.clone()
    };
    let bits = payload_bits(sent.n_entries(), &ctx.payload);
    let snr = sample_snr(&ctx.channel, &mut stream(Stream::Channel));
    let tau = uplink_latency(bits, ctx.channel.bandwidth_hz, snr)?;

    let x_hat = reconstruct(&sent)?;
    let q = distorted_resample_dist(&x_hat, &y)?;
    let verdict = verify_draft(d, sent.draft_entry.1, y_d, &q.dist, &mut stream(Stream::Verify))?;

    record.delta = 1;
    record.k_used = Some(k);
    record.payload_bits = bits;
    record.snr_linear = Some(snr);
    record.tau_comm_s = tau;
    record.latency_s = ctx.latency.tau_slm_s + tau + ctx.latency.tau_llm_s;
    record.verdict = if verdict.is_accepted() {
        RoundVerdict::Accepted
    } else {
        RoundVerdict::Rejected
    };
    record.token = verdict.token();
    record.fallback_used = q.fallback;
    record.bias = round_bias(&x, &y, &q.dist)?.0;
    record.tvd_pq = match resample_dist(&x, &y) {
        Ok(p) => Some(tvd(&p, &q.dist)?),
        Err(Error::ZeroDenominator(_)) => None,
        Err(e) => return Err(e),
    };
    if tvd_xy > 0.0 {
        record.utv_bound = Some(tail_l1(&x_sorted, &x_hat, k) / tvd_xy);
    }
    record.selection_bound = selection.map(|s| s.bound_value_at_k);

    let frame = if ctx.emit_frames {
        Some(WireFrame::from_vocab(round_index(sequence, round), &exact)?)
    } else {
        None
    };
    Ok(finish(oracle, state, record, frame, inputs.eos))
}

fn round_index(sequence: u32, round: u32) -> u32 {
    // Frames carry a 32-bit round field; multi-sequence runs fold the sequence in.
    sequence.wrapping_mul(1 << 16).wrapping_add(round)
}

fn finish(
    oracle: &dyn Oracle,
    state: &mut SequenceState,
    record: RoundRecord,
    frame: Option<WireFrame>,
    trace_eos: bool,
) -> RoundOutput {
    state.push(record.token);
    let end_of_sequence = trace_eos || oracle.eos_token() == Some(record.token);
    RoundOutput {
        record,
        frame,
        end_of_sequence,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub records: Vec<RoundRecord>,
    pub report: SimReport,
    /// Concatenated wire frames of transmitted rounds, when requested.
    pub transcript: Option<Vec<u8>>,
}

/// Runs `n_sequences` sequences of up to `r_max` rounds each. An exhausted
/// trace ends the run early.
pub fn run_sequences(
    ctx: &RoundContext<'_>,
    oracle: &mut dyn Oracle,
    n_sequences: u32,
    r_max: usize,
) -> Result<Simulation> {
    if r_max == 0 {
        return Err(Error::Config("r_max must be at least 1".into()));
    }
    if n_sequences == 0 {
        return Err(Error::Config("need at least one sequence".into()));
    }
    if oracle.vocab_size() != ctx.payload.vocab_size {
        return Err(Error::Config(format!(
            "oracle vocabulary {} differs from payload vocabulary {}",
            oracle.vocab_size(),
            ctx.payload.vocab_size
        )));
    }
    let r_max = u32::try_from(r_max).map_err(|_| Error::Config("r_max exceeds u32".into()))?;
    let mut records = Vec::new();
    let mut transcript = ctx.emit_frames.then(Vec::new);
    'outer: for s in 0..n_sequences {
        let mut state = SequenceState::with_prompt(u64::from(s));
        for r in 0..r_max {
            let out = match run_round(ctx, oracle, &mut state, s, r) {
                Ok(out) => out,
                Err(Error::EndOfTrace) => break 'outer,
                Err(e) => return Err(e),
            };
            if let (Some(buf), Some(frame)) = (transcript.as_mut(), out.frame.as_ref()) {
                frame.encode_into(buf);
            }
            records.push(out.record);
            if out.end_of_sequence {
                break;
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EndOfTrace);
    }
    let report = metrics(&records)?;
    Ok(Simulation {
        records,
        report,
        transcript,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub n_rounds: usize,
    pub n_transmitted: usize,
    pub tr: f64,
    /// `None` when no round was skipped.
    pub tsr: Option<f64>,
    /// Mean over transmitted rounds.
    pub mean_bias: f64,
    pub mean_throughput_tokens_per_s: f64,
    /// Mean `k` over transmitted rounds.
    pub mean_k: Option<f64>,
    /// Mean over all rounds, skipped ones counting zero.
    pub mean_payload_bits: f64,
    pub acceptance_rate_given_tx: Option<f64>,
    pub fallback_rounds: usize,
    pub mean_tvd_pq: Option<f64>,
}

/// Column order of sweep/report CSV output (after the grid columns).
pub const REPORT_COLUMNS: [&str; 11] = [
    "n_rounds",
    "n_transmitted",
    "tr",
    "tsr",
    "mean_bias",
    "mean_throughput_tokens_per_s",
    "mean_k",
    "mean_payload_bits",
    "acceptance_rate_given_tx",
    "fallback_rounds",
    "mean_tvd_pq",
];

impl SimReport {
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        vec![
            self.n_rounds.to_string(),
            self.n_transmitted.to_string(),
            fmt_sig9(self.tr),
            opt(self.tsr),
            fmt_sig9(self.mean_bias),
            fmt_sig9(self.mean_throughput_tokens_per_s),
            opt(self.mean_k),
            fmt_sig9(self.mean_payload_bits),
            opt(self.acceptance_rate_given_tx),
            self.fallback_rounds.to_string(),
            opt(self.mean_tvd_pq),
        ]
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn metrics(records: &[RoundRecord]) -> Result<SimReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no rounds to summarize".into()));
    }
    let n = records.len();
    let tx: Vec<&RoundRecord> = records.iter().filter(|r| r.transmitted()).collect();
    let total_latency: f64 = records.iter().map(|r| r.latency_s).sum();
    Ok(SimReport {
        n_rounds: n,
        n_transmitted: tx.len(),
        tr: tx.len() as f64 / n as f64,
        tsr: mean(
            records
                .iter()
                .filter_map(|r| r.counterfactual_accept)
                .map(|a| f64::from(u8::from(a))),
        ),
        mean_bias: mean(tx.iter().map(|r| r.bias)).unwrap_or(0.0),
        mean_throughput_tokens_per_s: n as f64 / total_latency,
        mean_k: mean(tx.iter().filter_map(|r| r.k_used).map(|k| k as f64)),
        mean_payload_bits: records.iter().map(|r| r.payload_bits as f64).sum::<f64>() / n as f64,
        acceptance_rate_given_tx: mean(
            tx.iter()
                .map(|r| f64::from(u8::from(r.verdict == RoundVerdict::Accepted))),
        ),
        fallback_rounds: tx.iter().filter(|r| r.fallback_used).count(),
        mean_tvd_pq: mean(tx.iter().filter_map(|r| r.tvd_pq)),
    })
}

pub fn write_records_jsonl<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json("round record", e))?;
        out.write_all(b"\n").map_err(|e| Error::io("round records", e))?;
    }
    Ok(())
}

pub fn write_records_csv<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_COLUMNS)
        .map_err(|e| Error::csv("round records", e))?;
    for r in records {
        w.write_record(r.csv_fields())
            .map_err(|e| Error::csv("round records", e))?;
    }
    w.flush().map_err(|e| Error::io("round records", e))
}

pub fn parse_record_line(line: &str) -> Result<RoundRecord> {
    serde_json::from_str(line).map_err(|e| Error::json("round record", e))
}

/// The device law seen by the server for a given `k`; exposed for audits.
pub fn server_view(x: &ProbVec, d: TokenId, k: usize) -> Result<ProbVec> {
    reconstruct(&compress(&sort_desc(x), k, d)?)
}
