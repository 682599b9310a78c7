//! Single-document JSON run configuration and the entry points built on it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationOptions, CalibrationSet};
use crate::channel::{ChannelSpec, LatencySpec, PayloadSpec};
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::pipeline::{run_sequences, PolicySpec, RoundContext, Simulation};
use crate::uncertainty::UncertaintyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Also write the byte-level uplink transcript.
    #[serde(default)]
    pub transcript: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: default_out_dir(),
            transcript: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default)]
    pub payload: PayloadSpec,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default = "default_r_max")]
    pub r_max: usize,
    #[serde(default = "default_n_sequences")]
    pub n_sequences: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: OutputSpec,
}

fn default_r_max() -> usize {
    512
}
fn default_n_sequences() -> u32 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            oracle: OracleSpec::default(),
            policy: PolicySpec::default(),
            channel: ChannelSpec::default(),
            latency: LatencySpec::default(),
            payload: PayloadSpec::default(),
            uncertainty: UncertaintyConfig::default(),
            calibration: CalibrationOptions::default(),
            r_max: default_r_max(),
            n_sequences: default_n_sequences(),
            seed: 0,
            outputs: OutputSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::json("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Sets the vocabulary size of both the synthetic oracle and the payload.
    pub fn with_vocab(mut self, v: usize) -> Self {
        if let crate::oracle::OracleKind::Synthetic { vocab_size, .. } = &mut self.oracle.kind {
            *vocab_size = v;
        }
        self.payload.vocab_size = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.policy.validate(self.payload.vocab_size)?;
        self.channel.validate()?;
        self.latency.validate()?;
        self.payload.validate()?;
        self.uncertainty.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.calibration.validate()?;
        if self.r_max == 0 {
            return Err(Error::Config("r_max must be at least 1".into()));
        }
        if self.n_sequences == 0 {
            return Err(Error::Config("n_sequences must be at least 1".into()));
        }
        if let Some(v) = self.oracle.vocab_size() {
            if v != self.payload.vocab_size {
                return Err(Error::Config(format!(
                    "oracle vocabulary {v} differs from payload vocabulary {}",
                    self.payload.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Calibration run for `cfg`'s oracle on sequences disjoint from evaluation.
pub fn run_calibration(cfg: &RunConfig) -> Result<CalibrationSet> {
    cfg.validate()?;
    let mut oracle = cfg.oracle.build()?;
    calibrate(
        oracle.as_mut(),
        &cfg.calibration,
        &cfg.uncertainty,
        cfg.r_max,
        cfg.seed,
        cfg.policy.u_th().unwrap_or(0.0),
    )
}

/// Simulates `cfg`, calibrating first when the policy needs it and no set is supplied.
pub fn simulate(cfg: &RunConfig, calibration: Option<&CalibrationSet>) -> Result<Simulation> {
    cfg.validate()?;
    let owned;
    let calibration = match calibration {
        Some(c) => Some(c),
        None if cfg.policy.needs_calibration() => {
            owned = run_calibration(cfg)?;
            Some(&owned)
        }
        None => None,
    };
    let mut ctx = RoundContext::new(
        cfg.policy,
        calibration,
        cfg.channel,
        cfg.latency,
        cfg.payload,
        cfg.uncertainty,
        cfg.seed,
    )?;
    ctx.emit_frames = cfg.outputs.transcript;
    let mut oracle = cfg.oracle.build()?;
    run_sequences(&ctx, oracle.as_mut(), cfg.n_sequences, cfg.r_max)
}
