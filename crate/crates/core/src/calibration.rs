//! Calibration runs: collect `(u, β_d)` pairs with both laws known, fit the
//! rejection model, estimate Δ and tabulate the expected server-side bound.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::compression::{log_k_grid, TailProfile, UtvTable};
use crate::dist::{sample, softmax, sort_desc, tvd};
use crate::error::{Error, Result};
use crate::oracle::{Oracle, SequenceState};
use crate::rng::{substream, Stream};
use crate::specdec::{rejection_prob, resample_dist, verify_draft};
use crate::uncertainty::{estimate_delta, estimate_u, fit_linear, LinearRejectionModel, UncertaintyConfig};

/// Mixed into the run seed so calibration draws never coincide with evaluation draws.
pub const CALIBRATION_SALT: u64 = 0xCA11_B4A7_E5EE_D000;
/// Calibration prompts start here so their contexts are disjoint from evaluation prompts.
pub const CALIBRATION_PROMPT_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaScope {
    #[default]
    AllRounds,
    /// Only rounds with `u > u_th`, i.e. those an uncertainty-gated policy would transmit.
    Transmitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOptions {
    #[serde(default = "default_n_rounds")]
    pub n_rounds: usize,
    #[serde(default = "default_grid_points")]
    pub k_grid_points: usize,
    #[serde(default)]
    pub delta_scope: DeltaScope,
}

fn default_n_rounds() -> usize {
    2000
}
fn default_grid_points() -> usize {
    64
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            n_rounds: default_n_rounds(),
            k_grid_points: default_grid_points(),
            delta_scope: DeltaScope::AllRounds,
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds < 2 {
            return Err(Error::Config(format!(
                "calibration needs at least 2 rounds, got {}",
                self.n_rounds
            )));
        }
        if self.k_grid_points < 2 {
            return Err(Error::Config("k grid needs at least 2 points".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRow {
    pub u: f64,
    pub beta: f64,
    pub x_d: f64,
    pub y_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub rows: Vec<CalibrationRow>,
    pub delta_hat: f64,
    pub utv_table: UtvTable,
    pub model: LinearRejectionModel,
}

/// Serialized form of the fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub a: f64,
    pub b: f64,
    pub mse: f64,
    pub r2: f64,
    pub delta_hat: f64,
}

impl CalibrationSet {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.u, r.beta)).collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.utv_table.vocab_size
    }

    pub fn model_file(&self) -> ModelFile {
        ModelFile {
            a: self.model.a,
            b: self.model.b,
            mse: self.model.mse,
            r2: self.model.r2,
            delta_hat: self.delta_hat,
        }
    }
}

/// Runs `opts.n_rounds` rounds of exact speculative decoding on `oracle`,
/// restarting sequences at `r_max` or EOS.
///
/// `u_th` is only consulted when `opts.delta_scope` is [`DeltaScope::Transmitted`].
pub fn calibrate(
    oracle: &mut dyn Oracle,
    opts: &CalibrationOptions,
    ucfg: &UncertaintyConfig,
    r_max: usize,
    seed: u64,
    u_th: f64,
) -> Result<CalibrationSet> {
    opts.validate()?;
    ucfg.validate()?;
    if r_max == 0 {
        return Err(Error::Config("r_max must be at least 1".into()));
    }
    let seed = seed ^ CALIBRATION_SALT;
    let v = oracle.vocab_size();
    let grid = log_k_grid(v, opts.k_grid_points);
    let mut utv_sum = vec![0.0; grid.len()];
    let mut utv_rounds = 0usize;
    let mut rows = Vec::with_capacity(opts.n_rounds);

    let mut prompt = CALIBRATION_PROMPT_BASE;
    let mut state = SequenceState::with_prompt(prompt);
    for i in 0..opts.n_rounds {
        let key = i as u64;
        let inputs = match oracle.next_round(&state) {
            Ok(r) => r,
            Err(Error::EndOfTrace) if rows.len() >= 2 => break,
            Err(e) => return Err(e),
        };
        if inputs.slm_logits.len() != v || inputs.llm_logits.len() != v {
            return Err(Error::InvalidInput("oracle changed vocabulary size".into()));
        }
        let x = softmax(&inputs.slm_logits, 1.0)?;
        let y = softmax(&inputs.llm_logits, 1.0)?;
        let d = sample(&x, &mut substream(seed, key, Stream::Draft));
        let u = estimate_u(&inputs.slm_logits, d, ucfg, &mut substream(seed, key, Stream::Uncertainty))?.u();
        let (x_d, y_d) = (x.get(d), y.get(d));
        rows.push(CalibrationRow {
            u,
            beta: rejection_prob(x_d, y_d)?,
            x_d,
            y_d,
        });

        let d_xy = tvd(&x, &y)?;
        if d_xy > 0.0 {
            let profile = TailProfile::new(&sort_desc(&x), d)?;
            for (acc, &k) in utv_sum.iter_mut().zip(&grid) {
                *acc += profile.numerator(k) / d_xy;
            }
            utv_rounds += 1;
        }

        let next = match resample_dist(&x, &y) {
            Ok(p) => verify_draft(d, x_d, y_d, &p, &mut substream(seed, key, Stream::Verify))?.token(),
            Err(Error::ZeroDenominator(_)) => d,
            Err(e) => return Err(e),
        };
        state.push(next);
        if inputs.eos || oracle.eos_token() == Some(next) || state.len() >= r_max {
            prompt += 1;
            state = SequenceState::with_prompt(prompt);
        }
    }

    let model = fit_linear(&rows.iter().map(|r| (r.u, r.beta)).collect::<Vec<_>>())?;
    let scoped: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| opts.delta_scope == DeltaScope::AllRounds || r.u > u_th)
        .map(|r| (r.x_d, r.y_d))
        .collect();
    let delta_hat = if scoped.is_empty() { 0.0 } else { estimate_delta(&scoped)? };
    let entries = grid
        .iter()
        .zip(&utv_sum)
        .map(|(&k, &s)| (k, if utv_rounds > 0 { s / utv_rounds as f64 } else { 0.0 }))
        .collect();
    Ok(CalibrationSet {
        rows,
        delta_hat,
        utv_table: UtvTable::new(v, entries)?,
        model,
    })
}

/// Shortest decimal rendering of `x` rounded to 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    let mag = rounded.abs();
    if (1e-4..1e15).contains(&mag) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

pub fn write_pairs_csv<W: Write>(rows: &[CalibrationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u", "beta", "x_d", "y_d"])
        .map_err(|e| Error::csv("calibration pairs", e))?;
    for r in rows {
        w.write_record([fmt_sig9(r.u), fmt_sig9(r.beta), fmt_sig9(r.x_d), fmt_sig9(r.y_d)])
            .map_err(|e| Error::csv("calibration pairs", e))?;
    }
    w.flush().map_err(|e| Error::io("calibration pairs", e))
}

pub fn read_pairs_csv<R: Read>(input: R) -> Result<Vec<CalibrationRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::csv("calibration pairs", e))?;
    if headers != vec!["u", "beta", "x_d", "y_d"] {
        return Err(Error::InvalidInput(format!("unexpected pairs header {headers:?}")));
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: CalibrationRow = row.map_err(|e| Error::csv("calibration pairs", e))?;
        let probs_ok = [row.beta, row.x_d, row.y_d].iter().all(|p| (0.0..=1.0).contains(p));
        if !(0.0..=1.0).contains(&row.u) || !probs_ok {
            return Err(Error::InvalidInput(format!("calibration row out of range: {row:?}")));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_utv_csv<W: Write>(table: &UtvTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "mean_utv"])
        .map_err(|e| Error::csv("U_TV table", e))?;
    for &(k, v) in &table.entries {
        w.write_record([k.to_string(), fmt_sig9(v)])
            .map_err(|e| Error::csv("U_TV table", e))?;
    }
    w.flush().map_err(|e| Error::io("U_TV table", e))
}

/// Reads a `(k, mean_utv)` table; the vocabulary size is its last `k`.
pub fn read_utv_csv<R: Read>(input: R) -> Result<UtvTable> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::csv("U_TV table", e))?;
    if headers != vec!["k", "mean_utv"] {
        return Err(Error::InvalidInput(format!("unexpected U_TV header {headers:?}")));
    }
    let mut entries = Vec::new();
    for row in r.deserialize() {
        let (k, v): (usize, f64) = row.map_err(|e| Error::csv("U_TV table", e))?;
        entries.push((k, v));
    }
    let v = entries.iter().map(|e| e.0).max().ok_or_else(|| Error::InvalidInput("empty U_TV table".into()))?;
    UtvTable::new(v, entries)
}

pub fn model_to_json(m: &ModelFile) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("model serializes");
    s.push('\n');
    s
}

pub fn parse_model_json(text: &str) -> Result<ModelFile> {
    let m: ModelFile = serde_json::from_str(text).map_err(|e| Error::json("model", e))?;
    let finite = [m.a, m.b, m.mse, m.r2, m.delta_hat].iter().all(|v| v.is_finite());
    if !finite || !(0.0..=1.0).contains(&m.delta_hat) || m.mse < 0.0 {
        return Err(Error::InvalidInput(format!("model out of range: {m:?}")));
    }
    Ok(m)
}

/// Assembles a calibration set from its three serialized parts.
pub fn assemble(rows: Vec<CalibrationRow>, utv_table: UtvTable, m: ModelFile) -> CalibrationSet {
    CalibrationSet {
        rows,
        delta_hat: m.delta_hat,
        utv_table,
        model: LinearRejectionModel {
            a: m.a,
            b: m.b,
            mse: m.mse,
            r2: m.r2,
        },
    }
}

/// Human-readable summary, one `key: value` per line.
pub fn summary(c: &CalibrationSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "rounds: {}", c.rows.len());
    let _ = writeln!(s, "a: {}", fmt_sig9(c.model.a));
    let _ = writeln!(s, "b: {}", fmt_sig9(c.model.b));
    let _ = writeln!(s, "r2: {}", fmt_sig9(c.model.r2));
    let _ = writeln!(s, "delta_hat: {}", fmt_sig9(c.delta_hat));
    s
}
