use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use cuhlm::calibration::{
    assemble, parse_model_json, read_pairs_csv, read_utv_csv, summary, write_pairs_csv, write_utv_csv, model_to_json,
    CalibrationSet,
};
use cuhlm::channel::Fading;
use cuhlm::config::{run_calibration, simulate, RunConfig};
use cuhlm::pipeline::{
    metrics, parse_record_line, write_records_csv, write_records_jsonl, PolicySpec, RoundRecord, SimReport,
    REPORT_COLUMNS,
};
use cuhlm::verification::{run_verify, VerifyOptions};
use cuhlm::Error;

const PAIRS_FILE: &str = "calibration_pairs.csv";
const UTV_FILE: &str = "calibration_utv.csv";
const MODEL_FILE: &str = "model.json";

#[derive(Parser, Debug)]
#[command(name = "cuhlm", version, about = "Hybrid device/server token generation simulator")]
#[command(after_help = "Exit codes: 0 success, 1 configuration or input error, 2 verification failure, 3 I/O error.")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: the config's outputs.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record / report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the uncertainty model and U_TV table on calibration sequences.
    ///
    /// Writes calibration_pairs.csv (u,beta,x_d,y_d), calibration_utv.csv
    /// (k,mean_utv) and model.json {a, b, mse, r2, delta_hat}.
    Calibrate {
        /// Number of calibration rounds (overrides calibration.n_rounds).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run the configured policy and write report.json plus the round records.
    #[command(after_help = RECORDS_HELP)]
    Simulate {
        /// Directory holding a previous `calibrate` output; calibrates afresh otherwise.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Number of sequences (overrides n_sequences).
        #[arg(long)]
        sequences: Option<u32>,
    },
    /// Run a grid of simulations and write sweep.csv, one row per grid point.
    #[command(after_help = SWEEP_HELP)]
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// Comma-separated fading models (fixed, rayleigh, rician[:K_dB]); default: the config's.
        #[arg(long, value_delimiter = ',')]
        fading: Vec<String>,
        /// Number of consecutive seeds per grid point, starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Run the randomized property suites and report pass/fail counts.
    Verify {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        /// Scales the dominance-bound numerator (negative control when < 1).
        #[arg(long, hide = true, default_value_t = 1.0)]
        tamper_numerator_scale: f64,
    },
    /// Summarize a JSONL record stream into a report.
    Report {
        /// Records file written by `simulate --format jsonl`.
        records: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    SnrDb,
    UTh,
    Theta,
    K,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::SnrDb => "snr_db",
            Axis::UTh => "u_th",
            Axis::Theta => "theta",
            Axis::K => "k",
        }
    }
}

const RECORDS_HELP: &str = "CSV record columns, in order: sequence, round, u, delta, k_used, payload_bits, \
snr_linear, tau_comm_s, latency_s, verdict, counterfactual_accept, fallback_used, bias, tvd_xy, tvd_pq, \
utv_bound, selection_bound, beta_hat, draft, token, x_d, y_d. Floats carry 9 significant digits; \
empty cells mean not applicable.";

const SWEEP_HELP: &str = "CSV columns, in order: axis, value, fading, seed, n_rounds, n_transmitted, tr, tsr, \
mean_bias, mean_throughput_tokens_per_s, mean_k, mean_payload_bits, acceptance_rate_given_tx, \
fallback_rounds, mean_tvd_pq. Rows follow grid order (fading, then value, then seed). \
The k axis runs the offline compressed policy with that fixed k.";

enum Failure {
    Config(String),
    Verification(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(Error::io(path, e).to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("I/O error: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.outputs.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.outputs.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Calibrate { rounds } => {
            let mut cfg = load_config(g)?;
            if let Some(n) = rounds {
                cfg.calibration.n_rounds = n;
            }
            cfg.validate()?;
            let calib = run_calibration(&cfg)?;
            let dir = out_dir(&cfg)?;
            save_calibration(&calib, &dir)?;
            print!("{}", summary(&calib));
            Ok(())
        }
        Command::Simulate {
            calibration,
            sequences,
        } => {
            let mut cfg = load_config(g)?;
            if let Some(n) = sequences {
                cfg.n_sequences = n;
            }
            cfg.validate()?;
            let calib = calibration.as_deref().map(load_calibration).transpose()?;
            let sim = simulate(&cfg, calib.as_ref())?;
            let dir = out_dir(&cfg)?;
            write_records(&sim.records, &dir, g.format)?;
            let report = report_json(&sim.report);
            write_text(&dir.join("report.json"), &report)?;
            if let Some(t) = &sim.transcript {
                let p = dir.join("transcript.bin");
                fs::write(&p, t).map_err(|e| io_err(&p, e))?;
            }
            print!("{report}");
            Ok(())
        }
        Command::Sweep {
            axis,
            values,
            fading,
            seeds,
            calibration,
        } => {
            let cfg = load_config(g)?;
            let calib = calibration.as_deref().map(load_calibration).transpose()?;
            let fading = if fading.is_empty() {
                vec![cfg.channel.fading]
            } else {
                fading.iter().map(|f| f.parse::<Fading>()).collect::<Result<Vec<_>, _>>()?
            };
            if seeds == 0 {
                return Err(Failure::Config("--seeds must be at least 1".into()));
            }
            let rows = sweep(&cfg, calib, axis, &values, &fading, seeds, g.jobs)?;
            let dir = out_dir(&cfg)?;
            let path = dir.join("sweep.csv");
            let mut w = create(&path)?;
            w.write_all(rows.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))?;
            print!("{rows}");
            Ok(())
        }
        Command::Verify {
            cases,
            tamper_numerator_scale,
        } => {
            let cfg = load_config(g)?;
            let eta = match cfg.policy {
                PolicySpec::CuhlmOnline { eta, .. } => eta,
                _ => 10.0,
            };
            let report = run_verify(&VerifyOptions {
                n_cases: cases,
                seed: cfg.seed,
                eta,
                numerator_scale: tamper_numerator_scale,
            })?;
            for s in &report.suites {
                println!(
                    "{} {}: {}/{} cases, worst margin {}",
                    if s.passed() { "PASS" } else { "FAIL" },
                    s.name,
                    s.cases - s.failures,
                    s.cases,
                    cuhlm::calibration::fmt_sig9(s.worst_margin)
                );
            }
            let dir = out_dir(&cfg)?;
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            write_text(&dir.join("verify.json"), &json)?;
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .suites
                    .iter()
                    .filter(|s| !s.passed())
                    .map(|s| s.name.as_str())
                    .collect();
                Err(Failure::Verification(failed.join(", ")))
            }
        }
        Command::Report { records } => {
            let f = fs::File::open(&records).map_err(|e| io_err(&records, e))?;
            let mut parsed: Vec<RoundRecord> = Vec::new();
            for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| io_err(&records, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r = parse_record_line(&line)
                    .map_err(|e| Failure::Config(format!("{}:{}: {e}", records.display(), i + 1)))?;
                parsed.push(r);
            }
            let report = metrics(&parsed)?;
            match g.format {
                Format::Jsonl => print!("{}", report_json(&report)),
                Format::Csv => {
                    println!("{}", REPORT_COLUMNS.join(","));
                    println!("{}", report.csv_fields().join(","));
                }
            }
            Ok(())
        }
    }
}

fn report_json(r: &SimReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

fn write_records(records: &[RoundRecord], dir: &Path, format: Format) -> Result<(), Failure> {
    let (name, csv) = match format {
        Format::Csv => ("records.csv", true),
        Format::Jsonl => ("records.jsonl", false),
    };
    let path = dir.join(name);
    let mut w = create(&path)?;
    if csv {
        write_records_csv(records, &mut w)?;
    } else {
        write_records_jsonl(records, &mut w)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn save_calibration(c: &CalibrationSet, dir: &Path) -> Result<(), Failure> {
    let p = dir.join(PAIRS_FILE);
    let mut w = create(&p)?;
    write_pairs_csv(&c.rows, &mut w)?;
    w.flush().map_err(|e| io_err(&p, e))?;
    let p = dir.join(UTV_FILE);
    let mut w = create(&p)?;
    write_utv_csv(&c.utv_table, &mut w)?;
    w.flush().map_err(|e| io_err(&p, e))?;
    write_text(&dir.join(MODEL_FILE), &model_to_json(&c.model_file()))
}

fn load_calibration(dir: &Path) -> Result<CalibrationSet, Failure> {
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::open(&p).map_err(|e| io_err(&p, e))
    };
    let rows = read_pairs_csv(open(PAIRS_FILE)?)?;
    let table = read_utv_csv(open(UTV_FILE)?)?;
    let p = dir.join(MODEL_FILE);
    let model = parse_model_json(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?)?;
    Ok(assemble(rows, table, model))
}

fn apply_axis(cfg: &mut RunConfig, axis: Axis, value: f64) -> Result<(), Failure> {
    match axis {
        Axis::SnrDb => cfg.channel.mean_snr_db = value,
        Axis::UTh => {
            if cfg.policy.u_th().is_none() {
                return Err(Failure::Config(format!(
                    "policy {} has no u_th to sweep",
                    cfg.policy.name()
                )));
            }
            cfg.policy = cfg.policy.with_u_th(value);
        }
        Axis::Theta => match cfg.policy {
            PolicySpec::CuhlmOnline { .. } | PolicySpec::CuhlmOffline { .. } => {
                cfg.policy = cfg.policy.with_theta(value)
            }
            _ => {
                return Err(Failure::Config(format!(
                    "policy {} has no theta to sweep",
                    cfg.policy.name()
                )))
            }
        },
        Axis::K => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Failure::Config(format!("k = {value} must be a positive integer")));
            }
            let (u_th, theta) = match cfg.policy {
                PolicySpec::CuhlmOffline { u_th, theta, .. } | PolicySpec::CuhlmOnline { u_th, theta, .. } => {
                    (u_th, theta)
                }
                p => (p.u_th().unwrap_or(0.8), 0.1),
            };
            cfg.policy = PolicySpec::CuhlmOffline {
                u_th,
                k_star: Some(value as usize),
                theta,
            };
        }
    }
    cfg.validate()?;
    Ok(())
}

fn sweep(
    base: &RunConfig,
    calib: Option<CalibrationSet>,
    axis: Axis,
    values: &[f64],
    fading: &[Fading],
    seeds: u64,
    jobs: Option<usize>,
) -> Result<String, Failure> {
    let mut grid = Vec::new();
    for &f in fading {
        for &v in values {
            for s in 0..seeds {
                let mut cfg = base.clone();
                cfg.channel.fading = f;
                cfg.seed = base.seed.wrapping_add(s);
                cfg.outputs.transcript = false;
                apply_axis(&mut cfg, axis, v)?;
                grid.push((f, v, cfg));
            }
        }
    }
    // One calibration per seed serves every grid point sharing that seed.
    let calib_needed = calib.is_none() && grid.iter().any(|(_, _, c)| c.policy.needs_calibration());
    let mut calibrations = std::collections::BTreeMap::new();
    if calib_needed {
        for s in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed.wrapping_add(s);
            calibrations.insert(cfg.seed, run_calibration(&cfg)?);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<SimReport, Error>> = pool.install(|| {
        grid.par_iter()
            .map(|(_, _, cfg)| {
                let c = calib.as_ref().or_else(|| calibrations.get(&cfg.seed));
                simulate(cfg, c).map(|s| s.report)
            })
            .collect()
    });

    let mut out = String::new();
    out.push_str("axis,value,fading,seed,");
    out.push_str(&REPORT_COLUMNS.join(","));
    out.push('\n');
    for ((f, v, cfg), res) in grid.iter().zip(results) {
        let report = res?;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            axis.name(),
            cuhlm::calibration::fmt_sig9(*v),
            f,
            cfg.seed,
            report.csv_fields().join(",")
        ));
    }
    Ok(out)
}
