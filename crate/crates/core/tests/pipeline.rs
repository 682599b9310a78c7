use cuhlm::calibration::CalibrationSet;
use cuhlm::channel::{payload_bits, ChannelSpec, Fading, LatencySpec, PayloadSpec};
use cuhlm::config::{run_calibration, simulate, RunConfig};
use cuhlm::dist::LogitVec;
use cuhlm::oracle::{Oracle, OracleSpec, TraceOracle, TraceRecord};
use cuhlm::pipeline::{run_sequences, PolicySpec, RoundContext, RoundRecord, RoundVerdict};
use cuhlm::uncertainty::{thresholds, LinearRejectionModel, UncertaintyConfig};

const V: usize = 512;

fn config(seed: u64, policy: PolicySpec) -> RunConfig {
    let mut cfg = RunConfig {
        policy,
        seed,
        r_max: 96,
        n_sequences: 3,
        ..RunConfig::default()
    }
    .with_vocab(V);
    cfg.oracle = OracleSpec::synthetic(1.5, 1.0, V, seed);
    cfg.calibration.n_rounds = 600;
    cfg
}

fn calibration(seed: u64) -> CalibrationSet {
    run_calibration(&config(seed, PolicySpec::default())).unwrap()
}

fn context<'a>(policy: PolicySpec, cal: Option<&'a CalibrationSet>, seed: u64) -> RoundContext<'a> {
    RoundContext::new(
        policy,
        cal,
        ChannelSpec::default(),
        LatencySpec::default(),
        PayloadSpec::new(8, V),
        UncertaintyConfig::default(),
        seed,
    )
    .unwrap()
}

/// Every SLM resample returns the top token, so the estimated uncertainty is always zero.
fn confident_trace(n: usize) -> Vec<TraceRecord> {
    (0..n)
        .map(|i| {
            let mut slm = vec![0.0; V];
            slm[i % V] = 200.0;
            let llm: Vec<f64> = (0..V).map(|j| ((i * 7 + j * 13) % 17) as f64 * 0.3).collect();
            TraceRecord {
                slm_logits: LogitVec::new(slm).unwrap(),
                llm_logits: LogitVec::new(llm).unwrap(),
                eos: false,
            }
        })
        .collect()
}

fn run_trace(ctx: &RoundContext<'_>, trace: &[TraceRecord]) -> Vec<RoundRecord> {
    let mut oracle = TraceOracle::from_records(trace.to_vec()).unwrap();
    run_sequences(ctx, &mut oracle, 1, trace.len()).unwrap().records
}

#[test]
fn bound_chain_holds_per_round() {
    for seed in 0..3 {
        let cal = calibration(seed);
        let online = simulate(&config(seed, PolicySpec::default()), Some(&cal)).unwrap();
        let offline = simulate(
            &config(
                seed,
                PolicySpec::CuhlmOffline {
                    u_th: 0.8,
                    k_star: None,
                    theta: 0.1,
                },
            ),
            Some(&cal),
        )
        .unwrap();
        let mut checked = 0;
        for r in online.records.iter().chain(&offline.records) {
            if let (Some(gap), Some(bound)) = (r.tvd_pq, r.utv_bound) {
                assert!(gap <= bound + 1e-12, "{r:?}");
                checked += 1;
            }
        }
        for r in &online.records {
            if let (Some(bound), Some(sel)) = (r.utv_bound, r.selection_bound) {
                assert!(bound <= sel + 1e-12, "{r:?}");
                assert!(sel <= 0.1 || r.k_used == Some(V), "{r:?}");
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn online_payload_respects_accounting_identity() {
    for seed in 0..3 {
        let cal = calibration(seed);
        let cu = simulate(&config(seed, PolicySpec::default()), Some(&cal)).unwrap();
        let hlm = simulate(&config(seed, PolicySpec::Hlm), Some(&cal)).unwrap();
        let mean_k = cu.report.mean_k.unwrap();
        let ceiling = hlm.report.mean_payload_bits * (mean_k + 1.0) / V as f64;
        assert!(cu.report.mean_payload_bits <= ceiling + 1e-9);
        assert!(cu.report.mean_payload_bits < hlm.report.mean_payload_bits);

        let spec = PayloadSpec::new(8, V);
        for r in &cu.records {
            match r.k_used {
                Some(k) => {
                    let n = r.payload_bits / u64::from(spec.b_prob + spec.b_index());
                    assert!(n == k as u64 || n == k as u64 + 1);
                    assert_eq!(r.payload_bits % u64::from(spec.b_prob + spec.b_index()), 0);
                    assert!(r.payload_bits >= payload_bits(k, &spec));
                }
                None => assert_eq!(r.payload_bits, 0),
            }
        }
    }
}

#[test]
fn risk_averse_threshold_only_skips_certain_acceptances() {
    // Synthetic fits have a positive intercept, so no u maps to zero; use a model that crosses zero.
    let mut cal = calibration(4);
    cal.model = LinearRejectionModel::new(0.815, -0.066);
    let t = thresholds(&cal.model, cal.delta_hat).unwrap().risk_averse;
    let sim = simulate(&config(4, PolicySpec::Uhlm { u_th: t }), Some(&cal)).unwrap();
    let skipped: Vec<_> = sim
        .records
        .iter()
        .filter(|r| r.verdict == RoundVerdict::Skipped)
        .collect();
    assert!(!skipped.is_empty());
    for r in skipped {
        assert_eq!(r.beta_hat, Some(0.0));
    }
}

#[test]
fn zero_uncertainty_uhlm_skips_everything() {
    let trace = confident_trace(40);
    let uhlm = run_trace(&context(PolicySpec::Uhlm { u_th: 0.0 }, None, 3), &trace);
    let slm = run_trace(&context(PolicySpec::SlmOnly, None, 3), &trace);
    assert!(uhlm.iter().all(|r| r.u == 0.0 && r.verdict == RoundVerdict::Skipped));
    assert_eq!(uhlm, slm);
}

#[test]
fn full_uncertainty_uhlm_matches_hlm() {
    let trace = cuhlm::oracle::record_trace(
        OracleSpec::synthetic(1.5, 1.0, V, 8).build().unwrap().as_mut(),
        0,
        60,
    )
    .unwrap();
    let mut forced = context(PolicySpec::Uhlm { u_th: 0.8 }, None, 5);
    forced.u_override = Some(1.0);
    let mut hlm = context(PolicySpec::Hlm, None, 5);
    hlm.u_override = Some(1.0);
    assert_eq!(run_trace(&forced, &trace), run_trace(&hlm, &trace));
}

#[test]
fn forced_full_vocabulary_matches_hlm_tokens() {
    let trace = cuhlm::oracle::record_trace(
        OracleSpec::synthetic(1.5, 1.0, V, 9).build().unwrap().as_mut(),
        0,
        60,
    )
    .unwrap();
    let cal = calibration(9);
    let mut full = context(
        PolicySpec::CuhlmOffline {
            u_th: 0.0,
            k_star: Some(V),
            theta: 1e9,
        },
        Some(&cal),
        6,
    );
    full.u_override = Some(1.0);
    let mut hlm = context(PolicySpec::Hlm, None, 6);
    hlm.u_override = Some(1.0);
    let a = run_trace(&full, &trace);
    let b = run_trace(&hlm, &trace);
    let verdicts = |rs: &[RoundRecord]| rs.iter().map(|r| (r.verdict, r.token)).collect::<Vec<_>>();
    assert_eq!(verdicts(&a), verdicts(&b));
    assert!(a.iter().all(|r| r.bias < 1e-10 && !r.fallback_used));
}

#[test]
fn rician_and_fixed_channels_run() {
    for fading in [Fading::Fixed, Fading::Rician { k_db: 6.0 }] {
        let mut cfg = config(1, PolicySpec::Hlm);
        cfg.channel.fading = fading;
        let sim = simulate(&cfg, None).unwrap();
        assert_eq!(sim.report.tr, 1.0);
        assert!(sim.report.mean_throughput_tokens_per_s > 0.0);
    }
}

#[test]
fn eos_ends_sequences_early() {
    let mut cfg = config(2, PolicySpec::SlmOnly);
    if let cuhlm::oracle::OracleKind::Synthetic { eos_prob, .. } = &mut cfg.oracle.kind {
        *eos_prob = 0.3;
    }
    let sim = simulate(&cfg, None).unwrap();
    assert!(sim.records.len() < cfg.r_max * cfg.n_sequences as usize);
    let oracle: Box<dyn Oracle> = cfg.oracle.build().unwrap();
    let eos = oracle.eos_token().unwrap();
    for w in sim.records.windows(2) {
        if w[0].sequence == w[1].sequence {
            assert_ne!(w[0].token, eos);
        }
    }
}
