//! Randomized property suites behind `cuhlm verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compression::{
    online_denominator, reconstruct, compress, softplus_tvd, tail_l1, SoftplusConfig,
};
use crate::dist::{sample, sort_desc, tvd, ProbVec};
use crate::error::{Error, Result};
use crate::specdec::{distorted_resample_dist, hybrid_output_dist, rejection_prob, resample_dist};
use crate::uncertainty::{rejection_risk, LinearRejectionModel, RiskEstimator};

/// Vocabulary sizes the random cases cycle through.
pub const VERIFY_VOCABS: [usize; 4] = [2, 8, 64, 1024];
pub const UNBIASEDNESS_TOLERANCE: f64 = 1e-10;
/// Uniform uncertainty samples for the risk suite; far fewer lets estimation noise exceed the bound's slack.
pub const RISK_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub n_cases: usize,
    pub seed: u64,
    pub eta: f64,
    /// Multiplies the dominance-bound numerator. Anything below 1 is a deliberate
    /// tampering used as a negative control.
    pub numerator_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            n_cases: 1000,
            seed: 0,
            eta: 10.0,
            numerator_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Smallest slack observed; negative means a violation.
    pub worst_margin: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

struct Tally {
    name: &'static str,
    cases: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            cases: 0,
            failures: 0,
            worst: f64::INFINITY,
        }
    }

    fn record(&mut self, margin: f64) {
        self.cases += 1;
        if !(margin >= 0.0) {
            self.failures += 1;
        }
        self.worst = self.worst.min(margin);
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            cases: self.cases,
            failures: self.failures,
            worst_margin: self.worst,
        }
    }
}

/// Softmax of Gaussian logits with a random scale, so cases range from flat to peaked.
pub fn random_dist<R: Rng + ?Sized>(v: usize, rng: &mut R) -> ProbVec {
    let scale = 0.2 + 3.0 * rng.random::<f64>();
    let z: Vec<f64> = (0..v)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            (scale * n).exp()
        })
        .collect();
    ProbVec::from_weights(z).expect("positive weights")
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.n_cases == 0 {
        return Err(Error::InvalidInput("no verification cases requested".into()));
    }
    let cfg = SoftplusConfig::new(opts.eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut unbiased = Tally::new("unbiasedness");
    let mut dominance = Tally::new("bound_dominance");
    let mut online = Tally::new("online_dominance");
    let mut softplus_err = Tally::new("softplus_error");

    for i in 0..opts.n_cases {
        let v = VERIFY_VOCABS[i % VERIFY_VOCABS.len()];
        let x = random_dist(v, &mut rng);
        let y = random_dist(v, &mut rng);

        if let Ok(p) = resample_dist(&x, &y) {
            let h = hybrid_output_dist(&x, &y, &p)?;
            let err = h
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            unbiased.record(UNBIASEDNESS_TOLERANCE - err);
        }

        let sp = softplus_tvd(&x, &y, &cfg)?;
        let d_xy = tvd(&x, &y)?;
        softplus_err.record((cfg.max_error() - (sp - d_xy)).min(sp - d_xy + 1e-12));

        let d = sample(&x, &mut rng);
        let k = rng.random_range(1..=v);
        let xs = sort_desc(&x);
        let x_hat = reconstruct(&compress(&xs, k, d)?)?;
        let numerator = opts.numerator_scale * tail_l1(&xs, &x_hat, k);
        if d_xy > 0.0 {
            let p = resample_dist(&x, &y)?;
            let q = distorted_resample_dist(&x_hat, &y)?;
            let gap = tvd(&p, &q.dist)?;
            dominance.record(numerator / d_xy - gap + 1e-12);
        }
        if v > 1 {
            let beta = rejection_prob(x.get(d), y.get(d))?;
            let bar = numerator / online_denominator(x.get(d), beta, &cfg);
            let hat = numerator / sp;
            // Equal when the numerator vanishes (k covers the whole vocabulary).
            online.record(if numerator > 0.0 { bar - hat } else { 0.0 });
        }
    }

    let mut risk = Tally::new("risk_bound");
    let model = LinearRejectionModel::new(0.815, -0.066);
    let u: Vec<f64> = (0..RISK_SAMPLES).map(|_| rng.random::<f64>()).collect();
    let lo = model.zero_crossing();
    let hi = (1.0 - model.b) / model.a;
    for j in 0..20 {
        let u_th = lo + (hi - lo) * (j as f64 + 1.0) / 20.0;
        for est in [RiskEstimator::GaussianKde, RiskEstimator::DiscretePmf { m: 1000 }] {
            let rep = rejection_risk(&model, &u, u_th.min(1.0), est)?;
            risk.record(rep.bound - rep.empirical_r);
        }
    }

    Ok(VerifyReport {
        suites: vec![
            unbiased.finish(),
            dominance.finish(),
            online.finish(),
            softplus_err.finish(),
            risk.finish(),
        ],
    })
}
