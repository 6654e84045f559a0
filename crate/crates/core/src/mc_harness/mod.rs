//! Seeded Monte Carlo replications of the estimators and the summary tables
//! built from them.
//!
//! Replication `r` at sample size `n` draws its sample from
//! [`replication_seed`]`(base_seed, n, r)` alone, so results do not depend on
//! scheduling or on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deconv_twofactor::{run_pipeline, DeconvReport, RoundTrip};
use crate::dgp_oracle::{simulate, DgpSpec, Sample, Structure};
use crate::error::{Error, Result};
use crate::identification_analyzer::{fit_vy_comparator, VyConfig};
use crate::kernel_np::{default_bandwidths, fit_surfaces, BandwidthProfile, GridCache, KernelFn};
use crate::rank_estimator::{fit_rank, fit_rank_infeasible, RankFitConfig};
use crate::report::EstimateReport;
use crate::rng::{child_seed, replication_seed};
use crate::stats;
use crate::wls_series_estimator::{fit_series, fit_wls, PairWeightConfig, SeriesConfig};

/// Largest sample size kept by the quick profile.
pub const QUICK_MAX_N: usize = 400;
pub const QUICK_REPLICATIONS: usize = 100;
/// Ordered pairs drawn per rank fit under the quick profile.
pub const QUICK_PAIR_SUBSAMPLE: usize = 20_000;
/// Points per axis of the cached first-stage surface.
pub const CACHE_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    Rank,
    RankInfeasible,
    Wls,
    Series,
    Vy,
}

impl McEstimator {
    pub const ALL: [McEstimator; 5] = [McEstimator::Rank, McEstimator::RankInfeasible, McEstimator::Wls, McEstimator::Series, McEstimator::Vy];

    pub fn label(self) -> &'static str {
        match self {
            McEstimator::Rank => "rank",
            McEstimator::RankInfeasible => "rank_infeasible",
            McEstimator::Wls => "wls",
            McEstimator::Series => "series",
            McEstimator::Vy => "vy",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::Input(format!("unknown estimator '{s}'")))
    }

    /// Column heading in the markdown tables.
    fn heading(self) -> &'static str {
        match self {
            McEstimator::Rank => "KMZ",
            McEstimator::RankInfeasible => "KMZ (oracle ratios)",
            McEstimator::Wls => "WLS",
            McEstimator::Series => "Series",
            McEstimator::Vy => "VY",
        }
    }

    fn needs_first_stage(self) -> bool {
        self != McEstimator::RankInfeasible
    }
}

fn default_estimators() -> Vec<McEstimator> {
    vec![McEstimator::Rank, McEstimator::Vy]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Label written to the `design` column.
    pub design: String,
    pub spec: DgpSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<McEstimator>,
    pub n_list: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub quick: bool,
    /// Ordered pairs drawn per rank fit; overrides `rank.pair_subsample`.
    #[serde(default)]
    pub pair_subsample: Option<usize>,
    #[serde(default)]
    pub rank: RankFitConfig,
    #[serde(default)]
    pub pair_weights: PairWeightConfig,
    #[serde(default)]
    pub series: SeriesConfig,
    #[serde(default)]
    pub vy: VyConfig,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl McConfig {
    pub fn new(design: &str, spec: DgpSpec, estimators: Vec<McEstimator>, n_list: Vec<usize>, replications: usize, base_seed: u64) -> Self {
        Self {
            design: design.to_string(),
            spec,
            estimators,
            n_list,
            replications,
            base_seed,
            quick: false,
            pair_subsample: None,
            rank: RankFitConfig::default(),
            pair_weights: PairWeightConfig::default(),
            series: SeriesConfig::default(),
            vy: VyConfig::default(),
            out_dir: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid Monte Carlo config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n_list.is_empty() {
            return Err(Error::Config("n_list must not be empty".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        if self.design.is_empty() || self.design.contains([',', '"', '\n', '|']) {
            return Err(Error::Config(format!("design label '{}' must be nonempty without commas, quotes, pipes or newlines", self.design)));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(Error::Config("estimators must not repeat".into()));
        }
        let mut ns = self.n_list.clone();
        ns.sort();
        ns.dedup();
        if ns.len() != self.n_list.len() {
            return Err(Error::Config("n_list must not repeat".into()));
        }
        self.spec.validate()?;
        self.rank.validate()?;
        self.pair_weights.validate()?;
        if self.pair_subsample == Some(0) {
            return Err(Error::Config("pair subsample must be positive".into()));
        }
        Ok(())
    }

    /// The CI-scale profile: sample sizes up to [`QUICK_MAX_N`], at most
    /// [`QUICK_REPLICATIONS`] replications and pair subsampling on.
    pub fn quick_profile(&self) -> Result<Self> {
        let mut c = self.clone();
        c.n_list.retain(|&n| n <= QUICK_MAX_N);
        if c.n_list.is_empty() {
            return Err(Error::Config(format!("quick profile keeps n <= {QUICK_MAX_N}, but n_list is {:?}", self.n_list)));
        }
        c.replications = c.replications.min(QUICK_REPLICATIONS);
        c.pair_subsample = c.pair_subsample.or(Some(QUICK_PAIR_SUBSAMPLE));
        c.quick = true;
        Ok(c)
    }

    /// Configuration actually run: the quick profile when `quick` is set.
    pub fn effective(&self) -> Result<Self> {
        self.validate()?;
        if self.quick {
            self.quick_profile()
        } else {
            Ok(self.clone())
        }
    }

    fn rank_config(&self, seed: u64) -> RankFitConfig {
        let mut c = self.rank.clone();
        if self.pair_subsample.is_some() {
            c.pair_subsample = self.pair_subsample;
        }
        c.subsample_seed = child_seed(seed, 1);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub bias: f64,
    /// Sample standard deviation (divisor `R - 1`), zero when `R = 1`.
    pub std: f64,
    pub rmse: f64,
    pub mad: f64,
}

impl ErrorStats {
    fn rounded(self) -> Self {
        Self { bias: round3(self.bias), std: round3(self.std), rmse: round3(self.rmse), mad: round3(self.mad) }
    }
}

/// Bias, sample standard deviation, root mean squared error and median
/// absolute deviation from `truth`.
///
/// `rmse^2 = bias^2 + std^2 (R - 1) / R`, because the RMSE uses the population
/// divisor and `std` the sample one.
pub fn stats(estimates: &[f64], truth: f64) -> Result<ErrorStats> {
    if estimates.is_empty() {
        return Err(Error::Input("statistics need at least one estimate".into()));
    }
    if !truth.is_finite() || estimates.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("estimates and truth must be finite".into()));
    }
    let err: Vec<f64> = estimates.iter().map(|e| e - truth).collect();
    let abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
    Ok(ErrorStats {
        bias: stats::mean(&err),
        std: stats::sd(estimates),
        rmse: (err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64).sqrt(),
        mad: stats::median(&abs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum McFlag {
    /// A single successful replication: `std` is undefined and reported as 0.
    SingleReplication,
    /// Every replication failed, so no statistics exist.
    AllFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub design: String,
    pub estimator: McEstimator,
    pub n: usize,
    /// `None` when every replication failed.
    pub alpha: Option<ErrorStats>,
    /// Only for estimators that also report `gamma`.
    pub gamma: Option<ErrorStats>,
    pub successes: usize,
    pub failures: usize,
    pub flags: Vec<McFlag>,
    /// First error message, if any replication failed.
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTable {
    pub design: String,
    pub spec_fingerprint: String,
    pub replications: usize,
    pub base_seed: u64,
    pub quick: bool,
    pub truth: [f64; 2],
    /// Ordered by `n` and then by the configured estimator order.
    pub rows: Vec<McRow>,
    /// Alpha estimates per row, in replication order, `NaN` for failures.
    pub draws: Vec<Vec<f64>>,
}

impl McTable {
    pub fn row(&self, estimator: McEstimator, n: usize) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n)
    }

    pub fn draws_for(&self, estimator: McEstimator, n: usize) -> Option<&[f64]> {
        self.rows.iter().position(|r| r.estimator == estimator && r.n == n).map(|k| self.draws[k].as_slice())
    }

    pub fn total_failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    pub fn metadata_json(&self) -> String {
        #[derive(Serialize)]
        struct Meta<'a> {
            design: &'a str,
            spec_fingerprint: &'a str,
            replications: usize,
            base_seed: u64,
            quick: bool,
            truth: [f64; 2],
            rows: &'a [McRow],
        }
        let m = Meta {
            design: &self.design,
            spec_fingerprint: &self.spec_fingerprint,
            replications: self.replications,
            base_seed: self.base_seed,
            quick: self.quick,
            truth: self.truth,
            rows: &self.rows,
        };
        serde_json::to_string_pretty(&m).expect("metadata serializes")
    }
}

type Outcome = std::result::Result<(f64, Option<f64>), String>;

fn bandwidth_profile(spec: &DgpSpec) -> BandwidthProfile {
    if matches!(spec.structure, Structure::AltDgp3) {
        BandwidthProfile::Dgp3
    } else {
        BandwidthProfile::Main
    }
}

fn outcome(r: Result<EstimateReport>) -> Outcome {
    match r {
        Ok(rep) if rep.alpha.is_finite() => Ok((rep.alpha, rep.gamma.filter(|g| g.is_finite()))),
        Ok(rep) => Err(format!("non-finite estimate {}", rep.alpha)),
        Err(e) => Err(e.to_string()),
    }
}

fn first_stage(cfg: &McConfig, sample: &Sample) -> Result<GridCache> {
    let bw = default_bandwidths(sample, bandwidth_profile(&cfg.spec))?;
    let surf = fit_surfaces(sample, &bw, &KernelFn::gaussian())?;
    GridCache::build(&surf, CACHE_POINTS)
}

/// Every configured estimator on replication `r` at sample size `n`.
fn replicate(cfg: &McConfig, n: usize, r: usize) -> Vec<Outcome> {
    let seed = replication_seed(cfg.base_seed, n, r);
    let sample = match simulate(&cfg.spec, n, seed) {
        Ok(s) => s,
        Err(e) => return vec![Err(e.to_string()); cfg.estimators.len()],
    };
    let cache = if cfg.estimators.iter().any(|e| e.needs_first_stage()) {
        Some(first_stage(cfg, &sample).map_err(|e| e.to_string()))
    } else {
        None
    };
    let rank_cfg = cfg.rank_config(seed);
    cfg.estimators
        .iter()
        .map(|est| {
            let surface = match (&cache, est.needs_first_stage()) {
                (Some(Ok(c)), true) => Some(c),
                (Some(Err(e)), true) => return Err(format!("first stage: {e}")),
                _ => None,
            };
            match est {
                McEstimator::Rank => outcome(fit_rank(&sample, surface.unwrap(), &rank_cfg)),
                McEstimator::RankInfeasible => outcome(fit_rank_infeasible(&sample, &cfg.spec, &rank_cfg)),
                McEstimator::Wls => outcome(fit_wls(&sample, surface.unwrap(), &cfg.pair_weights)),
                McEstimator::Series => outcome(fit_series(&sample, surface.unwrap(), &cfg.pair_weights, &cfg.series).map(|(r, _)| r)),
                McEstimator::Vy => outcome(fit_vy_comparator(&sample, surface.unwrap(), &cfg.vy)),
            }
        })
        .collect()
}

fn summarize(cfg: &McConfig, est: McEstimator, n: usize, outcomes: &[&Outcome]) -> Result<(McRow, Vec<f64>)> {
    let truth = &cfg.spec.theta;
    let ok: Vec<(f64, Option<f64>)> = outcomes.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
    let failures = outcomes.len() - ok.len();
    let alphas: Vec<f64> = ok.iter().map(|o| o.0).collect();
    let gammas: Vec<f64> = ok.iter().filter_map(|o| o.1).collect();
    let alpha = if alphas.is_empty() { None } else { Some(stats(&alphas, truth.alpha)?) };
    let gamma = if !gammas.is_empty() && gammas.len() == alphas.len() && truth.gamma.is_finite() {
        Some(stats(&gammas, truth.gamma)?)
    } else {
        None
    };
    let mut flags = Vec::new();
    match ok.len() {
        0 => flags.push(McFlag::AllFailed),
        1 => flags.push(McFlag::SingleReplication),
        _ => {}
    }
    let first_error = outcomes.iter().find_map(|o| o.as_ref().err().cloned());
    let draws = outcomes.iter().map(|o| o.as_ref().map(|v| v.0).unwrap_or(f64::NAN)).collect();
    let row = McRow {
        design: cfg.design.clone(),
        estimator: est,
        n,
        alpha,
        gamma,
        successes: ok.len(),
        failures,
        flags,
        first_error,
    };
    Ok((row, draws))
}

/// Runs every replication of every configured cell.
///
/// A replication whose estimator errors or returns a non-finite value counts
/// as a failure of that cell; it is excluded from the statistics and reported
/// in `failures`. Only configuration errors abort the run.
pub fn run(config: &McConfig) -> Result<McTable> {
    let cfg = config.effective()?;
    let mut rows = Vec::new();
    let mut draws = Vec::new();
    for &n in &cfg.n_list {
        let per_rep: Vec<Vec<Outcome>> = (0..cfg.replications).into_par_iter().map(|r| replicate(&cfg, n, r)).collect();
        for (k, &est) in cfg.estimators.iter().enumerate() {
            let outcomes: Vec<&Outcome> = per_rep.iter().map(|v| &v[k]).collect();
            let (row, d) = summarize(&cfg, est, n, &outcomes)?;
            rows.push(row);
            draws.push(d);
        }
    }
    Ok(McTable {
        design: cfg.design.clone(),
        spec_fingerprint: cfg.spec.fingerprint(),
        replications: cfg.replications,
        base_seed: cfg.base_seed,
        quick: cfg.quick,
        truth: [cfg.spec.theta.alpha, cfg.spec.theta.gamma],
        rows,
        draws,
    })
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn fmt3(v: f64) -> String {
    let s = format!("{:.3}", round3(v));
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

pub const CSV_HEADER: [&str; 12] = [
    "design",
    "estimator",
    "n",
    "bias",
    "std",
    "rmse",
    "mad",
    "failures",
    "gamma_bias",
    "gamma_std",
    "gamma_rmse",
    "gamma_mad",
];

fn stat_fields(s: Option<ErrorStats>) -> [String; 4] {
    match s {
        Some(s) => [fmt3(s.bias), fmt3(s.std), fmt3(s.rmse), fmt3(s.mad)],
        None => Default::default(),
    }
}

pub fn emit(rows: &[McRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Input("cannot emit an empty table".into()));
    }
    Ok(match format {
        TableFormat::Csv => emit_csv(rows),
        TableFormat::Markdown => emit_markdown(rows),
    })
}

fn emit_csv(rows: &[McRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.design.clone(), r.estimator.label().to_string(), r.n.to_string()];
        rec.extend(stat_fields(r.alpha));
        rec.push(r.failures.to_string());
        rec.extend(stat_fields(r.gamma));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// One table per design, one line per `n`, estimators side by side.
fn emit_markdown(rows: &[McRow]) -> String {
    let mut designs: Vec<&str> = Vec::new();
    for r in rows {
        if !designs.contains(&r.design.as_str()) {
            designs.push(&r.design);
        }
    }
    let mut out = String::new();
    for d in designs {
        let sub: Vec<&McRow> = rows.iter().filter(|r| r.design == d).collect();
        let mut ests: Vec<McEstimator> = Vec::new();
        let mut ns: Vec<usize> = Vec::new();
        for r in &sub {
            if !ests.contains(&r.estimator) {
                ests.push(r.estimator);
            }
            if !ns.contains(&r.n) {
                ns.push(r.n);
            }
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("### {d}\n\n|   |"));
        for e in &ests {
            out.push_str(&format!(" {} | | | | |", e.heading()));
        }
        out.push_str("\n| n |");
        for _ in &ests {
            out.push_str(" bias | std | rmse | mad | fail |");
        }
        out.push_str("\n|---:|");
        for _ in &ests {
            out.push_str("---:|---:|---:|---:|---:|");
        }
        out.push('\n');
        for n in ns {
            out.push_str(&format!("| {n} |"));
            for e in &ests {
                match sub.iter().find(|r| r.n == n && r.estimator == *e) {
                    Some(r) => {
                        let [b, s, m, a] = stat_fields(r.alpha).map(|v| if v.is_empty() { "-".to_string() } else { v });
                        out.push_str(&format!(" {b} | {s} | {m} | {a} | {} |", r.failures));
                    }
                    None => out.push_str(" - | - | - | - | - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

fn parse_stat_fields(f: &[&str]) -> Result<Option<ErrorStats>> {
    if f.iter().all(|v| v.is_empty()) {
        return Ok(None);
    }
    let p = |s: &str| s.parse::<f64>().map_err(|e| Error::Input(format!("bad number '{s}': {e}")));
    Ok(Some(ErrorStats { bias: p(f[0])?, std: p(f[1])?, rmse: p(f[2])?, mad: p(f[3])? }))
}

/// Rows of an emitted CSV table.
///
/// Statistics come back rounded to three decimals. Success counts, flags and
/// error messages are not part of the CSV, so successes are `0` and flags empty.
pub fn parse_csv(text: &str) -> Result<Vec<McRow>> {
    let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::Input(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Input(format!("unexpected CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Input(e.to_string()))?;
        let f: Vec<&str> = rec.iter().collect();
        let n = f[2].parse().map_err(|e| Error::Input(format!("bad n '{}': {e}", f[2])))?;
        let failures = f[7].parse().map_err(|e| Error::Input(format!("bad failure count '{}': {e}", f[7])))?;
        rows.push(McRow {
            design: f[0].to_string(),
            estimator: McEstimator::from_label(f[1])?,
            n,
            alpha: parse_stat_fields(&f[3..7])?,
            gamma: parse_stat_fields(&f[8..12])?,
            successes: 0,
            failures,
            flags: Vec::new(),
            first_error: None,
        });
    }
    Ok(rows)
}

/// The part of a row that survives a CSV round trip.
pub fn csv_view(r: &McRow) -> McRow {
    McRow {
        alpha: r.alpha.map(ErrorStats::rounded),
        gamma: r.gamma.map(ErrorStats::rounded),
        successes: 0,
        flags: Vec::new(),
        first_error: None,
        ..r.clone()
    }
}

fn default_deconv_n() -> usize {
    200_000
}

/// Single end-to-end run of the measurement-based estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvRunConfig {
    pub spec: DgpSpec,
    #[serde(default = "default_deconv_n")]
    pub n: usize,
    /// Defaults to `spec.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvSummary {
    pub n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub nu: f64,
    pub sigma: f64,
    pub sigma_tilde: f64,
    pub cumulant_z: f64,
    pub crossings: usize,
    pub round_trips: Vec<RoundTrip>,
    pub round_trips_pass: bool,
}

impl DeconvRunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid deconvolution config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !self.spec.has_measurements() {
            return Err(Error::Config("deconvolution needs a design with measurement equations".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<(DeconvSummary, DeconvReport)> {
        self.validate()?;
        let seed = self.seed.unwrap_or(self.spec.seed);
        let sample = simulate(&self.spec, self.n, seed)?;
        let rep = run_pipeline(&sample)?;
        let round_trips: Vec<RoundTrip> = rep.round_trips().into_iter().cloned().collect();
        let summary = DeconvSummary {
            n: self.n,
            seed,
            alpha: rep.theta.alpha,
            gamma: rep.theta.gamma,
            nu: rep.nu.nu,
            sigma: rep.sigma,
            sigma_tilde: rep.split.sigma_tilde,
            cumulant_z: rep.split.cumulant_z,
            crossings: rep.crossings,
            round_trips_pass: round_trips.iter().all(|r| r.pass),
            round_trips,
        };
        Ok((summary, rep))
    }
}

/// Density and characteristic-function tables of a deconvolution run, as
/// `(file name, CSV text)`.
pub fn deconv_tables(rep: &DeconvReport) -> Vec<(&'static str, String)> {
    vec![
        ("f_wtilde.csv", rep.split.f_wtilde.to_csv()),
        ("f_eta3.csv", rep.split.f_eta3.to_csv()),
        ("f_eta4.csv", rep.split.f_eta4.to_csv()),
        ("f_eta2.csv", rep.eta2.density.to_csv()),
        ("cf_wtilde.csv", rep.split.cf_wtilde.to_csv()),
        ("cf_eta2.csv", rep.eta2.cf.to_csv()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp_oracle::MainLaw;
    use proptest::prelude::*;

    fn small_config(estimators: Vec<McEstimator>) -> McConfig {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.2);
        let mut c = McConfig::new("normal_normal", spec, estimators, vec![100], 4, 11);
        c.rank.grid_points = 11;
        c
    }

    #[test]
    fn stats_examples() {
        let s = stats(&[0.5], 0.5).unwrap();
        assert_eq!(s, ErrorStats { bias: 0.0, std: 0.0, rmse: 0.0, mad: 0.0 });
        let s = stats(&[-0.5, 1.5], 0.5).unwrap();
        assert_eq!((s.bias, s.rmse, s.mad), (0.0, 1.0, 1.0));
        let s = stats(&[-1.0; 280], -0.25).unwrap();
        assert_eq!(fmt3(s.mad), "0.750");
        assert!(stats(&[], 0.0).is_err());
        assert!(stats(&[f64::NAN], 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let c = small_config(vec![McEstimator::Rank]);
        assert!(c.validate().is_ok());
        assert!(McConfig { replications: 0, ..c.clone() }.validate().is_err());
        assert!(McConfig { n_list: vec![], ..c.clone() }.validate().is_err());
        assert!(McConfig { estimators: vec![McEstimator::Vy, McEstimator::Vy], ..c.clone() }.validate().is_err());
        assert!(McConfig { design: "a,b".into(), ..c.clone() }.validate().is_err());
        let q = McConfig { n_list: vec![100, 800, 1600], replications: 280, ..c.clone() }.quick_profile().unwrap();
        assert_eq!((q.n_list.as_slice(), q.replications, q.pair_subsample), ([100].as_slice(), 100, Some(QUICK_PAIR_SUBSAMPLE)));
        assert!(McConfig { n_list: vec![800], ..c }.quick_profile().is_err());
    }

    #[test]
    fn deconv_config_needs_measurements() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.2);
        let c = DeconvRunConfig { spec, n: 1000, seed: None };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = DeconvRunConfig::from_json(&format!("{{\"spec\": {}}}", serde_json::to_string(&DgpSpec::measured_exponential(0.5, 1.0, 1.0, 0.8)).unwrap())).unwrap();
        assert_eq!((c.n, c.seed), (200_000, None));
    }

    #[test]
    fn config_json_round_trip() {
        let c = small_config(vec![McEstimator::Rank, McEstimator::Vy]);
        let back = McConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(McConfig::from_json("{\"design\": \"x\"}").is_err());
    }

    #[test]
    fn run_is_deterministic_and_accounts_for_every_replication() {
        let c = small_config(vec![McEstimator::RankInfeasible, McEstimator::Vy, McEstimator::Wls]);
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(emit(&a.rows, TableFormat::Csv).unwrap(), emit(&b.rows, TableFormat::Csv).unwrap());
        for (r, d) in a.rows.iter().zip(&a.draws) {
            assert_eq!(r.successes + r.failures, c.replications);
            assert_eq!(d.len(), c.replications);
        }
    }

    #[test]
    fn replication_draws_do_not_depend_on_thread_count() {
        let c = small_config(vec![McEstimator::Vy]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run(&c).unwrap());
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run(&c).unwrap());
        assert_eq!(one, three);
    }

    #[test]
    fn replication_depends_only_on_its_coordinates() {
        let c = small_config(vec![McEstimator::RankInfeasible]);
        let full = run(&c).unwrap();
        let single = replicate(&c, 100, 2);
        assert_eq!(single[0].as_ref().unwrap().0, full.draws[0][2]);
        let more = run(&McConfig { replications: 6, ..c }).unwrap();
        assert_eq!(&more.draws[0][..4], full.draws[0].as_slice());
    }

    #[test]
    fn failures_are_counted_not_dropped() {
        // every VY fit fails once the support requirement exceeds n
        let mut c = small_config(vec![McEstimator::Vy, McEstimator::RankInfeasible]);
        c.vy.min_support = 1_000;
        let t = run(&c).unwrap();
        let vy = t.row(McEstimator::Vy, 100).unwrap();
        assert_eq!((vy.successes, vy.failures), (0, 4));
        assert!(vy.alpha.is_none() && vy.flags.contains(&McFlag::AllFailed));
        assert!(vy.first_error.as_deref().unwrap().contains("overlap"));
        assert_eq!(t.row(McEstimator::RankInfeasible, 100).unwrap().failures, 0);
        assert_eq!(t.total_failures(), 4);
        let csv = emit(&t.rows, TableFormat::Csv).unwrap();
        assert!(csv.contains("normal_normal,vy,100,,,,,4,,,,"));
    }

    #[test]
    fn single_replication_is_flagged() {
        let c = McConfig { replications: 1, ..small_config(vec![McEstimator::RankInfeasible]) };
        let t = run(&c).unwrap();
        let r = &t.rows[0];
        let a = r.alpha.unwrap();
        assert_eq!(a.std, 0.0);
        assert_eq!(a.bias, t.draws[0][0] - 0.5);
        assert!(r.flags.contains(&McFlag::SingleReplication));
    }

    #[test]
    fn one_row_table_gives_two_csv_lines() {
        let c = McConfig { replications: 2, ..small_config(vec![McEstimator::Vy]) };
        let t = run(&c).unwrap();
        let csv = emit(&t.rows, TableFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
        assert!(emit(&[], TableFormat::Csv).is_err());
    }

    #[test]
    fn markdown_puts_estimators_side_by_side() {
        let c = McConfig { n_list: vec![100, 200], replications: 2, ..small_config(vec![McEstimator::RankInfeasible, McEstimator::Vy]) };
        let md = emit(&run(&c).unwrap().rows, TableFormat::Markdown).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "### normal_normal");
        assert!(lines[2].contains("KMZ (oracle ratios)") && lines[2].contains("VY"));
        assert_eq!(lines.len(), 7);
        assert!(lines[5].starts_with("| 100 |") && lines[6].starts_with("| 200 |"));
        assert_eq!(lines[4].matches("---:").count(), 11);
    }

    fn arb_stats() -> impl Strategy<Value = Option<ErrorStats>> {
        prop::option::of((-5.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0).prop_map(|(bias, std, rmse, mad)| ErrorStats { bias, std, rmse, mad }))
    }

    fn arb_row() -> impl Strategy<Value = McRow> {
        (
            prop::sample::select(vec!["t1", "dgp4", "a b"]),
            prop::sample::select(McEstimator::ALL.to_vec()),
            1usize..5000,
            arb_stats(),
            arb_stats(),
            0usize..300,
        )
            .prop_map(|(d, e, n, alpha, gamma, failures)| McRow {
                design: d.to_string(),
                estimator: e,
                n,
                alpha,
                gamma,
                successes: 7,
                failures,
                flags: vec![McFlag::SingleReplication],
                first_error: Some("x".into()),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rmse_decomposes_into_bias_and_spread(est in prop::collection::vec(-10.0f64..10.0, 1..60), truth in -3.0f64..3.0) {
            let s = stats(&est, truth).unwrap();
            let r = est.len() as f64;
            let lhs = s.rmse * s.rmse;
            let rhs = s.bias * s.bias + s.std * s.std * (r - 1.0) / r;
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs));
            prop_assert!(s.mad >= 0.0 && s.mad <= est.iter().map(|e| (e - truth).abs()).fold(0.0, f64::max));
        }

        #[test]
        fn stats_are_order_free(mut est in prop::collection::vec(-10.0f64..10.0, 1..40), truth in -3.0f64..3.0) {
            let a = stats(&est, truth).unwrap();
            est.reverse();
            let b = stats(&est, truth).unwrap();
            prop_assert!((a.bias - b.bias).abs() < 1e-12 && (a.std - b.std).abs() < 1e-12);
            prop_assert_eq!(a.mad, b.mad);
        }

        #[test]
        fn csv_round_trip(rows in prop::collection::vec(arb_row(), 1..8)) {
            let text = emit(&rows, TableFormat::Csv).unwrap();
            let back = parse_csv(&text).unwrap();
            let want: Vec<McRow> = rows.iter().map(csv_view).collect();
            prop_assert_eq!(&back, &want);
            prop_assert_eq!(emit(&back, TableFormat::Csv).unwrap(), text);
        }
    }
}
