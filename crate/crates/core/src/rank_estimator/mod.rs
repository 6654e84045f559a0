//! Pairwise maximum-rank estimator of `(alpha, gamma)`.
//!
//! A pair `(i, j)` scores one when the sign of `p1r_i + p0r_j` agrees with the
//! sign of the index `x1_i + alpha - gamma x_i - (x1_j - gamma x_j)`.

use std::cell::RefCell;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp_oracle::{DgpSpec, Sample, Theta};
use crate::error::{Error, Result};
use crate::kernel_np::{trimmed_ratios, OracleRatios, RatioSurface, TrimBox};
use crate::report::{EstimateReport, EstimatorKind, PolishStep, ReportFlag};
use crate::rng::rng_from_seed;

/// Minimum number of ordered pairs the public estimators accept.
pub const MIN_PAIRS: usize = 10;

/// The pair index `Phi(x1, x, x1~, x~; theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndexFn {
    pub theta: Theta,
}

impl PairIndexFn {
    pub fn eval(&self, x1: f64, x: f64, x1t: f64, xt: f64) -> f64 {
        let (a, g) = (self.theta.alpha, self.theta.gamma);
        x1 + a - g * x - (x1t - g * xt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox {
    pub alpha: [f64; 2],
    pub gamma: [f64; 2],
}

impl Default for ThetaBox {
    fn default() -> Self {
        Self { alpha: [-3.0, 3.0], gamma: [-3.0, 3.0] }
    }
}

impl ThetaBox {
    fn clamp(&self, a: f64, g: f64) -> (f64, f64) {
        (a.clamp(self.alpha[0], self.alpha[1]), g.clamp(self.gamma[0], self.gamma[1]))
    }

    pub fn on_boundary(&self, a: f64, g: f64) -> bool {
        let eps = 1e-12;
        (a - self.alpha[0]).abs() < eps
            || (a - self.alpha[1]).abs() < eps
            || (g - self.gamma[0]).abs() < eps
            || (g - self.gamma[1]).abs() < eps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Polish {
    None,
    NelderMead { maxiter: u64, xtol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFitConfig {
    pub theta_box: ThetaBox,
    /// Grid points per axis.
    pub grid_points: usize,
    pub polish: Polish,
    /// Number of ordered pairs drawn uniformly with replacement, if any.
    pub pair_subsample: Option<usize>,
    pub subsample_seed: u64,
}

impl Default for RankFitConfig {
    fn default() -> Self {
        Self {
            theta_box: ThetaBox::default(),
            grid_points: 81,
            polish: Polish::NelderMead { maxiter: 40, xtol: 1e-4 },
            pair_subsample: None,
            subsample_seed: 0,
        }
    }
}

impl RankFitConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.theta_box;
        if !(b.alpha[1] > b.alpha[0] && b.gamma[1] > b.gamma[0]) || ![b.alpha, b.gamma].concat().iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("theta box needs positive finite widths, got {b:?}")));
        }
        if self.grid_points < 3 {
            return Err(Error::Config(format!("grid needs at least 3 points per axis, got {}", self.grid_points)));
        }
        if self.pair_subsample == Some(0) {
            return Err(Error::Config("pair subsample must be positive".into()));
        }
        Ok(())
    }

    fn alpha_at(&self, k: usize) -> f64 {
        grid_value(self.theta_box.alpha, self.grid_points, k)
    }

    fn gamma_at(&self, k: usize) -> f64 {
        grid_value(self.theta_box.gamma, self.grid_points, k)
    }
}

fn grid_value(range: [f64; 2], g: usize, k: usize) -> f64 {
    if k + 1 == g {
        range[1]
    } else {
        range[0] + (range[1] - range[0]) * k as f64 / (g - 1) as f64
    }
}

/// Outcome of the exhaustive grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Agreement counts, indexed `[gamma index][alpha index]`.
    pub counts: Vec<Vec<u64>>,
    pub max_count: u64,
    pub argmax: (f64, f64),
    /// Grid points whose count is within one pair of the maximum.
    pub ties: Vec<[f64; 2]>,
}

/// Ratio and regressor values at the trimmed observations, plus the pair set.
#[derive(Debug, Clone)]
pub struct RankProblem {
    x1: Vec<f64>,
    x: Vec<f64>,
    p1r: Vec<f64>,
    p0r: Vec<f64>,
    pairs: Option<Vec<(u32, u32)>>,
}

impl RankProblem {
    pub fn new(x1: Vec<f64>, x: Vec<f64>, p1r: Vec<f64>, p0r: Vec<f64>) -> Result<Self> {
        let m = x1.len();
        if x.len() != m || p1r.len() != m || p0r.len() != m {
            return Err(Error::Input("rank problem columns differ in length".into()));
        }
        if m < 2 {
            return Err(Error::InsufficientData("need at least two observations for a pair".into()));
        }
        Ok(Self { x1, x, p1r, p0r, pairs: None })
    }

    /// Restrict to `count` ordered pairs drawn uniformly with replacement.
    pub fn subsample(mut self, count: usize, seed: u64) -> Self {
        let m = self.x1.len();
        let mut rng = rng_from_seed(seed);
        let pairs = (0..count)
            .map(|_| {
                let i = rng.random_range(0..m);
                let mut j = rng.random_range(0..m - 1);
                if j >= i {
                    j += 1;
                }
                (i as u32, j as u32)
            })
            .collect();
        self.pairs = Some(pairs);
        self
    }

    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn n_pairs(&self) -> usize {
        match &self.pairs {
            Some(p) => p.len(),
            None => self.len() * (self.len() - 1),
        }
    }

    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        match &self.pairs {
            Some(p) => p.iter().for_each(|&(i, j)| f(i as usize, j as usize)),
            None => {
                let m = self.len();
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            f(i, j)
                        }
                    }
                }
            }
        }
    }

    /// Sign of the ratio sum and threshold `t` such that the index is
    /// nonnegative exactly when `alpha >= t`.
    #[inline]
    fn pair_terms(&self, i: usize, j: usize, gamma: f64) -> (bool, f64) {
        let s = self.p1r[i] + self.p0r[j] >= 0.0;
        let t = (self.x1[j] - self.x1[i]) + gamma * (self.x[i] - self.x[j]);
        (s, t)
    }

    /// Number of agreeing pairs at `(alpha, gamma)`.
    pub fn count(&self, alpha: f64, gamma: f64) -> u64 {
        let mut c = 0u64;
        self.for_each_pair(|i, j| {
            let (s, t) = self.pair_terms(i, j, gamma);
            c += (s == (alpha >= t)) as u64;
        });
        c
    }

    /// Normalized objective in `[0, 1]`.
    pub fn qn(&self, alpha: f64, gamma: f64) -> f64 {
        self.count(alpha, gamma) as f64 / self.n_pairs() as f64
    }

    fn counts_along_alpha(&self, gamma: f64, cfg: &RankFitConfig) -> Vec<u64> {
        let g = cfg.grid_points;
        let lo = cfg.theta_box.alpha[0];
        let step = (cfg.theta_box.alpha[1] - lo) / (g - 1) as f64;
        let mut pos = vec![0u64; g + 1];
        let mut neg = vec![0u64; g + 1];
        let mut n_neg = 0u64;
        self.for_each_pair(|i, j| {
            let (s, t) = self.pair_terms(i, j, gamma);
            // first grid index whose alpha is at least t
            let mut k = ((t - lo) / step).ceil().clamp(0.0, g as f64) as usize;
            while k > 0 && cfg.alpha_at(k - 1) >= t {
                k -= 1;
            }
            while k < g && cfg.alpha_at(k) < t {
                k += 1;
            }
            if s {
                pos[k] += 1;
            } else {
                neg[k] += 1;
                n_neg += 1;
            }
        });
        let (mut cp, mut cn) = (0u64, 0u64);
        (0..g)
            .map(|k| {
                cp += pos[k];
                cn += neg[k];
                cp + (n_neg - cn)
            })
            .collect()
    }

    /// Exhaustive search over the grid; rows are evaluated in parallel.
    pub fn grid_search(&self, cfg: &RankFitConfig) -> Result<GridResult> {
        cfg.validate()?;
        let g = cfg.grid_points;
        let counts: Vec<Vec<u64>> = (0..g).into_par_iter().map(|r| self.counts_along_alpha(cfg.gamma_at(r), cfg)).collect();
        let max_count = counts.iter().flatten().copied().max().unwrap_or(0);
        let mut best: Option<(f64, f64)> = None;
        let mut ties = Vec::new();
        for (r, row) in counts.iter().enumerate() {
            for (k, &c) in row.iter().enumerate() {
                let (a, gm) = (cfg.alpha_at(k), cfg.gamma_at(r));
                if c + 1 >= max_count {
                    ties.push([a, gm]);
                }
                if c == max_count {
                    best = Some(match best {
                        None => (a, gm),
                        Some(b) => {
                            let nb = b.0.hypot(b.1);
                            let nc = a.hypot(gm);
                            if nc < nb || (nc == nb && (a, gm) < b) {
                                (a, gm)
                            } else {
                                b
                            }
                        }
                    });
                }
            }
        }
        let argmax = best.ok_or_else(|| Error::Numerical("empty grid".into()))?;
        Ok(GridResult { counts, max_count, argmax, ties })
    }

    /// Agreement smoothed with a cubic step of half-width `bw` in `alpha - t`.
    pub fn surrogate(&self, alpha: f64, gamma: f64, bw: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_pair(|i, j| {
            let (s, t) = self.pair_terms(i, j, gamma);
            let k = smoothstep((alpha - t) / bw);
            acc += if s { k } else { 1.0 - k };
        });
        acc / self.n_pairs() as f64
    }

    /// Grid search followed by the configured polish.
    pub fn solve(&self, cfg: &RankFitConfig, kind: EstimatorKind) -> Result<EstimateReport> {
        let grid = self.grid_search(cfg)?;
        let (ga, gg) = grid.argmax;
        let mut report = EstimateReport::new(kind, ga, Some(gg));
        let mut best_count = grid.max_count;
        if let Polish::NelderMead { maxiter, xtol } = cfg.polish {
            let step_a = (cfg.theta_box.alpha[1] - cfg.theta_box.alpha[0]) / (cfg.grid_points - 1) as f64;
            let step_g = (cfg.theta_box.gamma[1] - cfg.theta_box.gamma[0]) / (cfg.grid_points - 1) as f64;
            let problem = Surrogate { prob: self, bw: step_a, theta_box: cfg.theta_box, trace: RefCell::new(Vec::new()) };
            let da = if ga + step_a > cfg.theta_box.alpha[1] { -step_a } else { step_a };
            let dg = if gg + step_g > cfg.theta_box.gamma[1] { -step_g } else { step_g };
            let simplex = vec![vec![ga, gg], vec![ga + da, gg], vec![ga, gg + dg]];
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(xtol)
                .map_err(|e| Error::Numerical(format!("Nelder-Mead setup: {e}")))?;
            let res = Executor::new(problem, solver)
                .configure(|s| s.max_iters(maxiter))
                .run()
                .map_err(|e| Error::Numerical(format!("Nelder-Mead: {e}")))?;
            let p = res.state.best_param.clone().unwrap_or_else(|| vec![ga, gg]);
            let (pa, pg) = cfg.theta_box.clamp(p[0], p[1]);
            report.diagnostics.polish_trace = res.problem.problem.map(|s| s.trace.into_inner()).unwrap_or_default();
            let c = self.count(pa, pg);
            if c >= grid.max_count {
                report.alpha = pa;
                report.gamma = Some(pg);
                best_count = c;
            } else {
                report.flags.push(ReportFlag::PolishRejected);
            }
        }
        report.objective = Some(best_count as f64 / self.n_pairs() as f64);
        report.diagnostics.pairs = self.n_pairs();
        report.diagnostics.grid_argmax = Some([ga, gg]);
        report.diagnostics.tie_set = grid.ties;
        if cfg.theta_box.on_boundary(report.alpha, report.gamma.unwrap_or(0.0)) {
            report.flags.push(ReportFlag::BoundaryMaximizer);
        }
        if let Some(p) = &self.pairs {
            report.flags.push(ReportFlag::PairSubsample { pairs: p.len() });
        }
        Ok(report)
    }
}

/// `0` below `-1`, `1` above `1`, cubic in between.
fn smoothstep(z: f64) -> f64 {
    if z <= -1.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        0.5 + 0.75 * z - 0.25 * z * z * z
    }
}

struct Surrogate<'a> {
    prob: &'a RankProblem,
    bw: f64,
    theta_box: ThetaBox,
    trace: RefCell<Vec<PolishStep>>,
}

impl CostFunction for Surrogate<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (a, g) = self.theta_box.clamp(p[0], p[1]);
        let v = self.prob.surrogate(a, g, self.bw);
        let mut tr = self.trace.borrow_mut();
        if tr.last().is_none_or(|s| v > s.surrogate) {
            let evaluation = tr.len();
            tr.push(PolishStep { evaluation, alpha: a, gamma: g, surrogate: v });
        }
        Ok(-v)
    }
}

/// `Q_n(theta)` on the trimmed pairs of `sample` using `surface`.
pub fn objective_qn(theta: &Theta, sample: &Sample, surface: &dyn RatioSurface, config: &RankFitConfig) -> Result<f64> {
    let prob = build_problem(sample, surface, config)?.0;
    Ok(prob.qn(theta.alpha, theta.gamma))
}

fn build_problem(sample: &Sample, surface: &dyn RatioSurface, config: &RankFitConfig) -> Result<(RankProblem, usize, usize)> {
    config.validate()?;
    let tr = trimmed_ratios(sample, surface)?;
    let m = tr.len();
    if m * m.saturating_sub(1) < MIN_PAIRS {
        return Err(Error::InsufficientData(format!("{m} trimmed observations leave fewer than {MIN_PAIRS} pairs")));
    }
    let mut prob = RankProblem::new(tr.x1, tr.x, tr.p1r, tr.p0r)?;
    if let Some(k) = config.pair_subsample {
        prob = prob.subsample(k, config.subsample_seed);
    }
    Ok((prob, m, tr.dropped))
}

fn fit_with(sample: &Sample, surface: &dyn RatioSurface, config: &RankFitConfig, kind: EstimatorKind) -> Result<EstimateReport> {
    let (prob, m, dropped) = build_problem(sample, surface, config)?;
    let mut r = prob.solve(config, kind)?;
    r.diagnostics.n = sample.n;
    r.diagnostics.n_trimmed = m;
    r.diagnostics.trim_fraction = 1.0 - m as f64 / sample.n as f64;
    if dropped > 0 {
        r.flags.push(ReportFlag::DroppedObservations { count: dropped });
    }
    let clamps = surface.clamp_hits();
    if clamps > 0 {
        r.flags.push(ReportFlag::DensityClamped { count: clamps });
    }
    Ok(r)
}

/// Rank estimator on first-stage ratios.
pub fn fit_rank(sample: &Sample, surface: &dyn RatioSurface, config: &RankFitConfig) -> Result<EstimateReport> {
    fit_with(sample, surface, config, EstimatorKind::Rank)
}

/// Rank estimator on the true ratios of `spec`, trimmed like the feasible estimator.
pub fn fit_rank_infeasible(sample: &Sample, spec: &DgpSpec, config: &RankFitConfig) -> Result<EstimateReport> {
    let oracle = OracleRatios::new(spec.clone(), TrimBox::from_sample(sample));
    fit_with(sample, &oracle, config, EstimatorKind::RankInfeasible)
}
