//! Closed-form kernel-weighted least squares over matched pairs, its sandwich
//! variance, and the series extension with a nonparametric factor loading.
//!
//! For a match `x1_i + alpha - g(x_i) = x1_j - g(x_j)`, so the pair regression
//! is `x1_j - x1_i = alpha + g(x_j) - g(x_i)`, with pairs weighted by how close
//! `p1r_i + p0r_j` is to zero.

mod series;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dgp_oracle::{Sample, Theta};
use crate::error::{Error, Result};
use crate::kernel_np::{trimmed_ratios, KernelFn, KernelKind, NpSurface, RatioSurface, SlopeTarget, TrimmedRatios};
use crate::report::{EstimateReport, EstimatorKind, ReportFlag};

pub use series::{fit_series, SeriesBasis, SeriesConfig, SeriesG0};

/// Minimum number of pairs with nonzero weight.
pub const MIN_WEIGHTED_PAIRS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchBandwidth {
    /// `c * sd(p1r_i + p0r_j) * n^(-delta)`.
    Auto { c: f64, delta: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairWeightConfig {
    pub h_match: MatchBandwidth,
    pub kernel: KernelKind,
}

impl Default for PairWeightConfig {
    fn default() -> Self {
        Self { h_match: MatchBandwidth::Auto { c: 1.0, delta: 0.08 }, kernel: KernelKind::HigherOrderEven(8) }
    }
}

impl PairWeightConfig {
    pub fn validate(&self) -> Result<()> {
        match self.h_match {
            MatchBandwidth::Auto { c, delta } => {
                if !(c > 0.0 && c.is_finite()) || !(delta > 1.0 / 16.0 && delta < 1.0 / 12.0) {
                    return Err(Error::Config(format!("auto matching bandwidth needs c > 0 and delta in (1/16, 1/12), got c = {c}, delta = {delta}")));
                }
            }
            MatchBandwidth::Fixed(h) => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::Config(format!("matching bandwidth must be positive, got {h}")));
                }
            }
        }
        KernelFn::from_kind(self.kernel).map(|_| ())
    }
}

/// Trimmed ratios together with the resolved matching bandwidth and kernel.
pub(crate) struct PairSetup {
    pub tr: TrimmedRatios,
    pub h: f64,
    pub kernel: KernelFn,
}

impl PairSetup {
    pub fn new(sample: &Sample, surface: &dyn RatioSurface, cfg: &PairWeightConfig) -> Result<Self> {
        cfg.validate()?;
        let tr = trimmed_ratios(sample, surface)?;
        let m = tr.len();
        if m < 2 {
            return Err(Error::RankDeficient(format!("{m} trimmed observations cannot form pairs")));
        }
        let h = match cfg.h_match {
            MatchBandwidth::Fixed(h) => h,
            MatchBandwidth::Auto { c, delta } => c * pair_sum_sd(&tr.p1r, &tr.p0r) * (sample.n as f64).powf(-delta),
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::RankDeficient(format!("matching index has no spread (h = {h})")));
        }
        Ok(Self { tr, h, kernel: KernelFn::from_kind(cfg.kernel)? })
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.kernel.eval((self.tr.p1r[i] + self.tr.p0r[j]) / self.h) / self.h
    }

    #[inline]
    pub fn weight_deriv(&self, i: usize, j: usize) -> f64 {
        self.kernel.deriv((self.tr.p1r[i] + self.tr.p0r[j]) / self.h) / (self.h * self.h)
    }

    /// Kernel support radius in units of the matching index.
    pub fn reach(&self) -> f64 {
        self.kernel.radius() * self.h
    }

    /// Visit ordered pairs `i != j` that can carry nonzero weight.
    ///
    /// Observations are bucketed by `p0r` so that only partners within the
    /// kernel reach are touched.
    pub fn for_each_weighted(&self, mut f: impl FnMut(usize, usize, f64)) {
        let m = self.tr.len();
        let mut by_p0: Vec<usize> = (0..m).collect();
        by_p0.sort_by(|&a, &b| self.tr.p0r[a].total_cmp(&self.tr.p0r[b]).then(a.cmp(&b)));
        let sorted: Vec<f64> = by_p0.iter().map(|&k| self.tr.p0r[k]).collect();
        let reach = self.reach();
        for i in 0..m {
            let target = -self.tr.p1r[i];
            let lo = sorted.partition_point(|v| *v < target - reach);
            let hi = sorted.partition_point(|v| *v <= target + reach);
            let mut js: Vec<usize> = by_p0[lo..hi].to_vec();
            js.sort_unstable();
            for j in js {
                if j != i {
                    let w = self.weight(i, j);
                    if w != 0.0 {
                        f(i, j, w);
                    }
                }
            }
        }
    }
}

/// Standard deviation of `a_i + b_j` over ordered pairs `i != j`.
fn pair_sum_sd(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len() as f64;
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let saa: f64 = a.iter().map(|v| v * v).sum();
    let sbb: f64 = b.iter().map(|v| v * v).sum();
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let np = m * (m - 1.0);
    let s1 = (m - 1.0) * (sa + sb);
    let s2 = (m - 1.0) * (saa + sbb) + 2.0 * (sa * sb - sab);
    let mean = s1 / np;
    ((s2 / np - mean * mean).max(0.0) * np / (np - 1.0)).sqrt()
}

/// Weighted normal equations of the linear pair regression.
pub(crate) struct LinearFit {
    pub theta: Vector2<f64>,
    pub m: Matrix2<f64>,
    pub pairs: usize,
    pub wsum: f64,
    pub wmax: f64,
}

#[inline]
fn pair_row(tr: &TrimmedRatios, i: usize, j: usize) -> (Vector2<f64>, f64) {
    (Vector2::new(1.0, tr.x[j] - tr.x[i]), tr.x1[j] - tr.x1[i])
}

fn linear_fit(setup: &PairSetup) -> Result<LinearFit> {
    let mut m = Matrix2::zeros();
    let mut b = Vector2::zeros();
    let (mut pairs, mut wsum, mut wmax) = (0usize, 0.0, 0.0f64);
    setup.for_each_weighted(|i, j, w| {
        let (z, y) = pair_row(&setup.tr, i, j);
        m += w * z * z.transpose();
        b += w * y * z;
        pairs += 1;
        wsum += w;
        wmax = wmax.max(w.abs());
    });
    if pairs < MIN_WEIGHTED_PAIRS {
        return Err(Error::RankDeficient(format!("only {pairs} pairs carry weight (h_match = {})", setup.h)));
    }
    let scale = m.abs().max();
    let det = m.determinant();
    if !(det.abs() > 1e-12 * scale * scale) {
        return Err(Error::RankDeficient(format!("weighted normal matrix is singular: {m:?}, det = {det}")));
    }
    let theta = m.try_inverse().ok_or_else(|| Error::RankDeficient(format!("normal matrix {m:?} not invertible")))? * b;
    Ok(LinearFit { theta, m, pairs, wsum, wmax })
}

fn condition_number(m: &Matrix2<f64>) -> f64 {
    let sv = m.singular_values();
    sv.max() / sv.min()
}

/// Kernel-weighted least squares estimate of `(alpha, gamma)`.
pub fn fit_wls(sample: &Sample, surface: &dyn RatioSurface, cfg: &PairWeightConfig) -> Result<EstimateReport> {
    let setup = PairSetup::new(sample, surface, cfg)?;
    let fit = linear_fit(&setup)?;
    let mut r = EstimateReport::new(EstimatorKind::Wls, fit.theta[0], Some(fit.theta[1]));
    r.coefficients = vec![fit.theta[0], fit.theta[1]];
    let d = &mut r.diagnostics;
    d.n = sample.n;
    d.n_trimmed = setup.tr.len();
    d.trim_fraction = 1.0 - setup.tr.len() as f64 / sample.n as f64;
    d.pairs = fit.pairs;
    d.effective_pairs = Some(fit.wsum / fit.wmax);
    d.condition_number = Some(condition_number(&fit.m));
    if setup.tr.dropped > 0 {
        r.flags.push(ReportFlag::DroppedObservations { count: setup.tr.dropped });
    }
    if surface.clamp_hits() > 0 {
        r.flags.push(ReportFlag::DensityClamped { count: surface.clamp_hits() });
    }
    Ok(r)
}

/// Weighted normal-equation residual `sum w z (y - z' theta)` at `theta`, and
/// the same sum with absolute values for scaling.
pub fn normal_equation_residual(sample: &Sample, surface: &dyn RatioSurface, cfg: &PairWeightConfig, theta: &Theta) -> Result<([f64; 2], [f64; 2])> {
    let setup = PairSetup::new(sample, surface, cfg)?;
    let th = Vector2::new(theta.alpha, theta.gamma);
    let mut res = Vector2::zeros();
    let mut mag = Vector2::zeros();
    setup.for_each_weighted(|i, j, w| {
        let (z, y) = pair_row(&setup.tr, i, j);
        let e = y - z.dot(&th);
        res += w * e * z;
        mag += (w * y * z).abs() + (w * z * z.dot(&th)).abs();
    });
    Ok(([res[0], res[1]], [mag[0], mag[1]]))
}

/// Influence-function sandwich variance of the WLS estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    /// Covariance of `(alpha, gamma)`.
    pub variance: [[f64; 2]; 2],
    /// Per-observation influence values (before centering), in sample order.
    pub influence: Vec<[f64; 2]>,
    /// Jacobian of the normal equations, normalized by `n (n - 1)`.
    pub jacobian: [[f64; 2]; 2],
}

impl Sandwich {
    pub fn influence_mean(&self) -> [f64; 2] {
        let n = self.influence.len() as f64;
        let mut m = [0.0; 2];
        for p in &self.influence {
            m[0] += p[0] / n;
            m[1] += p[1] / n;
        }
        m
    }
}

/// Sandwich variance `M^-1 V M^-1 / n` of the WLS estimate at `theta_hat`.
///
/// The influence value of observation `k` has a pair part (the projection of
/// the weighted U-statistic) and a first-stage part that propagates the
/// residuals of the local-polynomial fits through the matching weights.
pub fn sandwich_variance(sample: &Sample, surface: &NpSurface, theta_hat: &Theta, cfg: &PairWeightConfig) -> Result<Sandwich> {
    let setup = PairSetup::new(sample, surface, cfg)?;
    let n = sample.n;
    let nf = n as f64;
    let norm = nf * (nf - 1.0);
    let tr = &setup.tr;
    let m_obs = tr.len();
    let th = Vector2::new(theta_hat.alpha, theta_hat.gamma);

    let mut jac = Matrix2::zeros();
    let mut psi_u = vec![Vector2::<f64>::zeros(); n];
    let mut g1 = vec![Vector2::<f64>::zeros(); m_obs];
    let mut g0 = vec![Vector2::<f64>::zeros(); m_obs];
    let mut pairs = 0usize;
    // derivative weights reach the same pairs as the weights themselves
    setup.for_each_weighted(|i, j, w| {
        let (z, y) = pair_row(tr, i, j);
        let zeta = z * (y - z.dot(&th));
        jac += w * z * z.transpose() / norm;
        let k = w * zeta;
        psi_u[tr.idx[i]] += k / (nf - 1.0);
        psi_u[tr.idx[j]] += k / (nf - 1.0);
        let wd = setup.weight_deriv(i, j);
        g1[i] += wd * zeta / norm;
        g0[j] += wd * zeta / norm;
        pairs += 1;
    });
    if pairs < MIN_WEIGHTED_PAIRS {
        return Err(Error::RankDeficient(format!("only {pairs} pairs carry weight")));
    }
    let jinv = jac.try_inverse().ok_or_else(|| Error::RankDeficient(format!("Jacobian {jac:?} is singular")))?;

    // residuals of the first-stage smoothers at every observation
    let mut e11 = vec![0.0; n];
    let mut e10 = vec![0.0; n];
    let mut e2 = vec![0.0; n];
    for k in 0..n {
        if let Ok(p) = surface.evaluate(sample.x1[k], sample.x[k]) {
            let y11 = (sample.y1[k] == 1 && sample.y2[k] == 1) as u8 as f64;
            let y10 = (sample.y1[k] == 1 && sample.y2[k] == 0) as u8 as f64;
            e11[k] = y11 - p.p11;
            e10[k] = y10 - p.p10;
            e2[k] = sample.y2[k] as f64 - p.p_y2;
        }
    }
    let mut phi = vec![Vector2::<f64>::zeros(); n];
    for i in 0..m_obs {
        let (x1, x) = (tr.x1[i], tr.x[i]);
        let p = surface.evaluate(x1, x)?;
        for (k, l) in surface.slope_weights(x1, x, SlopeTarget::Cell)? {
            phi[k] += l * (g1[i] * e11[k] + g0[i] * e10[k]) / p.fv;
        }
        if !p.clamped {
            let coef = (g1[i] * p.dp11 + g0[i] * p.dp10) / (p.fv * p.fv);
            for (k, l) in surface.slope_weights(x1, x, SlopeTarget::Density)? {
                phi[k] -= l * e2[k] * coef;
            }
        }
    }
    let influence: Vec<Vector2<f64>> = (0..n).map(|k| psi_u[k] + nf * phi[k]).collect();
    let mean = influence.iter().fold(Vector2::zeros(), |a, v| a + v) / nf;
    let mut v = Matrix2::zeros();
    for p in &influence {
        let c = p - mean;
        v += c * c.transpose() / nf;
    }
    let var = jinv * v * jinv.transpose() / nf;
    let var = (var + var.transpose()) * 0.5;
    Ok(Sandwich {
        variance: [[var[(0, 0)], var[(0, 1)]], [var[(1, 0)], var[(1, 1)]]],
        influence: influence.iter().map(|p| [p[0], p[1]]).collect(),
        jacobian: [[jac[(0, 0)], jac[(0, 1)]], [jac[(1, 0)], jac[(1, 1)]]],
    })
}

/// [`fit_wls`] with the sandwich variance attached to the report.
pub fn fit_wls_with_variance(sample: &Sample, surface: &NpSurface, cfg: &PairWeightConfig) -> Result<EstimateReport> {
    let mut r = fit_wls(sample, surface, cfg)?;
    let s = sandwich_variance(sample, surface, &r.theta(), cfg)?;
    r.variance = Some(s.variance);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp_oracle::{simulate, DgpSpec, MainLaw};
    use crate::kernel_np::{default_bandwidths, fit_surfaces, BandwidthProfile, OracleRatios, TrimBox};

    fn fitted(n: usize, seed: u64) -> (Sample, NpSurface) {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.2);
        let s = simulate(&spec, n, seed).unwrap();
        let bw = default_bandwidths(&s, BandwidthProfile::Main).unwrap();
        let f = fit_surfaces(&s, &bw, &KernelFn::gaussian()).unwrap();
        (s, f)
    }

    #[test]
    fn exact_matches_recover_theta() {
        // pairs placed on the matching set with oracle ratios
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.2);
        let mut x1 = vec![];
        let mut x = vec![];
        for k in 0..40 {
            let xi = -1.0 + 0.05 * k as f64;
            x1.push(0.0);
            x.push(xi);
            // x1~ - gamma x~ = x1 + alpha - gamma x with x1~ = 1
            x1.push(1.0);
            let xt = (1.0 - 0.5 + 1.2 * xi) / 1.2;
            x.push(xt);
            // and a reverse match with x1 = 0 against the treated point
            x1.push(0.0);
            x.push(xt - 1.5 / 1.2);
        }
        let n = x.len();
        let s = Sample::from_columns(vec![0; n], vec![0; n], x1, x).unwrap();
        let trim = TrimBox { x_lo: -10.0, x_hi: 10.0, x1_lo: 0.0, x1_hi: 1.0, cells: Some(vec![0.0, 1.0]) };
        let o = OracleRatios::new(spec, trim);
        let cfg = PairWeightConfig { h_match: MatchBandwidth::Fixed(1e-6), kernel: KernelKind::HigherOrderEven(2) };
        let r = fit_wls(&s, &o, &cfg).unwrap();
        assert!((r.alpha - 0.5).abs() < 1e-9 && (r.gamma.unwrap() - 1.2).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn normal_equations_hold_at_estimate() {
        let (s, f) = fitted(400, 3);
        for kernel in [KernelKind::HigherOrderEven(8), KernelKind::Gaussian] {
            let cfg = PairWeightConfig { kernel, ..Default::default() };
            let r = fit_wls(&s, &f, &cfg).unwrap();
            let (res, mag) = normal_equation_residual(&s, &f, &cfg, &r.theta()).unwrap();
            for k in 0..2 {
                assert!(res[k].abs() <= 1e-9 * mag[k], "{res:?} {mag:?}");
            }
            assert!(r.diagnostics.effective_pairs.unwrap() > 10.0);
        }
    }

    #[test]
    fn tiny_bandwidth_is_rank_deficient() {
        let (s, f) = fitted(200, 1);
        let cfg = PairWeightConfig { h_match: MatchBandwidth::Fixed(1e-12), ..Default::default() };
        assert!(matches!(fit_wls(&s, &f, &cfg), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn weights_vanish_outside_kernel_reach() {
        let (s, f) = fitted(200, 2);
        let setup = PairSetup::new(&s, &f, &PairWeightConfig::default()).unwrap();
        let m = setup.tr.len();
        let mut visited = std::collections::HashSet::new();
        setup.for_each_weighted(|i, j, _| {
            visited.insert((i, j));
        });
        for i in 0..m {
            for j in 0..m {
                let u = setup.tr.p1r[i] + setup.tr.p0r[j];
                if i != j && u.abs() > setup.reach() {
                    assert_eq!(setup.weight(i, j), 0.0);
                    assert!(!visited.contains(&(i, j)));
                }
                if i != j && setup.weight(i, j) != 0.0 {
                    assert!(visited.contains(&(i, j)));
                }
            }
        }
    }

    #[test]
    fn estimate_is_invariant_to_row_order() {
        let (s, f) = fitted(300, 5);
        let perm: Vec<usize> = (0..s.n).rev().collect();
        let p = Sample::from_columns(
            perm.iter().map(|&i| s.y1[i]).collect(),
            perm.iter().map(|&i| s.y2[i]).collect(),
            perm.iter().map(|&i| s.x1[i]).collect(),
            perm.iter().map(|&i| s.x[i]).collect(),
        )
        .unwrap();
        let fp = fit_surfaces(&p, &f.bandwidths, &KernelFn::gaussian()).unwrap();
        let a = fit_wls(&s, &f, &PairWeightConfig::default()).unwrap();
        let b = fit_wls(&p, &fp, &PairWeightConfig::default()).unwrap();
        assert!((a.alpha - b.alpha).abs() < 1e-12 && (a.gamma.unwrap() - b.gamma.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn swapping_pair_orientation_leaves_estimate_unchanged() {
        // (i, j) -> (j, i) negates the response and every antisymmetric regressor,
        // including the role contrast that carries alpha
        let (s, f) = fitted(300, 6);
        let cfg = PairWeightConfig::default();
        let setup = PairSetup::new(&s, &f, &cfg).unwrap();
        let mut m = Matrix2::zeros();
        let mut b = Vector2::zeros();
        setup.for_each_weighted(|i, j, w| {
            let (z, y) = pair_row(&setup.tr, i, j);
            let z = -z;
            m += w * z * z.transpose();
            b += w * (-y) * z;
        });
        let swapped = m.try_inverse().unwrap() * b;
        let r = fit_wls(&s, &f, &cfg).unwrap();
        assert!((swapped[0] - r.alpha).abs() < 1e-10 && (swapped[1] - r.gamma.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn influence_values_average_to_zero() {
        let cfg = PairWeightConfig::default();
        let mut inside = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let (s, f) = fitted(400, 100 + seed);
            let r = fit_wls(&s, &f, &cfg).unwrap();
            let sw = sandwich_variance(&s, &f, &r.theta(), &cfg).unwrap();
            let mean = sw.influence_mean();
            let ok = (0..2).all(|k| {
                let col: Vec<f64> = sw.influence.iter().map(|p| p[k]).collect();
                mean[k].abs() < 3.0 * crate::stats::sd(&col) / (s.n as f64).sqrt()
            });
            inside += ok as usize;
        }
        assert!(inside as f64 >= 0.9 * seeds as f64, "{inside} of {seeds}");
    }

    #[test]
    fn sandwich_is_symmetric_psd() {
        let (s, f) = fitted(400, 7);
        let cfg = PairWeightConfig::default();
        let r = fit_wls(&s, &f, &cfg).unwrap();
        let sw = sandwich_variance(&s, &f, &r.theta(), &cfg).unwrap();
        let v = sw.variance;
        assert!((v[0][1] - v[1][0]).abs() < 1e-10);
        assert!(v[0][0] >= 0.0 && v[1][1] >= 0.0);
        assert!(v[0][0] * v[1][1] - v[0][1] * v[1][0] >= -1e-10);
        assert_eq!(sw.influence.len(), s.n);
    }

    #[test]
    fn pair_sum_sd_matches_brute_force() {
        let a = [0.3, 0.9, 0.1, 0.5];
        let b = [-0.2, -0.7, -0.4, -0.1];
        let mut v = vec![];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    v.push(a[i] + b[j]);
                }
            }
        }
        assert!((pair_sum_sd(&a, &b) - crate::stats::sd(&v)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = PairWeightConfig { h_match: MatchBandwidth::Auto { c: 1.0, delta: 0.2 }, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PairWeightConfig { kernel: KernelKind::HigherOrderEven(5), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
