use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cutoff_threshold, invert, inverse_interp, linspace, pava, CharFn, DensityEstimate, KotlarskiSplit, Provenance, RoundTrip, SPACE_POINTS};
use crate::dgp_oracle::{Sample, Theta};
use crate::error::{Error, Result};
use crate::identification_analyzer::{check_rank_condition, solve_theta_linear_system, MatchedPair, RankConditionInput, RANK_TOL};
use crate::kernel_np::{default_bandwidths, discrete_cells, fit_surfaces, BandwidthProfile, KernelFn, NpSurface};
use crate::report::{EstimateReport, EstimatorKind};
use crate::stats;

/// Local-linear bandwidth in `X` is `LL_SCALE * sd(X) * n^(-1/5)` with a biweight kernel.
const LL_SCALE: f64 = 2.5;
const NU_X_POINTS: usize = 15;
const NU_W_POINTS: usize = 41;
const SURFACE_X_POINTS: usize = 256;
const SURFACE_W_POINTS: usize = 64;
/// Levels closer than this to 0 or 1 carry little information about level sets.
const LEVEL_MARGIN: f64 = 0.05;
const CROSSING_MARGIN: f64 = 0.02;

fn measurements(sample: &Sample) -> Result<(&[f64], &[f64])> {
    match (&sample.y3, &sample.y4) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::UnsupportedStructure("sample carries no factor measurements".into())),
    }
}

/// `X` sorted once for repeated local-linear smoothing.
struct SortedX {
    order: Vec<usize>,
    xs: Vec<f64>,
}

impl SortedX {
    fn new(x: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let xs = order.iter().map(|&i| x[i]).collect();
        Self { order, xs }
    }

    fn quantile(&self, p: f64) -> f64 {
        stats::quantile_sorted(&self.xs, p)
    }

    /// Equivalent-kernel weights of the local-linear fit at `x0`.
    fn weights(&self, x0: f64, h: f64) -> Option<Vec<(usize, f64)>> {
        let lo = self.xs.partition_point(|v| *v < x0 - h);
        let hi = self.xs.partition_point(|v| *v <= x0 + h);
        if hi < lo + 10 {
            return None;
        }
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let k: Vec<(f64, f64)> = (lo..hi)
            .map(|j| {
                let d = self.xs[j] - x0;
                let u = d / h;
                let kv = (1.0 - u * u).powi(2);
                s0 += kv;
                s1 += kv * d;
                s2 += kv * d * d;
                (kv, d)
            })
            .collect();
        let den = s0 * s2 - s1 * s1;
        if !(den > 1e-10 * s0 * s2) {
            return None;
        }
        Some((lo..hi).zip(k).map(|(j, (kv, d))| (self.order[j], kv * (s2 - d * s1) / den)).collect())
    }
}

fn ll_bandwidth(x: &[f64]) -> f64 {
    LL_SCALE * stats::sd(x) * (x.len() as f64).powf(-0.2)
}

/// Level-set surface `G(x, w) = F_eta2(x - nu~ w)` and the loading it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuEstimate {
    pub nu_tilde: f64,
    /// `1 / nu~`.
    pub nu: f64,
    pub pairs: usize,
    pub x_grid: Vec<f64>,
    pub w_grid: Vec<f64>,
    /// `g[a][k] = G(x_a, w_k)`, monotonized in `x`.
    pub g: Vec<Vec<f64>>,
    /// Mean absolute adjustment made when monotonizing in `x`.
    pub violation: f64,
}

/// Loading `nu~ = 1 / nu` of the first measurement on the selection factor.
///
/// Inverts `E[Y2 e^{itY3} | X = x] / phi_eta3(t)` in `t` and divides by the
/// factor density, giving `G(x, w)`. Pairs of points with equal `G` satisfy
/// `nu~ = (x - x') / (w - w')`; the median over all such pairs is returned.
pub fn recover_nu(sample: &Sample, split: &KotlarskiSplit) -> Result<NuEstimate> {
    let (y3, _) = measurements(sample)?;
    let n = sample.n;
    let thr = cutoff_threshold(n);
    let cf_eta3 = split.cf_eta3.truncated(thr);
    let k = cf_eta3.len().min(split.cf_wtilde.len());
    if k < 2 {
        return Err(Error::Regularization("no frequencies survive the cutoff".into()));
    }
    let t = &cf_eta3.t[..k];
    let sx = SortedX::new(&sample.x);
    let h = ll_bandwidth(&sample.x);
    let x_grid = linspace(sx.quantile(0.15), sx.quantile(0.85), NU_X_POINTS);
    let w_grid = linspace(split.f_wtilde.quantile(0.1), split.f_wtilde.quantile(0.9), NU_W_POINTS);
    let f_raw = invert(t, &split.cf_wtilde.values[..k], &w_grid);
    let f_max = f_raw.iter().cloned().fold(0.0, f64::max);
    let rows: Vec<Vec<f64>> = x_grid
        .par_iter()
        .map(|&x0| {
            let wts = sx.weights(x0, h).ok_or_else(|| Error::Extrapolation(format!("too few observations near x = {x0}")))?;
            let ratio: Vec<Complex64> = (0..k)
                .map(|j| {
                    let mut s = Complex64::new(0.0, 0.0);
                    for &(i, w) in &wts {
                        if sample.y2[i] == 1 {
                            let (sn, cs) = (t[j] * y3[i]).sin_cos();
                            s += Complex64::new(w * cs, w * sn);
                        }
                    }
                    s / cf_eta3.values[j]
                })
                .collect();
            let g = invert(t, &ratio, &w_grid);
            Ok(g.iter().zip(&f_raw).map(|(g, f)| if *f > 1e-3 * f_max { g / f } else { f64::NAN }).collect())
        })
        .collect::<Result<_>>()?;
    let (nx, nw) = (x_grid.len(), w_grid.len());
    let mut g = rows.clone();
    let (mut adj, mut cnt) = (0.0, 0usize);
    for kw in 0..nw {
        let col: Vec<f64> = (0..nx).map(|a| rows[a][kw]).collect();
        if col.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let mono = pava(&col, &vec![1.0; nx], true);
        for a in 0..nx {
            adj += (mono[a] - col[a]).abs();
            cnt += 1;
            g[a][kw] = mono[a];
        }
    }
    let spread = (0..nx)
        .map(|a| {
            let fin: Vec<f64> = g[a].iter().copied().filter(|v| v.is_finite()).collect();
            fin.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - fin.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / nx as f64;
    if !(spread >= 0.05) {
        return Err(Error::Degenerate(format!("G(x, w) barely varies in w (mean spread {spread:.4}); nu is not identified")));
    }
    let span = w_grid[nw - 1] - w_grid[0];
    let mut ratios = Vec::new();
    for kw in 0..nw {
        for lw in 0..nw {
            if (w_grid[kw] - w_grid[lw]).abs() < 0.25 * span {
                continue;
            }
            let col: Vec<f64> = (0..nx).map(|a| g[a][lw]).collect();
            if col.iter().any(|v| !v.is_finite()) {
                continue;
            }
            for a in 0..nx {
                let level = g[a][kw];
                if !(level > LEVEL_MARGIN && level < 1.0 - LEVEL_MARGIN) {
                    continue;
                }
                if let Some(xp) = inverse_interp(&x_grid, &col, level) {
                    ratios.push((x_grid[a] - xp) / (w_grid[kw] - w_grid[lw]));
                }
            }
        }
    }
    if ratios.len() < 10 {
        return Err(Error::Degenerate(format!("only {} level-set pairs found", ratios.len())));
    }
    let nu_tilde = stats::median(&ratios);
    Ok(NuEstimate { nu_tilde, nu: 1.0 / nu_tilde, pairs: ratios.len(), x_grid, w_grid, g, violation: if cnt > 0 { adj / cnt as f64 } else { 0.0 } })
}

#[derive(Debug, Clone)]
pub struct Eta2Estimate {
    pub density: DensityEstimate,
    pub cf: CharFn,
    /// Monotone fit of `P(Y2 = 1 | X = x)`, the distribution function of `W + eta2`.
    pub fit_grid: Vec<f64>,
    pub fit: Vec<f64>,
    /// Band-limited density of `W + eta2` implied by the monotone fit.
    pub f_v: DensityEstimate,
    pub f_w: DensityEstimate,
    pub round_trip: RoundTrip,
}

fn fill_gaps(v: &mut [f64]) {
    let Some(first) = v.iter().position(|x| x.is_finite()) else { return };
    for k in 0..first {
        v[k] = v[first];
    }
    for k in first + 1..v.len() {
        if !v[k].is_finite() {
            v[k] = v[k - 1];
        }
    }
}

/// Mean implied by a characteristic function through `Im phi(t1) / t1`.
fn cf_mean(cf: &CharFn) -> f64 {
    if cf.len() < 2 {
        0.0
    } else {
        cf.values[1].arg() / cf.t[1]
    }
}

/// Density of `eta2` from `P(Y2 = 1 | X = x) = P(W + eta2 <= x)`.
///
/// The propensity is fitted by local-linear smoothing on a 512-point grid and
/// made monotone by isotonic regression; its Stieltjes transform is divided
/// by `phi_W` on the grid of `cf_w`. A point-mass `cf_w` skips deconvolution.
pub fn recover_eta2(sample: &Sample, cf_w: &CharFn) -> Result<Eta2Estimate> {
    let n = sample.n;
    let thr = cutoff_threshold(n);
    let sx = SortedX::new(&sample.x);
    let h = ll_bandwidth(&sample.x);
    let fit_grid = linspace(sx.quantile(0.005), sx.quantile(0.995), SPACE_POINTS);
    let mut raw: Vec<f64> = fit_grid
        .iter()
        .map(|&x0| match sx.weights(x0, h) {
            Some(w) => w.iter().map(|&(i, w)| w * sample.y2[i] as f64).sum(),
            None => f64::NAN,
        })
        .collect();
    fill_gaps(&mut raw);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData("propensity fit failed at every grid point".into()));
    }
    let fit: Vec<f64> = pava(&raw, &vec![1.0; raw.len()], true).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let m = fit_grid.len();
    let mut mids = Vec::with_capacity(m + 1);
    mids.push((fit_grid[0], fit[0]));
    for j in 1..m {
        mids.push((0.5 * (fit_grid[j - 1] + fit_grid[j]), fit[j] - fit[j - 1]));
    }
    mids.push((fit_grid[m - 1], 1.0 - fit[m - 1]));
    let (mut t, mut phi_v, mut phi_w, mut phi_e) = (vec![], vec![], vec![], vec![]);
    for k in 0..cf_w.len() {
        let s = cf_w.t[k];
        let v: Complex64 = mids.iter().map(|&(x, p)| Complex64::new(0.0, s * x).exp() * p).sum();
        let w = cf_w.values[k];
        if k > 0 && (w.norm() < thr || v.norm() < thr) {
            break;
        }
        t.push(s);
        phi_v.push(v);
        phi_w.push(w);
        phi_e.push(v / w);
    }
    if t.len() < 2 {
        return Err(Error::Regularization("the spectral cutoff leaves no usable frequencies for eta2".into()));
    }
    let cf = CharFn::new(t.clone(), phi_e, n, thr)?;
    let direct = cf_w.values.iter().all(|v| *v == Complex64::new(1.0, 0.0));
    let half = 0.5 * (fit_grid[m - 1] - fit_grid[0]);
    let ge = linspace(cf_mean(&cf) - half, cf_mean(&cf) + half, SPACE_POINTS);
    let density = DensityEstimate::project(ge.clone(), &invert(&t, &cf.values, &ge), if direct { Provenance::Direct } else { Provenance::Deconvolution })?;
    let f_v = DensityEstimate::project(fit_grid.clone(), &invert(&t, &phi_v, &fit_grid), Provenance::Direct)?;
    let cf_wk = cf_w.prefix(t.len());
    let f_w = if direct {
        // point mass: a narrow band-limited spike
        let gw = linspace(-half / 8.0, half / 8.0, SPACE_POINTS);
        DensityEstimate::project(gw.clone(), &invert(&t, &phi_w, &gw), Provenance::Direct)?
    } else {
        let gw = linspace(cf_mean(&cf_wk) - half, cf_mean(&cf_wk) + half, SPACE_POINTS);
        DensityEstimate::project(gw.clone(), &invert(&t, &phi_w, &gw), Provenance::Kotlarski)?
    };
    let round_trip = RoundTrip::check("eta2 * W = V", &density, &f_w, &f_v);
    Ok(Eta2Estimate { density, cf, fit_grid, fit, f_v, f_w, round_trip })
}

/// `G11(w) = F_eta1(x1 + alpha - gamma w)` and `G10(w) = F_eta1(x1 - gamma w)`
/// on the central 80% of the factor distribution for one `X1` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSurfaces {
    pub cell: f64,
    pub w: Vec<f64>,
    pub g11: Vec<f64>,
    pub g10: Vec<f64>,
    pub decreasing: bool,
    /// Mean absolute adjustment made when monotonizing each surface.
    pub violation11: f64,
    pub violation10: f64,
}

/// `d/dx P11(x1, .)` and `-d/dx P10(x1, .)` on a uniform `x` grid for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDerivatives {
    pub cell: f64,
    pub x: Vec<f64>,
    pub dp11: Vec<f64>,
    pub neg_dp10: Vec<f64>,
}

impl CellDerivatives {
    /// Local-polynomial derivatives on the central 99% of `X`; points where the
    /// local fit is unavailable contribute zero.
    pub fn from_surface(sample: &Sample, surface: &NpSurface, cell: f64) -> Result<Self> {
        let sx = SortedX::new(&sample.x);
        let x = linspace(sx.quantile(0.005), sx.quantile(0.995), SURFACE_X_POINTS);
        let (mut dp11, mut neg_dp10) = (Vec::with_capacity(x.len()), Vec::with_capacity(x.len()));
        for &v in &x {
            let (a, b) = match (surface.dp11(cell, v), surface.dp10(cell, v)) {
                (Ok(a), Ok(b)) => (a, -b),
                (Err(Error::Extrapolation(_)), _) | (_, Err(Error::Extrapolation(_))) => (0.0, 0.0),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            dp11.push(a);
            neg_dp10.push(b);
        }
        Ok(Self { cell, x, dp11, neg_dp10 })
    }
}

/// Index surfaces of one cell from the `x`-derivatives of `P11` and `P10`.
///
/// `d/dx P11(x1, x) = (g11 * f_eta2)(x)` with `g11(w) = F_eta1(x1 + alpha - gamma w) f_W(w)`,
/// and likewise for `-d/dx P10`; dividing Fourier transforms by `phi_eta2`
/// and the inverted `g` by the equally band-limited `f_W` gives `G`.
pub fn recover_index_surfaces(d: &CellDerivatives, cf_w: &CharFn, cf_eta2: &CharFn, f_w: &DensityEstimate) -> Result<IndexSurfaces> {
    let k = cf_eta2.len().min(cf_w.len());
    if k < 2 {
        return Err(Error::Regularization("no frequencies survive the cutoff".into()));
    }
    if d.x.len() < 2 || d.dp11.len() != d.x.len() || d.neg_dp10.len() != d.x.len() {
        return Err(Error::Input("derivative curves must share a grid of two or more points".into()));
    }
    let (cell, xg, d11, d10) = (d.cell, &d.x, &d.dp11, &d.neg_dp10);
    let t = &cf_eta2.t[..k];
    let dx = xg[1] - xg[0];
    let transform = |d: &[f64]| -> Vec<Complex64> {
        (0..k)
            .map(|j| {
                let mut s = Complex64::new(0.0, 0.0);
                for (q, (&x, &v)) in xg.iter().zip(d).enumerate() {
                    let w = if q == 0 || q == xg.len() - 1 { 0.5 } else { 1.0 };
                    s += Complex64::new(0.0, t[j] * x).exp() * (w * v);
                }
                s * dx / cf_eta2.values[j]
            })
            .collect()
    };
    let w = linspace(f_w.quantile(0.1), f_w.quantile(0.9), SURFACE_W_POINTS);
    let f_raw = invert(t, &cf_w.values[..k], &w);
    if f_raw.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Regularization("band-limited factor density vanishes inside its central range".into()));
    }
    let ratio = |d: &[f64]| -> Vec<f64> { invert(t, &transform(d), &w).iter().zip(&f_raw).map(|(g, f)| (g / f).clamp(0.0, 1.0)).collect() };
    let (r11, r10) = (ratio(d11), ratio(d10));
    let last = w.len() - 1;
    let decreasing = (r11[last] - r11[0]) + (r10[last] - r10[0]) < 0.0;
    let ones = vec![1.0; w.len()];
    let g11 = pava(&r11, &ones, !decreasing);
    let g10 = pava(&r10, &ones, !decreasing);
    let viol = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    Ok(IndexSurfaces { cell, violation11: viol(&r11, &g11), violation10: viol(&r10, &g10), w, g11, g10, decreasing })
}

/// Points with `G11(cell, w) = G10(cell~, w~)` over every ordered pair of cells.
///
/// Each is a matched pair in the sense of the linear identification system:
/// `x1 + alpha - gamma w = x1~ - gamma w~`.
pub fn find_crossings(surfaces: &[IndexSurfaces]) -> Vec<MatchedPair> {
    let mut out = Vec::new();
    for s in surfaces {
        for r in surfaces {
            for (k, &level) in s.g11.iter().enumerate() {
                if !(level > CROSSING_MARGIN && level < 1.0 - CROSSING_MARGIN) {
                    continue;
                }
                if let Some(wt) = inverse_interp(&r.w, &r.g10, level) {
                    out.push(MatchedPair::condensed(s.cell, s.w[k], r.cell, wt));
                }
            }
        }
    }
    out
}

/// Solve the linear system over crossings.
///
/// Exactly `d` crossings are solved directly; more are pooled by least squares
/// after the same rank check on the normal matrix.
pub fn solve_theta_from_measurements(crossings: &[MatchedPair]) -> Result<Theta> {
    let first = crossings.first().ok_or_else(|| Error::Input("no crossings".into()))?;
    let (d1, d3) = first.dims();
    let d = d1 + d3 + 1;
    if crossings.len() < d {
        return Err(Error::RankDeficient(format!("{} crossings for {d} parameters", crossings.len())));
    }
    if crossings.len() == d {
        return solve_theta_linear_system(crossings);
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for p in crossings {
        if p.dims() != (d1, d3) {
            return Err(Error::Input("crossings have inconsistent dimensions".into()));
        }
        let (mut r, y) = p.row();
        r[d - 1] = -r[d - 1];
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += r[i] * r[j];
            }
            b[i] += r[i] * y;
        }
    }
    let check = check_rank_condition(&RankConditionInput { m: m.clone() }, RANK_TOL)?;
    if !check.full_rank {
        return Err(Error::RankDeficient(format!(
            "crossing normal matrix has singular values in [{:e}, {:e}]",
            check.smallest_singular_value, check.largest_singular_value
        )));
    }
    let sol = m.lu().solve(&b).ok_or_else(|| Error::RankDeficient("crossing system is singular".into()))?;
    Ok(Theta::from_system_vec(sol.as_slice(), d1 - 1))
}

/// Every stage of the measurement-based estimator.
#[derive(Debug, Clone)]
pub struct DeconvReport {
    pub split: KotlarskiSplit,
    pub nu: NuEstimate,
    pub eta2: Eta2Estimate,
    pub surfaces: Vec<IndexSurfaces>,
    pub crossings: usize,
    pub theta: Theta,
    /// `sigma = sigma~ nu`.
    pub sigma: f64,
    pub report: EstimateReport,
}

impl DeconvReport {
    pub fn round_trips(&self) -> Vec<&RoundTrip> {
        self.split.round_trips.iter().chain(std::iter::once(&self.eta2.round_trip)).collect()
    }
}

pub fn run_pipeline(sample: &Sample) -> Result<DeconvReport> {
    sample.validate()?;
    let (y3, y4) = measurements(sample)?;
    let cells = discrete_cells(&sample.x1).ok_or_else(|| Error::UnsupportedStructure("index surfaces need discrete X1 cells".into()))?;
    let split = super::kotlarski_split(y3, y4)?;
    let nu = recover_nu(sample, &split)?;
    let cf_w = split.cf_wtilde.rescaled(nu.nu_tilde)?;
    let f_w = split.f_wtilde.scaled(nu.nu_tilde);
    let eta2 = recover_eta2(sample, &cf_w)?;
    let bw = default_bandwidths(sample, BandwidthProfile::Main)?;
    let np = fit_surfaces(sample, &bw, &KernelFn::gaussian())?;
    let surfaces: Vec<IndexSurfaces> = cells
        .par_iter()
        .map(|&c| recover_index_surfaces(&CellDerivatives::from_surface(sample, &np, c)?, &cf_w, &eta2.cf, &f_w))
        .collect::<Result<_>>()?;
    let crossings = find_crossings(&surfaces);
    let theta = solve_theta_from_measurements(&crossings)?;
    let mut report = EstimateReport::new(EstimatorKind::Deconvolution, theta.alpha, Some(theta.gamma));
    report.coefficients = theta.to_system_vec();
    report.diagnostics.n = sample.n;
    report.diagnostics.pairs = crossings.len();
    Ok(DeconvReport { sigma: split.sigma_tilde * nu.nu, split, nu, eta2, surfaces, crossings: crossings.len(), theta, report })
}
