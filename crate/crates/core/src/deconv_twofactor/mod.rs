//! Recovery of the two-factor model from two continuous measurements of the
//! common factor: the measurement split, deconvolution of `eta2`, the `F_eta1`
//! index surfaces and the final linear solve for `theta`.
//!
//! Fourier convention: `phi(t) = E exp(i t X)` and
//! `f(x) = (1 / 2 pi) int exp(-i t x) phi(t) dt`. Characteristic functions are
//! stored on nonnegative frequencies only.

mod kotlarski;
mod pipeline;

pub use kotlarski::{kotlarski_split, KotlarskiSplit, CUMULANT_Z};
pub use pipeline::{
    find_crossings, recover_eta2, CellDerivatives, recover_index_surfaces, recover_nu, run_pipeline, solve_theta_from_measurements, DeconvReport, Eta2Estimate, IndexSurfaces,
    NuEstimate,
};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points on the full symmetric frequency grid.
pub const FREQ_POINTS: usize = 2048;
/// The frequency grid spans `|t| <= FREQ_SPAN / sd(Y3)`.
pub const FREQ_SPAN: f64 = 64.0;
pub const SPACE_POINTS: usize = 512;
/// Slack added to every round-trip bound for grid quadrature and tail truncation.
pub const QUADRATURE_SLACK: f64 = 5e-3;

/// `max(n^(-1/2) ln n, 1e-3)`: frequencies stop at the first `|phi|` below this.
pub fn cutoff_threshold(n: usize) -> f64 {
    let n = n as f64;
    (n.ln() / n.sqrt()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharFn {
    /// Uniform nonnegative frequencies starting at zero.
    pub t: Vec<f64>,
    pub values: Vec<Complex64>,
    pub n_obs: usize,
    /// Largest retained frequency.
    pub cutoff: f64,
    pub threshold: f64,
    /// Frequencies where `|phi| > 1 + 3 / sqrt(n)`.
    pub excess: usize,
}

impl CharFn {
    pub fn new(t: Vec<f64>, mut values: Vec<Complex64>, n_obs: usize, threshold: f64) -> Result<Self> {
        if t.is_empty() || t.len() != values.len() || t[0] != 0.0 {
            return Err(Error::Input("characteristic function grid must start at zero and match its values".into()));
        }
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Numerical("non-finite characteristic function value".into()));
        }
        values[0] = Complex64::new(1.0, 0.0);
        let slack = 1.0 + 3.0 / (n_obs.max(1) as f64).sqrt();
        let excess = values.iter().filter(|v| v.norm() > slack).count();
        let cutoff = *t.last().unwrap();
        Ok(Self { t, values, n_obs, cutoff, threshold, excess })
    }

    /// Point mass at zero, known on `[0, cutoff]`.
    pub fn degenerate(dt: f64, points: usize) -> Self {
        let t: Vec<f64> = (0..points).map(|k| k as f64 * dt).collect();
        let values = vec![Complex64::new(1.0, 0.0); points];
        Self::new(t, values, usize::MAX, 0.0).expect("valid grid")
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.t.len() > 1 {
            self.t[1]
        } else {
            0.0
        }
    }

    /// Value at any `|t| <= cutoff` by linear interpolation, using `phi(-t) = conj(phi(t))`.
    pub fn eval(&self, t: f64) -> Option<Complex64> {
        let a = t.abs();
        if a > self.cutoff * (1.0 + 1e-12) {
            return None;
        }
        let v = if self.t.len() == 1 {
            self.values[0]
        } else {
            let u = a / self.dt();
            let k = (u.floor() as usize).min(self.t.len() - 2);
            let f = (u - k as f64).clamp(0.0, 1.0);
            self.values[k] * (1.0 - f) + self.values[k + 1] * f
        };
        Some(if t < 0.0 { v.conj() } else { v })
    }

    /// Characteristic function of `c X`, on the grid `t / |c|`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        if c == 0.0 || !c.is_finite() {
            return Err(Error::Domain(format!("cannot rescale by {c}")));
        }
        let t = self.t.iter().map(|v| v / c.abs()).collect();
        let values = self.values.iter().map(|v| if c < 0.0 { v.conj() } else { *v }).collect();
        Self::new(t, values, self.n_obs, self.threshold)
    }

    /// Keep frequencies up to the first one where `|phi| < threshold`.
    pub fn truncated(&self, threshold: f64) -> Self {
        let k = self.values.iter().skip(1).position(|v| v.norm() < threshold).map_or(self.len(), |p| p + 1);
        self.prefix(k)
    }

    pub fn prefix(&self, k: usize) -> Self {
        let k = k.clamp(1, self.len());
        Self::new(self.t[..k].to_vec(), self.values[..k].to_vec(), self.n_obs, self.threshold).expect("prefix of a valid grid")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,re,im\n");
        for (t, v) in self.t.iter().zip(&self.values) {
            s.push_str(&format!("{t:.6},{:.8},{:.8}\n", v.re, v.im));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Kotlarski,
    Deconvolution,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    /// Uniform support grid.
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
    /// L1 distance between the raw inversion and the projected density.
    pub projection_distance: f64,
}

impl DensityEstimate {
    /// Clip negative values to zero and renormalize to unit mass on the grid.
    pub fn project(grid: Vec<f64>, raw: &[f64], provenance: Provenance) -> Result<Self> {
        if grid.len() < 2 || grid.len() != raw.len() {
            return Err(Error::Input("density grid and values must match and have two or more points".into()));
        }
        let dx = grid[1] - grid[0];
        let clipped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let mass = trapz(&clipped, dx);
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Regularization("inverted density has no positive mass".into()));
        }
        let values: Vec<f64> = clipped.iter().map(|v| v / mass).collect();
        let diff: Vec<f64> = raw.iter().zip(&values).map(|(r, v)| (r - v).abs()).collect();
        Ok(Self { projection_distance: trapz(&diff, dx), grid, values, provenance })
    }

    pub fn dx(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn integral(&self) -> f64 {
        trapz(&self.values, self.dx())
    }

    /// Linear interpolation, zero off the grid.
    pub fn eval(&self, x: f64) -> f64 {
        let (lo, dx) = (self.grid[0], self.dx());
        let u = (x - lo) / dx;
        if !(u >= 0.0) || u > (self.grid.len() - 1) as f64 {
            return 0.0;
        }
        let k = (u.floor() as usize).min(self.grid.len() - 2);
        let f = u - k as f64;
        self.values[k] * (1.0 - f) + self.values[k + 1] * f
    }

    pub fn mean(&self) -> f64 {
        let xv: Vec<f64> = self.grid.iter().zip(&self.values).map(|(x, v)| x * v).collect();
        trapz(&xv, self.dx())
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let dx = self.dx();
        let mut acc = 0.0;
        for k in 1..self.grid.len() {
            let step = 0.5 * (self.values[k - 1] + self.values[k]) * dx;
            if acc + step >= p && step > 0.0 {
                return self.grid[k - 1] + dx * (p - acc) / step;
            }
            acc += step;
        }
        *self.grid.last().unwrap()
    }

    /// Density of `c X`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut grid: Vec<f64> = self.grid.iter().map(|x| c * x).collect();
        let mut values: Vec<f64> = self.values.iter().map(|v| v / c.abs()).collect();
        if c < 0.0 {
            grid.reverse();
            values.reverse();
        }
        Self { grid, values, provenance: self.provenance, projection_distance: self.projection_distance }
    }

    /// `int |f_hat - f|` over the grid plus the mass `f` places off the grid.
    pub fn l1_to<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let dx = self.dx();
        let diff: Vec<f64> = self.grid.iter().zip(&self.values).map(|(x, v)| (v - f(*x)).abs()).collect();
        let inside: Vec<f64> = self.grid.iter().map(|x| f(*x)).collect();
        trapz(&diff, dx) + (1.0 - trapz(&inside, dx)).max(0.0)
    }

    pub fn l1_distance(&self, other: &DensityEstimate) -> f64 {
        self.l1_to(|x| other.eval(x))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,density\n");
        for (x, v) in self.grid.iter().zip(&self.values) {
            s.push_str(&format!("{x:.6},{v:.8}\n"));
        }
        s
    }
}

/// Convolution check `L1(f_a * f_b, f_ab)` against its regularization bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub name: String,
    pub l1: f64,
    /// Projection distances of the three densities, their cross term and
    /// [`QUADRATURE_SLACK`]; without projection the band-limited inversions
    /// convolve exactly.
    pub bound: f64,
    pub pass: bool,
}

impl RoundTrip {
    pub fn check(name: &str, a: &DensityEstimate, b: &DensityEstimate, ab: &DensityEstimate) -> Self {
        let conv = convolve(a, b, &ab.grid);
        let diff: Vec<f64> = conv.iter().zip(&ab.values).map(|(c, v)| (c - v).abs()).collect();
        let l1 = trapz(&diff, ab.dx());
        let (da, db, dab) = (a.projection_distance, b.projection_distance, ab.projection_distance);
        let bound = da + db + da * db + dab + QUADRATURE_SLACK;
        Self { name: name.into(), l1, bound, pass: l1 < 2.0 * bound }
    }
}

pub(crate) fn trapz(v: &[f64], dx: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    dx * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// `(1 / pi) int_0^T Re(exp(-i t x) phi(t)) dt` by the trapezoid rule.
pub(crate) fn invert(t: &[f64], phi: &[Complex64], grid: &[f64]) -> Vec<f64> {
    let m = t.len();
    if m < 2 {
        return vec![0.0; grid.len()];
    }
    let dt = t[1] - t[0];
    grid.iter()
        .map(|&x| {
            let mut s = 0.0;
            for k in 0..m {
                let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
                let (sn, cs) = (t[k] * x).sin_cos();
                s += w * (phi[k].re * cs + phi[k].im * sn);
            }
            s * dt / std::f64::consts::PI
        })
        .collect()
}

/// `(a * b)(y) = int a(w) b(y - w) dw` evaluated on `grid`.
pub(crate) fn convolve(a: &DensityEstimate, b: &DensityEstimate, grid: &[f64]) -> Vec<f64> {
    let dx = a.dx();
    let m = a.grid.len();
    grid.iter()
        .map(|&y| {
            let mut s = 0.0;
            for k in 0..m {
                let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
                s += w * a.values[k] * b.eval(y - a.grid[k]);
            }
            s * dx
        })
        .collect()
}

/// Weighted isotonic regression by pool-adjacent-violators.
pub(crate) fn pava(y: &[f64], w: &[f64], increasing: bool) -> Vec<f64> {
    let sign = if increasing { 1.0 } else { -1.0 };
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (v, wt) in y.iter().zip(w) {
        blocks.push((sign * v, *wt, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let wsum = w1 + w2;
            let mean = if wsum > 0.0 { (m1 * w1 + m2 * w2) / wsum } else { 0.5 * (m1 + m2) };
            *blocks.last_mut().unwrap() = (mean, wsum, c1 + c2);
        }
    }
    blocks.into_iter().flat_map(|(m, _, c)| std::iter::repeat_n(sign * m, c)).collect()
}

/// Point where a monotone piecewise-linear curve reaches `level`, if inside its range.
pub(crate) fn inverse_interp(xs: &[f64], ys: &[f64], level: f64) -> Option<f64> {
    for k in 1..xs.len() {
        let (a, b) = (ys[k - 1], ys[k]);
        if (a <= level && level <= b) || (b <= level && level <= a) {
            if a == b {
                continue;
            }
            return Some(xs[k - 1] + (xs[k] - xs[k - 1]) * (level - a) / (b - a));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normal_cf(mu: f64, s: f64, tmax: f64, m: usize) -> CharFn {
        let t: Vec<f64> = linspace(0.0, tmax, m);
        let v = t.iter().map(|&t| Complex64::new(0.0, mu * t).exp() * (-0.5 * s * s * t * t).exp()).collect();
        CharFn::new(t, v, 1000, 0.0).unwrap()
    }

    #[test]
    fn inversion_recovers_normal_density() {
        let cf = normal_cf(0.3, 0.7, 12.0, 600);
        let grid = linspace(-4.0, 4.0, SPACE_POINTS);
        let d = DensityEstimate::project(grid.clone(), &invert(&cf.t, &cf.values, &grid), Provenance::Direct).unwrap();
        let truth = |x: f64| crate::dist::norm_pdf((x - 0.3) / 0.7) / 0.7;
        assert!(d.l1_to(truth) < 1e-4);
        assert!((d.integral() - 1.0).abs() < 1e-12);
        assert!((d.mean() - 0.3).abs() < 1e-4);
        assert!((d.quantile(0.5) - 0.3).abs() < 1e-3);
    }

    #[test]
    fn charfn_invariants_and_rescaling() {
        let cf = normal_cf(0.5, 1.0, 5.0, 101);
        assert_eq!(cf.values[0], Complex64::new(1.0, 0.0));
        let (a, b) = (cf.eval(1.3).unwrap(), cf.eval(-1.3).unwrap());
        assert_eq!(a, b.conj());
        assert!(cf.eval(5.1).is_none());
        let r = cf.rescaled(-2.0).unwrap();
        assert!((r.cutoff - 2.5).abs() < 1e-12);
        // phi_{-2X}(t) = phi_X(-2t)
        let want = cf.eval(-2.0).unwrap();
        assert!((r.eval(1.0).unwrap() - want).norm() < 1e-12);
        assert_eq!(cf.truncated(0.5).cutoff, cf.t[cf.values.iter().position(|v| v.norm() < 0.5).unwrap() - 1]);
    }

    #[test]
    fn convolution_of_normals_round_trips() {
        let grid = linspace(-6.0, 6.0, 401);
        let a = DensityEstimate::project(grid.clone(), &grid.iter().map(|&x| crate::dist::norm_pdf(x)).collect::<Vec<_>>(), Provenance::Direct).unwrap();
        let ab_raw: Vec<f64> = grid.iter().map(|&x| crate::dist::norm_pdf(x / 2f64.sqrt()) / 2f64.sqrt()).collect();
        let ab = DensityEstimate::project(grid, &ab_raw, Provenance::Direct).unwrap();
        let rt = RoundTrip::check("normal", &a, &a, &ab);
        assert!(rt.l1 < 1e-3 && rt.pass, "{rt:?}");
    }

    #[test]
    fn projection_reports_distance() {
        let grid = linspace(0.0, 1.0, 11);
        let raw = vec![-0.1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -0.1];
        let d = DensityEstimate::project(grid.clone(), &raw, Provenance::Direct).unwrap();
        assert!(d.values.iter().all(|v| *v >= 0.0));
        assert!((d.integral() - 1.0).abs() < 1e-12);
        assert!(d.projection_distance > 0.0);
        assert!(matches!(DensityEstimate::project(grid, &[-1.0; 11], Provenance::Direct), Err(Error::Regularization(_))));
    }

    #[test]
    fn csv_exports() {
        let cf = normal_cf(0.0, 1.0, 1.0, 3);
        assert_eq!(cf.to_csv().lines().count(), 4);
        assert!(cf.to_csv().starts_with("t,re,im\n0.000000,1.00000000,0.00000000"));
    }

    #[test]
    fn inverse_interpolation() {
        assert_eq!(inverse_interp(&[0.0, 1.0, 2.0], &[1.0, 0.5, 0.0], 0.25), Some(1.5));
        assert_eq!(inverse_interp(&[0.0, 1.0], &[0.2, 0.4], 0.9), None);
    }

    proptest! {
        #[test]
        fn pava_is_monotone_and_mean_preserving(y in prop::collection::vec(-5.0f64..5.0, 1..40), inc in any::<bool>()) {
            let w = vec![1.0; y.len()];
            let f = pava(&y, &w, inc);
            prop_assert_eq!(f.len(), y.len());
            for k in 1..f.len() {
                if inc { prop_assert!(f[k] >= f[k - 1] - 1e-12) } else { prop_assert!(f[k] <= f[k - 1] + 1e-12) }
            }
            let (s1, s2): (f64, f64) = (y.iter().sum(), f.iter().sum());
            prop_assert!((s1 - s2).abs() < 1e-9);
        }

        #[test]
        fn rescaling_is_exact(c in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0], t in -1.0f64..1.0) {
            let cf = normal_cf(0.4, 0.9, 4.0, 401);
            let r = cf.rescaled(c).unwrap();
            let u = t * r.cutoff;
            prop_assert!((r.eval(u).unwrap() - cf.eval(c * u).unwrap()).norm() < 1e-9);
        }
    }
}
