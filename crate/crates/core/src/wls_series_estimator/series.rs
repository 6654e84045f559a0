use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{PairSetup, PairWeightConfig, MIN_WEIGHTED_PAIRS};
use crate::dgp_oracle::Sample;
use crate::error::{Error, Result};
use crate::kernel_np::RatioSurface;
use crate::report::{EstimateReport, EstimatorKind, ReportFlag};
use crate::stats;

/// Smallest admissible eigenvalue of the normalized weighted design matrix.
pub const MIN_EIGENVALUE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesBasis {
    Power,
    /// Chebyshev polynomials after mapping the trimmed support of `X` to `[-1, 1]`.
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    /// Number of non-constant basis terms; `None` uses `ceil(n^(1/3))`.
    pub k_n: Option<usize>,
    pub basis: SeriesBasis,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self { k_n: None, basis: SeriesBasis::Chebyshev }
    }
}

impl SeriesConfig {
    pub fn resolve_k(&self, n: usize) -> Result<usize> {
        let cap = (n as f64).cbrt().ceil() as usize;
        match self.k_n {
            Some(0) => Err(Error::Config("k_n = 0 leaves only an intercept, which cannot separate alpha from g0".into())),
            Some(k) if k > cap => Err(Error::Config(format!("k_n = {k} exceeds ceil(n^(1/3)) = {cap}"))),
            Some(k) => Ok(k),
            None => Ok(cap.max(1)),
        }
    }
}

/// Fitted factor loading `g0`, normalized to vanish at the sample median of `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesG0 {
    pub basis: SeriesBasis,
    /// Coefficients on basis terms `1..=k_n`.
    pub coefficients: Vec<f64>,
    /// Support used by the Chebyshev map.
    pub support: [f64; 2],
    pub offset: f64,
}

impl SeriesG0 {
    fn basis_values(basis: SeriesBasis, support: [f64; 2], k: usize, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(k);
        match basis {
            SeriesBasis::Power => {
                let mut p = 1.0;
                for _ in 0..k {
                    p *= x;
                    out.push(p);
                }
            }
            SeriesBasis::Chebyshev => {
                let t = (2.0 * x - support[0] - support[1]) / (support[1] - support[0]);
                let (mut prev, mut cur) = (1.0, t);
                for _ in 0..k {
                    out.push(cur);
                    let next = 2.0 * t * cur - prev;
                    prev = cur;
                    cur = next;
                }
            }
        }
        out
    }

    pub fn eval(&self, x: f64) -> f64 {
        let b = Self::basis_values(self.basis, self.support, self.coefficients.len(), x);
        b.iter().zip(&self.coefficients).map(|(u, c)| u * c).sum::<f64>() - self.offset
    }
}

/// Weighted pair regression of `x1_j - x1_i` on `1` and basis differences.
///
/// The report carries `alpha`, the coefficient vector `(alpha, c_1, .., c_k)`
/// and the weighted in-sample R-squared as its objective; the fitted `g0` is
/// returned alongside.
pub fn fit_series(sample: &Sample, surface: &dyn RatioSurface, cfg_w: &PairWeightConfig, cfg_s: &SeriesConfig) -> Result<(EstimateReport, SeriesG0)> {
    let k = cfg_s.resolve_k(sample.n)?;
    let setup = PairSetup::new(sample, surface, cfg_w)?;
    let support = [surface.trim().x_lo, surface.trim().x_hi];
    let basis: Vec<Vec<f64>> = setup.tr.x.iter().map(|&x| SeriesG0::basis_values(cfg_s.basis, support, k, x)).collect();
    let p = k + 1;
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let (mut pairs, mut wsum, mut wmax, mut wy, mut wyy) = (0usize, 0.0, 0.0f64, 0.0, 0.0);
    let mut z = vec![0.0; p];
    setup.for_each_weighted(|i, j, w| {
        z[0] = 1.0;
        for t in 0..k {
            z[t + 1] = basis[j][t] - basis[i][t];
        }
        let y = setup.tr.x1[j] - setup.tr.x1[i];
        for r in 0..p {
            for c in 0..p {
                m[(r, c)] += w * z[r] * z[c];
            }
            b[r] += w * z[r] * y;
        }
        pairs += 1;
        wsum += w;
        wmax = wmax.max(w.abs());
        wy += w * y;
        wyy += w * y * y;
    });
    if pairs < (k + 1).max(MIN_WEIGHTED_PAIRS) {
        return Err(Error::RankDeficient(format!("{pairs} weighted pairs for {p} series coefficients")));
    }
    let normalized = &m / wsum;
    let eig = normalized.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_eig >= MIN_EIGENVALUE) {
        return Err(Error::Regularization(format!(
            "smallest eigenvalue {min_eig:e} of the weighted series design is below {MIN_EIGENVALUE:e}"
        )));
    }
    let coef = m.clone().lu().solve(&b).ok_or_else(|| Error::RankDeficient("series normal matrix is singular".into()))?;
    let sse = wyy - 2.0 * coef.dot(&b) + (coef.transpose() * &m * &coef)[(0, 0)];
    let sst = wyy - wy * wy / wsum;
    let med = stats::median(&sample.x);
    let mut g0 = SeriesG0 { basis: cfg_s.basis, coefficients: coef.iter().skip(1).copied().collect(), support, offset: 0.0 };
    g0.offset = g0.eval(med);
    let mut r = EstimateReport::new(EstimatorKind::Series, coef[0], None);
    r.coefficients = coef.iter().copied().collect();
    r.objective = Some(1.0 - sse / sst);
    let d = &mut r.diagnostics;
    d.n = sample.n;
    d.n_trimmed = setup.tr.len();
    d.trim_fraction = 1.0 - setup.tr.len() as f64 / sample.n as f64;
    d.pairs = pairs;
    d.effective_pairs = Some(wsum / wmax);
    let ev_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    d.condition_number = Some(ev_max / min_eig);
    if setup.tr.dropped > 0 {
        r.flags.push(ReportFlag::DroppedObservations { count: setup.tr.dropped });
    }
    Ok((r, g0))
}
