//! Kernel and local-polynomial first stage: derivatives of the cell
//! probabilities in the instrument and the density of `V`.

mod surface;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp_oracle::Sample;
use crate::dist::norm_pdf;
use crate::error::{Error, Result};
use crate::stats;

pub use surface::{
    fit_surfaces, ratio_surfaces, GridCache, NpSurface, OracleRatios, PointEstimate, RatioSurface, SlopeTarget,
    SurfaceDiagnostics, TrimBox, CLAMP_FLOOR,
};

/// Largest number of distinct `X1` values treated as discrete cells.
pub const MAX_DISCRETE_CELLS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Gaussian,
    /// Polynomial kernel `(1 - u^2)^2 * sum_k c_k u^(2k)` on `[-1, 1]` of the given even order.
    HigherOrderEven(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFn {
    pub kind: KernelKind,
    coeffs: Vec<f64>,
}

impl KernelFn {
    pub fn gaussian() -> Self {
        Self { kind: KernelKind::Gaussian, coeffs: Vec::new() }
    }

    /// Compact even kernel whose moments of order `1..order-1` vanish.
    pub fn higher_order(order: u32) -> Result<Self> {
        if order < 2 || order % 2 != 0 || order > 16 {
            return Err(Error::Config(format!("kernel order must be even in [2, 16], got {order}")));
        }
        let m = (order / 2) as usize;
        // b_j = integral of u^(2j) (1 - u^2)^2 over [-1, 1]
        let b = |j: usize| {
            let j = j as f64;
            2.0 * (1.0 / (2.0 * j + 1.0) - 2.0 / (2.0 * j + 3.0) + 1.0 / (2.0 * j + 5.0))
        };
        let a = DMatrix::from_fn(m, m, |r, c| b(r + c));
        let mut rhs = DVector::zeros(m);
        rhs[0] = 1.0;
        let c = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical(format!("moment system for order {order} is singular")))?;
        Ok(Self { kind: KernelKind::HigherOrderEven(order), coeffs: c.iter().copied().collect() })
    }

    pub fn from_kind(kind: KernelKind) -> Result<Self> {
        match kind {
            KernelKind::Gaussian => Ok(Self::gaussian()),
            KernelKind::HigherOrderEven(o) => Self::higher_order(o),
        }
    }

    pub fn order(&self) -> u32 {
        match self.kind {
            KernelKind::Gaussian => 2,
            KernelKind::HigherOrderEven(o) => o,
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => norm_pdf(u),
            KernelKind::HigherOrderEven(_) => {
                if u.abs() > 1.0 {
                    return 0.0;
                }
                let u2 = u * u;
                let mut p = 0.0;
                for c in self.coeffs.iter().rev() {
                    p = p * u2 + c;
                }
                (1.0 - u2) * (1.0 - u2) * p
            }
        }
    }

    /// Derivative of the kernel.
    pub fn deriv(&self, u: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => -u * norm_pdf(u),
            KernelKind::HigherOrderEven(_) => {
                if u.abs() >= 1.0 {
                    return 0.0;
                }
                let u2 = u * u;
                let (mut p, mut dp) = (0.0, 0.0);
                for (k, c) in self.coeffs.iter().enumerate() {
                    p += c * u2.powi(k as i32);
                    if k > 0 {
                        dp += c * 2.0 * k as f64 * u.powi(2 * k as i32 - 1);
                    }
                }
                -4.0 * u * (1.0 - u2) * p + (1.0 - u2) * (1.0 - u2) * dp
            }
        }
    }

    /// Half-width beyond which the kernel is treated as zero.
    pub fn radius(&self) -> f64 {
        match self.kind {
            KernelKind::Gaussian => 8.0,
            KernelKind::HigherOrderEven(_) => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    /// Derivative estimation in `x`.
    pub h1: f64,
    /// Local-linear density of `V`.
    pub h2: f64,
    /// Second-stage matching bandwidth.
    pub h_match: f64,
    /// First-stage bandwidth used by the asymptotic theory.
    pub h_first: f64,
    /// Smoothing across a continuous `X1`; `None` when `X1` is discrete.
    pub h_x1: Option<f64>,
}

impl Bandwidths {
    pub fn validate(&self) -> Result<()> {
        let all = [self.h1, self.h2, self.h_match, self.h_first].into_iter().chain(self.h_x1);
        for h in all {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Config(format!("bandwidths must be positive and finite, got {self:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthProfile {
    Main,
    Dgp3,
}

/// Distinct `X1` values when there are few enough to condition on exactly.
pub fn discrete_cells(x1: &[f64]) -> Option<Vec<f64>> {
    let mut cells: Vec<f64> = Vec::new();
    for &v in x1 {
        if !cells.iter().any(|c| *c == v) {
            cells.push(v);
            if cells.len() > MAX_DISCRETE_CELLS {
                return None;
            }
        }
    }
    cells.sort_by(f64::total_cmp);
    Some(cells)
}

/// Rule-of-thumb bandwidths.
pub fn default_bandwidths(sample: &Sample, profile: BandwidthProfile) -> Result<Bandwidths> {
    let n = sample.n;
    if n < 10 {
        return Err(Error::InsufficientData(format!("bandwidth rules need n >= 10, got {n}")));
    }
    let nf = n as f64;
    let sd_x = stats::sd(&sample.x);
    if !(sd_x > 0.0) {
        return Err(Error::Degenerate("instrument X has zero variance".into()));
    }
    let discrete = discrete_cells(&sample.x1).is_some();
    let sd_x1 = stats::sd(&sample.x1);
    if !discrete && !(sd_x1 > 0.0) {
        return Err(Error::Degenerate("X1 has zero variance".into()));
    }
    let h_match = nf.powf(-0.08);
    Ok(match profile {
        BandwidthProfile::Main => {
            let h1 = sd_x * nf.powf(-1.0 / 7.0);
            Bandwidths {
                h1,
                h2: sd_x * nf.powf(-1.0 / 6.0),
                h_match,
                h_first: h1,
                h_x1: (!discrete).then(|| sd_x1 * nf.powf(-1.0 / 7.0)),
            }
        }
        BandwidthProfile::Dgp3 => {
            if !(sd_x1 > 0.0) {
                return Err(Error::Degenerate("X1 has zero variance".into()));
            }
            let h = sd_x1 * nf.powf(-0.2);
            Bandwidths { h1: h, h2: h, h_match, h_first: h, h_x1: (!discrete).then_some(h) }
        }
    })
}

/// Gaussian kernel density estimate at `x`.
pub fn kde(xs: &[f64], h: f64, x: f64) -> f64 {
    xs.iter().map(|xi| norm_pdf((xi - x) / h)).sum::<f64>() / (xs.len() as f64 * h)
}

/// Estimate of `f'(x) / f(x)` as the local-linear slope of the log kernel density.
///
/// The log density is evaluated at five points spaced `h / 2` apart and a
/// Gaussian-weighted straight line is fit through them.
pub fn log_density_derivative(xs: &[f64], h: f64, x: f64) -> Result<f64> {
    if xs.len() < 2 || !(h > 0.0) {
        return Err(Error::InsufficientData("log-density derivative needs data and h > 0".into()));
    }
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in -2..=2 {
        let u = 0.5 * k as f64;
        let f = kde(xs, h, x + u * h);
        if !(f > 0.0) {
            return Err(Error::Extrapolation(format!("kernel density vanishes near x = {x}")));
        }
        let w = norm_pdf(u);
        let l = f.ln();
        s0 += w;
        s1 += w * u;
        s2 += w * u * u;
        t0 += w * l;
        t1 += w * u * l;
    }
    Ok((s0 * t1 - s1 * t0) / (s0 * s2 - s1 * s1) / h)
}

/// Ratios at the sample points that fall inside the trimming box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimmedRatios {
    /// Row indices into the sample.
    pub idx: Vec<usize>,
    pub x1: Vec<f64>,
    pub x: Vec<f64>,
    pub p1r: Vec<f64>,
    pub p0r: Vec<f64>,
    /// Rows inside the box whose ratios could not be evaluated.
    pub dropped: usize,
}

impl TrimmedRatios {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

/// Evaluate `(p1r, p0r)` at every trimmed sample point.
///
/// Rows whose local fit fails with an extrapolation error are dropped and
/// counted; any other error is returned.
pub fn trimmed_ratios(sample: &Sample, surface: &dyn RatioSurface) -> Result<TrimmedRatios> {
    use rayon::prelude::*;
    let inside: Vec<usize> = (0..sample.n).filter(|&i| surface.trim().contains(sample.x1[i], sample.x[i])).collect();
    let evals: Vec<Result<(f64, f64)>> = inside.par_iter().map(|&i| surface.ratios(sample.x1[i], sample.x[i])).collect();
    let mut out = TrimmedRatios { idx: vec![], x1: vec![], x: vec![], p1r: vec![], p0r: vec![], dropped: 0 };
    for (&i, e) in inside.iter().zip(evals) {
        match e {
            Ok((a, b)) => {
                out.idx.push(i);
                out.x1.push(sample.x1[i]);
                out.x.push(sample.x[i]);
                out.p1r.push(a);
                out.p0r.push(b);
            }
            Err(Error::Extrapolation(_)) => out.dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
