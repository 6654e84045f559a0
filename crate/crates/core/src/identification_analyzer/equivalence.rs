use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SupportBox;
use crate::dgp_oracle::{oracle_choice_probs, oracle_derivative_ratio, DgpSpec, RatioCell};
use crate::error::{Error, Result};

/// Lattice of `(x1, x)` points on which choice probabilities are compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceGrid {
    pub x1: Vec<f64>,
    pub x: Vec<f64>,
}

impl EquivalenceGrid {
    pub fn lattice(x1: Vec<f64>, x_lo: f64, x_hi: f64, n_x: usize) -> Self {
        let x = if n_x == 1 {
            vec![0.5 * (x_lo + x_hi)]
        } else {
            (0..n_x).map(|k| x_lo + (x_hi - x_lo) * k as f64 / (n_x - 1) as f64).collect()
        };
        Self { x1, x }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_gap: f64,
    pub pass: bool,
    /// `(x1, x, cell)` where the largest gap occurs; cells are ordered 11, 10, 01, 00.
    pub worst: (f64, f64, usize),
}

/// Largest difference in the four choice probabilities between two designs.
pub fn verify_observational_equivalence(a: &DgpSpec, b: &DgpSpec, grid: &EquivalenceGrid, tol: f64) -> Result<EquivalenceReport> {
    if grid.x1.is_empty() || grid.x.is_empty() {
        return Err(Error::Config("equivalence grid is empty".into()));
    }
    let points: Vec<(f64, f64)> = grid.x1.iter().flat_map(|&x1| grid.x.iter().map(move |&x| (x1, x))).collect();
    let gaps: Vec<(f64, f64, usize, f64)> = points
        .par_iter()
        .map(|&(x1, x)| {
            let pa = oracle_choice_probs(a, x1, x)?.as_array();
            let pb = oracle_choice_probs(b, x1, x)?.as_array();
            let (k, g) = (0..4).map(|k| (k, (pa[k] - pb[k]).abs())).fold((0, 0.0), |m, c| if c.1 > m.1 { c } else { m });
            Ok((x1, x, k, g))
        })
        .collect::<Result<_>>()?;
    let mut worst = (gaps[0].0, gaps[0].1, gaps[0].2);
    let mut max_abs_gap = 0.0f64;
    for (x1, x, k, g) in gaps {
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite probability gap at ({x1}, {x})")));
        }
        if g > max_abs_gap {
            max_abs_gap = g;
            worst = (x1, x, k);
        }
    }
    Ok(EquivalenceReport { max_abs_gap, pass: max_abs_gap <= tol, worst })
}

/// A pair `(x1, x)`, `(x1_tilde, x)` on which the oracle ratios cancel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCertificate {
    pub x1: f64,
    pub x1_tilde: f64,
    pub x: f64,
    pub residual: f64,
}

/// Search for a no-factor match: at fixed `x`, find `x1_tilde` in the `X1`
/// support with `p1r(x1, x) + p0r(x1_tilde, x) = 0`, scanning starting
/// points `x1` across the support.
///
/// Returns `None` when no starting point brackets a root, which happens
/// exactly when `|alpha| > b - a` for strictly increasing `F_{U|V}`.
pub fn find_no_factor_match(spec: &DgpSpec, bx: &SupportBox, x: f64) -> Result<Option<MatchCertificate>> {
    let [a, b] = bx.x1_range;
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Domain("X1 support must be bounded".into()));
    }
    const STARTS: usize = 41;
    for s in 0..STARTS {
        let x1 = a + (b - a) * s as f64 / (STARTS - 1) as f64;
        let target = oracle_derivative_ratio(spec, x1, x, RatioCell::P11)?;
        let g = |t: f64| -> Result<f64> { Ok(target + oracle_derivative_ratio(spec, t, x, RatioCell::P10)?) };
        let (mut lo, mut hi) = (a, b);
        let (glo, ghi) = (g(lo)?, g(hi)?);
        // g is decreasing in t
        if !(glo >= 0.0 && ghi <= 0.0) {
            continue;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if g(mid)? >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        let t = 0.5 * (lo + hi);
        return Ok(Some(MatchCertificate { x1, x1_tilde: t, x, residual: g(t)?.abs() }));
    }
    Ok(None)
}
