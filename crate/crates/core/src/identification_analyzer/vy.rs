use serde::{Deserialize, Serialize};

use crate::dgp_oracle::Sample;
use crate::error::{Error, Result};
use crate::kernel_np::{trimmed_ratios, RatioSurface, TrimmedRatios};
use crate::report::{EstimateReport, EstimatorKind, ReportFlag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VyConfig {
    /// Candidate shifts; `None` uses cell differences for discrete `X1` and
    /// a 0.01 grid on `[-3, 3]` otherwise.
    pub alpha_grid: Option<Vec<f64>>,
    /// Fewest observations a shift must be evaluable at.
    pub min_support: usize,
}

impl Default for VyConfig {
    fn default() -> Self {
        Self { alpha_grid: None, min_support: 10 }
    }
}

/// Average of `p1r(x1_i, x_i) + p0r(x1_i + d, x_i)` over trimmed observations
/// whose shifted point stays inside the support, with its count.
///
/// At a common propensity value the two ratios cancel exactly when the
/// treated index `x1 + alpha` equals the untreated index `x1 + d`, so the
/// contrast is positive for `d < alpha` and negative for `d > alpha`.
pub fn vy_contrast(tr: &TrimmedRatios, surface: &dyn RatioSurface, d: f64) -> Result<(f64, usize)> {
    let trim = surface.trim();
    let (mut sum, mut count) = (0.0, 0usize);
    for k in 0..tr.len() {
        let shifted = match &trim.cells {
            Some(cells) => match cells.iter().find(|c| (**c - (tr.x1[k] + d)).abs() < 1e-9) {
                Some(c) => *c,
                None => continue,
            },
            None => tr.x1[k] + d,
        };
        if !trim.contains(shifted, tr.x[k]) {
            continue;
        }
        match surface.ratios(shifted, tr.x[k]) {
            Ok((_, p0r)) => {
                sum += tr.p1r[k] + p0r;
                count += 1;
            }
            Err(Error::Extrapolation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((if count > 0 { sum / count as f64 } else { f64::NAN }, count))
}

fn candidates(surface: &dyn RatioSurface, cfg: &VyConfig) -> Vec<f64> {
    let mut out: Vec<f64> = match &surface.trim().cells {
        Some(cells) => {
            let mut v = Vec::new();
            for a in cells {
                for b in cells {
                    v.push(b - a);
                }
            }
            v.extend(cfg.alpha_grid.iter().flatten());
            v
        }
        None => match &cfg.alpha_grid {
            Some(g) => g.clone(),
            None => (-300..=300).map(|k| k as f64 / 100.0).collect(),
        },
    };
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out
}

/// Matching-on-propensity comparator estimate of `alpha`.
///
/// Returns the largest candidate shift whose contrast is nonnegative. With
/// binary `X1` the candidates are the cell differences `{-1, 0, 1}`, so the
/// estimate can only take those values.
pub fn fit_vy_comparator(sample: &Sample, surface: &dyn RatioSurface, cfg: &VyConfig) -> Result<EstimateReport> {
    let tr = trimmed_ratios(sample, surface)?;
    let mut evaluated = Vec::new();
    for d in candidates(surface, cfg) {
        let (c, count) = vy_contrast(&tr, surface, d)?;
        if count >= cfg.min_support.max(1) {
            evaluated.push((d, c));
        }
    }
    if evaluated.is_empty() {
        return Err(Error::Overlap("no candidate shift keeps enough observations inside the support".into()));
    }
    let (alpha, contrast, boundary) = match evaluated.iter().rposition(|(_, c)| *c >= 0.0) {
        Some(k) => (evaluated[k].0, evaluated[k].1, k + 1 == evaluated.len()),
        None => (evaluated[0].0, evaluated[0].1, true),
    };
    let mut r = EstimateReport::new(EstimatorKind::Vy, alpha, None);
    r.objective = Some(contrast);
    r.coefficients = vec![alpha];
    let d = &mut r.diagnostics;
    d.n = sample.n;
    d.n_trimmed = tr.len();
    d.trim_fraction = 1.0 - tr.len() as f64 / sample.n as f64;
    d.tie_set = evaluated.iter().map(|&(a, c)| [a, c]).collect();
    if boundary && evaluated.len() > 1 {
        r.flags.push(ReportFlag::BoundaryMaximizer);
    }
    if tr.dropped > 0 {
        r.flags.push(ReportFlag::DroppedObservations { count: tr.dropped });
    }
    Ok(r)
}
