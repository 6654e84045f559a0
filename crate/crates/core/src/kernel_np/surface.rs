use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, Matrix6, Matrix6x2};
use sha2::{Digest, Sha256};

use super::{discrete_cells, Bandwidths, KernelFn};
use crate::dgp_oracle::{hex, oracle_derivative_ratio, DgpSpec, RatioCell, Sample};
use crate::error::{Error, Result};
use crate::stats;

/// Lower clamp applied to the estimated density of `V`.
pub const CLAMP_FLOOR: f64 = 1e-4;
/// An evaluation needs observations within this many bandwidths.
const NEAR_RADIUS: f64 = 5.0;
const TRIM_LO: f64 = 0.05;
const TRIM_HI: f64 = 0.95;

/// Empirical quantile box used for trimming.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimBox {
    pub x_lo: f64,
    pub x_hi: f64,
    pub x1_lo: f64,
    pub x1_hi: f64,
    /// Cell values when `X1` is discrete.
    pub cells: Option<Vec<f64>>,
}

impl TrimBox {
    pub fn from_sample(sample: &Sample) -> Self {
        let sx = stats::sorted(&sample.x);
        let cells = discrete_cells(&sample.x1);
        let (x1_lo, x1_hi) = match &cells {
            Some(c) => (c[0], c[c.len() - 1]),
            None => {
                let s1 = stats::sorted(&sample.x1);
                (stats::quantile_sorted(&s1, TRIM_LO), stats::quantile_sorted(&s1, TRIM_HI))
            }
        };
        Self {
            x_lo: stats::quantile_sorted(&sx, TRIM_LO),
            x_hi: stats::quantile_sorted(&sx, TRIM_HI),
            x1_lo,
            x1_hi,
            cells,
        }
    }

    pub fn contains(&self, x1: f64, x: f64) -> bool {
        let in_x = x >= self.x_lo && x <= self.x_hi;
        let in_x1 = match &self.cells {
            Some(c) => c.contains(&x1),
            None => x1 >= self.x1_lo && x1 <= self.x1_hi,
        };
        in_x && in_x1
    }
}

/// Anything that can return the normalized derivative ratios `(p1r, p0r)`.
pub trait RatioSurface: Sync {
    fn ratios(&self, x1: f64, x: f64) -> Result<(f64, f64)>;
    fn trim(&self) -> &TrimBox;
    /// Evaluations so far where a density floor was active.
    fn clamp_hits(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub p11: f64,
    pub p10: f64,
    /// Local-linear estimate of `P(Y2 = 1 | X = x)`.
    pub p_y2: f64,
    pub dp11: f64,
    pub dp10: f64,
    /// Density of `V` after clamping.
    pub fv: f64,
    pub fv_raw: f64,
    pub clamped: bool,
}

/// Which local slope a set of equivalent-kernel weights reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeTarget {
    /// Slope in `x` of a cell indicator regression (shared by both cells).
    Cell,
    /// Slope of `Y2` on `X`, the density of `V`.
    Density,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDiagnostics {
    pub n: usize,
    pub n_in_trim: usize,
    pub cells: Option<usize>,
    /// `Y2` is constant in the sample, so the density of `V` is not estimable.
    pub degenerate_treatment: bool,
}

#[derive(Debug, Clone)]
struct Column {
    x: Vec<f64>,
    x1: Vec<f64>,
    y11: Vec<f64>,
    y10: Vec<f64>,
    y2: Vec<f64>,
    orig: Vec<usize>,
}

impl Column {
    fn window(&self, x: f64, half: f64) -> std::ops::Range<usize> {
        let lo = self.x.partition_point(|v| *v < x - half);
        let hi = self.x.partition_point(|v| *v <= x + half);
        lo..hi
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Cells(Vec<(f64, Column)>),
    Continuous(Column),
}

struct LocalRow {
    z: [f64; 6],
    w: f64,
    y: [f64; 2],
    orig: usize,
}

struct LocalSolution {
    coef: DMatrix<f64>,
    minv: DMatrix<f64>,
    rows: Vec<LocalRow>,
}

fn solve_local(rows: Vec<LocalRow>, p: usize, near: usize, at: &str) -> Result<LocalSolution> {
    if near < p {
        return Err(Error::Extrapolation(format!("{near} observations within {NEAR_RADIUS} bandwidths of {at}")));
    }
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut b = DMatrix::<f64>::zeros(p, 2);
    for r in &rows {
        for i in 0..p {
            let wz = r.w * r.z[i];
            for j in 0..p {
                m[(i, j)] += wz * r.z[j];
            }
            b[(i, 0)] += wz * r.y[0];
            b[(i, 1)] += wz * r.y[1];
        }
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Extrapolation(format!("local design is singular at {at}")))?;
    let l = chol.l();
    let d: Vec<f64> = (0..p).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(dmin > 1e-12 * dmax) {
        return Err(Error::Extrapolation(format!("local design is nearly singular at {at}")));
    }
    let minv = chol.inverse();
    let coef = &minv * b;
    Ok(LocalSolution { coef, minv, rows })
}

impl LocalSolution {
    fn weights(&self, idx: usize, h: f64) -> Vec<(usize, f64)> {
        let p = self.minv.nrows();
        self.rows
            .iter()
            .map(|r| {
                let mut s = 0.0;
                for j in 0..p {
                    s += self.minv[(idx, j)] * r.z[j];
                }
                (r.orig, r.w * s / h)
            })
            .collect()
    }
}

/// Fitted first-stage surfaces.
#[derive(Debug)]
pub struct NpSurface {
    pub bandwidths: Bandwidths,
    pub kernel: KernelFn,
    pub clamp_floor: f64,
    pub fingerprint: String,
    pub diagnostics: SurfaceDiagnostics,
    trim: TrimBox,
    layout: Layout,
    all: Column,
    clamp_hits: AtomicUsize,
}

fn build_column(sample: &Sample, idx: &[usize]) -> Column {
    let mut c = Column {
        x: Vec::with_capacity(idx.len()),
        x1: Vec::with_capacity(idx.len()),
        y11: Vec::with_capacity(idx.len()),
        y10: Vec::with_capacity(idx.len()),
        y2: Vec::with_capacity(idx.len()),
        orig: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        c.x.push(sample.x[i]);
        c.x1.push(sample.x1[i]);
        c.y11.push((sample.y1[i] == 1 && sample.y2[i] == 1) as u8 as f64);
        c.y10.push((sample.y1[i] == 1 && sample.y2[i] == 0) as u8 as f64);
        c.y2.push(sample.y2[i] as f64);
        c.orig.push(i);
    }
    c
}

/// Fit local-polynomial surfaces for the cell-probability slopes and the density of `V`.
pub fn fit_surfaces(sample: &Sample, bw: &Bandwidths, kernel: &KernelFn) -> Result<NpSurface> {
    sample.validate()?;
    bw.validate()?;
    if sample.n < 50 {
        return Err(Error::InsufficientData(format!("first stage needs n >= 50, got {}", sample.n)));
    }
    // canonical row order so the fit does not depend on how rows were supplied
    let mut order: Vec<usize> = (0..sample.n).collect();
    order.sort_by(|&a, &b| {
        sample.x[a]
            .total_cmp(&sample.x[b])
            .then(sample.x1[a].total_cmp(&sample.x1[b]))
            .then(sample.y1[a].cmp(&sample.y1[b]))
            .then(sample.y2[a].cmp(&sample.y2[b]))
    });
    let trim = TrimBox::from_sample(sample);
    let all = build_column(sample, &order);
    let layout = match &trim.cells {
        Some(cells) => Layout::Cells(
            cells
                .iter()
                .map(|c| {
                    let idx: Vec<usize> = order.iter().copied().filter(|&i| sample.x1[i] == *c).collect();
                    (*c, build_column(sample, &idx))
                })
                .collect(),
        ),
        None => {
            if bw.h_x1.is_none() {
                return Err(Error::Config("continuous X1 requires an X1 bandwidth".into()));
            }
            Layout::Continuous(all.clone())
        }
    };
    let mut hasher = Sha256::new();
    for &i in &order {
        hasher.update(sample.x1[i].to_le_bytes());
        hasher.update(sample.x[i].to_le_bytes());
        hasher.update([sample.y1[i], sample.y2[i]]);
    }
    hasher.update(serde_json::to_vec(bw).unwrap_or_default());
    let fingerprint = hex(&hasher.finalize());
    let diagnostics = SurfaceDiagnostics {
        n: sample.n,
        n_in_trim: (0..sample.n).filter(|&i| trim.contains(sample.x1[i], sample.x[i])).count(),
        cells: trim.cells.as_ref().map(|c| c.len()),
        degenerate_treatment: sample.y2.iter().all(|v| *v == sample.y2[0]),
    };
    Ok(NpSurface {
        bandwidths: *bw,
        kernel: kernel.clone(),
        clamp_floor: CLAMP_FLOOR,
        fingerprint,
        diagnostics,
        trim,
        layout,
        all,
        clamp_hits: AtomicUsize::new(0),
    })
}

impl NpSurface {
    pub fn is_discrete(&self) -> bool {
        matches!(self.layout, Layout::Cells(_))
    }

    fn cell_solution(&self, x1: f64, x: f64) -> Result<LocalSolution> {
        let h = self.bandwidths.h1;
        let r = self.kernel.radius();
        match &self.layout {
            Layout::Cells(cells) => {
                let col = cells
                    .iter()
                    .find(|(c, _)| *c == x1)
                    .map(|(_, col)| col)
                    .ok_or_else(|| Error::Extrapolation(format!("x1 = {x1} is not an observed cell")))?;
                let mut near = 0;
                let rows: Vec<LocalRow> = col
                    .window(x, r * h)
                    .map(|i| {
                        let u = (col.x[i] - x) / h;
                        near += (u.abs() <= NEAR_RADIUS) as usize;
                        LocalRow {
                            z: [1.0, u, u * u, 0.0, 0.0, 0.0],
                            w: self.kernel.eval(u),
                            y: [col.y11[i], col.y10[i]],
                            orig: col.orig[i],
                        }
                    })
                    .collect();
                solve_local(rows, 3, near, &format!("(x1 = {x1}, x = {x})"))
            }
            Layout::Continuous(col) => {
                let h1 = self.bandwidths.h_x1.unwrap_or(h);
                let mut near = 0;
                let rows: Vec<LocalRow> = col
                    .window(x, r * h)
                    .filter_map(|i| {
                        let u1 = (col.x1[i] - x1) / h1;
                        if u1.abs() > r {
                            return None;
                        }
                        let u = (col.x[i] - x) / h;
                        near += (u.abs() <= NEAR_RADIUS && u1.abs() <= NEAR_RADIUS) as usize;
                        Some(LocalRow {
                            z: [1.0, u1, u, u1 * u1, u1 * u, u * u],
                            w: self.kernel.eval(u1) * self.kernel.eval(u),
                            y: [col.y11[i], col.y10[i]],
                            orig: col.orig[i],
                        })
                    })
                    .collect();
                solve_local(rows, 6, near, &format!("(x1 = {x1}, x = {x})"))
            }
        }
    }

    /// `x1`-slopes of both surfaces on a lattice, same fits as `cell_solution` without
    /// per-point allocation. Continuous layout only.
    fn plane_slopes(&self, x1s: &[f64], xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let Layout::Continuous(col) = &self.layout else {
            return Err(Error::Config("plane slopes need a continuous X1".into()));
        };
        let h = self.bandwidths.h1;
        let h1 = self.bandwidths.h_x1.unwrap_or(h);
        let r = self.kernel.radius();
        // (index, u, K(u), near in x) per x-node
        let along_x: Vec<Vec<(usize, f64, f64, bool)>> = xs
            .iter()
            .map(|&x| {
                col.window(x, r * h)
                    .map(|i| {
                        let u = (col.x[i] - x) / h;
                        (i, u, self.kernel.eval(u), u.abs() <= NEAR_RADIUS)
                    })
                    .collect()
            })
            .collect();
        let mut d11 = Vec::with_capacity(x1s.len() * xs.len());
        let mut d10 = Vec::with_capacity(x1s.len() * xs.len());
        let mut u1s = vec![0.0; col.x1.len()];
        let mut k1s = vec![0.0; col.x1.len()];
        for &x1 in x1s {
            for (i, v) in col.x1.iter().enumerate() {
                u1s[i] = (v - x1) / h1;
                k1s[i] = if u1s[i].abs() > r { 0.0 } else { self.kernel.eval(u1s[i]) };
            }
            for (row, &x) in along_x.iter().zip(xs) {
                let mut m = Matrix6::<f64>::zeros();
                let mut b = Matrix6x2::<f64>::zeros();
                let mut near = 0;
                for &(i, u, k, near_x) in row {
                    let u1 = u1s[i];
                    if u1.abs() > r {
                        continue;
                    }
                    near += (near_x && u1.abs() <= NEAR_RADIUS) as usize;
                    let z = [1.0, u1, u, u1 * u1, u1 * u, u * u];
                    let w = k1s[i] * k;
                    for a in 0..6 {
                        let wz = w * z[a];
                        for c in a..6 {
                            m[(a, c)] += wz * z[c];
                        }
                        b[(a, 0)] += wz * col.y11[i];
                        b[(a, 1)] += wz * col.y10[i];
                    }
                }
                let at = || format!("(x1 = {x1}, x = {x})");
                if near < 6 {
                    return Err(Error::Extrapolation(format!("{near} observations within {NEAR_RADIUS} bandwidths of {}", at())));
                }
                m.fill_lower_triangle_with_upper_triangle();
                let chol = m.cholesky().ok_or_else(|| Error::Extrapolation(format!("local design is singular at {}", at())))?;
                let l = chol.l();
                let d: Vec<f64> = (0..6).map(|i| l[(i, i)] * l[(i, i)]).collect();
                let dmax = d.iter().cloned().fold(0.0, f64::max);
                let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
                if !(dmin > 1e-12 * dmax) {
                    return Err(Error::Extrapolation(format!("local design is nearly singular at {}", at())));
                }
                let coef = chol.solve(&b);
                d11.push(coef[(2, 0)] / h);
                d10.push(coef[(2, 1)] / h);
            }
        }
        Ok((d11, d10))
    }

    fn slope_index(&self) -> usize {
        if self.is_discrete() {
            1
        } else {
            2
        }
    }

    fn density_solution(&self, x: f64) -> Result<LocalSolution> {
        let h = self.bandwidths.h2;
        let col = &self.all;
        let mut near = 0;
        let rows: Vec<LocalRow> = col
            .window(x, self.kernel.radius() * h)
            .map(|i| {
                let u = (col.x[i] - x) / h;
                near += (u.abs() <= NEAR_RADIUS) as usize;
                LocalRow { z: [1.0, u, 0.0, 0.0, 0.0, 0.0], w: self.kernel.eval(u), y: [col.y2[i], 0.0], orig: col.orig[i] }
            })
            .collect();
        solve_local(rows, 2, near, &format!("x = {x}"))
    }

    /// Direct local fits at one point, without the trimming check.
    pub fn evaluate(&self, x1: f64, x: f64) -> Result<PointEstimate> {
        let c = self.cell_solution(x1, x)?;
        let s = self.slope_index();
        let h = self.bandwidths.h1;
        let d = self.density_solution(x)?;
        let fv_raw = d.coef[(1, 0)] / self.bandwidths.h2;
        let clamped = !(fv_raw >= self.clamp_floor);
        if clamped {
            self.clamp_hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(PointEstimate {
            p11: c.coef[(0, 0)],
            p10: c.coef[(0, 1)],
            p_y2: d.coef[(0, 0)],
            dp11: c.coef[(s, 0)] / h,
            dp10: c.coef[(s, 1)] / h,
            fv: if clamped { self.clamp_floor } else { fv_raw },
            fv_raw,
            clamped,
        })
    }

    pub fn dp11(&self, x1: f64, x: f64) -> Result<f64> {
        let c = self.cell_solution(x1, x)?;
        Ok(c.coef[(self.slope_index(), 0)] / self.bandwidths.h1)
    }

    pub fn dp10(&self, x1: f64, x: f64) -> Result<f64> {
        let c = self.cell_solution(x1, x)?;
        Ok(c.coef[(self.slope_index(), 1)] / self.bandwidths.h1)
    }

    /// Clamped density of `V` at `x`.
    pub fn fv(&self, x: f64) -> Result<f64> {
        let d = self.density_solution(x)?;
        Ok((d.coef[(1, 0)] / self.bandwidths.h2).max(self.clamp_floor))
    }

    /// Equivalent-kernel weights `l_k` (indexed by original row) such that the
    /// chosen slope estimate at the point equals `sum_k l_k * y_k`.
    pub fn slope_weights(&self, x1: f64, x: f64, target: SlopeTarget) -> Result<Vec<(usize, f64)>> {
        match target {
            SlopeTarget::Cell => Ok(self.cell_solution(x1, x)?.weights(self.slope_index(), self.bandwidths.h1)),
            SlopeTarget::Density => Ok(self.density_solution(x)?.weights(1, self.bandwidths.h2)),
        }
    }

    /// Grid export with columns `x1,x,dP11,dP10,fV` over the trimmed support.
    pub fn to_csv_grid(&self, nx: usize) -> Result<String> {
        let nx = nx.max(2);
        let x1s: Vec<f64> = match &self.trim.cells {
            Some(c) => c.clone(),
            None => linspace(self.trim.x1_lo, self.trim.x1_hi, nx),
        };
        let mut out = String::from("x1,x,dP11,dP10,fV\n");
        for &x1 in &x1s {
            for x in linspace(self.trim.x_lo, self.trim.x_hi, nx) {
                let p = self.evaluate(x1, x)?;
                out.push_str(&format!("{x1},{x},{},{},{}\n", p.dp11, p.dp10, p.fv));
            }
        }
        Ok(out)
    }
}

impl RatioSurface for NpSurface {
    fn ratios(&self, x1: f64, x: f64) -> Result<(f64, f64)> {
        if !self.trim.contains(x1, x) {
            return Err(Error::Extrapolation(format!("({x1}, {x}) is outside the trimmed support")));
        }
        let p = self.evaluate(x1, x)?;
        Ok((p.dp11 / p.fv, p.dp10 / p.fv))
    }

    fn trim(&self) -> &TrimBox {
        &self.trim
    }

    fn clamp_hits(&self) -> usize {
        self.clamp_hits.load(Ordering::Relaxed)
    }
}

type RatioFn<'a> = Box<dyn Fn(f64, f64) -> Result<f64> + Sync + 'a>;

/// Separate evaluators for `p1r = dP11 / fV` and `p0r = dP10 / fV`.
pub fn ratio_surfaces(surface: &NpSurface) -> (RatioFn<'_>, RatioFn<'_>) {
    (Box::new(move |x1, x| surface.ratios(x1, x).map(|r| r.0)), Box::new(move |x1, x| surface.ratios(x1, x).map(|r| r.1)))
}

/// True ratios from the design, restricted to a trimming box.
#[derive(Debug, Clone)]
pub struct OracleRatios {
    pub spec: DgpSpec,
    trim: TrimBox,
}

impl OracleRatios {
    pub fn new(spec: DgpSpec, trim: TrimBox) -> Self {
        Self { spec, trim }
    }
}

impl RatioSurface for OracleRatios {
    fn ratios(&self, x1: f64, x: f64) -> Result<(f64, f64)> {
        if !self.trim.contains(x1, x) {
            return Err(Error::Extrapolation(format!("({x1}, {x}) is outside the trimmed support")));
        }
        Ok((
            oracle_derivative_ratio(&self.spec, x1, x, RatioCell::P11)?,
            oracle_derivative_ratio(&self.spec, x1, x, RatioCell::P10)?,
        ))
    }

    fn trim(&self) -> &TrimBox {
        &self.trim
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let mut v: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    v[n - 1] = hi;
    v
}

/// Catmull-Rom interpolation on a uniform grid with linear end extension.
fn cubic_1d(vals: &[f64], lo: f64, step: f64, x: f64) -> f64 {
    cubic_at(vals.len(), lo, step, x, |k| vals[k])
}

// Catmull-Rom on `n` knots read through `get`, with linear extension past both ends.
// Only the four knots around `x` are touched.
fn cubic_at(n: usize, lo: f64, step: f64, x: f64, get: impl Fn(usize) -> f64) -> f64 {
    let t = ((x - lo) / step).clamp(0.0, (n - 1) as f64);
    let i = (t.floor() as usize).min(n - 2);
    let s = t - i as f64;
    let at = |k: isize| -> f64 {
        if k < 0 {
            2.0 * get(0) - get(1)
        } else if k as usize >= n {
            2.0 * get(n - 1) - get(n - 2)
        } else {
            get(k as usize)
        }
    };
    let i = i as isize;
    let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
    0.5 * (2.0 * p1 + (p2 - p0) * s + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s + (3.0 * (p1 - p2) + p3 - p0) * s * s * s)
}

#[derive(Debug, Clone)]
enum CacheKind {
    Cells { cells: Vec<(f64, [Vec<f64>; 3])> },
    Plane { x1_step: f64, n_x1: usize, vals: [Vec<f64>; 3] },
}

/// Tabulated surfaces with cubic interpolation, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct GridCache {
    trim: TrimBox,
    clamp_floor: f64,
    x_step: f64,
    n_x: usize,
    kind: CacheKind,
}

impl GridCache {
    /// Tabulate `dP11`, `dP10` and `fV` on `n_points` per axis over the trimmed support.
    pub fn build(surface: &NpSurface, n_points: usize) -> Result<Self> {
        if n_points < 4 {
            return Err(Error::Config("grid cache needs at least 4 points per axis".into()));
        }
        let trim = surface.trim.clone();
        let xs = linspace(trim.x_lo, trim.x_hi, n_points);
        let x_step = (trim.x_hi - trim.x_lo) / (n_points - 1) as f64;
        let fvs: Vec<f64> = xs.iter().map(|&x| surface.fv(x)).collect::<Result<_>>()?;
        let kind = match &trim.cells {
            Some(cells) => {
                let mut out = Vec::new();
                for &c in cells {
                    let mut d11 = Vec::with_capacity(n_points);
                    let mut d10 = Vec::with_capacity(n_points);
                    for &x in &xs {
                        let s = surface.cell_solution(c, x)?;
                        d11.push(s.coef[(1, 0)] / surface.bandwidths.h1);
                        d10.push(s.coef[(1, 1)] / surface.bandwidths.h1);
                    }
                    out.push((c, [d11, d10, fvs.clone()]));
                }
                CacheKind::Cells { cells: out }
            }
            None => {
                let x1s = linspace(trim.x1_lo, trim.x1_hi, n_points);
                let (d11, d10) = surface.plane_slopes(&x1s, &xs)?;
                CacheKind::Plane {
                    x1_step: (trim.x1_hi - trim.x1_lo) / (n_points - 1) as f64,
                    n_x1: n_points,
                    vals: [d11, d10, fvs],
                }
            }
        };
        Ok(Self { trim, clamp_floor: surface.clamp_floor, x_step, n_x: n_points, kind })
    }

    /// Interpolated `(dP11, dP10, fV)` with the density clamp applied.
    pub fn values(&self, x1: f64, x: f64) -> Result<(f64, f64, f64)> {
        if !self.trim.contains(x1, x) {
            return Err(Error::Extrapolation(format!("({x1}, {x}) is outside the cached support")));
        }
        let xi = |v: &[f64]| cubic_1d(v, self.trim.x_lo, self.x_step, x);
        let (a, b, f) = match &self.kind {
            CacheKind::Cells { cells } => {
                let (_, v) = cells.iter().find(|(c, _)| *c == x1).expect("cell membership checked by trim box");
                (xi(&v[0]), xi(&v[1]), xi(&v[2]))
            }
            CacheKind::Plane { x1_step, n_x1, vals } => {
                let n = self.n_x;
                let along = |v: &[f64]| cubic_at(*n_x1, self.trim.x1_lo, *x1_step, x1, |r| xi(&v[r * n..(r + 1) * n]));
                (along(&vals[0]), along(&vals[1]), xi(&vals[2]))
            }
        };
        Ok((a, b, f.max(self.clamp_floor)))
    }
}

impl RatioSurface for GridCache {
    fn ratios(&self, x1: f64, x: f64) -> Result<(f64, f64)> {
        let (a, b, f) = self.values(x1, x)?;
        Ok((a / f, b / f))
    }

    fn trim(&self) -> &TrimBox {
        &self.trim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp_oracle::{oracle_marginal_v, simulate, DgpSpec, MainLaw};
    use crate::kernel_np::{default_bandwidths, BandwidthProfile};

    fn fitted(spec: &DgpSpec, n: usize, seed: u64) -> (Sample, NpSurface) {
        let s = simulate(spec, n, seed).unwrap();
        let bw = default_bandwidths(&s, BandwidthProfile::Main).unwrap();
        let f = fit_surfaces(&s, &bw, &KernelFn::gaussian()).unwrap();
        (s, f)
    }

    /// Mean error over the trimmed grid and sup error over the interquartile range of `X`.
    fn ratio_errors(spec: &DgpSpec, surf: &NpSurface) -> (f64, f64) {
        let t = surf.trim().clone();
        let (mut sum, mut count, mut sup) = (0.0, 0.0, 0.0f64);
        for &x1 in t.cells.as_ref().unwrap() {
            for x in linspace(t.x_lo, t.x_hi, 15) {
                let (a, b) = surf.ratios(x1, x).unwrap();
                let ta = oracle_derivative_ratio(spec, x1, x, RatioCell::P11).unwrap();
                let tb = oracle_derivative_ratio(spec, x1, x, RatioCell::P10).unwrap();
                let e = (a - ta).abs().max((b - tb).abs());
                sum += e;
                count += 1.0;
                if x.abs() < 0.674 {
                    sup = sup.max(e);
                }
            }
        }
        (sum / count, sup)
    }

    #[test]
    fn ratios_track_oracle_in_large_sample() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let (_, surf) = fitted(&spec, 100_000, 11);
        let (mean, sup) = ratio_errors(&spec, &surf);
        assert!(mean < 0.15 && sup < 0.15, "mean {mean}, interquartile sup {sup}");
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let grid = linspace(-1.0, 1.0, 9);
        let err = |surf: &NpSurface| {
            let mut e: f64 = 0.0;
            for &x in &grid {
                let d = surf.dp11(1.0, x).unwrap();
                let fv = oracle_marginal_v(&spec, x).unwrap().1;
                let truth = oracle_derivative_ratio(&spec, 1.0, x, RatioCell::P11).unwrap() * fv;
                e = e.max((d - truth).abs());
            }
            e
        };
        let (_, small) = fitted(&spec, 2_000, 5);
        let (_, large) = fitted(&spec, 20_000, 5);
        assert!(err(&large) < err(&small), "{} vs {}", err(&large), err(&small));
    }

    #[test]
    fn density_mass_over_trimmed_support() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let (_, surf) = fitted(&spec, 10_000, 2);
        let t = surf.trim().clone();
        let xs = linspace(t.x_lo, t.x_hi, 201);
        let step = xs[1] - xs[0];
        let fv: Vec<f64> = xs.iter().map(|&x| surf.fv(x).unwrap()).collect();
        let mass: f64 = fv.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
        let truth = oracle_marginal_v(&spec, t.x_hi).unwrap().0 - oracle_marginal_v(&spec, t.x_lo).unwrap().0;
        assert!((mass - truth).abs() < 0.05, "{mass} vs {truth}");
    }

    #[test]
    fn clamp_inactive_on_central_support() {
        for v in [MainLaw::Normal, MainLaw::Laplace] {
            let spec = DgpSpec::main_design(v, MainLaw::Normal, 0.5, 1.0);
            let (s, surf) = fitted(&spec, 3_200, 9);
            for i in 0..s.n {
                if surf.trim().contains(s.x1[i], s.x[i]) {
                    surf.ratios(s.x1[i], s.x[i]).unwrap();
                }
            }
            assert_eq!(surf.clamp_hits(), 0);
        }
    }

    #[test]
    fn constant_treatment_is_clamped_and_flagged() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let mut s = simulate(&spec, 500, 1).unwrap();
        s.y2 = vec![1; s.n];
        let bw = default_bandwidths(&s, BandwidthProfile::Main).unwrap();
        let surf = fit_surfaces(&s, &bw, &KernelFn::gaussian()).unwrap();
        assert!(surf.diagnostics.degenerate_treatment);
        let p = surf.evaluate(1.0, 0.0).unwrap();
        assert!(p.clamped && p.fv == CLAMP_FLOOR);
        assert!(p.fv_raw.abs() < 1e-9);
        let (a, _) = surf.ratios(1.0, 0.0).unwrap();
        assert!(a.abs() <= p.dp11.abs() / CLAMP_FLOOR + 1e-12);
    }

    #[test]
    fn row_order_does_not_matter() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let s = simulate(&spec, 300, 4).unwrap();
        let mut perm: Vec<usize> = (0..s.n).collect();
        perm.reverse();
        perm.swap(3, 100);
        let p = Sample::from_columns(
            perm.iter().map(|&i| s.y1[i]).collect(),
            perm.iter().map(|&i| s.y2[i]).collect(),
            perm.iter().map(|&i| s.x1[i]).collect(),
            perm.iter().map(|&i| s.x[i]).collect(),
        )
        .unwrap();
        let bw = default_bandwidths(&s, BandwidthProfile::Main).unwrap();
        let a = fit_surfaces(&s, &bw, &KernelFn::gaussian()).unwrap();
        let b = fit_surfaces(&p, &bw, &KernelFn::gaussian()).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        for x in [-0.8, 0.1, 0.9] {
            assert_eq!(a.evaluate(0.0, x).unwrap(), b.evaluate(0.0, x).unwrap());
        }
    }

    #[test]
    fn extrapolation_far_from_data() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let (_, surf) = fitted(&spec, 200, 4);
        assert!(matches!(surf.evaluate(1.0, 40.0), Err(Error::Extrapolation(_))));
        assert!(matches!(surf.evaluate(0.5, 0.0), Err(Error::Extrapolation(_))));
        assert!(matches!(surf.ratios(1.0, 3.5), Err(Error::Extrapolation(_))));
    }

    #[test]
    fn slope_weights_reproduce_estimates() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let (s, surf) = fitted(&spec, 300, 8);
        let y11 = s.cell_indicator(1, 1);
        let w = surf.slope_weights(1.0, 0.2, SlopeTarget::Cell).unwrap();
        let via: f64 = w.iter().map(|(k, l)| l * y11[*k]).sum();
        assert!((via - surf.dp11(1.0, 0.2).unwrap()).abs() < 1e-10);
        let w = surf.slope_weights(1.0, 0.2, SlopeTarget::Density).unwrap();
        let via: f64 = w.iter().map(|(k, l)| l * s.y2[*k] as f64).sum();
        assert!((via - surf.fv(0.2).unwrap()).abs() < 1e-10);
    }

    fn cache_gap(surf: &NpSurface, cache: &GridCache, x1: f64, x: f64) -> f64 {
        let p = surf.evaluate(x1, x).unwrap();
        let (a, b, f) = cache.values(x1, x).unwrap();
        (p.dp11 - a).abs().max((p.dp10 - b).abs()).max((p.fv - f).abs())
    }

    #[test]
    fn grid_cache_agrees_with_direct_fits() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let (_, surf) = fitted(&spec, 800, 3);
        let cache = GridCache::build(&surf, 256).unwrap();
        let t = surf.trim().clone();
        for &x1 in t.cells.as_ref().unwrap() {
            for x in linspace(t.x_lo, t.x_hi, 37) {
                assert!(cache_gap(&surf, &cache, x1, x) < 1e-3, "{x1} {x}");
            }
        }
    }

    #[test]
    fn continuous_cache_agrees_with_direct_fits() {
        let spec = DgpSpec::alt_dgp(1).unwrap();
        let s = simulate(&spec, 800, 3).unwrap();
        let bw = default_bandwidths(&s, BandwidthProfile::Main).unwrap();
        let surf = fit_surfaces(&s, &bw, &KernelFn::gaussian()).unwrap();
        assert!(!surf.is_discrete());
        let cache = GridCache::build(&surf, 64).unwrap();
        let t = surf.trim().clone();
        for x1 in linspace(t.x1_lo, t.x1_hi, 7) {
            for x in linspace(t.x_lo, t.x_hi, 7) {
                assert!(cache_gap(&surf, &cache, x1, x) < 1e-3, "{x1} {x}");
            }
        }
    }

    #[test]
    fn plane_slopes_match_direct_fits_at_nodes() {
        let spec = DgpSpec::alt_dgp(4).unwrap();
        let s = simulate(&spec, 400, 5).unwrap();
        let bw = default_bandwidths(&s, BandwidthProfile::Dgp3).unwrap();
        let surf = fit_surfaces(&s, &bw, &KernelFn::gaussian()).unwrap();
        let t = surf.trim().clone();
        let (x1s, xs) = (linspace(t.x1_lo, t.x1_hi, 6), linspace(t.x_lo, t.x_hi, 6));
        let (d11, d10) = surf.plane_slopes(&x1s, &xs).unwrap();
        for (a, &x1) in x1s.iter().enumerate() {
            for (b, &x) in xs.iter().enumerate() {
                let p = surf.evaluate(x1, x).unwrap();
                assert!((p.dp11 - d11[a * 6 + b]).abs() < 1e-10 && (p.dp10 - d10[a * 6 + b]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn oracle_ratios_have_cdf_signs() {
        let spec = DgpSpec::main_design(MainLaw::Normal, MainLaw::Normal, 0.5, 1.0);
        let s = simulate(&spec, 200, 1).unwrap();
        let o = OracleRatios::new(spec.clone(), TrimBox::from_sample(&s));
        for x in linspace(o.trim().x_lo, o.trim().x_hi, 9) {
            let (a, b) = o.ratios(1.0, x).unwrap();
            assert!((0.0..=1.0).contains(&a) && (-1.0..=0.0).contains(&b));
        }
        // exact match: p1r(0, x) + p0r(0.5, x) = 0 when X1 can take 0.5
        let p1 = oracle_derivative_ratio(&spec, 0.0, 0.3, RatioCell::P11).unwrap();
        let p0 = oracle_derivative_ratio(&spec, 0.5, 0.3, RatioCell::P10).unwrap();
        assert!((p1 + p0).abs() < 1e-9);
    }
}
