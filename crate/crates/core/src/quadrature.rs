//! Globally adaptive Gauss–Kronrod (7/15) quadrature with support for
//! infinite limits and interior breakpoints.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    /// Interior points where the integrand has kinks or jumps.
    pub breakpoints: Vec<f64>,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-10, rel_tol: 0.0, max_subdivisions: 4000, breakpoints: Vec::new() }
    }
}

impl QuadOptions {
    pub fn with_breakpoints(mut self, pts: impl IntoIterator<Item = f64>) -> Self {
        self.breakpoints.extend(pts);
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub subdivisions: usize,
}

#[derive(Debug, Clone, Copy)]
enum Map {
    Identity,
    /// x = a + t/(1-t), t in [0,1)
    Upper(f64),
    /// x = b - t/(1-t), t in [0,1)
    Lower(f64),
    /// x = t/(1-t^2), t in (-1,1)
    Both,
}

impl Map {
    #[inline]
    fn eval<F: Fn(f64) -> f64>(&self, f: &F, t: f64) -> f64 {
        let (x, jac) = match *self {
            Map::Identity => (t, 1.0),
            Map::Upper(a) => {
                let s = 1.0 - t;
                (a + t / s, 1.0 / (s * s))
            }
            Map::Lower(b) => {
                let s = 1.0 - t;
                (b - t / s, 1.0 / (s * s))
            }
            Map::Both => {
                let s = 1.0 - t * t;
                (t / s, (1.0 + t * t) / (s * s))
            }
        };
        if !x.is_finite() || !jac.is_finite() {
            return 0.0;
        }
        let v = f(x) * jac;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    lo: f64,
    hi: f64,
    map: Map,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, map: Map, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = map.eval(f, c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = map.eval(f, c - dx) + map.eval(f, c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let value = kron * h;
    let err = ((kron - gauss) * h).abs();
    (value, err)
}

fn segment<F: Fn(f64) -> f64>(f: &F, map: Map, lo: f64, hi: f64) -> Segment {
    let (value, err) = gk15(f, map, lo, hi);
    Segment { lo, hi, map, value, err }
}

/// Integrate `f` over `[a, b]`, where either limit may be infinite.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<QuadResult> {
    if a.is_nan() || b.is_nan() {
        return Err(Error::Numerical("NaN integration limit".into()));
    }
    if a == b {
        return Ok(QuadResult { value: 0.0, abs_error: 0.0, subdivisions: 0 });
    }
    if a > b {
        let r = integrate(f, b, a, opts)?;
        return Ok(QuadResult { value: -r.value, ..r });
    }
    let mut cuts: Vec<f64> = opts
        .breakpoints
        .iter()
        .copied()
        .filter(|p| p.is_finite() && *p > a && *p < b)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut knots = Vec::with_capacity(cuts.len() + 2);
    knots.push(a);
    knots.extend(cuts);
    knots.push(b);

    let mut heap = BinaryHeap::new();
    for w in knots.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let seg = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => segment(&f, Map::Identity, lo, hi),
            (true, false) => segment(&f, Map::Upper(lo), 0.0, 1.0),
            (false, true) => segment(&f, Map::Lower(hi), 0.0, 1.0),
            (false, false) => segment(&f, Map::Both, -1.0, 1.0),
        };
        heap.push(seg);
    }

    let mut subdivisions = 0usize;
    loop {
        let (total, err) = heap.iter().fold((0.0, 0.0), |(v, e), s| (v + s.value, e + s.err));
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        if err <= tol {
            return Ok(QuadResult { value: total, abs_error: err, subdivisions });
        }
        if subdivisions >= opts.max_subdivisions {
            return Err(Error::Numerical(format!(
                "quadrature did not converge on [{a}, {b}]: estimate {total:.3e}, error {err:.3e}, tolerance {tol:.3e}"
            )));
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.lo + worst.hi);
        if mid <= worst.lo || mid >= worst.hi {
            // Interval cannot be split further in floating point.
            return Ok(QuadResult { value: total, abs_error: err, subdivisions });
        }
        heap.push(segment(&f, worst.map, worst.lo, mid));
        heap.push(segment(&f, worst.map, mid, worst.hi));
        subdivisions += 1;
    }
}
