//! Univariate disturbance and covariate laws.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadOptions};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Inverse standard normal CDF (Acklam's rational approximation refined by
/// one Halley step).
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let pl = 0.02425;
    let x = if p < pl {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - pl {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = norm_cdf(x) - p;
    let u = e / norm_pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

/// One piece of a spliced CDF, valid up to `upper` (inclusive); `None` means +∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPiece {
    pub upper: Option<f64>,
    pub rule: PieceRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PieceRule {
    /// F(e) = F_base(e - delta)
    Shift { delta: f64 },
    /// F(e) = value
    Const { value: f64 },
    /// Linear interpolation between (e0, v0) and (e1, v1).
    Linear { e0: f64, v0: f64, e1: f64, v1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LawKind {
    StandardNormal,
    Laplace { scale: f64 },
    StudentT { dof: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
    /// Piecewise-linear density on an increasing grid, normalized on load.
    BoundedCustom { grid: Vec<f64>, density: Vec<f64> },
    /// A CDF assembled from pieces of a base law's CDF.
    Spliced { base: Box<DistLaw>, pieces: Vec<CdfPiece> },
}

/// Law of `location + scale * Z` with `Z` drawn from `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistLaw {
    pub kind: LawKind,
    #[serde(default)]
    pub location: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl DistLaw {
    pub fn new(kind: LawKind) -> Self {
        Self { kind, location: 0.0, scale: 1.0 }
    }
    pub fn standard_normal() -> Self {
        Self::new(LawKind::StandardNormal)
    }
    pub fn normal(mean: f64, sd: f64) -> Self {
        Self { kind: LawKind::StandardNormal, location: mean, scale: sd }
    }
    pub fn laplace(scale: f64) -> Self {
        Self::new(LawKind::Laplace { scale })
    }
    pub fn student_t(dof: f64) -> Self {
        Self::new(LawKind::StudentT { dof })
    }
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self::new(LawKind::Uniform { lo, hi })
    }
    /// Exponential with rate 1 shifted to mean zero.
    pub fn centered_exponential() -> Self {
        Self { kind: LawKind::Exponential { rate: 1.0 }, location: -1.0, scale: 1.0 }
    }
    pub fn shifted(&self, by: f64) -> Self {
        Self { location: self.location + by, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.location.is_finite()) {
            return Err(Error::Config(format!("law scale must be positive and finite, got {}", self.scale)));
        }
        match &self.kind {
            LawKind::StandardNormal => Ok(()),
            LawKind::Laplace { scale } if *scale > 0.0 => Ok(()),
            LawKind::StudentT { dof } if *dof > 0.0 => Ok(()),
            LawKind::Uniform { lo, hi } if lo < hi => Ok(()),
            LawKind::Exponential { rate } if *rate > 0.0 => Ok(()),
            LawKind::BoundedCustom { grid, density } => {
                if grid.len() < 2 || grid.len() != density.len() {
                    return Err(Error::Config("custom density needs matching grid of length >= 2".into()));
                }
                if grid.windows(2).any(|w| w[1] <= w[0]) || density.iter().any(|d| *d < 0.0 || !d.is_finite()) {
                    return Err(Error::Config("custom density grid must increase and values be >= 0".into()));
                }
                if custom_mass(grid, density) <= 0.0 {
                    return Err(Error::Config("custom density has zero mass".into()));
                }
                Ok(())
            }
            LawKind::Spliced { base, pieces } => {
                base.validate()?;
                if pieces.is_empty() || pieces.last().map(|p| p.upper.is_some()).unwrap_or(true) {
                    return Err(Error::Config("spliced CDF must end with an unbounded piece".into()));
                }
                Ok(())
            }
            other => Err(Error::Config(format!("invalid law parameters: {other:?}"))),
        }
    }

    fn z(&self, x: f64) -> f64 {
        (x - self.location) / self.scale
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 1.0;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        let z = self.z(x);
        match &self.kind {
            LawKind::StandardNormal => norm_cdf(z),
            LawKind::Laplace { scale } => {
                let u = z / scale;
                if u < 0.0 {
                    0.5 * u.exp()
                } else {
                    1.0 - 0.5 * (-u).exp()
                }
            }
            LawKind::StudentT { dof } => student_t_cdf(z, *dof),
            LawKind::Uniform { lo, hi } => ((z - lo) / (hi - lo)).clamp(0.0, 1.0),
            LawKind::Exponential { rate } => {
                if z <= 0.0 {
                    0.0
                } else {
                    -(-rate * z).exp_m1()
                }
            }
            LawKind::BoundedCustom { grid, density } => custom_cdf(grid, density, z),
            LawKind::Spliced { base, pieces } => {
                let p = piece_for(pieces, z);
                match p.rule {
                    PieceRule::Shift { delta } => base.cdf(z - delta),
                    PieceRule::Const { value } => value,
                    PieceRule::Linear { e0, v0, e1, v1 } => v0 + (v1 - v0) * (z - e0) / (e1 - e0),
                }
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return 0.0;
        }
        let z = self.z(x);
        let dens = match &self.kind {
            LawKind::StandardNormal => norm_pdf(z),
            LawKind::Laplace { scale } => 0.5 / scale * (-(z / scale).abs()).exp(),
            LawKind::StudentT { dof } => student_t_pdf(z, *dof),
            LawKind::Uniform { lo, hi } => {
                if z >= *lo && z <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            LawKind::Exponential { rate } => {
                if z < 0.0 {
                    0.0
                } else {
                    rate * (-rate * z).exp()
                }
            }
            LawKind::BoundedCustom { grid, density } => custom_pdf(grid, density, z),
            LawKind::Spliced { base, pieces } => {
                let p = piece_for(pieces, z);
                match p.rule {
                    PieceRule::Shift { delta } => base.pdf(z - delta),
                    PieceRule::Const { .. } => 0.0,
                    PieceRule::Linear { e0, v0, e1, v1 } => (v1 - v0) / (e1 - e0),
                }
            }
        };
        dens / self.scale
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let z = match &self.kind {
            LawKind::StandardNormal => norm_quantile(p),
            LawKind::Laplace { scale } => {
                if p < 0.5 {
                    scale * (2.0 * p).ln()
                } else {
                    -scale * (2.0 * (1.0 - p)).ln()
                }
            }
            LawKind::StudentT { dof } => match StudentsT::new(0.0, 1.0, *dof) {
                Ok(t) => t.inverse_cdf(p),
                Err(_) => f64::NAN,
            },
            LawKind::Uniform { lo, hi } => lo + p * (hi - lo),
            LawKind::Exponential { rate } => -(-p).ln_1p() / rate,
            LawKind::BoundedCustom { .. } | LawKind::Spliced { .. } => {
                return self.quantile_by_bisection(p);
            }
        };
        self.location + self.scale * z
    }

    fn quantile_by_bisection(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = self.support();
        if !lo.is_finite() {
            lo = self.location - self.scale;
            while self.cdf(lo) > p {
                lo = self.location - 2.0 * (self.location - lo).abs() - 1.0;
            }
        }
        if !hi.is_finite() {
            hi = self.location + self.scale;
            while self.cdf(hi) < p {
                hi = self.location + 2.0 * (hi - self.location).abs() + 1.0;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z = match &self.kind {
            LawKind::StandardNormal => StandardNormal.sample(rng),
            LawKind::Laplace { scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            LawKind::StudentT { dof } => StudentT::new(*dof).expect("validated dof").sample(rng),
            LawKind::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            LawKind::Exponential { rate } => Exp::new(*rate).expect("validated rate").sample(rng),
            LawKind::BoundedCustom { .. } | LawKind::Spliced { .. } => {
                let u: f64 = rng.random();
                return self.quantile_by_bisection(u);
            }
        };
        self.location + self.scale * z
    }

    pub fn mean(&self) -> f64 {
        let m = match &self.kind {
            LawKind::StandardNormal | LawKind::Laplace { .. } | LawKind::StudentT { .. } => 0.0,
            LawKind::Uniform { lo, hi } => 0.5 * (lo + hi),
            LawKind::Exponential { rate } => 1.0 / rate,
            LawKind::BoundedCustom { .. } | LawKind::Spliced { .. } => {
                return self.moment_by_quadrature(1);
            }
        };
        self.location + self.scale * m
    }

    /// Standard deviation; infinite when the variance does not exist.
    pub fn sd(&self) -> f64 {
        let v = match &self.kind {
            LawKind::StandardNormal => 1.0,
            LawKind::Laplace { scale } => 2.0 * scale * scale,
            LawKind::StudentT { dof } => {
                if *dof > 2.0 {
                    dof / (dof - 2.0)
                } else {
                    f64::INFINITY
                }
            }
            LawKind::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            LawKind::Exponential { rate } => 1.0 / (rate * rate),
            LawKind::BoundedCustom { .. } | LawKind::Spliced { .. } => {
                let m = self.moment_by_quadrature(1);
                return (self.moment_by_quadrature(2) - m * m).max(0.0).sqrt();
            }
        };
        self.scale * v.sqrt()
    }

    fn moment_by_quadrature(&self, k: i32) -> f64 {
        let (lo, hi) = self.support();
        let opts = QuadOptions::default().with_breakpoints(self.breakpoints());
        integrate(|x| x.powi(k) * self.pdf(x), lo, hi, &opts).map(|r| r.value).unwrap_or(f64::NAN)
    }

    /// Closed support interval; infinite ends for unbounded laws.
    pub fn support(&self) -> (f64, f64) {
        let (lo, hi) = match &self.kind {
            LawKind::Uniform { lo, hi } => (*lo, *hi),
            LawKind::Exponential { .. } => (0.0, f64::INFINITY),
            LawKind::BoundedCustom { grid, .. } => (grid[0], grid[grid.len() - 1]),
            LawKind::Spliced { base, .. } => {
                let (a, b) = base.support();
                if a.is_finite() || b.is_finite() {
                    // Pieces may move mass; fall back to the full line.
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    (a, b)
                }
            }
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        (self.location + self.scale * lo, self.location + self.scale * hi)
    }

    /// Points where the density is non-smooth (for quadrature breakpoints).
    pub fn breakpoints(&self) -> Vec<f64> {
        let raw: Vec<f64> = match &self.kind {
            LawKind::StandardNormal | LawKind::StudentT { .. } => vec![],
            LawKind::Laplace { .. } | LawKind::Exponential { .. } => vec![0.0],
            LawKind::Uniform { lo, hi } => vec![*lo, *hi],
            LawKind::BoundedCustom { grid, .. } => grid.clone(),
            LawKind::Spliced { base, pieces } => {
                let mut v: Vec<f64> = pieces.iter().filter_map(|p| p.upper).collect();
                for p in pieces {
                    if let PieceRule::Shift { delta } = p.rule {
                        v.extend(base.breakpoints().into_iter().map(|b| b + delta));
                    }
                }
                v
            }
        };
        raw.into_iter().map(|z| self.location + self.scale * z).collect()
    }

    /// Median of the law.
    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }
}

fn piece_for(pieces: &[CdfPiece], z: f64) -> &CdfPiece {
    pieces
        .iter()
        .find(|p| p.upper.map(|u| z <= u).unwrap_or(true))
        .unwrap_or_else(|| pieces.last().expect("validated non-empty"))
}

fn student_t_cdf(z: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).map(|t| t.cdf(z)).unwrap_or(f64::NAN)
}

fn student_t_pdf(z: f64, dof: f64) -> f64 {
    let ln_c = ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * std::f64::consts::PI).ln();
    (ln_c - 0.5 * (dof + 1.0) * (1.0 + z * z / dof).ln()).exp()
}

fn custom_mass(grid: &[f64], density: &[f64]) -> f64 {
    grid.windows(2)
        .zip(density.windows(2))
        .map(|(g, d)| 0.5 * (g[1] - g[0]) * (d[0] + d[1]))
        .sum()
}

fn custom_pdf(grid: &[f64], density: &[f64], z: f64) -> f64 {
    if z < grid[0] || z > grid[grid.len() - 1] {
        return 0.0;
    }
    let mass = custom_mass(grid, density);
    let k = grid.partition_point(|g| *g <= z).clamp(1, grid.len() - 1);
    let (g0, g1) = (grid[k - 1], grid[k]);
    let t = (z - g0) / (g1 - g0);
    (density[k - 1] + t * (density[k] - density[k - 1])) / mass
}

fn custom_cdf(grid: &[f64], density: &[f64], z: f64) -> f64 {
    if z <= grid[0] {
        return 0.0;
    }
    if z >= grid[grid.len() - 1] {
        return 1.0;
    }
    let mass = custom_mass(grid, density);
    let mut acc = 0.0;
    for k in 1..grid.len() {
        let (g0, g1) = (grid[k - 1], grid[k]);
        let (d0, d1) = (density[k - 1], density[k]);
        if z >= g1 {
            acc += 0.5 * (g1 - g0) * (d0 + d1);
        } else {
            let s = z - g0;
            let slope = (d1 - d0) / (g1 - g0);
            acc += d0 * s + 0.5 * slope * s * s;
            break;
        }
    }
    (acc / mass).clamp(0.0, 1.0)
}
