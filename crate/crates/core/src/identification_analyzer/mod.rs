//! Identification analysis: region classification, sharp sets, the rank
//! condition behind the linear identification system, certified observational
//! equivalence, and the propensity-matching comparator estimator.

mod equivalence;
mod linear;
mod vy;

pub use equivalence::{find_no_factor_match, verify_observational_equivalence, EquivalenceGrid, EquivalenceReport, MatchCertificate};
pub use linear::{check_rank_condition, solve_theta_linear_system, MatchedPair, RankCheck, RankConditionInput, RANK_TOL};
pub use vy::{fit_vy_comparator, vy_contrast, VyConfig};

use serde::{Deserialize, Serialize};

use crate::dgp_oracle::DgpSpec;
use crate::error::{Error, Result};

/// Joint support of `(X1, X)` as a product of intervals; `X` may be unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub x1_range: [f64; 2],
    pub x_range: [f64; 2],
}

impl SupportBox {
    pub fn new(x1_range: [f64; 2], x_range: [f64; 2]) -> Result<Self> {
        let b = Self { x1_range, x_range };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.x1_range;
        let [c, d] = self.x_range;
        if a.is_nan() || b.is_nan() || c.is_nan() || d.is_nan() || a > b || c > d {
            return Err(Error::Config(format!("invalid support box [{a}, {b}] x [{c}, {d}]")));
        }
        Ok(())
    }

    /// Support implied by the laws of `X1` and `X` in a design.
    pub fn from_spec(spec: &DgpSpec) -> Result<Self> {
        let (a, b) = spec.x1_law.support();
        let (c, d) = spec.x_law.support();
        Self::new([a, b], [c, d])
    }

    pub fn x1_width(&self) -> f64 {
        self.x1_range[1] - self.x1_range[0]
    }

    pub fn x_width(&self) -> f64 {
        self.x_range[1] - self.x_range[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `|alpha| <= b - a`: identified without using the factor structure.
    NoFactorIdentified,
    /// `b - a < |alpha| < b - a + |gamma| (d - c)`.
    FactorOnlyIdentified,
    NotIdentified,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::NoFactorIdentified => "NoFactorIdentified",
            Region::FactorOnlyIdentified => "FactorOnlyIdentified",
            Region::NotIdentified => "NotIdentified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Endpoint {
    NegInfinity,
    PosInfinity,
    Open(f64),
    Closed(f64),
}

/// Real interval with explicit open, closed and infinite endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpSet {
    pub lo: Endpoint,
    pub hi: Endpoint,
}

impl SharpSet {
    pub fn singleton(v: f64) -> Self {
        Self { lo: Endpoint::Closed(v), hi: Endpoint::Closed(v) }
    }

    pub fn is_singleton(&self) -> bool {
        matches!((self.lo, self.hi), (Endpoint::Closed(a), Endpoint::Closed(b)) if a == b)
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = match self.lo {
            Endpoint::NegInfinity => true,
            Endpoint::PosInfinity => false,
            Endpoint::Open(a) => v > a,
            Endpoint::Closed(a) => v >= a,
        };
        let below = match self.hi {
            Endpoint::PosInfinity => true,
            Endpoint::NegInfinity => false,
            Endpoint::Open(b) => v < b,
            Endpoint::Closed(b) => v <= b,
        };
        above && below
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentVerdict {
    pub point_identified: bool,
    pub region: Region,
    /// Identified set for `alpha` under the factor structure where it is a
    /// point, and the no-factor sharp set otherwise.
    pub sharp_set: SharpSet,
    pub binding_condition: String,
}

/// Sharp identified set for `alpha0` when no factor structure is imposed.
///
/// Only the sign of `alpha0` is learned once `|alpha0| > b - a`.
pub fn no_factor_sharp_set(alpha: f64, bx: &SupportBox) -> SharpSet {
    let w = bx.x1_width();
    if alpha.abs() <= w {
        SharpSet::singleton(alpha)
    } else if alpha > 0.0 {
        SharpSet { lo: Endpoint::Open(w), hi: Endpoint::PosInfinity }
    } else {
        SharpSet { lo: Endpoint::NegInfinity, hi: Endpoint::Open(-w) }
    }
}

/// Reach of the factor structure, `b - a + |gamma| (d - c)`, with `0 * inf = 0`.
fn factor_reach(gamma: f64, bx: &SupportBox) -> f64 {
    let extra = if gamma == 0.0 { 0.0 } else { gamma.abs() * bx.x_width() };
    bx.x1_width() + extra
}

pub fn classify_region(alpha: f64, gamma: f64, bx: &SupportBox) -> IdentVerdict {
    let w = bx.x1_width();
    let reach = factor_reach(gamma, bx);
    let a = alpha.abs();
    if a <= w {
        IdentVerdict {
            point_identified: true,
            region: Region::NoFactorIdentified,
            sharp_set: SharpSet::singleton(alpha),
            binding_condition: format!("|alpha| <= b - a ({a} <= {w})"),
        }
    } else if a < reach {
        IdentVerdict {
            point_identified: true,
            region: Region::FactorOnlyIdentified,
            sharp_set: SharpSet::singleton(alpha),
            binding_condition: format!("b - a < |alpha| < b - a + |gamma| (d - c) ({w} < {a} < {reach})"),
        }
    } else {
        IdentVerdict {
            point_identified: false,
            region: Region::NotIdentified,
            sharp_set: no_factor_sharp_set(alpha, bx),
            binding_condition: format!("|alpha| >= b - a + |gamma| (d - c) ({a} >= {reach})"),
        }
    }
}

/// Region labels over an `(alpha, gamma)` lattice, alpha-major.
pub fn region_sweep(alphas: &[f64], gammas: &[f64], bx: &SupportBox) -> Vec<(f64, f64, Region)> {
    let mut out = Vec::with_capacity(alphas.len() * gammas.len());
    for &a in alphas {
        for &g in gammas {
            out.push((a, g, classify_region(a, g, bx).region));
        }
    }
    out
}

pub fn region_sweep_csv(rows: &[(f64, f64, Region)]) -> String {
    let mut s = String::from("alpha,gamma,region\n");
    for (a, g, r) in rows {
        s.push_str(&format!("{a:.4},{g:.4},{}\n", r.label()));
    }
    s
}
