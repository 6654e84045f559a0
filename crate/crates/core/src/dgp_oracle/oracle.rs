//! Quadrature oracles for choice probabilities and normalized derivatives.

use serde::{Deserialize, Serialize};

use super::{alt4_v_law, g0_eval, psi, DgpSpec, Structure, UStep, ALT1_RHO};
use crate::dist::{norm_cdf, DistLaw};
use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadOptions};

const INNER_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellProbs {
    pub p11: f64,
    pub p10: f64,
    pub p01: f64,
    pub p00: f64,
}

impl CellProbs {
    pub fn sum(&self) -> f64 {
        self.p11 + self.p10 + self.p01 + self.p00
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.p11, self.p10, self.p01, self.p00]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioCell {
    P11,
    P10,
}

fn opts(bp: Vec<f64>) -> QuadOptions {
    QuadOptions { abs_tol: INNER_TOL, breakpoints: bp, ..QuadOptions::default() }
}

/// View of a structure in which `U | V = v` has an explicit CDF.
struct CondU<'a> {
    v_law: DistLaw,
    pi_law: &'a DistLaw,
    kind: CondKind<'a>,
}

enum CondKind<'a> {
    Linear(f64),
    Steps(f64, &'a [UStep]),
    Table(&'a [f64], &'a [f64]),
}

fn stepped_cdf(pi: &DistLaw, gamma: f64, steps: &[UStep], u: f64, v: f64) -> f64 {
    match steps.split_last() {
        None => pi.cdf(u - gamma * v),
        Some((last, rest)) => last.push_cdf(&|w| stepped_cdf(pi, gamma, rest, w, v), u),
    }
}

impl CondU<'_> {
    fn cdf(&self, u: f64, v: f64) -> f64 {
        match self.kind {
            CondKind::Linear(g) => self.pi_law.cdf(u - g * v),
            CondKind::Steps(g, steps) => stepped_cdf(self.pi_law, g, steps, u, v),
            CondKind::Table(k, vals) => self.pi_law.cdf(u - g0_eval(k, vals, v)),
        }
    }

    /// Kinks in `v` of `v -> F(u | v)`.
    fn kinks(&self, u: f64) -> Vec<f64> {
        let mut bp = self.v_law.breakpoints();
        if let CondKind::Linear(g) = self.kind {
            if g != 0.0 {
                bp.extend(self.pi_law.breakpoints().into_iter().map(|e| (u - e) / g));
            }
        }
        if let CondKind::Table(k, _) = self.kind {
            bp.extend_from_slice(k);
        }
        bp
    }
}

thread_local! {
    static ALT4_PI: DistLaw = DistLaw::uniform(-0.5, 0.5);
}

fn with_cond_u<T>(spec: &DgpSpec, f: impl FnOnce(Option<&CondU<'_>>) -> T) -> T {
    let gamma = spec.theta.gamma;
    match &spec.structure {
        Structure::OneFactor { v_law, pi_law } => {
            f(Some(&CondU { v_law: v_law.clone(), pi_law, kind: CondKind::Linear(gamma) }))
        }
        Structure::OneFactorImpostor { v_law, pi_law, steps } => {
            f(Some(&CondU { v_law: v_law.clone(), pi_law, kind: CondKind::Steps(gamma, steps) }))
        }
        Structure::NonSeparable { v_law, pi_law, g0_knots, g0_values } => {
            f(Some(&CondU { v_law: v_law.clone(), pi_law, kind: CondKind::Table(g0_knots, g0_values) }))
        }
        Structure::AltDgp4 => ALT4_PI.with(|pi| {
            f(Some(&CondU { v_law: alt4_v_law(), pi_law: pi, kind: CondKind::Linear(1.0) }))
        }),
        _ => f(None),
    }
}

/// `(P11, P10, P01, P00)` at `(x1, x)` by adaptive quadrature.
pub fn oracle_choice_probs(spec: &DgpSpec, x1: f64, x: f64) -> Result<CellProbs> {
    let alpha = spec.theta.alpha;
    let gamma = spec.theta.gamma;
    let one = with_cond_u(spec, |c| c.map(|c| one_factor_probs(c, alpha, x1, x)));
    if let Some(r) = one {
        return r;
    }
    match &spec.structure {
        Structure::TwoFactor { w_law, eta1_law, eta2_law }
        | Structure::TwoFactorMeasured { w_law, eta1_law, eta2_law, .. } => {
            two_factor_probs(w_law, eta1_law, eta2_law, alpha, gamma, x1, x)
        }
        Structure::AltDgp1 | Structure::AltDgp2 | Structure::AltDgp3 => {
            let joint = |u: f64, v: f64| alt_joint_cdf(&spec.structure, u, v);
            let fu = alt_marginal_cdf(&spec.structure, x1)?;
            let fv = alt_marginal_cdf(&spec.structure, x)?;
            let h1 = joint(x1 + alpha, x)?;
            let h0 = joint(x1, x)?;
            Ok(CellProbs { p11: h1, p10: fu - h0, p01: fv - h1, p00: 1.0 - fv - (fu - h0) })
        }
        _ => unreachable!("one-factor structures handled above"),
    }
}

fn one_factor_probs(c: &CondU<'_>, alpha: f64, x1: f64, x: f64) -> Result<CellProbs> {
    let (lo, hi) = c.v_law.support();
    let fv = c.v_law.cdf(x);
    let up = x.min(hi);
    let p11 = if up > lo {
        let u = x1 + alpha;
        integrate(|v| c.cdf(u, v) * c.v_law.pdf(v), lo, up, &opts(c.kinks(u)))?.value
    } else {
        0.0
    };
    let dn = x.max(lo);
    let p10 = if dn < hi {
        integrate(|v| c.cdf(x1, v) * c.v_law.pdf(v), dn, hi, &opts(c.kinks(x1)))?.value
    } else {
        0.0
    };
    Ok(CellProbs { p11, p10, p01: fv - p11, p00: 1.0 - fv - p10 })
}

fn w_limits(w_law: &DistLaw) -> (f64, f64) {
    w_law.support()
}

fn two_factor_kinks(w_law: &DistLaw, eta1: &DistLaw, eta2: &DistLaw, gamma: f64, u: f64, x: f64) -> Vec<f64> {
    let mut bp = w_law.breakpoints();
    if gamma != 0.0 {
        bp.extend(eta1.breakpoints().into_iter().map(|e| (u - e) / gamma));
    }
    bp.extend(eta2.breakpoints().into_iter().map(|e| x - e));
    bp
}

fn two_factor_probs(
    w_law: &DistLaw,
    eta1: &DistLaw,
    eta2: &DistLaw,
    alpha: f64,
    gamma: f64,
    x1: f64,
    x: f64,
) -> Result<CellProbs> {
    let (lo, hi) = w_limits(w_law);
    let u1 = x1 + alpha;
    let p11 = integrate(
        |w| eta1.cdf(u1 - gamma * w) * eta2.cdf(x - w) * w_law.pdf(w),
        lo,
        hi,
        &opts(two_factor_kinks(w_law, eta1, eta2, gamma, u1, x)),
    )?
    .value;
    let p10 = integrate(
        |w| eta1.cdf(x1 - gamma * w) * (1.0 - eta2.cdf(x - w)) * w_law.pdf(w),
        lo,
        hi,
        &opts(two_factor_kinks(w_law, eta1, eta2, gamma, x1, x)),
    )?
    .value;
    let py2 = integrate(|w| eta2.cdf(x - w) * w_law.pdf(w), lo, hi, &opts(two_factor_kinks(w_law, eta1, eta2, 0.0, 0.0, x)))?
        .value;
    Ok(CellProbs { p11, p10, p01: py2 - p11, p00: 1.0 - py2 - p10 })
}

fn uclamp(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

/// Threshold of the shared-normal recipe after undoing the exponential map.
fn alt3_threshold(t: f64) -> f64 {
    let a = 1.0 + 4.0 * t;
    if a > 0.0 {
        a.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `P(N(0,s^2) + Unif(0,1) - 0.5 <= t)`.
fn normal_plus_uniform_cdf(t: f64, s: f64) -> f64 {
    if !t.is_finite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    s * (psi((t + 0.5) / s) - psi((t - 0.5) / s))
}

fn alt_marginal_cdf(structure: &Structure, t: f64) -> Result<f64> {
    match structure {
        Structure::AltDgp2 => Ok(normal_plus_uniform_cdf(t, 1.0)),
        Structure::AltDgp3 => Ok(normal_plus_uniform_cdf(alt3_threshold(t), 1.0)),
        Structure::AltDgp1 => Ok(integrate(
            |w| (-w).exp() * normal_plus_uniform_cdf(t, w.sqrt()),
            0.0,
            f64::INFINITY,
            &opts(vec![]),
        )?
        .value),
        _ => Err(Error::UnsupportedStructure("marginal CDF only for alternative designs 1-3".into())),
    }
}

fn alt_joint_cdf(structure: &Structure, u: f64, v: f64) -> Result<f64> {
    match structure {
        Structure::AltDgp2 | Structure::AltDgp3 => {
            let (u, v) = if matches!(structure, Structure::AltDgp3) {
                (alt3_threshold(u), alt3_threshold(v))
            } else {
                (u, v)
            };
            if !u.is_finite() || !v.is_finite() {
                return Ok(0.0);
            }
            let top = u.min(v) + 0.5;
            Ok(integrate(
                |e| crate::dist::norm_pdf(e) * uclamp(u + 0.5 - e) * uclamp(v + 0.5 - e),
                f64::NEG_INFINITY,
                top,
                &opts(vec![u - 0.5, v - 0.5]),
            )?
            .value)
        }
        Structure::AltDgp1 => {
            let rho = ALT1_RHO;
            let cond_sd = (1.0 - rho * rho).sqrt();
            let inner = |w: f64| -> f64 {
                let sw = w.sqrt();
                let s = sw * cond_sd;
                let top = (v + 0.5) / sw;
                integrate(
                    |z| {
                        let e1 = sw * z;
                        let c = u + 0.5 - rho * e1;
                        let pu = s * (psi(c / s) - psi((c - 1.0) / s));
                        crate::dist::norm_pdf(z) * pu * uclamp(v + 0.5 - e1)
                    },
                    f64::NEG_INFINITY,
                    top,
                    &opts(vec![(v - 0.5) / sw]),
                )
                .map(|r| r.value)
                .unwrap_or(f64::NAN)
            };
            let r = integrate(|w| (-w).exp() * inner(w), 0.0, f64::INFINITY, &opts(vec![]))?;
            if r.value.is_nan() {
                return Err(Error::Numerical("inner quadrature failed in elliptical Laplace design".into()));
            }
            Ok(r.value)
        }
        _ => Err(Error::UnsupportedStructure("joint CDF only for alternative designs 1-3".into())),
    }
}

/// `(F_V(x), f_V(x))` for the selection disturbance.
pub fn oracle_marginal_v(spec: &DgpSpec, x: f64) -> Result<(f64, f64)> {
    if let Some(r) = with_cond_u(spec, |c| c.map(|c| (c.v_law.cdf(x), c.v_law.pdf(x)))) {
        return Ok(r);
    }
    match &spec.structure {
        Structure::TwoFactor { w_law, eta2_law, .. } | Structure::TwoFactorMeasured { w_law, eta2_law, .. } => {
            let (lo, hi) = w_limits(w_law);
            let mut bp = w_law.breakpoints();
            bp.extend(eta2_law.breakpoints().into_iter().map(|e| x - e));
            let o = opts(bp);
            let cdf = integrate(|w| eta2_law.cdf(x - w) * w_law.pdf(w), lo, hi, &o)?.value;
            let pdf = integrate(|w| eta2_law.pdf(x - w) * w_law.pdf(w), lo, hi, &o)?.value;
            Ok((cdf, pdf))
        }
        Structure::AltDgp2 => Ok((normal_plus_uniform_cdf(x, 1.0), norm_cdf(x + 0.5) - norm_cdf(x - 0.5))),
        Structure::AltDgp3 => {
            let t = alt3_threshold(x);
            if !t.is_finite() {
                return Ok((0.0, 0.0));
            }
            let g = norm_cdf(t + 0.5) - norm_cdf(t - 0.5);
            Ok((normal_plus_uniform_cdf(t, 1.0), g * 4.0 / (1.0 + 4.0 * x)))
        }
        Structure::AltDgp1 => {
            let cdf = alt_marginal_cdf(&spec.structure, x)?;
            let pdf = integrate(
                |w| {
                    let s = w.sqrt();
                    (-w).exp() * (norm_cdf((x + 0.5) / s) - norm_cdf((x - 0.5) / s))
                },
                0.0,
                f64::INFINITY,
                &opts(vec![]),
            )?
            .value;
            Ok((cdf, pdf))
        }
        _ => unreachable!("one-factor structures handled above"),
    }
}

/// `dP11/dx / f_V(x) = F_{U|V}(x1 + alpha | x)` and
/// `dP10/dx / f_V(x) = -F_{U|V}(x1 | x)`.
pub fn oracle_derivative_ratio(spec: &DgpSpec, x1: f64, x: f64, cell: RatioCell) -> Result<f64> {
    let alpha = spec.theta.alpha;
    with_cond_u(spec, |c| match c {
        Some(c) => Ok(match cell {
            RatioCell::P11 => c.cdf(x1 + alpha, x),
            RatioCell::P10 => -c.cdf(x1, x),
        }),
        None => Err(Error::UnsupportedStructure(
            "normalized derivative ratio needs a structure with an explicit law of U given V".into(),
        )),
    })
}
