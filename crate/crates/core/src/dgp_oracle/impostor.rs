//! Observationally equivalent impostor designs certifying non-identification.

use super::{DgpSpec, StepSide, Structure, UStep, X1Law};
use crate::dist::{CdfPiece, DistLaw, LawKind, PieceRule};
use crate::error::{Error, Result};

/// Upper bound on the number of halving steps in the iterated construction.
const MAX_STEPS: usize = 12;

/// Impostor with `alpha_new` in place of `alpha0`, using the support of `X1`
/// implied by `spec.x1_law`.
pub fn construct_impostor(spec: &DgpSpec, alpha_new: f64) -> Result<DgpSpec> {
    let (a, b) = match &spec.x1_law {
        X1Law::Bernoulli { .. } => (0.0, 1.0),
        X1Law::Continuous(law) => {
            let (a, b) = law.support();
            if !(a.is_finite() && b.is_finite()) {
                return Err(Error::Domain(
                    "X1 has unbounded support, so |alpha0| <= b - a always holds and no impostor exists".into(),
                ));
            }
            (a, b)
        }
    };
    construct_impostor_on(spec, alpha_new, a, b)
}

/// Impostor for `X1` supported on `[a, b]`.
///
/// The returned design keeps the law of `V` and replaces `U` by a piecewise
/// shifted version so that `P(U~ <= x1 + alpha_new | V)` and
/// `P(U~ <= x1 | V)` reproduce the original conditional CDFs at
/// `x1 + alpha0` and `x1` for every `x1` in `[a, b]`.
pub fn construct_impostor_on(spec: &DgpSpec, alpha_new: f64, a: f64, b: f64) -> Result<DgpSpec> {
    spec.validate()?;
    if !(a <= b) || !alpha_new.is_finite() {
        return Err(Error::Domain(format!("need a <= b and finite alpha_new (a={a}, b={b}, alpha_new={alpha_new})")));
    }
    let alpha0 = spec.theta.alpha;
    if alpha_new == alpha0 {
        return Ok(spec.clone());
    }
    let (v_law, pi_law, mut steps) = match &spec.structure {
        Structure::OneFactor { v_law, pi_law } => (v_law.clone(), pi_law.clone(), Vec::new()),
        Structure::OneFactorImpostor { v_law, pi_law, steps } => (v_law.clone(), pi_law.clone(), steps.clone()),
        other => {
            return Err(Error::UnsupportedStructure(format!(
                "impostor construction needs a one-factor design, got {other:?}"
            )))
        }
    };
    let width = b - a;
    if alpha0.abs() <= width {
        return Err(Error::Domain(format!(
            "|alpha0| <= b - a ({} <= {width}); alpha0 is point identified",
            alpha0.abs()
        )));
    }
    if alpha0 > width {
        if alpha_new > alpha0 {
            steps.push(UStep { cut: a + alpha0, delta: alpha_new - alpha0, side: StepSide::Above });
        } else if alpha_new > width {
            let mut cur = alpha0;
            while alpha_new < 0.5 * (width + cur) {
                let next = 0.5 * (width + cur);
                steps.push(UStep { cut: a + next, delta: next - cur, side: StepSide::Above });
                cur = next;
                if steps.len() > MAX_STEPS {
                    return Err(Error::Domain(format!(
                        "alpha_new = {alpha_new} needs more than {MAX_STEPS} halving steps toward b - a = {width}"
                    )));
                }
            }
            steps.push(UStep { cut: a + alpha_new, delta: alpha_new - cur, side: StepSide::Above });
        } else {
            return Err(Error::Domain(format!(
                "alpha0 > b - a requires alpha_new > b - a (alpha_new = {alpha_new}, b - a = {width})"
            )));
        }
    } else if alpha_new < alpha0 {
        steps.push(UStep { cut: b + alpha0, delta: alpha_new - alpha0, side: StepSide::AtOrBelow });
    } else if alpha_new < -width {
        let mut cur = alpha0;
        while alpha_new > 0.5 * (cur - width) {
            let next = 0.5 * (cur - width);
            steps.push(UStep { cut: b + next, delta: next - cur, side: StepSide::AtOrBelow });
            cur = next;
            if steps.len() > MAX_STEPS {
                return Err(Error::Domain(format!(
                    "alpha_new = {alpha_new} needs more than {MAX_STEPS} halving steps toward a - b = {}",
                    -width
                )));
            }
        }
        steps.push(UStep { cut: b + alpha_new, delta: alpha_new - cur, side: StepSide::AtOrBelow });
    } else {
        return Err(Error::Domain(format!(
            "alpha0 < a - b requires alpha_new < a - b (alpha_new = {alpha_new}, a - b = {})",
            -width
        )));
    }
    let mut out = spec.clone();
    out.theta.alpha = alpha_new;
    out.structure = Structure::OneFactorImpostor { v_law, pi_law, steps };
    Ok(out)
}

/// Impostor for the two-shock design with a bounded factor.
///
/// Requires `gamma = 1`, binary `X1`, `W` supported on `[-b, -a]` with
/// `b - a < 0.5`, and `1 - (b - a) > alpha0 > alpha_new > b - a` together
/// with `alpha_new + b < a + 1`. The impostor factor is `W - delta`, the
/// selection shock is `eta2 + delta`, and the outcome shock has a spliced CDF
/// that agrees with the original wherever the data can see it, where
/// `delta = alpha0 - alpha_new`.
pub fn construct_two_factor_impostor(spec: &DgpSpec, alpha_new: f64) -> Result<DgpSpec> {
    spec.validate()?;
    let (w_law, eta1, eta2) = match &spec.structure {
        Structure::TwoFactor { w_law, eta1_law, eta2_law } => (w_law, eta1_law, eta2_law),
        other => {
            return Err(Error::UnsupportedStructure(format!("two-shock impostor needs TwoFactor, got {other:?}")))
        }
    };
    if spec.theta.gamma != 1.0 {
        return Err(Error::Domain(format!("gamma must equal 1, got {}", spec.theta.gamma)));
    }
    if !spec.x1_law.is_discrete() {
        return Err(Error::Domain("X1 must be binary".into()));
    }
    let (lo, hi) = w_law.support();
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Domain("W must have bounded support".into()));
    }
    let (a, b) = (-hi, -lo);
    let alpha0 = spec.theta.alpha;
    let width = b - a;
    if !(width < 0.5) {
        return Err(Error::Domain(format!("support length b - a = {width} must be below 0.5")));
    }
    if !(1.0 - width > alpha0 && alpha0 > alpha_new && alpha_new > width) {
        return Err(Error::Domain(format!(
            "need 1 - (b - a) > alpha0 > alpha_new > b - a (alpha0 = {alpha0}, alpha_new = {alpha_new}, b - a = {width})"
        )));
    }
    if !(alpha_new + b < a + 1.0) {
        return Err(Error::Domain(format!("need alpha_new + b < a + 1 (alpha_new = {alpha_new}, a = {a}, b = {b})")));
    }
    let d = alpha0 - alpha_new;
    let f = |e: f64| eta1.cdf(e);
    let lin = |e0: f64, e1: f64, v0: f64, v1: f64| PieceRule::Linear { e0, v0, e1, v1 };
    let piece = |upper: Option<f64>, rule: PieceRule| CdfPiece { upper, rule };
    let pieces = vec![
        piece(Some(a), PieceRule::Shift { delta: 0.0 }),
        piece(Some(a + d), PieceRule::Const { value: f(a) }),
        piece(Some(b + d), PieceRule::Shift { delta: d }),
        piece(Some(alpha0 + a), lin(b + d, alpha0 + a, f(b), f(alpha0 + a))),
        piece(Some(alpha0 + b), PieceRule::Shift { delta: 0.0 }),
        piece(Some(a + 1.0 + d), lin(alpha0 + b, a + 1.0 + d, f(alpha0 + b), f(a + 1.0))),
        piece(Some(b + 1.0 + d), PieceRule::Shift { delta: d }),
        piece(Some(a + alpha0 + 1.0), lin(b + 1.0 + d, a + alpha0 + 1.0, f(b + 1.0), f(a + alpha0 + 1.0))),
        piece(None, PieceRule::Shift { delta: 0.0 }),
    ];
    let eta1_new = DistLaw::new(LawKind::Spliced { base: Box::new(eta1.clone()), pieces });
    let mut out = spec.clone();
    out.theta.alpha = alpha_new;
    out.structure = Structure::TwoFactor { w_law: w_law.shifted(-d), eta1_law: eta1_new, eta2_law: eta2.shifted(d) };
    Ok(out)
}
