//! Simulation designs for the triangular binary model and quadrature
//! oracles for its choice probabilities.
//!
//! The model is
//!
//! ```text
//! Y1 = 1{X1 + alpha*Y2 - U >= 0},   Y2 = 1{X - V >= 0}
//! ```
//!
//! with the dependence between `U` and `V` generated by one of the
//! [`Structure`] variants.

mod impostor;
mod oracle;

pub use impostor::{construct_impostor, construct_impostor_on, construct_two_factor_impostor};
pub use oracle::{oracle_choice_probs, oracle_derivative_ratio, oracle_marginal_v, CellProbs, RatioCell};

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::{norm_cdf, DistLaw};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Structural parameters. Only `alpha` and `gamma` enter the condensed model;
/// `lambda_rest` and `beta` carry the remaining index coefficients when the
/// first coefficient on `Z1` is normalized to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: f64,
    pub gamma: f64,
    #[serde(default)]
    pub lambda_rest: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn condensed(alpha: f64, gamma: f64) -> Self {
        Self { alpha, gamma, lambda_rest: Vec::new(), beta: Vec::new() }
    }

    /// Number of free coefficients, `d = d1 + d3 + 1`.
    pub fn dim(&self) -> usize {
        2 + self.lambda_rest.len() + self.beta.len()
    }

    /// Coefficients in linear-system order `(alpha, lambda_rest, beta, gamma)`.
    pub fn to_system_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.alpha);
        v.extend_from_slice(&self.lambda_rest);
        v.extend_from_slice(&self.beta);
        v.push(self.gamma);
        v
    }

    pub fn from_system_vec(v: &[f64], d_lambda: usize) -> Self {
        let d = v.len();
        Self {
            alpha: v[0],
            lambda_rest: v[1..1 + d_lambda].to_vec(),
            beta: v[1 + d_lambda..d - 1].to_vec(),
            gamma: v[d - 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.alpha.is_finite()
            && self.gamma.is_finite()
            && self.lambda_rest.iter().chain(&self.beta).all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::Config("theta entries must be finite".into()))
        }
    }
}

/// Law of the outcome-equation regressor `X1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum X1Law {
    Bernoulli { p: f64 },
    Continuous(DistLaw),
}

impl X1Law {
    pub fn support(&self) -> (f64, f64) {
        match self {
            X1Law::Bernoulli { .. } => (0.0, 1.0),
            X1Law::Continuous(law) => law.support(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, X1Law::Bernoulli { .. })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            X1Law::Bernoulli { p } => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            X1Law::Continuous(law) => law.sample(rng),
        }
    }
}

/// Which side of the cut a step of the impostor map shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSide {
    Above,
    AtOrBelow,
}

/// `U -> U + delta` on one side of `cut`, identity on the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UStep {
    pub cut: f64,
    pub delta: f64,
    pub side: StepSide,
}

impl UStep {
    pub fn apply(&self, u: f64) -> f64 {
        let shift = match self.side {
            StepSide::Above => u > self.cut,
            StepSide::AtOrBelow => u <= self.cut,
        };
        if shift {
            u + self.delta
        } else {
            u
        }
    }

    /// CDF of the mapped variable given the CDF `f` of its input.
    pub fn push_cdf(&self, f: &dyn Fn(f64) -> f64, u: f64) -> f64 {
        let fc = f(self.cut);
        match self.side {
            StepSide::Above => f(u.min(self.cut)) + (f(u - self.delta) - fc).max(0.0),
            StepSide::AtOrBelow => f((u - self.delta).min(self.cut)) + (f(u) - fc).max(0.0),
        }
    }
}

/// Dependence structure between the outcome and selection disturbances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Structure {
    /// `U = gamma*V + Pi`, `Pi` independent of `V`.
    OneFactor { v_law: DistLaw, pi_law: DistLaw },
    /// `U~ = T_k(...T_1(gamma*V + Pi))`: a one-factor draw pushed through
    /// piecewise shifts. The conditional law of `U~` given `V` is kept exact.
    OneFactorImpostor { v_law: DistLaw, pi_law: DistLaw, steps: Vec<UStep> },
    /// `U = gamma*W + eta1`, `V = W + eta2`.
    TwoFactor { w_law: DistLaw, eta1_law: DistLaw, eta2_law: DistLaw },
    /// Two-factor structure with measurements `Y3 = nu*W + eta3`, `Y4 = sigma*W + eta4`.
    TwoFactorMeasured {
        w_law: DistLaw,
        eta1_law: DistLaw,
        eta2_law: DistLaw,
        eta3_law: DistLaw,
        eta4_law: DistLaw,
        nu: f64,
        sigma: f64,
    },
    /// Elliptical Laplace pair with uniform perturbations.
    AltDgp1,
    /// Shared normal component plus independent uniforms.
    AltDgp2,
    /// Exponentiated version of `AltDgp2`.
    AltDgp3,
    /// Laplace `V` with standard deviation 0.5 and `U = V + V' - 0.5`, `V'` uniform.
    AltDgp4,
    /// `U = g0(V) + Pi` with `g0` piecewise linear through the knots
    /// (linear extrapolation beyond them).
    NonSeparable { v_law: DistLaw, pi_law: DistLaw, g0_knots: Vec<f64>, g0_values: Vec<f64> },
}

/// Correlation of the Laplace pair in `AltDgp1`.
pub const ALT1_RHO: f64 = -0.5;

/// Full generative description of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub theta: Theta,
    pub x1_law: X1Law,
    pub x_law: DistLaw,
    pub structure: Structure,
    #[serde(default)]
    pub seed: u64,
}

/// Laws of `V` used in the main simulation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MainLaw {
    Normal,
    Laplace,
    T3,
}

impl MainLaw {
    pub fn law(self) -> DistLaw {
        match self {
            MainLaw::Normal => DistLaw::standard_normal(),
            MainLaw::Laplace => DistLaw::laplace(1.0),
            MainLaw::T3 => DistLaw::student_t(3.0),
        }
    }
}

impl DgpSpec {
    /// Main-table design: binary `X1` with success probability 0.6,
    /// standard normal `X`, `U = gamma*V + Pi`.
    pub fn main_design(v: MainLaw, pi: MainLaw, alpha: f64, gamma: f64) -> Self {
        Self {
            theta: Theta::condensed(alpha, gamma),
            x1_law: X1Law::Bernoulli { p: 0.6 },
            x_law: DistLaw::standard_normal(),
            structure: Structure::OneFactor { v_law: v.law(), pi_law: pi.law() },
            seed: 0,
        }
    }

    /// Alternative design `k` in 1..=4 with continuous, independent standard
    /// normal `(X1, X)`.
    pub fn alt_dgp(k: u8) -> Result<Self> {
        let (alpha, gamma, structure) = match k {
            1 => (-0.25, 1.0, Structure::AltDgp1),
            2 => (-0.25, 1.0, Structure::AltDgp2),
            3 => (-0.5, 1.0, Structure::AltDgp3),
            4 => (-0.25, 1.0, Structure::AltDgp4),
            _ => return Err(Error::Config(format!("alternative design {k} does not exist"))),
        };
        Ok(Self {
            theta: Theta::condensed(alpha, gamma),
            x1_law: X1Law::Continuous(DistLaw::standard_normal()),
            x_law: DistLaw::standard_normal(),
            structure,
            seed: 0,
        })
    }

    /// Two-factor design with measurements and a centered exponential factor.
    pub fn measured_exponential(alpha: f64, gamma: f64, nu: f64, sigma: f64) -> Self {
        Self {
            theta: Theta::condensed(alpha, gamma),
            x1_law: X1Law::Bernoulli { p: 0.5 },
            x_law: DistLaw::normal(0.0, 2.0),
            structure: Structure::TwoFactorMeasured {
                w_law: DistLaw::centered_exponential(),
                eta1_law: DistLaw::standard_normal(),
                eta2_law: DistLaw::laplace(1.0),
                eta3_law: DistLaw::normal(0.0, 0.5),
                eta4_law: DistLaw::normal(0.0, 0.5),
                nu,
                sigma,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.x_law.validate()?;
        match &self.x1_law {
            X1Law::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                return Err(Error::Config(format!("Bernoulli probability {p} outside [0,1]")));
            }
            X1Law::Continuous(law) => law.validate()?,
            _ => {}
        }
        match &self.structure {
            Structure::OneFactor { v_law, pi_law } => {
                v_law.validate()?;
                pi_law.validate()?;
            }
            Structure::OneFactorImpostor { v_law, pi_law, steps } => {
                v_law.validate()?;
                pi_law.validate()?;
                if steps.iter().any(|s| !(s.cut.is_finite() && s.delta.is_finite())) {
                    return Err(Error::Config("impostor steps must be finite".into()));
                }
            }
            Structure::TwoFactor { w_law, eta1_law, eta2_law } => {
                w_law.validate()?;
                eta1_law.validate()?;
                eta2_law.validate()?;
            }
            Structure::TwoFactorMeasured { w_law, eta1_law, eta2_law, eta3_law, eta4_law, nu, sigma } => {
                for l in [w_law, eta1_law, eta2_law, eta3_law, eta4_law] {
                    l.validate()?;
                }
                if *nu == 0.0 || !nu.is_finite() {
                    return Err(Error::Config("measurement loading nu must be nonzero".into()));
                }
                if !sigma.is_finite() {
                    return Err(Error::Config("measurement loading sigma must be finite".into()));
                }
            }
            Structure::AltDgp1 | Structure::AltDgp2 | Structure::AltDgp3 | Structure::AltDgp4 => {}
            Structure::NonSeparable { v_law, pi_law, g0_knots, g0_values } => {
                v_law.validate()?;
                pi_law.validate()?;
                if g0_knots.len() < 2 || g0_knots.len() != g0_values.len() {
                    return Err(Error::Config("g0 table needs at least two matching knots".into()));
                }
                if g0_knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("g0 knots must increase".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Whether the model has measurement equations.
    pub fn has_measurements(&self) -> bool {
        matches!(self.structure, Structure::TwoFactorMeasured { .. })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Piecewise-linear `g0` with linear extrapolation.
pub fn g0_eval(knots: &[f64], values: &[f64], v: f64) -> f64 {
    let m = knots.len();
    let k = knots.partition_point(|k| *k <= v).clamp(1, m - 1);
    let (k0, k1) = (knots[k - 1], knots[k]);
    values[k - 1] + (values[k] - values[k - 1]) * (v - k0) / (k1 - k0)
}

/// Laplace law with standard deviation 0.5 used in `AltDgp4`.
pub fn alt4_v_law() -> DistLaw {
    DistLaw::laplace(0.5 / std::f64::consts::SQRT_2)
}

/// Realized dataset in column form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y1: Vec<u8>,
    pub y2: Vec<u8>,
    pub x1: Vec<f64>,
    pub x: Vec<f64>,
    pub y3: Option<Vec<f64>>,
    pub y4: Option<Vec<f64>>,
    pub n: usize,
    pub spec_fingerprint: String,
}

impl Sample {
    /// Build a sample from raw columns (for data not produced by [`simulate`]).
    pub fn from_columns(y1: Vec<u8>, y2: Vec<u8>, x1: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        let s = Self { n: y1.len(), y1, y2, x1, x, y3: None, y4: None, spec_fingerprint: "external".into() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.y1.len() != n || self.y2.len() != n || self.x1.len() != n || self.x.len() != n {
            return Err(Error::Input("sample columns have unequal lengths".into()));
        }
        for opt in [&self.y3, &self.y4].into_iter().flatten() {
            if opt.len() != n {
                return Err(Error::Input("measurement column length differs from n".into()));
            }
        }
        if self.y1.iter().chain(&self.y2).any(|v| *v > 1) {
            return Err(Error::Input("binary outcomes must be 0 or 1".into()));
        }
        let all = self.x1.iter().chain(&self.x).chain(self.y3.iter().flatten()).chain(self.y4.iter().flatten());
        if all.copied().any(f64::is_nan) {
            return Err(Error::Input("sample contains NaN".into()));
        }
        Ok(())
    }

    /// CSV with header `y1,y2,x1,x,y3,y4`; absent measurements are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y1,y2,x1,x,y3,y4\n");
        for i in 0..self.n {
            let m = |c: &Option<Vec<f64>>| c.as_ref().map(|v| format!("{}", v[i])).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", self.y1[i], self.y2[i], self.x1[i], self.x[i], m(&self.y3), m(&self.y4));
        }
        out
    }

    /// Rows `i` with both outcomes equal to `(a, b)`.
    pub fn cell_indicator(&self, a: u8, b: u8) -> Vec<f64> {
        self.y1.iter().zip(&self.y2).map(|(p, q)| if *p == a && *q == b { 1.0 } else { 0.0 }).collect()
    }
}

/// Draw `n` i.i.d. rows from `spec`, deterministically in `(spec, n, seed)`.
pub fn simulate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Sample> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let alpha = spec.theta.alpha;
    let gamma = spec.theta.gamma;
    let measured = spec.has_measurements();
    let mut s = Sample {
        y1: Vec::with_capacity(n),
        y2: Vec::with_capacity(n),
        x1: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        y3: measured.then(|| Vec::with_capacity(n)),
        y4: measured.then(|| Vec::with_capacity(n)),
        n,
        spec_fingerprint: spec.fingerprint(),
    };
    for _ in 0..n {
        let x1 = spec.x1_law.sample(&mut rng);
        let x = spec.x_law.sample(&mut rng);
        let (u, v) = match &spec.structure {
            Structure::OneFactor { v_law, pi_law } => {
                let v = v_law.sample(&mut rng);
                (gamma * v + pi_law.sample(&mut rng), v)
            }
            Structure::OneFactorImpostor { v_law, pi_law, steps } => {
                let v = v_law.sample(&mut rng);
                let u0 = gamma * v + pi_law.sample(&mut rng);
                (steps.iter().fold(u0, |u, st| st.apply(u)), v)
            }
            Structure::TwoFactor { w_law, eta1_law, eta2_law } => {
                let w = w_law.sample(&mut rng);
                (gamma * w + eta1_law.sample(&mut rng), w + eta2_law.sample(&mut rng))
            }
            Structure::TwoFactorMeasured { w_law, eta1_law, eta2_law, eta3_law, eta4_law, nu, sigma } => {
                let w = w_law.sample(&mut rng);
                let u = gamma * w + eta1_law.sample(&mut rng);
                let v = w + eta2_law.sample(&mut rng);
                let y3 = nu * w + eta3_law.sample(&mut rng);
                let y4 = sigma * w + eta4_law.sample(&mut rng);
                s.y3.as_mut().expect("measured").push(y3);
                s.y4.as_mut().expect("measured").push(y4);
                (u, v)
            }
            Structure::AltDgp1 => {
                let mix: f64 = rand_distr::Distribution::sample(&rand_distr::Exp1, &mut rng);
                let g1: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let g2: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let e1 = mix.sqrt() * g1;
                let e2 = mix.sqrt() * (ALT1_RHO * g1 + (1.0 - ALT1_RHO * ALT1_RHO).sqrt() * g2);
                let e3: f64 = rng.random();
                let e4: f64 = rng.random();
                (e2 + e4 - 0.5, e1 + e3 - 0.5)
            }
            Structure::AltDgp2 | Structure::AltDgp3 => {
                let e1: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let e2: f64 = rng.random();
                let e3: f64 = rng.random();
                if matches!(spec.structure, Structure::AltDgp2) {
                    (e1 + e2 - 0.5, e1 + e3 - 0.5)
                } else {
                    (((e1 + e3 - 0.5).exp() - 1.0) / 4.0, ((e1 + e2 - 0.5).exp() - 1.0) / 4.0)
                }
            }
            Structure::AltDgp4 => {
                let v = alt4_v_law().sample(&mut rng);
                let vp: f64 = rng.random();
                (v + vp - 0.5, v)
            }
            Structure::NonSeparable { v_law, pi_law, g0_knots, g0_values } => {
                let v = v_law.sample(&mut rng);
                (g0_eval(g0_knots, g0_values, v) + pi_law.sample(&mut rng), v)
            }
        };
        let y2 = u8::from(x - v >= 0.0);
        let y1 = u8::from(x1 + alpha * f64::from(y2) - u >= 0.0);
        s.y1.push(y1);
        s.y2.push(y2);
        s.x1.push(x1);
        s.x.push(x);
    }
    Ok(s)
}

/// `psi(z) = z*Phi(z) + phi(z)`, the antiderivative of `Phi`.
pub(crate) fn psi(z: f64) -> f64 {
    z * norm_cdf(z) + crate::dist::norm_pdf(z)
}
