use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp_oracle::Theta;
use crate::error::{Error, Result};

/// Two covariate points whose normalized derivative ratios cancel.
///
/// `z1[0]` is the coordinate of `Z1` whose coefficient is normalized to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub z1: Vec<f64>,
    pub z3: Vec<f64>,
    pub x: f64,
    pub z1_tilde: Vec<f64>,
    pub z3_tilde: Vec<f64>,
    pub x_tilde: f64,
}

impl MatchedPair {
    /// Condensed model: `Z1 = X1` scalar, no `Z3`.
    pub fn condensed(x1: f64, x: f64, x1_tilde: f64, x_tilde: f64) -> Self {
        Self { z1: vec![x1], z3: vec![], x, z1_tilde: vec![x1_tilde], z3_tilde: vec![], x_tilde }
    }

    /// Fill in `z1_tilde[0]` so that the pair lies exactly on the matching set of `theta`.
    pub fn completed(theta: &Theta, z1: Vec<f64>, z3: Vec<f64>, x: f64, z1_tilde_rest: Vec<f64>, z3_tilde: Vec<f64>, x_tilde: f64) -> Result<Self> {
        if z1.len() != theta.lambda_rest.len() + 1 || z1_tilde_rest.len() != theta.lambda_rest.len() || z3.len() != theta.beta.len() || z3_tilde.len() != theta.beta.len() {
            return Err(Error::Input("pair dimensions do not match theta".into()));
        }
        let mut idx = z1[0] + theta.alpha - theta.gamma * (x - x_tilde);
        for k in 0..theta.lambda_rest.len() {
            idx += (z1[k + 1] - z1_tilde_rest[k]) * theta.lambda_rest[k];
        }
        for k in 0..theta.beta.len() {
            idx += (z3[k] - z3_tilde[k]) * theta.beta[k];
        }
        let mut z1_tilde = vec![idx];
        z1_tilde.extend(z1_tilde_rest);
        Ok(Self { z1, z3, x, z1_tilde, z3_tilde, x_tilde })
    }

    pub(crate) fn dims(&self) -> (usize, usize) {
        (self.z1.len(), self.z3.len())
    }

    /// Row `(1, dz1_rest, dz3, dx)` of the rank matrix and the right-hand side `z1~_1 - z1_1`.
    pub(crate) fn row(&self) -> (Vec<f64>, f64) {
        let mut r = vec![1.0];
        r.extend(self.z1.iter().zip(&self.z1_tilde).skip(1).map(|(a, b)| a - b));
        r.extend(self.z3.iter().zip(&self.z3_tilde).map(|(a, b)| a - b));
        r.push(self.x - self.x_tilde);
        (r, self.z1_tilde[0] - self.z1[0])
    }
}

/// Square matrix whose columns are the pair differences `(1, dz1_rest, dz3, dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankConditionInput {
    pub m: DMatrix<f64>,
}

impl RankConditionInput {
    pub fn from_pairs(pairs: &[MatchedPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Input("no matched pairs".into()))?;
        let (d1, d3) = first.dims();
        if d1 == 0 {
            return Err(Error::Input("Z1 needs at least the normalized coordinate".into()));
        }
        let d = d1 + d3 + 1;
        if pairs.len() != d {
            return Err(Error::Input(format!("need exactly d = {d} pairs, got {}", pairs.len())));
        }
        let mut m = DMatrix::zeros(d, d);
        for (l, p) in pairs.iter().enumerate() {
            if p.dims() != (d1, d3) || p.z1_tilde.len() != d1 || p.z3_tilde.len() != d3 {
                return Err(Error::Input(format!("pair {l} has inconsistent dimensions")));
            }
            let (r, _) = p.row();
            for (k, v) in r.into_iter().enumerate() {
                m[(k, l)] = v;
            }
        }
        Ok(Self { m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub full_rank: bool,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
}

/// Full rank iff the smallest singular value exceeds `tol` times the largest.
pub fn check_rank_condition(input: &RankConditionInput, tol: f64) -> Result<RankCheck> {
    let m = &input.m;
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Input(format!("rank matrix must be square and nonempty, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("rank matrix has non-finite entries".into()));
    }
    let sv = m.clone().singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    Ok(RankCheck { full_rank: hi > 0.0 && lo > tol * hi, smallest_singular_value: lo, largest_singular_value: hi })
}

/// Relative singular-value tolerance used by [`solve_theta_linear_system`].
pub const RANK_TOL: f64 = 1e-10;

/// Solve `alpha + dz1_rest' lambda_rest + dz3' beta - gamma dx = z1~_1 - z1_1`
/// over `d` matched pairs.
pub fn solve_theta_linear_system(pairs: &[MatchedPair]) -> Result<Theta> {
    let input = RankConditionInput::from_pairs(pairs)?;
    let check = check_rank_condition(&input, RANK_TOL)?;
    if !check.full_rank {
        return Err(Error::RankDeficient(format!(
            "pair matrix has singular values in [{:e}, {:e}]",
            check.smallest_singular_value, check.largest_singular_value
        )));
    }
    let d = input.m.nrows();
    let mut a = input.m.transpose();
    for l in 0..d {
        a[(l, d - 1)] = -a[(l, d - 1)];
    }
    let rhs = DVector::from_iterator(d, pairs.iter().map(|p| p.row().1));
    let sol = a.lu().solve(&rhs).ok_or_else(|| Error::RankDeficient("pair system is singular".into()))?;
    Ok(Theta::from_system_vec(sol.as_slice(), pairs[0].z1.len() - 1))
}
