//! Estimation output shared by all estimators.

use serde::{Deserialize, Serialize};

use crate::dgp_oracle::Theta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Rank,
    RankInfeasible,
    Wls,
    Series,
    Vy,
    Deconvolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReportFlag {
    /// The maximizer touches the edge of the parameter box.
    BoundaryMaximizer,
    /// Only a random subset of pairs entered the objective.
    PairSubsample { pairs: usize },
    /// The density floor was hit while evaluating ratios.
    DensityClamped { count: usize },
    /// `Y2` is constant in the sample.
    DegenerateTreatment,
    /// The polished point scored below the grid maximizer and was discarded.
    PolishRejected,
    /// Observations inside the trimming box whose local fit failed.
    DroppedObservations { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolishStep {
    pub evaluation: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub surrogate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    /// Observations that survived trimming.
    pub n_trimmed: usize,
    pub trim_fraction: f64,
    pub pairs: usize,
    /// `sum(w) / max(w)` for weighted estimators.
    pub effective_pairs: Option<f64>,
    pub condition_number: Option<f64>,
    pub grid_argmax: Option<[f64; 2]>,
    /// Grid points whose objective is within one pair of the maximum.
    pub tie_set: Vec<[f64; 2]>,
    pub polish_trace: Vec<PolishStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub objective: Option<f64>,
    /// Covariance of `(alpha, gamma)`.
    pub variance: Option<[[f64; 2]; 2]>,
    /// Full coefficient vector, e.g. `(alpha, c_1, .., c_k)` for the series estimator.
    pub coefficients: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub flags: Vec<ReportFlag>,
}

impl EstimateReport {
    pub fn new(estimator: EstimatorKind, alpha: f64, gamma: Option<f64>) -> Self {
        Self {
            estimator,
            alpha,
            gamma,
            objective: None,
            variance: None,
            coefficients: Vec::new(),
            diagnostics: Diagnostics::default(),
            flags: Vec::new(),
        }
    }

    pub fn theta(&self) -> Theta {
        Theta::condensed(self.alpha, self.gamma.unwrap_or(f64::NAN))
    }

    pub fn has_flag(&self, f: &ReportFlag) -> bool {
        self.flags.iter().any(|g| std::mem::discriminant(g) == std::mem::discriminant(f))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Half-width of a normal confidence interval for alpha.
    pub fn alpha_ci_halfwidth(&self, z: f64) -> Option<f64> {
        self.variance.map(|v| z * v[0][0].max(0.0).sqrt())
    }
}
