//! Acquisition functions for target-value optimization.
//!
//! At a candidate `x` the surrogate gives `m̂(x) ~ N(μ, σ_e²)` and the
//! aleatoric model gives `σ_a²`. The normalized squared error
//! `e = ((m̂ − y•)²) / σ_e²` follows `NCχ²(1, λ)` with `λ = (μ − y•)² / σ_e²`,
//! and the expected squared error is `Ê = σ_e² e + σ_a²`.
//!
//! Robust rules compare `Ê` with `E_min = min_i (m(x_i) − y•)² + σ_a²(x_i)`.
//! Baselines either drop `σ_a²` entirely or fold it into the predictive
//! variance, and the Gaussian LCB pair treats the squared error as Gaussian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ncx2::{cdf_exact_k1, NoncentralChiSquare};
use crate::special::{norm_cdf, norm_pdf};

/// `σ_e²` is floored at this multiple of the signal variance.
pub const EPISTEMIC_FLOOR_FACTOR: f64 = 1e-12;

/// Above this non-centrality the K = 1 closed forms replace the Poisson
/// series; both agree to roundoff, the series just gets long.
const CLOSED_FORM_LAMBDA: f64 = 1e4;

/// EI and PoI values below this are reported as zero.
const FLUSH_BELOW: f64 = 1e-300;

/// Posterior summary at one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateState {
    pub mu: f64,
    pub epistemic_variance: f64,
    pub aleatoric_variance: f64,
    pub target: f64,
}

impl SurrogateState {
    /// Builds a state, flooring `σ_e²` at `floor` (must be positive).
    pub fn new(mu: f64, epistemic_variance: f64, aleatoric_variance: f64, target: f64, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::invalid("epistemic floor must be positive"));
        }
        if !mu.is_finite() || !target.is_finite() || !epistemic_variance.is_finite() || !aleatoric_variance.is_finite()
        {
            return Err(Error::invalid("surrogate state must be finite"));
        }
        if aleatoric_variance < 0.0 {
            return Err(Error::invalid("aleatoric variance must be non-negative"));
        }
        Ok(Self { mu, epistemic_variance: epistemic_variance.max(floor), aleatoric_variance, target })
    }

    fn bias_sq(&self) -> f64 {
        (self.mu - self.target).powi(2)
    }
}

/// Best evaluated point and its expected squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct Incumbent {
    pub e_min: f64,
    pub x_best: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaAMode {
    /// Aleatoric variance ignored everywhere.
    Zero,
    /// Aleatoric variance added to the predictive variance.
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcquisitionSpec {
    RobustPoi { zeta: f64 },
    RobustEi,
    RobustLcb { q: f64 },
    Ncx2Ei { mode: SigmaAMode },
    Ncx2Lcb { q: f64, mode: SigmaAMode },
    GaussianLcb { beta: f64 },
    RobustGaussianLcb { beta: f64 },
}

pub const DEFAULT_ZETA: f64 = 0.0;
pub const DEFAULT_Q: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 2.0;

/// Which incumbent an improvement-based rule compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncumbentKind {
    /// `min (m − y•)² + σ̂_a²`
    ExpectedError,
    /// `min (m − y•)²`
    SquaredError,
    None,
}

impl AcquisitionSpec {
    /// Parses a method name as used on the command line and in CSV output.
    pub fn from_name(name: &str, zeta: f64, q: f64, beta: f64) -> Result<Self> {
        let spec = match name {
            "robust-ncx2-poi" => Self::RobustPoi { zeta },
            "robust-ncx2-ei" => Self::RobustEi,
            "robust-ncx2-lcb" => Self::RobustLcb { q },
            "ncx2-ei" | "ncx2-ei-zero" => Self::Ncx2Ei { mode: SigmaAMode::Zero },
            "ncx2-ei-estimate" => Self::Ncx2Ei { mode: SigmaAMode::Estimate },
            "ncx2-lcb" | "ncx2-lcb-zero" => Self::Ncx2Lcb { q, mode: SigmaAMode::Zero },
            "ncx2-lcb-estimate" => Self::Ncx2Lcb { q, mode: SigmaAMode::Estimate },
            "gaussian-lcb" => Self::GaussianLcb { beta },
            "robust-gaussian-lcb" => Self::RobustGaussianLcb { beta },
            other => return Err(Error::invalid(format!("unknown acquisition '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RobustPoi { .. } => "robust-ncx2-poi",
            Self::RobustEi => "robust-ncx2-ei",
            Self::RobustLcb { .. } => "robust-ncx2-lcb",
            Self::Ncx2Ei { mode: SigmaAMode::Zero } => "ncx2-ei-zero",
            Self::Ncx2Ei { mode: SigmaAMode::Estimate } => "ncx2-ei-estimate",
            Self::Ncx2Lcb { mode: SigmaAMode::Zero, .. } => "ncx2-lcb-zero",
            Self::Ncx2Lcb { mode: SigmaAMode::Estimate, .. } => "ncx2-lcb-estimate",
            Self::GaussianLcb { .. } => "gaussian-lcb",
            Self::RobustGaussianLcb { .. } => "robust-gaussian-lcb",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::RobustPoi { zeta } if !(zeta >= 0.0) || !zeta.is_finite() => {
                Err(Error::invalid(format!("zeta must be >= 0, got {zeta}")))
            }
            Self::RobustLcb { q } | Self::Ncx2Lcb { q, .. } if !(q > 0.0 && q < 1.0) => {
                Err(Error::invalid(format!("q must lie in (0, 1), got {q}")))
            }
            Self::GaussianLcb { beta } | Self::RobustGaussianLcb { beta } if !(beta >= 0.0) || !beta.is_finite() => {
                Err(Error::invalid(format!("beta must be >= 0, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    /// LCB-type rules are minimized, the rest maximized.
    pub fn minimizes(&self) -> bool {
        matches!(
            self,
            Self::RobustLcb { .. } | Self::Ncx2Lcb { .. } | Self::GaussianLcb { .. } | Self::RobustGaussianLcb { .. }
        )
    }

    /// Whether the rule uses the aleatoric variance at all.
    pub fn is_robust(&self) -> bool {
        matches!(
            self,
            Self::RobustPoi { .. } | Self::RobustEi | Self::RobustLcb { .. } | Self::RobustGaussianLcb { .. }
        )
    }

    pub fn incumbent_kind(&self) -> IncumbentKind {
        match self {
            Self::RobustPoi { .. } | Self::RobustEi => IncumbentKind::ExpectedError,
            Self::Ncx2Ei { .. } => IncumbentKind::SquaredError,
            _ => IncumbentKind::None,
        }
    }

    /// Evaluates the rule. `e_min` is the incumbent named by [`Self::incumbent_kind`].
    pub fn score(&self, state: &SurrogateState, e_min: f64) -> Result<f64> {
        match *self {
            Self::RobustPoi { zeta } => robust_poi(state, e_min, zeta),
            Self::RobustEi => robust_ei(state, e_min),
            Self::RobustLcb { q } => robust_lcb(state, q),
            Self::Ncx2Ei { mode } => baseline_ncx2_ei(state, e_min, mode),
            Self::Ncx2Lcb { q, mode } => baseline_ncx2_lcb(state, q, mode),
            Self::GaussianLcb { beta } => gaussian_lcb(state, beta, false),
            Self::RobustGaussianLcb { beta } => gaussian_lcb(state, beta, true),
        }
    }
}

/// `λ = (μ − y•)² / σ_e²`.
pub fn noncentrality(state: &SurrogateState) -> f64 {
    state.bias_sq() / state.epistemic_variance
}

fn flush(v: f64) -> f64 {
    if v < FLUSH_BELOW {
        0.0
    } else {
        v
    }
}

/// `F_{1,λ}(e)`; the closed form takes over for large `λ`.
fn cdf_k1(lambda: f64, e: f64) -> Result<f64> {
    if lambda > CLOSED_FORM_LAMBDA {
        return Ok(cdf_exact_k1(lambda, e));
    }
    NoncentralChiSquare::new(1, lambda)?.cdf(e)
}

fn quantile_k1(lambda: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("q must lie in (0, 1), got {q}")));
    }
    if lambda <= CLOSED_FORM_LAMBDA {
        return NoncentralChiSquare::new(1, lambda)?.quantile(q);
    }
    let s = lambda.sqrt();
    let (mut lo, mut hi) = ((s - 40.0).max(0.0).powi(2), (s + 40.0).powi(2));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf_exact_k1(lambda, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `E[max(0, c − e)]` for `e ~ NCχ²(1, λ)`, `c > 0`:
/// `c F_{1,λ}(c) − F_{3,λ}(c) − λ F_{5,λ}(c)`.
fn normalized_ei(lambda: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Ok(0.0);
    }
    if lambda > CLOSED_FORM_LAMBDA {
        return Ok(gaussian_moment_ei(lambda, c));
    }
    let f1 = NoncentralChiSquare::new(1, lambda)?.cdf(c)?;
    let f3 = NoncentralChiSquare::new(3, lambda)?.cdf(c)?;
    let f5 = NoncentralChiSquare::new(5, lambda)?.cdf(c)?;
    Ok((c * f1 - f3 - lambda * f5).max(0.0))
}

// Same expectation written over e = (Z + √λ)², Z ~ N(0,1).
fn gaussian_moment_ei(lambda: f64, c: f64) -> f64 {
    let s = lambda.sqrt();
    let r = c.sqrt();
    let (a, b) = (-r - s, r - s);
    let mass = norm_cdf(b) - norm_cdf(a);
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    let second = mass + a * pa - b * pb;
    ((c - s * s) * mass - 2.0 * s * (pa - pb) - second).max(0.0)
}

/// Probability that `Ê(x) ≤ E_min − ζ`.
pub fn robust_poi(state: &SurrogateState, e_min: f64, zeta: f64) -> Result<f64> {
    if !(zeta >= 0.0) {
        return Err(Error::invalid(format!("zeta must be >= 0, got {zeta}")));
    }
    let arg = (e_min - zeta - state.aleatoric_variance) / state.epistemic_variance;
    if !(arg > 0.0) {
        return Ok(0.0);
    }
    Ok(flush(cdf_k1(noncentrality(state), arg)?.clamp(0.0, 1.0)))
}

/// `E[max(0, E_min − Ê(x))]` in closed form.
pub fn robust_ei(state: &SurrogateState, e_min: f64) -> Result<f64> {
    let v = state.epistemic_variance;
    let c = (e_min - state.aleatoric_variance) / v;
    Ok(flush(v * normalized_ei(noncentrality(state), c)?))
}

/// `σ_e² F⁻¹_{1,λ}(q) + σ_a²`; lower is better.
pub fn robust_lcb(state: &SurrogateState, q: f64) -> Result<f64> {
    let v = state.epistemic_variance;
    Ok(v * quantile_k1(noncentrality(state), q)? + state.aleatoric_variance)
}

fn predictive_variance(state: &SurrogateState, mode: SigmaAMode) -> f64 {
    match mode {
        SigmaAMode::Zero => state.epistemic_variance,
        SigmaAMode::Estimate => state.epistemic_variance + state.aleatoric_variance,
    }
}

/// Non-robust chi-square EI against a pure squared-error incumbent.
pub fn baseline_ncx2_ei(state: &SurrogateState, e_min_squared_error: f64, mode: SigmaAMode) -> Result<f64> {
    let v = predictive_variance(state, mode);
    let lambda = state.bias_sq() / v;
    Ok(flush(v * normalized_ei(lambda, e_min_squared_error / v)?))
}

/// Non-robust chi-square LCB: the `q`-quantile of the squared error alone.
pub fn baseline_ncx2_lcb(state: &SurrogateState, q: f64, mode: SigmaAMode) -> Result<f64> {
    let v = predictive_variance(state, mode);
    Ok(v * quantile_k1(state.bias_sq() / v, q)?)
}

/// Gaussian confidence bounds on the squared error; lower is better.
///
/// Non-robust: `(μ − y•)² − β √(σ_e² + σ_a²)`.
/// Robust: `(μ − y•)² + σ_a² − β √σ_e²`.
pub fn gaussian_lcb(state: &SurrogateState, beta: f64, robust: bool) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    let d2 = state.bias_sq();
    Ok(if robust {
        d2 + state.aleatoric_variance - beta * state.epistemic_variance.sqrt()
    } else {
        d2 - beta * (state.epistemic_variance + state.aleatoric_variance).sqrt()
    })
}
