//! Aleatoric variance models `σ̂_a²(x)`.
//!
//! Three regimes are supported: a known constant, input noise pushed through
//! the GP mean by first-order Taylor expansion, and kernel ridge regression
//! on empirical replicate variances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::{kernel_eval, GpSurrogate, KernelParams};

#[derive(Debug, Clone)]
pub enum AleatoricModel {
    Constant(f64),
    InputNoiseTaylor { sigma_u_sq: f64, surrogate: Arc<GpSurrogate> },
    LearnedKrr(KrrModel),
}

impl AleatoricModel {
    pub fn constant(sigma_a_sq: f64) -> Result<Self> {
        if !(sigma_a_sq >= 0.0) || !sigma_a_sq.is_finite() {
            return Err(Error::invalid(format!("aleatoric variance must be >= 0, got {sigma_a_sq}")));
        }
        Ok(Self::Constant(sigma_a_sq))
    }

    pub fn input_noise(surrogate: Arc<GpSurrogate>, sigma_u_sq: f64) -> Result<Self> {
        if !(sigma_u_sq >= 0.0) || !sigma_u_sq.is_finite() {
            return Err(Error::invalid(format!("input noise variance must be >= 0, got {sigma_u_sq}")));
        }
        Ok(Self::InputNoiseTaylor { sigma_u_sq, surrogate })
    }

    pub fn variance(&self, x: &[f64]) -> Result<f64> {
        match self {
            Self::Constant(v) => Ok(*v),
            Self::InputNoiseTaylor { sigma_u_sq, surrogate } => taylor_propagate(surrogate, *sigma_u_sq, x),
            Self::LearnedKrr(m) => m.predict(x),
        }
    }
}

/// First-order propagation of isotropic input noise: `σ_u² |∇μ(x)|²`.
pub fn taylor_propagate(surrogate: &GpSurrogate, sigma_u_sq: f64, x: &[f64]) -> Result<f64> {
    if sigma_u_sq == 0.0 {
        return Ok(0.0);
    }
    let g = surrogate.mean_gradient(x)?;
    Ok(sigma_u_sq * g.iter().map(|v| v * v).sum::<f64>())
}

/// Kernel ridge regression in dual form, predictions clamped at zero.
#[derive(Debug, Clone)]
pub struct KrrModel {
    inputs: Vec<Vec<f64>>,
    dual_weights: Vec<f64>,
    kernel: KernelParams,
    ridge: f64,
}

/// Ridge used when none is configured: `1e-6 · n`.
pub fn default_ridge(n: usize) -> f64 {
    1e-6 * n as f64
}

/// Solves `(K + ridge·I) w = v`.
pub fn krr_fit(
    inputs: &[Vec<f64>],
    empirical_variances: &[f64],
    kernel: &KernelParams,
    ridge: f64,
) -> Result<KrrModel> {
    kernel.validate()?;
    if inputs.len() != empirical_variances.len() || inputs.is_empty() {
        return Err(Error::invalid(format!(
            "KRR needs matching non-empty inputs and targets, got {} and {}",
            inputs.len(),
            empirical_variances.len()
        )));
    }
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    if empirical_variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("empirical variances must be finite and non-negative"));
    }
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(kernel, &inputs[i], &inputs[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += ridge;
    }
    let chol = k.cholesky().ok_or_else(|| Error::numerical("KRR system is singular; increase the ridge"))?;
    let w = chol.solve(&DVector::from_column_slice(empirical_variances));
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("KRR dual weights are not finite"));
    }
    Ok(KrrModel { inputs: inputs.to_vec(), dual_weights: w.iter().copied().collect(), kernel: kernel.clone(), ridge })
}

impl KrrModel {
    pub fn dual_weights(&self) -> &[f64] {
        &self.dual_weights
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `max(0, k(x)ᵀ w)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (xi, w) in self.inputs.iter().zip(&self.dual_weights) {
            s += w * kernel_eval(&self.kernel, xi, x)?;
        }
        Ok(s.max(0.0))
    }
}

/// Unbiased sample variance.
pub fn empirical_variance(replicates: &[f64]) -> Result<f64> {
    let n = replicates.len();
    if n < 2 {
        return Err(Error::invalid(format!("sample variance needs at least 2 replicates, got {n}")));
    }
    let mean = replicates.iter().sum::<f64>() / n as f64;
    Ok(replicates.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
}
