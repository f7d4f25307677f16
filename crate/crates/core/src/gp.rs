//! Exact zero-mean Gaussian-process regression with an RBF kernel.
//!
//! Posterior moments at `x`:
//! `μ(x) = k(x)ᵀ (K + σ²I)⁻¹ m` and `σ_e²(x) = k(x,x) − k(x)ᵀ (K + σ²I)⁻¹ k(x)`,
//! where `σ²` is the diagonal jitter. With noise-free targets and a tiny
//! jitter the posterior interpolates the data and the epistemic variance
//! vanishes at training inputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default diagonal jitter for noise-free data.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Inputs closer than this are treated as duplicates.
pub const DUPLICATE_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, jitter: f64) -> Result<Self> {
        let p = Self { lengthscales, signal_variance, jitter };
        p.validate()?;
        Ok(p)
    }

    /// Same lengthscale in every dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64, jitter: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], signal_variance, jitter)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lengthscales must be positive and finite"));
        }
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return Err(Error::invalid("signal variance must be positive and finite"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::invalid("jitter must be non-negative and finite"));
        }
        Ok(())
    }
}

/// `σ_f² exp(−½ Σ_d ((x_d − x'_d)/ℓ_d)²)`.
pub fn kernel_eval(params: &KernelParams, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != params.dim() || y.len() != params.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: kernel has {} dims, got {} and {}",
            params.dim(),
            x.len(),
            y.len()
        )));
    }
    Ok(rbf(params, x, y))
}

#[inline]
fn rbf(params: &KernelParams, x: &[f64], y: &[f64]) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(y)
        .zip(&params.lengthscales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    params.signal_variance * (-0.5 * r2).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Noise-free design/target pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    dim: usize,
}

impl TrainingSet {
    pub fn empty(dim: usize) -> Self {
        Self { inputs: Vec::new(), targets: Vec::new(), dim }
    }

    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::invalid(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        let dim = inputs.first().map(Vec::len).unwrap_or(0);
        let mut set = Self::empty(dim);
        for (x, y) in inputs.into_iter().zip(targets) {
            set.push(x, y)?;
        }
        Ok(set)
    }

    /// Appends a point, rejecting duplicates and non-finite values.
    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if self.inputs.is_empty() && self.dim == 0 {
            self.dim = x.len();
        }
        if x.len() != self.dim || self.dim == 0 {
            return Err(Error::invalid(format!("input has {} dims, training set has {}", x.len(), self.dim)));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("training data must be finite"));
        }
        if self.inputs.iter().any(|xi| distance(xi, &x) < DUPLICATE_DISTANCE) {
            return Err(Error::invalid(format!("duplicate training input {x:?}")));
        }
        self.inputs.push(x);
        self.targets.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Copy with every target shifted by `-offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        Self { inputs: self.inputs.clone(), targets: self.targets.iter().map(|y| y - offset).collect(), dim: self.dim }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub epistemic_variance: f64,
    /// Set when the raw variance came out negative and was clamped to zero.
    pub variance_clamped: bool,
}

/// A fitted, immutable GP posterior.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    params: KernelParams,
    training: TrainingSet,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn gram(params: &KernelParams, inputs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| {
        let k = rbf(params, &inputs[i], &inputs[j]);
        if i == j {
            k + params.jitter
        } else {
            k
        }
    })
}

/// Factorizes `K + σ²I` and solves for the weight vector.
pub fn fit(training: &TrainingSet, params: &KernelParams) -> Result<GpSurrogate> {
    params.validate()?;
    if training.is_empty() {
        return Err(Error::invalid("cannot fit a GP to an empty training set"));
    }
    if training.dim() != params.dim() {
        return Err(Error::invalid(format!("training set has {} dims, kernel has {}", training.dim(), params.dim())));
    }
    let k = gram(params, training.inputs());
    let chol = k.cholesky().ok_or_else(|| {
        Error::numerical(format!(
            "kernel matrix is not positive definite at jitter {:e}; increase the jitter",
            params.jitter
        ))
    })?;
    let alpha = chol.solve(&DVector::from_column_slice(training.targets()));
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::numerical("GP weights are not finite; increase the jitter"));
    }
    Ok(GpSurrogate { params: params.clone(), training: training.clone(), chol, alpha })
}

impl GpSurrogate {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.params.dim() {
            return Err(Error::invalid(format!("query has {} dims, surrogate has {}", x.len(), self.params.dim())));
        }
        Ok(())
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.training.len(), self.training.inputs().iter().map(|xi| rbf(&self.params, xi, x)))
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictiveMoments> {
        self.check_dim(x)?;
        let kx = self.cross_cov(x);
        let mean = kx.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kx)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let raw = self.params.signal_variance - v.dot(&v);
        Ok(PredictiveMoments { mean, epistemic_variance: raw.max(0.0), variance_clamped: raw < 0.0 })
    }

    /// Gradient of the posterior mean, `Σ_i α_i k(x, x_i) (x_i − x) / ℓ²`.
    pub fn mean_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut grad = vec![0.0; x.len()];
        for (xi, a) in self.training.inputs().iter().zip(self.alpha.iter()) {
            let w = a * rbf(&self.params, xi, x);
            for ((g, (p, q)), l) in grad.iter_mut().zip(xi.iter().zip(x)).zip(&self.params.lengthscales) {
                *g += w * (p - q) / (l * l);
            }
        }
        Ok(grad)
    }

    /// Log marginal likelihood of the training targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.training.len() as f64;
        let m = DVector::from_column_slice(self.training.targets());
        let fit = -0.5 * m.dot(&self.alpha);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        fit - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Box bounds and multi-start settings for maximum-likelihood refits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterBounds {
    pub lengthscale: (f64, f64),
    pub signal_variance: (f64, f64),
    /// One lengthscale per dimension when true, a shared one otherwise.
    pub ard: bool,
    pub starts: usize,
    pub seed: u64,
}

impl Default for HyperparameterBounds {
    fn default() -> Self {
        Self { lengthscale: (0.05, 20.0), signal_variance: (1e-3, 1e3), ard: false, starts: 16, seed: 0 }
    }
}

impl HyperparameterBounds {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !ok(self.lengthscale) || !ok(self.signal_variance) || self.starts == 0 {
            return Err(Error::invalid("hyperparameter search space is empty"));
        }
        Ok(())
    }
}

/// Maximizes the log marginal likelihood of the mean-centred targets.
///
/// Random log-uniform starts followed by a compass search in log space.
/// The jitter is held fixed at `jitter`.
pub fn fit_hyperparameters(training: &TrainingSet, bounds: &HyperparameterBounds, jitter: f64) -> Result<KernelParams> {
    bounds.validate()?;
    if training.len() < 2 {
        return Err(Error::invalid("hyperparameter fit needs at least two points"));
    }
    let centre = training.targets().iter().sum::<f64>() / training.len() as f64;
    let centred = training.shifted(centre);
    let dim = training.dim();
    let n_ls = if bounds.ard { dim } else { 1 };

    let lo: Vec<f64> = std::iter::repeat_n(bounds.lengthscale.0.ln(), n_ls)
        .chain(std::iter::once(bounds.signal_variance.0.ln()))
        .collect();
    let hi: Vec<f64> = std::iter::repeat_n(bounds.lengthscale.1.ln(), n_ls)
        .chain(std::iter::once(bounds.signal_variance.1.ln()))
        .collect();

    let to_params = |theta: &[f64]| -> KernelParams {
        let ls = if bounds.ard { theta[..dim].iter().map(|t| t.exp()).collect() } else { vec![theta[0].exp(); dim] };
        KernelParams { lengthscales: ls, signal_variance: theta[n_ls].exp(), jitter }
    };
    let objective = |theta: &[f64]| -> f64 {
        fit(&centred, &to_params(theta))
            .map(|gp| gp.log_marginal_likelihood())
            .ok()
            .filter(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(bounds.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..bounds.starts {
        let mut theta: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect();
        let mut value = objective(&theta);
        let mut step = 1.0;
        while step > 1e-3 {
            let mut improved = false;
            for d in 0..theta.len() {
                for sign in [1.0, -1.0] {
                    let mut cand = theta.clone();
                    cand[d] = (cand[d] + sign * step).clamp(lo[d], hi[d]);
                    let v = objective(&cand);
                    if v > value {
                        theta = cand;
                        value = v;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if value.is_finite() && best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, theta));
        }
    }
    let (_, theta) = best.ok_or_else(|| Error::numerical("no hyperparameter candidate had a finite likelihood"))?;
    Ok(to_params(&theta))
}
