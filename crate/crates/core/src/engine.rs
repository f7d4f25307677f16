//! Optimization loop and multi-seed experiment driver.
//!
//! Every run draws its initial design and its observation noise from two
//! separate ChaCha streams keyed by the run seed, so all methods started from
//! the same seed share the same initial design and see the same noise
//! sequence. The trace records ground-truth quantities (`m(x)`, `σ_a²(x)`),
//! while the surrogates only see what the method is allowed to observe.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionSpec, IncumbentKind, SurrogateState, EPISTEMIC_FLOOR_FACTOR};
use crate::aleatoric::{default_ridge, empirical_variance, krr_fit, AleatoricModel};
use crate::error::{Error, Result};
use crate::gp::{
    fit, fit_hyperparameters, GpSurrogate, HyperparameterBounds, KernelParams, TrainingSet, DEFAULT_JITTER,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Checked-in generator constants for the synthetic pool experiment.
pub const SYNTHETIC_POOL_JSON: &str = include_str!("../../../configs/exp3_synthetic_pool.json");

const DESIGN_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Exp1,
    Exp2,
    Exp3,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Exp1 => "exp1",
            Self::Exp2 => "exp2",
            Self::Exp3 => "exp3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(Self::Exp1),
            "exp2" => Ok(Self::Exp2),
            "exp3" => Ok(Self::Exp3),
            other => Err(Error::invalid(format!("unknown experiment '{other}' (expected exp1, exp2 or exp3)"))),
        }
    }
}

/// `f(x) = q(x−2)³ + p/((x−3)² + r²) + s·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeFunction {
    pub q: f64,
    pub p: f64,
    pub r: f64,
    pub s: f64,
    pub t: f64,
}

impl Default for CompositeFunction {
    fn default() -> Self {
        Self { q: 50.0, p: -1.0, r: 0.1, s: 2.0, t: -3.5 }
    }
}

impl CompositeFunction {
    pub fn eval(&self, x: f64) -> f64 {
        self.q * (x - 2.0).powi(3) + self.p / ((x - 3.0).powi(2) + self.r * self.r) + self.s * x + self.t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunctionSpec {
    /// `y = sin(x) + η` with `η ~ N(0, σ_a²)`.
    Sine { lower: f64, upper: f64, sigma_a: f64 },
    /// `y = f(x + η)` with `η ~ N(0, σ_u²)`; `sigma_u` is in units of the
    /// domain width.
    Composite { function: CompositeFunction, lower: f64, upper: f64, sigma_u: f64, quadrature_nodes: usize },
    /// Finite pool of 5-D points with replicate observations.
    SyntheticPool { generator: PoolGenerator },
}

impl TestFunctionSpec {
    pub fn sine(sigma_a: f64) -> Self {
        Self::Sine { lower: -std::f64::consts::FRAC_PI_2, upper: std::f64::consts::FRAC_PI_2, sigma_a }
    }

    pub fn composite(sigma_u: f64) -> Self {
        Self::Composite {
            function: CompositeFunction::default(),
            lower: 1.8,
            upper: 2.5,
            sigma_u,
            quadrature_nodes: 64,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Sine { .. } | Self::Composite { .. } => 1,
            Self::SyntheticPool { generator } => generator.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let interval = |lower: f64, upper: f64| {
            if lower.is_finite() && upper.is_finite() && lower < upper {
                Ok(())
            } else {
                Err(Error::invalid(format!("function.lower/upper must satisfy lower < upper, got [{lower}, {upper}]")))
            }
        };
        match self {
            Self::Sine { lower, upper, sigma_a } => {
                interval(*lower, *upper)?;
                if !(*sigma_a >= 0.0) || !sigma_a.is_finite() {
                    return Err(Error::invalid(format!("function.sigma_a must be >= 0, got {sigma_a}")));
                }
                Ok(())
            }
            Self::Composite { lower, upper, sigma_u, quadrature_nodes, function } => {
                interval(*lower, *upper)?;
                if !(*sigma_u >= 0.0) || !sigma_u.is_finite() {
                    return Err(Error::invalid(format!("function.sigma_u must be >= 0, got {sigma_u}")));
                }
                if *quadrature_nodes < 2 {
                    return Err(Error::invalid("function.quadrature_nodes must be >= 2"));
                }
                if !(function.r != 0.0)
                    || ![function.q, function.p, function.r, function.s, function.t].iter().all(|v| v.is_finite())
                {
                    return Err(Error::invalid("function coefficients must be finite with r != 0"));
                }
                Ok(())
            }
            Self::SyntheticPool { generator } => generator.validate(),
        }
    }
}

/// `offset + slope·x + Σ_d curvature_d (x_d − ½)² + height·exp(−Σ_d (x_d − center_d)² / (2 width_d²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFunction {
    pub offset: f64,
    pub slope: Vec<f64>,
    pub curvature: Vec<f64>,
    pub bump_height: f64,
    pub bump_center: Vec<f64>,
    pub bump_widths: Vec<f64>,
}

/// `floor + height·exp(−Σ_d (x_d − center_d)² / (2 width_d²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceFunction {
    pub floor: f64,
    pub height: f64,
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
}

fn bump(x: &[f64], center: &[f64], widths: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(center).zip(widths).map(|((a, b), w)| ((a - b) / w).powi(2)).sum();
    (-0.5 * r2).exp()
}

impl MeanFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let linear: f64 = self.slope.iter().zip(x).map(|(a, b)| a * b).sum();
        let quad: f64 = self.curvature.iter().zip(x).map(|(c, v)| c * (v - 0.5) * (v - 0.5)).sum();
        self.offset + linear + quad + self.bump_height * bump(x, &self.bump_center, &self.bump_widths)
    }
}

impl VarianceFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.floor + self.height * bump(x, &self.center, &self.widths)
    }
}

/// Parameters of the synthetic heteroskedastic pool on `[0, 1]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolGenerator {
    pub size: usize,
    pub dim: usize,
    pub replicates: usize,
    pub mean: MeanFunction,
    pub variance: VarianceFunction,
    /// The low-variance target is the mean at this point; the high-variance
    /// target is the mean at the variance peak.
    pub low_target_point: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolTarget {
    Low,
    High,
}

impl PoolTarget {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::High => "high",
        }
    }
}

impl PoolGenerator {
    /// The checked-in generator.
    pub fn synthetic() -> Self {
        serde_json::from_str(SYNTHETIC_POOL_JSON).expect("checked-in pool generator parses")
    }

    pub fn target(&self, which: PoolTarget) -> f64 {
        match which {
            PoolTarget::Low => self.mean.eval(&self.low_target_point),
            PoolTarget::High => self.mean.eval(&self.variance.center),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 10 {
            return Err(Error::invalid(format!("pool size must be >= 10, got {}", self.size)));
        }
        if self.replicates < 2 {
            return Err(Error::invalid("pool replicates must be >= 2"));
        }
        let d = self.dim;
        let lens = [
            self.mean.slope.len(),
            self.mean.curvature.len(),
            self.mean.bump_center.len(),
            self.mean.bump_widths.len(),
            self.variance.center.len(),
            self.variance.widths.len(),
            self.low_target_point.len(),
        ];
        if d == 0 || lens.iter().any(|&l| l != d) {
            return Err(Error::invalid(format!("pool generator vectors must all have length dim = {d}")));
        }
        if self.mean.bump_widths.iter().chain(&self.variance.widths).any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("pool generator widths must be positive"));
        }
        if !(self.variance.floor > 0.0) || !(self.variance.height >= 0.0) {
            return Err(Error::invalid("pool variance needs floor > 0 and height >= 0"));
        }
        Ok(())
    }
}

/// Points, true moments and replicate observations of a synthetic pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub inputs: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub replicates: Vec<Vec<f64>>,
}

/// Draws a pool uniformly on `[0, 1]^dim` with Gaussian replicates.
pub fn synthesize_pool(generator: &PoolGenerator, seed: u64) -> Result<Pool> {
    generator.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Pool { inputs: Vec::new(), means: Vec::new(), variances: Vec::new(), replicates: Vec::new() };
    for _ in 0..generator.size {
        let x: Vec<f64> = (0..generator.dim).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let m = generator.mean.eval(&x);
        let v = generator.variance.eval(&x);
        let sd = v.sqrt();
        let reps = (0..generator.replicates)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + sd * z
            })
            .collect();
        pool.inputs.push(x);
        pool.means.push(m);
        pool.variances.push(v);
        pool.replicates.push(reps);
    }
    Ok(pool)
}

/// `E = (m − y•)² + σ_a²`.
pub fn expected_error(m_x: f64, target: f64, sigma_a_sq: f64) -> f64 {
    (m_x - target).powi(2) + sigma_a_sq
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateVariant {
    Grid { lower: f64, upper: f64, count: usize },
    Pool,
}

/// Finite candidate set; evaluated candidates are consumed and never offered again.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    variant: CandidateVariant,
    points: Vec<Vec<f64>>,
    consumed: Vec<bool>,
}

impl CandidateSet {
    /// `count` evenly spaced points on `[lower, upper]`, endpoints included.
    pub fn grid(lower: f64, upper: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 points, got {count}")));
        }
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::invalid(format!("grid bounds must satisfy lower < upper, got [{lower}, {upper}]")));
        }
        let step = (upper - lower) / (count - 1) as f64;
        let points = (0..count).map(|i| vec![if i + 1 == count { upper } else { lower + step * i as f64 }]).collect();
        Ok(Self { variant: CandidateVariant::Grid { lower, upper, count }, points, consumed: vec![false; count] })
    }

    pub fn pool(points: Vec<Vec<f64>>) -> Result<Self> {
        for i in 0..points.len() {
            for j in 0..i {
                let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2.sqrt() < crate::gp::DUPLICATE_DISTANCE {
                    return Err(Error::invalid(format!("pool entries {j} and {i} coincide")));
                }
            }
        }
        let n = points.len();
        Ok(Self { variant: CandidateVariant::Pool, points, consumed: vec![false; n] })
    }

    pub fn variant(&self) -> &CandidateVariant {
        &self.variant
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn is_consumed(&self, i: usize) -> bool {
        self.consumed[i]
    }

    pub fn remaining(&self) -> usize {
        self.consumed.iter().filter(|c| !**c).count()
    }

    pub fn available(&self) -> impl Iterator<Item = usize> + '_ {
        self.consumed.iter().enumerate().filter(|(_, c)| !**c).map(|(i, _)| i)
    }

    pub fn consume(&mut self, i: usize) -> Result<()> {
        match self.consumed.get_mut(i) {
            None => Err(Error::invalid(format!("candidate index {i} out of range"))),
            Some(true) => Err(Error::invalid(format!("candidate {i} was already drawn"))),
            Some(c) => {
                *c = true;
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDesign {
    /// Two distinct candidates drawn uniformly.
    RandomPair,
    /// The candidates nearest to the lowest and highest corner of the bounding box.
    ExtremeCorners,
}

/// Everything that affects a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub function: TestFunctionSpec,
    pub target: f64,
    pub acquisition: AcquisitionSpec,
    /// Optimization steps after the initial design; pool runs stop early on exhaustion.
    pub iterations: usize,
    pub seeds: usize,
    pub base_seed: u64,
    /// Number of grid candidates (grid experiments only).
    pub grid_size: usize,
    pub initial_design: InitialDesign,
    pub kernel: KernelParams,
    pub refit_hyperparameters: bool,
    pub hyperparameter_bounds: HyperparameterBounds,
    /// Subtract the mean training target before fitting the zero-mean GP.
    pub center_targets: bool,
    /// Non-robust methods on the sine problem fit noisy draws with noise
    /// variance `σ_a²` instead of noise-free means.
    pub noisy_baseline_training: bool,
    /// `σ_e²` floor as a multiple of the signal variance.
    pub epistemic_floor_factor: f64,
    /// Ridge for the variance model; `None` uses `1e-6·n`.
    pub krr_ridge: Option<f64>,
}

pub const DEFAULT_SIGMA_A: f64 = 0.1;
pub const DEFAULT_SIGMA_U: f64 = 0.02;

impl ExperimentConfig {
    pub fn exp1(sigma_a: f64, acquisition: AcquisitionSpec) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            experiment: ExperimentKind::Exp1,
            function: TestFunctionSpec::sine(sigma_a),
            target: 0.0,
            acquisition,
            iterations: 30,
            seeds: 10,
            base_seed: 0,
            grid_size: 100,
            initial_design: InitialDesign::RandomPair,
            kernel: KernelParams { lengthscales: vec![1.0], signal_variance: 1.0, jitter: DEFAULT_JITTER },
            refit_hyperparameters: false,
            hyperparameter_bounds: HyperparameterBounds::default(),
            center_targets: false,
            noisy_baseline_training: true,
            epistemic_floor_factor: EPISTEMIC_FLOOR_FACTOR,
            krr_ridge: None,
        }
    }

    pub fn exp2(sigma_u: f64, acquisition: AcquisitionSpec) -> Self {
        Self {
            experiment: ExperimentKind::Exp2,
            function: TestFunctionSpec::composite(sigma_u),
            seeds: 100,
            kernel: KernelParams { lengthscales: vec![0.1], signal_variance: 4.0, jitter: DEFAULT_JITTER },
            noisy_baseline_training: false,
            ..Self::exp1(0.0, acquisition)
        }
    }

    pub fn exp3(generator: PoolGenerator, target: PoolTarget, acquisition: AcquisitionSpec) -> Self {
        let dim = generator.dim;
        Self {
            experiment: ExperimentKind::Exp3,
            target: generator.target(target),
            iterations: generator.size,
            function: TestFunctionSpec::SyntheticPool { generator },
            seeds: 10,
            grid_size: 0,
            initial_design: InitialDesign::ExtremeCorners,
            kernel: KernelParams { lengthscales: vec![0.3; dim], signal_variance: 1.0, jitter: 1e-2 },
            center_targets: true,
            noisy_baseline_training: false,
            ..Self::exp1(0.0, acquisition)
        }
    }

    /// Defaults for an experiment with the default noise level or pool target.
    pub fn preset(kind: ExperimentKind, acquisition: AcquisitionSpec) -> Self {
        match kind {
            ExperimentKind::Exp1 => Self::exp1(DEFAULT_SIGMA_A, acquisition),
            ExperimentKind::Exp2 => Self::exp2(DEFAULT_SIGMA_U, acquisition),
            ExperimentKind::Exp3 => Self::exp3(PoolGenerator::synthetic(), PoolTarget::High, acquisition),
        }
    }

    pub fn run_seed(&self, run_index: usize) -> u64 {
        self.base_seed.wrapping_add(run_index as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if self.seeds < 1 {
            return Err(Error::invalid("seeds must be >= 1"));
        }
        if !self.target.is_finite() {
            return Err(Error::invalid("target must be finite"));
        }
        self.function.validate()?;
        self.acquisition.validate()?;
        self.kernel.validate()?;
        if self.kernel.dim() != self.function.dim() {
            return Err(Error::invalid(format!(
                "kernel.lengthscales has {} entries, the problem has {} dims",
                self.kernel.dim(),
                self.function.dim()
            )));
        }
        let grid = matches!(self.function, TestFunctionSpec::Sine { .. } | TestFunctionSpec::Composite { .. });
        if grid && self.grid_size < 2 {
            return Err(Error::invalid(format!("grid_size must be >= 2, got {}", self.grid_size)));
        }
        if !(self.epistemic_floor_factor > 0.0) || !self.epistemic_floor_factor.is_finite() {
            return Err(Error::invalid("epistemic_floor_factor must be positive"));
        }
        if let Some(r) = self.krr_ridge {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::invalid(format!("krr_ridge must be positive, got {r}")));
            }
        }
        Ok(())
    }

    fn sigma_a_for_noisy_training(&self) -> Option<f64> {
        match self.function {
            TestFunctionSpec::Sine { sigma_a, .. } if self.noisy_baseline_training && !self.acquisition.is_robust() => {
                Some(sigma_a)
            }
            _ => None,
        }
    }
}

/// One post-initialization iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub x: Vec<f64>,
    /// The noisy observation at `x` (replicate mean for pools).
    pub observed_y: f64,
    /// `(m(x) − y•)²` with the true mean.
    pub squared_error: f64,
    /// True `σ_a²(x)`.
    pub aleatoric_var: f64,
    /// Running minimum of the true expected error, initial design included.
    pub e_min: f64,
    /// True expected error at the point the method itself ranks best.
    pub incumbent_error: f64,
    pub acq_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub experiment: ExperimentKind,
    pub method: String,
    pub seed: u64,
    pub initial_design: Vec<Vec<f64>>,
    pub initial_e_min: f64,
    pub rows: Vec<TraceRow>,
    pub wall_time_secs: f64,
}

impl ConvergenceTrace {
    pub fn final_e_min(&self) -> f64 {
        self.rows.last().map_or(self.initial_e_min, |r| r.e_min)
    }
}

/// Probabilists' Gauss–Hermite rule (Golub–Welsch), weights summing to one.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let nodes = eig.eigenvalues.iter().copied().collect();
    let weights = (0..n).map(|k| eig.eigenvectors[(0, k)].powi(2)).collect();
    (nodes, weights)
}

/// Mean and variance of `f(x + η)`, `η ~ N(0, σ²)`.
fn input_noise_moments(f: &CompositeFunction, x: f64, sigma: f64, rule: &(Vec<f64>, Vec<f64>)) -> (f64, f64) {
    if sigma == 0.0 {
        return (f.eval(x), 0.0);
    }
    let (nodes, weights) = rule;
    let vals: Vec<f64> = nodes.iter().map(|z| f.eval(x + sigma * z)).collect();
    let mean: f64 = vals.iter().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = vals.iter().zip(weights).map(|(v, w)| w * (v - mean) * (v - mean)).sum();
    (mean, var.max(0.0))
}

#[derive(Debug, Clone)]
enum Source {
    OutputNoise { sigma_a: f64 },
    InputNoise { function: CompositeFunction, sigma: f64 },
    Pool { replicates: Vec<Vec<f64>> },
}

/// Candidates with their ground truth for one run.
#[derive(Debug, Clone)]
struct Problem {
    candidates: CandidateSet,
    true_mean: Vec<f64>,
    true_var: Vec<f64>,
    /// What a noise-free query at the candidate returns.
    clean: Vec<f64>,
    source: Source,
}

impl Problem {
    fn build(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        match &config.function {
            TestFunctionSpec::Sine { lower, upper, sigma_a } => {
                let candidates = CandidateSet::grid(*lower, *upper, config.grid_size)?;
                let clean: Vec<f64> = candidates.points().iter().map(|x| x[0].sin()).collect();
                Ok(Self {
                    true_var: vec![sigma_a * sigma_a; clean.len()],
                    true_mean: clean.clone(),
                    clean,
                    candidates,
                    source: Source::OutputNoise { sigma_a: *sigma_a },
                })
            }
            TestFunctionSpec::Composite { function, lower, upper, sigma_u, quadrature_nodes } => {
                let candidates = CandidateSet::grid(*lower, *upper, config.grid_size)?;
                let sigma = sigma_u * (upper - lower);
                let rule = gauss_hermite(*quadrature_nodes);
                let (true_mean, true_var) =
                    candidates.points().iter().map(|x| input_noise_moments(function, x[0], sigma, &rule)).unzip();
                let clean = candidates.points().iter().map(|x| function.eval(x[0])).collect();
                Ok(Self {
                    candidates,
                    true_mean,
                    true_var,
                    clean,
                    source: Source::InputNoise { function: *function, sigma },
                })
            }
            TestFunctionSpec::SyntheticPool { generator } => {
                let pool = synthesize_pool(generator, seed)?;
                let clean = pool.replicates.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
                Ok(Self {
                    candidates: CandidateSet::pool(pool.inputs)?,
                    true_mean: pool.means,
                    true_var: pool.variances,
                    clean,
                    source: Source::Pool { replicates: pool.replicates },
                })
            }
        }
    }

    fn true_error(&self, i: usize, target: f64) -> f64 {
        expected_error(self.true_mean[i], target, self.true_var[i])
    }

    fn initial_indices(&self, rule: InitialDesign, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let n = self.candidates.len();
        if n < 2 {
            return Err(Error::invalid(format!("initial design needs at least 2 candidates, got {n}")));
        }
        match rule {
            InitialDesign::RandomPair => Ok(sample(rng, n, 2).into_vec()),
            InitialDesign::ExtremeCorners => Ok(extreme_corner_indices(self.candidates.points())?.to_vec()),
        }
    }
}

/// Indices of the points nearest to the lowest and the highest corner of the
/// bounding box of `points`.
pub fn extreme_corner_indices(points: &[Vec<f64>]) -> Result<[usize; 2]> {
    if points.len() < 2 {
        return Err(Error::invalid(format!("initial design needs at least 2 candidates, got {}", points.len())));
    }
    let dim = points[0].len();
    let lo: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let nearest = |corner: &[f64], skip: Option<usize>| {
        let mut best = (0, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let d2: f64 = p.iter().zip(corner).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best.0
    };
    let first = nearest(&lo, None);
    Ok([first, nearest(&hi, Some(first))])
}

#[derive(Debug, Clone)]
struct Evaluated {
    index: usize,
    x: Vec<f64>,
    clean: f64,
    noisy: f64,
    replicate_variance: Option<f64>,
}

/// Surrogate, aleatoric model and epistemic floor for one iteration.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub gp: Arc<GpSurrogate>,
    /// Added back to GP predictions when targets were centred.
    pub offset: f64,
    pub aleatoric: AleatoricModel,
    pub floor: f64,
    noisy_training: bool,
}

impl FittedModels {
    pub fn state(&self, x: &[f64], target: f64) -> Result<SurrogateState> {
        let p = self.gp.predict(x)?;
        let sa = self.aleatoric.variance(x)?;
        SurrogateState::new(p.mean + self.offset, p.epistemic_variance, sa, target, self.floor)
    }
}

/// The state of one seeded optimization run.
#[derive(Debug, Clone)]
pub struct LoopState {
    config: ExperimentConfig,
    seed: u64,
    problem: Problem,
    noise_rng: ChaCha8Rng,
    evaluated: Vec<Evaluated>,
    initial_design: Vec<Vec<f64>>,
    initial_e_min: f64,
    e_min: f64,
    iteration: usize,
}

impl LoopState {
    /// Builds the problem for `seed` and evaluates the initial design.
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let problem = Problem::build(config, seed)?;
        let mut design_rng = ChaCha8Rng::seed_from_u64(seed);
        design_rng.set_stream(DESIGN_STREAM);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(NOISE_STREAM);
        let initial = problem.initial_indices(config.initial_design, &mut design_rng)?;
        let mut state = Self {
            config: config.clone(),
            seed,
            problem,
            noise_rng,
            evaluated: Vec::new(),
            initial_design: Vec::new(),
            initial_e_min: f64::INFINITY,
            e_min: f64::INFINITY,
            iteration: 0,
        };
        for i in initial {
            state.evaluate(i)?;
            state.initial_design.push(state.problem.candidates.points()[i].clone());
        }
        state.initial_e_min = state.e_min;
        Ok(state)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.problem.candidates
    }

    pub fn e_min(&self) -> f64 {
        self.e_min
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn initial_design(&self) -> &[Vec<f64>] {
        &self.initial_design
    }

    /// Training inputs and the targets the surrogate is fitted to.
    pub fn training_set(&self) -> Result<TrainingSet> {
        let noisy = self.config.sigma_a_for_noisy_training().is_some();
        TrainingSet::new(
            self.evaluated.iter().map(|e| e.x.clone()).collect(),
            self.evaluated.iter().map(|e| if noisy { e.noisy } else { e.clean }).collect(),
        )
    }

    fn evaluate(&mut self, i: usize) -> Result<(f64, f64)> {
        self.problem.candidates.consume(i)?;
        let x = self.problem.candidates.points()[i].clone();
        let (noisy, replicate_variance) = match &self.problem.source {
            Source::OutputNoise { sigma_a } => {
                let z: f64 = StandardNormal.sample(&mut self.noise_rng);
                (self.problem.true_mean[i] + sigma_a * z, None)
            }
            Source::InputNoise { function, sigma } => {
                let z: f64 = StandardNormal.sample(&mut self.noise_rng);
                (function.eval(x[0] + sigma * z), None)
            }
            Source::Pool { replicates } => (self.problem.clean[i], Some(empirical_variance(&replicates[i])?)),
        };
        self.evaluated.push(Evaluated { index: i, x, clean: self.problem.clean[i], noisy, replicate_variance });
        let e = self.problem.true_error(i, self.config.target);
        self.e_min = self.e_min.min(e);
        Ok((noisy, e))
    }

    /// Fits the surrogate and the aleatoric model to the current data.
    pub fn fit_models(&self) -> Result<FittedModels> {
        let cfg = &self.config;
        let noisy_sigma = cfg.sigma_a_for_noisy_training();
        let raw = self.training_set()?;
        let offset = if cfg.center_targets { raw.targets().iter().sum::<f64>() / raw.len() as f64 } else { 0.0 };
        let training = raw.shifted(offset);
        let mut kernel = if cfg.refit_hyperparameters {
            let mut bounds = cfg.hyperparameter_bounds.clone();
            bounds.seed = bounds.seed.wrapping_add(self.seed);
            fit_hyperparameters(&training, &bounds, cfg.kernel.jitter)?
        } else {
            cfg.kernel.clone()
        };
        if let Some(s) = noisy_sigma {
            kernel.jitter = kernel.jitter.max(s * s);
        }
        let gp = Arc::new(fit(&training, &kernel)?);
        let aleatoric = match &self.problem.source {
            Source::OutputNoise { sigma_a } => AleatoricModel::constant(sigma_a * sigma_a)?,
            Source::InputNoise { sigma, .. } => AleatoricModel::input_noise(gp.clone(), sigma * sigma)?,
            Source::Pool { .. } => {
                let inputs: Vec<Vec<f64>> = self.evaluated.iter().map(|e| e.x.clone()).collect();
                let vars: Vec<f64> = self.evaluated.iter().map(|e| e.replicate_variance.unwrap_or(0.0)).collect();
                let krr_kernel =
                    KernelParams { lengthscales: kernel.lengthscales.clone(), signal_variance: 1.0, jitter: 0.0 };
                let ridge = cfg.krr_ridge.unwrap_or_else(|| default_ridge(inputs.len()));
                AleatoricModel::LearnedKrr(krr_fit(&inputs, &vars, &krr_kernel, ridge)?)
            }
        };
        Ok(FittedModels {
            floor: cfg.epistemic_floor_factor * kernel.signal_variance,
            gp,
            offset,
            aleatoric,
            noisy_training: noisy_sigma.is_some(),
        })
    }

    /// The incumbent the configured acquisition compares against, computed
    /// from what the method has observed.
    pub fn method_incumbent(&self, models: &FittedModels) -> Result<f64> {
        match self.config.acquisition.incumbent_kind() {
            IncumbentKind::None => Ok(0.0),
            kind => Ok(self.ranked_best(models, kind == IncumbentKind::ExpectedError)?.1),
        }
    }

    /// Evaluated point with the smallest estimated error, with that error.
    /// `robust` adds the estimated aleatoric variance to the squared error.
    fn ranked_best(&self, models: &FittedModels, robust: bool) -> Result<(usize, f64)> {
        let t = self.config.target;
        let mut best = (0, f64::INFINITY);
        for e in &self.evaluated {
            let v = if robust {
                (e.clean - t).powi(2) + models.aleatoric.variance(&e.x)?
            } else {
                let m = if models.noisy_training { models.gp.predict(&e.x)?.mean + models.offset } else { e.clean };
                (m - t).powi(2)
            };
            if v < best.1 {
                best = (e.index, v);
            }
        }
        Ok(best)
    }

    /// Acquisition value of every candidate still available, in index order.
    pub fn acquisition_scores(&self, models: &FittedModels) -> Result<Vec<(usize, f64)>> {
        let incumbent = self.method_incumbent(models)?;
        let acq = &self.config.acquisition;
        self.problem
            .candidates
            .available()
            .map(|i| {
                let state = models.state(&self.problem.candidates.points()[i], self.config.target)?;
                let s = acq.score(&state, incumbent)?;
                if s.is_finite() {
                    Ok((i, s))
                } else {
                    Err(Error::numerical(format!("acquisition returned {s} at candidate {i}")))
                }
            })
            .collect()
    }

    /// Refits, picks the best available candidate (lowest index on ties),
    /// queries it and updates the incumbent.
    pub fn step(&mut self) -> Result<TraceRow> {
        if self.problem.candidates.remaining() == 0 {
            return Err(Error::Exhausted);
        }
        let models = self.fit_models()?;
        let scores = self.acquisition_scores(&models)?;
        let minimize = self.config.acquisition.minimizes();
        let mut best = scores[0];
        for &(i, s) in &scores[1..] {
            if (minimize && s < best.1) || (!minimize && s > best.1) {
                best = (i, s);
            }
        }
        let (idx, acq_value) = best;
        let (observed_y, _) = self.evaluate(idx)?;
        self.iteration += 1;
        let t = self.config.target;
        let refitted = self.fit_models()?;
        let (best_idx, _) = self.ranked_best(&refitted, self.config.acquisition.is_robust())?;
        Ok(TraceRow {
            iteration: self.iteration,
            x: self.problem.candidates.points()[idx].clone(),
            observed_y,
            squared_error: (self.problem.true_mean[idx] - t).powi(2),
            aleatoric_var: self.problem.true_var[idx],
            e_min: self.e_min,
            incumbent_error: self.problem.true_error(best_idx, t),
            acq_value,
        })
    }
}

/// Training data of the initial design for `seed`.
pub fn initial_design(config: &ExperimentConfig, seed: u64) -> Result<TrainingSet> {
    LoopState::new(config, seed)?.training_set()
}

/// Runs one seed to completion; pool exhaustion ends the run normally.
pub fn run_seeded(config: &ExperimentConfig, seed: u64) -> Result<ConvergenceTrace> {
    let start = Instant::now();
    let mut state = LoopState::new(config, seed)?;
    let mut rows = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        match state.step() {
            Ok(row) => rows.push(row),
            Err(Error::Exhausted) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(ConvergenceTrace {
        experiment: config.experiment,
        method: config.acquisition.name().to_string(),
        seed,
        initial_design: state.initial_design,
        initial_e_min: state.initial_e_min,
        rows,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// One trace per seed `base_seed + k`, returned in seed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ConvergenceTrace>> {
    config.validate()?;
    (0..config.seeds).into_par_iter().map(|k| run_seeded(config, config.run_seed(k))).collect()
}

/// Per-iteration mean and sample standard deviation across traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub iteration: usize,
    pub runs: usize,
    pub e_min_mean: f64,
    pub e_min_std: f64,
    pub incumbent_error_mean: f64,
    pub incumbent_error_std: f64,
}

// Mean and sample standard deviation.
fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Per-iteration statistics across runs; shorter runs drop out of later rows.
pub fn aggregate(traces: &[ConvergenceTrace]) -> Vec<AggregateRow> {
    let longest = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    (0..longest)
        .map(|k| {
            let rows: Vec<&TraceRow> = traces.iter().filter_map(|t| t.rows.get(k)).collect();
            let (e_min_mean, e_min_std) = mean_std(&rows.iter().map(|r| r.e_min).collect::<Vec<_>>());
            let (incumbent_error_mean, incumbent_error_std) =
                mean_std(&rows.iter().map(|r| r.incumbent_error).collect::<Vec<_>>());
            AggregateRow {
                iteration: k + 1,
                runs: rows.len(),
                e_min_mean,
                e_min_std,
                incumbent_error_mean,
                incumbent_error_std,
            }
        })
        .collect()
}
