//! Non-central chi-square distribution with integer degrees of freedom.
//!
//! The density and CDF are evaluated as Poisson(λ/2) mixtures of central
//! chi-square laws. Summation starts at the Poisson mode and walks outward in
//! both directions, so the weights never underflow for large λ. Neighbouring
//! incomplete-gamma values are obtained by the recurrence
//! `P(a + 1, x) = P(a, x) − x^a e^{−x} / Γ(a + 1)`, which costs one
//! multiplication per term.
//!
//! The Sankaran power transform gives a Gaussian surrogate of the CDF that is
//! cheap and smooth but only approximate; the series remains the default.

use crate::error::{Error, Result};
use crate::special::{gamma_p, ln_gamma, norm_cdf};

/// Largest noncentrality accepted by the series CDF.
pub const SERIES_LAMBDA_LIMIT: f64 = 1e6;

/// Relative truncation tolerance of the Poisson-mixture series.
const SERIES_RTOL: f64 = 1e-14;

/// Poisson weights below this end the downward sweep regardless of the sum.
const SERIES_ABS_FLOOR: f64 = 1e-300;

/// Target accuracy of [`NoncentralChiSquare::quantile`] in probability.
const QUANTILE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoncentralChiSquare {
    dof: u32,
    noncentrality: f64,
}

/// Parameters of the Sankaran transform `z = (e / (K + λ))^ell ≈ N(alpha, rho²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SankaranParams {
    pub ell: f64,
    pub alpha: f64,
    /// Standard deviation of the transformed variable.
    pub rho: f64,
}

impl NoncentralChiSquare {
    pub fn new(dof: u32, noncentrality: f64) -> Result<Self> {
        if dof == 0 {
            return Err(Error::invalid("degrees of freedom must be at least 1"));
        }
        if !(noncentrality >= 0.0) || !noncentrality.is_finite() {
            return Err(Error::invalid(format!("noncentrality must be finite and non-negative, got {noncentrality}")));
        }
        Ok(Self { dof, noncentrality })
    }

    pub fn dof(&self) -> u32 {
        self.dof
    }

    pub fn noncentrality(&self) -> f64 {
        self.noncentrality
    }

    pub fn mean(&self) -> f64 {
        self.dof as f64 + self.noncentrality
    }

    pub fn variance(&self) -> f64 {
        2.0 * (self.dof as f64 + 2.0 * self.noncentrality)
    }

    fn half_dof(&self) -> f64 {
        0.5 * self.dof as f64
    }

    /// Poisson mode and its weight `e^{−λ/2} (λ/2)^j / j!`.
    fn mode_weight(&self) -> (u64, f64) {
        let half = 0.5 * self.noncentrality;
        let mode = half.floor() as u64;
        let w = if mode == 0 {
            (-half).exp()
        } else {
            let j = mode as f64;
            (-half + j * half.ln() - ln_gamma(j + 1.0)).exp()
        };
        (mode, w)
    }

    /// Probability density. Zero for `e < 0`.
    pub fn pdf(&self, e: f64) -> f64 {
        if e < 0.0 || e.is_nan() {
            return 0.0;
        }
        let k = self.dof as f64;
        let half = 0.5 * self.noncentrality;
        if e == 0.0 {
            return match self.dof {
                1 => f64::INFINITY,
                2 => 0.5 * (-half).exp(),
                _ => 0.0,
            };
        }
        if e.is_infinite() {
            return 0.0;
        }

        let ln_e = e.ln();
        let log_central = |j: u64| {
            let h = 0.5 * (k + 2.0 * j as f64);
            (h - 1.0) * ln_e - 0.5 * e - h * std::f64::consts::LN_2 - ln_gamma(h)
        };
        if half == 0.0 {
            return log_central(0).exp();
        }
        // Terms are summed in log space: far below the mean the dominant
        // Poisson index sits well away from the mode and the mode term alone
        // underflows.
        let ln_half = half.ln();
        let log_term = |j: u64| -half + j as f64 * ln_half - ln_gamma(j as f64 + 1.0) + log_central(j);
        let ln_rtol = SERIES_RTOL.ln();
        let mode = half.floor() as u64;
        let mut acc = LogSum::new(log_term(mode));

        let mut prev = acc.max;
        let mut j = mode;
        loop {
            j += 1;
            let l = log_term(j);
            acc.add(l);
            if (j as f64 > half && l <= prev && l - acc.ln() <= ln_rtol) || l == f64::NEG_INFINITY {
                break;
            }
            prev = l;
        }
        let mut prev = log_term(mode);
        let mut j = mode;
        while j > 0 {
            j -= 1;
            let l = log_term(j);
            acc.add(l);
            if l <= prev && l - acc.ln() <= ln_rtol {
                break;
            }
            prev = l;
        }
        acc.ln().exp()
    }

    /// CDF by the Poisson-mixture series.
    pub fn cdf(&self, e: f64) -> Result<f64> {
        if self.noncentrality > SERIES_LAMBDA_LIMIT {
            return Err(Error::NoncentralityTooLarge(self.noncentrality));
        }
        if e.is_nan() {
            return Err(Error::invalid("cdf argument is NaN"));
        }
        if e <= 0.0 {
            return Ok(0.0);
        }
        if e.is_infinite() {
            return Ok(1.0);
        }
        let x = 0.5 * e;
        let half = 0.5 * self.noncentrality;
        let (mode, w_mode) = self.mode_weight();
        let a_mode = self.half_dof() + mode as f64;
        let p_mode = gamma_p(a_mode, x);
        let mut sum = w_mode * p_mode;

        // upward: P(a+1) = P(a) − g(a), g(a) = x^a e^{−x} / Γ(a+1)
        let mut w = w_mode;
        let mut p = p_mode;
        let mut a = a_mode;
        let mut g = (a * x.ln() - x - ln_gamma(a + 1.0)).exp();
        let mut j = mode;
        loop {
            p = (p - g).max(0.0);
            a += 1.0;
            g *= x / a;
            j += 1;
            w *= half / j as f64;
            let term = w * p;
            sum += term;
            if (j as f64 > half && term <= SERIES_RTOL * sum) || w == 0.0 || p == 0.0 {
                break;
            }
        }
        // downward: P(a−1) = P(a) + g(a−1), g(a−1) = g(a)·a/x
        let mut w = w_mode;
        let mut p = p_mode;
        let mut a = a_mode;
        let mut g = ((a - 1.0) * x.ln() - x - ln_gamma(a)).exp();
        let mut j = mode;
        while j > 0 {
            p = (p + g).min(1.0);
            a -= 1.0;
            g *= a / x;
            w *= j as f64 / half;
            j -= 1;
            sum += w * p;
            // P ≤ 1, so once the Poisson weights drop below the floor the
            // remaining terms cannot register
            if w <= SERIES_RTOL * sum || w < SERIES_ABS_FLOOR {
                break;
            }
        }
        Ok(sum.clamp(0.0, 1.0))
    }

    /// Inverse CDF by bracketed bisection.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {q}")));
        }
        let k = self.dof as f64;
        let lam = self.noncentrality;
        let mut lo = 0.0;
        let mut hi = k + lam + 20.0 * (2.0 * k + 4.0 * lam).sqrt() + 20.0;
        while self.cdf(hi)? < q {
            lo = hi;
            hi *= 2.0;
        }
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..2_000 {
            mid = 0.5 * (lo + hi);
            let f = self.cdf(mid)?;
            if (f - q).abs() <= QUANTILE_TOL {
                break;
            }
            if f < q {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                mid = 0.5 * (lo + hi);
                break;
            }
        }
        Ok(mid)
    }

    /// Sankaran transform parameters.
    ///
    /// With `r_s = 2^{s−1} (s−1)! (K + sλ)` and `ell = 1 − r1 r3 / (3 r2²)`:
    /// `alpha = 1 + ell(ell−1)(r2/(2r1²) − (2−ell)(1−3ell) r2²/(8r1⁴))` and
    /// `rho² = ell² r2/r1² · (1 − (1−ell)(1−3ell) r2/(4r1²))`.
    pub fn sankaran_params(&self) -> SankaranParams {
        let k = self.dof as f64;
        let lam = self.noncentrality;
        let r1 = k + lam;
        let r2 = 2.0 * (k + 2.0 * lam);
        let r3 = 8.0 * (k + 3.0 * lam);
        let ell = 1.0 - r1 * r3 / (3.0 * r2 * r2);
        let alpha = 1.0
            + ell
                * (ell - 1.0)
                * (r2 / (2.0 * r1 * r1) - (2.0 - ell) * (1.0 - 3.0 * ell) * r2 * r2 / (8.0 * r1.powi(4)));
        let rho_sq = ell * ell * r2 / (r1 * r1) * (1.0 - (1.0 - ell) * (1.0 - 3.0 * ell) * r2 / (4.0 * r1 * r1));
        SankaranParams { ell, alpha, rho: rho_sq.sqrt() }
    }

    /// Gaussian approximation `Φ((z − alpha)/rho)` with `z = (e/(K+λ))^ell`.
    pub fn sankaran_cdf(&self, e: f64) -> f64 {
        if e < 0.0 {
            return 0.0;
        }
        let p = self.sankaran_params();
        let z = (e / self.mean()).powf(p.ell);
        norm_cdf((z - p.alpha) / p.rho).clamp(0.0, 1.0)
    }
}

/// Running `ln Σ exp(l_i)` without overflow.
struct LogSum {
    max: f64,
    scaled: f64,
}

impl LogSum {
    fn new(l: f64) -> Self {
        Self { max: l, scaled: 1.0 }
    }

    fn add(&mut self, l: f64) {
        if l <= self.max {
            self.scaled += (l - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - l).exp() + 1.0;
            self.max = l;
        }
    }

    fn ln(&self) -> f64 {
        self.max + self.scaled.ln()
    }
}

/// Closed-form CDF for one degree of freedom: the law of `(Z + √λ)²`.
pub fn cdf_exact_k1(lambda: f64, e: f64) -> f64 {
    if e <= 0.0 {
        return 0.0;
    }
    let s = lambda.max(0.0).sqrt();
    let r = e.sqrt();
    (norm_cdf(r - s) - norm_cdf(-r - s)).clamp(0.0, 1.0)
}
