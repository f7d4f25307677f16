//! Scalar special functions: standard normal CDF/PDF and the regularized
//! lower incomplete gamma function.

pub use statrs::function::gamma::ln_gamma;

const MAX_ITER: usize = 10_000;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Standard normal CDF Φ(x), accurate in both tails.
///
/// Uses `Φ(−|x|) = Q(1/2, x²/2) / 2`.
pub fn norm_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let tail = 0.5 * gamma_q(0.5, 0.5 * x * x);
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Standard normal density φ(x).
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Regularized lower incomplete gamma P(a, x) for a > 0.
///
/// Series for x < a + 1, Lentz continued fraction for Q otherwise.
/// Returns 0 for x <= 0 and 1 for x = +inf.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        (log_prefactor.exp() * lower_series(a, x)).min(1.0)
    } else {
        (1.0 - log_prefactor.exp() * upper_fraction(a, x)).max(0.0)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        (1.0 - log_prefactor.exp() * lower_series(a, x)).max(0.0)
    } else {
        (log_prefactor.exp() * upper_fraction(a, x)).min(1.0)
    }
}

// Σ x^n / (a (a+1) ... (a+n))
fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum
}

// Modified Lentz for 1/(x+1-a- 1(1-a)/(x+3-a- 2(2-a)/(x+5-a- ...)))
fn upper_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Central chi-square CDF with `dof` degrees of freedom (may be fractional).
pub fn chi2_cdf(dof: f64, x: f64) -> f64 {
    gamma_p(0.5 * dof, 0.5 * x)
}

/// Central chi-square density.
pub fn chi2_pdf(dof: f64, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let k2 = 0.5 * dof;
    if x == 0.0 {
        return if dof < 2.0 {
            f64::INFINITY
        } else if dof == 2.0 {
            0.5
        } else {
            0.0
        };
    }
    ((k2 - 1.0) * x.ln() - 0.5 * x - k2 * std::f64::consts::LN_2 - ln_gamma(k2)).exp()
}
