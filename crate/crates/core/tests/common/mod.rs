//! Oracles for the integration tests, written without the library's series,
//! special functions or linear algebra.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Adaptive Simpson quadrature.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Posterior summary at one candidate, as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct State {
    pub mu: f64,
    pub ve: f64,
    pub va: f64,
    pub target: f64,
    pub e_min: f64,
}

/// `E[max(0, E_min − Ê)]` as an integral over `t = √e` of the K = 1 density
/// written as `φ(t − s) + φ(t + s)`.
pub fn ei_quadrature(s: &State) -> f64 {
    let c = (s.e_min - s.va) / s.ve;
    if c <= 0.0 {
        return 0.0;
    }
    let sl = (s.mu - s.target).abs() / s.ve.sqrt();
    let r = c.sqrt();
    let f = |t: f64| (c - t * t) * (phi(t - sl) + phi(t + sl));
    // split at the density peak so the adaptive rule sees it
    let mut cuts = vec![0.0, r];
    if sl > 0.0 && sl < r {
        cuts.insert(1, sl);
    }
    let total: f64 = cuts.windows(2).map(|w| integrate(f, w[0], w[1], 1e-15)).sum();
    s.ve * total
}

/// Monte-Carlo mean and standard error of `max(0, E_min − (m̂ − y•)² − σ_a²)`.
pub fn ei_monte_carlo(s: &State, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = s.ve.sqrt();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let z: f64 = StandardNormal.sample(&mut rng);
        let m = s.mu + sd * z;
        let v = (s.e_min - (m - s.target).powi(2) - s.va).max(0.0);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo frequency of `(m̂ − y•)² + σ_a² ≤ E_min − ζ`.
pub fn poi_monte_carlo(s: &State, zeta: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = s.ve.sqrt();
    let mut hits = 0usize;
    for _ in 0..draws {
        let z: f64 = StandardNormal.sample(&mut rng);
        let m = s.mu + sd * z;
        if (m - s.target).powi(2) + s.va <= s.e_min - zeta {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// Inverse of a small dense matrix by Gauss–Jordan elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn dense_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let factor = a[r][col];
                if factor != 0.0 {
                    for c in 0..2 * n {
                        a[r][c] -= factor * a[col][c];
                    }
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn rbf(x: &[f64], y: &[f64], lengthscale: f64, signal_variance: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| ((a - b) / lengthscale).powi(2)).sum();
    signal_variance * (-0.5 * r2).exp()
}

/// Zero-mean RBF posterior mean and variance at `x`.
pub fn dense_posterior(
    inputs: &[Vec<f64>],
    targets: &[f64],
    lengthscale: f64,
    signal_variance: f64,
    jitter: f64,
    x: &[f64],
) -> (f64, f64) {
    let n = inputs.len();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| rbf(&inputs[i], &inputs[j], lengthscale, signal_variance) + if i == j { jitter } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = dense_inverse(&k);
    let ks: Vec<f64> = inputs.iter().map(|xi| rbf(xi, x, lengthscale, signal_variance)).collect();
    let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| inv[i][j] * ks[j]).sum()).collect();
    let mean = w.iter().zip(targets).map(|(a, b)| a * b).sum();
    let var = signal_variance - w.iter().zip(&ks).map(|(a, b)| a * b).sum::<f64>();
    (mean, var.max(0.0))
}

/// Deterministic random states with moderate non-centrality.
pub fn random_states(count: usize, seed: u64) -> Vec<State> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let target = rng.random_range(-0.5..0.5);
            let mu = target + rng.random_range(-1.2..1.2);
            let ve = 10f64.powf(rng.random_range(-1.5..0.0));
            let va = rng.random_range(0.0..0.4);
            let e_min = va + rng.random_range(0.05..1.5);
            State { mu, ve, va, target, e_min }
        })
        .collect()
}

/// `Φ(b) − Φ(a)` by quadrature of the density, limits clamped to ±40.
pub fn gauss_interval(a: f64, b: f64) -> f64 {
    let (a, b) = (a.max(-40.0), b.min(40.0));
    if b <= a {
        return 0.0;
    }
    // split at zero so the peak is not straddled by a coarse first panel
    if a < 0.0 && b > 0.0 {
        integrate(phi, a, 0.0, 1e-14) + integrate(phi, 0.0, b, 1e-14)
    } else {
        integrate(phi, a, b, 1e-14)
    }
}

/// `P((m̂ − y•)² + σ_a² ≤ E_min − ζ)`.
pub fn poi_oracle(s: &State, zeta: f64) -> f64 {
    let c = (s.e_min - zeta - s.va) / s.ve;
    if c <= 0.0 {
        return 0.0;
    }
    let r = c.sqrt();
    let sl = (s.mu - s.target).abs() / s.ve.sqrt();
    gauss_interval(-r - sl, r - sl)
}

/// `σ_e² · q-quantile of (Z + s)² + σ_a²` by bisection.
pub fn lcb_oracle(s: &State, q: f64) -> f64 {
    let sl = (s.mu - s.target).abs() / s.ve.sqrt();
    let (mut lo, mut hi) = (0.0f64, (sl + 12.0).powi(2));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = mid.sqrt();
        if gauss_interval(-r - sl, r - sl) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    s.ve * 0.5 * (lo + hi) + s.va
}

pub mod properties;
