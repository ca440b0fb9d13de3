//! Small statistics toolkit: reproducible summation, sample moments,
//! binomial confidence bounds, regression and quadrature rules.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

/// Pairwise summation. The split points depend only on the length, so the
/// result is independent of how the values were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(v) / v.len() as f64
}

/// `(mean, sd / √n)` with the unbiased sample variance.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(v);
    if n == 1 {
        return (m, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Monte Carlo estimate of a scalar expectation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    /// replicas that entered the mean
    pub samples: usize,
    pub seed: u64,
    /// replicas lost to the blow-up guard
    pub censored: usize,
    /// false once censoring exceeds [`CENSOR_TOLERANCE`]
    pub valid: bool,
}

/// Largest censored fraction for which an estimate is still flagged valid.
pub const CENSOR_TOLERANCE: f64 = 1e-3;

impl McEstimate {
    pub fn from_samples(v: &[f64], censored: usize, seed: u64) -> Self {
        let (value, stderr) = mean_stderr(v);
        let total = v.len() + censored;
        McEstimate {
            value,
            stderr,
            samples: v.len(),
            seed,
            censored,
            valid: total > 0 && (censored as f64) <= CENSOR_TOLERANCE * total as f64,
        }
    }

    pub fn exact(value: f64, samples: usize, seed: u64) -> Self {
        McEstimate {
            value,
            stderr: 0.0,
            samples,
            seed,
            censored: 0,
            valid: true,
        }
    }

    /// `|value - reference| / stderr`, infinite when the error is nonzero
    /// and the stderr vanishes.
    pub fn z_score(&self, reference: f64) -> f64 {
        let d = (self.value - reference).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

/// Exact binomial (Clopper–Pearson) bounds for `k` hits in `n` trials at
/// two-sided level `1 - alpha`.
pub fn clopper_pearson(k: usize, n: usize, alpha: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 {
        0.0
    } else {
        Beta::new(kf, nf - kf + 1.0)
            .map(|b| b.inverse_cdf(alpha / 2.0))
            .unwrap_or(0.0)
    };
    let upper = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf)
            .map(|b| b.inverse_cdf(1.0 - alpha / 2.0))
            .unwrap_or(1.0)
    };
    (lower, upper)
}

/// Least-squares line `y = slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// `E[Q^m]` for `Q = Σ λ_i ξ_i²` with independent standard normal `ξ_i`,
/// via the cumulants `κ_j = 2^{j-1} (j-1)! Σ λ_i^j`.
pub fn gaussian_quadratic_moment(lambdas: &[f64], m: u32) -> f64 {
    let m = m as usize;
    let mut kappa = vec![0.0; m + 1];
    let mut fact = 1.0;
    for (j, k) in kappa.iter_mut().enumerate().skip(1) {
        if j > 1 {
            fact *= (j - 1) as f64;
        }
        *k = 2f64.powi(j as i32 - 1) * fact * lambdas.iter().map(|l| l.powi(j as i32)).sum::<f64>();
    }
    let mut moments = vec![1.0; m + 1];
    for n in 1..=m {
        let mut acc = 0.0;
        let mut binom = 1.0;
        for k in 1..=n {
            acc += binom * kappa[k] * moments[n - k];
            binom *= (n - k) as f64 / k as f64;
        }
        moments[n] = acc;
    }
    moments[m]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn stderr_of_known_sample() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let e = McEstimate::from_samples(&[2.0; 10], 0, 1);
        assert_eq!(e.stderr, 0.0);
        assert!(e.valid);
        assert!(!McEstimate::from_samples(&[2.0; 10], 1, 1).valid);
    }

    #[test]
    fn clopper_pearson_reference() {
        // reference values from the Beta quantile definition (scipy.stats.beta.ppf)
        let (lo, hi) = clopper_pearson(5, 20, 0.05);
        assert!((lo - 0.086_571_1).abs() < 1e-6, "{lo}");
        assert!((hi - 0.491_045_9).abs() < 1e-6, "{hi}");
        assert_eq!(clopper_pearson(0, 10, 0.05).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.05).1, 1.0);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        for p in 0..16 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-13, "degree {p}");
        }
        let (x1, w1) = gauss_legendre(1);
        assert_eq!((x1[0], w1[0]), (0.0, 2.0));
    }

    #[test]
    fn quadratic_form_moments() {
        // chi-square with k dof: E Q² = k(k+2), E Q³ = k(k+2)(k+4)
        let l = vec![1.0; 5];
        assert!((gaussian_quadratic_moment(&l, 1) - 5.0).abs() < 1e-12);
        assert!((gaussian_quadratic_moment(&l, 2) - 35.0).abs() < 1e-12);
        assert!((gaussian_quadratic_moment(&l, 3) - 315.0).abs() < 1e-10);
        // E (a ξ²)² = 3a²
        assert!((gaussian_quadratic_moment(&[2.0], 2) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let (s, i) = linear_fit(&x, &y);
        assert!((s - 2.5).abs() < 1e-14 && (i + 1.0).abs() < 1e-14);
    }
}
