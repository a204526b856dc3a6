//! Small statistical helpers: moments, goodness-of-fit and two-sample tests.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; `NaN` for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Asymptotic Kolmogorov survival function with Stephens' small-sample
/// correction.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against U(0, 1): `(D, p)`.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    (d, kolmogorov_p(d, xs.len()))
}

/// Pearson chi-square test of equal expected counts: `(statistic, p)`.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let probs = vec![1.0 / counts.len() as f64; counts.len()];
    chi_square_gof(counts, &probs)
}

/// Pearson chi-square goodness of fit against cell probabilities `probs`.
pub fn chi_square_gof(counts: &[u64], probs: &[f64]) -> (f64, f64) {
    assert_eq!(counts.len(), probs.len());
    let total: u64 = counts.iter().sum();
    let stat = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum::<f64>();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("at least two bins");
    (stat, 1.0 - dist.cdf(stat))
}

/// Two-sided Welch t-test p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> f64 {
    let (va, vb) = (
        sample_variance(a) / a.len() as f64,
        sample_variance(b) / b.len() as f64,
    );
    let se2 = va + vb;
    if se2 == 0.0 {
        return if mean(a) == mean(b) { 1.0 } else { 0.0 };
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    2.0 * (1.0 - dist.cdf(t.abs()))
}
