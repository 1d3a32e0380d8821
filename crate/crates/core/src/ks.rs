//! Two-sample Kolmogorov-Smirnov test.
//!
//! Used on predicted class indices: each label sample is treated as draws of
//! the real number `class as f64`, so the statistic depends on the class
//! ordering.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{QueenError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `max_x |F_a(x) - F_b(x)|` over the pooled sample points.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(QueenError::InvalidInput(
            "KS test needs two nonempty samples".into(),
        ));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Survival function of the Kolmogorov distribution,
/// `Q(l) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 l^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-transformed series converges quickly for small arguments.
        let mut s = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            s += (-(j * j) * PI * PI / (8.0 * lambda * lambda)).exp();
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let statistic = ks_statistic(a, b)?;
    if statistic == 0.0 {
        return Ok(KsResult {
            statistic,
            p_value: 1.0,
        });
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let en = (n * m / (n + m)).sqrt();
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_sf(en * statistic),
    })
}

/// KS comparison of two predicted-label samples.
pub fn ks_forget_quality(defended: &[usize], undefended: &[usize]) -> Result<KsResult> {
    let a: Vec<f64> = defended.iter().map(|&c| c as f64).collect();
    let b: Vec<f64> = undefended.iter().map(|&c| c as f64).collect();
    ks_two_sample(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_ecdf_distance(a: &[f64], b: &[f64]) -> f64 {
        let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
        pts.sort_by(f64::total_cmp);
        let ecdf =
            |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        pts.iter()
            .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    fn plain_series(lambda: f64) -> f64 {
        let mut s = 0.0;
        for k in 1..=100_000u64 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
        }
        2.0 * s
    }

    #[test]
    fn identical_samples() {
        let r = ks_forget_quality(&[0, 1, 2, 2, 3], &[0, 1, 2, 2, 3]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_supports() {
        let r = ks_forget_quality(&[0; 20], &[1; 30]).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn empty_sample_is_rejected() {
        assert!(ks_forget_quality(&[], &[1]).is_err());
    }

    #[test]
    fn statistic_matches_naive_ecdf() {
        let a: Vec<f64> = (0..500).map(|i| ((i * 7919) % 10) as f64).collect();
        let b: Vec<f64> = (0..500)
            .map(|i| ((i * 104_729 + i / 3) % 10) as f64)
            .collect();
        let d = ks_statistic(&a, &b).unwrap();
        assert!((d - naive_ecdf_distance(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn survival_matches_plain_series() {
        for lambda in [0.3, 0.5, 0.8, 1.0, 1.17, 1.19, 1.5, 2.5] {
            let q = kolmogorov_sf(lambda);
            assert!((q - plain_series(lambda)).abs() < 1e-6, "{lambda}");
        }
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }
}
