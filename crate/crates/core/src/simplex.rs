//! Probability-simplex utilities: Euclidean projection and the
//! cosine-maximizing fit of a raw target vector.

use serde::{Deserialize, Serialize};

use crate::nn::{validate_simplex, ConfidenceVector, SIMPLEX_TOL};

/// Euclidean projection onto `{p : p >= 0, sum p = 1}` (sort and threshold).
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    debug_assert!(v.iter().all(|x| x.is_finite()));
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Zeroes negative entries and rescales to sum 1; `None` if nothing positive
/// remains.
pub fn clip_renormalize(v: &[f64]) -> Option<Vec<f64>> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if !(sum > 0.0) {
        return None;
    }
    Some(clipped.into_iter().map(|x| x / sum).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iters: usize,
    pub lr: f64,
    pub tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iters: 200,
            lr: 0.1,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxFit {
    pub probs: ConfidenceVector,
    pub cosine: f64,
    pub iterations: usize,
    /// The target had no positive mass; the uniform vector was returned.
    pub fallback: bool,
}

/// Entries this close to zero are treated as zero before fitting.
const CLEANUP_EPS: f64 = 1e-15;

/// Finds the simplex point with maximal cosine similarity to `target` by
/// projected gradient ascent started from the Euclidean projection. The
/// clip-and-renormalize candidate is kept if it scores at least as well.
pub fn optimize_valid_softmax(target: &[f64], cfg: &OptimizerConfig) -> SoftmaxFit {
    if validate_simplex(target, SIMPLEX_TOL).is_ok() {
        return SoftmaxFit {
            probs: ConfidenceVector::new_unchecked(target.to_vec()),
            cosine: 1.0,
            iterations: 0,
            fallback: false,
        };
    }
    let cleaned: Vec<f64> = target
        .iter()
        .map(|&x| if x.abs() < CLEANUP_EPS { 0.0 } else { x })
        .collect();
    let Some(clip) = clip_renormalize(&cleaned) else {
        return SoftmaxFit {
            probs: ConfidenceVector::uniform(target.len()),
            cosine: cosine(&vec![1.0; target.len()], target),
            iterations: 0,
            fallback: true,
        };
    };

    let t_norm = cleaned.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = simplex_project(&cleaned);
    let mut best = cosine(&x, &cleaned);
    let mut iterations = 0;
    for _ in 0..cfg.iters {
        iterations += 1;
        let x_norm2: f64 = x.iter().map(|v| v * v).sum();
        let x_norm = x_norm2.sqrt();
        let cos = cosine(&x, &cleaned);
        let step: Vec<f64> = x
            .iter()
            .zip(&cleaned)
            .map(|(xi, ti)| xi + cfg.lr * (ti / (x_norm * t_norm) - cos * xi / x_norm2))
            .collect();
        let next = simplex_project(&step);
        let c = cosine(&next, &cleaned);
        let improvement = c - best;
        if c > best {
            best = c;
            x = next;
        }
        if improvement < cfg.tol {
            break;
        }
    }
    let clip_cos = cosine(&clip, &cleaned);
    let (probs, cos) = if clip_cos >= best {
        (clip, clip_cos)
    } else {
        (x, best)
    };
    SoftmaxFit {
        probs: ConfidenceVector::new_unchecked(renormalize(probs)),
        cosine: cos,
        iterations,
        fallback: false,
    }
}

fn renormalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v = (*v / s).max(0.0);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force projection: minimize distance over a fine grid of the
    /// 1-simplex.
    fn grid_project_2d(v: [f64; 2]) -> [f64; 2] {
        let mut best = [0.0, 1.0];
        let mut best_d = f64::INFINITY;
        for i in 0..=10_000 {
            let a = i as f64 / 10_000.0;
            let d = (a - v[0]).powi(2) + (1.0 - a - v[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = [a, 1.0 - a];
            }
        }
        best
    }

    #[test]
    fn projection_examples() {
        let p = simplex_project(&[0.6, 0.6]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        assert_eq!(simplex_project(&[2.0, -1.0]), vec![1.0, 0.0]);
        for v in [[0.6, 0.6], [2.0, -1.0], [0.3, 0.1], [-0.4, -0.2]] {
            let p = simplex_project(&v);
            let g = grid_project_2d(v);
            assert!((p[0] - g[0]).abs() <= 1e-4, "{v:?}");
        }
    }

    #[test]
    fn projection_is_idempotent_on_simplex() {
        let v = [0.1, 0.2, 0.3, 0.4];
        let p = simplex_project(&v);
        for (a, b) in p.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn valid_target_is_returned_unchanged() {
        let fit = optimize_valid_softmax(&[0.0, 0.5, 0.5, 0.0], &OptimizerConfig::default());
        assert_eq!(fit.probs.as_slice(), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn two_dim_target_goes_to_vertex() {
        // Grid search over the 1-simplex at 1e-4.
        let target = [-0.5, 1.5];
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..=10_000 {
            let a = i as f64 / 10_000.0;
            let c = cosine(&[a, 1.0 - a], &target);
            if c > best.1 {
                best = (a, c);
            }
        }
        assert_eq!(best.0, 0.0);
        let fit = optimize_valid_softmax(&target, &OptimizerConfig::default());
        assert!(fit.probs.as_slice()[0].abs() < 1e-12);
        assert!((fit.probs.as_slice()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_dim_target_matches_grid() {
        let target = [-0.2, 0.6, 0.6];
        let mut best = f64::NEG_INFINITY;
        let n = 1000;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let p = [
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    (n - i - j) as f64 / n as f64,
                ];
                best = best.max(cosine(&p, &target));
            }
        }
        let fit = optimize_valid_softmax(&target, &OptimizerConfig::default());
        assert!(fit.cosine >= best - 1e-6);
        assert!((fit.probs.as_slice()[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_target_falls_back_to_uniform() {
        let fit = optimize_valid_softmax(&[-0.2, -0.3, 0.0], &OptimizerConfig::default());
        assert!(fit.fallback);
        assert_eq!(
            fit.probs.as_slice(),
            ConfidenceVector::uniform(3).as_slice()
        );
    }
}
