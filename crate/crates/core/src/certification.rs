//! PAC planning of the threshold / query-radius pair, and a numeric check
//! that the reversed target negates the piracy model's training gradient.

use serde::{Deserialize, Serialize};

use crate::error::{QueenError, Result};
use crate::nn::{ConfidenceVector, Mlp};
use crate::perturbation::reverse_target;
use crate::simplex::cosine;

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(QueenError::InvalidInput(format!(
            "epsilon {eps} outside (0, 1)"
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(QueenError::InvalidInput(format!(
            "{name} must be > 0, got {v}"
        )));
    }
    Ok(())
}

/// Hoeffding bound on honestly answered sensitive queries:
/// `ln(2/delta) / (2 eps^2)`.
pub fn max_honest_queries(eps: f64, delta: f64) -> Result<f64> {
    check_eps(eps)?;
    if !(delta > 0.0 && delta <= 2.0) {
        return Err(QueenError::InvalidInput(format!(
            "delta {delta} outside (0, 2]"
        )));
    }
    Ok((2.0 / delta).ln() / (2.0 * eps * eps))
}

/// Honest queries implied by a threshold and radius: `t d^2 / r^2`.
pub fn honest_query_estimate(t: f64, r: f64, mean_radius: f64) -> Result<f64> {
    check_positive("t", t)?;
    check_positive("r", r)?;
    check_positive("mean radius", mean_radius)?;
    Ok(t * mean_radius * mean_radius / (r * r))
}

/// Smallest query radius keeping the implied honest count under the bound:
/// `sqrt(2t / ln(2/delta)) * eps * d`.
pub fn min_radius(t: f64, eps: f64, delta: f64, mean_radius: f64) -> Result<f64> {
    check_eps(eps)?;
    check_positive("t", t)?;
    check_positive("mean radius", mean_radius)?;
    if !(delta > 0.0 && delta < 2.0) {
        return Err(QueenError::InvalidInput(format!(
            "delta {delta} outside (0, 2)"
        )));
    }
    Ok((2.0 * t / (2.0 / delta).ln()).sqrt() * eps * mean_radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub eps: f64,
    pub delta: f64,
    pub t: f64,
    pub mean_radius: f64,
    pub max_honest: f64,
    pub r_min: f64,
    pub implied_honest: f64,
}

pub fn plan(eps: f64, delta: f64, t: f64, mean_radius: f64) -> Result<PlanRow> {
    let max_honest = max_honest_queries(eps, delta)?;
    let r_min = min_radius(t, eps, delta, mean_radius)?;
    Ok(PlanRow {
        eps,
        delta,
        t,
        mean_radius,
        max_honest,
        r_min,
        implied_honest: honest_query_estimate(t, r_min, mean_radius)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReverseReport {
    /// Cosine between the reversed-target and honest-target gradients.
    pub cosine: f64,
    /// `|g_reversed| / |g_honest|`.
    pub norm_ratio: f64,
    /// The honest gradient vanished, so nothing can be reversed.
    pub degenerate: bool,
}

const DEGENERATE_NORM: f64 = 1e-10;

/// Compares the piracy parameter gradients for the honest answer and for the
/// reversed target built from `simulated`.
pub fn gradient_reverse_report(
    piracy: &Mlp,
    x: &[f64],
    honest: &ConfidenceVector,
    simulated: &ConfidenceVector,
) -> Result<GradientReverseReport> {
    let reversed = reverse_target(honest, simulated)?;
    let g_rev = piracy.param_grad_raw(x, &reversed)?;
    let g_honest = piracy.param_grad_raw(x, honest.as_slice())?;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (n_rev, n_honest) = (norm(&g_rev), norm(&g_honest));
    if n_honest < DEGENERATE_NORM {
        return Ok(GradientReverseReport {
            cosine: 0.0,
            norm_ratio: if n_rev < DEGENERATE_NORM {
                1.0
            } else {
                f64::INFINITY
            },
            degenerate: true,
        });
    }
    Ok(GradientReverseReport {
        cosine: cosine(&g_rev, &g_honest),
        norm_ratio: n_rev / n_honest,
        degenerate: false,
    })
}

/// Exact-simulation check: the simulated softmax is the piracy model's own.
pub fn verify_gradient_reverse(
    piracy: &Mlp,
    x: &[f64],
    honest: &ConfidenceVector,
) -> Result<GradientReverseReport> {
    let own = piracy.predict_proba(x)?;
    gradient_reverse_report(piracy, x, honest, &own)
}
