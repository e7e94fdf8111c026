use crate::error::{Error, Result};
use crate::geometry::{
    bppo_surrogate, btrpo_objective, divergence_term, divergence_term_slope, ppo_surrogate,
    saturate_log_ratio_slope, sqrt_ratio, LogRatio, RegularizerKind, SurrogateConfig,
};

use super::Algorithm;

/// Value of a policy loss on a batch together with its derivative with respect to each `logp_new`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    /// Scalar to minimize.
    pub loss: f64,
    /// Batch mean of the per-sample surrogate (to be maximized).
    pub surrogate: f64,
    /// Penalty contribution already scaled by its weight (`beta` or `lambda_pen`).
    pub penalty: f64,
    pub entropy: f64,
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    /// `d loss / d logp_new[i]`, excluding the entropy term.
    pub dlogp: Vec<f64>,
    /// `d loss / d entropy[i]`
    pub dentropy: f64,
}

fn clip_active_slope(unclipped: f64, clipped: f64, slope: f64) -> f64 {
    if unclipped <= clipped {
        slope
    } else {
        0.0
    }
}

/// Per-sample surrogate and its derivative with respect to the (effective) log-ratio.
fn surrogate_term(algorithm: Algorithm, r: f64, q: f64, adv: f64, cfg: &SurrogateConfig) -> (f64, f64) {
    let eps = cfg.epsilon;
    match algorithm {
        Algorithm::Ppo | Algorithm::PpoReg => {
            let v = ppo_surrogate(r, adv, eps);
            let clipped = crate::geometry::clip(r, 1.0 - eps, 1.0 + eps) * adv;
            (v, clip_active_slope(r * adv, clipped, adv * r))
        }
        Algorithm::Bppo | Algorithm::BppoReg => {
            let v = bppo_surrogate(q, adv, eps);
            let clipped = crate::geometry::clip(q, 1.0 - eps, 1.0 + eps) * adv;
            // d(2 q A)/d delta = A q
            (v, clip_active_slope(q * adv, clipped, adv * q))
        }
        Algorithm::Btrpo => {
            let v = btrpo_objective(q, adv, cfg.beta);
            // d/d delta of (2 q A - beta (1-q)^2) = q (A + beta (1 - q))
            (v, q * (adv + cfg.beta * (1.0 - q)))
        }
        Algorithm::TrpoKl => (r * adv, r * adv),
    }
}

fn explicit_delta_slope(kind: RegularizerKind, r: f64) -> f64 {
    match kind {
        RegularizerKind::KlForward => -1.0,
        RegularizerKind::KlReverse => r,
        RegularizerKind::Jeffreys => r - 1.0,
        _ => 0.0,
    }
}

/// Policy loss `-(mean surrogate) + penalty - entropy_coef * mean entropy`.
///
/// For BTRPO the Hellinger penalty is part of the per-sample objective and is
/// reported separately in `penalty`; for TRPO-KL and the regularized variants
/// the penalty is added to the loss.
pub fn policy_loss(
    algorithm: Algorithm,
    advantages: &[f64],
    logp_old: &[f64],
    logp_new: &[f64],
    entropies: &[f64],
    cfg: &SurrogateConfig,
) -> Result<PolicyLoss> {
    let n = advantages.len();
    if n == 0 {
        return Err(Error::invalid("policy_loss: empty batch"));
    }
    if logp_old.len() != n || logp_new.len() != n || entropies.len() != n {
        return Err(Error::invalid("policy_loss: misaligned inputs"));
    }
    let inv_n = 1.0 / n as f64;
    let kind = cfg.regularizer_kind;
    let mut surrogate = 0.0;
    let mut penalty = 0.0;
    let mut r_all = Vec::with_capacity(n);
    let mut q_all = Vec::with_capacity(n);
    let mut dlogp = Vec::with_capacity(n);
    for i in 0..n {
        let raw = logp_new[i] - logp_old[i];
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                what: "log-ratio",
                detail: format!("sample {i}: logp_new = {}, logp_old = {}", logp_new[i], logp_old[i]),
            });
        }
        let delta = cfg.effective_log_ratio(LogRatio::new(raw)?);
        let sat_slope = cfg.saturation_c.map_or(1.0, |c| saturate_log_ratio_slope(raw, c));
        let pair = sqrt_ratio(delta);
        let (r, q) = (pair.r, pair.q);
        let (s, mut ds) = surrogate_term(algorithm, r, q, advantages[i], cfg);

        let (p, mut dp) = match algorithm {
            Algorithm::Btrpo => ((1.0 - q) * (1.0 - q) * cfg.beta, 0.0),
            Algorithm::TrpoKl => (-delta.value() * cfg.lambda_pen, -cfg.lambda_pen),
            Algorithm::PpoReg | Algorithm::BppoReg => (
                cfg.lambda_pen * divergence_term(kind, r, delta.value())?,
                cfg.lambda_pen * divergence_term_slope(kind, r, delta.value())?,
            ),
            Algorithm::Ppo | Algorithm::Bppo => (0.0, 0.0),
        };
        if pair.overflow {
            // r and q sit at the clamp and are locally constant; only terms that use
            // delta directly still carry a gradient.
            ds = 0.0;
            dp = match algorithm {
                Algorithm::TrpoKl => -cfg.lambda_pen,
                Algorithm::PpoReg | Algorithm::BppoReg => cfg.lambda_pen * explicit_delta_slope(kind, r),
                _ => 0.0,
            };
        }
        if !s.is_finite() || !p.is_finite() || !ds.is_finite() || !dp.is_finite() {
            return Err(Error::NonFinite {
                what: "policy loss term",
                detail: format!("sample {i}: surrogate {s}, penalty {p}, ratio {r}"),
            });
        }
        surrogate += s;
        penalty += p;
        r_all.push(r);
        q_all.push(q);
        let dterm = if algorithm == Algorithm::Btrpo { -ds } else { -ds + dp };
        dlogp.push(dterm * sat_slope * inv_n);
    }
    surrogate *= inv_n;
    penalty *= inv_n;
    let entropy = entropies.iter().sum::<f64>() * inv_n;
    if !entropy.is_finite() {
        return Err(Error::NonFinite {
            what: "entropy",
            detail: format!("{entropy}"),
        });
    }
    let loss = if algorithm == Algorithm::Btrpo {
        // the penalty is already inside the BTRPO objective
        -surrogate - cfg.entropy_coef * entropy
    } else {
        -surrogate + penalty - cfg.entropy_coef * entropy
    };
    Ok(PolicyLoss {
        loss,
        surrogate,
        penalty,
        entropy,
        r: r_all,
        q: q_all,
        dlogp,
        dentropy: -cfg.entropy_coef * inv_n,
    })
}

/// Mean squared error.
pub fn value_loss(values_pred: &[f64], returns: &[f64]) -> Result<f64> {
    if values_pred.len() != returns.len() {
        return Err(Error::invalid(format!(
            "value_loss: {} predictions, {} returns",
            values_pred.len(),
            returns.len()
        )));
    }
    if values_pred.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = values_pred
        .iter()
        .zip(returns)
        .map(|(p, r)| (p - r) * (p - r))
        .sum();
    Ok(sse / values_pred.len() as f64)
}
