//! Square-root ratio geometry.
//!
//! Everything here is a pure function of its arguments: log-ratios and the
//! square-root ratio `q = exp(delta / 2)`, the clipped and penalized
//! surrogates built on `q`, the divergence regularizers used by the
//! regularized baselines, and closed-form Gaussian overlap quantities that
//! serve as oracles for the Bhattacharyya/KL relations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `delta / 2` is clamped to this magnitude before exponentiation.
pub const HALF_LOG_RATIO_LIMIT: f64 = 30.0;

/// Saturation bound used when saturation is switched on without an explicit value.
pub const DEFAULT_SATURATION_C: f64 = 10.0;

/// Log-ratio `log pi_new(a|s) - log pi_old(a|s)`, in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogRatio(f64);

impl LogRatio {
    pub fn new(delta: f64) -> Result<Self> {
        if delta.is_finite() {
            Ok(LogRatio(delta))
        } else {
            Err(Error::invalid(format!("log-ratio must be finite, got {delta}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Likelihood ratio `r` together with its square root `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioPair {
    pub r: f64,
    pub q: f64,
    /// Set when `delta / 2` hit [`HALF_LOG_RATIO_LIMIT`] and was clamped.
    pub overflow: bool,
}

pub fn log_ratio(logp_new: f64, logp_old: f64) -> Result<LogRatio> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(Error::invalid(format!(
            "log-probabilities must be finite (new = {logp_new}, old = {logp_old})"
        )));
    }
    Ok(LogRatio(logp_new - logp_old))
}

/// `q = exp(delta / 2)` and `r = q^2`.
pub fn sqrt_ratio(delta: LogRatio) -> RatioPair {
    let half = 0.5 * delta.0;
    let overflow = half.abs() > HALF_LOG_RATIO_LIMIT;
    let half = half.clamp(-HALF_LOG_RATIO_LIMIT, HALF_LOG_RATIO_LIMIT);
    let q = half.exp();
    RatioPair { r: q * q, q, overflow }
}

/// `c * tanh(delta / c)`: an odd, monotone squashing of the log-ratio into `[-c, c]`.
pub fn saturate_log_ratio(delta: LogRatio, c: f64) -> Result<LogRatio> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("saturation bound must be positive, got {c}")));
    }
    Ok(LogRatio(c * (delta.0 / c).tanh()))
}

/// Derivative of [`saturate_log_ratio`] with respect to its input.
pub fn saturate_log_ratio_slope(delta: f64, c: f64) -> f64 {
    let t = (delta / c).tanh();
    1.0 - t * t
}

#[inline]
pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// BPPO per-sample objective `2 * min(q A, clip(q, 1-eps, 1+eps) A)`.
pub fn bppo_surrogate(q: f64, adv: f64, epsilon: f64) -> f64 {
    let clipped = clip(q, 1.0 - epsilon, 1.0 + epsilon);
    2.0 * (q * adv).min(clipped * adv)
}

/// PPO per-sample objective `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn ppo_surrogate(r: f64, adv: f64, epsilon: f64) -> f64 {
    let clipped = clip(r, 1.0 - epsilon, 1.0 + epsilon);
    (r * adv).min(clipped * adv)
}

/// BTRPO per-sample objective `2 q A - beta (1 - q)^2`.
pub fn btrpo_objective(q: f64, adv: f64, beta: f64) -> f64 {
    let dev = 1.0 - q;
    2.0 * q * adv - beta * dev * dev
}

/// Batch mean of `(1 - q)^2`.
pub fn hellinger_penalty(q_batch: &[f64]) -> Result<f64> {
    non_empty(q_batch, "hellinger_penalty")?;
    let sum: f64 = q_batch.iter().map(|&q| (1.0 - q) * (1.0 - q)).sum();
    Ok(sum / q_batch.len() as f64)
}

/// Behavior-policy estimate of the Bhattacharyya coefficient: the mean of `q`.
///
/// Not clamped to `[0, 1]`; small batches can exceed 1.
pub fn bc_estimate(q_batch: &[f64]) -> Result<f64> {
    non_empty(q_batch, "bc_estimate")?;
    Ok(q_batch.iter().sum::<f64>() / q_batch.len() as f64)
}

fn non_empty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::invalid(format!("{what}: empty batch")))
    } else {
        Ok(())
    }
}

/// Divergence regularizers available to the regularized PPO/BPPO baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    /// KL(old || new)
    KlForward,
    /// KL(new || old)
    KlReverse,
    Js,
    /// Pearson chi-squared, chi2(new || old)
    Chi2,
    Jeffreys,
    /// 1 - BC
    Bc,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 7] = [
        RegularizerKind::None,
        RegularizerKind::KlForward,
        RegularizerKind::KlReverse,
        RegularizerKind::Js,
        RegularizerKind::Chi2,
        RegularizerKind::Jeffreys,
        RegularizerKind::Bc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::KlForward => "kl_forward",
            RegularizerKind::KlReverse => "kl_reverse",
            RegularizerKind::Js => "js",
            RegularizerKind::Chi2 => "chi2",
            RegularizerKind::Jeffreys => "jeffreys",
            RegularizerKind::Bc => "bc",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "none" => RegularizerKind::None,
            "kl_forward" | "kl" => RegularizerKind::KlForward,
            "kl_reverse" | "reverse_kl" => RegularizerKind::KlReverse,
            "js" => RegularizerKind::Js,
            "chi2" | "chi" => RegularizerKind::Chi2,
            "jeffreys" => RegularizerKind::Jeffreys,
            "bc" => RegularizerKind::Bc,
            other => return Err(Error::invalid(format!("unknown regularizer '{other}'"))),
        };
        Ok(kind)
    }
}

/// Per-sample divergence estimator under the behavior policy, given `r` and `delta`.
pub fn divergence_term(kind: RegularizerKind, r: f64, delta: f64) -> Result<f64> {
    let v = match kind {
        RegularizerKind::None => {
            return Err(Error::invalid("divergence_penalty: regularizer kind 'none'"))
        }
        RegularizerKind::KlForward => -delta,
        RegularizerKind::KlReverse => r * delta,
        RegularizerKind::Chi2 => (r - 1.0) * (r - 1.0),
        RegularizerKind::Js => {
            let m = 1.0 + r;
            let tail = if r > 0.0 { 0.5 * r * (2.0 * r / m).ln() } else { 0.0 };
            0.5 * (2.0 / m).ln() + tail
        }
        RegularizerKind::Jeffreys => (r - 1.0) * delta,
        RegularizerKind::Bc => 1.0 - (0.5 * delta).exp(),
    };
    Ok(v)
}

/// Derivative of [`divergence_term`] with respect to `delta`, holding `r = exp(delta)`.
pub fn divergence_term_slope(kind: RegularizerKind, r: f64, delta: f64) -> Result<f64> {
    let d = match kind {
        RegularizerKind::None => {
            return Err(Error::invalid("divergence_penalty: regularizer kind 'none'"))
        }
        RegularizerKind::KlForward => -1.0,
        RegularizerKind::KlReverse => r * (delta + 1.0),
        RegularizerKind::Chi2 => 2.0 * (r - 1.0) * r,
        RegularizerKind::Js => {
            if r > 0.0 {
                0.5 * r * (2.0 * r / (1.0 + r)).ln()
            } else {
                0.0
            }
        }
        RegularizerKind::Jeffreys => r * delta + (r - 1.0),
        RegularizerKind::Bc => -0.5 * (0.5 * delta).exp(),
    };
    Ok(d)
}

/// Monte-Carlo estimate of the chosen divergence from behavior-policy samples.
pub fn divergence_penalty(kind: RegularizerKind, r_batch: &[f64], delta_batch: &[f64]) -> Result<f64> {
    non_empty(r_batch, "divergence_penalty")?;
    if r_batch.len() != delta_batch.len() {
        return Err(Error::invalid(format!(
            "divergence_penalty: {} ratios but {} log-ratios",
            r_batch.len(),
            delta_batch.len()
        )));
    }
    let mut sum = 0.0;
    for (&r, &d) in r_batch.iter().zip(delta_batch) {
        sum += divergence_term(kind, r, d)?;
    }
    Ok(sum / r_batch.len() as f64)
}

/// Chebyshev-style bound on `Pr(r >= t)` from the Bhattacharyya coefficient.
pub fn tail_bound(t: f64, bc: f64) -> Result<f64> {
    if !(t > 1.0) {
        return Err(Error::invalid(format!("tail_bound needs t > 1, got {t}")));
    }
    if !(0.0..=1.0).contains(&bc) {
        return Err(Error::invalid(format!("tail_bound needs bc in [0, 1], got {bc}")));
    }
    let gap = t.sqrt() - 1.0;
    Ok(2.0 * (1.0 - bc) / (gap * gap))
}

/// Residual of the first-order expansion `q^2 ~ 1 + 2 (q - 1)`.
pub fn taylor_residual(q: f64) -> f64 {
    q * q - (1.0 + 2.0 * (q - 1.0))
}

/// Diagonal Gaussian used as an oracle input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::invalid(format!(
                "GaussianSpec: mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("GaussianSpec: std must be positive, got {s}")));
        }
        Ok(GaussianSpec { mean, std })
    }

    pub fn scalar(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![mean], vec![std])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * ln_2pi
            })
            .sum()
    }
}

fn same_dim(p: &GaussianSpec, g: &GaussianSpec) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::invalid(format!(
            "Gaussian dimension mismatch: {} vs {}",
            p.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// Closed-form Bhattacharyya coefficient of two diagonal Gaussians.
pub fn gaussian_bc(p: &GaussianSpec, g: &GaussianSpec) -> Result<f64> {
    same_dim(p, g)?;
    let mut log_bc = 0.0;
    for i in 0..p.dim() {
        let (sp, sg) = (p.std[i], g.std[i]);
        let var_sum = sp * sp + sg * sg;
        let dm = p.mean[i] - g.mean[i];
        log_bc += 0.5 * (2.0 * sp * sg / var_sum).ln() - dm * dm / (4.0 * var_sum);
    }
    Ok(log_bc.exp())
}

/// `1 - BC` without cancellation for nearly identical Gaussians.
pub fn gaussian_hellinger_sq(p: &GaussianSpec, g: &GaussianSpec) -> Result<f64> {
    let bc = gaussian_bc(p, g)?;
    Ok(-(bc.ln()).exp_m1())
}

/// Closed-form `KL(p || g)` for diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianSpec, g: &GaussianSpec) -> Result<f64> {
    same_dim(p, g)?;
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let (sp, sg) = (p.std[i], g.std[i]);
        let dm = p.mean[i] - g.mean[i];
        kl += (sg / sp).ln() + (sp * sp + dm * dm) / (2.0 * sg * sg) - 0.5;
    }
    Ok(kl)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(
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
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    // Start from a fixed subdivision so narrow peaks are never missed by the
    // first coarse Simpson estimate.
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let lo = a + h * i as f64;
            let hi = if i + 1 == PANELS { b } else { lo + h };
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            recurse(&f, lo, hi, fa, fm, fb, whole, tol / PANELS as f64, 50)
        })
        .sum()
}

/// Integration window centred on the mean midpoint, 12 of the widest standard deviations on each side.
pub fn gaussian_window(means: &[f64], stds: &[f64]) -> (f64, f64) {
    let mid = means.iter().sum::<f64>() / means.len() as f64;
    let spread = 12.0 * stds.iter().cloned().fold(0.0, f64::max);
    let far = means.iter().map(|m| (m - mid).abs()).fold(0.0, f64::max);
    (mid - spread - far, mid + spread + far)
}

/// Hyperparameters of every surrogate and regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub lambda_pen: f64,
    pub entropy_coef: f64,
    pub saturation_c: Option<f64>,
    pub regularizer_kind: RegularizerKind,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            epsilon: 0.2,
            beta: 2.0,
            lambda_pen: 0.1,
            entropy_coef: 0.0,
            saturation_c: None,
            regularizer_kind: RegularizerKind::None,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_pen", self.lambda_pen),
            ("entropy_coef", self.entropy_coef),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if let Some(c) = self.saturation_c {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!("saturation_c must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Applies saturation when configured.
    pub fn effective_log_ratio(&self, delta: LogRatio) -> LogRatio {
        match self.saturation_c {
            Some(c) => LogRatio(c * (delta.0 / c).tanh()),
            None => delta,
        }
    }
}
