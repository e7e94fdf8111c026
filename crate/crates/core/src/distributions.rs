//! Action distributions: diagonal Gaussian and categorical.
//!
//! Besides the usual sampling / log-density / entropy, every distribution
//! exposes the analytic gradient of `log_prob` (and of `entropy`) with respect
//! to its own parameters, which is all the learners need to backpropagate a
//! surrogate loss into the policy network.

use rand::Rng;

use crate::error::{Error, Result};

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Bounds applied to the learnable log standard deviation after each optimizer step.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Discrete(_) => None,
            Action::Continuous(v) => Some(v),
        }
    }

    /// Flattened numeric form used for batch storage and CSV dumps.
    pub fn to_values(&self) -> Vec<f64> {
        match self {
            Action::Discrete(i) => vec![*i as f64],
            Action::Continuous(v) => v.clone(),
        }
    }
}

/// One standard-normal draw via Box-Muller (cosine branch only).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::invalid(format!(
                "DiagGaussian: {} means but {} log-stds",
                mean.len(),
                log_std.len()
            )));
        }
        if let Some(ls) = log_std.iter().find(|ls| !ls.exp().is_finite() || ls.exp() <= 0.0) {
            return Err(Error::invalid(format!("DiagGaussian: unusable log_std {ls}")));
        }
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.dim() {
            return Err(Error::invalid(format!(
                "action has {} components, distribution has {}",
                action.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn log_prob(&self, action: &[f64]) -> Result<f64> {
        self.check(action)?;
        Ok(gaussian_log_prob(&self.mean, &self.log_std, action))
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.log_std)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * standard_normal(rng))
            .collect()
    }

    /// Gradient of `log_prob` as `(d/d mean, d/d log_std)`.
    pub fn log_prob_grad(&self, action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(action)?;
        let mut dmean = vec![0.0; self.dim()];
        let mut dlog_std = vec![0.0; self.dim()];
        gaussian_log_prob_grad(&self.mean, &self.log_std, action, &mut dmean, &mut dlog_std);
        Ok((dmean, dlog_std))
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let z = (action[i] - mean[i]) * (-log_std[i]).exp();
        lp += -0.5 * z * z - log_std[i] - HALF_LN_2PI;
    }
    lp
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
}

/// Writes `d log_prob / d mean` and `d log_prob / d log_std` into the output slices.
pub fn gaussian_log_prob_grad(
    mean: &[f64],
    log_std: &[f64],
    action: &[f64],
    dmean: &mut [f64],
    dlog_std: &mut [f64],
) {
    for i in 0..mean.len() {
        let inv_var = (-2.0 * log_std[i]).exp();
        let diff = action[i] - mean[i];
        dmean[i] = diff * inv_var;
        dlog_std[i] = diff * diff * inv_var - 1.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Categorical {
    /// Accepts finite logits or `-inf` (zero-probability categories); at least one must be finite.
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("Categorical: no categories"));
        }
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::invalid("Categorical: logits must be finite or -inf"));
        }
        if logits.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(Error::invalid("Categorical: every category has zero mass"));
        }
        let mut log_probs = vec![0.0; logits.len()];
        log_softmax(&logits, &mut log_probs);
        Ok(Categorical { logits, log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn n(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    pub fn log_prob(&self, action: usize) -> Result<f64> {
        self.log_probs.get(action).copied().ok_or_else(|| {
            Error::invalid(format!("action {action} out of range for {} categories", self.n()))
        })
    }

    pub fn entropy(&self) -> f64 {
        categorical_entropy(&self.log_probs)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.log_probs, rng)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    /// Gradient of `log_prob(action)` with respect to the logits: `onehot(action) - softmax`.
    pub fn log_prob_grad(&self, action: usize) -> Result<Vec<f64>> {
        self.log_prob(action)?;
        let mut g = vec![0.0; self.n()];
        categorical_log_prob_grad(&self.log_probs, action, &mut g);
        Ok(g)
    }
}

/// Numerically stable log-softmax; `-inf` logits map to `-inf` log-probabilities.
pub fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - log_z;
    }
}

pub fn categorical_entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|lp| lp.exp() * lp)
        .sum::<f64>()
}

pub fn categorical_log_prob_grad(log_probs: &[f64], action: usize, out: &mut [f64]) {
    for (k, (o, lp)) in out.iter_mut().zip(log_probs).enumerate() {
        *o = if k == action { 1.0 } else { 0.0 } - lp.exp();
    }
}

/// Gradient of the categorical entropy with respect to the logits: `-p_k (ln p_k + H)`.
pub fn categorical_entropy_grad(log_probs: &[f64], out: &mut [f64]) {
    let h = categorical_entropy(log_probs);
    for (o, lp) in out.iter_mut().zip(log_probs) {
        *o = if lp.is_finite() { -lp.exp() * (lp + h) } else { 0.0 };
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_live = 0;
    for (k, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_live = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u fell in the rounding gap above the accumulated mass
    last_live
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Either kind of action distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDist {
    Gaussian(DiagGaussian),
    Categorical(Categorical),
}

impl ActionDist {
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (ActionDist::Gaussian(d), Action::Continuous(a)) => d.log_prob(a),
            (ActionDist::Categorical(d), Action::Discrete(i)) => d.log_prob(*i),
            _ => Err(Error::invalid("action kind does not match distribution kind")),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDist::Gaussian(d) => d.entropy(),
            ActionDist::Categorical(d) => d.entropy(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            ActionDist::Gaussian(d) => Action::Continuous(d.sample(rng)),
            ActionDist::Categorical(d) => Action::Discrete(d.sample(rng)),
        }
    }

    /// Mean action for a Gaussian, most likely category for a categorical.
    pub fn mode(&self) -> Action {
        match self {
            ActionDist::Gaussian(d) => Action::Continuous(d.mean.clone()),
            ActionDist::Categorical(d) => Action::Discrete(d.argmax()),
        }
    }
}
