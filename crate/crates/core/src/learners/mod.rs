//! Policy and value updates: BPPO, PPO, BTRPO, penalty-form TRPO and the
//! divergence-regularized clip variants.

mod loss;
mod policy;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{ratio_stats, RatioStats};
use crate::error::{Error, Result};
use crate::geometry::{RegularizerKind, SurrogateConfig};
use crate::nets::{clip_global_norm, AdamConfig, AdamState, Mlp};
use crate::rollout::{minibatches, normalize, TrajectoryBatch};

pub use loss::{policy_loss, value_loss, PolicyLoss};
pub use policy::{Policy, PolicyEval, POLICY_OUTPUT_SCALE};
pub use train::{evaluate_policy, stream_rng, streams, train, EvalResult, RunArtifacts, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Bppo,
    Ppo,
    Btrpo,
    TrpoKl,
    PpoReg,
    BppoReg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Bppo,
        Algorithm::Ppo,
        Algorithm::Btrpo,
        Algorithm::TrpoKl,
        Algorithm::PpoReg,
        Algorithm::BppoReg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Bppo => "bppo",
            Algorithm::Ppo => "ppo",
            Algorithm::Btrpo => "btrpo",
            Algorithm::TrpoKl => "trpo_kl",
            Algorithm::PpoReg => "ppo_reg",
            Algorithm::BppoReg => "bppo_reg",
        }
    }

    pub fn is_regularized(self) -> bool {
        matches!(self, Algorithm::PpoReg | Algorithm::BppoReg)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown algorithm '{s}' (expected one of bppo, ppo, btrpo, trpo_kl, ppo_reg, bppo_reg)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub algorithm: Algorithm,
    pub surrogate: SurrogateConfig,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    /// Applied separately to the policy and the value gradients.
    pub max_grad_norm: f64,
    pub adam: AdamConfig,
    /// Center and scale advantages before use.
    pub normalize_advantages: bool,
    /// Normalize inside each minibatch instead of once per batch.
    pub per_minibatch_norm: bool,
    /// Permits BTRPO with `beta = 0`, which drops the trust region entirely.
    pub allow_zero_beta: bool,
}

impl UpdateConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        UpdateConfig {
            algorithm,
            surrogate: SurrogateConfig::default(),
            epochs: 10,
            minibatch_size: 64,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            adam: AdamConfig::default(),
            normalize_advantages: true,
            per_minibatch_norm: false,
            allow_zero_beta: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        if self.epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::invalid("epochs and minibatch_size must be at least 1"));
        }
        if !(self.value_coef >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid("value_coef must be >= 0 and max_grad_norm > 0"));
        }
        let lr = self.adam.learning_rate;
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let kind = self.surrogate.regularizer_kind;
        if self.algorithm.is_regularized() {
            if kind == RegularizerKind::None || !(self.surrogate.lambda_pen > 0.0) {
                return Err(Error::invalid(format!(
                    "{} needs a regularizer kind and lambda_pen > 0",
                    self.algorithm
                )));
            }
        } else if kind != RegularizerKind::None {
            return Err(Error::invalid(format!(
                "regularizer '{kind}' only applies to ppo_reg and bppo_reg, not {}",
                self.algorithm
            )));
        }
        if self.algorithm == Algorithm::Btrpo && self.surrogate.beta == 0.0 && !self.allow_zero_beta {
            return Err(Error::invalid(
                "btrpo with beta = 0 has no trust region; set allow_zero_beta to run it anyway",
            ));
        }
        Ok(())
    }

    /// Name used in run directories and reports, e.g. `ppo_reg-js`.
    pub fn label(&self) -> String {
        if self.algorithm.is_regularized() {
            format!("{}-{}", self.algorithm, self.surrogate.regularizer_kind)
        } else {
            self.algorithm.to_string()
        }
    }

    /// The penalty or clip hyperparameter that identifies a cell in reports.
    pub fn beta_or_eps(&self) -> f64 {
        match self.algorithm {
            Algorithm::Btrpo => self.surrogate.beta,
            Algorithm::TrpoKl => self.surrogate.lambda_pen,
            _ => self.surrogate.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    /// Mean over all minibatch steps.
    pub policy_loss: f64,
    /// Mean over all minibatch steps.
    pub value_loss: f64,
    /// Mean policy entropy on the batch after the update.
    pub entropy: f64,
    /// Weighted penalty on the batch after the update.
    pub penalty_value: f64,
    /// Ratios seen by the first epoch's minibatches, before each step.
    pub ratio_first_epoch: RatioStats,
    /// Ratios of the updated policy over the whole batch.
    pub ratio_final: RatioStats,
    pub q_mean: f64,
    /// Mean pre-clip policy gradient norm.
    pub gradient_norm: f64,
}

/// Policy, value function and their optimizer states.
#[derive(Debug, Clone)]
pub struct Agent {
    pub policy: Policy,
    pub value: Mlp,
    policy_opt: AdamState,
    log_std_opt: AdamState,
    value_opt: AdamState,
}

impl Agent {
    pub fn new(policy: Policy, value: Mlp, adam: AdamConfig) -> Result<Self> {
        if value.output_dim() != 1 || value.input_dim() != policy.net.input_dim() {
            return Err(Error::invalid("value net must map observations to one output"));
        }
        Ok(Agent {
            policy_opt: AdamState::new(policy.net.n_params(), adam),
            log_std_opt: AdamState::new(policy.log_std.len(), adam),
            value_opt: AdamState::new(value.n_params(), adam),
            policy,
            value,
        })
    }
}

fn gather(src: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    out
}

fn pick(src: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| src[i]).collect()
}

/// Runs `epochs` passes of minibatch Adam on the policy and value losses.
///
/// Ratios are always taken against the behavior log-probabilities cached in
/// the batch. On error the agent is restored to its state at entry.
pub fn update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &TrajectoryBatch,
    cfg: &UpdateConfig,
    rng: &mut R,
) -> Result<UpdateReport> {
    cfg.validate()?;
    if batch.is_empty() || batch.advantages.len() != batch.len() || batch.returns.len() != batch.len() {
        return Err(Error::invalid("update needs a non-empty batch with advantages and returns"));
    }
    let snapshot = agent.clone();
    let result = run_update(agent, batch, cfg, rng);
    if result.is_err() {
        *agent = snapshot;
    }
    result
}

fn run_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &TrajectoryBatch,
    cfg: &UpdateConfig,
    rng: &mut R,
) -> Result<UpdateReport> {
    for opt in [&mut agent.policy_opt, &mut agent.log_std_opt, &mut agent.value_opt] {
        opt.config = cfg.adam;
    }
    let n = batch.len();
    let mut advantages = batch.advantages.clone();
    let batch_norm = cfg.normalize_advantages && !cfg.per_minibatch_norm;
    let minibatch_norm = cfg.normalize_advantages && cfg.per_minibatch_norm;
    if batch_norm {
        normalize(&mut advantages);
    }
    let (od, aw) = (batch.obs_dim, batch.action_width);
    let mb_size = cfg.minibatch_size.min(n);

    let mut grad_net = vec![0.0; agent.policy.net.n_params()];
    let mut grad_log_std = vec![0.0; agent.policy.log_std.len()];
    let mut grad_value = vec![0.0; agent.value.n_params()];
    let mut first_epoch_r = Vec::with_capacity(n);
    let (mut policy_loss_sum, mut value_loss_sum, mut norm_sum) = (0.0, 0.0, 0.0);
    let mut steps = 0usize;

    for epoch in 0..cfg.epochs {
        for idx in minibatches(n, mb_size, rng)? {
            let m = idx.len();
            let obs = gather(&batch.observations, od, &idx);
            let actions = gather(&batch.actions, aw, &idx);
            let mut adv = pick(&advantages, &idx);
            if minibatch_norm {
                normalize(&mut adv);
            }
            let logp_old = pick(&batch.logp_old, &idx);
            let returns = pick(&batch.returns, &idx);

            let eval = agent.policy.evaluate(&obs, &actions, m)?;
            let pl = policy_loss(cfg.algorithm, &adv, &logp_old, &eval.logp, &eval.entropy, &cfg.surrogate)?;
            if epoch == 0 {
                first_epoch_r.extend_from_slice(&pl.r);
            }
            grad_net.fill(0.0);
            grad_log_std.fill(0.0);
            let dentropy = vec![pl.dentropy; m];
            agent
                .policy
                .backward(&eval, &actions, &pl.dlogp, &dentropy, &mut grad_net, &mut grad_log_std)?;
            let norm = clip_global_norm(&mut [&mut grad_net, &mut grad_log_std], cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "policy gradient",
                    detail: format!("epoch {epoch}, norm {norm}"),
                });
            }
            agent.policy_opt.step(agent.policy.net.params_mut(), &grad_net)?;
            agent.log_std_opt.step(&mut agent.policy.log_std, &grad_log_std)?;
            agent.policy.clamp_log_std();

            let vacts = agent.value.forward_batch(&obs, m)?;
            let pred = vacts.output();
            let vl = value_loss(pred, &returns)?;
            if !vl.is_finite() {
                return Err(Error::NonFinite {
                    what: "value loss",
                    detail: format!("epoch {epoch}: {vl}"),
                });
            }
            let scale = cfg.value_coef * 2.0 / m as f64;
            let vgrad: Vec<f64> = pred.iter().zip(&returns).map(|(p, r)| scale * (p - r)).collect();
            grad_value.fill(0.0);
            agent.value.backward_batch(&vacts, &vgrad, &mut grad_value)?;
            clip_global_norm(&mut [&mut grad_value], cfg.max_grad_norm);
            agent.value_opt.step(agent.value.params_mut(), &grad_value)?;

            policy_loss_sum += pl.loss;
            value_loss_sum += vl;
            norm_sum += norm;
            steps += 1;
        }
    }

    let eval = agent.policy.evaluate(&batch.observations, &batch.actions, n)?;
    let fin = policy_loss(cfg.algorithm, &advantages, &batch.logp_old, &eval.logp, &eval.entropy, &cfg.surrogate)?;
    let steps = steps as f64;
    Ok(UpdateReport {
        policy_loss: policy_loss_sum / steps,
        value_loss: value_loss_sum / steps,
        entropy: fin.entropy,
        penalty_value: fin.penalty,
        ratio_first_epoch: ratio_stats(&first_epoch_r)?,
        ratio_final: ratio_stats(&fin.r)?,
        q_mean: fin.q.iter().sum::<f64>() / n as f64,
        gradient_norm: norm_sum / steps,
    })
}
