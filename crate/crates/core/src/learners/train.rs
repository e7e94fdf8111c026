use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{update, Agent, Policy, UpdateConfig};
use crate::analytics::MetricRecord;
use crate::envs::{make, EnvName, Environment};
use crate::error::{Error, Result};
use crate::nets::Mlp;
use crate::rollout::Collector;

/// Stream ids carved out of a run's master seed, one per consumer.
pub mod streams {
    pub const ENV: u64 = 0;
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const EVAL: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvName,
    pub update: UpdateConfig,
    pub total_steps: u64,
    pub rollout_len: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub hidden: Vec<usize>,
    /// Evaluate after every this many updates (0: only after the last one).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl TrainConfig {
    pub fn new(env: EnvName, update: UpdateConfig) -> Self {
        TrainConfig {
            env,
            update,
            total_steps: 1_000_000,
            rollout_len: 2048,
            gamma: 0.99,
            gae_lambda: 0.95,
            hidden: vec![64, 64],
            eval_every: 10,
            eval_episodes: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.update.validate()?;
        if self.rollout_len == 0 || self.total_steps < self.rollout_len as u64 {
            return Err(Error::invalid(format!(
                "total_steps ({}) must cover at least one rollout of {} steps",
                self.total_steps, self.rollout_len
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::invalid("gamma and gae_lambda must lie in [0, 1]"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::invalid("eval_episodes must be at least 1"));
        }
        Ok(())
    }

    /// Whole rollouts that fit in the step budget; a remainder is not collected.
    pub fn n_updates(&self) -> u64 {
        self.total_steps / self.rollout_len as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricRecord>,
    pub agent: Agent,
    pub final_eval: EvalResult,
}

/// Runs `episodes` episodes with the policy's mode action and returns the
/// mean and population std of the undiscounted returns.
pub fn evaluate_policy(policy: &Policy, env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<EvalResult> {
    let mut returns = Vec::with_capacity(episodes);
    let mut state = env.reset(Some(seed));
    for _ in 0..episodes {
        let mut total = 0.0;
        loop {
            let action = policy.mode(&state.observation)?;
            let (next, reward) = env.step(&action)?;
            total += reward;
            if next.done() {
                break;
            }
            state = next;
        }
        returns.push(total);
        state = env.reset(None);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalResult { mean, std: var.sqrt() })
}

/// Alternates rollout collection and updates until the step budget is spent.
pub fn train(cfg: &TrainConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut env_rng = stream_rng(seed, streams::ENV);
    let mut init_rng = stream_rng(seed, streams::INIT);
    let mut sample_rng = stream_rng(seed, streams::SAMPLE);
    let mut shuffle_rng = stream_rng(seed, streams::SHUFFLE);
    let mut eval_rng = stream_rng(seed, streams::EVAL);

    let env = make(cfg.env);
    let spec = env.spec().clone();
    let policy = Policy::new(&spec, &cfg.hidden, &mut init_rng)?;
    let mut value_dims = vec![spec.observation_dim];
    value_dims.extend_from_slice(&cfg.hidden);
    value_dims.push(1);
    let value = Mlp::new(&value_dims, 1.0, &mut init_rng)?;
    let mut agent = Agent::new(policy, value, cfg.update.adam)?;

    let mut collector = Collector::new(env, env_rng.gen());
    let mut eval_env = make(cfg.env);
    let n_updates = cfg.n_updates();
    let mut metrics = Vec::with_capacity(n_updates as usize);
    let mut env_steps = 0u64;
    let mut last_eval = None;
    for u in 0..n_updates {
        let mut batch = collector.collect(&agent.policy, &agent.value, cfg.rollout_len, &mut sample_rng)?;
        batch.compute_advantages(cfg.gamma, cfg.gae_lambda)?;
        env_steps += batch.len() as u64;
        let report = update(&mut agent, &batch, &cfg.update, &mut shuffle_rng)?;

        let is_last = u + 1 == n_updates;
        let due = cfg.eval_every > 0 && (u + 1) % cfg.eval_every as u64 == 0;
        let eval = if due || is_last {
            let e = evaluate_policy(&agent.policy, eval_env.as_mut(), cfg.eval_episodes, eval_rng.gen())?;
            log::debug!("seed {seed} update {u}: eval return {:.2} at {env_steps} steps", e.mean);
            last_eval = Some(e);
            Some(e)
        } else {
            None
        };
        metrics.push(MetricRecord {
            env_steps,
            update_idx: u,
            eval_return_mean: eval.map(|e| e.mean),
            eval_return_std: eval.map(|e| e.std),
            policy_loss: report.policy_loss,
            value_loss: report.value_loss,
            entropy: report.entropy,
            penalty: report.penalty_value,
            ratio_mean: report.ratio_final.mean_r,
            ratio_p99: report.ratio_final.p99_r,
            ratio_max: report.ratio_final.max_r,
            ratio_min: report.ratio_final.min_r,
            q_mean: report.q_mean,
            grad_norm: report.gradient_norm,
        });
    }
    Ok(RunArtifacts {
        metrics,
        agent,
        final_eval: last_eval.expect("at least one update always runs"),
    })
}
