use rand::Rng;

use crate::distributions::{
    categorical_entropy, categorical_entropy_grad, categorical_log_prob_grad, gaussian_entropy,
    gaussian_log_prob, gaussian_log_prob_grad, log_softmax, sample_categorical, standard_normal,
    Action, ActionDist, Categorical, DiagGaussian, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::envs::{ActionSpace, EnvSpec};
use crate::error::{Error, Result};
use crate::nets::{Activations, Mlp};

/// Scale applied to the initial weights of the policy's output layer.
pub const POLICY_OUTPUT_SCALE: f64 = 0.01;

/// Stochastic policy: an MLP producing logits (discrete) or Gaussian means
/// (continuous), plus a state-independent learnable log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    /// Empty for discrete action spaces.
    pub log_std: Vec<f64>,
    discrete: bool,
}

/// Batched evaluation of the policy on stored observations and actions.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub acts: Activations,
    pub logp: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![spec.observation_dim];
        dims.extend_from_slice(hidden);
        dims.push(spec.action_space.policy_outputs());
        let net = Mlp::new(&dims, POLICY_OUTPUT_SCALE, rng)?;
        let (log_std, discrete) = match &spec.action_space {
            ActionSpace::Discrete(_) => (Vec::new(), true),
            ActionSpace::Box { low, .. } => (vec![0.0; low.len()], false),
        };
        Ok(Policy { net, log_std, discrete })
    }

    pub fn from_parts(net: Mlp, log_std: Vec<f64>, discrete: bool) -> Result<Self> {
        if !discrete && log_std.len() != net.output_dim() {
            return Err(Error::invalid("log_std width must match the policy head"));
        }
        if discrete && !log_std.is_empty() {
            return Err(Error::invalid("discrete policies carry no log_std"));
        }
        Ok(Policy { net, log_std, discrete })
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete
    }

    /// Width of a stored action row.
    pub fn action_width(&self) -> usize {
        if self.discrete {
            1
        } else {
            self.net.output_dim()
        }
    }

    pub fn dist(&self, obs: &[f64]) -> Result<ActionDist> {
        let out = self.net.forward(obs)?;
        Ok(if self.discrete {
            ActionDist::Categorical(Categorical::new(out)?)
        } else {
            ActionDist::Gaussian(DiagGaussian::new(out, self.log_std.clone())?)
        })
    }

    /// Log-probability of `action` (stored-row form) given one network output row.
    fn row_log_prob(&self, out: &[f64], action: &[f64], scratch: &mut [f64]) -> Result<f64> {
        if self.discrete {
            let a = action[0] as usize;
            if a >= out.len() {
                return Err(Error::invalid(format!("action {a} outside 0..{}", out.len())));
            }
            log_softmax(out, scratch);
            Ok(scratch[a])
        } else {
            Ok(gaussian_log_prob(out, &self.log_std, action))
        }
    }

    /// Samples an action and returns it with its log-probability.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Action, f64)> {
        let out = self.net.forward(obs)?;
        let mut scratch = vec![0.0; out.len()];
        if self.discrete {
            log_softmax(&out, &mut scratch);
            let a = sample_categorical(&scratch, rng);
            Ok((Action::Discrete(a), scratch[a]))
        } else {
            let a: Vec<f64> = out
                .iter()
                .zip(&self.log_std)
                .map(|(m, ls)| m + ls.exp() * standard_normal(rng))
                .collect();
            let lp = self.row_log_prob(&out, &a, &mut scratch)?;
            Ok((Action::Continuous(a), lp))
        }
    }

    /// Mean action (continuous) or most likely action (discrete).
    pub fn mode(&self, obs: &[f64]) -> Result<Action> {
        Ok(self.dist(obs)?.mode())
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let out = self.net.forward(obs)?;
        let mut scratch = vec![0.0; out.len()];
        self.row_log_prob(&out, action, &mut scratch)
    }

    pub fn evaluate(&self, obs: &[f64], actions: &[f64], rows: usize) -> Result<PolicyEval> {
        let width = self.action_width();
        if actions.len() != rows * width {
            return Err(Error::invalid("action buffer does not match batch rows"));
        }
        let acts = self.net.forward_batch(obs, rows)?;
        let k = self.net.output_dim();
        let out = acts.output();
        let mut scratch = vec![0.0; k];
        let mut logp = Vec::with_capacity(rows);
        let mut entropy = Vec::with_capacity(rows);
        let gauss_h = if self.discrete { 0.0 } else { gaussian_entropy(&self.log_std) };
        for r in 0..rows {
            let row = &out[r * k..(r + 1) * k];
            logp.push(self.row_log_prob(row, &actions[r * width..(r + 1) * width], &mut scratch)?);
            entropy.push(if self.discrete {
                categorical_entropy(&scratch)
            } else {
                gauss_h
            });
        }
        Ok(PolicyEval { acts, logp, entropy })
    }

    /// Accumulates gradients of `sum_i dlogp[i] * logp_i + dentropy[i] * H_i`.
    pub fn backward(
        &self,
        eval: &PolicyEval,
        actions: &[f64],
        dlogp: &[f64],
        dentropy: &[f64],
        grad_net: &mut [f64],
        grad_log_std: &mut [f64],
    ) -> Result<()> {
        let rows = eval.acts.rows();
        let k = self.net.output_dim();
        let width = self.action_width();
        let out = eval.acts.output();
        let mut out_grad = vec![0.0; rows * k];
        let mut g1 = vec![0.0; k];
        let mut g2 = vec![0.0; k];
        let mut lp = vec![0.0; k];
        for r in 0..rows {
            let row = &out[r * k..(r + 1) * k];
            let a = &actions[r * width..(r + 1) * width];
            let og = &mut out_grad[r * k..(r + 1) * k];
            if self.discrete {
                log_softmax(row, &mut lp);
                categorical_log_prob_grad(&lp, a[0] as usize, &mut g1);
                categorical_entropy_grad(&lp, &mut g2);
                for j in 0..k {
                    og[j] = dlogp[r] * g1[j] + dentropy[r] * g2[j];
                }
            } else {
                gaussian_log_prob_grad(row, &self.log_std, a, &mut g1, &mut g2);
                for j in 0..k {
                    og[j] = dlogp[r] * g1[j];
                    grad_log_std[j] += dlogp[r] * g2[j] + dentropy[r];
                }
            }
        }
        self.net.backward_batch(&eval.acts, &out_grad, grad_net)
    }

    pub fn clamp_log_std(&mut self) {
        for ls in &mut self.log_std {
            *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}
