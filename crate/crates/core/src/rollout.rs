//! Experience collection and advantage estimation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::analytics::fmt17;
use crate::distributions::Action;
use crate::envs::{EnvState, Environment};
use crate::error::{Error, Result};
use crate::learners::Policy;
use crate::nets::Mlp;

/// Added to the standard deviation when normalizing advantages.
pub const ADV_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub value_estimate: f64,
    pub logp_old: f64,
    pub terminal: bool,
    pub truncated: bool,
}

/// Struct-of-arrays rollout buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub obs_dim: usize,
    pub action_width: usize,
    /// `len x obs_dim`, row-major
    pub observations: Vec<f64>,
    /// `len x action_width`; discrete actions are stored as their index
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub terminals: Vec<bool>,
    pub truncations: Vec<bool>,
    /// `V(s_{t+1})` for time-limit truncated steps, zero elsewhere.
    pub truncation_values: Vec<f64>,
    /// Value of the observation following the last transition (zero if that step ended an episode).
    pub last_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Undiscounted returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn new(obs_dim: usize, action_width: usize) -> Self {
        TrajectoryBatch {
            obs_dim,
            action_width,
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            logp_old: Vec::new(),
            terminals: Vec::new(),
            truncations: Vec::new(),
            truncation_values: Vec::new(),
            last_value: 0.0,
            advantages: Vec::new(),
            returns: Vec::new(),
            episode_returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, t: Transition, truncation_value: f64) -> Result<()> {
        if t.observation.len() != self.obs_dim {
            return Err(Error::invalid("observation width does not match batch"));
        }
        let action = t.action.to_values();
        if action.len() != self.action_width {
            return Err(Error::invalid("action width does not match batch"));
        }
        if !t.logp_old.is_finite() || !t.value_estimate.is_finite() {
            return Err(Error::NonFinite {
                what: "transition",
                detail: format!("logp_old = {}, value = {}", t.logp_old, t.value_estimate),
            });
        }
        self.observations.extend_from_slice(&t.observation);
        self.actions.extend_from_slice(&action);
        self.rewards.push(t.reward);
        self.values.push(t.value_estimate);
        self.logp_old.push(t.logp_old);
        self.terminals.push(t.terminal);
        self.truncations.push(t.truncated);
        self.truncation_values.push(if t.truncated { truncation_value } else { 0.0 });
        Ok(())
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_width..(i + 1) * self.action_width]
    }

    /// Fills `advantages` and `returns` by GAE. Truncated steps bootstrap from the
    /// stored value of their final observation; terminal steps bootstrap from zero.
    pub fn compute_advantages(&mut self, gamma: f64, lambda_gae: f64) -> Result<()> {
        let n = self.len();
        let mut rewards = self.rewards.clone();
        let mut ends = Vec::with_capacity(n);
        for i in 0..n {
            if self.truncations[i] && !self.terminals[i] {
                rewards[i] += gamma * self.truncation_values[i];
            }
            ends.push(self.terminals[i] || self.truncations[i]);
        }
        self.advantages = gae(&rewards, &self.values, self.last_value, &ends, gamma, lambda_gae)?;
        self.returns = self.advantages.iter().zip(&self.values).map(|(a, v)| a + v).collect();
        Ok(())
    }

    /// Debug dump: one CSV row per transition.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<batch csv>", e);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.obs_dim).map(|i| format!("obs{i}")));
        header.extend((0..self.action_width).map(|i| format!("action{i}")));
        header.extend(
            ["reward", "value", "logp_old", "terminal", "truncated"]
                .iter()
                .map(|s| s.to_string()),
        );
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.observation(i).iter().map(|v| fmt17(*v)));
            row.extend(self.action(i).iter().map(|v| fmt17(*v)));
            row.push(fmt17(self.rewards[i]));
            row.push(fmt17(self.values[i]));
            row.push(fmt17(self.logp_old[i]));
            row.push((self.terminals[i] as u8).to_string());
            row.push((self.truncations[i] as u8).to_string());
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }
}

/// Generalized advantage estimation by backward recursion.
///
/// `ends[t]` marks that the episode finished at step `t`; the recursion does
/// not bootstrap across it. `value_bootstrap` stands in for `V(s_n)` after the
/// final step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    value_bootstrap: f64,
    ends: &[bool],
    gamma: f64,
    lambda_gae: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if values.len() != n || ends.len() != n {
        return Err(Error::invalid(format!(
            "gae: {} rewards, {} values, {} end flags",
            n,
            values.len(),
            ends.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda_gae) {
        return Err(Error::invalid(format!(
            "gae: gamma ({gamma}) and lambda ({lambda_gae}) must lie in [0, 1]"
        )));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_end = if ends[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { value_bootstrap };
        let delta = rewards[t] + gamma * next_value * not_end - values[t];
        running = delta + gamma * lambda_gae * not_end * running;
        adv[t] = running;
    }
    Ok(adv)
}

/// `(x - mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADV_NORM_EPS;
    for v in values.iter_mut() {
        *v = (*v - mean) / denom;
    }
}

/// Normalizes the batch advantages in place; returns are left untouched.
pub fn normalize_advantages(batch: &mut TrajectoryBatch) {
    normalize(&mut batch.advantages);
}

/// A random permutation of `0..len` cut into consecutive chunks of `size` (the last may be shorter).
pub fn minibatches<R: Rng + ?Sized>(len: usize, size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > len {
        return Err(Error::invalid(format!("minibatch size {size} must lie in 1..={len}")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(size).map(|c| c.to_vec()).collect())
}

/// Steps an environment under a policy, auto-resetting at episode boundaries.
pub struct Collector {
    env: Box<dyn Environment>,
    state: EnvState,
    episode_return: f64,
}

impl Collector {
    pub fn new(mut env: Box<dyn Environment>, seed: u64) -> Self {
        let state = env.reset(Some(seed));
        Collector {
            env,
            state,
            episode_return: 0.0,
        }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    /// Gathers exactly `n_steps` transitions and computes nothing else; call
    /// [`TrajectoryBatch::compute_advantages`] afterwards.
    pub fn collect<R: Rng + ?Sized>(
        &mut self,
        policy: &Policy,
        value_net: &Mlp,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<TrajectoryBatch> {
        if n_steps == 0 {
            return Err(Error::invalid("collect needs at least one step"));
        }
        let spec = self.env.spec().clone();
        let mut batch = TrajectoryBatch::new(spec.observation_dim, spec.action_space.action_width());
        for _ in 0..n_steps {
            let obs = self.state.observation.clone();
            let (action, logp) = policy.act(&obs, rng)?;
            let value = value_net.forward(&obs)?[0];
            let (next, reward) = self.env.step(&action)?;
            self.episode_return += reward;
            let truncation_value = if next.truncated && !next.terminal {
                value_net.forward(&next.observation)?[0]
            } else {
                0.0
            };
            batch.push(
                Transition {
                    observation: obs,
                    action,
                    reward,
                    value_estimate: value,
                    logp_old: logp,
                    terminal: next.terminal,
                    truncated: next.truncated,
                },
                truncation_value,
            )?;
            if next.done() {
                batch.episode_returns.push(self.episode_return);
                self.episode_return = 0.0;
                self.state = self.env.reset(None);
            } else {
                self.state = next;
            }
        }
        let last_ended = *batch.terminals.last().unwrap() || *batch.truncations.last().unwrap();
        batch.last_value = if last_ended {
            0.0
        } else {
            value_net.forward(&self.state.observation)?[0]
        };
        Ok(batch)
    }
}

/// Convenience wrapper: collect from a collector and fill advantages.
pub fn collect<R: Rng + ?Sized>(
    policy: &Policy,
    value_net: &Mlp,
    collector: &mut Collector,
    n_steps: usize,
    gamma: f64,
    lambda_gae: f64,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    let mut batch = collector.collect(policy, value_net, n_steps, rng)?;
    batch.compute_advantages(gamma, lambda_gae)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make, EnvName};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_examples() {
        let a = gae(&[1.0, 1.0], &[0.0, 0.0], 0.0, &[false, false], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![2.0, 1.0]);
        let a = gae(&[1.0], &[0.0], 0.5, &[false], 0.99, 0.95).unwrap();
        assert!((a[0] - 1.495).abs() < 1e-15);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [0.5, -1.0, 2.0, 0.3];
        let v = [0.1, 0.4, -0.2, 0.9];
        let ends = [false, true, false, false];
        let a = gae(&r, &v, 0.7, &ends, 0.9, 0.0).unwrap();
        let deltas = [
            0.5 + 0.9 * 0.4 - 0.1,
            -1.0 - 0.4,
            2.0 + 0.9 * 0.9 - (-0.2),
            0.3 + 0.9 * 0.7 - 0.9,
        ];
        assert_eq!(a, deltas.to_vec());
    }

    #[test]
    fn gae_rejects_bad_input() {
        assert!(gae(&[1.0], &[0.0, 0.0], 0.0, &[false], 0.9, 0.9).is_err());
        assert!(gae(&[1.0], &[0.0], 0.0, &[false, true], 0.9, 0.9).is_err());
        assert!(gae(&[1.0], &[0.0], 0.0, &[false], 1.1, 0.9).is_err());
    }

    #[test]
    fn normalization_examples() {
        let mut a = vec![1.0, 1.0, 1.0];
        normalize(&mut a);
        assert_eq!(a, vec![0.0; 3]);
        let mut a = vec![-1.0, 1.0];
        normalize(&mut a);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        let mut a = vec![0.0, 2.0, 4.0];
        normalize(&mut a);
        let z = 2.0 / (8.0f64 / 3.0).sqrt();
        assert!((a[0] + z).abs() < 1e-7 && a[1] == 0.0 && (a[2] - z).abs() < 1e-7);
        assert!((a[2] - 1.2247).abs() < 1e-4);
        let mut single = vec![3.5];
        normalize(&mut single);
        assert_eq!(single, vec![0.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();
        normalize(&mut a);
        let once = a.clone();
        normalize(&mut a);
        for (x, y) in once.iter().zip(&a) {
            assert!((x - y).abs() < 1e-6);
        }
        let mean = a.iter().sum::<f64>() / 50.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn minibatch_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mb = minibatches(6, 6, &mut rng).unwrap();
        assert_eq!(mb.len(), 1);
        let mut all = mb[0].clone();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());

        let mb = minibatches(6, 2, &mut rng).unwrap();
        assert_eq!(mb.len(), 3);
        let mut all: Vec<usize> = mb.iter().flatten().copied().collect();
        assert!(mb.iter().all(|c| c.len() == 2));
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());

        let a = minibatches(10, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = minibatches(10, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.last().unwrap().len(), 1);

        assert!(minibatches(4, 0, &mut rng).is_err());
        assert!(minibatches(4, 5, &mut rng).is_err());
    }

    fn policy_for(name: EnvName, seed: u64) -> (Policy, Mlp) {
        let env = make(name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = Policy::new(env.spec(), &[16], &mut rng).unwrap();
        let value = Mlp::new(&[env.spec().observation_dim, 16, 1], 1.0, &mut rng).unwrap();
        (policy, value)
    }

    #[test]
    fn collect_lengths_and_determinism() {
        for name in EnvName::ALL {
            let (policy, value) = policy_for(name, 3);
            let mut c = Collector::new(make(name), 9);
            let b = c.collect(&policy, &value, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(b.len(), 1);

            let run = || {
                let mut c = Collector::new(make(name), 9);
                collect(&policy, &value, &mut c, 300, 0.99, 0.95, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
            };
            let (a, b) = (run(), run());
            assert_eq!(a, b);
            assert_eq!(a.len(), 300);
            assert_eq!(a.advantages.len(), 300);
            assert_eq!(a.returns.len(), 300);
        }
    }

    #[test]
    fn logp_old_matches_policy() {
        let (policy, value) = policy_for(EnvName::MountaincarContinuous, 4);
        let mut c = Collector::new(make(EnvName::MountaincarContinuous), 1);
        let b = c.collect(&policy, &value, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for i in 0..b.len() {
            let lp = policy.log_prob(b.observation(i), b.action(i)).unwrap();
            assert_eq!(lp.to_bits(), b.logp_old[i].to_bits());
        }
    }

    #[test]
    fn random_cartpole_episode_length() {
        // uniform random actions: episodes last roughly 20-25 steps on average
        let mut env = make(EnvName::Cartpole);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lengths = Vec::new();
        env.reset(Some(0));
        let mut len = 0;
        for _ in 0..10_000 {
            let (s, _) = env.step(&Action::Discrete(rng.gen_range(0..2))).unwrap();
            len += 1;
            if s.done() {
                lengths.push(len as f64);
                len = 0;
                env.reset(None);
            }
        }
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        assert!((19.0..=26.0).contains(&mean), "{mean}");
    }

    #[test]
    fn csv_dump_has_one_row_per_transition() {
        let (policy, value) = policy_for(EnvName::Cartpole, 5);
        let mut c = Collector::new(make(EnvName::Cartpole), 0);
        let b = c.collect(&policy, &value, 7, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(
            lines[0],
            "step,obs0,obs1,obs2,obs3,action0,reward,value,logp_old,terminal,truncated"
        );
    }

    #[test]
    fn truncation_bootstraps_from_final_value() {
        let mut b = TrajectoryBatch::new(1, 1);
        let t = |reward, terminal, truncated| Transition {
            observation: vec![0.0],
            action: Action::Discrete(0),
            reward,
            value_estimate: 1.0,
            logp_old: -0.7,
            terminal,
            truncated,
        };
        b.push(t(1.0, false, true), 5.0).unwrap();
        b.push(t(1.0, true, false), 5.0).unwrap();
        b.last_value = 0.0;
        b.compute_advantages(0.5, 1.0).unwrap();
        // truncated: 1 + 0.5 * 5 - 1; terminal: 1 - 1
        assert_eq!(b.advantages, vec![2.5, 0.0]);
        assert_eq!(b.returns, vec![3.5, 1.0]);
    }
}
