use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{discrete_action, ActionSpace, EnvName, EnvSpec, EnvState, Environment, EpisodeClock};
use crate::distributions::Action;
use crate::error::Result;

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

/// Cart-pole balancing with explicit Euler integration. Actions: 0 pushes left, 1 pushes right.
#[derive(Debug, Clone)]
pub struct CartPole {
    spec: EnvSpec,
    state: [f64; 4],
    clock: EpisodeClock,
    rng: ChaCha8Rng,
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl CartPole {
    pub fn new() -> Self {
        CartPole {
            spec: EnvSpec {
                name: EnvName::Cartpole,
                observation_dim: 4,
                action_space: ActionSpace::Discrete(2),
                max_episode_steps: 500,
                reward_range: (0.0, 1.0),
            },
            state: [0.0; 4],
            clock: EpisodeClock::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// `[x, x_dot, theta, theta_dot]`
    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Overrides the physical state of the running episode.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
    }

    fn observe(&self, terminal: bool, truncated: bool) -> EnvState {
        EnvState {
            observation: self.state.to_vec(),
            terminal,
            truncated,
            step_index: self.clock.steps,
        }
    }
}

impl Environment for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> EnvState {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        for s in &mut self.state {
            *s = self.rng.gen_range(-0.05..0.05);
        }
        self.clock.start();
        self.observe(false, false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        self.clock.ensure_running()?;
        let a = discrete_action(action, 2)?;
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if a == 1 { FORCE_MAG } else { -FORCE_MAG };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        let terminal = self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT;
        let (_, truncated) = self.clock.tick(terminal, self.spec.max_episode_steps)?;
        Ok((self.observe(terminal, truncated), 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_seeded_and_small() {
        let mut a = CartPole::new();
        let mut b = CartPole::new();
        let sa = a.reset(Some(7));
        let sb = b.reset(Some(7));
        assert_eq!(sa, sb);
        assert!(sa.observation.iter().all(|v| v.abs() <= 0.05));
        let sc = a.reset(Some(8));
        assert_ne!(sa.observation, sc.observation);
    }

    #[test]
    fn single_euler_step_from_rest() {
        let mut env = CartPole::new();
        env.reset(Some(0));
        env.set_state([0.0; 4]);
        let (s, r) = env.step(&Action::Discrete(1)).unwrap();
        // hand integration at theta = 0: temp = F / M, theta_acc = -temp / (l (4/3 - m_p / M))
        let temp = 10.0 / 1.1;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let x_acc = temp - 0.05 * theta_acc / 1.1;
        assert_eq!(r, 1.0);
        assert_eq!(s.observation[0], 0.0);
        assert!((s.observation[1] - 0.02 * x_acc).abs() < 1e-15);
        assert!((s.observation[1] - 0.195_121_951).abs() < 1e-8);
        assert_eq!(s.observation[2], 0.0);
        assert!((s.observation[3] - 0.02 * theta_acc).abs() < 1e-15);
    }

    #[test]
    fn return_equals_length_and_caps_at_500() {
        let mut env = CartPole::new();
        // constant push topples the pole early
        env.reset(Some(1));
        let (mut ret, mut len) = (0.0, 0);
        loop {
            let (s, r) = env.step(&Action::Discrete(1)).unwrap();
            ret += r;
            len += 1;
            if s.done() {
                assert!(s.terminal && !s.truncated);
                break;
            }
        }
        assert_eq!(ret, len as f64);
        assert!(len < 500);

        // a simple angle controller survives to the cap and is truncated
        env.reset(Some(2));
        let mut obs = env.state();
        let mut steps = 0;
        loop {
            let a = if obs[2] + 0.5 * obs[3] > 0.0 { 1 } else { 0 };
            let (s, _) = env.step(&Action::Discrete(a)).unwrap();
            steps += 1;
            obs = env.state();
            if s.done() {
                assert!(s.truncated && !s.terminal, "controller failed at {steps}");
                break;
            }
        }
        assert_eq!(steps, 500);
    }
}
