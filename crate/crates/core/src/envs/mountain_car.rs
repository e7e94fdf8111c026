use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{box_action, ActionSpace, EnvName, EnvSpec, EnvState, Environment, EpisodeClock};
use crate::distributions::Action;
use crate::error::Result;

pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.45;
const POWER: f64 = 0.0015;

/// Under-powered car in a valley with a continuous force in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct MountainCarContinuous {
    spec: EnvSpec,
    position: f64,
    velocity: f64,
    clock: EpisodeClock,
    rng: ChaCha8Rng,
}

impl Default for MountainCarContinuous {
    fn default() -> Self {
        Self::new()
    }
}

impl MountainCarContinuous {
    pub fn new() -> Self {
        MountainCarContinuous {
            spec: EnvSpec {
                name: EnvName::MountaincarContinuous,
                observation_dim: 2,
                action_space: ActionSpace::Box {
                    low: vec![-1.0],
                    high: vec![1.0],
                },
                max_episode_steps: 999,
                reward_range: (f64::NEG_INFINITY, f64::INFINITY),
            },
            position: 0.0,
            velocity: 0.0,
            clock: EpisodeClock::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn set_state(&mut self, position: f64, velocity: f64) {
        self.position = position;
        self.velocity = velocity;
    }

    fn observe(&self, terminal: bool, truncated: bool) -> EnvState {
        EnvState {
            observation: vec![self.position, self.velocity],
            terminal,
            truncated,
            step_index: self.clock.steps,
        }
    }
}

impl Environment for MountainCarContinuous {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> EnvState {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.position = self.rng.gen_range(-0.6..-0.4);
        self.velocity = 0.0;
        self.clock.start();
        self.observe(false, false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        self.clock.ensure_running()?;
        let force = box_action(action, &[-1.0], &[1.0])?[0];
        self.velocity += force * POWER - 0.0025 * (3.0 * self.position).cos();
        self.velocity = self.velocity.clamp(-MAX_SPEED, MAX_SPEED);
        self.position += self.velocity;
        self.position = self.position.clamp(MIN_POSITION, MAX_POSITION);
        if self.position == MIN_POSITION && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        let terminal = self.position >= GOAL_POSITION && self.velocity >= 0.0;
        let mut reward = if terminal { 100.0 } else { 0.0 };
        reward -= 0.1 * force * force;
        let (_, truncated) = self.clock.tick(terminal, self.spec.max_episode_steps)?;
        Ok((self.observe(terminal, truncated), reward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_has_zero_velocity() {
        let mut env = MountainCarContinuous::new();
        for seed in 0..20 {
            let s = env.reset(Some(seed));
            assert_eq!(s.observation[1], 0.0);
            assert!((-0.6..=-0.4).contains(&s.observation[0]));
        }
    }

    #[test]
    fn gravity_only_update() {
        let mut env = MountainCarContinuous::new();
        env.reset(Some(0));
        env.set_state(-0.5, 0.0);
        let (s, r) = env.step(&Action::Continuous(vec![0.0])).unwrap();
        let v = -(-1.5f64).cos() * 0.0025;
        assert_eq!(s.observation[1], v);
        assert!((v + 0.000_177).abs() < 1e-6);
        assert_eq!(s.observation[0], -0.5 + v);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn action_is_clipped_and_charged() {
        let mut env = MountainCarContinuous::new();
        env.reset(Some(0));
        env.set_state(-0.5, 0.0);
        let (s, r) = env.step(&Action::Continuous(vec![5.0])).unwrap();
        assert!((r + 0.1).abs() < 1e-15);
        let v = 0.0015 - (-1.5f64).cos() * 0.0025;
        assert!((s.observation[1] - v).abs() < 1e-15);
    }

    #[test]
    fn reaching_the_goal_pays_100() {
        let mut env = MountainCarContinuous::new();
        env.reset(Some(0));
        env.set_state(0.44, 0.05);
        let (s, r) = env.step(&Action::Continuous(vec![1.0])).unwrap();
        assert!(s.terminal);
        assert!((r - 99.9).abs() < 1e-12);
    }

    #[test]
    fn state_stays_in_bounds() {
        let mut env = MountainCarContinuous::new();
        let mut s = env.reset(Some(3));
        let mut t = 0u32;
        while !s.done() {
            // bang-bang on velocity sign pumps energy into the system
            let a = if s.observation[1] >= 0.0 { 1.0 } else { -1.0 };
            let (n, _) = env.step(&Action::Continuous(vec![a * if t % 50 < 3 { -1.0 } else { 1.0 }])).unwrap();
            assert!((MIN_POSITION..=MAX_POSITION).contains(&n.observation[0]));
            assert!((-MAX_SPEED..=MAX_SPEED).contains(&n.observation[1]));
            s = n;
            t += 1;
        }
    }
}
