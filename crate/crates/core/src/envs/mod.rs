//! Seedable classic-control environments behind one interface.

mod cartpole;
mod frozen_lake;
mod mountain_car;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cartpole::CartPole;
pub use frozen_lake::{FrozenLake, DOWN, LEFT, MAP_4X4, RIGHT, UP};
pub use mountain_car::MountainCarContinuous;

use crate::distributions::Action;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Cartpole,
    MountaincarContinuous,
    Frozenlake,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [EnvName::Cartpole, EnvName::MountaincarContinuous, EnvName::Frozenlake];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Cartpole => "cartpole",
            EnvName::MountaincarContinuous => "mountaincar_continuous",
            EnvName::Frozenlake => "frozenlake",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cartpole" | "cartpole-v1" => Ok(EnvName::Cartpole),
            "mountaincar_continuous" | "mountaincarcontinuous-v0" => Ok(EnvName::MountaincarContinuous),
            "frozenlake" | "frozenlake-v1" => Ok(EnvName::Frozenlake),
            other => Err(Error::invalid(format!("unknown environment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    /// Width of the policy head: number of logits or action dimensions.
    pub fn policy_outputs(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }

    /// Width of an action when flattened to numbers.
    pub fn action_width(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: EnvName,
    pub observation_dim: usize,
    pub action_space: ActionSpace,
    pub max_episode_steps: usize,
    pub reward_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
    pub step_index: usize,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode. `Some(seed)` reseeds the environment's generator;
    /// `None` continues the current stream.
    fn reset(&mut self, seed: Option<u64>) -> EnvState;

    /// Advances one step. Fails if no episode is running.
    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)>;
}

pub fn env_spec(name: &str) -> Result<EnvSpec> {
    Ok(make(name.parse()?).spec().clone())
}

pub fn make(name: EnvName) -> Box<dyn Environment> {
    match name {
        EnvName::Cartpole => Box::new(CartPole::new()),
        EnvName::MountaincarContinuous => Box::new(MountainCarContinuous::new()),
        EnvName::Frozenlake => Box::new(FrozenLake::new()),
    }
}

pub(crate) fn discrete_action(action: &Action, n: usize) -> Result<usize> {
    match action {
        Action::Discrete(i) if *i < n => Ok(*i),
        Action::Discrete(i) => Err(Error::invalid(format!("action {i} outside 0..{n}"))),
        Action::Continuous(_) => Err(Error::invalid("continuous action given to a discrete environment")),
    }
}

/// Clips a continuous action into the box, checking its width.
pub(crate) fn box_action(action: &Action, low: &[f64], high: &[f64]) -> Result<Vec<f64>> {
    match action {
        Action::Continuous(v) if v.len() == low.len() => Ok(v
            .iter()
            .zip(low.iter().zip(high))
            .map(|(a, (lo, hi))| a.max(*lo).min(*hi))
            .collect()),
        Action::Continuous(v) => Err(Error::invalid(format!(
            "action has {} components, space has {}",
            v.len(),
            low.len()
        ))),
        Action::Discrete(_) => Err(Error::invalid("discrete action given to a continuous environment")),
    }
}

/// Episode bookkeeping shared by the environments.
#[derive(Debug, Clone, Default)]
pub(crate) struct EpisodeClock {
    pub steps: usize,
    pub running: bool,
}

impl EpisodeClock {
    pub fn start(&mut self) {
        self.steps = 0;
        self.running = true;
    }

    pub fn tick(&mut self, terminal: bool, cap: usize) -> Result<(usize, bool)> {
        if !self.running {
            return Err(Error::InvalidState("step called without a running episode; call reset".into()));
        }
        self.steps += 1;
        let truncated = !terminal && self.steps >= cap;
        if terminal || truncated {
            self.running = false;
        }
        Ok((self.steps, truncated))
    }

    pub fn ensure_running(&self) -> Result<()> {
        if self.running {
            Ok(())
        } else {
            Err(Error::InvalidState("step called without a running episode; call reset".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declared_specs() {
        let c = env_spec("cartpole").unwrap();
        assert_eq!((c.observation_dim, c.action_space.clone(), c.max_episode_steps), (4, ActionSpace::Discrete(2), 500));
        let f = env_spec("frozenlake").unwrap();
        assert_eq!((f.observation_dim, f.action_space.clone(), f.max_episode_steps), (16, ActionSpace::Discrete(4), 100));
        let m = env_spec("mountaincar_continuous").unwrap();
        assert_eq!(m.observation_dim, 2);
        assert_eq!(m.action_space, ActionSpace::Box { low: vec![-1.0], high: vec![1.0] });
        assert_eq!(m.max_episode_steps, 999);
        assert!(env_spec("pendulum").is_err());
    }

    #[test]
    fn names_round_trip() {
        for n in EnvName::ALL {
            assert_eq!(n.as_str().parse::<EnvName>().unwrap(), n);
        }
    }

    #[test]
    fn step_after_episode_end_is_an_error() {
        for name in EnvName::ALL {
            let mut env = make(name);
            let action = match env.spec().action_space {
                ActionSpace::Discrete(_) => Action::Discrete(0),
                ActionSpace::Box { .. } => Action::Continuous(vec![0.0]),
            };
            assert!(env.step(&action).is_err(), "{name}: step before reset");
            env.reset(Some(0));
            let mut done = false;
            for _ in 0..2000 {
                let (s, _) = env.step(&action).unwrap();
                assert!(!(s.terminal && s.truncated));
                if s.done() {
                    done = true;
                    break;
                }
            }
            assert!(done, "{name}: episode never ended");
            assert!(matches!(env.step(&action), Err(Error::InvalidState(_))));
        }
    }

    #[test]
    fn full_episodes_are_reproducible() {
        for name in EnvName::ALL {
            let run = || {
                let mut env = make(name);
                let mut trace = Vec::new();
                let mut s = env.reset(Some(42));
                trace.push(s.observation.clone());
                let mut t = 0;
                while !s.done() {
                    let action = match env.spec().action_space {
                        ActionSpace::Discrete(n) => Action::Discrete((t * 7 + 3) % n),
                        ActionSpace::Box { .. } => Action::Continuous(vec![((t as f64) * 0.37).sin()]),
                    };
                    let (next, r) = env.step(&action).unwrap();
                    trace.push(next.observation.clone());
                    trace.push(vec![r]);
                    s = next;
                    t += 1;
                }
                trace
            };
            let a = run();
            let b = run();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn wrong_action_kinds_rejected() {
        let mut env = make(EnvName::Cartpole);
        env.reset(Some(0));
        assert!(env.step(&Action::Discrete(2)).is_err());
        assert!(env.step(&Action::Continuous(vec![0.0])).is_err());
        let mut env = make(EnvName::MountaincarContinuous);
        env.reset(Some(0));
        assert!(env.step(&Action::Continuous(vec![0.0, 1.0])).is_err());
        assert!(env.step(&Action::Discrete(0)).is_err());
    }
}
