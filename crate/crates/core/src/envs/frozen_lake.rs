use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{discrete_action, ActionSpace, EnvName, EnvSpec, EnvState, Environment, EpisodeClock};
use crate::distributions::Action;
use crate::error::{Error, Result};

pub const MAP_4X4: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];

pub const LEFT: usize = 0;
pub const DOWN: usize = 1;
pub const RIGHT: usize = 2;
pub const UP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tile {
    Start,
    Frozen,
    Hole,
    Goal,
}

/// 4x4 slippery grid world with one-hot observations.
///
/// The agent moves in the intended direction with probability `1 - slip` and
/// slides to each perpendicular direction with probability `slip / 2`.
#[derive(Debug, Clone)]
pub struct FrozenLake {
    spec: EnvSpec,
    tiles: Vec<Tile>,
    size: usize,
    slip: f64,
    cell: usize,
    clock: EpisodeClock,
    rng: ChaCha8Rng,
}

impl Default for FrozenLake {
    fn default() -> Self {
        Self::new()
    }
}

impl FrozenLake {
    pub fn new() -> Self {
        Self::with_slip(2.0 / 3.0).expect("default slip probability is valid")
    }

    pub fn with_slip(slip: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&slip) {
            return Err(Error::invalid(format!("slip probability {slip} outside [0, 1]")));
        }
        let tiles = MAP_4X4
            .iter()
            .flat_map(|row| row.chars())
            .map(|c| match c {
                'S' => Tile::Start,
                'F' => Tile::Frozen,
                'H' => Tile::Hole,
                _ => Tile::Goal,
            })
            .collect();
        Ok(FrozenLake {
            spec: EnvSpec {
                name: EnvName::Frozenlake,
                observation_dim: 16,
                action_space: ActionSpace::Discrete(4),
                max_episode_steps: 100,
                reward_range: (0.0, 1.0),
            },
            tiles,
            size: 4,
            slip,
            cell: 0,
            clock: EpisodeClock::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn n_states(&self) -> usize {
        self.tiles.len()
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn is_terminal_cell(&self, cell: usize) -> bool {
        matches!(self.tiles[cell], Tile::Hole | Tile::Goal)
    }

    fn shift(&self, cell: usize, dir: usize) -> usize {
        let (row, col) = (cell / self.size, cell % self.size);
        let (row, col) = match dir {
            LEFT => (row, col.saturating_sub(1)),
            DOWN => ((row + 1).min(self.size - 1), col),
            RIGHT => (row, (col + 1).min(self.size - 1)),
            _ => (row.saturating_sub(1), col),
        };
        row * self.size + col
    }

    /// `(next_cell, probability)` outcomes of taking `action` in `cell`; zero-probability
    /// outcomes are omitted. Terminal cells are absorbing.
    pub fn transitions(&self, cell: usize, action: usize) -> Vec<(usize, f64)> {
        if self.is_terminal_cell(cell) {
            return vec![(cell, 1.0)];
        }
        let side = 0.5 * self.slip;
        [((action + 3) % 4, side), (action, 1.0 - self.slip), ((action + 1) % 4, side)]
            .into_iter()
            .filter(|&(_, p)| p > 0.0)
            .map(|(dir, p)| (self.shift(cell, dir), p))
            .collect()
    }

    fn observe(&self, terminal: bool, truncated: bool) -> EnvState {
        let mut observation = vec![0.0; self.n_states()];
        observation[self.cell] = 1.0;
        EnvState {
            observation,
            terminal,
            truncated,
            step_index: self.clock.steps,
        }
    }
}

impl Environment for FrozenLake {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> EnvState {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.cell = 0;
        self.clock.start();
        self.observe(false, false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        self.clock.ensure_running()?;
        let a = discrete_action(action, 4)?;
        let outcomes = self.transitions(self.cell, a);
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut next = outcomes.last().map(|o| o.0).unwrap_or(self.cell);
        for &(cell, p) in &outcomes {
            acc += p;
            if u < acc {
                next = cell;
                break;
            }
        }
        self.cell = next;
        let terminal = self.is_terminal_cell(next);
        let reward = if self.tiles[next] == Tile::Goal { 1.0 } else { 0.0 };
        let (_, truncated) = self.clock.tick(terminal, self.spec.max_episode_steps)?;
        Ok((self.observe(terminal, truncated), reward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_starts_at_cell_zero() {
        let mut env = FrozenLake::new();
        let s = env.reset(Some(4));
        assert_eq!(s.observation[0], 1.0);
        assert_eq!(s.observation.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn deterministic_path_reaches_goal() {
        let mut env = FrozenLake::with_slip(0.0).unwrap();
        env.reset(Some(0));
        let path = [RIGHT, RIGHT, DOWN, DOWN, DOWN, RIGHT];
        let mut last = None;
        for (i, &a) in path.iter().enumerate() {
            let (s, r) = env.step(&Action::Discrete(a)).unwrap();
            if i + 1 < path.len() {
                assert!(!s.done(), "ended early at step {i}");
                assert_eq!(r, 0.0);
            }
            last = Some((s, r));
        }
        let (s, r) = last.unwrap();
        assert!(s.terminal);
        assert_eq!(r, 1.0);
        assert_eq!(env.cell(), 15);
    }

    #[test]
    fn holes_terminate_without_reward() {
        let mut env = FrozenLake::with_slip(0.0).unwrap();
        env.reset(Some(0));
        env.step(&Action::Discrete(RIGHT)).unwrap();
        let (s, r) = env.step(&Action::Discrete(DOWN)).unwrap();
        assert!(s.terminal);
        assert_eq!(r, 0.0);
        assert_eq!(env.cell(), 5);
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        for slip in [0.0, 0.3, 2.0 / 3.0, 1.0] {
            let env = FrozenLake::with_slip(slip).unwrap();
            for s in 0..16 {
                for a in 0..4 {
                    let total: f64 = env.transitions(s, a).iter().map(|t| t.1).sum();
                    assert!((total - 1.0).abs() < 1e-12, "slip {slip}, s {s}, a {a}");
                }
            }
        }
        assert!(FrozenLake::with_slip(1.5).is_err());
    }

    #[test]
    fn default_slip_matches_thirds() {
        let env = FrozenLake::new();
        let t = env.transitions(0, RIGHT);
        assert_eq!(t.len(), 3);
        for (_, p) in t {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn episodes_truncate_at_100() {
        let mut env = FrozenLake::with_slip(0.0).unwrap();
        env.reset(Some(0));
        for i in 1..=100 {
            let (s, _) = env.step(&Action::Discrete(UP)).unwrap();
            assert_eq!(s.truncated, i == 100);
            assert!(!s.terminal);
        }
    }
}
