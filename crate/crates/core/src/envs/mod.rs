//! Toy continuous-control tasks with ground-truth optimal-return oracles.

mod oracle;
mod pendulum;
mod pointmass;

pub use oracle::{oracle_return, pendulum_oracle, pointmass_oracle, Discretization, PendulumOracle};
pub use pendulum::{Pendulum, PendulumParams, PendulumState};
pub use pointmass::{PointMass, PointMassState};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Episode length in environment (physics) steps.
    pub episode_len: usize,
    /// Physics steps per agent decision.
    pub action_repeat: usize,
    /// Bounds of the reward of a single physics step.
    pub reward_range: (f64, f64),
}

impl EnvSpec {
    /// Agent decisions per episode.
    pub fn decisions(&self) -> usize {
        self.episode_len / self.action_repeat
    }

    /// Bounds of an undiscounted episode return.
    pub fn return_range(&self) -> (f64, f64) {
        let t = self.episode_len as f64;
        (self.reward_range.0 * t, self.reward_range.1 * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    /// Sum of physics-step rewards over the action repeat.
    pub reward: f64,
    pub done: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Seeded initial state; returns the first observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// One agent decision. Actions are clamped to `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> Result<Step>;

    /// Physics steps taken in the current episode.
    fn elapsed(&self) -> usize;
}

pub const ENV_NAMES: [&str; 2] = [Pendulum::NAME, PointMass::NAME];

pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        Pendulum::NAME => Ok(Box::new(Pendulum::new(PendulumParams::default()))),
        PointMass::NAME => Ok(Box::new(PointMass::new())),
        other => Err(Error::Env(format!("unknown environment `{other}` (known: {ENV_NAMES:?})"))),
    }
}

pub fn env_spec(name: &str) -> Result<EnvSpec> {
    Ok(make_env(name)?.spec().clone())
}

pub(crate) fn check_action(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(Error::Shape(format!("action has {} dims, env expects {dim}", action.len())));
    }
    if let Some(i) = action.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("action component {i}")));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}
