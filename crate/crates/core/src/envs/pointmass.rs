use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_action, Env, EnvSpec, Step};
use crate::error::{Error, Result};

/// Planar double integrator; the goal sits at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMassState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl PointMassState {
    pub fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn distance(&self) -> f64 {
        self.pos[0].hypot(self.pos[1])
    }
}

#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    state: Option<PointMassState>,
    elapsed: usize,
}

impl PointMass {
    pub const NAME: &'static str = "pointmass_easy";
    pub const DT: f64 = 0.1;
    /// Acceleration per unit action.
    pub const ACCEL: f64 = 2.0;

    pub fn new() -> Self {
        let spec = EnvSpec {
            name: Self::NAME,
            obs_dim: 4,
            action_dim: 2,
            episode_len: 100,
            action_repeat: 1,
            reward_range: (0.0, 1.0),
        };
        Self { spec, state: None, elapsed: 0 }
    }

    pub fn initial_state(seed: u64) -> PointMassState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointMassState { pos: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], vel: [0.0, 0.0] }
    }

    pub fn set_state(&mut self, state: PointMassState) {
        self.state = Some(state);
        self.elapsed = 0;
    }

    /// Semi-implicit Euler step; reward is `exp(-distance)` after the move.
    pub fn physics_step(s: PointMassState, action: [f64; 2]) -> (PointMassState, f64) {
        let mut n = s;
        for i in 0..2 {
            n.vel[i] += Self::DT * Self::ACCEL * action[i];
            n.pos[i] += Self::DT * n.vel[i];
        }
        (n, (-n.distance()).exp())
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let s = Self::initial_state(seed);
        self.state = Some(s);
        self.elapsed = 0;
        s.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let a = check_action(action, 2)?;
        let s = self.state.ok_or_else(|| Error::Env("step before reset".into()))?;
        if self.elapsed >= self.spec.episode_len {
            return Err(Error::Env("step after episode end".into()));
        }
        let (next, reward) = Self::physics_step(s, [a[0], a[1]]);
        self.state = Some(next);
        self.elapsed += 1;
        Ok(Step { obs: next.observation(), reward, done: self.elapsed >= self.spec.episode_len })
    }

    fn elapsed(&self) -> usize {
        self.elapsed
    }
}
