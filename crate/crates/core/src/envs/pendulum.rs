use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_action, Env, EnvSpec, Step};
use crate::error::{Error, Result};

/// Physical constants. The angle is measured from upright, so
/// `theta = pi` is the hanging rest position.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumParams {
    /// Gravity over length, `g / l`.
    pub gravity: f64,
    /// Angular acceleration per unit action.
    pub torque_scale: f64,
    /// Seconds per physics step.
    pub dt: f64,
    /// Semi-implicit Euler sub-steps per physics step.
    pub substeps: usize,
    /// Hard limit on angular velocity.
    pub max_speed: f64,
    /// Reward penalty per squared action.
    pub action_cost: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { gravity: 10.0, torque_scale: 5.0, dt: 0.05, substeps: 10, max_speed: 12.0, action_cost: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

impl PendulumState {
    pub fn observation(&self, max_speed: f64) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega / max_speed]
    }
}

/// Torque-limited pendulum swing-up.
#[derive(Clone, Debug)]
pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
    state: Option<PendulumState>,
    elapsed: usize,
}

impl Pendulum {
    pub const NAME: &'static str = "pendulum_swingup";

    pub fn new(params: PendulumParams) -> Self {
        let spec = EnvSpec {
            name: Self::NAME,
            obs_dim: 3,
            action_dim: 1,
            episode_len: 200,
            action_repeat: 2,
            reward_range: (-params.action_cost, 1.0),
        };
        Self { params, spec, state: None, elapsed: 0 }
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    pub fn state(&self) -> Option<PendulumState> {
        self.state
    }

    pub fn set_state(&mut self, state: PendulumState) {
        self.state = Some(state);
        self.elapsed = 0;
    }

    /// Seeded start near the hanging position.
    pub fn initial_state(seed: u64) -> PendulumState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PendulumState { theta: PI + rng.random_range(-0.1..0.1), omega: rng.random_range(-0.1..0.1) }
    }

    pub fn step_reward(&self, s: &PendulumState, action: f64) -> f64 {
        0.5 * (1.0 + s.theta.cos()) - self.params.action_cost * action * action
    }

    /// One physics step; returns the next state and its reward.
    pub fn physics_step(&self, s: PendulumState, action: f64) -> (PendulumState, f64) {
        let p = &self.params;
        let h = p.dt / p.substeps as f64;
        let (mut theta, mut omega) = (s.theta, s.omega);
        for _ in 0..p.substeps {
            omega += h * (p.gravity * theta.sin() + p.torque_scale * action);
            omega = omega.clamp(-p.max_speed, p.max_speed);
            theta += h * omega;
        }
        theta = (theta + PI).rem_euclid(2.0 * PI) - PI;
        let next = PendulumState { theta, omega };
        (next, self.step_reward(&next, action))
    }

    /// One agent decision (action repeat applied).
    pub fn decision_step(&self, mut s: PendulumState, action: f64) -> (PendulumState, f64) {
        let mut total = 0.0;
        for _ in 0..self.spec.action_repeat {
            let (n, r) = self.physics_step(s, action);
            s = n;
            total += r;
        }
        (s, total)
    }

    /// Mechanical energy relative to the hanging rest state.
    pub fn energy(&self, s: &PendulumState) -> f64 {
        0.5 * s.omega * s.omega + self.params.gravity * (1.0 + s.theta.cos())
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let s = Self::initial_state(seed);
        self.state = Some(s);
        self.elapsed = 0;
        s.observation(self.params.max_speed)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let a = check_action(action, 1)?[0];
        let s = self.state.ok_or_else(|| Error::Env("step before reset".into()))?;
        if self.elapsed >= self.spec.episode_len {
            return Err(Error::Env("step after episode end".into()));
        }
        let (next, reward) = self.decision_step(s, a);
        self.state = Some(next);
        self.elapsed += self.spec.action_repeat;
        Ok(Step { obs: next.observation(self.params.max_speed), reward, done: self.elapsed >= self.spec.episode_len })
    }

    fn elapsed(&self) -> usize {
        self.elapsed
    }
}
