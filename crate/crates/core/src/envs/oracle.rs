//! Near-optimal reference returns.
//!
//! Pendulum: finite-horizon backward induction on a bilinear-interpolated
//! (angle, velocity) grid, followed by a greedy rollout in the exact
//! simulator. Point-mass: best saturated PD controller from a gain sweep.

use std::f64::consts::PI;

use super::pendulum::{Pendulum, PendulumParams, PendulumState};
use super::pointmass::{PointMass, PointMassState};
use super::Env;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discretization {
    pub theta_bins: usize,
    pub omega_bins: usize,
    pub actions: usize,
}

impl Default for Discretization {
    fn default() -> Self {
        Self { theta_bins: 201, omega_bins: 201, actions: 21 }
    }
}

impl Discretization {
    pub fn refined(&self) -> Self {
        Self { theta_bins: 2 * self.theta_bins - 1, omega_bins: 2 * self.omega_bins - 1, actions: 2 * self.actions - 1 }
    }
}

/// Time-indexed value tables for the pendulum.
pub struct PendulumOracle {
    env: Pendulum,
    disc: Discretization,
    /// `values[t]` is the optimal return-to-go with `t` decisions taken.
    values: Vec<Vec<f64>>,
}

struct Interp {
    idx: [u32; 4],
    w: [f64; 4],
}

impl PendulumOracle {
    fn theta_step(&self) -> f64 {
        2.0 * PI / self.disc.theta_bins as f64
    }

    fn omega_step(&self) -> f64 {
        2.0 * self.env.params().max_speed / (self.disc.omega_bins - 1) as f64
    }

    fn grid_state(&self, i: usize, j: usize) -> PendulumState {
        PendulumState {
            theta: -PI + i as f64 * self.theta_step(),
            omega: -self.env.params().max_speed + j as f64 * self.omega_step(),
        }
    }

    fn interp(&self, s: &PendulumState) -> Interp {
        let nt = self.disc.theta_bins;
        let nw = self.disc.omega_bins;
        let ft = (s.theta + PI) / self.theta_step();
        let i0 = ft.floor();
        let at = ft - i0;
        let i0 = (i0 as i64).rem_euclid(nt as i64) as usize;
        let i1 = (i0 + 1) % nt;
        let fw = ((s.omega + self.env.params().max_speed) / self.omega_step()).clamp(0.0, (nw - 1) as f64);
        let j0 = (fw.floor() as usize).min(nw - 2);
        let aw = fw - j0 as f64;
        let j1 = j0 + 1;
        let at_ = |i: usize, j: usize| (i * nw + j) as u32;
        Interp {
            idx: [at_(i0, j0), at_(i1, j0), at_(i0, j1), at_(i1, j1)],
            w: [(1.0 - at) * (1.0 - aw), at * (1.0 - aw), (1.0 - at) * aw, at * aw],
        }
    }

    fn lookup(values: &[f64], ip: &Interp) -> f64 {
        ip.idx.iter().zip(&ip.w).map(|(&i, w)| values[i as usize] * w).sum()
    }

    fn action(&self, k: usize) -> f64 {
        -1.0 + 2.0 * k as f64 / (self.disc.actions - 1) as f64
    }

    pub fn solve(params: PendulumParams, disc: Discretization) -> Self {
        let env = Pendulum::new(params);
        let horizon = env.spec().decisions();
        let mut oracle = Self { env, disc, values: Vec::new() };
        let n = disc.theta_bins * disc.omega_bins;
        let mut transitions = Vec::with_capacity(n * disc.actions);
        for i in 0..disc.theta_bins {
            for j in 0..disc.omega_bins {
                let s = oracle.grid_state(i, j);
                for k in 0..disc.actions {
                    let (next, r) = oracle.env.decision_step(s, oracle.action(k));
                    transitions.push((oracle.interp(&next), r));
                }
            }
        }
        let mut values = vec![vec![0.0; n]; horizon + 1];
        for t in (0..horizon).rev() {
            let (head, tail) = values.split_at_mut(t + 1);
            let next = &tail[0];
            for (s, v) in head[t].iter_mut().enumerate() {
                *v = transitions[s * disc.actions..(s + 1) * disc.actions]
                    .iter()
                    .map(|(ip, r)| r + Self::lookup(next, ip))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        oracle.values = values;
        oracle
    }

    /// Greedy action at decision `t` from the exact one-step model.
    pub fn policy(&self, s: PendulumState, t: usize) -> f64 {
        let next_values = &self.values[(t + 1).min(self.values.len() - 1)];
        (0..self.disc.actions)
            .map(|k| {
                let a = self.action(k);
                let (n, r) = self.env.decision_step(s, a);
                (a, r + Self::lookup(next_values, &self.interp(&n)))
            })
            .fold((0.0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
            .0
    }

    /// Undiscounted return of the greedy controller from `seed`'s reset.
    pub fn rollout(&self, seed: u64) -> f64 {
        let mut env = self.env.clone();
        env.reset(seed);
        let mut total = 0.0;
        for t in 0..env.spec().decisions() {
            let s = env.state().expect("reset");
            let step = env.step(&[self.policy(s, t)]).expect("episode active");
            total += step.reward;
        }
        total
    }
}

pub fn pendulum_oracle(disc: Discretization) -> PendulumOracle {
    PendulumOracle::solve(PendulumParams::default(), disc)
}

fn pd_return(start: PointMassState, kp: f64, kd: f64, steps: usize) -> f64 {
    let mut s = start;
    let mut total = 0.0;
    for _ in 0..steps {
        let a = [0, 1].map(|i| (-(kp * s.pos[i] + kd * s.vel[i])).clamp(-1.0, 1.0));
        let (n, r) = PointMass::physics_step(s, a);
        s = n;
        total += r;
    }
    total
}

/// Best return over a sweep of saturated PD gains.
pub fn pointmass_oracle(start: PointMassState) -> f64 {
    let steps = PointMass::new().spec().episode_len;
    let gains: Vec<f64> = (0..40).map(|i| 0.25 * 1.15f64.powi(i)).collect();
    let mut best = f64::NEG_INFINITY;
    for &kp in &gains {
        for &kd in &gains {
            best = best.max(pd_return(start, kp, kd, steps));
        }
    }
    best
}

/// Mean near-optimal return over the resets produced by `seeds`.
pub fn oracle_return(env: &str, disc: Discretization, seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Config("oracle_return needs at least one seed".into()));
    }
    let total: f64 = match env {
        Pendulum::NAME => {
            let oracle = pendulum_oracle(disc);
            seeds.iter().map(|&s| oracle.rollout(s)).sum()
        }
        PointMass::NAME => seeds.iter().map(|&s| pointmass_oracle(PointMass::initial_state(s))).sum(),
        other => return Err(Error::Env(format!("no oracle for `{other}`"))),
    };
    Ok(total / seeds.len() as f64)
}
