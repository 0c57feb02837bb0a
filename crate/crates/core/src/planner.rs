//! MPPI over latent rollouts, guided by samples from the network policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::replay::remap_log_std;
use crate::world_model::{DiagGaussian, LatentState, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub iterations: usize,
    /// Sequences drawn from the plan distribution per iteration.
    pub samples: usize,
    /// Sequences drawn by rolling the policy through the dynamics.
    pub prior_samples: usize,
    pub elites: usize,
    pub temperature: f64,
    pub sigma_floor: f64,
    /// Initial (and maximum) per-step standard deviation.
    pub sigma_init: f64,
    pub discount: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            iterations: 6,
            samples: 512,
            prior_samples: 24,
            elites: 64,
            temperature: 0.5,
            sigma_floor: 0.05,
            sigma_init: 2.0,
            discount: 0.99,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("planner: {m}")));
        if self.horizon == 0 {
            return fail("horizon must be at least 1");
        }
        if self.temperature <= 0.0 {
            return fail("temperature must be positive");
        }
        if self.elites == 0 || self.elites > self.samples + self.prior_samples {
            return fail("elites must be in 1..=samples + prior_samples");
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor <= self.sigma_init) {
            return fail("need 0 < sigma_floor <= sigma_init");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return fail("discount must be in [0, 1]");
        }
        Ok(())
    }
}

/// Time-indexed diagonal Gaussian over an action sequence, `[H, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanDistribution {
    pub horizon: usize,
    pub action_dim: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PlanDistribution {
    pub fn initial(horizon: usize, action_dim: usize, sigma: f64) -> Self {
        Self { horizon, action_dim, mu: vec![0.0; horizon * action_dim], sigma: vec![sigma; horizon * action_dim] }
    }

    pub fn step(&self, t: usize) -> DiagGaussian {
        let m = self.action_dim;
        DiagGaussian {
            mean: self.mu[t * m..(t + 1) * m].to_vec(),
            log_std: self.sigma[t * m..(t + 1) * m].iter().map(|s| s.ln()).collect(),
        }
    }

    /// Drop the first step and append `tail` (usually the policy prior at
    /// the new state) as the last one.
    pub fn shifted(&self, tail: &DiagGaussian, sigma_floor: f64) -> Self {
        let m = self.action_dim;
        let mut mu = self.mu[m.min(self.mu.len())..].to_vec();
        let mut sigma = self.sigma[m.min(self.sigma.len())..].to_vec();
        mu.extend(tail.mean.iter().map(|x| x.clamp(-1.0, 1.0)));
        sigma.extend(tail.std().into_iter().map(|s| s.max(sigma_floor)));
        Self { horizon: self.horizon, action_dim: m, mu, sigma }
    }
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub dist: PlanDistribution,
    /// First step of the final distribution; the acting and imitation target.
    pub first: DiagGaussian,
    /// Elite-weighted mean sequence, `[H * m]`.
    pub actions: Vec<f64>,
    /// Model-estimated value of `actions`.
    pub value: f64,
    /// Estimated values of the policy-prior sequences.
    pub prior_values: Vec<f64>,
    /// Best elite score of every iteration.
    pub best_scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Which log-std the policy prior samples with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorNoise {
    Policy,
    /// Log-std widened by [`remap_log_std`], used when re-planning.
    Widened,
}

/// What planning needs from a model: batched latent rollouts and the
/// policy prior, all tape-free.
pub trait LatentModel {
    fn action_dim(&self) -> usize;
    fn rewards(&self, p: &ParameterSet, z: &Tensor, a: &Tensor) -> Result<Vec<f64>>;
    fn next_latents(&self, p: &ParameterSet, z: &Tensor, a: &Tensor) -> Result<Tensor>;
    /// Terminal value of each row.
    fn values(&self, p: &ParameterSet, z: &Tensor) -> Result<Vec<f64>>;
    /// Prior `(mean, log_std)`, each `[b, m]`.
    fn policy(&self, p: &ParameterSet, z: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl LatentModel for WorldModel {
    fn action_dim(&self) -> usize {
        self.config().action_dim
    }

    fn rewards(&self, p: &ParameterSet, z: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        self.infer_rewards(p, z, a)
    }

    fn next_latents(&self, p: &ParameterSet, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        self.infer_dynamics(p, z, a)
    }

    fn values(&self, p: &ParameterSet, z: &Tensor) -> Result<Vec<f64>> {
        self.infer_values(p, z)
    }

    fn policy(&self, p: &ParameterSet, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.infer_policy(p, z)
    }
}

/// Reference problem with a known optimum: a one-step reward
/// `-(a - target)^2` per action dimension, a static latent, zero terminal
/// value and a standard-normal prior. Ignores its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    pub target: Vec<f64>,
}

impl LatentModel for QuadraticModel {
    fn action_dim(&self) -> usize {
        self.target.len()
    }

    fn rewards(&self, _: &ParameterSet, _: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let m = self.target.len();
        Ok(a.data()
            .chunks(m)
            .map(|row| -row.iter().zip(&self.target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>())
            .collect())
    }

    fn next_latents(&self, _: &ParameterSet, z: &Tensor, _: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }

    fn values(&self, _: &ParameterSet, z: &Tensor) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.rows()])
    }

    fn policy(&self, _: &ParameterSet, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = [z.rows(), self.target.len()];
        Ok((Tensor::zeros(&shape), Tensor::zeros(&shape)))
    }
}

/// Discounted latent-rollout value of many sequences at once.
///
/// `actions` holds `rows` sequences of `horizon * m` values each. Every row
/// starts from `z0`.
pub fn estimate_values<M: LatentModel + ?Sized>(
    model: &M,
    params: &ParameterSet,
    z0: &LatentState,
    actions: &[f64],
    horizon: usize,
    discount: f64,
) -> Result<Vec<f64>> {
    let m = model.action_dim();
    let width = horizon * m;
    let rows = if width == 0 { 1 } else { actions.len() / width };
    if width > 0 && !actions.len().is_multiple_of(width) {
        return Err(Error::Shape(format!("{} action values do not split into rows of {width}", actions.len())));
    }
    let l = z0.0.len();
    let mut zdata = Vec::with_capacity(rows * l);
    for _ in 0..rows {
        zdata.extend_from_slice(&z0.0);
    }
    let mut z = Tensor::new(&[rows, l], zdata)?;
    let mut total = vec![0.0; rows];
    let mut scale = 1.0;
    for h in 0..horizon {
        let mut adata = Vec::with_capacity(rows * m);
        for r in 0..rows {
            adata.extend_from_slice(&actions[r * width + h * m..r * width + (h + 1) * m]);
        }
        let a = Tensor::new(&[rows, m], adata)?;
        let rewards = model.rewards(params, &z, &a)?;
        for (t, r) in total.iter_mut().zip(&rewards) {
            *t += scale * r;
        }
        z = model.next_latents(params, &z, &a)?;
        if !z.is_finite() || rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("latent rollout diverged at step {h}")));
        }
        scale *= discount;
    }
    let terminal = model.values(params, &z)?;
    for (t, v) in total.iter_mut().zip(&terminal) {
        *t += scale * v;
    }
    if let Some(bad) = total.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("terminal value of row {bad} at step {horizon}")));
    }
    Ok(total)
}

/// Value of one `[H * m]` sequence from `z0`.
pub fn estimate_value<M: LatentModel + ?Sized>(
    model: &M,
    params: &ParameterSet,
    z0: &LatentState,
    actions: &[f64],
    discount: f64,
) -> Result<f64> {
    let m = model.action_dim();
    if !actions.len().is_multiple_of(m) {
        return Err(Error::Shape(format!("sequence length {} is not a multiple of {m}", actions.len())));
    }
    Ok(estimate_values(model, params, z0, actions, actions.len() / m, discount)?[0])
}

/// Roll the policy through the dynamics `count` times from `z0`.
fn sample_prior_sequences<M: LatentModel + ?Sized>(
    model: &M,
    params: &ParameterSet,
    z0: &LatentState,
    count: usize,
    horizon: usize,
    noise: PriorNoise,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let m = model.action_dim();
    let l = z0.0.len();
    let mut zdata = Vec::with_capacity(count * l);
    for _ in 0..count {
        zdata.extend_from_slice(&z0.0);
    }
    let mut z = Tensor::new(&[count, l], zdata)?;
    let mut seqs = vec![0.0; count * horizon * m];
    for h in 0..horizon {
        let (mean, log_std) = model.policy(params, &z)?;
        let mut adata = Vec::with_capacity(count * m);
        for (i, (mu, ls)) in mean.data().iter().zip(log_std.data()).enumerate() {
            let ls = match noise {
                PriorNoise::Policy => *ls,
                PriorNoise::Widened => remap_log_std(*ls),
            };
            let e: f64 = StandardNormal.sample(rng);
            let a = (mu + ls.exp() * e).clamp(-1.0, 1.0);
            let row = i / m;
            seqs[row * horizon * m + h * m + i % m] = a;
            adata.push(a);
        }
        if h + 1 < horizon {
            let a = Tensor::new(&[count, m], adata)?;
            z = model.next_latents(params, &z, &a)?;
        }
    }
    Ok(seqs)
}

/// Policy-guided MPPI from `z0`.
#[allow(clippy::too_many_arguments)]
pub fn plan<M: LatentModel + ?Sized>(
    model: &M,
    params: &ParameterSet,
    z0: &LatentState,
    noise: PriorNoise,
    warm_start: Option<&PlanDistribution>,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<PlanResult> {
    cfg.validate()?;
    let m = model.action_dim();
    let h = cfg.horizon;
    let width = h * m;
    let mut dist = match warm_start {
        Some(w) if w.horizon != h || w.action_dim != m => {
            return Err(Error::Planner(format!(
                "warm start is {}x{}, planner expects {h}x{m}",
                w.horizon, w.action_dim
            )))
        }
        Some(w) => w.clone(),
        None => PlanDistribution::initial(h, m, cfg.sigma_init),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let prior = if cfg.prior_samples > 0 {
        sample_prior_sequences(model, params, z0, cfg.prior_samples, h, noise, &mut rng)?
    } else {
        Vec::new()
    };
    let prior_values =
        if prior.is_empty() { Vec::new() } else { estimate_values(model, params, z0, &prior, h, cfg.discount)? };

    let mut best_scores = Vec::with_capacity(cfg.iterations);
    let mut best_prev: Option<(Vec<f64>, f64)> = None;
    for _ in 0..cfg.iterations {
        let mut cands = Vec::with_capacity((cfg.samples + 2) * width);
        for _ in 0..cfg.samples {
            for k in 0..width {
                let e: f64 = StandardNormal.sample(&mut rng);
                cands.push((dist.mu[k] + dist.sigma[k] * e).clamp(-1.0, 1.0));
            }
        }
        cands.extend_from_slice(&dist.mu);
        let mut scores = estimate_values(model, params, z0, &cands, h, cfg.discount)?;
        // carried over with its score so the best elite never regresses
        if let Some((seq, score)) = &best_prev {
            cands.extend_from_slice(seq);
            scores.push(*score);
        }
        cands.extend_from_slice(&prior);
        scores.extend_from_slice(&prior_values);

        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !scores[i].is_nan()).collect();
        if order.is_empty() {
            return Err(Error::Planner("every candidate scored NaN".into()));
        }
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(cfg.elites);
        let top = scores[order[0]];
        let bottom = scores[*order.last().expect("non-empty")];
        let range = top - bottom + 1e-9;
        let mut weights: Vec<f64> =
            order.iter().map(|&i| ((scores[i] - top) / range / cfg.temperature).exp()).collect();
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);

        let mut mu = vec![0.0; width];
        for (&i, w) in order.iter().zip(&weights) {
            for k in 0..width {
                mu[k] += w * cands[i * width + k];
            }
        }
        let mut var = vec![0.0; width];
        for (&i, w) in order.iter().zip(&weights) {
            for k in 0..width {
                let d = cands[i * width + k] - mu[k];
                var[k] += w * d * d;
            }
        }
        dist.mu = mu.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        dist.sigma = var.iter().map(|v| v.sqrt().clamp(cfg.sigma_floor, cfg.sigma_init)).collect();
        best_scores.push(top);
        best_prev = Some((cands[order[0] * width..(order[0] + 1) * width].to_vec(), top));
    }

    let value = estimate_value(model, params, z0, &dist.mu, cfg.discount)?;
    Ok(PlanResult { first: dist.step(0), actions: dist.mu.clone(), dist, value, prior_values, best_scores })
}

/// First action of a plan.
pub fn act(result: &PlanResult, mode: ActMode, rng: &mut impl rand::Rng) -> Vec<f64> {
    match mode {
        ActMode::Deterministic => result.first.mean.clone(),
        ActMode::Stochastic => result.first.sample_clamped(rng),
    }
}

/// Value gain of the selected sequence over the mean policy-prior sequence.
pub fn delta_q(result: &PlanResult) -> Result<f64> {
    if result.prior_values.is_empty() {
        return Err(Error::Planner("no policy-prior sequences to compare against".into()));
    }
    let mean = result.prior_values.iter().sum::<f64>() / result.prior_values.len() as f64;
    Ok(result.value - mean)
}
