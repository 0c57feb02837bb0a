use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::envs::{make_env, Env};
use crate::error::{Error, Result};
use crate::planner::{delta_q, plan, PlanDistribution, PlanResult, PlannerConfig, PriorNoise};
use crate::world_model::WorldModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Mpc,
    Network,
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpc" => Ok(Self::Mpc),
            "network" => Ok(Self::Network),
            other => Err(Error::Config(format!("unknown policy `{other}` (expected mpc or network)"))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mpc => "mpc",
            Self::Network => "network",
        })
    }
}

/// Warm-started planning across the decisions of one episode.
pub struct MpcActor<'a> {
    pub model: &'a WorldModel,
    pub params: &'a ParameterSet,
    pub cfg: &'a PlannerConfig,
    previous: Option<PlanDistribution>,
    /// Planner invocations since construction.
    pub calls: u64,
}

impl<'a> MpcActor<'a> {
    pub fn new(model: &'a WorldModel, params: &'a ParameterSet, cfg: &'a PlannerConfig) -> Self {
        Self { model, params, cfg, previous: None, calls: 0 }
    }

    /// Forget the warm start at an episode boundary.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    /// Plan from `obs`. The previous plan, shifted by one step with the
    /// policy prior at `obs` appended, seeds the distribution.
    pub fn plan(&mut self, obs: &[f64], seed: u64) -> Result<PlanResult> {
        let z = self.model.encode_obs(self.params, obs)?;
        let warm = match &self.previous {
            Some(prev) => {
                let tail = self.model.policy_dist(self.params, &z)?;
                Some(prev.shifted(&tail, self.cfg.sigma_floor))
            }
            None => None,
        };
        let result = plan(self.model, self.params, &z, PriorNoise::Policy, warm.as_ref(), self.cfg, seed)?;
        self.calls += 1;
        self.previous = Some(result.dist.clone());
        Ok(result)
    }
}

/// Order statistics of a sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let pct = |q| crate::learner::percentile(values, q);
        Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
            min: pct(0.0),
            p5: pct(5.0),
            p50: pct(50.0),
            p95: pct(95.0),
            max: pct(100.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReturns {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl PolicyReturns {
    fn of(returns: Vec<f64>) -> Self {
        let s = Summary::of(&returns);
        Self { mean: s.mean, std: s.std, returns }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub episodes: usize,
    pub mpc: Option<PolicyReturns>,
    pub network: Option<PolicyReturns>,
    /// `mean(mpc) - mean(network)` when both ran.
    pub gap: Option<f64>,
    pub delta_q: Option<Summary>,
    /// Value gain of every planner decision, in order.
    pub delta_q_samples: Vec<f64>,
    pub planner_calls: u64,
}

/// Seed of the `episode`-th evaluation reset.
pub fn eval_episode_seed(eval_seed: u64, episode: usize) -> u64 {
    eval_seed.wrapping_add(episode as u64)
}

fn plan_seed(eval_seed: u64, episode: usize, t: usize) -> u64 {
    eval_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((episode as u64) << 32) ^ t as u64
}

fn check_dims(model: &WorldModel, env: &dyn Env) -> Result<()> {
    let (spec, cfg) = (env.spec(), model.config());
    if spec.obs_dim != cfg.obs_dim || spec.action_dim != cfg.action_dim {
        return Err(Error::Shape(format!(
            "model expects {}-dim observations and {}-dim actions, `{}` has {} and {}",
            cfg.obs_dim, cfg.action_dim, spec.name, spec.obs_dim, spec.action_dim
        )));
    }
    Ok(())
}

/// Deterministic evaluation of the requested policies on the same resets.
pub fn evaluate(
    model: &WorldModel,
    params: &ParameterSet,
    env_name: &str,
    episodes: usize,
    policies: &[PolicyKind],
    planner: &PlannerConfig,
    eval_seed: u64,
) -> Result<EvalReport> {
    let mut env = make_env(env_name)?;
    check_dims(model, env.as_ref())?;
    let mut report = EvalReport {
        env: env_name.to_string(),
        episodes,
        mpc: None,
        network: None,
        gap: None,
        delta_q: None,
        delta_q_samples: Vec::new(),
        planner_calls: 0,
    };
    for &kind in policies {
        let mut returns = Vec::with_capacity(episodes);
        let mut actor = MpcActor::new(model, params, planner);
        for ep in 0..episodes {
            let mut obs = env.reset(eval_episode_seed(eval_seed, ep));
            actor.reset();
            let mut total = 0.0;
            for t in 0..env.spec().decisions() {
                let action = match kind {
                    PolicyKind::Network => {
                        let z = model.encode_obs(params, &obs)?;
                        model.policy_dist(params, &z)?.mean
                    }
                    PolicyKind::Mpc => {
                        let r = actor.plan(&obs, plan_seed(eval_seed, ep, t))?;
                        if !r.prior_values.is_empty() {
                            report.delta_q_samples.push(delta_q(&r)?);
                        }
                        r.first.mean
                    }
                };
                let step = env.step(&action)?;
                total += step.reward;
                obs = step.obs;
            }
            returns.push(total);
        }
        report.planner_calls += actor.calls;
        let r = PolicyReturns::of(returns);
        match kind {
            PolicyKind::Mpc => report.mpc = Some(r),
            PolicyKind::Network => report.network = Some(r),
        }
    }
    if !report.delta_q_samples.is_empty() {
        report.delta_q = Some(Summary::of(&report.delta_q_samples));
    }
    if let (Some(a), Some(b)) = (&report.mpc, &report.network) {
        report.gap = Some(a.mean - b.mean);
    }
    Ok(report)
}

/// Mean undiscounted return of uniformly random actions.
pub fn random_policy_return(env_name: &str, episodes: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut env = make_env(env_name)?;
    let m = env.spec().action_dim;
    let mut total = 0.0;
    for ep in 0..episodes {
        env.reset(eval_episode_seed(seed, ep));
        for _ in 0..env.spec().decisions() {
            let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
            total += env.step(&a)?.reward;
        }
    }
    Ok(total / episodes as f64)
}
