//! Gradient updates: world-model, value and imitation-policy losses, the
//! moving KL scale and target-network tracking.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ema_update, Adam, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::planner::{plan, PlannerConfig, PriorNoise};
use crate::replay::{replan_seed, RecordLoc, Segment};
use crate::world_model::{DiagGaussian, WorldModel, POLICY};

const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub batch_size: usize,
    /// Segment length minus one.
    pub horizon: usize,
    /// Temporal weight `lambda`.
    pub rho: f64,
    pub td_horizon: usize,
    pub entropy_coef: f64,
    pub scale_decay: f64,
    /// Target-network EMA rate.
    pub tau: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub discount: f64,
    pub consistency_coef: f64,
    pub reward_coef: f64,
    pub value_coef: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            horizon: 3,
            rho: 0.5,
            td_horizon: 1,
            entropy_coef: 1e-4,
            scale_decay: 0.99,
            tau: 0.01,
            lr: 3e-4,
            grad_clip: 20.0,
            discount: 0.99,
            consistency_coef: 20.0,
            reward_coef: 0.1,
            value_coef: 0.1,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("learner: {m}")));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.td_horizon == 0 {
            return fail("td_horizon must be at least 1");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail("rho must be in (0, 1]");
        }
        if self.entropy_coef < 0.0 {
            return fail("entropy_coef must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.scale_decay) {
            return fail("tau and scale_decay must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return fail("discount must be in [0, 1]");
        }
        if self.lr <= 0.0 {
            return fail("lr must be positive");
        }
        Ok(())
    }

    fn weights(&self, steps: usize) -> Vec<f64> {
        (0..steps).map(|t| self.rho.powi(t as i32)).collect()
    }
}

/// Moving spread of per-sample KL values; the policy loss divides by
/// `max(1, s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KLScale {
    pub s: f64,
    pub initialized: bool,
}

impl KLScale {
    pub fn divisor(&self) -> f64 {
        self.s.max(1.0)
    }
}

/// Linear-interpolation percentile of unsorted `values`, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn update_kl_scale(scale: KLScale, batch_kls: &[f64], decay: f64) -> KLScale {
    if batch_kls.is_empty() {
        return scale;
    }
    let spread = (percentile(batch_kls, 95.0) - percentile(batch_kls, 5.0)).max(0.0);
    let s = if scale.initialized { decay * scale.s + (1.0 - decay) * spread } else { spread };
    KLScale { s, initialized: true }
}

/// Closed-form `KL(p || q)` summed over dimensions.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("kl: {} dims vs {}", p.dim(), q.dim())));
    }
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let (mp, lp, mq, lq) = (p.mean[i], p.log_std[i], q.mean[i], q.log_std[i]);
        let d = mp - mq;
        kl += lq - lp + ((2.0 * lp).exp() + d * d) / (2.0 * (2.0 * lq).exp()) - 0.5;
    }
    Ok(kl)
}

/// Time-major training batch built from `H + 1`-record segments.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: usize,
    pub horizon: usize,
    /// `H + 1` tensors of `[rows, n]`.
    pub obs: Vec<Tensor>,
    /// `H` tensors of `[rows, m]`.
    pub actions: Vec<Tensor>,
    /// `H` vectors of `rows` rewards.
    pub rewards: Vec<Vec<f64>>,
    /// `H + 1` vectors of `rows` expert distributions.
    pub experts: Vec<Vec<DiagGaussian>>,
    /// Buffer location of every state, laid out like `experts`.
    pub locs: Vec<Vec<RecordLoc>>,
}

impl Batch {
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let first = segments.first().ok_or_else(|| Error::Replay("empty batch".into()))?;
        let steps = first.records.len();
        if steps == 0 {
            return Err(Error::Replay("empty segment".into()));
        }
        let rows = segments.len();
        let n = first.records[0].obs.len();
        let m = first.records[0].action.len();
        let mut obs = vec![Vec::with_capacity(rows * n); steps];
        let mut actions = vec![Vec::with_capacity(rows * m); steps - 1];
        let mut rewards = vec![Vec::with_capacity(rows); steps - 1];
        let mut experts = vec![Vec::with_capacity(rows); steps];
        let mut locs = vec![Vec::with_capacity(rows); steps];
        for seg in segments {
            if seg.records.len() != steps {
                return Err(Error::Replay("segments differ in length".into()));
            }
            for (t, r) in seg.records.iter().enumerate() {
                if r.pi.dim() != m {
                    return Err(Error::Replay(format!(
                        "record {}:{} lacks a {m}-dim expert distribution",
                        r.episode, r.step
                    )));
                }
                obs[t].extend_from_slice(&r.obs);
                experts[t].push(r.pi.clone());
                locs[t].push(seg.loc(t));
                if t + 1 < steps {
                    actions[t].extend_from_slice(&r.action);
                    rewards[t].push(r.reward);
                }
            }
        }
        Ok(Self {
            rows,
            horizon: steps - 1,
            obs: obs.into_iter().map(|d| Tensor::new(&[rows, n], d)).collect::<Result<_>>()?,
            actions: actions.into_iter().map(|d| Tensor::new(&[rows, m], d)).collect::<Result<_>>()?,
            rewards,
            experts,
            locs,
        })
    }

    /// Row `row` of step `t` observations.
    pub fn obs_row(&self, t: usize, row: usize) -> &[f64] {
        self.obs[t].row_slice(row)
    }
}

/// `z_0 = h(s_0)`, `z_{t+1} = d(z_t, a_t)`, with gradients.
pub fn rollout_latents(g: &mut Graph, model: &WorldModel, params: &ParameterSet, batch: &Batch) -> Result<Vec<Var>> {
    let s0 = g.constant(batch.obs[0].clone());
    let mut zs = vec![model.encode(g, params, s0)?];
    for a in &batch.actions {
        let a = g.constant(a.clone());
        let z = model.dynamics(g, params, *zs.last().expect("non-empty"), a)?;
        zs.push(z);
    }
    Ok(zs)
}

/// `h(s_t)` for every step, as plain tensors.
pub fn encode_all(model: &WorldModel, params: &ParameterSet, batch: &Batch) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    batch
        .obs
        .iter()
        .map(|o| {
            let x = g.constant(o.clone());
            let z = model.encode(&mut g, params, x)?;
            Ok(g.value(z).clone())
        })
        .collect()
}

/// Latent consistency plus reward cross-entropy.
pub fn model_loss(
    g: &mut Graph,
    model: &WorldModel,
    params: &ParameterSet,
    batch: &Batch,
    zs: &[Var],
    encoded: &[Tensor],
    cfg: &LearnerConfig,
) -> Result<Var> {
    let w = cfg.weights(batch.horizon);
    let mut total: Option<Var> = None;
    for t in 0..batch.horizon {
        let target = g.constant(encoded[t + 1].clone());
        let diff = g.sub(zs[t + 1], target)?;
        let sq = g.mul(diff, diff)?;
        let consistency = g.mean(sq);
        let a = g.constant(batch.actions[t].clone());
        let logits = model.reward_logits(g, params, zs[t], a)?;
        let ce = g.cross_entropy(logits, &model.two_hot().encode_batch(&batch.rewards[t])?)?;
        let ce = g.mean(ce);
        let c = g.scale(consistency, cfg.consistency_coef * w[t]);
        let r = g.scale(ce, cfg.reward_coef * w[t]);
        let term = g.add(c, r)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Model-based `N`-step targets from `h(s_t)` under the policy mean, with
/// the target value network at the end. Returns `H + 1` vectors of `rows`.
pub fn value_targets(
    model: &WorldModel,
    params: &ParameterSet,
    target: &ParameterSet,
    encoded: &[Tensor],
    cfg: &LearnerConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    encoded
        .iter()
        .map(|z0| {
            let mut z = g.constant(z0.clone());
            let mut out = vec![0.0; z0.rows()];
            let mut disc = 1.0;
            for _ in 0..cfg.td_horizon {
                let (mean, _) = model.policy(&mut g, params, z)?;
                let a = g.detach(mean);
                for (o, r) in out.iter_mut().zip(model.reward_rows(&mut g, params, z, a)?) {
                    *o += disc * r;
                }
                z = model.dynamics(&mut g, params, z, a)?;
                disc *= cfg.discount;
            }
            for (o, v) in out.iter_mut().zip(model.value_scalar_rows(&mut g, target, z)?) {
                *o += disc * v;
            }
            Ok(out)
        })
        .collect()
}

/// Cross-entropy of every value head on the rolled latents against the
/// two-hot targets.
pub fn value_loss(
    g: &mut Graph,
    model: &WorldModel,
    params: &ParameterSet,
    zs: &[Var],
    targets: &[Vec<f64>],
    cfg: &LearnerConfig,
) -> Result<Var> {
    let w = cfg.weights(zs.len());
    let mut total: Option<Var> = None;
    for (t, &z) in zs.iter().enumerate() {
        let enc = model.two_hot().encode_batch(&targets[t])?;
        for logits in model.value_logits(g, params, z)? {
            let ce = g.cross_entropy(logits, &enc)?;
            let ce = g.mean(ce);
            let term = g.scale(ce, w[t]);
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Shape("value_loss: no latents".into()))
}

#[derive(Clone, Debug)]
pub struct PolicyLoss {
    pub loss: Var,
    /// Per-sample KL values, time-major.
    pub kls: Vec<f64>,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    /// Scale after this batch's update.
    pub scale: KLScale,
}

/// Imitation of the expert distributions at detached latents `zs`.
///
/// The scale is refreshed from this batch's KLs before dividing when
/// `update_scale` is set.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    g: &mut Graph,
    model: &WorldModel,
    params: &ParameterSet,
    zs: &[Var],
    experts: &[Vec<DiagGaussian>],
    scale: KLScale,
    update_scale: bool,
    cfg: &LearnerConfig,
) -> Result<PolicyLoss> {
    if experts.len() != zs.len() {
        return Err(Error::Shape(format!("{} expert steps for {} latents", experts.len(), zs.len())));
    }
    let m = model.config().action_dim;
    let w = cfg.weights(zs.len());
    let mut kl_vars = Vec::with_capacity(zs.len());
    let mut ent_vars = Vec::with_capacity(zs.len());
    let mut kls = Vec::new();
    let mut ent_sum = 0.0;
    for (t, &z) in zs.iter().enumerate() {
        let z = g.detach(z);
        let (mean_q, ls_q) = model.policy(g, params, z)?;
        let rows = experts[t].len();
        let mut mu_p = Vec::with_capacity(rows * m);
        let mut ls_p = Vec::with_capacity(rows * m);
        for e in &experts[t] {
            if e.dim() != m {
                return Err(Error::Shape(format!("expert has {} dims, policy {m}", e.dim())));
            }
            mu_p.extend_from_slice(&e.mean);
            ls_p.extend_from_slice(&e.log_std);
        }
        let var_p: Vec<f64> = ls_p.iter().map(|l| (2.0 * l).exp()).collect();
        let mu_p = g.constant(Tensor::new(&[rows, m], mu_p)?);
        let neg_ls_p = g.constant(Tensor::new(&[rows, m], ls_p.iter().map(|l| -l - 0.5).collect())?);
        let var_p = g.constant(Tensor::new(&[rows, m], var_p)?);
        let diff = g.sub(mean_q, mu_p)?;
        let d2 = g.mul(diff, diff)?;
        let num = g.add(d2, var_p)?;
        let neg2 = g.scale(ls_q, -2.0);
        let inv_var_q = g.exp(neg2);
        let ratio = g.mul(num, inv_var_q)?;
        let half = g.scale(ratio, 0.5);
        let logs = g.add(ls_q, neg_ls_p)?;
        let elem = g.add(logs, half)?;
        let kl_rows = g.sum_cols(elem)?;
        kls.extend_from_slice(g.value(kl_rows).data());
        let ent_rows = g.sum_cols(ls_q)?;
        let ent_rows = g.add_scalar(ent_rows, m as f64 * HALF_LOG_2PI_E);
        ent_sum += g.value(ent_rows).data().iter().sum::<f64>();
        kl_vars.push(kl_rows);
        ent_vars.push(ent_rows);
    }
    let scale = if update_scale { update_kl_scale(scale, &kls, cfg.scale_decay) } else { scale };
    let divisor = scale.divisor();
    let mut total: Option<Var> = None;
    for t in 0..zs.len() {
        let kl = g.mean(kl_vars[t]);
        let ent = g.mean(ent_vars[t]);
        let kl = g.scale(kl, w[t] / divisor);
        let ent = g.scale(ent, -cfg.entropy_coef * w[t]);
        let term = g.add(kl, ent)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let loss = total.ok_or_else(|| Error::Shape("policy_loss: no latents".into()))?;
    let count = kls.len().max(1) as f64;
    Ok(PolicyLoss { loss, mean_kl: kls.iter().sum::<f64>() / count, mean_entropy: ent_sum / count, kls, scale })
}

/// Fresh expert distributions for every state of `batch`, as the lazy
/// re-planning would produce them with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn replan_experts(
    model: &WorldModel,
    params: &ParameterSet,
    batch: &Batch,
    planner: &PlannerConfig,
    replan_horizon: usize,
    update_step: u64,
    seed: u64,
) -> Result<Vec<Vec<DiagGaussian>>> {
    let pcfg = PlannerConfig { horizon: replan_horizon, ..planner.clone() };
    let mut out = vec![Vec::with_capacity(batch.rows); batch.horizon + 1];
    for row in 0..batch.rows {
        for (t, experts) in out.iter_mut().enumerate() {
            let z = model.encode_obs(params, batch.obs_row(t, row))?;
            let seed = replan_seed(seed, update_step, batch.locs[t][row]);
            let r = plan(model, params, &z, PriorNoise::Widened, None, &pcfg, seed)?;
            experts.push(r.first);
        }
    }
    Ok(out)
}

/// The non-surrogate policy objective: every state re-planned now.
#[allow(clippy::too_many_arguments)]
pub fn exact_policy_loss(
    g: &mut Graph,
    model: &WorldModel,
    params: &ParameterSet,
    batch: &Batch,
    planner: &PlannerConfig,
    replan_horizon: usize,
    scale: KLScale,
    update_scale: bool,
    cfg: &LearnerConfig,
    update_step: u64,
    seed: u64,
) -> Result<PolicyLoss> {
    let experts = replan_experts(model, params, batch, planner, replan_horizon, update_step, seed)?;
    let zs = rollout_latents(g, model, params, batch)?;
    policy_loss(g, model, params, &zs, &experts, scale, update_scale, cfg)
}

/// Move the target copy toward the online parameters.
pub fn update_targets(target: &mut ParameterSet, online: &ParameterSet, rate: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::Shape("target and online parameter layouts differ".into()));
    }
    ema_update(target, online, rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub step: u64,
    pub model_loss: f64,
    pub value_loss: f64,
    pub policy_kl: f64,
    pub policy_entropy: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub grad_norm: f64,
}

/// Owner of the live parameters, their target copy and the optimizer.
#[derive(Clone)]
pub struct Learner {
    pub cfg: LearnerConfig,
    pub model: WorldModel,
    pub params: ParameterSet,
    pub target: ParameterSet,
    pub scale: KLScale,
    pub steps: u64,
    /// When set, policy parameters are excluded from optimizer steps.
    pub freeze_policy: bool,
    adam: Adam,
}

impl Learner {
    pub fn new(cfg: LearnerConfig, model: WorldModel, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam { lr: cfg.lr, clip_norm: Some(cfg.grad_clip), ..Adam::default() };
        Ok(Self {
            target: params.clone(),
            cfg,
            model,
            params,
            scale: KLScale::default(),
            steps: 0,
            freeze_policy: false,
            adam,
        })
    }

    /// One gradient step on `segments`. The step counter advances only on
    /// success.
    pub fn update(&mut self, segments: &[Segment]) -> Result<UpdateMetrics> {
        let batch = Batch::from_segments(segments)?;
        let encoded = encode_all(&self.model, &self.params, &batch)?;
        let targets = value_targets(&self.model, &self.params, &self.target, &encoded, &self.cfg)?;

        let mut g = Graph::new();
        let zs = rollout_latents(&mut g, &self.model, &self.params, &batch)?;
        let ml = model_loss(&mut g, &self.model, &self.params, &batch, &zs, &encoded, &self.cfg)?;
        let vl = value_loss(&mut g, &self.model, &self.params, &zs, &targets, &self.cfg)?;
        let pl = policy_loss(&mut g, &self.model, &self.params, &zs, &batch.experts, self.scale, true, &self.cfg)?;
        let model_value = g.value(ml).item();
        let value_value = g.value(vl).item();
        let policy_value = g.value(pl.loss).item();
        for (what, v) in [("model", model_value), ("value", value_value), ("policy", policy_value)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what} loss is {v} at update {}", self.steps)));
            }
        }

        self.params.zero_grad();
        g.backward(ml, &mut self.params)?;
        let vl_scaled = g.scale(vl, self.cfg.value_coef);
        g.backward(vl_scaled, &mut self.params)?;
        g.backward(pl.loss, &mut self.params)?;
        let grad_norm = if self.freeze_policy {
            self.adam.step_where(&mut self.params, |n| !n.starts_with(POLICY))?
        } else {
            self.adam.step(&mut self.params)?
        };
        update_targets(&mut self.target, &self.params, self.cfg.tau)?;
        self.scale = pl.scale;
        self.steps += 1;
        Ok(UpdateMetrics {
            step: self.steps,
            model_loss: model_value,
            value_loss: value_value,
            policy_kl: pl.mean_kl,
            policy_entropy: pl.mean_entropy,
            s: self.scale.s,
            grad_norm,
        })
    }
}
