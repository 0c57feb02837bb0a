//! Latent world model: encoder, latent dynamics, reward head, value
//! ensemble and squashed-Gaussian policy head.
//!
//! Every network is an MLP of `linear -> layer norm -> SiLU` hidden blocks.
//! Encoder and dynamics end in a simplex normalisation over groups of
//! eight latent units, which keeps latents bounded. Reward and value heads
//! predict logits over two-hot bins.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, kernels, softmax, Graph, ParamId, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

/// Width of each softmax group in the latent normalisation.
pub const SIMNORM_GROUP: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub num_bins: usize,
    /// Lower edge of the bin range, in symlog space.
    pub v_min: f64,
    /// Upper edge of the bin range, in symlog space.
    pub v_max: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub num_value_heads: usize,
}

impl ModelConfig {
    pub fn new(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            latent_dim: 64,
            hidden_dim: 128,
            hidden_layers: 2,
            num_bins: 101,
            v_min: -10.0,
            v_max: 10.0,
            log_std_min: -3.0,
            log_std_max: 1.0,
            num_value_heads: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.obs_dim == 0 || self.action_dim == 0 {
            return fail("observation and action dims must be positive");
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(SIMNORM_GROUP) {
            return fail("latent_dim must be a positive multiple of 8");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be positive");
        }
        if self.num_bins < 2 {
            return fail("num_bins must be at least 2");
        }
        if self.v_min >= self.v_max {
            return fail("v_min must be below v_max");
        }
        if self.log_std_min >= self.log_std_max {
            return fail("log_std_min must be below log_std_max");
        }
        if self.num_value_heads == 0 {
            return fail("need at least one value head");
        }
        Ok(())
    }

    /// Flat `key=value` view used in checkpoint headers.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let v = serde_json::to_value(self).expect("plain struct");
        v.as_object().expect("struct serialises to an object").iter().map(|(k, v)| (k.clone(), v.to_string())).collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        for (k, v) in kv {
            obj.insert(k.clone(), serde_json::from_str(v)?);
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(obj))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A point in the model's latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Diagonal Gaussian over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Shape(format!("mean has {} dims but log_std has {}", mean.len(), log_std.len())));
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Draw from `N(mean, std^2)` and clamp to `[-1, 1]`.
    pub fn sample_clamped(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| {
                let e: f64 = rng.sample(StandardNormal);
                (m + l.exp() * e).clamp(-1.0, 1.0)
            })
            .collect()
    }

    /// Differential entropy of the unsquashed Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + HALF_LOG_2PI_E).sum()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, l), x)| {
                let z = (x - m) / l.exp();
                -0.5 * z * z - l - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    }
}

fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

/// Two-hot discretisation on bins evenly spaced in symlog space.
#[derive(Clone, Debug)]
pub struct TwoHot {
    centers: Vec<f64>,
    lo: f64,
    hi: f64,
    step: f64,
}

impl TwoHot {
    pub fn new(num_bins: usize, lo: f64, hi: f64) -> Self {
        let step = (hi - lo) / (num_bins - 1) as f64;
        let centers = (0..num_bins).map(|i| lo + step * i as f64).collect();
        Self { centers, lo, hi, step }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg.num_bins, cfg.v_min, cfg.v_max)
    }

    pub fn num_bins(&self) -> usize {
        self.centers.len()
    }

    /// Bin centres in symlog space.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Bin centre `i` mapped back to value space.
    pub fn center_value(&self, i: usize) -> f64 {
        symexp(self.centers[i])
    }

    /// Mass split between the two bins around `symlog(v)`, after clamping to
    /// the bin range.
    pub fn encode(&self, v: f64) -> Result<Vec<f64>> {
        if v.is_nan() {
            return Err(Error::NonFinite("two-hot encode of NaN".into()));
        }
        let mut out = vec![0.0; self.centers.len()];
        self.encode_into(v, &mut out);
        Ok(out)
    }

    pub(crate) fn encode_into(&self, v: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let x = symlog(v).clamp(self.lo, self.hi);
        let pos = (x - self.lo) / self.step;
        let lower = (pos.floor() as usize).min(self.centers.len() - 1);
        let frac = pos - lower as f64;
        if lower + 1 < self.centers.len() && frac > 0.0 {
            out[lower] = 1.0 - frac;
            out[lower + 1] = frac;
        } else {
            out[lower] = 1.0;
        }
    }

    /// Expected bin centre under `probs`, mapped back through symexp.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        symexp(self.decode_transformed(probs))
    }

    /// Expected bin centre in symlog space.
    pub fn decode_transformed(&self, probs: &[f64]) -> f64 {
        probs.iter().zip(&self.centers).map(|(p, c)| p * c).sum()
    }

    /// Decode each row of a `[b, bins]` logit table.
    pub fn decode_logits(&self, logits: &Tensor) -> Vec<f64> {
        let probs = softmax(logits);
        probs.data().chunks(self.centers.len()).map(|row| self.decode(row)).collect()
    }

    /// Two-hot table `[values.len(), bins]`.
    pub fn encode_batch(&self, values: &[f64]) -> Result<Tensor> {
        let b = self.centers.len();
        let mut data = vec![0.0; values.len() * b];
        for (v, row) in values.iter().zip(data.chunks_mut(b)) {
            if v.is_nan() {
                return Err(Error::NonFinite("two-hot encode of NaN".into()));
            }
            self.encode_into(*v, row);
        }
        Tensor::new(&[values.len(), b], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OutputNorm {
    None,
    SimNorm,
}

/// Fully connected stack with parameter handles into a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    output: OutputNorm,
}

impl Mlp {
    fn build(
        params: &mut ParameterSet,
        prefix: &str,
        dims: &[usize],
        output: OutputNorm,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let last = i + 2 == dims.len();
            let wid = if last && zero_last {
                params.insert(format!("{prefix}.w{i}"), Tensor::zeros(&[w[0], w[1]]))?
            } else {
                params.insert_linear_weight(format!("{prefix}.w{i}"), w[0], w[1], rng)?
            };
            let bid = params.insert(format!("{prefix}.b{i}"), Tensor::zeros(&[w[1]]))?;
            layers.push((wid, bid));
        }
        Ok(Self { layers, output })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(params, w);
            let bv = g.param(params, b);
            h = g.matmul(h, wv)?;
            h = g.add_bias(h, bv)?;
            if i + 1 < self.layers.len() {
                h = g.layer_norm(h)?;
                h = g.silu(h);
            }
        }
        match self.output {
            OutputNorm::None => Ok(h),
            OutputNorm::SimNorm => {
                let shape = g.value(h).shape().to_vec();
                let groups = g.reshape(h, &[shape[0] * shape[1] / SIMNORM_GROUP, SIMNORM_GROUP])?;
                let s = g.softmax(groups)?;
                g.reshape(s, &shape)
            }
        }
    }

    /// Tape-free forward pass. Performs the same floating-point operations
    /// in the same order as [`Mlp::forward`], so results agree bitwise.
    pub fn infer(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        let rows = x.rows();
        let mut h = x.data().to_vec();
        let mut next = Vec::new();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (params.value(w), params.value(b));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            if h.len() != rows * k {
                return Err(Error::Shape(format!(
                    "mlp layer {i}: input width {} vs weight {k}",
                    h.len() / rows.max(1)
                )));
            }
            next.clear();
            next.resize(rows * n, 0.0);
            gemm(rows, k, n, &h, false, wv.data(), false, 0.0, &mut next);
            for row in next.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            if i + 1 < self.layers.len() {
                kernels::layer_norm_rows(&mut next, n, None);
                kernels::silu_in_place(&mut next);
            }
            std::mem::swap(&mut h, &mut next);
        }
        if self.output == OutputNorm::SimNorm {
            kernels::softmax_rows_in_place(&mut h, SIMNORM_GROUP);
        }
        let cols = h.len() / rows.max(1);
        Tensor::new(&[rows, cols], h)
    }
}

/// Network layout. Parameter values live in a separate [`ParameterSet`] so
/// snapshots and target copies can share one layout.
#[derive(Clone, Debug)]
pub struct WorldModel {
    cfg: ModelConfig,
    two_hot: TwoHot,
    encoder: Mlp,
    dynamics: Mlp,
    reward: Mlp,
    values: Vec<Mlp>,
    policy: Mlp,
}

/// Parameter name prefixes of each component.
pub const ENCODER: &str = "encoder";
pub const DYNAMICS: &str = "dynamics";
pub const REWARD: &str = "reward";
pub const VALUE: &str = "value";
pub const POLICY: &str = "policy";

impl WorldModel {
    /// Build the layout and freshly initialised parameters.
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParameterSet)> {
        cfg.validate()?;
        let mut p = ParameterSet::new();
        let hidden = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend(std::iter::repeat_n(cfg.hidden_dim, cfg.hidden_layers));
            d.push(output);
            d
        };
        let (n, m, l, b) = (cfg.obs_dim, cfg.action_dim, cfg.latent_dim, cfg.num_bins);
        let encoder = Mlp::build(&mut p, ENCODER, &hidden(n, l), OutputNorm::SimNorm, false, rng)?;
        let dynamics = Mlp::build(&mut p, DYNAMICS, &hidden(l + m, l), OutputNorm::SimNorm, false, rng)?;
        let reward = Mlp::build(&mut p, REWARD, &hidden(l + m, b), OutputNorm::None, true, rng)?;
        let values = (0..cfg.num_value_heads)
            .map(|i| Mlp::build(&mut p, &format!("{VALUE}{i}"), &hidden(l, b), OutputNorm::None, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let policy = Mlp::build(&mut p, POLICY, &hidden(l, 2 * m), OutputNorm::None, false, rng)?;
        let two_hot = TwoHot::from_config(&cfg);
        Ok((Self { cfg, two_hot, encoder, dynamics, reward, values, policy }, p))
    }

    /// Rebuild the layout for an existing parameter set (e.g. a loaded
    /// checkpoint), checking that names and shapes agree.
    pub fn from_params(cfg: ModelConfig, params: &ParameterSet) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (model, fresh) = Self::new(cfg, &mut rng)?;
        if !fresh.same_layout(params) {
            return Err(Error::Format("parameter layout does not match model config".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn two_hot(&self) -> &TwoHot {
        &self.two_hot
    }

    fn check_cols(&self, g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != want {
            return Err(Error::Shape(format!("{what}: expected [_, {want}], got {shape:?}")));
        }
        Ok(())
    }

    fn check_actions(&self, g: &Graph, a: Var) -> Result<()> {
        self.check_cols(g, a, self.cfg.action_dim, "action")?;
        let m = self.cfg.action_dim;
        for (i, &v) in g.value(a).data().iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::ActionOutOfBounds { index: i % m, value: v });
            }
        }
        Ok(())
    }

    /// `[b, n]` observations to `[b, L]` latents.
    pub fn encode(&self, g: &mut Graph, p: &ParameterSet, obs: Var) -> Result<Var> {
        self.check_cols(g, obs, self.cfg.obs_dim, "observation")?;
        self.encoder.forward(g, p, obs)
    }

    pub fn dynamics(&self, g: &mut Graph, p: &ParameterSet, z: Var, a: Var) -> Result<Var> {
        self.check_cols(g, z, self.cfg.latent_dim, "latent")?;
        self.check_actions(g, a)?;
        let za = g.concat_cols(&[z, a])?;
        self.dynamics.forward(g, p, za)
    }

    pub fn reward_logits(&self, g: &mut Graph, p: &ParameterSet, z: Var, a: Var) -> Result<Var> {
        self.check_cols(g, z, self.cfg.latent_dim, "latent")?;
        self.check_actions(g, a)?;
        let za = g.concat_cols(&[z, a])?;
        self.reward.forward(g, p, za)
    }

    /// Logits of every value head.
    pub fn value_logits(&self, g: &mut Graph, p: &ParameterSet, z: Var) -> Result<Vec<Var>> {
        self.check_cols(g, z, self.cfg.latent_dim, "latent")?;
        self.values.iter().map(|head| head.forward(g, p, z)).collect()
    }

    /// Squashed Gaussian head: `(mean, log_std)`, each `[b, m]`.
    pub fn policy(&self, g: &mut Graph, p: &ParameterSet, z: Var) -> Result<(Var, Var)> {
        self.policy_with_bounds(g, p, z, self.cfg.log_std_min, self.cfg.log_std_max)
    }

    /// Policy head with a custom log-std range.
    pub fn policy_with_bounds(
        &self,
        g: &mut Graph,
        p: &ParameterSet,
        z: Var,
        log_std_min: f64,
        log_std_max: f64,
    ) -> Result<(Var, Var)> {
        self.check_cols(g, z, self.cfg.latent_dim, "latent")?;
        let m = self.cfg.action_dim;
        let raw = self.policy.forward(g, p, z)?;
        let raw_mean = g.slice_cols(raw, 0, m)?;
        let raw_std = g.slice_cols(raw, m, 2 * m)?;
        let mean = g.tanh(raw_mean);
        let t = g.tanh(raw_std);
        let unit = g.add_scalar(t, 1.0);
        let half = 0.5 * (log_std_max - log_std_min);
        let scaled = g.scale(unit, half);
        let log_std = g.add_scalar(scaled, log_std_min);
        Ok((mean, log_std))
    }

    /// Min over heads of each head's decoded expectation, per row.
    pub fn value_scalar_rows(&self, g: &mut Graph, p: &ParameterSet, z: Var) -> Result<Vec<f64>> {
        let heads = self.value_logits(g, p, z)?;
        let rows = g.value(z).rows();
        let mut out = vec![f64::INFINITY; rows];
        for h in heads {
            for (o, v) in out.iter_mut().zip(self.two_hot.decode_logits(g.value(h))) {
                *o = o.min(v);
            }
        }
        Ok(out)
    }

    pub fn reward_rows(&self, g: &mut Graph, p: &ParameterSet, z: Var, a: Var) -> Result<Vec<f64>> {
        let logits = self.reward_logits(g, p, z, a)?;
        Ok(self.two_hot.decode_logits(g.value(logits)))
    }

    // Tape-free batch inference. Each agrees bitwise with its graph
    // counterpart.

    fn check_tensor(&self, x: &Tensor, want: usize, what: &str) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != want {
            return Err(Error::Shape(format!("{what}: expected [_, {want}], got {shape:?}")));
        }
        Ok(())
    }

    fn concat_latent_action(&self, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        self.check_tensor(z, self.cfg.latent_dim, "latent")?;
        self.check_tensor(a, self.cfg.action_dim, "action")?;
        if z.rows() != a.rows() {
            return Err(Error::Shape(format!("{} latents vs {} actions", z.rows(), a.rows())));
        }
        let m = self.cfg.action_dim;
        for (i, &v) in a.data().iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::ActionOutOfBounds { index: i % m, value: v });
            }
        }
        let mut data = Vec::with_capacity(z.len() + a.len());
        for r in 0..z.rows() {
            data.extend_from_slice(z.row_slice(r));
            data.extend_from_slice(a.row_slice(r));
        }
        Tensor::new(&[z.rows(), self.cfg.latent_dim + m], data)
    }

    pub fn infer_encode(&self, p: &ParameterSet, obs: &Tensor) -> Result<Tensor> {
        self.check_tensor(obs, self.cfg.obs_dim, "observation")?;
        self.encoder.infer(p, obs)
    }

    pub fn infer_dynamics(&self, p: &ParameterSet, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        let za = self.concat_latent_action(z, a)?;
        self.dynamics.infer(p, &za)
    }

    pub fn infer_rewards(&self, p: &ParameterSet, z: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let za = self.concat_latent_action(z, a)?;
        Ok(self.two_hot.decode_logits(&self.reward.infer(p, &za)?))
    }

    /// Min over heads, per row.
    pub fn infer_values(&self, p: &ParameterSet, z: &Tensor) -> Result<Vec<f64>> {
        self.check_tensor(z, self.cfg.latent_dim, "latent")?;
        let mut out = vec![f64::INFINITY; z.rows()];
        for head in &self.values {
            for (o, v) in out.iter_mut().zip(self.two_hot.decode_logits(&head.infer(p, z)?)) {
                *o = o.min(v);
            }
        }
        Ok(out)
    }

    /// `(mean, log_std)`, each `[b, m]`.
    pub fn infer_policy(&self, p: &ParameterSet, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_tensor(z, self.cfg.latent_dim, "latent")?;
        let m = self.cfg.action_dim;
        let (lo, hi) = (self.cfg.log_std_min, self.cfg.log_std_max);
        let half = 0.5 * (hi - lo);
        let raw = self.policy.infer(p, z)?;
        let mut mean = Vec::with_capacity(z.rows() * m);
        let mut log_std = Vec::with_capacity(z.rows() * m);
        for row in raw.data().chunks(2 * m) {
            mean.extend(row[..m].iter().map(|v| v.tanh()));
            log_std.extend(row[m..].iter().map(|v| (v.tanh() + 1.0) * half + lo));
        }
        Ok((Tensor::new(&[z.rows(), m], mean)?, Tensor::new(&[z.rows(), m], log_std)?))
    }

    // Single-sample conveniences.

    pub fn encode_obs(&self, p: &ParameterSet, obs: &[f64]) -> Result<LatentState> {
        if obs.len() != self.cfg.obs_dim {
            return Err(Error::Shape(format!(
                "observation has {} dims, model expects {}",
                obs.len(),
                self.cfg.obs_dim
            )));
        }
        Ok(LatentState(self.infer_encode(p, &Tensor::row(obs))?.into_data()))
    }

    pub fn next_latent(&self, p: &ParameterSet, z: &LatentState, a: &[f64]) -> Result<LatentState> {
        Ok(LatentState(self.infer_dynamics(p, &Tensor::row(&z.0), &Tensor::row(a))?.into_data()))
    }

    pub fn predict_reward(&self, p: &ParameterSet, z: &LatentState, a: &[f64]) -> Result<f64> {
        Ok(self.infer_rewards(p, &Tensor::row(&z.0), &Tensor::row(a))?[0])
    }

    pub fn value_scalar(&self, p: &ParameterSet, z: &LatentState) -> Result<f64> {
        Ok(self.infer_values(p, &Tensor::row(&z.0))?[0])
    }

    pub fn policy_dist(&self, p: &ParameterSet, z: &LatentState) -> Result<DiagGaussian> {
        let (mean, log_std) = self.infer_policy(p, &Tensor::row(&z.0))?;
        DiagGaussian::new(mean.into_data(), log_std.into_data())
    }
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig { latent_dim: 16, hidden_dim: 16, num_bins: 21, ..ModelConfig::new(3, 2) }
    }

    fn model() -> (WorldModel, ParameterSet) {
        WorldModel::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn two_hot_bin_centers_are_one_hot() {
        let th = TwoHot::new(101, -10.0, 10.0);
        for i in 0..101 {
            let p = th.encode(th.center_value(i)).unwrap();
            assert!((p[i] - 1.0).abs() < 1e-9, "bin {i}: {:?}", &p[i.saturating_sub(1)..(i + 2).min(101)]);
            assert!((th.decode_transformed(&p) - th.centers()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn two_hot_clamps_and_rejects_nan() {
        let th = TwoHot::new(11, -2.0, 2.0);
        let p = th.encode(-1e6).unwrap();
        assert_eq!(p[0], 1.0);
        let p = th.encode(1e6).unwrap();
        assert_eq!(p[10], 1.0);
        assert!(th.encode(f64::NAN).is_err());
    }

    #[test]
    fn zeroed_final_layer_decodes_to_midpoint() {
        let (m, p) = model();
        let z = m.encode_obs(&p, &[0.1, -0.2, 0.3]).unwrap();
        let r = m.predict_reward(&p, &z, &[0.0, 0.5]).unwrap();
        let mid = symexp(m.two_hot().centers().iter().sum::<f64>() / 21.0);
        assert!((r - mid).abs() < 1e-12);
        assert!((m.value_scalar(&p, &z).unwrap() - mid).abs() < 1e-12);
    }

    #[test]
    fn value_scalar_takes_min_over_heads() {
        let (m, mut p) = model();
        let th = m.two_hot().clone();
        // Steer each head to a one-hot bin through its output bias.
        for (head, target) in [(0usize, 3.0f64), (1, 5.0)] {
            let probs = th.encode(target).unwrap();
            let bias: Vec<f64> = probs.iter().map(|&q| if q > 0.0 { q.ln() + 60.0 } else { 0.0 }).collect();
            let id = p.id(&format!("value{head}.b2")).unwrap();
            *p.value_mut(id) = Tensor::new(&[21], bias).unwrap();
        }
        let z = m.encode_obs(&p, &[0.0, 0.0, 0.0]).unwrap();
        let v = m.value_scalar(&p, &z).unwrap();
        assert!((v - 3.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn policy_log_std_bounds() {
        let (m, p) = model();
        let mut g = Graph::new();
        // push the raw log-std far negative, zero, and far positive
        let z = g.constant(Tensor::zeros(&[1, 16]));
        let (_, ls) = m.policy(&mut g, &p, z).unwrap();
        for &v in g.value(ls).data() {
            assert!((-3.0..=1.0).contains(&v));
        }
        let half = 0.5 * (1.0 - (-3.0));
        assert_eq!(-3.0 + (f64::tanh(-1e3) + 1.0) * half, -3.0);
        assert_eq!(-3.0 + (f64::tanh(0.0) + 1.0) * half, -1.0);
    }

    #[test]
    fn encode_rejects_wrong_dim_and_dynamics_rejects_big_action() {
        let (m, p) = model();
        assert!(matches!(m.encode_obs(&p, &[0.0; 4]), Err(Error::Shape(_))));
        let z = m.encode_obs(&p, &[0.0; 3]).unwrap();
        assert!(matches!(m.next_latent(&p, &z, &[0.2, 1.5]), Err(Error::ActionOutOfBounds { index: 1, .. })));
    }

    #[test]
    fn latent_rollout_is_deterministic() {
        let (m, p) = model();
        let roll = || {
            let mut z = m.encode_obs(&p, &[0.4, -0.1, 2.0]).unwrap();
            for a in [[0.1, -0.3], [0.9, 0.9], [-1.0, 0.0]] {
                z = m.next_latent(&p, &z, &a).unwrap();
            }
            z
        };
        assert_eq!(roll(), roll());
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = small_cfg();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let d = DiagGaussian::new(vec![0.0], vec![0.0]).unwrap();
        assert!((d.entropy() - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }

    #[test]
    fn inference_matches_tape_bitwise() {
        let (m, mut p) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // non-zero output layers so every head is exercised
        for id in p.ids().collect::<Vec<_>>() {
            let v = p.value_mut(id);
            for x in v.data_mut() {
                *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let obs = Tensor::new(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let act = Tensor::new(&[4, 2], (0..8).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        let mut g = Graph::new();
        let (ov, av) = (g.constant(obs.clone()), g.constant(act.clone()));
        let z = m.encode(&mut g, &p, ov).unwrap();
        let zt = m.infer_encode(&p, &obs).unwrap();
        assert_eq!(g.value(z), &zt);
        let next = m.dynamics(&mut g, &p, z, av).unwrap();
        assert_eq!(g.value(next), &m.infer_dynamics(&p, &zt, &act).unwrap());
        assert_eq!(m.reward_rows(&mut g, &p, z, av).unwrap(), m.infer_rewards(&p, &zt, &act).unwrap());
        assert_eq!(m.value_scalar_rows(&mut g, &p, z).unwrap(), m.infer_values(&p, &zt).unwrap());
        let (mean, ls) = m.policy(&mut g, &p, z).unwrap();
        let (mt, lt) = m.infer_policy(&p, &zt).unwrap();
        assert_eq!((g.value(mean), g.value(ls)), (&mt, &lt));
    }
}
