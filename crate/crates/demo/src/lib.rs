//! Browser demo: the planner on a quadratic toy, the expert-widening KL
//! curve, and oracle swing-ups of the pendulum. Every export returns a JSON
//! string so the page needs no bindings beyond `JSON.parse`.

use bmpc::autodiff::ParameterSet;
use bmpc::envs::{pendulum_oracle, Discretization, Env, Pendulum, PendulumOracle, PendulumParams, PendulumState};
use bmpc::learner::kl_diag_gaussian;
use bmpc::planner::{plan, PlannerConfig, PriorNoise, QuadraticModel};
use bmpc::replay::remap_log_std;
use bmpc::world_model::{DiagGaussian, LatentState};
use bmpc::Result;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

/// First-step mean and std after each of `0..=iterations` planner
/// iterations, all from the same seed.
pub fn mppi_trace_json(target: f64, samples: usize, iterations: usize, temperature: f64, seed: u64) -> Result<String> {
    let toy = QuadraticModel { target: vec![target.clamp(-1.0, 1.0)] };
    let z = LatentState(vec![0.0]);
    let params = ParameterSet::new();
    let mut steps = Vec::with_capacity(iterations + 1);
    let mut value = 0.0;
    for j in 0..=iterations {
        let cfg = PlannerConfig {
            horizon: 1,
            iterations: j,
            samples,
            temperature,
            elites: 64.min(samples),
            ..PlannerConfig::default()
        };
        let r = plan(&toy, &params, &z, PriorNoise::Policy, None, &cfg, seed)?;
        steps.push(json!({"iteration": j, "mu": r.first.mean[0], "sigma": r.first.std()[0]}));
        value = r.value;
    }
    Ok(json!({"target": toy.target[0], "steps": steps, "value": value}).to_string())
}

/// KL from a 1-D expert to policies with mean 0 across the log-std range,
/// with the expert's log-std taken as is and widened.
pub fn kl_curve_json(expert_mean: f64, expert_log_std: f64) -> Result<String> {
    let raw = DiagGaussian::new(vec![expert_mean], vec![expert_log_std])?;
    let wide = DiagGaussian::new(vec![expert_mean], vec![remap_log_std(expert_log_std)])?;
    let mut rows = Vec::new();
    for i in 0..=80 {
        let l = -3.0 + 0.05 * i as f64;
        let q = DiagGaussian::new(vec![0.0], vec![l])?;
        rows.push(
            json!({"policy_log_std": l, "raw": kl_diag_gaussian(&raw, &q)?, "widened": kl_diag_gaussian(&wide, &q)?}),
        );
    }
    Ok(json!({"widened_log_std": wide.log_std[0], "curve": rows}).to_string())
}

/// Pendulum with a value-iteration controller solved once on a coarse grid.
#[wasm_bindgen]
pub struct PendulumDemo {
    oracle: PendulumOracle,
}

impl PendulumDemo {
    pub fn with_grid(bins: usize) -> Self {
        let bins = bins.clamp(11, 201) | 1;
        Self { oracle: pendulum_oracle(Discretization { theta_bins: bins, omega_bins: bins, actions: 11 }) }
    }

    pub fn rollout_json(&self, theta: f64, omega: f64) -> Result<String> {
        let mut env = Pendulum::new(PendulumParams::default());
        env.set_state(PendulumState { theta, omega });
        let (mut thetas, mut actions) = (vec![theta], Vec::new());
        let mut total = 0.0;
        for t in 0..env.spec().decisions() {
            let s = env.state().expect("state was set");
            let a = self.oracle.policy(s, t);
            total += env.step(&[a])?.reward;
            thetas.push(env.state().expect("state was set").theta);
            actions.push(a);
        }
        Ok(json!({"theta": thetas, "action": actions, "return": total}).to_string())
    }
}

#[wasm_bindgen]
impl PendulumDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(bins: usize) -> PendulumDemo {
        Self::with_grid(bins)
    }

    pub fn rollout(&self, theta: f64, omega: f64) -> std::result::Result<String, JsValue> {
        to_js(self.rollout_json(theta, omega))
    }
}

#[wasm_bindgen]
pub fn mppi_trace(
    target: f64,
    samples: usize,
    iterations: usize,
    temperature: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(mppi_trace_json(target, samples, iterations, temperature, seed as u64))
}

#[wasm_bindgen]
pub fn kl_curve(expert_mean: f64, expert_log_std: f64) -> std::result::Result<String, JsValue> {
    to_js(kl_curve_json(expert_mean, expert_log_std))
}

#[cfg(test)]
mod tests {
    use serde_json::Value;

    use super::*;

    #[test]
    fn trace_converges_to_target() {
        let v: Value = serde_json::from_str(&mppi_trace_json(0.3, 256, 6, 0.5, 1).unwrap()).unwrap();
        let steps = v["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 7);
        assert_eq!(steps[0]["mu"], 0.0);
        assert!((steps[6]["mu"].as_f64().unwrap() - 0.3).abs() < 0.02);
    }

    #[test]
    fn widened_curve_is_flatter_near_the_floor() {
        let v: Value = serde_json::from_str(&kl_curve_json(0.0, -3.0).unwrap()).unwrap();
        assert_eq!(v["widened_log_std"], -2.0);
        let first = &v["curve"][0];
        assert!(first["widened"].as_f64().unwrap() > first["raw"].as_f64().unwrap());
        assert!(first["raw"].as_f64().unwrap().abs() < 1e-12);
    }

    #[test]
    fn oracle_swings_up() {
        let demo = PendulumDemo::with_grid(51);
        let v: Value = serde_json::from_str(&demo.rollout_json(std::f64::consts::PI, 0.0).unwrap()).unwrap();
        assert_eq!(v["theta"].as_array().unwrap().len(), 101);
        assert!(v["return"].as_f64().unwrap() > 100.0, "{}", v["return"]);
    }
}
