//! Central finite-difference gradient checking.
//!
//! Uses only forward evaluations of the loss closure, so it stays an
//! independent oracle for the reverse sweep.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterSet};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` along random
    /// directions, worst case.
    pub directional_rel_err: f64,
    /// `||a - n|| / max(||a||, ||n||)` over the sampled coordinates.
    pub coordinate_rel_err: f64,
    /// Norm of the analytic gradient; a check on an all-zero gradient is
    /// vacuous.
    pub grad_norm: f64,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.directional_rel_err.max(self.coordinate_rel_err)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compare reverse-mode gradients of `loss` with central differences.
///
/// `loss` builds a fresh graph from the given parameters and returns its
/// scalar output node. Only parameters selected by `wrt` are perturbed.
pub fn grad_check<F>(
    params: &ParameterSet,
    wrt: impl Fn(&str) -> bool,
    loss: F,
    step: f64,
    directions: usize,
    coordinates: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck>
where
    F: Fn(&ParameterSet) -> Result<(Graph, Var)>,
{
    let ids: Vec<ParamId> = params.ids().filter(|&id| wrt(params.name(id))).collect();

    let mut analytic = params.clone();
    analytic.zero_grad();
    let (g, out) = loss(&analytic)?;
    g.backward(out, &mut analytic)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let (g, out) = loss(p)?;
        Ok(g.value(out).item())
    };

    let grad_norm = ids.iter().flat_map(|&id| analytic.grad(id).data()).map(|x| x * x).sum::<f64>().sqrt();

    let mut directional_rel_err: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> =
            ids.iter().map(|&id| (0..params.value(id).len()).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let norm = dir.iter().flatten().map(|x: &f64| x * x).sum::<f64>().sqrt();
        let mut plus = params.clone();
        let mut minus = params.clone();
        let mut a_dot = 0.0;
        for (&id, d) in ids.iter().zip(&dir) {
            let g = analytic.grad(id).data();
            for (j, dj) in d.iter().enumerate() {
                let u = dj / norm;
                plus.value_mut(id).data_mut()[j] += step * u;
                minus.value_mut(id).data_mut()[j] -= step * u;
                a_dot += g[j] * u;
            }
        }
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        directional_rel_err = directional_rel_err.max(rel(a_dot, numeric));
    }

    let total: usize = ids.iter().map(|&id| params.value(id).len()).sum();
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    if total > 0 {
        for _ in 0..coordinates {
            let mut k = rng.random_range(0..total);
            let mut which = ids[0];
            for &id in &ids {
                let len = params.value(id).len();
                if k < len {
                    which = id;
                    break;
                }
                k -= len;
            }
            let mut p = params.clone();
            p.value_mut(which).data_mut()[k] += step;
            let fp = eval(&p)?;
            p.value_mut(which).data_mut()[k] -= 2.0 * step;
            let fm = eval(&p)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.grad(which).data()[k];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let coordinate_rel_err = if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom };

    Ok(GradCheck { directional_rel_err, coordinate_rel_err, grad_norm })
}
