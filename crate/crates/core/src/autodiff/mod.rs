//! Dense `f64` arrays, a reverse-mode tape, and an adaptive-moment optimizer.

mod check;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use graph::{softmax, Graph, Var};
pub use params::{ema_update, Adam, ParamId, ParameterSet};
pub(crate) use tensor::gemm;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Result;

    /// Tiny two-layer perceptron touching every differentiable op.
    fn all_ops_loss(p: &ParameterSet, x: &Tensor, target: &Tensor) -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let w0 = g.param(p, p.id("w0")?);
        let b0 = g.param(p, p.id("b0")?);
        let w1 = g.param(p, p.id("w1")?);
        let b1 = g.param(p, p.id("b1")?);
        let h = g.matmul(xin, w0)?;
        let h = g.add_bias(h, b0)?;
        let h = g.layer_norm(h)?;
        let h = g.silu(h);
        let t = g.tanh(h);
        let sp = g.softplus(h);
        let h = g.add(t, sp)?;
        let logits = g.matmul(h, w1)?;
        let logits = g.add_bias(logits, b1)?;
        let ce = g.cross_entropy(logits, target)?;
        let left = g.slice_cols(logits, 0, 2)?;
        let right = g.slice_cols(logits, 2, 4)?;
        let both = g.concat_cols(&[right, left])?;
        let sm = g.softmax(both)?;
        let pos = g.add_scalar(sm, 0.5);
        let lg = g.log(pos);
        let ex = g.exp(left);
        let prod = g.mul(ex, right)?;
        let prod = g.reshape(prod, &[x.rows(), 2])?;
        let diff = g.sub(lg, both)?;
        let r1 = g.sum_cols(diff)?;
        let ls = g.log_softmax(logits)?;
        let s1 = g.mean(ce);
        let s2 = g.sum(r1);
        let s3 = g.mean(prod);
        let s4 = g.sum(ls);
        let s = g.add(s1, s2)?;
        let s = g.add(s, s3)?;
        let s4 = g.scale(s4, 0.01);
        let s = g.add(s, s4)?;
        Ok((g, s))
    }

    #[test]
    fn random_mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut p = ParameterSet::new();
            p.insert_linear_weight("w0", 3, 5, &mut rng).unwrap();
            p.insert("b0", Tensor::new(&[5], (0..5).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()).unwrap();
            p.insert_linear_weight("w1", 5, 4, &mut rng).unwrap();
            p.insert("b1", Tensor::new(&[4], (0..4).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()).unwrap();
            let x = Tensor::new(&[2, 3], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let mut t: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            for row in t.chunks_mut(4) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let target = Tensor::new(&[2, 4], t).unwrap();
            let check = grad_check(&p, |_| true, |p| all_ops_loss(p, &x, &target), 1e-5, 3, 24, &mut rng).unwrap();
            assert!(check.grad_norm > 1e-6);
            assert!(check.max_rel_err() < 1e-4, "{check:?}");
        }
    }

    #[test]
    fn ops_preserve_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterSet::new();
        p.insert_linear_weight("w0", 3, 5, &mut rng).unwrap();
        p.insert("b0", Tensor::zeros(&[5])).unwrap();
        p.insert_linear_weight("w1", 5, 4, &mut rng).unwrap();
        p.insert("b1", Tensor::zeros(&[4])).unwrap();
        let x = Tensor::new(&[2, 3], vec![50.0, -80.0, 3.0, 0.0, 1e3, -1e3]).unwrap();
        let target = Tensor::full(&[2, 4], 0.25);
        let (g, out) = all_ops_loss(&p, &x, &target).unwrap();
        assert!(g.value(out).is_finite());
        let mut grads = p.clone();
        g.backward(out, &mut grads).unwrap();
        assert!(grads.grad_norm().is_finite());
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut p = ParameterSet::new();
            p.insert_linear_weight("w0", 3, 5, &mut rng).unwrap();
            p.insert("b0", Tensor::zeros(&[5])).unwrap();
            p.insert_linear_weight("w1", 5, 4, &mut rng).unwrap();
            p.insert("b1", Tensor::zeros(&[4])).unwrap();
            let opt = Adam::with_lr(1e-2);
            for _ in 0..20 {
                let x = Tensor::new(&[2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let target = Tensor::full(&[2, 4], 0.25);
                p.zero_grad();
                let (g, out) = all_ops_loss(&p, &x, &target).unwrap();
                g.backward(out, &mut p).unwrap();
                opt.step(&mut p).unwrap();
            }
            p.ids().flat_map(|id| p.value(id).data().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
