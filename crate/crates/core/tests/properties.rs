//! Property tests for the invariants every module promises.

use bmpc::autodiff::{ema_update, ParameterSet, Tensor};
use bmpc::learner::{kl_diag_gaussian, update_kl_scale, KLScale};
use bmpc::planner::{plan, PlannerConfig, PriorNoise, QuadraticModel};
use bmpc::replay::{remap_log_std, ReplayBuffer, TransitionRecord};
use bmpc::world_model::{DiagGaussian, LatentState, TwoHot};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gaussian(dim: usize) -> impl Strategy<Value = DiagGaussian> {
    (prop::collection::vec(-1.0..1.0f64, dim), prop::collection::vec(-3.0..1.0f64, dim))
        .prop_map(|(m, l)| DiagGaussian::new(m, l).unwrap())
}

fn episode(id: u64, len: usize) -> Vec<TransitionRecord> {
    let pi = DiagGaussian::new(vec![0.0], vec![0.0]).unwrap();
    (0..len)
        .map(|t| TransitionRecord {
            obs: vec![t as f64],
            action: vec![0.0],
            reward: 0.0,
            next_obs: vec![t as f64 + 1.0],
            pi: pi.clone(),
            pi_version: 0,
            episode: id,
            step: t,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_hot_round_trips_in_symlog_space(v in -2.0e4..2.0e4f64) {
        let th = TwoHot::new(101, -10.0, 10.0);
        let probs = th.encode(v).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().filter(|&&p| p > 0.0).count() <= 2);
        let x = v.signum() * v.abs().ln_1p();
        prop_assert!((th.decode_transformed(&probs) - x).abs() < 1e-9);
    }

    #[test]
    fn remap_is_monotone_and_stays_in_the_wide_bounds(a in -3.0..1.0f64, b in -3.0..1.0f64) {
        let (ra, rb) = (remap_log_std(a), remap_log_std(b));
        prop_assert!((-2.0..=1.0).contains(&ra));
        prop_assert!(ra >= a);
        if a < b {
            prop_assert!(ra < rb);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity(p in gaussian(3), q in gaussian(3)) {
        prop_assert!(kl_diag_gaussian(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_diag_gaussian(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_scale_is_a_convex_combination(s in 0.0..50.0f64, kls in prop::collection::vec(0.0..100.0f64, 2..40)) {
        let prior = KLScale { s, initialized: true };
        let next = update_kl_scale(prior, &kls, 0.99);
        let lo = kls.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = kls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let spread_max = hi - lo;
        prop_assert!(next.s >= 0.99 * s - 1e-12);
        prop_assert!(next.s <= 0.99 * s + 0.01 * spread_max + 1e-12);
        prop_assert!(next.divisor() >= 1.0);
    }

    #[test]
    fn ema_moves_by_rate(t0 in -5.0..5.0f64, o in -5.0..5.0f64, rate in 0.0..1.0f64) {
        let mut target = ParameterSet::new();
        target.insert("w", Tensor::new(&[1], vec![t0]).unwrap()).unwrap();
        let mut online = ParameterSet::new();
        let id = online.insert("w", Tensor::new(&[1], vec![o]).unwrap()).unwrap();
        ema_update(&mut target, &online, rate).unwrap();
        let got = target.value(id).data()[0];
        prop_assert!((got - ((1.0 - rate) * t0 + rate * o)).abs() < 1e-12);
    }

    #[test]
    fn clamped_samples_stay_in_the_action_box(d in gaussian(2), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let a = d.sample_clamped(&mut rng);
            prop_assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn plan_distribution_respects_bounds(
        target in prop::collection::vec(-1.5..1.5f64, 1..3),
        horizon in 1usize..4,
        iterations in 0usize..4,
        temperature in 0.05..2.0f64,
        seed in any::<u64>(),
    ) {
        let toy = QuadraticModel { target };
        let cfg = PlannerConfig { horizon, iterations, samples: 48, prior_samples: 8, elites: 16, temperature, ..PlannerConfig::default() };
        let r = plan(&toy, &ParameterSet::new(), &LatentState(vec![0.0]), PriorNoise::Policy, None, &cfg, seed).unwrap();
        let m = toy.target.len();
        prop_assert_eq!(r.actions.len(), horizon * m);
        prop_assert!(r.dist.mu.iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert!(r.dist.sigma.iter().all(|&s| s >= cfg.sigma_floor && s <= cfg.sigma_init));
        prop_assert_eq!(r.best_scores.len(), iterations);
        prop_assert!(r.best_scores.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(r.prior_values.len(), cfg.prior_samples);
    }

    #[test]
    fn segments_stay_inside_one_episode(
        lens in prop::collection::vec(1usize..30, 1..6),
        horizon in 0usize..5,
        seed in any::<u64>(),
    ) {
        let mut buffer = ReplayBuffer::new(10_000).unwrap();
        for (i, &len) in lens.iter().enumerate() {
            buffer.push_episode(episode(i as u64, len)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match buffer.sample_segments(32, horizon, &mut rng) {
            Ok(segs) => {
                for s in segs {
                    prop_assert_eq!(s.records.len(), horizon + 1);
                    let ep = s.records[0].episode;
                    for (t, r) in s.records.iter().enumerate() {
                        prop_assert_eq!(r.episode, ep);
                        prop_assert_eq!(r.step, s.records[0].step + t);
                    }
                }
            }
            Err(_) => prop_assert!(lens.iter().all(|&l| l <= horizon)),
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity(lens in prop::collection::vec(1usize..40, 1..20), cap in 40usize..120) {
        let mut buffer = ReplayBuffer::new(cap).unwrap();
        for (i, &len) in lens.iter().enumerate() {
            buffer.push_episode(episode(i as u64, len)).unwrap();
            prop_assert!(buffer.len() <= cap);
        }
    }

    #[test]
    fn planner_config_rejects_too_many_elites(samples in 1usize..64, prior in 0usize..16, extra in 1usize..8) {
        let cfg = PlannerConfig { samples, prior_samples: prior, elites: samples + prior + extra, ..PlannerConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }
}
