use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::policy::{Policy, PolicyConfig};

#[test]
fn one_step_terminal() {
    let (a, r) = compute_gae(&[1.0], &[0.0], &[true], 123.0, 0.99, 0.95).unwrap();
    assert_eq!(a, vec![1.0]);
    assert_eq!(r, vec![1.0]);
    assert!(compute_gae(&[1.0, 2.0], &[0.0], &[true], 0.0, 0.99, 0.95).is_err());
}

#[test]
fn three_step_toy_matches_double_sum() {
    let (r, v, d) = ([1.0, 0.0, 1.0], [0.5, 0.2, 0.1], [false, false, true]);
    let (a, ret) = compute_gae(&r, &v, &d, 0.0, 0.99, 0.95).unwrap();
    // hand expansion
    let d0 = 1.0 + 0.99 * 0.2 - 0.5;
    let d1 = 0.0 + 0.99 * 0.1 - 0.2;
    let d2 = 1.0 - 0.1;
    let g = 0.99 * 0.95;
    let expected = [d0 + g * d1 + g * g * d2, d1 + g * d2, d2];
    for t in 0..3 {
        assert!((a[t] - expected[t]).abs() < 1e-12);
        assert!((ret[t] - (a[t] + v[t])).abs() < 1e-15);
    }
    assert_eq!(gae_brute_force(&r, &v, &d, 0.0, 0.99, 0.95).len(), 3);
}

fn random_stream(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64) {
    let episodes = rng.random_range(1..4);
    let (mut r, mut v, mut d) = (Vec::new(), Vec::new(), Vec::new());
    for e in 0..episodes {
        let len = rng.random_range(1..=32);
        for t in 0..len {
            r.push(rng.random_range(-2.0..2.0));
            v.push(rng.random_range(-2.0..2.0));
            // the last episode may be cut off by the rollout instead of ending
            d.push(t + 1 == len && (e + 1 < episodes || rng.random_bool(0.5)));
        }
    }
    (r, v, d, rng.random_range(-2.0..2.0))
}

#[test]
fn recursive_gae_equals_double_sum_and_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (r, v, d, boot) = random_stream(&mut rng);
        let (g, l) = (rng.random_range(0.8..1.0), rng.random_range(0.0..1.0));
        let (a, _) = compute_gae(&r, &v, &d, boot, g, l).unwrap();
        let bf = gae_brute_force(&r, &v, &d, boot, g, l);
        for (x, y) in a.iter().zip(&bf) {
            assert!((x - y).abs() < 1e-10);
        }
        // lambda = 0: one-step TD residual exactly
        let (a0, _) = compute_gae(&r, &v, &d, boot, g, 0.0).unwrap();
        for t in 0..r.len() {
            let next = if d[t] { 0.0 } else if t + 1 < r.len() { v[t + 1] } else { boot };
            assert_eq!(a0[t], r[t] + g * next - v[t]);
        }
        // lambda = 1: discounted return minus baseline
        let (a1, ret1) = compute_gae(&r, &v, &d, boot, g, 1.0).unwrap();
        let mut mc = vec![0.0; r.len()];
        let mut acc = boot;
        for t in (0..r.len()).rev() {
            acc = r[t] + g * if d[t] { 0.0 } else { acc };
            mc[t] = acc;
        }
        for t in 0..r.len() {
            assert!((ret1[t] - mc[t]).abs() < 1e-10);
            assert!((a1[t] - (mc[t] - v[t])).abs() < 1e-10);
        }
    }
}

#[test]
fn episodes_are_isolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut d = vec![false; 20];
    d[7] = true;
    d[19] = true;
    let (a, _) = compute_gae(&r, &v, &d, 0.0, 0.99, 0.95).unwrap();
    let mut r2 = r.clone();
    for x in &mut r2[8..] {
        *x += 5.0;
    }
    let (b, _) = compute_gae(&r2, &v, &d, 0.0, 0.99, 0.95).unwrap();
    assert_eq!(a[..8], b[..8]);
}

#[test]
fn normalization_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..257).map(|_| rng.random_range(-3.0..7.0)).collect();
    let n = normalize_advantages(&a);
    let mean = n.iter().sum::<f64>() / n.len() as f64;
    let std = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
    assert!(mean.abs() < 1e-6);
    assert!((std - 1.0).abs() < 1e-4);
}

fn losses_for(logp: &[f64], old: &[f64], adv: &[f64], cfg: &PpoConfig) -> (Tape<f64>, Var, PpoLosses) {
    let tape = Tape::<f64>::new();
    let lp = tape.leaf(Tensor::vector(logp.to_vec()), true).unwrap();
    let ent = tape.constant(Tensor::vector(vec![1.0; logp.len()])).unwrap();
    let val = tape.constant(Tensor::vector(vec![0.0; logp.len()])).unwrap();
    let l = ppo_losses(&tape, lp, ent, val, old, adv, &vec![0.0; logp.len()], cfg).unwrap();
    (tape, lp, l)
}

#[test]
fn identity_ratio_and_term_isolation() {
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..Default::default()
    };
    let old = [-1.0, -0.3, -2.2, -0.9];
    let adv = normalize_advantages(&[0.5, -1.0, 2.0, 0.1]);
    let (tape, _, l) = losses_for(&old, &old, &adv, &cfg);
    assert!(tape.value(l.ratio).data().iter().all(|r| (r - 1.0).abs() < 1e-12));
    assert!(tape.value(l.clip).item().abs() < 1e-6);
    // value fit is perfect and the entropy weight is zero
    assert_eq!(tape.value(l.total).item(), -tape.value(l.clip).item());
    assert!(ppo_losses(&tape, l.ratio, l.ratio, l.ratio, &[], &[], &[], &cfg).is_err());
}

#[test]
fn surrogate_is_pointwise_min_and_clipped_branch_has_no_gradient() {
    let cfg = PpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = 16;
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
        let new: Vec<f64> = old.iter().map(|o| o + rng.random_range(-0.6..0.6)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (tape, lp, l) = losses_for(&new, &old, &adv, &cfg);
        let ratio = tape.value(l.ratio).to_vec();
        let expected: f64 = (0..n)
            .map(|i| (ratio[i] * adv[i]).min(ratio[i].clamp(0.8, 1.2) * adv[i]))
            .sum::<f64>()
            / n as f64;
        assert!((tape.value(l.clip).item() - expected).abs() < 1e-12);
        let g = tape.backward(l.clip).unwrap();
        let g = g.wrt(lp);
        for i in 0..n {
            let clipped_active = (adv[i] > 0.0 && ratio[i] > 1.2) || (adv[i] < 0.0 && ratio[i] < 0.8);
            if clipped_active {
                assert_eq!(g.data()[i], 0.0);
            } else {
                assert!((g.data()[i] - ratio[i] * adv[i] / n as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradient_clipping_bounds_the_global_norm() {
    let mut g = vec![
        (ParamId(0), Tensor::vector(vec![3.0f64, 0.0])),
        (ParamId(1), Tensor::vector(vec![0.0, 4.0])),
    ];
    let norm = clip_grad_norm(&mut g, 0.5);
    assert_eq!(norm, 5.0);
    let after: f64 = g.iter().flat_map(|(_, t)| t.data().to_vec()).map(|v| v * v).sum::<f64>().sqrt();
    assert!((after - 0.5).abs() < 1e-6);
}

struct Toy {
    policy: Policy,
}

struct ToySample {
    h: Vec<f64>,
    a_tilde: Vec<f64>,
}

impl ActorCritic<f64> for Toy {
    type Sample = ToySample;
    fn evaluate_batch(&self, tape: &Tape<f64>, store: &ParamStore<f64>, batch: &[&ToySample]) -> Result<(Var, Var, Var), TensorError> {
        let h = tape.constant(Tensor::new(vec![batch.len(), 3], batch.iter().flat_map(|s| s.h.clone()).collect())?)?;
        let a = tape.constant(Tensor::new(vec![batch.len(), 2], batch.iter().flat_map(|s| s.a_tilde.clone()).collect())?)?;
        self.policy.evaluate(tape, store, h, a)
    }
    fn policy_params(&self) -> Vec<ParamId> {
        self.policy.actor_params()
    }
    fn value_params(&self) -> Vec<ParamId> {
        self.policy.critic_params()
    }
}

fn toy_setup(seed: u64) -> (Toy, ParamStore<f64>, Rollout<ToySample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = PolicyConfig {
        action_dim: 2,
        hidden: vec![8],
        ..Default::default()
    };
    let policy = Policy::new(&mut store, 3, &cfg, &mut rng).unwrap();
    let toy = Toy { policy };
    let mut samples = Vec::new();
    let mut logp_old = Vec::new();
    let mut rewards = Vec::new();
    let mut values = Vec::new();
    for _ in 0..64 {
        let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::no_grad();
        let hv = tape.constant(Tensor::new(vec![1, 3], h.clone()).unwrap()).unwrap();
        let (s, v) = toy.policy.act(&tape, &store, hv, &mut rng, false).unwrap().remove(0);
        // reward favours pushing the first action towards the first feature
        rewards.push(-(s.action[0] - h[0]).powi(2));
        values.push(v);
        logp_old.push(s.logp);
        samples.push(ToySample { h, a_tilde: s.a_tilde });
    }
    let dones = vec![true; 64];
    let (advantages, returns) = compute_gae(&rewards, &values, &dones, 0.0, 0.99, 0.95).unwrap();
    (
        toy,
        store,
        Rollout {
            samples,
            logp_old,
            advantages,
            returns,
        },
    )
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (toy, mut store, rollout) = toy_setup(5);
    let before = store.clone();
    let cfg = PpoConfig {
        lr_policy: 0.0,
        lr_value: 0.0,
        minibatch: 16,
        ..Default::default()
    };
    let mut opt = PpoOptimizers::new(&toy, &store, &cfg);
    let stats = update(&toy, &mut store, &mut opt, &rollout, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (id, _, t) in before.iter() {
        let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = store.get(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    // with unchanged parameters every ratio is exactly one
    assert!(stats.approx_kl.abs() < 1e-12);
    assert_eq!(stats.clip_frac, 0.0);
    assert_eq!(stats.minibatches, 12);
}

#[test]
fn update_is_deterministic_and_moves_parameters() {
    let run = || {
        let (toy, mut store, rollout) = toy_setup(6);
        let cfg = PpoConfig {
            minibatch: 16,
            lr_policy: 1e-2,
            lr_value: 1e-2,
            ..Default::default()
        };
        let mut opt = PpoOptimizers::new(&toy, &store, &cfg);
        let stats = update(&toy, &mut store, &mut opt, &rollout, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (stats, store)
    };
    let (s1, p1) = run();
    let (s2, p2) = run();
    assert_eq!(s1, s2);
    assert!(s1.grad_norm > 0.0 && s1.approx_kl > 0.0);
    for (id, _, t) in p1.iter() {
        assert_eq!(t, p2.get(id));
    }
    let (_, fresh, _) = toy_setup(6);
    assert!(p1.iter().any(|(id, _, t)| t != fresh.get(id)));
}

#[test]
fn config_validation() {
    assert!(PpoConfig::default().validate().is_ok());
    assert!(PpoConfig { clip: 1.5, ..Default::default() }.validate().is_err());
    assert!(PpoConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    assert!(PpoConfig { minibatch: 0, ..Default::default() }.validate().is_err());
}
