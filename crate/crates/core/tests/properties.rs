use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossfuse::encoders::perturb_depth;
use crossfuse::envsim::CurriculumSchedule;
use crossfuse::harness::analytics::{coefficient_of_variation, efficiency_stats, return_series};
use crossfuse::harness::parse_seeds;
use crossfuse::ppo::{compute_gae, normalize_advantages};

fn stream() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(prop::bool::weighted(0.1), n),
        )
    })
}

proptest! {
    #[test]
    fn gae_is_linear_in_rewards((r, v, d) in stream(), boot in -5.0..5.0f64, scale in -3.0..3.0f64) {
        let (a, _) = compute_gae(&r, &v, &d, boot, 0.97, 0.9).unwrap();
        let zeros = vec![0.0; r.len()];
        let (base, _) = compute_gae(&zeros, &v, &d, boot, 0.97, 0.9).unwrap();
        let scaled: Vec<f64> = r.iter().map(|x| x * scale).collect();
        let (b, _) = compute_gae(&scaled, &v, &d, boot, 0.97, 0.9).unwrap();
        for t in 0..r.len() {
            // value terms are shared, reward terms scale
            let expect = base[t] + scale * (a[t] - base[t]);
            prop_assert!((b[t] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn normalized_advantages_are_centred(adv in prop::collection::vec(-100.0..100.0f64, 2..200)) {
        let n = normalize_advantages(&adv);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!(n.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cov_is_scale_invariant(xs in prop::collection::vec(0.5..10.0f64, 2..60), c in 0.01..100.0f64) {
        let w = xs.len();
        let a = coefficient_of_variation(&xs, w).unwrap().unwrap();
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let b = coefficient_of_variation(&scaled, w).unwrap().unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn affine_series_slope_is_recovered(a in -50.0..50.0f64, b in -5.0..5.0f64, n in 3usize..150) {
        let ys: Vec<f64> = (0..n).map(|t| a + b * t as f64).collect();
        let e = efficiency_stats(&ys, n - 1).unwrap();
        prop_assert!((e.early_slope - b).abs() < 1e-8);
        prop_assert!((e.auc_per_epoch - (a + b * (n - 1) as f64 / 2.0)).abs() < 1e-8);
    }

    #[test]
    fn return_series_covers_every_iteration(
        finished in prop::collection::vec((0usize..30, -10.0..10.0f64), 1..40),
        iterations in 30usize..40,
    ) {
        let s = return_series(&finished, iterations).unwrap();
        prop_assert_eq!(s.len(), iterations);
        // every entry is the mean of some iteration that finished episodes
        let means: Vec<f64> = (0..iterations)
            .filter_map(|i| {
                let rs: Vec<f64> = finished.iter().filter(|(it, _)| *it == i).map(|(_, r)| *r).collect();
                (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
            })
            .collect();
        prop_assert!(s.iter().all(|x| means.iter().any(|m| (m - x).abs() < 1e-12)));
        for (i, x) in s.iter().enumerate() {
            let here: Vec<f64> = finished.iter().filter(|(it, _)| *it == i).map(|(_, r)| *r).collect();
            if !here.is_empty() {
                prop_assert!((x - here.iter().sum::<f64>() / here.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curriculum_is_monotone_and_bounded(start in 0.0..1.0f64, span in 0.0..1.0f64, ramp in 0usize..300) {
        let target = (start + span).min(1.0);
        let c = CurriculumSchedule { start_density: start, target_density: target, ramp_iters: ramp };
        let mut prev = c.density(0);
        for i in 0..ramp + 20 {
            let d = c.density(i);
            prop_assert!(d >= prev - 1e-15 && d >= start - 1e-15 && d <= target + 1e-15);
            prev = d;
        }
        prop_assert_eq!(c.density(ramp + 5), target);
    }

    #[test]
    fn seed_lists_parse_back(seeds in prop::collection::vec(0u64..1_000_000, 1..10)) {
        let text = seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_seeds(&text).unwrap(), seeds);
    }

    #[test]
    fn depth_noise_only_writes_max_range(seed in any::<u64>(), len in 30usize..400) {
        let frame: Vec<f32> = (0..len).map(|i| (i % 7) as f32).collect();
        let (out, picked) = perturb_depth(&frame, 10.0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((3..=30).contains(&picked.len()));
        for i in 0..len {
            prop_assert!(out[i] == frame[i] || out[i] == 10.0);
        }
    }
}
