use dpml_core::mechanisms::{clip_l2, sanitize, ClipConfig, NoiseSource};
use dpml_core::numeric::l2_norm;
use proptest::prelude::*;

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_threshold(
        g in prop::collection::vec(-1e6f64..1e6, 1..40),
        c in 1e-3f64..1e3,
    ) {
        let out = clip_l2(&g, c).unwrap();
        prop_assert!(l2_norm(&out) <= c + 1e-12 * c.max(1.0));
        // direction preserved
        let dot: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= 0.0);
    }

    #[test]
    fn clipping_is_idempotent(
        g in prop::collection::vec(-1e3f64..1e3, 1..40),
        c in 1e-2f64..1e2,
    ) {
        let once = clip_l2(&g, c).unwrap();
        let twice = clip_l2(&once, c).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300) + 1e-15);
        }
    }
}

#[test]
fn noise_has_the_calibrated_standard_deviation() {
    // σ = 4, C = 2, L = 600 → per-coordinate sd 8/600
    let mut noise = NoiseSource::new(2024);
    let clip = ClipConfig::Global(2.0);
    let draws = 100_000;
    let dim = 1;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let v = sanitize(&[], dim, &clip, 4.0, 600, &mut noise).unwrap()[0];
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / draws as f64;
    let sd = (sum_sq / draws as f64 - mean * mean).sqrt();
    let want = 8.0 / 600.0;
    assert!((sd / want - 1.0).abs() < 0.02, "{sd} vs {want}");
    assert!(mean.abs() < 4.0 * want / (draws as f64).sqrt());
}

#[test]
fn per_segment_noise_scales_with_each_threshold() {
    let mut noise = NoiseSource::new(5);
    let clip = ClipConfig::PerSegment {
        thresholds: vec![1.0, 10.0],
        lengths: vec![20_000, 20_000],
    };
    let out = sanitize(&[], 40_000, &clip, 1.0, 1, &mut noise).unwrap();
    let sd = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    assert!((sd(&out[..20_000]) - 1.0).abs() < 0.03);
    assert!((sd(&out[20_000..]) - 10.0).abs() < 0.3);
}

#[test]
fn sanitize_is_deterministic_under_seed() {
    let grads: Vec<Vec<f64>> = (0..300).map(|i| vec![(i as f64).sin() * 3.0, (i as f64).cos()]).collect();
    let run = |seed| sanitize(&grads, 2, &ClipConfig::Global(1.0), 2.0, 100, &mut NoiseSource::new(seed)).unwrap();
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn unbounded_clip_without_noise_is_the_plain_sum_over_l() {
    let grads = vec![vec![10.0, -3.0], vec![2.0, 5.0], vec![-1.0, 1.0]];
    let out = sanitize(&grads, 2, &ClipConfig::Global(f64::INFINITY), 0.0, 4, &mut NoiseSource::new(0)).unwrap();
    assert_eq!(out, vec![11.0 / 4.0, 3.0 / 4.0]);
}
