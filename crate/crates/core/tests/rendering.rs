use gibr_core::renderer::{
    composite, deltas, importance_depths, stratified_depths, subsample_count, subsample_pixels, RaySamples,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples(depths: Vec<f64>, densities: Vec<f64>, far: f64) -> RaySamples {
    let n = depths.len();
    RaySamples {
        deltas: deltas(&depths, far),
        depths,
        densities,
        colors: (0..n).map(|i| [i as f64 / n as f64, 0.5, 1.0 - i as f64 / n as f64]).collect(),
    }
}

/// Direct transcription of the quadrature: T_i = prod_{j<i} (1 - a_j).
fn reference_weights(s: &RaySamples) -> Vec<f64> {
    let mut t = 1.0;
    let mut out = Vec::new();
    for (sigma, d) in s.densities.iter().zip(&s.deltas) {
        let a = 1.0 - (-sigma * d).exp();
        out.push(t * a);
        t *= 1.0 - a;
    }
    out
}

proptest! {
    #[test]
    fn weights_match_product_form(mut depths in prop::collection::vec(0.05f64..8.0, 1..40), seed in any::<u64>()) {
        depths.sort_by(f64::total_cmp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let densities: Vec<f64> = depths.iter().map(|_| rand::Rng::random_range(&mut rng, 0.0..4.0)).collect();
        let s = samples(depths, densities, 8.0);
        let out = composite(&s, [0.1, 0.2, 0.3]);
        for (a, b) in out.weights.iter().zip(reference_weights(&s)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((out.weights.iter().sum::<f64>() + out.background_weight - 1.0).abs() < 1e-12);
        prop_assert!((out.opacity - out.weights.iter().sum::<f64>()).abs() < 1e-12);
        for c in 0..3 {
            let expect: f64 = out.weights.iter().zip(&s.colors).map(|(w, col)| w * col[c]).sum::<f64>()
                + out.background_weight * [0.1, 0.2, 0.3][c];
            prop_assert!((out.rgb[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_lies_between_samples(mut depths in prop::collection::vec(0.05f64..8.0, 1..40), dens in 0.01f64..10.0) {
        depths.sort_by(f64::total_cmp);
        let n = depths.len();
        let (lo, hi) = (depths[0], depths[n - 1]);
        let out = composite(&samples(depths, vec![dens; n], 8.0), [0.0; 3]);
        prop_assert!(out.depth >= lo - 1e-9 && out.depth <= hi + 1e-9);
    }

    #[test]
    fn stratified_samples_one_per_bin(near in 0.01f64..1.0, len in 0.1f64..20.0, n in 1usize..64, seed in any::<u64>()) {
        let far = near + len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = stratified_depths(near, far, n, Some(&mut rng)).unwrap();
        let w = len / n as f64;
        for (i, x) in d.iter().enumerate() {
            prop_assert!(*x >= near + i as f64 * w - 1e-12 && *x <= near + (i + 1) as f64 * w + 1e-12);
        }
    }

    #[test]
    fn importance_samples_avoid_empty_bins(weights in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], 2..32), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (near, far) = (1.0, 5.0);
        let d = importance_depths(near, far, &weights, 64, &mut rng).unwrap();
        prop_assert_eq!(d.len(), 64);
        let bw = (far - near) / weights.len() as f64;
        let any_mass = weights.iter().any(|&w| w > 0.0);
        for x in d {
            prop_assert!((near..=far).contains(&x));
            if any_mass {
                let bin = (((x - near) / bw) as usize).min(weights.len() - 1);
                // a sample on a bin edge may be credited to its neighbour
                let edge = ((x - near) / bw).fract() < 1e-9 && bin > 0;
                prop_assert!(weights[bin] > 0.0 || (edge && weights[bin - 1] > 0.0));
            }
        }
    }

    #[test]
    fn subsampled_pixels_are_distinct(fraction in 0.0f64..=1.0, w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = subsample_pixels(fraction, w, h, &mut rng);
        prop_assert_eq!(px.len(), subsample_count(fraction, w, h));
        prop_assert!(px.len() <= w * h);
        let mut sorted = px.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), px.len());
        prop_assert!(px.iter().all(|&p| p < w * h));
    }
}

#[test]
fn importance_sampling_follows_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = [1.0, 0.0, 3.0, 0.0];
    let d = importance_depths(0.0 + 1e-3, 4.0 + 1e-3, &weights, 40_000, &mut rng).unwrap();
    let third = d.iter().filter(|&&x| x > 2.0).count() as f64 / d.len() as f64;
    assert!((third - 0.75).abs() < 0.01, "{third}");
}
