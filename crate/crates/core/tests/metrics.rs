use gibr_core::evaluation::{
    average_ranks, best_by_psnr, best_per_metric, depth_rank_correlation, psnr, spearman, ssim, ssim_gray, Metrics,
};
use gibr_core::io::{Image, ScalarMap};
use proptest::prelude::*;

fn pattern_pair() -> (Vec<f64>, Vec<f64>, Vec<f64>, usize, usize) {
    let (h, w) = (16usize, 20usize);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    for r in 0..h {
        for col in 0..w {
            let x = ((r * 7 + col * 13) % 17) as f64 / 16.0;
            a.push(x);
            b.push(((r * 5 + col * 3 + (r * col) % 7) % 11) as f64 / 10.0);
            c.push((0.8 * x + 0.1 * ((r + col) as f64).sin()).clamp(0.0, 1.0));
        }
    }
    (a, b, c, w, h)
}

// Reference values from skimage.metrics.structural_similarity with
// gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.
#[test]
fn ssim_matches_reference_implementation() {
    let (a, b, c, w, h) = pattern_pair();
    let s_ab = ssim_gray(&a, &b, w, h).unwrap();
    let s_ac = ssim_gray(&a, &c, w, h).unwrap();
    assert!((s_ab - 0.02213151368832609).abs() < 1e-9, "{s_ab}");
    assert!((s_ac - 0.9220999731516426).abs() < 1e-9, "{s_ac}");
}

#[test]
fn ssim_of_identical_images_is_one() {
    let (a, _, _, w, h) = pattern_pair();
    assert!((ssim_gray(&a, &a, w, h).unwrap() - 1.0).abs() < 1e-12);
    let img = Image::new(w, h, a.iter().flat_map(|&x| [x, x * 0.5, 1.0 - x]).collect()).unwrap();
    assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
}

// scipy.stats.spearmanr on the same vectors.
#[test]
fn spearman_matches_reference_with_ties() {
    let x: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64).collect();
    let y: Vec<f64> = (0..40).map(|i| ((i * i) % 13) as f64 + 0.5 * (i % 3) as f64).collect();
    let r = spearman(&x, &y).unwrap();
    assert!((r - 0.19749059886788).abs() < 1e-12, "{r}");
}

#[test]
fn spearman_undefined_cases() {
    assert_eq!(spearman(&[1.0], &[2.0]), None);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert_eq!(spearman(&[1.0, 2.0], &[1.0]), None);
}

#[test]
fn psnr_matches_direct_formula() {
    let (a, b, _, w, h) = pattern_pair();
    let ia = Image::new(w, h, a.iter().flat_map(|&x| [x; 3]).collect()).unwrap();
    let ib = Image::new(w, h, b.iter().flat_map(|&x| [x; 3]).collect()).unwrap();
    let mut mse = 0.0;
    for i in 0..a.len() {
        mse += (a[i] - b[i]).powi(2);
    }
    mse /= a.len() as f64;
    assert!((psnr(&ia, &ib).unwrap() - (-10.0 * mse.log10())).abs() < 1e-12);
}

#[test]
fn best_sample_selectors() {
    let m = |p: f64, s: f64, d: f64| Metrics::from_values([Some(p), Some(s), Some(d), None, None, None]);
    let samples = [m(20.0, 0.5, 0.9), m(25.0, 0.4, 0.1), m(22.0, 0.7, 0.3)];
    let best = best_per_metric(&samples);
    assert_eq!(best.values()[..3], [Some(25.0), Some(0.7), Some(0.9)]);
    assert_eq!(best.values()[3], None);
    let by = best_by_psnr(&samples).unwrap();
    assert_eq!(by.values()[..3], [Some(25.0), Some(0.4), Some(0.1)]);
}

proptest! {
    #[test]
    fn ranks_sum_to_triangle_number(xs in prop::collection::vec(0u8..6, 1..40)) {
        let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let n = x.len() as f64;
        let r = average_ranks(&x);
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn depth_correlation_invariant_to_positive_affine_maps(
        d in prop::collection::vec(0.1f64..10.0, 8..64),
        scale in 0.01f64..100.0,
        shift in -5.0f64..5.0,
        pick in any::<u64>(),
    ) {
        let n = d.len();
        let truth = ScalarMap::new(n, 1, d.clone()).unwrap();
        let noisy: Vec<f64> = d.iter().enumerate().map(|(i, x)| x + ((i * 7919) % 13) as f64 * 0.3).collect();
        let pred = ScalarMap::new(n, 1, noisy.clone()).unwrap();
        let mapped = ScalarMap::new(n, 1, noisy.iter().map(|x| scale * x + shift).collect()).unwrap();
        let mask: Vec<bool> = (0..n).map(|i| (pick >> (i % 64)) & 1 == 1 || i < 3).collect();
        let a = depth_rank_correlation(&pred, &truth, &mask).unwrap();
        let b = depth_rank_correlation(&mapped, &truth, &mask).unwrap();
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let perfect = depth_rank_correlation(&truth, &truth, &vec![true; n]).unwrap();
        prop_assert!(perfect.is_none_or(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let (w, h) = (12, 11);
        let mut s = seed | 1;
        let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s >> 11) as f64 / (1u64 << 53) as f64 };
        let a: Vec<f64> = (0..w * h).map(|_| next()).collect();
        let b: Vec<f64> = (0..w * h).map(|_| next()).collect();
        let ab = ssim_gray(&a, &b, w, h).unwrap();
        let ba = ssim_gray(&b, &a, w, h).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}
