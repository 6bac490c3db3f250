//! Finite-difference checks for every operator, on small random shapes.

use gibr_diffcore::{grad_check_many, Graph, Result, SampleMode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Weighted sum with fixed irregular weights, so that every output element
/// contributes a distinct amount to the loss.
fn probe(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + ((i * 37) % 17) as f64 / 13.0).collect();
    y.mul(&Tensor::from_f64(y.shape(), &w)?)?.sum_all()
}

fn check(xs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) {
    let report = grad_check_many(|t: &[Tensor<f64>]| probe(&f(t)?), xs, &[], STEP, TOL).unwrap();
    assert!(
        report.passed(),
        "max rel error {} failures {:?}",
        report.max_rel_error,
        &report.failures[..report.failures.len().min(5)]
    );
}

fn shape_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..4, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_ops_with_broadcast((seed, a, b) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[a, b], -2.0, 2.0);
        let y = rand_tensor(&mut rng, &[b], 0.5, 2.0);
        check(&[x.clone(), y.clone()], |t| t[0].add(&t[1]));
        check(&[x.clone(), y.clone()], |t| t[0].sub(&t[1]));
        check(&[x.clone(), y.clone()], |t| t[0].mul(&t[1]));
        check(&[x.clone(), y.clone()], |t| t[0].div(&t[1]));
        check(&[y.clone(), x.clone()], |t| t[0].div(&t[1].square()?.add_scalar(0.5)?));
        let col = rand_tensor(&mut rng, &[a, 1], 0.5, 2.0);
        check(&[x.clone(), col.clone()], |t| t[0].mul(&t[1]));
        check(&[col.clone(), x.clone()], |t| t[0].sub(&t[1]));
        let z = rand_tensor(&mut rng, &[2, a, b], -2.0, 2.0);
        check(&[z.clone(), x.clone()], |t| t[0].div(&t[1].square()?.add_scalar(0.5)?));
        check(&[x.clone(), z.clone()], |t| t[0].add(&t[1]));
    }

    #[test]
    fn unary_ops((seed, a, b) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[a, b], -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &[a, b], 0.2, 3.0);
        check(std::slice::from_ref(&x), |t| t[0].exp());
        check(std::slice::from_ref(&pos), |t| t[0].log());
        check(std::slice::from_ref(&pos), |t| t[0].sqrt());
        check(std::slice::from_ref(&x), |t| t[0].sigmoid());
        check(std::slice::from_ref(&x), |t| t[0].tanh());
        check(std::slice::from_ref(&x), |t| t[0].silu());
        check(std::slice::from_ref(&x), |t| t[0].gelu());
        check(std::slice::from_ref(&x), |t| t[0].softplus());
        check(std::slice::from_ref(&x), |t| t[0].neg()?.scale(1.7)?.add_scalar(0.2));
        check(std::slice::from_ref(&pos), |t| t[0].relu());
        check(std::slice::from_ref(&pos), |t| t[0].elu());
        check(std::slice::from_ref(&pos), |t| t[0].neg()?.elu());
        check(std::slice::from_ref(&pos), |t| t[0].abs());
        check(std::slice::from_ref(&pos), |t| t[0].clamp_min(0.1));
    }

    #[test]
    fn reductions((seed, a, b) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[a, b, 2], -2.0, 2.0);
        check(std::slice::from_ref(&x), |t| t[0].sum_all());
        check(std::slice::from_ref(&x), |t| t[0].mean_all());
        for axis in 0..3 {
            check(std::slice::from_ref(&x), |t| t[0].sum_axis(axis, false));
            check(std::slice::from_ref(&x), |t| t[0].mean_axis(axis, true));
            check(std::slice::from_ref(&x), |t| t[0].max_axis(axis));
        }
        let mask: Vec<bool> = (0..a * b).map(|i| i % 3 != 1).collect();
        check(std::slice::from_ref(&x), |t| t[0].max_axis0_masked(&mask));
        check(std::slice::from_ref(&x), |t| t[0].cumsum_exclusive());
        check(std::slice::from_ref(&x), |t| t[0].softmax_last());
    }

    #[test]
    fn shape_ops((seed, a, b) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[a, b, 3], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[a, 2, 3], -1.0, 1.0);
        check(std::slice::from_ref(&x), |t| t[0].reshape(&[a * b, 3]));
        check(std::slice::from_ref(&x), |t| t[0].permute(&[2, 0, 1]));
        check(std::slice::from_ref(&x), |t| t[0].slice(2, 1, 3));
        check(std::slice::from_ref(&x), |t| t[0].gather_rows(&[a - 1, 0, a - 1]));
        check(&[x.clone(), y.clone()], |t| Tensor::concat(&[&t[0], &t[1]], 1));
        let z = rand_tensor(&mut rng, &[b, 1], -1.0, 1.0);
        check(std::slice::from_ref(&z), |t| t[0].broadcast_to(&[a, b, 4]));
        let mask: Vec<bool> = (0..a * b * 3).map(|i| i % 2 == 0).collect();
        check(&[x.clone(), x.scale(2.0).unwrap()], |t| Tensor::select(&mask, &t[0], &t[1]));
    }

    #[test]
    fn matmul_variants((seed, m, k) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let a = rand_tensor(&mut rng, &[2, m, k], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        let bb = rand_tensor(&mut rng, &[2, k, n], -1.0, 1.0);
        check(&[a.clone(), w.clone(), bias.clone()], |t| t[0].linear(&t[1], Some(&t[2])));
        check(&[a.clone(), bb.clone()], |t| t[0].matmul(&t[1]));
        check(std::slice::from_ref(&a), |t| t[0].transpose_last());
    }

    #[test]
    fn convolution_and_resampling((seed, c, hw) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hw + 2;
        let x = rand_tensor(&mut rng, &[2, c, h, h + 1], -1.0, 1.0);
        let w3 = rand_tensor(&mut rng, &[2, c, 3, 3], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[3, c, 1, 1], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check(&[x.clone(), w3.clone(), b.clone()], |t| t[0].conv2d(&t[1], Some(&t[2]), 1, 1));
        check(&[x.clone(), w3.clone()], |t| t[0].conv2d(&t[1], None, 2, 1));
        check(&[x.clone(), w1.clone()], |t| t[0].conv2d(&t[1], None, 1, 0));
        check(std::slice::from_ref(&x), |t| t[0].upsample_nearest2x());
        check(std::slice::from_ref(&x), |t| t[0].resize_bilinear(h + 3, 2));
        check(std::slice::from_ref(&x), |t| t[0].resize_bilinear(1, h * 2));
    }

    #[test]
    fn normalisation((seed, b, hw) in shape_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[b, 4, hw, 2], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        check(&[x, gamma, beta], |t| t[0].group_norm(2, &t[1], &t[2]));
    }

    #[test]
    fn bilinear_sampling(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = rand_tensor(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
        let mut coords: Vec<[f64; 2]> = (0..2 * n)
            .map(|_| [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)])
            .collect();
        // exact texel corners and centres
        coords[0] = [0.0, 0.0];
        coords[n] = [0.2, 0.25];
        let valid: Vec<bool> = (0..2 * n).map(|i| i % 4 != 3).collect();
        for mode in [SampleMode::Clamp, SampleMode::WrapX] {
            check(std::slice::from_ref(&planes), |t| t[0].sample_bilinear(&coords, &valid, mode));
        }
    }
}

#[test]
fn block_broadcast_matches_general_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let rows = rand_tensor(&mut rng, &[3, 1, 1], -1.0, 1.0);
    let tile = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let odd = rand_tensor(&mut rng, &[3, 1, 2], -1.0, 1.0);
    let xv = x.to_vec();
    let (rv, tv, ov) = (rows.to_vec(), tile.to_vec(), odd.to_vec());
    let by_rows = x.mul(&rows).unwrap().to_vec();
    let by_tile = tile.sub(&x).unwrap().to_vec();
    let by_odd = x.add(&odd).unwrap().to_vec();
    for i in 0..3 {
        for j in 0..4 {
            for k in 0..2 {
                let o = (i * 4 + j) * 2 + k;
                assert_eq!(by_rows[o], xv[o] * rv[i]);
                assert_eq!(by_tile[o], tv[j * 2 + k] - xv[o]);
                assert_eq!(by_odd[o], xv[o] + ov[i * 2 + k]);
            }
        }
    }
}

#[test]
fn max_of_two_routes_to_larger() {
    let g = Graph::<f64>::new();
    let x = g.leaf(&[1], vec![2.0]).unwrap();
    let y = g.leaf(&[1], vec![1.0]).unwrap();
    let m = Tensor::concat(&[&x, &y], 0).unwrap().max_axis(0).unwrap();
    g.backward(&m).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
    assert_eq!(y.grad().unwrap(), vec![0.0]);
}

#[test]
fn identity_kernel_conv_returns_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 1, 6, 5], -1.0, 1.0);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = Tensor::from_f64(&[1, 1, 3, 3], &k).unwrap();
    let y = x.conv2d(&w, None, 1, 1).unwrap();
    assert_eq!(y.values(), x.values());
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 4, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 4, 3, 3], -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        x.conv2d(&w, None, 1, 1)
            .unwrap()
            .group_norm(2, &gamma, &beta)
            .unwrap()
            .silu()
            .unwrap()
            .to_vec()
    };
    assert_eq!(run(), run());
}
