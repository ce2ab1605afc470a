mod common {
    pub mod conv_oracle;
}

use common::conv_oracle::{self, dense_operator, engine, Kind};
use fairfader_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
struct Case {
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    seed: u64,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=2, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=2, any::<u64>())
        .prop_flat_map(|(n, c, o, k, stride, seed)| {
            (Just((n, c, o, k, stride, seed)), 0..k, k..=8usize, k..=8usize)
        })
        .prop_map(|((n, c, o, k, stride, seed), pad, h, w)| Case { n, c, o, h, w, k, stride, pad, seed })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv2d_matches_nested_loops(c in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let x = uniform(&[c.n, c.c, c.h, c.w], &mut rng);
        let w = uniform(&[c.o, c.c, c.k, c.k], &mut rng);
        let b: Vec<f64> = (0..c.o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = engine(&Kind::Conv, &x, &w, &b, c.stride, c.pad);
        prop_assert!(max_abs_diff(&got, &conv_oracle::conv2d(&x, &w, &b, c.stride, c.pad)) <= 1e-6);
    }

    #[test]
    fn deconv2d_matches_nested_loops(c in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        // (h - 1) * stride + k > 2 * pad always holds because pad < k
        let x = uniform(&[c.n, c.c, c.h, c.w], &mut rng);
        let w = uniform(&[c.c, c.o, c.k, c.k], &mut rng);
        let b: Vec<f64> = (0..c.o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = engine(&Kind::Deconv, &x, &w, &b, c.stride, c.pad);
        prop_assert!(max_abs_diff(&got, &conv_oracle::deconv2d(&x, &w, &b, c.stride, c.pad)) <= 1e-6);
    }
}

#[test]
fn deconv2d_is_the_transpose_of_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0usize;
    while checked < 10 {
        let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k: usize = rng.random_range(2..=4);
        let stride: usize = rng.random_range(1..=2);
        let pad = rng.random_range(0..k);
        // output side s.t. the conv covers the input exactly
        let oh: usize = rng.random_range(1..=3);
        let h = ((oh - 1) * stride + k).saturating_sub(2 * pad);
        if h == 0 || h > 8 {
            continue;
        }
        checked += 1;
        let w = uniform(&[o, c, k, k], &mut rng);
        let (rows, cols, a) = dense_operator(&Kind::Conv, &[1, c, h, h], &w, stride, pad);
        let (rt, ct, at) = dense_operator(&Kind::Deconv, &[1, o, oh, oh], &w, stride, pad);
        assert_eq!((rt, ct), (cols, rows));
        for i in 0..rows {
            for j in 0..cols {
                assert!((a[i * cols + j] - at[j * rows + i]).abs() <= 1e-12);
            }
        }
    }
}
