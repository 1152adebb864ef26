mod common;

use common::checks::{conv_oracle_err, ssm_duality_err};
use common::{direct_causal_conv, max_abs_diff, uniform};
use hyena_distill::sigproc::{
    depthwise_causal_conv, fft, fft_causal_conv, FilterResponse, StateSpaceSystem,
};
use hyena_distill::Tensor;
use num_complex::Complex;
use proptest::prelude::*;

#[test]
fn convolutions_match_direct_sums() {
    for (i, len) in [7, 64, 257, 1024].into_iter().enumerate() {
        let (f, d) = conv_oracle_err(len, 10 + i as u64).unwrap();
        assert!(f <= 1e-8, "fft conv at L={len}: {f:e}");
        assert!(d <= 1e-10, "depthwise conv at L={len}: {d:e}");
    }
}

#[test]
fn delta_filter_is_exact_identity() {
    let u = uniform(&[300, 3], 4);
    let mut h = vec![0.0; 300 * 3];
    h[..3].fill(1.0);
    let y = fft_causal_conv(
        &u,
        &FilterResponse::new(Tensor::new([300, 3], h).unwrap()).unwrap(),
    )
    .unwrap();
    assert!(u.bitwise_eq(&y));
}

#[test]
fn convolution_is_linear() {
    let len = 200;
    let (u1, u2, h) = (
        uniform(&[len, 2], 1),
        uniform(&[len, 2], 2),
        uniform(&[len, 2], 3),
    );
    let h = FilterResponse::new(h).unwrap();
    let (a, b) = (0.7, -2.3);
    let mix: Vec<f64> = u1
        .data()
        .iter()
        .zip(u2.data())
        .map(|(x, y)| a * x + b * y)
        .collect();
    let lhs = fft_causal_conv(&Tensor::new([len, 2], mix).unwrap(), &h).unwrap();
    let y1 = fft_causal_conv(&u1, &h).unwrap();
    let y2 = fft_causal_conv(&u2, &h).unwrap();
    let rhs: Vec<f64> = y1
        .data()
        .iter()
        .zip(y2.data())
        .map(|(x, y)| a * x + b * y)
        .collect();
    assert!(max_abs_diff(lhs.data(), &rhs) <= 1e-8);
}

#[test]
fn filters_are_causal() {
    let len = 128;
    let u = uniform(&[len, 2], 5);
    let h = FilterResponse::new(uniform(&[len, 2], 6)).unwrap();
    let k = uniform(&[3, 2], 7);
    let y = fft_causal_conv(&u, &h).unwrap();
    let z = depthwise_causal_conv(&u, &k).unwrap();
    for t in [0, 1, 17, 64, 127] {
        let mut p = u.clone();
        p.data_mut()[t * 2] += 1.0;
        let yp = fft_causal_conv(&p, &h).unwrap();
        let zp = depthwise_causal_conv(&p, &k).unwrap();
        assert!(max_abs_diff(&y.data()[..t * 2], &yp.data()[..t * 2]) <= 1e-12);
        assert_eq!(&z.data()[..t * 2], &zp.data()[..t * 2]);
        assert!((y.data()[t * 2] - yp.data()[t * 2]).abs() > 1e-6);
    }
}

#[test]
fn recurrence_equals_convolution_for_stable_systems() {
    for seed in 0..25 {
        let s = 1 + (seed as usize % 6);
        let err = ssm_duality_err(s, 128, seed).unwrap();
        assert!(err <= 1e-8, "seed {seed}, state {s}: {err:e}");
    }
}

#[test]
fn random_stable_systems_follow_their_impulse_response() {
    for seed in 0..5 {
        let sys = StateSpaceSystem::<f64>::random_stable(4, 0.9, seed).unwrap();
        let u = uniform(&[96, 1], 40 + seed);
        let y = sys.recurrence(u.data());
        let h = sys.impulse_response(96).unwrap();
        let direct = direct_causal_conv(u.data(), h.tensor().data(), 96, 1);
        assert!(max_abs_diff(&y, &direct) <= 1e-8);
    }
}

#[test]
fn fft_round_trip_of_long_signal() {
    let x: Vec<Complex<f64>> = uniform(&[2048, 2], 9)
        .data()
        .chunks(2)
        .map(|p| Complex::new(p[0], p[1]))
        .collect();
    let back = fft(&fft(&x, false).unwrap(), true).unwrap();
    let err = x
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    assert!(err <= 1e-10, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_conv_matches_direct(len in 1usize..90, ch in 1usize..4, seed in any::<u64>()) {
        let u = uniform(&[len, ch], seed);
        let h = uniform(&[len, ch], seed.wrapping_add(1));
        let y = fft_causal_conv(&u, &FilterResponse::new(h.clone()).unwrap()).unwrap();
        let want = direct_causal_conv(u.data(), h.data(), len, ch);
        prop_assert!(max_abs_diff(y.data(), &want) <= 1e-9);
    }

    #[test]
    fn sparse_filters_match_direct(len in 2usize..200, taps in 1usize..6, seed in any::<u64>()) {
        let u = uniform(&[len, 2], seed);
        let mut h = vec![0.0; len * 2];
        let dense = uniform(&[len, 2], seed.wrapping_add(1));
        let support = taps.min(len);
        h[..support * 2].copy_from_slice(&dense.data()[..support * 2]);
        let y = fft_causal_conv(&u, &FilterResponse::new(Tensor::new([len, 2], h.clone()).unwrap()).unwrap()).unwrap();
        prop_assert!(max_abs_diff(y.data(), &direct_causal_conv(u.data(), &h, len, 2)) <= 1e-10);
    }
}
