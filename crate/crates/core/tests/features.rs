use ndarray::{Array2, ArrayView1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use sketchlearn_core::calibration::{calibrate, make_device_map, make_twin_map, recover_transmission};
use sketchlearn_core::opu::{encode_bitplanes, plane_weights, quantize, OpuDevice};
use sketchlearn_core::rff::{rff_evaluate, rff_gradient, sample_directions, sample_radii, FrequencyFactors};
use sketchlearn_core::sketch::PhaseSource;
use sketchlearn_core::{BoundingBox, Error, FeatureMap, C64};

fn frobenius_rel(a_hat: &Array2<f64>, a: ndarray::ArrayView2<'_, f64>) -> f64 {
    let diff: f64 = a_hat.iter().zip(a.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = a.iter().map(|v| v * v).sum();
    (diff / norm).sqrt()
}

#[test]
fn direction_angles_pass_chi_square() {
    let m = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let u = sample_directions(m, 2, &mut rng);
    let bins = 16;
    let mut counts = vec![0.0; bins];
    for row in u.rows() {
        let theta = row[1].atan2(row[0]) + std::f64::consts::PI;
        let b = ((theta / (2.0 * std::f64::consts::PI) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let expect = m as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|c| (c - expect) * (c - expect) / expect).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
}

#[test]
fn radii_follow_folded_normal_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = sample_radii(1_000_000, &mut rng);
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let pi = std::f64::consts::PI;
    assert!((mean - (2.0 / pi).sqrt()).abs() < 0.01, "mean {mean}");
    assert!((var - (1.0 - 2.0 / pi)).abs() < 0.01, "variance {var}");
    assert!(r.iter().all(|v| *v >= 0.0));
}

#[test]
fn one_dimensional_closed_form() {
    // Re⟨exp(-ic), i⟩ = Re(exp(-ic) · conj(i)) = -sin c, so the slope at 0 is -1.
    let w = ndarray::array![[1.0]];
    let v = [C64::new(0.0, 1.0)];
    for c in [0.0, 0.3, -1.2] {
        let phi = rff_evaluate(w.view(), &[c]);
        let obj = (phi[0] * v[0].conj()).re;
        assert!((obj + f64::sin(c)).abs() < 1e-15);
        assert!((rff_gradient(w.view(), &[c], &v)[0] + f64::cos(c)).abs() < 1e-15);
    }
}

fn fd_gradient(w: &Array2<f64>, c: &[f64], v: &[C64], h: f64) -> Vec<f64> {
    let f = |x: &[f64]| rff_evaluate(w.view(), x).iter().zip(v).map(|(p, q)| (p * q.conj()).re).sum::<f64>();
    (0..c.len())
        .map(|j| {
            let (mut a, mut b) = (c.to_vec(), c.to_vec());
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn directions_have_unit_norm(m in 1usize..60, d in 1usize..40, seed in any::<u64>()) {
        let u = FrequencyFactors::sample(m, d, seed);
        for row in u.directions().rows() {
            prop_assert!((row.dot(&row).sqrt() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn frequency_matrix_is_scaled_radii_times_directions(m in 1usize..30, d in 1usize..10, seed in any::<u64>(), sigma in 1e-3f64..10.0) {
        let f = FrequencyFactors::sample(m, d, seed);
        let w = f.frequency_matrix(sigma).unwrap();
        for i in 0..m {
            for j in 0..d {
                let expect = f.radii()[i] * f.directions()[[i, j]] / sigma;
                prop_assert!((w[[i, j]] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), m in 1usize..50, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((m, d), |_| rng.sample::<f64, _>(StandardNormal));
        let v: Vec<C64> = (0..m).map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = rff_gradient(w.view(), &c, &v);
        let fd = fd_gradient(&w, &c, &v, 1e-6);
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(num <= 1e-5 * den.max(1e-3), "{} vs {}", num, den);
    }

    #[test]
    fn features_have_unit_modulus(seed in any::<u64>(), m in 1usize..40, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((m, d), |_| 100.0 * rng.sample::<f64, _>(StandardNormal));
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        for z in rff_evaluate(w.view(), &x) {
            prop_assert!((z.norm() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn bitplane_example() {
    assert_eq!(quantize(&[2.0 / 3.0], 2), vec![2]);
    assert_eq!(encode_bitplanes(&[2.0 / 3.0], 2), vec![vec![1], vec![0]]);
}

#[test]
fn quantization_error_is_bounded() {
    let (m, d, n) = (32, 12, 16);
    let bounds = BoundingBox::new(vec![-3.0; d], vec![5.0; d]).unwrap();
    let dev = OpuDevice::new(m, bounds, n, 0.0, 9).unwrap();
    let a = dev.transmission();
    let a_inf = a.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let bound = a_inf * 2f64.powi(-16) * dev.padded_dim() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..5.0)).collect();
        let y = dev.apply(&x, &mut rng);
        let exact = a.dot(&ArrayView1::from(&dev.normalize_input(&x)));
        let err = y.iter().zip(exact.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err <= bound, "{err} > {bound}");
    }
}

#[test]
fn decoded_noise_variance_matches_plane_weights() {
    let (m, n, eta) = (4, 8, 0.3);
    let dev = OpuDevice::new(m, BoundingBox::unit(3), n, eta, 3).unwrap();
    let x = [0.2, 0.9, 0.55];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let calls = 10_000;
    let samples: Vec<Vec<f64>> = (0..calls).map(|_| dev.apply(&x, &mut rng)).collect();
    let expect = eta * eta * plane_weights(n).iter().map(|w| w * w).sum::<f64>();
    for i in 0..m {
        let mean = samples.iter().map(|s| s[i]).sum::<f64>() / calls as f64;
        let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (calls - 1) as f64;
        assert!((var / expect - 1.0).abs() < 0.1, "coordinate {i}: {var} vs {expect}");
    }
}

#[test]
fn zero_noise_calibration_is_exact() {
    for dprime in [2, 16, 64, 256] {
        for m in [8, 128] {
            let dev = OpuDevice::new(m, BoundingBox::unit(dprime), 8, 0.0, dprime as u64).unwrap();
            let cal = calibrate(&dev, 1, 0, &vec![1.0; m]).unwrap();
            let err = frobenius_rel(&cal.a_hat, dev.transmission());
            assert!(err <= 1e-9, "D'={dprime} M={m}: {err}");
            assert_eq!(cal.probe_count, dprime + 1);
        }
    }
}

fn mean_calibration_error(noise: f64, repeats: usize, runs: u64) -> f64 {
    let dev = OpuDevice::new(128, BoundingBox::unit(64), 8, noise, 11).unwrap();
    (0..runs).map(|r| frobenius_rel(&calibrate(&dev, repeats, 500 + r, &[1.0; 128]).unwrap().a_hat, dev.transmission())).sum::<f64>()
        / runs as f64
}

#[test]
fn halving_noise_halves_calibration_error() {
    let ratio = mean_calibration_error(0.1, 1, 20) / mean_calibration_error(0.05, 1, 20);
    assert!((1.6..=2.4).contains(&ratio), "{ratio}");
}

#[test]
fn repeated_probes_average_noise() {
    // Four repeats divide the variance by four, so the error halves.
    let ratio = mean_calibration_error(0.1, 1, 20) / mean_calibration_error(0.1, 4, 20);
    assert!((1.6..=2.4).contains(&ratio), "{ratio}");
}

#[test]
fn twin_phases_track_the_device() {
    let (m, d) = (64, 5);
    let bounds = BoundingBox::new(vec![-2.0; d], vec![3.0; d]).unwrap();
    let dev = std::sync::Arc::new(OpuDevice::new(m, bounds.clone(), 16, 0.0, 21).unwrap());
    let radii = FrequencyFactors::radii_for_seed(m, 8);
    let cal = calibrate(&dev, 1, 0, &radii).unwrap();
    let FeatureMap::Device(device_map) = make_device_map(dev.clone(), cal.delta_n.clone(), 1.0).unwrap() else {
        unreachable!()
    };
    let FeatureMap::Explicit(twin) = make_twin_map(&cal, 1.0, &bounds).unwrap() else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = Array2::from_shape_fn((40, d), |_| rng.random_range(-2.0..3.0));
    let device_phases = device_map.phases(block.view(), &mut rng);
    let twin_phases = twin.phases(block.view(), &mut rng);
    let worst = device_phases.iter().zip(twin_phases.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn zero_responses_are_degenerate() {
    let responses = Array2::zeros((3, 5));
    match recover_transmission(responses.view(), 4, &[1.0; 3]) {
        Err(Error::CalibrationDegenerate { row }) => assert_eq!(row, 0),
        other => panic!("{other:?}"),
    }
    assert!(matches!(recover_transmission(Array2::zeros((3, 4)).view(), 3, &[1.0; 3]), Err(Error::NotPowerOfTwo(3))));
}
