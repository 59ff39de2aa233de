use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketchlearn_core::data::{gen_gmm, lloyd_best_of, load_csv, rand_cls_baseline, rand_data_baseline, CsvOptions, GmmSpec};
use sketchlearn_core::metrics::{expected_mutual_info, in_unit_box};
use sketchlearn_core::{ami, empirical_risk, rse, wasserstein2, BoundingBox, MixtureModel, WeightMode};

fn brute_risk(points: &Array2<f64>, centroids: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|x| {
            centroids
                .rows()
                .into_iter()
                .map(|c| x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn uniform_cloud(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0..5.0))
}

#[test]
fn risk_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = uniform_cloud(50, 3, &mut rng);
        let c = uniform_cloud(4, 3, &mut rng);
        let (got, want) = (empirical_risk(x.view(), c.view()), brute_risk(&x, &c));
        assert!((got - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn risk_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform_cloud(40, 2, &mut rng);
    assert_eq!(empirical_risk(x.view(), x.view()), 0.0);
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
    let total_var: f64 = x.rows().into_iter().map(|r| (&r - &mean.row(0)).mapv(|v| v * v).sum()).sum();
    assert!((empirical_risk(x.view(), mean.view()) - total_var).abs() <= 1e-9 * total_var);
}

#[test]
fn lloyd_against_itself_has_unit_rse() {
    let data = gen_gmm(4, 3, 10.0, 1000, 3).unwrap();
    let l = lloyd_best_of(data.points.view(), 4, 300, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(rse(data.points.view(), l.centroids.view(), l.centroids.view()), 1.0);
}

fn mutual_info(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut t = vec![vec![0.0; kb]; ka];
    for (i, j) in a.iter().zip(b) {
        t[*i][*j] += 1.0;
    }
    let ra: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let rb: Vec<f64> = (0..kb).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            if t[i][j] > 0.0 {
                mi += t[i][j] / n * (n * t[i][j] / (ra[i] * rb[j])).ln();
            }
        }
    }
    mi
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn expected_mutual_info_matches_enumeration() {
    let a = [0, 0, 1, 1, 1, 2];
    let b = [0, 1, 1, 0, 0, 0];
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    let mean: f64 = perms
        .iter()
        .map(|p| {
            let bp: Vec<usize> = p.iter().map(|&i| b[i]).collect();
            mutual_info(&a, &bp)
        })
        .sum::<f64>()
        / 720.0;
    let emi = expected_mutual_info(&[2, 3, 1], &[4, 2], 6);
    assert!((emi - mean).abs() <= 1e-12, "{emi} vs {mean}");

    let h = |l: &[usize]| {
        let n = l.len() as f64;
        let k = l.iter().max().unwrap() + 1;
        -(0..k).map(|c| l.iter().filter(|v| **v == c).count() as f64 / n).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    };
    let want = (mutual_info(&a, &b) - mean) / (0.5 * (h(&a) + h(&b)) - mean);
    assert!((ami(&a, &b).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn ami_is_one_for_relabelled_partitions_and_near_zero_for_noise() {
    let a: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let b: Vec<usize> = a.iter().map(|v| (v + 1) % 3).collect();
    assert!((ami(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mean: f64 = (0..20)
        .map(|_| {
            let mut c = a.clone();
            c.shuffle(&mut rng);
            ami(&a, &c).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!(mean.abs() < 0.01, "{mean}");
}

fn sq(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn uniform_three_point_transport_is_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let a = MixtureModel::uniform(uniform_cloud(3, 2, &mut rng)).unwrap();
        let b = MixtureModel::uniform(uniform_cloud(3, 2, &mut rng)).unwrap();
        let best = permutations(3)
            .iter()
            .map(|p| (0..3).map(|i| sq(a.centroids().row(i), b.centroids().row(p[i]))).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        let w = wasserstein2(&a, &b, WeightMode::Uniform).unwrap();
        assert!((w * w - best).abs() <= 1e-10 * best.max(1.0), "{} vs {best}", w * w);
    }
}

/// Two sources: the first row's plan is a fractional knapsack on the cost
/// difference, so the optimum is filled greedily.
fn two_source_transport(a: &MixtureModel, b: &MixtureModel) -> f64 {
    let n = b.k();
    let c: Vec<[f64; 2]> =
        (0..n).map(|j| [sq(a.centroids().row(0), b.centroids().row(j)), sq(a.centroids().row(1), b.centroids().row(j))]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| (c[i][0] - c[i][1]).total_cmp(&(c[j][0] - c[j][1])));
    let mut left = a.weights()[0];
    let mut cost = 0.0;
    for j in order {
        let x = left.min(b.weights()[j]);
        left -= x;
        cost += x * c[j][0] + (b.weights()[j] - x) * c[j][1];
    }
    cost
}

fn random_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[test]
fn weighted_transport_matches_greedy_two_source_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(1..7);
        let a = MixtureModel::new(uniform_cloud(2, 3, &mut rng), random_weights(2, &mut rng)).unwrap();
        let b = MixtureModel::new(uniform_cloud(n, 3, &mut rng), random_weights(n, &mut rng)).unwrap();
        let want = two_source_transport(&a, &b);
        let w = wasserstein2(&a, &b, WeightMode::Learned).unwrap();
        assert!((w * w - want).abs() <= 1e-9 * want.max(1.0), "{} vs {want}", w * w);
    }
}

#[test]
fn unit_box_frame_rescales_coordinates() {
    let frame = BoundingBox::new(vec![-2.0, 0.0], vec![2.0, 10.0]).unwrap();
    let mix = MixtureModel::uniform(array![[-2.0, 10.0], [0.0, 5.0]]).unwrap();
    let out = in_unit_box(&mix, &frame).unwrap();
    assert_eq!(out.centroids(), array![[0.0, 1.0], [0.5, 0.5]]);
}

fn mixture_strategy() -> impl Strategy<Value = MixtureModel> {
    (1usize..5, any::<u64>()).prop_map(|(k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MixtureModel::new(uniform_cloud(k, 2, &mut rng), random_weights(k, &mut rng)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn wasserstein_is_a_metric(a in mixture_strategy(), b in mixture_strategy(), c in mixture_strategy()) {
        let w = |x: &MixtureModel, y: &MixtureModel| wasserstein2(x, y, WeightMode::Learned).unwrap();
        prop_assert!(w(&a, &a) <= 1e-7);
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() <= 1e-9);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-9);
    }

    #[test]
    fn ami_is_symmetric(seed in any::<u64>(), n in 2usize..80, ka in 1usize..5, kb in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let (x, y) = (ami(&a, &b).unwrap(), ami(&b, &a).unwrap());
        prop_assert!((x - y).abs() <= 1e-12);
        prop_assert!(x <= 1.0);
    }
}

#[test]
fn lloyd_recovers_generating_partition() {
    let good = (0..5)
        .filter(|&seed| {
            let data = gen_gmm(10, 5, 10.0, 10_000, seed).unwrap();
            let l = lloyd_best_of(data.points.view(), 10, 300, 3, &mut ChaCha8Rng::seed_from_u64(seed + 100)).unwrap();
            ami(data.labels.as_ref().unwrap(), &l.labels).unwrap() >= 0.6
        })
        .count();
    assert!(good >= 4, "{good}/5");
}

#[test]
fn generator_balances_classes() {
    let (k, n) = (10, 20_000);
    let data = gen_gmm(k, 4, 10.0, n, 8).unwrap();
    let mut counts = vec![0usize; k];
    for l in data.labels.as_ref().unwrap() {
        counts[*l] += 1;
    }
    let slack = 5.0 * (n as f64 / k as f64).sqrt();
    for c in counts {
        assert!((c as f64 - (n / k) as f64).abs() <= slack, "{c}");
    }
}

#[test]
fn class_baseline_beats_data_baseline_on_average() {
    let (mut cls, mut dat) = (0.0, 0.0);
    for seed in 0..20 {
        let data = gen_gmm(10, 5, 10.0, 2000, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let labels = data.labels.as_ref().unwrap();
        cls += empirical_risk(data.points.view(), rand_cls_baseline(data.points.view(), labels, 10, &mut rng).unwrap().view());
        dat += empirical_risk(data.points.view(), rand_data_baseline(data.points.view(), 10, &mut rng).unwrap().view());
    }
    assert!(cls <= dat, "{cls} > {dat}");
}

#[test]
fn csv_and_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gmm.csv");
    let spec = GmmSpec { seed: 9, k: 3, d: 2, ratio: 10.0, n: 50 };
    let data = spec.generate().unwrap();
    data.write_csv(&path).unwrap();
    spec.append_sidecar(&path).unwrap();
    let back = load_csv(&path, CsvOptions { has_header: false, label_column: true }).unwrap();
    assert_eq!(back.labels, data.labels);
    let err = back.points.iter().zip(data.points.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12);
    assert_eq!(GmmSpec::read_sidecar(&path).unwrap(), vec![spec]);
    assert_eq!(GmmSpec::read_sidecar(&path).unwrap()[0].generate().unwrap().points, data.points);
}
