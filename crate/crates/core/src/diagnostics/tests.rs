use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::*;
use crate::hdan::Architecture;

fn column(values: Vec<f64>) -> Tensor<f64> {
    let n = values.len();
    Tensor::new(vec![n, 1], values).unwrap()
}

fn sample(n: usize, d: usize, seed: u64, dist: impl Distribution<f64>) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| dist.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn rademacher_kurtosis_is_minus_two() {
    let x = column((0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
    assert!((kurtosis(&x).unwrap() + 2.0).abs() <= 1e-9);
    let shuffled = column((0..64).map(|i| if (i * 7) % 4 < 2 { 3.0 } else { -3.0 }).collect());
    assert!((kurtosis(&shuffled).unwrap() + 2.0).abs() <= 1e-9);
}

#[test]
fn normal_kurtosis_is_near_zero() {
    let x = sample(100_000, 1, 1, Normal::new(0.0, 1.0).unwrap());
    let k = kurtosis(&x).unwrap();
    assert!(k.abs() <= 0.05, "{k}");
}

#[test]
fn uniform_kurtosis_is_minus_six_fifths() {
    let x = sample(100_000, 1, 2, Uniform::new(0.0, 1.0).unwrap());
    let k = kurtosis(&x).unwrap();
    assert!((-1.25..=-1.15).contains(&k), "{k}");
}

#[test]
fn kurtosis_rejects_degenerate_input() {
    assert!(matches!(
        kurtosis(&column(vec![1.0, 2.0, 3.0])),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(kurtosis(&column(vec![2.0; 10])), Err(Error::Degenerate(_))));
    // A constant column is skipped, not averaged in.
    let mixed = Tensor::from_rows(&[vec![1.0, 5.0], vec![-1.0, 5.0], vec![1.0, 5.0], vec![-1.0, 5.0]]).unwrap();
    assert_eq!(kurtosis(&mixed).unwrap(), -2.0);
}

#[test]
fn kurtosis_matches_graph_op() {
    let x = sample(50, 4, 3, Normal::new(1.0, 2.0).unwrap());
    let g = Graph::new();
    let k = g.column_kurtosis(g.constant(&x)).unwrap();
    assert!((g.item(k).unwrap() - kurtosis(&x).unwrap()).abs() < 1e-12);
}

#[test]
fn gap_cases() {
    let f = sample(100, 3, 4, Normal::new(0.0, 1.0).unwrap());
    assert_eq!(nongauss_gap(&f, &f).unwrap(), 0.0);
    let g = f.map(|v| 2.0 * v + 1.0);
    assert!(nongauss_gap(&f, &g).unwrap().abs() < 1e-12);

    let normal = sample(100_000, 1, 5, Normal::new(0.0, 1.0).unwrap());
    let uniform = sample(100_000, 1, 6, Uniform::new(-1.0, 1.0).unwrap());
    let oracle = {
        // Direct moment estimate of each sample.
        let excess = |t: &Tensor<f64>| {
            let n = t.numel() as f64;
            let m = t.data().iter().sum::<f64>() / n;
            let m2 = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let m4 = t.data().iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
            m4 / (m2 * m2) - 3.0
        };
        excess(&normal) - excess(&uniform)
    };
    let gap = nongauss_gap(&normal, &uniform).unwrap();
    assert!((gap - oracle).abs() < 1e-9, "{gap} vs {oracle}");
    assert!((gap - 1.2).abs() < 0.1, "{gap}");
}

#[test]
fn cosine_cases() {
    let a = [1.0f64, -2.0, 3.0];
    let neg = [-1.0, 2.0, -3.0];
    assert!((cosine(&a, &neg).unwrap().value + 1.0).abs() < 1e-15);
    assert!((cosine(&a, &a).unwrap().value - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 5.0]).unwrap().value, 0.0);
    let d = cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!(d.degenerate);
    assert_eq!(d.value, 0.0);
    assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn head_diagnostics_cases() {
    let h1 = Tensor::<f64>::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
    let single = ForwardValues {
        f: h1.clone(),
        h_total: h1.clone(),
        h_parts: vec![h1.clone()],
        g: h1.clone(),
    };
    let d = head_diagnostics(&single).unwrap();
    assert_eq!(d.pairwise_cos, vec![vec![1.0]]);
    assert_eq!(d.mean_pair_cos(), None);

    let zero = Tensor::zeros(vec![2, 2]).unwrap();
    let pair = ForwardValues {
        h_parts: vec![h1.clone(), h1.map(|v| -v), zero],
        ..single
    };
    let d = head_diagnostics(&pair).unwrap();
    assert!((d.pairwise_cos[0][1] + 1.0).abs() < 1e-15);
    assert_eq!(d.ranges[2], 0.0);
    assert_eq!(d.ranges[0], 1.125);
}

#[test]
fn probe_separable_reps() {
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let reps = Tensor::new(vec![100, 3], labels.iter().flat_map(|&d| [d as f64; 3]).collect()).unwrap();
    let acc = domain_probe(&reps, &labels, &ProbeRecipe::default(), 0).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn probe_noise_is_chance() {
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let accs: Vec<f64> = (0..5)
        .map(|s| {
            let reps = sample(200, 4, 10 + s, Normal::new(0.0, 1.0).unwrap());
            domain_probe(&reps, &labels, &ProbeRecipe::default(), s).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
}

#[test]
fn probe_is_deterministic_and_needs_two_domains() {
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let reps = sample(40, 2, 1, Normal::new(0.0, 1.0).unwrap());
    let r = ProbeRecipe {
        epochs: 20,
        ..ProbeRecipe::default()
    };
    assert_eq!(
        domain_probe(&reps, &labels, &r, 9).unwrap(),
        domain_probe(&reps, &labels, &r, 9).unwrap()
    );
    assert!(domain_probe(&reps, &[1; 40], &r, 9).is_err());
}

#[test]
fn disagreement_cases() {
    let a = sample(6, 3, 1, Normal::new(0.0, 1.0).unwrap());
    assert_eq!(disagreement_risk(&a, &a).unwrap(), 0.0);
    assert!((disagreement_risk(&a, &a.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-15);
    let b = sample(6, 3, 2, Normal::new(0.0, 1.0).unwrap());
    let mut hand = 0.0;
    for i in 0..6 {
        let mut row = 0.0;
        for j in 0..3 {
            row += (a.get(i, j) - b.get(i, j)).abs();
        }
        hand += row / 3.0;
    }
    assert!((disagreement_risk(&a, &b).unwrap() - hand / 6.0).abs() < 1e-15);
    assert!(disagreement_risk(&a, &Tensor::zeros(vec![3, 6]).unwrap()).is_err());
}

#[test]
fn bound_hand_cases() {
    let r = bound_identity_check(&column(vec![2.0]), &column(vec![0.0]), 0.5).unwrap();
    assert_eq!(r.identity_residual, 0.0);
    assert_eq!(r.risk_g, 1.0);
    assert_eq!(r.scaled_risk_f, 1.0);
    let f = sample(5, 2, 3, Normal::new(0.0, 1.0).unwrap());
    let fs = sample(5, 2, 4, Normal::new(0.0, 1.0).unwrap());
    let r = bound_identity_check(&f, &fs, 1.0).unwrap();
    // f − (f − f*) only rounds back to f*.
    assert!(r.risk_g <= 1e-15, "{}", r.risk_g);
    assert_eq!(r.scaled_risk_f, 0.0);
    assert!(bound_identity_check(&f, &fs, 0.0).is_err());
    assert!(bound_identity_check(&f, &fs, 1.5).is_err());
}

#[test]
fn bound_random_ratio() {
    let f = sample(20, 3, 5, Normal::new(0.0, 1.0).unwrap());
    let fs = sample(20, 3, 6, Normal::new(0.0, 1.0).unwrap());
    let r = bound_identity_check(&f, &fs, 0.3).unwrap();
    assert!((r.risk_g / r.risk_f - 0.7).abs() < 1e-12);
    assert!(r.holds(1e-12));
}

#[test]
fn accuracy_cases() {
    let confident = Tensor::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0], vec![100.0, 0.0]]).unwrap();
    assert_eq!(accuracy(&confident, &[0, 1, 0]).unwrap(), 1.0);
    assert_eq!(accuracy(&confident, &[1, 0, 1]).unwrap(), 0.0);
    assert!(accuracy(&confident, &[0]).is_err());
}

#[test]
fn untrained_model_is_at_chance() {
    let arch = Architecture {
        d_in: 2,
        hidden: 16,
        num_classes: 2,
        heads: 1,
        num_domains: 2,
    };
    let accs: Vec<f64> = (0..10)
        .map(|s| {
            let (_, t) = crate::data::make_moons_shift::<f64>(400, 30.0, 0.1, s).unwrap();
            let m = HdanModel::build(arch, 100 + s).unwrap();
            target_accuracy(&m, &t).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
    let (_, t) = crate::data::make_moons_shift::<f64>(10, 0.0, 0.1, 0).unwrap();
    let m = HdanModel::build(arch, 0).unwrap();
    assert!(target_accuracy(&m, &t.unlabeled()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kurtosis_is_affine_invariant(seed in 0u64..10_000, a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -10.0f64..10.0) {
        let x = sample(64, 3, seed, Normal::new(0.0, 1.0).unwrap());
        let y = x.map(|v| a * v + b);
        prop_assert!((kurtosis(&x).unwrap() - kurtosis(&y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cosine_symmetric_and_scale_free(seed in 0u64..10_000, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        let ab = cosine(&a, &b).unwrap().value;
        prop_assert!((ab - cosine(&b, &a).unwrap().value).abs() < 1e-15);
        prop_assert!((ab - cosine(&scaled, &b).unwrap().value).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn bound_identity_holds(seed in 0u64..1_000_000, k in 1e-6f64..=1.0) {
        let f = sample(8, 3, seed, Normal::new(0.0, 1.0).unwrap());
        let fs = sample(8, 3, seed ^ 0xabcdef, Normal::new(0.0, 1.0).unwrap());
        let r = bound_identity_check(&f, &fs, k).unwrap();
        prop_assert!(r.holds(1e-12), "{r:?}");
    }

    #[test]
    fn disagreement_triangle(seed in 0u64..10_000) {
        let a = sample(4, 3, seed, Normal::new(0.0, 1.0).unwrap());
        let b = sample(4, 3, seed + 1, Normal::new(0.0, 1.0).unwrap());
        let c = sample(4, 3, seed + 2, Normal::new(0.0, 1.0).unwrap());
        let ac = disagreement_risk(&a, &c).unwrap();
        let ab = disagreement_risk(&a, &b).unwrap();
        let bc = disagreement_risk(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }
}
