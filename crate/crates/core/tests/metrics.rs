use dgan::data::synthetic::synthetic_cifar10;
use dgan::metrics::eval::{evaluate_gan, per_class_fid, read_stats, reference_stats, MemorizedSampler};
use dgan::metrics::extractor::{extract_all, FeatureExtractor, ToyExtractor};
use dgan::metrics::inception::{expected_tensors, write_safetensors, InceptionV3, RawTensor};
use dgan::metrics::linear::{LinearEvaluator, LinearFitConfig};
use dgan::metrics::{class_deviation, fid, gaussian_stats, inception_score, FeatureStats};
use dgan::{seed, Error, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn random_matrix(n: usize, d: usize, s: u64) -> Tensor<f64> {
    let mut rng = seed::rng(s, &[]);
    Tensor::from_vec(&[n, d], (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn covariance_matches_double_loop() {
    let x = random_matrix(100, 5, 11);
    let s = gaussian_stats(&x).unwrap();
    for i in 0..5 {
        let mi: f64 = (0..100).map(|r| x.row(r)[i]).sum::<f64>() / 100.0;
        assert!((s.mu[i] - mi).abs() < 1e-12);
        for j in 0..5 {
            let mj: f64 = (0..100).map(|r| x.row(r)[j]).sum::<f64>() / 100.0;
            let mut c = 0.0;
            for r in 0..100 {
                c += (x.row(r)[i] - mi) * (x.row(r)[j] - mj);
            }
            assert!((s.sigma_at(i, j) - c / 99.0).abs() < 1e-10);
        }
    }
}

#[test]
fn constant_rows_have_zero_covariance_and_single_rows_fail() {
    let x = Tensor::from_vec(&[4, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
    assert!(gaussian_stats(&x).unwrap().sigma.iter().all(|&v| v == 0.0));
    assert!(matches!(
        gaussian_stats(&Tensor::<f64>::zeros(&[1, 3])),
        Err(Error::InsufficientSamples { .. })
    ));
}

#[test]
fn fid_matches_diagonal_closed_form() {
    let mut rng = seed::rng(5, &[]);
    for dim in [1usize, 2, 8, 64] {
        for _ in 0..50 {
            let mu_a: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mu_b: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let var_a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..5.0)).collect();
            let var_b: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..5.0)).collect();
            let oracle: f64 = (0..dim)
                .map(|i| (mu_a[i] - mu_b[i]).powi(2) + (var_a[i].sqrt() - var_b[i].sqrt()).powi(2))
                .sum();
            let a = FeatureStats::diagonal(mu_a, &var_a, 10);
            let b = FeatureStats::diagonal(mu_b, &var_b, 10);
            let v = fid(&a, &b).unwrap();
            assert!((v - oracle).abs() < 1e-6 * oracle.max(1.0), "D={dim}: {v} vs {oracle}");
        }
    }
}

#[test]
fn fid_symmetric_and_zero_on_identity_for_full_covariances() {
    for s in 0..10 {
        let a = gaussian_stats(&random_matrix(40, 6, s)).unwrap();
        let b = gaussian_stats(&random_matrix(30, 6, 100 + s).map(|v| 2.0 * v + 0.5)).unwrap();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
        assert!(fid(&a, &a).unwrap() <= 1e-8);
    }
}

#[test]
fn fid_grows_with_mean_shift() {
    let base = FeatureStats::diagonal(vec![0.0], &[1.0], 10);
    let mut last = -1.0;
    for k in 0..20 {
        let v = fid(&base, &FeatureStats::diagonal(vec![k as f64 * 0.25], &[1.0], 10)).unwrap();
        assert!(v > last);
        last = v;
    }
}

#[test]
fn fid_rejects_dimension_mismatch() {
    let a = FeatureStats::diagonal(vec![0.0], &[1.0], 10);
    let b = FeatureStats::diagonal(vec![0.0, 0.0], &[1.0, 1.0], 10);
    assert!(matches!(fid(&a, &b), Err(Error::Shape(_))));
}

fn random_simplex(n: usize, k: usize, s: u64) -> Tensor<f64> {
    let mut rng = seed::rng(s, &[]);
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
        let sum: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / sum));
    }
    Tensor::from_vec(&[n, k], data).unwrap()
}

/// exp(E_x KL(p(y|x) || p(y))) for one group, written out term by term.
fn is_oracle(rows: &[Vec<f64>]) -> f64 {
    let k = rows[0].len();
    let n = rows.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut total = 0.0;
    for r in rows {
        let mut kl = 0.0;
        for j in 0..k {
            if r[j] > 0.0 {
                kl += r[j] * (r[j] / marginal[j]).ln();
            }
        }
        total += kl;
    }
    (total / n).exp()
}

#[test]
fn inception_score_identities() {
    let (m, s) = inception_score(&Tensor::full(&[20, 10], 0.1), 2).unwrap();
    assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
    let mut eye = Tensor::<f64>::zeros(&[10, 10]);
    for i in 0..10 {
        eye.data_mut()[i * 10 + i] = 1.0;
    }
    let (m, s) = inception_score(&eye, 1).unwrap();
    assert!((m - 10.0).abs() < 1e-9 && s == 0.0);
    assert!(inception_score(&eye, 11).is_err());
    assert!(inception_score(&eye, 0).is_err());
}

#[test]
fn inception_score_matches_brute_force() {
    let p = random_simplex(64, 10, 3);
    let (mean, std) = inception_score(&p, 4).unwrap();
    let scores: Vec<f64> = (0..4)
        .map(|g| is_oracle(&(0..16).map(|r| p.row(g * 16 + r).to_vec()).collect::<Vec<_>>()))
        .collect();
    let om = scores.iter().sum::<f64>() / 4.0;
    let os = (scores.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((mean - om).abs() < 1e-8);
    assert!((std - os).abs() < 1e-8);
}

#[test]
fn is_equals_one_when_rows_equal_marginal() {
    let row = [0.5, 0.3, 0.2];
    let p = Tensor::from_vec(&[5, 3], row.iter().cycle().take(15).copied().collect()).unwrap();
    assert!((inception_score(&p, 1).unwrap().0 - 1.0).abs() < 1e-12);
    // Two distinct rows: strictly above one.
    let q = Tensor::from_vec(&[2, 3], vec![0.5, 0.3, 0.2, 0.2, 0.3, 0.5]).unwrap();
    assert!(inception_score(&q, 1).unwrap().0 > 1.0 + 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inception_score_range_and_permutation(s in any::<u64>(), n in 2usize..40, k in 2usize..12) {
        let p = random_simplex(n, k, s);
        let (m, _) = inception_score(&p, 1).unwrap();
        prop_assert!(m >= 1.0 - 1e-9 && m <= k as f64 + 1e-9);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(s as usize % n);
        let (mp, _) = inception_score(&p.select_outer(&order), 1).unwrap();
        prop_assert!((m - mp).abs() < 1e-9);
    }

    #[test]
    fn deviation_mean_is_one_for_uniform_counts(
        labels in proptest::collection::vec(0usize..7, 1..200),
        per in 1usize..50,
    ) {
        let t = class_deviation(&labels, &[per; 7]).unwrap();
        prop_assert!((t.mean - 1.0).abs() < 1e-12);
        prop_assert!(t.per_class.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn deviation_rejects_out_of_range_labels() {
    assert!(class_deviation(&[3], &[1, 1]).is_err());
}

fn blobs(n: usize, s: u64, separation: f64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = seed::rng(s, &[]);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let center = if c == 0 { -separation } else { separation };
        data.extend((0..4).map(|_| center + noise.sample(&mut rng)));
        labels.push(c);
    }
    (Tensor::from_vec(&[n, 4], data).unwrap(), labels)
}

#[test]
fn linear_evaluator_separates_blobs_deterministically() {
    let (x, y) = blobs(400, 1, 3.0);
    let cfg = LinearFitConfig::default();
    let ev = LinearEvaluator::fit(&x, &y, 2, &cfg).unwrap();
    assert!(ev.accuracy(&x, &y).unwrap() >= 0.99);
    let again = LinearEvaluator::fit(&x, &y, 2, &cfg).unwrap();
    assert_eq!(ev, again);
}

#[test]
fn linear_evaluator_is_at_chance_on_random_labels() {
    let c = 5;
    let x = random_matrix(1000, 8, 2);
    let mut rng = seed::rng(9, &[]);
    let y: Vec<usize> = (0..1000).map(|_| rng.random_range(0..c)).collect();
    let ev = LinearEvaluator::fit(&x.slice_outer(0, 500), &y[..500], c, &LinearFitConfig::default()).unwrap();
    let acc = ev.accuracy(&x.slice_outer(500, 1000), &y[500..]).unwrap();
    assert!((acc - 1.0 / c as f64).abs() <= 0.05, "held-out accuracy {acc}");
}

#[test]
fn self_fid_of_memorized_data_is_near_zero() {
    let set = synthetic_cifar10(20, 4).unwrap();
    let ex = ToyExtractor::<f64>::new();
    let dir = tempfile::tempdir().unwrap();
    let reference = reference_stats(&set, "abc123", &ex, Some(dir.path())).unwrap();
    let cached = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    assert_eq!(read_stats(&cached, "abc123", &ex.id()).unwrap().unwrap(), reference);
    assert_eq!(read_stats(&cached, "other", &ex.id()).unwrap(), None);

    let sampler = MemorizedSampler { set: &set };
    let scores = evaluate_gan(&sampler, &reference, &ex, set.len(), 10, 0).unwrap();
    assert!(scores.fid < 1.0, "self FID {}", scores.fid);
    assert!(scores.is_mean >= 1.0);
    let again = evaluate_gan(&sampler, &reference, &ex, set.len(), 10, 0).unwrap();
    assert_eq!(scores, again);
    assert!(matches!(
        evaluate_gan(&sampler, &reference, &ex, 1, 10, 0),
        Err(Error::InsufficientSamples { .. })
    ));
}

#[test]
fn per_class_fid_identity_case() {
    let full = synthetic_cifar10(12, 6).unwrap();
    let frogs = full.select(&full.class_indices(6)).unwrap();
    let ex = ToyExtractor::<f64>::new();
    let labeler = |x: &Tensor<f64>| -> dgan::Result<Vec<usize>> { Ok(vec![6; x.dim(0)]) };
    let sampler = MemorizedSampler { set: &frogs };
    let out = per_class_fid(&sampler, &frogs, &ex, &labeler, &[6], frogs.len(), frogs.len(), 1).unwrap();
    assert!((out.scale - 1.0).abs() < 1e-6, "scale {}", out.scale);
    assert!(out.scaled[&6] < 1e-6, "class FID {}", out.scaled[&6]);
    let err = per_class_fid(&sampler, &frogs, &ex, &labeler, &[8], 2, frogs.len(), 1).unwrap_err();
    assert!(matches!(err, Error::InsufficientSamples { ref class, .. } if class == "ship"));
}

#[test]
fn per_class_fid_scale_is_full_over_subset() {
    let set = synthetic_cifar10(12, 6).unwrap();
    let ex = ToyExtractor::<f64>::new();
    let sampler = MemorizedSampler { set: &set };
    let labeler = |x: &Tensor<f64>| -> dgan::Result<Vec<usize>> { Ok((0..x.dim(0)).map(|i| i % 10).collect()) };
    let out = per_class_fid(&sampler, &set, &ex, &labeler, &[0, 9], 10, set.len(), 3).unwrap();
    assert!(out.subset_fid > out.full_fid);
    assert!((out.scale - out.full_fid / out.subset_fid).abs() < 1e-12);
    for c in [0, 9] {
        assert!((out.scaled[&c] - out.raw[&c] * out.scale).abs() < 1e-12);
    }
    assert_eq!(out, per_class_fid(&sampler, &set, &ex, &labeler, &[0, 9], 10, set.len(), 3).unwrap());
}

#[test]
fn toy_extractor_probabilities_sum_to_one() {
    let set = synthetic_cifar10(3, 1).unwrap();
    let ex = ToyExtractor::<f32>::new();
    let (f, p) = extract_all(&ex, &set.to_tensor::<f32>()).unwrap();
    assert_eq!(f.shape(), &[30, ex.feature_dim()]);
    for i in 0..30 {
        assert!((p.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

fn random_inception_weights() -> Vec<(String, RawTensor)> {
    let mut rng = seed::rng(77, &[]);
    expected_tensors(1008)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("running_var") || name.ends_with("bn.weight") {
                vec![1.0; n]
            } else if name.ends_with("conv.weight") || name == "fc.weight" {
                let fan_in: usize = shape[1..].iter().product();
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| d.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            (name, RawTensor { shape, data })
        })
        .collect()
}

#[test]
fn inception_loads_pinned_weights_and_runs() {
    let bytes = write_safetensors(&random_inception_weights());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    std::fs::write(&path, &bytes).unwrap();
    use sha2::Digest;
    let sha = hex::encode(sha2::Sha256::digest(&bytes));

    let wrong = "0".repeat(64);
    assert!(matches!(InceptionV3::<f32>::load(&path, &wrong), Err(Error::Checkpoint(_))));

    let net = InceptionV3::<f32>::load(&path, &sha).unwrap();
    assert_eq!((net.feature_dim(), net.class_count()), (2048, 1008));
    let img = synthetic_cifar10(1, 0).unwrap().to_tensor::<f32>().slice_outer(0, 1);
    let (f, p) = net.extract(&img).unwrap();
    assert_eq!(f.shape(), &[1, 2048]);
    assert!(f.all_finite() && f.data().iter().all(|&v| v >= 0.0));
    assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-4);
}
