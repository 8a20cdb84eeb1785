use dgan::data::augment::{simclr_views, AugmentationPolicy};
use dgan::data::cifar::{load_cifar10, write_cifar10, RECORD, TRAIN_FILES};
use dgan::data::longtail::{
    build_dataset, build_longtail_counts, build_subset, desk_counts, paper_counts, DatasetRequest, LongTailSpec, Profile, Scale,
};
use dgan::data::store::{read_built, resolve, write_built};
use dgan::data::synthetic::synthetic_cifar10;
use dgan::data::{gan_postprocess, gan_preprocess, LabeledImageSet, PIXELS};
use dgan::{Error, Tensor};
use proptest::prelude::*;

const TABLE3_IMBALANCED: [usize; 10] = [348, 969, 125, 208, 1617, 75, 4500, 581, 2697, 45];

#[test]
fn cifar_layout_roundtrip() {
    let set = synthetic_cifar10(7, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_cifar10(&set, dir.path()).unwrap();
    assert!(files.len() >= 5);
    let total: u64 = TRAIN_FILES.iter().map(|f| std::fs::metadata(dir.path().join(f)).unwrap().len()).sum();
    assert_eq!(total as usize, set.len() * RECORD);
    let back = load_cifar10(dir.path()).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.per_class_counts(), &[7; 10]);
}

#[test]
fn cifar_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    match load_cifar10(&dir.path().join("absent")) {
        Err(Error::DatasetNotFound(p)) => assert!(p.ends_with("absent")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_cifar10(dir.path()), Err(Error::DatasetNotFound(_))));

    write_cifar10(&synthetic_cifar10(2, 0).unwrap(), dir.path()).unwrap();
    let victim = dir.path().join(TRAIN_FILES[2]);
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes.truncate(bytes.len() - 100);
    std::fs::write(&victim, bytes).unwrap();
    match load_cifar10(dir.path()) {
        Err(Error::CorruptData { path, .. }) => assert_eq!(path, victim),
        other => panic!("{other:?}"),
    }
}

#[test]
fn paper_scale_profiles_match_published_counts() {
    let full = synthetic_cifar10(5000, 0).unwrap();
    assert_eq!(full.len(), 50_000);
    assert_eq!(paper_counts(&full, Profile::Imbalanced).unwrap(), TABLE3_IMBALANCED);
    let req = |profile| DatasetRequest::Profile {
        profile,
        scale: Scale::Paper,
    };
    let (idx, m) = build_dataset(&full, &req(Profile::Imbalanced), 0).unwrap();
    assert_eq!(m.counts, TABLE3_IMBALANCED);
    assert_eq!((idx.len(), m.total), (11_165, 11_165));
    let (_, m) = build_dataset(&full, &req(Profile::Partial), 0).unwrap();
    assert_eq!(m.counts, vec![1116; 10]);
    assert_eq!(m.total, 11_160);
    let (_, m) = build_dataset(&full, &req(Profile::Full), 0).unwrap();
    assert_eq!(m.total, 50_000);
}

#[test]
fn desk_profiles_keep_the_class_shape() {
    let full = synthetic_cifar10(5000, 0).unwrap();
    for p in Profile::ALL {
        let counts = desk_counts(&full, p).unwrap();
        let (idx, m) = build_dataset(&full, &DatasetRequest::Profile { profile: p, scale: Scale::Desk }, 3).unwrap();
        assert_eq!(m.counts, counts);
        assert_eq!(idx.len(), counts.iter().sum::<usize>());
        assert!((990..=1000).contains(&idx.len()), "{p:?}: {}", idx.len());
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len());
    }
    let imb = desk_counts(&full, Profile::Imbalanced).unwrap();
    let order: Vec<usize> = (0..10).collect();
    let mut by_full_scale = order.clone();
    by_full_scale.sort_by_key(|&c| std::cmp::Reverse(TABLE3_IMBALANCED[c]));
    let mut by_desk = order;
    by_desk.sort_by_key(|&c| std::cmp::Reverse(imb[c]));
    assert_eq!(by_full_scale, by_desk);
}

#[test]
fn subsets_are_deterministic_and_exact() {
    let full = synthetic_cifar10(30, 4).unwrap();
    let counts = vec![30, 1, 5, 0, 12, 3, 30, 2, 9, 7];
    let a = build_subset(&full, &counts, 9).unwrap();
    let b = build_subset(&full, &counts, 9).unwrap();
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a, b);
    assert_eq!(a.per_class_counts(), counts.as_slice());
    let c = build_subset(&full, &counts, 10).unwrap();
    assert_ne!(a.labels(), c.labels());
    assert!(matches!(build_subset(&full, &[31; 10], 0), Err(Error::InsufficientSamples { .. })));
}

#[test]
fn built_datasets_persist_and_resolve() {
    let full = synthetic_cifar10(1200, 0).unwrap();
    let (idx, m) = build_dataset(&full, &DatasetRequest::Profile { profile: Profile::Partial, scale: Scale::Desk }, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mp = write_built(dir.path(), &idx, &m).unwrap();
    let (idx2, m2) = read_built(&mp).unwrap();
    assert_eq!((idx2.clone(), m2.clone()), (idx.clone(), m.clone()));
    assert_eq!(read_built(dir.path()).unwrap().1.hash(), m.hash());

    let (set, rm) = resolve(mp.to_str().unwrap(), Scale::Paper, 0, &full).unwrap();
    assert_eq!(rm, m);
    assert_eq!(set, full.select(&idx).unwrap());
    let (set2, _) = resolve("partial", Scale::Desk, 5, &full).unwrap();
    assert_eq!(set2, set);

    assert!(matches!(resolve(mp.to_str().unwrap(), Scale::Paper, 0, &synthetic_cifar10(1100, 0).unwrap()), Err(Error::CorruptData { .. })));
    assert!(matches!(resolve("no-such-thing", Scale::Paper, 0, &full), Err(Error::Config(_))));

    std::fs::write(dir.path().join("indices.json"), "[0, 1, 2]").unwrap();
    assert!(matches!(read_built(&mp), Err(Error::CorruptData { .. })));
}

#[test]
fn default_views_differ_from_input_and_each_other() {
    let set = synthetic_cifar10(7, 2).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let batch: Tensor<f32> = set.batch(&idx);
    let policy = AugmentationPolicy {
        seed_root: 77,
        ..AugmentationPolicy::default()
    };
    let mut differing = 0;
    for b in 0..100 {
        let (v1, v2) = simclr_views(&batch, &policy, 0, b).unwrap();
        if v1 != batch && v2 != batch && v1 != v2 {
            differing += 1;
        }
        if b < 3 {
            assert_eq!(simclr_views(&batch, &policy, 0, b).unwrap(), (v1, v2));
        }
    }
    assert!(differing >= 99, "{differing}");
}

#[test]
fn preprocess_endpoints() {
    let raw: Vec<u8> = (0..PIXELS).map(|i| [0u8, 255, 127, 128][i % 4]).collect();
    let x = gan_preprocess::<f64>(&raw).unwrap();
    assert_eq!(x.data()[0], -1.0);
    assert_eq!(x.data()[1], 1.0);
    assert!((x.data()[2] + 0.5 / 127.5).abs() < 1e-12);
    assert!((x.data()[3] - 0.5 / 127.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocess_inverts(raw in proptest::collection::vec(any::<u8>(), PIXELS)) {
        let x = gan_preprocess::<f32>(&raw).unwrap();
        prop_assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(gan_postprocess(&x), raw);
    }

    #[test]
    fn longtail_ratio_and_balance(n_max in 10usize..5000, factor in 1.0f64..200.0, c in 2usize..12) {
        let mut spec = LongTailSpec::cifar10(n_max, factor);
        spec.num_classes = c;
        spec.class_permutation = (0..c).collect();
        match build_longtail_counts(&spec) {
            Ok(counts) => {
                let max = *counts.iter().max().unwrap() as f64;
                let min = *counts.iter().min().unwrap() as f64;
                prop_assert_eq!(max as usize, n_max);
                prop_assert!(max / min >= factor * (1.0 - 1e-9));
                prop_assert!(max / min < factor * (1.0 + 1.0 / min) + 1e-9);
                prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            }
            Err(e) => prop_assert!(matches!(e, Error::DegenerateSpec(_))),
        }
        spec.imbalance_factor = 1.0;
        prop_assert_eq!(build_longtail_counts(&spec).unwrap(), vec![n_max; c]);
    }

    #[test]
    fn subset_counts_exact(counts in proptest::collection::vec(0usize..6, 10), seed in any::<u64>()) {
        let full = synthetic_cifar10(5, 1).unwrap();
        let s: LabeledImageSet = build_subset(&full, &counts, seed).unwrap();
        prop_assert_eq!(s.per_class_counts(), counts.as_slice());
        prop_assert_eq!(s.len(), counts.iter().sum::<usize>());
    }
}

#[test]
fn manifest_without_indices_is_rebuilt() {
    let full = synthetic_cifar10(1200, 1).unwrap();
    let (idx, m) = build_dataset(&full, &DatasetRequest::Profile { profile: Profile::Partial, scale: Scale::Desk }, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mp = write_built(dir.path(), &idx, &m).unwrap();
    std::fs::remove_file(dir.path().join("indices.json")).unwrap();
    let (set, back) = resolve(mp.to_str().unwrap(), Scale::Paper, 0, &full).unwrap();
    assert_eq!(back, m);
    assert_eq!(set, full.select(&idx).unwrap());
    let other = synthetic_cifar10(1200, 2).unwrap();
    assert!(matches!(resolve(mp.to_str().unwrap(), Scale::Paper, 0, &other), Err(Error::CorruptData { .. })));
}
