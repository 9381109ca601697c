use std::collections::BTreeSet;

use mocolab::data::*;
use mocolab::rng::{Domain, StreamKey};
use mocolab::Error;
use proptest::prelude::*;

fn cifar_like(n_per_class: usize) -> Dataset {
    gen_synthetic(&SyntheticSpec { n_per_class, classes: 10, size: CIFAR_SIDE, noise_sigma: 0.1, seed: 3 }).unwrap()
}

#[test]
fn cifar_round_trip_through_files() {
    let ds = cifar_like(3);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let bytes = encode_cifar10(&ds).unwrap();
    assert_eq!(bytes.len(), ds.len() * CIFAR_RECORD);
    std::fs::write(&a, &bytes[..15 * CIFAR_RECORD]).unwrap();
    std::fs::write(&b, &bytes[15 * CIFAR_RECORD..]).unwrap();
    let back = load_cifar10_bin(&[a, b]).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.side(), 32);
    for (x, y) in back.images().data().iter().zip(ds.images().data()) {
        assert_eq!(*x, (y * 255.0).round() / 255.0);
    }
    // a second trip is lossless
    assert_eq!(encode_cifar10(&back).unwrap(), bytes);
}

#[test]
fn cifar_byte_layout() {
    let ds = cifar_like(1);
    let bytes = encode_cifar10(&ds).unwrap();
    let (pixels, labels) = parse_cifar10(&bytes, 0).unwrap();
    assert_eq!(labels, (0..10).collect::<Vec<_>>());
    // record 2: label byte, then the red plane row-major
    let rec = &bytes[2 * CIFAR_RECORD..3 * CIFAR_RECORD];
    assert_eq!(rec[0], 2);
    assert_eq!(pixels[2 * 3072 + 33], rec[1 + 33] as f32 / 255.0);
    assert_eq!(pixels[2 * 3072 + 1024 + 5], rec[1 + 1024 + 5] as f32 / 255.0);
}

#[test]
fn truncated_and_corrupt_files() {
    let ds = cifar_like(1);
    let mut bytes = encode_cifar10(&ds).unwrap();
    match parse_cifar10(&bytes[..4 * CIFAR_RECORD + 100], 0) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 4 * CIFAR_RECORD as u64),
        other => panic!("expected format error, got {other:?}"),
    }
    bytes[6 * CIFAR_RECORD] = 10;
    match parse_cifar10(&bytes, 20) {
        Err(Error::CorruptRecord { index, .. }) => assert_eq!(index, 26),
        other => panic!("expected corrupt record, got {other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let e = load_cifar10_bin(&[missing]).unwrap_err();
    assert!(e.is_io_or_format(), "{e}");
}

#[test]
fn synthetic_classes_are_separable() {
    for classes in [2, 4, 8] {
        let ds = gen_synthetic(&SyntheticSpec { n_per_class: 20, classes, size: 16, noise_sigma: 0.05, seed: 0 }).unwrap();
        let dim = 3 * 16 * 16;
        let mut means = vec![vec![0f64; dim]; classes];
        for i in 0..ds.len() {
            let img = ds.image(i);
            for (m, &v) in means[ds.labels()[i]].iter_mut().zip(img.data()) {
                *m += v as f64 / 20.0;
            }
        }
        // nearest class mean recovers every label
        for i in 0..ds.len() {
            let img = ds.image(i);
            let dist = |m: &Vec<f64>| m.iter().zip(img.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..classes).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            assert_eq!(best, ds.labels()[i], "classes {classes}, sample {i}");
        }
    }
}

#[test]
fn synthetic_is_class_major_and_seeded() {
    let spec = SyntheticSpec { n_per_class: 5, classes: 3, size: 8, noise_sigma: 0.05, seed: 1 };
    let a = gen_synthetic(&spec).unwrap();
    assert_eq!(a.labels(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    assert_eq!(a.images().data(), gen_synthetic(&spec).unwrap().images().data());
    let b = gen_synthetic(&SyntheticSpec { seed: 2, ..spec.clone() }).unwrap();
    assert_ne!(a.images().data(), b.images().data());
    // more samples per class leave the earlier ones untouched
    let c = gen_synthetic(&SyntheticSpec { n_per_class: 6, ..spec }).unwrap();
    assert_eq!(c.image(0), a.image(0));
    assert_eq!(c.image(6), a.image(5));
}

#[test]
fn batch_larger_than_dataset_is_rejected() {
    let key = StreamKey::new(Domain::DataOrder, 0);
    assert!(matches!(batch_iter(10, 11, key), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn batches_are_disjoint_and_full(n in 1usize..300, b in 1usize..64, seed in any::<u64>()) {
        prop_assume!(b <= n);
        let key = StreamKey::new(Domain::DataOrder, seed).derive(1);
        let batches = batch_iter(n, b, key).unwrap();
        prop_assert_eq!(batches.len(), n / b);
        let mut seen = BTreeSet::new();
        for batch in &batches {
            prop_assert_eq!(batch.len(), b);
            for &i in batch {
                prop_assert!(i < n);
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(batch_iter(n, b, key).unwrap(), batches);
    }

    #[test]
    fn permutation_is_a_bijection(n in 0usize..500, seed in any::<u64>()) {
        let p = permutation(n, StreamKey::new(Domain::DataOrder, seed));
        let mut s = p.clone();
        s.sort_unstable();
        prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
    }
}
