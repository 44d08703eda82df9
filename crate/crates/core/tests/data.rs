//! Synthetic dataset, splits, the pair sampler and the dataset file format.

mod common;

use std::collections::{BTreeMap, HashSet};

use cadg::data::{
    generate_synthetic, read_dataset, sample_pair_batch, sample_pair_row, split, write_dataset, GeneratorConfig,
    SplitSpec,
};
use cadg::CadgError;
use common::rng;
use proptest::prelude::*;

fn gen(classes: usize, domains: usize, per_cell: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        classes,
        domains,
        per_cell,
        image_size: 8,
        channels: 1,
        seed,
    }
}

#[test]
fn generation_counts_cells() {
    let ds = generate_synthetic(&gen(4, 3, 50, 7)).unwrap();
    assert_eq!(ds.len(), 600);
    for d in 0..3 {
        for c in 0..4 {
            assert_eq!(ds.cell(d, c).len(), 50);
            assert!(ds.cell(d, c).iter().all(|&id| ds.label(id) == c && ds.domain(id) == d));
        }
    }
    for id in 0..ds.len() {
        assert!(ds.image(id).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_and_split_are_pure_functions_of_their_seeds() {
    let a = generate_synthetic(&gen(3, 3, 20, 5)).unwrap();
    let b = generate_synthetic(&gen(3, 3, 20, 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_synthetic(&gen(3, 3, 20, 6)).unwrap());

    let spec = |s| SplitSpec {
        val_fraction: 0.2,
        split_seed: s,
    };
    assert_eq!(split(&a, &spec(1), &[0, 1]).unwrap(), split(&b, &spec(1), &[0, 1]).unwrap());
    assert_ne!(split(&a, &spec(1), &[0, 1]).unwrap(), split(&a, &spec(2), &[0, 1]).unwrap());
}

#[test]
fn split_partitions_each_source_cell() {
    let ds = generate_synthetic(&gen(4, 4, 50, 1)).unwrap();
    let s = split(
        &ds,
        &SplitSpec {
            val_fraction: 0.2,
            split_seed: 3,
        },
        &[0, 2, 3],
    )
    .unwrap();
    let train: HashSet<usize> = s.train.ids().into_iter().collect();
    let val: HashSet<usize> = s.val.iter().copied().collect();
    assert!(train.is_disjoint(&val));
    assert_eq!(val.len(), s.val.len());
    for d in [0, 2, 3] {
        for c in 0..4 {
            let cell = ds.cell(d, c);
            assert_eq!(cell.iter().filter(|id| val.contains(id)).count(), 10);
            assert!(cell.iter().all(|id| train.contains(id) || val.contains(id)));
        }
    }
    assert!(ds.domain_ids(1).iter().all(|id| !train.contains(id) && !val.contains(id)));
}

#[test]
fn sampler_statistics_over_ten_thousand_rows() {
    let ds = generate_synthetic(&gen(4, 4, 30, 2)).unwrap();
    let s = split(&ds, &SplitSpec::default(), &[0, 1, 3]).unwrap();
    let mut r = rng(42);
    let mut classes = [0usize; 4];
    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let n = 10_000;
    for _ in 0..n {
        let row = sample_pair_row(&s.train, &mut r).unwrap();
        assert_ne!(row.domain_p, row.domain_q);
        assert_eq!(ds.label(row.id_p), row.class);
        assert_eq!(ds.label(row.id_q), row.class);
        assert_eq!(ds.domain(row.id_p), row.domain_p);
        assert_eq!(ds.domain(row.id_q), row.domain_q);
        classes[row.class] += 1;
        let key = (row.domain_p.min(row.domain_q), row.domain_p.max(row.domain_q));
        *pairs.entry(key).or_default() += 1;
    }
    for c in classes {
        let f = c as f64 / n as f64;
        assert!((0.225..=0.275).contains(&f), "class frequency {f}");
    }
    assert_eq!(pairs.keys().copied().collect::<Vec<_>>(), vec![(0, 1), (0, 3), (1, 3)]);
    for (&k, &c) in &pairs {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.025, "pair {k:?} frequency {f}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_pair_batch_honours_its_contract(
        classes in 2usize..5, domains in 3usize..6, held in 0usize..6, batch in 1usize..20, seed in any::<u64>(),
    ) {
        let held = held % domains;
        let ds = generate_synthetic(&gen(classes, domains, 5, seed)).unwrap();
        let sources: Vec<usize> = (0..domains).filter(|&d| d != held).collect();
        let s = split(&ds, &SplitSpec { val_fraction: 0.2, split_seed: seed }, &sources).unwrap();
        let b = sample_pair_batch(&ds, &s.train, batch, &mut rng(seed)).unwrap();
        prop_assert_eq!(b.x_p.shape(), &[batch, 8, 8, 1][..]);
        prop_assert_eq!(b.x_q.shape(), b.x_p.shape());
        for i in 0..batch {
            prop_assert!(b.domain_p[i] != b.domain_q[i]);
            prop_assert!(b.domain_p[i] != held && b.domain_q[i] != held);
            prop_assert!(b.y[i] < classes);
        }
        prop_assert_eq!(ds.access_count(held), 0);
    }
}

#[test]
fn dataset_files_round_trip_bit_exactly() {
    let ds = generate_synthetic(&gen(3, 3, 4, 11)).unwrap();
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(back, ds);
    for id in 0..ds.len() {
        let bits = |t: &cadg::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.image(id)), bits(ds.image(id)));
    }

    let mut bad = buf.clone();
    bad[6] = b'2';
    assert!(matches!(read_dataset(bad.as_slice()), Err(CadgError::Format(_))));
    assert!(read_dataset(&buf[..buf.len() - 3]).is_err());
    let mut long = buf;
    long.push(0);
    assert!(read_dataset(long.as_slice()).is_err());
}

#[test]
fn imported_files_of_other_sizes_satisfy_the_invariants() {
    for per_cell in [1, 3, 17] {
        let ds = generate_synthetic(&gen(2, 3, per_cell, per_cell as u64)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        back.validate_cells().unwrap();
        for d in 0..3 {
            for c in 0..2 {
                assert_eq!(back.cell(d, c).len(), per_cell);
            }
        }
    }
}
