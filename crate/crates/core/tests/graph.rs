mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rtfgraph::graph::{attach_query, build_knn_graph, leave_one_out, leave_one_out_graph, FeatureBank};
use rtfgraph::rtf::RtfFeature;

/// Random bank whose entries are rounded to a coarse lattice so that
/// distance ties are common.
fn random_bank(n: usize, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> FeatureBank {
    let mut ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
    ids.shuffle(rng);
    let data = (0..n * rows * dim).map(|_| rng.random_range(-3i32..=3) as f64 * 0.5).collect();
    FeatureBank::from_raw(ids, rows, dim, data).unwrap()
}

/// Selection by repeated minimum over (squared distance, id); no sorting.
fn oracle_knn(bank: &FeatureBank, row: usize, query: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let dist = |j: usize| -> f64 { bank.feature(j, row).iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut taken = vec![false; bank.len()];
    if let Some(s) = skip {
        taken[s] = true;
    }
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..bank.len() {
            if taken[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => {
                    let (dj, db) = (dist(j), dist(b));
                    if dj < db || (dj == db && bank.ids()[j] < bank.ids()[b]) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn feature(rows: usize, dim: usize, data: Vec<f64>) -> RtfFeature {
    // rows + 1 mics with the reference last, one uncausal lag
    RtfFeature::new(1, dim - 1, rows + 1, rows, data).unwrap()
}

#[test]
fn knn_matches_exhaustive_oracle() {
    let mut r = common::rng(1);
    for trial in 0..100 {
        let n = r.random_range(3..25);
        let bank = random_bank(n, 2, 3, &mut r);
        let k = r.random_range(1..n);
        let g = build_knn_graph(&bank, k).unwrap();
        for row in 0..2 {
            for i in 0..n {
                let want = oracle_knn(&bank, row, bank.feature(i, row), k, Some(i));
                assert_eq!(g.neighbors(row, i), want.as_slice(), "trial {trial} row {row} node {i}");
            }
        }
    }
}

#[test]
fn query_attachment_matches_oracle() {
    let mut r = common::rng(2);
    for _ in 0..50 {
        let n = r.random_range(2..20);
        let bank = random_bank(n, 2, 3, &mut r);
        let q = feature(2, 3, (0..6).map(|_| r.random_range(-3i32..=3) as f64 * 0.5).collect());
        let k = r.random_range(1..=n);
        let att = attach_query(&bank, &q, k).unwrap();
        for row in 0..2 {
            let want: Vec<Option<usize>> = oracle_knn(&bank, row, q.row(row), k, None).into_iter().map(Some).collect();
            assert_eq!(att.neighbors[row], want);
            assert!(att.distances[row].windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

proptest! {
    #[test]
    fn relabeling_bank_order_keeps_neighbor_ids(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let n = r.random_range(3..15);
        let bank = random_bank(n, 2, 2, &mut r);
        let k = r.random_range(1..n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let stride = 2 * 2;
        let ids: Vec<usize> = perm.iter().map(|&i| bank.ids()[i]).collect();
        let data: Vec<f64> = perm.iter().flat_map(|&i| bank.data()[i * stride..(i + 1) * stride].to_vec()).collect();
        let shuffled = FeatureBank::from_raw(ids, 2, 2, data).unwrap();
        let g1 = build_knn_graph(&bank, k).unwrap();
        let g2 = build_knn_graph(&shuffled, k).unwrap();
        for row in 0..2 {
            for (i2, &i1) in perm.iter().enumerate() {
                let a: Vec<usize> = g1.neighbors(row, i1).iter().map(|j| bank.ids()[*j]).collect();
                let b: Vec<usize> = g2.neighbors(row, i2).iter().map(|j| shuffled.ids()[*j]).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn leave_one_out_equals_deleting_the_node(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let n = r.random_range(3..15);
        let bank = random_bank(n, 2, 3, &mut r);
        let victim = bank.ids()[r.random_range(0..n)];
        let k = r.random_range(1..n);
        let q = feature(2, 3, (0..6).map(|_| r.random_range(-2.0..2.0)).collect());
        let loo = leave_one_out(&bank, victim, &q, k).unwrap();
        let idx = bank.index_of(victim).unwrap();
        let reduced = bank.without(&[idx]);
        let direct = attach_query(&reduced, &q, k).unwrap();
        for row in 0..2 {
            let a: Vec<usize> = loo.neighbors[row].iter().map(|j| bank.ids()[j.unwrap()]).collect();
            let b: Vec<usize> = direct.neighbors[row].iter().map(|j| reduced.ids()[j.unwrap()]).collect();
            prop_assert!(!a.contains(&victim));
            prop_assert_eq!(a, b);
            prop_assert_eq!(&loo.distances[row], &direct.distances[row]);
        }
        if k < n - 1 {
            let (rb, g) = leave_one_out_graph(&bank, victim, k).unwrap();
            prop_assert!(!rb.ids().contains(&victim));
            prop_assert_eq!(g.neighbors[0].len(), n - 1);
        }
    }
}

#[test]
fn rows_are_independent() {
    let mut r = common::rng(4);
    let bank = random_bank(12, 2, 3, &mut r);
    let mut data = bank.data().to_vec();
    for node in 0..12 {
        for j in 0..3 {
            data[node * 6 + 3 + j] = r.random_range(-5.0..5.0);
        }
    }
    let other = FeatureBank::from_raw(bank.ids().to_vec(), 2, 3, data).unwrap();
    let a = build_knn_graph(&bank, 4).unwrap();
    let b = build_knn_graph(&other, 4).unwrap();
    assert_eq!(a.neighbors[0], b.neighbors[0]);
}

#[test]
fn noiseless_query_finds_itself() {
    let mut r = common::rng(5);
    let bank = FeatureBank::from_raw((0..10).collect(), 2, 3, (0..60).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let q = feature(2, 3, [bank.feature(6, 0), bank.feature(6, 1)].concat());
    let att = attach_query(&bank, &q, 3).unwrap();
    for row in 0..2 {
        assert_eq!(att.neighbors[row][0], Some(6));
        assert_eq!(att.distances[row][0], 0.0);
    }
    let loo = leave_one_out(&bank, 6, &q, 3).unwrap();
    assert!(loo.neighbors.iter().flatten().all(|j| *j != Some(6)));
}

#[test]
fn invalid_k_and_unknown_ids() {
    let mut r = common::rng(6);
    let bank = random_bank(5, 1, 2, &mut r);
    assert!(build_knn_graph(&bank, 0).is_err());
    assert!(build_knn_graph(&bank, 5).is_err());
    assert!(build_knn_graph(&bank, 4).is_ok());
    let q = feature(1, 2, vec![0.0, 0.0]);
    assert!(leave_one_out(&bank, 1000, &q, 2).is_err());
    assert!(leave_one_out(&bank, bank.ids()[0], &q, 5).is_err());
    assert!(attach_query(&bank, &feature(2, 2, vec![0.0; 4]), 2).is_err());
}
