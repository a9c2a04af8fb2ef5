use std::collections::HashMap;

use grokking_core::tasks::{compose, gen_mod_add, gen_s5, index_perm, perm_index, split_indices, Task};

/// Lexicographic enumeration by repeated next-permutation, independent of
/// the Lehmer-code ranking under test.
fn all_perms() -> Vec<[usize; 5]> {
    let mut p = [0, 1, 2, 3, 4];
    let mut out = vec![p];
    loop {
        let Some(i) = (0..4).rev().find(|&i| p[i] < p[i + 1]) else { break };
        let j = (i + 1..5).rev().find(|&j| p[j] > p[i]).unwrap();
        p.swap(i, j);
        p[i + 1..].reverse();
        out.push(p);
    }
    out
}

#[test]
fn every_modular_label_is_the_sum_mod_p() {
    let ds = gen_mod_add(113, 0).unwrap();
    assert_eq!(ds.len(), 12_769);
    let mut seen = vec![false; 113 * 113];
    for (seq, &label) in ds.sequences.iter().zip(&ds.labels) {
        let [a, b, eq] = *seq;
        assert_eq!(eq, 113);
        let mut expect = a + b;
        if expect >= 113 {
            expect -= 113;
        }
        assert_eq!(label, expect, "{a} + {b}");
        assert!(!seen[a * 113 + b]);
        seen[a * 113 + b] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn splits_partition_and_depend_on_seed() {
    for task in [Task::ModAdd { p: 113 }, Task::S5Compose] {
        let a = task.generate(7).unwrap();
        let b = task.generate(7).unwrap();
        let c = task.generate(8).unwrap();
        assert_eq!(a.train_idx, b.train_idx);
        assert_ne!(a.train_idx, c.train_idx);
        let mut all: Vec<usize> = a.train_idx.iter().chain(&a.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..a.len()).collect::<Vec<_>>());
        assert_eq!(a.train_idx.len(), (a.len() as f64 * 0.3).floor() as usize);
    }
    assert_eq!(split_indices(12_769, 0.3, 0).unwrap().1.len(), 8_939);
}

#[test]
fn permutation_ranks_round_trip_in_lexicographic_order() {
    let perms = all_perms();
    assert_eq!(perms.len(), 120);
    for (i, p) in perms.iter().enumerate() {
        assert_eq!(perm_index(p).unwrap(), i);
        assert_eq!(index_perm(i).unwrap(), *p);
    }
}

#[test]
fn s5_group_laws() {
    let perms = all_perms();
    let e = [0, 1, 2, 3, 4];
    for p in &perms {
        assert_eq!(compose(&e, p), *p);
        assert_eq!(compose(p, &e), *p);
        let mut inv = [0; 5];
        for (x, &y) in p.iter().enumerate() {
            inv[y] = x;
        }
        assert_eq!(compose(p, &inv), e);
    }
    let swap01 = [1, 0, 2, 3, 4];
    let swap12 = [0, 2, 1, 3, 4];
    assert_ne!(compose(&swap01, &swap12), compose(&swap12, &swap01));
    assert_eq!(compose(&swap01, &swap12), [1, 2, 0, 3, 4]);
    for a in perms.iter().step_by(7) {
        for b in perms.iter().step_by(5) {
            for c in &perms {
                assert_eq!(compose(&compose(a, b), c), compose(a, &compose(b, c)));
            }
        }
    }
}

#[test]
fn s5_labels_match_direct_composition() {
    let perms = all_perms();
    let rank: HashMap<[usize; 5], usize> = perms.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let ds = gen_s5(0);
    assert_eq!(ds.len(), 14_400);
    for (seq, &label) in ds.sequences.iter().zip(&ds.labels) {
        let [a, b, op] = *seq;
        assert_eq!(op, 120);
        let direct: [usize; 5] = std::array::from_fn(|x| perms[a][perms[b][x]]);
        assert_eq!(label, rank[&direct]);
    }
    // The task table is not symmetric.
    let label = |a: usize, b: usize| ds.labels[a * 120 + b];
    assert!((0..120).any(|a| (0..120).any(|b| label(a, b) != label(b, a))));
}
