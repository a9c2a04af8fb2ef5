//! Algorithmic datasets: modular addition and S5 permutation composition.
//!
//! Every dataset holds the exhaustive table of `(a, b)` pairs formatted as
//! `[a, b, =]`, with a seeded train/test split.

use std::io::Write;

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of the table used for training.
pub const TRAIN_FRACTION: f64 = 0.3;

const S5_DEGREE: usize = 5;
pub const S5_ORDER: usize = 120;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("modulus must be at least 2, got {0}")]
    Modulus(usize),
    #[error("not a permutation of 0..5: {0:?}")]
    Permutation(Vec<usize>),
    #[error("permutation index {0} out of range 0..120")]
    PermIndex(usize),
    #[error("train fraction {0} must lie in (0, 1)")]
    Fraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    ModAdd { p: usize },
    S5Compose,
}

impl Task {
    /// Number of answer classes; the operator token id equals this value.
    pub fn n_classes(&self) -> usize {
        match self {
            Task::ModAdd { p } => *p,
            Task::S5Compose => S5_ORDER,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_classes() + 1
    }

    pub fn equals_token(&self) -> usize {
        self.n_classes()
    }

    pub fn generate(&self, split_seed: u64) -> Result<TaskDataset, TaskError> {
        match self {
            Task::ModAdd { p } => gen_mod_add(*p, split_seed),
            Task::S5Compose => Ok(gen_s5(split_seed)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub vocab_size: usize,
    pub sequences: Vec<[usize; 3]>,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub split_seed: u64,
    pub train_fraction: f64,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_idx,
            Split::Test => &self.test_idx,
        }
    }

    /// Flattened token ids and labels for a list of example indices.
    pub fn batch(&self, idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let tokens = idx.iter().flat_map(|&i| self.sequences[i]).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (tokens, labels)
    }

    /// Writes `a,b,label,split` rows in table order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut split = vec!["test"; self.len()];
        for &i in &self.train_idx {
            split[i] = "train";
        }
        writeln!(out, "a,b,label,split")?;
        for (i, seq) in self.sequences.iter().enumerate() {
            writeln!(out, "{},{},{},{}", seq[0], seq[1], self.labels[i], split[i])?;
        }
        Ok(())
    }
}

/// Deterministic train/test split.
///
/// SplitMix64 seeded with `seed` drives a Fisher–Yates shuffle
/// (`for i in (1..n).rev() { swap(i, next_u64() % (i + 1)) }`); the first
/// `floor(fraction · n)` shuffled indices form the training set. Both index
/// lists are returned in ascending order.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TaskError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TaskError::Fraction(fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let n_train = (n as f64 * fraction).floor() as usize;
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// All `p²` pairs with label `(a + b) mod p`; the operator token is `p`.
pub fn gen_mod_add(p: usize, split_seed: u64) -> Result<TaskDataset, TaskError> {
    if p < 2 {
        return Err(TaskError::Modulus(p));
    }
    let mut sequences = Vec::with_capacity(p * p);
    let mut labels = Vec::with_capacity(p * p);
    for a in 0..p {
        for b in 0..p {
            sequences.push([a, b, p]);
            labels.push((a + b) % p);
        }
    }
    let (train_idx, test_idx) = split_indices(sequences.len(), TRAIN_FRACTION, split_seed)?;
    Ok(TaskDataset {
        task: Task::ModAdd { p },
        vocab_size: p + 1,
        sequences,
        labels,
        train_idx,
        test_idx,
        split_seed,
        train_fraction: TRAIN_FRACTION,
    })
}

/// All `120²` compositions `a ∘ b` with `(a ∘ b)(x) = a(b(x))`.
///
/// Permutations are numbered in lexicographic order; the operator token is 120.
pub fn gen_s5(split_seed: u64) -> TaskDataset {
    let perms: Vec<[usize; S5_DEGREE]> = (0..S5_ORDER)
        .map(|i| index_perm(i).expect("index in range"))
        .collect();
    let mut sequences = Vec::with_capacity(S5_ORDER * S5_ORDER);
    let mut labels = Vec::with_capacity(S5_ORDER * S5_ORDER);
    for (a, pa) in perms.iter().enumerate() {
        for (b, pb) in perms.iter().enumerate() {
            sequences.push([a, b, S5_ORDER]);
            labels.push(perm_index(&compose(pa, pb)).expect("composition is a permutation"));
        }
    }
    let (train_idx, test_idx) =
        split_indices(sequences.len(), TRAIN_FRACTION, split_seed).expect("constant fraction");
    TaskDataset {
        task: Task::S5Compose,
        vocab_size: S5_ORDER + 1,
        sequences,
        labels,
        train_idx,
        test_idx,
        split_seed,
        train_fraction: TRAIN_FRACTION,
    }
}

/// `(a ∘ b)(x) = a(b(x))`.
pub fn compose(a: &[usize; S5_DEGREE], b: &[usize; S5_DEGREE]) -> [usize; S5_DEGREE] {
    std::array::from_fn(|x| a[b[x]])
}

/// Lexicographic rank (Lehmer code) of a permutation of `0..5`.
pub fn perm_index(perm: &[usize]) -> Result<usize, TaskError> {
    let mut seen = [false; S5_DEGREE];
    if perm.len() != S5_DEGREE {
        return Err(TaskError::Permutation(perm.to_vec()));
    }
    for &v in perm {
        if v >= S5_DEGREE || seen[v] {
            return Err(TaskError::Permutation(perm.to_vec()));
        }
        seen[v] = true;
    }
    let mut index = 0;
    for i in 0..S5_DEGREE {
        let smaller_after = perm[i + 1..].iter().filter(|&&v| v < perm[i]).count();
        index = index * (S5_DEGREE - i) + smaller_after;
    }
    Ok(index)
}

/// Inverse of [`perm_index`].
pub fn index_perm(mut index: usize) -> Result<[usize; S5_DEGREE], TaskError> {
    if index >= S5_ORDER {
        return Err(TaskError::PermIndex(index));
    }
    let mut digits = [0usize; S5_DEGREE];
    for i in (0..S5_DEGREE).rev() {
        let radix = S5_DEGREE - i;
        digits[i] = index % radix;
        index /= radix;
    }
    let mut pool: Vec<usize> = (0..S5_DEGREE).collect();
    Ok(std::array::from_fn(|i| pool.remove(digits[i])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mod_add_sizes_and_labels() {
        let ds = gen_mod_add(113, 0).unwrap();
        assert_eq!(ds.len(), 12_769);
        assert_eq!(ds.train_idx.len(), 3_830);
        assert_eq!(ds.test_idx.len(), 8_939);
        assert_eq!(ds.vocab_size, 114);
        assert_eq!(ds.labels[0], 0);
        assert_eq!(ds.labels[112 * 113 + 112], 111);
        assert_eq!(ds.sequences[5], [0, 5, 113]);
    }

    #[test]
    fn mod_add_rejects_tiny_modulus() {
        assert_eq!(gen_mod_add(1, 0).unwrap_err(), TaskError::Modulus(1));
    }

    #[test]
    fn s5_sizes() {
        let ds = gen_s5(3);
        assert_eq!(ds.len(), 14_400);
        assert_eq!(ds.train_idx.len(), 4_320);
        assert_eq!(ds.test_idx.len(), 10_080);
        assert_eq!(ds.vocab_size, 121);
        assert!(ds.labels.iter().all(|&l| l < 120));
    }

    #[test]
    fn lexicographic_ranks() {
        assert_eq!(perm_index(&[0, 1, 2, 3, 4]).unwrap(), 0);
        assert_eq!(perm_index(&[0, 1, 2, 4, 3]).unwrap(), 1);
        assert_eq!(perm_index(&[4, 3, 2, 1, 0]).unwrap(), 119);
        assert_eq!(index_perm(1).unwrap(), [0, 1, 2, 4, 3]);
    }

    #[test]
    fn malformed_permutations() {
        assert!(perm_index(&[0, 1, 2, 3]).is_err());
        assert!(perm_index(&[0, 1, 2, 3, 3]).is_err());
        assert!(perm_index(&[0, 1, 2, 3, 5]).is_err());
        assert_eq!(index_perm(120).unwrap_err(), TaskError::PermIndex(120));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_indices(10, 0.0, 1).is_err());
        assert!(split_indices(10, 1.0, 1).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let ds = gen_mod_add(3, 7).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "a,b,label,split");
        assert_eq!(lines.len(), 10);
        assert!(lines[9].starts_with("2,2,1,"));
        let n_train = lines.iter().filter(|l| l.ends_with(",train")).count();
        assert_eq!(n_train, 2);
    }
}
