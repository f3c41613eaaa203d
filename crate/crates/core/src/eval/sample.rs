//! Seeded subset sampling that reproduces across platforms and languages.
//!
//! Generator: SplitMix64 (increment `0x9E3779B97F4A7C15`, mix constants
//! `0xBF58476D1CE4E5B9` / `0x94D049BB133111EB`, shifts 30/27/31). Bounded draws
//! reject values below `2^64 mod n`. Selection is a partial Fisher-Yates
//! shuffle of record indices; the chosen records are returned in their
//! original order.

use thiserror::Error;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % n;
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("cannot sample {requested} of {available} records")]
pub struct SampleError {
    pub requested: usize,
    pub available: usize,
}

/// Indices of an `n`-element subset of `0..len`, ascending.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, SampleError> {
    if n > len {
        return Err(SampleError { requested: n, available: len });
    }
    let mut rng = SplitMix64::new(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.below((len - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_train_subset<T: Clone>(records: &[T], n: usize, seed: u64) -> Result<Vec<T>, SampleError> {
    Ok(sample_indices(records.len(), n, seed)?.into_iter().map(|i| records[i].clone()).collect())
}
