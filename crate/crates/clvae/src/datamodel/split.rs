//! Deterministic train/val/test partitioning.

use super::{DataError, DataResult, ImageSample, Split};
use num_rational::Ratio;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Exact split fractions plus the shuffle seed.
///
/// Fractions are rationals so that partition sizes `⌊n·frac⌋` are computed
/// exactly (a 70:20:10 split of 110 samples must give 77/22/11, which float
/// fractions cannot guarantee).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Ratio<u64>,
    pub val: Ratio<u64>,
    pub test: Ratio<u64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: Ratio<u64>, val: Ratio<u64>, test: Ratio<u64>, seed: u64) -> DataResult<Self> {
        if train + val + test != Ratio::from_integer(1) {
            return Err(DataError::BadSplitSpec);
        }
        Ok(Self {
            train,
            val,
            test,
            seed,
        })
    }

    /// Builds a spec from integer weights, e.g. `(70, 20, 10)`.
    pub fn from_weights(train: u64, val: u64, test: u64, seed: u64) -> DataResult<Self> {
        let total = train + val + test;
        if total == 0 {
            return Err(DataError::BadSplitSpec);
        }
        Self::new(
            Ratio::new(train, total),
            Ratio::new(val, total),
            Ratio::new(test, total),
            seed,
        )
    }

    /// Partition sizes for `n` samples: `⌊n·frac⌋` per split, remainder
    /// assigned train → val → test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: Ratio<u64>| ((n as u64 * r.numer()) / r.denom()) as usize;
        let (mut tr, mut va, mut te) = (floor(self.train), floor(self.val), floor(self.test));
        let mut rest = n - tr - va - te;
        for slot in [&mut tr, &mut va, &mut te] {
            if rest == 0 {
                break;
            }
            *slot += 1;
            rest -= 1;
        }
        (tr, va, te)
    }
}

/// Result of [`split_dataset`]: disjoint partitions whose union is the input.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

/// Shuffles samples with the spec seed and partitions them, stamping each
/// sample's `split` field. Deterministic given the seed.
pub fn split_dataset(samples: Vec<ImageSample>, spec: &SplitSpec) -> DataResult<DatasetSplits> {
    if samples.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let (n_train, n_val, _) = spec.sizes(n);
    let mut slots: Vec<Option<ImageSample>> = samples.into_iter().map(Some).collect();
    let mut out = DatasetSplits::default();
    for (pos, idx) in order.into_iter().enumerate() {
        let mut s = slots[idx].take().expect("each index visited once");
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        s.split = split;
        match split {
            Split::Train => out.train.push(s),
            Split::Val => out.val.push(s),
            Split::Test => out.test.push(s),
        }
    }
    Ok(out)
}
