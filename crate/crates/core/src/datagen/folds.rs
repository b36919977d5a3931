use rand::seq::SliceRandom;

use crate::seeding;

/// Indices into the corpus for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FoldError {
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("cannot split {items} items into {k} folds")]
    TooManyFolds { k: usize, items: usize },
}

/// Shuffles the corpus indices with `seed` and cuts them into `k` contiguous
/// test blocks. The first `len % k` blocks get one extra item.
pub fn split_folds<T>(corpus: &[T], k: usize, seed: u64) -> Result<Vec<Fold>, FoldError> {
    let n = corpus.len();
    if k < 2 {
        return Err(FoldError::TooFewFolds(k));
    }
    if k > n {
        return Err(FoldError::TooManyFolds { k, items: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng(seeding::derive(seed, 0xF01D)));

    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}
