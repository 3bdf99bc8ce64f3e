use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Pairs every `(user, pos)` with an item drawn uniformly from the items the
/// user has no train interaction with. `positives[u]` must be sorted.
pub fn sample_negatives<R: Rng + ?Sized>(
    pairs: &[(usize, usize)],
    num_items: usize,
    positives: &[Vec<usize>],
    rng: &mut R,
) -> Result<Vec<BprTriple>> {
    pairs
        .iter()
        .map(|&(user, pos)| {
            let own = &positives[user];
            if own.len() >= num_items {
                return Err(Error::Sampling(user));
            }
            loop {
                let neg = rng.random_range(0..num_items);
                if own.binary_search(&neg).is_err() {
                    return Ok(BprTriple { user, pos, neg });
                }
            }
        })
        .collect()
}
