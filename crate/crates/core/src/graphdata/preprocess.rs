use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Iteratively drops pairs whose user or item has fewer than `k` pairs until
/// every remaining user and item has degree at least `k`. Surviving pairs
/// keep their input order.
pub fn kcore_filter(pairs: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
    let mut alive: Vec<(usize, usize)> = pairs.to_vec();
    loop {
        let mut udeg: HashMap<usize, usize> = HashMap::new();
        let mut ideg: HashMap<usize, usize> = HashMap::new();
        for &(u, i) in &alive {
            *udeg.entry(u).or_default() += 1;
            *ideg.entry(i).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|(u, i)| udeg[u] >= k && ideg[i] >= k);
        if alive.len() == before {
            return alive;
        }
    }
}

/// Fractions used by [`split`]: `train` of each user's pairs go to the
/// training pool, then `valid` of that pool is held out for validation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

/// Minimum history length that gets validation and test pairs.
pub const MIN_SPLIT_DEGREE: usize = 3;

/// Per-user random partition. Each user's pairs are shuffled with a stream
/// keyed by `(seed, user)`, so one user's split does not depend on others.
/// Users are emitted in ascending order.
pub fn split(pairs: &[(usize, usize)], ratios: SplitRatios, seed: u64) -> Splits {
    let mut by_user: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for &(u, i) in pairs {
        let s = *slot.entry(u).or_insert_with(|| {
            by_user.push((u, Vec::new()));
            by_user.len() - 1
        });
        by_user[s].1.push(i);
    }
    by_user.sort_by_key(|e| e.0);

    let mut out = Splits::default();
    for (u, mut items) in by_user {
        let n = items.len();
        if n < MIN_SPLIT_DEGREE {
            out.train.extend(items.into_iter().map(|i| (u, i)));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u as u64);
        items.shuffle(&mut rng);
        let pool = ((ratios.train * n as f64).round() as usize).clamp(1, n - 1);
        let valid = ((ratios.valid * pool as f64).round() as usize).min(pool - 1);
        let (pool_items, test_items) = items.split_at(pool);
        let (train_items, valid_items) = pool_items.split_at(pool - valid);
        out.train.extend(train_items.iter().map(|&i| (u, i)));
        out.valid.extend(valid_items.iter().map(|&i| (u, i)));
        out.test.extend(test_items.iter().map(|&i| (u, i)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kcore_unchanged_when_degrees_suffice() {
        let p = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        assert_eq!(kcore_filter(&p, 2), p);
        assert_eq!(kcore_filter(&p, 1), p);
    }

    #[test]
    fn kcore_star_collapses() {
        let p: Vec<_> = (0..5).map(|i| (0, i)).collect();
        assert!(kcore_filter(&p, 2).is_empty());
    }

    #[test]
    fn kcore_cascades() {
        // Removing item 2 drops user 1 below k, which then drops item 1.
        let p = vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (3, 0)];
        let f = kcore_filter(&p, 2);
        assert!(f.is_empty(), "{f:?}");
    }

    #[test]
    fn split_ten_interactions() {
        let p: Vec<_> = (0..10).map(|i| (0, i)).collect();
        let s = split(&p, SplitRatios::default(), 3);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 1, 2));
    }

    #[test]
    fn split_small_degree_guard() {
        let p = vec![(0, 0), (0, 1)];
        let s = split(&p, SplitRatios::default(), 3);
        assert_eq!(s.train, p);
        assert!(s.valid.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_deterministic_per_seed() {
        let p: Vec<_> = (0..40).map(|i| (i % 4, i)).collect();
        let r = SplitRatios::default();
        assert_eq!(split(&p, r, 9), split(&p, r, 9));
        assert_ne!(split(&p, r, 9), split(&p, r, 10));
    }

    proptest! {
        #[test]
        fn kcore_min_degree(raw in proptest::collection::vec((0usize..12, 0usize..12), 0..120), k in 1usize..5) {
            let mut seen = std::collections::HashSet::new();
            let p: Vec<_> = raw.into_iter().filter(|x| seen.insert(*x)).collect();
            let f = kcore_filter(&p, k);
            let mut ud: HashMap<usize, usize> = HashMap::new();
            let mut id: HashMap<usize, usize> = HashMap::new();
            for &(u, i) in &f {
                *ud.entry(u).or_default() += 1;
                *id.entry(i).or_default() += 1;
            }
            prop_assert!(ud.values().chain(id.values()).all(|&d| d >= k));
            // Maximality: a second pass is a no-op.
            prop_assert_eq!(kcore_filter(&f, k), f);
        }

        #[test]
        fn split_conserves_pairs(raw in proptest::collection::vec((0usize..8, 0usize..30), 0..150), seed in any::<u64>()) {
            let mut seen = std::collections::HashSet::new();
            let p: Vec<_> = raw.into_iter().filter(|x| seen.insert(*x)).collect();
            let s = split(&p, SplitRatios::default(), seed);
            prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), p.len());
            let mut all: Vec<_> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(all, sorted);
        }
    }
}
