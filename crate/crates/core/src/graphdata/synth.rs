use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{KgDataset, RawGraph, SplitRatios, Triple, Vocab};
use crate::error::{Error, Result};

/// Parameters of the synthetic generator.
///
/// Users, items and attribute entities are assigned round-robin to
/// `groups` blocks. Each interaction picks an item from the user's own block
/// with probability `in_group`, otherwise from all items; within the chosen
/// pool items are weighted by a Zipf-like popularity `rank^-popularity_skew`.
/// Each item gets `triples_per_item` links to attribute entities, which come
/// from the item's block with probability `attr_in_group`. An attribute's
/// relation type is fixed by its index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    /// Total entity count, items included.
    pub entities: usize,
    pub relations: usize,
    pub interactions_per_user: usize,
    pub groups: usize,
    pub in_group: f64,
    pub triples_per_item: usize,
    pub attr_in_group: f64,
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 300,
            entities: 1000,
            relations: 5,
            interactions_per_user: 20,
            groups: 10,
            in_group: 0.8,
            triples_per_item: 4,
            attr_in_group: 0.9,
            popularity_skew: 0.6,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    /// A reduced configuration for fast tests.
    pub fn small() -> Self {
        Self {
            users: 60,
            items: 40,
            entities: 100,
            relations: 3,
            interactions_per_user: 8,
            groups: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.users == 0 || self.items == 0 {
            return bad("users and items must be positive".into());
        }
        if self.entities < self.items {
            return bad(format!(
                "entities ({}) < items ({})",
                self.entities, self.items
            ));
        }
        if self.interactions_per_user == 0 {
            return bad("interactions_per_user must be positive".into());
        }
        if self.interactions_per_user > self.items {
            return bad(format!(
                "density > 1: {} interactions per user over {} items",
                self.interactions_per_user, self.items
            ));
        }
        if self.groups == 0 || self.groups > self.items {
            return bad(format!(
                "groups must lie in [1, items], got {}",
                self.groups
            ));
        }
        for (name, p) in [
            ("in_group", self.in_group),
            ("attr_in_group", self.attr_in_group),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite()) {
            return bad(format!(
                "popularity_skew must be >= 0, got {}",
                self.popularity_skew
            ));
        }
        if self.triples_per_item > 0 {
            let attrs = self.entities - self.items;
            if attrs < self.groups {
                return bad(format!(
                    "need at least one attribute entity per group, got {attrs}"
                ));
            }
            if self.relations == 0 {
                return bad("relations must be positive when triples are generated".into());
            }
        }
        Ok(())
    }

    /// Generates interactions and triples without splitting.
    pub fn generate_raw(&self) -> Result<RawGraph> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let g = self.groups;

        let mut rank: Vec<usize> = (0..self.items).collect();
        rank.shuffle(&mut rng);
        let weight: Vec<f64> = rank
            .iter()
            .map(|&r| ((r + 1) as f64).powf(-self.popularity_skew))
            .collect();
        let members: Vec<Vec<usize>> = (0..g)
            .map(|k| (k..self.items).step_by(g).collect())
            .collect();
        let pick = |pool: &[usize]| {
            WeightedIndex::new(pool.iter().map(|&i| weight[i])).expect("positive weights")
        };
        let group_pick: Vec<WeightedIndex<f64>> = members.iter().map(|m| pick(m)).collect();
        let all: Vec<usize> = (0..self.items).collect();
        let global_pick = pick(&all);

        let mut interactions = Vec::with_capacity(self.users * self.interactions_per_user);
        for u in 0..self.users {
            let own = u % g;
            let mut chosen = HashSet::new();
            let mut misses = 0usize;
            while chosen.len() < self.interactions_per_user {
                let item = if misses > 64 * self.items {
                    // Saturated pools: fall back to any unchosen item.
                    let rest: Vec<usize> = all
                        .iter()
                        .copied()
                        .filter(|i| !chosen.contains(i))
                        .collect();
                    rest[rng.random_range(0..rest.len())]
                } else if rng.random::<f64>() < self.in_group {
                    members[own][group_pick[own].sample(&mut rng)]
                } else {
                    global_pick.sample(&mut rng)
                };
                if chosen.insert(item) {
                    interactions.push((u, item));
                } else {
                    misses += 1;
                }
            }
        }

        let attrs = self.entities - self.items;
        let attr_members: Vec<Vec<usize>> =
            (0..g).map(|k| (k..attrs).step_by(g).collect()).collect();
        let mut triples = Vec::new();
        let mut seen = HashSet::new();
        for item in 0..self.items {
            for _ in 0..self.triples_per_item {
                let a = if rng.random::<f64>() < self.attr_in_group {
                    let m = &attr_members[item % g];
                    m[rng.random_range(0..m.len())]
                } else {
                    rng.random_range(0..attrs)
                };
                let t = Triple {
                    head: item,
                    relation: a % self.relations,
                    tail: self.items + a,
                };
                if seen.insert(t) {
                    triples.push(t);
                }
            }
        }

        let mut raw = RawGraph {
            users: Vocab::from_names((0..self.users).map(|u| format!("u{u}"))),
            entities: Vocab::from_names(
                (0..self.items)
                    .map(|i| format!("i{i}"))
                    .chain((0..attrs).map(|a| format!("e{a}"))),
            ),
            relations: Vocab::from_names((0..self.relations).map(|r| format!("r{r}"))),
            num_items: self.items,
            interactions,
            triples,
        };
        raw.align_items();
        Ok(raw)
    }
}

/// Generates and splits a synthetic dataset; the split reuses `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<KgDataset> {
    KgDataset::from_raw(spec.generate_raw()?, SplitRatios::default(), spec.seed)
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users={}", self.users)?;
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "entities={}", self.entities)?;
        writeln!(f, "relations={}", self.relations)?;
        writeln!(f, "interactions_per_user={}", self.interactions_per_user)?;
        writeln!(f, "groups={}", self.groups)?;
        writeln!(f, "in_group={}", self.in_group)?;
        writeln!(f, "triples_per_item={}", self.triples_per_item)?;
        writeln!(f, "attr_in_group={}", self.attr_in_group)?;
        writeln!(f, "popularity_skew={}", self.popularity_skew)?;
        writeln!(f, "seed={}", self.seed)
    }
}

/// Parses `key=value` pairs separated by newlines or commas, starting from
/// the defaults. `#` begins a comment.
impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for raw in s
            .lines()
            .flat_map(|l| l.split('#').next().unwrap_or("").split(','))
        {
            let entry = raw.trim();
            if entry.is_empty() {
                continue;
            }
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {entry:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("bad value for {k}: {v:?}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "users" => spec.users = int()?,
                "items" => spec.items = int()?,
                "entities" => spec.entities = int()?,
                "relations" => spec.relations = int()?,
                "interactions_per_user" => spec.interactions_per_user = int()?,
                "groups" => spec.groups = int()?,
                "in_group" => spec.in_group = real()?,
                "triples_per_item" => spec.triples_per_item = int()?,
                "attr_in_group" => spec.attr_in_group = real()?,
                "popularity_skew" => spec.popularity_skew = real()?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown synthetic spec key {k:?}"))),
            }
        }
        Ok(spec)
    }
}
