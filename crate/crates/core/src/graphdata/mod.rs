//! Interaction and knowledge-graph data: loading, preprocessing, splits,
//! adjacency construction, negative sampling and a synthetic generator.
//!
//! Users, items and KG entities share one node index space. Users occupy
//! `[0, U)`; entity `e` is node `U + e`. Items are the entities that appear in
//! interactions and always occupy entity indices `[0, I)`, so item `i` is
//! entity `i` and node `U + i`.

mod adjacency;
mod io;
mod preprocess;
mod sampling;
mod synth;
mod vocab;

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};

pub use adjacency::{build_adjacency, build_adjacency_from_edges};
pub use io::{load_interactions, load_triples, TripleLoadOptions};
pub use preprocess::{kcore_filter, split, SplitRatios, Splits};
pub use sampling::{sample_negatives, BprTriple};
pub use synth::{synth_generate, SynthSpec};
pub use vocab::Vocab;

/// A KG fact over entity indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Aligned interactions and triples before splitting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawGraph {
    pub users: Vocab,
    pub entities: Vocab,
    pub relations: Vocab,
    pub num_items: usize,
    /// `(user, item)` pairs, deduplicated.
    pub interactions: Vec<(usize, usize)>,
    pub triples: Vec<Triple>,
}

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const USERS_VOCAB: &str = "users.vocab";
pub const ENTITIES_VOCAB: &str = "entities.vocab";
pub const RELATIONS_VOCAB: &str = "relations.vocab";

impl RawGraph {
    /// Loads `interactions.tsv` and `triples.tsv` from `dir`. Vocabulary
    /// sidecars, when present, fix the index assignment; otherwise indices
    /// follow first appearance. In strict mode every relation must be listed
    /// in `relations.vocab`.
    pub fn read_dir(dir: &std::path::Path, strict: bool) -> Result<Self> {
        let sidecar = |name: &str| -> Result<Vocab> {
            let p = dir.join(name);
            if p.exists() {
                Vocab::read_sidecar(&p)
            } else {
                Ok(Vocab::default())
            }
        };
        let mut users = sidecar(USERS_VOCAB)?;
        let mut entities = sidecar(ENTITIES_VOCAB)?;
        let mut relations = sidecar(RELATIONS_VOCAB)?;
        if strict && relations.is_empty() {
            return Err(Error::Config(format!(
                "strict mode needs {}",
                dir.join(RELATIONS_VOCAB).display()
            )));
        }
        let interactions =
            load_interactions(&dir.join(INTERACTIONS_FILE), &mut users, &mut entities)?;
        let triples = load_triples(
            &dir.join(TRIPLES_FILE),
            &mut entities,
            &mut relations,
            TripleLoadOptions { strict },
        )?;
        let mut raw = RawGraph {
            users,
            entities,
            relations,
            num_items: 0,
            interactions,
            triples,
        };
        raw.align_items();
        Ok(raw)
    }

    /// Writes the TSV files and vocabulary sidecars into `dir`.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(INTERACTIONS_FILE))?);
        for &(u, i) in &self.interactions {
            writeln!(out, "{}\t{}", self.users.name(u), self.entities.name(i))?;
        }
        out.flush()?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(TRIPLES_FILE))?);
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entities.name(t.head),
                self.relations.name(t.relation),
                self.entities.name(t.tail)
            )?;
        }
        out.flush()?;
        self.users.write_sidecar(&dir.join(USERS_VOCAB))?;
        self.entities.write_sidecar(&dir.join(ENTITIES_VOCAB))?;
        self.relations.write_sidecar(&dir.join(RELATIONS_VOCAB))?;
        Ok(())
    }

    /// Sets `num_items` to one past the largest entity index seen in
    /// interactions. Loading interactions before triples places every
    /// interacted entity in that prefix; entities inside it without
    /// interactions are cold items.
    pub fn align_items(&mut self) {
        self.num_items = self
            .interactions
            .iter()
            .map(|&(_, i)| i + 1)
            .max()
            .unwrap_or(0);
    }
}

/// Split dataset over the unified index space.
#[derive(Clone, Debug, PartialEq)]
pub struct KgDataset {
    pub users: Vocab,
    pub entities: Vocab,
    pub relations: Vocab,
    pub num_items: usize,
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub triples: Vec<Triple>,
}

impl KgDataset {
    /// Splits the interactions of `raw` per user; see [`split`].
    pub fn from_raw(raw: RawGraph, ratios: SplitRatios, seed: u64) -> Result<Self> {
        let Splits { train, valid, test } = split(&raw.interactions, ratios, seed);
        let ds = Self {
            users: raw.users,
            entities: raw.entities,
            relations: raw.relations,
            num_items: raw.num_items,
            train,
            valid,
            test,
            triples: raw.triples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Size of the unified index space, `U + N_e`.
    pub fn num_nodes(&self) -> usize {
        self.num_users() + self.num_entities()
    }

    #[inline]
    pub fn user_node(&self, user: usize) -> usize {
        user
    }

    #[inline]
    pub fn item_node(&self, item: usize) -> usize {
        self.num_users() + item
    }

    #[inline]
    pub fn entity_node(&self, entity: usize) -> usize {
        self.num_users() + entity
    }

    /// Sorted train items of every user.
    pub fn train_positives(&self) -> Vec<Vec<usize>> {
        group_by_user(self.num_users(), &self.train)
    }

    pub fn test_positives(&self) -> Vec<Vec<usize>> {
        group_by_user(self.num_users(), &self.test)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dataset invariant violated: {m}")));
        if self.num_items > self.num_entities() {
            return bad("more items than entities".into());
        }
        let mut seen = HashSet::new();
        for (name, pairs) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for &(u, i) in pairs {
                if u >= self.num_users() || i >= self.num_items {
                    return bad(format!("{name} pair ({u}, {i}) out of range"));
                }
                if !seen.insert((u, i)) {
                    return bad(format!("pair ({u}, {i}) appears twice across splits"));
                }
            }
        }
        for t in &self.triples {
            if t.head >= self.num_entities()
                || t.tail >= self.num_entities()
                || t.relation >= self.num_relations()
            {
                return bad(format!("triple {t:?} out of range"));
            }
        }
        Ok(())
    }
}

fn group_by_user(num_users: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}
