//! Triplet splits, entity surface forms, train-graph neighbors and the
//! all-splits filter index.

mod io;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

pub use io::{load_graph, write_texts, write_triplets, SplitPaths};
pub use synth::{make_synthetic_kg, ShiftRule, SynthSpec, SyntheticKg};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: EntityId,
    pub predicate: RelationId,
    pub object: EntityId,
}

impl Triplet {
    pub fn new(subject: u32, predicate: u32, object: u32) -> Self {
        Self { subject: EntityId(subject), predicate: RelationId(predicate), object: EntityId(object) }
    }
}

/// A relation read in one direction; `inverse` means object → subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DirectedRelation {
    pub relation: RelationId,
    pub inverse: bool,
}

impl DirectedRelation {
    pub fn forward(r: RelationId) -> Self {
        Self { relation: r, inverse: false }
    }

    pub fn inverted(r: RelationId) -> Self {
        Self { relation: r, inverse: true }
    }

    /// Row in a doubled table of `relation_count` forward rows followed by
    /// their inverses, or `None` when the relation is outside the table.
    pub fn row(self, relation_count: usize) -> Option<usize> {
        let r = self.relation.index();
        if r >= relation_count {
            return None;
        }
        Some(if self.inverse { r + relation_count } else { r })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(s, r, ?)`
    Tail,
    /// `(?, r, o)`, asked as `(o, r⁻¹, ?)`.
    Head,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Tail => "tail",
            Direction::Head => "head",
        })
    }
}

/// One ranking or training example derived from a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub triplet: Triplet,
    pub direction: Direction,
}

impl Query {
    pub fn source(&self) -> EntityId {
        match self.direction {
            Direction::Tail => self.triplet.subject,
            Direction::Head => self.triplet.object,
        }
    }

    pub fn target(&self) -> EntityId {
        match self.direction {
            Direction::Tail => self.triplet.object,
            Direction::Head => self.triplet.subject,
        }
    }

    pub fn relation(&self) -> DirectedRelation {
        DirectedRelation { relation: self.triplet.predicate, inverse: self.direction == Direction::Head }
    }

    pub fn both(t: Triplet) -> [Query; 2] {
        [Query { triplet: t, direction: Direction::Tail }, Query { triplet: t, direction: Direction::Head }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    Description,
    Name,
}

impl std::str::FromStr for SurfaceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "description" => Ok(SurfaceKind::Description),
            "name" => Ok(SurfaceKind::Name),
            other => Err(format!("unknown surface kind {other:?}")),
        }
    }
}

/// External id ↔ dense index, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Registry {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: u32) -> &str {
        &self.names[i as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Sampled train-graph neighbors of one entity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SupportSet {
    pub pairs: Vec<(DirectedRelation, EntityId)>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Incident train edges per entity; incoming edges carry the inverse flag.
#[derive(Debug, Clone, Default)]
pub struct NeighborIndex {
    adjacency: Vec<Vec<(DirectedRelation, EntityId)>>,
}

impl NeighborIndex {
    pub fn build(entity_count: usize, train: &[Triplet]) -> Self {
        let mut adjacency = vec![Vec::new(); entity_count];
        for t in train {
            adjacency[t.subject.index()].push((DirectedRelation::forward(t.predicate), t.object));
            adjacency[t.object.index()].push((DirectedRelation::inverted(t.predicate), t.subject));
        }
        Self { adjacency }
    }

    pub fn edges(&self, e: EntityId) -> &[(DirectedRelation, EntityId)] {
        &self.adjacency[e.index()]
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency[e.index()].len()
    }

    pub fn total_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Up to `k` incident edges of `entity` drawn uniformly without
    /// replacement, never including the `exclude` edge seen from `entity`.
    pub fn sample<R: Rng + ?Sized>(&self, entity: EntityId, k: usize, exclude: Option<&Triplet>, rng: &mut R) -> SupportSet {
        let banned = |&(rel, e): &(DirectedRelation, EntityId)| match exclude {
            Some(t) => {
                let fwd = !rel.inverse && entity == t.subject && e == t.object;
                let inv = rel.inverse && entity == t.object && e == t.subject;
                rel.relation == t.predicate && (fwd || inv)
            }
            None => false,
        };
        let pool: Vec<(DirectedRelation, EntityId)> = self.edges(entity).iter().copied().filter(|p| !banned(p)).collect();
        if pool.len() <= k {
            return SupportSet { pairs: pool };
        }
        let pairs = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        SupportSet { pairs }
    }
}

/// Known true answers over every split, in both orientations.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    heads: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl FilterIndex {
    pub fn build<'a, I: IntoIterator<Item = &'a Triplet>>(triplets: I) -> Self {
        let mut f = Self::default();
        for t in triplets {
            f.tails.entry((t.subject, t.predicate)).or_default().insert(t.object);
            f.heads.entry((t.object, t.predicate)).or_default().insert(t.subject);
        }
        f
    }

    pub fn true_tails(&self, s: EntityId, r: RelationId) -> Option<&HashSet<EntityId>> {
        self.tails.get(&(s, r))
    }

    pub fn true_heads(&self, o: EntityId, r: RelationId) -> Option<&HashSet<EntityId>> {
        self.heads.get(&(o, r))
    }

    /// Every known answer to `q`, the query's own target included.
    pub fn answers(&self, q: &Query) -> Option<&HashSet<EntityId>> {
        match q.direction {
            Direction::Tail => self.true_tails(q.triplet.subject, q.triplet.predicate),
            Direction::Head => self.true_heads(q.triplet.object, q.triplet.predicate),
        }
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.true_tails(t.subject, t.predicate).is_some_and(|s| s.contains(&t.object))
    }

    pub fn len(&self) -> usize {
        self.tails.values().map(HashSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tails.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadWarnings {
    /// Entities whose surface form fell back to the external id.
    pub missing_surface_forms: usize,
    /// Triplets repeated within a split (kept once).
    pub duplicate_triplets: usize,
    /// Text entries for ids that occur in no triplet.
    pub unused_texts: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraphDataset {
    entities: Registry,
    relations: Registry,
    surface: Vec<String>,
    splits: [Vec<Triplet>; 3],
    train_entities: Vec<EntityId>,
    neighbors: NeighborIndex,
    filter: FilterIndex,
    warnings: LoadWarnings,
}

impl KnowledgeGraphDataset {
    pub fn entities(&self) -> &Registry {
        &self.entities
    }

    pub fn relations(&self) -> &Registry {
        &self.relations
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn surface(&self, e: EntityId) -> &str {
        &self.surface[e.index()]
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surface
    }

    pub fn split(&self, s: Split) -> &[Triplet] {
        &self.splits[s.slot()]
    }

    pub fn neighbors(&self) -> &NeighborIndex {
        &self.neighbors
    }

    pub fn filter(&self) -> &FilterIndex {
        &self.filter
    }

    pub fn warnings(&self) -> &LoadWarnings {
        &self.warnings
    }

    /// Entities incident to at least one train triplet, ascending.
    pub fn train_entities(&self) -> &[EntityId] {
        &self.train_entities
    }

    /// Relations occurring in train. Registration is first-seen with train
    /// read first, so these are exactly ids `0..n`.
    pub fn train_relation_count(&self) -> usize {
        self.split(Split::Train).iter().map(|t| t.predicate.index() + 1).max().unwrap_or(0)
    }

    pub fn neighbor_sample<R: Rng + ?Sized>(&self, entity: EntityId, k: usize, exclude: Option<&Triplet>, rng: &mut R) -> SupportSet {
        self.neighbors.sample(entity, k, exclude, rng)
    }

    /// Dataset with train replaced by `train`; indices are rebuilt, entity
    /// and relation registries kept.
    pub fn with_train(&self, train: Vec<Triplet>) -> Self {
        let mut splits = self.splits.clone();
        splits[0] = train;
        Self::assemble(self.entities.clone(), self.relations.clone(), self.surface.clone(), splits, self.warnings.clone())
    }

    fn assemble(entities: Registry, relations: Registry, surface: Vec<String>, splits: [Vec<Triplet>; 3], warnings: LoadWarnings) -> Self {
        let neighbors = NeighborIndex::build(entities.len(), &splits[0]);
        let filter = FilterIndex::build(splits.iter().flatten());
        let mut seen = vec![false; entities.len()];
        for t in &splits[0] {
            seen[t.subject.index()] = true;
            seen[t.object.index()] = true;
        }
        let train_entities = (0..entities.len() as u32).filter(|&i| seen[i as usize]).map(EntityId).collect();
        Self { entities, relations, surface, splits, train_entities, neighbors, filter, warnings }
    }

    /// Per-split (relations, entities, triplets) counts.
    pub fn stats(&self) -> Vec<SplitStats> {
        Split::ALL
            .iter()
            .map(|&s| {
                let ts = self.split(s);
                let rels: HashSet<RelationId> = ts.iter().map(|t| t.predicate).collect();
                let ents: HashSet<EntityId> = ts.iter().flat_map(|t| [t.subject, t.object]).collect();
                SplitStats { split: s, relations: rels.len(), entities: ents.len(), triplets: ts.len() }
            })
            .collect()
    }

    /// Entities appearing in dev or test but in no train triplet.
    pub fn unseen_eval_entities(&self) -> HashSet<EntityId> {
        let train: HashSet<EntityId> = self.train_entities.iter().copied().collect();
        self.split(Split::Dev)
            .iter()
            .chain(self.split(Split::Test))
            .flat_map(|t| [t.subject, t.object])
            .filter(|e| !train.contains(e))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub relations: usize,
    pub entities: usize,
    pub triplets: usize,
}

/// Collects string triplets in split order and assigns dense ids on first
/// sight. Train must be fed before dev and test.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    entities: Registry,
    relations: Registry,
    splits: [Vec<Triplet>; 3],
    seen: [HashSet<Triplet>; 3],
    texts: HashMap<String, String>,
    duplicates: usize,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, split: Split, subject: &str, relation: &str, object: &str) {
        let s = self.entities.intern(subject);
        let r = self.relations.intern(relation);
        let o = self.entities.intern(object);
        let t = Triplet::new(s, r, o);
        if self.seen[split.slot()].insert(t) {
            self.splits[split.slot()].push(t);
        } else {
            self.duplicates += 1;
        }
    }

    pub fn text(&mut self, entity: &str, text: &str) {
        self.texts.insert(entity.to_string(), text.to_string());
    }

    pub fn build(self) -> KnowledgeGraphDataset {
        let mut missing = 0;
        let surface: Vec<String> = self
            .entities
            .names()
            .iter()
            .map(|id| match self.texts.get(id) {
                Some(t) => t.clone(),
                None => {
                    missing += 1;
                    id.clone()
                }
            })
            .collect();
        let unused = self.texts.keys().filter(|k| self.entities.get(k).is_none()).count();
        let warnings = LoadWarnings { missing_surface_forms: missing, duplicate_triplets: self.duplicates, unused_texts: unused };
        KnowledgeGraphDataset::assemble(self.entities, self.relations, surface, self.splits, warnings)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn star(n: usize) -> KnowledgeGraphDataset {
        let mut b = DatasetBuilder::new();
        for i in 0..n {
            b.add(Split::Train, "hub", "r", &format!("leaf{i}"));
        }
        b.build()
    }

    #[test]
    fn isolated_entity_has_empty_support() {
        let mut b = DatasetBuilder::new();
        b.add(Split::Train, "a", "r", "b");
        b.add(Split::Test, "c", "r", "d");
        let ds = b.build();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ds.neighbor_sample(EntityId(2), 5, None, &mut rng).is_empty());
    }

    #[test]
    fn few_neighbors_returns_all_distinct() {
        let ds = star(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ds.neighbor_sample(EntityId(0), 5, None, &mut rng);
        assert_eq!(s.len(), 3);
        let set: HashSet<_> = s.pairs.iter().collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn incoming_edges_are_inverse_marked() {
        let ds = star(1);
        let e = ds.neighbors().edges(EntityId(1));
        assert_eq!(e, &[(DirectedRelation::inverted(RelationId(0)), EntityId(0))]);
    }

    #[test]
    fn query_edge_is_excluded_from_both_ends() {
        let ds = star(2);
        let t = ds.split(Split::Train)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hub = ds.neighbor_sample(t.subject, 5, Some(&t), &mut rng);
        assert_eq!(hub.pairs, vec![(DirectedRelation::forward(t.predicate), EntityId(2))]);
        let leaf = ds.neighbor_sample(t.object, 5, Some(&t), &mut rng);
        assert!(leaf.is_empty());
    }

    #[test]
    fn sampling_frequency_is_uniform() {
        // Each of n=100 neighbors is chosen with p = k/n per draw; counts over
        // D draws are Binomial(D, p).
        let (n, k, draws) = (100usize, 5usize, 10_000usize);
        let ds = star(n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; n + 1];
        for _ in 0..draws {
            let s = ds.neighbor_sample(EntityId(0), k, None, &mut rng);
            assert_eq!(s.len(), k);
            assert_eq!(s.pairs.iter().collect::<HashSet<_>>().len(), k);
            for (_, e) in s.pairs {
                counts[e.index()] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - mean).abs() <= 4.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn filter_single_triplet_both_orientations() {
        let f = FilterIndex::build(&[Triplet::new(0, 0, 1)]);
        assert_eq!(f.true_tails(EntityId(0), RelationId(0)).unwrap(), &HashSet::from([EntityId(1)]));
        assert_eq!(f.true_heads(EntityId(1), RelationId(0)).unwrap(), &HashSet::from([EntityId(0)]));
    }

    #[test]
    fn duplicates_across_splits_stored_once() {
        let mut b = DatasetBuilder::new();
        b.add(Split::Train, "a", "r", "b");
        b.add(Split::Train, "a", "r", "b");
        b.add(Split::Dev, "a", "r", "b");
        let ds = b.build();
        assert_eq!(ds.split(Split::Train).len(), 1);
        assert_eq!(ds.warnings().duplicate_triplets, 1);
        assert_eq!(ds.filter().len(), 1);
    }

    #[test]
    fn missing_text_falls_back_to_id() {
        let mut b = DatasetBuilder::new();
        b.add(Split::Train, "Q1", "P1", "Q2");
        b.text("Q1", "first entity");
        b.text("Q9", "never used");
        let ds = b.build();
        assert_eq!(ds.surface(EntityId(0)), "first entity");
        assert_eq!(ds.surface(EntityId(1)), "Q2");
        assert_eq!(ds.warnings().missing_surface_forms, 1);
        assert_eq!(ds.warnings().unused_texts, 1);
    }

    #[test]
    fn relation_rows_double_and_bound() {
        let r = RelationId(2);
        assert_eq!(DirectedRelation::forward(r).row(5), Some(2));
        assert_eq!(DirectedRelation::inverted(r).row(5), Some(7));
        assert_eq!(DirectedRelation::forward(RelationId(5)).row(5), None);
    }
}
