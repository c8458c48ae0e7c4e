//! Attribute-grid knowledge graphs whose relations are rules over the
//! entities' surface tokens.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use super::{write_texts, write_triplets, DatasetBuilder, EntityId, GraphError, KnowledgeGraphDataset, Split, SplitPaths, SurfaceKind};
use crate::rng::substream;

const FAMILIES: [(&str, [&str; 10]); 6] = [
    ("color", ["red", "green", "blue", "amber", "violet", "teal", "ochre", "ivory", "coral", "slate"]),
    ("shape", ["square", "circle", "spiral", "cone", "prism", "torus", "wedge", "cube", "arch", "star"]),
    ("size", ["tiny", "small", "medium", "large", "huge", "vast", "slim", "broad", "tall", "short"]),
    ("texture", ["smooth", "rough", "fuzzy", "glossy", "grainy", "silky", "bumpy", "matte", "waxy", "sandy"]),
    ("material", ["wood", "iron", "glass", "stone", "clay", "paper", "wool", "brass", "bone", "silk"]),
    ("region", ["north", "south", "east", "west", "coast", "delta", "ridge", "plain", "marsh", "dune"]),
];

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze", "bo", "di", "fa", "gu", "he", "jo"];

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub entities: usize,
    /// Number of values in each attribute family; the grid has their product
    /// of cells and each entity occupies one.
    pub values_per_family: Vec<usize>,
    /// Relation count. Relation `i` shifts family `i % F` by `1 + i / F`.
    pub relations: usize,
    /// Requested triplets; 0 keeps every rule instance.
    pub triplets: usize,
    /// Fraction of entities held out of train entirely. 0 gives a
    /// transductive split governed by the two fractions below.
    pub inductive_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            entities: 200,
            values_per_family: vec![5, 5, 8],
            relations: 5,
            triplets: 0,
            inductive_fraction: 0.0,
            dev_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// `relation` maps an entity to the one whose `family` value is `offset`
/// steps further (cyclically), all other attributes equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShiftRule {
    pub relation: String,
    pub family: String,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticKg {
    /// Loaded with description surface forms.
    pub dataset: KnowledgeGraphDataset,
    /// Registry order.
    pub descriptions: Vec<String>,
    pub names: Vec<String>,
    pub rules: Vec<ShiftRule>,
    /// Family name and its value words, in grid order.
    pub families: Vec<(String, Vec<String>)>,
    pub held_out: Vec<EntityId>,
}

pub fn family_values(family: usize, count: usize) -> (String, Vec<String>) {
    let (name, words) = FAMILIES[family];
    let values = (0..count)
        .map(|v| if v < words.len() { words[v].to_string() } else { format!("{name}{v}") })
        .collect();
    (name.to_string(), values)
}

fn entity_name(rng: &mut impl Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let s: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect();
        if taken.insert(s.clone()) {
            return s;
        }
    }
}

fn check(spec: &SynthSpec) -> Result<usize, GraphError> {
    let err = |m: String| Err(GraphError::Spec(m));
    if spec.entities == 0 || spec.relations == 0 || spec.values_per_family.is_empty() {
        return err("entities, relations and families must be positive".into());
    }
    if spec.values_per_family.len() > FAMILIES.len() {
        return err(format!("at most {} attribute families", FAMILIES.len()));
    }
    if spec.values_per_family.iter().any(|&v| v < 2) {
        return err("every family needs at least 2 values".into());
    }
    if spec.inductive_fraction > 0.0 && spec.entities < 2 {
        return err("an inductive split needs at least 2 entities".into());
    }
    let grid: usize = spec.values_per_family.iter().product();
    if spec.entities > grid {
        return err(format!("{} entities do not fit a grid of {grid} attribute combinations", spec.entities));
    }
    let f = spec.values_per_family.len();
    for r in 0..spec.relations {
        let (fam, off) = (r % f, 1 + r / f);
        if off % spec.values_per_family[fam] == 0 {
            return err(format!("relation {r} would shift family {fam} by a multiple of its {} values", spec.values_per_family[fam]));
        }
    }
    for (name, x) in [("inductive", spec.inductive_fraction), ("dev", spec.dev_fraction), ("test", spec.test_fraction)] {
        if !(0.0..1.0).contains(&x) {
            return err(format!("{name} fraction {x} outside [0, 1)"));
        }
    }
    Ok(grid)
}

/// Deterministic in `(spec, seed)`.
pub fn make_synthetic_kg(spec: &SynthSpec, seed: u64) -> Result<SyntheticKg, GraphError> {
    let grid = check(spec)?;
    let mut rng = substream(seed, "synthetic-kg");
    let vals = &spec.values_per_family;
    let nf = vals.len();

    let mut cells: Vec<usize> = index::sample(&mut rng, grid, spec.entities).into_vec();
    cells.sort_unstable();
    let decode = |mut c: usize| -> Vec<usize> {
        let mut t = vec![0; nf];
        for f in (0..nf).rev() {
            t[f] = c % vals[f];
            c /= vals[f];
        }
        t
    };
    let encode = |t: &[usize]| t.iter().zip(vals).fold(0, |acc, (&x, &v)| acc * v + x);
    let tuples: Vec<Vec<usize>> = cells.iter().map(|&c| decode(c)).collect();
    let by_cell: HashMap<usize, usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let families: Vec<(String, Vec<String>)> = vals.iter().enumerate().map(|(f, &n)| family_values(f, n)).collect();
    let rules: Vec<ShiftRule> = (0..spec.relations)
        .map(|r| {
            let (fam, off) = (r % nf, 1 + r / nf);
            ShiftRule { relation: format!("shift_{}_{off}", families[fam].0), family: families[fam].0.clone(), offset: off }
        })
        .collect();

    let mut candidates = Vec::new();
    for r in 0..spec.relations {
        let (fam, off) = (r % nf, 1 + r / nf);
        for (i, t) in tuples.iter().enumerate() {
            let mut u = t.clone();
            u[fam] = (u[fam] + off) % vals[fam];
            if let Some(&j) = by_cell.get(&encode(&u)) {
                candidates.push((i, r, j));
            }
        }
    }
    if spec.triplets > candidates.len() {
        return Err(GraphError::Spec(format!(
            "{} triplets requested but the rules yield only {} over {} entities",
            spec.triplets,
            candidates.len(),
            spec.entities
        )));
    }
    if spec.triplets > 0 {
        let mut keep = index::sample(&mut rng, candidates.len(), spec.triplets).into_vec();
        keep.sort_unstable();
        candidates = keep.into_iter().map(|i| candidates[i]).collect();
    }
    candidates.shuffle(&mut rng);

    let (train, dev, test, held) = if spec.inductive_fraction > 0.0 {
        let n_held = ((spec.inductive_fraction * spec.entities as f64).round() as usize).clamp(1, spec.entities - 1);
        let held: HashSet<usize> = index::sample(&mut rng, spec.entities, n_held).into_iter().collect();
        let (eval, train): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|&(s, _, o)| held.contains(&s) || held.contains(&o));
        let half = eval.len() / 2;
        let (dev, test) = eval.split_at(half);
        (train, dev.to_vec(), test.to_vec(), held)
    } else {
        let n = candidates.len();
        let want_dev = (spec.dev_fraction * n as f64).round() as usize;
        let want_test = (spec.test_fraction * n as f64).round() as usize;
        let mut degree = vec![0usize; spec.entities];
        let mut rel_count = vec![0usize; spec.relations];
        for &(s, r, o) in &candidates {
            degree[s] += 1;
            degree[o] += 1;
            rel_count[r] += 1;
        }
        let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for c @ (s, r, o) in candidates {
            let removable = degree[s] > 1 && degree[o] > 1 && rel_count[r] > 1;
            if removable && (dev.len() < want_dev || test.len() < want_test) {
                degree[s] -= 1;
                degree[o] -= 1;
                rel_count[r] -= 1;
                if dev.len() < want_dev {
                    dev.push(c);
                } else {
                    test.push(c);
                }
            } else {
                train.push(c);
            }
        }
        (train, dev, test, HashSet::new())
    };

    let ext = |i: usize| format!("E{i:04}");
    let mut b = DatasetBuilder::new();
    for (split, ts) in [(Split::Train, &train), (Split::Dev, &dev), (Split::Test, &test)] {
        for &(s, r, o) in ts.iter() {
            b.add(split, &ext(s), &rules[r].relation, &ext(o));
        }
    }
    let describe = |t: &[usize]| -> String {
        let parts: Vec<String> = t.iter().enumerate().map(|(f, &v)| format!("{} {}", families[f].0, families[f].1[v])).collect();
        parts.join(" ")
    };
    let mut taken = HashSet::new();
    let grid_names: Vec<String> = (0..spec.entities).map(|_| entity_name(&mut rng, &mut taken)).collect();
    let used: HashSet<usize> = train.iter().chain(&dev).chain(&test).flat_map(|&(s, _, o)| [s, o]).collect();
    for i in 0..spec.entities {
        if used.contains(&i) {
            b.text(&ext(i), &describe(&tuples[i]));
        }
    }
    let dataset = b.build();

    let grid_index = |name: &str| name[1..].parse::<usize>().expect("generated id");
    let order: Vec<usize> = dataset.entities().names().iter().map(|n| grid_index(n)).collect();
    let descriptions = order.iter().map(|&i| describe(&tuples[i])).collect();
    let names = order.iter().map(|&i| grid_names[i].clone()).collect();
    let mut held_out: Vec<EntityId> = order
        .iter()
        .enumerate()
        .filter(|(_, g)| held.contains(g))
        .map(|(i, _)| EntityId(i as u32))
        .collect();
    held_out.sort();
    Ok(SyntheticKg { dataset, descriptions, names, rules, families, held_out })
}

impl SyntheticKg {
    pub fn with_surface(&self, kind: SurfaceKind) -> KnowledgeGraphDataset {
        match kind {
            SurfaceKind::Description => self.dataset.clone(),
            SurfaceKind::Name => {
                let mut ds = self.dataset.clone();
                ds.surface = self.names.clone();
                ds
            }
        }
    }

    /// `train.tsv`, `dev.tsv`, `test.tsv`, `entity_descriptions.tsv`,
    /// `entity_names.tsv`.
    pub fn write(&self, dir: &Path) -> Result<(), GraphError> {
        std::fs::create_dir_all(dir).map_err(|source| GraphError::Io { path: dir.display().to_string(), source })?;
        let paths = SplitPaths::in_dir(dir);
        let ds = &self.dataset;
        write_triplets(&paths.train, ds, ds.split(Split::Train))?;
        write_triplets(&paths.dev, ds, ds.split(Split::Dev))?;
        write_triplets(&paths.test, ds, ds.split(Split::Test))?;
        write_texts(&dir.join("entity_descriptions.tsv"), ds, &self.descriptions)?;
        write_texts(&dir.join("entity_names.tsv"), ds, &self.names)
    }
}
