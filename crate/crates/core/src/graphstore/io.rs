use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetBuilder, GraphError, KnowledgeGraphDataset, Split, Triplet};

#[derive(Debug, Clone)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

impl SplitPaths {
    /// `train.tsv`, `dev.tsv`, `test.tsv` under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self { train: dir.join("train.tsv"), dev: dir.join("dev.tsv"), test: dir.join("test.tsv") }
    }

    fn get(&self, s: Split) -> &Path {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

/// Reads the three triplet files (train first, so train relations take the
/// lowest ids) and the texts file. Blank lines are skipped.
pub fn load_graph(paths: &SplitPaths, texts: &Path) -> Result<KnowledgeGraphDataset, GraphError> {
    let mut b = DatasetBuilder::new();
    for split in Split::ALL {
        let path = paths.get(split);
        let content = read(path)?;
        for (i, line) in content.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(GraphError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            b.add(split, fields[0], fields[1], fields[2]);
        }
    }
    let content = read(texts)?;
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(GraphError::Parse {
                path: texts.display().to_string(),
                line: i + 1,
                message: "expected entity id, TAB, text".into(),
            });
        };
        b.text(id, text);
    }
    Ok(b.build())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, GraphError> {
    fs::File::create(path).map(BufWriter::new).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

pub fn write_triplets(path: &Path, ds: &KnowledgeGraphDataset, triplets: &[Triplet]) -> Result<(), GraphError> {
    let io_err = |source| GraphError::Io { path: path.display().to_string(), source };
    let mut w = create(path)?;
    for t in triplets {
        writeln!(
            w,
            "{}\t{}\t{}",
            ds.entities().name(t.subject.0),
            ds.relations().name(t.predicate.0),
            ds.entities().name(t.object.0)
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// One `id<TAB>text` line per entity, in registry order.
pub fn write_texts(path: &Path, ds: &KnowledgeGraphDataset, texts: &[String]) -> Result<(), GraphError> {
    let io_err = |source| GraphError::Io { path: path.display().to_string(), source };
    let mut w = create(path)?;
    for (i, text) in texts.iter().enumerate() {
        writeln!(w, "{}\t{}", ds.entities().name(i as u32), text).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
