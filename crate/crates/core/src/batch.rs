//! Pre-tokenized surface forms and helpers for assembling encoder batches.

use std::collections::HashMap;

use crate::graphstore::{EntityId, KnowledgeGraphDataset};
use crate::textcodec::{TextError, TokenSequence, Vocab};

/// One [`TokenSequence`] per registered entity.
#[derive(Debug, Clone)]
pub struct EntityTokens {
    seqs: Vec<TokenSequence>,
}

impl EntityTokens {
    pub fn build(ds: &KnowledgeGraphDataset, vocab: &Vocab, max_len: usize) -> Result<Self, TextError> {
        let seqs = ds.surfaces().iter().map(|s| vocab.tokenize(s, max_len)).collect::<Result<_, _>>()?;
        Ok(Self { seqs })
    }

    pub fn from_sequences(seqs: Vec<TokenSequence>) -> Self {
        Self { seqs }
    }

    pub fn get(&self, e: EntityId) -> &TokenSequence {
        &self.seqs[e.index()]
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Assigns each distinct entity one row, in first-request order.
#[derive(Debug, Default)]
pub struct RowMap {
    rows: Vec<EntityId>,
    index: HashMap<EntityId, usize>,
}

impl RowMap {
    pub fn row(&mut self, e: EntityId) -> usize {
        *self.index.entry(e).or_insert_with(|| {
            self.rows.push(e);
            self.rows.len() - 1
        })
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
