//! Filtered ranking over every registered entity with ties counted against
//! the ground truth.

use std::collections::{BTreeMap, HashSet};

use kgformer_autodiff::{Scalar, Tape, Tensor};
use serde::Serialize;
use thiserror::Error;

use crate::batch::EntityTokens;
use crate::graphstore::{Direction, EntityId, KnowledgeGraphDataset, Query, Split, SupportSet, Triplet};
use crate::model::{ContextSlots, Model, ModelError};
use crate::rng::{substream, EVAL_SUPPORT};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] kgformer_autodiff::AutodiffError),
}

/// Which query directions to generate per triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Directions {
    Both,
    Tail,
    Head,
}

impl Directions {
    fn includes(self, d: Direction) -> bool {
        match self {
            Directions::Both => true,
            Directions::Tail => d == Direction::Tail,
            Directions::Head => d == Direction::Head,
        }
    }
}

impl std::str::FromStr for Directions {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Directions::Both),
            "tail" => Ok(Directions::Tail),
            "head" => Ok(Directions::Head),
            other => Err(format!("unknown direction setting {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Sample support sets; off gives the query-only protocol.
    pub support: bool,
    pub directions: Directions,
    /// Seed of the evaluation support stream.
    pub seed: u64,
    /// Worker threads; 1 is the reference path.
    pub threads: usize,
    /// Queries per context-encoder batch.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { support: true, directions: Directions::Both, seed: 0, threads: 1, batch_size: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub triplet: Triplet,
    pub direction: Direction,
    pub rank: usize,
    /// Rank without removing other known answers.
    pub raw_rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalWarnings {
    /// Queries whose relation is outside the model's table.
    pub unknown_relation_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub split: Split,
    pub records: Vec<QueryRecord>,
    pub metrics: Metrics,
    pub tail: Option<Metrics>,
    pub head: Option<Metrics>,
    pub pool_size: usize,
    pub seed: u64,
    pub warnings: EvalWarnings,
}

impl RankingReport {
    pub fn query_count(&self) -> usize {
        self.records.len()
    }

    /// JSON document with external ids in the per-query records.
    pub fn to_json(&self, ds: &KnowledgeGraphDataset) -> serde_json::Value {
        let records: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "subject": ds.entities().name(r.triplet.subject.0),
                    "relation": ds.relations().name(r.triplet.predicate.0),
                    "object": ds.entities().name(r.triplet.object.0),
                    "direction": r.direction,
                    "rank": r.rank,
                    "raw_rank": r.raw_rank,
                })
            })
            .collect();
        serde_json::json!({
            "split": self.split,
            "query_count": self.query_count(),
            "pool_size": self.pool_size,
            "seed": self.seed,
            "metrics": self.metrics,
            "per_direction": { "tail": self.tail, "head": self.head },
            "warnings": self.warnings,
            "records": records,
        })
    }
}

/// `1 + #{c ∉ filtered, c ≠ gt : s(c) ≥ s(gt)}`. A NaN on either side counts
/// against the ground truth.
pub fn rank_query<T: Scalar>(scores: &[T], gt: usize, filtered: &HashSet<EntityId>) -> Result<usize, EvalError> {
    if gt >= scores.len() {
        return Err(EvalError::Contract(format!("ground truth {gt} outside {} candidates", scores.len())));
    }
    if filtered.contains(&EntityId(gt as u32)) {
        return Err(EvalError::Contract(format!("ground truth {gt} is in the filter set")));
    }
    let s = scores[gt];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(c, &x)| c != gt && !(x < s) && !filtered.contains(&EntityId(c as u32)))
        .count();
    Ok(1 + above)
}

/// MRR and inclusive Hits@{1,3,10}. The reciprocal ranks are summed once
/// per distinct rank, so `n` equal ranks yield exactly `1/rank`.
pub fn compute_metrics(ranks: &[usize]) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Contract("no ranks to aggregate".into()));
    }
    if ranks.contains(&0) {
        return Err(EvalError::Contract("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &r in ranks {
        *hist.entry(r).or_default() += 1;
    }
    let mrr = hist.iter().map(|(&r, &c)| (c as f64 / n) / r as f64).sum();
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics { mrr, hits1: hits(1), hits3: hits(3), hits10: hits(10) })
}

/// Context-free embeddings of every registered entity, `[E, d]`.
pub fn candidate_embeddings<T: Scalar>(model: &Model<T>, tokens: &EntityTokens, chunk: usize) -> Result<Tensor<T>, EvalError> {
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    let ids: Vec<EntityId> = (0..tokens.len() as u32).map(EntityId).collect();
    for part in ids.chunks(chunk.max(1)) {
        let seqs: Vec<_> = part.iter().map(|&e| tokens.get(e)).collect();
        data.extend_from_slice(model.embed_batch(&seqs)?.data());
    }
    Ok(Tensor::new(vec![tokens.len(), d], data)?)
}

fn split_queries(ds: &KnowledgeGraphDataset, split: Split, dirs: Directions) -> Vec<Query> {
    ds.split(split).iter().flat_map(|&t| Query::both(t)).filter(|q| dirs.includes(q.direction)).collect()
}

/// Context embeddings for `queries`, scored against `cands`; `[B, E]`.
fn score_chunk<T: Scalar>(
    model: &Model<T>,
    tokens: &EntityTokens,
    cands: &Tensor<T>,
    queries: &[Query],
    supports: &[SupportSet],
) -> Result<Tensor<T>, EvalError> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let all = tape.constant(cands.clone());
    let n_ent = cands.rows();
    let mut slots: Vec<ContextSlots> = queries
        .iter()
        .zip(supports)
        .map(|(q, s)| ContextSlots {
            source: q.source().index(),
            predicate: model.relation_row(q.relation()),
            support: s.pairs.iter().map(|&(r, e)| (model.relation_row(r), e.index())).collect(),
        })
        .collect();
    let matrix = if model.config().early_fusion {
        let src: Vec<_> = queries.iter().map(|q| tokens.get(q.source())).collect();
        let rels: Vec<usize> = slots.iter().map(|s| s.predicate).collect();
        let fused = model.encode_entities(&mut tape, &b, &src, Some(&rels), None)?;
        for (i, s) in slots.iter_mut().enumerate() {
            s.source = n_ent + i;
        }
        tape.concat_rows(&[all, fused])?
    } else {
        all
    };
    let ctx = model.encode_contexts(&mut tape, &b, matrix, &slots, None)?;
    let scores = tape.matmul_nt(ctx, all)?;
    Ok(tape.value(scores).clone())
}

fn rank_chunk<T: Scalar>(
    model: &Model<T>,
    ds: &KnowledgeGraphDataset,
    tokens: &EntityTokens,
    cands: &Tensor<T>,
    queries: &[Query],
    supports: &[SupportSet],
) -> Result<Vec<QueryRecord>, EvalError> {
    let scores = score_chunk(model, tokens, cands, queries, supports)?;
    let empty = HashSet::new();
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let gt = q.target();
            let mut filtered = ds.filter().answers(q).cloned().unwrap_or_default();
            filtered.remove(&gt);
            let row = scores.row(i);
            Ok(QueryRecord {
                triplet: q.triplet,
                direction: q.direction,
                rank: rank_query(row, gt.index(), &filtered)?,
                raw_rank: rank_query(row, gt.index(), &empty)?,
            })
        })
        .collect()
}

/// Ranks every query of `split` against all registered entities.
pub fn evaluate_split<T: Scalar>(
    model: &Model<T>,
    ds: &KnowledgeGraphDataset,
    tokens: &EntityTokens,
    split: Split,
    opts: &EvalOptions,
) -> Result<RankingReport, EvalError> {
    if tokens.len() != ds.entity_count() {
        return Err(EvalError::Contract(format!("{} token sequences for {} entities", tokens.len(), ds.entity_count())));
    }
    let queries = split_queries(ds, split, opts.directions);
    if queries.is_empty() {
        return Err(EvalError::Contract(format!("split {} has no queries", split.name())));
    }
    let cands = candidate_embeddings(model, tokens, 256)?;
    let k = model.config().max_neighbors;
    let mut rng = substream(opts.seed, EVAL_SUPPORT);
    let supports: Vec<SupportSet> = queries
        .iter()
        .map(|q| if opts.support { ds.neighbor_sample(q.source(), k, Some(&q.triplet), &mut rng) } else { SupportSet::default() })
        .collect();
    let r = model.config().relation_count;
    let unknown = queries.iter().filter(|q| q.relation().row(r).is_none()).count();
    if unknown > 0 {
        log::warn!("{unknown} {} queries use relations unseen in training", split.name());
    }

    let bs = opts.batch_size.max(1);
    let chunks: Vec<(&[Query], &[SupportSet])> = queries.chunks(bs).zip(supports.chunks(bs)).collect();
    let records: Vec<QueryRecord> = if opts.threads <= 1 {
        let mut out = Vec::with_capacity(queries.len());
        for (q, s) in &chunks {
            out.extend(rank_chunk(model, ds, tokens, &cands, q, s)?);
        }
        out
    } else {
        let per = chunks.len().div_ceil(opts.threads);
        let parts: Vec<Result<Vec<QueryRecord>, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per.max(1))
                .map(|group| {
                    let cands = &cands;
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for (q, s) in group {
                            out.extend(rank_chunk(model, ds, tokens, cands, q, s)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(queries.len());
        for p in parts {
            out.extend(p?);
        }
        out
    };

    let ranks = |dir: Option<Direction>| -> Vec<usize> {
        records.iter().filter(|r| dir.is_none_or(|d| r.direction == d)).map(|r| r.rank).collect()
    };
    let per_dir = |d: Direction| -> Result<Option<Metrics>, EvalError> {
        let rs = ranks(Some(d));
        if rs.is_empty() {
            Ok(None)
        } else {
            compute_metrics(&rs).map(Some)
        }
    };
    Ok(RankingReport {
        split,
        metrics: compute_metrics(&ranks(None))?,
        tail: per_dir(Direction::Tail)?,
        head: per_dir(Direction::Head)?,
        records,
        pool_size: ds.entity_count(),
        seed: opts.seed,
        warnings: EvalWarnings { unknown_relation_queries: unknown },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_max_is_rank_one() {
        assert_eq!(rank_query(&[0.1f32, 0.9, 0.3], 1, &HashSet::new()).unwrap(), 1);
    }

    #[test]
    fn all_ties_rank_last() {
        assert_eq!(rank_query(&[0.5f32; 10], 3, &HashSet::new()).unwrap(), 10);
    }

    #[test]
    fn filtered_competitors_are_ignored() {
        let scores = [0.9f64, 0.8, 0.1, 0.5, 0.2];
        let filtered = HashSet::from([EntityId(0), EntityId(1)]);
        assert_eq!(rank_query(&scores, 3, &filtered).unwrap(), 1);
        assert_eq!(rank_query(&scores, 3, &HashSet::new()).unwrap(), 3);
    }

    #[test]
    fn rank_contract_errors() {
        assert!(rank_query(&[0.0f32; 3], 3, &HashSet::new()).is_err());
        assert!(rank_query(&[0.0f32; 3], 1, &HashSet::from([EntityId(1)])).is_err());
    }

    #[test]
    fn nan_counts_against_ground_truth() {
        assert_eq!(rank_query(&[f32::NAN, 1.0], 1, &HashSet::new()).unwrap(), 2);
        assert_eq!(rank_query(&[0.0, f32::NAN, 1.0], 1, &HashSet::new()).unwrap(), 3);
    }

    #[test]
    fn metric_arithmetic() {
        let m = compute_metrics(&[1, 2, 4]).unwrap();
        assert!((m.mrr - 7.0 / 12.0).abs() < 1e-12);
        assert!((m.hits1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.hits3 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.hits10, 1.0);
        assert_eq!(compute_metrics(&[1, 1, 1]).unwrap(), Metrics { mrr: 1.0, hits1: 1.0, hits3: 1.0, hits10: 1.0 });
        assert_eq!(compute_metrics(&[10]).unwrap().hits10, 1.0);
        assert_eq!(compute_metrics(&[11]).unwrap().hits10, 0.0);
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn equal_ranks_give_exact_reciprocal() {
        for k in [3usize, 7, 200, 211] {
            let m = compute_metrics(&vec![k; 37]).unwrap();
            assert_eq!(m.mrr, 1.0 / k as f64);
        }
    }
}
