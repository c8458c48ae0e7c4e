//! Link-prediction training: shared negatives, softmax cross-entropy over
//! dot-product logits, AdamW under a warmup/decay schedule with separate
//! rates for fresh and loaded tensors.

use std::collections::HashSet;

use kgformer_autodiff::{AutodiffError, Scalar, Tape, Var};
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{EntityTokens, RowMap};
use crate::graphstore::{EntityId, KnowledgeGraphDataset, Query, Split, SupportSet};
use crate::model::{Bound, ContextSlots, Model, ModelError, Tag};
use crate::rng::{substream, DROPOUT, NEGATIVES, SHUFFLE, SUPPORT};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("training contract: {0}")]
    Contract(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("trace sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Shared negatives per batch.
    pub negatives: usize,
    /// Total updates; 0 derives the count from `epochs`.
    pub steps: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub loaded_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Feed sampled neighbors to the context encoder.
    pub use_support: bool,
    /// Also score other rows' positives as negatives.
    pub cross_positive_negatives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            negatives: 128,
            steps: 0,
            epochs: 1,
            peak_lr: 5e-4,
            loaded_lr: 3e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            use_support: true,
            cross_positive_negatives: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return err(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.steps == 0 && self.epochs == 0 {
            return err("either steps or epochs must be positive".into());
        }
        for (name, v) in [("peak_lr", self.peak_lr), ("loaded_lr", self.loaded_lr), ("weight_decay", self.weight_decay), ("eps", self.eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} {v} must be a finite non-negative number"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} {b} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, train_queries: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * train_queries.div_ceil(self.batch_size)
        }
    }

    fn peak(&self, tag: Tag) -> f64 {
        match tag {
            Tag::Fresh => self.peak_lr,
            Tag::Loaded => self.loaded_lr,
        }
    }
}

/// Linear warmup from 0 to the group's peak over the first
/// `warmup_fraction · total` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig, group: Tag) -> Result<f64, TrainError> {
    if step > total {
        return Err(TrainError::Contract(format!("step {step} beyond total {total}")));
    }
    let peak = cfg.peak(group);
    if total == 0 {
        return Ok(0.0);
    }
    let (s, t) = (step as f64, total as f64);
    let warm = cfg.warmup_fraction * t;
    Ok(if s < warm { peak * s / warm } else { peak * (t - s) / (t - warm) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        let m: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// One AdamW update of a single tensor. `t` is the 1-based update count used
/// for bias correction. Weight decay scales θ by `1 − lr·wd` before the Adam
/// step and never enters the moments.
pub fn adamw_step<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    opt: &AdamW,
) -> Result<(), TrainError> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(TrainError::Contract(format!(
            "adamw shapes differ: params {}, grads {}, moments {}/{}",
            theta.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(TrainError::Contract("adamw step count starts at 1".into()));
    }
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i].as_f64();
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
        if lr == 0.0 {
            continue;
        }
        let mut x = theta[i].as_f64();
        x -= lr * opt.weight_decay * x;
        x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
        theta[i] = T::of(x);
    }
    Ok(())
}

/// `n` distinct entities drawn uniformly from `pool`.
pub fn sample_negatives<R: Rng + ?Sized>(pool: &[EntityId], n: usize, rng: &mut R) -> Result<Vec<EntityId>, TrainError> {
    if n > pool.len() {
        return Err(TrainError::Config(format!("{n} negatives requested from a pool of {} entities", pool.len())));
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

fn reborrow<'b>(r: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Inputs of one training batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub queries: &'a [Query],
    /// Parallel to `queries`.
    pub supports: &'a [SupportSet],
    pub negatives: &'a [EntityId],
}

/// Mean cross-entropy of each row's positive against the shared negatives
/// (plus, optionally, the other rows' positives). Every distinct entity is
/// encoded once. Candidates equal to the row's positive are masked.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    tokens: &EntityTokens,
    batch: &Batch<'_>,
    cross_positive_negatives: bool,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Var, TrainError> {
    let Batch { queries, supports, negatives } = *batch;
    let b = queries.len();
    if b == 0 {
        return Err(TrainError::Contract("empty batch".into()));
    }
    if supports.len() != b {
        return Err(TrainError::Contract(format!("{} support sets for {b} queries", supports.len())));
    }
    let fusion = model.config().early_fusion;
    let mut rows = RowMap::default();
    let neg_rows: Vec<usize> = negatives.iter().map(|&e| rows.row(e)).collect();
    let pos_rows: Vec<usize> = queries.iter().map(|q| rows.row(q.target())).collect();
    let mut slots: Vec<ContextSlots> = queries
        .iter()
        .zip(supports)
        .map(|(q, s)| ContextSlots {
            source: if fusion { 0 } else { rows.row(q.source()) },
            predicate: model.relation_row(q.relation()),
            support: s.pairs.iter().map(|&(r, e)| (model.relation_row(r), rows.row(e))).collect(),
        })
        .collect();

    let seqs: Vec<_> = rows.entities().iter().map(|&e| tokens.get(e)).collect();
    let ents = model.encode_entities(tape, bound, &seqs, None, reborrow(&mut dropout))?;
    let ctx_matrix = if fusion {
        let src: Vec<_> = queries.iter().map(|q| tokens.get(q.source())).collect();
        let rels: Vec<usize> = slots.iter().map(|s| s.predicate).collect();
        let fused = model.encode_entities(tape, bound, &src, Some(&rels), reborrow(&mut dropout))?;
        for (i, s) in slots.iter_mut().enumerate() {
            s.source = rows.len() + i;
        }
        tape.concat_rows(&[ents, fused])?
    } else {
        ents
    };
    let ctx = model.encode_contexts(tape, bound, ctx_matrix, &slots, dropout)?;

    let cand_rows: Vec<usize> = neg_rows.iter().chain(&pos_rows).copied().collect();
    let cands = tape.gather_rows(ents, &cand_rows)?;
    let logits = tape.matmul_nt(ctx, cands)?;

    let n = negatives.len();
    let c = n + b;
    let neg_set: HashSet<EntityId> = negatives.iter().copied().collect();
    // An entity shared by several rows' positives counts once as a negative.
    let mut seen = HashSet::new();
    let first: Vec<bool> = queries.iter().map(|q| seen.insert(q.target())).collect();
    let mut valid = vec![false; b * c];
    for (i, q) in queries.iter().enumerate() {
        let pos = q.target();
        for (j, &e) in negatives.iter().enumerate() {
            valid[i * c + j] = e != pos;
        }
        for (j, other) in queries.iter().enumerate() {
            let e = other.target();
            valid[i * c + n + j] = j == i || (cross_positive_negatives && first[j] && e != pos && !neg_set.contains(&e));
        }
    }
    let targets: Vec<usize> = (0..b).map(|i| n + i).collect();
    Ok(tape.cross_entropy(logits, &targets, Some(&valid))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub lr_fresh: f64,
    pub lr_loaded: f64,
}

/// Both directions of every train triplet.
pub fn train_queries(ds: &KnowledgeGraphDataset) -> Vec<Query> {
    ds.split(Split::Train).iter().flat_map(|&t| Query::both(t)).collect()
}

/// Single-threaded training loop. Each epoch reshuffles the queries; support
/// sets and negatives are drawn fresh for every step. `on_step` sees each
/// trace record as it is produced.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    ds: &KnowledgeGraphDataset,
    tokens: &EntityTokens,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRecord) -> Result<(), String>,
) -> Result<Vec<TraceRecord>, TrainError> {
    cfg.validate()?;
    let queries = train_queries(ds);
    if queries.is_empty() {
        return Err(TrainError::Config("no training triplets".into()));
    }
    let pool = ds.train_entities();
    if cfg.negatives > pool.len() {
        return Err(TrainError::Config(format!("{} negatives requested but train has {} entities", cfg.negatives, pool.len())));
    }
    let total = cfg.total_steps(queries.len());
    let k = model.config().max_neighbors;
    let opt = AdamW::from(cfg);
    let mut state = OptimizerState::new(model);
    let mut shuffle_rng = substream(cfg.seed, SHUFFLE);
    let mut neg_rng = substream(cfg.seed, NEGATIVES);
    let mut sup_rng = substream(cfg.seed, SUPPORT);
    let mut drop_rng = substream(cfg.seed, DROPOUT);
    let use_dropout = model.config().dropout > 0.0;

    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        if cursor >= order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch_q: Vec<Query> = order[cursor..end].iter().map(|&i| queries[i]).collect();
        cursor = end;
        let supports: Vec<SupportSet> = batch_q
            .iter()
            .map(|q| if cfg.use_support { ds.neighbor_sample(q.source(), k, Some(&q.triplet), &mut sup_rng) } else { SupportSet::default() })
            .collect();
        let negatives = sample_negatives(pool, cfg.negatives, &mut neg_rng)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let batch = Batch { queries: &batch_q, supports: &supports, negatives: &negatives };
        let drop: Option<&mut dyn RngCore> = if use_dropout { Some(&mut drop_rng) } else { None };
        let loss_var = batch_loss(model, &mut tape, &bound, tokens, &batch, cfg.cross_positive_negatives, drop)?;
        let loss = tape.value(loss_var).item().as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        let lr_fresh = lr_at(step, total, cfg, Tag::Fresh)?;
        let lr_loaded = lr_at(step, total, cfg, Tag::Loaded)?;
        if tape.recorded_ops() > 0 {
            tape.backward(loss_var)?;
        }
        state.step += 1;
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let lr = match p.tag {
                Tag::Fresh => lr_fresh,
                Tag::Loaded => lr_loaded,
            };
            let zeros;
            let grad = match tape.grad(bound.vars[i]) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::zero(); p.value.numel()];
                    &zeros
                }
            };
            adamw_step(p.value.data_mut(), grad, &mut state.m[i], &mut state.v[i], state.step, lr, &opt)?;
        }
        let rec = TraceRecord { step, loss, lr_fresh, lr_loaded };
        on_step(&rec).map_err(TrainError::Sink)?;
        trace.push(rec);
    }
    Ok(trace)
}
