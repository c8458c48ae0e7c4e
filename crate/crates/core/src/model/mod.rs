//! Entity encoder over surface-form tokens and context encoder over the
//! query relation plus sampled neighbors.

mod config;
mod params;

use kgformer_autodiff::{encoder_layer_forward, AttentionSpec, AutodiffError, Dropout, EncoderLayerVars, Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::RngCore;
use thiserror::Error;

pub use config::ModelConfig;
pub use params::{init_tensor, param_specs, Param, Tag, INIT_STD, LAYER_TENSORS, RELATION_TABLE, RELATION_UNKNOWN};

use crate::graphstore::{DirectedRelation, SupportSet};
use crate::textcodec::TokenSequence;
use params::{check_inventory, layout, Layout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("model contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

const SLOT_GCLS: usize = 0;
const SLOT_SOURCE: usize = 1;
const SLOT_PREDICATE: usize = 2;
const SLOT_NEIGHBOR: usize = 3;

/// Context encoder inputs for one query, as row indices: `source` and the
/// neighbor entities index the entity matrix handed to
/// [`Model::encode_contexts`]; relations index the relation rows
/// (`0..2R` plus the unknown row `2R`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSlots {
    pub source: usize,
    pub predicate: usize,
    pub support: Vec<(usize, usize)>,
}

/// Parameters placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model; every tensor tagged fresh.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let value = init_tensor(&name, &shape, config.init_std, config.seed);
                Param { name, value, tag: Tag::Fresh }
            })
            .collect();
        let layout = layout(&config);
        Ok(Self { config, params, layout })
    }

    /// Wraps explicit tensors; names and shapes must match the inventory.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        check_inventory(&config, &params)?;
        let layout = layout(&config);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn set_all_tags(&mut self, tag: Tag) {
        self.params.iter_mut().for_each(|p| p.tag = tag);
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let params = self
            .params
            .iter()
            .map(|p| Param { name: p.name.clone(), value: p.value.cast(), tag: p.tag })
            .collect();
        Model { config: self.config.clone(), params, layout: self.layout.clone() }
    }

    /// Row of `rel` in the relation rows; unseen relations map to the
    /// reserved unknown row `2R`.
    pub fn relation_row(&self, rel: DirectedRelation) -> usize {
        rel.row(self.config.relation_count).unwrap_or(2 * self.config.relation_count)
    }

    /// Puts every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    fn layer(&self, b: &Bound, start: usize) -> EncoderLayerVars {
        EncoderLayerVars::from_slice(&b.vars[start..start + LAYER_TENSORS.len()])
    }

    fn run_layers(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        mut x: Var,
        starts: &[usize],
        spec: &AttentionSpec<'_>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        for &s in starts {
            let p = self.layer(b, s);
            let drop = rng.as_deref_mut().map(|r| Dropout { p: self.config.dropout, rng: r });
            x = encoder_layer_forward(tape, x, spec, &p, drop)?;
        }
        Ok(x)
    }

    fn input_dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var, ModelError> {
        match rng.as_deref_mut() {
            Some(r) => Ok(tape.dropout(x, self.config.dropout, r)?),
            None => Ok(x),
        }
    }

    /// `[CLS]` states for a batch of sequences, `[S, d]`. With `fused`, the
    /// given relation row of each sequence is inserted right after `[CLS]`.
    /// Passing an rng enables dropout.
    pub fn encode_entities(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        seqs: &[&TokenSequence],
        fused: Option<&[usize]>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let ml = self.config.max_len;
        let s_count = seqs.len();
        if s_count == 0 {
            return Err(ModelError::Contract("no sequences to encode".into()));
        }
        for s in seqs {
            if s.len() != ml || s.attention_mask.len() != ml {
                return Err(ModelError::Contract(format!("token sequence of length {} for max_len {ml}", s.len())));
            }
        }
        if let Some(f) = fused {
            if !self.config.early_fusion {
                return Err(ModelError::Config("early fusion is disabled in this model".into()));
            }
            if f.len() != s_count {
                return Err(ModelError::Contract(format!("{} fused relations for {s_count} sequences", f.len())));
            }
        }
        let lay = &self.layout;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().map(|&i| i as usize)).collect();
        let mut x = tape.gather_rows(b.vars[lay.token], &ids)?;
        let (l, mask, types) = match fused {
            None => {
                let mask: Vec<bool> = seqs.iter().flat_map(|s| s.attention_mask.iter().copied()).collect();
                (ml, mask, vec![0usize; s_count * ml])
            }
            Some(rows) => {
                let rel_rows = self.relation_rows(tape, b)?;
                let rel = tape.gather_rows(rel_rows, rows)?;
                let both = tape.concat_rows(&[x, rel])?;
                let l = ml + 1;
                let mut order = Vec::with_capacity(s_count * l);
                let mut mask = Vec::with_capacity(s_count * l);
                let mut types = Vec::with_capacity(s_count * l);
                for (si, s) in seqs.iter().enumerate() {
                    for p in 0..l {
                        let (src, m, ty) = match p {
                            0 => (si * ml, s.attention_mask[0], 0),
                            1 => (s_count * ml + si, true, 1),
                            _ => (si * ml + p - 1, s.attention_mask[p - 1], 0),
                        };
                        order.push(src);
                        mask.push(m);
                        types.push(ty);
                    }
                }
                x = tape.gather_rows(both, &order)?;
                (l, mask, types)
            }
        };
        let pos_idx: Vec<usize> = (0..s_count).flat_map(|_| 0..l).collect();
        let pos = tape.gather_rows(b.vars[lay.position], &pos_idx)?;
        let ty = tape.gather_rows(b.vars[lay.entity_type], &types)?;
        x = tape.add(x, pos)?;
        x = tape.add(x, ty)?;
        x = tape.layer_norm(x, b.vars[lay.entity_norm.0], b.vars[lay.entity_norm.1], LAYER_NORM_EPS)?;
        x = self.input_dropout(tape, x, &mut rng)?;
        let spec = AttentionSpec { heads: self.config.heads, seq_len: l, key_mask: &mask };
        x = self.run_layers(tape, b, x, &lay.entity_layers, &spec, &mut rng)?;
        let cls: Vec<usize> = (0..s_count).map(|s| s * l).collect();
        Ok(tape.gather_rows(x, &cls)?)
    }

    /// Relation table with the unknown row appended, `[2R + 1, d]`.
    fn relation_rows(&self, tape: &mut Tape<T>, b: &Bound) -> Result<Var, ModelError> {
        Ok(tape.concat_rows(&[b.vars[self.layout.relations], b.vars[self.layout.relation_unknown]])?)
    }

    /// `[GCLS]` outputs for a batch of queries, `[B, d]`. `entities` is the
    /// `[E, d]` matrix the slot indices refer to.
    pub fn encode_contexts(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        entities: Var,
        slots: &[ContextSlots],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let k = self.config.max_neighbors;
        let l = self.config.context_len();
        let d = self.config.d_model;
        let n_ent = tape.value(entities).rows();
        let n_rel = 2 * self.config.relation_count + 1;
        if slots.is_empty() {
            return Err(ModelError::Contract("no queries to encode".into()));
        }
        if tape.value(entities).cols() != d {
            return Err(ModelError::Contract(format!("entity matrix width {} for d_model {d}", tape.value(entities).cols())));
        }
        let lay = &self.layout;
        let zero = tape.constant(Tensor::zeros(vec![1, d]));
        // Row 0 = [GCLS], rows 1..=E entities, last row zero.
        let ent_src = tape.concat_rows(&[b.vars[lay.gcls], entities, zero])?;
        let rel_rows = self.relation_rows(tape, b)?;
        let rel_src = tape.concat_rows(&[rel_rows, zero])?;
        let (ent_zero, rel_zero) = (n_ent + 1, n_rel);

        let mut ent_idx = Vec::with_capacity(slots.len() * l);
        let mut rel_idx = Vec::with_capacity(slots.len() * l);
        let mut types = Vec::with_capacity(slots.len() * l);
        let mut mask = Vec::with_capacity(slots.len() * l);
        for q in slots {
            if q.support.len() > k {
                return Err(ModelError::Contract(format!("support set of {} exceeds k = {k}", q.support.len())));
            }
            let check_ent = |e: usize| {
                if e < n_ent {
                    Ok(e + 1)
                } else {
                    Err(ModelError::Contract(format!("entity row {e} outside matrix of {n_ent}")))
                }
            };
            let check_rel = |r: usize| {
                if r < n_rel {
                    Ok(r)
                } else {
                    Err(ModelError::Contract(format!("relation row {r} outside {n_rel} rows")))
                }
            };
            ent_idx.extend([0, check_ent(q.source)?, ent_zero]);
            rel_idx.extend([rel_zero, rel_zero, check_rel(q.predicate)?]);
            types.extend([SLOT_GCLS, SLOT_SOURCE, SLOT_PREDICATE]);
            mask.extend([true, true, true]);
            for &(r, e) in &q.support {
                ent_idx.push(check_ent(e)?);
                rel_idx.push(check_rel(r)?);
                types.push(SLOT_NEIGHBOR);
                mask.push(true);
            }
            for _ in q.support.len()..k {
                ent_idx.push(ent_zero);
                rel_idx.push(rel_zero);
                types.push(SLOT_NEIGHBOR);
                mask.push(false);
            }
        }
        let xe = tape.gather_rows(ent_src, &ent_idx)?;
        let xr = tape.gather_rows(rel_src, &rel_idx)?;
        let xt = tape.gather_rows(b.vars[lay.context_type], &types)?;
        let mut x = tape.add(xe, xr)?;
        x = tape.add(x, xt)?;
        x = tape.layer_norm(x, b.vars[lay.context_norm.0], b.vars[lay.context_norm.1], LAYER_NORM_EPS)?;
        x = self.input_dropout(tape, x, &mut rng)?;
        let spec = AttentionSpec { heads: self.config.heads, seq_len: l, key_mask: &mask };
        x = self.run_layers(tape, b, x, &lay.context_layers, &spec, &mut rng)?;
        let gcls: Vec<usize> = (0..slots.len()).map(|i| i * l).collect();
        Ok(tape.gather_rows(x, &gcls)?)
    }

    /// Context-free embeddings for many sequences, without gradients.
    pub fn embed_batch(&self, seqs: &[&TokenSequence]) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let out = self.encode_entities(&mut tape, &b, seqs, None, None)?;
        Ok(tape.value(out).clone())
    }

    /// `Embed_ENT`: the entity encoder's `[CLS]` state.
    pub fn embed_entity(&self, tokens: &TokenSequence) -> Result<Vec<T>, ModelError> {
        Ok(self.embed_batch(&[tokens])?.into_data())
    }

    /// Source-side embedding with the predicate injected after `[CLS]`.
    pub fn fuse_early(&self, tokens: &TokenSequence, predicate: DirectedRelation) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let row = self.relation_row(predicate);
        let out = self.encode_entities(&mut tape, &b, &[tokens], Some(&[row]), None)?;
        Ok(tape.value(out).clone().into_data())
    }

    /// `[GCLS]` output for one query. `neighbor_embs[i]` is the embedding of
    /// the entity in `support.pairs[i]`.
    pub fn encode_context(
        &self,
        source_emb: &[T],
        predicate: DirectedRelation,
        support: &SupportSet,
        neighbor_embs: &[Vec<T>],
    ) -> Result<Vec<T>, ModelError> {
        if neighbor_embs.len() != support.len() {
            return Err(ModelError::Contract(format!(
                "{} neighbor embeddings for {} support pairs",
                neighbor_embs.len(),
                support.len()
            )));
        }
        let mut rows = vec![source_emb.to_vec()];
        rows.extend(neighbor_embs.iter().cloned());
        let d = self.config.d_model;
        if rows.iter().any(|r| r.len() != d) {
            return Err(ModelError::Contract(format!("embeddings must have length d_model = {d}")));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let ents = tape.constant(Tensor::from_rows(&rows)?);
        let slots = ContextSlots {
            source: 0,
            predicate: self.relation_row(predicate),
            support: support.pairs.iter().enumerate().map(|(i, &(r, _))| (self.relation_row(r), i + 1)).collect(),
        };
        let out = self.encode_contexts(&mut tape, &b, ents, &[slots], None)?;
        Ok(tape.value(out).clone().into_data())
    }
}

/// Unscaled dot products of `context` with each candidate row.
pub fn score<T: Scalar>(context: &[T], candidates: &Tensor<T>) -> Result<Vec<T>, ModelError> {
    if candidates.shape().len() != 2 || candidates.cols() != context.len() {
        return Err(ModelError::Contract(format!(
            "context of length {} against candidates of shape {:?}",
            context.len(),
            candidates.shape()
        )));
    }
    let c = candidates.rows();
    let mut out = vec![T::zero(); c];
    T::gemm(1, context.len(), c, context, false, candidates.data(), true, &mut out, false);
    Ok(out)
}
