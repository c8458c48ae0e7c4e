use kgformer_autodiff::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::rng::{substream, INIT};

pub const INIT_STD: f64 = 0.02;

pub const RELATION_TABLE: &str = "relation.embeddings";
pub const RELATION_UNKNOWN: &str = "relation.unknown";

/// Weight names inside one encoder layer, in
/// [`kgformer_autodiff::EncoderLayerVars::from_slice`] order.
pub const LAYER_TENSORS: [&str; 16] = [
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "attention.norm.gamma",
    "attention.norm.beta",
    "ffn.inner.weight",
    "ffn.inner.bias",
    "ffn.outer.weight",
    "ffn.outer.bias",
    "ffn.norm.gamma",
    "ffn.norm.beta",
];

/// Which learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Fresh,
    Loaded,
}

impl Tag {
    pub fn byte(self) -> u8 {
        match self {
            Tag::Fresh => 0,
            Tag::Loaded => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Tag::Fresh),
            1 => Some(Tag::Loaded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub tag: Tag,
}

/// Positions of the named tensors inside the parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub token: usize,
    pub position: usize,
    pub entity_type: usize,
    pub entity_norm: (usize, usize),
    pub entity_layers: Vec<usize>,
    pub gcls: usize,
    pub context_type: usize,
    pub context_norm: (usize, usize),
    pub context_layers: Vec<usize>,
    pub relations: usize,
    pub relation_unknown: usize,
}

fn layer_specs(prefix: &str, d: usize, ffn: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for name in LAYER_TENSORS {
        let shape = match name {
            "ffn.inner.weight" => vec![d, ffn],
            "ffn.inner.bias" => vec![ffn],
            "ffn.outer.weight" => vec![ffn, d],
            n if n.ends_with(".weight") => vec![d, d],
            _ => vec![d],
        };
        out.push((format!("{prefix}.{name}"), shape));
    }
}

/// Canonical `(name, shape)` inventory for `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v = vec![
        ("entity.token_embeddings".to_string(), vec![cfg.vocab_size, d]),
        ("entity.position_embeddings".to_string(), vec![cfg.max_positions, d]),
        ("entity.type_embeddings".to_string(), vec![2, d]),
        ("entity.embedding_norm.gamma".to_string(), vec![d]),
        ("entity.embedding_norm.beta".to_string(), vec![d]),
    ];
    for i in 0..cfg.entity_layers {
        layer_specs(&format!("entity.layer{i}"), d, cfg.ffn_dim, &mut v);
    }
    v.push(("context.gcls".to_string(), vec![1, d]));
    v.push(("context.type_embeddings".to_string(), vec![4, d]));
    v.push(("context.input_norm.gamma".to_string(), vec![d]));
    v.push(("context.input_norm.beta".to_string(), vec![d]));
    for i in 0..cfg.context_layers {
        layer_specs(&format!("context.layer{i}"), d, cfg.ffn_dim, &mut v);
    }
    v.push((RELATION_TABLE.to_string(), vec![2 * cfg.relation_count, d]));
    v.push((RELATION_UNKNOWN.to_string(), vec![1, d]));
    v
}

pub(crate) fn layout(cfg: &ModelConfig) -> Layout {
    let per_layer = LAYER_TENSORS.len();
    let entity_layers: Vec<usize> = (0..cfg.entity_layers).map(|i| 5 + i * per_layer).collect();
    let gcls = 5 + cfg.entity_layers * per_layer;
    let context_layers: Vec<usize> = (0..cfg.context_layers).map(|i| gcls + 4 + i * per_layer).collect();
    let relations = gcls + 4 + cfg.context_layers * per_layer;
    Layout {
        token: 0,
        position: 1,
        entity_type: 2,
        entity_norm: (3, 4),
        entity_layers,
        gcls,
        context_type: gcls + 1,
        context_norm: (gcls + 2, gcls + 3),
        context_layers,
        relations,
        relation_unknown: relations + 1,
    }
}

/// Truncated normal (±2σ) for weight matrices and embeddings; ones for
/// norm gains; zeros for biases and norm offsets. Each tensor draws from its
/// own named stream so unrelated shape changes leave it untouched.
pub fn init_tensor<T: Scalar>(name: &str, shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = if name.ends_with(".gamma") {
        vec![T::one(); n]
    } else if name.ends_with(".beta") || name.ends_with(".bias") {
        vec![T::zero(); n]
    } else {
        let mut rng = substream(seed, &format!("{INIT}/{name}"));
        (0..n).map(|_| T::of(truncated_normal(&mut rng) * std)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}

pub(crate) fn check_inventory<T>(cfg: &ModelConfig, params: &[Param<T>]) -> Result<(), ModelError>
where
    T: Scalar,
{
    let specs = param_specs(cfg);
    if specs.len() != params.len() {
        return Err(ModelError::Contract(format!("expected {} parameter tensors, got {}", specs.len(), params.len())));
    }
    for ((name, shape), p) in specs.iter().zip(params) {
        if &p.name != name {
            return Err(ModelError::Contract(format!("expected tensor {name}, got {}", p.name)));
        }
        if p.value.shape() != shape.as_slice() {
            return Err(ModelError::Contract(format!("tensor {name} has shape {:?}, config implies {shape:?}", p.value.shape())));
        }
    }
    Ok(())
}
