//! Finite-difference checks of the full link-prediction loss, on top of the
//! per-op suite from the autodiff crate.

use kgformer_autodiff::gradcheck::{check_gradients, op_suite, CheckOutcome, GradcheckOptions};
use kgformer_autodiff::{AutodiffError, Tensor};

use crate::batch::EntityTokens;
use crate::graphstore::{DirectedRelation, EntityId, Query, RelationId, SupportSet, Triplet};
use crate::model::{Bound, Model, ModelConfig};
use crate::textcodec::TokenSequence;
use crate::trainer::{batch_loss, Batch};

/// Names of the model-level checks run by [`full_suite`].
pub const MODEL_CHECKS: &[&str] = &["model_loss", "model_loss_fused", "model_loss_shared_positives"];

fn tiny_config(early_fusion: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        entity_layers: 1,
        context_layers: 1,
        ffn_dim: 12,
        max_len: 5,
        max_positions: 6,
        max_neighbors: 2,
        relation_count: 2,
        vocab_size: 9,
        early_fusion,
        dropout: 0.0,
        init_std: 0.5,
        seed,
    }
}

fn tiny_tokens() -> EntityTokens {
    let seq = |body: &[u32]| {
        let mut ids = vec![2];
        ids.extend_from_slice(body);
        ids.push(3);
        let active = ids.len();
        ids.resize(5, 0);
        TokenSequence { attention_mask: (0..5).map(|i| i < active).collect(), ids }
    };
    EntityTokens::from_sequences(vec![seq(&[4, 5]), seq(&[6]), seq(&[7, 8, 4]), seq(&[5, 5]), seq(&[8])])
}

/// Gradient of the batch loss with respect to every parameter tensor of a
/// small 64-bit model. Includes duplicate rows, a negative that collides with
/// a positive, an inverse-direction query and a padded support slot.
pub fn model_loss_check(name: &str, opts: &GradcheckOptions, seed: u64) -> kgformer_autodiff::Result<CheckOutcome> {
    let fused = name == "model_loss_fused";
    let cross = name == "model_loss_shared_positives";
    let cfg = tiny_config(fused, seed);
    let model = Model::<f64>::new(cfg).map_err(|e| AutodiffError::Contract(e.to_string()))?;
    let tokens = tiny_tokens();
    let queries = [Query::both(Triplet::new(0, 0, 1))[0], Query::both(Triplet::new(2, 1, 3))[1], Query::both(Triplet::new(4, 0, 1))[0]];
    let supports = [
        SupportSet { pairs: vec![(DirectedRelation::forward(RelationId(1)), EntityId(2)), (DirectedRelation::inverted(RelationId(0)), EntityId(4))] },
        SupportSet { pairs: vec![(DirectedRelation::forward(RelationId(0)), EntityId(0))] },
        SupportSet::default(),
    ];
    let negatives = [EntityId(1), EntityId(3), EntityId(3)];
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    check_gradients(name, &inputs, opts, |tape, vars| {
        let bound = Bound { vars: vars.to_vec() };
        let batch = Batch { queries: &queries, supports: &supports, negatives: &negatives };
        batch_loss(&model, tape, &bound, &tokens, &batch, cross, None).map_err(|e| AutodiffError::Contract(e.to_string()))
    })
}

/// Every op check followed by the model-level checks.
pub fn full_suite(opts: &GradcheckOptions, seed: u64) -> kgformer_autodiff::Result<Vec<CheckOutcome>> {
    let mut out = op_suite(opts, seed)?;
    for name in MODEL_CHECKS {
        out.push(model_loss_check(name, opts, seed)?);
    }
    Ok(out)
}
