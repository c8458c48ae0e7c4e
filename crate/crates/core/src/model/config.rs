use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub entity_layers: usize,
    pub context_layers: usize,
    pub ffn_dim: usize,
    /// Entity sequence length, [CLS] and [SEP] included.
    pub max_len: usize,
    /// Rows of the entity position table; at least `max_len`, plus one with
    /// early fusion.
    pub max_positions: usize,
    /// Neighbor slots `k` of the context encoder.
    pub max_neighbors: usize,
    /// Relations `R`; the relation table holds `2R` rows.
    pub relation_count: usize,
    pub vocab_size: usize,
    pub early_fusion: bool,
    pub dropout: f64,
    /// Standard deviation of the truncated-normal weight init.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub seed: u64,
}

fn default_init_std() -> f64 {
    super::INIT_STD
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            entity_layers: 3,
            context_layers: 2,
            ffn_dim: 256,
            max_len: 27,
            max_positions: 28,
            max_neighbors: 5,
            relation_count: 1,
            vocab_size: 32,
            early_fusion: false,
            dropout: 0.0,
            init_std: super::INIT_STD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.entity_layers == 0 || self.context_layers == 0 {
            return err("entity_layers and context_layers must be at least 1".into());
        }
        if self.ffn_dim == 0 {
            return err("ffn_dim must be positive".into());
        }
        if self.max_len < 3 {
            return err(format!("max_len {} is below 3", self.max_len));
        }
        if self.max_positions < self.entity_seq_len() {
            return err(format!("max_positions {} is below the entity sequence length {}", self.max_positions, self.entity_seq_len()));
        }
        if self.relation_count == 0 {
            return err("relation_count must be positive".into());
        }
        if self.vocab_size < 4 {
            return err(format!("vocab_size {} cannot hold the reserved tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return err(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    /// Entity encoder positions: `max_len`, plus the fused relation slot.
    pub fn entity_seq_len(&self) -> usize {
        self.max_len + usize::from(self.early_fusion)
    }

    /// `[GCLS]`, source, predicate, then `k` neighbor slots.
    pub fn context_len(&self) -> usize {
        3 + self.max_neighbors
    }
}
