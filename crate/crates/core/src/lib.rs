//! Two-tier Transformer for inductive knowledge-graph completion: entities are
//! embedded from their surface text, queries are contextualized with sampled
//! graph neighbors, and candidates are ranked by dot product.

pub mod batch;
pub mod evaluator;
pub mod gradcheck;
pub mod graphstore;
pub mod model;
pub mod persist;
pub mod rng;
pub mod textcodec;
pub mod trainer;
