use kgformer_autodiff::gradcheck::GradcheckOptions;
use kgformer_core::batch::EntityTokens;
use kgformer_core::gradcheck::{full_suite, model_loss_check, MODEL_CHECKS};
use kgformer_core::graphstore::{make_synthetic_kg, DirectedRelation, EntityId, RelationId, SupportSet, SynthSpec};
use kgformer_core::model::{param_specs, Model, ModelConfig, Tag, LAYER_TENSORS};
use kgformer_core::textcodec::{build_vocab, TokenSequence};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(early_fusion: bool) -> (Model<f32>, EntityTokens) {
    let kg = make_synthetic_kg(&SynthSpec::default(), 4).unwrap();
    let ds = &kg.dataset;
    let vocab = build_vocab(ds.surfaces().iter().map(String::as_str), 100).unwrap();
    let cfg = ModelConfig {
        max_len: 10,
        max_positions: 11,
        relation_count: ds.train_relation_count(),
        vocab_size: vocab.len(),
        early_fusion,
        init_std: 0.1,
        seed: 7,
        ..ModelConfig::default()
    };
    let tokens = EntityTokens::build(ds, &vocab, 10).unwrap();
    (Model::new(cfg).unwrap(), tokens)
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn rel(r: u32) -> DirectedRelation {
    DirectedRelation::forward(RelationId(r))
}

#[test]
fn same_seed_same_model() {
    let (a, tokens) = setup(false);
    let (b, _) = setup(false);
    assert_eq!(a, b);
    let ea = a.embed_entity(tokens.get(EntityId(3))).unwrap();
    let eb = b.embed_entity(tokens.get(EntityId(3))).unwrap();
    assert_eq!(ea, eb);
    let other = Model::<f32>::new(ModelConfig { seed: 8, ..a.config().clone() }).unwrap();
    assert_ne!(other.params()[0].value, a.params()[0].value);
}

#[test]
fn entity_embedding_has_model_width_and_is_finite() {
    let (model, tokens) = setup(false);
    let e = model.embed_entity(tokens.get(EntityId(0))).unwrap();
    assert_eq!(e.len(), 64);
    assert!(e.iter().all(|x| x.is_finite()));
    let batch = model.embed_batch(&[tokens.get(EntityId(0)), tokens.get(EntityId(1))]).unwrap();
    assert_eq!(batch.shape(), &[2, 64]);
    assert_eq!(&batch.data()[..64], e.as_slice());
}

#[test]
fn tokens_change_the_embedding_but_padding_does_not() {
    let (model, tokens) = setup(false);
    let seq = tokens.get(EntityId(0)).clone();
    let base = model.embed_entity(&seq).unwrap();
    let mut swapped = seq.clone();
    swapped.ids.swap(1, 2);
    assert!(max_abs(&base, &model.embed_entity(&swapped).unwrap()) > 1e-4);
    let mut repadded = seq.clone();
    let last = repadded.ids.len() - 1;
    assert!(!repadded.attention_mask[last]);
    repadded.ids[last] = 5;
    assert!(max_abs(&base, &model.embed_entity(&repadded).unwrap()) < 1e-6);
}

#[test]
fn context_with_empty_support_is_finite() {
    let (model, tokens) = setup(false);
    let src = model.embed_entity(tokens.get(EntityId(1))).unwrap();
    let ctx = model.encode_context(&src, rel(0), &SupportSet::default(), &[]).unwrap();
    assert_eq!(ctx.len(), 64);
    assert!(ctx.iter().all(|x| x.is_finite()));
}

#[test]
fn predicate_neighbors_and_direction_all_matter() {
    let (model, tokens) = setup(false);
    let emb = |i: u32| model.embed_entity(tokens.get(EntityId(i))).unwrap();
    let src = emb(1);
    let support = SupportSet { pairs: vec![(rel(1), EntityId(2)), (rel(2), EntityId(3))] };
    let nbrs = vec![emb(2), emb(3)];
    let base = model.encode_context(&src, rel(0), &support, &nbrs).unwrap();
    let other_pred = model.encode_context(&src, rel(1), &support, &nbrs).unwrap();
    let inverse = model.encode_context(&src, DirectedRelation::inverted(RelationId(0)), &support, &nbrs).unwrap();
    let other_nbr = model.encode_context(&src, rel(0), &SupportSet { pairs: vec![(rel(1), EntityId(4)), (rel(2), EntityId(3))] }, &[emb(4), emb(3)]).unwrap();
    let none = model.encode_context(&src, rel(0), &SupportSet::default(), &[]).unwrap();
    for (what, v) in [("predicate", &other_pred), ("direction", &inverse), ("neighbor", &other_nbr), ("support", &none)] {
        assert!(max_abs(&base, v) > 1e-4, "{what} had no effect");
    }
}

#[test]
fn unseen_relation_uses_the_unknown_row() {
    let (model, tokens) = setup(false);
    let r = model.config().relation_count as u32;
    assert_eq!(model.relation_row(rel(r)), 2 * r as usize);
    assert_eq!(model.relation_row(DirectedRelation::inverted(RelationId(r + 3))), 2 * r as usize);
    let src = model.embed_entity(tokens.get(EntityId(0))).unwrap();
    let a = model.encode_context(&src, rel(r), &SupportSet::default(), &[]).unwrap();
    let b = model.encode_context(&src, rel(r + 9), &SupportSet::default(), &[]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn support_order_does_not_matter() {
    let (model, tokens) = setup(false);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let src = model.embed_entity(tokens.get(EntityId(0))).unwrap();
    let mut pairs: Vec<(DirectedRelation, EntityId)> =
        [(rel(0), 5), (rel(1), 9), (DirectedRelation::inverted(RelationId(2)), 13), (rel(3), 17), (rel(0), 21)].iter().map(|&(r, e)| (r, EntityId(e))).collect();
    let embed = |p: &[(DirectedRelation, EntityId)]| p.iter().map(|&(_, e)| model.embed_entity(tokens.get(e)).unwrap()).collect::<Vec<_>>();
    let base = model.encode_context(&src, rel(1), &SupportSet { pairs: pairs.clone() }, &embed(&pairs)).unwrap();
    let mut worst = 0.0f32;
    for _ in 0..100 {
        pairs.shuffle(&mut rng);
        let out = model.encode_context(&src, rel(1), &SupportSet { pairs: pairs.clone() }, &embed(&pairs)).unwrap();
        worst = worst.max(max_abs(&base, &out));
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}

#[test]
fn early_fusion_changes_the_source_embedding() {
    let (model, tokens) = setup(true);
    assert_eq!(model.param("entity.position_embeddings").unwrap().value.shape()[0], 11);
    let seq = tokens.get(EntityId(2));
    let plain = model.embed_entity(seq).unwrap();
    let a = model.fuse_early(seq, rel(0)).unwrap();
    let b = model.fuse_early(seq, rel(1)).unwrap();
    assert!(max_abs(&plain, &a) > 1e-4);
    assert!(max_abs(&a, &b) > 1e-4);
}

#[test]
fn fusion_needs_an_extra_position() {
    let cfg = ModelConfig { max_len: 10, max_positions: 10, early_fusion: true, ..ModelConfig::default() };
    assert!(Model::<f32>::new(cfg).is_err());
}

#[test]
fn inventory_is_complete_and_unique() {
    let cfg = ModelConfig { relation_count: 3, ..ModelConfig::default() };
    let specs = param_specs(&cfg);
    assert_eq!(specs.len(), 5 + 4 + 2 + LAYER_TENSORS.len() * (cfg.entity_layers + cfg.context_layers));
    let mut names: Vec<_> = specs.iter().map(|(n, _)| n.clone()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), specs.len());
    let model = Model::<f32>::new(cfg).unwrap();
    assert!(model.params().iter().all(|p| p.tag == Tag::Fresh));
    assert_eq!(model.param("relation.embeddings").unwrap().value.shape(), &[6, 64]);
    assert_eq!(model.param("relation.unknown").unwrap().value.shape(), &[1, 64]);
}

#[test]
fn encoding_does_not_touch_parameters() {
    let (model, tokens) = setup(false);
    let before = model.clone();
    let src = model.embed_entity(tokens.get(EntityId(0))).unwrap();
    model.encode_context(&src, rel(0), &SupportSet::default(), &[]).unwrap();
    assert_eq!(model, before);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let opts = GradcheckOptions::default();
    for name in MODEL_CHECKS {
        let out = model_loss_check(name, &opts, 0).unwrap();
        assert!(out.passed, "{name}: {}", out.max_rel_err);
    }
}

#[test]
fn injected_sign_flip_is_caught() {
    let opts = GradcheckOptions { flip_sign: Some("model_loss".into()), ..GradcheckOptions::default() };
    let results = full_suite(&opts, 0).unwrap();
    let failed: Vec<_> = results.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    assert_eq!(failed, ["model_loss"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn embeddings_stay_finite_for_random_tokens(ids in proptest::collection::vec(4u32..32, 1..8)) {
        let model = Model::<f32>::new(ModelConfig { max_len: 10, max_positions: 10, d_model: 16, heads: 2, ffn_dim: 32, ..ModelConfig::default() }).unwrap();
        let mut seq = vec![2];
        seq.extend(&ids);
        seq.push(3);
        let active = seq.len();
        seq.resize(10, 0);
        let e = model.embed_entity(&TokenSequence { attention_mask: (0..10).map(|i| i < active).collect(), ids: seq }).unwrap();
        prop_assert!(e.iter().all(|x| x.is_finite()));
        let norm: f32 = e.iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assert!((norm - 4.0).abs() < 1e-3);
    }
}
