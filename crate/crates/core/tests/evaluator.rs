use std::collections::HashSet;

use kgformer_core::batch::EntityTokens;
use kgformer_core::evaluator::{compute_metrics, evaluate_split, Directions, EvalOptions};
use kgformer_core::graphstore::{make_synthetic_kg, DatasetBuilder, Direction, EntityId, KnowledgeGraphDataset, Query, Split, SupportSet, SynthSpec};
use kgformer_core::model::{Model, ModelConfig};
use kgformer_core::textcodec::build_vocab;
use proptest::prelude::*;

fn fixture(inductive: f64) -> (KnowledgeGraphDataset, EntityTokens, ModelConfig) {
    let spec = SynthSpec { entities: 48, values_per_family: vec![4, 4, 3], relations: 3, inductive_fraction: inductive, dev_fraction: 0.15, test_fraction: 0.15, ..SynthSpec::default() };
    let ds = make_synthetic_kg(&spec, 6).unwrap().dataset;
    let vocab = build_vocab(ds.surfaces().iter().map(String::as_str), 50).unwrap();
    let tokens = EntityTokens::build(&ds, &vocab, 9).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        entity_layers: 1,
        context_layers: 1,
        ffn_dim: 32,
        max_len: 9,
        max_positions: 9,
        max_neighbors: 3,
        relation_count: ds.train_relation_count(),
        vocab_size: vocab.len(),
        init_std: 0.3,
        seed: 2,
        ..ModelConfig::default()
    };
    (ds, tokens, cfg)
}

/// Zero weights with a unit offset on the last norms: every entity and every
/// context encodes to the same vector, so all scores tie.
fn constant_model(cfg: &ModelConfig) -> Model<f32> {
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    let last_entity = format!("entity.layer{}.ffn.norm", cfg.entity_layers - 1);
    let last_context = format!("context.layer{}.ffn.norm", cfg.context_layers - 1);
    for p in model.params_mut() {
        let fill = if p.name == format!("{last_entity}.beta") || p.name == format!("{last_context}.beta") { 1.0 } else { 0.0 };
        p.value.data_mut().iter_mut().for_each(|x| *x = fill);
    }
    model
}

#[test]
fn two_queries_per_triplet() {
    let (ds, tokens, cfg) = fixture(0.0);
    let model = Model::<f32>::new(cfg).unwrap();
    let n = ds.split(Split::Test).len();
    let both = evaluate_split(&model, &ds, &tokens, Split::Test, &EvalOptions::default()).unwrap();
    assert_eq!(both.query_count(), 2 * n);
    assert_eq!(both.records.iter().filter(|r| r.direction == Direction::Tail).count(), n);
    let tail = evaluate_split(&model, &ds, &tokens, Split::Test, &EvalOptions { directions: Directions::Tail, ..EvalOptions::default() }).unwrap();
    assert_eq!(tail.query_count(), n);
    assert!(tail.head.is_none());
    assert_eq!(tail.tail, Some(tail.metrics));
}

#[test]
fn constant_scorer_ranks_last() {
    let (ds, tokens, cfg) = fixture(0.0);
    let model = constant_model(&cfg);
    let report = evaluate_split(&model, &ds, &tokens, Split::Test, &EvalOptions::default()).unwrap();
    let k = ds.entity_count();
    assert_eq!(report.pool_size, k);
    // Shift relations are functions, so no other answer is ever filtered.
    for r in &report.records {
        assert_eq!(r.rank, k);
        assert_eq!(r.raw_rank, k);
    }
    assert_eq!(report.metrics.mrr, 1.0 / k as f64);
    assert_eq!(report.metrics.hits10, 0.0);
}

/// Scores one query at a time through the per-query API in 64-bit and counts
/// unfiltered competitors that score at least as high.
fn brute_force_ranks(model: &Model<f64>, ds: &KnowledgeGraphDataset, tokens: &EntityTokens, split: Split) -> Vec<(usize, usize)> {
    let embs: Vec<Vec<f64>> = (0..ds.entity_count() as u32).map(|i| model.embed_entity(tokens.get(EntityId(i))).unwrap()).collect();
    let mut all: HashSet<(u32, u32, u32)> = HashSet::new();
    for s in Split::ALL {
        all.extend(ds.split(s).iter().map(|t| (t.subject.0, t.predicate.0, t.object.0)));
    }
    let mut out = Vec::new();
    for &t in ds.split(split) {
        for q in Query::both(t) {
            let ctx = model.encode_context(&embs[q.source().index()], q.relation(), &SupportSet::default(), &[]).unwrap();
            let score = |e: usize| embs[e].iter().zip(&ctx).map(|(a, b)| a * b).sum::<f64>();
            let gt = q.target().index();
            let s_gt = score(gt);
            let is_answer = |c: usize| match q.direction {
                Direction::Tail => all.contains(&(t.subject.0, t.predicate.0, c as u32)),
                Direction::Head => all.contains(&(c as u32, t.predicate.0, t.object.0)),
            };
            let (mut filt, mut raw) = (1, 1);
            for c in 0..ds.entity_count() {
                if c != gt && score(c) >= s_gt {
                    raw += 1;
                    if !is_answer(c) {
                        filt += 1;
                    }
                }
            }
            out.push((filt, raw));
        }
    }
    out
}

#[test]
fn ranks_match_brute_force() {
    for inductive in [0.0, 0.25] {
        let (ds, tokens, cfg) = fixture(inductive);
        let model = Model::<f64>::new(cfg).unwrap();
        let opts = EvalOptions { support: false, batch_size: 7, ..EvalOptions::default() };
        let report = evaluate_split(&model, &ds, &tokens, Split::Dev, &opts).unwrap();
        let got: Vec<(usize, usize)> = report.records.iter().map(|r| (r.rank, r.raw_rank)).collect();
        assert_eq!(got, brute_force_ranks(&model, &ds, &tokens, Split::Dev));
    }
}

#[test]
fn threads_and_chunking_do_not_change_ranks() {
    let (ds, tokens, cfg) = fixture(0.0);
    let model = Model::<f32>::new(cfg).unwrap();
    let reference = evaluate_split(&model, &ds, &tokens, Split::Train, &EvalOptions::default()).unwrap();
    for (threads, batch_size) in [(4, 16), (3, 1), (1, 1000)] {
        let other = evaluate_split(&model, &ds, &tokens, Split::Train, &EvalOptions { threads, batch_size, ..EvalOptions::default() }).unwrap();
        assert_eq!(other, reference);
    }
    let reseeded = evaluate_split(&model, &ds, &tokens, Split::Train, &EvalOptions { seed: 1, ..EvalOptions::default() }).unwrap();
    assert_eq!(reseeded.seed, 1);
}

#[test]
fn filtered_never_worse_than_raw_and_metrics_ordered() {
    let (ds, tokens, cfg) = fixture(0.0);
    let model = Model::<f32>::new(cfg).unwrap();
    for split in Split::ALL {
        let r = evaluate_split(&model, &ds, &tokens, split, &EvalOptions::default()).unwrap();
        assert!(r.records.iter().all(|q| q.rank <= q.raw_rank && q.rank >= 1 && q.raw_rank <= ds.entity_count()));
        let m = r.metrics;
        assert!(m.mrr >= m.hits1 && m.hits1 <= m.hits3 && m.hits3 <= m.hits10 && m.hits10 <= 1.0);
    }
}

#[test]
fn unseen_relations_fall_back_and_are_counted() {
    let mut b = DatasetBuilder::new();
    for (s, o) in [("a", "b"), ("b", "c"), ("c", "a")] {
        b.add(Split::Train, s, "r0", o);
    }
    b.add(Split::Dev, "a", "r0", "c");
    b.add(Split::Test, "a", "r_new", "b");
    for (e, t) in [("a", "alpha"), ("b", "beta"), ("c", "gamma")] {
        b.text(e, t);
    }
    let ds = b.build();
    let vocab = build_vocab(ds.surfaces().iter().map(String::as_str), 30).unwrap();
    let tokens = EntityTokens::build(&ds, &vocab, 6).unwrap();
    let cfg = ModelConfig { d_model: 8, heads: 2, entity_layers: 1, context_layers: 1, ffn_dim: 8, max_len: 6, max_positions: 6, relation_count: ds.train_relation_count(), vocab_size: vocab.len(), ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg).unwrap();
    let r = evaluate_split(&model, &ds, &tokens, Split::Test, &EvalOptions::default()).unwrap();
    assert_eq!(r.warnings.unknown_relation_queries, 2);
    let r = evaluate_split(&model, &ds, &tokens, Split::Dev, &EvalOptions::default()).unwrap();
    assert_eq!(r.warnings.unknown_relation_queries, 0);
}

#[test]
fn mismatched_tokens_are_rejected() {
    let (ds, _, cfg) = fixture(0.0);
    let model = Model::<f32>::new(cfg).unwrap();
    let tokens = EntityTokens::from_sequences(Vec::new());
    assert!(evaluate_split(&model, &ds, &tokens, Split::Test, &EvalOptions::default()).is_err());
}

#[test]
fn report_json_uses_external_ids() {
    let (ds, tokens, cfg) = fixture(0.0);
    let model = Model::<f32>::new(cfg).unwrap();
    let r = evaluate_split(&model, &ds, &tokens, Split::Test, &EvalOptions::default()).unwrap();
    let v = r.to_json(&ds);
    for key in ["split", "query_count", "pool_size", "seed", "metrics", "per_direction", "warnings", "records"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["split"], "test");
    assert_eq!(v["query_count"], r.query_count());
    let first = &v["records"][0];
    let t = ds.split(Split::Test)[0];
    assert_eq!(first["subject"], ds.entities().name(t.subject.0));
    assert_eq!(first["direction"], "tail");
}

proptest! {
    #[test]
    fn metrics_stay_ordered(ranks in proptest::collection::vec(1usize..500, 1..64)) {
        let m = compute_metrics(&ranks).unwrap();
        prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
        prop_assert!(m.mrr >= m.hits1 && m.mrr <= 1.0 && m.mrr > 0.0);
        let naive = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64;
        prop_assert!((m.mrr - naive).abs() < 1e-12);
    }
}
