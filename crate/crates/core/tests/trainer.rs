use std::collections::HashSet;

use kgformer_autodiff::Tape;
use kgformer_core::batch::EntityTokens;
use kgformer_core::graphstore::{make_synthetic_kg, EntityId, KnowledgeGraphDataset, Query, SupportSet, SyntheticKg, SynthSpec};
use kgformer_core::model::{Model, ModelConfig, Tag, RELATION_TABLE};
use kgformer_core::textcodec::build_vocab;
use kgformer_core::trainer::{batch_loss, fit, sample_negatives, train_queries, Batch, TrainConfig, TrainError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    kg: SyntheticKg,
    tokens: EntityTokens,
    cfg: ModelConfig,
}

impl Fixture {
    fn new(early_fusion: bool) -> Self {
        let spec = SynthSpec { entities: 60, values_per_family: vec![4, 4, 4], relations: 3, ..SynthSpec::default() };
        let kg = make_synthetic_kg(&spec, 2).unwrap();
        let vocab = build_vocab(kg.dataset.surfaces().iter().map(String::as_str), 60).unwrap();
        let tokens = EntityTokens::build(&kg.dataset, &vocab, 10).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            heads: 2,
            entity_layers: 1,
            context_layers: 1,
            ffn_dim: 32,
            max_len: 10,
            max_positions: 11,
            max_neighbors: 3,
            relation_count: kg.dataset.train_relation_count(),
            vocab_size: vocab.len(),
            early_fusion,
            init_std: 0.3,
            seed: 5,
            ..ModelConfig::default()
        };
        Self { kg, tokens, cfg }
    }

    fn ds(&self) -> &KnowledgeGraphDataset {
        &self.kg.dataset
    }

    fn model(&self) -> Model<f32> {
        Model::new(self.cfg.clone()).unwrap()
    }
}

fn loss_of(model: &Model<f32>, tokens: &EntityTokens, batch: &Batch<'_>, cross: bool) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let loss = batch_loss(model, &mut tape, &bound, tokens, batch, cross, None).unwrap();
    tape.value(loss).item() as f64
}

/// Re-encodes every row on its own and scores it against its own candidate
/// list, with no sharing of entity encodings between rows.
fn unshared_oracle(model: &Model<f32>, tokens: &EntityTokens, batch: &Batch<'_>, cross: bool) -> f64 {
    let emb = |e: EntityId| -> Vec<f64> { model.embed_entity(tokens.get(e)).unwrap().into_iter().map(f64::from).collect() };
    let mut total = 0.0;
    for (i, q) in batch.queries.iter().enumerate() {
        let support = &batch.supports[i];
        let src: Vec<f32> = if model.config().early_fusion {
            model.fuse_early(tokens.get(q.source()), q.relation()).unwrap()
        } else {
            model.embed_entity(tokens.get(q.source())).unwrap()
        };
        let nbrs: Vec<Vec<f32>> = support.pairs.iter().map(|&(_, e)| model.embed_entity(tokens.get(e)).unwrap()).collect();
        let ctx: Vec<f64> = model.encode_context(&src, q.relation(), support, &nbrs).unwrap().into_iter().map(f64::from).collect();
        let dot = |e: EntityId| emb(e).iter().zip(&ctx).map(|(a, b)| a * b).sum::<f64>();
        let pos = q.target();
        let mut cands: Vec<EntityId> = batch.negatives.iter().copied().filter(|&e| e != pos).collect();
        if cross {
            let mut seen: HashSet<EntityId> = batch.negatives.iter().copied().collect();
            seen.insert(pos);
            for other in batch.queries {
                if seen.insert(other.target()) {
                    cands.push(other.target());
                }
            }
        }
        let s_pos = dot(pos);
        let scores: Vec<f64> = cands.iter().map(|&e| dot(e)).chain([s_pos]).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        total += lse - s_pos;
    }
    total / batch.queries.len() as f64
}

fn random_batch(fx: &Fixture, rng: &mut ChaCha8Rng) -> (Vec<Query>, Vec<SupportSet>, Vec<EntityId>) {
    let all = train_queries(fx.ds());
    let b = rng.gen_range(1..6);
    let queries: Vec<Query> = all.choose_multiple(rng, b).copied().collect();
    let supports = queries
        .iter()
        .map(|q| if rng.gen_bool(0.7) { fx.ds().neighbor_sample(q.source(), fx.cfg.max_neighbors, Some(&q.triplet), rng) } else { SupportSet::default() })
        .collect();
    let n = rng.gen_range(0..8);
    let mut negatives = sample_negatives(fx.ds().train_entities(), n, rng).unwrap();
    if rng.gen_bool(0.5) {
        negatives.push(queries[0].target());
        negatives.dedup();
    }
    (queries, supports, negatives)
}

#[test]
fn shared_negatives_match_unshared_oracle() {
    for fusion in [false, true] {
        let fx = Fixture::new(fusion);
        let model = fx.model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst = 0.0f64;
        for i in 0..50 {
            let (q, s, n) = random_batch(&fx, &mut rng);
            let batch = Batch { queries: &q, supports: &s, negatives: &n };
            let cross = i % 2 == 1;
            let got = loss_of(&model, &fx.tokens, &batch, cross);
            let want = unshared_oracle(&model, &fx.tokens, &batch, cross);
            worst = worst.max((got - want).abs());
        }
        assert!(worst <= 1e-5, "fusion={fusion}: max deviation {worst}");
    }
}

#[test]
fn no_negatives_gives_zero_loss() {
    let fx = Fixture::new(false);
    let q = train_queries(fx.ds())[..4].to_vec();
    let s = vec![SupportSet::default(); 4];
    let loss = loss_of(&fx.model(), &fx.tokens, &Batch { queries: &q, supports: &s, negatives: &[] }, false);
    assert_eq!(loss, 0.0);
}

#[test]
fn colliding_negative_is_masked() {
    let fx = Fixture::new(false);
    let q = vec![train_queries(fx.ds())[0]];
    let s = vec![SupportSet::default()];
    let loss = loss_of(&fx.model(), &fx.tokens, &Batch { queries: &q, supports: &s, negatives: &[q[0].target()] }, false);
    assert_eq!(loss, 0.0);
}

#[test]
fn indistinguishable_negative_gives_ln2() {
    let fx = Fixture::new(false);
    let q = vec![train_queries(fx.ds())[0]];
    let twin = EntityId(fx.ds().entity_count() as u32);
    let mut seqs: Vec<_> = (0..fx.ds().entity_count()).map(|i| fx.tokens.get(EntityId(i as u32)).clone()).collect();
    seqs.push(fx.tokens.get(q[0].target()).clone());
    let tokens = EntityTokens::from_sequences(seqs);
    let s = vec![SupportSet::default()];
    let loss = loss_of(&fx.model(), &tokens, &Batch { queries: &q, supports: &s, negatives: &[twin] }, false);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{loss}");
}

#[test]
fn batch_shape_errors() {
    let fx = Fixture::new(false);
    let mut tape = Tape::new();
    let model = fx.model();
    let bound = model.bind(&mut tape, true);
    let q = train_queries(fx.ds())[..2].to_vec();
    let err = batch_loss(&model, &mut tape, &bound, &fx.tokens, &Batch { queries: &q, supports: &[], negatives: &[] }, false, None);
    assert!(matches!(err, Err(TrainError::Contract(_))));
    let err = batch_loss(&model, &mut tape, &bound, &fx.tokens, &Batch { queries: &[], supports: &[], negatives: &[] }, false, None);
    assert!(matches!(err, Err(TrainError::Contract(_))));
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 16, negatives: 20, seed: 3, ..TrainConfig::default() }
}

#[test]
fn initial_loss_sits_in_the_sanity_band() {
    let fx = Fixture::new(false);
    let mut model = Model::<f32>::new(ModelConfig { init_std: 0.02, ..fx.cfg.clone() }).unwrap();
    let cfg = short_run(1);
    let trace = fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())).unwrap();
    // Own positive plus up to N negatives per row.
    let ln_c = ((cfg.negatives + 1) as f64).ln();
    assert!(trace[0].loss >= 0.5 * ln_c && trace[0].loss <= 2.0 * ln_c, "loss {} vs ln C {ln_c}", trace[0].loss);
}

#[test]
fn training_is_deterministic() {
    let fx = Fixture::new(false);
    let run = || {
        let mut model = fx.model();
        let cfg = short_run(6);
        let trace = fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())).unwrap();
        (trace, model)
    };
    let (t1, m1) = run();
    let (t2, m2) = run();
    assert_eq!(t1, t2);
    assert_eq!(m1, m2);
}

#[test]
fn dropout_runs_are_deterministic_too() {
    let fx = Fixture::new(false);
    let cfg = ModelConfig { dropout: 0.1, ..fx.cfg.clone() };
    let run = || {
        let mut model = Model::<f32>::new(cfg.clone()).unwrap();
        fit(&mut model, fx.ds(), &fx.tokens, &short_run(4), |_| Ok(())).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise_unchanged() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    let before = model.clone();
    let cfg = TrainConfig { peak_lr: 0.0, loaded_lr: 0.0, ..short_run(4) };
    fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())).unwrap();
    assert_eq!(model, before);
}

#[test]
fn loaded_group_uses_its_own_rate() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    model.set_all_tags(Tag::Loaded);
    model.param_mut(RELATION_TABLE).unwrap().tag = Tag::Fresh;
    let before = model.clone();
    let cfg = TrainConfig { loaded_lr: 0.0, weight_decay: 0.0, ..short_run(4) };
    let trace = fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())).unwrap();
    assert!(trace.iter().all(|r| r.lr_loaded == 0.0));
    for (a, b) in model.params().iter().zip(before.params()) {
        if a.name == RELATION_TABLE {
            assert_ne!(a.value, b.value);
        } else {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn trace_follows_the_schedule() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    let cfg = short_run(10);
    let mut seen = Vec::new();
    let trace = fit(&mut model, fx.ds(), &fx.tokens, &cfg, |r| {
        seen.push(r.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_eq!(trace[0].lr_fresh, 0.0);
    assert!((trace[1].lr_fresh - 5e-4).abs() < 1e-15);
    assert!((trace[1].lr_loaded - 3e-5).abs() < 1e-15);
    assert!(trace.windows(2).skip(1).all(|w| w[1].lr_fresh < w[0].lr_fresh));
}

#[test]
fn sink_errors_abort_training() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    let err = fit(&mut model, fx.ds(), &fx.tokens, &short_run(5), |r| if r.step == 2 { Err("disk full".into()) } else { Ok(()) });
    assert!(matches!(err, Err(TrainError::Sink(m)) if m == "disk full"));
}

#[test]
fn non_finite_loss_is_reported() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    model.param_mut("context.gcls").unwrap().value.data_mut()[0] = f32::NAN;
    let err = fit(&mut model, fx.ds(), &fx.tokens, &short_run(3), |_| Ok(()));
    assert!(matches!(err, Err(TrainError::NonFinite { step: 0, .. })));
}

#[test]
fn too_many_negatives_is_a_config_error() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    let cfg = TrainConfig { negatives: fx.ds().train_entities().len() + 1, ..short_run(1) };
    assert!(matches!(fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())), Err(TrainError::Config(_))));
    let cfg = TrainConfig { warmup_fraction: 1.0, ..short_run(1) };
    assert!(matches!(fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())), Err(TrainError::Config(_))));
}

#[test]
fn a_short_run_reduces_the_loss() {
    let fx = Fixture::new(false);
    let mut model = fx.model();
    let cfg = TrainConfig { steps: 60, batch_size: 32, negatives: 30, peak_lr: 2e-3, use_support: false, seed: 1, ..TrainConfig::default() };
    let trace = fit(&mut model, fx.ds(), &fx.tokens, &cfg, |_| Ok(())).unwrap();
    let head: f64 = trace[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let tail: f64 = trace[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn negatives_are_uniform_over_the_pool() {
    // Per-entity counts over many draws stay within 4σ of the binomial mean.
    let pool: Vec<EntityId> = (0..50).map(EntityId).collect();
    let (n, draws) = (10usize, 20_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = vec![0usize; pool.len()];
    for _ in 0..draws {
        let s = sample_negatives(&pool, n, &mut rng).unwrap();
        let distinct: HashSet<_> = s.iter().collect();
        assert_eq!(distinct.len(), n);
        for e in s {
            counts[e.index()] += 1;
        }
    }
    let p = n as f64 / pool.len() as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (e, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 4.0 * sd, "entity {e}: {c} vs {mean}±{sd}");
    }
}
