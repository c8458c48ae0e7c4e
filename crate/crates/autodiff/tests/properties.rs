use kgformer_autodiff::gradcheck::{check_op, GradcheckOptions, OP_CHECKS};
use kgformer_autodiff::{AttentionSpec, Tape, Tensor, LAYER_NORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let opts = GradcheckOptions::default();
        for name in OP_CHECKS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outcome = check_op(name, &mut rng, &opts).unwrap();
            prop_assert!(outcome.passed, "{} rel err {}", name, outcome.max_rel_err);
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&mut rng, &[rows, cols], 20.0).cast());
        let y = tape.softmax(x).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&mut rng, &[rows, cols], 5.0));
        let g = tape.constant(Tensor::full(vec![cols], 1.0));
        let b = tape.constant(Tensor::zeros(vec![cols]));
        let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn attention_ignores_masked_values(seed in any::<u64>(), l in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let valid = rng.gen_range(1..l);
        let mask: Vec<bool> = (0..l).map(|i| i < valid).collect();
        let q = random(&mut rng, &[l, d], 1.0);
        let k = random(&mut rng, &[l, d], 1.0);
        let v = random(&mut rng, &[l, d], 1.0);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for i in valid * d..l * d {
            k2.data_mut()[i] = rng.gen_range(-100.0..100.0);
            v2.data_mut()[i] = rng.gen_range(-100.0..100.0);
        }
        let mut tape = Tape::<f64>::new();
        let spec = AttentionSpec { heads: 2, seq_len: l, key_mask: &mask };
        let (q, k, v, k2, v2) = (tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(k2), tape.constant(v2));
        let a = tape.attention(q, k, v, &spec).unwrap();
        let b = tape.attention(q, k2, v2, &spec).unwrap();
        prop_assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f32>::new();
            let layer = kgformer_autodiff::layers::random_layer(&mut tape, 8, 16, 0.2, &mut rng);
            let x = tape.constant(random(&mut rng, &[6, 8], 1.0).cast());
            let spec = AttentionSpec { heads: 2, seq_len: 3, key_mask: &[true, true, false, true, false, false] };
            let y = kgformer_autodiff::encoder_layer_forward(&mut tape, x, &spec, &layer, None).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
