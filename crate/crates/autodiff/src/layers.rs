//! Post-norm Transformer encoder block built from tape primitives.

use rand::RngCore;

use crate::{AttentionSpec, Result, Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Tape handles for one encoder layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Active dropout for a training forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

fn maybe_dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) if d.p > 0.0 => tape.dropout(x, d.p, &mut *d.rng),
        _ => Ok(x),
    }
}

/// Self-attention + residual + layernorm, then GELU feed-forward + residual +
/// layernorm. `x` is `[S * L, d]` packed as described by `spec`.
pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &AttentionSpec<'_>,
    p: &EncoderLayerVars,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let q = tape.linear(x, p.wq, p.bq)?;
    let k = tape.linear(x, p.wk, p.bk)?;
    let v = tape.linear(x, p.wv, p.bv)?;
    let ctx = tape.attention(q, k, v, spec)?;
    let attn = tape.linear(ctx, p.wo, p.bo)?;
    let attn = maybe_dropout(tape, attn, &mut dropout)?;
    let h = tape.add(x, attn)?;
    let h = tape.layer_norm(h, p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS)?;

    let f = tape.linear(h, p.w1, p.b1)?;
    let f = tape.gelu(f)?;
    let f = tape.linear(f, p.w2, p.b2)?;
    let f = maybe_dropout(tape, f, &mut dropout)?;
    let out = tape.add(h, f)?;
    tape.layer_norm(out, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)
}

impl EncoderLayerVars {
    /// Handles in declaration order: `wq, bq, wk, bk, wv, bv, wo, bo,
    /// ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta`.
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), 16, "encoder layer has 16 weight tensors");
        Self {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            ln1_gamma: v[8],
            ln1_beta: v[9],
            w1: v[10],
            b1: v[11],
            w2: v[12],
            b2: v[13],
            ln2_gamma: v[14],
            ln2_beta: v[15],
        }
    }
}

/// Random layer weights in [`EncoderLayerVars::from_slice`] order; used by
/// tests and the gradient-check suite.
pub fn random_layer_tensors<T: Scalar, R: rand::Rng>(d: usize, ffn: usize, std: f64, rng: &mut R) -> Vec<Tensor<T>> {
    let shapes: [(usize, usize); 8] = [(d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d)];
    let mut out = Vec::with_capacity(16);
    let dense = |rows: usize, cols: usize, rng: &mut R| {
        let data = (0..rows * cols).map(|_| T::of(rng.gen_range(-1.0..1.0) * std * 3f64.sqrt())).collect();
        Tensor::new(vec![rows, cols], data).expect("shape")
    };
    let norm = |base: f64, rng: &mut R| {
        let data = (0..d).map(|_| T::of(base + rng.gen_range(-0.1..0.1))).collect();
        Tensor::new(vec![d], data).expect("shape")
    };
    for (r, c) in shapes {
        out.push(dense(r, c, rng));
    }
    out.push(norm(1.0, rng));
    out.push(norm(0.0, rng));
    out.push(dense(d, ffn, rng));
    out.push(dense(1, ffn, rng));
    out.push(dense(ffn, d, rng));
    out.push(dense(1, d, rng));
    out.push(norm(1.0, rng));
    out.push(norm(0.0, rng));
    out
}

pub fn random_layer<T: Scalar, R: rand::Rng>(tape: &mut Tape<T>, d: usize, ffn: usize, std: f64, rng: &mut R) -> EncoderLayerVars {
    let vars: Vec<Var> = random_layer_tensors(d, ffn, std, rng).into_iter().map(|t| tape.param(t)).collect();
    EncoderLayerVars::from_slice(&vars)
}
