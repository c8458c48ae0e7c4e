//! Central finite-difference checks against the tape's analytic gradients,
//! always in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{encoder_layer_forward, random_layer_tensors, EncoderLayerVars};
use crate::{AttentionSpec, Result, Tape, Tensor, Var};

/// Difference step and acceptance threshold.
#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Fault injection: negate the analytic gradient of the named check.
    pub flip_sign: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-3, flip_sign: None }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `f` with respect to every tensor in `inputs`.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], opts: &GradcheckOptions, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let flip = opts.flip_sign.as_deref() == Some(name);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let mut analytic = tape.grad(*var).expect("grad populated").data().to_vec();
        if flip {
            analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - opts.step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * opts.step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckOutcome { name: name.to_string(), max_rel_err: worst, passed: worst <= opts.tolerance })
}

/// Names accepted by [`check_op`].
pub const OP_CHECKS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "add_const",
    "gelu",
    "layer_norm",
    "softmax",
    "attention",
    "gather_rows",
    "concat_rows",
    "sum",
    "mean",
    "cross_entropy",
    "cross_entropy_masked",
    "dropout",
    "encoder_layer",
    "layernorm_attention",
];

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).expect("shape")
}

/// Projects `y` onto fixed random weights so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Runs the named check on random inputs drawn from `rng`.
pub fn check_op<R: Rng>(name: &str, rng: &mut R, opts: &GradcheckOptions) -> Result<CheckOutcome> {
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(1..5);
    let n = rng.gen_range(1..4);
    match name {
        "matmul" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[k, n], 1.0)];
            let w = rand_tensor(rng, &[m, n], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        "matmul_nt" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[n, k], 1.0)];
            let w = rand_tensor(rng, &[m, n], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        "add" | "sub" | "mul" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[m, k], 1.0)];
            let w = rand_tensor(rng, &[m, k], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, &w)
            })
        }
        "add_row" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[k], 1.0)];
            let w = rand_tensor(rng, &[m, k], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        "scale" | "add_const" | "gelu" => {
            let inputs = [rand_tensor(rng, &[m, k], 2.0)];
            let w = rand_tensor(rng, &[m, k], 1.0);
            let c = rand_tensor(rng, &[m, k], 1.0);
            let factor = rng.gen_range(-2.0..2.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = match name {
                    "scale" => t.scale(v[0], factor)?,
                    "add_const" => t.add_const(v[0], &c)?,
                    _ => t.gelu(v[0])?,
                };
                project(t, y, &w)
            })
        }
        "layer_norm" => {
            let d = k + 2;
            let inputs = [rand_tensor(rng, &[m, d], 1.0), rand_tensor(rng, &[d], 1.0), rand_tensor(rng, &[d], 1.0)];
            let w = rand_tensor(rng, &[m, d], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], crate::LAYER_NORM_EPS)?;
                project(t, y, &w)
            })
        }
        "softmax" => {
            let inputs = [rand_tensor(rng, &[m, k], 2.0)];
            let w = rand_tensor(rng, &[m, k], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.softmax(v[0])?;
                project(t, y, &w)
            })
        }
        "attention" | "layernorm_attention" => {
            let heads = rng.gen_range(1..3);
            // Two-wide rows make layernorm a sign function; keep rows wider.
            let d = heads * rng.gen_range(2..4).max(4 / heads);
            let seqs = rng.gen_range(1..3);
            let l = rng.gen_range(1..5);
            let mask: Vec<bool> = (0..seqs * l).map(|i| i % l == 0 || rng.gen_bool(0.7)).collect();
            let inputs = [
                rand_tensor(rng, &[seqs * l, d], 1.0),
                rand_tensor(rng, &[seqs * l, d], 1.0),
                rand_tensor(rng, &[seqs * l, d], 1.0),
                rand_tensor(rng, &[d], 1.0),
                rand_tensor(rng, &[d], 1.0),
            ];
            let w = rand_tensor(rng, &[seqs * l, d], 1.0);
            let composite = name == "layernorm_attention";
            check_gradients(name, &inputs, opts, |t, v| {
                let spec = AttentionSpec { heads, seq_len: l, key_mask: &mask };
                let y = t.attention(v[0], v[1], v[2], &spec)?;
                let y = if composite { t.layer_norm(y, v[3], v[4], crate::LAYER_NORM_EPS)? } else { y };
                project(t, y, &w)
            })
        }
        "gather_rows" => {
            let rows = m + 1;
            let idx: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..rows)).collect();
            let inputs = [rand_tensor(rng, &[rows, k], 1.0)];
            let w = rand_tensor(rng, &[idx.len(), k], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.gather_rows(v[0], &idx)?;
                project(t, y, &w)
            })
        }
        "concat_rows" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[n, k], 1.0)];
            let w = rand_tensor(rng, &[m + n, k], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                project(t, y, &w)
            })
        }
        "sum" | "mean" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0)];
            check_gradients(name, &inputs, opts, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                if name == "sum" { t.sum(sq) } else { t.mean(sq) }
            })
        }
        "cross_entropy" | "cross_entropy_masked" => {
            let c = k + 1;
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
            let valid: Option<Vec<bool>> = (name == "cross_entropy_masked").then(|| {
                (0..m * c).map(|i| targets[i / c] == i % c || rng.gen_bool(0.6)).collect()
            });
            let inputs = [rand_tensor(rng, &[m, c], 3.0)];
            check_gradients(name, &inputs, opts, |t, v| t.cross_entropy(v[0], &targets, valid.as_deref()))
        }
        "dropout" => {
            let inputs = [rand_tensor(rng, &[m, k], 1.0)];
            let w = rand_tensor(rng, &[m, k], 1.0);
            let seed = rng.gen::<u64>();
            check_gradients(name, &inputs, opts, |t, v| {
                let mut local = ChaCha8Rng::seed_from_u64(seed);
                let y = t.dropout(v[0], 0.3, &mut local)?;
                project(t, y, &w)
            })
        }
        "encoder_layer" => {
            let heads = 2;
            let d = 4;
            let l = rng.gen_range(1..4);
            let seqs = rng.gen_range(1..3);
            let mask: Vec<bool> = (0..seqs * l).map(|i| i % l == 0 || rng.gen_bool(0.7)).collect();
            let mut inputs = vec![rand_tensor(rng, &[seqs * l, d], 1.0)];
            inputs.extend(random_layer_tensors::<f64, _>(d, 2 * d, 0.4, rng));
            let w = rand_tensor(rng, &[seqs * l, d], 1.0);
            check_gradients(name, &inputs, opts, |t, v| {
                let spec = AttentionSpec { heads, seq_len: l, key_mask: &mask };
                let layer = EncoderLayerVars::from_slice(&v[1..]);
                let y = encoder_layer_forward(t, v[0], &spec, &layer, None)?;
                project(t, y, &w)
            })
        }
        other => Err(crate::AutodiffError::Config(format!("unknown gradient check {other:?}"))),
    }
}

/// Every primitive check once, seeded.
pub fn op_suite(opts: &GradcheckOptions, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OP_CHECKS.iter().map(|name| check_op(name, &mut rng, opts)).collect()
}
