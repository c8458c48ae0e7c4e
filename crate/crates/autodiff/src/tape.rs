//! Operation tape and reverse-mode replay.
//!
//! Every op appends one node holding its forward value plus whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse from a
//! scalar root, accumulates gradients, then drops the saved data.

use rand::Rng;

use crate::{AutodiffError, Result, Scalar, Tensor};

/// Additive bias applied to attention logits at masked key positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batch of equal-length sequences packed as `[S * L, d]` rows.
#[derive(Debug, Clone)]
pub struct AttentionSpec<'a> {
    pub heads: usize,
    pub seq_len: usize,
    /// `true` where a key position may be attended, length `S * L`.
    pub key_mask: &'a [bool],
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    AddConst { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for one backward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    recorded_ops: usize,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    // 1 + tanh(u) = 2 sigmoid(2u); exp is much cheaper than tanh in libm.
    let s = T::one() / (T::one() + (u * T::of(-2.0)).exp());
    let th = s + s - T::one();
    let y = x * s;
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(g.data_mut());
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), recorded_ops: 0, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf operations recorded since construction.
    pub fn recorded_ops(&self) -> usize {
        self.recorded_ops
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(AutodiffError::Contract(
                "tape was consumed by backward; start a new tape".into(),
            ));
        }
        if !matches!(op, Op::Leaf) {
            self.recorded_ops += 1;
        }
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(AutodiffError::Contract(format!("{op} expects a 2-d tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, b_t: false })
    }

    /// `a[m,k] @ b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, b_t: true })
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, rg, Op::Mul { a, b })
    }

    /// Adds `bias` (length = last extent of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return Err(shape_err("add_row", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(t, rg, Op::AddRow { x, bias })
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale { x, c })
    }

    /// Adds a non-differentiable tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(shape_err("add_const", vx.shape(), c.shape()));
        }
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::AddConst { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Gelu { x })
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.numel() != d || vb.numel() != d {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut out = vec![T::zero(); vx.numel()];
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(t, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Softmax { x })
    }

    /// Masked multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[S * L, d]`; heads split the last axis. Logits at
    /// masked keys receive [`MASK_LOGIT`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec<'_>) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [n, d] {
                return Err(shape_err("attention", &[n, d], self.value(other).shape()));
            }
        }
        let heads = spec.heads;
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::Config(format!(
                "model width {d} is not divisible by {heads} attention heads"
            )));
        }
        let l = spec.seq_len;
        if l == 0 || n % l != 0 {
            return Err(shape_err("attention", &[n], &[l]));
        }
        if spec.key_mask.len() != n {
            return Err(shape_err("attention", &[n], &[spec.key_mask.len()]));
        }
        let seqs = n / l;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let masked = T::of(MASK_LOGIT);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); seqs * heads * l * l];
        let mut out = vec![T::zero(); n * d];
        for s in 0..seqs {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let qi = &qd[(s * l + i) * d + off..(s * l + i) * d + off + dh];
                    let p = &mut probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                    for t in 0..l {
                        let kt = &kd[(s * l + t) * d + off..(s * l + t) * d + off + dh];
                        let dot: T = qi.iter().zip(kt).map(|(&a, &b)| a * b).sum();
                        p[t] = dot * scale + if spec.key_mask[s * l + t] { T::zero() } else { masked };
                    }
                    softmax_in_place(p);
                    let o = &mut out[(s * l + i) * d + off..(s * l + i) * d + off + dh];
                    for t in 0..l {
                        let vt = &vd[(s * l + t) * d + off..(s * l + t) * d + off + dh];
                        let pt = p[t];
                        for (oc, &vc) in o.iter_mut().zip(vt) {
                            *oc += pt * vc;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(t, rg, Op::Attention { q, k, v, heads, seq_len: l, probs })
    }

    /// Selects rows of `x` (viewed as `[rows, cols]`) in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::Index { op: "gather_rows", index: i, extent: rows });
            }
            data.extend_from_slice(vx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Stacks row blocks with a shared last extent.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Contract("concat_rows needs at least one input".into()));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != c {
                return Err(shape_err("concat_rows", self.value(first).shape(), vp.shape()));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        self.push(t, rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(AutodiffError::Contract("mean of an empty tensor".into()));
        }
        let s: T = vx.data().iter().copied().sum::<T>() / T::of(vx.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean { x })
    }

    /// Mean over rows of `−log softmax(logits_i)[targets_i]`.
    ///
    /// `logits` is `[B, C]` or `[C]` (one row). Entries with `valid == false`
    /// are excluded from the normalization, i.e. treated as `−∞`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: Option<&[bool]>) -> Result<Var> {
        let vl = self.value(logits);
        let (b, c) = (vl.rows(), vl.cols());
        if targets.len() != b {
            return Err(shape_err("cross_entropy", &[b], &[targets.len()]));
        }
        if b == 0 || c == 0 {
            return Err(AutodiffError::Contract("cross_entropy needs at least one class and one row".into()));
        }
        if let Some(mask) = valid {
            if mask.len() != b * c {
                return Err(shape_err("cross_entropy", &[b, c], &[mask.len()]));
            }
        }
        let is_valid = |i: usize| valid.is_none_or(|m| m[i]);
        let mut probs = vec![T::zero(); b * c];
        let mut total = 0.0f64;
        for r in 0..b {
            let t = targets[r];
            if t >= c {
                return Err(AutodiffError::Index { op: "cross_entropy", index: t, extent: c });
            }
            if !is_valid(r * c + t) {
                return Err(AutodiffError::Contract(format!("target {t} of row {r} is masked")));
            }
            let row = vl.row(r);
            let mut m = T::neg_infinity();
            for j in 0..c {
                if is_valid(r * c + j) && row[j] > m {
                    m = row[j];
                }
            }
            let mut z = T::zero();
            for j in 0..c {
                if is_valid(r * c + j) {
                    let e = (row[j] - m).exp();
                    probs[r * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / z;
            }
            total += ((m - row[t]) + z.ln()).as_f64();
        }
        let loss = T::of(total / b as f64);
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Dropout { x, mask })
    }

    /// Populates gradients of the scalar `loss` for every node that requires
    /// one, then clears the recorded operations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::Contract(
                "backward already ran on this tape; run a new forward first".into(),
            ));
        }
        if self.recorded_ops == 0 {
            return Err(AutodiffError::Contract("backward on an empty tape".into()));
        }
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root.shape()
            )));
        }
        self.grads[loss.0] = Some(Tensor::full(root.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            backprop_node(&self.nodes, &self.nodes[i], g, lower);
        }
        for (node, grad) in self.nodes.iter_mut().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_t } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = node.value.shape()[1];
            if needs(*a) {
                // dA = G·Bᵀ, or G·B when the forward used Bᵀ.
                accumulate(&mut grads[a.0], val(*a).shape(), |da| {
                    T::gemm(m, n, k, gd, false, val(*b).data(), !*b_t, da, true)
                });
            }
            if needs(*b) {
                accumulate(&mut grads[b.0], val(*b).shape(), |db| {
                    if *b_t {
                        T::gemm(n, m, k, gd, true, val(*a).data(), false, db, true)
                    } else {
                        T::gemm(k, m, n, val(*a).data(), true, gd, false, db, true)
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if needs(v) {
                    accumulate(&mut grads[v.0], val(v).shape(), |d| d.iter_mut().zip(gd).for_each(|(o, &x)| *o += x));
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                accumulate(&mut grads[a.0], val(*a).shape(), |d| d.iter_mut().zip(gd).for_each(|(o, &x)| *o += x));
            }
            if needs(*b) {
                accumulate(&mut grads[b.0], val(*b).shape(), |d| d.iter_mut().zip(gd).for_each(|(o, &x)| *o -= x));
            }
        }
        Op::Mul { a, b } => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if needs(v) {
                    let od = val(other).data();
                    accumulate(&mut grads[v.0], val(v).shape(), |d| {
                        for ((o, &x), &y) in d.iter_mut().zip(gd).zip(od) {
                            *o += x * y;
                        }
                    });
                }
            }
        }
        Op::AddRow { x, bias } => {
            if needs(*x) {
                accumulate(&mut grads[x.0], val(*x).shape(), |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
            }
            if needs(*bias) {
                let c = val(*bias).numel();
                accumulate(&mut grads[bias.0], val(*bias).shape(), |d| {
                    for row in gd.chunks(c.max(1)) {
                        d.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            if needs(*x) {
                accumulate(&mut grads[x.0], val(*x).shape(), |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * *c));
            }
        }
        Op::AddConst { x } => {
            if needs(*x) {
                accumulate(&mut grads[x.0], val(*x).shape(), |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
            }
        }
        Op::Gelu { x } => {
            if needs(*x) {
                let xd = val(*x).data();
                accumulate(&mut grads[x.0], val(*x).shape(), |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(xd) {
                        *o += gv * gelu_parts(xv).1;
                    }
                });
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dmodel = val(*gamma).numel();
            let rows = rstd.len();
            let gam = val(*gamma).data();
            if needs(*gamma) {
                accumulate(&mut grads[gamma.0], val(*gamma).shape(), |d| {
                    for r in 0..rows {
                        for j in 0..dmodel {
                            d[j] += gd[r * dmodel + j] * xhat[r * dmodel + j];
                        }
                    }
                });
            }
            if needs(*beta) {
                accumulate(&mut grads[beta.0], val(*beta).shape(), |d| {
                    for r in 0..rows {
                        for j in 0..dmodel {
                            d[j] += gd[r * dmodel + j];
                        }
                    }
                });
            }
            if needs(*x) {
                let inv_d = T::of(1.0 / dmodel as f64);
                accumulate(&mut grads[x.0], val(*x).shape(), |d| {
                    for r in 0..rows {
                        let base = r * dmodel;
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..dmodel {
                            let dh = gd[base + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        for j in 0..dmodel {
                            let dh = gd[base + j] * gam[j];
                            d[base + j] += rstd[r] * (dh - inv_d * sum_dh - xhat[base + j] * inv_d * sum_dh_h);
                        }
                    }
                });
            }
        }
        Op::Softmax { x } => {
            if needs(*x) {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                accumulate(&mut grads[x.0], val(*x).shape(), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
        }
        Op::Attention { q, k, v, heads, seq_len, probs } => {
            attention_backward(nodes, *q, *k, *v, *heads, *seq_len, probs, gd, grads);
        }
        Op::GatherRows { x, idx } => {
            if needs(*x) {
                let c = val(*x).cols();
                accumulate(&mut grads[x.0], val(*x).shape(), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += gd[r * c + j];
                        }
                    }
                });
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                if needs(p) {
                    let chunk = &gd[off..off + n];
                    accumulate(&mut grads[p.0], val(p).shape(), |d| d.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v));
                }
                off += n;
            }
        }
        Op::Sum { x } => {
            if needs(*x) {
                let g0 = gd[0];
                accumulate(&mut grads[x.0], val(*x).shape(), |d| d.iter_mut().for_each(|o| *o += g0));
            }
        }
        Op::Mean { x } => {
            if needs(*x) {
                let g0 = gd[0] / T::of(val(*x).numel() as f64);
                accumulate(&mut grads[x.0], val(*x).shape(), |d| d.iter_mut().for_each(|o| *o += g0));
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if needs(*logits) {
                let c = val(*logits).cols();
                let b = targets.len();
                let g0 = gd[0] / T::of(b as f64);
                accumulate(&mut grads[logits.0], val(*logits).shape(), |d| {
                    for r in 0..b {
                        for j in 0..c {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            d[r * c + j] += g0 * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
        Op::Dropout { x, mask } => {
            if needs(*x) {
                accumulate(&mut grads[x.0], val(*x).shape(), |d| {
                    for ((o, &gv), &m) in d.iter_mut().zip(gd).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    l: usize,
    probs: &[T],
    gd: &[T],
    grads: &mut [Option<Tensor<T>>],
) {
    let shape = nodes[q.0].value.shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    let seqs = n / l;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); l];
    for s in 0..seqs {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                let gi = &gd[(s * l + i) * d + off..(s * l + i) * d + off + dh];
                let mut dot = T::zero();
                for t in 0..l {
                    let vt = &vd[(s * l + t) * d + off..(s * l + t) * d + off + dh];
                    dp[t] = gi.iter().zip(vt).map(|(&a, &b)| a * b).sum();
                    dot += p[t] * dp[t];
                    let dvt = &mut dv[(s * l + t) * d + off..(s * l + t) * d + off + dh];
                    for (o, &gv) in dvt.iter_mut().zip(gi) {
                        *o += p[t] * gv;
                    }
                }
                let qi_base = (s * l + i) * d + off;
                for t in 0..l {
                    let ds = p[t] * (dp[t] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kt_base = (s * l + t) * d + off;
                    for c in 0..dh {
                        dq[qi_base + c] += ds * kd[kt_base + c];
                        dk[kt_base + c] += ds * qd[qi_base + c];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if nodes[var.0].requires_grad {
            accumulate(&mut grads[var.0], &shape, |d| d.iter_mut().zip(&buf).for_each(|(o, &x)| *o += x));
        }
    }
}
