//! Single-head transformer block without residuals or normalization:
//!
//! ```text
//! Q = X W_q, K = X W_k, V = X W_v
//! A_s = softmax(Q Kᵀ / √n),  A_h = A_s V,  A_o = A_h W_o
//! Z̃₁ = A_o W₁,  Z₁ = tanh(Z̃₁),  Z₂ = Z₁ W₂
//! ```
//!
//! In subspace mode every weight is `W + P B` with `P_q = P_k = P_v`, and
//! the tape keeps `s × r` projections (`XP`, `A_h P_o`, `A_o P₁`, `Z₁ P₂`) in
//! place of the `s × n` activations that only feed a weight gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, RngStream};

/// FFN hidden width is `FFN_MULT · n`.
pub const FFN_MULT: usize = 4;
/// Projected matrices per block: q, k, v, o, ffn_in, ffn_out.
pub const LAYERS_PER_BLOCK: usize = 6;

/// `(m, n)` of the six block matrices for model width `n`.
pub fn block_layer_shapes(n: usize) -> [(usize, usize); LAYERS_PER_BLOCK] {
    let h = FFN_MULT * n;
    [(n, n), (n, n), (n, n), (n, n), (n, h), (h, n)]
}

/// Projection group of each block matrix relative to the block: q, k and v
/// share one projection.
pub const BLOCK_GROUPS: [usize; LAYERS_PER_BLOCK] = [0, 0, 0, 1, 2, 3];
/// Distinct projections per block.
pub const GROUPS_PER_BLOCK: usize = 4;

fn take_six<T: Clone>(mats: &[Matrix<T>], op: &'static str) -> Result<[Matrix<T>; LAYERS_PER_BLOCK]> {
    <[Matrix<T>; LAYERS_PER_BLOCK]>::try_from(mats.to_vec())
        .map_err(|v| Error::shape(op, format!("expected 6 matrices, got {}", v.len())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub out: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_out: Matrix<T>,
}

impl<T: Scalar> BlockWeights<T> {
    /// Entries `N(0, 1/fan_in)`.
    pub fn random(n: usize, rng: &mut RngStream) -> Result<Self> {
        let [q, k, v, o, f1, f2] = block_layer_shapes(n)
            .map(|(m, c)| rng.gauss(m, c, 1.0 / (m as f64).sqrt()));
        Ok(Self {
            query: q?,
            key: k?,
            value: v?,
            out: o?,
            ffn_in: f1?,
            ffn_out: f2?,
        })
    }

    pub fn zeros(n: usize) -> Self {
        let [q, k, v, o, f1, f2] = block_layer_shapes(n).map(|(m, c)| Matrix::zeros(m, c));
        Self {
            query: q,
            key: k,
            value: v,
            out: o,
            ffn_in: f1,
            ffn_out: f2,
        }
    }

    /// From `[q, k, v, o, ffn_in, ffn_out]`.
    pub fn from_layers(mats: &[Matrix<T>]) -> Result<Self> {
        let [query, key, value, out, ffn_in, ffn_out] = take_six(mats, "BlockWeights::from_layers")?;
        let w = Self {
            query,
            key,
            value,
            out,
            ffn_in,
            ffn_out,
        };
        let n = w.dim();
        if w.layers().map(Matrix::shape) != block_layer_shapes(n) {
            return Err(Error::shape("BlockWeights::from_layers", "inconsistent block shapes"));
        }
        Ok(w)
    }

    pub fn layers(&self) -> [&Matrix<T>; LAYERS_PER_BLOCK] {
        [&self.query, &self.key, &self.value, &self.out, &self.ffn_in, &self.ffn_out]
    }

    pub fn into_layers(self) -> Vec<Matrix<T>> {
        vec![self.query, self.key, self.value, self.out, self.ffn_in, self.ffn_out]
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }
}

/// `P` (shared by q/k/v, `n × r`), `P_o` (`n × r`), `P₁` (`n × r`),
/// `P₂` (`4n × r`).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockProjections<T> {
    pub qkv: Matrix<T>,
    pub out: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_out: Matrix<T>,
}

impl<T: Scalar> BlockProjections<T> {
    pub fn random(n: usize, r: usize, kind: crate::projection::ProjectionKind, rng: &mut RngStream) -> Result<Self> {
        use crate::projection::sample_projection;
        Ok(Self {
            qkv: sample_projection(rng, n, r, kind)?,
            out: sample_projection(rng, n, r, kind)?,
            ffn_in: sample_projection(rng, n, r, kind)?,
            ffn_out: sample_projection(rng, FFN_MULT * n, r, kind)?,
        })
    }

    /// From per-layer projections `[P_q, P_k, P_v, P_o, P₁, P₂]`; the three
    /// attention projections must be identical.
    pub fn from_layers(mats: &[Matrix<T>]) -> Result<Self> {
        let [q, k, v, out, ffn_in, ffn_out] = take_six(mats, "BlockProjections::from_layers")?;
        if q != k || q != v {
            return Err(Error::Config("query/key/value projections must be shared".into()));
        }
        Ok(Self {
            qkv: q,
            out,
            ffn_in,
            ffn_out,
        })
    }

    /// Per-layer view `[P, P, P, P_o, P₁, P₂]`.
    pub fn to_layers(&self) -> Vec<Matrix<T>> {
        vec![
            self.qkv.clone(),
            self.qkv.clone(),
            self.qkv.clone(),
            self.out.clone(),
            self.ffn_in.clone(),
            self.ffn_out.clone(),
        ]
    }

    pub fn rank(&self) -> usize {
        self.qkv.cols()
    }
}

/// Subspace variables: `r × n` except `ffn_in`, which is `r × 4n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSubspace<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub out: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_out: Matrix<T>,
}

impl<T: Scalar> BlockSubspace<T> {
    pub fn zeros(n: usize, r: usize) -> Self {
        let z = || Matrix::zeros(r, n);
        Self {
            query: z(),
            key: z(),
            value: z(),
            out: z(),
            ffn_in: Matrix::zeros(r, FFN_MULT * n),
            ffn_out: z(),
        }
    }

    pub fn random(n: usize, r: usize, std: f64, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            query: rng.gauss(r, n, std)?,
            key: rng.gauss(r, n, std)?,
            value: rng.gauss(r, n, std)?,
            out: rng.gauss(r, n, std)?,
            ffn_in: rng.gauss(r, FFN_MULT * n, std)?,
            ffn_out: rng.gauss(r, n, std)?,
        })
    }

    pub fn from_layers(mats: &[Matrix<T>]) -> Result<Self> {
        let [query, key, value, out, ffn_in, ffn_out] = take_six(mats, "BlockSubspace::from_layers")?;
        Ok(Self {
            query,
            key,
            value,
            out,
            ffn_in,
            ffn_out,
        })
    }

    pub fn layers(&self) -> [&Matrix<T>; LAYERS_PER_BLOCK] {
        [&self.query, &self.key, &self.value, &self.out, &self.ffn_in, &self.ffn_out]
    }

    pub fn into_layers(self) -> Vec<Matrix<T>> {
        vec![self.query, self.key, self.value, self.out, self.ffn_in, self.ffn_out]
    }

    /// Effective weights `W + P B` for every block matrix.
    pub fn effective(&self, w: &BlockWeights<T>, p: &BlockProjections<T>) -> Result<BlockWeights<T>> {
        Ok(BlockWeights {
            query: w.query.add_product(&p.qkv, &self.query)?,
            key: w.key.add_product(&p.qkv, &self.key)?,
            value: w.value.add_product(&p.qkv, &self.value)?,
            out: w.out.add_product(&p.out, &self.out)?,
            ffn_in: w.ffn_in.add_product(&p.ffn_in, &self.ffn_in)?,
            ffn_out: w.ffn_out.add_product(&p.ffn_out, &self.ffn_out)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BlockMode<'a, T> {
    Full,
    Rso {
        proj: &'a BlockProjections<T>,
        sub: &'a BlockSubspace<T>,
    },
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BlockOptions {
    pub causal: bool,
    /// Block position, used only in error messages.
    pub index: usize,
}

/// Full-mode tape: `X, Q, K, V, Ã_s, A_s, A_h, A_o, Z̃₁, Z₁, Z₂`.
#[derive(Clone, Debug)]
pub struct FullTape<T> {
    pub input: Matrix<T>,
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub scores: Matrix<T>,
    pub attn: Matrix<T>,
    pub heads: Matrix<T>,
    pub attn_out: Matrix<T>,
    pub ffn_pre: Matrix<T>,
    pub ffn_act: Matrix<T>,
    pub output: Matrix<T>,
}

/// Subspace-mode tape: `XP, Q, K, V, Ã_s, A_s, A_h P_o, A_o P₁, Z̃₁, Z₁ P₂, Z₂`.
#[derive(Clone, Debug)]
pub struct RsoTape<T> {
    pub input_proj: Matrix<T>,
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub scores: Matrix<T>,
    pub attn: Matrix<T>,
    pub heads_proj: Matrix<T>,
    pub attn_out_proj: Matrix<T>,
    pub ffn_pre: Matrix<T>,
    pub ffn_act_proj: Matrix<T>,
    pub output: Matrix<T>,
}

#[derive(Clone, Debug)]
pub enum ActivationTape<T> {
    Full(FullTape<T>),
    Rso(RsoTape<T>),
}

impl<T: Scalar> ActivationTape<T> {
    /// Stored scalar count.
    pub fn entry_count(&self) -> usize {
        match self {
            ActivationTape::Full(t) => [
                &t.input, &t.query, &t.key, &t.value, &t.scores, &t.attn, &t.heads, &t.attn_out,
                &t.ffn_pre, &t.ffn_act, &t.output,
            ]
            .iter()
            .map(|m| m.len())
            .sum(),
            ActivationTape::Rso(t) => [
                &t.input_proj, &t.query, &t.key, &t.value, &t.scores, &t.attn, &t.heads_proj,
                &t.attn_out_proj, &t.ffn_pre, &t.ffn_act_proj, &t.output,
            ]
            .iter()
            .map(|m| m.len())
            .sum(),
        }
    }

    pub fn attn(&self) -> &Matrix<T> {
        match self {
            ActivationTape::Full(t) => &t.attn,
            ActivationTape::Rso(t) => &t.attn,
        }
    }

    pub fn output(&self) -> &Matrix<T> {
        match self {
            ActivationTape::Full(t) => &t.output,
            ActivationTape::Rso(t) => &t.output,
        }
    }

    fn mode_name(&self) -> &'static str {
        match self {
            ActivationTape::Full(_) => "full",
            ActivationTape::Rso(_) => "rso",
        }
    }
}

/// Weight gradients (`∂W` in full mode, `∂B` in subspace mode) and `∂X`.
#[derive(Clone, Debug)]
pub struct BlockGradients<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub out: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_out: Matrix<T>,
    pub input: Matrix<T>,
}

impl<T: Scalar> BlockGradients<T> {
    /// The six weight gradients in layer order; `∂X` is dropped.
    pub fn into_layers(self) -> Vec<Matrix<T>> {
        vec![self.query, self.key, self.value, self.out, self.ffn_in, self.ffn_out]
    }

    pub fn layers(&self) -> [&Matrix<T>; LAYERS_PER_BLOCK] {
        [&self.query, &self.key, &self.value, &self.out, &self.ffn_in, &self.ffn_out]
    }
}

/// Row-wise softmax of `scores / √n`; with `causal`, entries above the
/// diagonal are exactly zero.
fn softmax_rows<T: Scalar>(scores: &Matrix<T>, n: usize, causal: bool) -> Matrix<T> {
    let inv_sqrt = T::one() / T::of_usize(n).sqrt();
    let (s, t) = scores.shape();
    let mut out = Matrix::zeros(s, t);
    for i in 0..s {
        let width = if causal { (i + 1).min(t) } else { t };
        let row = &scores.row(i)[..width];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let dst = &mut out.row_mut(i)[..width];
        let mut total = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = ((x - max) * inv_sqrt).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Exact row-wise softmax JVP, `∂logits = A ⊙ (∂A − rowsum(∂A ⊙ A))`,
/// returned already divided by `√n` (the gradient with respect to raw scores).
fn softmax_backward<T: Scalar>(attn: &Matrix<T>, d_attn: &Matrix<T>, n: usize) -> Matrix<T> {
    let inv_sqrt = T::one() / T::of_usize(n).sqrt();
    let (s, t) = attn.shape();
    let mut out = Matrix::zeros(s, t);
    for i in 0..s {
        let a = attn.row(i);
        let da = d_attn.row(i);
        let inner: T = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
        for ((o, &x), &y) in out.row_mut(i).iter_mut().zip(a).zip(da) {
            *o = x * (y - inner) * inv_sqrt;
        }
    }
    out
}

/// `x W + (x P) B`, with `x P` supplied.
fn shifted_product<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, xp: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    x.matmul(w)?.add(&xp.matmul(b)?)
}

/// `d (W + P B)ᵀ = d Wᵀ + (d Bᵀ) Pᵀ` without forming `W + P B`.
fn times_shifted_t<T: Scalar>(d: &Matrix<T>, w: &Matrix<T>, p: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    d.matmul_nt(w)?.add(&d.matmul_nt(b)?.matmul_nt(p)?)
}

fn check_input<T: Scalar>(x: &Matrix<T>, w: &BlockWeights<T>) -> Result<()> {
    let n = w.dim();
    if w.layers().map(Matrix::shape) != block_layer_shapes(n) {
        return Err(Error::shape("block_forward", "inconsistent block weight shapes"));
    }
    if x.cols() != n || x.rows() == 0 {
        return Err(Error::shape(
            "block_forward",
            format!("input {:?} for model width {n}", x.shape()),
        ));
    }
    Ok(())
}

fn check_subspace<T: Scalar>(n: usize, proj: &BlockProjections<T>, sub: &BlockSubspace<T>) -> Result<()> {
    let r = proj.rank();
    let h = FFN_MULT * n;
    let ok = proj.qkv.shape() == (n, r)
        && proj.out.shape() == (n, r)
        && proj.ffn_in.shape() == (n, r)
        && proj.ffn_out.shape() == (h, r)
        && sub.query.shape() == (r, n)
        && sub.key.shape() == (r, n)
        && sub.value.shape() == (r, n)
        && sub.out.shape() == (r, n)
        && sub.ffn_in.shape() == (r, h)
        && sub.ffn_out.shape() == (r, n);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            "block_forward",
            format!("projections/subspace do not conform to width {n}, rank {r}"),
        ))
    }
}

/// Forward pass; returns `Z₂` and the tape needed by [`block_backward`].
pub fn block_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    mode: BlockMode<'_, T>,
    opts: BlockOptions,
) -> Result<(Matrix<T>, ActivationTape<T>)> {
    check_input(x, w)?;
    let n = w.dim();
    let at = |what: &str| format!("block {} {what}", opts.index);
    match mode {
        BlockMode::Full => {
            let query = x.matmul(&w.query)?;
            let key = x.matmul(&w.key)?;
            let value = x.matmul(&w.value)?;
            let scores = query.matmul_nt(&key)?;
            scores.ensure_finite(|| at("attention scores"))?;
            let attn = softmax_rows(&scores, n, opts.causal);
            let heads = attn.matmul(&value)?;
            let attn_out = heads.matmul(&w.out)?;
            let ffn_pre = attn_out.matmul(&w.ffn_in)?;
            let ffn_act = ffn_pre.map(T::tanh);
            let output = ffn_act.matmul(&w.ffn_out)?;
            output.ensure_finite(|| at("output"))?;
            let tape = FullTape {
                input: x.clone(),
                query,
                key,
                value,
                scores,
                attn,
                heads,
                attn_out,
                ffn_pre,
                ffn_act,
                output: output.clone(),
            };
            Ok((output, ActivationTape::Full(tape)))
        }
        BlockMode::Rso { proj, sub } => {
            check_subspace(n, proj, sub)?;
            let input_proj = x.matmul(&proj.qkv)?;
            let query = shifted_product(x, &w.query, &input_proj, &sub.query)?;
            let key = shifted_product(x, &w.key, &input_proj, &sub.key)?;
            let value = shifted_product(x, &w.value, &input_proj, &sub.value)?;
            let scores = query.matmul_nt(&key)?;
            scores.ensure_finite(|| at("attention scores"))?;
            let attn = softmax_rows(&scores, n, opts.causal);
            let heads = attn.matmul(&value)?;
            let heads_proj = heads.matmul(&proj.out)?;
            let attn_out = shifted_product(&heads, &w.out, &heads_proj, &sub.out)?;
            let attn_out_proj = attn_out.matmul(&proj.ffn_in)?;
            let ffn_pre = shifted_product(&attn_out, &w.ffn_in, &attn_out_proj, &sub.ffn_in)?;
            let ffn_act = ffn_pre.map(T::tanh);
            let ffn_act_proj = ffn_act.matmul(&proj.ffn_out)?;
            let output = shifted_product(&ffn_act, &w.ffn_out, &ffn_act_proj, &sub.ffn_out)?;
            output.ensure_finite(|| at("output"))?;
            let tape = RsoTape {
                input_proj,
                query,
                key,
                value,
                scores,
                attn,
                heads_proj,
                attn_out_proj,
                ffn_pre,
                ffn_act_proj,
                output: output.clone(),
            };
            Ok((output, ActivationTape::Rso(tape)))
        }
    }
}

/// `1 − tanh²(z)` applied to `upstream`.
fn tanh_backward<T: Scalar>(pre: &Matrix<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
    upstream.hadamard(&pre.map(|z| {
        let t = z.tanh();
        T::one() - t * t
    }))
}

/// Backward pass from `∂y/∂Z₂`. The mode must match the one that produced
/// `tape`.
pub fn block_backward<T: Scalar>(
    w: &BlockWeights<T>,
    mode: BlockMode<'_, T>,
    tape: &ActivationTape<T>,
    upstream: &Matrix<T>,
) -> Result<BlockGradients<T>> {
    let n = w.dim();
    if upstream.shape() != tape.output().shape() {
        return Err(Error::shape(
            "block_backward",
            format!("upstream {:?}, output {:?}", upstream.shape(), tape.output().shape()),
        ));
    }
    match (mode, tape) {
        (BlockMode::Full, ActivationTape::Full(t)) => {
            let ffn_out = t.ffn_act.matmul_tn(upstream)?;
            let d_act = upstream.matmul_nt(&w.ffn_out)?;
            let d_pre = tanh_backward(&t.ffn_pre, &d_act)?;
            let ffn_in = t.attn_out.matmul_tn(&d_pre)?;
            let d_attn_out = d_pre.matmul_nt(&w.ffn_in)?;
            let out = t.heads.matmul_tn(&d_attn_out)?;
            let d_heads = d_attn_out.matmul_nt(&w.out)?;
            let d_attn = d_heads.matmul_nt(&t.value)?;
            let d_value = t.attn.matmul_tn(&d_heads)?;
            let d_scores = softmax_backward(&t.attn, &d_attn, n);
            let d_query = d_scores.matmul(&t.key)?;
            let d_key = d_scores.matmul_tn(&t.query)?;
            let input = d_query
                .matmul_nt(&w.query)?
                .add(&d_key.matmul_nt(&w.key)?)?
                .add(&d_value.matmul_nt(&w.value)?)?;
            Ok(BlockGradients {
                query: t.input.matmul_tn(&d_query)?,
                key: t.input.matmul_tn(&d_key)?,
                value: t.input.matmul_tn(&d_value)?,
                out,
                ffn_in,
                ffn_out,
                input,
            })
        }
        (BlockMode::Rso { proj, sub }, ActivationTape::Rso(t)) => {
            check_subspace(n, proj, sub)?;
            let ffn_out = t.ffn_act_proj.matmul_tn(upstream)?;
            let d_act = times_shifted_t(upstream, &w.ffn_out, &proj.ffn_out, &sub.ffn_out)?;
            let d_pre = tanh_backward(&t.ffn_pre, &d_act)?;
            let ffn_in = t.attn_out_proj.matmul_tn(&d_pre)?;
            let d_attn_out = times_shifted_t(&d_pre, &w.ffn_in, &proj.ffn_in, &sub.ffn_in)?;
            let out = t.heads_proj.matmul_tn(&d_attn_out)?;
            let d_heads = times_shifted_t(&d_attn_out, &w.out, &proj.out, &sub.out)?;
            let d_attn = d_heads.matmul_nt(&t.value)?;
            let d_value = t.attn.matmul_tn(&d_heads)?;
            let d_scores = softmax_backward(&t.attn, &d_attn, n);
            let d_query = d_scores.matmul(&t.key)?;
            let d_key = d_scores.matmul_tn(&t.query)?;
            let input = times_shifted_t(&d_query, &w.query, &proj.qkv, &sub.query)?
                .add(&times_shifted_t(&d_key, &w.key, &proj.qkv, &sub.key)?)?
                .add(&times_shifted_t(&d_value, &w.value, &proj.qkv, &sub.value)?)?;
            Ok(BlockGradients {
                query: t.input_proj.matmul_tn(&d_query)?,
                key: t.input_proj.matmul_tn(&d_key)?,
                value: t.input_proj.matmul_tn(&d_value)?,
                out,
                ffn_in,
                ffn_out,
                input,
            })
        }
        (mode, tape) => Err(Error::Config(format!(
            "tape recorded in {} mode, backward requested in {} mode",
            tape.mode_name(),
            match mode {
                BlockMode::Full => "full",
                BlockMode::Rso { .. } => "rso",
            }
        ))),
    }
}
