//! Multi-head attention maps, value aggregation and pre-norm transformer blocks.
//!
//! Scores for one head are `(Q_h)(K_h)ᵀ / √(d_k/h)`, where `Q_h`, `K_h` are the
//! head's column slices of the projected queries and keys.

use crate::error::{Error, Result};
use crate::ndtensor::{kernels, Bound, Graph, ParamId, Params, Tensor, Var, DEFAULT_LN_EPS};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Queries are the embedded inputs themselves (`l = n`).
    SelfAttention,
    /// Queries are `l` learned latent vectors.
    Cross,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::SelfAttention => "self",
            AttentionKind::Cross => "cross",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AttentionKind::SelfAttention),
            "cross" => Ok(AttentionKind::Cross),
            other => Err(Error::Config(format!("unknown attention kind '{other}' (self|cross)"))),
        }
    }
}

/// Unnormalized per-head scores, `heads × queries × keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub scores: Tensor,
}

impl AttentionMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.shape().len() != 3 {
            return Err(Error::InvalidShape {
                shape: scores.shape().to_vec(),
                reason: "attention map must be heads × queries × keys".into(),
            });
        }
        Ok(AttentionMap { scores })
    }

    pub fn heads(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.scores.shape()[2]
    }

    /// `queries × keys` block of one head.
    pub fn head(&self, h: usize) -> &[f64] {
        let size = self.queries() * self.keys();
        &self.scores.data()[h * size..(h + 1) * size]
    }
}

fn check_heads(width: usize, heads: usize, what: &'static str) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::InvalidShape {
            shape: vec![width, heads],
            reason: what.into(),
        });
    }
    Ok(width / heads)
}

/// Scores from already projected queries `l × d_k` and keys `n × d_k`.
pub fn attention_scores(q: &Tensor, k: &Tensor, heads: usize) -> Result<AttentionMap> {
    let (l, dq) = q.dims2("attention_scores")?;
    let (n, dk) = k.dims2("attention_scores")?;
    if dq != dk {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let w = check_heads(dk, heads, "d_k must be divisible by heads")?;
    let scale = 1.0 / (w as f64).sqrt();
    let mut out = Vec::with_capacity(heads * l * n);
    for h in 0..heads {
        let qh = column_block(q.data(), dk, h * w, w);
        let kh = column_block(k.data(), dk, h * w, w);
        out.extend(kernels::matmul_bt(&qh, &kh, l, w, n).into_iter().map(|s| s * scale));
    }
    AttentionMap::new(Tensor::new(vec![heads, l, n], out)?)
}

fn column_block(data: &[f64], cols: usize, start: usize, len: usize) -> Vec<f64> {
    data.chunks(cols)
        .flat_map(|r| r[start..start + len].iter().copied())
        .collect()
}

/// Per-head weighted value sums, heads concatenated: `Â[h×l×n]`, `V[h×n×w]` → `l × h·w`.
///
/// In debug builds, rows of `Â` must sum to 1 within 1e-9.
pub fn attend(a_hat: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (&[h, l, n], &[hv, nv, w]) = (a_hat.shape(), v.shape()) else {
        return Err(Error::ShapeMismatch {
            op: "attend",
            left: a_hat.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    };
    if h != hv || n != nv {
        return Err(Error::ShapeMismatch {
            op: "attend",
            left: a_hat.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    if cfg!(debug_assertions) {
        for (row, weights) in a_hat.data().chunks(n).enumerate() {
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "attention row {row} sums to {sum}, expected 1"
                )));
            }
        }
    }
    let mut out = vec![0.0; l * h * w];
    for head in 0..h {
        let ah = &a_hat.data()[head * l * n..(head + 1) * l * n];
        let vh = &v.data()[head * n * w..(head + 1) * n * w];
        let r = kernels::matmul(ah, vh, l, n, w);
        for i in 0..l {
            out[i * h * w + head * w..i * h * w + (head + 1) * w].copy_from_slice(&r[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![l, h * w], out)
}

/// Differentiable multi-head attention over projected `q`, `k`, `v`; returns
/// the concatenated head outputs.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let dk = g.value(q).cols();
    let dv = g.value(v).cols();
    let wk = check_heads(dk, heads, "d_k must be divisible by heads")?;
    let wv = check_heads(dv, heads, "d_v must be divisible by heads")?;
    let scale = 1.0 / (wk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * wk, wk)?,
                g.slice_cols(k, h * wk, wk)?,
                g.slice_cols(v, h * wv, wv)?,
            )
        };
        let s = g.matmul_bt(qh, kh)?;
        let s = g.scale(s, scale);
        let a = g.row_softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Layer-norm gain and bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn init(params: &mut Params, name: &str, d: usize) -> Self {
        NormParams {
            gain: params.insert(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: params.insert(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, g: &mut Graph, vars: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, vars[self.gain], vars[self.bias], DEFAULT_LN_EPS)
    }
}

/// The first (mask-extracting) attention layer.
///
/// Inputs are layer-normalized before the key, value and (self-attention)
/// query projections. The projections carry no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub kind: AttentionKind,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// `l × d_embed` learned queries, cross-attention only.
    pub latents: Option<ParamId>,
    pub norm: NormParams,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

/// Graph handles for the projected inputs of the first layer.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut Params,
        kind: AttentionKind,
        d_embed: usize,
        d_k: usize,
        d_v: usize,
        heads: usize,
        latents: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_heads(d_k, heads, "d_k must be divisible by heads")?;
        check_heads(d_v, heads, "d_v must be divisible by heads")?;
        let latents = match kind {
            AttentionKind::Cross => Some(params.insert("first.latents", Tensor::randn(&[latents, d_embed], std, rng))),
            AttentionKind::SelfAttention => None,
        };
        Ok(AttentionParams {
            kind,
            heads,
            d_k,
            d_v,
            latents,
            norm: NormParams::init(params, "first.norm", d_embed),
            w_q: params.insert("first.w_q", Tensor::randn(&[d_embed, d_k], std, rng)),
            w_k: params.insert("first.w_k", Tensor::randn(&[d_embed, d_k], std, rng)),
            w_v: params.insert("first.w_v", Tensor::randn(&[d_embed, d_v], std, rng)),
            w_o: params.insert("first.w_o", Tensor::randn(&[d_v, d_v], std, rng)),
        })
    }

    pub fn project(&self, g: &mut Graph, vars: &Bound, x_hat: Var) -> Result<Projections> {
        let xn = self.norm.apply(g, vars, x_hat)?;
        let source = match self.latents {
            Some(l) => vars[l],
            None => xn,
        };
        Ok(Projections {
            q: g.matmul(source, vars[self.w_q])?,
            k: g.matmul(xn, vars[self.w_k])?,
            v: g.matmul(xn, vars[self.w_v])?,
        })
    }

    /// Unnormalized map of the projected inputs, values only.
    pub fn map(&self, g: &Graph, p: &Projections) -> Result<AttentionMap> {
        attention_scores(g.value(p.q), g.value(p.k), self.heads)
    }

    /// Attention restricted to the key rows `keep`; for self-attention only
    /// the same rows are used as queries, so the output has `keep.len()`
    /// rows. Equivalent to adding a `-inf` mask on every other column.
    pub fn forward_kept(&self, g: &mut Graph, vars: &Bound, p: &Projections, keep: &[usize]) -> Result<Var> {
        if keep.is_empty() {
            return Err(Error::EmptyMask("attention needs at least one key"));
        }
        let k = g.gather_rows(p.k, keep)?;
        let v = g.gather_rows(p.v, keep)?;
        let q = match self.kind {
            AttentionKind::SelfAttention => g.gather_rows(p.q, keep)?,
            AttentionKind::Cross => p.q,
        };
        let heads = multi_head(g, q, k, v, self.heads)?;
        g.matmul(heads, vars[self.w_o])
    }
}

/// Pre-norm residual block over `rows × d` hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub norm1: NormParams,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm2: NormParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockParams {
    pub fn init(
        params: &mut Params,
        name: &str,
        d: usize,
        d_k: usize,
        heads: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_heads(d_k, heads, "d_k must be divisible by heads")?;
        check_heads(d, heads, "d_v must be divisible by heads")?;
        let mut w = |suffix: &str, shape: &[usize], rng: &mut Rng| {
            params.insert(format!("{name}.{suffix}"), Tensor::randn(shape, std, rng))
        };
        let (w_q, w_k, w_v, w_o) = (
            w("w_q", &[d, d_k], rng),
            w("w_k", &[d, d_k], rng),
            w("w_v", &[d, d], rng),
            w("w_o", &[d, d], rng),
        );
        let (w1, w2) = (w("w1", &[d, 4 * d], rng), w("w2", &[4 * d, d], rng));
        Ok(BlockParams {
            heads,
            norm1: NormParams::init(params, &format!("{name}.norm1"), d),
            w_q,
            w_k,
            w_v,
            w_o,
            norm2: NormParams::init(params, &format!("{name}.norm2"), d),
            w1,
            b1: params.insert(format!("{name}.b1"), Tensor::zeros(&[4 * d])),
            w2,
            b2: params.insert(format!("{name}.b2"), Tensor::zeros(&[d])),
        })
    }

    /// `H + Attn(LN(H))`, then `+ MLP(LN(·))` with a gelu hidden layer of width `4·d`.
    pub fn forward(&self, g: &mut Graph, vars: &Bound, h: Var) -> Result<Var> {
        let x = self.norm1.apply(g, vars, h)?;
        let q = g.matmul(x, vars[self.w_q])?;
        let k = g.matmul(x, vars[self.w_k])?;
        let v = g.matmul(x, vars[self.w_v])?;
        let a = multi_head(g, q, k, v, self.heads)?;
        let a = g.matmul(a, vars[self.w_o])?;
        let h = g.add(h, a)?;
        let x = self.norm2.apply(g, vars, h)?;
        let x = g.matmul(x, vars[self.w1])?;
        let x = g.add(x, vars[self.b1])?;
        let x = g.gelu(x);
        let x = g.matmul(x, vars[self.w2])?;
        let x = g.add(x, vars[self.b2])?;
        g.add(h, x)
    }
}
