//! Scaled dot-product attention and its spatial (joints within a frame) and
//! temporal (frames within a sequence) multi-head specialisations.
//!
//! Layout convention: positions are rows. A temporal input is `[T, d]`, a
//! spatial input is the same `[T, d]` matrix viewed per frame as `[T, k, 3]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, ParamId, ParamStore, Tensor, Var, MASKED_LOGIT};

/// Where the adjacency mask acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Zero attention weights after the softmax; rows may sum to less than 1.
    #[default]
    PostSoftmax,
    /// Drive masked logits to a large negative value before the softmax.
    PreSoftmax,
}

/// Query/key/value projections of one head, each `width x width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub width: usize,
}

impl HeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        let mut w = |name: &str| {
            store.add(
                format!("{prefix}.{name}"),
                xavier_uniform(&[width, width], width, width, rng),
            )
        };
        let (wq, wk, wv) = (w("wq"), w("wk"), w("wv"));
        Self { wq, wk, wv, width }
    }
}

/// Optional structure imposed on an attention matrix of shape `[Lq, Lk]`
/// (or `[B, Lq, Lk]` for the bias).
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionOptions<'a> {
    /// Row-major `Lq x Lk`, `true` = keep.
    pub mask: Option<&'a [bool]>,
    pub mask_mode: MaskMode,
    /// Added to the attention weights after the softmax.
    pub bias: Option<&'a Tensor>,
    /// Query `i` may not attend to key `j > i`.
    pub causal: bool,
}

fn as_batched<'g>(x: Var<'g>) -> Result<(Var<'g>, bool)> {
    match x.shape().len() {
        2 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1]])?, true))
        }
        3 => Ok((x, false)),
        _ => Err(Error::Invalid(format!(
            "attention input must be 2-D or 3-D, got {:?}",
            x.shape()
        ))),
    }
}

/// `softmax(Q K^T / sqrt(dim)) V` for `Q: [.., Lq, dim]`, `K, V: [.., Lk, dim]`.
///
/// Returns the output `[.., Lq, dim]` and the attention weights
/// `[.., Lq, Lk]` after bias and mask have been applied.
pub fn scaled_dot_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    opts: &AttentionOptions<'_>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (q3, squeeze) = as_batched(q)?;
    let (k3, _) = as_batched(k)?;
    let (v3, _) = as_batched(v)?;
    let (qs, ks, vs) = (q3.shape(), k3.shape(), v3.shape());
    if ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Invalid(format!(
            "attention operand shapes disagree: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let (lq, lk, dim) = (qs[1], ks[1], qs[2]);
    if let Some(m) = opts.mask {
        if m.len() != lq * lk {
            return Err(Error::Invalid(format!(
                "mask has {} entries, expected {lq}x{lk}",
                m.len()
            )));
        }
    }

    let mut logits = q3.bmm(k3.transpose()?)?.scale(1.0 / (dim as f64).sqrt());
    if opts.causal {
        let future: Vec<bool> = (0..lq * lk).map(|x| x % lk > x / lk).collect();
        logits = logits.masked_fill(&future, MASKED_LOGIT)?;
    }
    if let (Some(m), MaskMode::PreSoftmax) = (opts.mask, opts.mask_mode) {
        let hidden: Vec<bool> = m.iter().map(|&keep| !keep).collect();
        logits = logits.masked_fill(&hidden, MASKED_LOGIT)?;
    }
    let mut att = logits.softmax(2)?;
    if let Some(b) = opts.bias {
        let s = b.shape();
        if s != [lq, lk] && s != [qs[0], lq, lk] {
            return Err(Error::Invalid(format!(
                "bias shape {s:?} does not fit {lq}x{lk} attention"
            )));
        }
        att = att.add(att.graph().constant(b))?;
    }
    if let (Some(m), MaskMode::PostSoftmax) = (opts.mask, opts.mask_mode) {
        let keep = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        att = att.mul(att.graph().constant(&Tensor::new(&[lq, lk], keep)?))?;
    }
    let out = att.bmm(v3)?;
    if squeeze {
        Ok((out.reshape(&[lq, dim])?, att.reshape(&[lq, lk])?))
    } else {
        Ok((out, att))
    }
}

fn project<'g>(x: Var<'g>, w: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    let width = *shape.last().expect("non-scalar");
    let rows = x.numel() / width;
    Ok(x.reshape(&[rows, width])?.matmul(w)?.reshape(&shape)?)
}

/// `q_i = a_i W_q`, `k_i = b_i W_k`, `v_i = c_i W_v` applied row-wise.
pub fn project_qkv<'g>(
    a: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
    head: &HeadParams,
    params: &[Var<'g>],
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    for x in [a, b, c] {
        if x.shape().last() != Some(&head.width) {
            return Err(Error::Invalid(format!(
                "feature size of {:?} does not match head width {}",
                x.shape(),
                head.width
            )));
        }
    }
    Ok((
        project(a, params[head.wq.0])?,
        project(b, params[head.wk.0])?,
        project(c, params[head.wv.0])?,
    ))
}

/// Splits the last axis into `heads.len()` contiguous slices, attends per
/// head, and concatenates head outputs in order. There is no output
/// projection.
pub fn multi_head_attention<'g>(
    a: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
    heads: &[HeadParams],
    params: &[Var<'g>],
    opts: &AttentionOptions<'_>,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let features = *a.shape().last().expect("non-scalar");
    let n = heads.len();
    if n == 0 || !features.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "{features} features cannot be split into {n} heads"
        )));
    }
    let width = features / n;
    let axis = a.shape().len() - 1;
    let mut outs = Vec::with_capacity(n);
    let mut atts = Vec::with_capacity(n);
    for (h, head) in heads.iter().enumerate() {
        let slice = |x: Var<'g>| -> Result<Var<'g>> {
            if n == 1 {
                Ok(x)
            } else {
                Ok(x.narrow(axis, h * width, width)?)
            }
        };
        let (q, k, v) = project_qkv(slice(a)?, slice(b)?, slice(c)?, head, params)?;
        let (o, att) = scaled_dot_attention(q, k, v, opts)?;
        outs.push(o);
        atts.push(att);
    }
    let out = if n == 1 {
        outs[0]
    } else {
        Var::concat(&outs, axis)?
    };
    Ok((out, atts))
}

/// Attention over the joints of each frame.
///
/// Inputs are `[T, 3k]`; queries come from `a`, keys from `b`, values from
/// `c`. `mask` is a `k x k` adjacency mask and `bias` a `[T, k, k]` additive
/// term (already softmaxed distances).
pub fn spatial_attention<'g>(
    a: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
    heads: &[HeadParams],
    params: &[Var<'g>],
    opts: &AttentionOptions<'_>,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let per_frame = |x: Var<'g>| -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 2 || !s[1].is_multiple_of(3) {
            return Err(Error::Invalid(format!(
                "spatial input must be [T, 3k], got {s:?}"
            )));
        }
        Ok(x.reshape(&[s[0], s[1] / 3, 3])?)
    };
    let shape = a.shape();
    let (out, atts) = multi_head_attention(
        per_frame(a)?,
        per_frame(b)?,
        per_frame(c)?,
        heads,
        params,
        opts,
    )?;
    Ok((out.reshape(&shape)?, atts))
}

/// Attention over frames. `a` is `[Tq, d]`, `b` and `c` are `[Tk, d]`.
pub fn temporal_attention<'g>(
    a: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
    heads: &[HeadParams],
    params: &[Var<'g>],
    causal: bool,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let opts = AttentionOptions {
        causal,
        ..AttentionOptions::default()
    };
    multi_head_attention(a, b, c, heads, params, &opts)
}

/// Sinusoidal encoding as a `[T, d]` matrix:
/// `PE[t][2i] = sin(t / 10000^(2i/d))`, `PE[t][2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::Length("positional encoding for zero frames".into()));
    }
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = angle.sin();
            data[t * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(&[len, d], data)?)
}

/// Row-wise softmax of a `k x k` matrix, as a plain tensor.
pub fn row_softmax(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - max).exp() / sum;
        }
    }
    Tensor::new(&[rows, cols], out).expect("same shape")
}

/// Which axis an attention module attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Spatial,
    Temporal,
}

/// Per-module attention settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub use_adjacency_mask: bool,
    pub use_distance_bias: bool,
    pub causal: bool,
    pub mask_mode: MaskMode,
}

/// A multi-head attention block with its own projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModule {
    pub kind: AttentionKind,
    pub config: AttentionConfig,
    pub heads: Vec<HeadParams>,
}

impl AttentionModule {
    /// `features` is 3 for spatial modules (per-joint coordinates) and `d`
    /// for temporal ones.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: AttentionKind,
        features: usize,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || !features.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "{prefix}: {features} features not divisible by {} heads",
                config.heads
            )));
        }
        let width = features / config.heads;
        let heads = (0..config.heads)
            .map(|h| HeadParams::init(store, &format!("{prefix}.h{h}"), width, rng))
            .collect();
        Ok(Self {
            kind,
            config,
            heads,
        })
    }

    /// `mask` is required when the module uses the adjacency mask, `bias`
    /// when it uses the distance bias.
    pub fn forward<'g>(
        &self,
        params: &[Var<'g>],
        a: Var<'g>,
        b: Var<'g>,
        c: Var<'g>,
        mask: Option<&[bool]>,
        bias: Option<&Tensor>,
    ) -> Result<Var<'g>> {
        let mask =
            if self.config.use_adjacency_mask {
                Some(mask.ok_or_else(|| {
                    Error::Config("adjacency mask required but not provided".into())
                })?)
            } else {
                None
            };
        let bias =
            if self.config.use_distance_bias {
                Some(bias.ok_or_else(|| {
                    Error::Config("distance bias required but not provided".into())
                })?)
            } else {
                None
            };
        let opts = AttentionOptions {
            mask,
            mask_mode: self.config.mask_mode,
            bias,
            causal: self.config.causal,
        };
        let (out, _) = match self.kind {
            AttentionKind::Spatial => spatial_attention(a, b, c, &self.heads, params, &opts)?,
            AttentionKind::Temporal => multi_head_attention(a, b, c, &self.heads, params, &opts)?,
        };
        Ok(out)
    }
}
