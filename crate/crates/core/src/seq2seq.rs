//! Transformer encoder and decoder stacks over batched `[B, L, d]` inputs.

use nncore::layers::{LayerNorm, Linear};
use nncore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual placement around each sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// `norm(x + f(x))`.
    #[default]
    Post,
    /// `x + f(norm(x))`.
    Pre,
}

/// Sinusoidal table `[length, d_model]`.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding needs an even width, got {d_model}")));
    }
    Ok(Tensor::from_fn(&[length, d_model], |i| {
        let (p, c) = (i / d_model, i % d_model);
        let angle = p as f64 / 10000f64.powf((c - c % 2) as f64 / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// `[t, t]` with `-inf` above the diagonal.
pub fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { f64::NEG_INFINITY } else { 0.0 })
}

/// `softmax(q·kᵀ/√d_k + mask)·v` over `[batch, L, d]` operands. Returns the
/// output and the attention weights. `mask` may have any suffix shape of the
/// score tensor `[batch, Lq, Lk]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>, dropout: f64) -> Result<(Var, Var)> {
    let dk = *g.shape(q).last().expect("attention operands are 3-d");
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add_broadcast(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    let dropped = g.dropout(weights, dropout)?;
    Ok((g.bmm(dropped, v, false)?, weights))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d_model, d_model, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_model, d_model, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_model, d_model, false, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d_model, d_model, true, rng),
            heads,
        })
    }

    /// Output `[B, Lq, d]` and weights `[B·h, Lq, Lk]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let q = self.wq.forward(g, store, q_in)?;
        let k = self.wk.forward(g, store, kv_in)?;
        let v = self.wv.forward(g, store, kv_in)?;
        let (q, k, v) = (
            g.split_heads(q, self.heads)?,
            g.split_heads(k, self.heads)?,
            g.split_heads(v, self.heads)?,
        );
        let (ctx, w) = attention(g, q, k, v, mask, dropout)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        Ok((self.wo.forward(g, store, ctx)?, w))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
        dropout: f64,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, q_in, kv_in, mask, dropout)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), d_model, d_ff, true, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.lin1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        Ok(self.lin2.forward(g, store, h)?)
    }
}

fn sublayer(
    g: &mut Graph,
    store: &ParamStore,
    style: NormStyle,
    norm: &LayerNorm,
    x: Var,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    Ok(match style {
        NormStyle::Post => {
            let y = f(g, x)?;
            let s = g.add(x, y)?;
            norm.forward(g, store, s)?
        }
        NormStyle::Pre => {
            let n = norm.forward(g, store, x)?;
            let y = f(g, n)?;
            g.add(x, y)?
        }
    })
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, d_ff, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
        style: NormStyle,
        dropout: f64,
    ) -> Result<Var> {
        let x = sublayer(g, store, style, &self.norm1, x, |g, h| {
            self.attn.forward(g, store, h, h, mask, dropout)
        })?;
        sublayer(g, store, style, &self.norm2, x, |g, h| self.ffn.forward(g, store, h, dropout))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d_model, heads, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d_model, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, d_ff, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d_model),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        memory: Var,
        causal: Var,
        memory_mask: Option<Var>,
        style: NormStyle,
        dropout: f64,
    ) -> Result<Var> {
        let y = sublayer(g, store, style, &self.norm1, y, |g, h| {
            self.self_attn.forward(g, store, h, h, Some(causal), dropout)
        })?;
        let y = sublayer(g, store, style, &self.norm2, y, |g, h| {
            self.cross_attn.forward(g, store, h, memory, memory_mask, dropout)
        })?;
        sublayer(g, store, style, &self.norm3, y, |g, h| self.ffn.forward(g, store, h, dropout))
    }
}

/// Encoder layers applied in order; zero layers is the identity.
#[derive(Clone, Debug, Default)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), d_model, heads, d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        mask: Option<Var>,
        style: NormStyle,
        dropout: f64,
    ) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(g, store, x, mask, style, dropout)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.{i}"), d_model, heads, d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// States `[B, t, d]` for decoder inputs `y: [B, t, d]`, with a causal
    /// mask built for `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut y: Var,
        memory: Var,
        memory_mask: Option<Var>,
        style: NormStyle,
        dropout: f64,
    ) -> Result<Var> {
        let t = g.shape(y)[1];
        let causal = g.constant(causal_mask(t));
        for l in &self.layers {
            y = l.forward(g, store, y, memory, causal, memory_mask, style, dropout)?;
        }
        Ok(y)
    }
}
