//! Transformer building blocks shared by the gate network and the sentence
//! encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CtegError, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Var};

/// Deterministic per-parameter initializer. Each parameter draws from its own
/// stream keyed by `(seed, name)`, so a parameter gets the same initial value
/// in every model variant that contains it.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    pub fn weight(&self, store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        store.add_uniform(name, shape, &mut rng)
    }

    pub fn bias(&self, store: &mut ParamStore, name: &str, len: usize) -> Result<ParamId> {
        store.add_zeros(name, &[len])
    }
}

/// How attention logits are gated.
#[derive(Debug, Clone, Copy)]
pub enum Gating {
    None,
    /// One gate per key token, broadcast over query rows and heads.
    Keys(Var),
    /// One gate per (query, key) pair, broadcast over heads.
    Pairs(Var),
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub d_k: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: Init, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(CtegError::Config(format!(
                "width {d_model} is not divisible by head count {heads}"
            )));
        }
        let d_k = d_model / heads;
        let heads = (0..heads)
            .map(|h| {
                Ok(HeadParams {
                    wq: init.weight(store, &format!("{prefix}.head{h}.wq"), &[d_model, d_k])?,
                    wk: init.weight(store, &format!("{prefix}.head{h}.wk"), &[d_model, d_k])?,
                    wv: init.weight(store, &format!("{prefix}.head{h}.wv"), &[d_model, d_k])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiHeadAttention {
            heads,
            wo: init.weight(store, &format!("{prefix}.wo"), &[d_model, d_model])?,
            bo: init.bias(store, &format!("{prefix}.bo"), d_model)?,
            d_k,
        })
    }

    /// Returns the projected output (n×d_model) and each head's attention
    /// weights (n×n). Gates multiply the raw logits `Q Kᵀ` before scaling
    /// and softmax.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, gating: Gating) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (wq, wk, wv) = (g.param(store, head.wq), g.param(store, head.wk), g.param(store, head.wv));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let gated = match gating {
                Gating::None => logits,
                Gating::Keys(gates) => g.mul_cols(logits, gates)?,
                Gating::Pairs(gates) => g.mul(logits, gates)?,
            };
            let scaled = g.scale(gated, scale);
            let att = g.softmax(scaled)?;
            outs.push(g.matmul(att, v)?);
            weights.push(att);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let (wo, bo) = (g.param(store, self.wo), g.param(store, self.bo));
        Ok((g.linear(cat, wo, bo)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: Init, prefix: &str, d_model: usize, width: usize) -> Result<Self> {
        Ok(FeedForward {
            w1: init.weight(store, &format!("{prefix}.w1"), &[d_model, width])?,
            b1: init.bias(store, &format!("{prefix}.b1"), width)?,
            w2: init.weight(store, &format!("{prefix}.w2"), &[width, d_model])?,
            b2: init.bias(store, &format!("{prefix}.b2"), d_model)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h);
        g.linear(h, w2, b2)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_filled(&format!("{prefix}.gain"), &[width], 1.0)?,
            bias: store.add_zeros(&format!("{prefix}.bias"), &[width])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Attention and feed-forward sublayers with residual connections.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub pre_norm: bool,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_width: usize,
        pre_norm: bool,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attention: MultiHeadAttention::new(store, init, &format!("{prefix}.attn"), d_model, heads)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model)?,
            ffn: FeedForward::new(store, init, &format!("{prefix}.ffn"), d_model, ffn_width)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model)?,
            pre_norm,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, gating: Gating) -> Result<(Var, Vec<Var>)> {
        if self.pre_norm {
            let h = self.norm1.forward(g, store, x)?;
            let (a, w) = self.attention.forward(g, store, h, gating)?;
            let x = g.add(x, a)?;
            let h = self.norm2.forward(g, store, x)?;
            let f = self.ffn.forward(g, store, h)?;
            Ok((g.add(x, f)?, w))
        } else {
            let (a, w) = self.attention.forward(g, store, x, gating)?;
            let x = g.add(x, a)?;
            let x = self.norm1.forward(g, store, x)?;
            let f = self.ffn.forward(g, store, x)?;
            let x = g.add(x, f)?;
            Ok((self.norm2.forward(g, store, x)?, w))
        }
    }
}
