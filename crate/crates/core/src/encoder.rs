//! Sentence encoder: word + absolute position embeddings, M post-norm
//! transformer layers whose attention logits may be gated, and max pooling
//! over tokens.

use serde::{Deserialize, Serialize};

use crate::error::{CtegError, Result};
use crate::layers::{Gating, Init, LayerNorm, TransformerLayer};
use crate::numcore::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GateMode {
    /// Per-key gates on attention logits in every layer.
    #[default]
    Ega,
    /// Plain transformer.
    None,
    /// Plain transformer; final hidden rows scaled by their gate.
    Fhg,
    /// Per (query, key) gates on attention logits.
    Qgg,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::Ega => "EGA",
            GateMode::None => "NONE",
            GateMode::Fhg => "FHG",
            GateMode::Qgg => "QGG",
        }
    }

    pub fn uses_gates(self) -> bool {
        self != GateMode::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub mode: GateMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            ffn_width: 128,
            mode: GateMode::Ega,
        }
    }
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.ffn_width == 0 {
            return Err(CtegError::Config("encoder sizes must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CtegError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Gate input for one sentence, matching the encoder's mode.
#[derive(Debug, Clone, Copy)]
pub enum Gates {
    /// Length-n vector (EGA, FHG).
    Tokens(Var),
    /// n×n matrix (QGG).
    Pairs(Var),
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Pooled sentence representation, length d_model.
    pub rep: Var,
    /// Final hidden states, n×d_model.
    pub hidden: Var,
    /// Attention weights per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub word_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        config: &EncoderConfig,
        vocab_size: usize,
        max_length: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    init,
                    &format!("encoder.layer{l}"),
                    d,
                    config.heads,
                    config.ffn_width,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            config: config.clone(),
            word_embedding: init.weight(store, "encoder.word_embedding", &[vocab_size, d])?,
            position_embedding: init.weight(store, "encoder.position_embedding", &[max_length, d])?,
            embedding_norm: LayerNorm::new(store, "encoder.embedding_norm", d)?,
            layers,
        })
    }

    pub fn max_length(&self, store: &ParamStore) -> usize {
        store.tensor(self.position_embedding).shape()[0]
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(CtegError::EmptyInput("encode"));
        }
        let max = self.max_length(store);
        if n > max {
            return Err(CtegError::IndexOutOfRange {
                what: "token position",
                index: n - 1,
                len: max,
            });
        }
        let positions: Vec<usize> = (0..n).collect();
        let (words, pos) = (g.param(store, self.word_embedding), g.param(store, self.position_embedding));
        let w = g.embed(words, ids)?;
        let p = g.embed(pos, &positions)?;
        let x = g.add(w, p)?;
        self.embedding_norm.forward(g, store, x)
    }

    /// One encoder layer with optional logit gating.
    pub fn gated_attention_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        h: Var,
        gating: Gating,
    ) -> Result<(Vec<Var>, Var)> {
        let layer = self.layers.get(layer).ok_or(CtegError::IndexOutOfRange {
            what: "encoder layer",
            index: layer,
            len: self.layers.len(),
        })?;
        let (out, att) = layer.forward(g, store, h, gating)?;
        Ok((att, out))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], gates: Option<Gates>) -> Result<EncoderOutput> {
        let mode = self.config.mode;
        let gating = match (mode, gates) {
            (GateMode::None, None) => Gating::None,
            (GateMode::Ega, Some(Gates::Tokens(v))) => Gating::Keys(v),
            (GateMode::Qgg, Some(Gates::Pairs(m))) => Gating::Pairs(m),
            (GateMode::Fhg, Some(Gates::Tokens(_))) => Gating::None,
            (_, None) => {
                return Err(CtegError::WrongMode {
                    mode: mode.name().to_string(),
                    what: "encode without gates",
                })
            }
            (_, Some(_)) => {
                return Err(CtegError::WrongMode {
                    mode: mode.name().to_string(),
                    what: "encode with this gate shape",
                })
            }
        };
        let mut h = self.embed(g, store, ids)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (att, out) = self.gated_attention_layer(g, store, l, h, gating)?;
            attention.push(att);
            h = out;
        }
        let hidden = match (mode, gates) {
            (GateMode::Fhg, Some(Gates::Tokens(v))) => g.mul_rows(h, v)?,
            _ => h,
        };
        let rep = g.max_pool(hidden)?;
        Ok(EncoderOutput { rep, hidden, attention })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], gates: Option<Gates>) -> Result<Var> {
        Ok(self.forward(g, store, ids, gates)?.rep)
    }
}
