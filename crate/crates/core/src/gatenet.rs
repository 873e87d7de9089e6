//! Entity-guided gates: a small transformer over relative-position and
//! syntactic-tag embeddings followed by a per-token sigmoid unit.

use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::error::{CtegError, Result};
use crate::featurize::{EntityFeatures, TagVocabulary};
use crate::layers::{Gating, Init, LayerNorm, TransformerLayer};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub d_pos: usize,
    pub d_syn: usize,
    pub gate_hidden: usize,
    pub gate_heads: usize,
    pub gate_layers: usize,
    pub gate_ffn: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            d_pos: 8,
            d_syn: 8,
            gate_hidden: 32,
            gate_heads: 2,
            gate_layers: 1,
            gate_ffn: 64,
        }
    }
}

impl GateConfig {
    pub fn input_width(&self) -> usize {
        2 * self.d_pos + 2 * self.d_syn
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.d_pos, self.d_syn, self.gate_hidden, self.gate_heads, self.gate_layers, self.gate_ffn];
        if all.contains(&0) {
            return Err(CtegError::Config("gate dimensions must be positive".into()));
        }
        if !self.gate_hidden.is_multiple_of(self.gate_heads) {
            return Err(CtegError::Config("gate_hidden must be divisible by gate_heads".into()));
        }
        Ok(())
    }
}

/// Which entity features feed the gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFeatures {
    #[default]
    Both,
    PosOnly,
    SynOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub gates: Vec<f64>,
}

/// Embedding-table indices for one sentence's entity features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateInputs {
    pub pos1: Vec<usize>,
    pub pos2: Vec<usize>,
    pub tag1: Vec<usize>,
    pub tag2: Vec<usize>,
}

impl GateInputs {
    pub fn from_features(features: &EntityFeatures, tags: &TagVocabulary, max_length: usize) -> Self {
        let pos = |v: &[i64]| -> Vec<usize> {
            v.iter()
                .map(|&p| (p.clamp(-(max_length as i64), max_length as i64) + max_length as i64) as usize)
                .collect()
        };
        GateInputs {
            pos1: pos(&features.pos1),
            pos2: pos(&features.pos2),
            tag1: features.tag1.iter().map(|t| tags.id(t)).collect(),
            tag2: features.tag2.iter().map(|t| tags.id(t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pos1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos1.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GateNet {
    pub config: GateConfig,
    pub features: GateFeatures,
    pub max_length: usize,
    pub pos1: ParamId,
    pub pos2: ParamId,
    pub syn1: ParamId,
    pub syn2: ParamId,
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    /// W^g
    pub out_w: ParamId,
    /// b^g
    pub out_b: ParamId,
}

impl GateNet {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        config: &GateConfig,
        features: GateFeatures,
        num_tags: usize,
        max_length: usize,
    ) -> Result<Self> {
        config.validate()?;
        let positions = 2 * max_length + 1;
        let h = config.gate_hidden;
        let layers = (0..config.gate_layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    init,
                    &format!("gate.layer{l}"),
                    h,
                    config.gate_heads,
                    config.gate_ffn,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GateNet {
            config: config.clone(),
            features,
            max_length,
            pos1: init.weight(store, "gate.pos1_embedding", &[positions, config.d_pos])?,
            pos2: init.weight(store, "gate.pos2_embedding", &[positions, config.d_pos])?,
            syn1: init.weight(store, "gate.syn1_embedding", &[num_tags, config.d_syn])?,
            syn2: init.weight(store, "gate.syn2_embedding", &[num_tags, config.d_syn])?,
            input_w: init.weight(store, "gate.input.w", &[config.input_width(), h])?,
            input_b: init.bias(store, "gate.input.b", h)?,
            layers,
            final_norm: LayerNorm::new(store, "gate.final_norm", h)?,
            out_w: init.weight(store, "gate.out.w", &[h, 1])?,
            out_b: init.bias(store, "gate.out.b", 1)?,
        })
    }

    /// Per-token `[pos1 | pos2 | syn1 | syn2]` embeddings, n × (2·d_pos + 2·d_syn).
    /// Blocks excluded by the feature setting are zero.
    pub fn embed_entity_features(&self, g: &mut Graph, store: &ParamStore, inputs: &GateInputs) -> Result<Var> {
        let n = inputs.len();
        let block = |g: &mut Graph, table: ParamId, ids: &[usize], enabled: bool, width: usize| {
            if enabled {
                let t = g.param(store, table);
                g.embed(t, ids)
            } else {
                Ok(g.input(Tensor::zeros(&[n, width])))
            }
        };
        let use_pos = self.features != GateFeatures::SynOnly;
        let use_syn = self.features != GateFeatures::PosOnly;
        let (dp, ds) = (self.config.d_pos, self.config.d_syn);
        let p1 = block(g, self.pos1, &inputs.pos1, use_pos, dp)?;
        let p2 = block(g, self.pos2, &inputs.pos2, use_pos, dp)?;
        let s1 = block(g, self.syn1, &inputs.tag1, use_syn, ds)?;
        let s2 = block(g, self.syn2, &inputs.tag2, use_syn, ds)?;
        g.concat(&[p1, p2, s1, s2])
    }

    /// Transformer over `e^p` then `sigmoid(W^g h_i + b^g)` per token.
    pub fn compute_gates(&self, g: &mut Graph, store: &ParamStore, ep: Var) -> Result<Var> {
        let n = g.value(ep).dims2().0;
        if n == 0 || g.value(ep).is_empty() {
            return Err(CtegError::EmptyInput("compute_gates"));
        }
        let (w, b) = (g.param(store, self.input_w), g.param(store, self.input_b));
        let mut x = g.linear(ep, w, b)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, Gating::None)?.0;
        }
        let x = self.final_norm.forward(g, store, x)?;
        let (w, b) = (g.param(store, self.out_w), g.param(store, self.out_b));
        let logits = g.linear(x, w, b)?;
        let logits = g.reshape(logits, &[n])?;
        Ok(g.sigmoid(logits))
    }

    pub fn gates(&self, g: &mut Graph, store: &ParamStore, inputs: &GateInputs) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CtegError::EmptyInput("compute_gates"));
        }
        let ep = self.embed_entity_features(g, store, inputs)?;
        self.compute_gates(g, store, ep)
    }

    /// Query-guided gate matrix (n×n): row i holds the gates of every key
    /// seen from query word i. A key inside entity span e carries the query
    /// word's tag towards e; any other key carries `other`. The position
    /// block holds the key's signed offset from the query.
    pub fn query_guided_gates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &GateInputs,
        span1: Span,
        span2: Span,
    ) -> Result<Var> {
        let n = inputs.len();
        if n == 0 {
            return Err(CtegError::EmptyInput("query_guided_gates"));
        }
        let ml = self.max_length as i64;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let offsets: Vec<usize> = (0..n)
                .map(|k| ((k as i64 - i as i64).clamp(-ml, ml) + ml) as usize)
                .collect();
            let pair = GateInputs {
                pos1: offsets.clone(),
                pos2: offsets,
                tag1: (0..n)
                    .map(|k| if span1.contains(k) { inputs.tag1[i] } else { TagVocabulary::OTHER_ID })
                    .collect(),
                tag2: (0..n)
                    .map(|k| if span2.contains(k) { inputs.tag2[i] } else { TagVocabulary::OTHER_ID })
                    .collect(),
            };
            rows.push(self.gates(g, store, &pair)?);
        }
        g.stack(&rows)
    }

    pub fn gate_vector(&self, store: &ParamStore, inputs: &GateInputs) -> Result<GateVector> {
        let mut g = Graph::new();
        let v = self.gates(&mut g, store, inputs)?;
        Ok(GateVector {
            gates: g.value(v).data().to_vec(),
        })
    }
}
