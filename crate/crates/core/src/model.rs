//! The full classifier: vocabularies, parameters, encoder, optional gate
//! network and prototype head, plus checkpoint I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedInstance, Dataset, Episode, RelationSchema, Span, Vocabulary, DEFAULT_MAX_LENGTH};
use crate::encoder::{Encoder, EncoderConfig, GateMode, Gates};
use crate::error::{CtegError, Result};
use crate::featurize::{featurize_with, TagVocabulary};
use crate::gatenet::{GateConfig, GateFeatures, GateInputs, GateNet};
use crate::layers::Init;
use crate::numcore::{checkpoint, Graph, ParamStore, Var};
use crate::protohead::ProtoHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gate: GateConfig,
    pub features: GateFeatures,
    pub n_way: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            gate: GateConfig::default(),
            features: GateFeatures::Both,
            n_way: 5,
            max_length: DEFAULT_MAX_LENGTH,
            seed: 0,
        }
    }
}

/// A sentence turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub ids: Vec<usize>,
    pub gates: GateInputs,
    pub span1: Span,
    pub span2: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub support: Vec<Vec<Prepared>>,
    pub queries: Vec<Prepared>,
    pub gold: Vec<usize>,
}

/// Graph nodes for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeVars {
    pub prototypes: Var,
    /// Squared distances of each query to each prototype.
    pub deltas: Vec<Var>,
}

/// Model structure; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub gatenet: Option<GateNet>,
    pub head: ProtoHead,
}

impl Network {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, vocab_size: usize, num_tags: usize) -> Result<Self> {
        let init = Init::new(config.seed);
        let encoder = Encoder::new(store, init, &config.encoder, vocab_size, config.max_length)?;
        let gatenet = if config.encoder.mode.uses_gates() {
            Some(GateNet::new(store, init, &config.gate, config.features, num_tags, config.max_length)?)
        } else {
            None
        };
        let head = ProtoHead::new(store, init, config.n_way)?;
        Ok(Network {
            config: config.clone(),
            encoder,
            gatenet,
            head,
        })
    }

    pub fn mode(&self) -> GateMode {
        self.config.encoder.mode
    }

    pub fn gates(&self, g: &mut Graph, store: &ParamStore, p: &Prepared) -> Result<Option<Gates>> {
        let Some(net) = &self.gatenet else { return Ok(None) };
        Ok(Some(match self.mode() {
            GateMode::Qgg => Gates::Pairs(net.query_guided_gates(g, store, &p.gates, p.span1, p.span2)?),
            _ => Gates::Tokens(net.gates(g, store, &p.gates)?),
        }))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, p: &Prepared) -> Result<Var> {
        let gates = self.gates(g, store, p)?;
        self.encoder.encode(g, store, &p.ids, gates)
    }

    pub fn prototypes(&self, g: &mut Graph, store: &ParamStore, support: &[Vec<Prepared>]) -> Result<Var> {
        let reps = support
            .iter()
            .map(|way| way.iter().map(|p| self.encode(g, store, p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        self.head.prototypes(g, &reps)
    }

    pub fn delta(&self, g: &mut Graph, store: &ParamStore, prototypes: Var, query: &Prepared) -> Result<Var> {
        let s = self.encode(g, store, query)?;
        self.head.distances(g, s, prototypes)
    }

    pub fn episode(&self, g: &mut Graph, store: &ParamStore, episode: &PreparedEpisode) -> Result<EpisodeVars> {
        let prototypes = self.prototypes(g, store, &episode.support)?;
        let deltas = episode
            .queries
            .iter()
            .map(|q| self.delta(g, store, prototypes, q))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodeVars { prototypes, deltas })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    tags: TagVocabulary,
    schema: Option<RelationSchema>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub tags: TagVocabulary,
    pub schema: Option<RelationSchema>,
}

impl Model {
    pub fn new(config: &ModelConfig, vocab: Vocabulary, tags: TagVocabulary) -> Result<Self> {
        let mut store = ParamStore::new();
        let network = Network::new(&mut store, config, vocab.len(), tags.len())?;
        Ok(Model {
            network,
            store,
            vocab,
            tags,
            schema: None,
        })
    }

    /// Word vocabulary from every sentence in `corpus`, tag vocabulary from
    /// the parses in `train`.
    pub fn for_corpus(config: &ModelConfig, corpus: &Dataset, train: &Dataset) -> Result<Self> {
        let vocab = crate::corpus::build_vocab(corpus)?;
        Self::new(config, vocab, TagVocabulary::build(train))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn prepare(&self, instance: &AnnotatedInstance) -> Result<Prepared> {
        let max = self.config().max_length;
        instance.validate(max).map_err(CtegError::Instance)?;
        let features = featurize_with(instance, max)?;
        Ok(Prepared {
            ids: self.vocab.encode(&instance.tokens),
            gates: GateInputs::from_features(&features, &self.tags, max),
            span1: instance.span1,
            span2: instance.span2,
        })
    }

    pub fn prepare_episode(&self, episode: &Episode) -> Result<PreparedEpisode> {
        Ok(PreparedEpisode {
            support: episode
                .support
                .iter()
                .map(|way| way.iter().map(|i| self.prepare(i)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?,
            queries: episode
                .queries
                .iter()
                .map(|q| self.prepare(&q.instance))
                .collect::<Result<Vec<_>>>()?,
            gold: episode.queries.iter().map(|q| q.gold).collect(),
        })
    }

    /// Per-token gate values for one sentence.
    pub fn gate_values(&self, instance: &AnnotatedInstance) -> Result<Vec<f64>> {
        let mode = self.network.mode();
        let net = match (&self.network.gatenet, mode) {
            (Some(net), GateMode::Ega | GateMode::Fhg) => net,
            _ => {
                return Err(CtegError::WrongMode {
                    mode: mode.name().to_string(),
                    what: "per-token gate export",
                })
            }
        };
        let p = self.prepare(instance)?;
        Ok(net.gate_vector(&self.store, &p.gates)?.gates)
    }

    /// Sentence representation as plain values.
    pub fn represent(&self, instance: &AnnotatedInstance) -> Result<Vec<f64>> {
        let p = self.prepare(instance)?;
        let mut g = Graph::new();
        let s = self.network.encode(&mut g, &self.store, &p)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Squared distances of every query to every prototype.
    pub fn episode_deltas(&self, episode: &PreparedEpisode) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.network.episode(&mut g, &self.store, episode)?;
        Ok(vars.deltas.iter().map(|d| g.value(*d).data().to_vec()).collect())
    }

    fn header(&self) -> Result<serde_json::Value> {
        let header = Header {
            model: self.config().clone(),
            vocab: self.vocab.clone(),
            tags: self.tags.clone(),
            schema: self.schema.clone(),
        };
        serde_json::to_value(header).map_err(|e| CtegError::Checkpoint(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.header()?, &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, store) = checkpoint::from_bytes(bytes)?;
        Self::from_parts(header, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header()?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        Self::from_parts(header, store)
    }

    fn from_parts(header: serde_json::Value, loaded: ParamStore) -> Result<Self> {
        let header: Header =
            serde_json::from_value(header).map_err(|e| CtegError::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Model::new(&header.model, header.vocab, header.tags)?;
        model.schema = header.schema;
        if loaded.len() != model.store.len() {
            return Err(CtegError::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for (_, p) in loaded.iter() {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| CtegError::Checkpoint(format!("unexpected parameter {}", p.name)))?;
            let slot = model.store.get_mut(id);
            if slot.tensor.shape() != p.tensor.shape() {
                return Err(CtegError::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            slot.tensor = p.tensor.clone();
            slot.trainable = p.trainable;
        }
        Ok(model)
    }
}
