//! Confusion-aware training: the true-relation loss, the confusing-relation
//! loss and the KL push-away term on misclassified queries, and the episodic
//! training loop.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_episode, Dataset, DEFAULT_MAX_LENGTH};
use crate::encoder::{EncoderConfig, GateMode};
use crate::error::{CtegError, Result};
use crate::eval::{evaluate, EpisodeSpec, EvalReport};
use crate::gatenet::{GateConfig, GateFeatures};
use crate::model::{Model, ModelConfig, Network, PreparedEpisode};
use crate::numcore::{Adam, AdamConfig, Graph, ParamStore, Var};
use crate::protohead::predict;

/// Logits over ways from squared distances: `−δ`, or `δ` in literal mode.
fn distance_logits(g: &mut Graph, delta: Var, literal: bool) -> Var {
    if literal {
        delta
    } else {
        g.scale(delta, -1.0)
    }
}

/// `L = −log softmax(−δ)[gold]`.
pub fn true_loss(g: &mut Graph, delta: Var, gold: usize, literal: bool) -> Result<Var> {
    let logits = distance_logits(g, delta, literal);
    let lp = g.log_softmax(logits)?;
    let picked = g.index(lp, gold)?;
    Ok(g.scale(picked, -1.0))
}

/// `L̄ = −log softmax(δ̄)[r̄]`.
pub fn confusing_loss(g: &mut Graph, delta_bar: Var, confusing: usize) -> Result<Var> {
    let lp = g.log_softmax(delta_bar)?;
    let picked = g.index(lp, confusing)?;
    Ok(g.scale(picked, -1.0))
}

/// `L_kl = −KL(softmax(−δ) ‖ softmax(δ̄))`, differentiable in both arguments.
pub fn kl_push_loss(g: &mut Graph, delta: Var, delta_bar: Var, literal: bool) -> Result<Var> {
    let logits = distance_logits(g, delta, literal);
    let p = g.softmax(logits)?;
    let log_p = g.log_softmax(logits)?;
    let log_q = g.log_softmax(delta_bar)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let kl = g.sum(terms);
    Ok(g.scale(kl, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisclassifiedRecord {
    /// Query index within the episode.
    pub query: usize,
    pub gold: usize,
    pub confusing: usize,
}

pub fn select_misclassified(predictions: &[usize], gold: &[usize]) -> Vec<MisclassifiedRecord> {
    predictions
        .iter()
        .zip(gold)
        .enumerate()
        .filter(|(_, (p, g))| p != g)
        .map(|(query, (&p, &g))| MisclassifiedRecord {
            query,
            gold: g,
            confusing: p,
        })
        .collect()
}

fn mean(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else { return Ok(None) };
    let mut total = first;
    for &v in rest {
        total = g.add(total, v)?;
    }
    Ok(Some(g.scale(total, 1.0 / vars.len() as f64)))
}

/// Mean true loss over queries.
pub fn mean_true_loss(g: &mut Graph, deltas: &[Var], gold: &[usize], literal: bool) -> Result<Var> {
    let losses = deltas
        .iter()
        .zip(gold)
        .map(|(&d, &y)| true_loss(g, d, y, literal))
        .collect::<Result<Vec<_>>>()?;
    mean(g, &losses)?.ok_or(CtegError::EmptyInput("true loss over zero queries"))
}

/// Mean `L̄` and mean `L_kl` over the records; `None` when there are none.
/// `deltas[i]` belongs to `records[i]`.
pub fn confusion_terms(
    g: &mut Graph,
    network: &Network,
    store: &ParamStore,
    deltas: &[Var],
    records: &[MisclassifiedRecord],
    literal: bool,
) -> Result<Option<(Var, Var)>> {
    let mut bars = Vec::with_capacity(records.len());
    let mut kls = Vec::with_capacity(records.len());
    for (&d, r) in deltas.iter().zip(records) {
        let delta_bar = network.head.project(g, store, d)?;
        bars.push(confusing_loss(g, delta_bar, r.confusing)?);
        kls.push(kl_push_loss(g, d, delta_bar, literal)?);
    }
    Ok(mean(g, &bars)?.zip(mean(g, &kls)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Schedule {
    #[default]
    TwoPhase,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    CatOff,
    EgaOff,
    PosOnly,
    SynOnly,
    Qgg,
    Fhg,
}

/// Parameters updated by the confusion phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Scope {
    #[default]
    All,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub ablations: Vec<Ablation>,
    /// Use `softmax(δ)` in the true loss and the KL term instead of `softmax(−δ)`.
    pub literal_softmax: bool,
    pub phase2_scope: Phase2Scope,
    /// Validation every this many steps; 0 disables it.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub max_length: usize,
    pub encoder: EncoderConfig,
    pub gate: GateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 5,
            k: 5,
            q: 5,
            lr: 1e-3,
            weight_decay: 1e-6,
            steps: 1000,
            seed: 0,
            schedule: Schedule::TwoPhase,
            ablations: Vec::new(),
            literal_softmax: false,
            phase2_scope: Phase2Scope::All,
            eval_every: 0,
            eval_episodes: 100,
            max_length: DEFAULT_MAX_LENGTH,
            encoder: EncoderConfig::default(),
            gate: GateConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.q == 0 {
            return Err(CtegError::Config("n, k and q must be positive".into()));
        }
        let exclusive = self.ablations.iter().filter(|a| **a != Ablation::CatOff).count();
        if exclusive > 1 {
            return Err(CtegError::Config(format!(
                "at most one of EGA_OFF, POS_ONLY, SYN_ONLY, QGG, FHG may be set, got {:?}",
                self.ablations
            )));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(CtegError::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        self.encoder.validate()?;
        self.gate.validate()
    }

    /// Model configuration with the ablations applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        let mut features = GateFeatures::Both;
        for a in &self.ablations {
            match a {
                Ablation::CatOff => {}
                Ablation::EgaOff => encoder.mode = GateMode::None,
                Ablation::Qgg => encoder.mode = GateMode::Qgg,
                Ablation::Fhg => encoder.mode = GateMode::Fhg,
                Ablation::PosOnly => features = GateFeatures::PosOnly,
                Ablation::SynOnly => features = GateFeatures::SynOnly,
            }
        }
        ModelConfig {
            encoder,
            gate: self.gate.clone(),
            features,
            n_way: self.n,
            max_length: self.max_length,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_bar")]
    pub l_bar: f64,
    #[serde(rename = "L_kl")]
    pub l_kl: f64,
    pub acc: f64,
    pub n_misclassified: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Builds a fresh model. `corpus` supplies the word vocabulary, `train`
    /// the tag vocabulary.
    pub fn new(config: TrainConfig, corpus: &Dataset, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = Model::for_corpus(&config.model_config(), corpus, train)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Self {
        let adam = Adam::new(AdamConfig::new(config.lr, config.weight_decay), &model.store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Trainer {
            config,
            model,
            adam,
            rng,
            step: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn cat_enabled(&self) -> bool {
        !self.config.has(Ablation::CatOff)
    }

    /// One training episode under the configured schedule.
    pub fn train_step(&mut self, episode: &PreparedEpisode) -> Result<StepMetrics> {
        let literal = self.config.literal_softmax;
        let net = self.model.network.clone();
        let mut g = Graph::new();
        let vars = net.episode(&mut g, &self.model.store, episode)?;
        let preds: Vec<usize> = vars.deltas.iter().map(|d| predict(g.value(*d).data())).collect();
        let records = select_misclassified(&preds, &episode.gold);
        let loss = mean_true_loss(&mut g, &vars.deltas, &episode.gold, literal)?;
        let l = g.value(loss).item();
        let correct = episode.gold.len() - records.len();
        let mut metrics = StepMetrics {
            step: self.step,
            l,
            l_bar: 0.0,
            l_kl: 0.0,
            acc: correct as f64 / episode.gold.len() as f64,
            n_misclassified: records.len(),
            val_acc: None,
        };
        let cat = self.cat_enabled() && !records.is_empty();
        match self.config.schedule {
            Schedule::Joint => {
                let mut total = loss;
                if cat {
                    let deltas: Vec<Var> = records.iter().map(|r| vars.deltas[r.query]).collect();
                    if let Some((bar, kl)) = confusion_terms(&mut g, &net, &self.model.store, &deltas, &records, literal)? {
                        metrics.l_bar = g.value(bar).item();
                        metrics.l_kl = g.value(kl).item();
                        total = g.add(total, bar)?;
                        total = g.add(total, kl)?;
                    }
                }
                let grads = g.backward(total)?;
                self.adam.step(&mut self.model.store, &grads);
            }
            Schedule::TwoPhase => {
                let grads = g.backward(loss)?;
                self.adam.step(&mut self.model.store, &grads);
                if cat {
                    let (bar, kl) = self.confusion_phase(&net, episode, &records)?;
                    metrics.l_bar = bar;
                    metrics.l_kl = kl;
                }
            }
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Re-forwards the misclassified queries with the updated parameters and
    /// takes one step on mean `L̄ + L_kl`.
    fn confusion_phase(
        &mut self,
        net: &Network,
        episode: &PreparedEpisode,
        records: &[MisclassifiedRecord],
    ) -> Result<(f64, f64)> {
        let literal = self.config.literal_softmax;
        let store = &self.model.store;
        let mut g = Graph::new();
        let protos = net.prototypes(&mut g, store, &episode.support)?;
        let deltas = records
            .iter()
            .map(|r| net.delta(&mut g, store, protos, &episode.queries[r.query]))
            .collect::<Result<Vec<_>>>()?;
        let Some((bar, kl)) = confusion_terms(&mut g, net, store, &deltas, records, literal)? else {
            return Ok((0.0, 0.0));
        };
        let values = (g.value(bar).item(), g.value(kl).item());
        let total = g.add(bar, kl)?;
        let mut grads = g.backward(total)?;
        if self.config.phase2_scope == Phase2Scope::Projection {
            let (wc, bc) = (net.head.wc, net.head.bc);
            grads.retain(|id| id == wc || id == bc);
        }
        self.adam.step(&mut self.model.store, &grads);
        Ok(values)
    }

    /// Samples an episode from `train` and trains on it.
    pub fn sample_and_step(&mut self, train: &Dataset) -> Result<StepMetrics> {
        let c = &self.config;
        let episode = sample_episode(train, c.n, c.k, c.q, &mut self.rng)?;
        let prepared = self.model.prepare_episode(&episode)?;
        self.train_step(&prepared)
    }

    pub fn validate_on(&self, validation: &Dataset) -> Result<EvalReport> {
        let c = &self.config;
        evaluate(
            &self.model,
            validation,
            EpisodeSpec {
                n: c.n,
                k: c.k,
                q: c.q,
                episodes: c.eval_episodes,
                seed: c.seed.wrapping_add(1),
            },
        )
    }

    /// Runs the configured number of steps, calling `on_step` after each.
    pub fn train(
        &mut self,
        train: &Dataset,
        validation: Option<&Dataset>,
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        let validation = validation.filter(|v| v.num_labels() >= self.config.n);
        while self.step < self.config.steps {
            let mut m = self.sample_and_step(train)?;
            let every = self.config.eval_every;
            if let Some(val) = validation {
                if every > 0 && self.step.is_multiple_of(every) {
                    m.val_acc = Some(self.validate_on(val)?.mean);
                }
            }
            on_step(&m)?;
        }
        Ok(())
    }
}

/// Writes one JSON object per line.
pub fn write_log_line<W: Write>(out: &mut W, m: &StepMetrics) -> Result<()> {
    let line = serde_json::to_string(m).map_err(|e| CtegError::Config(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| CtegError::io("training log", e))
}
