//! Episode evaluation, confusion matrices, and JSON exports for gate heatmaps
//! and distance distributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_episode_including, AnnotatedInstance, Dataset, Episode};
use crate::error::{CtegError, Result};
use crate::model::Model;
use crate::numcore::{softmax, Graph, Tensor};
use crate::protohead::{confusion_projection, predict};

pub const OTHER_COLUMN: &str = "other";

/// Anything that labels an episode's queries with way indices.
pub trait EpisodeClassifier {
    fn classify(&self, episode: &Episode) -> Result<Vec<usize>>;
}

impl EpisodeClassifier for Model {
    fn classify(&self, episode: &Episode) -> Result<Vec<usize>> {
        let prepared = self.prepare_episode(episode)?;
        Ok(self.episode_deltas(&prepared)?.iter().map(|d| predict(d)).collect())
    }
}

/// Mergeable running mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.merge(&Accumulator {
            count: 1,
            mean: x,
            m2: 0.0,
        });
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.std() / (self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub episodes: usize,
    pub queries: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub way_labels: Vec<String>,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl EpisodeOutcome {
    pub fn correct(&self) -> usize {
        self.gold.iter().zip(&self.predicted).filter(|(g, p)| g == p).count()
    }

    pub fn accuracy(&self) -> f64 {
        if self.gold.is_empty() {
            0.0
        } else {
            self.correct() as f64 / self.gold.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Samples `spec.episodes` episodes from one seeded stream, each containing
/// every label in `include`, and classifies them.
pub fn run_episodes<C: EpisodeClassifier + ?Sized>(
    classifier: &C,
    dataset: &Dataset,
    include: &[String],
    spec: EpisodeSpec,
) -> Result<Vec<EpisodeOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.episodes)
        .map(|_| {
            let episode = sample_episode_including(dataset, include, spec.n, spec.k, spec.q, &mut rng)?;
            let predicted = classifier.classify(&episode)?;
            Ok(EpisodeOutcome {
                gold: episode.queries.iter().map(|q| q.gold).collect(),
                way_labels: episode.way_labels,
                predicted,
            })
        })
        .collect()
}

pub fn summarize(outcomes: &[EpisodeOutcome]) -> EvalReport {
    let mut acc = Accumulator::default();
    let (mut queries, mut correct) = (0, 0);
    for o in outcomes {
        acc.push(o.accuracy());
        queries += o.gold.len();
        correct += o.correct();
    }
    EvalReport {
        mean: acc.mean,
        std: acc.std(),
        stderr: acc.stderr(),
        episodes: outcomes.len(),
        queries,
        correct,
    }
}

/// Mean episode accuracy with its spread over episodes.
pub fn evaluate<C: EpisodeClassifier + ?Sized>(classifier: &C, dataset: &Dataset, spec: EpisodeSpec) -> Result<EvalReport> {
    if spec.episodes == 0 {
        return Err(CtegError::Config("episode count must be positive".into()));
    }
    Ok(summarize(&run_episodes(classifier, dataset, &[], spec)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row labels (the focus relations).
    pub labels: Vec<String>,
    /// Column labels: the focus relations then `other`.
    pub columns: Vec<String>,
    /// Row-normalized fractions.
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_outcomes(focus: &[String], outcomes: &[EpisodeOutcome]) -> Self {
        let f = focus.len();
        let mut counts = vec![vec![0u64; f + 1]; f];
        for o in outcomes {
            for (&gold, &pred) in o.gold.iter().zip(&o.predicted) {
                let Some(row) = focus.iter().position(|l| *l == o.way_labels[gold]) else { continue };
                let col = focus.iter().position(|l| *l == o.way_labels[pred]).unwrap_or(f);
                counts[row][col] += 1;
            }
        }
        let rows = counts
            .iter()
            .map(|r| {
                let total: u64 = r.iter().sum();
                r.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        let mut columns = focus.to_vec();
        columns.push(OTHER_COLUMN.to_string());
        ConfusionMatrix {
            labels: focus.to_vec(),
            columns,
            rows,
            counts,
        }
    }

    /// Mean of the diagonal fractions.
    pub fn mean_diagonal(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        (0..self.labels.len()).map(|i| self.rows[i][i]).sum::<f64>() / self.labels.len() as f64
    }
}

/// Confusion matrix over `focus` from episodes that always include every
/// focus label among their ways.
pub fn confusion_matrix<C: EpisodeClassifier + ?Sized>(
    classifier: &C,
    dataset: &Dataset,
    focus: &[String],
    spec: EpisodeSpec,
) -> Result<ConfusionMatrix> {
    if focus.is_empty() {
        return Err(CtegError::Config("no focus labels given".into()));
    }
    for label in focus {
        if dataset.group(label).is_none() {
            return Err(CtegError::Sampling(format!("focus label {label:?} not in dataset")));
        }
    }
    let outcomes = run_episodes(classifier, dataset, focus, spec)?;
    Ok(ConfusionMatrix::from_outcomes(focus, &outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGate {
    pub token: String,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateExport {
    pub mode: String,
    pub tokens: Vec<TokenGate>,
}

pub fn export_gates(model: &Model, instance: &AnnotatedInstance) -> Result<GateExport> {
    let gates = model.gate_values(instance)?;
    Ok(GateExport {
        mode: model.network.mode().name().to_string(),
        tokens: instance
            .tokens
            .iter()
            .zip(gates)
            .map(|(t, g)| TokenGate {
                token: t.clone(),
                gate: g,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceExport {
    pub way_labels: Vec<String>,
    pub delta: Vec<f64>,
    pub delta_bar: Vec<f64>,
    /// softmax(−δ)
    pub p_true: Vec<f64>,
    /// softmax(δ̄)
    pub p_confusing: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

pub fn export_distances(model: &Model, episode: &Episode, query: usize) -> Result<DistanceExport> {
    let Some(q) = episode.queries.get(query) else {
        return Err(CtegError::IndexOutOfRange {
            what: "query",
            index: query,
            len: episode.queries.len(),
        });
    };
    let prepared = model.prepare_episode(episode)?;
    let mut g = Graph::new();
    let net = &model.network;
    let protos = net.prototypes(&mut g, &model.store, &prepared.support)?;
    let d = net.delta(&mut g, &model.store, protos, &prepared.queries[query])?;
    let delta = g.value(d).data().to_vec();
    let head = &net.head;
    let bias: &Tensor = model.store.tensor(head.bc);
    let delta_bar = confusion_projection(&delta, model.store.tensor(head.wc), bias.data())?;
    let neg: Vec<f64> = delta.iter().map(|v| -v).collect();
    Ok(DistanceExport {
        way_labels: episode.way_labels.clone(),
        p_true: softmax(&neg),
        p_confusing: softmax(&delta_bar),
        predicted: predict(&delta),
        gold: q.gold,
        delta,
        delta_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DepEdge, Span};
    use rand::Rng;
    use std::cell::RefCell;

    fn corpus(labels: usize, per: usize) -> Dataset {
        Dataset::from_instances((0..labels).flat_map(|l| {
            (0..per).map(move |i| AnnotatedInstance {
                tokens: vec![format!("w{l}"), format!("x{i}")],
                span1: Span(0, 0),
                span2: Span(1, 1),
                relation: format!("r{l}"),
                dep_edges: vec![DepEdge::new(-1, 0, "root"), DepEdge::new(0, 1, "obj")],
            })
        }))
    }

    /// Reads the label off the first token.
    struct Oracle;
    impl EpisodeClassifier for Oracle {
        fn classify(&self, e: &Episode) -> Result<Vec<usize>> {
            Ok(e.queries
                .iter()
                .map(|q| {
                    let want = q.instance.tokens[0].replacen('w', "r", 1);
                    e.way_labels.iter().position(|l| *l == want).unwrap()
                })
                .collect())
        }
    }

    struct Uniform(RefCell<ChaCha8Rng>);
    impl EpisodeClassifier for Uniform {
        fn classify(&self, e: &Episode) -> Result<Vec<usize>> {
            let mut rng = self.0.borrow_mut();
            Ok(e.queries.iter().map(|_| rng.gen_range(0..e.n_way())).collect())
        }
    }

    fn spec(n: usize, episodes: usize) -> EpisodeSpec {
        EpisodeSpec {
            n,
            k: 2,
            q: 3,
            episodes,
            seed: 17,
        }
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let xs = [0.2, 0.4, 0.9, 0.1, 0.5, 0.6];
        let mut all = Accumulator::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Accumulator::default(), Accumulator::default());
        xs[..2].iter().for_each(|&x| a.push(x));
        xs[2..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-15);
        assert!((a.std() - all.std()).abs() < 1e-15);
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((all.std() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn oracle_scores_perfectly() {
        let r = evaluate(&Oracle, &corpus(6, 8), spec(5, 20)).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.correct, r.queries);
        assert_eq!(r.queries, 20 * 15);
    }

    #[test]
    fn oracle_confusion_is_identity() {
        let focus: Vec<String> = ["r0", "r3", "r5"].iter().map(|s| s.to_string()).collect();
        let m = confusion_matrix(&Oracle, &corpus(6, 8), &focus, spec(5, 10)).unwrap();
        for (i, row) in m.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(m.columns.last().unwrap(), OTHER_COLUMN);
    }

    #[test]
    fn uniform_predictor_confusion_rows() {
        let focus: Vec<String> = ["r1", "r2", "r4"].iter().map(|s| s.to_string()).collect();
        let u = Uniform(RefCell::new(ChaCha8Rng::seed_from_u64(3)));
        let m = confusion_matrix(&u, &corpus(7, 10), &focus, spec(5, 3000)).unwrap();
        for row in &m.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for v in &row[..3] {
                assert!((v - 0.2).abs() < 0.02, "{row:?}");
            }
            assert!((row[3] - 0.4).abs() < 0.02, "{row:?}");
        }
    }

    #[test]
    fn confusion_diagonal_mass_matches_accuracy() {
        let u = Uniform(RefCell::new(ChaCha8Rng::seed_from_u64(9)));
        let ds = corpus(5, 10);
        let all = ds.labels();
        let outcomes = run_episodes(&u, &ds, &all, spec(5, 40)).unwrap();
        let m = ConfusionMatrix::from_outcomes(&all, &outcomes);
        let diag: u64 = (0..5).map(|i| m.counts[i][i]).sum();
        let r = summarize(&outcomes);
        assert_eq!(diag as usize, r.correct);
        assert!((diag as f64 / r.queries as f64 - r.mean).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let ds = corpus(6, 8);
        let u1 = Uniform(RefCell::new(ChaCha8Rng::seed_from_u64(1)));
        let u2 = Uniform(RefCell::new(ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(evaluate(&u1, &ds, spec(5, 30)).unwrap(), evaluate(&u2, &ds, spec(5, 30)).unwrap());
    }

    #[test]
    fn unknown_focus_label_is_an_error() {
        let focus = vec!["nope".to_string()];
        assert!(confusion_matrix(&Oracle, &corpus(6, 8), &focus, spec(5, 2)).is_err());
    }
}
