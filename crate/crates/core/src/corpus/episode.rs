use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedInstance, Dataset};
use crate::error::{CtegError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub instance: AnnotatedInstance,
    /// Index into `Episode::way_labels`.
    pub gold: usize,
}

/// One N-way K-shot task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub way_labels: Vec<String>,
    /// `support[j]` holds the K instances of `way_labels[j]`.
    pub support: Vec<Vec<AnnotatedInstance>>,
    pub queries: Vec<Query>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.way_labels.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

/// Samples `n` relations, then `k` support and `q` query instances per
/// relation without replacement.
pub fn sample_episode<R: Rng>(dataset: &Dataset, n: usize, k: usize, q: usize, rng: &mut R) -> Result<Episode> {
    sample_episode_including(dataset, &[], n, k, q, rng)
}

/// Like [`sample_episode`], but every label in `include` is among the ways.
/// The remaining ways are drawn at random and the way order is shuffled.
pub fn sample_episode_including<R: Rng>(
    dataset: &Dataset,
    include: &[String],
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(CtegError::Sampling("way and shot counts must be positive".into()));
    }
    if include.len() > n {
        return Err(CtegError::Sampling(format!(
            "{} forced labels exceed way count {n}",
            include.len()
        )));
    }
    let labels = dataset.labels();
    if labels.len() < n {
        return Err(CtegError::Sampling(format!(
            "need {n} relations, dataset has {}",
            labels.len()
        )));
    }
    for l in include {
        if dataset.group(l).is_none() {
            return Err(CtegError::Sampling(format!("relation {l:?} absent from dataset")));
        }
    }
    let rest: Vec<&String> = labels.iter().filter(|l| !include.contains(l)).collect();
    let mut ways: Vec<String> = include.to_vec();
    ways.extend(rest.choose_multiple(rng, n - include.len()).map(|l| (*l).clone()));
    if !include.is_empty() {
        ways.shuffle(rng);
    }

    let mut support = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n * q);
    for (j, label) in ways.iter().enumerate() {
        let group = dataset.group(label).expect("label drawn from dataset");
        if group.len() < k + q {
            return Err(CtegError::Sampling(format!(
                "relation {label:?} has {} instances, need {}",
                group.len(),
                k + q
            )));
        }
        let picked = rand::seq::index::sample(rng, group.len(), k + q).into_vec();
        support.push(picked[..k].iter().map(|&i| group[i].clone()).collect());
        queries.extend(picked[k..].iter().map(|&i| Query {
            instance: group[i].clone(),
            gold: j,
        }));
    }
    Ok(Episode {
        way_labels: ways,
        support,
        queries,
    })
}
