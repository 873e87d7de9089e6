//! End-to-end training runs over a labelled corpus: split by relation, train,
//! and attach the split to the resulting model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cattrain::{StepMetrics, TrainConfig, Trainer};
use crate::corpus::{Dataset, RelationSchema};
use crate::error::{CtegError, Result};
use crate::model::Model;

/// Training configuration file: every [`TrainConfig`] field plus the held-out
/// relations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Relations kept out of training; all others are trained on.
    #[serde(default)]
    pub validation_relations: Vec<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CtegError::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CtegError::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn schema_for(corpus: &Dataset, validation: &[String]) -> Result<RelationSchema> {
    let labels = corpus.labels();
    for v in validation {
        if !labels.contains(v) {
            return Err(CtegError::Config(format!("validation relation {v:?} not in the data")));
        }
    }
    let train = labels.iter().filter(|l| !validation.contains(l)).cloned().collect();
    RelationSchema::new(train, validation.to_vec())
}

/// Trains on the non-held-out relations of `corpus`. The word vocabulary
/// covers the whole corpus; tags come from the training relations only.
pub fn train_corpus(
    corpus: &Dataset,
    config: &RunConfig,
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Model> {
    let schema = schema_for(corpus, &config.validation_relations)?;
    let train = corpus.subset(&schema.train);
    let validation = corpus.subset(&schema.validation);
    let mut trainer = Trainer::new(config.train.clone(), corpus, &train)?;
    trainer.train(&train, Some(&validation), on_step)?;
    let mut model = trainer.model;
    model.schema = Some(schema);
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Held-out relations if the model records any, else everything.
    #[default]
    Validation,
    Train,
    All,
}

impl std::str::FromStr for Split {
    type Err = CtegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Split::Validation),
            "train" => Ok(Split::Train),
            "all" => Ok(Split::All),
            _ => Err(CtegError::Config(format!("unknown split {s:?}"))),
        }
    }
}

pub fn select_split(model: &Model, corpus: &Dataset, split: Split) -> Dataset {
    match (&model.schema, split) {
        (Some(s), Split::Validation) if !s.validation.is_empty() => corpus.subset(&s.validation),
        (Some(s), Split::Train) => corpus.subset(&s.train),
        _ => corpus.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_mixes_train_fields_and_split() {
        let c = RunConfig::from_json(r#"{"steps":3,"n":2,"validation_relations":["x"]}"#).unwrap();
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.train.n, 2);
        assert_eq!(c.train.k, 5);
        assert_eq!(c.validation_relations, vec!["x".to_string()]);
        assert!(RunConfig::from_json("{").is_err());
    }
}
