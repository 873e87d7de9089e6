//! Data model, JSONL ingestion, vocabulary, synthetic corpora and episode
//! sampling.

mod episode;
mod synth;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CtegError, Result};

pub use episode::{sample_episode, sample_episode_including, Episode, Query};
pub use synth::{generate_synthetic, RelationTemplate, SynthConfig};
pub use vocab::{build_vocab, Vocabulary, PAD_ID, UNK_ID};

pub const DEFAULT_MAX_LENGTH: usize = 100;

/// Inclusive token span `[l, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn contains(&self, i: usize) -> bool {
        self.0 <= i && i <= self.1
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.0 <= other.1 && other.0 <= self.1
    }

    pub fn len(&self) -> usize {
        self.1 - self.0 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `[head, child, label]`; `head == -1` marks the root edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DepEdge(pub i64, pub usize, pub String);

impl DepEdge {
    pub fn new(head: i64, child: usize, label: &str) -> Self {
        DepEdge(head, child, label.to_string())
    }

    pub fn head(&self) -> Option<usize> {
        usize::try_from(self.0).ok()
    }

    pub fn child(&self) -> usize {
        self.1
    }

    pub fn label(&self) -> &str {
        &self.2
    }
}

/// One sentence with its two marked entities, relation label and parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub tokens: Vec<String>,
    pub span1: Span,
    pub span2: Span,
    pub relation: String,
    pub dep_edges: Vec<DepEdge>,
}

impl AnnotatedInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks spans, length and parse well-formedness. The message is the
    /// bare reason; callers attach location information.
    pub fn validate(&self, max_length: usize) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if n < 2 {
            return Err(format!("sentence too short ({n} tokens)"));
        }
        if n > max_length {
            return Err(format!("sentence longer than max length {max_length}"));
        }
        for span in [self.span1, self.span2] {
            if span.0 > span.1 || span.1 >= n {
                return Err("span out of range".to_string());
            }
        }
        if self.span1.overlaps(&self.span2) {
            return Err("entity spans overlap".to_string());
        }
        let mut seen = vec![false; n];
        for edge in &self.dep_edges {
            if edge.child() >= n {
                return Err(format!("dependency child {} out of range", edge.child()));
            }
            match edge.0 {
                -1 => {}
                h if h >= 0 && (h as usize) < n => {}
                h => return Err(format!("dependency head {h} out of range")),
            }
            if seen[edge.child()] {
                return Err(format!("token {} has more than one head", edge.child()));
            }
            seen[edge.child()] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(format!("missing dependency edge for token {missing}"));
        }
        Ok(())
    }
}

/// Relation inventory and its train/validation partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub relations: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

impl RelationSchema {
    pub fn new(train: Vec<String>, validation: Vec<String>) -> Result<Self> {
        let t: BTreeSet<&String> = train.iter().collect();
        if let Some(shared) = validation.iter().find(|v| t.contains(v)) {
            return Err(CtegError::Config(format!(
                "relation {shared:?} is in both train and validation splits"
            )));
        }
        let mut relations: Vec<String> = train.iter().chain(&validation).cloned().collect();
        relations.sort();
        relations.dedup();
        Ok(RelationSchema {
            relations,
            train,
            validation,
        })
    }

    /// Every label is a training label.
    pub fn open(labels: Vec<String>) -> Self {
        let mut relations = labels.clone();
        relations.sort();
        relations.dedup();
        RelationSchema {
            relations: relations.clone(),
            train: relations,
            validation: Vec::new(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.relations.binary_search_by(|r| r.as_str().cmp(label)).is_ok()
    }
}

/// Instances grouped by relation label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    groups: BTreeMap<String, Vec<AnnotatedInstance>>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_instances(instances: impl IntoIterator<Item = AnnotatedInstance>) -> Self {
        let mut ds = Dataset::new();
        for inst in instances {
            ds.push(inst);
        }
        ds
    }

    pub fn push(&mut self, instance: AnnotatedInstance) {
        self.groups.entry(instance.relation.clone()).or_default().push(instance);
    }

    pub fn labels(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn group(&self, label: &str) -> Option<&[AnnotatedInstance]> {
        self.groups.get(label).map(Vec::as_slice)
    }

    pub fn group_sizes(&self) -> BTreeMap<String, usize> {
        self.groups.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    pub fn num_labels(&self) -> usize {
        self.groups.len()
    }

    pub fn num_instances(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_instances() == 0
    }

    pub fn instances(&self) -> impl Iterator<Item = &AnnotatedInstance> {
        self.groups.values().flatten()
    }

    /// Dataset restricted to `labels` (labels absent from `self` are skipped).
    pub fn subset(&self, labels: &[String]) -> Dataset {
        Dataset {
            groups: labels
                .iter()
                .filter_map(|l| self.groups.get(l).map(|g| (l.clone(), g.clone())))
                .collect(),
        }
    }
}

fn parse_line(line: &str, line_no: usize, max_length: usize) -> Result<AnnotatedInstance> {
    let mut inst: AnnotatedInstance = serde_json::from_str(line).map_err(|e| CtegError::MalformedJson {
        line: line_no,
        message: e.to_string(),
    })?;
    for t in &mut inst.tokens {
        *t = t.to_lowercase();
    }
    inst.validate(max_length)
        .map_err(|message| CtegError::InvalidInstance { line: line_no, message })?;
    Ok(inst)
}

/// Reads instance JSONL from any reader. Blank lines are skipped. With a
/// schema, labels outside it are rejected.
pub fn read_jsonl<R: BufRead>(reader: R, schema: Option<&RelationSchema>, max_length: usize) -> Result<Dataset> {
    let mut ds = Dataset::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CtegError::MalformedJson {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_line(&line, line_no, max_length)?;
        if let Some(schema) = schema {
            if !schema.contains(&inst.relation) {
                return Err(CtegError::UnknownRelation {
                    line: line_no,
                    label: inst.relation,
                });
            }
        }
        ds.push(inst);
    }
    Ok(ds)
}

pub fn load_jsonl(path: &Path, schema: &RelationSchema) -> Result<Dataset> {
    load_jsonl_with(path, Some(schema), DEFAULT_MAX_LENGTH)
}

pub fn load_jsonl_with(path: &Path, schema: Option<&RelationSchema>, max_length: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CtegError::io(path, e))?;
    read_jsonl(std::io::BufReader::new(file), schema, max_length)
}

pub fn write_jsonl(path: &Path, dataset: &Dataset) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| CtegError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in dataset.instances() {
        let line = serde_json::to_string(inst).expect("instances serialize");
        writeln!(w, "{line}").map_err(|e| CtegError::io(path, e))?;
    }
    w.flush().map_err(|e| CtegError::io(path, e))
}
