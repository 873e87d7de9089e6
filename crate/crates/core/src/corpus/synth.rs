//! Synthetic corpus of sentences that each carry two relation cues.
//!
//! Every sentence joins two clauses, each an entity pair linked by one
//! relation's cue phrase. Only one pair is marked as `span1`/`span2`, and the
//! marked clause decides the label, so a classifier that ignores which
//! entities are marked cannot tell the two relations apart.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedInstance, Dataset, DepEdge, Span, DEFAULT_MAX_LENGTH};
use crate::error::{CtegError, Result};

const FILLERS: &[&str] = &["reportedly", "also", "once", "indeed", "later", "formerly"];
const CONSONANTS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

fn default_pattern() -> String {
    "{e1} {cue} {e2}".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub relation: String,
    /// Cue phrase, or several interchangeable variants.
    #[serde(deserialize_with = "one_or_many")]
    pub cue: Vec<String>,
    /// Word order of a clause; must contain `{e1}`, `{cue}` and `{e2}` once.
    #[serde(default = "default_pattern")]
    pub pattern: String,
    /// Head word of the cue; defaults to its longest word (the last one on ties).
    #[serde(default)]
    pub head: Option<String>,
    /// Relations sharing a group co-occur preferentially.
    #[serde(default)]
    pub group: Option<String>,
}

impl RelationTemplate {
    pub fn new(relation: &str, cue: &str) -> Self {
        RelationTemplate {
            relation: relation.to_string(),
            cue: vec![cue.to_string()],
            pattern: default_pattern(),
            head: None,
            group: None,
        }
    }

    pub fn in_group(mut self, group: &str) -> Self {
        self.group = Some(group.to_string());
        self
    }

    pub fn with_cues(mut self, cues: &[&str]) -> Self {
        self.cue = cues.iter().map(|s| s.to_string()).collect();
        self
    }
}

fn d_max_filler() -> usize {
    1
}
fn d_group_probability() -> f64 {
    0.75
}
fn d_max_entity_tokens() -> usize {
    2
}
fn d_name_pool() -> usize {
    300
}
fn d_instances() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub templates: Vec<RelationTemplate>,
    #[serde(default = "d_instances")]
    pub instances_per_relation: usize,
    /// Filler words inserted before the cue: 0..=max_filler.
    #[serde(default = "d_max_filler")]
    pub max_filler: usize,
    /// Probability that the unmarked clause is embedded right after the
    /// marked first entity instead of being conjoined.
    #[serde(default)]
    pub embed_probability: f64,
    /// Probability of drawing the co-occurring relation from the same group.
    #[serde(default = "d_group_probability")]
    pub group_probability: f64,
    #[serde(default = "d_max_entity_tokens")]
    pub max_entity_tokens: usize,
    #[serde(default = "d_name_pool")]
    pub name_pool: usize,
}

impl SynthConfig {
    pub fn new(templates: Vec<RelationTemplate>, instances_per_relation: usize) -> Self {
        SynthConfig {
            templates,
            instances_per_relation,
            max_filler: d_max_filler(),
            embed_probability: 0.0,
            group_probability: d_group_probability(),
            max_entity_tokens: d_max_entity_tokens(),
            name_pool: d_name_pool(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.templates.len() < 2 {
            return Err(CtegError::Template(format!(
                "need at least 2 relation templates, got {}",
                self.templates.len()
            )));
        }
        let mut seen = HashSet::new();
        for t in &self.templates {
            if !seen.insert(&t.relation) {
                return Err(CtegError::Template(format!("duplicate relation {:?}", t.relation)));
            }
            let words: Vec<&str> = t.pattern.split_whitespace().collect();
            for slot in ["{e1}", "{e2}"] {
                if words.iter().filter(|w| **w == slot).count() != 1 {
                    return Err(CtegError::Template(format!(
                        "template for {:?} has no entity slot {slot}",
                        t.relation
                    )));
                }
            }
            if words.iter().filter(|w| **w == "{cue}").count() != 1 {
                return Err(CtegError::Template(format!(
                    "template for {:?} needs exactly one {{cue}} slot",
                    t.relation
                )));
            }
            if t.cue.is_empty() || t.cue.iter().any(|c| c.split_whitespace().next().is_none()) {
                return Err(CtegError::Template(format!("template for {:?} has an empty cue", t.relation)));
            }
        }
        if self.instances_per_relation == 0 || self.max_entity_tokens == 0 {
            return Err(CtegError::Template("instance and entity-token counts must be positive".into()));
        }
        Ok(())
    }
}

/// Clause with local token indices.
struct Clause {
    tokens: Vec<String>,
    /// (head, child, label); head is always a local index.
    edges: Vec<(usize, usize, &'static str)>,
    root: usize,
    e1: Span,
    e2: Span,
}

fn head_index(cue: &[&str], explicit: Option<&str>) -> usize {
    if let Some(h) = explicit {
        if let Some(i) = cue.iter().position(|w| *w == h) {
            return i;
        }
    }
    let mut best = 0;
    for (i, w) in cue.iter().enumerate() {
        if w.len() >= cue[best].len() {
            best = i;
        }
    }
    best
}

struct Generator<'a> {
    config: &'a SynthConfig,
    names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn entity(&mut self) -> Vec<String> {
        let len = self.rng.gen_range(1..=self.config.max_entity_tokens);
        (0..len)
            .map(|_| self.names.choose(&mut self.rng).expect("non-empty pool").clone())
            .collect()
    }

    fn clause(&mut self, template: &RelationTemplate) -> Clause {
        let cue_text = template.cue.choose(&mut self.rng).expect("validated").clone();
        let cue: Vec<&str> = cue_text.split_whitespace().collect();
        let head_in_cue = head_index(&cue, template.head.as_deref());

        let mut tokens = Vec::new();
        let mut e1 = Span(0, 0);
        let mut e2 = Span(0, 0);
        let mut cue_start = 0;
        let mut fillers = Vec::new();
        let mut literals = Vec::new();
        for word in template.pattern.split_whitespace() {
            match word {
                "{e1}" | "{e2}" => {
                    let ent = self.entity();
                    let span = Span(tokens.len(), tokens.len() + ent.len() - 1);
                    tokens.extend(ent);
                    if word == "{e1}" {
                        e1 = span;
                    } else {
                        e2 = span;
                    }
                }
                "{cue}" => {
                    let count = self.rng.gen_range(0..=self.config.max_filler);
                    for _ in 0..count {
                        fillers.push(tokens.len());
                        tokens.push(FILLERS.choose(&mut self.rng).expect("fillers").to_string());
                    }
                    cue_start = tokens.len();
                    tokens.extend(cue.iter().map(|w| w.to_string()));
                }
                lit => {
                    literals.push(tokens.len());
                    tokens.push(lit.to_lowercase());
                }
            }
        }

        let head = cue_start + head_in_cue;
        let mut edges = Vec::new();
        for (span, label) in [(e1, "nsubj"), (e2, "nmod")] {
            for t in span.0..span.1 {
                edges.push((span.1, t, "compound"));
            }
            edges.push((head, span.1, label));
        }
        for i in 0..cue.len() {
            let t = cue_start + i;
            if t < head {
                edges.push((head, t, "det"));
            } else if t > head {
                edges.push((e2.1, t, "case"));
            }
        }
        for &f in &fillers {
            edges.push((head, f, "advmod"));
        }
        for &l in &literals {
            edges.push((head, l, "cop"));
        }
        Clause {
            tokens,
            edges,
            root: head,
            e1,
            e2,
        }
    }

    fn partner(&mut self, index: usize) -> usize {
        let config = self.config;
        let templates = &config.templates;
        let me = &templates[index];
        if let Some(group) = &me.group {
            let mates: Vec<usize> = (0..templates.len())
                .filter(|&j| j != index && templates[j].group.as_ref() == Some(group))
                .collect();
            if !mates.is_empty() && self.rng.gen_bool(config.group_probability.clamp(0.0, 1.0)) {
                return *mates.choose(&mut self.rng).expect("non-empty");
            }
        }
        let others: Vec<usize> = (0..templates.len()).filter(|&j| j != index).collect();
        *others.choose(&mut self.rng).expect("at least two templates")
    }

    fn instance(&mut self, index: usize) -> AnnotatedInstance {
        let other_index = self.partner(index);
        let config = self.config;
        let templates = &config.templates;
        let marked = self.clause(&templates[index]);
        let other = self.clause(&templates[other_index]);

        let mut tokens: Vec<String> = Vec::new();
        let mut edges: Vec<DepEdge> = Vec::new();
        let (span1, span2);

        if self.rng.gen_bool(self.config.embed_probability.clamp(0.0, 1.0)) {
            // marked[..=e1.end] , other , marked[e1.end+1..]
            let cut = marked.e1.1 + 1;
            let shift = other.tokens.len() + 2;
            let map = |i: usize| if i < cut { i } else { i + shift };
            tokens.extend_from_slice(&marked.tokens[..cut]);
            tokens.push(",".into());
            tokens.extend(other.tokens.iter().cloned());
            tokens.push(",".into());
            tokens.extend_from_slice(&marked.tokens[cut..]);
            for &(h, c, l) in &marked.edges {
                edges.push(DepEdge::new(map(h) as i64, map(c), l));
            }
            edges.push(DepEdge::new(-1, map(marked.root), "root"));
            let off = cut + 1;
            for &(h, c, l) in &other.edges {
                edges.push(DepEdge::new((h + off) as i64, c + off, l));
            }
            edges.push(DepEdge::new(marked.e1.1 as i64, other.root + off, "acl"));
            edges.push(DepEdge::new((other.root + off) as i64, cut, "punct"));
            edges.push(DepEdge::new((other.root + off) as i64, off + other.tokens.len(), "punct"));
            span1 = Span(map(marked.e1.0), map(marked.e1.1));
            span2 = Span(map(marked.e2.0), map(marked.e2.1));
        } else {
            let marked_first = self.rng.gen_bool(0.5);
            let (first, second) = if marked_first { (&marked, &other) } else { (&other, &marked) };
            tokens.extend(first.tokens.iter().cloned());
            tokens.push("and".into());
            let off = first.tokens.len() + 1;
            tokens.extend(second.tokens.iter().cloned());
            for &(h, c, l) in &first.edges {
                edges.push(DepEdge::new(h as i64, c, l));
            }
            edges.push(DepEdge::new(-1, first.root, "root"));
            for &(h, c, l) in &second.edges {
                edges.push(DepEdge::new((h + off) as i64, c + off, l));
            }
            edges.push(DepEdge::new(first.root as i64, second.root + off, "conj"));
            edges.push(DepEdge::new((second.root + off) as i64, off - 1, "cc"));
            let base = if marked_first { 0 } else { off };
            span1 = Span(marked.e1.0 + base, marked.e1.1 + base);
            span2 = Span(marked.e2.0 + base, marked.e2.1 + base);
        }
        edges.sort_by_key(|e| e.1);

        AnnotatedInstance {
            tokens,
            span1,
            span2,
            relation: templates[index].relation.clone(),
            dep_edges: edges,
        }
    }
}

fn name_pool(size: usize, reserved: &BTreeSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut names = BTreeSet::new();
    let mut attempts = 0;
    while names.len() < size && attempts < size * 100 {
        attempts += 1;
        let syllables = rng.gen_range(2..=3);
        let name: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    CONSONANTS.choose(rng).expect("consonants"),
                    VOWELS.choose(rng).expect("vowels")
                )
            })
            .collect();
        if !reserved.contains(&name) {
            names.insert(name);
        }
    }
    names.into_iter().collect()
}

/// Generates `instances_per_relation` sentences for every template.
/// Deterministic in `seed`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved: BTreeSet<String> = config
        .templates
        .iter()
        .flat_map(|t| t.cue.iter().chain(std::iter::once(&t.pattern)))
        .flat_map(|s| s.split_whitespace().map(str::to_lowercase))
        .chain(FILLERS.iter().map(|s| s.to_string()))
        .chain(["and".to_string()])
        .collect();
    let names = name_pool(config.name_pool.max(4), &reserved, &mut rng);
    let mut gen = Generator { config, names, rng };

    let mut ds = Dataset::new();
    for index in 0..config.templates.len() {
        for _ in 0..config.instances_per_relation {
            let inst = gen.instance(index);
            inst.validate(DEFAULT_MAX_LENGTH).map_err(CtegError::Instance)?;
            ds.push(inst);
        }
    }
    Ok(ds)
}
