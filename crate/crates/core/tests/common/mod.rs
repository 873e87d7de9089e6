#![allow(dead_code)]

use cteg::cattrain::TrainConfig;
use cteg::corpus::{AnnotatedInstance, Dataset, DepEdge, Span};
use cteg::encoder::EncoderConfig;
use cteg::gatenet::GateConfig;

pub fn edge(head: i64, child: usize, label: &str) -> DepEdge {
    DepEdge::new(head, child, label)
}

/// "chen-chun-chang is a mathematician who works in model-theory" with the
/// entity pair (chen-chun-chang, model-theory).
pub fn mathematician() -> AnnotatedInstance {
    AnnotatedInstance {
        tokens: ["chen-chun-chang", "is", "a", "mathematician", "who", "works", "in", "model-theory"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        span1: Span(0, 0),
        span2: Span(7, 7),
        relation: "field_of_work".into(),
        dep_edges: vec![
            edge(3, 0, "nsubj"),
            edge(3, 1, "cop"),
            edge(3, 2, "det"),
            edge(-1, 3, "root"),
            edge(5, 4, "nsubj"),
            edge(3, 5, "acl:relcl"),
            edge(7, 6, "case"),
            edge(5, 7, "nmod"),
        ],
    }
}

/// `per` copies of one fixed sentence for each of `labels` relations; the
/// sentences of different relations differ in their middle word.
pub fn separable(labels: usize, per: usize) -> Dataset {
    Dataset::from_instances((0..labels).flat_map(|l| {
        (0..per).map(move |_| AnnotatedInstance {
            tokens: vec!["ann".into(), format!("cue{l}"), "bob".into(), format!("tail{l}")],
            span1: Span(0, 0),
            span2: Span(2, 2),
            relation: format!("r{l}"),
            dep_edges: vec![edge(1, 0, "nsubj"), edge(-1, 1, "root"), edge(1, 2, "obj"), edge(2, 3, "amod")],
        })
    }))
}

pub fn tiny_config(n: usize, k: usize, q: usize) -> TrainConfig {
    TrainConfig {
        n,
        k,
        q,
        steps: 5,
        max_length: 16,
        encoder: EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_width: 8,
            ..EncoderConfig::default()
        },
        gate: GateConfig {
            d_pos: 2,
            d_syn: 2,
            gate_hidden: 4,
            gate_heads: 1,
            gate_layers: 1,
            gate_ffn: 4,
        },
        ..TrainConfig::default()
    }
}
