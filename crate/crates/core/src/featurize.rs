//! Entity-relative token features: signed distances to each entity span and
//! syntactic tags read off the dependency tree pruned to edges that touch an
//! entity.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedInstance, Dataset, DepEdge, Span, DEFAULT_MAX_LENGTH};
use crate::error::{CtegError, Result};

pub const TAG_SELF: &str = "self";
pub const TAG_OTHER: &str = "other";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityFeatures {
    pub pos1: Vec<i64>,
    pub pos2: Vec<i64>,
    pub tag1: Vec<String>,
    pub tag2: Vec<String>,
}

impl EntityFeatures {
    pub fn len(&self) -> usize {
        self.pos1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos1.is_empty()
    }
}

/// Distance from each token to the nearest boundary of `span`; zero inside
/// the span, clipped to `±max_length`.
pub fn relative_positions(n: usize, span: Span, max_length: usize) -> Result<Vec<i64>> {
    if span.0 > span.1 || span.1 >= n {
        return Err(CtegError::Instance(format!("span out of range for length {n}")));
    }
    let clip = max_length as i64;
    Ok((0..n)
        .map(|i| {
            let d = if i < span.0 {
                i as i64 - span.0 as i64
            } else if i > span.1 {
                i as i64 - span.1 as i64
            } else {
                0
            };
            d.clamp(-clip, clip)
        })
        .collect())
}

fn touches(edge: &DepEdge, span: Span) -> bool {
    span.contains(edge.child()) || edge.head().is_some_and(|h| span.contains(h))
}

/// Keeps exactly the edges with at least one endpoint inside either span.
pub fn prune_tree(edges: &[DepEdge], span1: Span, span2: Span) -> Vec<DepEdge> {
    edges
        .iter()
        .filter(|e| touches(e, span1) || touches(e, span2))
        .cloned()
        .collect()
}

/// Tag per token for one entity: `self` inside the span, the label of an
/// edge linking the token to any span token (either direction), else
/// `other`. With several linking edges the one with the smallest child index
/// wins.
pub fn syntactic_tags(edges: &[DepEdge], span: Span, n: usize) -> Vec<String> {
    let mut best: Vec<Option<(usize, &str)>> = vec![None; n];
    for edge in edges {
        let Some(head) = edge.head() else { continue };
        let child = edge.child();
        let other_end = if span.contains(head) && !span.contains(child) {
            child
        } else if span.contains(child) && !span.contains(head) {
            head
        } else {
            continue;
        };
        if other_end >= n {
            continue;
        }
        let slot = &mut best[other_end];
        if slot.is_none_or(|(c, _)| child < c) {
            *slot = Some((child, edge.label()));
        }
    }
    (0..n)
        .map(|i| {
            if span.contains(i) {
                TAG_SELF.to_string()
            } else {
                best[i].map_or(TAG_OTHER, |(_, l)| l).to_string()
            }
        })
        .collect()
}

pub fn featurize(instance: &AnnotatedInstance) -> Result<EntityFeatures> {
    featurize_with(instance, DEFAULT_MAX_LENGTH)
}

pub fn featurize_with(instance: &AnnotatedInstance, max_length: usize) -> Result<EntityFeatures> {
    let n = instance.len();
    if instance.span1.overlaps(&instance.span2) {
        return Err(CtegError::Instance("entity spans overlap".into()));
    }
    let pruned = prune_tree(&instance.dep_edges, instance.span1, instance.span2);
    Ok(EntityFeatures {
        pos1: relative_positions(n, instance.span1, max_length)?,
        pos2: relative_positions(n, instance.span2, max_length)?,
        tag1: syntactic_tags(&pruned, instance.span1, n),
        tag2: syntactic_tags(&pruned, instance.span2, n),
    })
}

/// Tag inventory. `other` is id 0 and absorbs labels never seen in training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TagVocabulary {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TagVocabulary {
    fn from(tags: Vec<String>) -> Self {
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TagVocabulary { tags, index }
    }
}

impl From<TagVocabulary> for Vec<String> {
    fn from(v: TagVocabulary) -> Self {
        v.tags
    }
}

impl TagVocabulary {
    pub const OTHER_ID: usize = 0;
    pub const SELF_ID: usize = 1;

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<&str> = labels
            .into_iter()
            .filter(|l| *l != TAG_SELF && *l != TAG_OTHER)
            .collect();
        let mut tags = vec![TAG_OTHER.to_string(), TAG_SELF.to_string()];
        tags.extend(sorted.into_iter().map(str::to_string));
        TagVocabulary::from(tags)
    }

    /// All dependency labels present in `dataset`'s parses.
    pub fn build(dataset: &Dataset) -> Self {
        Self::from_labels(dataset.instances().flat_map(|i| i.dep_edges.iter().map(DepEdge::label)))
    }

    pub fn id(&self, tag: &str) -> usize {
        self.index.get(tag).copied().unwrap_or(Self::OTHER_ID)
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn positions_around_point_entity() {
        assert_eq!(relative_positions(5, Span(2, 2), 100).unwrap(), vec![-2, -1, 0, 1, 2]);
    }

    #[test]
    fn positions_around_multi_token_entity() {
        assert_eq!(relative_positions(6, Span(1, 3), 100).unwrap(), vec![-1, 0, 0, 0, 1, 2]);
    }

    #[test]
    fn positions_all_inside() {
        assert_eq!(relative_positions(3, Span(0, 2), 100).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn positions_are_clipped() {
        assert_eq!(relative_positions(6, Span(0, 0), 2).unwrap(), vec![0, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn positions_reject_bad_span() {
        assert!(relative_positions(3, Span(1, 3), 100).is_err());
    }

    #[test]
    fn prune_keeps_only_entity_edges() {
        let edges = vec![
            DepEdge::new(-1, 2, "root"),
            DepEdge::new(2, 0, "nsubj"),
            DepEdge::new(2, 1, "cop"),
            DepEdge::new(2, 3, "obj"),
        ];
        assert!(prune_tree(&edges, Span(4, 4), Span(5, 5)).is_empty());
        let kept = prune_tree(&edges, Span(0, 0), Span(5, 5));
        assert_eq!(kept, vec![DepEdge::new(2, 0, "nsubj")]);
    }

    #[test]
    fn prune_keeps_edge_inside_one_span() {
        let edges = vec![DepEdge::new(1, 0, "compound"), DepEdge::new(-1, 1, "root")];
        let kept = prune_tree(&edges, Span(0, 1), Span(3, 3));
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn unconnected_entity_gives_other_everywhere_else() {
        let edges = vec![DepEdge::new(-1, 1, "root"), DepEdge::new(1, 2, "obj"), DepEdge::new(2, 0, "x")];
        let tags = syntactic_tags(&prune_tree(&edges, Span(3, 3), Span(0, 0)), Span(3, 3), 4);
        assert_eq!(tags, strs(&["other", "other", "other", "self"]));
    }

    #[test]
    fn smallest_child_index_wins_ties() {
        // token 2 links to the span {0,1} twice: as head of 0 and as head of 1
        let edges = vec![DepEdge::new(2, 1, "b"), DepEdge::new(2, 0, "a"), DepEdge::new(-1, 2, "root")];
        let tags = syntactic_tags(&edges, Span(0, 1), 3);
        assert_eq!(tags[2], "a");
    }

    #[test]
    fn tag_vocabulary_falls_back_to_other() {
        let v = TagVocabulary::from_labels(["nsubj", "case", "self"]);
        assert_eq!(v.id("other"), TagVocabulary::OTHER_ID);
        assert_eq!(v.id("self"), TagVocabulary::SELF_ID);
        assert_eq!(v.id("never-seen"), TagVocabulary::OTHER_ID);
        assert_eq!(v.len(), 4);
    }

    fn random_instance() -> impl Strategy<Value = AnnotatedInstance> {
        (3usize..12).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(0usize..n, n),
                0..n - 1,
                1usize..3,
            )
                .prop_map(|(n, heads, cut, w)| {
                    let l1 = cut.saturating_sub(w - 1);
                    let span1 = Span(l1, cut);
                    let span2 = Span(cut + 1, n - 1);
                    // head of token i is heads[i] if it points to an earlier token, else root
                    let dep_edges = (0..n)
                        .map(|i| {
                            if i > 0 && heads[i] < i {
                                DepEdge::new(heads[i] as i64, i, ["nsubj", "obj", "case", "amod"][heads[i] % 4])
                            } else if i == 0 {
                                DepEdge::new(-1, 0, "root")
                            } else {
                                DepEdge::new(0, i, "dep")
                            }
                        })
                        .collect();
                    AnnotatedInstance {
                        tokens: (0..n).map(|i| format!("t{i}")).collect(),
                        span1,
                        span2,
                        relation: "r".into(),
                        dep_edges,
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn lengths_and_span_membership(inst in random_instance()) {
            let f = featurize(&inst).unwrap();
            let n = inst.len();
            prop_assert_eq!(f.pos1.len(), n);
            prop_assert_eq!(f.pos2.len(), n);
            prop_assert_eq!(f.tag1.len(), n);
            prop_assert_eq!(f.tag2.len(), n);
            for i in 0..n {
                prop_assert_eq!(f.pos1[i] == 0, inst.span1.contains(i));
                prop_assert_eq!(f.pos2[i] == 0, inst.span2.contains(i));
                prop_assert_eq!(f.tag1[i] == TAG_SELF, inst.span1.contains(i));
                prop_assert_eq!(f.tag2[i] == TAG_SELF, inst.span2.contains(i));
            }
            prop_assert_eq!(featurize(&inst).unwrap(), f);
        }

        #[test]
        fn pruning_never_keeps_unrelated_edges(inst in random_instance()) {
            for e in prune_tree(&inst.dep_edges, inst.span1, inst.span2) {
                prop_assert!(touches(&e, inst.span1) || touches(&e, inst.span2));
            }
        }
    }
}
