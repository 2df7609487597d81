//! Entity mention detection and type-aware placeholder substitution.
//!
//! The shipped tagger is a gazetteer: it scans token n-grams of the
//! question against the [`EntityIndex`]. [`oracle_tag`] builds the same
//! mentions from gold annotations, which is how the "oracle entities"
//! ablation bypasses tagging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity_index::{normalize_name, EntityCandidate, EntityIndex, NodeResolver};

/// Default tagging threshold; stricter than linking because a spurious
/// mention corrupts the placeholder rewrite.
pub const DEFAULT_TAG_MIN_SCORE: f64 = 0.80;

/// Longest n-gram (in tokens) considered as a mention.
pub const MAX_MENTION_TOKENS: usize = 6;

// Enough headroom to see every homonym of a name.
const TAG_LOOKUP_K: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum NerError {
    #[error("gold entity surface `{0}` does not occur in the question")]
    SurfaceNotFound(String),
    #[error("gold entity references unknown node {0}")]
    UnknownNode(u64),
    #[error("mention `{0}` is not linked to a node")]
    Unresolved(String),
    #[error("invalid mention: {0}")]
    InvalidMention(String),
}

/// A span of the question. `start` and `end` are character (not byte)
/// offsets, half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub resolved: Option<EntityCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedEntity {
    pub placeholder: String,
    pub candidate: EntityCandidate,
    pub mention: EntityMention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatedQuestion {
    pub original: String,
    pub templated: String,
    /// In placeholder order of appearance.
    pub bindings: Vec<LinkedEntity>,
}

impl TemplatedQuestion {
    /// Replaces every placeholder with its mention surface.
    pub fn restore(&self) -> String {
        let mut text = self.templated.clone();
        for binding in &self.bindings {
            text = text.replacen(&binding.placeholder, &binding.mention.surface, 1);
        }
        text
    }

    pub fn binding(&self, placeholder: &str) -> Option<&LinkedEntity> {
        self.bindings.iter().find(|b| b.placeholder == placeholder)
    }
}

/// `[DRUG_0]`, `[GENE_PROTEIN_1]`: the type uppercased with every
/// non-alphanumeric replaced by `_`, then a per-type counter.
pub fn placeholder_token(node_type: &str, ordinal: usize) -> String {
    let upper: String = node_type
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("[{upper}_{ordinal}]")
}

/// Anything that turns a question into entity mentions.
pub trait MentionTagger: Send + Sync {
    fn tag(&self, question: &str) -> Vec<EntityMention>;
}

pub struct GazetteerTagger<'a> {
    pub index: &'a EntityIndex,
    pub min_score: f64,
}

impl MentionTagger for GazetteerTagger<'_> {
    fn tag(&self, question: &str) -> Vec<EntityMention> {
        tag(question, self.index, self.min_score)
    }
}

/// Byte ranges of maximal alphanumeric runs.
fn tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                tokens.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push((s, text.len()));
    }
    tokens
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

fn byte_offset(text: &str, chars: usize) -> Option<usize> {
    if chars == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(chars).map(|(b, _)| b)
}

/// Type word immediately preceding a span ("the drug aspirin").
fn type_hint(text: &str, tokens: &[(usize, usize)], first: usize) -> Option<String> {
    let (s, e) = *tokens.get(first.checked_sub(1)?)?;
    let word = normalize_name(&text[s..e]);
    Some(word.strip_suffix('s').map(str::to_string).unwrap_or(word))
}

fn type_matches(node_type: &str, hint: &str) -> bool {
    let normalized = normalize_name(node_type);
    normalized == hint || normalized.split(' ').any(|w| w == hint)
}

/// Highest-scoring candidate; among ties prefer the type named just before
/// the span, else the lowest node index.
fn pick(candidates: Vec<EntityCandidate>, hint: Option<&str>) -> Option<EntityCandidate> {
    let best = candidates.first()?.score;
    let mut ties = candidates.into_iter().take_while(|c| c.score == best);
    match hint {
        Some(hint) => {
            let ties: Vec<_> = ties.collect();
            let preferred = ties.iter().position(|c| type_matches(&c.node_type, hint));
            ties.into_iter().nth(preferred.unwrap_or(0))
        }
        None => ties.next(),
    }
}

/// Gazetteer tagging: every token n-gram (up to [`MAX_MENTION_TOKENS`])
/// whose best link scores at least `min_score` is a candidate span; spans
/// are then accepted longest first, leftmost on ties, skipping any that
/// overlap an accepted span.
pub fn tag(question: &str, index: &EntityIndex, min_score: f64) -> Vec<EntityMention> {
    let tokens = tokenize(question);
    let mut spans = Vec::new();
    for first in 0..tokens.len() {
        let hint = type_hint(question, &tokens, first);
        for len in 1..=MAX_MENTION_TOKENS.min(tokens.len() - first) {
            let (start, end) = (tokens[first].0, tokens[first + len - 1].1);
            let found = index.lookup(&question[start..end], TAG_LOOKUP_K, min_score);
            if let Some(candidate) = pick(found, hint.as_deref()) {
                spans.push((first, len, candidate));
            }
        }
    }
    spans.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut taken = vec![false; tokens.len()];
    let mut mentions = Vec::new();
    for (first, len, candidate) in spans {
        if taken[first..first + len].iter().any(|&t| t) {
            continue;
        }
        taken[first..first + len].iter_mut().for_each(|t| *t = true);
        let (start, end) = (tokens[first].0, tokens[first + len - 1].1);
        mentions.push(EntityMention {
            start: char_offset(question, start),
            end: char_offset(question, end),
            surface: question[start..end].to_string(),
            resolved: Some(candidate),
        });
    }
    mentions.sort_by_key(|m| m.start);
    mentions
}

/// Mentions from gold `(surface, node_index)` pairs, placed at the first
/// non-overlapping occurrence of each surface and linked with score 1.0.
pub fn oracle_tag(
    question: &str,
    gold: &[(String, u64)],
    resolver: &dyn NodeResolver,
) -> Result<Vec<EntityMention>, NerError> {
    let mut claimed: Vec<(usize, usize)> = Vec::new();
    let mut mentions = Vec::new();
    for (surface, node_index) in gold {
        if surface.is_empty() {
            return Err(NerError::SurfaceNotFound(surface.clone()));
        }
        let start = question
            .match_indices(surface.as_str())
            .map(|(b, _)| b)
            .find(|&b| {
                let e = b + surface.len();
                claimed.iter().all(|&(cs, ce)| e <= cs || b >= ce)
            })
            .ok_or_else(|| NerError::SurfaceNotFound(surface.clone()))?;
        let end = start + surface.len();
        claimed.push((start, end));
        let node = resolver
            .resolve(*node_index)
            .ok_or(NerError::UnknownNode(*node_index))?;
        mentions.push(EntityMention {
            start: char_offset(question, start),
            end: char_offset(question, end),
            surface: surface.clone(),
            resolved: Some(EntityCandidate {
                node_index: node.node_index,
                canonical_name: node.node_name,
                node_type: node.node_type,
                score: 1.0,
            }),
        });
    }
    mentions.sort_by_key(|m| m.start);
    Ok(mentions)
}

/// Rewrites `question` left to right, replacing each mention with a
/// type-aware placeholder. Per-type ordinals follow mention order.
pub fn substitute_placeholders(
    question: &str,
    mentions: &[EntityMention],
) -> Result<TemplatedQuestion, NerError> {
    let mut templated = String::with_capacity(question.len());
    let mut bindings = Vec::with_capacity(mentions.len());
    // Keyed by placeholder stem so that types collapsing to the same stem
    // ("gene/protein", "gene protein") never share an ordinal.
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    let mut cursor = 0usize;
    let mut previous_end = 0usize;

    for mention in mentions {
        if mention.start >= mention.end || mention.start < previous_end {
            return Err(NerError::InvalidMention(format!(
                "span {}..{} overlaps or is out of order",
                mention.start, mention.end
            )));
        }
        let (Some(start), Some(end)) = (
            byte_offset(question, mention.start),
            byte_offset(question, mention.end),
        ) else {
            return Err(NerError::InvalidMention(format!(
                "span {}..{} exceeds the question",
                mention.start, mention.end
            )));
        };
        if question[start..end] != mention.surface {
            return Err(NerError::InvalidMention(format!(
                "surface `{}` does not match the question text `{}`",
                mention.surface,
                &question[start..end]
            )));
        }
        let candidate = mention
            .resolved
            .clone()
            .ok_or_else(|| NerError::Unresolved(mention.surface.clone()))?;

        let ordinal = counters
            .entry(placeholder_token(&candidate.node_type, 0))
            .or_default();
        let placeholder = placeholder_token(&candidate.node_type, *ordinal);
        *ordinal += 1;

        templated.push_str(&question[cursor..start]);
        templated.push_str(&placeholder);
        cursor = end;
        previous_end = mention.end;
        bindings.push(LinkedEntity {
            placeholder,
            candidate,
            mention: mention.clone(),
        });
    }
    templated.push_str(&question[cursor..]);
    Ok(TemplatedQuestion {
        original: question.to_string(),
        templated,
        bindings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::NodeRef;
    use proptest::prelude::*;

    fn node(i: u64, name: &str, t: &str) -> NodeRef {
        NodeRef {
            node_index: i,
            node_name: name.into(),
            node_type: t.into(),
        }
    }

    fn fixture() -> EntityIndex {
        EntityIndex::from_nodes(
            vec![
                node(1, "aspirin", "drug"),
                node(2, "ibuprofen", "drug"),
                node(3, "PTGS2", "gene/protein"),
                node(4, "PTGS1", "gene/protein"),
                node(5, "headache", "disease"),
                node(6, "fever", "disease"),
            ],
            "fixture".into(),
        )
    }

    fn linked(mentions: &[EntityMention]) -> Vec<(String, u64)> {
        mentions
            .iter()
            .map(|m| (m.surface.clone(), m.resolved.as_ref().unwrap().node_index))
            .collect()
    }

    #[test]
    fn tags_single_drug() {
        let got = tag("Which proteins does aspirin target?", &fixture(), DEFAULT_TAG_MIN_SCORE);
        assert_eq!(linked(&got), vec![("aspirin".to_string(), 1)]);
        assert_eq!((got[0].start, got[0].end), (20, 27));
        assert_eq!(got[0].resolved.as_ref().unwrap().node_type, "drug");
    }

    #[test]
    fn tags_two_diseases() {
        let got = tag("Which drugs treat headache and fever?", &fixture(), DEFAULT_TAG_MIN_SCORE);
        assert_eq!(
            linked(&got),
            vec![("headache".to_string(), 5), ("fever".to_string(), 6)]
        );
    }

    #[test]
    fn no_mentions() {
        assert!(tag("Which proteins exist?", &fixture(), DEFAULT_TAG_MIN_SCORE).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let index = EntityIndex::from_nodes(
            vec![node(3, "PTGS2", "gene/protein"), node(7, "PTGS2 complex", "gene/protein")],
            "t".into(),
        );
        let got = tag("What binds the PTGS2 complex?", &index, DEFAULT_TAG_MIN_SCORE);
        assert_eq!(linked(&got), vec![("PTGS2 complex".to_string(), 7)]);
        let got = tag("What binds PTGS2?", &index, DEFAULT_TAG_MIN_SCORE);
        assert_eq!(linked(&got), vec![("PTGS2".to_string(), 3)]);
    }

    #[test]
    fn homonyms_use_type_word_before_mention() {
        let index = EntityIndex::from_nodes(
            vec![node(2, "cold", "exposure"), node(8, "cold", "disease")],
            "t".into(),
        );
        let got = tag("Which genes relate to the disease cold?", &index, DEFAULT_TAG_MIN_SCORE);
        assert_eq!(got[0].resolved.as_ref().unwrap().node_index, 8);
        let got = tag("What causes cold?", &index, DEFAULT_TAG_MIN_SCORE);
        assert_eq!(got[0].resolved.as_ref().unwrap().node_index, 2);
    }

    #[test]
    fn multi_token_names_with_punctuation() {
        let index = EntityIndex::from_nodes(vec![node(1, "gene/protein X", "t")], "t".into());
        let got = tag("is gene/protein X here", &index, DEFAULT_TAG_MIN_SCORE);
        assert_eq!(got[0].surface, "gene/protein X");
    }

    #[test]
    fn oracle_matches_gazetteer() {
        let index = fixture();
        let q = "Which proteins does aspirin target?";
        let oracle = oracle_tag(q, &[("aspirin".into(), 1)], &index).unwrap();
        let gazetteer = tag(q, &index, DEFAULT_TAG_MIN_SCORE);
        assert_eq!(oracle, gazetteer);
        assert_eq!(
            substitute_placeholders(q, &oracle).unwrap().templated,
            substitute_placeholders(q, &gazetteer).unwrap().templated
        );
    }

    #[test]
    fn oracle_errors_and_empty() {
        let index = fixture();
        assert_eq!(
            oracle_tag("Which proteins does aspirin target?", &[("acetaminophen".into(), 1)], &index),
            Err(NerError::SurfaceNotFound("acetaminophen".into()))
        );
        assert_eq!(oracle_tag("anything", &[], &index), Ok(vec![]));
        assert_eq!(
            oracle_tag("aspirin", &[("aspirin".into(), 99)], &index),
            Err(NerError::UnknownNode(99))
        );
    }

    #[test]
    fn substitution_examples() {
        let index = fixture();
        let q = "Which proteins does aspirin target?";
        let tq = substitute_placeholders(q, &tag(q, &index, DEFAULT_TAG_MIN_SCORE)).unwrap();
        assert_eq!(tq.templated, "Which proteins does [DRUG_0] target?");
        assert_eq!(tq.restore(), q);

        let q = "Do aspirin and ibuprofen share PTGS2?";
        let tq = substitute_placeholders(q, &tag(q, &index, DEFAULT_TAG_MIN_SCORE)).unwrap();
        assert_eq!(tq.templated, "Do [DRUG_0] and [DRUG_1] share [GENE_PROTEIN_0]?");
        assert_eq!(tq.restore(), q);
    }

    #[test]
    fn unresolved_mentions_are_rejected() {
        let m = EntityMention {
            start: 0,
            end: 7,
            surface: "aspirin".into(),
            resolved: None,
        };
        assert_eq!(
            substitute_placeholders("aspirin", &[m]),
            Err(NerError::Unresolved("aspirin".into()))
        );
    }

    #[test]
    fn offsets_are_characters() {
        let index = fixture();
        let q = "Qu'est-ce que l'aspirine ou l’aspirin cible?";
        let got = tag(q, &index, DEFAULT_TAG_MIN_SCORE);
        let m = got.iter().find(|m| m.surface == "aspirin").unwrap();
        let chars: Vec<char> = q.chars().collect();
        assert_eq!(chars[m.start..m.end].iter().collect::<String>(), "aspirin");
        let tq = substitute_placeholders(q, &got).unwrap();
        assert_eq!(tq.restore(), q);
    }

    #[test]
    fn placeholder_format() {
        assert_eq!(placeholder_token("gene/protein", 0), "[GENE_PROTEIN_0]");
        assert_eq!(placeholder_token("effect/phenotype", 3), "[EFFECT_PHENOTYPE_3]");
    }

    const NAMES: [&str; 6] = ["aspirin", "ibuprofen", "PTGS2", "PTGS1", "headache", "fever"];

    proptest! {
        #[test]
        fn round_trip_identity(
            parts in prop::collection::vec(("[a-z ,.?]{0,12}", 0usize..6), 0..5),
            tail in "[a-z ?]{0,10}",
        ) {
            let index = fixture();
            let mut q = String::new();
            for (filler, name) in &parts {
                q.push_str(filler);
                q.push(' ');
                q.push_str(NAMES[*name]);
                q.push(' ');
            }
            q.push_str(&tail);
            let mentions = tag(&q, &index, DEFAULT_TAG_MIN_SCORE);
            let tq = substitute_placeholders(&q, &mentions).unwrap();
            prop_assert_eq!(tq.restore(), q.clone());
            for b in &tq.bindings {
                prop_assert_eq!(tq.templated.matches(&b.placeholder).count(), 1);
            }
            for w in mentions.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
        }
    }
}
