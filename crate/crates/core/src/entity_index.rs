//! Local entity linker: normalized exact lookup plus trigram-Jaccard fuzzy
//! lookup from surface strings to knowledge-graph nodes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::kg::{KgDatabase, KgError, NodeRef};

/// Default number of candidates returned by [`EntityIndex::lookup`].
pub const DEFAULT_K: usize = 5;

/// Default linking threshold. A single substitution, insertion or deletion
/// in a name of six or more characters keeps a trigram Jaccard of at least
/// 5/11, so 0.45 keeps those typos linkable.
pub const DEFAULT_MIN_SCORE: f64 = 0.45;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("index cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Compatibility-normalizes, lowercases, replaces punctuation and symbols
/// with spaces, collapses whitespace and trims.
pub fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.nfkc().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Character trigrams of `normalized` padded with two sentinel spaces on
/// each side. The empty string has no trigrams.
pub fn trigrams(normalized: &str) -> BTreeSet<String> {
    if normalized.is_empty() {
        return BTreeSet::new();
    }
    let padded: Vec<char> = "  "
        .chars()
        .chain(normalized.chars())
        .chain("  ".chars())
        .collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCandidate {
    pub node_index: u64,
    pub canonical_name: String,
    pub node_type: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    canonical_name: String,
    node_type: String,
    normalized: String,
    trigram_count: usize,
}

/// Resolves a node index to its canonical name and type.
pub trait NodeResolver {
    fn resolve(&self, node_index: u64) -> Option<NodeRef>;
}

impl NodeResolver for KgDatabase {
    fn resolve(&self, node_index: u64) -> Option<NodeRef> {
        self.node(node_index).ok().flatten()
    }
}

/// Immutable after construction; lookups take `&self` and may run
/// concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityIndex {
    entries: BTreeMap<u64, IndexEntry>,
    exact_map: BTreeMap<String, Vec<u64>>,
    trigram_postings: BTreeMap<String, Vec<u64>>,
    built_from: String,
}

impl EntityIndex {
    pub fn build(db: &KgDatabase) -> Result<Self, IndexError> {
        let nodes = db.nodes()?;
        if nodes.is_empty() {
            log::warn!("{}: nodes table is empty, entity index is empty", db.path().display());
        }
        Ok(Self::from_nodes(nodes, db.fingerprint()?))
    }

    /// Builds an index over `nodes`; `built_from` identifies the source.
    pub fn from_nodes(nodes: impl IntoIterator<Item = NodeRef>, built_from: String) -> Self {
        let mut entries = BTreeMap::new();
        let mut exact_map: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        let mut trigram_postings: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for node in nodes {
            let normalized = normalize_name(&node.node_name);
            let grams = trigrams(&normalized);
            for gram in &grams {
                trigram_postings
                    .entry(gram.clone())
                    .or_default()
                    .push(node.node_index);
            }
            exact_map
                .entry(normalized.clone())
                .or_default()
                .push(node.node_index);
            entries.insert(
                node.node_index,
                IndexEntry {
                    canonical_name: node.node_name,
                    node_type: node.node_type,
                    normalized,
                    trigram_count: grams.len(),
                },
            );
        }
        for list in exact_map.values_mut().chain(trigram_postings.values_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        EntityIndex {
            entries,
            exact_map,
            trigram_postings,
            built_from,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn exact_map(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.exact_map
    }

    pub fn trigram_postings(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.trigram_postings
    }

    /// Fingerprint of the database this index was built from.
    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    /// Content hash of the index itself.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("index serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Returns at most `k` candidates scoring at least `min_score`, sorted by
    /// score descending then `node_index` ascending. Exact normalized matches
    /// score 1.0; everything else scores its padded-trigram Jaccard
    /// similarity, kept strictly below 1.0.
    pub fn lookup(&self, query: &str, k: usize, min_score: f64) -> Vec<EntityCandidate> {
        let normalized = normalize_name(query);
        if normalized.is_empty() || k == 0 {
            return Vec::new();
        }
        let query_grams = trigrams(&normalized);

        let mut shared: HashMap<u64, usize> = HashMap::new();
        for gram in &query_grams {
            if let Some(postings) = self.trigram_postings.get(gram) {
                for &node in postings {
                    *shared.entry(node).or_default() += 1;
                }
            }
        }

        let mut candidates: Vec<EntityCandidate> = shared
            .into_iter()
            .filter_map(|(node_index, inter)| {
                let entry = &self.entries[&node_index];
                let score = if entry.normalized == normalized {
                    1.0
                } else {
                    let union = query_grams.len() + entry.trigram_count - inter;
                    let jaccard = inter as f64 / union as f64;
                    // Distinct strings can share a trigram set ("aaaa"/"aaaaa").
                    jaccard.min(1.0 - f64::EPSILON)
                };
                (score >= min_score).then(|| EntityCandidate {
                    node_index,
                    canonical_name: entry.canonical_name.clone(),
                    node_type: entry.node_type.clone(),
                    score,
                })
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.node_index.cmp(&b.node_index))
        });
        candidates.truncate(k);
        candidates
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let cache_err = |message: String| IndexError::Cache {
            path: path.display().to_string(),
            message,
        };
        let bytes = serde_json::to_vec(self).map_err(|e| cache_err(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| cache_err(e.to_string()))
    }

    /// Loads a cached index; returns `None` when the cache was built from a
    /// different database.
    pub fn load(path: impl AsRef<Path>, db_fingerprint: &str) -> Result<Option<Self>, IndexError> {
        let path = path.as_ref();
        let cache_err = |message: String| IndexError::Cache {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| cache_err(e.to_string()))?;
        let index: EntityIndex =
            serde_json::from_slice(&bytes).map_err(|e| cache_err(e.to_string()))?;
        Ok((index.built_from == db_fingerprint).then_some(index))
    }

    /// Uses the cache at `cache` when it matches `db`, otherwise rebuilds
    /// and rewrites it.
    pub fn build_or_load(db: &KgDatabase, cache: Option<&Path>) -> Result<Self, IndexError> {
        let Some(cache) = cache else {
            return Self::build(db);
        };
        let fingerprint = db.fingerprint()?;
        if cache.exists() {
            match Self::load(cache, &fingerprint) {
                Ok(Some(index)) => return Ok(index),
                Ok(None) => log::info!("{}: stale index cache, rebuilding", cache.display()),
                Err(e) => log::warn!("{e}; rebuilding"),
            }
        }
        let index = Self::build(db)?;
        index.save(cache)?;
        Ok(index)
    }
}

impl NodeResolver for EntityIndex {
    fn resolve(&self, node_index: u64) -> Option<NodeRef> {
        self.entries.get(&node_index).map(|e| NodeRef {
            node_index,
            node_name: e.canonical_name.clone(),
            node_type: e.node_type.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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

    /// Independent oracle: Jaccard of padded trigram sets built by slicing.
    fn brute_jaccard(a: &str, b: &str) -> f64 {
        let grams = |s: &str| -> BTreeSet<String> {
            let p = format!("  {s}  ");
            let chars: Vec<char> = p.chars().collect();
            (0..chars.len() - 2)
                .map(|i| chars[i..i + 3].iter().collect())
                .collect()
        };
        let (ga, gb) = (grams(a), grams(b));
        ga.intersection(&gb).count() as f64 / ga.union(&gb).count() as f64
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_name("PTGS2"), "ptgs2");
        assert_eq!(normalize_name("  Aspirin. "), "aspirin");
        assert_eq!(normalize_name("gene/protein"), "gene protein");
        assert_eq!(normalize_name(""), "");
        assert_eq!(normalize_name("ﬁbrosis"), "fibrosis");
        assert_eq!(normalize_name("l'hôpital"), "l hôpital");
    }

    #[test]
    fn padded_trigrams_of_aspirin() {
        let grams = trigrams("aspirin");
        for g in ["  a", " as", "asp", "spi", "pir", "iri", "rin", "in ", "n  "] {
            assert!(grams.contains(g), "missing {g:?}");
        }
        assert_eq!(grams.len(), 9);
        let index = fixture();
        assert!(index.trigram_postings()["  a"].contains(&1));
        assert!(index.trigram_postings()["n  "].contains(&1));
    }

    #[test]
    fn exact_map_has_six_keys() {
        assert_eq!(fixture().exact_map().len(), 6);
    }

    #[test]
    fn exact_lookup() {
        let got = fixture().lookup("Aspirin", DEFAULT_K, DEFAULT_MIN_SCORE);
        assert_eq!(got[0].node_index, 1);
        assert_eq!(got[0].node_type, "drug");
        assert_eq!(got[0].score, 1.0);
    }

    #[test]
    fn typo_lookup_scores_trigram_jaccard() {
        // T(asprin) has 8 trigrams, T(aspirin) 9, 6 shared: 6 / 11.
        assert_eq!(brute_jaccard("asprin", "aspirin"), 6.0 / 11.0);
        let got = fixture().lookup("asprin", DEFAULT_K, DEFAULT_MIN_SCORE);
        assert_eq!(got[0].node_index, 1);
        assert_eq!(got[0].score, 6.0 / 11.0);
    }

    #[test]
    fn no_shared_trigrams_gives_nothing() {
        assert!(fixture().lookup("zzzz", DEFAULT_K, 0.4).is_empty());
    }

    #[test]
    fn single_character_typos_in_long_names_survive_default_threshold() {
        let index = fixture();
        for (name, id) in [("aspirin", 1), ("ibuprofen", 2), ("headache", 5)] {
            let chars: Vec<char> = name.chars().collect();
            for i in 0..chars.len() {
                let mut deleted = chars.clone();
                deleted.remove(i);
                let mut substituted = chars.clone();
                substituted[i] = 'x';
                let mut inserted = chars.clone();
                inserted.insert(i, 'x');
                for typo in [deleted, substituted, inserted] {
                    let typo: String = typo.into_iter().collect();
                    let got = index.lookup(&typo, 1, DEFAULT_MIN_SCORE);
                    assert_eq!(got.first().map(|c| c.node_index), Some(id), "{typo}");
                }
            }
        }
    }

    #[test]
    fn homonyms_are_all_returned_lowest_index_first() {
        let index = EntityIndex::from_nodes(
            vec![node(9, "Cold", "disease"), node(4, "cold", "exposure")],
            "h".into(),
        );
        let got = index.lookup("cold", 5, 0.5);
        assert_eq!(
            got.iter().map(|c| c.node_index).collect::<Vec<_>>(),
            vec![4, 9]
        );
        assert!(got.iter().all(|c| c.score == 1.0));
    }

    #[test]
    fn identical_trigram_sets_do_not_score_one() {
        let index = EntityIndex::from_nodes(vec![node(1, "aaaa", "x")], "t".into());
        let got = index.lookup("aaaaa", 1, 0.0);
        assert!(got[0].score < 1.0);
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        let index = fixture();
        index.save(&path).unwrap();
        assert_eq!(EntityIndex::load(&path, "fixture").unwrap(), Some(index.clone()));
        assert_eq!(EntityIndex::load(&path, "other").unwrap(), None);
        assert_eq!(fixture().fingerprint(), index.fingerprint());
    }

    fn arb_names() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-e]{1,8}( [a-e]{1,5})?", 1..200)
    }

    proptest! {
        #[test]
        fn fuzzy_scores_match_brute_force(names in arb_names(), query in "[a-e]{1,8}") {
            let nodes = names.iter().enumerate().map(|(i, n)| node(i as u64, n, "t"));
            let index = EntityIndex::from_nodes(nodes, "p".into());
            let got = index.lookup(&query, names.len(), 0.0);
            let mut expected: Vec<(u64, f64)> = names
                .iter()
                .enumerate()
                .filter_map(|(i, n)| {
                    let j = brute_jaccard(&query, n);
                    let j = if n == &query { 1.0 } else if j == 1.0 { 1.0 - f64::EPSILON } else { j };
                    (j > 0.0).then_some((i as u64, j))
                })
                .collect();
            expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let got: Vec<(u64, f64)> = got.iter().map(|c| (c.node_index, c.score)).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn self_retrieval(names in arb_names()) {
            let nodes = names.iter().enumerate().map(|(i, n)| node(i as u64, n, "t"));
            let index = EntityIndex::from_nodes(nodes, "p".into());
            for name in &names {
                let first_same = names.iter().position(|n| normalize_name(n) == normalize_name(name)).unwrap();
                let got = index.lookup(name, 1, 0.0);
                prop_assert_eq!(got[0].node_index, first_same as u64);
                prop_assert_eq!(got[0].score, 1.0);
            }
        }

        #[test]
        fn raising_threshold_never_adds(names in arb_names(), query in "[a-e]{1,8}", lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let nodes = names.iter().enumerate().map(|(i, n)| node(i as u64, n, "t"));
            let index = EntityIndex::from_nodes(nodes, "p".into());
            let loose = index.lookup(&query, usize::MAX, lo);
            let strict = index.lookup(&query, usize::MAX, hi);
            prop_assert!(strict.len() <= loose.len());
            prop_assert!(strict.iter().all(|c| loose.contains(c)));
        }
    }
}
