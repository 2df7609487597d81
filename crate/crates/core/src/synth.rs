//! Seeded random graphs with the PrimeKG type and relation vocabulary.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{KgEdge, KgNode};

pub const ENTITY_TYPES: [&str; 10] = [
    "anatomy",
    "biological_process",
    "cellular_component",
    "disease",
    "drug",
    "effect/phenotype",
    "exposure",
    "gene/protein",
    "molecular_function",
    "pathway",
];

/// `(relation, source type, target type)`.
pub const RELATIONS: [(&str, &str, &str); 30] = [
    ("anatomy_anatomy", "anatomy", "anatomy"),
    ("anatomy_protein_absent", "anatomy", "gene/protein"),
    ("anatomy_protein_present", "anatomy", "gene/protein"),
    ("bioprocess_bioprocess", "biological_process", "biological_process"),
    ("bioprocess_protein", "biological_process", "gene/protein"),
    ("cellcomp_cellcomp", "cellular_component", "cellular_component"),
    ("cellcomp_protein", "cellular_component", "gene/protein"),
    ("contraindication", "drug", "disease"),
    ("disease_disease", "disease", "disease"),
    ("disease_phenotype_negative", "disease", "effect/phenotype"),
    ("disease_phenotype_positive", "disease", "effect/phenotype"),
    ("disease_protein", "disease", "gene/protein"),
    ("drug_drug", "drug", "drug"),
    ("drug_effect", "drug", "effect/phenotype"),
    ("drug_protein", "drug", "gene/protein"),
    ("exposure_bioprocess", "exposure", "biological_process"),
    ("exposure_cellcomp", "exposure", "cellular_component"),
    ("exposure_disease", "exposure", "disease"),
    ("exposure_exposure", "exposure", "exposure"),
    ("exposure_molfunc", "exposure", "molecular_function"),
    ("exposure_protein", "exposure", "gene/protein"),
    ("indication", "drug", "disease"),
    ("molfunc_molfunc", "molecular_function", "molecular_function"),
    ("molfunc_protein", "molecular_function", "gene/protein"),
    ("off-label use", "drug", "disease"),
    ("pathway_pathway", "pathway", "pathway"),
    ("pathway_protein", "pathway", "gene/protein"),
    ("phenotype_phenotype", "effect/phenotype", "effect/phenotype"),
    ("phenotype_protein", "effect/phenotype", "gene/protein"),
    ("protein_protein", "gene/protein", "gene/protein"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub edges: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticGraph {
    pub nodes: Vec<KgNode>,
    pub edges: Vec<KgEdge>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Three or four consonant-vowel syllables, sometimes closed by a
/// consonant: 6 to 9 letters, never an English function word.
fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(3..=4);
    let mut word = String::with_capacity(9);
    for _ in 0..syllables {
        word.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        word.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    if rng.random_bool(0.5) {
        word.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
    }
    word
}

/// Nodes are split evenly across the ten types; edges pick a relation,
/// then a source and target of the relation's types, without repeats.
/// Asking for more edges than the graph can hold yields all of them.
pub fn generate(config: SynthConfig) -> SyntheticGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = HashSet::with_capacity(config.nodes);
    let mut by_type: Vec<Vec<u64>> = vec![Vec::new(); ENTITY_TYPES.len()];
    let mut nodes = Vec::with_capacity(config.nodes);
    for i in 0..config.nodes {
        let t = i % ENTITY_TYPES.len();
        let name = loop {
            let candidate = pseudo_word(&mut rng);
            if names.insert(candidate.clone()) {
                break candidate;
            }
        };
        by_type[t].push(i as u64);
        nodes.push(KgNode {
            node_index: i as u64,
            node_type: ENTITY_TYPES[t].to_string(),
            node_name: name,
            node_source: "SYNTH".into(),
            node_source_id: format!("S{i:07}"),
        });
    }

    let type_slot = |name: &str| ENTITY_TYPES.iter().position(|t| *t == name).unwrap();
    let capacity: usize = RELATIONS
        .iter()
        .map(|(_, s, t)| by_type[type_slot(s)].len() * by_type[type_slot(t)].len())
        .sum();
    let target = config.edges.min(capacity);
    let mut seen = HashSet::with_capacity(target);
    let mut edges = Vec::with_capacity(target);
    while edges.len() < target {
        let (relation, s, t) = RELATIONS[rng.random_range(0..RELATIONS.len())];
        let (sources, targets) = (&by_type[type_slot(s)], &by_type[type_slot(t)]);
        if sources.is_empty() || targets.is_empty() {
            continue;
        }
        let x = sources[rng.random_range(0..sources.len())];
        let y = targets[rng.random_range(0..targets.len())];
        if seen.insert((relation, x, y)) {
            edges.push(KgEdge {
                relation: relation.to_string(),
                display_relation: relation.replace('_', " "),
                x_index: x,
                y_index: y,
            });
        }
    }
    SyntheticGraph { nodes, edges }
}
