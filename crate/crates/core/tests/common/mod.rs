#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use kgnlq_core::entity_index::EntityIndex;
use kgnlq_core::kg::{build_database, parse_edges, parse_nodes, Delimiter, KgDatabase};
use kgnlq_core::qgen::{generate_dataset, Dataset, TemplateTable};
use kgnlq_core::sqlgen::{
    BackendRegistry, FaultKind, FaultSpec, FaultyBackend, FixedBackend, OracleBackend, Pipeline,
    PromptTexts, UnavailableBackend,
};
use kgnlq_core::synth::{generate, SynthConfig};
use rand::seq::IndexedRandom;
use rand::Rng;
use tempfile::TempDir;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The six-node fixture graph, built into a fresh temporary directory.
pub fn fixture_db() -> (TempDir, KgDatabase) {
    let dir = tempfile::tempdir().unwrap();
    let nodes = parse_nodes(fixture_dir().join("nodes.csv"), Delimiter::Auto).unwrap();
    let edges = parse_edges(fixture_dir().join("edges.tsv"), Delimiter::Auto).unwrap();
    let path = dir.path().join("kg.sqlite");
    build_database(&nodes.records, &edges.records, &path).unwrap();
    let db = KgDatabase::open(&path).unwrap();
    (dir, db)
}

pub fn synthetic_db(config: SynthConfig) -> (TempDir, KgDatabase) {
    let dir = tempfile::tempdir().unwrap();
    let graph = generate(config);
    let path = dir.path().join("synth.sqlite");
    build_database(&graph.nodes, &graph.edges, &path).unwrap();
    let db = KgDatabase::open(&path).unwrap();
    (dir, db)
}

pub fn pipeline(db: &KgDatabase) -> Pipeline {
    let index = EntityIndex::build(db).unwrap();
    Pipeline::new(db.clone(), index, PromptTexts::default()).unwrap()
}

pub fn fixture_dataset(db: &KgDatabase) -> Dataset {
    let catalog = kgnlq_core::kg::schema_catalog(db).unwrap();
    generate_dataset(db, &catalog, &TemplateTable::default(), 4, 2, 1).unwrap()
}

/// oracle, faulty (misspelled column), no (always answers "no") and
/// unavailable.
pub fn registry() -> BackendRegistry {
    let table = TemplateTable::default();
    let mut r = BackendRegistry::new();
    r.insert("oracle", Arc::new(OracleBackend::new(&table)));
    r.insert(
        "faulty",
        Arc::new(FaultyBackend::new(&table, FaultSpec::new(FaultKind::MisspelledColumn))),
    );
    r.insert("no", Arc::new(FixedBackend { text: "no".into() }));
    r.insert("unavailable", Arc::new(UnavailableBackend));
    r
}

const SEEDS: &[&str] = &[
    "SELECT node_name FROM nodes",
    "SELECT DISTINCT n2.node_name FROM nodes AS n1 JOIN edges AS e1 ON e1.x_index = n1.node_index JOIN nodes AS n2 ON n2.node_index = e1.y_index WHERE n1.node_name = 'aspirin'",
    "SELECT relation, COUNT(*) FROM edges GROUP BY relation",
    "DROP TABLE nodes",
    "DELETE FROM edges",
    "UPDATE nodes SET node_name = 'x'",
    "INSERT INTO nodes VALUES (99, 'drug', 'x', 'y', 'z')",
    "SELECT 1; DROP TABLE nodes",
    "SELECT node_name FROM nodes; DELETE FROM edges",
    "ATTACH DATABASE '/tmp/x.db' AS x",
    "PRAGMA writable_schema = 1",
    "CREATE TABLE t (a)",
    "ALTER TABLE nodes RENAME TO n",
    "VACUUM",
    "REPLACE INTO nodes VALUES (1, 'drug', 'a', 'b', 'c')",
    "WITH x AS (DELETE FROM nodes) SELECT 1",
    "SELECT load_extension('evil')",
    "SELECT * FROM sqlite_master",
];

const INSERTS: &[&str] = &[
    "; DROP TABLE nodes", "; DELETE FROM edges", " UNION SELECT sql FROM sqlite_master",
    "'", "\"", "--", "/*", "*/", ";", "(", ")", " OR 1=1", " INSERT ", " UPDATE ",
    " DROP ", " PRAGMA ", " ATTACH ", "\0", "é", " LIMIT -1", " WHERE ", ",", "*",
];

/// A seed statement with a few random splices, deletions and duplications.
pub fn mutated_sql(rng: &mut impl Rng) -> String {
    let mut s: Vec<char> = SEEDS.choose(rng).unwrap().chars().collect();
    for _ in 0..rng.random_range(0..4) {
        let at = rng.random_range(0..=s.len());
        match rng.random_range(0..3) {
            0 => {
                let ins: Vec<char> = INSERTS.choose(rng).unwrap().chars().collect();
                s.splice(at..at, ins);
            }
            1 if !s.is_empty() => {
                let end = (at + rng.random_range(1..6)).min(s.len());
                let at = at.min(end);
                s.drain(at..end);
            }
            _ => {
                let other: Vec<char> = SEEDS.choose(rng).unwrap().chars().collect();
                s.splice(at..at, other);
            }
        }
    }
    s.into_iter().collect()
}
