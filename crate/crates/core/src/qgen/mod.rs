//! Question generation: metapath enumeration, anchor sampling, template
//! instantiation and dataset files.

pub mod templates;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rusqlite::params_from_iter;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{KgDatabase, KgError, NodeRef, SchemaCatalog};
use crate::ner::placeholder_token;
use crate::sqlgen::execute::{execute, AnswerSet, DEFAULT_EXEC_TIMEOUT};
use crate::sqlgen::extract::quote_literal;
use crate::sqlgen::validate::{validate_sql, DEFAULT_ROW_CAP};

pub use templates::{Signature, TemplateError, TemplateRow, TemplateTable};

pub const DEFAULT_SINGLE_HOP: usize = 60;
pub const DEFAULT_TWO_HOP: usize = 204;

#[derive(Debug, Error)]
pub enum QgenError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("gold SQL of template `{template_id}` is invalid: {message}")]
    GoldSql { template_id: String, message: String },
    #[error("cannot access dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Step {
    pub source_type: String,
    pub relation: String,
    pub target_type: String,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.source_type, self.relation, self.target_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetaPath {
    pub hops: u8,
    pub steps: Vec<Step>,
    pub answer_type: String,
}

impl MetaPath {
    pub fn new(steps: Vec<Step>) -> Result<Self, String> {
        if !(1..=2).contains(&steps.len()) {
            return Err(format!("a metapath has 1 or 2 steps, got {}", steps.len()));
        }
        if steps.windows(2).any(|w| w[0].target_type != w[1].source_type) {
            return Err("metapath steps do not chain".into());
        }
        Ok(MetaPath {
            hops: steps.len() as u8,
            answer_type: steps.last().unwrap().target_type.clone(),
            steps,
        })
    }

    pub fn anchor_type(&self) -> &str {
        &self.steps[0].source_type
    }

    /// `src|rel|tgt` per step, joined with `;`. Same form as template rows.
    pub fn signature(&self) -> String {
        self.steps
            .iter()
            .map(Step::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl fmt::Display for MetaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.signature())
    }
}

/// All witnessed metapaths with `hops` steps, sorted by step tuples.
/// Traversal follows edge direction only.
pub fn enumerate_metapaths(catalog: &SchemaCatalog, hops: u8) -> Vec<MetaPath> {
    let mut single: Vec<Step> = catalog
        .relations
        .iter()
        .flat_map(|r| {
            r.type_pairs.iter().map(|p| Step {
                source_type: p.source_type.clone(),
                relation: r.name.clone(),
                target_type: p.target_type.clone(),
            })
        })
        .collect();
    single.sort();
    single.dedup();
    let mut paths: Vec<MetaPath> = match hops {
        1 => single
            .into_iter()
            .map(|s| MetaPath::new(vec![s]).unwrap())
            .collect(),
        2 => single
            .iter()
            .flat_map(|a| {
                single
                    .iter()
                    .filter(move |b| b.source_type == a.target_type)
                    .map(move |b| MetaPath::new(vec![a.clone(), b.clone()]).unwrap())
            })
            .collect(),
        _ => Vec::new(),
    };
    paths.sort();
    paths
}

/// An anchor node together with one witnessing path (intermediate and
/// answer nodes, in order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathInstance {
    pub metapath: MetaPath,
    pub anchor: NodeRef,
    pub path: Vec<NodeRef>,
}

fn path_sql(metapath: &MetaPath, select: &str, extra: &str) -> (String, Vec<String>) {
    let mut sql = format!("SELECT {select} FROM nodes n1");
    let mut where_parts = vec!["n1.node_type = ?".to_string()];
    let mut params = vec![metapath.anchor_type().to_string()];
    for (i, step) in metapath.steps.iter().enumerate() {
        let (from, edge, to) = (i + 1, i + 1, i + 2);
        sql.push_str(&format!(
            " JOIN edges e{edge} ON e{edge}.x_index = n{from}.node_index \
             JOIN nodes n{to} ON n{to}.node_index = e{edge}.y_index"
        ));
        where_parts.push(format!("e{edge}.relation = ?"));
        where_parts.push(format!("n{to}.node_type = ?"));
        params.push(step.relation.clone());
        params.push(step.target_type.clone());
    }
    sql.push_str(" WHERE ");
    sql.push_str(&where_parts.join(" AND "));
    sql.push_str(extra);
    (sql, params)
}

fn anchors(db: &KgDatabase, metapath: &MetaPath) -> Result<Vec<NodeRef>, KgError> {
    let (sql, params) = path_sql(
        metapath,
        "DISTINCT n1.node_index, n1.node_name, n1.node_type",
        " ORDER BY n1.node_index",
    );
    let conn = db.connect()?;
    let sqlite = |source| KgError::Sqlite {
        path: db.path().display().to_string(),
        source,
    };
    let mut stmt = conn.prepare(&sql).map_err(sqlite)?;
    let rows = stmt
        .query_map(params_from_iter(params.iter()), |r| {
            Ok(NodeRef {
                node_index: r.get::<_, i64>(0)? as u64,
                node_name: r.get(1)?,
                node_type: r.get(2)?,
            })
        })
        .map_err(sqlite)?;
    rows.collect::<Result<Vec<_>, _>>().map_err(sqlite)
}

fn witness(db: &KgDatabase, metapath: &MetaPath, anchor: u64) -> Result<Vec<NodeRef>, KgError> {
    let hops = metapath.hops as usize;
    let select = (2..=hops + 1)
        .map(|i| format!("n{i}.node_index, n{i}.node_name, n{i}.node_type"))
        .collect::<Vec<_>>()
        .join(", ");
    let order = (2..=hops + 1)
        .map(|i| format!("n{i}.node_index"))
        .collect::<Vec<_>>()
        .join(", ");
    let (sql, mut params) = path_sql(
        metapath,
        &select,
        &format!(" AND n1.node_index = ? ORDER BY {order} LIMIT 1"),
    );
    params.push(anchor.to_string());
    let conn = db.connect()?;
    let sqlite = |source| KgError::Sqlite {
        path: db.path().display().to_string(),
        source,
    };
    let mut stmt = conn.prepare(&sql).map_err(sqlite)?;
    let mut rows = stmt
        .query(params_from_iter(params.iter()))
        .map_err(sqlite)?;
    let mut path = Vec::with_capacity(hops);
    if let Some(row) = rows.next().map_err(sqlite)? {
        for h in 0..hops {
            path.push(NodeRef {
                node_index: row.get::<_, i64>(h * 3).map_err(sqlite)? as u64,
                node_name: row.get(h * 3 + 1).map_err(sqlite)?,
                node_type: row.get(h * 3 + 2).map_err(sqlite)?,
            });
        }
    }
    Ok(path)
}

/// Independent RNG stream per metapath, so adding a relation to the graph
/// does not reshuffle the anchors of every other metapath.
fn metapath_rng(seed: u64, metapath: &MetaPath) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(metapath.signature().as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn shuffled_anchors(
    db: &KgDatabase,
    metapath: &MetaPath,
    seed: u64,
) -> Result<Vec<NodeRef>, KgError> {
    let mut all = anchors(db, metapath)?;
    all.shuffle(&mut metapath_rng(seed, metapath));
    Ok(all)
}

/// Up to `n` distinct anchors of the metapath's source type that start at
/// least one complete path, chosen uniformly with `seed`.
pub fn sample_instances(
    db: &KgDatabase,
    metapath: &MetaPath,
    n: usize,
    seed: u64,
) -> Result<Vec<PathInstance>, KgError> {
    let mut chosen = shuffled_anchors(db, metapath, seed)?;
    chosen.truncate(n);
    chosen
        .into_iter()
        .map(|anchor| {
            Ok(PathInstance {
                metapath: metapath.clone(),
                path: witness(db, metapath, anchor.node_index)?,
                anchor,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub surface: String,
    pub node_index: u64,
    #[serde(rename = "type")]
    pub node_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub templated_question: String,
    pub entities: Vec<EntityRef>,
    pub gold_sql: String,
    pub gold_answers: AnswerSet,
    pub hops: u8,
    pub metapath: MetaPath,
    pub template_id: String,
}

impl QAExample {
    /// `(surface, node_index)` pairs in the form oracle tagging expects.
    pub fn gold_entities(&self) -> Vec<(String, u64)> {
        self.entities
            .iter()
            .map(|e| (e.surface.clone(), e.node_index))
            .collect()
    }

    /// Gold SQL with each entity literal replaced by its quoted placeholder,
    /// for use as a few-shot demonstration next to `templated_question`.
    pub fn templated_sql(&self) -> String {
        let mut sql = self.gold_sql.clone();
        let mut counters = std::collections::BTreeMap::<String, usize>::new();
        for entity in &self.entities {
            let ordinal = counters
                .entry(placeholder_token(&entity.node_type, 0))
                .or_default();
            let placeholder = placeholder_token(&entity.node_type, *ordinal);
            *ordinal += 1;
            sql = sql.replace(&quote_literal(&entity.surface), &quote_literal(&placeholder));
        }
        sql
    }
}

/// Executes gold SQL the same way the pipeline executes generated SQL.
pub fn run_gold_sql(
    sql: &str,
    db: &KgDatabase,
    catalog: &SchemaCatalog,
) -> Result<AnswerSet, String> {
    let validated = validate_sql(sql, catalog, DEFAULT_ROW_CAP).map_err(|e| e.to_string())?;
    execute(&validated, db, DEFAULT_EXEC_TIMEOUT)
        .map(|o| o.answers)
        .map_err(|e| e.to_string())
}

/// Instantiates `row` for `instance`. Returns `None` when the gold answer
/// set is empty; such examples are never emitted.
pub fn render_example(
    db: &KgDatabase,
    catalog: &SchemaCatalog,
    instance: &PathInstance,
    row: &TemplateRow,
    id: String,
) -> Result<Option<QAExample>, QgenError> {
    let metapath = &instance.metapath;
    if !row.applies_to(metapath) {
        return Err(TemplateError::Missing(metapath.signature()).into());
    }
    let values = templates::metapath_slot_values(metapath);
    let anchor = &instance.anchor;
    let verbatim = |v: &str| v.to_string();
    let question = templates::fill(&row.nl_pattern, &anchor.node_name, &values, verbatim);
    let templated_question = templates::fill(
        &row.nl_pattern,
        &placeholder_token(&anchor.node_type, 0),
        &values,
        verbatim,
    );
    let gold_sql = templates::fill(
        &row.sql_pattern,
        &quote_literal(&anchor.node_name),
        &values,
        |v| v.replace('\'', "''"),
    );
    let gold_answers =
        run_gold_sql(&gold_sql, db, catalog).map_err(|message| QgenError::GoldSql {
            template_id: row.template_id.clone(),
            message,
        })?;
    if gold_answers.is_empty() {
        return Ok(None);
    }
    Ok(Some(QAExample {
        id,
        question,
        templated_question,
        entities: vec![EntityRef {
            surface: anchor.node_name.clone(),
            node_index: anchor.node_index,
            node_type: anchor.node_type.clone(),
        }],
        gold_sql,
        gold_answers,
        hops: metapath.hops,
        metapath: metapath.clone(),
        template_id: row.template_id.clone(),
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub requested_single: usize,
    pub requested_two: usize,
    pub produced_single: usize,
    pub produced_two: usize,
    pub db_fingerprint: String,
    pub template_table_hash: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    manifest: Manifest,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub manifest: Manifest,
    pub examples: Vec<QAExample>,
}

impl Dataset {
    /// JSON Lines: a manifest line, then one example per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestLine {
            manifest: self.manifest.clone(),
        })
        .expect("manifest serializes");
        out.push('\n');
        for example in &self.examples {
            out.push_str(&serde_json::to_string(example).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a dataset file. The manifest line is optional so that
    /// hand-curated files can omit it.
    pub fn from_jsonl(text: &str) -> Result<Self, QgenError> {
        let mut dataset = Dataset::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                if let Ok(m) = serde_json::from_str::<ManifestLine>(line) {
                    dataset.manifest = m.manifest;
                    continue;
                }
            }
            let example: QAExample =
                serde_json::from_str(line).map_err(|e| QgenError::Format {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            dataset.examples.push(example);
        }
        Ok(dataset)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, QgenError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| QgenError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), QgenError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| QgenError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// SHA-256 of the serialized file; equal content, equal id.
    pub fn content_id(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn count_hops(&self, hops: u8) -> usize {
        self.examples.iter().filter(|e| e.hops == hops).count()
    }
}

struct Queue<'t> {
    metapath: MetaPath,
    anchors: Vec<NodeRef>,
    rows: Vec<&'t TemplateRow>,
    pass: usize,
    next: usize,
}

impl<'t> Queue<'t> {
    /// Every (anchor, template) pair exactly once. The first pass gives
    /// consecutive anchors different templates.
    fn pop(&mut self) -> Option<(NodeRef, &'t TemplateRow)> {
        while self.pass < self.rows.len() {
            if self.next < self.anchors.len() {
                let i = self.next;
                self.next += 1;
                let row = self.rows[(i + self.pass) % self.rows.len()];
                return Some((self.anchors[i].clone(), row));
            }
            self.pass += 1;
            self.next = 0;
        }
        None
    }
}

fn generate_hops(
    db: &KgDatabase,
    catalog: &SchemaCatalog,
    table: &TemplateTable,
    hops: u8,
    n: usize,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<Vec<QAExample>, QgenError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut queues = Vec::new();
    for metapath in enumerate_metapaths(catalog, hops) {
        let rows = table.rows_for(&metapath);
        if rows.is_empty() {
            warnings.push(format!("no template for metapath {metapath}; skipped"));
            continue;
        }
        let anchors = shuffled_anchors(db, &metapath, seed)?;
        if anchors.is_empty() {
            continue;
        }
        queues.push(Queue {
            metapath,
            anchors,
            rows,
            pass: 0,
            next: 0,
        });
    }

    let mut examples = Vec::with_capacity(n);
    let mut broken_rows: BTreeSet<String> = BTreeSet::new();
    let mut live: Vec<bool> = vec![true; queues.len()];
    while examples.len() < n && live.iter().any(|l| *l) {
        for (qi, queue) in queues.iter_mut().enumerate() {
            if examples.len() == n {
                break;
            }
            if !live[qi] {
                continue;
            }
            loop {
                let Some((anchor, row)) = queue.pop() else {
                    live[qi] = false;
                    break;
                };
                if broken_rows.contains(&row.template_id) {
                    continue;
                }
                let instance = PathInstance {
                    metapath: queue.metapath.clone(),
                    path: witness(db, &queue.metapath, anchor.node_index)?,
                    anchor,
                };
                let id = format!("{hops}h-{:04}", examples.len() + 1);
                match render_example(db, catalog, &instance, row, id) {
                    Ok(Some(example)) => {
                        examples.push(example);
                        break;
                    }
                    Ok(None) => {}
                    Err(QgenError::GoldSql { template_id, message }) => {
                        warnings.push(format!(
                            "template {template_id} skipped: invalid gold SQL ({message})"
                        ));
                        broken_rows.insert(template_id);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if examples.len() < n {
        let kind = if hops == 1 { "single-hop" } else { "two-hop" };
        warnings.push(format!(
            "requested {n} {kind} examples but the graph supplies only {}",
            examples.len()
        ));
    }
    Ok(examples)
}

/// Generates `n_single` one-hop and `n_two` two-hop examples, taking one
/// example per metapath in turn. Output depends only on the database
/// content, the template table, the counts and the seed.
pub fn generate_dataset(
    db: &KgDatabase,
    catalog: &SchemaCatalog,
    table: &TemplateTable,
    n_single: usize,
    n_two: usize,
    seed: u64,
) -> Result<Dataset, QgenError> {
    let mut warnings = Vec::new();
    let mut examples = generate_hops(db, catalog, table, 1, n_single, seed, &mut warnings)?;
    let two = generate_hops(db, catalog, table, 2, n_two, seed, &mut warnings)?;
    let produced_single = examples.len();
    let produced_two = two.len();
    examples.extend(two);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Dataset {
        manifest: Manifest {
            seed,
            requested_single: n_single,
            requested_two: n_two,
            produced_single,
            produced_two,
            db_fingerprint: db.fingerprint()?,
            template_table_hash: table.content_hash(),
            warnings,
        },
        examples,
    })
}

/// Plain-text listing of a dataset for manual review.
pub fn review_text(dataset: &Dataset) -> String {
    let m = &dataset.manifest;
    let mut out = format!(
        "seed {}  single-hop {}/{}  two-hop {}/{}\ndatabase {}\ntemplates {}\n",
        m.seed,
        m.produced_single,
        m.requested_single,
        m.produced_two,
        m.requested_two,
        m.db_fingerprint,
        m.template_table_hash
    );
    for w in &m.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    for e in &dataset.examples {
        out.push_str(&format!(
            "\n[{}] {}-hop  template {}  metapath {}\nQ: {}\nSQL: {}\nA ({}): {}\n",
            e.id,
            e.hops,
            e.template_id,
            e.metapath,
            e.question,
            e.gold_sql,
            e.gold_answers.len(),
            e.gold_answers.values().join("; ")
        ));
    }
    out
}
