//! Knowledge-graph ingestion.
//!
//! Node and edge files follow the PrimeKG layout: a header row followed by
//! one record per line, comma- or tab-separated. Parsed records are
//! materialized into a single-file SQLite database with exactly two tables,
//! `nodes` and `edges`, and the [`SchemaCatalog`] read back from that
//! database drives schema linking, SQL validation and question generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rusqlite::{params, Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{file}: missing required header column `{column}`")]
    MissingColumn { file: String, column: &'static str },
    #[error("{file}: duplicate node_index {node_index} on lines {first_line} and {second_line}")]
    DuplicateNode {
        file: String,
        node_index: u64,
        first_line: u64,
        second_line: u64,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("cannot build a database without nodes")]
    NoNodes,
    #[error("database {path}: {source}")]
    Sqlite {
        path: String,
        #[source]
        source: rusqlite::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown delimiter `{0}` (expected auto, comma or tab)")]
    UnknownDelimiter(String),
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

/// A node record in the PrimeKG column layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KgNode {
    pub node_index: u64,
    pub node_type: String,
    pub node_name: String,
    pub node_source: String,
    pub node_source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KgEdge {
    pub relation: String,
    pub display_relation: String,
    pub x_index: u64,
    pub y_index: u64,
}

/// A data row skipped during parsing. Structural problems are fatal instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub rejected: Vec<RejectedRow>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Parsed {
            records: Vec::new(),
            rejected: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Auto,
    Comma,
    Tab,
}

impl FromStr for Delimiter {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Delimiter::Auto),
            "comma" | "," => Ok(Delimiter::Comma),
            "tab" | "\\t" => Ok(Delimiter::Tab),
            other => Err(KgError::UnknownDelimiter(other.to_string())),
        }
    }
}

impl Delimiter {
    /// Resolves `Auto` by inspecting the header line: tabs win over commas.
    fn resolve(self, header_line: &str) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
            Delimiter::Auto => {
                if header_line.contains('\t') {
                    b'\t'
                } else {
                    b','
                }
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> KgError {
    KgError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sql_err(path: &Path, source: rusqlite::Error) -> KgError {
    KgError::Sqlite {
        path: path.display().to_string(),
        source,
    }
}

fn open_reader(path: &Path, delimiter: Delimiter) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header_line = String::new();
    BufReader::new(&file)
        .read_line(&mut header_line)
        .map_err(|e| io_err(path, e))?;
    let delimiter = delimiter.resolve(&header_line);

    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .has_headers(true)
        .from_reader(file))
}

/// Maps required column names to their positions in the header.
struct Columns {
    positions: HashMap<&'static str, usize>,
}

impl Columns {
    fn locate(
        headers: &csv::StringRecord,
        file: &Path,
        required: &[(&'static str, &[&str])],
        optional: &[(&'static str, &[&str])],
    ) -> Result<Self> {
        let names: Vec<String> = headers
            .iter()
            .map(|h| h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase())
            .collect();
        let find = |aliases: &[&str]| names.iter().position(|n| aliases.contains(&n.as_str()));

        let mut positions = HashMap::new();
        for (column, aliases) in required {
            match find(aliases) {
                Some(pos) => {
                    positions.insert(*column, pos);
                }
                None => {
                    return Err(KgError::MissingColumn {
                        file: file.display().to_string(),
                        column,
                    })
                }
            }
        }
        for (column, aliases) in optional {
            if let Some(pos) = find(aliases) {
                positions.insert(*column, pos);
            }
        }
        Ok(Columns { positions })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, column: &str) -> Option<&'r str> {
        self.positions
            .get(column)
            .and_then(|&pos| record.get(pos))
            .map(str::trim)
    }
}

fn parse_index(value: Option<&str>, column: &str) -> std::result::Result<u64, String> {
    match value {
        None => Err(format!("missing field {column}")),
        Some(v) => v
            .parse::<u64>()
            .map_err(|_| format!("{column} `{v}` is not a non-negative integer")),
    }
}

const NODE_COLUMNS: &[(&str, &[&str])] = &[
    ("node_index", &["node_index"]),
    ("node_type", &["node_type"]),
    ("node_name", &["node_name"]),
    ("node_source", &["node_source"]),
    // PrimeKG ships this column as `node_id`.
    ("node_source_id", &["node_source_id", "node_id"]),
];

/// Parses a node file. Rows with empty names or malformed indexes are
/// rejected with a warning; a missing header column or a duplicate
/// `node_index` aborts the parse.
pub fn parse_nodes(path: impl AsRef<Path>, delimiter: Delimiter) -> Result<Parsed<KgNode>> {
    let path = path.as_ref();
    let mut reader = open_reader(path, delimiter)?;
    let csv_err = |source| KgError::Csv {
        file: path.display().to_string(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let columns = Columns::locate(&headers, path, NODE_COLUMNS, &[])?;

    let mut parsed = Parsed::default();
    let mut seen: HashMap<u64, u64> = HashMap::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                reject(&mut parsed.rejected, path, line, e.to_string());
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);

        let node_index = match parse_index(columns.get(&record, "node_index"), "node_index") {
            Ok(i) => i,
            Err(reason) => {
                reject(&mut parsed.rejected, path, line, reason);
                continue;
            }
        };
        let field = |c| columns.get(&record, c).unwrap_or("").to_string();
        let node = KgNode {
            node_index,
            node_type: field("node_type"),
            node_name: field("node_name"),
            node_source: field("node_source"),
            node_source_id: field("node_source_id"),
        };
        if node.node_name.is_empty() {
            reject(&mut parsed.rejected, path, line, "empty node_name".into());
            continue;
        }
        if node.node_type.is_empty() {
            reject(&mut parsed.rejected, path, line, "empty node_type".into());
            continue;
        }
        if let Some(&first_line) = seen.get(&node_index) {
            return Err(KgError::DuplicateNode {
                file: path.display().to_string(),
                node_index,
                first_line,
                second_line: line,
            });
        }
        seen.insert(node_index, line);
        parsed.records.push(node);
    }
    Ok(parsed)
}

const EDGE_COLUMNS: &[(&str, &[&str])] = &[
    ("relation", &["relation"]),
    ("x_index", &["x_index"]),
    ("y_index", &["y_index"]),
];

/// Parses an edge file. `display_relation` is optional and defaults to the
/// relation name. Referential checks happen in [`build_database`].
pub fn parse_edges(path: impl AsRef<Path>, delimiter: Delimiter) -> Result<Parsed<KgEdge>> {
    let path = path.as_ref();
    let mut reader = open_reader(path, delimiter)?;
    let csv_err = |source| KgError::Csv {
        file: path.display().to_string(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let columns = Columns::locate(
        &headers,
        path,
        EDGE_COLUMNS,
        &[("display_relation", &["display_relation"])],
    )?;

    let mut parsed = Parsed::default();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                reject(&mut parsed.rejected, path, line, e.to_string());
                continue;
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let indexes = parse_index(columns.get(&record, "x_index"), "x_index").and_then(|x| {
            parse_index(columns.get(&record, "y_index"), "y_index").map(|y| (x, y))
        });
        let (x_index, y_index) = match indexes {
            Ok(pair) => pair,
            Err(reason) => {
                reject(&mut parsed.rejected, path, line, reason);
                continue;
            }
        };
        let relation = columns.get(&record, "relation").unwrap_or("");
        if relation.is_empty() {
            reject(&mut parsed.rejected, path, line, "empty relation".into());
            continue;
        }
        let display_relation = match columns.get(&record, "display_relation") {
            Some(d) if !d.is_empty() => d,
            _ => relation,
        };
        parsed.records.push(KgEdge {
            relation: relation.to_string(),
            display_relation: display_relation.to_string(),
            x_index,
            y_index,
        });
    }
    Ok(parsed)
}

fn reject(rejected: &mut Vec<RejectedRow>, path: &Path, line: u64, reason: String) {
    log::warn!("{}:{}: row rejected: {}", path.display(), line, reason);
    rejected.push(RejectedRow { line, reason });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub nodes: usize,
    pub edges: usize,
    pub dangling: usize,
}

const CREATE_TABLES: &str = "
CREATE TABLE nodes (
    node_index INTEGER PRIMARY KEY,
    node_type TEXT NOT NULL,
    node_name TEXT NOT NULL,
    node_source TEXT NOT NULL,
    node_source_id TEXT NOT NULL
);
CREATE TABLE edges (
    relation TEXT NOT NULL,
    display_relation TEXT NOT NULL,
    x_index INTEGER NOT NULL,
    y_index INTEGER NOT NULL
);";

const CREATE_INDEXES: &str = "
CREATE INDEX idx_nodes_name ON nodes (node_name);
CREATE INDEX idx_nodes_name_nocase ON nodes (node_name COLLATE NOCASE);
CREATE INDEX idx_nodes_type ON nodes (node_type);
CREATE INDEX idx_edges_x ON edges (x_index, relation);
CREATE INDEX idx_edges_y ON edges (y_index, relation);";

/// Writes `nodes` and `edges` to a fresh database at `db_path`, replacing
/// any previous file. Edges whose endpoints are not among `nodes` are
/// dropped and counted as dangling.
pub fn build_database(
    nodes: &[KgNode],
    edges: &[KgEdge],
    db_path: impl AsRef<Path>,
) -> Result<IngestStats> {
    let db_path = db_path.as_ref();
    if nodes.is_empty() {
        return Err(KgError::NoNodes);
    }

    let staging = staging_path(db_path);
    remove_if_exists(&staging)?;
    let mut conn = Connection::open(&staging).map_err(|e| sql_err(&staging, e))?;
    conn.execute_batch("PRAGMA journal_mode = OFF; PRAGMA synchronous = OFF;")
        .map_err(|e| sql_err(&staging, e))?;
    conn.execute_batch(CREATE_TABLES)
        .map_err(|e| sql_err(&staging, e))?;

    let known: HashSet<u64> = nodes.iter().map(|n| n.node_index).collect();
    let mut stats = IngestStats {
        nodes: nodes.len(),
        edges: 0,
        dangling: 0,
    };
    {
        let tx = conn.transaction().map_err(|e| sql_err(&staging, e))?;
        {
            let mut insert = tx
                .prepare("INSERT INTO nodes VALUES (?1, ?2, ?3, ?4, ?5)")
                .map_err(|e| sql_err(&staging, e))?;
            for node in nodes {
                insert
                    .execute(params![
                        node.node_index as i64,
                        node.node_type,
                        node.node_name,
                        node.node_source,
                        node.node_source_id
                    ])
                    .map_err(|e| sql_err(&staging, e))?;
            }
            let mut insert = tx
                .prepare("INSERT INTO edges VALUES (?1, ?2, ?3, ?4)")
                .map_err(|e| sql_err(&staging, e))?;
            for edge in edges {
                if !known.contains(&edge.x_index) || !known.contains(&edge.y_index) {
                    stats.dangling += 1;
                    continue;
                }
                insert
                    .execute(params![
                        edge.relation,
                        edge.display_relation,
                        edge.x_index as i64,
                        edge.y_index as i64
                    ])
                    .map_err(|e| sql_err(&staging, e))?;
                stats.edges += 1;
            }
        }
        tx.commit().map_err(|e| sql_err(&staging, e))?;
    }
    conn.execute_batch(CREATE_INDEXES)
        .map_err(|e| sql_err(&staging, e))?;
    conn.close().map_err(|(_, e)| sql_err(&staging, e))?;

    if !edges.is_empty() && stats.edges == 0 {
        log::warn!(
            "all {} edges are dangling; {} contains nodes only",
            edges.len(),
            db_path.display()
        );
    }
    fs::rename(&staging, db_path).map_err(|e| io_err(db_path, e))?;
    Ok(stats)
}

fn staging_path(db_path: &Path) -> PathBuf {
    let mut name = db_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".building");
    db_path.with_file_name(name)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_err(path, e)),
    }
}

/// Handle to a built knowledge-graph database. All connections handed out
/// are read-only.
#[derive(Debug, Clone)]
pub struct KgDatabase {
    path: PathBuf,
}

/// Minimal view of a node, as used by linking and question generation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub node_index: u64,
    pub node_name: String,
    pub node_type: String,
}

impl KgDatabase {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let db = KgDatabase { path };
        // Fail early on a missing or foreign file.
        let conn = db.connect()?;
        conn.query_row("SELECT COUNT(*) FROM nodes", [], |r| r.get::<_, i64>(0))
            .map_err(|e| sql_err(&db.path, e))?;
        Ok(db)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Opens a read-only connection with `query_only` set.
    pub fn connect(&self) -> Result<Connection> {
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| sql_err(&self.path, e))?;
        conn.execute_batch("PRAGMA query_only = ON;")
            .map_err(|e| sql_err(&self.path, e))?;
        Ok(conn)
    }

    /// SHA-256 of the database file contents, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut file = fs::File::open(&self.path).map_err(|e| io_err(&self.path, e))?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf).map_err(|e| io_err(&self.path, e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn node(&self, node_index: u64) -> Result<Option<NodeRef>> {
        let conn = self.connect()?;
        let mut stmt = conn
            .prepare_cached("SELECT node_name, node_type FROM nodes WHERE node_index = ?1")
            .map_err(|e| sql_err(&self.path, e))?;
        let mut rows = stmt
            .query(params![node_index as i64])
            .map_err(|e| sql_err(&self.path, e))?;
        match rows.next().map_err(|e| sql_err(&self.path, e))? {
            Some(row) => Ok(Some(NodeRef {
                node_index,
                node_name: row.get(0).map_err(|e| sql_err(&self.path, e))?,
                node_type: row.get(1).map_err(|e| sql_err(&self.path, e))?,
            })),
            None => Ok(None),
        }
    }

    /// All nodes ordered by `node_index`.
    pub fn nodes(&self) -> Result<Vec<NodeRef>> {
        let conn = self.connect()?;
        let mut stmt = conn
            .prepare("SELECT node_index, node_name, node_type FROM nodes ORDER BY node_index")
            .map_err(|e| sql_err(&self.path, e))?;
        let rows = stmt
            .query_map([], |r| {
                Ok(NodeRef {
                    node_index: r.get::<_, i64>(0)? as u64,
                    node_name: r.get(1)?,
                    node_type: r.get(2)?,
                })
            })
            .map_err(|e| sql_err(&self.path, e))?;
        rows.collect::<std::result::Result<_, _>>()
            .map_err(|e| sql_err(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    NodeKey,
    EntityType,
    EntityName,
    Provenance,
    Relation,
    RelationLabel,
    SourceRef,
    TargetRef,
}

impl ColumnRole {
    pub fn sql_type(self) -> &'static str {
        match self {
            ColumnRole::NodeKey | ColumnRole::SourceRef | ColumnRole::TargetRef => "INTEGER",
            _ => "TEXT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub role: ColumnRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// Renders the table as a `CREATE TABLE`-style one-liner for prompts.
    pub fn render(&self) -> String {
        let cols: Vec<String> = self
            .columns
            .iter()
            .map(|c| match c.role {
                ColumnRole::NodeKey => format!("{} INTEGER PRIMARY KEY", c.name),
                ColumnRole::SourceRef | ColumnRole::TargetRef => {
                    format!("{} INTEGER REFERENCES nodes(node_index)", c.name)
                }
                role => format!("{} {}", c.name, role.sql_type()),
            })
            .collect();
        format!("{}({})", self.name, cols.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCount {
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypePair {
    pub source_type: String,
    pub target_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub name: String,
    pub edge_count: u64,
    pub type_pairs: Vec<TypePair>,
}

impl RelationInfo {
    pub fn touches(&self, node_type: &str) -> bool {
        self.type_pairs
            .iter()
            .any(|p| p.source_type == node_type || p.target_type == node_type)
    }
}

/// Tables, entity-type vocabulary and relation vocabulary of a built
/// database, in alphabetical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub tables: Vec<TableDef>,
    pub entity_types: Vec<TypeCount>,
    pub relations: Vec<RelationInfo>,
    /// Set when the database holds no nodes.
    pub empty: bool,
}

impl SchemaCatalog {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn relation(&self, name: &str) -> Option<&RelationInfo> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn has_entity_type(&self, name: &str) -> bool {
        self.entity_types.iter().any(|t| t.name == name)
    }

    /// Whether some edge of `relation` runs from a `source_type` node to a
    /// `target_type` node.
    pub fn witnesses(&self, source_type: &str, relation: &str, target_type: &str) -> bool {
        self.relation(relation).is_some_and(|r| {
            r.type_pairs
                .iter()
                .any(|p| p.source_type == source_type && p.target_type == target_type)
        })
    }
}

fn table_defs() -> Vec<TableDef> {
    let col = |name: &str, role| ColumnDef {
        name: name.to_string(),
        role,
    };
    vec![
        TableDef {
            name: "nodes".into(),
            columns: vec![
                col("node_index", ColumnRole::NodeKey),
                col("node_type", ColumnRole::EntityType),
                col("node_name", ColumnRole::EntityName),
                col("node_source", ColumnRole::Provenance),
                col("node_source_id", ColumnRole::Provenance),
            ],
        },
        TableDef {
            name: "edges".into(),
            columns: vec![
                col("relation", ColumnRole::Relation),
                col("display_relation", ColumnRole::RelationLabel),
                col("x_index", ColumnRole::SourceRef),
                col("y_index", ColumnRole::TargetRef),
            ],
        },
    ]
}

pub fn schema_catalog(db: &KgDatabase) -> Result<SchemaCatalog> {
    let conn = db.connect()?;
    let err = |e| sql_err(db.path(), e);

    let entity_types: Vec<TypeCount> = {
        let mut stmt = conn
            .prepare("SELECT node_type, COUNT(*) FROM nodes GROUP BY node_type ORDER BY node_type")
            .map_err(err)?;
        let rows = stmt
            .query_map([], |r| {
                Ok(TypeCount {
                    name: r.get(0)?,
                    count: r.get::<_, i64>(1)? as u64,
                })
            })
            .map_err(err)?;
        rows.collect::<std::result::Result<_, _>>().map_err(err)?
    };

    let mut pairs: BTreeMap<String, Vec<TypePair>> = BTreeMap::new();
    {
        let mut stmt = conn
            .prepare(
                "SELECT DISTINCT e.relation, a.node_type, b.node_type
                 FROM edges e
                 JOIN nodes a ON a.node_index = e.x_index
                 JOIN nodes b ON b.node_index = e.y_index",
            )
            .map_err(err)?;
        let rows = stmt
            .query_map([], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    TypePair {
                        source_type: r.get(1)?,
                        target_type: r.get(2)?,
                    },
                ))
            })
            .map_err(err)?;
        for row in rows {
            let (relation, pair) = row.map_err(err)?;
            pairs.entry(relation).or_default().push(pair);
        }
    }

    let relations: Vec<RelationInfo> = {
        let mut stmt = conn
            .prepare("SELECT relation, COUNT(*) FROM edges GROUP BY relation ORDER BY relation")
            .map_err(err)?;
        let rows = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)? as u64)))
            .map_err(err)?;
        let mut out = Vec::new();
        for row in rows {
            let (name, edge_count) = row.map_err(err)?;
            let mut type_pairs = pairs.remove(&name).unwrap_or_default();
            type_pairs.sort();
            out.push(RelationInfo {
                name,
                edge_count,
                type_pairs,
            });
        }
        out
    };

    Ok(SchemaCatalog {
        tables: table_defs(),
        empty: entity_types.is_empty(),
        entity_types,
        relations,
    })
}

impl fmt::Display for IngestStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} nodes, {} edges, {} dangling edges dropped",
            self.nodes, self.edges, self.dangling
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    const HEADER: &str = "node_index,node_type,node_name,node_source,node_source_id\n";

    #[test]
    fn three_valid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}1,drug,a,src,x\n2,drug,b,src,y\n3,disease,c,src,z\n");
        let parsed = parse_nodes(write(dir.path(), "n.csv", &body), Delimiter::Auto).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert!(parsed.rejected.is_empty());
    }

    #[test]
    fn duplicate_index_names_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{HEADER}1,drug,a,s,x\n2,drug,b,s,x\n7,drug,c,s,x\n3,drug,d,s,x\n4,drug,e,s,x\n5,drug,f,s,x\n6,drug,g,s,x\n7,drug,h,s,x\n"
        );
        let err = parse_nodes(write(dir.path(), "n.csv", &body), Delimiter::Auto).unwrap_err();
        match err {
            KgError::DuplicateNode {
                node_index,
                first_line,
                second_line,
                ..
            } => assert_eq!((node_index, first_line, second_line), (7, 4, 9)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn header_order_is_free_and_node_id_alias_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let body = "node_name\tnode_id\tnode_index\tnode_source\tnode_type\nPTGS2\t5743\t3\tNCBI\tgene/protein\n";
        let parsed = parse_nodes(write(dir.path(), "n.tsv", body), Delimiter::Auto).unwrap();
        assert_eq!(
            parsed.records,
            vec![KgNode {
                node_index: 3,
                node_type: "gene/protein".into(),
                node_name: "PTGS2".into(),
                node_source: "NCBI".into(),
                node_source_id: "5743".into(),
            }]
        );
    }

    #[test]
    fn missing_header_column_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let body = "node_index,node_type,node_name,node_source\n1,drug,a,s\n";
        let err = parse_nodes(write(dir.path(), "n.csv", body), Delimiter::Auto).unwrap_err();
        assert!(matches!(err, KgError::MissingColumn { column: "node_source_id", .. }));
    }

    #[test]
    fn empty_name_is_rejected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}1,drug,  ,s,x\n2,drug,b,s,y\n");
        let parsed = parse_nodes(write(dir.path(), "n.csv", &body), Delimiter::Auto).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejected[0].line, 2);
    }

    #[test]
    fn edge_rows_with_bad_index_are_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "relation,display_relation,x_index,y_index\nindication,ind,abc,5\nindication,ind,1,5\n";
        let parsed = parse_edges(write(dir.path(), "e.csv", body), Delimiter::Comma).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejected.len(), 1);
        assert_eq!(parsed.rejected[0].line, 2);
        assert!(parsed.rejected[0].reason.contains("abc"));
    }

    #[test]
    fn empty_edge_file_and_missing_edge_header() {
        let dir = tempfile::tempdir().unwrap();
        let parsed = parse_edges(
            write(dir.path(), "e.csv", "relation,x_index,y_index\n"),
            Delimiter::Auto,
        )
        .unwrap();
        assert!(parsed.records.is_empty());

        let err = parse_edges(
            write(dir.path(), "bad.csv", "relation,x_index\nr,1\n"),
            Delimiter::Auto,
        )
        .unwrap_err();
        assert!(matches!(err, KgError::MissingColumn { column: "y_index", .. }));
    }

    #[test]
    fn dangling_edges_are_dropped_and_rebuild_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let db_path = dir.path().join("kg.db");
        let node = |i, t: &str, n: &str| KgNode {
            node_index: i,
            node_type: t.into(),
            node_name: n.into(),
            node_source: "s".into(),
            node_source_id: i.to_string(),
        };
        let edge = |r: &str, x, y| KgEdge {
            relation: r.into(),
            display_relation: r.into(),
            x_index: x,
            y_index: y,
        };
        let nodes = vec![node(1, "drug", "a"), node(2, "disease", "b")];
        let edges = vec![edge("indication", 1, 2), edge("indication", 1, 99), edge("x", 99, 2)];
        let stats = build_database(&nodes, &edges, &db_path).unwrap();
        assert_eq!(stats, IngestStats { nodes: 2, edges: 1, dangling: 2 });

        let stats = build_database(&nodes[..1], &[], &db_path).unwrap();
        assert_eq!(stats, IngestStats { nodes: 1, edges: 0, dangling: 0 });
        let db = KgDatabase::open(&db_path).unwrap();
        let catalog = schema_catalog(&db).unwrap();
        assert_eq!(catalog.entity_types.len(), 1);
        assert!(catalog.relations.is_empty());
    }

    #[test]
    fn no_nodes_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_database(&[], &[], dir.path().join("kg.db")),
            Err(KgError::NoNodes)
        ));
    }

    #[test]
    fn unwritable_path_is_fatal() {
        let nodes = vec![KgNode {
            node_index: 1,
            node_type: "drug".into(),
            node_name: "a".into(),
            node_source: "s".into(),
            node_source_id: "1".into(),
        }];
        let err = build_database(&nodes, &[], "/nonexistent-dir/sub/kg.db").unwrap_err();
        assert!(matches!(err, KgError::Sqlite { .. } | KgError::Io { .. }));
    }

    #[test]
    fn read_only_connection_rejects_writes() {
        let dir = tempfile::tempdir().unwrap();
        let db_path = dir.path().join("kg.db");
        let nodes = vec![KgNode {
            node_index: 1,
            node_type: "drug".into(),
            node_name: "a".into(),
            node_source: "s".into(),
            node_source_id: "1".into(),
        }];
        build_database(&nodes, &[], &db_path).unwrap();
        let db = KgDatabase::open(&db_path).unwrap();
        let before = db.fingerprint().unwrap();
        let conn = db.connect().unwrap();
        assert!(conn.execute("DELETE FROM nodes", []).is_err());
        assert!(conn.execute_batch("DROP TABLE nodes").is_err());
        assert_eq!(db.fingerprint().unwrap(), before);
    }
}
