//! Running validated SQL against the read-only graph database.

use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalize_answer;
use crate::kg::{KgDatabase, KgError};
use crate::sqlgen::validate::ValidatedSql;

pub const DEFAULT_EXEC_TIMEOUT: Duration = Duration::from_secs(10);

/// A set of answer strings, unique under [`normalize_answer`] and kept in
/// normalized order so that equal sets serialize identically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerSet {
    values: Vec<String>,
}

impl AnswerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn normalized(&self) -> std::collections::BTreeSet<String> {
        self.values.iter().map(|v| normalize_answer(v)).collect()
    }

    /// Adds `value` unless an equivalent answer is already present.
    pub fn insert(&mut self, value: impl Into<String>) -> bool {
        let value = value.into();
        let key = normalize_answer(&value);
        match self
            .values
            .binary_search_by(|v| normalize_answer(v).cmp(&key))
        {
            Ok(_) => false,
            Err(pos) => {
                self.values.insert(pos, value);
                true
            }
        }
    }
}

impl<S: Into<String>> FromIterator<S> for AnswerSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut set = AnswerSet::new();
        for v in iter {
            set.insert(v);
        }
        set
    }
}

impl From<Vec<String>> for AnswerSet {
    fn from(values: Vec<String>) -> Self {
        values.into_iter().collect()
    }
}

impl From<AnswerSet> for Vec<String> {
    fn from(set: AnswerSet) -> Self {
        set.values
    }
}

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("{0}")]
    Engine(String),
    #[error("query exceeded the {} ms time limit", .0.as_millis())]
    Timeout(Duration),
    #[error(transparent)]
    Database(#[from] KgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub answers: AnswerSet,
    pub rows: usize,
    pub warnings: Vec<String>,
}

fn stringify(value: ValueRef<'_>) -> Option<String> {
    match value {
        ValueRef::Null => None,
        ValueRef::Integer(i) => Some(i.to_string()),
        ValueRef::Real(f) => Some(f.to_string()),
        ValueRef::Text(t) => Some(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Some(hex::encode(b)),
    }
}

/// Executes `vsql` on a fresh read-only connection and collects the first
/// result column.
pub fn execute(
    vsql: &ValidatedSql,
    db: &KgDatabase,
    timeout: Duration,
) -> Result<ExecOutcome, ExecutionError> {
    let conn = db.connect()?;
    let deadline = Instant::now() + timeout;
    let engine = |e: rusqlite::Error| {
        if Instant::now() > deadline {
            ExecutionError::Timeout(timeout)
        } else {
            ExecutionError::Engine(e.to_string())
        }
    };
    conn.progress_handler(1_000, Some(move || Instant::now() > deadline))
        .map_err(|e| ExecutionError::Engine(e.to_string()))?;
    let mut stmt = conn.prepare(vsql.as_str()).map_err(engine)?;
    let columns = stmt.column_count();
    let mut warnings = Vec::new();
    if columns > 1 {
        warnings.push(format!(
            "query returned {columns} columns; only the first is used as the answer"
        ));
    }
    let mut rows = stmt.query([]).map_err(engine)?;
    let mut answers = AnswerSet::new();
    let mut count = 0usize;
    let mut nulls = 0usize;
    while let Some(row) = rows.next().map_err(engine)? {
        count += 1;
        match stringify(row.get_ref(0).map_err(engine)?) {
            Some(v) => {
                answers.insert(v);
            }
            None => nulls += 1,
        }
    }
    if nulls > 0 {
        warnings.push(format!("{nulls} NULL value(s) dropped from the answer"));
    }
    Ok(ExecOutcome {
        answers,
        rows: count,
        warnings,
    })
}
