//! Generation backends: the interface plus the deterministic
//! implementations used without a model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ner::placeholder_token;
use crate::qgen::templates::{fill, metapath_slot_values, slot_sequence};
use crate::qgen::{Signature, TemplateRow, TemplateTable};
use crate::sqlgen::extract::quote_literal;
use crate::sqlgen::prompt::Prompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub name: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("cannot reach backend: {0}")]
    Transport(String),
    #[error("backend answered HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

/// Turns a prompt into raw model text.
pub trait GenerationBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;
    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError>;
}

/// Name-keyed set of backends available to the pipeline.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn GenerationBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, backend: Arc<dyn GenerationBackend>) {
        self.backends.insert(name.into(), backend);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn GenerationBackend>> {
        self.backends.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }

    pub fn identities(&self) -> Vec<BackendIdentity> {
        self.backends.values().map(|b| b.identity()).collect()
    }
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}

struct CompiledRow {
    row: TemplateRow,
    regex: Regex,
    /// Slot name per capture group.
    slots: Vec<String>,
}

/// Rule-based generator that recognizes the template phrasings and
/// returns the matching SQL pattern with the placeholder left in place.
pub struct OracleBackend {
    rows: Vec<CompiledRow>,
}

const PLACEHOLDER_CAPTURE: &str = r"(\[[A-Z0-9_]+_[0-9]+\])";

fn compile(row: &TemplateRow) -> CompiledRow {
    let mut pattern = String::from("^");
    let mut slots = Vec::new();
    let mut rest = row.nl_pattern.as_str();
    for slot in slot_sequence(&row.nl_pattern) {
        let marker = format!("{{{slot}}}");
        let at = rest.find(&marker).expect("slot taken from this pattern");
        pattern.push_str(&regex::escape(&rest[..at]));
        pattern.push_str(if slot == "anchor" {
            PLACEHOLDER_CAPTURE
        } else {
            "(.+?)"
        });
        slots.push(slot);
        rest = &rest[at + marker.len()..];
    }
    pattern.push_str(&regex::escape(rest));
    pattern.push('$');
    CompiledRow {
        row: row.clone(),
        regex: Regex::new(&pattern).expect("escaped template compiles"),
        slots,
    }
}

fn placeholder_stem(placeholder: &str) -> &str {
    placeholder
        .trim_start_matches('[')
        .rsplit_once('_')
        .map(|(stem, _)| stem)
        .unwrap_or("")
}

fn stem_of_type(node_type: &str) -> String {
    placeholder_stem(&placeholder_token(node_type, 0)).to_string()
}

/// A matched template row with the SQL it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleMatch {
    pub template_id: String,
    pub hops: u8,
    pub sql: String,
}

impl OracleBackend {
    pub fn new(table: &TemplateTable) -> Self {
        OracleBackend {
            rows: table.rows().iter().map(compile).collect(),
        }
    }

    /// First template row whose phrasing matches `question` with a
    /// placeholder of the right type in the anchor slot.
    pub fn translate(&self, question: &str) -> Option<OracleMatch> {
        let question = question.trim();
        self.rows.iter().find_map(|compiled| {
            let caps = compiled.regex.captures(question)?;
            let mut captured: BTreeMap<&str, &str> = BTreeMap::new();
            for (i, slot) in compiled.slots.iter().enumerate() {
                let value = caps.get(i + 1)?.as_str();
                // A slot used twice must capture the same text both times.
                if let Some(prev) = captured.insert(slot.as_str(), value) {
                    if prev != value {
                        return None;
                    }
                }
            }
            let anchor = *captured.get("anchor")?;
            let values: Vec<(&str, String)> = match &compiled.row.signature {
                Signature::Steps(steps) => {
                    let metapath = crate::qgen::MetaPath::new(steps.clone()).ok()?;
                    let expected = metapath_slot_values(&metapath);
                    for (slot, value) in &captured {
                        if *slot == "anchor" {
                            continue;
                        }
                        let want = expected.iter().find(|(s, _)| s == slot)?;
                        if want.1 != *value {
                            return None;
                        }
                    }
                    expected
                }
                Signature::Any => captured
                    .iter()
                    .filter(|(slot, _)| **slot != "anchor")
                    .map(|(slot, value)| (*slot, value.to_string()))
                    .collect(),
            };
            let anchor_type = values
                .iter()
                .find(|(s, _)| *s == "anchor_type")
                .map(|(_, v)| v.as_str())?;
            if placeholder_stem(anchor) != stem_of_type(anchor_type) {
                return None;
            }
            let sql = fill(
                &compiled.row.sql_pattern,
                &quote_literal(anchor),
                &values,
                |v| v.replace('\'', "''"),
            );
            Some(OracleMatch {
                template_id: compiled.row.template_id.clone(),
                hops: compiled.row.hops,
                sql,
            })
        })
    }
}

pub const ORACLE_REFUSAL: &str = "I cannot answer this question.";

impl GenerationBackend for OracleBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "oracle".into(),
            model: "template-inverse".into(),
        }
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError> {
        Ok(match self.translate(&prompt.question) {
            Some(m) => format!("```sql\n{}\n```", m.sql),
            None => ORACLE_REFUSAL.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// `node_name` becomes `node_nam`; the validator reports an unknown column.
    MisspelledColumn,
    /// `edges` becomes `edgs`; the validator reports an unknown table.
    MisspelledTable,
    /// The first relation literal gets a suffix; the query returns no rows.
    WrongRelationLiteral,
}

impl FaultKind {
    /// Text whose presence in the prompt makes the backend repair the fault.
    pub fn repair_hint(self) -> &'static str {
        match self {
            FaultKind::MisspelledColumn => "unknown column",
            FaultKind::MisspelledTable => "unknown table",
            FaultKind::WrongRelationLiteral => "returned zero rows",
        }
    }

    pub fn inject(self, sql: &str) -> String {
        match self {
            FaultKind::MisspelledColumn => sql.replacen("node_name", "node_nam", 1),
            FaultKind::MisspelledTable => {
                let re = Regex::new(r"\bedges\b").unwrap();
                re.replace(sql, "edgs").into_owned()
            }
            FaultKind::WrongRelationLiteral => {
                let re = Regex::new(r"relation = '([^']*)'").unwrap();
                re.replace(sql, "relation = '${1}_x'").into_owned()
            }
        }
    }
}

impl FromStr for FaultKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "misspelled-column" | "misspelled_column" | "column" => Ok(FaultKind::MisspelledColumn),
            "misspelled-table" | "misspelled_table" | "table" => Ok(FaultKind::MisspelledTable),
            "wrong-relation" | "wrong_relation_literal" | "relation" => {
                Ok(FaultKind::WrongRelationLiteral)
            }
            other => Err(format!(
                "unknown fault `{other}` (expected misspelled-column, misspelled-table or wrong-relation)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Only queries from templates with this hop count are faulted.
    #[serde(default)]
    pub only_hops: Option<u8>,
    /// When false the fault is injected on every attempt.
    #[serde(default = "default_true")]
    pub repairable: bool,
}

fn default_true() -> bool {
    true
}

impl FaultSpec {
    pub fn new(kind: FaultKind) -> Self {
        FaultSpec {
            kind,
            only_hops: None,
            repairable: true,
        }
    }
}

/// Wraps the oracle and corrupts its SQL until the prompt carries the
/// matching correction hint.
pub struct FaultyBackend {
    oracle: OracleBackend,
    spec: FaultSpec,
}

impl FaultyBackend {
    pub fn new(table: &TemplateTable, spec: FaultSpec) -> Self {
        FaultyBackend {
            oracle: OracleBackend::new(table),
            spec,
        }
    }

    pub fn spec(&self) -> &FaultSpec {
        &self.spec
    }

    /// Whether the query for `question` gets a fault on the first attempt.
    pub fn faults(&self, question: &str) -> bool {
        self.oracle
            .translate(question)
            .is_some_and(|m| self.spec.only_hops.is_none_or(|h| h == m.hops))
    }
}

impl GenerationBackend for FaultyBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "faulty".into(),
            model: format!("template-inverse+{:?}", self.spec.kind),
        }
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let Some(m) = self.oracle.translate(&prompt.question) else {
            return Ok(ORACLE_REFUSAL.to_string());
        };
        let applies = self.spec.only_hops.is_none_or(|h| h == m.hops);
        let repaired = self.spec.repairable
            && prompt
                .corrections
                .iter()
                .any(|c| c.message.contains(self.spec.kind.repair_hint()));
        let sql = if applies && !repaired {
            self.spec.kind.inject(&m.sql)
        } else {
            m.sql
        };
        Ok(format!("```sql\n{sql}\n```"))
    }
}

/// Always returns the same text.
pub struct FixedBackend {
    pub text: String,
}

impl GenerationBackend for FixedBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "fixed".into(),
            model: "constant".into(),
        }
    }

    fn generate(&self, _prompt: &Prompt) -> Result<String, BackendError> {
        Ok(self.text.clone())
    }
}

/// Always fails, as an unreachable server would.
pub struct UnavailableBackend;

impl GenerationBackend for UnavailableBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "unavailable".into(),
            model: "none".into(),
        }
    }

    fn generate(&self, _prompt: &Prompt) -> Result<String, BackendError> {
        Err(BackendError::Transport("connection refused".into()))
    }
}
