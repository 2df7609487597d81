//! Question/SQL template table.
//!
//! Each row pairs a natural-language pattern with a SQL pattern over the
//! same slots. A row applies either to one metapath signature
//! (`drug|indication|disease;disease|disease_protein|gene/protein`) or, with
//! `*` per hop, to every metapath with that many hops.
//!
//! Slots: `{anchor}` is the anchor entity (a quoted literal in SQL, so it
//! appears bare in the SQL pattern); `{anchor_type}`, `{rel1}`, `{mid_type}`,
//! `{rel2}` and `{answer_type}` come from the metapath and are written inside
//! single quotes in SQL patterns.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{MetaPath, Step};

pub const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.tsv");

const SLOTS: &[&str] = &["anchor", "anchor_type", "rel1", "mid_type", "rel2", "answer_type"];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template table {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("template table: {0}")]
    Csv(#[from] csv::Error),
    #[error("template table is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("template row {line}: {message}")]
    Row { line: u64, message: String },
    #[error("duplicate template id `{0}`")]
    DuplicateId(String),
    #[error("no template for metapath {0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signature {
    /// Applies to every metapath with the row's hop count.
    Any,
    Steps(Vec<Step>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRow {
    pub template_id: String,
    pub hops: u8,
    pub signature: Signature,
    pub nl_pattern: String,
    pub sql_pattern: String,
}

impl TemplateRow {
    pub fn applies_to(&self, metapath: &MetaPath) -> bool {
        self.hops == metapath.hops
            && match &self.signature {
                Signature::Any => true,
                Signature::Steps(steps) => *steps == metapath.steps,
            }
    }

    pub fn slots(&self) -> BTreeSet<String> {
        pattern_slots(&self.nl_pattern)
    }
}

/// Slot names in order of first appearance in a pattern.
pub fn slot_sequence(pattern: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                out.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

fn pattern_slots(pattern: &str) -> BTreeSet<String> {
    slot_sequence(pattern).into_iter().collect()
}

/// Values the metapath supplies for the non-anchor slots.
pub fn metapath_slot_values(metapath: &MetaPath) -> Vec<(&'static str, String)> {
    let first = &metapath.steps[0];
    let mut values = vec![
        ("anchor_type", first.source_type.clone()),
        ("rel1", first.relation.clone()),
        ("answer_type", metapath.answer_type.clone()),
    ];
    if let Some(second) = metapath.steps.get(1) {
        values.push(("mid_type", first.target_type.clone()));
        values.push(("rel2", second.relation.clone()));
    }
    values
}

/// Fills `pattern` in one pass. `anchor` is inserted verbatim; other
/// values go through `escape` first. Unknown `{...}` text is kept.
pub fn fill(
    pattern: &str,
    anchor: &str,
    values: &[(&str, String)],
    escape: impl Fn(&str) -> String,
) -> String {
    let mut out = String::with_capacity(pattern.len() + anchor.len());
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            rest = &rest[open..];
            break;
        };
        let slot = &after[..close];
        if slot == "anchor" {
            out.push_str(anchor);
        } else if let Some((_, value)) = values.iter().find(|(name, _)| *name == slot) {
            out.push_str(&escape(value));
        } else {
            out.push_str(&rest[open..open + close + 2]);
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    out
}

fn parse_signature(text: &str, hops: u8) -> Result<Signature, String> {
    let parts: Vec<&str> = text.split(';').map(str::trim).collect();
    if parts.len() != hops as usize {
        return Err(format!(
            "signature `{text}` has {} step(s) but hops is {hops}",
            parts.len()
        ));
    }
    if parts.iter().all(|p| *p == "*") {
        return Ok(Signature::Any);
    }
    let mut steps = Vec::new();
    for part in parts {
        let fields: Vec<&str> = part.split('|').map(str::trim).collect();
        match fields.as_slice() {
            [s, r, t] if !s.is_empty() && !r.is_empty() && !t.is_empty() => steps.push(Step {
                source_type: s.to_string(),
                relation: r.to_string(),
                target_type: t.to_string(),
            }),
            _ => {
                return Err(format!(
                    "step `{part}` must be source_type|relation|target_type or `*`"
                ))
            }
        }
    }
    if steps.len() == 2 && steps[0].target_type != steps[1].source_type {
        return Err(format!("steps of `{text}` do not chain"));
    }
    Ok(Signature::Steps(steps))
}

fn check_row(row: &TemplateRow) -> Result<(), String> {
    let nl = pattern_slots(&row.nl_pattern);
    let sql = pattern_slots(&row.sql_pattern);
    if nl != sql {
        return Err(format!(
            "NL slots {nl:?} differ from SQL slots {sql:?}"
        ));
    }
    if let Some(unknown) = nl.iter().find(|s| !SLOTS.contains(&s.as_str())) {
        return Err(format!("unknown slot {{{unknown}}}"));
    }
    if !nl.contains("anchor") {
        return Err("pattern has no {anchor} slot".into());
    }
    if slot_sequence(&row.nl_pattern).iter().filter(|s| *s == "anchor").count() != 1 {
        return Err("the NL pattern must contain {anchor} exactly once".into());
    }
    if row.hops == 1 && (nl.contains("mid_type") || nl.contains("rel2")) {
        return Err("single-hop rows cannot use {mid_type} or {rel2}".into());
    }
    if !(1..=2).contains(&row.hops) {
        return Err(format!("hops must be 1 or 2, got {}", row.hops));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateTable {
    rows: Vec<TemplateRow>,
}

impl TemplateTable {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let delimiter = match text.lines().next() {
            Some(header) if header.contains('\t') => b'\t',
            _ => b',',
        };
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .quoting(delimiter != b'\t')
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &'static str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or(TemplateError::MissingColumn(name))
        };
        let (c_id, c_hops, c_sig, c_nl, c_sql) = (
            col("template_id")?,
            col("hops")?,
            col("signature")?,
            col("nl_pattern")?,
            col("sql_pattern")?,
        );
        let mut rows = Vec::new();
        let mut ids = BTreeSet::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let row_err = |message: String| TemplateError::Row { line, message };
            let hops: u8 = record[c_hops]
                .trim()
                .parse()
                .map_err(|_| row_err(format!("invalid hops `{}`", &record[c_hops])))?;
            let row = TemplateRow {
                template_id: record[c_id].trim().to_string(),
                hops,
                signature: parse_signature(&record[c_sig], hops).map_err(row_err)?,
                nl_pattern: record[c_nl].trim().to_string(),
                sql_pattern: record[c_sql].trim().to_string(),
            };
            check_row(&row).map_err(|m| TemplateError::Row { line, message: m })?;
            if !ids.insert(row.template_id.clone()) {
                return Err(TemplateError::DuplicateId(row.template_id));
            }
            rows.push(row);
        }
        Ok(TemplateTable { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn rows(&self) -> &[TemplateRow] {
        &self.rows
    }

    /// Rows applicable to `metapath`, metapath-specific rows first.
    pub fn rows_for(&self, metapath: &MetaPath) -> Vec<&TemplateRow> {
        let (mut specific, generic): (Vec<&TemplateRow>, Vec<&TemplateRow>) = self
            .rows
            .iter()
            .filter(|r| r.applies_to(metapath))
            .partition(|r| matches!(r.signature, Signature::Steps(_)));
        specific.extend(generic);
        specific
    }

    /// SHA-256 over the parsed rows, independent of file formatting.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.rows).expect("template rows serialize");
        hex::encode(Sha256::digest(&json))
    }
}

impl Default for TemplateTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("shipped template table is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(s: &str, r: &str, t: &str) -> Step {
        Step {
            source_type: s.into(),
            relation: r.into(),
            target_type: t.into(),
        }
    }

    #[test]
    fn default_table_parses_with_matching_slots() {
        let table = TemplateTable::default();
        assert!(table.rows().len() >= 4);
        for row in table.rows() {
            assert_eq!(pattern_slots(&row.nl_pattern), pattern_slots(&row.sql_pattern));
        }
        assert!(table
            .rows()
            .iter()
            .any(|r| r.hops == 1 && r.signature == Signature::Any));
        assert!(table
            .rows()
            .iter()
            .any(|r| r.hops == 2 && r.signature == Signature::Any));
    }

    #[test]
    fn specific_rows_come_first() {
        let table = TemplateTable::default();
        let mp = MetaPath::new(vec![step("drug", "drug_protein", "gene/protein")]).unwrap();
        let rows = table.rows_for(&mp);
        assert_eq!(rows[0].template_id, "t1_drug_protein");
        assert_eq!(rows.last().unwrap().signature, Signature::Any);
    }

    #[test]
    fn slot_mismatch_rejected() {
        let text = "template_id\thops\tsignature\tnl_pattern\tsql_pattern\n\
                    x\t1\t*\tWhat about {anchor} and {rel1}?\tSELECT node_name FROM nodes WHERE node_name = {anchor}\n";
        match TemplateTable::parse(text) {
            Err(TemplateError::Row { line: 2, message }) => assert!(message.contains("differ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn signature_must_chain() {
        assert!(parse_signature("drug|indication|disease;gene/protein|x|drug", 2).is_err());
        assert!(parse_signature("drug|indication|disease", 2).is_err());
        assert_eq!(parse_signature("*;*", 2).unwrap(), Signature::Any);
    }

    #[test]
    fn fill_escapes_values_but_not_anchor() {
        let mp = MetaPath::new(vec![step("drug", "it's", "disease")]).unwrap();
        let sql = fill(
            "WHERE a = {anchor} AND r = '{rel1}'",
            "'x'",
            &metapath_slot_values(&mp),
            |v| v.replace('\'', "''"),
        );
        assert_eq!(sql, "WHERE a = 'x' AND r = 'it''s'");
        assert_eq!(fill("{anchor} {x} {", "{rel1}", &[("rel1", "r".into())], |v| v.into()), "{rel1} {x} {");
    }

    #[test]
    fn content_hash_is_stable() {
        assert_eq!(
            TemplateTable::default().content_hash(),
            TemplateTable::default().content_hash()
        );
    }
}
