//! Pulling SQL out of model output and putting entity names back into it.

use thiserror::Error;

use crate::ner::TemplatedQuestion;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no SQL statement found in the model output")]
    NoSql,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReinflateError {
    #[error("placeholder {0} has no binding in the question")]
    UnboundPlaceholder(String),
}

/// Returns the SQL contained in a raw model response: the last fenced code
/// block if there is one, otherwise everything from the first `SELECT`.
pub fn extract_sql(raw: &str) -> Result<String, ExtractError> {
    let candidate = match last_fenced_block(raw) {
        Some(block) => block,
        None => {
            let lower = raw.to_ascii_lowercase();
            let start = find_select(&lower).ok_or(ExtractError::NoSql)?;
            raw[start..].to_string()
        }
    };
    let trimmed = candidate.trim();
    let trimmed = trimmed.strip_suffix(';').unwrap_or(trimmed).trim_end();
    if trimmed.is_empty() {
        return Err(ExtractError::NoSql);
    }
    Ok(trimmed.to_string())
}

fn find_select(lower: &str) -> Option<usize> {
    let bytes = lower.as_bytes();
    lower.match_indices("select").map(|(i, _)| i).find(|&i| {
        let before_ok = i == 0 || !(bytes[i - 1].is_ascii_alphanumeric() || bytes[i - 1] == b'_');
        let after = i + "select".len();
        let after_ok =
            after >= bytes.len() || !(bytes[after].is_ascii_alphanumeric() || bytes[after] == b'_');
        before_ok && after_ok
    })
}

fn last_fenced_block(raw: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in raw.lines() {
        let is_fence = line.trim_start().starts_with("```");
        match (&mut current, is_fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(lines), true) => {
                blocks.push(lines.join("\n"));
                current = None;
            }
            (Some(lines), false) => lines.push(line),
            (None, false) => {}
        }
    }
    blocks.pop()
}

/// Single-quoted SQL string literal with internal quotes doubled.
pub fn quote_literal(value: &str) -> String {
    format!("'{}'", value.replace('\'', "''"))
}

/// Length in bytes of a placeholder token such as `[DRUG_0]` starting at
/// the beginning of `s`.
fn placeholder_len(s: &str) -> Option<usize> {
    let rest = s.strip_prefix('[')?;
    let close = rest.find(']')?;
    let body = &rest[..close];
    let (stem, ordinal) = body.rsplit_once('_')?;
    let stem_ok = !stem.is_empty()
        && stem
            .chars()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
    let ordinal_ok = !ordinal.is_empty() && ordinal.chars().all(|c| c.is_ascii_digit());
    (stem_ok && ordinal_ok).then_some(close + 2)
}

/// Replaces placeholder tokens in `sql` with the bound canonical names.
///
/// Outside string literals a placeholder becomes a quoted literal. Inside a
/// literal it is replaced by the escaped name, so `'[DRUG_0]'` turns into
/// `'aspirin'` and `'%[DRUG_0]%'` into `'%aspirin%'`.
pub fn reinflate(sql: &str, tq: &TemplatedQuestion) -> Result<String, ReinflateError> {
    let name_for = |token: &str| {
        tq.binding(token)
            .map(|b| b.candidate.canonical_name.clone())
            .ok_or_else(|| ReinflateError::UnboundPlaceholder(token.to_string()))
    };
    let mut out = String::with_capacity(sql.len());
    let mut in_string = false;
    let mut i = 0;
    while i < sql.len() {
        let rest = &sql[i..];
        let c = rest.chars().next().unwrap();
        if c == '\'' {
            // A doubled quote inside a literal is an escaped quote.
            if in_string && rest[1..].starts_with('\'') {
                out.push_str("''");
                i += 2;
                continue;
            }
            in_string = !in_string;
            out.push(c);
            i += 1;
            continue;
        }
        if c == '[' {
            if let Some(len) = placeholder_len(rest) {
                let token = &rest[..len];
                let name = name_for(token)?;
                if in_string {
                    out.push_str(&name.replace('\'', "''"));
                } else {
                    out.push_str(&quote_literal(&name));
                }
                i += len;
                continue;
            }
        }
        out.push(c);
        i += c.len_utf8();
    }
    Ok(out)
}

/// All placeholder tokens occurring anywhere in `text`.
pub fn placeholder_tokens(text: &str) -> Vec<String> {
    let mut found = Vec::new();
    for (i, _) in text.match_indices('[') {
        if let Some(len) = placeholder_len(&text[i..]) {
            found.push(text[i..i + len].to_string());
        }
    }
    found
}
