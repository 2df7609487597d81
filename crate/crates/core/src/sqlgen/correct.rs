//! The generate, validate, execute and repair loop.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::kg::{KgDatabase, SchemaCatalog};
use crate::ner::TemplatedQuestion;
use crate::sqlgen::backend::GenerationBackend;
use crate::sqlgen::execute::{execute, AnswerSet, DEFAULT_EXEC_TIMEOUT};
use crate::sqlgen::extract::{extract_sql, reinflate};
use crate::sqlgen::prompt::{Prompt, PromptTexts};
use crate::sqlgen::validate::{validate_sql, DEFAULT_ROW_CAP};

pub const DEFAULT_MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub self_correction: bool,
    pub max_retries: usize,
    /// Retry once with a hint when a query returns no rows.
    pub retry_on_empty: bool,
    pub row_cap: usize,
    #[serde(with = "millis")]
    pub exec_timeout: Duration,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            self_correction: true,
            max_retries: DEFAULT_MAX_RETRIES,
            retry_on_empty: true,
            row_cap: DEFAULT_ROW_CAP,
            exec_timeout: DEFAULT_EXEC_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok { rows: usize },
    ValidationError { message: String },
    ExecutionError { message: String },
    EmptyResult,
    BackendError { message: String },
}

impl AttemptOutcome {
    pub fn message(&self) -> Option<&str> {
        match self {
            AttemptOutcome::ValidationError { message }
            | AttemptOutcome::ExecutionError { message }
            | AttemptOutcome::BackendError { message } => Some(message),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    /// SQL as produced by the model, with entity names filled in. Empty when
    /// nothing could be extracted.
    pub sql: String,
    /// The statement actually executed, after validation.
    pub executed_sql: Option<String>,
    pub outcome: AttemptOutcome,
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Success,
    RetriesExhausted,
    BackendFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    pub attempts: Vec<Attempt>,
    pub final_answers: Option<AnswerSet>,
    pub stopped_because: StopReason,
    pub warnings: Vec<String>,
}

enum Step {
    Answers(AnswerSet, usize, String),
    Failed(AttemptOutcome),
}

fn run_once(
    sql: &str,
    catalog: &SchemaCatalog,
    db: &KgDatabase,
    config: &CorrectionConfig,
    warnings: &mut Vec<String>,
) -> Step {
    let validated = match validate_sql(sql, catalog, config.row_cap) {
        Ok(v) => v,
        Err(e) => {
            return Step::Failed(AttemptOutcome::ValidationError {
                message: e.to_string(),
            })
        }
    };
    match execute(&validated, db, config.exec_timeout) {
        Ok(outcome) => {
            warnings.extend(outcome.warnings);
            Step::Answers(outcome.answers, outcome.rows, validated.as_str().to_string())
        }
        Err(e) => Step::Failed(AttemptOutcome::ExecutionError {
            message: e.to_string(),
        }),
    }
}

/// Runs the correction loop from an assembled prompt. Validation and
/// execution errors are fed back verbatim; an empty result is fed back at
/// most once. With self-correction off exactly one attempt is made.
pub fn self_correct(
    mut prompt: Prompt,
    tq: &TemplatedQuestion,
    catalog: &SchemaCatalog,
    backend: &dyn GenerationBackend,
    db: &KgDatabase,
    config: &CorrectionConfig,
    texts: &PromptTexts,
) -> CorrectionTrace {
    let max_attempts = if config.self_correction {
        1 + config.max_retries
    } else {
        1
    };
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut warnings = Vec::new();
    let mut empty_hint_used = false;

    loop {
        let raw = match backend.generate(&prompt) {
            Ok(raw) => raw,
            Err(e) => {
                attempts.push(Attempt {
                    sql: String::new(),
                    executed_sql: None,
                    outcome: AttemptOutcome::BackendError {
                        message: e.to_string(),
                    },
                    raw_response: None,
                });
                return CorrectionTrace {
                    attempts,
                    final_answers: None,
                    stopped_because: StopReason::BackendFailure,
                    warnings,
                };
            }
        };

        // The model's own SQL (placeholders intact) goes back into the
        // prompt; the attempt records it with names filled in.
        let (feedback_sql, attempt_sql, step) = match extract_sql(&raw) {
            Err(e) => (
                String::new(),
                String::new(),
                Step::Failed(AttemptOutcome::ValidationError {
                    message: e.to_string(),
                }),
            ),
            Ok(sql) => match reinflate(&sql, tq) {
                Err(e) => (
                    sql.clone(),
                    sql,
                    Step::Failed(AttemptOutcome::ValidationError {
                        message: e.to_string(),
                    }),
                ),
                Ok(filled) => {
                    let step = run_once(&filled, catalog, db, config, &mut warnings);
                    (sql, filled, step)
                }
            },
        };

        match step {
            Step::Answers(answers, rows, executed) if !answers.is_empty() => {
                attempts.push(Attempt {
                    sql: attempt_sql,
                    executed_sql: Some(executed),
                    outcome: AttemptOutcome::Ok { rows },
                    raw_response: Some(raw),
                });
                return CorrectionTrace {
                    attempts,
                    final_answers: Some(answers),
                    stopped_because: StopReason::Success,
                    warnings,
                };
            }
            Step::Answers(answers, _, executed) => {
                attempts.push(Attempt {
                    sql: attempt_sql,
                    executed_sql: Some(executed),
                    outcome: AttemptOutcome::EmptyResult,
                    raw_response: Some(raw),
                });
                let may_retry = config.self_correction
                    && config.retry_on_empty
                    && !empty_hint_used
                    && attempts.len() < max_attempts;
                if !may_retry {
                    // An empty set is a legal final answer.
                    return CorrectionTrace {
                        attempts,
                        final_answers: Some(answers),
                        stopped_because: StopReason::Success,
                        warnings,
                    };
                }
                empty_hint_used = true;
                prompt.push_correction(texts, &feedback_sql, texts.empty_result.trim());
            }
            Step::Failed(outcome) => {
                let message = outcome.message().unwrap_or_default().to_string();
                let shown = if feedback_sql.is_empty() {
                    raw.trim().to_string()
                } else {
                    feedback_sql
                };
                attempts.push(Attempt {
                    sql: attempt_sql,
                    executed_sql: None,
                    outcome,
                    raw_response: Some(raw),
                });
                if attempts.len() >= max_attempts {
                    return CorrectionTrace {
                        attempts,
                        final_answers: None,
                        stopped_because: StopReason::RetriesExhausted,
                        warnings,
                    };
                }
                prompt.push_correction(texts, &shown, &message);
            }
        }
    }
}
