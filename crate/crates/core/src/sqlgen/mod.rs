//! SQL generation, validation, execution and self-correction.

pub mod backend;
pub mod correct;
pub mod execute;
pub mod extract;
pub mod http;
pub mod pipeline;
pub mod prompt;
pub mod validate;

pub use backend::{
    BackendError, BackendIdentity, BackendRegistry, FaultKind, FaultSpec, FaultyBackend,
    FixedBackend, GenerationBackend, OracleBackend, UnavailableBackend,
};
pub use correct::{self_correct, Attempt, AttemptOutcome, CorrectionConfig, CorrectionTrace, StopReason};
pub use execute::{execute, AnswerSet, ExecutionError};
pub use extract::{extract_sql, reinflate};
pub use http::{HttpBackendConfig, HttpChatBackend};
pub use pipeline::{NerMode, Pipeline, PipelineConfig, QAResult};
pub use prompt::{assemble_prompt, select_demonstrations, Prompt, PromptOptions, PromptTexts};
pub use validate::{validate_sql, ValidatedSql, ValidationError, DEFAULT_ROW_CAP};
