//! Natural-language question answering over a typed biomedical knowledge graph.
//!
//! Questions go through entity tagging and linking, type-aware placeholder
//! substitution, SQL generation by a pluggable backend, validation,
//! execution and a bounded self-correction loop. The `qgen` and `eval`
//! modules generate templated question sets with gold SQL and score the
//! pipeline on them.

pub mod entity_index;
pub mod eval;
pub mod kg;
pub mod ner;
pub mod qgen;
pub mod sqlgen;
pub mod synth;

pub use entity_index::{EntityCandidate, EntityIndex};
pub use eval::{
    ablation_matrix, evaluate, exact_match, f1, normalize_answer, AblationTable, EvalContext,
    EvalReport, ScoringConfig, Setting,
};
pub use kg::{build_database, schema_catalog, KgDatabase, SchemaCatalog};
pub use ner::{EntityMention, TemplatedQuestion};
pub use qgen::{generate_dataset, Dataset, MetaPath, QAExample, TemplateTable};
pub use sqlgen::{
    AnswerSet, BackendRegistry, CorrectionConfig, CorrectionTrace, GenerationBackend, NerMode,
    Pipeline, PipelineConfig, QAResult,
};
