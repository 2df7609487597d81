//! End-to-end question answering.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::entity_index::{EntityIndex, IndexError};
use crate::kg::{schema_catalog, KgDatabase, KgError, SchemaCatalog};
use crate::ner::{
    oracle_tag, substitute_placeholders, tag, EntityMention, TemplatedQuestion,
    DEFAULT_TAG_MIN_SCORE,
};
use crate::qgen::QAExample;
use crate::sqlgen::backend::{BackendIdentity, GenerationBackend};
use crate::sqlgen::correct::{self_correct, CorrectionConfig, CorrectionTrace};
use crate::sqlgen::execute::AnswerSet;
use crate::sqlgen::prompt::{assemble_prompt, select_demonstrations, PromptOptions, PromptTexts};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NerMode {
    /// Tag mentions with the gazetteer.
    #[default]
    Gazetteer,
    /// Use the gold entities supplied with the question.
    Oracle,
}

impl FromStr for NerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gazetteer" => Ok(NerMode::Gazetteer),
            "oracle" => Ok(NerMode::Oracle),
            other => Err(format!(
                "unknown NER mode `{other}` (expected gazetteer or oracle)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ner: NerMode,
    pub tag_min_score: f64,
    pub prompt: PromptOptions,
    pub correction: CorrectionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ner: NerMode::Gazetteer,
            tag_min_score: DEFAULT_TAG_MIN_SCORE,
            prompt: PromptOptions::default(),
            correction: CorrectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAResult {
    pub question: String,
    pub ner_mode: NerMode,
    pub backend: BackendIdentity,
    pub mentions: Vec<EntityMention>,
    pub templated: TemplatedQuestion,
    pub demonstrations: Vec<String>,
    pub trace: CorrectionTrace,
    pub answers: AnswerSet,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Read-only state shared by every question.
pub struct Pipeline {
    pub db: KgDatabase,
    pub catalog: SchemaCatalog,
    pub index: EntityIndex,
    pub texts: PromptTexts,
}

struct Clock {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Clock {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.into(),
            ms: (now - self.last).as_secs_f64() * 1000.0,
        });
        self.last = now;
    }
}

impl Pipeline {
    pub fn new(db: KgDatabase, index: EntityIndex, texts: PromptTexts) -> Result<Self, PipelineError> {
        let catalog = schema_catalog(&db)?;
        Ok(Pipeline {
            db,
            catalog,
            index,
            texts,
        })
    }

    /// Opens the database and builds (or loads) the entity index.
    pub fn open(
        db_path: impl AsRef<std::path::Path>,
        index_cache: Option<&std::path::Path>,
    ) -> Result<Self, PipelineError> {
        let db = KgDatabase::open(db_path)?;
        let index = EntityIndex::build_or_load(&db, index_cache)?;
        Self::new(db, index, PromptTexts::default())
    }

    /// Runs NER (or oracle entities), placeholder substitution,
    /// demonstration selection and the correction loop. Component failures
    /// end up in the trace and warnings, never as an error.
    pub fn answer_question(
        &self,
        question: &str,
        gold_entities: Option<&[(String, u64)]>,
        backend: &dyn GenerationBackend,
        demo_pool: &[QAExample],
        config: &PipelineConfig,
    ) -> QAResult {
        let mut clock = Clock::new();
        let mut warnings = Vec::new();

        let mut mentions = match config.ner {
            NerMode::Gazetteer => tag(question, &self.index, config.tag_min_score),
            NerMode::Oracle => match gold_entities {
                Some(gold) => oracle_tag(question, gold, &self.index).unwrap_or_else(|e| {
                    warnings.push(format!("oracle entities rejected: {e}"));
                    Vec::new()
                }),
                None => {
                    warnings.push("oracle NER mode without gold entities; no entities bound".into());
                    Vec::new()
                }
            },
        };
        clock.lap("ner");

        mentions.retain(|m| {
            let linked = m.resolved.is_some();
            if !linked {
                warnings.push(format!("mention `{}` is not linked and stays in the question", m.surface));
            }
            linked
        });
        let templated = substitute_placeholders(question, &mentions).unwrap_or_else(|e| {
            warnings.push(format!("placeholder substitution failed: {e}"));
            TemplatedQuestion {
                original: question.to_string(),
                templated: question.to_string(),
                bindings: Vec::new(),
            }
        });
        clock.lap("placeholders");

        let demos = select_demonstrations(&templated, demo_pool, config.prompt.k_demos);
        let prompt = assemble_prompt(&templated, &self.catalog, &demos, &config.prompt, &self.texts);
        let demonstrations = demos.iter().map(|d| d.id.clone()).collect();
        clock.lap("prompt");

        let trace = self_correct(
            prompt,
            &templated,
            &self.catalog,
            backend,
            &self.db,
            &config.correction,
            &self.texts,
        );
        clock.lap("generation");

        warnings.extend(trace.warnings.iter().cloned());
        QAResult {
            question: question.to_string(),
            ner_mode: config.ner,
            backend: backend.identity(),
            mentions,
            templated,
            demonstrations,
            answers: trace.final_answers.clone().unwrap_or_default(),
            trace,
            timings: clock.timings,
            warnings,
        }
    }
}
