//! Answer-set metrics, dataset evaluation and the ablation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::qgen::{run_gold_sql, Dataset, QAExample};
use crate::sqlgen::backend::{BackendRegistry, GenerationBackend};
use crate::sqlgen::correct::StopReason;
use crate::sqlgen::execute::AnswerSet;
use crate::sqlgen::pipeline::{NerMode, Pipeline, PipelineConfig};

/// NFKC, case-folded, trimmed, inner whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let folded: String = s.nfkc().flat_map(char::to_lowercase).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Score given when both predicted and gold sets are empty.
    pub both_empty: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { both_empty: 1.0 }
    }
}

impl ScoringConfig {
    pub fn exact_match(&self, pred: &AnswerSet, gold: &AnswerSet) -> f64 {
        if pred.is_empty() && gold.is_empty() {
            return self.both_empty;
        }
        if pred.normalized() == gold.normalized() {
            1.0
        } else {
            0.0
        }
    }

    pub fn f1(&self, pred: &AnswerSet, gold: &AnswerSet) -> f64 {
        let (p, g) = (pred.normalized(), gold.normalized());
        match (p.is_empty(), g.is_empty()) {
            (true, true) => return self.both_empty,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let common = p.intersection(&g).count() as f64;
        if common == 0.0 {
            return 0.0;
        }
        let precision = common / p.len() as f64;
        let recall = common / g.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn exact_match(pred: &AnswerSet, gold: &AnswerSet) -> f64 {
    ScoringConfig::default().exact_match(pred, gold)
}

pub fn f1(pred: &AnswerSet, gold: &AnswerSet) -> f64 {
    ScoringConfig::default().f1(pred, gold)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub ner: NerMode,
    pub self_correction: bool,
    pub backend: String,
}

impl Setting {
    pub fn new(ner: NerMode, self_correction: bool, backend: impl Into<String>) -> Self {
        Setting {
            ner,
            self_correction,
            backend: backend.into(),
        }
    }

    /// The four rows of the ablation table, in display order.
    pub fn canonical(backend: &str) -> Vec<Setting> {
        vec![
            Setting::new(NerMode::Gazetteer, true, backend),
            Setting::new(NerMode::Oracle, true, backend),
            Setting::new(NerMode::Gazetteer, false, backend),
            Setting::new(NerMode::Oracle, false, backend),
        ]
    }

    /// Parses `full`, `no-ner`, `no-sc` or `no-ner-no-sc`.
    pub fn from_name(name: &str, backend: &str) -> Result<Setting, String> {
        SettingName::from_str(name).map(|n| n.with_backend(backend))
    }

    pub fn label(&self) -> &'static str {
        match (self.ner, self.self_correction) {
            (NerMode::Gazetteer, true) => "Full",
            (NerMode::Oracle, true) => "- NER",
            (NerMode::Gazetteer, false) => "- SC",
            (NerMode::Oracle, false) => "- NER - SC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SettingName {
    Full,
    NoNer,
    NoSc,
    NoNerNoSc,
}

impl SettingName {
    pub fn with_backend(self, backend: &str) -> Setting {
        let (ner, sc) = match self {
            SettingName::Full => (NerMode::Gazetteer, true),
            SettingName::NoNer => (NerMode::Oracle, true),
            SettingName::NoSc => (NerMode::Gazetteer, false),
            SettingName::NoNerNoSc => (NerMode::Oracle, false),
        };
        Setting::new(ner, sc, backend)
    }
}

impl FromStr for SettingName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(SettingName::Full),
            "no-ner" => Ok(SettingName::NoNer),
            "no-sc" => Ok(SettingName::NoSc),
            "no-ner-no-sc" => Ok(SettingName::NoNerNoSc),
            other => Err(format!(
                "unknown setting `{other}` (expected full, no-ner, no-sc or no-ner-no-sc)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub hops: u8,
    pub em: f64,
    pub f1: f64,
    pub attempts: usize,
    pub stopped_because: StopReason,
    pub answers: AnswerSet,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
}

impl Aggregate {
    fn of<'a>(scores: impl Iterator<Item = &'a ExampleScore>) -> Aggregate {
        let (mut count, mut em, mut f1) = (0usize, 0.0, 0.0);
        for s in scores {
            count += 1;
            em += s.em;
            f1 += s.f1;
        }
        if count == 0 {
            return Aggregate::default();
        }
        Aggregate {
            count,
            em: em / count as f64,
            f1: f1 / count as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub setting: Setting,
    pub scores: Vec<ExampleScore>,
    pub overall: Aggregate,
    pub by_hops: BTreeMap<u8, Aggregate>,
    pub backend_failures: usize,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset corruption in example {id}: {message}")]
    DatasetCorruption { id: String, message: String },
    #[error("unknown backend `{name}` (available: {})", available.join(", "))]
    UnknownBackend { name: String, available: Vec<String> },
    #[error("no settings requested")]
    NoSettings,
}

/// Checks that every gold query still produces its stored answers.
pub fn preflight(dataset: &Dataset, pipeline: &Pipeline) -> Result<(), EvalError> {
    dataset.examples.par_iter().try_for_each(|ex| {
        let got = run_gold_sql(&ex.gold_sql, &pipeline.db, &pipeline.catalog).map_err(|message| {
            EvalError::DatasetCorruption {
                id: ex.id.clone(),
                message,
            }
        })?;
        if got.normalized() != ex.gold_answers.normalized() {
            return Err(EvalError::DatasetCorruption {
                id: ex.id.clone(),
                message: format!(
                    "gold SQL returns {} answer(s), dataset stores {}",
                    got.len(),
                    ex.gold_answers.len()
                ),
            });
        }
        Ok(())
    })
}

/// Shared inputs for evaluation runs.
pub struct EvalContext<'a> {
    pub pipeline: &'a Pipeline,
    pub backends: &'a BackendRegistry,
    pub base: PipelineConfig,
    pub scoring: ScoringConfig,
    /// Demonstration pool; an example is never its own demonstration.
    pub demo_pool: &'a [QAExample],
}

fn score_example(
    ex: &QAExample,
    setting: &Setting,
    backend: &dyn GenerationBackend,
    ctx: &EvalContext<'_>,
    config: &PipelineConfig,
) -> ExampleScore {
    let pool: Vec<QAExample> = ctx
        .demo_pool
        .iter()
        .filter(|d| d.id != ex.id || d.question != ex.question)
        .cloned()
        .collect();
    let gold = ex.gold_entities();
    let result = ctx.pipeline.answer_question(
        &ex.question,
        (setting.ner == NerMode::Oracle).then_some(gold.as_slice()),
        backend,
        &pool,
        config,
    );
    let (em, f1) = match &result.trace.final_answers {
        Some(answers) => (
            ctx.scoring.exact_match(answers, &ex.gold_answers),
            ctx.scoring.f1(answers, &ex.gold_answers),
        ),
        None => (0.0, 0.0),
    };
    ExampleScore {
        example_id: ex.id.clone(),
        hops: ex.hops,
        em,
        f1,
        attempts: result.trace.attempts.len(),
        stopped_because: result.trace.stopped_because,
        answers: result.answers,
    }
}

fn evaluate_checked(
    dataset: &Dataset,
    setting: &Setting,
    ctx: &EvalContext<'_>,
) -> Result<EvalReport, EvalError> {
    let backend: Arc<dyn GenerationBackend> =
        ctx.backends
            .get(&setting.backend)
            .ok_or_else(|| EvalError::UnknownBackend {
                name: setting.backend.clone(),
                available: ctx.backends.names(),
            })?;
    let mut config = ctx.base.clone();
    config.ner = setting.ner;
    config.correction.self_correction = setting.self_correction;

    let scores: Vec<ExampleScore> = dataset
        .examples
        .par_iter()
        .map(|ex| score_example(ex, setting, backend.as_ref(), ctx, &config))
        .collect();

    let mut hop_values: Vec<u8> = scores.iter().map(|s| s.hops).collect();
    hop_values.sort_unstable();
    hop_values.dedup();
    let by_hops = hop_values
        .into_iter()
        .map(|h| (h, Aggregate::of(scores.iter().filter(|s| s.hops == h))))
        .collect();
    Ok(EvalReport {
        label: setting.label().to_string(),
        setting: setting.clone(),
        overall: Aggregate::of(scores.iter()),
        by_hops,
        backend_failures: scores
            .iter()
            .filter(|s| s.stopped_because == StopReason::BackendFailure)
            .count(),
        scores,
    })
}

/// Scores every example under `setting` after the soundness pre-flight.
pub fn evaluate(
    dataset: &Dataset,
    setting: &Setting,
    ctx: &EvalContext<'_>,
) -> Result<EvalReport, EvalError> {
    preflight(dataset, ctx.pipeline)?;
    evaluate_checked(dataset, setting, ctx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub reports: Vec<EvalReport>,
}

/// One report per setting, in the order requested.
pub fn ablation_matrix(
    dataset: &Dataset,
    settings: &[Setting],
    ctx: &EvalContext<'_>,
) -> Result<AblationTable, EvalError> {
    if settings.is_empty() {
        return Err(EvalError::NoSettings);
    }
    preflight(dataset, ctx.pipeline)?;
    let reports = settings
        .iter()
        .map(|s| evaluate_checked(dataset, s, ctx))
        .collect::<Result<_, _>>()?;
    Ok(AblationTable { reports })
}

impl AblationTable {
    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == label)
    }

    /// Aligned text table: overall and per-hop EM/F1 per setting.
    pub fn render_text(&self) -> String {
        let mut hops: Vec<u8> = self
            .reports
            .iter()
            .flat_map(|r| r.by_hops.keys().copied())
            .collect();
        hops.sort_unstable();
        hops.dedup();
        let label_width = self
            .reports
            .iter()
            .map(|r| r.label.len() + r.setting.backend.len() + 3)
            .max()
            .unwrap_or(0)
            .max("Setting".len());

        let mut out = String::new();
        write!(out, "{:<label_width$}  {:>5}  {:>5}", "Setting", "EM", "F1").unwrap();
        for h in &hops {
            write!(out, "  {:>9}  {:>9}", format!("{h}-hop EM"), format!("{h}-hop F1")).unwrap();
        }
        writeln!(out, "  {:>5}", "n").unwrap();
        for r in &self.reports {
            let label = format!("{} ({})", r.label, r.setting.backend);
            write!(
                out,
                "{:<label_width$}  {:>5.3}  {:>5.3}",
                label, r.overall.em, r.overall.f1
            )
            .unwrap();
            for h in &hops {
                match r.by_hops.get(h) {
                    Some(a) => write!(out, "  {:>9.3}  {:>9.3}", a.em, a.f1).unwrap(),
                    None => write!(out, "  {:>9}  {:>9}", "-", "-").unwrap(),
                }
            }
            writeln!(out, "  {:>5}", r.overall.count).unwrap();
        }
        out
    }
}
