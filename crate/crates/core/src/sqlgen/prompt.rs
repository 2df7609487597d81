//! Prompt assembly: schema linking, demonstrations and instruction text.
//!
//! Instruction texts live in `prompts/` as data files and can be replaced
//! from a directory at runtime.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::kg::SchemaCatalog;
use crate::ner::TemplatedQuestion;
use crate::qgen::QAExample;

pub const DEFAULT_K_DEMOS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTexts {
    pub system: String,
    pub decomposition: String,
    pub chain_of_thought: String,
    pub output_format: String,
    pub user: String,
    pub correction: String,
    pub empty_result: String,
}

impl Default for PromptTexts {
    fn default() -> Self {
        PromptTexts {
            system: include_str!("../../prompts/system.txt").into(),
            decomposition: include_str!("../../prompts/decomposition.txt").into(),
            chain_of_thought: include_str!("../../prompts/chain_of_thought.txt").into(),
            output_format: include_str!("../../prompts/output_format.txt").into(),
            user: include_str!("../../prompts/user.txt").into(),
            correction: include_str!("../../prompts/correction.txt").into(),
            empty_result: include_str!("../../prompts/empty_result.txt").into(),
        }
    }
}

impl PromptTexts {
    /// Reads `<name>.txt` files from `dir`; missing files keep the default.
    pub fn load_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        let mut texts = PromptTexts::default();
        let slots: [(&str, &mut String); 7] = [
            ("system", &mut texts.system),
            ("decomposition", &mut texts.decomposition),
            ("chain_of_thought", &mut texts.chain_of_thought),
            ("output_format", &mut texts.output_format),
            ("user", &mut texts.user),
            ("correction", &mut texts.correction),
            ("empty_result", &mut texts.empty_result),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        if !dir.is_dir() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("prompt directory {} does not exist", dir.display()),
            ));
        }
        Ok(texts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub decomposition: bool,
    pub chain_of_thought: bool,
    pub k_demos: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            decomposition: true,
            chain_of_thought: true,
            k_demos: DEFAULT_K_DEMOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub question: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionTurn {
    pub sql: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_text: String,
    pub schema_excerpt: String,
    pub demonstrations: Vec<Demonstration>,
    pub user_text: String,
    /// The templated question on its own, for backends that need it.
    pub question: String,
    pub corrections: Vec<CorrectionTurn>,
}

impl Prompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut messages = vec![ChatMessage::new(
            "system",
            format!("{}\n\n{}", self.system_text.trim_end(), self.schema_excerpt),
        )];
        for demo in &self.demonstrations {
            messages.push(ChatMessage::new("user", format!("Question: {}", demo.question)));
            messages.push(ChatMessage::new("assistant", fenced(&demo.sql)));
        }
        messages.push(ChatMessage::new("user", self.user_text.clone()));
        for turn in &self.corrections {
            messages.push(ChatMessage::new("assistant", fenced(&turn.sql)));
            messages.push(ChatMessage::new("user", turn.message.clone()));
        }
        messages
    }

    /// All message contents, in order.
    pub fn render(&self) -> String {
        self.messages()
            .into_iter()
            .map(|m| format!("[{}]\n{}", m.role, m.content))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn push_correction(&mut self, texts: &PromptTexts, sql: &str, error: &str) {
        let message = texts
            .correction
            .replace("{sql}", sql)
            .replace("{error}", error);
        self.corrections.push(CorrectionTurn {
            sql: sql.to_string(),
            message: message.trim_end().to_string(),
        });
    }
}

fn fenced(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

static TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[[A-Z0-9_]+\]|[\p{L}\p{N}_]+").unwrap());

/// Word tokens of a templated question. Placeholders count as one token
/// each and keep their case; everything else is lowercased.
pub fn question_tokens(text: &str) -> BTreeSet<String> {
    TOKEN
        .find_iter(text)
        .map(|m| {
            let t = m.as_str();
            if t.starts_with('[') {
                t.to_string()
            } else {
                t.to_lowercase()
            }
        })
        .collect()
}

pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (question_tokens(a), question_tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Top `k` pool examples by token Jaccard similarity of templated
/// questions; ties go to the smaller id.
pub fn select_demonstrations<'p>(
    tq: &TemplatedQuestion,
    pool: &'p [QAExample],
    k: usize,
) -> Vec<&'p QAExample> {
    if k == 0 {
        return Vec::new();
    }
    let query = question_tokens(&tq.templated);
    let mut scored: Vec<(f64, &QAExample)> = pool
        .iter()
        .map(|ex| {
            let tokens = question_tokens(&ex.templated_question);
            let union = query.union(&tokens).count();
            let score = if union == 0 {
                0.0
            } else {
                query.intersection(&tokens).count() as f64 / union as f64
            };
            (score, ex)
        })
        .collect();
    scored.sort_by(|(sa, a), (sb, b)| sb.total_cmp(sa).then_with(|| a.id.cmp(&b.id)));
    scored.into_iter().take(k).map(|(_, ex)| ex).collect()
}

/// Renders the schema restricted to the types of the bound placeholders
/// and the relations touching them. Without bindings, or when no relation
/// touches the bound types, everything is listed.
pub fn schema_excerpt(tq: &TemplatedQuestion, catalog: &SchemaCatalog) -> String {
    let bound: BTreeSet<&str> = tq
        .bindings
        .iter()
        .map(|b| b.candidate.node_type.as_str())
        .collect();
    let mut relations: Vec<_> = catalog
        .relations
        .iter()
        .filter(|r| bound.iter().any(|t| r.touches(t)))
        .collect();
    if relations.is_empty() {
        relations = catalog.relations.iter().collect();
    }
    let types: BTreeSet<&str> = if bound.is_empty() {
        catalog.entity_types.iter().map(|t| t.name.as_str()).collect()
    } else {
        let mut types = bound.clone();
        for r in &relations {
            for p in &r.type_pairs {
                types.insert(&p.source_type);
                types.insert(&p.target_type);
            }
        }
        types
    };

    let mut out = String::from("Tables:\n");
    for table in &catalog.tables {
        out.push_str(&format!("  {}\n", table.render()));
    }
    out.push_str("Entity types (nodes.node_type):\n");
    for t in catalog.entity_types.iter().filter(|t| types.contains(t.name.as_str())) {
        out.push_str(&format!("  '{}' ({} nodes)\n", t.name, t.count));
    }
    out.push_str("Relations (edges.relation, source type -> target type):\n");
    for r in relations {
        let pairs = r
            .type_pairs
            .iter()
            .map(|p| format!("'{}' -> '{}'", p.source_type, p.target_type))
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!("  '{}': {} ({} edges)\n", r.name, pairs, r.edge_count));
    }
    out
}

fn legend(tq: &TemplatedQuestion) -> String {
    if tq.bindings.is_empty() {
        return "(no entities detected)".into();
    }
    tq.bindings
        .iter()
        .map(|b| {
            format!(
                "{} = '{}' ({})",
                b.placeholder, b.candidate.canonical_name, b.candidate.node_type
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assemble_prompt(
    tq: &TemplatedQuestion,
    catalog: &SchemaCatalog,
    demos: &[&QAExample],
    options: &PromptOptions,
    texts: &PromptTexts,
) -> Prompt {
    let mut system_text = texts.system.trim_end().to_string();
    if options.decomposition {
        system_text.push_str("\n\n");
        system_text.push_str(texts.decomposition.trim_end());
    }
    if options.chain_of_thought {
        system_text.push_str("\n\n");
        system_text.push_str(texts.chain_of_thought.trim_end());
    }
    system_text.push_str("\n\n");
    system_text.push_str(texts.output_format.trim_end());

    let user_text = texts
        .user
        .replace("{question}", &tq.templated)
        .replace("{legend}", &legend(tq))
        .trim_end()
        .to_string();

    Prompt {
        system_text,
        schema_excerpt: schema_excerpt(tq, catalog),
        demonstrations: demos
            .iter()
            .take(options.k_demos)
            .map(|ex| Demonstration {
                id: ex.id.clone(),
                question: ex.templated_question.clone(),
                sql: ex.templated_sql(),
            })
            .collect(),
        user_text,
        question: tq.templated.clone(),
        corrections: Vec::new(),
    }
}
