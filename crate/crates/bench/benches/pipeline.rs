use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kgnlq_core::eval::f1;
use kgnlq_core::kg::{build_database, schema_catalog, KgDatabase};
use kgnlq_core::qgen::{generate_dataset, TemplateTable};
use kgnlq_core::sqlgen::{
    validate_sql, OracleBackend, Pipeline, PipelineConfig, PromptTexts, DEFAULT_ROW_CAP,
};
use kgnlq_core::synth::{generate, SynthConfig};
use kgnlq_core::{AnswerSet, EntityIndex};

fn synthetic(dir: &tempfile::TempDir) -> KgDatabase {
    let graph = generate(SynthConfig {
        nodes: 5_000,
        edges: 30_000,
        seed: 42,
    });
    let path = dir.path().join("bench.sqlite");
    build_database(&graph.nodes, &graph.edges, &path).unwrap();
    KgDatabase::open(&path).unwrap()
}

fn benches(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let db = synthetic(&dir);
    let catalog = schema_catalog(&db).unwrap();
    let table = TemplateTable::default();
    let dataset = generate_dataset(&db, &catalog, &table, 20, 20, 7).unwrap();
    let index = EntityIndex::build(&db).unwrap();
    let names: Vec<String> = dataset
        .examples
        .iter()
        .flat_map(|e| e.entities.iter().map(|g| g.surface.clone()))
        .collect();

    c.bench_function("entity_lookup", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % names.len();
            black_box(index.lookup(&names[i], 5, 0.45))
        })
    });

    let two_hop = dataset.examples.iter().find(|e| e.hops == 2).unwrap();
    c.bench_function("validate_sql_two_hop", |b| {
        b.iter(|| black_box(validate_sql(&two_hop.gold_sql, &catalog, DEFAULT_ROW_CAP).unwrap()))
    });

    let pipeline = Pipeline::new(db.clone(), index.clone(), PromptTexts::default()).unwrap();
    let oracle = OracleBackend::new(&table);
    let config = PipelineConfig::default();
    c.bench_function("answer_question_oracle", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % dataset.examples.len();
            let q = &dataset.examples[i].question;
            black_box(pipeline.answer_question(q, None, &oracle, &[], &config))
        })
    });

    let pred: AnswerSet = (0..200).map(|i| format!("answer {i}")).collect();
    let gold: AnswerSet = (100..300).map(|i| format!("Answer {i}")).collect();
    c.bench_function("f1_200x200", |b| b.iter(|| black_box(f1(&pred, &gold))));
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
