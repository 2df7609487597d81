use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgnlq_core::eval::{ablation_matrix, EvalContext, Setting};
use kgnlq_core::kg::{build_database, parse_edges, parse_nodes, Delimiter, KgDatabase};
use kgnlq_core::qgen::{generate_dataset, review_text, Dataset, TemplateTable};
use kgnlq_core::sqlgen::{FaultKind, HttpBackendConfig, NerMode, Pipeline, PromptTexts};
use kgnlq_core::{BackendRegistry, EntityIndex};
use kgnlq_service::{AppConfig, BackendDef};

#[derive(Parser)]
#[command(name = "kgnlq", version, about = "Question answering over a typed knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the graph database from node and edge files.
    Ingest {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        db: PathBuf,
        /// auto, comma or tab
        #[arg(long, default_value = "auto")]
        delimiter: Delimiter,
    },
    /// Build the entity index and write it to a cache file.
    Index {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question.
    Ask(AskArgs),
    /// Generate a synthetic question dataset.
    Gen {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = kgnlq_core::qgen::DEFAULT_SINGLE_HOP)]
        single: usize,
        #[arg(long, default_value_t = kgnlq_core::qgen::DEFAULT_TWO_HOP)]
        two: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Template table (TSV); the shipped table by default.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a plain-text listing for manual review.
        #[arg(long)]
        review: Option<PathBuf>,
    },
    /// Score a dataset under one or more ablation settings.
    Eval(EvalArgs),
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Used when no config file is given, or to override its database.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
    },
}

#[derive(Args)]
struct BackendArgs {
    /// Service config file; its backends and defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// oracle, faulty, http-chat or a backend named in the config file.
    #[arg(long, default_value = "oracle")]
    backend: String,
    /// Fault for the `faulty` backend.
    #[arg(long, default_value = "misspelled-column")]
    fault: FaultKind,
    /// Only fault questions with this many hops.
    #[arg(long)]
    fault_hops: Option<u8>,
    /// Keep injecting the fault after correction feedback.
    #[arg(long)]
    unrepairable: bool,
    /// Chat-completions base URL for `http-chat`.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    index_cache: Option<PathBuf>,
}

#[derive(Args)]
struct AskArgs {
    question: String,
    #[arg(long)]
    db: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// gazetteer or oracle
    #[arg(long, default_value = "gazetteer")]
    ner: NerMode,
    /// Gold entity for `--ner oracle`, as SURFACE=NODE_INDEX. Repeatable.
    #[arg(long = "entity", value_parser = parse_entity)]
    entities: Vec<(String, u64)>,
    /// on or off
    #[arg(long, value_parser = parse_on_off)]
    self_correction: Option<bool>,
    #[arg(long)]
    max_retries: Option<usize>,
    /// Dataset file used as the demonstration pool.
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(short = 'k', long = "k-demos")]
    k_demos: Option<usize>,
    /// Print the full pipeline trace as JSON.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// full, no-ner, no-sc or no-ner-no-sc. Repeatable; all four by default.
    #[arg(long = "setting")]
    settings: Vec<String>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    demos: Option<PathBuf>,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_entity(s: &str) -> Result<(String, u64), String> {
    let (surface, index) = s
        .rsplit_once('=')
        .ok_or_else(|| format!("expected SURFACE=NODE_INDEX, got `{s}`"))?;
    let index = index
        .parse()
        .map_err(|_| format!("`{index}` is not a node index"))?;
    Ok((surface.to_string(), index))
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got `{other}`")),
    }
}

/// Config file (if any) with command-line overrides applied.
fn app_config(db: Option<&Path>, args: &BackendArgs) -> Result<AppConfig> {
    let mut config = match &args.config {
        Some(path) => AppConfig::load(path)?,
        None => match db {
            Some(db) => AppConfig::new(db),
            None => bail!("either --db or --config is required"),
        },
    };
    if let Some(db) = db {
        config.db = db.to_path_buf();
    }
    for (field, value) in [
        (&mut config.templates, &args.templates),
        (&mut config.prompts_dir, &args.prompts),
        (&mut config.index_cache, &args.index_cache),
    ] {
        if value.is_some() {
            field.clone_from(value);
        }
    }
    config.backends.entry("oracle".into()).or_insert(BackendDef::Oracle);
    config.backends.insert(
        "faulty".into(),
        BackendDef::Faulty {
            fault: args.fault,
            only_hops: args.fault_hops,
            repairable: !args.unrepairable,
        },
    );
    let http = config
        .backends
        .entry("http-chat".into())
        .or_insert_with(|| BackendDef::Http(HttpBackendConfig::default()));
    if let BackendDef::Http(http) = http {
        if let Some(url) = &args.base_url {
            http.base_url.clone_from(url);
        }
        if let Some(model) = &args.model {
            http.model.clone_from(model);
        }
    }
    Ok(config)
}

struct Loaded {
    pipeline: Pipeline,
    backends: BackendRegistry,
    config: AppConfig,
}

fn load(db: Option<&Path>, args: &BackendArgs) -> Result<Loaded> {
    let config = app_config(db, args)?;
    let kg = KgDatabase::open(&config.db)?;
    let index = EntityIndex::build_or_load(&kg, config.index_cache.as_deref())?;
    let texts = match &config.prompts_dir {
        Some(dir) => PromptTexts::load_dir(dir).with_context(|| format!("reading prompts from {}", dir.display()))?,
        None => PromptTexts::default(),
    };
    let templates = match &config.templates {
        Some(path) => TemplateTable::load(path)?,
        None => TemplateTable::default(),
    };
    let backends = config.build_backends(&templates);
    if backends.get(&args.backend).is_none() {
        bail!(
            "unknown backend `{}` (available: {})",
            args.backend,
            backends.names().join(", ")
        );
    }
    Ok(Loaded {
        pipeline: Pipeline::new(kg, index, texts)?,
        backends,
        config,
    })
}

fn read_demos(path: Option<&Path>) -> Result<Vec<kgnlq_core::QAExample>> {
    Ok(match path {
        Some(p) => Dataset::read(p)?.examples,
        None => Vec::new(),
    })
}

fn ask(args: AskArgs) -> Result<ExitCode> {
    let loaded = load(args.db.as_deref(), &args.backend)?;
    let mut config = loaded.config.defaults.clone();
    config.ner = args.ner;
    if let Some(sc) = args.self_correction {
        config.correction.self_correction = sc;
    }
    if let Some(n) = args.max_retries {
        config.correction.max_retries = n;
    }
    if let Some(k) = args.k_demos {
        config.prompt.k_demos = k;
    }
    let demos = read_demos(args.demos.as_deref())?;
    let backend = loaded.backends.get(&args.backend.backend).unwrap();
    let gold = (!args.entities.is_empty()).then_some(args.entities.as_slice());
    let result = loaded
        .pipeline
        .answer_question(&args.question, gold, backend.as_ref(), &demos, &config);
    if args.trace {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        for a in result.answers.values() {
            println!("{a}");
        }
        if let Some(last) = result.trace.attempts.last() {
            if let Some(message) = last.outcome.message() {
                eprintln!("last attempt: {message}");
            }
        }
    }
    Ok(match result.trace.stopped_because {
        kgnlq_core::sqlgen::StopReason::BackendFailure => ExitCode::from(3),
        _ => ExitCode::SUCCESS,
    })
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let loaded = load(args.db.as_deref(), &args.backend)?;
    let dataset = Dataset::read(&args.dataset)?;
    let backend = &args.backend.backend;
    let settings = if args.settings.is_empty() {
        Setting::canonical(backend)
    } else {
        args.settings
            .iter()
            .map(|s| Setting::from_name(s, backend))
            .collect::<Result<Vec<_>, _>>()
            .map_err(anyhow::Error::msg)?
    };
    let demos = read_demos(args.demos.as_deref())?;
    let ctx = EvalContext {
        pipeline: &loaded.pipeline,
        backends: &loaded.backends,
        base: loaded.config.defaults.clone(),
        scoring: loaded.config.scoring,
        demo_pool: &demos,
    };
    let table = ablation_matrix(&dataset, &settings, &ctx)?;
    print!("{}", table.render_text());
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&table)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    let failures: usize = table.reports.iter().map(|r| r.backend_failures).sum();
    if failures > 0 {
        eprintln!("warning: {failures} example(s) hit backend failures");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest {
            nodes,
            edges,
            db,
            delimiter,
        } => {
            let nodes = parse_nodes(&nodes, delimiter)?;
            let edges = parse_edges(&edges, delimiter)?;
            for r in nodes.rejected.iter().chain(&edges.rejected) {
                eprintln!("warning: line {}: {}", r.line, r.reason);
            }
            let stats = build_database(&nodes.records, &edges.records, &db)?;
            println!(
                "{} nodes, {} edges, {} dangling edges dropped -> {}",
                stats.nodes,
                stats.edges,
                stats.dangling,
                db.display()
            );
        }
        Command::Index { db, out } => {
            let kg = KgDatabase::open(&db)?;
            let index = EntityIndex::build(&kg)?;
            index.save(&out)?;
            println!("{} entities indexed -> {}", index.len(), out.display());
        }
        Command::Ask(args) => return ask(args),
        Command::Gen {
            db,
            single,
            two,
            seed,
            templates,
            out,
            review,
        } => {
            let kg = KgDatabase::open(&db)?;
            let catalog = kgnlq_core::schema_catalog(&kg)?;
            let table = match templates {
                Some(p) => TemplateTable::load(p)?,
                None => TemplateTable::default(),
            };
            let ds = generate_dataset(&kg, &catalog, &table, single, two, seed)?;
            ds.write(&out)?;
            if let Some(review) = review {
                std::fs::write(&review, review_text(&ds))
                    .with_context(|| format!("writing {}", review.display()))?;
            }
            for w in &ds.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} single-hop + {} two-hop examples -> {} (id {})",
                ds.count_hops(1),
                ds.count_hops(2),
                out.display(),
                ds.content_id()
            );
        }
        Command::Eval(args) => return eval(args),
        Command::Serve {
            config,
            db,
            port,
            host,
            cors_origins,
        } => {
            let mut app = match (&config, &db) {
                (Some(path), _) => AppConfig::load(path)?,
                (None, Some(db)) => AppConfig::new(db),
                (None, None) => bail!("either --config or --db is required"),
            };
            if let (Some(_), Some(db)) = (&config, db) {
                app.db = db;
            }
            app.cors_origins.extend(cors_origins);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .with_context(|| format!("bad listen address {host}:{port}"))?;
            tokio::runtime::Runtime::new()?
                .block_on(kgnlq_service::serve(&app, addr))
                .map_err(|e| anyhow::anyhow!("{e}"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
