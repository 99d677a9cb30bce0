//! `lemon` command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lemon_core::annotate::{CompletionClient, RecordingClient, ReplayClient, PROCEDURES};
use lemon_core::curate::{BoxTable, ScoreTable};
use lemon_core::distill::{run_toy, write_trace, DistillConfig};
use lemon_core::embed::{
    build_pool_scoped, load_embeddings, video_embedding, write_embeddings_bin, EmbeddingIndex, EmbeddingRecord,
    FeatureExtractor, Query, Scope, AGGREGATION_EPS, TYPICALITY_K,
};
use lemon_core::frames::FrameRef;
use lemon_core::manifest::Stage;
use lemon_core::metrics::{evaluate, load_predictions, MetricKind};
use lemon_core::pipeline::{is_url, parse_sources, source_video_id, Outcome, Pipeline, PipelineConfig, Services, StageReport};
use lemon_core::review::{Action, DecisionRequest, LabelCorrection, TaskKind, TaskStatus};
use lemon_core::synth::{generate_corpus, DEFAULT_MIX};
use lemon_core::video::AutoDecoder;

use crate::clients::{download, HttpCompletion, HttpDetector, HttpFeatures, HttpScorer, RetryPolicy, LLM_TOKEN_ENV};

#[derive(Debug, Parser)]
#[command(name = "lemon", version, about = "Surgical video curation pipeline")]
pub struct Cli {
    /// Workspace directory holding the manifest, stores and review state.
    #[arg(short, long, global = true, env = "LEMON_WORKSPACE", default_value = ".")]
    pub workspace: PathBuf,
    /// Approve every new review task as `ci-bot`.
    #[arg(long, global = true)]
    pub auto_approve: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register videos from a sources list (JSONL or `source<TAB>title`).
    Ingest {
        #[arg(long)]
        sources: PathBuf,
        /// Also write a copy of the manifest here.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Sample 1-fps frames and compose review storyboards.
    Storyboard {
        #[arg(long = "video")]
        videos: Vec<String>,
        #[arg(long)]
        tile_width: Option<u32>,
        #[arg(long)]
        tile_height: Option<u32>,
    },
    /// Import per-frame surgical scores from a file or a scoring service.
    ScoresImport {
        #[arg(long, conflicts_with = "endpoint")]
        file: Option<PathBuf>,
        #[arg(long, env = "LEMON_SCORE_ENDPOINT")]
        endpoint: Option<String>,
    },
    /// Propose trim windows, then filter approved windows.
    Trim {
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        max_nonsurgical: Option<f64>,
        #[arg(long = "video")]
        videos: Vec<String>,
    },
    /// Black out detected regions in export frames.
    Obliterate {
        #[arg(long, conflicts_with = "endpoint")]
        boxes: Option<PathBuf>,
        #[arg(long, env = "LEMON_DETECT_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long)]
        min_conf: Option<f64>,
    },
    /// Propose procedure labels from titles.
    Annotate {
        #[arg(long, default_value = "builtin")]
        keywords: String,
        #[arg(long, env = "LEMON_LLM_ENDPOINT")]
        llm_endpoint: Option<String>,
        #[arg(long)]
        llm_model: Option<String>,
        /// Answer LLM prompts from recorded fixtures instead of the network.
        #[arg(long, conflicts_with = "llm_endpoint")]
        llm_replay: Option<PathBuf>,
        /// Record live LLM exchanges as fixtures.
        #[arg(long, requires = "llm_endpoint")]
        llm_record: Option<PathBuf>,
    },
    /// List review tasks.
    Tasks {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, default_value = "pending")]
        status: String,
    },
    /// Record a review decision without the UI.
    Decide(DecideArgs),
    /// Write the dataset tree.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Run the toy distillation trainer from an experiment file.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Metric names; repeat or comma-separate. Defaults by prediction kind.
        #[arg(long = "metric", value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = "LEMON_API_TOKEN")]
        token: Option<String>,
    },
    /// Write a synthetic corpus with planted surgical spans.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct DecideArgs {
    pub task_id: String,
    #[arg(long, value_enum)]
    pub action: ActionArg,
    #[arg(long)]
    pub note: Option<String>,
    #[arg(long, default_value = "cli")]
    pub actor: String,
    /// Corrected trim window as START:END.
    #[arg(long)]
    pub trim: Option<String>,
    /// Corrected procedures, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub procedures: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActionArg {
    Approve,
    Reject,
    Correct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    All,
    SameVideo,
    CrossVideo,
    SameProcedure,
    SameProcedureCrossVideo,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::All => Scope::All,
            ScopeArg::SameVideo => Scope::SameVideo,
            ScopeArg::CrossVideo => Scope::CrossVideo,
            ScopeArg::SameProcedure => Scope::SameProcedure,
            ScopeArg::SameProcedureCrossVideo => Scope::SameProcedureCrossVideo,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EmbedCommand {
    /// Embed exported frames through the feature service.
    Extract {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, env = "LEMON_EMBED_ENDPOINT")]
        endpoint: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Typicality-weighted video embeddings, one JSON line per video.
    Videos {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum)]
        scope: ScopeArg,
        #[arg(long, default_value_t = TYPICALITY_K)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Augmentation pool of one anchor frame.
    Pool {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        index: usize,
        #[arg(long, value_enum, default_value = "same-procedure-cross-video")]
        scope: ScopeArg,
    },
}

fn policy(cfg: &PipelineConfig) -> RetryPolicy {
    RetryPolicy {
        timeout: Duration::from_secs(cfg.timeout_s.max(1)),
        retries: cfg.retries,
        backoff: Duration::from_millis(250),
    }
}

fn open(cli: &Cli, tweak: impl FnOnce(&mut PipelineConfig)) -> Result<Pipeline> {
    let mut cfg = PipelineConfig::load(&cli.workspace)?;
    if cli.auto_approve {
        cfg.auto_approve = true;
    }
    tweak(&mut cfg);
    Ok(Pipeline::open(&cli.workspace, cfg)?)
}

fn print_report(report: &StageReport) {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for (id, o) in &report.outcomes {
        let (tag, detail) = match o {
            Outcome::Passed => ("passed", String::new()),
            Outcome::Rejected(r) => ("rejected", r.clone()),
            Outcome::AwaitingReview(t) => ("awaiting-review", t.clone()),
            Outcome::Unchanged => ("unchanged", String::new()),
            Outcome::Failed(e) => ("failed", e.clone()),
        };
        *tally.entry(tag).or_default() += 1;
        println!("{id}\t{tag}\t{detail}");
    }
    let summary: Vec<String> = tally.iter().map(|(k, v)| format!("{v} {k}")).collect();
    println!("{}: {}", report.stage, if summary.is_empty() { "nothing to do".into() } else { summary.join(", ") });
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { sources, manifest } => {
            let mut p = open(&cli, |_| {})?;
            let text = fs::read_to_string(sources).with_context(|| format!("reading {}", sources.display()))?;
            let entries = parse_sources(&text)?;
            let pol = policy(p.config());
            for e in entries.iter().filter(|e| is_url(&e.source)) {
                let Some(id) = source_video_id(e) else { continue };
                if p.manifest().contains(&id) {
                    continue;
                }
                let ext = Path::new(e.source.split(['?', '#']).next().unwrap_or(""))
                    .extension()
                    .and_then(|x| x.to_str())
                    .unwrap_or("mp4")
                    .to_string();
                let dir = p.path("sources");
                fs::create_dir_all(&dir)?;
                let target = dir.join(format!("{id}.{ext}"));
                if !target.exists() {
                    if let Err(err) = download(&e.source, &target, &pol) {
                        tracing::warn!("{id}: {err}");
                    }
                }
            }
            let report = p.ingest(&entries, &AutoDecoder)?;
            print_report(&report);
            if let Some(m) = manifest {
                p.manifest().save(m)?;
            }
        }
        Command::Storyboard {
            videos,
            tile_width,
            tile_height,
        } => {
            let mut p = open(&cli, |c| {
                if let Some(w) = tile_width {
                    c.tile_width = *w;
                }
                if let Some(h) = tile_height {
                    c.tile_height = *h;
                }
            })?;
            let targets = (!videos.is_empty()).then_some(videos.as_slice());
            print_report(&p.run_stage(Stage::Storyboarded, targets, Services::default())?);
        }
        Command::ScoresImport { file, endpoint } => {
            let mut p = open(&cli, |c| {
                if endpoint.is_some() {
                    c.endpoints.score = endpoint.clone();
                }
            })?;
            match (file, &p.config().endpoints.score) {
                (Some(f), _) => {
                    let table = ScoreTable::load(f)?;
                    let n = p.import_scores(table.iter())?;
                    println!("imported {n} new scores");
                }
                (None, Some(url)) => {
                    let scorer = HttpScorer::new(url, policy(p.config()));
                    print_report(&p.score_frames(&scorer)?);
                }
                (None, None) => bail!("give --file or --endpoint"),
            }
        }
        Command::Trim {
            theta,
            max_nonsurgical,
            videos,
        } => {
            let mut p = open(&cli, |c| {
                if let Some(t) = theta {
                    c.theta = *t;
                }
                if let Some(m) = max_nonsurgical {
                    c.max_nonsurgical = *m;
                }
            })?;
            let targets = (!videos.is_empty()).then_some(videos.as_slice());
            print_report(&p.run_stage(Stage::Trimmed, targets, Services::default())?);
            print_report(&p.run_stage(Stage::Filtered, None, Services::default())?);
        }
        Command::Obliterate { boxes, endpoint, min_conf } => {
            let mut p = open(&cli, |c| {
                if let Some(m) = min_conf {
                    c.min_conf = *m;
                }
                if endpoint.is_some() {
                    c.endpoints.detect = endpoint.clone();
                }
            })?;
            if let Some(b) = boxes {
                let table = BoxTable::load(b)?;
                let n = p.import_boxes(table.iter())?;
                println!("imported {n} new box sets");
            } else if let Some(url) = p.config().endpoints.detect.clone() {
                let det = HttpDetector::new(&url, policy(p.config()));
                print_report(&p.detect_regions(&det)?);
            }
            print_report(&p.run_stage(Stage::Obliterated, None, Services::default())?);
        }
        Command::Annotate {
            keywords,
            llm_endpoint,
            llm_model,
            llm_replay,
            llm_record,
        } => {
            if keywords != "builtin" {
                bail!("only the builtin keyword table is available");
            }
            let mut p = open(&cli, |c| {
                if llm_endpoint.is_some() {
                    c.endpoints.llm = llm_endpoint.clone();
                }
                if let Some(m) = llm_model {
                    c.llm_model = m.clone();
                }
            })?;
            let cfg = p.config().clone();
            let client: Option<Box<dyn CompletionClient>> = match (llm_replay, &cfg.endpoints.llm) {
                (Some(dir), _) => Some(Box::new(ReplayClient::new(dir))),
                (None, Some(url)) => {
                    let live = HttpCompletion::new(url, cfg.llm_model.clone(), std::env::var(LLM_TOKEN_ENV).ok(), policy(&cfg));
                    match llm_record {
                        Some(dir) => Some(Box::new(RecordingClient::new(live, dir))),
                        None => Some(Box::new(live)),
                    }
                }
                (None, None) => None,
            };
            let services = Services {
                llm: client.as_deref(),
                ..Services::default()
            };
            print_report(&p.run_stage(Stage::Annotated, None, services)?);
        }
        Command::Tasks { kind, status } => {
            let p = open(&cli, |_| {})?;
            let kind = kind
                .as_deref()
                .map(|k| TaskKind::parse(k).with_context(|| format!("unknown kind {k:?}")))
                .transpose()?;
            let status = if status == "any" {
                None
            } else {
                Some(TaskStatus::parse(status).with_context(|| format!("unknown status {status:?}"))?)
            };
            for t in p.tasks().queue(kind, status) {
                println!("{}\t{}\t{}\t{}", t.task_id, t.kind.as_str(), t.video_id, t.status.as_str());
            }
        }
        Command::Decide(args) => {
            let mut p = open(&cli, |_| {})?;
            let trim = args
                .trim
                .as_deref()
                .map(|s| -> Result<_> {
                    let (a, b) = s.split_once(':').context("trim must be START:END")?;
                    Ok(lemon_core::curate::TrimWindow {
                        start: a.parse()?,
                        end: b.parse()?,
                    })
                })
                .transpose()?;
            let labels = (!args.procedures.is_empty()).then(|| LabelCorrection {
                procedures: Some(args.procedures.iter().cloned().collect()),
                surgery_type: None,
            });
            let req = DecisionRequest {
                action: match args.action {
                    ActionArg::Approve => Action::Approve,
                    ActionArg::Reject => Action::Reject,
                    ActionArg::Correct => Action::Correct,
                },
                labels,
                trim,
                note: args.note.clone(),
                actor: Some(args.actor.clone()),
                idempotency_key: None,
            };
            let d = p.decide(&args.task_id, &req)?;
            println!("{}\t{}", d.task.task_id, d.task.status.as_str());
        }
        Command::Export { out } => {
            let mut p = open(&cli, |_| {})?;
            let report = p.export(out)?;
            for e in &report.excluded {
                println!("{}\texcluded\t{}", e.video_id, e.reason);
            }
            println!("exported {} videos, {} frames", report.stats.videos, report.stats.frames);
        }
        Command::Embed(cmd) => run_embed(&cli, cmd)?,
        Command::Distill { config, trace } => {
            let cfg = DistillConfig::load(config)?;
            cfg.validate()?;
            let outcome = run_toy(&cfg)?;
            let first = outcome.trace.first().map(|s| s.loss).unwrap_or(f64::NAN);
            let last = outcome.trace.last().map(|s| s.loss).unwrap_or(f64::NAN);
            if let Some(t) = trace {
                write_trace(t, &outcome.trace)?;
            }
            println!("steps {}  initial loss {first:.6}  final loss {last:.6}  ratio {:.4}", outcome.trace.len(), last / first);
        }
        Command::Eval { pred, metrics, json } => {
            let preds = load_predictions(pred)?;
            let kinds = metrics.iter().map(|m| MetricKind::parse(m)).collect::<Result<Vec<_>, _>>()?;
            let report = evaluate(&preds, &kinds)?;
            if *json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Serve { addr, token } => {
            let p = open(&cli, |_| {})?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!("review API on http://{}", listener.local_addr()?);
                crate::api::serve(listener, crate::api::state(p, token.clone())).await
            })?;
        }
        Command::Synth { out, seed } => {
            let c = generate_corpus(out, &DEFAULT_MIX, *seed)?;
            println!("wrote {} videos to {}", c.videos.len(), out.display());
        }
    }
    Ok(())
}

fn procedure_id(name: &str) -> u32 {
    PROCEDURES.iter().position(|p| *p == name).map_or(u32::MAX, |i| i as u32)
}

fn run_embed(cli: &Cli, cmd: &EmbedCommand) -> Result<()> {
    match cmd {
        EmbedCommand::Extract { dataset, endpoint, out } => {
            let cfg = PipelineConfig::load(&cli.workspace)?;
            let features = HttpFeatures::new(endpoint, policy(&cfg));
            let labels = fs::read_to_string(dataset.join("labels.jsonl"))
                .with_context(|| format!("{} has no labels.jsonl", dataset.display()))?;
            let store = lemon_core::frames::FrameStore::with_encoding(dataset.join("frames"), cfg.encoding)?;
            let mut records = Vec::new();
            for line in labels.lines().filter(|l| !l.trim().is_empty()) {
                let label: lemon_core::annotate::ProcedureLabel = serde_json::from_str(line)?;
                let procedure = label.procedures.iter().next().map_or(u32::MAX, |p| procedure_id(p));
                for f in store.frames(&label.video_id)? {
                    let values = features
                        .embed(&store.get(&f)?)
                        .map_err(|e| anyhow::anyhow!("{}: {e}", f.key()))?;
                    records.push(EmbeddingRecord {
                        video_id: f.video_id.clone(),
                        index: f.index,
                        procedure,
                        values,
                    });
                }
            }
            write_embeddings_bin(out, &records)?;
            println!("wrote {} embeddings to {}", records.len(), out.display());
        }
        EmbedCommand::Videos {
            embeddings,
            scope,
            k,
            out,
        } => {
            let index = EmbeddingIndex::build(embeddings.display().to_string(), load_embeddings(embeddings)?)?;
            let mut lines = String::new();
            for video in index.videos() {
                let queries: Vec<Query<'_>> = index.video_frames(video).into_iter().map(Query::from).collect();
                let ve = video_embedding(&queries, &index, *k, (*scope).into(), AGGREGATION_EPS)?;
                let row = serde_json::json!({"video_id": video, "embedding": ve.values, "weights": ve.weights, "flagged": ve.flagged});
                lines.push_str(&row.to_string());
                lines.push('\n');
            }
            match out {
                Some(o) => fs::write(o, lines)?,
                None => print!("{lines}"),
            }
        }
        EmbedCommand::Pool {
            embeddings,
            video,
            index: frame,
            scope,
        } => {
            let index = EmbeddingIndex::build(embeddings.display().to_string(), load_embeddings(embeddings)?)?;
            let pool = build_pool_scoped(&index, &FrameRef::new(video.clone(), *frame), (*scope).into())?;
            println!("{}", serde_json::to_string_pretty(&pool)?);
        }
    }
    Ok(())
}
