//! `vidkg` command line: ingest, build-kg, query and serve.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use vidkg_core::kb::load_kb;
use vidkg_core::learning::CropDescriptor;
use vidkg_core::recipe::{build_kg, ingest, AdapterSet, Bundle, RecipeError, RunConfig};
use vidkg_core::store::Store;

use crate::api::{now_rfc3339, router, run_query, ApiError, QueryResponse, Service, DEFAULT_TOP_K};

#[derive(Debug, Parser)]
#[command(name = "vidkg", version, about = "Video knowledge bases and synset graphs")]
pub struct Cli {
    /// Run config (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store root, overriding the config.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the pipeline over a fixture bundle and writes its knowledge base.
    Ingest {
        bundle: PathBuf,
        /// Stub manifest, overriding the config and the bundle's own.
        #[arg(long)]
        stub_manifest: Option<PathBuf>,
        /// Creation stamp written into the knowledge base.
        #[arg(long)]
        created_at: Option<String>,
    },
    /// Builds a new graph version from a knowledge base file or a stored video id.
    BuildKg {
        kb: String,
        /// Lexicon file or WordNet directory, overriding the config.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Ranks stored videos against a text query.
    Query {
        q: String,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Serves the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error("{}: {}", .0.body.code, .0.body.message)]
    Api(ApiError),
    #[error("{0}")]
    Other(String),
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError::Api(e)
    }
}

impl From<vidkg_core::store::StoreError> for CliError {
    fn from(e: vidkg_core::store::StoreError) -> Self {
        CliError::Recipe(e.into())
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.store {
        cfg.store = s.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    let io = |e: std::io::Error| CliError::Other(e.to_string());
    match cli.command {
        Command::Ingest {
            bundle,
            stub_manifest,
            created_at,
        } => {
            let bundle = Bundle::open(&bundle)?;
            let fallback = (cfg.adapters.stub_manifest.is_none() && cfg.adapters.endpoints.is_empty())
                .then(|| bundle.stub_manifest())
                .flatten();
            let adapters = AdapterSet::from_settings(&cfg.adapters, stub_manifest.or(fallback).as_deref())?;
            let store = Store::open(&cfg.store)?;
            let created_at = created_at.unwrap_or_else(now_rfc3339);
            let outcome = ingest(&bundle, &cfg, &adapters, &store, &created_at)?;
            let s = &outcome.summary;
            writeln!(out, "kb: {}", outcome.kb_path.display()).map_err(io)?;
            writeln!(
                out,
                "video {}: {} windows, {} keyframes, {} triplets",
                s.video_id, s.windows, s.keyframes, s.triplets
            )
            .map_err(io)?;
            if !s.failed_windows.is_empty() {
                writeln!(out, "failed windows: {:?}", s.failed_windows).map_err(io)?;
            }
        }
        Command::BuildKg { kb, lexicon } => {
            if lexicon.is_some() {
                cfg.lexicon = lexicon;
            }
            let store = Store::open(&cfg.store)?;
            let lex = cfg.open_lexicon(&store)?;
            let video_id = if Path::new(&kb).is_file() {
                let doc = load_kb(Path::new(&kb)).map_err(|e| CliError::Recipe(e.into()))?;
                store.put_kb(&doc)?;
                doc.video_id
            } else {
                kb
            };
            let (version, g) = build_kg(&store, &lex, &video_id)?;
            writeln!(
                out,
                "graph: {} ({} nodes, {} edges)",
                store.graph_path(&video_id, version)?.display(),
                g.nodes.len(),
                g.edges.len()
            )
            .map_err(io)?;
        }
        Command::Query { q, top_k } => {
            let store = Store::open(&cfg.store)?;
            let resp = if store.videos()?.is_empty() {
                QueryResponse {
                    q,
                    direct: vec![],
                    hits: vec![],
                }
            } else {
                let lex = cfg.open_lexicon(&store)?;
                run_query(&store, &lex, &q, top_k)?
            };
            out.write_all(render_hits(&resp).as_bytes()).map_err(io)?;
        }
        Command::Serve { addr } => {
            let store = Store::open(&cfg.store)?;
            let lex = cfg.open_lexicon(&store)?;
            let state = Arc::new(Service::new(store, lex, Box::new(CropDescriptor)));
            let rt = tokio::runtime::Runtime::new().map_err(io)?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state)).await
            })
            .map_err(io)?;
        }
    }
    Ok(())
}

/// Hits as a fixed-width table; frames as `frame@window(votes)`.
pub fn render_hits(resp: &QueryResponse) -> String {
    let mut s = format!(
        "{:<4} {:<24} {:>6} {:>4}  {:<40} {}\n",
        "rank", "video", "score", "spec", "matched", "frames"
    );
    for (i, h) in resp.hits.iter().enumerate() {
        let frames: Vec<String> = h
            .frames
            .iter()
            .map(|f| format!("{}@{}({})", f.frame_index, f.window, f.votes))
            .collect();
        s.push_str(&format!(
            "{:<4} {:<24} {:>6.3} {:>4}  {:<40} {}\n",
            i + 1,
            h.video_id,
            h.score,
            h.specificity,
            h.matched.join(","),
            frames.join(" ")
        ));
    }
    if resp.hits.is_empty() {
        s.push_str("(no hits)\n");
    }
    s
}
