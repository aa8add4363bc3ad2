//! `refiner`: operator command line over a ledger store.
//!
//! Exit codes: 0 success, 1 user error (flags, query syntax, filters),
//! 2 data or store error. Data goes to stdout, diagnostics to stderr.

mod render;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refiner_api::views::{self, BlocksParams, HistoryParams, PageParams, Payload, QueryBody, SyncProbe, TxParams, ViewError, ViewResult};
use refiner_api::ApiConfig;
use refiner_core::bench::{run_bench, PARSER_PIPELINE, SCHEMA_PIPELINE};
use refiner_core::config::RefinerConfig;
use refiner_core::gen::{write_ledger, GenConfig, TxsPerBlock};
use refiner_core::ingest::{ingest_all, IngestSummary, Ingestor};
use refiner_core::query::{QueryScope, MAX_PAGE_LIMIT};
use refiner_core::source::{SourceConfig, SourceRegistry};
use refiner_core::store::{Snapshot, Store};
use refiner_core::sync::StopSignal;
use serde_json::json;

#[derive(Parser)]
#[command(name = "refiner", version, about = "Ingest, inspect, query and serve a ledger store")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "REFINER_DB")]
    db: Option<PathBuf>,
    /// Output format for data on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// TOML configuration file.
    #[arg(long, global = true, env = "REFINER_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Parse blocks from a source into the store.
    Ingest(IngestArgs),
    /// Serve the HTTP API, optionally ingesting in the background.
    Serve(ServeArgs),
    /// List blocks, or show one block with its transactions.
    Blocks(BlocksArgs),
    /// List transactions by filter, or show one by id.
    Tx(TxArgs),
    /// Value history of one key, oldest first.
    History(HistoryArgs),
    /// Run a rich query over the world state or its history.
    Query(QueryArgs),
    /// Schema overview, one schema, or its member states.
    Schemas(SchemasArgs),
    /// Ledger totals.
    Stats,
    /// Write a synthetic ledger as JSON lines.
    Generate(GenerateArgs),
    /// Measure both pipelines on a synthetic ledger.
    Bench(BenchArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSON-lines ledger file; defaults to the configured source.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Keep tailing the source until interrupted.
    #[arg(long)]
    follow: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to listen on; defaults to the configured one.
    #[arg(long)]
    listen: Option<String>,
    /// Tail the source into the store while serving.
    #[arg(long)]
    ingest: bool,
    /// JSON-lines ledger file for --ingest.
    #[arg(long, requires = "ingest")]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct BlocksArgs {
    /// Block number to show.
    number: Option<u64>,
    #[arg(long)]
    from: Option<u64>,
    #[arg(long)]
    to: Option<u64>,
    #[arg(long)]
    offset: Option<u64>,
    #[arg(long)]
    limit: Option<u64>,
}

#[derive(Args)]
struct TxArgs {
    /// Transaction id to show.
    tx_id: Option<String>,
    /// Creator MSP id.
    #[arg(long)]
    creator: Option<String>,
    /// Endorser MSP id.
    #[arg(long)]
    endorser: Option<String>,
    #[arg(long)]
    chaincode: Option<String>,
    #[arg(long)]
    function: Option<String>,
    #[arg(long)]
    channel: Option<String>,
    /// RFC 3339, inclusive.
    #[arg(long)]
    time_from: Option<String>,
    /// RFC 3339, inclusive.
    #[arg(long)]
    time_to: Option<String>,
    #[arg(long)]
    block_from: Option<u64>,
    #[arg(long)]
    block_to: Option<u64>,
    /// Include transactions that failed validation.
    #[arg(long)]
    include_invalid: bool,
    /// Newest first.
    #[arg(long)]
    desc: bool,
    #[arg(long)]
    offset: Option<u64>,
    #[arg(long)]
    limit: Option<u64>,
}

#[derive(Args)]
struct HistoryArgs {
    key: String,
    /// Include writes of transactions that failed validation.
    #[arg(long)]
    include_invalid: bool,
}

#[derive(Args)]
struct QueryArgs {
    /// Condition, e.g. `Owner.Name="David" AND Size>10`.
    expr: String,
    #[arg(long, value_enum, default_value_t = ScopeArg::Latest)]
    scope: ScopeArg,
    /// Only states in this schema.
    #[arg(long)]
    schema_id: Option<u64>,
    #[arg(long)]
    offset: Option<u64>,
    #[arg(long)]
    limit: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Latest,
    History,
}

#[derive(Args)]
struct SchemasArgs {
    /// Schema to show.
    id: Option<u64>,
    /// List the schema's member states instead of its definition.
    #[arg(long, requires = "id")]
    states: bool,
    #[arg(long)]
    offset: Option<u64>,
    #[arg(long)]
    limit: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator settings as TOML; flags override it.
    #[arg(long)]
    gen_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total blocks including the genesis block.
    #[arg(long)]
    blocks: Option<u64>,
    #[arg(long)]
    txs_per_block: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 6)]
    seed: u64,
    #[arg(long, default_value_t = 401)]
    blocks: u64,
    #[arg(long, default_value_t = 100)]
    txs_per_block: u32,
    /// Transaction counts at which both pipelines are timed.
    #[arg(long, value_delimiter = ',', default_values_t = [10_000u64, 20_000, 40_000])]
    checkpoints: Vec<u64>,
    /// Fresh directory for the bench store; a temporary one by default.
    #[arg(long)]
    dir: Option<PathBuf>,
}

/// A failed command, classified for the exit code.
#[derive(Debug)]
enum Failure {
    User(String),
    Data(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::User(_) => 1,
            Failure::Data(_) => 2,
        }
    }

    fn data(e: impl fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::User(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl From<ViewError> for Failure {
    fn from(e: ViewError) -> Self {
        if e.code.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("refiner: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

struct Ctx {
    config: RefinerConfig,
    db: Option<PathBuf>,
    format: Format,
}

impl Ctx {
    fn db(&self) -> Result<&Path, Failure> {
        self.db
            .as_deref()
            .ok_or_else(|| Failure::User("no store given: pass --db, set REFINER_DB or `db` in the config".into()))
    }

    fn limit_max(&self) -> u64 {
        self.config.api.page_limit_max.min(MAX_PAGE_LIMIT)
    }

    /// Runs one view against a read-only snapshot and prints it.
    fn show(&self, view: impl FnOnce(&Snapshot<'_>, u64) -> ViewResult) -> Outcome {
        let db = self.db()?;
        let store = Store::open_read_only(db).map_err(|e| Failure::Data(format!("cannot open store {}: {e}", db.display())))?;
        let snap = store.snapshot().map_err(Failure::data)?;
        let payload = view(&snap, self.limit_max())?;
        self.print(&payload);
        Ok(())
    }

    fn print(&self, payload: &Payload) {
        match self.format {
            Format::Json => println!("{}", payload.to_json()),
            Format::Table => print!("{}", render::render(&payload.data, payload.total_count)),
        }
    }

    fn print_value(&self, value: serde_json::Value) {
        self.print(&Payload {
            data: value,
            total_count: None,
        });
    }

    fn source(&self, path: Option<&Path>, follow: bool) -> Result<SourceConfig, Failure> {
        let mut cfg = match (path, &self.config.source) {
            (Some(p), _) => SourceConfig::file(p, follow),
            (None, Some(c)) => c.clone(),
            (None, None) => return Err(Failure::User("no source given: pass --source or configure [source]".into())),
        };
        cfg.follow |= follow;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Outcome {
    let config = match &cli.config {
        Some(path) => RefinerConfig::load(path).map_err(|e| Failure::User(e.to_string()))?,
        None => RefinerConfig::default(),
    };
    let ctx = Ctx {
        db: cli.db.clone().or_else(|| config.db.clone()),
        config,
        format: cli.format,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Blocks(a) => match a.number {
            Some(n) => ctx.show(|snap, _| views::block(snap, n)),
            None => {
                let p = BlocksParams {
                    from: a.from,
                    to: a.to,
                    offset: a.offset,
                    limit: a.limit,
                };
                ctx.show(|snap, max| views::blocks(snap, &p, max))
            }
        },
        Command::Tx(a) => match a.tx_id.clone() {
            Some(id) => ctx.show(|snap, _| views::transaction(snap, &id)),
            None => {
                let p = TxParams {
                    creator: a.creator,
                    endorser: a.endorser,
                    chaincode: a.chaincode,
                    function: a.function,
                    channel: a.channel,
                    time_from: a.time_from,
                    time_to: a.time_to,
                    block_from: a.block_from,
                    block_to: a.block_to,
                    valid: a.include_invalid.then_some(false),
                    order: a.desc.then(|| "desc".to_string()),
                    offset: a.offset,
                    limit: a.limit,
                };
                ctx.show(|snap, max| views::transactions(snap, &p, max))
            }
        },
        Command::History(a) => {
            let p = HistoryParams {
                include_invalid: a.include_invalid.then_some(true),
            };
            ctx.show(|snap, _| views::history(snap, &a.key, &p))
        }
        Command::Query(a) => {
            let body = QueryBody {
                expr: a.expr,
                scope: match a.scope {
                    ScopeArg::Latest => QueryScope::Latest,
                    ScopeArg::History => QueryScope::History,
                },
                schema_id: a.schema_id,
                offset: a.offset,
                limit: a.limit,
            };
            ctx.show(|snap, max| views::rich_query(snap, &body, max))
        }
        Command::Schemas(a) => match (a.id, a.states) {
            (Some(id), true) => {
                let p = PageParams {
                    offset: a.offset,
                    limit: a.limit,
                };
                ctx.show(|snap, max| views::schema_states(snap, id, &p, max))
            }
            (Some(id), false) => ctx.show(|snap, _| views::schema(snap, id)),
            (None, _) => ctx.show(|snap, _| views::schemas(snap)),
        },
        Command::Stats => ctx.show(|snap, _| views::stats(snap)),
        Command::Generate(a) => generate(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
    }
}

fn summary_json(s: &IngestSummary) -> serde_json::Value {
    json!({
        "recorded_block_height": s.recorded_block_height,
        "schema_items": s.schema.items,
    })
}

/// Stops `stop` on SIGINT or SIGTERM.
fn stop_on_signal(stop: &StopSignal) -> Outcome {
    let stop = stop.clone();
    ctrlc::set_handler(move || stop.trigger()).map_err(|e| Failure::Data(format!("cannot install signal handler: {e}")))
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Outcome {
    let db = ctx.db()?;
    let source_cfg = ctx.source(a.source.as_deref(), a.follow)?;
    let source = SourceRegistry::with_builtins()
        .create(&source_cfg)
        .map_err(|e| Failure::User(e.to_string()))?;
    let opts = ctx.config.ingest_options();
    let summary = if source_cfg.follow {
        let stop = StopSignal::new();
        stop_on_signal(&stop)?;
        let ingestor = Ingestor::start(db, source, opts).map_err(Failure::data)?;
        let polled = ingestor.run_polling(&stop);
        let finished = ingestor.finish().map_err(Failure::data)?;
        polled.map_err(Failure::data)?;
        finished
    } else {
        ingest_all(db, source, opts).map_err(Failure::data)?
    };
    ctx.print_value(summary_json(&summary));
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Outcome {
    let db = ctx.db()?.to_path_buf();
    let mut api = ApiConfig::from_config(&ctx.config, &db);
    if let Some(listen) = a.listen {
        api.listen_address = listen;
    }
    api.validate().map_err(|e| Failure::User(e.to_string()))?;

    let stop = StopSignal::new();
    stop_on_signal(&stop)?;
    let mut ingest_thread = None;
    let mut probe = None;
    if a.ingest {
        let source_cfg = ctx.source(a.source.as_deref(), true)?;
        let source = SourceRegistry::with_builtins()
            .create(&source_cfg)
            .map_err(|e| Failure::User(e.to_string()))?;
        let ingestor = Ingestor::start(&db, source, ctx.config.ingest_options()).map_err(Failure::data)?;
        probe = Some(SyncProbe {
            state: ingestor.sync_state(),
            queue: ingestor.queue_gauge(),
        });
        let stop = stop.clone();
        let handle = std::thread::Builder::new()
            .name("ingest".into())
            .spawn(move || {
                let polled = ingestor.run_polling(&stop);
                // A fatal sync error takes the server down with it.
                stop.trigger();
                let finished = ingestor.finish().map_err(|e| e.to_string())?;
                polled.map_err(|e| e.to_string())?;
                Ok::<_, String>(finished)
            })
            .map_err(|e| Failure::Data(format!("cannot spawn ingest thread: {e}")))?;
        ingest_thread = Some(handle);
    }

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Data(format!("cannot start runtime: {e}")))?;
    let shutdown = {
        let stop = stop.clone();
        async move {
            let _ = tokio::task::spawn_blocking(move || {
                let _ = stop.receiver().recv();
            })
            .await;
        }
    };
    let served = runtime.block_on(refiner_api::serve(api, probe, shutdown));
    stop.trigger();
    let ingested = ingest_thread.map(|h| h.join().unwrap_or_else(|_| Err("ingest thread panicked".into())));
    served.map_err(|e| match e {
        refiner_api::ApiError::InvalidConfig(_) | refiner_api::ApiError::BindFailure { .. } => Failure::User(e.to_string()),
        other => Failure::data(other),
    })?;
    if let Some(result) = ingested {
        let summary = result.map_err(Failure::Data)?;
        log::info!("ingestion stopped at block {}", summary.recorded_block_height);
    }
    Ok(())
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Outcome {
    let mut cfg = match &a.gen_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::User(format!("cannot read {}: {e}", path.display())))?;
            GenConfig::from_toml(&text).map_err(|e| Failure::User(e.to_string()))?
        }
        None => GenConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(blocks) = a.blocks {
        cfg.block_count = blocks;
    }
    if let Some(n) = a.txs_per_block {
        cfg.txs_per_block = TxsPerBlock::Fixed(n);
    }
    let (blocks, txs) = write_ledger(cfg, &a.out).map_err(|e| match e {
        refiner_core::gen::GenError::InvalidConfig(_) => Failure::User(e.to_string()),
        other => Failure::data(other),
    })?;
    ctx.print_value(json!({ "path": a.out, "blocks": blocks, "transactions": txs }));
    Ok(())
}

fn bench(ctx: &Ctx, a: BenchArgs) -> Outcome {
    let cfg = GenConfig {
        seed: a.seed,
        block_count: a.blocks,
        txs_per_block: TxsPerBlock::Fixed(a.txs_per_block),
        ..GenConfig::default()
    };
    let temp;
    let dir = match &a.dir {
        Some(d) => {
            if d.exists() && std::fs::read_dir(d).map_err(Failure::data)?.next().is_some() {
                return Err(Failure::User(format!("bench directory {} is not empty", d.display())));
            }
            d.clone()
        }
        None => {
            temp = tempfile::tempdir().map_err(Failure::data)?;
            temp.path().to_path_buf()
        }
    };
    let report = run_bench(&cfg, &a.checkpoints, &dir).map_err(|e| match e {
        refiner_core::bench::BenchError::CheckpointUnreachable { .. } => Failure::User(e.to_string()),
        other => Failure::data(other),
    })?;
    match ctx.format {
        Format::Json => println!("{}", serde_json::to_string(&report).expect("report serializes")),
        Format::Table => print!("{}", report.to_csv()),
    }
    let mut checkpoints = a.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    for pipeline in [PARSER_PIPELINE, SCHEMA_PIPELINE] {
        let ratios: Vec<String> = checkpoints
            .windows(2)
            .filter_map(|w| report.ratio(pipeline, w[0], w[1]).map(|r| format!("{}->{}: {r:.2}", w[0], w[1])))
            .collect();
        let r2 = report.r_squared(pipeline).map_or("n/a".to_string(), |r| format!("{r:.4}"));
        eprintln!("{pipeline}: r^2 {r2}; ratios {}", ratios.join(", "));
    }
    eprintln!("pipelines overlapped: {}", report.windows_overlap());
    Ok(())
}
