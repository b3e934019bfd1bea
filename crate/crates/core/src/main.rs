use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use wattflow::bench::{run_experiment, ExperimentConfig};
use wattflow::bridge::{run_simulator, HttpPublisher, SimulatorConfig};
use wattflow::gateway::{self, GatewayConfig};
use wattflow::node::{self, Node, NodeConfig};

#[derive(Parser)]
#[command(name = "wattflow", version, about = "Hierarchical power-consumption monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a backend node: message log, configuration service, history API,
    /// ingestion endpoints and aggregator workers.
    Serve(ServeArgs),
    /// Run a node hosting a single aggregator worker.
    Aggregator(AggregatorArgs),
    /// Generate synthetic sensor load against a node.
    Simulate(SimulateArgs),
    /// Run the worker scalability experiment.
    Bench(BenchArgs),
    /// Run the API gateway that serves the dashboard.
    Gateway(GatewayArgs),
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory for the hierarchy and the history store (in memory if unset).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Message log directory (defaults to <data-dir>/log).
    #[arg(long, env = "WATTFLOW_LOG_DIR")]
    log_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    partitions: u32,
    #[arg(long, default_value_t = 3000)]
    session_timeout_ms: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    node: NodeArgs,
    /// Number of aggregator workers to run in this node.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct AggregatorArgs {
    #[command(flatten)]
    node: NodeArgs,
    #[arg(long)]
    instance_id: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    bridges: u32,
    /// Sensors per bridge.
    #[arg(long, default_value_t = 1)]
    sensors: u32,
    #[arg(long, default_value_t = 1000)]
    period_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    amplitude_w: Option<f64>,
    /// Base URL of the node receiving the records.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    target: String,
    /// Stop after this many seconds instead of running until interrupted.
    #[arg(long)]
    duration_sec: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// CSV output; the summary is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GatewayArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<SocketAddr>,
    #[arg(long)]
    static_root: Option<PathBuf>,
    /// service=addr[,addr...], repeatable.
    #[arg(long)]
    upstream: Vec<String>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match Cli::parse().command {
        Command::Serve(a) => {
            let workers = (0..a.workers).map(|i| format!("aggregator-{i}")).collect();
            run_node(a.node, workers)
        }
        Command::Aggregator(a) => run_node(a.node, vec![a.instance_id]),
        Command::Simulate(a) => simulate(a),
        Command::Bench(a) => bench(a),
        Command::Gateway(a) => run_gateway(a),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
}

fn run_node(args: NodeArgs, workers: Vec<String>) -> Result<()> {
    let node = Arc::new(
        Node::start(NodeConfig {
            data_dir: args.data_dir,
            log_dir: args.log_dir,
            partitions: args.partitions,
            workers,
            session_timeout: Duration::from_millis(args.session_timeout_ms),
            ..NodeConfig::default()
        })
        .context("starting node")?,
    );
    let router = node.router();
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        node::serve(listener, router, ctrl_c()).await?;
        anyhow::Ok(())
    })?;
    node.shutdown().context("stopping node")?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = SimulatorConfig::new(args.bridges, args.sensors, args.period_ms, args.seed);
    if let Some(a) = args.amplitude_w {
        config.amplitude_w = a;
    }
    tracing::info!(target = %args.target, records_per_sec = config.offered_load(), "starting simulator");
    let handle = run_simulator(config, Arc::new(HttpPublisher::new(&args.target)))?;
    match args.duration_sec {
        Some(secs) => std::thread::sleep(Duration::from_secs_f64(secs)),
        None => runtime()?.block_on(ctrl_c()),
    }
    let failed = handle.failed();
    let published = handle.stop();
    tracing::info!(published, failed, "simulator stopped");
    if published == 0 && failed > 0 {
        bail!("no record reached {}", args.target);
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let bytes = std::fs::read(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config: ExperimentConfig = serde_json::from_slice(&bytes).context("parsing experiment configuration")?;
    let report = run_experiment(&config)?;
    let summary = report.write(&args.out)?;
    for r in &report.results {
        println!(
            "workers={:<3} median={:>10.1} rec/s  iqr={:>8.1}  offered={:.0}",
            r.workers, r.median, r.iqr, report.offered_load
        );
    }
    println!("wrote {} and {}", args.out.display(), summary.display());
    Ok(())
}

fn run_gateway(args: GatewayArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => GatewayConfig::from_json(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)?,
        None => GatewayConfig::default(),
    };
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    if args.static_root.is_some() {
        config.static_root = args.static_root;
    }
    for spec in &args.upstream {
        config.add_upstream_spec(spec)?;
    }
    let router = gateway::router(&config)?;
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        node::serve(listener, router, ctrl_c()).await?;
        anyhow::Ok(())
    })
}
