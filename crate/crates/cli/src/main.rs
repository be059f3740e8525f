use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use conductor_core::controller::HttpBackendConfig;
use conductor_core::evaluation::{load_dataset, run_benchmark, BenchmarkOptions, ControllerPlanner, PassingCheck};
use conductor_core::service::{http, Attachment, BackendConfig, Service, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "conductor",
    version,
    about = "Plan, select, execute and respond with expert models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one request and print the response (or the full trace).
    Run(RunArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Score the controller's plans against a labelled dataset.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Scripted,
    Http,
}

#[derive(Args)]
struct Setup {
    /// TOML service configuration; relative paths inside it are taken from its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Reply script for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Chat-completion base URL for the http backend.
    #[arg(long, default_value = "https://api.openai.com/v1")]
    base_url: String,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    /// Model registry JSON (defaults to the packaged sample).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Expert stub fixtures JSON.
    #[arg(long)]
    stubs: Option<PathBuf>,
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

impl Setup {
    /// The effective configuration and the directory its paths are relative to.
    fn resolve(&self) -> Result<(ServiceConfig, PathBuf)> {
        let cwd = std::env::current_dir()?;
        let (mut config, base) = match &self.config {
            Some(path) => {
                let config = ServiceConfig::load(path)?;
                let dir = path
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                (config, cwd.join(dir))
            }
            None => (ServiceConfig::default(), cwd.clone()),
        };
        // Command-line paths are relative to the working directory.
        let abs = |p: &PathBuf| cwd.join(p);
        match self.backend {
            Some(BackendChoice::Scripted) => {
                config.backend = BackendConfig::Scripted {
                    script: self.script.as_ref().map(abs),
                }
            }
            Some(BackendChoice::Http) => {
                config.backend = BackendConfig::Http(HttpBackendConfig::new(&self.base_url, &self.model))
            }
            None => {
                if let Some(script) = &self.script {
                    config.backend = BackendConfig::Scripted {
                        script: Some(abs(script)),
                    };
                }
            }
        }
        if let Some(r) = &self.registry {
            config.registry = Some(abs(r));
        }
        if let Some(s) = &self.stubs {
            config.stub_fixtures = Some(abs(s));
        }
        if let Some(a) = &self.artifacts {
            config.artifacts_dir = abs(a);
        }
        Ok((config, base))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    setup: Setup,
    /// The user request.
    #[arg(long)]
    request: String,
    /// Files sent along with the request.
    #[arg(long = "attach")]
    attachments: Vec<PathBuf>,
    /// Print the whole workflow trace as JSON.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    setup: Setup,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8004)]
    port: u16,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    setup: Setup,
    /// JSONL dataset of {request, category, gold_tasks}.
    #[arg(long)]
    dataset: PathBuf,
    /// Number of planning demonstrations.
    #[arg(long)]
    demos: Option<usize>,
    /// Number of distinct task types the demonstrations may span.
    #[arg(long)]
    variety: Option<usize>,
    /// Also ask the controller to judge each plan.
    #[arg(long)]
    critic: bool,
    /// Also execute each plan against the stubs.
    #[arg(long)]
    passing: bool,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Output prefix; writes <prefix>.json and <prefix>.csv.
    #[arg(long, default_value = "report")]
    report: PathBuf,
}

async fn run(args: RunArgs) -> Result<()> {
    let (config, base) = args.setup.resolve()?;
    let service = Service::from_config(&config, &base)?;
    let session = service.create_session()?;
    let mut attachments = Vec::new();
    for path in &args.attachments {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .with_context(|| format!("{} has no file name", path.display()))?;
        attachments.push(Attachment {
            name: name.to_string(),
            data,
        });
    }
    let trace = service.handle_request(&session, &args.request, attachments).await?;
    if args.trace {
        println!("{}", serde_json::to_string_pretty(&trace)?);
        return Ok(());
    }
    for r in &trace.results {
        let state = if r.is_ok() {
            "ok".to_string()
        } else {
            format!("{:?}", r.status)
        };
        eprintln!("[{}] {} via {}: {}", r.task_id, r.task, r.model_id, state);
    }
    println!("{}", trace.response);
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<()> {
    let (config, base) = args.setup.resolve()?;
    let service = Arc::new(Service::from_config(&config, &base)?);
    let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
        .await
        .with_context(|| format!("binding {}:{}", args.host, args.port))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    http::serve(listener, service).await?;
    Ok(())
}

async fn bench(args: BenchArgs) -> Result<()> {
    let (mut config, base) = args.setup.resolve()?;
    config.controller.demos.count = args.demos.or(config.controller.demos.count);
    config.controller.demos.variety = args.variety.or(config.controller.demos.variety);
    let examples = load_dataset(&args.dataset)?;
    if examples.is_empty() {
        bail!("{} has no examples", args.dataset.display());
    }
    let service = Service::from_config(&config, &base)?;
    let engine = service.engine();
    let options = BenchmarkOptions {
        demos: config.controller.demos,
        concurrency: args.concurrency,
        critic: args.critic.then(|| engine.controller.clone()),
        passing: args.passing.then(|| PassingCheck {
            executor: engine.executor.clone(),
            selection: engine.selection,
            artifacts: base.join(&config.artifacts_dir).join("bench"),
        }),
    };
    let report = run_benchmark(&examples, &ControllerPlanner::new(engine.controller.clone()), &options).await?;

    let json = args.report.with_extension("json");
    let csv = args.report.with_extension("csv");
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&json, report.to_json()).with_context(|| format!("writing {}", json.display()))?;
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{}", report.to_csv());
    eprintln!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => run(args).await,
        Command::Serve(args) => serve(args).await,
        Command::Bench(args) => bench(args).await,
    }
}
