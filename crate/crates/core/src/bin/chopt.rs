use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{Context, Result};
use chopt::api::{router, spawn_ticker, ErrorBody};
use chopt::engine::Engine;
use chopt::ids::SessionId;
use chopt::master::ClusterConfig;
use chopt::orchestrator::Session;
use chopt::simcluster::DemandTrace;
use chopt::space::{parse_config, ConfigError};
use chopt::store::Store;
use chopt::tuners::hyperband_schedule;
use clap::{Parser, Subcommand, ValueEnum};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NOT_FOUND: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

#[derive(Parser)]
#[command(name = "chopt", version, about = "Hyperparameter optimization sessions on a shared GPU cluster")]
struct Cli {
    /// Base URL of a running `chopt serve`.
    #[arg(long, global = true, env = "CHOPT_URL", default_value = "http://127.0.0.1:7878")]
    url: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl Format {
    fn as_str(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service with a simulated cluster.
    Serve {
        #[arg(long, env = "CHOPT_ADDR", default_value = "127.0.0.1:7878")]
        addr: SocketAddr,
        /// Persist sessions under this directory; in memory when absent.
        #[arg(long, env = "CHOPT_DATA_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        capacity: u32,
        /// GPUs kept free for other users; 5% of capacity by default.
        #[arg(long)]
        headroom: Option<u32>,
        #[arg(long, default_value_t = 3)]
        agents: u32,
        /// CSV of `tick,gpus` rows describing other users' demand.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Wall-clock milliseconds per simulated tick.
        #[arg(long, default_value_t = 50)]
        tick_ms: u64,
    },
    /// Submit a configuration file; prints the new session id.
    Submit { config: PathBuf },
    /// List sessions, or show one.
    Status { id: Option<String> },
    /// Stop a session.
    Stop { id: String },
    /// Best trials of a session.
    Top {
        id: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
    },
    /// Export trials of one or more sessions.
    Export {
        #[arg(required = true)]
        ids: Vec<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Start a new session derived from an existing one.
    Rerun {
        id: String,
        /// JSON rerun request; an empty request clones the base session.
        request: Option<PathBuf>,
    },
    /// Run a configuration alone on a fixed GPU grant, without a server.
    Simulate {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        grant: u32,
        #[arg(long, default_value_t = 1_000_000)]
        max_ticks: u64,
        /// Write the event log here as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Check a configuration file.
    Validate { config: PathBuf },
    /// Print the Hyperband bracket table.
    Schedule {
        #[arg(short = 'r', long)]
        resource: u64,
        #[arg(long, default_value_t = 3)]
        eta: u64,
    },
}

/// Failure with a specific process exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

fn config_error(path: &std::path::Path, e: ConfigError) -> anyhow::Error {
    exit(EXIT_VALIDATION, format!("{}: {e}", path.display()))
}

struct Remote {
    base: String,
    client: Client,
}

impl Remote {
    fn new(url: &str) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .context("building HTTP client")?;
        Ok(Remote {
            base: url.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Response> {
        let resp = req
            .send()
            .map_err(|e| exit(EXIT_TRANSPORT, format!("cannot reach {}: {e}", self.base)))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().unwrap_or_default();
        let message = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => match b.field {
                Some(f) => format!("{}: `{f}`: {}", b.code, b.message),
                None => format!("{}: {}", b.code, b.message),
            },
            Err(_) => format!("HTTP {status}: {text}"),
        };
        let code = match status {
            StatusCode::NOT_FOUND => EXIT_NOT_FOUND,
            StatusCode::BAD_REQUEST | StatusCode::UNPROCESSABLE_ENTITY => EXIT_VALIDATION,
            _ => 1,
        };
        Err(exit(code, message))
    }

    fn get(&self, path: &str) -> Result<Response> {
        self.send(self.client.get(format!("{}{path}", self.base)))
    }

    fn post(&self, path: &str, body: Vec<u8>) -> Result<Response> {
        self.send(
            self.client
                .post(format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .body(body),
        )
    }
}

fn print_json(resp: Response) -> Result<()> {
    let v: serde_json::Value = resp.json().context("decoding response")?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn serve(
    addr: SocketAddr,
    data_dir: Option<PathBuf>,
    cluster: ClusterConfig,
    trace: Option<PathBuf>,
    tick_ms: u64,
) -> Result<()> {
    let store = match data_dir {
        Some(dir) => Store::open(&dir).with_context(|| format!("opening store at {}", dir.display()))?,
        None => Store::in_memory(),
    };
    let trace = match trace {
        Some(path) => DemandTrace::from_csv(fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?)
            .with_context(|| format!("reading trace {}", path.display()))?,
        None => DemandTrace::constant(0),
    };
    let engine = Arc::new(Mutex::new(Engine::new(cluster, trace, store)?));
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        spawn_ticker(engine.clone(), Duration::from_millis(tick_ms.max(1)));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(engine)).await.context("serving HTTP")
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve {
            addr,
            data_dir,
            capacity,
            headroom,
            agents,
            trace,
            tick_ms,
        } => {
            let mut cluster = ClusterConfig::new(capacity);
            cluster.headroom = headroom;
            cluster.agents = agents;
            serve(addr, data_dir, cluster, trace, tick_ms)
        }
        Command::Validate { config } => {
            let c = parse_config(&read(&config)?).map_err(|e| config_error(&config, e))?;
            println!(
                "ok: {} parameter(s), tuner {}, measure {} ({})",
                c.space.params().len(),
                c.tune.name(),
                c.measure,
                c.order.as_str()
            );
            Ok(())
        }
        Command::Schedule { resource, eta } => {
            if eta < 2 || resource == 0 {
                return Err(exit(EXIT_VALIDATION, "need resource >= 1 and eta >= 2"));
            }
            println!("s\tround\tn\tr");
            for b in hyperband_schedule(resource, eta) {
                for (i, r) in b.rounds.iter().enumerate() {
                    println!("{}\t{i}\t{}\t{}", b.s, r.n, r.r);
                }
            }
            Ok(())
        }
        Command::Simulate {
            config,
            grant,
            max_ticks,
            events,
        } => {
            let c = parse_config(&read(&config)?).map_err(|e| config_error(&config, e))?;
            let mut session = Session::new(SessionId(1), c).map_err(|e| config_error(&config, e))?;
            let log = session.run_with_grant(grant, max_ticks)?;
            if let Some(path) = events {
                let text: String = log.iter().map(|e| e.to_json_line() + "\n").collect();
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            let snap = session.snapshot();
            let out = serde_json::json!({
                "status": snap.status,
                "reason": snap.reason,
                "trials_created": snap.trials_created,
                "events": log.len(),
                "best": snap.best,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::Submit { config } => {
            let body = read(&config)?;
            parse_config(&body).map_err(|e| config_error(&config, e))?;
            let v: serde_json::Value = Remote::new(&cli.url)?.post("/sessions", body)?.json()?;
            println!("{}", v["id"].as_str().unwrap_or_default());
            Ok(())
        }
        Command::Status { id } => {
            let remote = Remote::new(&cli.url)?;
            match id {
                Some(id) => print_json(remote.get(&format!("/sessions/{id}"))?),
                None => print_json(remote.get("/sessions")?),
            }
        }
        Command::Stop { id } => print_json(Remote::new(&cli.url)?.post(&format!("/sessions/{id}/stop"), Vec::new())?),
        Command::Top { id, k } => print_json(Remote::new(&cli.url)?.get(&format!("/sessions/{id}/top?k={k}"))?),
        Command::Export { ids, format } => {
            let remote = Remote::new(&cli.url)?;
            let path = match ids.as_slice() {
                [one] => format!("/sessions/{one}/export?format={}", format.as_str()),
                many => format!("/export?sessions={}&format={}", many.join(","), format.as_str()),
            };
            let bytes = remote.get(&path)?.bytes().context("reading export")?;
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
        Command::Rerun { id, request } => {
            let body = match request {
                Some(path) => read(&path)?,
                None => Vec::new(),
            };
            let v: serde_json::Value = Remote::new(&cli.url)?
                .post(&format!("/sessions/{id}/rerun"), body)?
                .json()?;
            println!("{}", v["id"].as_str().unwrap_or_default());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.code);
            ExitCode::from(code)
        }
    }
}
