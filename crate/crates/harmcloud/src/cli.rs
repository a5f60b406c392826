//! Command-line front end. Every command prints its result on stdout and
//! failures on stderr; the exit status is derived from the error code.

use std::fs;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use harmcloud_core::collector::{collect_information, RecordedProvider, RecordingProxy};
use harmcloud_core::error::exit_code_for;
use harmcloud_core::fixtures::FixtureSet;
use harmcloud_core::harm::{canonicalize_floats, ExportFormat};
use harmcloud_core::metrics::Metric;
use harmcloud_core::mtd::MtdAction;
use harmcloud_core::orchestrator::timing_ledger;
use harmcloud_core::provider::{CloudApi, ScannerApi};
use harmcloud_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::client::HttpProvider;
use crate::engine::Engine;
use crate::service::{parse_action_request, pool_from};

#[derive(Debug, Parser)]
#[command(name = "harmcloud", about = "HARM-based cloud security analysis and MTD deployment")]
pub struct Cli {
    /// Fixture directory; the bundled running example when absent.
    #[arg(long, global = true, env = "HARMCLOUD_FIXTURES")]
    pub fixtures: Option<PathBuf>,
    /// Snapshot store directory. Without it every run starts from the fixtures.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Output::Text)]
    pub output: Output,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect inventory and vulnerabilities from the provider into a new snapshot.
    Scan(ScanArgs),
    /// HARM operations.
    Harm {
        #[command(subcommand)]
        command: HarmCommand,
    },
    /// Evaluate a metric pool on the current snapshot.
    Metrics(MetricArgs),
    /// List attack paths.
    Paths(PathArgs),
    /// Moving target defense.
    Mtd {
        #[command(subcommand)]
        command: MtdCommand,
    },
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Provider simulator front end.
    Provider {
        #[command(subcommand)]
        command: ProviderCommand,
    },
}

#[derive(Debug, Args)]
pub struct ProviderSource {
    /// Base URL of a provider HTTP front end instead of the in-process simulator.
    #[arg(long)]
    pub provider: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub source: ProviderSource,
    /// Replay recorded responses from this directory.
    #[arg(long, conflicts_with = "provider")]
    pub recorded: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum HarmCommand {
    Export {
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Historical snapshot version.
        #[arg(long)]
        snapshot: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Dot,
}

#[derive(Debug, Args)]
pub struct CapArgs {
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub path_cap: Option<usize>,
    /// Report truncation instead of failing with PATH_EXPLOSION.
    #[arg(long)]
    pub lossy: bool,
    #[arg(long)]
    pub snapshot: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    /// Comma-separated metrics: risk, cost, prob, mtta.
    #[arg(long)]
    pub pool: Option<String>,
    /// Include per-path breakdowns.
    #[arg(long)]
    pub paths: bool,
    #[command(flatten)]
    pub caps: CapArgs,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[command(flatten)]
    pub caps: CapArgs,
}

#[derive(Debug, Subcommand)]
pub enum MtdCommand {
    /// Candidate actions ranked by an objective metric.
    List {
        #[arg(long, default_value = "risk")]
        objective: String,
        #[arg(long)]
        pool: Option<String>,
    },
    /// Metric deltas of one action without changing anything.
    Whatif {
        /// Action JSON file, or `-` for stdin.
        #[arg(long)]
        action: PathBuf,
        #[arg(long)]
        pool: Option<String>,
    },
    /// Deploy one action through the orchestrator.
    Apply {
        #[arg(long)]
        action: PathBuf,
        #[command(flatten)]
        source: ProviderSource,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[command(flatten)]
    pub source: ProviderSource,
}

#[derive(Debug, Subcommand)]
pub enum ProviderCommand {
    /// Serve the simulator over HTTP.
    Serve {
        #[arg(long, default_value_t = 8081)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Run one collection and save every response for later replay.
    Record {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        source: ProviderSource,
    },
}

/// Stdout writer that ends the process quietly when the reader goes away.
fn emit(text: std::fmt::Arguments<'_>, newline: bool) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let res = out.write_fmt(text).and_then(|_| if newline { out.write_all(b"\n") } else { Ok(()) });
    if let Err(e) = res.and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("stdout: {e}");
    }
}

macro_rules! out {
    () => { emit(format_args!(""), true) };
    (raw $($t:tt)*) => { emit(format_args!($($t)*), false) };
    ($($t:tt)*) => { emit(format_args!($($t)*), true) };
}

/// A failure with the partial deployment record, if any.
pub struct Failure {
    pub error: Error,
    pub record: Option<Value>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self { error, record: None }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn load_fixtures(dir: Option<&Path>) -> Result<FixtureSet, Error> {
    match dir {
        Some(d) => Ok(FixtureSet::load(d)?),
        None => Ok(FixtureSet::bundled()),
    }
}

fn engine(cli: &Cli, fx: &FixtureSet, source: Option<&ProviderSource>) -> Result<Engine, Error> {
    match source.and_then(|s| s.provider.as_deref()) {
        Some(url) => {
            let remote = Arc::new(HttpProvider::new(url)?);
            Engine::with_provider(fx, remote.clone(), remote, cli.store.as_deref())
        }
        None => Engine::from_fixtures(fx, cli.store.as_deref()),
    }
}

fn print_json<T: Serialize>(value: &T) {
    let mut v = serde_json::to_value(value).expect("output serializes");
    canonicalize_floats(&mut v);
    out!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn read_action(path: &Path) -> Result<(MtdAction, Option<String>), Error> {
    let mut doc = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut doc)?;
    } else {
        doc = fs::read_to_string(path).map_err(|e| Error::MalformedAction(format!("{}: {e}", path.display())))?;
    }
    let wrapped = serde_json::from_str::<Value>(&doc)
        .map(|v| v.get("action").is_some())
        .unwrap_or(false);
    if !wrapped {
        let a = serde_json::from_str::<MtdAction>(&doc).map_err(|e| Error::MalformedAction(e.to_string()))?;
        return Ok((a, None));
    }
    let req = parse_action_request(doc.as_bytes())?;
    let pool = req.pool.map(|p| match p {
        crate::service::PoolSpec::List(s) => s,
        crate::service::PoolSpec::Names(v) => v.join(","),
    });
    Ok((req.action, pool))
}

fn fmt_num(x: f64) -> String {
    format!("{:?}", harmcloud_core::num::round_sig(x, 6))
}

pub fn run(cli: Cli) -> Outcome {
    let fx = load_fixtures(cli.fixtures.as_deref())?;
    let json_out = cli.output == Output::Json;
    match &cli.command {
        Command::Scan(args) => {
            let eng = match &args.recorded {
                Some(dir) => {
                    let rec = Arc::new(RecordedProvider::new(dir));
                    Engine::with_provider(&fx, rec.clone(), rec, cli.store.as_deref())?
                }
                None => engine(&cli, &fx, Some(&args.source))?,
            };
            let out = eng.rescan()?;
            let ledger = timing_ledger(&out.calls);
            let snap = eng.snapshot(None)?;
            if json_out {
                print_json(&json!({
                    "version": out.version,
                    "vms": snap.state.inventory.vms.len(),
                    "hosts": snap.state.inventory.hosts.len(),
                    "calls": out.calls,
                    "ledger": ledger,
                }));
            } else {
                out!("snapshot {}: {} VMs on {} hosts", out.version, snap.state.inventory.vms.len(), snap.state.inventory.hosts.len());
                for c in &out.calls {
                    out!("  {:<22} {:>6} ms", c.kind, c.rt_ms);
                }
                out!("cloud informative RT {} ms", ledger.cloud_informative_rt_ms);
                out!("scanner informative RT {} ms", ledger.scanner_informative_rt_ms);
            }
        }
        Command::Harm {
            command: HarmCommand::Export { format, snapshot },
        } => {
            let eng = engine(&cli, &fx, None)?;
            let (_, harm) = eng.harm(*snapshot)?;
            let f = match format {
                Format::Json => ExportFormat::CanonicalJson,
                Format::Dot => ExportFormat::Dot,
            };
            let doc = harm.export(f);
            out!(raw "{doc}");
            if !doc.ends_with('\n') {
                out!();
            }
        }
        Command::Metrics(args) => {
            let eng = engine(&cli, &fx, None)?;
            let c = &args.caps;
            let pool = pool_from(args.pool.as_deref(), c.max_depth, c.path_cap, !c.lossy, args.paths)?;
            let (version, report) = eng.metrics(&pool, c.snapshot)?;
            if json_out {
                print_json(&json!({ "version": version, "report": report }));
            } else {
                for (m, v) in &report.values {
                    out!("{m} {}", fmt_num(*v));
                }
                out!("paths {}{}", report.path_count, if report.truncated { " (truncated)" } else { "" });
                for p in report.per_path.iter().flatten() {
                    out!("  {}  p={} impact={}", p.vms.join(" -> "), fmt_num(p.probability), fmt_num(p.impact_sum));
                }
            }
        }
        Command::Paths(args) => {
            let eng = engine(&cli, &fx, None)?;
            let c = &args.caps;
            let pool = pool_from(None, c.max_depth, c.path_cap, !c.lossy, false)?;
            let (version, set) = eng.paths(pool.caps, c.snapshot)?;
            if json_out {
                print_json(&json!({ "version": version, "truncated": set.truncated, "paths": set.paths }));
            } else {
                for p in &set.paths {
                    out!(
                        "{}  p={} cost={} mtta={}",
                        p.vms.join(" -> "),
                        fmt_num(p.probability),
                        fmt_num(p.cost),
                        fmt_num(p.mtta)
                    );
                }
                out!("{} paths{}", set.paths.len(), if set.truncated { " (truncated)" } else { "" });
            }
        }
        Command::Mtd { command } => mtd(&cli, &fx, command, json_out)?,
        Command::Serve(args) => {
            let eng = Arc::new(engine(&cli, &fx, Some(&args.source))?);
            let addr = socket(&args.bind, args.port)?;
            runtime()?.block_on(crate::service::serve(eng, addr))?;
        }
        Command::Provider { command } => match command {
            ProviderCommand::Serve { port, bind } => {
                let sim = Arc::new(fx.provider_sim());
                let addr = socket(bind, *port)?;
                runtime()?.block_on(crate::provider_http::serve(sim, addr))?;
            }
            ProviderCommand::Record { out, source } => {
                fs::create_dir_all(out)?;
                let (cloud, scanner): (Arc<dyn CloudApi>, Arc<dyn ScannerApi>) = match &source.provider {
                    Some(url) => {
                        let p = Arc::new(HttpProvider::new(url).map_err(Error::from)?);
                        (p.clone(), p)
                    }
                    None => {
                        let p = Arc::new(fx.provider_sim());
                        (p.clone(), p)
                    }
                };
                let proxy = RecordingProxy::new(cloud.as_ref(), scanner.as_ref(), out);
                let raw = collect_information(
                    &proxy,
                    &fx.provider.credentials,
                    &proxy,
                    &fx.provider.scanner_credentials,
                    Some(&fx.catalog),
                    &fx.inventory.constraints,
                )
                .map_err(Error::from)?;
                proxy.list_images(&raw.session.token.value).map_err(Error::from)?;
                if let Some(f) = proxy.failures().first() {
                    return Err(Error::Io(f.clone()).into());
                }
                if json_out {
                    print_json(&json!({ "dir": out, "calls": raw.raw_call_log }));
                } else {
                    out!("recorded {} calls into {}", raw.raw_call_log.len() + 1, out.display());
                }
            }
        },
    }
    Ok(())
}

fn mtd(cli: &Cli, fx: &FixtureSet, command: &MtdCommand, json_out: bool) -> Outcome {
    match command {
        MtdCommand::List { objective, pool } => {
            let eng = engine(cli, fx, None)?;
            let objective: Metric = objective.parse().map_err(Error::from)?;
            let pool = pool_from(pool.as_deref(), None, None, false, false)?;
            let (version, ranked) = eng.actions(&pool, objective)?;
            if json_out {
                print_json(&json!({ "version": version, "objective": objective, "actions": ranked }));
            } else {
                for (i, r) in ranked.iter().enumerate() {
                    out!("{:>3}. {:<40} {objective} {:+}", i + 1, r.action.to_string(), fmt_num(r.improvement));
                }
            }
        }
        MtdCommand::Whatif { action, pool } => {
            let (a, file_pool) = read_action(action)?;
            let names = pool.clone().or(file_pool);
            let pool = pool_from(names.as_deref(), None, None, true, false)?;
            let eng = engine(cli, fx, None)?;
            let (version, delta) = eng.whatif(&a, &pool)?;
            if json_out {
                print_json(&json!({ "version": version, "action": a, "delta": delta }));
            } else {
                out!("{a}");
                for (m, before) in &delta.before.values {
                    let after = delta.after.values[m];
                    out!("  {m:<20} {} -> {} ({})", fmt_num(*before), fmt_num(after), fmt_num(delta.change[m]));
                }
                out!("  paths {} -> {}", delta.before.path_count, delta.after.path_count);
            }
        }
        MtdCommand::Apply { action, source } => {
            let (a, _) = read_action(action)?;
            let eng = engine(cli, fx, Some(source))?;
            let record = eng.apply(&a, None).map_err(|f| Failure {
                error: f.error,
                record: f.record.map(|r| serde_json::to_value(r).expect("record serializes")),
            })?;
            if json_out {
                print_json(&json!({ "version": eng.version(), "record": record }));
            } else {
                out!("{a}: {:?}, version {}", record.outcome, record.inventory_version);
                for c in record.calls.iter() {
                    let ot = c.ot_ms.map(|o| format!(" ot {o} ms")).unwrap_or_default();
                    out!("  {:<16} rt {} ms{ot}", c.kind, c.rt_ms);
                }
                out!("  {} monitoring polls", record.monitoring.len());
            }
        }
    }
    Ok(())
}

fn socket(bind: &str, port: u16) -> Result<SocketAddr, Error> {
    format!("{bind}:{port}")
        .parse()
        .map_err(|e| Error::Io(format!("bad listen address {bind}:{port}: {e}")))
}

fn runtime() -> Result<tokio::runtime::Runtime, Error> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Print a failure on stderr and return the process exit code.
pub fn report(failure: &Failure, output: Output) -> i32 {
    let code = failure.error.code();
    match output {
        Output::Json => {
            let mut body = json!({ "error": { "code": code, "message": failure.error.to_string() } });
            if let Some(r) = &failure.record {
                body["record"] = r.clone();
            }
            eprintln!("{}", serde_json::to_string(&body).expect("json"));
        }
        Output::Text => eprintln!("error[{code}]: {}", failure.error),
    }
    exit_code_for(code)
}
