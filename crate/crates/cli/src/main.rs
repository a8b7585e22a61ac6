use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ownlink_core::crypto::Keypair;
use ownlink_core::protocol::derive_keypair;
use ownlink_core::trace::Trace;
use ownlink_gateway::config::{self, Overrides};
use ownlink_sim::adversary::{endpoints, linkage_attack, Strategy};
use ownlink_sim::scenario::{run, RunReport, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "ownlink", version, about = "Owner-controlled identity links over custodian-held records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prints a key pair as JSON. Deterministic when --seed and --name are given.
    Keygen {
        #[arg(long, requires = "name")]
        seed: Option<u64>,
        #[arg(long, requires = "seed")]
        name: Option<String>,
    },
    /// Runs the HTTP gateway.
    Node {
        #[command(subcommand)]
        command: NodeCommand,
    },
    /// Runs scripted scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Evaluates linkage attacks against a recorded trace.
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },
    /// Runs a scenario and prints one of its final artifacts.
    Export {
        what: ExportKind,
        scenario: PathBuf,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    Start(StartArgs),
}

#[derive(Args)]
struct StartArgs {
    /// JSON config file: {custodians, chaff_ratio, k_default, seed, ports, bind}.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    custodians: Option<Vec<String>>,
    #[arg(long)]
    chaff_ratio: Option<f64>,
    #[arg(long)]
    k_default: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    Run {
        file: PathBuf,
        /// Trace output path. Defaults to `<scenario stem>.trace.ndjson`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AttackCommand {
    Eval {
        trace: PathBuf,
        /// One strategy; all of them when omitted.
        #[arg(long)]
        strategy: Option<String>,
        /// Store endpoint to attack; every endpoint with tumble batches when omitted.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, value_enum, default_value_t = Directory::Both)]
        directory: Directory,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Directory {
    Include,
    Exclude,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    /// Identity store and record store snapshots.
    Store,
    /// The ledger log as NDJSON.
    Ledger,
    /// The full event trace as NDJSON.
    Trace,
}

/// Exit status and message for a failed command.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

const EXIT_FAILED: u8 = 1;
const EXIT_INPUT: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Keygen { seed, name } => keygen(seed, name),
        Command::Node { command: NodeCommand::Start(args) } => node_start(args),
        Command::Scenario { command: ScenarioCommand::Run { file, trace } } => scenario_run(&file, trace),
        Command::Attack { command: AttackCommand::Eval { trace, strategy, endpoint, directory, seed } } => {
            attack_eval(&trace, strategy.as_deref(), endpoint, directory, seed)
        }
        Command::Export { what, scenario } => export(what, &scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn keygen(seed: Option<u64>, name: Option<String>) -> Result<(), Failure> {
    let keypair = match (seed, name) {
        (Some(seed), Some(name)) => derive_keypair(seed, &name),
        _ => Keypair::from_secret(rand::random()),
    };
    let out = json!({
        "address": keypair.address(),
        "public_key": keypair.public_key(),
        "secret": hex::encode(keypair.secret_bytes()),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn node_start(args: StartArgs) -> Result<(), Failure> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let flags = Overrides {
        custodians: args.custodians,
        chaff_ratio: args.chaff_ratio,
        k_default: args.k_default,
        seed: args.seed,
        port: args.port,
        bind: args.bind,
    };
    let config = config::load(args.config.as_deref(), &|k| std::env::var(k).ok(), &flags)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("config: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
    rt.block_on(async {
        let listener = ownlink_gateway::bind(&config).await.map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        ownlink_gateway::serve(&config, listener, shutdown).await.map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))
    })
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    Scenario::parse(&text).map_err(|e| scenario_failure(path, e))
}

fn scenario_failure(path: &Path, e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Parse { line, column, message } => {
            Failure::new(EXIT_INPUT, format!("{}:{line}:{column}: {message}", path.display()))
        }
        ScenarioError::Invalid(m) => Failure::new(EXIT_INPUT, format!("{}: {m}", path.display())),
        e @ ScenarioError::Start(_) => Failure::new(EXIT_FAILED, format!("{}: {e}", path.display())),
    }
}

fn run_scenario(path: &Path) -> Result<RunReport, Failure> {
    let scenario = load_scenario(path)?;
    run(&scenario).map_err(|e| scenario_failure(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(EXIT_FAILED, format!("{}: {e}", path.display())))
}

fn scenario_run(file: &Path, trace: Option<PathBuf>) -> Result<(), Failure> {
    let report = run_scenario(file)?;
    let trace_path = trace.unwrap_or_else(|| {
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into());
        PathBuf::from(format!("{stem}.trace.ndjson"))
    });
    write(&trace_path, &report.trace.export_ndjson())?;
    let summary = json!({
        "scenario": report.scenario,
        "seed": report.seed,
        "passed": report.passed(),
        "trace": trace_path.display().to_string(),
        "events": report.trace.len(),
        "assertions": report.assertions,
        "audit": report.audit.checks.iter().map(|c| json!({
            "check": c.name,
            "passed": c.passed,
            "counterexamples": c.counterexamples.iter().map(|x| json!({"step": x.step, "detail": x.detail})).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILED, format!("{} failed: {}", report.scenario, report.failures().join("; "))))
    }
}

fn attack_eval(
    path: &Path,
    strategy: Option<&str>,
    endpoint: Option<String>,
    directory: Directory,
    seed: u64,
) -> Result<(), Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    let trace =
        Trace::parse_ndjson(&text).map_err(|(line, e)| Failure::new(EXIT_INPUT, format!("{}:{line}: {e}", path.display())))?;
    let strategies = match strategy {
        Some(s) => vec![Strategy::parse(s).ok_or_else(|| {
            let known: Vec<&str> = Strategy::ALL.iter().map(Strategy::as_str).collect();
            Failure::new(EXIT_INPUT, format!("unknown strategy {s:?}; expected one of {}", known.join(", ")))
        })?],
        None => Strategy::ALL.to_vec(),
    };
    let directories: &[bool] = match directory {
        Directory::Include => &[true],
        Directory::Exclude => &[false],
        Directory::Both => &[true, false],
    };
    let explicit = endpoint.is_some();
    let targets = match endpoint {
        Some(e) => vec![e],
        None => endpoints(&trace),
    };
    let mut reports = Vec::new();
    for ep in &targets {
        for &s in &strategies {
            for &d in directories {
                match linkage_attack(&trace, ep, s, d, seed) {
                    Ok(r) => {
                        let mut v = serde_json::to_value(&r).expect("json");
                        v["endpoint"] = Value::from(ep.as_str());
                        reports.push(v);
                    }
                    Err(e) if explicit => return Err(Failure::new(EXIT_FAILED, e.to_string())),
                    Err(_) => {}
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(Failure::new(EXIT_FAILED, "the trace contains no tumble batches"));
    }
    println!("{}", serde_json::to_string_pretty(&reports).expect("json"));
    Ok(())
}

fn export(what: ExportKind, path: &Path) -> Result<(), Failure> {
    let report = run_scenario(path)?;
    let x = &report.exports;
    match what {
        ExportKind::Ledger => print!("{}", x.ledger_ndjson),
        ExportKind::Trace => print!("{}", report.trace.export_ndjson()),
        ExportKind::Store => {
            let parse = |s: &str| serde_json::from_str::<Value>(s).expect("snapshots are JSON");
            let out = json!({
                "identity": x.stores.iter().map(|(k, v)| (k.clone(), parse(v))).collect::<serde_json::Map<_, _>>(),
                "records": x.records.iter().map(|s| parse(s)).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
        }
    }
    Ok(())
}
