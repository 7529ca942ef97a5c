use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use picl::config::ExperimentConfig;
use picl::mock::{MockConfig, MockModel};
use picl::pipeline::{Pipeline, RunOptions, Stage};
use picl::protocol::conformance::run_conformance;
use picl::protocol::{open_transport, serve_lines, serve_tcp};

/// Forecast physical trajectories with a language model and probe its
/// residual stream for energy features.
#[derive(Parser)]
#[command(name = "picl", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, short, global = true, default_value = "picl.toml")]
    config: PathBuf,
    /// Replace the config's base seed; part of the config hash.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, short, global = true, default_value_t = 0)]
    jobs: usize,
    /// Rerun stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories.
    Simulate,
    /// Serialize history windows into digit prompts.
    Tokenize,
    /// Capture residual streams from the model.
    Capture,
    /// Serve the mock model over TCP or stdio.
    MockServe(ServeArgs),
    /// Train one SAE per context length and block.
    TrainSae,
    /// Correlate SAE codes with energy quantities.
    Correlate,
    /// Synchronization strength of energy-selected units.
    Sync,
    /// Ablate energy-correlated units during generation.
    Intervene,
    /// Forecast error against context length.
    Evaluate,
    /// Write the report tables.
    Report,
    /// Run several stages in dependency order.
    Run(RunArgs),
    /// Check a model endpoint against the wire protocol.
    Conformance(ConformanceArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address, e.g. 127.0.0.1:7878.
    #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
    tcp: Option<String>,
    /// Serve one session on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Stop after this many TCP connections.
    #[arg(long)]
    max_connections: Option<usize>,
    /// Mock settings as a standalone TOML file instead of the experiment
    /// config's `[mock]` table.
    #[arg(long)]
    mock_config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Stages to run; all when omitted.
    #[arg(value_parser = parse_stage)]
    stages: Vec<Stage>,
    /// Print what would run and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ConformanceArgs {
    /// `tcp://host:port`, `stdio:<command>`, `mock` or `mock:<file>`.
    endpoint: String,
    /// Directory for tensor files; a temporary one when omitted.
    #[arg(long)]
    scratch: Option<PathBuf>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: picl::Error| e.to_string())
}

fn pipeline(global: &Global) -> Result<Pipeline> {
    let options = RunOptions {
        jobs: global.jobs,
        force: global.force,
        seed_override: global.seed_override,
    };
    Pipeline::from_file(&global.config, options).with_context(|| format!("loading {}", global.config.display()))
}

fn run_stages(global: &Global, stages: &[Stage]) -> Result<bool> {
    let p = pipeline(global)?;
    info!("config hash {}", p.config_hash());
    let summary = p.run(stages)?;
    print!("{summary}");
    Ok(summary.success())
}

fn mock_config(global: &Global, args: &ServeArgs) -> Result<MockConfig> {
    if let Some(path) = &args.mock_config {
        return Ok(picl::io::read_toml(path)?);
    }
    if global.config.exists() {
        let (config, _) = ExperimentConfig::load(&global.config)?;
        return Ok(config.mock);
    }
    Ok(MockConfig::default())
}

fn serve(global: &Global, args: &ServeArgs) -> Result<()> {
    let config = mock_config(global, args)?;
    config.validate()?;
    if args.stdio {
        let mut model = MockModel::new(config)?;
        serve_lines(&mut model, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
        return Ok(());
    }
    let addr = args.tcp.as_deref().expect("clap requires --tcp without --stdio");
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    info!("mock model listening on {}", listener.local_addr()?);
    serve_tcp(listener, move || MockModel::new(config.clone()).expect("validated above"), args.max_connections)?;
    Ok(())
}

fn conformance(args: &ConformanceArgs) -> Result<bool> {
    let temp;
    let scratch = match &args.scratch {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.clone()
        }
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    let report = run_conformance(open_transport(&args.endpoint)?, &scratch);
    print!("{report}");
    Ok(report.passed())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let g = &cli.global;
    let stage = match &cli.command {
        Command::Simulate => Stage::Simulate,
        Command::Tokenize => Stage::Tokenize,
        Command::Capture => Stage::Capture,
        Command::TrainSae => Stage::TrainSae,
        Command::Correlate => Stage::Correlate,
        Command::Sync => Stage::Sync,
        Command::Intervene => Stage::Intervene,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        Command::MockServe(args) => return serve(g, args).map(|()| true),
        Command::Conformance(args) => return conformance(args),
        Command::Run(args) => {
            let stages = if args.stages.is_empty() { Stage::ALL.to_vec() } else { args.stages.clone() };
            if args.dry_run {
                let p = pipeline(g)?;
                println!("output {} (config hash {})", p.root().display(), p.config_hash());
                for (stage, run) in p.plan(&stages) {
                    println!("{:<10} {}", stage.name(), if run { "run" } else { "up to date" });
                }
                return Ok(true);
            }
            return run_stages(g, &stages);
        }
    };
    run_stages(g, &[stage])
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
