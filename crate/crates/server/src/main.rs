use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modelwatch::cli::{analyze, read_events, replay, CliError, DriftOverrides};
use modelwatch::config::{Config, CONFIG_ENV};
use modelwatch::service;
use modelwatch::simulate::{write_simulation, SimulationSpec};
use modelwatch_core::drift::{Correction, DriftMethod, PreprocessorKind};

#[derive(Debug, Parser)]
#[command(name = "modelwatch", version, about = "Monitoring sidecar for deployed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gateway and monitoring consumers.
    Serve {
        /// Config file; falls back to $MODELWATCH_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Test a batch CSV against a reference CSV. Exits 2 when drift is found.
    Analyze {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        /// Schema and drift settings; the schema is inferred from the
        /// reference header when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        drift: DriftFlags,
    },
    /// Feed a recorded event log through the consumers offline.
    Replay {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a seeded synthetic reference set and drifted stream.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Ks,
    Mmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PreprocessorArg {
    Identity,
    RandomProjection,
    Bbsd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CorrectionArg {
    Bonferroni,
    Fdr,
}

#[derive(Debug, Args)]
struct DriftFlags {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    preprocessor: Option<PreprocessorArg>,
    #[arg(long, value_enum)]
    correction: Option<CorrectionArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    min_batch: Option<usize>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    projection_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl DriftFlags {
    fn overrides(&self) -> DriftOverrides {
        DriftOverrides {
            method: self.method.map(|m| match m {
                MethodArg::Ks => DriftMethod::KsFeaturewise,
                MethodArg::Mmd => DriftMethod::Mmd,
            }),
            preprocessor: self.preprocessor.map(|p| match p {
                PreprocessorArg::Identity => PreprocessorKind::Identity,
                PreprocessorArg::RandomProjection => PreprocessorKind::RandomProjection,
                PreprocessorArg::Bbsd => PreprocessorKind::Bbsd,
            }),
            correction: self.correction.map(|c| match c {
                CorrectionArg::Bonferroni => Correction::Bonferroni,
                CorrectionArg::Fdr => Correction::FdrBh,
            }),
            alpha: self.alpha,
            min_batch: self.min_batch,
            n_permutations: self.permutations,
            projection_dim: self.projection_dim,
            seed: self.seed,
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| CliError::Io {
            path: "runtime".into(),
            source,
        })
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serialises"));
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Serve { config } => {
            let path = config
                .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
                .ok_or_else(|| CliError::Usage(format!("pass --config or set {CONFIG_ENV}")))?;
            let config = Config::load(&path)?;
            runtime()?.block_on(serve(config))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze {
            reference,
            batch,
            config,
            drift,
        } => {
            let config = config.as_deref().map(Config::load).transpose()?;
            let report = analyze(&reference, &batch, config.as_ref(), &drift.overrides())?;
            print_json(&report);
            Ok(ExitCode::from(if report.drift_detected { 2 } else { 0 }))
        }
        Command::Replay { events, config } => {
            let config = Config::load(&config)?;
            let events = read_events(&events)?;
            let summary = runtime()?.block_on(replay(&config, events))?;
            print_json(&summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { spec, out } => {
            let spec = SimulationSpec::load(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
            let sim = spec.generate().map_err(|e| CliError::Usage(e.to_string()))?;
            let files = write_simulation(&sim, Path::new(&out)).map_err(|e| CliError::Usage(e.to_string()))?;
            print_json(&files);
            Ok(ExitCode::SUCCESS)
        }
    }
}

async fn serve(config: Config) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(&config.server.bind)
        .await
        .map_err(|source| CliError::Io {
            path: config.server.bind.clone(),
            source,
        })?;
    let drain = Duration::from_millis(config.eventing.drain_timeout_ms);
    let server = service::start(config, listener, true).await?;
    tracing::info!(addr = %server.addr(), "listening");
    shutdown_signal().await;
    tracing::info!("shutting down");
    let stats = server.shutdown(drain).await?;
    tracing::info!(published = stats.published, dropped = stats.dropped(), "broker drained");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
