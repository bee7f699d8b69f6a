use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ice_core::logger::{read_log, reconstruct, verify_chain, ChainStatus, LogError, TimelineFilter};
use ice_core::metrics::{check_expectations, compute_metrics};
use ice_core::scenario::{ScenarioError, ScenarioSpec};
use ice_core::serve::{self, ServeError};
use ice_core::sim::{self, SimError};

const EXIT_VALIDATION: u8 = 1;
const EXIT_INTEGRITY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "ice-sim", version, about = "Integrated clinical environment simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario in batch mode and write its log and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print metrics computed from a log.
    Metrics { log: PathBuf },
    /// Check the hash chain of a log.
    VerifyLog { log: PathBuf },
    /// Print a readable timeline from a log.
    Replay {
        log: PathBuf,
        #[arg(long)]
        actor: Option<String>,
        #[arg(long)]
        patient: Option<String>,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Run a scenario live and serve the clinician API.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn log_error(e: LogError) -> ExitCode {
    match e {
        LogError::Io(_) => fail(EXIT_RUNTIME, e),
        _ => fail(EXIT_INTEGRITY, e),
    }
}

fn sim_error(e: SimError) -> ExitCode {
    match e {
        SimError::Scenario(ScenarioError::Validation { .. }) => fail(EXIT_VALIDATION, e),
        SimError::Log(e) => log_error(e),
        _ => fail(EXIT_RUNTIME, e),
    }
}

fn load(path: &Path) -> Result<ScenarioSpec, ExitCode> {
    ScenarioSpec::load(path).map_err(|e| match e {
        ScenarioError::Validation { .. } => fail(EXIT_VALIDATION, e),
        ScenarioError::Io { .. } => fail(EXIT_RUNTIME, e),
    })
}

fn run(scenario: PathBuf, seed: Option<u64>, out: PathBuf) -> ExitCode {
    let spec = match load(&scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match sim::run(&spec, seed, &out) {
        Ok(o) => {
            println!("log: {}", o.log_path.display());
            println!("metrics: {}", o.metrics_path.display());
            println!("{}", serde_json::to_string_pretty(&o.metrics).expect("metrics encode"));
            for miss in check_expectations(&spec.expect, &o.metrics) {
                eprintln!("expectation not met: {miss}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => sim_error(e),
    }
}

fn metrics(log: PathBuf) -> ExitCode {
    let result = read_log(&log).and_then(|r| compute_metrics(&r));
    match result {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics encode"));
            ExitCode::SUCCESS
        }
        Err(e) => log_error(e),
    }
}

fn verify(log: PathBuf) -> ExitCode {
    let records = match read_log(&log) {
        Ok(r) => r,
        Err(e) => return log_error(e),
    };
    match verify_chain(&records) {
        Ok(ChainStatus::Ok) => {
            println!("ok: {} records", records.len());
            ExitCode::SUCCESS
        }
        Ok(ChainStatus::FirstBad(seq)) => fail(EXIT_INTEGRITY, format!("integrity failure at seq {seq}")),
        Err(e) => log_error(e),
    }
}

fn replay(log: PathBuf, filter: TimelineFilter) -> ExitCode {
    let result = read_log(&log).and_then(|r| reconstruct(&r, &filter));
    match result {
        Ok(entries) => {
            let mut out = std::io::BufWriter::new(std::io::stdout().lock());
            for e in entries {
                // A closed pipe (e.g. `| head`) just ends the listing.
                if writeln!(out, "{e}").is_err() {
                    return ExitCode::SUCCESS;
                }
            }
            let _ = out.flush();
            ExitCode::SUCCESS
        }
        Err(e) => log_error(e),
    }
}

fn serve_live(scenario: PathBuf, seed: Option<u64>, port: u16, speed: f64) -> ExitCode {
    let spec = match load(&scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    rt.block_on(async move {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        match serve::start(spec, seed, addr, speed).await {
            Ok(handle) => {
                println!("listening on http://{}", handle.addr);
                let _ = tokio::signal::ctrl_c().await;
                handle.shutdown().await;
                ExitCode::SUCCESS
            }
            Err(e @ ServeError::InvalidSpeed) => fail(EXIT_VALIDATION, e),
            Err(ServeError::Sim(e)) => sim_error(e),
            Err(e) => fail(EXIT_RUNTIME, e),
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, seed, out } => run(scenario, seed, out),
        Cmd::Metrics { log } => metrics(log),
        Cmd::VerifyLog { log } => verify(log),
        Cmd::Replay {
            log,
            actor,
            patient,
            from,
            to,
        } => replay(
            log,
            TimelineFilter {
                from_ms: from,
                to_ms: to,
                actor,
                patient,
            },
        ),
        Cmd::Serve {
            scenario,
            seed,
            port,
            speed,
        } => serve_live(scenario, seed, port, speed),
    }
}
