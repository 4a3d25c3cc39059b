use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use mapek_core::config::Config;
use mapek_core::controller::Controller;
use mapek_core::detectors::Analyzer;
use mapek_core::gateway::{self, GatewayState};
use mapek_core::knowledge::{audit_references, replay, EntryKind};
use mapek_core::simenv::Scenario;
use mapek_core::telemetry::{Monitor, Observation};

#[derive(Parser)]
#[command(name = "mapek", version, about = "Self-managing control loop for a simulated microservice mesh")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the control loop against a scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Number of cycles (one per tick).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        ticks: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Serve the operator API on this address while running.
        #[arg(long)]
        serve: Option<String>,
        /// Journal file; overrides `kb.journal_path`.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Keep serving after the last tick until interrupted.
        #[arg(long, requires = "serve")]
        linger: bool,
    },
    /// Rebuild state from a journal and print its digest.
    Replay {
        #[arg(long)]
        journal: PathBuf,
    },
    /// Summarize a journal: entry counts, escalations, approval latencies.
    Report {
        #[arg(long)]
        journal: PathBuf,
    },
    /// Run the monitor and detectors over a JSON Lines telemetry trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve a finished journal read-only.
    Serve {
        #[arg(long)]
        journal: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run { scenario, config, ticks, seed, serve, journal, linger } => run(scenario, config, ticks, seed, serve, journal, linger),
        Cmd::Replay { journal } => {
            let replayed = replay(&journal).with_context(|| format!("replaying {}", journal.display()))?;
            println!("{}", replayed.state.digest());
            Ok(())
        }
        Cmd::Report { journal } => {
            let replayed = replay(&journal).with_context(|| format!("replaying {}", journal.display()))?;
            println!("{}", serde_json::to_string_pretty(&report(&replayed))?);
            Ok(())
        }
        Cmd::Analyze { trace, config } => analyze(trace, config),
        Cmd::Serve { journal, addr, config } => {
            let replayed = replay(&journal).with_context(|| format!("replaying {}", journal.display()))?;
            let config = config.map(Config::load).transpose()?;
            let digest = replayed.state.digest();
            let state = GatewayState::read_only(replayed.entries, digest, config.as_ref());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(gateway::serve(&addr, state, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
            Ok(())
        }
    }
}

fn run(
    scenario: PathBuf,
    config: PathBuf,
    ticks: u64,
    seed: u64,
    serve: Option<String>,
    journal: Option<PathBuf>,
    linger: bool,
) -> Result<()> {
    let mut config = Config::load(&config)?;
    if let Some(path) = journal {
        config.kb.journal_path = Some(path);
    }
    let scenario = Scenario::load(&scenario)?;
    let mut controller = Controller::new(config.clone(), &scenario, seed)?;

    let summary = match serve {
        None => controller.run(ticks)?,
        Some(addr) => {
            let rt = tokio::runtime::Runtime::new()?;
            let stop = Arc::new(AtomicBool::new(false));
            let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
            let state = GatewayState::live(controller.handle(), &config);
            let listener = rt.block_on(tokio::net::TcpListener::bind(&addr)).with_context(|| format!("binding {addr}"))?;
            eprintln!("gateway listening on http://{}", listener.local_addr()?);
            let server = rt.spawn(async move {
                axum::serve(listener, gateway::router(state))
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await
            });
            let flag = stop.clone();
            rt.spawn(async move {
                if tokio::signal::ctrl_c().await.is_ok() {
                    flag.store(true, Ordering::SeqCst);
                }
            });

            let pause = Duration::from_millis(config.gateway.tick_interval_ms);
            let mut done = 0;
            while done < ticks && !stop.load(Ordering::SeqCst) {
                controller.run_cycle()?;
                done += 1;
                if done < ticks {
                    std::thread::sleep(pause);
                }
            }
            let summary = controller.summary();
            println!("{}", serde_json::to_string(&summary)?);
            std::io::stdout().flush()?;
            if linger {
                while !stop.load(Ordering::SeqCst) {
                    controller.wait_for_commands(Duration::from_millis(100));
                }
            }
            let _ = shutdown_tx.send(());
            rt.block_on(server)??;
            return Ok(());
        }
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn report(replayed: &mapek_core::knowledge::Replayed) -> Value {
    let state = &replayed.state;
    let counts: BTreeMap<&str, u64> = EntryKind::ALL.iter().map(|k| (k.as_str(), state.counts.get(k).copied().unwrap_or(0))).collect();
    let mut by_status: BTreeMap<String, u64> = BTreeMap::new();
    let mut latencies = Vec::new();
    for (id, a) in &state.approvals {
        *by_status.entry(a.status.clone()).or_default() += 1;
        if let Some(decided) = a.decided_tick {
            latencies.push(json!({
                "request_id": id,
                "status": a.status,
                "latency_ticks": decided.saturating_sub(a.requested_tick),
            }));
        }
    }
    let escalations: Vec<Value> = state
        .escalations
        .iter()
        .map(|(id, e)| {
            json!({
                "escalation_id": id,
                "reason": e.get("reason"),
                "tick": e.get("tick"),
                "acknowledged": state.acknowledged.contains(id),
            })
        })
        .collect();
    json!({
        "entries": state.entry_count,
        "counts": counts,
        "approvals": by_status,
        "approval_latencies": latencies,
        "escalations": escalations,
        "audit_violations": audit_references(&replayed.entries),
        "digest": state.digest(),
    })
}

fn analyze(trace: PathBuf, config: Option<PathBuf>) -> Result<()> {
    let config = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let file = std::fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
    let mut monitor = Monitor::new(config.monitor.clone(), None);
    let mut analyzer = Analyzer::new(config.analyze.clone());
    let mut by_tick: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obs: Observation = serde_json::from_str(&line).with_context(|| format!("{}:{}", trace.display(), i + 1))?;
        let tick = match &obs {
            Observation::Metric(s) => s.tick,
            Observation::Collaboration(c) => c.tick,
        };
        by_tick.entry(tick).or_default().push(obs);
    }
    let Some(&last) = by_tick.keys().next_back() else {
        bail!("trace {} holds no observations", trace.display());
    };
    let out = std::io::stdout();
    let mut out = out.lock();
    for tick in 0..=last {
        if let Some(obs) = by_tick.remove(&tick) {
            monitor.ingest(obs);
        }
        if let Some(window) = monitor.window_closing_at(tick) {
            let closed = monitor.close_window(window);
            for report in analyzer.analyze(&closed, &config.goals) {
                writeln!(out, "{}", serde_json::to_string(&report)?)?;
            }
        }
    }
    Ok(())
}
