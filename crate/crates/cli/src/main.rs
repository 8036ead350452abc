use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wandbench_core::exec::Execution;
use wandbench_core::mappings::MappingMode;
use wandbench_core::metrics::{
    all_target_metrics, compare_conditions, coordination_curve, normalized_curves, read_questionnaire,
    slices_from_log, summary_table, write_csv, ReachSlice, Subject, Window,
};
use wandbench_core::session::{load_logs, replay_log, run_experiment, ExperimentConfig, InputConfig, Setup};
use wandbench_service::{serve, serve_replay, ServeConfig, DEFAULT_BROADCAST_HZ};

/// Replayed poses must match the log to this tolerance.
const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "wandbench", version, about = "Desk-scale teleoperation workbench")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the reaching protocol headless and write one log per mode.
    Run(RunArgs),
    /// Live session over WebSocket.
    Serve(ServeArgs),
    /// Re-simulate a log (--verify) or stream it over WebSocket.
    Replay(ReplayArgs),
    /// Compute per-target metrics and summaries from logs.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SetupArgs {
    /// Experiment config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one mapping mode.
    #[arg(long)]
    mode: Option<MappingMode>,
}

impl SetupArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode_order = vec![m];
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    setup: SetupArgs,
    /// Output directory for session-<mode>.jsonl.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    setup: SetupArgs,
    #[arg(long, default_value = "127.0.0.1:8765")]
    bind: SocketAddr,
    /// State broadcast rate in Hz.
    #[arg(long, default_value_t = DEFAULT_BROADCAST_HZ)]
    rate: f64,
    /// Write the live session log here.
    #[arg(long)]
    log_out: Option<PathBuf>,
    /// Start the first trial immediately instead of waiting for a client.
    #[arg(long)]
    autostart: bool,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    /// Re-simulate from the logged hand poses and compare.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value = "127.0.0.1:8765")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Likert answers: participant,question,condition,score.
    #[arg(long)]
    questionnaire: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Run(a) => run(a, exec),
        Command::Serve(a) => serve_live(a),
        Command::Replay(a) => replay(a),
        Command::Metrics(a) => metrics(a, exec),
    }
}

fn run(a: RunArgs, exec: Execution) -> Result<()> {
    let cfg = a.setup.config()?;
    if matches!(cfg.input, InputConfig::Live) {
        bail!("live input needs `serve`");
    }
    let setup = Setup::new(cfg)?;
    let exp = run_experiment(&setup, exec)?;
    std::fs::create_dir_all(&a.out)?;
    for log in &exp.logs {
        let path = a.out.join(format!("session-{}.jsonl", log.header.mode));
        log.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} ({} ticks)", path.display(), log.records.len());
    }
    println!("targets achieved: {}/{}", exp.achieved(), exp.attempted());
    Ok(())
}

#[tokio::main]
async fn serve_live(a: ServeArgs) -> Result<()> {
    let mut cfg = a.setup.config()?;
    cfg.input = InputConfig::Live;
    let setup = Setup::new(cfg)?;
    let mut sc = ServeConfig::new(a.bind);
    sc.broadcast_hz = a.rate;
    sc.log_out = a.log_out;
    sc.autostart = a.autostart;
    let svc = serve(setup, sc).await?;
    println!("listening on ws://{}/ws", svc.addr);
    std::io::stdout().flush()?;
    tokio::signal::ctrl_c().await?;
    svc.shutdown().await?;
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    if a.verify {
        let logs = load_logs(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
        let mut ok = true;
        for log in &logs {
            let r = replay_log(log)?;
            println!(
                "{}: {} ticks, max desired deviation {:.3e}, max robot deviation {:.3e}, event mismatches {}",
                log.header.mode, r.ticks, r.max_desired_dev, r.max_robot_dev, r.mismatches
            );
            ok &= r.within(REPLAY_TOLERANCE);
        }
        if !ok {
            bail!("replay diverged from the log");
        }
        return Ok(());
    }
    stream_replay(a)
}

#[tokio::main]
async fn stream_replay(a: ReplayArgs) -> Result<()> {
    let svc = serve_replay(a.bind, a.log, a.speed).await?;
    println!("replaying on ws://{}/ws", svc.addr);
    std::io::stdout().flush()?;
    tokio::signal::ctrl_c().await?;
    svc.shutdown().await?;
    Ok(())
}

#[derive(serde::Serialize)]
struct CoordinationRow {
    mode: MappingMode,
    trial: usize,
    target: usize,
    subject: &'static str,
    window: &'static str,
    mean_signed_deviation: f64,
    degenerate: Option<&'static str>,
}

fn coordination_rows(slices: &[ReachSlice]) -> Vec<CoordinationRow> {
    let mut rows = Vec::new();
    for s in slices.iter().filter(|s| s.achieved) {
        for (subject, sname) in [(Subject::Hand, "hand"), (Subject::Effector, "effector")] {
            for (window, wname) in [(Window::Ballistic, "ballistic"), (Window::Full, "full")] {
                // reaches too short to segment are left out
                let Ok(c) = coordination_curve(s, subject, window) else { continue };
                rows.push(CoordinationRow {
                    mode: s.mode,
                    trial: s.trial,
                    target: s.target.index,
                    subject: sname,
                    window: wname,
                    mean_signed_deviation: c.mean_signed_deviation(),
                    degenerate: c.degenerate.map(|ch| match ch {
                        wandbench_core::metrics::Channel::Translation => "translation",
                        wandbench_core::metrics::Channel::Rotation => "rotation",
                    }),
                });
            }
        }
    }
    rows
}

fn csv_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
}

fn metrics(a: MetricsArgs, exec: Execution) -> Result<()> {
    let mut slices = Vec::new();
    for p in &a.logs {
        for log in load_logs(p).with_context(|| format!("reading {}", p.display()))? {
            slices.extend(slices_from_log(&log)?);
        }
    }
    if slices.is_empty() {
        bail!("no reaches in the given logs");
    }
    std::fs::create_dir_all(&a.out)?;
    let per_target = all_target_metrics(&slices, exec);
    write_csv(csv_file(&a.out, "targets.csv")?, &per_target)?;
    let summary = summary_table(&per_target);
    write_csv(csv_file(&a.out, "summary.csv")?, &summary)?;
    write_csv(csv_file(&a.out, "coordination.csv")?, &coordination_rows(&slices))?;

    let mut curves = serde_json::Map::new();
    for mode in MappingMode::ALL {
        let of_mode: Vec<ReachSlice> = slices.iter().filter(|s| s.mode == mode && s.achieved).cloned().collect();
        if of_mode.is_empty() {
            continue;
        }
        curves.insert(mode.to_string(), serde_json::to_value(normalized_curves(&of_mode, exec)?)?);
    }
    serde_json::to_writer_pretty(csv_file(&a.out, "curves.json")?, &curves)?;

    if let Some(q) = &a.questionnaire {
        let rows = read_questionnaire(File::open(q).with_context(|| format!("reading {}", q.display()))?)?;
        write_csv(csv_file(&a.out, "questionnaire.csv")?, &compare_conditions(&rows)?)?;
    }

    for row in summary.iter().filter(|r| r.grouping == "mode") {
        println!(
            "{}: {}/{} achieved, median time per target {}",
            row.mode,
            row.achieved,
            row.targets,
            row.duration_median.map(|d| format!("{d:.3} s")).unwrap_or_else(|| "n/a".into())
        );
    }
    println!("wrote metrics to {}", a.out.display());
    Ok(())
}
