//! The `cowork` command: runs the workspace service, trains the agent,
//! writes the EEG corpus, replays event logs, and drives a running service
//! over HTTP.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cowork_client::Client;
use cowork_core::affect::{ActionTiming, AffectWeights, HumanInTheLoop, Metric, PreferenceProfile};
use cowork_core::agent::{
    bootstrap_phase2, greedy_rollout, train, train_phase1, write_trace, LearnConfig, QTable, TrainOptions, TrainOutcome,
};
use cowork_core::bus::{read_log, replay, Clock};
use cowork_core::eeg::{bundled_corpus, read_corpus, write_corpus, Classifier};
use cowork_core::gateway::{keys, replay_into, Store};
use cowork_core::scenario::{ControlCommand, Scenario, Script};
use cowork_core::system::{default_classifier, train_blink_classifier, SimConfig, Simulation, CORPUS_SEED};
use cowork_core::world::{Block, WorldState};
use cowork_server::{bind, serve, AppState, ServerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "cowork", version, about = "Shared-workspace robot with affective and EEG feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full system, serving the gateway unless --headless.
    Run(RunArgs),
    /// Train the Q-learning agent (phase 1 on task reward, phase 2 with the simulated human).
    Train(TrainArgs),
    /// Write the synthetic EEG training corpus.
    Corpus(CorpusArgs),
    /// Rebuild the dashboard view from an event log.
    Replay(ReplayArgs),
    /// Print the execution status of a running service.
    Status(ServerArg),
    /// Claim a block for the human.
    Claim(BlockArgs),
    /// Release a claimed block.
    Release(BlockArgs),
    /// Send start, stop or resume.
    Control(ControlArgs),
    /// Inject a control blink.
    Blink(ServerArg),
    /// Override an affect metric.
    Override(OverrideArgs),
    /// List alerts.
    Alerts(AlertsArgs),
    /// Print the newest raw EEG windows.
    Eeg(EegArgs),
    /// Follow the push stream.
    Watch(WatchArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulate without a server, as fast as possible.
    #[arg(long)]
    pub headless: bool,
    /// Timestamped inputs to replay.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Event log destination (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Flush the event log after every message.
    #[arg(long)]
    pub log_sync: bool,
    /// Labelled EEG corpus for the blink classifier; defaults to the bundled one.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Headless run length; defaults to the script's length, or until the goal.
    #[arg(long)]
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub phase: u8,
    /// Phase-1 Q-table to bootstrap from (phase 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Simulated human, as `prefers_<block>`.
    #[arg(long, default_value = "prefers_green", value_parser = parse_profile)]
    pub profile: PreferenceProfile,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Phase 2: skip the from-scratch comparison run.
    #[arg(long)]
    pub no_scratch: bool,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CORPUS_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Replay from this sequence number on.
    #[arg(long, default_value_t = 0)]
    pub from_seq: u64,
}

#[derive(Debug, Args)]
pub struct ServerArg {
    #[arg(long, default_value = DEFAULT_SERVER)]
    pub server: String,
}

#[derive(Debug, Args)]
pub struct BlockArgs {
    #[arg(value_parser = parse_block)]
    pub block: Block,
    #[command(flatten)]
    pub server: ServerArg,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(value_parser = parse_control)]
    pub command: ControlCommand,
    #[command(flatten)]
    pub server: ServerArg,
}

#[derive(Debug, Args)]
pub struct OverrideArgs {
    #[arg(value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(value_parser = parse_unit)]
    pub value: f64,
    #[command(flatten)]
    pub server: ServerArg,
}

#[derive(Debug, Args)]
pub struct AlertsArgs {
    #[arg(long, default_value_t = 0)]
    pub since: u64,
    #[command(flatten)]
    pub server: ServerArg,
}

#[derive(Debug, Args)]
pub struct EegArgs {
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    #[command(flatten)]
    pub server: ServerArg,
}

#[derive(Debug, Args)]
pub struct WatchArgs {
    /// Stop after this many events.
    #[arg(long)]
    pub count: Option<usize>,
    #[command(flatten)]
    pub server: ServerArg,
}

fn parse_block(s: &str) -> Result<Block, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_control(s: &str) -> Result<ControlCommand, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("expected start, stop or resume, got `{s}`"))
}

fn parse_unit(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got `{s}`")),
    }
}

fn parse_profile(s: &str) -> Result<PreferenceProfile, String> {
    let block = s.strip_prefix("prefers_").ok_or_else(|| format!("expected prefers_<block>, got `{s}`"))?;
    Ok(PreferenceProfile::prefers(parse_block(block)?))
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure { code: EXIT_RUNTIME, message: format!("{context}: {e}") }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Train(a) => train_cmd(a),
        Command::Corpus(a) => {
            write_corpus(&a.out, &bundled_corpus(a.seed)).map_err(runtime("cannot write corpus"))?;
            println!("{}", json!({ "out": a.out, "windows": 200, "seed": a.seed }));
            Ok(())
        }
        Command::Replay(a) => replay_cmd(a),
        other => client_cmd(other),
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn tokio_runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(runtime("cannot start runtime"))
}

fn classifier(corpus: Option<&Path>) -> Result<Classifier, Failure> {
    match corpus {
        None => Ok(default_classifier()),
        Some(p) => {
            let windows = read_corpus(p).map_err(runtime("cannot read corpus"))?;
            train_blink_classifier(&windows).map_err(runtime("cannot train blink classifier"))
        }
    }
}

fn run(a: RunArgs) -> CmdResult {
    let scenario = Scenario::load(&a.scenario).map_err(runtime("invalid scenario"))?;
    let script = a.script.as_deref().map(Script::load).transpose().map_err(runtime("invalid script"))?;
    let clf = Arc::new(classifier(a.corpus.as_deref())?);
    let cfg = SimConfig { seed: a.seed, log_path: a.log.clone(), log_sync: a.log_sync, record: false, ..SimConfig::default() };
    let mut sim = Simulation::new(scenario, clf, cfg).map_err(runtime("cannot start"))?;

    if a.headless {
        let until = a.duration_ms.or(script.as_ref().map(Script::duration_ms));
        match (&script, until) {
            (Some(s), Some(ms)) => {
                sim.load_script(s);
                sim.run_until(ms)
            }
            (None, Some(ms)) => sim.run_until(ms),
            // no script and no length: run until the executor stops moving
            _ => run_to_rest(&mut sim),
        }
        .map_err(runtime("simulation failed"))?;
        sim.shutdown().map_err(runtime("cannot flush log"))?;
        print_json(&json!({ "now_ms": sim.now_ms(), "status": sim.executor().status() }));
        return Ok(());
    }

    if let Some(s) = &script {
        sim.load_script(s);
    }
    let rt = tokio_runtime()?;
    rt.block_on(async move {
        let listener = bind(a.port).await.map_err(runtime(&format!("port {}", a.port)))?;
        let state = AppState::new(sim, &ServerConfig::default());
        eprintln!("serving on http://127.0.0.1:{}", a.port);
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(runtime("server"))
    })
}

/// Cap for headless runs without a script or duration.
const MAX_HEADLESS_MS: u64 = 600_000;

fn run_to_rest(sim: &mut Simulation) -> Result<(), cowork_core::system::SimError> {
    use cowork_core::executor::ExecState;
    while sim.now_ms() < MAX_HEADLESS_MS && sim.executor().status().state == ExecState::Running {
        sim.step()?;
    }
    Ok(())
}

fn write_trace_file(path: &Path, outcome: Option<&TrainOutcome>) -> CmdResult {
    let file = File::create(path).map_err(runtime(&path.display().to_string()))?;
    let trace = outcome.map_or(&[][..], |o| &o.trace[..]);
    write_trace(BufWriter::new(file), trace).map_err(runtime(&path.display().to_string()))
}

fn rollout_summary(q: &QTable, start: &WorldState, max_steps: usize) -> Value {
    let r = greedy_rollout(q, start, max_steps);
    json!({
        "reached_goal": r.reached_goal,
        "length": r.actions.len(),
        "actions": r.actions.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
    })
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    if a.phase == 2 && a.init.is_none() {
        return Err(Failure::usage("phase 2 needs --init <phase-1 q-table>"));
    }
    fs::create_dir_all(&a.out).map_err(runtime("cannot create output directory"))?;
    let table_path = a.out.join("qtable.json");
    let trace_path = a.out.join("trace.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let started = Instant::now();

    if a.phase == 1 {
        let cfg = LearnConfig { episodes: a.episodes.unwrap_or(LearnConfig::default().episodes), ..LearnConfig::default() };
        let opts = TrainOptions::default();
        if cfg.episodes == 0 {
            QTable::new().save(&table_path).map_err(runtime("cannot write q-table"))?;
            return write_trace_file(&trace_path, None);
        }
        let out = train_phase1(&cfg, &opts, &mut rng).map_err(runtime("training failed"))?;
        out.table.save(&table_path).map_err(runtime("cannot write q-table"))?;
        write_trace_file(&trace_path, Some(&out))?;
        print_json(&json!({
            "phase": 1,
            "episodes": cfg.episodes,
            "converged_at": out.converged_at,
            "greedy": rollout_summary(&out.table, &opts.start, cfg.max_steps),
            "seconds": started.elapsed().as_secs_f64(),
            "qtable": table_path,
            "trace": trace_path,
        }));
        if !out.converged() {
            eprintln!("warning: greedy policy did not converge within {} episodes", cfg.episodes);
        }
        return Ok(());
    }

    let init = a.init.as_deref().expect("checked above");
    let q0 = QTable::load(init).map_err(runtime(&format!("cannot load {}", init.display())))?;
    let scratch_path = a.out.join("scratch_trace.jsonl");
    let cfg = LearnConfig { episodes: a.episodes.unwrap_or(LearnConfig::phase2().episodes), ..LearnConfig::phase2() };
    let opts = TrainOptions { monitor_block: Some(a.profile.preferred_block), ..TrainOptions::default() };
    if cfg.episodes == 0 {
        q0.save(&table_path).map_err(runtime("cannot write q-table"))?;
        write_trace_file(&trace_path, None)?;
        return if a.no_scratch { Ok(()) } else { write_trace_file(&scratch_path, None) };
    }
    let human = || HumanInTheLoop::new(a.profile, AffectWeights::default(), ActionTiming::default());
    let boot = bootstrap_phase2(q0, &mut human(), &cfg, &opts, &mut rng).map_err(runtime("training failed"))?;
    boot.table.save(&table_path).map_err(runtime("cannot write q-table"))?;
    write_trace_file(&trace_path, Some(&boot))?;
    let mut report = json!({
        "phase": 2,
        "episodes": cfg.episodes,
        "avoided": a.profile.preferred_block,
        "avoidance_at": boot.avoidance_at,
        "greedy": rollout_summary(&boot.table, &opts.start, cfg.max_steps),
        "qtable": table_path,
        "trace": trace_path,
    });
    if !a.no_scratch {
        let scfg = LearnConfig { episodes: cfg.episodes, ..LearnConfig::scratch() };
        let mut srng = ChaCha8Rng::seed_from_u64(a.seed);
        let scratch = train(QTable::new(), &scfg, &opts, &mut human(), &mut srng).map_err(runtime("training failed"))?;
        write_trace_file(&scratch_path, Some(&scratch))?;
        report["scratch_avoidance_at"] = json!(scratch.avoidance_at);
        report["scratch_trace"] = json!(scratch_path);
    }
    report["seconds"] = json!(started.elapsed().as_secs_f64());
    print_json(&report);
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> CmdResult {
    let log = read_log(&a.log).map_err(runtime(&format!("cannot read {}", a.log.display())))?;
    let tail: Vec<_> = replay(&log, a.from_seq).cloned().collect();
    let store = Store::new(Clock::manual());
    let ingested = replay_into(&store, &tail).map_err(runtime("replay failed"))?;
    let mut view = serde_json::Map::new();
    for key in keys::ALL {
        if let Some(r) = store.peek(key) {
            view.insert(key.to_string(), r.value);
        }
    }
    print_json(&json!({
        "messages": tail.len(),
        "ingested": ingested,
        "last_ms": tail.last().map(|m| m.timestamp_ms),
        "view": view,
    }));
    Ok(())
}

fn client_cmd(cmd: Command) -> CmdResult {
    let rt = tokio_runtime()?;
    rt.block_on(async move {
        let err = runtime("request failed");
        match cmd {
            Command::Status(s) => print_json(&Client::new(s.server).plan().await.map_err(err)?),
            Command::Claim(b) => print_json(&Client::new(b.server.server).claim(b.block).await.map_err(err)?),
            Command::Release(b) => print_json(&Client::new(b.server.server).release(b.block).await.map_err(err)?),
            Command::Control(c) => print_json(&Client::new(c.server.server).control(c.command).await.map_err(err)?),
            Command::Blink(s) => print_json(&Client::new(s.server).blink().await.map_err(err)?),
            Command::Override(o) => {
                print_json(&Client::new(o.server.server).affect_override(o.metric, o.value).await.map_err(err)?)
            }
            Command::Alerts(q) => print_json(&Client::new(q.server.server).alerts(q.since).await.map_err(err)?),
            Command::Eeg(q) => print_json(&Client::new(q.server.server).raw_eeg(q.window).await.map_err(err)?),
            Command::Watch(w) => {
                let client = Client::new(w.server.server);
                let stream = client.stream().await.map_err(runtime("request failed"))?;
                let mut stream = std::pin::pin!(stream);
                let mut seen = 0;
                let stdout = io::stdout();
                while let Some(ev) = stream.next().await {
                    let ev = ev.map_err(runtime("stream failed"))?;
                    let mut out = stdout.lock();
                    serde_json::to_writer(&mut out, &ev).expect("serializable");
                    let _ = writeln!(out);
                    seen += 1;
                    if w.count.is_some_and(|n| seen >= n) {
                        break;
                    }
                }
            }
            Command::Run(_) | Command::Train(_) | Command::Corpus(_) | Command::Replay(_) => unreachable!("local commands"),
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_parsing() {
        assert_eq!(parse_profile("prefers_green").unwrap().preferred_block, Block::Green);
        assert!(parse_profile("green").is_err());
        assert!(parse_profile("prefers_teal").is_err());
    }

    #[test]
    fn unit_values() {
        assert_eq!(parse_unit("0.5").unwrap(), 0.5);
        assert!(parse_unit("1.5").is_err());
        assert!(parse_unit("x").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["cowork", "run"]), EXIT_USAGE);
        assert_eq!(main_with_args(["cowork", "train", "--phase", "3"]), EXIT_USAGE);
        assert_eq!(main_with_args(["cowork", "train", "--phase", "2"]), EXIT_USAGE);
        assert_eq!(main_with_args(["cowork", "control", "jump"]), EXIT_USAGE);
        assert_eq!(main_with_args(["cowork", "--help"]), EXIT_OK);
    }
}
