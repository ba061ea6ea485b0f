// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::backend::mock::StandInArgs;
use crate::analytics::{capacity_report, plan_report, AnalyticsError, CapacityQuery, PlanInput};
use crate::backend::{synth_cmdline, GuestBackend, MockBackend, MockScript, QemuBackend};
use crate::config::{
    cfg_map, Catalog, CatalogFile, ConfigError, HostCaps, NetworkAllowList, ObjectiveWeights,
    PerfEntry, PerfTable,
};
use crate::gateway::{GatewayConfig, DEFAULT_MAX_UPLOAD, DEFAULT_PORT};
use crate::lifecycle::{TerminationCause, WipeStatus};
use crate::orchestrator::{
    Orchestrator, OrchestratorSettings, RunOutcome, DEFAULT_BOOT_TIMEOUT, DEFAULT_MONITOR_INTERVAL,
};
use crate::probe::{host_capabilities, EnvOverride, ProbeError, SystemProbe};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_TIMEOUT: i32 = 4;

const EXIT_CODES_HELP: &str = "Exit codes:
  0  session ended cleanly / command succeeded
  2  configuration or input error
  3  runtime or launch error
  4  loader timed out without an upload";

#[derive(Debug, Parser)]
#[command(name = "sandboxd", version, about = "Ephemeral detonation sandbox orchestrator", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session: serve the loader, launch on upload, tear down on exit.
    Run(Box<RunArgs>),
    /// Print the launch configuration chosen for this host.
    SelectConfig(SelectArgs),
    /// Print the hypervisor command line for a catalog profile.
    SynthCmdline(SynthArgs),
    /// M/M/1 capacity report.
    Capacity(CapacityArgs),
    /// Evaluate timing and risk models over an input file.
    Plan(PlanArgs),
    #[command(hide = true)]
    MockGuest(StandInArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CatalogArgs {
    /// Catalog file (components, candidates, optional perf); the built-in catalog when omitted.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Performance table file (a list of perf entries); replaces the catalog's perf section.
    #[arg(long)]
    pub perf: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 1.0)]
    pub w_latency: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_surface: f64,
    #[arg(long, default_value_t = 0.0)]
    pub w_variance: f64,
    /// Performance-table environment.
    #[arg(long, default_value = "default")]
    pub env: String,
}

#[derive(Debug, Clone, Args)]
pub struct HostArgs {
    /// Override the detected architecture (also SANDBOX_FORCE_ARCH).
    #[arg(long)]
    pub arch: Option<String>,
    /// Override acceleration availability, 0 or 1 (also SANDBOX_FORCE_ACCEL).
    #[arg(long)]
    pub accel: Option<String>,
    /// vCPU limit; defaults to the host's available parallelism.
    #[arg(long)]
    pub cpu_limit: Option<u32>,
    /// Memory limit in bytes; defaults to physical memory.
    #[arg(long)]
    pub mem_limit: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Qemu,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    pub host: HostArgs,
    #[arg(long, default_value_t = DEFAULT_PORT, value_parser = clap::value_parser!(u16).range(1..))]
    pub port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: IpAddr,
    /// Full listen address; overrides --bind/--port. Port 0 picks a free port.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    #[arg(long)]
    pub workspace_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    pub backend: BackendKind,
    /// Required with --backend qemu.
    #[arg(long)]
    pub i_understand_detonation_risk: bool,
    /// Directory holding qemu-system-* binaries; PATH lookup when omitted.
    #[arg(long)]
    pub binary_dir: Option<PathBuf>,
    /// Seconds to wait for an upload.
    #[arg(long, default_value_t = 1800.0)]
    pub loader_timeout: f64,
    #[arg(long, default_value_t = DEFAULT_MONITOR_INTERVAL.as_millis() as u64)]
    pub monitor_interval_ms: u64,
    #[arg(long, default_value_t = DEFAULT_BOOT_TIMEOUT.as_secs_f64())]
    pub boot_timeout: f64,
    /// Seconds the guest gets to stop before it is killed.
    #[arg(long, default_value_t = 10.0)]
    pub stop_grace: f64,
    /// Milliseconds to keep answering 410 after the session ends.
    #[arg(long, default_value_t = 0)]
    pub linger_ms: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD)]
    pub max_upload: u64,
    #[command(flatten)]
    pub mock: MockArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MockArgs {
    #[arg(long, default_value_t = 500)]
    pub mock_boot_ms: u64,
    /// Mock guest lifetime after boot; runs until stopped when omitted.
    #[arg(long)]
    pub mock_run_ms: Option<u64>,
    #[arg(long)]
    pub mock_crash_ms: Option<u64>,
    #[arg(long)]
    pub mock_ignore_stop: bool,
    /// NAME=CONTENT file the mock guest writes at boot; repeatable.
    #[arg(long)]
    pub mock_drop: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    pub host: HostArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    /// Profile id.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CapacityArgs {
    /// Arrival rate (jobs per unit time).
    #[arg(long, alias = "lambda")]
    pub arrival_rate: f64,
    /// Service rate per worker (jobs per unit time).
    #[arg(long, alias = "mu")]
    pub service_rate: f64,
    /// Cross-check with a simulation of this many jobs.
    #[arg(long)]
    pub simulate: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also report the workers needed for this mean wait.
    #[arg(long)]
    pub target_wait: Option<f64>,
    /// Write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// JSON input with optional breakdown, boot_table, risk, surface and portability sections.
    pub input: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn config(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            kind,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.kind(), e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        CliError::config("ProbeError", e.to_string())
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        let kind = match e {
            AnalyticsError::ZeroThroughput => "ZeroThroughput",
            AnalyticsError::BadDistribution(_) => "BadDistribution",
            AnalyticsError::EmptyCell { .. } => "EmptyCell",
            AnalyticsError::ZeroBaseline => "ZeroBaseline",
            AnalyticsError::Unstable { .. } => "Unstable",
            AnalyticsError::Unachievable(_) => "Unachievable",
            AnalyticsError::InvalidInput { .. } => "InvalidInput",
        };
        CliError::config(kind, e.to_string())
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (json, result) = match cli.command {
        Command::Run(a) => return cmd_run(*a),
        Command::SelectConfig(a) => (a.json, cmd_select_config(&a)),
        Command::SynthCmdline(a) => (a.json, cmd_synth_cmdline(&a)),
        Command::Capacity(a) => (a.json, cmd_capacity(&a)),
        Command::Plan(a) => (a.json, cmd_plan(&a)),
        Command::MockGuest(a) => return crate::backend::mock::run_stand_in(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(json, &e),
    }
}

fn report_error(json: bool, e: &CliError) -> i32 {
    if json {
        println!("{}", json!({ "error": e.kind, "message": e.message, "exit_code": e.code }));
    } else {
        eprintln!("error: {}: {}", e.kind, e.message);
    }
    e.code
}

fn print_json<T: Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("report types serialize")
    );
}

fn write_report<T: Serialize>(path: Option<&Path>, v: &T) -> Result<(), CliError> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(v).expect("report types serialize");
        std::fs::write(p, text + "\n").map_err(|e| CliError {
            code: EXIT_RUNTIME,
            kind: "Io",
            message: format!("cannot write {}: {e}", p.display()),
        })?;
    }
    Ok(())
}

pub fn load_catalog(args: &CatalogArgs) -> Result<(Catalog, PerfTable), CliError> {
    let file = match &args.catalog {
        Some(p) => CatalogFile::load(p)?,
        None => CatalogFile::default_catalog(),
    };
    let (catalog, mut perf) = file.into_parts()?;
    if let Some(p) = &args.perf {
        let text = std::fs::read_to_string(p).map_err(|e| {
            CliError::config("InvalidPerf", format!("cannot read {}: {e}", p.display()))
        })?;
        let entries: Vec<PerfEntry> = serde_json::from_str(&text)
            .map_err(|e| CliError::config("InvalidPerf", format!("{}: {e}", p.display())))?;
        perf = PerfTable::from_entries(&entries)?;
    }
    Ok((catalog, perf))
}

fn weights(args: &WeightArgs) -> Result<ObjectiveWeights, CliError> {
    Ok(ObjectiveWeights::new(
        args.w_latency,
        args.w_surface,
        args.w_variance,
    )?)
}

fn physical_memory() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let (pages, size) = unsafe { (libc::sysconf(libc::_SC_PHYS_PAGES), libc::sysconf(libc::_SC_PAGESIZE)) };
    if pages > 0 && size > 0 {
        pages as u64 * size as u64
    } else {
        u64::MAX
    }
}

pub fn detect_host(args: &HostArgs) -> Result<HostCaps, CliError> {
    let arch = args.arch.clone().or_else(|| std::env::var(crate::probe::FORCE_ARCH_ENV).ok());
    let accel = args.accel.clone().or_else(|| std::env::var(crate::probe::FORCE_ACCEL_ENV).ok());
    let source = EnvOverride::with_values(SystemProbe::default(), arch, accel)?;
    let cpus = args.cpu_limit.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get() as u32)
            .unwrap_or(1)
    });
    let mem = args.mem_limit.unwrap_or_else(physical_memory);
    Ok(host_capabilities(&source, cpus, mem)?)
}

fn cmd_select_config(a: &SelectArgs) -> Result<(), CliError> {
    let (catalog, perf) = load_catalog(&a.catalog)?;
    let host = detect_host(&a.host)?;
    let w = weights(&a.weights)?;
    let config = cfg_map(&host, &catalog, &w, &perf, &a.weights.env, &NetworkAllowList::default())?;
    if a.json {
        print_json(&json!({ "host": host, "config": config }));
    } else {
        println!("{}", config.id);
        print_json(config);
    }
    Ok(())
}

fn cmd_synth_cmdline(a: &SynthArgs) -> Result<(), CliError> {
    let (catalog, _) = load_catalog(&a.catalog)?;
    let config = catalog
        .find(&a.config)
        .ok_or_else(|| CliError::config("UnknownConfig", format!("no profile `{}` in catalog", a.config)))?;
    let cl = synth_cmdline(config, &a.image)
        .map_err(|e| CliError::config("InvalidConfig", e.to_string()))?;
    if a.json {
        print_json(&cl);
    } else {
        print!("{cl}");
    }
    Ok(())
}

fn cmd_capacity(a: &CapacityArgs) -> Result<(), CliError> {
    let q = CapacityQuery::new(a.arrival_rate, a.service_rate)?;
    let report = capacity_report(&q, a.simulate.map(|n| (n, a.seed)), a.target_wait)?;
    write_report(a.report.as_deref(), &report)?;
    if a.json {
        print_json(&report);
        return Ok(());
    }
    println!("arrival rate (λ)     {:?}", report.arrival_rate);
    println!("service rate (μ)     {:?}", report.service_rate);
    println!("utilization ρ        {:?}", report.utilization);
    println!("mean wait Wq         {:?}", report.mean_wait);
    if let Some(s) = &report.simulation {
        println!(
            "simulated Wq         {:.6} (n={}, seed={}, relative error {:.3}%)",
            s.mean_wait,
            s.n_jobs,
            s.seed,
            s.relative_error * 100.0
        );
    }
    if let Some(p) = &report.provision {
        println!("workers for Wq<={:?}  {}", p.target_wait, p.workers);
    }
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| {
        CliError::config("InvalidInput", format!("cannot read {}: {e}", a.input.display()))
    })?;
    let input: PlanInput = serde_json::from_str(&text)
        .map_err(|e| CliError::config("InvalidInput", format!("{}: {e}", a.input.display())))?;
    let report = plan_report(&input)?;
    write_report(a.report.as_deref(), &report)?;
    if a.json {
        print_json(&report);
        return Ok(());
    }
    if let Some(t) = &report.tti {
        let b = &t.breakdown;
        println!("time to interaction");
        println!("  upload       {:>10.3} s", b.t_up);
        println!("  config       {:>10.3} s", b.t_cfg);
        println!("  boot         {:>10.3} s", b.t_boot);
        println!("  handoff      {:>10.3} s", b.t_handoff);
        if let Some(v) = b.t_vnc {
            println!("  display      {v:>10.3} s");
        }
        println!("  total        {:>10.3} s", t.total_seconds);
    }
    if let Some(e) = report.expected_boot_seconds {
        println!("expected boot  {e:>10.3} s");
    }
    if !report.efficiency.is_empty() {
        println!("efficiency");
        for row in &report.efficiency {
            println!(
                "  {:<8} {:<5} mean {:>10.3} s  η {:?}",
                row.arch.as_str(),
                if row.accel { "kvm" } else { "tcg" },
                row.mean_boot_seconds,
                row.ratio
            );
        }
    }
    if let Some(r) = &report.risk {
        println!("risk");
        println!("  host compromise  {:?}", r.host_compromise);
        println!("  persistence      {:?}", r.persistence);
        if let Some(b) = r.escape_bound {
            println!("  escape bound     {b:?}");
        }
    }
    if let Some(p) = report.portable {
        println!("portable       {p}");
    }
    Ok(())
}

fn mock_script(a: &MockArgs) -> MockScript {
    MockScript {
        boot_delay: Duration::from_millis(a.mock_boot_ms),
        run_for: a.mock_run_ms.map(Duration::from_millis),
        crash_after: a.mock_crash_ms.map(Duration::from_millis),
        ignore_stop: a.mock_ignore_stop,
        drops: a
            .mock_drop
            .iter()
            .map(|d| match d.split_once('=') {
                Some((n, c)) => (n.to_string(), c.to_string()),
                None => (d.clone(), String::new()),
            })
            .collect(),
    }
}

fn seconds(name: &'static str, v: f64) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(v)
        .map_err(|_| CliError::config("InvalidArgument", format!("--{name} must be a non-negative number of seconds")))
}

/// Exit code for a finished run.
pub fn exit_code(outcome: &RunOutcome) -> i32 {
    if matches!(outcome.session.wipe(), Some(WipeStatus::Incomplete { .. })) {
        return EXIT_RUNTIME;
    }
    match outcome.cause() {
        c if c.is_clean() => EXIT_OK,
        TerminationCause::ConfigError { .. } => EXIT_CONFIG,
        TerminationCause::LoaderTimeout => EXIT_TIMEOUT,
        _ => EXIT_RUNTIME,
    }
}

fn cmd_run(a: RunArgs) -> i32 {
    match prepare_run(&a) {
        Ok((settings, catalog, perf, backend, host)) => {
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    return report_error(
                        a.json,
                        &CliError {
                            code: EXIT_RUNTIME,
                            kind: "Io",
                            message: e.to_string(),
                        },
                    )
                }
            };
            let outcome = rt.block_on(async move {
                let orch = Orchestrator::new(settings, catalog, perf, backend);
                let control = orch.control();
                tokio::spawn(async move {
                    if let Some(addr) = control.listening().await {
                        eprintln!("listening on http://{addr}");
                    }
                });
                orch.run(host).await
            });
            let code = exit_code(&outcome);
            let cause = outcome.cause();
            if a.json {
                // One line, after the transition lines, so stdout stays line-delimited.
                println!("{}", json!({
                    "session_id": outcome.session.id().to_string(),
                    "endpoint": outcome.endpoint,
                    "config_id": outcome.session.config().map(|c| c.id.clone()),
                    "cause": cause,
                    "wipe": outcome.session.wipe(),
                    "boot": outcome.boot,
                    "transitions": outcome.session.history(),
                    "exit_code": code,
                }));
            } else {
                eprintln!("session {} ended: {}", outcome.session.id(), cause.code());
            }
            code
        }
        Err(e) => report_error(a.json, &e),
    }
}

type Prepared = (OrchestratorSettings, Catalog, PerfTable, Arc<dyn GuestBackend>, HostCaps);

fn prepare_run(a: &RunArgs) -> Result<Prepared, CliError> {
    let (catalog, perf) = load_catalog(&a.catalog)?;
    let weights = weights(&a.weights)?;
    let host = detect_host(&a.host)?;
    let backend: Arc<dyn GuestBackend> = match a.backend {
        BackendKind::Mock => Arc::new(
            MockBackend::from_current_exe(mock_script(&a.mock)).map_err(|e| CliError {
                code: EXIT_RUNTIME,
                kind: "Io",
                message: format!("cannot locate own executable: {e}"),
            })?,
        ),
        BackendKind::Qemu => {
            if !a.i_understand_detonation_risk {
                return Err(CliError::config(
                    "RiskNotAcknowledged",
                    "--backend qemu runs untrusted images on this host; pass --i-understand-detonation-risk to proceed",
                ));
            }
            Arc::new(QemuBackend::new(a.binary_dir.clone()))
        }
    };
    let workspace_root = a
        .workspace_root
        .clone()
        .unwrap_or_else(|| OrchestratorSettings::default().workspace_root);
    std::fs::create_dir_all(&workspace_root).map_err(|e| {
        CliError::config("InvalidWorkspace", format!("{}: {e}", workspace_root.display()))
    })?;

    let settings = OrchestratorSettings {
        gateway: GatewayConfig {
            bind: a.listen.unwrap_or(SocketAddr::new(a.bind, a.port)),
            max_upload: a.max_upload,
        },
        workspace_root,
        weights,
        env: a.weights.env.clone(),
        allowed_networks: NetworkAllowList::default(),
        loader_timeout: seconds("loader-timeout", a.loader_timeout)?,
        monitor_interval: Duration::from_millis(a.monitor_interval_ms.max(1)),
        boot_timeout: seconds("boot-timeout", a.boot_timeout)?,
        stop_grace: seconds("stop-grace", a.stop_grace)?,
        linger: Duration::from_millis(a.linger_ms),
        log_transitions: true,
        stop_on_interrupt: true,
    };
    Ok((settings, catalog, perf, backend, host))
}
