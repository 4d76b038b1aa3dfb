//! fleetsim command line: validate configs, run scenarios, profile GPU
//! capacities, and compare run reports.

mod compare;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fleetsim::autoscaler::ScalerAlgorithm;
use fleetsim::cluster::GpuProfile;
use fleetsim::config::SloMetric;
use fleetsim::gateway::PolicyKind;
use fleetsim::optimizer::ProfileParams;
use fleetsim::parallel::profile_table;
use fleetsim::simengine::Engine;
use fleetsim::workload::BucketEdges;
use fleetsim::{MetricsReport, ScenarioConfig, SimError};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fleetsim", about = "Discrete-event simulator for LLM serving fleets", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write the report files.
    Run(RunArgs),
    /// Profile per-GPU, per-bucket capacities into a table file.
    Profile(ProfileArgs),
    /// Compare two report.json files, benchmark-table style.
    Compare(CompareArgs),
    /// Validate a scenario config without running it.
    Validate { config: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory (default: runs/<config-stem>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the routing policy.
    #[arg(long)]
    policy: Option<String>,
    /// Override the scaler algorithm (hpa|kpa|apa).
    #[arg(long)]
    scaler: Option<String>,
    /// Also write per-request records as requests.csv.
    #[arg(long)]
    per_request_csv: bool,
}

#[derive(Args)]
struct ProfileArgs {
    /// TOML file with a [[profiles]] list of GPU types.
    profiles: PathBuf,
    /// Output table path.
    #[arg(long, default_value = "capacity.csv")]
    out: PathBuf,
    /// Finite input-bucket edges, e.g. 200,1000.
    #[arg(long, value_delimiter = ',', default_values_t = [200u32, 1000])]
    edges_in: Vec<u32>,
    /// Finite output-bucket edges, e.g. 100,500.
    #[arg(long, value_delimiter = ',', default_values_t = [100u32, 500])]
    edges_out: Vec<u32>,
    /// Latency SLO in seconds (p99 of the chosen metric).
    #[arg(long)]
    slo: f64,
    #[arg(long, default_value = "ttft")]
    slo_metric: String,
    #[arg(long, default_value_t = 150)]
    probe_requests: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    report_a: PathBuf,
    report_b: PathBuf,
    /// Emit the delta table as JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate { config } => cmd_validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<SimError>() {
                Some(SimError::InvariantBreach { .. }) => EXIT_RUNTIME,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

fn parse_policy(s: &str) -> anyhow::Result<PolicyKind> {
    Ok(match s {
        "random" => PolicyKind::Random,
        "throughput" => PolicyKind::Throughput,
        "least-request" => PolicyKind::LeastRequest,
        "least-kv-cache" => PolicyKind::LeastKvCache,
        "least-latency" => PolicyKind::LeastLatency,
        "prefix-cache-aware" => PolicyKind::PrefixCacheAware,
        other => anyhow::bail!(SimError::config(format!("unknown policy: {other}"))),
    })
}

fn parse_scaler(s: &str) -> anyhow::Result<ScalerAlgorithm> {
    Ok(match s {
        "hpa" => ScalerAlgorithm::Hpa,
        "kpa" => ScalerAlgorithm::Kpa,
        "apa" => ScalerAlgorithm::Apa,
        other => anyhow::bail!(SimError::config(format!("unknown scaler: {other}"))),
    })
}

fn parse_slo_metric(s: &str) -> anyhow::Result<SloMetric> {
    Ok(match s {
        "ttft" => SloMetric::Ttft,
        "e2e" => SloMetric::E2e,
        other => anyhow::bail!(SimError::config(format!("unknown slo metric: {other}"))),
    })
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = ScenarioConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        if let Some(synth) = cfg.workload.synth.as_mut() {
            synth.seed = seed;
        }
    }
    if let Some(policy) = &args.policy {
        cfg.gateway.policy = parse_policy(policy)?;
    }
    if let Some(algo) = &args.scaler {
        let algo = parse_scaler(algo)?;
        cfg.scaler.get_or_insert_with(Default::default).algorithm = algo;
    }
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;

    let out_dir = args.out.unwrap_or_else(|| {
        let stem = args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "scenario".into());
        PathBuf::from("runs").join(stem)
    });
    std::fs::create_dir_all(&out_dir)?;

    let decision_log_enabled = cfg.gateway.decision_log;
    let mut engine = Engine::new(cfg, trace)?;
    engine.run_to_completion()?;
    let decisions = engine.decision_log().to_vec();
    let report = engine.finalize()?;

    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("report.txt"), report.to_text())?;
    std::fs::write(out_dir.join("replicas.csv"), report.replicas_csv())?;
    if args.per_request_csv {
        std::fs::write(out_dir.join("requests.csv"), report.records_csv())?;
    }
    if decision_log_enabled {
        let mut log = String::new();
        for d in &decisions {
            log.push_str(&serde_json::to_string(&d)?);
            log.push('\n');
        }
        std::fs::write(out_dir.join("decisions.jsonl"), log)?;
    }
    print!("{}", report.to_text());
    println!("report written to {}", out_dir.display());
    Ok(())
}

#[derive(Deserialize)]
struct ProfilesFile {
    profiles: Vec<GpuProfile>,
}

fn cmd_profile(args: ProfileArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.profiles)
        .map_err(|e| SimError::io(args.profiles.display().to_string(), e))?;
    let file: ProfilesFile =
        toml::from_str(&text).map_err(|e| SimError::config(e.to_string()))?;
    if file.profiles.is_empty() {
        anyhow::bail!(SimError::config("profiles file lists no GPU types"));
    }
    for p in &file.profiles {
        p.validate()?;
    }
    let edges_in = BucketEdges(args.edges_in.clone());
    let edges_out = BucketEdges(args.edges_out.clone());
    edges_in.validate()?;
    edges_out.validate()?;
    if args.slo <= 0.0 {
        anyhow::bail!(SimError::config("--slo must be > 0"));
    }
    let params = ProfileParams {
        probe_requests: args.probe_requests,
        seed: args.seed,
        slo_metric: parse_slo_metric(&args.slo_metric)?,
    };
    let (table, warnings) = profile_table(&file.profiles, &edges_in, &edges_out, args.slo, &params)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    table.write_file(&args.out)?;
    print!("{}", table.to_table_string());
    println!("capacity table written to {}", args.out.display());
    Ok(())
}

fn load_report(path: &Path) -> anyhow::Result<MetricsReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::io(path.display().to_string(), e))?;
    let report: MetricsReport = serde_json::from_str(&text)
        .map_err(|e| SimError::SchemaMismatch(format!("{}: {e}", path.display())))?;
    Ok(report)
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let a = load_report(&args.report_a)?;
    let b = load_report(&args.report_b)?;
    let deltas = compare::compare(&a, &b);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&deltas)?);
    } else {
        print!("{}", compare::render(&deltas));
    }
    Ok(())
}

fn cmd_validate(config: &Path) -> anyhow::Result<()> {
    let cfg = ScenarioConfig::from_file(config)?;
    cfg.validate()?;
    println!("{} is valid", config.display());
    Ok(())
}
