use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segplan_core::allocator::{reconfigure_service, DeploymentMap, ServiceUpdate};
use segplan_core::configurator::Service;
use segplan_core::driver::{
    configure_services, load_map, load_profiles, load_scenario, merge_csv, oracle_plan, plan,
    summarize, DriverError, OracleBounds, PlanOptions, PlanSummary, Scenario,
};
use segplan_core::evaluation::{internal_slack, run_simulation, ArrivalKind, SimReport, Workload};
use segplan_core::mig::{enumerate_full_configs, Geometry};
use segplan_core::profiles::{ModelFile, ProfileSet};

#[derive(Parser)]
#[command(
    name = "segplan",
    version,
    about = "Plan and simulate MIG/MPS GPU segment deployments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Configure services, allocate segments and print the deployment map.
    Plan(PlanArgs),
    /// Plan (or load a map) and simulate request service.
    Simulate(SimulateArgs),
    /// Re-plan one service after its SLO or request rate changes.
    Reconfigure(ReconfigureArgs),
    /// List every full MIG configuration of one GPU.
    EnumerateConfigs(EnumerateArgs),
    /// Exact minimum GPCs and GPUs for a small scenario.
    Oracle(OracleArgs),
    /// Merge simulation CSV files into one table.
    Report(ReportArgs),
    /// Generate profile CSVs from a model parameter file.
    Synthesize(SynthesizeArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Profile directory; overrides the scenario's `profiles` entry.
    #[arg(long)]
    profiles: Option<PathBuf>,
}

#[derive(Args)]
struct PlanFlags {
    /// Stop after segment relocation.
    #[arg(long)]
    no_optimize: bool,
    /// Only use profile points with one process per instance.
    #[arg(long)]
    single_process: bool,
    /// GPUs with at most this many allocated GPCs are broken up.
    #[arg(long, default_value_t = 4)]
    threshold: u8,
    #[arg(long, default_value_t = 14)]
    sms_per_gpc: u32,
}

impl PlanFlags {
    fn options(&self) -> PlanOptions {
        PlanOptions {
            optimize: !self.no_optimize,
            single_process: self.single_process,
            threshold: self.threshold,
            sms_per_gpc: self.sms_per_gpc,
            geometry: Geometry::a100(),
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    flags: PlanFlags,
    /// Write the deployment map here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the plan summary as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Print the optimization log and both fragmentation readings.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arrivals {
    Poisson,
    Deterministic,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    flags: PlanFlags,
    /// Deployment map to simulate; planned from the scenario if absent.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to run, starting at --seed.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// Simulated seconds.
    #[arg(long, default_value_t = 60.0)]
    horizon: f64,
    #[arg(long, value_enum, default_value = "poisson")]
    arrivals: Arrivals,
    /// Multiplies every service's request rate.
    #[arg(long, default_value_t = 1.0)]
    rate_scale: f64,
    /// Write the reports as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV row per service per run.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReconfigureArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    flags: PlanFlags,
    /// Current deployment map; planned from the scenario if absent.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Service id to re-plan.
    #[arg(long)]
    service: String,
    /// New SLO latency in milliseconds.
    #[arg(long)]
    slo: Option<f64>,
    /// New request rate in requests per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Write the new map here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    /// Also allow a size-2 instance at slot 5.
    #[arg(long)]
    size2_at_slot5: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Merged CSV output; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV files written by `simulate --csv`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Model parameter JSON.
    #[arg(long)]
    models: PathBuf,
    /// Directory receiving one `<model>.csv` per model.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the parameter file.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), DriverError> {
    match command {
        Command::Plan(args) => cmd_plan(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Reconfigure(args) => cmd_reconfigure(args),
        Command::EnumerateConfigs(args) => cmd_enumerate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Report(args) => cmd_report(args),
        Command::Synthesize(args) => cmd_synthesize(args),
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DriverError + '_ {
    move |source| DriverError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `text` to `path`, or to stdout when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result<(), DriverError> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn load(args: &ScenarioArgs) -> Result<(Scenario, ProfileSet), DriverError> {
    let scenario = load_scenario(&args.scenario)?;
    let tables = load_profiles(&scenario, args.profiles.as_deref())?;
    Ok((scenario, tables))
}

fn print_summary(summary: &PlanSummary, verbose: bool) {
    eprintln!(
        "{}: {} GPUs, {} GPCs, external fragmentation {:.4}, planning {:.3} ms",
        summary.scenario,
        summary.gpu_count,
        summary.total_gpcs,
        summary.external_fragmentation,
        summary.planning_time_ms
    );
    if verbose {
        eprintln!("allocated fraction {:.4}", summary.allocated_fraction);
        for s in &summary.services {
            eprintln!(
                "  {}: {} segments, {} GPCs, {:.1}/{:.1} rps",
                s.id, s.segments, s.gpcs, s.covered_rate, s.req_rate
            );
        }
    }
}

fn map_text(map: &DeploymentMap) -> String {
    let mut text = serde_json::to_string_pretty(&map.to_file()).expect("map serializes");
    text.push('\n');
    text
}

fn cmd_plan(args: PlanArgs) -> Result<(), DriverError> {
    let (scenario, tables) = load(&args.scenario)?;
    let result = plan(&scenario, &tables, &args.flags.options())?;
    if args.verbose {
        for event in &result.log.events {
            eprintln!("{event:?}");
        }
    }
    print_summary(&result.summary, args.verbose);
    if let Some(path) = &args.summary {
        let text = serde_json::to_string_pretty(&result.summary)? + "\n";
        fs::write(path, text).map_err(io_err(path))?;
    }
    emit(args.out.as_deref(), &map_text(&result.map))
}

/// The map from `--map` if given, else a fresh plan.
fn current_map(
    scenario: &Scenario,
    tables: &ProfileSet,
    map: Option<&Path>,
    options: &PlanOptions,
) -> Result<(DeploymentMap, Vec<Service>), DriverError> {
    match map {
        Some(path) => {
            let services = configure_services(scenario, tables, options.single_process)?;
            let map = load_map(path, &services, tables, options.geometry)?;
            Ok((map, services))
        }
        None => {
            let result = plan(scenario, tables, options)?;
            Ok((result.map, result.services))
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), DriverError> {
    let (scenario, tables) = load(&args.scenario)?;
    let options = args.flags.options();
    let (map, services) = current_map(&scenario, &tables, args.map.as_deref(), &options)?;
    let kind = match args.arrivals {
        Arrivals::Poisson => ArrivalKind::Poisson,
        Arrivals::Deterministic => ArrivalKind::Deterministic,
    };
    let mut workload = Workload::nominal(kind, &services, args.horizon);
    for rate in workload.rates.values_mut() {
        *rate *= args.rate_scale;
    }

    let mut reports: Vec<SimReport> = Vec::new();
    for seed in args.seed..args.seed + args.runs.max(1) {
        let out = run_simulation(
            &map,
            &tables,
            &services,
            &workload,
            seed,
            options.sms_per_gpc,
        )?;
        let slack = internal_slack(&out.activity).ok();
        let worst = out
            .report
            .services
            .iter()
            .map(|s| s.compliance)
            .fold(1.0f64, f64::min);
        eprintln!(
            "seed {seed}: worst compliance {worst:.6}, internal slack {}",
            slack.map_or("n/a".to_owned(), |s| format!("{s:.4}"))
        );
        reports.push(out.report);
    }

    if let Some(path) = &args.csv {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut writer = io::BufWriter::new(file);
        let mut csv_out = Vec::new();
        for (i, r) in reports.iter().enumerate() {
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            // keep the header of the first run only
            let body = if i == 0 {
                text.as_str()
            } else {
                text.split_once('\n').map_or("", |(_, b)| b)
            };
            csv_out.extend_from_slice(body.as_bytes());
        }
        writer.write_all(&csv_out).map_err(io_err(path))?;
    }
    let text = serde_json::to_string_pretty(&reports)? + "\n";
    emit(args.out.as_deref(), &text)
}

fn cmd_reconfigure(args: ReconfigureArgs) -> Result<(), DriverError> {
    let (scenario, tables) = load(&args.scenario)?;
    let options = args.flags.options();
    let (map, services) = current_map(&scenario, &tables, args.map.as_deref(), &options)?;
    let service = services
        .iter()
        .find(|s| s.id == args.service)
        .ok_or_else(|| DriverError::Validation {
            path: "--service".into(),
            message: format!("no service {} in the scenario", args.service),
        })?;
    let update = ServiceUpdate {
        id: args.service.clone(),
        slo_latency_ms: args.slo,
        req_rate: args.rate,
    };
    let table = &tables[&service.model_id];
    let mut result = reconfigure_service(&map, &services, &update, table, &options.allocator())
        .map_err(|e| match e {
            segplan_core::allocator::AllocError::Config(c) => DriverError::Config(c),
            other => DriverError::Alloc(other),
        })?;
    result.map.renumber();
    for r in &result.diff.removed {
        eprintln!(
            "- gpu {} slot {} {} size {}",
            r.gpu,
            r.segment.start_slot,
            r.segment.service,
            r.segment.size()
        );
    }
    for r in &result.diff.added {
        eprintln!(
            "+ gpu {} slot {} {} size {}",
            r.gpu,
            r.segment.start_slot,
            r.segment.service,
            r.segment.size()
        );
    }
    let summary = summarize(&scenario, &result.map, &result.services, &options, 0.0)?;
    print_summary(&summary, false);
    emit(args.out.as_deref(), &map_text(&result.map))
}

fn cmd_enumerate(args: EnumerateArgs) -> Result<(), DriverError> {
    let geometry = if args.size2_at_slot5 {
        Geometry::with_size2_at_slot5()
    } else {
        Geometry::a100()
    };
    let configs = enumerate_full_configs(&geometry);
    let mut text = String::new();
    for c in &configs {
        text.push_str(&c.to_string());
        text.push('\n');
    }
    eprintln!("{} configurations", configs.len());
    emit(None, &text)
}

fn cmd_oracle(args: OracleArgs) -> Result<(), DriverError> {
    let (scenario, tables) = load(&args.scenario)?;
    let result = oracle_plan(
        &scenario,
        &tables,
        &OracleBounds::default(),
        &Geometry::a100(),
    )?;
    let planned = plan(&scenario, &tables, &PlanOptions::default())?;
    eprintln!(
        "oracle: {} GPCs on {} GPUs; pipeline: {} GPCs on {} GPUs",
        result.min_gpcs,
        result.min_gpus,
        planned
            .services
            .iter()
            .map(Service::total_gpcs)
            .sum::<u32>(),
        planned.summary.gpu_count
    );
    emit(None, &(serde_json::to_string_pretty(&result)? + "\n"))
}

fn cmd_report(args: ReportArgs) -> Result<(), DriverError> {
    let mut buf = Vec::new();
    let rows = merge_csv(&args.inputs, &mut buf)?;
    eprintln!("{rows} rows from {} files", args.inputs.len());
    emit(
        args.out.as_deref(),
        &String::from_utf8(buf).expect("csv is utf-8"),
    )
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<(), DriverError> {
    let text = fs::read_to_string(&args.models).map_err(io_err(&args.models))?;
    let mut file: ModelFile = serde_json::from_str(&text).map_err(|e| DriverError::Validation {
        path: args.models.display().to_string(),
        message: e.to_string(),
    })?;
    if let Some(seed) = args.seed {
        file.seed = seed;
    }
    let tables = file.synthesize()?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for (model, table) in &tables {
        let path = args.out.join(format!("{model}.csv"));
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        table.write_csv(io::BufWriter::new(f))?;
        eprintln!("{}: {} points", path.display(), table.len());
    }
    Ok(())
}
