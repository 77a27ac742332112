//! Scenario files and the configure → relocate → optimize pipeline.

mod oracle;

pub use oracle::{
    min_gpcs_for_service, oracle_plan, oracle_services, packable_multisets, OracleBounds,
    OracleResult, OracleService, SizeCounts,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{
    allocation_optimization, covers_demand, is_mig_valid, segment_relocation, AllocError,
    AllocatorConfig, DeploymentMap, OptimizationLog,
};
use crate::configurator::{configure, ConfigError, Service};
use crate::evaluation::{
    allocated_fraction, external_fragmentation, MetricError, SimError, DEFAULT_SMS_PER_GPC,
};
use crate::mig::Geometry;
use crate::profiles::{load_profile_dir, ProfileError, ProfileSet};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("infeasible SLO: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Infeasible(Vec<ConfigError>),
    #[error("oracle bounds exceeded: {0}")]
    OracleBounds(String),
    #[error("planned map failed validation: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DriverError {
    fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        DriverError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DriverError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// Process exit code: 2 for bad input, 3 for an unsatisfiable SLO, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::Infeasible(_) | DriverError::Config(ConfigError::InfeasibleSlo { .. }) => {
                3
            }
            DriverError::Validation { .. }
            | DriverError::OracleBounds(_)
            | DriverError::Profile(_)
            | DriverError::Json(_)
            | DriverError::Csv(_)
            | DriverError::Io { .. } => 2,
            _ => 1,
        }
    }
}

/// One service line of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub model: String,
    pub request_rate: f64,
    pub slo_latency_ms: f64,
    /// Defaults to the model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub services: Vec<ScenarioEntry>,
    /// Profile directory, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSpec {
    pub id: String,
    pub model: String,
    pub req_rate: f64,
    pub slo_latency_ms: f64,
}

impl ServiceSpec {
    pub fn to_service(&self) -> Service {
        Service::new(
            self.id.clone(),
            self.model.clone(),
            self.slo_latency_ms,
            self.req_rate,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub services: Vec<ServiceSpec>,
    /// Resolved profile directory, if the file names one.
    pub profiles: Option<PathBuf>,
}

impl Scenario {
    /// Checks every field that does not depend on profiles.
    pub fn from_file(file: ScenarioFile, base: Option<&Path>) -> Result<Self, DriverError> {
        let mut ids = BTreeSet::new();
        let mut services = Vec::with_capacity(file.services.len());
        for (i, e) in file.services.into_iter().enumerate() {
            let path = |field: &str| format!("services[{i}].{field}");
            if e.model.trim().is_empty() {
                return Err(DriverError::validation(path("model"), "empty model id"));
            }
            if !(e.request_rate >= 0.0 && e.request_rate.is_finite()) {
                return Err(DriverError::validation(
                    path("request_rate"),
                    format!("must be a non-negative number, got {}", e.request_rate),
                ));
            }
            if !(e.slo_latency_ms > 0.0 && e.slo_latency_ms.is_finite()) {
                return Err(DriverError::validation(
                    path("slo_latency_ms"),
                    format!("must be positive, got {}", e.slo_latency_ms),
                ));
            }
            let id = e.id.unwrap_or_else(|| e.model.clone());
            if !ids.insert(id.clone()) {
                return Err(DriverError::validation(
                    path("id"),
                    format!("duplicate service id {id}"),
                ));
            }
            services.push(ServiceSpec {
                id,
                model: e.model,
                req_rate: e.request_rate,
                slo_latency_ms: e.slo_latency_ms,
            });
        }
        let profiles = file.profiles.map(|p| match base {
            Some(dir) => dir.join(p),
            None => PathBuf::from(p),
        });
        Ok(Scenario {
            name: file.name,
            services,
            profiles,
        })
    }

    /// Every service's model must have a profile table.
    pub fn check_models(&self, tables: &ProfileSet) -> Result<(), DriverError> {
        for (i, s) in self.services.iter().enumerate() {
            if !tables.contains_key(&s.model) {
                return Err(DriverError::validation(
                    format!("services[{i}].model"),
                    format!("no profile table for model {}", s.model),
                ));
            }
        }
        Ok(())
    }
}

pub fn parse_scenario<R: Read>(reader: R, base: Option<&Path>) -> Result<Scenario, DriverError> {
    let file: ScenarioFile = serde_json::from_reader(reader)
        .map_err(|e| DriverError::validation("scenario", e.to_string()))?;
    Scenario::from_file(file, base)
}

/// Reads a scenario; a relative profile path is resolved against the
/// scenario file's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, DriverError> {
    let file = fs::File::open(path).map_err(|e| DriverError::io(path, e))?;
    parse_scenario(file, path.parent()).map_err(|e| match e {
        DriverError::Validation { path: p, message } => DriverError::Validation {
            path: format!("{}: {p}", path.display()),
            message,
        },
        other => other,
    })
}

/// Loads the profiles named by `override_dir`, else by the scenario.
pub fn load_profiles(
    scenario: &Scenario,
    override_dir: Option<&Path>,
) -> Result<ProfileSet, DriverError> {
    let dir = override_dir
        .map(Path::to_path_buf)
        .or_else(|| scenario.profiles.clone())
        .ok_or_else(|| DriverError::validation("profiles", "no profile directory given"))?;
    let tables = load_profile_dir(&dir)?;
    scenario.check_models(&tables)?;
    Ok(tables)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub optimize: bool,
    /// Only consider profile points with one process.
    pub single_process: bool,
    pub threshold: u8,
    pub sms_per_gpc: u32,
    pub geometry: Geometry,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            optimize: true,
            single_process: false,
            threshold: 4,
            sms_per_gpc: DEFAULT_SMS_PER_GPC,
            geometry: Geometry::a100(),
        }
    }
}

impl PlanOptions {
    pub fn allocator(&self) -> AllocatorConfig {
        AllocatorConfig {
            threshold: self.threshold,
            geometry: self.geometry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSummary {
    pub id: String,
    pub model: String,
    pub req_rate: f64,
    pub covered_rate: f64,
    pub segments: usize,
    pub gpcs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub scenario: String,
    pub optimized: bool,
    pub single_process: bool,
    pub gpu_count: usize,
    pub total_gpcs: u32,
    pub external_fragmentation: f64,
    pub allocated_fraction: f64,
    pub planning_time_ms: f64,
    pub services: Vec<ServiceSummary>,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub map: DeploymentMap,
    pub services: Vec<Service>,
    pub log: OptimizationLog,
    pub summary: PlanSummary,
}

/// Configures every service in input order. All infeasible services are
/// reported together.
pub fn configure_services(
    scenario: &Scenario,
    tables: &ProfileSet,
    single_process: bool,
) -> Result<Vec<Service>, DriverError> {
    scenario.check_models(tables)?;
    let mut services = Vec::with_capacity(scenario.services.len());
    let mut infeasible = Vec::new();
    for spec in &scenario.services {
        let table = &tables[&spec.model];
        let result = if single_process {
            configure(spec.to_service(), &table.filtered(|p| p.process_count == 1))
        } else {
            configure(spec.to_service(), table)
        };
        match result {
            Ok(s) => services.push(s),
            Err(e @ ConfigError::InfeasibleSlo { .. }) => infeasible.push(e),
            Err(e) => return Err(e.into()),
        }
    }
    if !infeasible.is_empty() {
        return Err(DriverError::Infeasible(infeasible));
    }
    Ok(services)
}

/// Runs the whole pipeline and checks its output before returning it.
pub fn plan(
    scenario: &Scenario,
    tables: &ProfileSet,
    options: &PlanOptions,
) -> Result<PlanResult, DriverError> {
    let start = Instant::now();
    let services = configure_services(scenario, tables, options.single_process)?;
    let config = options.allocator();
    let map = segment_relocation(&services, &config);
    let (mut map, log) = if options.optimize {
        allocation_optimization(map, &services, &config)
    } else {
        (map, OptimizationLog::default())
    };
    map.renumber();
    let planning_time_ms = start.elapsed().as_secs_f64() * 1000.0;

    if !is_mig_valid(&map) {
        return Err(DriverError::InvalidPlan(
            "a GPU holds an invalid MIG arrangement".into(),
        ));
    }
    if !covers_demand(&map, &services) {
        return Err(DriverError::InvalidPlan(
            "placed throughput does not cover demand".into(),
        ));
    }
    let summary = summarize(scenario, &map, &services, options, planning_time_ms)?;
    Ok(PlanResult {
        map,
        services,
        log,
        summary,
    })
}

pub fn summarize(
    scenario: &Scenario,
    map: &DeploymentMap,
    services: &[Service],
    options: &PlanOptions,
    planning_time_ms: f64,
) -> Result<PlanSummary, DriverError> {
    let (frag, alloc) = if map.gpus().is_empty() {
        (0.0, 0.0)
    } else {
        (
            external_fragmentation(map, options.sms_per_gpc)?,
            allocated_fraction(map, options.sms_per_gpc)?,
        )
    };
    // (throughput, segments, GPCs) per service
    let mut placed: BTreeMap<&str, (f64, usize, u32)> = BTreeMap::new();
    for (_, p) in map.placements() {
        let entry = placed.entry(p.service.as_str()).or_default();
        entry.0 += p.triplet.throughput;
        entry.1 += 1;
        entry.2 += u32::from(p.size().gpcs());
    }
    Ok(PlanSummary {
        scenario: scenario.name.clone(),
        optimized: options.optimize,
        single_process: options.single_process,
        gpu_count: map.gpu_count(),
        total_gpcs: map.total_gpcs(),
        external_fragmentation: frag,
        allocated_fraction: alloc,
        planning_time_ms,
        services: services
            .iter()
            .map(|s| {
                let (covered_rate, segments, gpcs) =
                    placed.get(s.id.as_str()).copied().unwrap_or_default();
                ServiceSummary {
                    id: s.id.clone(),
                    model: s.model_id.clone(),
                    req_rate: s.req_rate,
                    covered_rate,
                    segments,
                    gpcs,
                }
            })
            .collect(),
    })
}

/// Loads a deployment map and restores batch latencies from the profiles.
pub fn load_map(
    path: &Path,
    services: &[Service],
    tables: &ProfileSet,
    geometry: Geometry,
) -> Result<DeploymentMap, DriverError> {
    let file = fs::File::open(path).map_err(|e| DriverError::io(path, e))?;
    let mut map = DeploymentMap::read_json(file, geometry)?;
    map.restore_latencies(|seg| {
        let service = services
            .iter()
            .find(|s| s.id == seg.service)
            .ok_or_else(|| {
                DriverError::validation(
                    path.display().to_string(),
                    format!("unknown service {}", seg.service),
                )
            })?;
        let t = &seg.triplet;
        let key = crate::profiles::ProfileKey::new(t.instance_size, t.batch_size, t.process_count);
        tables
            .get(&service.model_id)
            .and_then(|table| table.get(&key))
            .map(|p| p.latency_ms)
            .ok_or_else(|| {
                DriverError::validation(
                    path.display().to_string(),
                    format!("no profile point {key} for service {}", seg.service),
                )
            })
    })?;
    Ok(map)
}

/// Concatenates CSV files with identical headers, prefixing each row with
/// the source file's stem.
pub fn merge_csv<W: Write>(inputs: &[PathBuf], writer: W) -> Result<usize, DriverError> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header: Option<csv::StringRecord> = None;
    let mut rows = 0;
    for path in inputs {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DriverError::io(path, io),
            other => DriverError::validation(path.display().to_string(), format!("{other:?}")),
        })?;
        let h = reader.headers()?.clone();
        match &header {
            None => {
                let mut full = csv::StringRecord::from(vec!["source"]);
                full.extend(h.iter());
                out.write_record(&full)?;
                header = Some(h);
            }
            Some(first) if *first != h => {
                return Err(DriverError::validation(
                    path.display().to_string(),
                    "header differs from the first input",
                ));
            }
            Some(_) => {}
        }
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for record in reader.records() {
            let record = record?;
            let mut full = csv::StringRecord::from(vec![source.as_str()]);
            full.extend(record.iter());
            out.write_record(&full)?;
            rows += 1;
        }
    }
    out.flush().map_err(|e| DriverError::Csv(e.into()))?;
    Ok(rows)
}
