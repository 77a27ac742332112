//! Per-model profile tables: measured throughput and latency for every
//! (instance size, batch size, process count) cell.

mod synth;

pub use synth::{synthesize_profile, Anchor, ModelFile, ModelParams};

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mig::InstanceSize;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: instance size {size} is not one of 1, 2, 3, 4, 7")]
    InvalidSize { row: usize, size: u32 },
    #[error("row {row}: {field} must be {constraint}, got {value}")]
    InvalidValue {
        row: usize,
        field: &'static str,
        constraint: &'static str,
        value: f64,
    },
    #[error("duplicate profile point for {model} at {key}")]
    DuplicateKey { model: String, key: ProfileKey },
    #[error("row {row}: model {found} in a table for {expected}")]
    MixedModels {
        row: usize,
        expected: String,
        found: String,
    },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

/// Identifies one cell of a profile table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProfileKey {
    pub instance_size: InstanceSize,
    pub batch_size: u32,
    pub process_count: u32,
}

impl ProfileKey {
    pub fn new(instance_size: InstanceSize, batch_size: u32, process_count: u32) -> Self {
        ProfileKey {
            instance_size,
            batch_size,
            process_count,
        }
    }
}

impl std::fmt::Display for ProfileKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(size {}, batch {}, processes {})",
            self.instance_size, self.batch_size, self.process_count
        )
    }
}

/// One measured (or synthesized) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub model_id: String,
    pub instance_size: InstanceSize,
    pub batch_size: u32,
    pub process_count: u32,
    #[serde(rename = "throughput_rps")]
    pub throughput: f64,
    pub latency_ms: f64,
    #[serde(rename = "memory_gb")]
    pub memory_required: f64,
}

impl ProfilePoint {
    pub fn key(&self) -> ProfileKey {
        ProfileKey::new(self.instance_size, self.batch_size, self.process_count)
    }
}

/// On-disk row. Instance size is kept raw so that an out-of-range value is a
/// validation error rather than a parse error.
#[derive(Debug, Deserialize)]
struct RawRow {
    model_id: String,
    instance_size: u32,
    batch_size: u32,
    process_count: u32,
    throughput_rps: f64,
    latency_ms: f64,
    memory_gb: f64,
}

impl RawRow {
    fn validate(self, row: usize) -> Result<ProfilePoint, ProfileError> {
        let instance_size =
            InstanceSize::new(self.instance_size).map_err(|_| ProfileError::InvalidSize {
                row,
                size: self.instance_size,
            })?;
        let positive = |field, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ProfileError::InvalidValue {
                    row,
                    field,
                    constraint: "positive",
                    value,
                })
            }
        };
        positive("batch_size", f64::from(self.batch_size))?;
        positive("process_count", f64::from(self.process_count))?;
        positive("throughput_rps", self.throughput_rps)?;
        positive("latency_ms", self.latency_ms)?;
        if !(self.memory_gb >= 0.0 && self.memory_gb.is_finite()) {
            return Err(ProfileError::InvalidValue {
                row,
                field: "memory_gb",
                constraint: "non-negative",
                value: self.memory_gb,
            });
        }
        Ok(ProfilePoint {
            model_id: self.model_id,
            instance_size,
            batch_size: self.batch_size,
            process_count: self.process_count,
            throughput: self.throughput_rps,
            latency_ms: self.latency_ms,
            memory_required: self.memory_gb,
        })
    }
}

/// What the `latency_ms` column measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyKind {
    /// Time for one process to execute one full batch. SLO checks add
    /// queueing delay on top of this.
    #[default]
    PerBatchService,
}

/// Profile of one model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileTable {
    model_id: String,
    latency_kind: LatencyKind,
    points: BTreeMap<ProfileKey, ProfilePoint>,
}

impl ProfileTable {
    pub fn new(model_id: impl Into<String>) -> Self {
        ProfileTable {
            model_id: model_id.into(),
            ..Default::default()
        }
    }

    /// Builds a table, rejecting duplicate keys and foreign model ids.
    pub fn from_points(
        model_id: impl Into<String>,
        points: impl IntoIterator<Item = ProfilePoint>,
    ) -> Result<Self, ProfileError> {
        let mut table = ProfileTable::new(model_id);
        for (row, point) in points.into_iter().enumerate() {
            table.insert(row + 1, point)?;
        }
        Ok(table)
    }

    fn insert(&mut self, row: usize, point: ProfilePoint) -> Result<(), ProfileError> {
        if self.points.is_empty() && self.model_id.is_empty() {
            self.model_id = point.model_id.clone();
        }
        if point.model_id != self.model_id {
            return Err(ProfileError::MixedModels {
                row,
                expected: self.model_id.clone(),
                found: point.model_id,
            });
        }
        let key = point.key();
        if self.points.contains_key(&key) {
            return Err(ProfileError::DuplicateKey {
                model: self.model_id.clone(),
                key,
            });
        }
        self.points.insert(key, point);
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn latency_kind(&self) -> LatencyKind {
        self.latency_kind
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, key: &ProfileKey) -> Option<&ProfilePoint> {
        self.points.get(key)
    }

    /// Points in key order.
    pub fn points(&self) -> impl Iterator<Item = &ProfilePoint> + '_ {
        self.points.values()
    }

    /// Keeps only points satisfying `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&ProfilePoint) -> bool) -> ProfileTable {
        ProfileTable {
            model_id: self.model_id.clone(),
            latency_kind: self.latency_kind,
            points: self
                .points
                .iter()
                .filter(|(_, p)| keep(p))
                .map(|(k, p)| (*k, p.clone()))
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ProfileError> {
        let mut w = csv::Writer::from_writer(writer);
        if self.points.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        for p in self.points.values() {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| ProfileError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), ProfileError> {
        let points: Vec<&ProfilePoint> = self.points.values().collect();
        serde_json::to_writer_pretty(writer, &points)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "model_id",
    "instance_size",
    "batch_size",
    "process_count",
    "throughput_rps",
    "latency_ms",
    "memory_gb",
];

fn read_rows<R: Read>(source: R, format: Format) -> Result<Vec<ProfilePoint>, ProfileError> {
    let raw: Vec<(usize, RawRow)> = match format {
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(source);
            let mut rows = Vec::new();
            for (i, record) in reader.deserialize::<RawRow>().enumerate() {
                let row = i + 1;
                let record = record.map_err(|e| ProfileError::Parse {
                    row,
                    message: e.to_string(),
                })?;
                rows.push((row, record));
            }
            rows
        }
        Format::Json => {
            let values: Vec<serde_json::Value> = serde_json::from_reader(source)?;
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    serde_json::from_value::<RawRow>(v)
                        .map(|r| (i + 1, r))
                        .map_err(|e| ProfileError::Parse {
                            row: i + 1,
                            message: e.to_string(),
                        })
                })
                .collect::<Result<_, _>>()?
        }
    };
    raw.into_iter().map(|(row, r)| r.validate(row)).collect()
}

/// Reads a single-model profile table. Rows are numbered from 1 after the header.
pub fn load_profile_table<R: Read>(
    source: R,
    format: Format,
) -> Result<ProfileTable, ProfileError> {
    let mut table = ProfileTable::default();
    for (i, point) in read_rows(source, format)?.into_iter().enumerate() {
        table.insert(i + 1, point)?;
    }
    Ok(table)
}

/// Reads a file that may hold several models, one table per model.
pub fn load_profile_tables<R: Read>(
    source: R,
    format: Format,
) -> Result<Vec<ProfileTable>, ProfileError> {
    let mut tables: BTreeMap<String, ProfileTable> = BTreeMap::new();
    for (i, point) in read_rows(source, format)?.into_iter().enumerate() {
        tables
            .entry(point.model_id.clone())
            .or_insert_with(|| ProfileTable::new(point.model_id.clone()))
            .insert(i + 1, point)?;
    }
    Ok(tables.into_values().collect())
}

/// Profile tables keyed by model id.
pub type ProfileSet = BTreeMap<String, ProfileTable>;

/// Loads every `.csv` and `.json` file under `dir`.
pub fn load_profile_dir(dir: &Path) -> Result<ProfileSet, ProfileError> {
    let io_err = |source| ProfileError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err)?;
    paths.sort();
    let mut set = ProfileSet::new();
    for path in paths {
        let Some(format) = Format::from_path(&path) else {
            continue;
        };
        let file = fs::File::open(&path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for table in load_profile_tables(file, format)? {
            if set.contains_key(table.model_id()) {
                return Err(ProfileError::Parse {
                    row: 0,
                    message: format!(
                        "model {} defined twice (again in {})",
                        table.model_id(),
                        path.display()
                    ),
                });
            }
            set.insert(table.model_id().to_owned(), table);
        }
    }
    Ok(set)
}

/// GPU memory (GB) available to an instance of each size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryMap {
    by_size: [f64; 5],
}

impl MemoryMap {
    pub fn new(gb: [(InstanceSize, f64); 5]) -> Self {
        let mut by_size = [0.0; 5];
        for (size, cap) in gb {
            by_size[size.index()] = cap;
        }
        MemoryMap { by_size }
    }

    pub fn capacity(&self, size: InstanceSize) -> f64 {
        self.by_size[size.index()]
    }
}

impl Default for MemoryMap {
    /// 80 GB A100 slices.
    fn default() -> Self {
        MemoryMap::new([
            (InstanceSize::ONE, 10.0),
            (InstanceSize::TWO, 20.0),
            (InstanceSize::THREE, 40.0),
            (InstanceSize::FOUR, 40.0),
            (InstanceSize::SEVEN, 80.0),
        ])
    }
}

/// Drops points whose memory demand exceeds their instance's memory.
pub fn filter_feasible(table: &ProfileTable, memory: &MemoryMap) -> ProfileTable {
    table.filtered(|p| p.memory_required <= memory.capacity(p.instance_size))
}

/// Batch sizes and process counts explored when profiling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileBounds {
    pub batch_sizes: Vec<u32>,
    pub process_counts: Vec<u32>,
}

impl Default for ProfileBounds {
    fn default() -> Self {
        ProfileBounds {
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128],
            process_counts: vec![1, 2, 3],
        }
    }
}
