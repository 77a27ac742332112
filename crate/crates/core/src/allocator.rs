//! Multi-GPU segment allocation.
//!
//! Segments of every service are queued by size and drained largest first,
//! each going to the first GPU (by index) with a legal free slot range. A
//! follow-up pass walks GPUs from last to first and breaks up lightly used
//! ones into size-1/size-2 segments that refill holes on earlier GPUs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::configurator::{configure, ConfigError, Service, Triplet};
use crate::mig::{
    FullConfig, Geometry, GpuState, InstanceSize, MigError, PlacedSegment, NUM_SLOTS,
};
use crate::profiles::ProfileTable;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("service {0} has no size-1 or size-2 triplet")]
    NoSmallTriplet(String),
    #[error("service {0} is not part of this deployment")]
    UnknownService(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mig(#[from] MigError),
    #[error("deployment map json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocatorConfig {
    /// GPUs holding at most this many GPCs are broken up by the optimization pass.
    pub threshold: u8,
    pub geometry: Geometry,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            threshold: 4,
            geometry: Geometry::a100(),
        }
    }
}

/// A segment waiting to be placed.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedSegment {
    pub service: String,
    pub triplet: Triplet,
}

/// One FIFO queue per instance size.
#[derive(Debug, Clone, Default)]
pub struct SegmentQueueSet {
    queues: [VecDeque<QueuedSegment>; 5],
}

impl SegmentQueueSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, service: &str, triplet: Triplet) {
        self.queues[triplet.instance_size.index()].push_back(QueuedSegment {
            service: service.to_owned(),
            triplet,
        });
    }

    pub fn queue(&self, size: InstanceSize) -> &VecDeque<QueuedSegment> {
        &self.queues[size.index()]
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Front of the largest non-empty queue.
    pub fn pop_largest(&mut self) -> Option<QueuedSegment> {
        self.queues.iter_mut().rev().find_map(VecDeque::pop_front)
    }
}

/// Where a segment landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementEvent {
    /// Position in [`DeploymentMap::gpus`].
    pub gpu_index: usize,
    pub gpu_id: u32,
    pub start_slot: u8,
    pub size: InstanceSize,
}

/// GPUs with their placed segments.
#[derive(Debug, Clone)]
pub struct DeploymentMap {
    gpus: Vec<GpuState>,
    /// Throughput released by the optimization pass and not yet re-covered,
    /// per service. Negative values are surplus carried forward.
    pub freed_rate: BTreeMap<String, f64>,
    geometry: Geometry,
    /// Indices of GPUs that can currently take a segment of each size.
    accepts: [BTreeSet<usize>; 5],
    /// Drained GPUs that must not receive new segments.
    retired: BTreeSet<usize>,
    next_id: u32,
}

impl PartialEq for DeploymentMap {
    fn eq(&self, other: &Self) -> bool {
        self.gpus == other.gpus
    }
}

impl DeploymentMap {
    pub fn new(geometry: Geometry) -> Self {
        DeploymentMap {
            gpus: Vec::new(),
            freed_rate: BTreeMap::new(),
            geometry,
            accepts: Default::default(),
            retired: BTreeSet::new(),
            next_id: 0,
        }
    }

    pub fn gpus(&self) -> &[GpuState] {
        &self.gpus
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// GPUs that hold at least one segment.
    pub fn gpu_count(&self) -> usize {
        self.gpus.iter().filter(|g| !g.is_empty()).count()
    }

    pub fn total_gpcs(&self) -> u32 {
        self.gpus.iter().map(|g| u32::from(g.num_gpcs())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.gpus.is_empty()
    }

    /// Every placed segment with its GPU id.
    pub fn placements(&self) -> impl Iterator<Item = (u32, &PlacedSegment)> + '_ {
        self.gpus
            .iter()
            .flat_map(|g| g.segments().iter().map(move |s| (g.id, s)))
    }

    /// Total placed throughput of one service.
    pub fn service_throughput(&self, service: &str) -> f64 {
        self.placements()
            .filter(|(_, s)| s.service == service)
            .map(|(_, s)| s.triplet.throughput)
            .sum()
    }

    /// Placed throughput summed per service.
    pub fn throughput_by_service(&self) -> BTreeMap<&str, f64> {
        let mut out = BTreeMap::new();
        for (_, s) in self.placements() {
            *out.entry(s.service.as_str()).or_insert(0.0) += s.triplet.throughput;
        }
        out
    }

    fn refresh(&mut self, index: usize) {
        for size in InstanceSize::ALL {
            let set = &mut self.accepts[size.index()];
            let fits = !self.retired.contains(&index)
                && self.gpus[index].find_slot(size, &self.geometry).is_some();
            if fits {
                set.insert(index);
            } else {
                set.remove(&index);
            }
        }
    }

    fn rebuild_index(&mut self) {
        self.accepts = Default::default();
        for i in 0..self.gpus.len() {
            self.refresh(i);
        }
    }

    /// Appends an empty GPU with a fresh id and returns its index.
    pub fn push_gpu(&mut self) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.gpus.push(GpuState::new(id));
        let index = self.gpus.len() - 1;
        self.refresh(index);
        index
    }

    /// First-fit: the lowest-index GPU with a legal free range, else a new GPU.
    pub fn place_first_fit(
        &mut self,
        service: &str,
        triplet: Triplet,
        exclude: Option<usize>,
    ) -> PlacementEvent {
        let size = triplet.instance_size;
        let index = self.accepts[size.index()]
            .iter()
            .copied()
            .find(|&i| Some(i) != exclude)
            .unwrap_or_else(|| self.push_gpu());
        let geometry = self.geometry;
        let start_slot = self.gpus[index]
            .try_place(service, triplet, &geometry)
            .expect("index lists only GPUs with room");
        self.refresh(index);
        PlacementEvent {
            gpu_index: index,
            gpu_id: self.gpus[index].id,
            start_slot,
            size,
        }
    }

    pub fn place_at(
        &mut self,
        index: usize,
        service: &str,
        triplet: Triplet,
        start_slot: u8,
    ) -> Result<(), MigError> {
        let geometry = self.geometry;
        self.gpus[index].place_at(service, triplet, start_slot, &geometry)?;
        self.refresh(index);
        Ok(())
    }

    pub fn remove(&mut self, index: usize, start_slot: u8) -> Result<PlacedSegment, MigError> {
        let seg = self.gpus[index].remove(start_slot)?;
        self.refresh(index);
        Ok(seg)
    }

    fn set_retired(&mut self, index: usize, retired: bool) {
        if retired {
            self.retired.insert(index);
        } else {
            self.retired.remove(&index);
        }
        self.refresh(index);
    }

    fn truncate(&mut self, len: usize) {
        self.gpus.truncate(len);
        for set in &mut self.accepts {
            set.retain(|&i| i < len);
        }
        self.retired.retain(|&i| i < len);
        self.reset_next_id();
    }

    fn reset_next_id(&mut self) {
        self.next_id = self.gpus.iter().map(|g| g.id + 1).max().unwrap_or(0);
    }

    /// Drops empty GPUs. Ids of the remaining GPUs are kept.
    pub fn compact(&mut self) {
        self.gpus.retain(|g| !g.is_empty());
        self.reset_next_id();
        self.retired.clear();
        self.rebuild_index();
    }

    /// Renumbers GPUs 0..n in their current order.
    pub fn renumber(&mut self) {
        for (i, g) in self.gpus.iter_mut().enumerate() {
            g.id = i as u32;
        }
        self.next_id = self.gpus.len() as u32;
    }

    pub fn to_file(&self) -> MapFile {
        MapFile {
            gpus: self
                .gpus
                .iter()
                .map(|g| GpuFile {
                    id: g.id,
                    segments: g
                        .segments()
                        .iter()
                        .map(|s| SegmentFile {
                            service: s.service.clone(),
                            instance_size: s.triplet.instance_size,
                            batch_size: s.triplet.batch_size,
                            process_count: s.triplet.process_count,
                            start_slot: s.start_slot,
                            throughput_rps: s.triplet.throughput,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a map from its file form, re-validating every slot range.
    /// Latencies are not part of the file and come back as zero.
    pub fn from_file(file: &MapFile, geometry: Geometry) -> Result<Self, MigError> {
        let mut map = DeploymentMap::new(geometry);
        for g in &file.gpus {
            let mut gpu = GpuState::new(g.id);
            for s in &g.segments {
                let triplet = Triplet {
                    instance_size: s.instance_size,
                    batch_size: s.batch_size,
                    process_count: s.process_count,
                    throughput: s.throughput_rps,
                    latency_ms: 0.0,
                };
                gpu.place_at(&s.service, triplet, s.start_slot, &geometry)?;
            }
            map.gpus.push(gpu);
        }
        map.reset_next_id();
        map.rebuild_index();
        Ok(map)
    }

    /// Sets every segment's latency from `lookup`, e.g. after loading JSON.
    pub fn restore_latencies<E>(
        &mut self,
        mut lookup: impl FnMut(&PlacedSegment) -> Result<f64, E>,
    ) -> Result<(), E> {
        for gpu in &mut self.gpus {
            let updates: Vec<(u8, f64)> = gpu
                .segments()
                .iter()
                .map(|s| lookup(s).map(|l| (s.start_slot, l)))
                .collect::<Result<_, _>>()?;
            for (start, latency) in updates {
                gpu.set_latency(start, latency);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("map serializes")
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), AllocError> {
        serde_json::to_writer_pretty(writer, &self.to_file())?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R, geometry: Geometry) -> Result<Self, AllocError> {
        let file: MapFile = serde_json::from_reader(reader)?;
        Ok(DeploymentMap::from_file(&file, geometry)?)
    }
}

/// Serialized deployment map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub gpus: Vec<GpuFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuFile {
    pub id: u32,
    pub segments: Vec<SegmentFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFile {
    pub service: String,
    pub instance_size: InstanceSize,
    pub batch_size: u32,
    pub process_count: u32,
    pub start_slot: u8,
    pub throughput_rps: f64,
}

/// Drains `queues` largest size first, first-fit over GPUs. `exclude` is
/// never chosen as a target.
pub fn allocate(
    map: &mut DeploymentMap,
    queues: &mut SegmentQueueSet,
    exclude: Option<usize>,
) -> Vec<PlacementEvent> {
    let mut events = Vec::with_capacity(queues.len());
    while let Some(seg) = queues.pop_largest() {
        events.push(map.place_first_fit(&seg.service, seg.triplet, exclude));
    }
    events
}

/// Queues every configured segment (optimal copies before the last segment,
/// services in input order) and allocates them onto fresh GPUs.
pub fn segment_relocation(services: &[Service], config: &AllocatorConfig) -> DeploymentMap {
    let mut queues = SegmentQueueSet::new();
    for s in services {
        for t in s.segments() {
            queues.enqueue(&s.id, t);
        }
    }
    let mut map = DeploymentMap::new(config.geometry);
    allocate(&mut map, &mut queues, None);
    map
}

/// Fewest-GPC set of size-1/size-2 copies of the service's triplets whose
/// throughput covers `freed_rate`; fewer segments breaks GPC ties.
pub fn small_segments(service: &Service, freed_rate: f64) -> Result<Vec<Triplet>, AllocError> {
    if freed_rate <= 0.0 {
        return Ok(Vec::new());
    }
    let one = service.triplet(InstanceSize::ONE).copied();
    let two = service.triplet(InstanceSize::TWO).copied();
    if one.is_none() && two.is_none() {
        return Err(AllocError::NoSmallTriplet(service.id.clone()));
    }
    let max_twos = two.map_or(0, |t| (freed_rate / t.throughput).ceil() as u32);
    let mut best: Option<(u32, u32, u32, u32)> = None; // (gpcs, count, twos, ones)
    for twos in 0..=max_twos {
        let rest = freed_rate - f64::from(twos) * two.map_or(0.0, |t| t.throughput);
        let ones = if rest <= 0.0 {
            0
        } else if let Some(t) = one {
            (rest / t.throughput).ceil() as u32
        } else {
            continue;
        };
        let candidate = (ones + 2 * twos, ones + twos, twos, ones);
        if best.is_none_or(|b| (candidate.0, candidate.1) < (b.0, b.1)) {
            best = Some(candidate);
        }
    }
    let (_, _, twos, ones) = best.expect("a covering combination exists");
    let mut out = Vec::new();
    if let Some(t) = two {
        out.extend(std::iter::repeat_n(t, twos as usize));
    }
    if let Some(t) = one {
        out.extend(std::iter::repeat_n(t, ones as usize));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizationEvent {
    /// All segments of the GPU were replaced by small segments placed
    /// elsewhere; the drained GPU itself was not a refill target.
    Drained {
        gpu: u32,
        freed: usize,
        placed: usize,
    },
    /// Left as it was because a service could not be split.
    Skipped { gpu: u32, reason: String },
    /// Rolled back because the refill freed no GPU and did not pack denser.
    Reverted { gpu: u32 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizationLog {
    pub events: Vec<OptimizationEvent>,
}

/// Allocated GPCs and non-empty GPUs.
fn usage(map: &DeploymentMap) -> (u64, u64) {
    (u64::from(map.total_gpcs()), map.gpu_count() as u64)
}

/// True if `after` uses fewer GPUs than `before`, or as many GPUs with
/// more GPCs allocated per GPU.
fn improves(before: (u64, u64), after: (u64, u64)) -> bool {
    let (gpcs_b, gpus_b) = before;
    let (gpcs_a, gpus_a) = after;
    if gpus_a != gpus_b {
        return gpus_a < gpus_b;
    }
    // gpcs_a / gpus_a > gpcs_b / gpus_b
    gpcs_a * gpus_b > gpcs_b * gpus_a
}

/// Single last-to-first pass breaking up GPUs at or below the threshold.
pub fn allocation_optimization(
    mut map: DeploymentMap,
    services: &[Service],
    config: &AllocatorConfig,
) -> (DeploymentMap, OptimizationLog) {
    let by_id: BTreeMap<&str, &Service> = services.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut log = OptimizationLog::default();

    for index in (0..map.gpus.len()).rev() {
        let gpu = &map.gpus[index];
        if gpu.is_empty() || map.retired.contains(&index) || gpu.num_gpcs() > config.threshold {
            continue;
        }
        let gpu_id = gpu.id;
        let before = usage(&map);
        let original_len = map.gpus.len();
        let freed_snapshot = map.freed_rate.clone();
        let originals: Vec<PlacedSegment> = gpu.segments().to_vec();

        let mut queues = SegmentQueueSet::new();
        let mut failure = None;
        for seg in &originals {
            *map.freed_rate.entry(seg.service.clone()).or_insert(0.0) += seg.triplet.throughput;
            map.remove(index, seg.start_slot)
                .expect("segment is on this GPU");
            let result = match by_id.get(seg.service.as_str()) {
                Some(service) => small_segments(service, map.freed_rate[&seg.service]),
                None => Err(AllocError::UnknownService(seg.service.clone())),
            };
            match result {
                Ok(smalls) => {
                    for t in smalls {
                        *map.freed_rate.get_mut(&seg.service).expect("entry exists") -=
                            t.throughput;
                        queues.enqueue(&seg.service, t);
                    }
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }

        let restore = |map: &mut DeploymentMap| {
            for seg in &originals {
                if !map.gpus[index]
                    .segments()
                    .iter()
                    .any(|s| s.start_slot == seg.start_slot)
                {
                    map.place_at(index, &seg.service, seg.triplet, seg.start_slot)
                        .expect("original slots are free again");
                }
            }
            map.freed_rate = freed_snapshot.clone();
        };

        if let Some(reason) = failure {
            restore(&mut map);
            log.events.push(OptimizationEvent::Skipped {
                gpu: gpu_id,
                reason,
            });
            continue;
        }

        map.set_retired(index, true);
        let events = allocate(&mut map, &mut queues, Some(index));

        if improves(before, usage(&map)) {
            log.events.push(OptimizationEvent::Drained {
                gpu: gpu_id,
                freed: originals.len(),
                placed: events.len(),
            });
        } else {
            for e in events.iter().rev() {
                if e.gpu_index < original_len {
                    map.remove(e.gpu_index, e.start_slot).expect("just placed");
                }
            }
            map.truncate(original_len);
            map.set_retired(index, false);
            restore(&mut map);
            log.events.push(OptimizationEvent::Reverted { gpu: gpu_id });
        }
    }

    map.compact();
    (map, log)
}

/// A placement as it appears in a diff.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementRecord {
    pub gpu: u32,
    pub segment: PlacedSegment,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlacementDiff {
    pub removed: Vec<PlacementRecord>,
    pub added: Vec<PlacementRecord>,
}

impl PlacementDiff {
    pub fn between(old: &DeploymentMap, new: &DeploymentMap) -> Self {
        let records = |m: &DeploymentMap| -> Vec<PlacementRecord> {
            m.placements()
                .map(|(gpu, s)| PlacementRecord {
                    gpu,
                    segment: s.clone(),
                })
                .collect()
        };
        let old_r = records(old);
        let new_r = records(new);
        PlacementDiff {
            removed: old_r
                .iter()
                .filter(|r| !new_r.contains(r))
                .cloned()
                .collect(),
            added: new_r
                .iter()
                .filter(|r| !old_r.contains(r))
                .cloned()
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.added.is_empty()
    }

    /// Services with at least one changed placement.
    pub fn services(&self) -> BTreeSet<&str> {
        self.removed
            .iter()
            .chain(&self.added)
            .map(|r| r.segment.service.as_str())
            .collect()
    }
}

/// New demand for one existing service.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceUpdate {
    pub id: String,
    pub slo_latency_ms: Option<f64>,
    pub req_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Reconfiguration {
    pub map: DeploymentMap,
    pub services: Vec<Service>,
    pub diff: PlacementDiff,
    pub log: OptimizationLog,
}

/// Re-plans one service in place: its segments are removed, it is
/// configured again from its existing profile, the new segments are
/// relocated into the current map, and the optimization pass runs. Other
/// services keep their placements unless the optimization pass moves them.
pub fn reconfigure_service(
    map: &DeploymentMap,
    services: &[Service],
    update: &ServiceUpdate,
    table: &ProfileTable,
    config: &AllocatorConfig,
) -> Result<Reconfiguration, AllocError> {
    let position = services
        .iter()
        .position(|s| s.id == update.id)
        .ok_or_else(|| AllocError::UnknownService(update.id.clone()))?;
    let old = &services[position];
    let fresh = Service::new(
        old.id.clone(),
        old.model_id.clone(),
        update.slo_latency_ms.unwrap_or(old.slo_latency_ms),
        update.req_rate.unwrap_or(old.req_rate),
    );
    let fresh = configure(fresh, table)?;

    let mut services = services.to_vec();
    let unchanged = fresh.segments() == old.segments();
    services[position] = fresh.clone();
    if unchanged {
        return Ok(Reconfiguration {
            map: map.clone(),
            services,
            diff: PlacementDiff::default(),
            log: OptimizationLog::default(),
        });
    }

    let mut next = map.clone();
    next.freed_rate.remove(&fresh.id);
    for index in 0..next.gpus.len() {
        let slots: Vec<u8> = next.gpus[index]
            .segments()
            .iter()
            .filter(|s| s.service == fresh.id)
            .map(|s| s.start_slot)
            .collect();
        for slot in slots {
            next.remove(index, slot)?;
        }
    }
    let mut queues = SegmentQueueSet::new();
    for t in fresh.segments() {
        queues.enqueue(&fresh.id, t);
    }
    allocate(&mut next, &mut queues, None);
    let (next, log) = allocation_optimization(next, &services, config);
    let diff = PlacementDiff::between(map, &next);
    Ok(Reconfiguration {
        map: next,
        services,
        diff,
        log,
    })
}

/// True if every GPU's arrangement is completable into a full configuration.
pub fn is_mig_valid(map: &DeploymentMap) -> bool {
    // one enumeration per geometry variant for the life of the process
    static CONFIGS: [OnceLock<BTreeSet<FullConfig>>; 2] = [OnceLock::new(), OnceLock::new()];
    let slot = usize::from(map.geometry != Geometry::a100());
    let configs = CONFIGS[slot].get_or_init(|| crate::mig::enumerate_full_configs(&map.geometry));
    map.gpus
        .iter()
        .all(|g| usize::from(g.num_gpcs()) <= NUM_SLOTS && crate::mig::is_prefix_valid(g, configs))
}

/// True if every service's placed throughput covers its request rate.
pub fn covers_demand(map: &DeploymentMap, services: &[Service]) -> bool {
    let placed = map.throughput_by_service();
    services
        .iter()
        .all(|s| placed.get(s.id.as_str()).copied().unwrap_or(0.0) >= s.req_rate)
}
