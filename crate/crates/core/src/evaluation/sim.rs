//! Discrete-event simulation of batched request service.
//!
//! Each service has one FIFO queue shared by all of its segments. A segment
//! runs `process_count` independent lanes; whenever a lane is idle and the
//! queue is non-empty it takes up to `batch_size` requests and is busy for
//! the profiled batch latency. A batch violates the SLO when its oldest
//! request's wait plus the batch latency exceeds the service's SLO.
//! Time is kept in integer nanoseconds.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActivityReport, SegmentActivity};
use crate::allocator::DeploymentMap;
use crate::configurator::Service;
use crate::mig::NUM_SLOTS;
use crate::profiles::{ProfileKey, ProfileSet};

const NS_PER_S: f64 = 1e9;
const NS_PER_MS: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no profile point for service {service} (model {model}) at {key}")]
    MissingProfile {
        service: String,
        model: String,
        key: ProfileKey,
    },
    #[error("placed segment belongs to unknown service {0}")]
    UnknownService(String),
    #[error("service {0} has a positive request rate but no placed segments")]
    NoSegments(String),
    #[error("invalid simulation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalKind {
    /// Fixed interarrival time 1/rate, first arrival at time zero.
    Deterministic,
    /// Exponential interarrival times.
    Poisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub arrivals: ArrivalKind,
    /// Requests per second per service id. Missing services receive nothing.
    pub rates: BTreeMap<String, f64>,
    pub horizon_s: f64,
}

impl Workload {
    /// Every service at its planned request rate.
    pub fn nominal(arrivals: ArrivalKind, services: &[Service], horizon_s: f64) -> Self {
        Workload {
            arrivals,
            rates: services
                .iter()
                .map(|s| (s.id.clone(), s.req_rate))
                .collect(),
            horizon_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub service: String,
    pub model: String,
    pub slo_latency_ms: f64,
    pub arrived: u64,
    pub dispatched: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub queued_at_horizon: u64,
    pub max_queue_len: u64,
    pub batches: u64,
    pub violations: u64,
    /// 1 - violations/batches; 1.0 when no batch ran.
    pub compliance: f64,
    pub throughput_rps: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_p99_ms: f64,
    pub latency_max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub gpu: u32,
    pub start_slot: u8,
    pub service: String,
    pub instance_size: u8,
    pub busy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub horizon_s: f64,
    pub arrivals: ArrivalKind,
    pub services: Vec<ServiceStats>,
    pub segments: Vec<SegmentStats>,
}

/// One CSV row: one service in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub seed: u64,
    pub service: String,
    pub model: String,
    pub arrived: u64,
    pub completed: u64,
    pub batches: u64,
    pub violations: u64,
    pub compliance: f64,
    pub throughput_rps: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub latency_max_ms: f64,
}

impl SimReport {
    pub fn rows(&self) -> Vec<SimRow> {
        self.services
            .iter()
            .map(|s| SimRow {
                seed: self.seed,
                service: s.service.clone(),
                model: s.model.clone(),
                arrived: s.arrived,
                completed: s.completed,
                batches: s.batches,
                violations: s.violations,
                compliance: s.compliance,
                throughput_rps: s.throughput_rps,
                latency_p50_ms: s.latency_p50_ms,
                latency_p99_ms: s.latency_p99_ms,
                latency_max_ms: s.latency_max_ms,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn service(&self, id: &str) -> Option<&ServiceStats> {
        self.services.iter().find(|s| s.service == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub report: SimReport,
    pub activity: ActivityReport,
}

/// Compliance per service; `None` where no batch ran.
pub fn slo_compliance(report: &SimReport) -> BTreeMap<String, Option<f64>> {
    report
        .services
        .iter()
        .map(|s| {
            (
                s.service.clone(),
                super::compliance(s.batches, s.violations).ok(),
            )
        })
        .collect()
}

struct SegmentState {
    service: usize,
    batch_size: usize,
    latency_ns: u64,
    idle_lanes: u32,
    lanes: u32,
    busy_ns: u64,
}

struct ServiceState {
    queue: VecDeque<u64>,
    segments: Vec<usize>,
    slo_ns: u64,
    interarrival: Arrival,
    next_index: u64,
    arrived: u64,
    dispatched: u64,
    completed: u64,
    max_queue: usize,
    batches: u64,
    violations: u64,
    latencies: Vec<u64>,
}

#[allow(clippy::large_enum_variant)]
enum Arrival {
    None,
    Fixed { rate: f64 },
    Poisson { rng: ChaCha8Rng, exp: Exp<f64> },
}

impl Arrival {
    /// Time of the next arrival after `prev`; `index` counts arrivals so far.
    fn next(&mut self, prev: u64, index: u64) -> Option<u64> {
        match self {
            Arrival::None => None,
            Arrival::Fixed { rate } => Some((index as f64 * NS_PER_S / *rate).round() as u64),
            Arrival::Poisson { rng, exp } => {
                let gap = exp.sample(rng) * NS_PER_S;
                Some(prev + gap.round().max(1.0) as u64)
            }
        }
    }
}

// Completions sort before arrivals at equal times so freed lanes are visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Completion { segment: usize, requests: u64 },
    Arrival { service: usize },
}

/// Simulates `workload` against `map`. Deterministic for a given seed.
pub fn run_simulation(
    map: &DeploymentMap,
    tables: &ProfileSet,
    services: &[Service],
    workload: &Workload,
    seed: u64,
    sms_per_gpc: u32,
) -> Result<SimOutput, SimError> {
    if !(workload.horizon_s > 0.0 && workload.horizon_s.is_finite()) {
        return Err(SimError::Invalid(format!(
            "horizon {} s",
            workload.horizon_s
        )));
    }
    let horizon = (workload.horizon_s * NS_PER_S).round() as u64;
    let index: BTreeMap<&str, usize> = services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    let mut states: Vec<ServiceState> = Vec::with_capacity(services.len());
    for (i, s) in services.iter().enumerate() {
        let rate = workload.rates.get(&s.id).copied().unwrap_or(0.0);
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(SimError::Invalid(format!(
                "rate {rate} for service {}",
                s.id
            )));
        }
        if !(s.slo_latency_ms > 0.0) {
            return Err(SimError::Invalid(format!(
                "slo {} for service {}",
                s.slo_latency_ms, s.id
            )));
        }
        let interarrival = if rate == 0.0 {
            Arrival::None
        } else {
            match workload.arrivals {
                ArrivalKind::Deterministic => Arrival::Fixed { rate },
                ArrivalKind::Poisson => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    Arrival::Poisson {
                        rng,
                        exp: Exp::new(rate).expect("positive rate"),
                    }
                }
            }
        };
        states.push(ServiceState {
            queue: VecDeque::new(),
            segments: Vec::new(),
            slo_ns: (s.slo_latency_ms * NS_PER_MS).round() as u64,
            interarrival,
            next_index: 0,
            arrived: 0,
            dispatched: 0,
            completed: 0,
            max_queue: 0,
            batches: 0,
            violations: 0,
            latencies: Vec::new(),
        });
    }

    let mut segments: Vec<SegmentState> = Vec::new();
    let mut placed = Vec::new();
    for (gpu, seg) in map.placements() {
        let &si = index
            .get(seg.service.as_str())
            .ok_or_else(|| SimError::UnknownService(seg.service.clone()))?;
        let model = &services[si].model_id;
        let t = &seg.triplet;
        let key = ProfileKey::new(t.instance_size, t.batch_size, t.process_count);
        let point = tables
            .get(model)
            .and_then(|table| table.get(&key))
            .ok_or_else(|| SimError::MissingProfile {
                service: seg.service.clone(),
                model: model.clone(),
                key,
            })?;
        states[si].segments.push(segments.len());
        segments.push(SegmentState {
            service: si,
            batch_size: t.batch_size as usize,
            latency_ns: ((point.latency_ms * NS_PER_MS).round() as u64).max(1),
            idle_lanes: t.process_count,
            lanes: t.process_count,
            busy_ns: 0,
        });
        placed.push((gpu, seg));
    }
    for (s, st) in services.iter().zip(&states) {
        if st.segments.is_empty() && !matches!(st.interarrival, Arrival::None) {
            return Err(SimError::NoSegments(s.id.clone()));
        }
    }

    let mut heap: BinaryHeap<Reverse<(u64, Event)>> = BinaryHeap::new();
    for (i, st) in states.iter_mut().enumerate() {
        if let Some(t) = st.interarrival.next(0, 0) {
            st.next_index = 1;
            if t <= horizon {
                heap.push(Reverse((t, Event::Arrival { service: i })));
            }
        }
    }

    while let Some(Reverse((now, event))) = heap.pop() {
        if now > horizon {
            break;
        }
        let service = match event {
            Event::Arrival { service } => {
                let st = &mut states[service];
                st.arrived += 1;
                st.queue.push_back(now);
                st.max_queue = st.max_queue.max(st.queue.len());
                if let Some(t) = st.interarrival.next(now, st.next_index) {
                    st.next_index += 1;
                    if t <= horizon {
                        heap.push(Reverse((t, Event::Arrival { service })));
                    }
                }
                service
            }
            Event::Completion { segment, requests } => {
                let seg = &mut segments[segment];
                seg.idle_lanes += 1;
                states[seg.service].completed += requests;
                seg.service
            }
        };

        let st = &mut states[service];
        for &si in &st.segments {
            let seg = &mut segments[si];
            while seg.idle_lanes > 0 && !st.queue.is_empty() {
                let n = seg.batch_size.min(st.queue.len());
                let oldest = *st.queue.front().expect("non-empty");
                let end = now + seg.latency_ns;
                for arrival in st.queue.drain(..n) {
                    st.latencies.push(end - arrival);
                }
                st.dispatched += n as u64;
                st.batches += 1;
                if end - oldest > st.slo_ns {
                    st.violations += 1;
                }
                seg.idle_lanes -= 1;
                seg.busy_ns += end.min(horizon) - now;
                heap.push(Reverse((
                    end,
                    Event::Completion {
                        segment: si,
                        requests: n as u64,
                    },
                )));
            }
            if st.queue.is_empty() {
                break;
            }
        }
    }

    let mut service_stats = Vec::with_capacity(services.len());
    for (s, st) in services.iter().zip(states.iter_mut()) {
        st.latencies.sort_unstable();
        let pct = |q: f64| -> f64 {
            if st.latencies.is_empty() {
                return 0.0;
            }
            let rank =
                ((q * st.latencies.len() as f64).ceil() as usize).clamp(1, st.latencies.len());
            st.latencies[rank - 1] as f64 / NS_PER_MS
        };
        let mean = if st.latencies.is_empty() {
            0.0
        } else {
            st.latencies.iter().map(|&l| l as f64).sum::<f64>()
                / st.latencies.len() as f64
                / NS_PER_MS
        };
        service_stats.push(ServiceStats {
            service: s.id.clone(),
            model: s.model_id.clone(),
            slo_latency_ms: s.slo_latency_ms,
            arrived: st.arrived,
            dispatched: st.dispatched,
            completed: st.completed,
            in_flight: st.dispatched - st.completed,
            queued_at_horizon: st.queue.len() as u64,
            max_queue_len: st.max_queue as u64,
            batches: st.batches,
            violations: st.violations,
            compliance: super::compliance(st.batches, st.violations).unwrap_or(1.0),
            throughput_rps: st.completed as f64 / workload.horizon_s,
            latency_mean_ms: mean,
            latency_p50_ms: pct(0.50),
            latency_p95_ms: pct(0.95),
            latency_p99_ms: pct(0.99),
            latency_max_ms: st.latencies.last().map_or(0.0, |&l| l as f64 / NS_PER_MS),
        });
    }

    let busy = |seg: &SegmentState| -> f64 {
        (seg.busy_ns as f64 / (f64::from(seg.lanes) * horizon as f64)).clamp(0.0, 1.0)
    };
    let segment_stats: Vec<SegmentStats> = placed
        .iter()
        .zip(&segments)
        .map(|((gpu, p), seg)| SegmentStats {
            gpu: *gpu,
            start_slot: p.start_slot,
            service: p.service.clone(),
            instance_size: p.size().gpcs(),
            busy_fraction: busy(seg),
        })
        .collect();
    let activity = ActivityReport {
        segments: placed
            .iter()
            .zip(&segments)
            .map(|((gpu, p), seg)| SegmentActivity {
                gpu: *gpu,
                start_slot: p.start_slot,
                service: p.service.clone(),
                sm_count: u32::from(p.size().gpcs()) * sms_per_gpc,
                activity: busy(seg),
            })
            .collect(),
        gpu_count: map.gpus().len() as u32,
        sms_per_gpu: NUM_SLOTS as u32 * sms_per_gpc,
    };

    Ok(SimOutput {
        report: SimReport {
            seed,
            horizon_s: workload.horizon_s,
            arrivals: workload.arrivals,
            services: service_stats,
            segments: segment_stats,
        },
        activity,
    })
}
