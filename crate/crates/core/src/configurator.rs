//! Per-service segment configuration.
//!
//! Two steps: pick the best (batch, process) cell for every instance size
//! under the service's latency bound, then cover the request rate with as
//! many copies of the most GPC-efficient triplet as fit, plus the smallest
//! triplet that covers whatever rate is left.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mig::InstanceSize;
use crate::profiles::{ProfilePoint, ProfileTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error(
        "infeasible SLO for service {service}: no profiled point is faster than {bound_ms} ms"
    )]
    InfeasibleSlo { service: String, bound_ms: f64 },
    #[error("service {0} has no optimal triplets; run triplet decision first")]
    NoTriplets(String),
    #[error("service {service}: residual rate {remaining} is not covered by any triplet")]
    ResidualUncoverable { service: String, remaining: f64 },
    #[error("service {service}: {message}")]
    InvalidService { service: String, message: String },
}

/// (instance size, batch size, process count) with its profiled performance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub instance_size: InstanceSize,
    pub batch_size: u32,
    pub process_count: u32,
    /// requests/s
    pub throughput: f64,
    pub latency_ms: f64,
}

impl Triplet {
    /// Throughput per GPC.
    pub fn efficiency(&self) -> f64 {
        self.throughput / f64::from(self.instance_size.gpcs())
    }
}

impl From<&ProfilePoint> for Triplet {
    fn from(p: &ProfilePoint) -> Self {
        Triplet {
            instance_size: p.instance_size,
            batch_size: p.batch_size,
            process_count: p.process_count,
            throughput: p.throughput,
            latency_ms: p.latency_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Service {
    pub id: String,
    pub model_id: String,
    /// Client-facing latency target.
    pub slo_latency_ms: f64,
    /// Bound used when choosing triplets; half the SLO, leaving the other
    /// half for queueing.
    pub internal_latency_ms: f64,
    pub req_rate: f64,
    /// At most one triplet per instance size, ascending by size.
    pub opt_tri_array: Vec<Triplet>,
    pub opt_seg: Option<Triplet>,
    pub num_opt_seg: u32,
    pub last_seg: Option<Triplet>,
}

impl Service {
    pub fn new(
        id: impl Into<String>,
        model_id: impl Into<String>,
        slo_latency_ms: f64,
        req_rate: f64,
    ) -> Self {
        Service {
            id: id.into(),
            model_id: model_id.into(),
            slo_latency_ms,
            internal_latency_ms: slo_latency_ms / 2.0,
            req_rate,
            opt_tri_array: Vec::new(),
            opt_seg: None,
            num_opt_seg: 0,
            last_seg: None,
        }
    }

    pub fn triplet(&self, size: InstanceSize) -> Option<&Triplet> {
        self.opt_tri_array.iter().find(|t| t.instance_size == size)
    }

    /// Configured segments: `num_opt_seg` copies of the optimal segment, then
    /// the last segment.
    pub fn segments(&self) -> Vec<Triplet> {
        let mut out = Vec::with_capacity(self.num_opt_seg as usize + 1);
        if let Some(opt) = self.opt_seg {
            out.extend(std::iter::repeat_n(opt, self.num_opt_seg as usize));
        }
        out.extend(self.last_seg);
        out
    }

    pub fn covered_rate(&self) -> f64 {
        self.segments().iter().map(|t| t.throughput).sum()
    }

    pub fn total_gpcs(&self) -> u32 {
        self.segments()
            .iter()
            .map(|t| u32::from(t.instance_size.gpcs()))
            .sum()
    }
}

/// Fills `opt_tri_array` with the highest-throughput point per instance size
/// among points strictly faster than the internal latency bound.
pub fn triplet_decision(
    mut service: Service,
    table: &ProfileTable,
) -> Result<Service, ConfigError> {
    if !(service.internal_latency_ms > 0.0) {
        return Err(ConfigError::InvalidService {
            service: service.id,
            message: "latency bound must be positive".into(),
        });
    }
    let mut best: [Option<Triplet>; 5] = [None; 5];
    for point in table.points() {
        if service.internal_latency_ms > point.latency_ms {
            let slot = &mut best[point.instance_size.index()];
            if slot.is_none_or(|t| point.throughput > t.throughput) {
                *slot = Some(Triplet::from(point));
            }
        }
    }
    service.opt_tri_array = best.into_iter().flatten().collect();
    if service.opt_tri_array.is_empty() {
        return Err(ConfigError::InfeasibleSlo {
            service: service.id,
            bound_ms: service.internal_latency_ms,
        });
    }
    Ok(service)
}

/// The triplet with the highest throughput per GPC; ties go to the larger
/// instance.
pub fn select_optimal_segment(triplets: &[Triplet]) -> Option<Triplet> {
    triplets.iter().copied().max_by(|a, b| {
        a.efficiency()
            .partial_cmp(&b.efficiency())
            .unwrap_or(Ordering::Equal)
            .then(a.instance_size.cmp(&b.instance_size))
    })
}

/// Chooses the optimal segment, how many copies of it fit under the request
/// rate, and the smallest triplet covering the remainder.
pub fn demand_matching(mut service: Service) -> Result<Service, ConfigError> {
    let opt = select_optimal_segment(&service.opt_tri_array)
        .ok_or_else(|| ConfigError::NoTriplets(service.id.clone()))?;
    if !(service.req_rate >= 0.0 && service.req_rate.is_finite()) {
        return Err(ConfigError::InvalidService {
            service: service.id,
            message: format!(
                "request rate {} is not a non-negative number",
                service.req_rate
            ),
        });
    }
    let num_opt = (service.req_rate / opt.throughput).floor();
    let remaining = service.req_rate - num_opt * opt.throughput;

    let last = if remaining > 0.0 {
        debug_assert!(remaining < opt.throughput);
        let smallest = service
            .opt_tri_array
            .iter()
            .filter(|t| t.throughput >= remaining)
            .min_by_key(|t| t.instance_size)
            .copied();
        let fallback = || {
            service
                .opt_tri_array
                .iter()
                .copied()
                .max_by(|a, b| {
                    a.throughput
                        .partial_cmp(&b.throughput)
                        .unwrap_or(Ordering::Equal)
                })
                .filter(|t| t.throughput >= remaining)
        };
        match smallest.or_else(fallback) {
            Some(t) => Some(t),
            None => {
                return Err(ConfigError::ResidualUncoverable {
                    service: service.id,
                    remaining,
                })
            }
        }
    } else {
        None
    };

    service.opt_seg = Some(opt);
    service.num_opt_seg = num_opt as u32;
    service.last_seg = last;
    Ok(service)
}

/// Triplet decision followed by demand matching.
pub fn configure(service: Service, table: &ProfileTable) -> Result<Service, ConfigError> {
    demand_matching(triplet_decision(service, table)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::ProfilePoint;

    fn t(size: u8, tp: f64) -> Triplet {
        Triplet {
            instance_size: InstanceSize::try_from(size).unwrap(),
            batch_size: 4,
            process_count: 1,
            throughput: tp,
            latency_ms: 5.0,
        }
    }

    fn point(size: u8, b: u32, p: u32, tp: f64, lat: f64) -> ProfilePoint {
        ProfilePoint {
            model_id: "inceptionv3".into(),
            instance_size: InstanceSize::try_from(size).unwrap(),
            batch_size: b,
            process_count: p,
            throughput: tp,
            latency_ms: lat,
            memory_required: 1.0,
        }
    }

    fn with_triplets(rate: f64, triplets: Vec<Triplet>) -> Service {
        let mut s = Service::new("svc", "m", 100.0, rate);
        s.opt_tri_array = triplets;
        s
    }

    #[test]
    fn internal_latency_is_half_slo() {
        assert_eq!(
            Service::new("a", "m", 419.0, 460.0).internal_latency_ms,
            209.5
        );
    }

    #[test]
    fn slow_process_count_excluded() {
        let table = ProfileTable::from_points(
            "inceptionv3",
            vec![
                point(1, 4, 1, 354.0, 11.0),
                point(1, 4, 2, 444.0, 18.0),
                point(1, 4, 3, 446.0, 27.0),
            ],
        )
        .unwrap();
        let s = triplet_decision(Service::new("inc", "inceptionv3", 40.0, 100.0), &table).unwrap();
        assert_eq!(s.opt_tri_array.len(), 1);
        assert_eq!(s.opt_tri_array[0].process_count, 2);
        assert_eq!(s.opt_tri_array[0].throughput, 444.0);
    }

    #[test]
    fn bound_equal_to_latency_does_not_qualify() {
        let table =
            ProfileTable::from_points("inceptionv3", vec![point(1, 4, 2, 444.0, 18.0)]).unwrap();
        let err =
            triplet_decision(Service::new("inc", "inceptionv3", 36.0, 1.0), &table).unwrap_err();
        assert!(matches!(err, ConfigError::InfeasibleSlo { .. }));
    }

    #[test]
    fn one_point_per_size_is_kept_verbatim() {
        let pts = vec![point(1, 2, 1, 100.0, 3.0), point(4, 8, 2, 900.0, 4.0)];
        let table = ProfileTable::from_points("inceptionv3", pts.clone()).unwrap();
        let s = triplet_decision(Service::new("x", "inceptionv3", 100.0, 1.0), &table).unwrap();
        let expect: Vec<Triplet> = pts.iter().map(Triplet::from).collect();
        assert_eq!(s.opt_tri_array, expect);
    }

    #[test]
    fn optimal_segment_by_efficiency() {
        let chosen = select_optimal_segment(&[t(1, 446.0), t(4, 1810.0)]).unwrap();
        assert_eq!(chosen.instance_size, InstanceSize::FOUR);
        assert_eq!(
            select_optimal_segment(&[t(2, 5.0)]).unwrap().throughput,
            5.0
        );
        assert!(select_optimal_segment(&[]).is_none());
    }

    #[test]
    fn efficiency_tie_prefers_larger_instance() {
        let chosen = select_optimal_segment(&[t(1, 100.0), t(2, 200.0)]).unwrap();
        assert_eq!(chosen.instance_size, InstanceSize::TWO);
    }

    #[test]
    fn high_rate_uses_two_optimal_plus_last() {
        let s = demand_matching(with_triplets(4196.0, vec![t(1, 446.0), t(4, 1810.0)])).unwrap();
        assert_eq!(s.opt_seg.unwrap().instance_size, InstanceSize::FOUR);
        assert_eq!(s.num_opt_seg, 2);
        assert_eq!(s.last_seg.unwrap().instance_size, InstanceSize::FOUR);
        assert_eq!(s.segments().len(), 3);
        assert_eq!(s.total_gpcs(), 12);
    }

    #[test]
    fn low_rate_uses_single_small_segment() {
        let s = demand_matching(with_triplets(400.0, vec![t(1, 446.0), t(4, 1810.0)])).unwrap();
        assert_eq!(s.num_opt_seg, 0);
        assert_eq!(s.last_seg.unwrap().instance_size, InstanceSize::ONE);
        assert_eq!(s.total_gpcs(), 1);
    }

    #[test]
    fn zero_rate_has_no_segments() {
        let s = demand_matching(with_triplets(0.0, vec![t(1, 446.0), t(4, 1810.0)])).unwrap();
        assert_eq!(s.num_opt_seg, 0);
        assert!(s.last_seg.is_none());
        assert!(s.segments().is_empty());
    }

    #[test]
    fn exact_multiple_emits_no_last_segment() {
        let s = demand_matching(with_triplets(3620.0, vec![t(1, 446.0), t(4, 1810.0)])).unwrap();
        assert_eq!(s.num_opt_seg, 2);
        assert!(s.last_seg.is_none());
    }

    #[test]
    fn demand_matching_requires_triplets() {
        let err = demand_matching(with_triplets(10.0, vec![])).unwrap_err();
        assert_eq!(err, ConfigError::NoTriplets("svc".into()));
    }
}
