//! Deployment quality metrics and request-level simulation.

mod sim;

pub use sim::{
    run_simulation, slo_compliance, ArrivalKind, SegmentStats, ServiceStats, SimError, SimOutput,
    SimReport, SimRow, Workload,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::DeploymentMap;
use crate::mig::NUM_SLOTS;

/// SMs in a 1-GPC A100 instance.
pub const DEFAULT_SMS_PER_GPC: u32 = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("internal slack is undefined for an empty activity report")]
    EmptyReport,
    #[error("external fragmentation is undefined for a map without GPUs")]
    EmptyMap,
    #[error("compliance is undefined without executed batches")]
    NoBatches,
    #[error("sms per gpc must be positive")]
    ZeroSms,
}

/// Activity of one placed segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentActivity {
    pub gpu: u32,
    pub start_slot: u8,
    pub service: String,
    pub sm_count: u32,
    /// Fraction of time the segment's SMs were busy, in [0, 1].
    pub activity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityReport {
    pub segments: Vec<SegmentActivity>,
    pub gpu_count: u32,
    pub sms_per_gpu: u32,
}

impl ActivityReport {
    /// Report over every placed segment of `map`, with activity from `activity`.
    pub fn from_map(
        map: &DeploymentMap,
        sms_per_gpc: u32,
        mut activity: impl FnMut(u32, &crate::mig::PlacedSegment) -> f64,
    ) -> Self {
        ActivityReport {
            segments: map
                .placements()
                .map(|(gpu, s)| SegmentActivity {
                    gpu,
                    start_slot: s.start_slot,
                    service: s.service.clone(),
                    sm_count: u32::from(s.size().gpcs()) * sms_per_gpc,
                    activity: activity(gpu, s).clamp(0.0, 1.0),
                })
                .collect(),
            gpu_count: map.gpus().len() as u32,
            sms_per_gpu: NUM_SLOTS as u32 * sms_per_gpc,
        }
    }
}

/// 1 - sum(SM_i * A_i) / sum(SM_i).
pub fn internal_slack(report: &ActivityReport) -> Result<f64, MetricError> {
    let total: f64 = report.segments.iter().map(|s| f64::from(s.sm_count)).sum();
    if report.segments.is_empty() || total == 0.0 {
        return Err(MetricError::EmptyReport);
    }
    let active: f64 = report
        .segments
        .iter()
        .map(|s| f64::from(s.sm_count) * s.activity)
        .sum();
    Ok((1.0 - active / total).clamp(0.0, 1.0))
}

/// sum(SM_i) / (G * S): the allocated share of all provisioned SMs. Slots
/// blocked by a size-3 instance at slot 0 are not allocated.
pub fn allocated_fraction(map: &DeploymentMap, sms_per_gpc: u32) -> Result<f64, MetricError> {
    if sms_per_gpc == 0 {
        return Err(MetricError::ZeroSms);
    }
    if map.gpus().is_empty() {
        return Err(MetricError::EmptyMap);
    }
    let allocated = f64::from(map.total_gpcs()) * f64::from(sms_per_gpc);
    let provisioned = map.gpus().len() as f64 * NUM_SLOTS as f64 * f64::from(sms_per_gpc);
    Ok(allocated / provisioned)
}

/// 1 - sum(SM_i) / (G * S): the unallocated share of all provisioned SMs.
pub fn external_fragmentation(map: &DeploymentMap, sms_per_gpc: u32) -> Result<f64, MetricError> {
    allocated_fraction(map, sms_per_gpc).map(|a| 1.0 - a)
}

/// 1 - violations / batches.
pub fn compliance(batches: u64, violations: u64) -> Result<f64, MetricError> {
    if batches == 0 {
        return Err(MetricError::NoBatches);
    }
    Ok(1.0 - violations.min(batches) as f64 / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configurator::Triplet;
    use crate::mig::{Geometry, InstanceSize};

    fn seg(sm: u32, a: f64) -> SegmentActivity {
        SegmentActivity {
            gpu: 0,
            start_slot: 0,
            service: "s".into(),
            sm_count: sm,
            activity: a,
        }
    }

    fn report(segs: Vec<SegmentActivity>) -> ActivityReport {
        ActivityReport {
            segments: segs,
            gpu_count: 1,
            sms_per_gpu: 98,
        }
    }

    fn map(gpus: &[&[u8]]) -> DeploymentMap {
        let mut m = DeploymentMap::new(Geometry::a100());
        for sizes in gpus {
            let g = m.push_gpu();
            for &s in *sizes {
                let t = Triplet {
                    instance_size: InstanceSize::try_from(s).unwrap(),
                    batch_size: 1,
                    process_count: 1,
                    throughput: 1.0,
                    latency_ms: 1.0,
                };
                m.place_first_fit("x", t, None);
                assert_eq!(m.gpus().len(), g + 1);
            }
        }
        m
    }

    #[test]
    fn slack_examples() {
        assert_eq!(
            internal_slack(&report(vec![seg(14, 1.0), seg(56, 1.0)])).unwrap(),
            0.0
        );
        let v = internal_slack(&report(vec![seg(56, 0.9), seg(42, 0.8)])).unwrap();
        assert!((v - (1.0 - 84.0 / 98.0)).abs() < 1e-12);
        let v = internal_slack(&report(vec![seg(98, 0.2)])).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
        assert_eq!(
            internal_slack(&report(vec![])),
            Err(MetricError::EmptyReport)
        );
    }

    #[test]
    fn fragmentation_examples() {
        assert_eq!(
            external_fragmentation(&map(&[&[7], &[4, 3]]), 14).unwrap(),
            0.0
        );
        let v = external_fragmentation(&map(&[&[4]]), 14).unwrap();
        assert!((v - 3.0 / 7.0).abs() < 1e-12);
        let v = external_fragmentation(&map(&[&[7], &[4]]), 14).unwrap();
        assert!((v - 3.0 / 14.0).abs() < 1e-12);
        let empty = DeploymentMap::new(Geometry::a100());
        assert_eq!(
            external_fragmentation(&empty, 14),
            Err(MetricError::EmptyMap)
        );
    }

    #[test]
    fn blocked_slot_counts_as_fragmented() {
        let v = external_fragmentation(&map(&[&[3, 3]]), 14).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn compliance_examples() {
        assert_eq!(compliance(1000, 0).unwrap(), 1.0);
        assert!((compliance(1000, 35).unwrap() - 0.965).abs() < 1e-12);
        assert_eq!(compliance(10, 10).unwrap(), 0.0);
        assert_eq!(compliance(0, 0), Err(MetricError::NoBatches));
    }
}
