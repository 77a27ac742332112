//! Exhaustive minimum-resource baseline for small instances.
//!
//! Per service it enumerates every multiset of instance sizes (each size
//! carrying its best triplet) up to a GPC budget and keeps the cheapest one
//! covering the request rate. Jointly it finds the fewest GPUs that can hold
//! one covering multiset per service, by exact bin assignment against the
//! set of per-GPU size multisets that some full MIG configuration contains.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{DriverError, Scenario};
use crate::configurator::{triplet_decision, ConfigError, Triplet};
use crate::mig::{enumerate_full_configs, Geometry, InstanceSize, NUM_SLOTS};
use crate::profiles::ProfileSet;

/// Segment counts indexed like [`InstanceSize::ALL`].
pub type SizeCounts = [u32; 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleBounds {
    pub max_services: usize,
    pub max_gpus: usize,
}

impl Default for OracleBounds {
    fn default() -> Self {
        OracleBounds {
            max_services: 4,
            max_gpus: 3,
        }
    }
}

impl OracleBounds {
    fn gpc_budget(&self) -> u32 {
        (self.max_gpus * NUM_SLOTS) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleService {
    pub id: String,
    pub min_gpcs: u32,
    pub counts: SizeCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub services: Vec<OracleService>,
    pub min_gpcs: u32,
    pub min_gpus: u32,
}

fn gpcs(counts: &SizeCounts) -> u32 {
    counts
        .iter()
        .zip(InstanceSize::ALL)
        .map(|(c, s)| c * u32::from(s.gpcs()))
        .sum()
}

fn rate(counts: &SizeCounts, best: &[Option<f64>; 5]) -> f64 {
    counts
        .iter()
        .zip(best)
        .map(|(&c, tp)| f64::from(c) * tp.unwrap_or(0.0))
        .sum()
}

fn best_by_size(triplets: &[Triplet]) -> [Option<f64>; 5] {
    let mut best = [None; 5];
    for t in triplets {
        let slot: &mut Option<f64> = &mut best[t.instance_size.index()];
        *slot = Some(slot.map_or(t.throughput, |v: f64| v.max(t.throughput)));
    }
    best
}

/// Every count vector over the available sizes with at most `budget` GPCs.
fn enumerate_counts(best: &[Option<f64>; 5], budget: u32) -> Vec<SizeCounts> {
    fn rec(
        i: usize,
        left: u32,
        best: &[Option<f64>; 5],
        cur: &mut SizeCounts,
        out: &mut Vec<SizeCounts>,
    ) {
        if i == 5 {
            out.push(*cur);
            return;
        }
        let size = u32::from(InstanceSize::ALL[i].gpcs());
        let max = if best[i].is_some() { left / size } else { 0 };
        for c in 0..=max {
            cur[i] = c;
            rec(i + 1, left - c * size, best, cur, out);
        }
        cur[i] = 0;
    }
    let mut out = Vec::new();
    rec(0, budget, best, &mut [0; 5], &mut out);
    out
}

/// Fewest GPCs (then fewest segments) whose throughput covers `req_rate`,
/// searching every multiset within `budget` GPCs.
pub fn min_gpcs_for_service(
    triplets: &[Triplet],
    req_rate: f64,
    budget: u32,
) -> Option<(u32, SizeCounts)> {
    let best = best_by_size(triplets);
    enumerate_counts(&best, budget)
        .into_iter()
        .filter(|c| rate(c, &best) >= req_rate)
        .min_by_key(|c| (gpcs(c), c.iter().sum::<u32>()))
        .map(|c| (gpcs(&c), c))
}

/// Covering multisets from which no single segment can be dropped.
fn irreducible_covers(triplets: &[Triplet], req_rate: f64, budget: u32) -> Vec<SizeCounts> {
    let best = best_by_size(triplets);
    enumerate_counts(&best, budget)
        .into_iter()
        .filter(|c| {
            rate(c, &best) >= req_rate
                && (0..5).all(|i| {
                    c[i] == 0 || {
                        let mut less = *c;
                        less[i] -= 1;
                        rate(&less, &best) < req_rate
                    }
                })
        })
        .collect()
}

/// Size multisets that fit on one GPU: sub-multisets of full configurations.
pub fn packable_multisets(geometry: &Geometry) -> BTreeSet<SizeCounts> {
    let mut out = BTreeSet::new();
    for config in enumerate_full_configs(geometry) {
        let mut full = [0u32; 5];
        for (_, size) in &config.placements {
            full[size.index()] += 1;
        }
        let mut stack = vec![full];
        while let Some(c) = stack.pop() {
            if out.insert(c) {
                for i in 0..5 {
                    if c[i] > 0 {
                        let mut less = c;
                        less[i] -= 1;
                        stack.push(less);
                    }
                }
            }
        }
    }
    out
}

fn fits(
    demand: SizeCounts,
    gpus: usize,
    bins: &[SizeCounts],
    failed: &mut HashSet<(SizeCounts, usize)>,
) -> bool {
    if demand == [0; 5] {
        return true;
    }
    if gpus == 0 || failed.contains(&(demand, gpus)) {
        return false;
    }
    for bin in bins {
        if bin.iter().zip(&demand).all(|(b, d)| b <= d) && *bin != [0; 5] {
            let mut rest = demand;
            for i in 0..5 {
                rest[i] -= bin[i];
            }
            if fits(rest, gpus - 1, bins, failed) {
                return true;
            }
        }
    }
    failed.insert((demand, gpus));
    false
}

/// Minimal elements under component-wise order.
fn antichain(set: HashSet<SizeCounts>) -> Vec<SizeCounts> {
    let mut items: Vec<SizeCounts> = set.into_iter().collect();
    items.sort_by_key(|c| (gpcs(c), *c));
    let mut kept: Vec<SizeCounts> = Vec::new();
    for c in items {
        if !kept.iter().any(|k| k.iter().zip(&c).all(|(a, b)| a <= b)) {
            kept.push(c);
        }
    }
    kept
}

/// Exact minimum GPCs per service and minimum GPUs overall for a small
/// instance. Services are given as (id, triplets, request rate).
pub fn oracle_services(
    services: &[(String, Vec<Triplet>, f64)],
    bounds: &OracleBounds,
    geometry: &Geometry,
) -> Result<OracleResult, DriverError> {
    if services.len() > bounds.max_services {
        return Err(DriverError::OracleBounds(format!(
            "{} services, at most {} supported",
            services.len(),
            bounds.max_services
        )));
    }
    let budget = bounds.gpc_budget();
    let mut per_service = Vec::with_capacity(services.len());
    for (id, triplets, req_rate) in services {
        let (min, counts) = min_gpcs_for_service(triplets, *req_rate, budget).ok_or_else(|| {
            DriverError::OracleBounds(format!("service {id} needs more than {budget} GPCs"))
        })?;
        per_service.push(OracleService {
            id: id.clone(),
            min_gpcs: min,
            counts,
        });
    }
    let min_gpcs: u32 = per_service.iter().map(|s| s.min_gpcs).sum();
    if min_gpcs > budget {
        return Err(DriverError::OracleBounds(format!(
            "demand needs {min_gpcs} GPCs, more than {} GPUs hold",
            bounds.max_gpus
        )));
    }

    let mut sums: HashSet<SizeCounts> = [[0; 5]].into_iter().collect();
    for (_, triplets, req_rate) in services {
        let covers = irreducible_covers(triplets, *req_rate, budget);
        let mut next = HashSet::new();
        for base in antichain(sums) {
            for c in &covers {
                let mut s = base;
                for i in 0..5 {
                    s[i] += c[i];
                }
                if gpcs(&s) <= budget {
                    next.insert(s);
                }
            }
        }
        sums = next;
    }
    let candidates = antichain(sums);
    let bins: Vec<SizeCounts> = packable_multisets(geometry).into_iter().rev().collect();
    let mut failed = HashSet::new();
    let lower = (min_gpcs as usize)
        .div_ceil(NUM_SLOTS)
        .max(usize::from(min_gpcs > 0));
    for gpus in lower..=bounds.max_gpus {
        if candidates
            .iter()
            .any(|c| fits(*c, gpus, &bins, &mut failed))
        {
            return Ok(OracleResult {
                services: per_service,
                min_gpcs,
                min_gpus: gpus as u32,
            });
        }
    }
    Err(DriverError::OracleBounds(format!(
        "no packing within {} GPUs",
        bounds.max_gpus
    )))
}

/// Oracle for a scenario: each service's per-size best triplets under its
/// latency bound, then [`oracle_services`].
pub fn oracle_plan(
    scenario: &Scenario,
    tables: &ProfileSet,
    bounds: &OracleBounds,
    geometry: &Geometry,
) -> Result<OracleResult, DriverError> {
    if scenario.services.len() > bounds.max_services {
        return Err(DriverError::OracleBounds(format!(
            "{} services, at most {} supported",
            scenario.services.len(),
            bounds.max_services
        )));
    }
    scenario.check_models(tables)?;
    let mut inputs = Vec::new();
    for spec in &scenario.services {
        let s = triplet_decision(spec.to_service(), &tables[&spec.model]).map_err(|e| match e {
            e @ ConfigError::InfeasibleSlo { .. } => DriverError::Infeasible(vec![e]),
            e => e.into(),
        })?;
        inputs.push((s.id, s.opt_tri_array, s.req_rate));
    }
    oracle_services(&inputs, bounds, geometry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(size: u8, tp: f64) -> Triplet {
        Triplet {
            instance_size: InstanceSize::try_from(size).unwrap(),
            batch_size: 1,
            process_count: 1,
            throughput: tp,
            latency_ms: 1.0,
        }
    }

    #[test]
    fn small_rate_uses_smallest_size() {
        let (g, c) = min_gpcs_for_service(&[t(1, 446.0), t(4, 1810.0)], 300.0, 21).unwrap();
        assert_eq!(g, 1);
        assert_eq!(c, [1, 0, 0, 0, 0]);
    }

    #[test]
    fn high_rate_no_worse_than_greedy() {
        let (g, _) = min_gpcs_for_service(&[t(1, 446.0), t(4, 1810.0)], 4196.0, 21).unwrap();
        assert!(g <= 12);
        // 2 x 1810 + 2 x 446 = 4512 >= 4196 with 10 GPCs
        assert_eq!(g, 10);
    }

    #[test]
    fn zero_rate_needs_nothing() {
        assert_eq!(min_gpcs_for_service(&[t(1, 5.0)], 0.0, 21).unwrap().0, 0);
    }

    #[test]
    fn two_size_four_need_two_gpus() {
        let services = vec![
            ("a".to_owned(), vec![t(4, 100.0)], 100.0),
            ("b".to_owned(), vec![t(4, 100.0)], 100.0),
        ];
        let r = oracle_services(&services, &OracleBounds::default(), &Geometry::a100()).unwrap();
        assert_eq!(r.min_gpcs, 8);
        assert_eq!(r.min_gpus, 2);
    }

    #[test]
    fn four_and_three_share_a_gpu() {
        let services = vec![
            ("a".to_owned(), vec![t(4, 100.0)], 100.0),
            ("b".to_owned(), vec![t(3, 100.0)], 100.0),
        ];
        let r = oracle_services(&services, &OracleBounds::default(), &Geometry::a100()).unwrap();
        assert_eq!(r.min_gpus, 1);
    }

    #[test]
    fn two_threes_share_a_gpu() {
        let services = vec![("a".to_owned(), vec![t(3, 100.0)], 200.0)];
        let r = oracle_services(&services, &OracleBounds::default(), &Geometry::a100()).unwrap();
        assert_eq!(r.min_gpus, 1);
    }

    #[test]
    fn packable_sets_respect_slot_rules() {
        let p = packable_multisets(&Geometry::a100());
        assert!(p.contains(&[0, 0, 1, 1, 0]));
        assert!(p.contains(&[0, 0, 2, 0, 0]));
        assert!(!p.contains(&[1, 0, 2, 0, 0]));
        assert!(!p.contains(&[0, 0, 0, 2, 0]));
        assert!(!p.contains(&[1, 0, 0, 0, 1]));
        assert!(p.contains(&[1, 3, 0, 0, 0]));
    }

    #[test]
    fn too_many_services_refused() {
        let services: Vec<_> = (0..5)
            .map(|i| (i.to_string(), vec![t(1, 1.0)], 1.0))
            .collect();
        assert!(matches!(
            oracle_services(&services, &OracleBounds::default(), &Geometry::a100()),
            Err(DriverError::OracleBounds(_))
        ));
    }

    #[test]
    fn demand_beyond_three_gpus_refused() {
        let services = vec![("a".to_owned(), vec![t(7, 1.0)], 4.0)];
        assert!(oracle_services(&services, &OracleBounds::default(), &Geometry::a100()).is_err());
    }
}
