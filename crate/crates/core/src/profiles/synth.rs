//! Synthetic profile generator.
//!
//! Each process alternates a fixed host-side overhead with a compute phase
//! whose length scales with batch size and shrinks with instance size. With
//! several processes the compute phases contend for the instance:
//!
//! ```text
//! compute(s, b)  = per_sample * b / s^gpc_exponent
//! latency(s,b,p) = max(overhead + compute, p * compute) * (1 + interference * (p - 1))
//! throughput     = efficiency * p * b / latency
//! ```
//!
//! Pinned anchor points override the formula; the remaining cells are then
//! clamped so latency stays non-increasing in instance size and
//! non-decreasing in batch size around them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    filter_feasible, MemoryMap, ProfileBounds, ProfileError, ProfileKey, ProfilePoint, ProfileTable,
};
use crate::mig::InstanceSize;

/// A cell whose values are fixed verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub instance_size: InstanceSize,
    pub batch_size: u32,
    pub process_count: u32,
    pub throughput_rps: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_id: String,
    /// Throughput at one GPC, batch 1, one process (requests/s).
    pub base_throughput: f64,
    /// Compute speed of an s-GPC instance is s^gpc_exponent times one GPC.
    pub gpc_exponent: f64,
    /// Batch size at which the compute phase equals the fixed overhead.
    pub batch_half_saturation: f64,
    /// Fractional latency added per extra co-located process.
    pub process_interference: f64,
    /// Reported throughput as a fraction of raw batch capacity p*b/latency.
    pub throughput_efficiency: f64,
    pub weights_gb: f64,
    pub activation_gb_per_sample: f64,
    pub process_overhead_gb: f64,
    /// Relative amplitude of uniform latency noise.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub bounds: ProfileBounds,
}

impl ModelParams {
    fn validate(&self) -> Result<(), ProfileError> {
        let bad = |what: &str| {
            Err(ProfileError::InvalidParams(format!(
                "{}: {what}",
                self.model_id
            )))
        };
        if !(self.base_throughput > 0.0 && self.base_throughput.is_finite()) {
            return bad("base throughput must be positive");
        }
        if !(self.gpc_exponent > 0.0) {
            return bad("gpc exponent must be positive");
        }
        if !(self.batch_half_saturation >= 0.0) {
            return bad("batch half-saturation must be non-negative");
        }
        if !(self.process_interference >= 0.0) {
            return bad("process interference must be non-negative");
        }
        if !(self.throughput_efficiency > 0.0 && self.throughput_efficiency <= 1.0) {
            return bad("throughput efficiency must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        if self.bounds.batch_sizes.is_empty() || self.bounds.process_counts.is_empty() {
            return bad("empty profiling bounds");
        }
        if self.bounds.batch_sizes.contains(&0) || self.bounds.process_counts.contains(&0) {
            return bad("batch sizes and process counts must be positive");
        }
        Ok(())
    }

    /// Per-sample compute time on one GPC and fixed per-batch overhead (ms).
    fn phases(&self) -> (f64, f64) {
        let single = self.throughput_efficiency * 1000.0 / self.base_throughput;
        let per_sample = single / (self.batch_half_saturation + 1.0);
        (per_sample, self.batch_half_saturation * per_sample)
    }

    fn formula_latency(&self, size: InstanceSize, batch: u32, procs: u32) -> f64 {
        let (per_sample, overhead) = self.phases();
        let compute =
            per_sample * f64::from(batch) / f64::from(size.gpcs()).powf(self.gpc_exponent);
        let p = f64::from(procs);
        (overhead + compute).max(p * compute) * (1.0 + self.process_interference * (p - 1.0))
    }

    fn memory(&self, batch: u32, procs: u32) -> f64 {
        f64::from(procs)
            * (self.weights_gb
                + self.activation_gb_per_sample * f64::from(batch)
                + self.process_overhead_gb)
    }
}

/// A set of models sharing one generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub seed: u64,
    pub models: Vec<ModelParams>,
}

impl ModelFile {
    /// Model `i` is generated with seed `seed + i`.
    pub fn synthesize(&self) -> Result<super::ProfileSet, ProfileError> {
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                Ok((
                    m.model_id.clone(),
                    synthesize_profile(m, self.seed.wrapping_add(i as u64))?,
                ))
            })
            .collect()
    }
}

fn round_to(value: f64, step: f64) -> f64 {
    (value / step).round() * step
}

/// Generates a profile table from `params`. The same (params, seed) always
/// yields the same table. Memory-infeasible cells are dropped.
pub fn synthesize_profile(params: &ModelParams, seed: u64) -> Result<ProfileTable, ProfileError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut batches = params.bounds.batch_sizes.clone();
    batches.sort_unstable();
    batches.dedup();
    let mut procs = params.bounds.process_counts.clone();
    procs.sort_unstable();
    procs.dedup();

    let anchors: BTreeMap<ProfileKey, &Anchor> = params
        .anchors
        .iter()
        .map(|a| {
            (
                ProfileKey::new(a.instance_size, a.batch_size, a.process_count),
                a,
            )
        })
        .collect();
    for key in anchors.keys() {
        if !batches.contains(&key.batch_size) || !procs.contains(&key.process_count) {
            return Err(ProfileError::InvalidParams(format!(
                "{}: anchor {key} lies outside the profiling bounds",
                params.model_id
            )));
        }
    }

    let mut latency: BTreeMap<ProfileKey, f64> = BTreeMap::new();
    for &p in &procs {
        for &size in &InstanceSize::ALL {
            for &b in &batches {
                let key = ProfileKey::new(size, b, p);
                let noise = 1.0 + params.jitter * rng.gen_range(-1.0..=1.0);
                let value = match anchors.get(&key) {
                    Some(a) => a.latency_ms,
                    None => params.formula_latency(size, b, p) * noise,
                };
                latency.insert(key, value);
            }
        }
    }

    // A cell at (s, b) must not be slower than an anchor at a smaller-or-equal
    // size with a larger-or-equal batch.
    for (key, value) in latency.iter_mut() {
        if anchors.contains_key(key) {
            continue;
        }
        for a in anchors.values() {
            if a.process_count == key.process_count
                && a.instance_size <= key.instance_size
                && a.batch_size >= key.batch_size
            {
                *value = value.min(a.latency_ms);
            }
        }
    }

    // Raise each free cell to the largest latency it dominates: sizes
    // descending, batches ascending.
    for &p in &procs {
        for (si, &size) in InstanceSize::ALL.iter().enumerate().rev() {
            for (bi, &b) in batches.iter().enumerate() {
                let key = ProfileKey::new(size, b, p);
                if anchors.contains_key(&key) {
                    continue;
                }
                let mut floor = latency[&key];
                if let Some(&larger) = InstanceSize::ALL.get(si + 1) {
                    floor = floor.max(latency[&ProfileKey::new(larger, b, p)]);
                }
                if bi > 0 {
                    floor = floor.max(latency[&ProfileKey::new(size, batches[bi - 1], p)]);
                }
                latency.insert(key, floor);
            }
        }
    }

    let mut throughput: BTreeMap<ProfileKey, f64> = BTreeMap::new();
    for (key, lat) in latency.iter_mut() {
        match anchors.get(key) {
            Some(a) => {
                throughput.insert(*key, a.throughput_rps);
            }
            None => {
                *lat = round_to(*lat, 0.01).max(0.01);
                let raw = f64::from(key.process_count * key.batch_size) * 1000.0 / *lat;
                throughput.insert(*key, round_to(params.throughput_efficiency * raw, 0.1));
            }
        }
    }

    // Throughput must not drop as instances grow; anchors can sit above the
    // formula, so lift free cells to the largest value at smaller sizes.
    for &p in &procs {
        for &b in &batches {
            let mut best = 0.0f64;
            for &size in &InstanceSize::ALL {
                let key = ProfileKey::new(size, b, p);
                let tp = throughput.get_mut(&key).expect("grid cell");
                if !anchors.contains_key(&key) {
                    *tp = tp.max(best);
                }
                best = best.max(*tp);
            }
        }
    }

    let points = latency.iter().map(|(key, lat)| ProfilePoint {
        model_id: params.model_id.clone(),
        instance_size: key.instance_size,
        batch_size: key.batch_size,
        process_count: key.process_count,
        throughput: throughput[key],
        latency_ms: *lat,
        memory_required: round_to(params.memory(key.batch_size, key.process_count), 0.01),
    });
    let table = ProfileTable::from_points(params.model_id.clone(), points)?;
    Ok(filter_feasible(&table, &MemoryMap::default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams {
            model_id: "toy".into(),
            base_throughput: 200.0,
            gpc_exponent: 1.0,
            batch_half_saturation: 1.0,
            process_interference: 0.03,
            throughput_efficiency: 0.9,
            weights_gb: 0.1,
            activation_gb_per_sample: 0.02,
            process_overhead_gb: 0.5,
            jitter: 0.05,
            anchors: vec![],
            bounds: ProfileBounds::default(),
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize_profile(&params(), 7).unwrap();
        let b = synthesize_profile(&params(), 7).unwrap();
        assert_eq!(a, b);
        let c = synthesize_profile(&params(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn non_positive_base_throughput_rejected() {
        let mut p = params();
        p.base_throughput = 0.0;
        assert!(matches!(
            synthesize_profile(&p, 1),
            Err(ProfileError::InvalidParams(_))
        ));
        p.base_throughput = -3.0;
        assert!(synthesize_profile(&p, 1).is_err());
    }

    #[test]
    fn grid_covers_bounds_when_memory_allows() {
        let t = synthesize_profile(&params(), 1).unwrap();
        assert_eq!(t.len(), 5 * 8 * 3);
    }

    #[test]
    fn anchors_survive_verbatim() {
        let mut p = params();
        p.anchors.push(Anchor {
            instance_size: InstanceSize::TWO,
            batch_size: 8,
            process_count: 2,
            throughput_rps: 777.0,
            latency_ms: 19.0,
        });
        let t = synthesize_profile(&p, 3).unwrap();
        let cell = t.get(&ProfileKey::new(InstanceSize::TWO, 8, 2)).unwrap();
        assert_eq!((cell.throughput, cell.latency_ms), (777.0, 19.0));
    }
}
