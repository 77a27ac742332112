//! Searches synthetic model parameters for the shipped scenario fixtures.
//!
//! Usage: `cargo run --release -p segplan-core --example calibrate -- [trials] [search-seed]`
//!
//! With `trials` = 0 it reports on `fixtures/models.json` and regenerates
//! `fixtures/profiles/` from it. Otherwise it runs a local search that
//! perturbs one model parameter (or the generator seed) at a time and
//! minimizes the summed external fragmentation of the scenarios. The first
//! candidate at zero that also passes simulation is written to
//! `fixtures/models.json` and `fixtures/profiles/`.
//!
//! `CALIBRATE_START=<file>` starts the search from another parameter file;
//! `CALIBRATE_DRY=1` only prints the winner.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segplan_core::driver::{load_scenario, plan, PlanOptions, Scenario};
use segplan_core::evaluation::{run_simulation, ArrivalKind, Workload};
use segplan_core::profiles::{ModelFile, ProfileSet};

const SIM_SEEDS: [u64; 3] = [1, 2, 3];
const HORIZON_S: f64 = 60.0;

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
}

fn scenarios() -> Vec<Scenario> {
    (1..=6)
        .map(|i| load_scenario(&fixtures().join(format!("scenarios/s{i}.json"))).expect("scenario"))
        .collect()
}

/// (GPUs, fragmentation) per scenario, or None if planning failed.
fn packing(tables: &ProfileSet, scenarios: &[Scenario]) -> Option<Vec<(usize, f64)>> {
    scenarios
        .iter()
        .map(|s| {
            plan(s, tables, &PlanOptions::default())
                .ok()
                .map(|p| (p.summary.gpu_count, p.summary.external_fragmentation))
        })
        .collect()
}

/// Smallest compliance seen over every service, scenario and seed.
fn worst_compliance(tables: &ProfileSet, scenarios: &[Scenario]) -> f64 {
    let mut worst = 1.0f64;
    for s in scenarios {
        let p = plan(s, tables, &PlanOptions::default()).expect("planned before");
        let workload = Workload::nominal(ArrivalKind::Poisson, &p.services, HORIZON_S);
        for seed in SIM_SEEDS {
            let out =
                run_simulation(&p.map, tables, &p.services, &workload, seed, 14).expect("simulate");
            for st in &out.report.services {
                if st.compliance < 1.0 {
                    eprintln!(
                        "  {} {} seed {seed}: compliance {:.6}",
                        s.name, st.service, st.compliance
                    );
                }
                worst = worst.min(st.compliance);
            }
        }
    }
    worst
}

fn write(file: &ModelFile, tables: &ProfileSet) {
    let text = serde_json::to_string_pretty(file).expect("serialize") + "\n";
    fs::write(fixtures().join("models.json"), text).expect("write models");
    let dir = fixtures().join("profiles");
    for (model, table) in tables {
        let f = fs::File::create(dir.join(format!("{model}.csv"))).expect("create csv");
        table.write_csv(f).expect("write csv");
    }
}

fn main() {
    let mut args = std::env::args().skip(1);
    let trials: u32 = args.next().map_or(0, |a| a.parse().expect("trials"));
    let search_seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let base: ModelFile = serde_json::from_str(
        &fs::read_to_string(fixtures().join("models.json")).expect("models.json"),
    )
    .expect("parse models.json");
    let start: ModelFile = match std::env::var_os("CALIBRATE_START") {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).expect("start file"))
            .expect("parse start"),
        None => base.clone(),
    };
    let scenarios = scenarios();

    if trials == 0 {
        let tables = base.synthesize().expect("synthesize");
        println!("{:?}", packing(&tables, &scenarios));
        println!("worst compliance {}", worst_compliance(&tables, &scenarios));
        write(&base, &tables);
        return;
    }

    // Local search on total fragmentation: resample one model's efficiency
    // (or the generator seed) and keep the change unless it scores worse.
    let mut rng = ChaCha8Rng::seed_from_u64(search_seed);
    let score = |file: &ModelFile| -> Option<(f64, ProfileSet)> {
        let tables = file.synthesize().ok()?;
        let result = packing(&tables, &scenarios)?;
        // fragmentation summed over scenarios, so small scenarios weigh as much as large ones
        Some((result.iter().map(|(_, f)| f).sum(), tables))
    };
    let mut current = start;
    let mut current_score = score(&current).map_or(f64::INFINITY, |(s, _)| s);
    let mut rejected = std::collections::HashSet::new();
    for trial in 0..trials {
        let mut file = current.clone();
        if rng.gen_bool(0.1) {
            file.seed = rng.gen_range(0..1_000_000);
        } else {
            let i = rng.gen_range(0..file.models.len());
            let m = &mut file.models[i];
            let original = &base.models[i];
            match rng.gen_range(0..5) {
                0 => {
                    m.throughput_efficiency = (rng.gen_range(0.60..0.95f64) * 100.0).round() / 100.0
                }
                1 => {
                    m.base_throughput =
                        (original.base_throughput * rng.gen_range(0.4..1.6f64) * 10.0).round()
                            / 10.0
                }
                2 => m.gpc_exponent = (rng.gen_range(0.92..1.0f64) * 100.0).round() / 100.0,
                3 => {
                    m.batch_half_saturation =
                        (original.batch_half_saturation * rng.gen_range(0.5..2.0f64) * 100.0)
                            .round()
                            / 100.0
                }
                _ => m.process_interference = (rng.gen_range(0.0..0.3f64) * 100.0).round() / 100.0,
            }
        }
        let Some((s, tables)) = score(&file) else {
            continue;
        };
        // occasionally accept a slightly worse candidate to leave plateaus
        if s > current_score && !(s <= current_score + 0.05 && rng.gen_bool(0.02)) {
            continue;
        }
        if s < current_score {
            println!(
                "trial {trial}: fragmentation sum {s:.4} {:?}",
                packing(&tables, &scenarios)
            );
            println!("state {}", serde_json::to_string(&file).expect("serialize"));
        }
        current = file;
        current_score = s;
        if s == 0.0 {
            let key = serde_json::to_string(&current).expect("serialize");
            if !rejected.insert(key) {
                continue;
            }
            let worst = worst_compliance(&tables, &scenarios);
            println!("trial {trial}: worst compliance {worst}");
            if worst == 1.0 {
                println!("{:?}", packing(&tables, &scenarios));
                if std::env::var_os("CALIBRATE_DRY").is_none() {
                    write(&current, &tables);
                }
                println!("{}", serde_json::to_string(&current).expect("serialize"));
                println!("written");
                return;
            }
        }
    }
    println!("no candidate passed");
}
