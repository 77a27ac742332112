use proptest::prelude::*;
use segplan_core::allocator::{
    allocate, allocation_optimization, covers_demand, is_mig_valid, segment_relocation,
    AllocatorConfig, DeploymentMap, SegmentQueueSet,
};
use segplan_core::configurator::{configure, select_optimal_segment, Service, Triplet};
use segplan_core::evaluation::{
    allocated_fraction, external_fragmentation, internal_slack, run_simulation, ActivityReport,
    ArrivalKind, SegmentActivity, Workload,
};
use segplan_core::mig::{
    enumerate_full_configs, is_prefix_valid, Cell, Geometry, GpuState, InstanceSize, NUM_SLOTS,
};
use segplan_core::profiles::{
    filter_feasible, load_profile_table, synthesize_profile, Format, MemoryMap, ModelParams,
    ProfileKey, ProfileSet, ProfileTable,
};

fn params() -> impl Strategy<Value = ModelParams> {
    (
        1.0..3000.0f64,
        0.8..1.0f64,
        0.0..64.0f64,
        0.0..0.3f64,
        0.6..1.0f64,
        0.1..6.0f64,
        0.0..0.2f64,
        0.0..0.05f64,
    )
        .prop_map(
            |(base, exp, half, interference, eff, weights, act, jitter)| ModelParams {
                model_id: "m".into(),
                base_throughput: base,
                gpc_exponent: exp,
                batch_half_saturation: half,
                process_interference: interference,
                throughput_efficiency: eff,
                weights_gb: weights,
                activation_gb_per_sample: act,
                process_overhead_gb: 0.5,
                jitter,
                anchors: Vec::new(),
                bounds: Default::default(),
            },
        )
}

fn table() -> impl Strategy<Value = ProfileTable> {
    (params(), any::<u64>())
        .prop_map(|(p, seed)| synthesize_profile(&p, seed).expect("valid params"))
}

/// A configured service whose SLO admits at least one point of `table`.
fn service_on(
    table: &ProfileTable,
    id: &str,
    slo_factor: f64,
    rate_factor: f64,
) -> Option<Service> {
    let fastest = table
        .points()
        .map(|p| p.latency_ms)
        .fold(f64::INFINITY, f64::min);
    let slo = fastest * 2.0 * slo_factor;
    let probe = configure(Service::new(id, table.model_id(), slo, 0.0), table).ok()?;
    let best = probe
        .opt_tri_array
        .iter()
        .map(|t| t.throughput)
        .fold(0.0, f64::max);
    configure(
        Service::new(id, table.model_id(), slo, (best * rate_factor).round()),
        table,
    )
    .ok()
}

fn services() -> impl Strategy<Value = (Vec<Service>, ProfileSet)> {
    prop::collection::vec((params(), any::<u64>(), 1.05..30.0f64, 0.0..6.0f64), 1..8).prop_map(
        |specs| {
            let mut tables = ProfileSet::new();
            let mut services = Vec::new();
            for (i, (mut p, seed, slo, rate)) in specs.into_iter().enumerate() {
                p.model_id = format!("m{i}");
                let t = synthesize_profile(&p, seed).expect("valid params");
                if let Some(s) = service_on(&t, &format!("s{i}"), slo, rate) {
                    services.push(s);
                }
                tables.insert(p.model_id.clone(), t);
            }
            (services, tables)
        },
    )
}

fn size() -> impl Strategy<Value = InstanceSize> {
    prop::sample::select(InstanceSize::ALL.to_vec())
}

fn seg(size: InstanceSize) -> Triplet {
    Triplet {
        instance_size: size,
        batch_size: 1,
        process_count: 1,
        throughput: 1.0,
        latency_ms: 1.0,
    }
}

fn random_map(sizes: &[Vec<InstanceSize>]) -> DeploymentMap {
    let mut map = DeploymentMap::new(Geometry::a100());
    for gpu in sizes {
        let g = map.push_gpu();
        for &s in gpu {
            if let Some(fp) = map.gpus()[g].find_slot(s, &Geometry::a100()) {
                map.place_at(g, "x", seg(s), fp.start).unwrap();
            }
        }
    }
    map
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn profile_latency_falls_and_throughput_rises_with_size(t in table()) {
        for p in t.points() {
            let Some(&larger) = InstanceSize::ALL.get(p.instance_size.index() + 1) else { continue };
            let q = t.get(&ProfileKey::new(larger, p.batch_size, p.process_count)).unwrap();
            prop_assert!(q.latency_ms <= p.latency_ms);
            prop_assert!(q.throughput >= p.throughput);
        }
    }

    #[test]
    fn profile_latency_grows_with_batch(t in table()) {
        for p in t.points() {
            for q in t.points() {
                if q.instance_size == p.instance_size
                    && q.process_count == p.process_count
                    && q.batch_size > p.batch_size
                {
                    prop_assert!(q.latency_ms >= p.latency_ms);
                }
            }
        }
    }

    #[test]
    fn profile_synthesis_is_deterministic(p in params(), seed in any::<u64>()) {
        prop_assert_eq!(synthesize_profile(&p, seed).unwrap(), synthesize_profile(&p, seed).unwrap());
    }

    #[test]
    fn profile_round_trips_through_csv_and_json(t in table()) {
        let csv = load_profile_table(t.to_csv_string().as_bytes(), Format::Csv).unwrap();
        prop_assert_eq!(&csv, &t);
        let mut json = Vec::new();
        t.write_json(&mut json).unwrap();
        prop_assert_eq!(load_profile_table(json.as_slice(), Format::Json).unwrap(), t);
    }

    #[test]
    fn feasibility_filter_is_idempotent(t in table(), scale in 0.1..2.0f64) {
        let memory = MemoryMap::new([
            (InstanceSize::ONE, 10.0 * scale),
            (InstanceSize::TWO, 20.0 * scale),
            (InstanceSize::THREE, 40.0 * scale),
            (InstanceSize::FOUR, 40.0 * scale),
            (InstanceSize::SEVEN, 80.0 * scale),
        ]);
        let once = filter_feasible(&t, &memory);
        prop_assert_eq!(filter_feasible(&once, &memory), once);
    }

    #[test]
    fn configuration_covers_demand_within_half_slo(
        t in table(), slo in 1.05..40.0f64, rate in 0.0..50.0f64,
    ) {
        let Some(s) = service_on(&t, "s", slo, rate) else { return Ok(()) };
        prop_assert!(s.covered_rate() >= s.req_rate);
        for seg in s.segments() {
            prop_assert!(seg.latency_ms < s.internal_latency_ms);
        }
        if let Some(opt) = s.opt_seg {
            prop_assert_eq!(s.num_opt_seg, (s.req_rate / opt.throughput).floor() as u32);
        }
    }

    #[test]
    fn optimal_segment_ignores_uniform_scaling(t in table(), slo in 1.05..40.0f64, k in 0.01..100.0f64) {
        let Some(s) = service_on(&t, "s", slo, 1.0) else { return Ok(()) };
        let scaled: Vec<Triplet> = s
            .opt_tri_array
            .iter()
            .map(|tr| Triplet { throughput: tr.throughput * k, ..*tr })
            .collect();
        prop_assert_eq!(
            select_optimal_segment(&scaled).map(|t| t.instance_size),
            select_optimal_segment(&s.opt_tri_array).map(|t| t.instance_size)
        );
    }

    #[test]
    fn gpu_states_stay_prefix_valid(ops in prop::collection::vec((any::<bool>(), size(), any::<prop::sample::Index>()), 1..40)) {
        let geometry = Geometry::a100();
        let configs = enumerate_full_configs(&geometry);
        let mut gpu = GpuState::new(0);
        for (place, s, pick) in ops {
            if place || gpu.is_empty() {
                let mut twin = gpu.clone();
                let a = gpu.try_place("x", seg(s), &geometry);
                let b = twin.try_place("x", seg(s), &geometry);
                prop_assert_eq!(a, b);
            } else {
                let start = gpu.segments()[pick.index(gpu.segments().len())].start_slot;
                gpu.remove(start).unwrap();
            }
            prop_assert!(gpu.num_gpcs() as usize <= NUM_SLOTS);
            let occupied = gpu.slot_map().cells().iter().filter(|c| matches!(c, Cell::Occupied { .. })).count();
            prop_assert_eq!(occupied, gpu.num_gpcs() as usize);
            prop_assert!(is_prefix_valid(&gpu, &configs));
        }
    }

    #[test]
    fn allocation_is_valid_covering_and_deterministic((services, _) in services()) {
        let cfg = AllocatorConfig::default();
        let first = segment_relocation(&services, &cfg);
        prop_assert!(is_mig_valid(&first));
        prop_assert!(covers_demand(&first, &services));
        prop_assert_eq!(first.to_json(), segment_relocation(&services, &cfg).to_json());

        let (opt, _) = allocation_optimization(first.clone(), &services, &cfg);
        prop_assert!(is_mig_valid(&opt));
        prop_assert!(covers_demand(&opt, &services));
        prop_assert!(opt.gpu_count() <= first.gpu_count());
        if !first.is_empty() {
            prop_assert!(external_fragmentation(&opt, 14).unwrap() <= external_fragmentation(&first, 14).unwrap());
        }
    }

    #[test]
    fn queues_drain_largest_first(sizes in prop::collection::vec(size(), 0..40)) {
        let mut queues = SegmentQueueSet::new();
        for s in &sizes {
            queues.enqueue("x", seg(*s));
        }
        let mut map = DeploymentMap::new(Geometry::a100());
        let events = allocate(&mut map, &mut queues, None);
        prop_assert_eq!(events.len(), sizes.len());
        prop_assert!(events.windows(2).all(|w| w[0].size >= w[1].size));
        prop_assert!(is_mig_valid(&map));
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        gpus in prop::collection::vec(prop::collection::vec(size(), 0..7), 1..6),
        activity in prop::collection::vec(0.0..=1.0f64, 1..20),
    ) {
        let map = random_map(&gpus);
        let frag = external_fragmentation(&map, 14).unwrap();
        prop_assert!((0.0..=1.0).contains(&frag));
        prop_assert!((0.0..=1.0).contains(&allocated_fraction(&map, 14).unwrap()));

        let report = ActivityReport {
            segments: activity
                .iter()
                .enumerate()
                .map(|(i, &a)| SegmentActivity {
                    gpu: 0,
                    start_slot: 0,
                    service: "x".into(),
                    sm_count: 14 * (1 + (i as u32 % 4)),
                    activity: a,
                })
                .collect(),
            gpu_count: 1,
            sms_per_gpu: 98,
        };
        let slack = internal_slack(&report).unwrap();
        prop_assert!((0.0..=1.0).contains(&slack));

        let mut doubled = report.clone();
        doubled.segments.extend(report.segments.iter().cloned());
        prop_assert!((internal_slack(&doubled).unwrap() - slack).abs() <= 1e-12);
    }

    #[test]
    fn empty_gpu_raises_fragmentation(gpus in prop::collection::vec(prop::collection::vec(size(), 1..7), 1..6)) {
        let mut map = random_map(&gpus);
        let before = external_fragmentation(&map, 14).unwrap();
        map.push_gpu();
        prop_assert!(external_fragmentation(&map, 14).unwrap() > before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn simulation_conserves_requests_and_bounds_queues(
        (services, tables) in services(), seed in any::<u64>(), poisson in any::<bool>(),
    ) {
        let cfg = AllocatorConfig::default();
        let (map, _) = allocation_optimization(segment_relocation(&services, &cfg), &services, &cfg);
        let kind = if poisson { ArrivalKind::Poisson } else { ArrivalKind::Deterministic };
        let workload = Workload::nominal(kind, &services, 5.0);
        let out = run_simulation(&map, &tables, &services, &workload, seed, 14).unwrap();
        prop_assert_eq!(&out, &run_simulation(&map, &tables, &services, &workload, seed, 14).unwrap());
        for st in &out.report.services {
            prop_assert_eq!(st.arrived, st.dispatched + st.queued_at_horizon);
            prop_assert_eq!(st.dispatched, st.completed + st.in_flight);
        }
        if !poisson {
            // one full batch per lane covers the backlog that a busy round can build
            for s in &services {
                let st = out.report.service(&s.id).unwrap();
                let capacity: u64 = s
                    .segments()
                    .iter()
                    .map(|t| u64::from(t.batch_size) * u64::from(t.process_count))
                    .sum();
                prop_assert!(st.max_queue_len <= 2 * capacity + 1, "{} queued {} > {}", s.id, st.max_queue_len, capacity);
            }
        }
    }
}
