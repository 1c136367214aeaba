use std::collections::BTreeMap;

use hiermon::model::{prop_time_closed, HierarchyConfig, LatencyBound};
use hiermon::sim::{run, verify_against_model, SimConfig};
use hiermon::{Coefficients, Hierarchy, Micros};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

const S: Micros = 1_000_000;

/// Small trees (at most 200 machines) with whole-second holds.
fn hierarchy() -> impl Strategy<Value = Hierarchy> {
    (1usize..=3).prop_flat_map(|h| {
        (
            1u64..4,
            prop::collection::vec(1u64..6, h),
            prop::collection::vec(1i64..40, h + 1),
            1i64..40,
        )
            .prop_filter("at most 200 machines", |(_, f, _, _)| f.iter().product::<u64>() <= 200)
            .prop_map(move |(services, rest, hold_s, period_s)| {
                let mut fanout = vec![services];
                fanout.extend(rest);
                HierarchyConfig {
                    depth: h,
                    fanout,
                    hold: hold_s.into_iter().map(|v| v * S).collect(),
                    service_period: period_s * S,
                }
            })
    })
}

fn sim_config() -> impl Strategy<Value = SimConfig> {
    (hierarchy(), any::<u64>(), 0.0f64..0.99, 3i64..5).prop_map(|(h, seed, jitter, windows)| {
        let mut c = SimConfig::new(h, Coefficients::synthetic_defaults());
        c.seed = seed;
        c.jitter_fraction = jitter;
        c.duration = windows * c.hierarchy.hold.iter().sum::<Micros>();
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn observed_propagation_within_bound(c in sim_config()) {
        let trace = run(&c).unwrap();
        prop_assert!(trace.saturation().is_ok());
        let bound = prop_time_closed(&c.hierarchy, &trace.timings, c.hierarchy.depth).unwrap();
        prop_assert_eq!(bound, trace.analytic_bound);
        let LatencyBound::Finite(b) = bound else { panic!("small trees never saturate") };
        for d in &trace.deliveries {
            prop_assert!(d.propagation >= 0);
            prop_assert!(d.propagation <= b, "{:?} over {}", d, b);
            prop_assert_eq!(d.level_path.len(), c.hierarchy.depth);
        }
        if let Ok(v) = verify_against_model(&trace) {
            prop_assert!(v.bound_respected);
            prop_assert!(v.tightness > 0.0 && v.tightness <= 1.0);
        }
        let stale = trace.staleness_bound.finite().unwrap();
        prop_assert_eq!(stale, b + c.hierarchy.service_period);
    }

    #[test]
    fn lossless_and_counted(c in sim_config()) {
        let trace = run(&c).unwrap();
        prop_assert!(trace.lossless.is_lossless(), "{:?}", trace.lossless);
        let top = c.hierarchy.hold[c.hierarchy.depth];
        prop_assert_eq!(trace.root_flushes, (c.duration / top) as u64);
    }

    #[test]
    fn deterministic(c in sim_config()) {
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        prop_assert_eq!(a.deliveries_csv(), b.deliveries_csv());
        prop_assert_eq!(a.machines_csv(), b.machines_csv());
    }
}

/// With one hold everywhere and services no faster than it, no window ever
/// sees two reports from one source, so every service's deliveries must be
/// the full tick sequence `phase, phase + T_s, ...` up to the delivery cutoff.
#[test]
fn equal_holds_deliver_every_tick() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = (
        1usize..=3,
        1u64..4,
        prop::collection::vec(1u64..6, 3),
        5i64..30,
        1i64..3,
        any::<u64>(),
    );
    for _ in 0..40 {
        let (h, services, rest, hold_s, mult, seed) = strategy.new_tree(&mut runner).unwrap().current();
        let mut fanout = vec![services];
        fanout.extend(&rest[..h]);
        let hierarchy = HierarchyConfig {
            depth: h,
            fanout,
            hold: vec![hold_s * S; h + 1],
            service_period: hold_s * mult * S,
        };
        let mut c = SimConfig::new(hierarchy, Coefficients::synthetic_defaults());
        c.seed = seed;
        c.jitter_fraction = 0.9;
        let trace = run(&c).unwrap();
        let bound = trace.analytic_bound.finite().unwrap();
        let cutoff = c.duration - bound;
        let period = c.hierarchy.service_period;

        let mut per_service: BTreeMap<&str, Vec<Micros>> = BTreeMap::new();
        for d in &trace.deliveries {
            per_service.entry(&d.service_id).or_default().push(d.emitted_at);
        }
        let expected_services = c.hierarchy.machines_total() * c.hierarchy.fanout[0];
        assert_eq!(per_service.len() as u64, expected_services);
        for (svc, mut times) in per_service {
            times.sort();
            let phase = times[0];
            assert!(phase < period, "{svc}: first tick {phase}");
            let expected: Vec<Micros> = (0..).map(|k| phase + k * period).take_while(|t| *t <= cutoff).collect();
            let observed: Vec<Micros> = times.iter().copied().filter(|t| *t <= cutoff).collect();
            assert_eq!(observed, expected, "{svc}");
        }
    }
}
