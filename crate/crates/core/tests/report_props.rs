use std::collections::HashMap;

use hiermon::report::{
    aggregate, aggregate_with_superseded, make_node_report, measure, parse, serialize, Metric, Report, ReportGenerator,
    ReportKind, ServiceReport,
};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    // Includes XML metacharacters and non-ASCII text.
    "[a-zA-Z0-9 <>&\"'./_é-]{1,12}"
}

fn metric() -> impl Strategy<Value = Metric> {
    (
        text(),
        prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL,
    )
        .prop_map(|(name, value)| Metric { name, value })
}

fn node_report(machine: String) -> impl Strategy<Value = Report> {
    prop::collection::vec(
        (
            text(),
            1i64..10_000_000_000,
            0u64..2_000_000_000_000,
            prop::collection::vec(metric(), 0..5),
        ),
        1..4,
    )
    .prop_map(move |services| {
        let reports = services
            .into_iter()
            .map(|(svc, period, at, mut metrics)| {
                let mut seen = std::collections::HashSet::new();
                metrics.retain(|m| seen.insert(m.name.clone()));
                ServiceReport::new(svc, machine.clone(), period, at, metrics).unwrap()
            })
            .collect();
        make_node_report(&machine, reports, 7).unwrap()
    })
}

fn report() -> impl Strategy<Value = Report> {
    let leaf = text().prop_flat_map(node_report);
    leaf.prop_recursive(3, 24, 4, |inner| {
        (prop::collection::vec(inner, 1..4), text(), 0u64..u64::MAX)
            .prop_map(|(children, source, at)| aggregate(children, ReportKind::Intermediate, &source, at).unwrap())
    })
}

proptest! {
    #[test]
    fn parse_inverts_serialize(r in report()) {
        let bytes = serialize(&r);
        prop_assert_eq!(measure(&r).bytes, bytes.len());
        let back = parse(&bytes).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn system_wrapper_roundtrips(r in report()) {
        let sys = aggregate(vec![r], ReportKind::System, "root", 1).unwrap();
        prop_assert_eq!(parse(&serialize(&sys)).unwrap(), sys);
    }

    #[test]
    fn truncated_xml_is_rejected(r in report(), cut in 0.0f64..1.0) {
        let bytes = serialize(&r);
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(parse(&bytes[..n]).is_err());
    }

    #[test]
    fn dedupe_keeps_latest_per_source(
        entries in prop::collection::vec((0u64..5, 0u64..10), 1..30)
    ) {
        let g = ReportGenerator::default();
        let children: Vec<Report> = entries
            .iter()
            .map(|(m, at)| g.node_report(*m, *at))
            .collect();
        let (merged, dropped) =
            aggregate_with_superseded(children.clone(), ReportKind::Intermediate, "c", 99).unwrap();
        // Oracle: the last occurrence of the maximal timestamp per source.
        let mut best: HashMap<u64, (u64, usize)> = HashMap::new();
        for (i, (m, at)) in entries.iter().enumerate() {
            let e = best.entry(*m).or_insert((*at, i));
            if *at >= e.0 {
                *e = (*at, i);
            }
        }
        let hiermon::report::Children::Reports(kept) = merged.children() else {
            panic!("intermediate holds reports");
        };
        prop_assert_eq!(kept.len(), best.len());
        prop_assert_eq!(kept.len() + dropped.len(), children.len());
        for k in kept {
            let m: u64 = k.source().trim_start_matches("machine-").parse().unwrap();
            prop_assert_eq!(k.generated_at_ms(), best[&m].0);
        }
        prop_assert_eq!(merged.leaf_count(), best.len());
    }
}

#[test]
fn generated_node_reports_are_about_half_a_kilobyte() {
    let g = ReportGenerator::default();
    for i in 0..1000 {
        let bytes = measure(&g.node_report(i, 1_700_000_000_000 + i * 997)).bytes;
        assert!((448..=576).contains(&bytes), "{bytes}");
    }
}
