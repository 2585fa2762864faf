use std::collections::{BTreeMap, BTreeSet};

use mahgnn_core::ingest::{aggregate_records, assemble_dataset, expand_two_hop, topk_filter, DatasetSpec, RawRecord};
use mahgnn_core::{InteractionEdge, InteractionType};
use proptest::prelude::*;

type Key = (String, String, InteractionType);

fn edges_strategy() -> impl Strategy<Value = Vec<InteractionEdge>> {
    prop::collection::vec((0usize..40, 0usize..40, any::<bool>(), 1u64..6, 0u8..10), 0..200).prop_map(|specs| {
        let mut seen = BTreeSet::new();
        specs
            .into_iter()
            .filter_map(|(s, d, call, count, sum)| {
                let kind = if call { InteractionType::Call } else { InteractionType::Trans };
                seen.insert((s, d, kind)).then(|| {
                    InteractionEdge::new(format!("s{s:02}"), format!("d{d:02}"), kind, count, sum as f64 * 0.5)
                })
            })
            .collect()
    })
}

fn keys(edges: &[InteractionEdge]) -> BTreeSet<Key> {
    edges.iter().map(|e| (e.src.clone(), e.dst.clone(), e.kind)).collect()
}

/// Per count group: rank by (sum desc, key asc) and keep the first
/// `ceil(p * n / 1000)`, at least one.
fn oracle(edges: &[InteractionEdge], per_mille: u64) -> BTreeSet<Key> {
    let mut groups: BTreeMap<u64, Vec<&InteractionEdge>> = BTreeMap::new();
    for e in edges {
        groups.entry(e.count).or_default().push(e);
    }
    let mut out = BTreeSet::new();
    for group in groups.values() {
        let mut ranked: Vec<(i64, Key)> = group
            .iter()
            .map(|e| (-(e.sum * 2.0) as i64, (e.src.clone(), e.dst.clone(), e.kind)))
            .collect();
        ranked.sort();
        let keep = (per_mille * group.len() as u64).div_ceil(1000).max(1) as usize;
        out.extend(ranked.into_iter().take(keep).map(|(_, k)| k));
    }
    out
}

proptest! {
    #[test]
    fn filter_matches_sort_and_slice(edges in edges_strategy(), per_mille in 1u64..=1000) {
        let got = topk_filter(&edges, per_mille as f64 / 1000.0).unwrap();
        prop_assert_eq!(keys(&got), oracle(&edges, per_mille));
    }

    #[test]
    fn larger_k_keeps_a_superset(edges in edges_strategy(), a in 1u64..=1000, b in 1u64..=1000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let small = keys(&topk_filter(&edges, lo as f64 / 1000.0).unwrap());
        let large = keys(&topk_filter(&edges, hi as f64 / 1000.0).unwrap());
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn aggregation_conserves_value(records in prop::collection::vec((0usize..6, 0usize..6, any::<bool>(), 0.0f64..100.0), 0..80)) {
        let records: Vec<RawRecord> = records
            .into_iter()
            .map(|(f, t, call, v)| RawRecord {
                from: format!("x{f}"),
                to: format!("x{t}"),
                kind: if call { InteractionType::Call } else { InteractionType::Trans },
                value: v,
                timestamp: None,
            })
            .collect();
        let edges = aggregate_records(&records);
        let total: f64 = records.iter().map(|r| r.value).sum();
        prop_assert!((edges.iter().map(|e| e.sum).sum::<f64>() - total).abs() <= 1e-9 * total.max(1.0));
        prop_assert_eq!(edges.iter().map(|e| e.count).sum::<u64>(), records.len() as u64);
        prop_assert_eq!(keys(&edges).len(), edges.len());
    }
}

#[test]
fn k_of_one_keeps_everything() {
    let edges: Vec<InteractionEdge> =
        (0..25).map(|i| InteractionEdge::new(format!("a{i}"), "b", InteractionType::Trans, 1 + i % 3, i as f64)).collect();
    assert_eq!(topk_filter(&edges, 1.0).unwrap().len(), 25);
    assert!(topk_filter(&edges, 0.0).is_err());
    assert!(topk_filter(&edges, 1.5).is_err());
}

fn rec(from: &str, to: &str, kind: InteractionType, value: f64) -> RawRecord {
    RawRecord { from: from.into(), to: to.into(), kind, value, timestamp: None }
}

#[test]
fn dataset_keeps_first_order_and_filters_second_order() {
    use InteractionType::*;
    // seed P; neighbours u, v; second-order edges hang off u and v
    let mut records = vec![rec("u", "P", Call, 5.0), rec("P", "v", Trans, 2.0), rec("u", "P", Call, 1.0)];
    for i in 0..10 {
        records.push(rec(&format!("w{i}"), "u", Trans, i as f64));
    }
    records.push(rec("far1", "far2", Trans, 99.0));
    let labels = BTreeMap::from([("P".to_string(), true), ("N".to_string(), false)]);
    let spec = DatasetSpec { labels, negatives: 1, k: 0.3, seed: 1 };

    let hops = expand_two_hop(&records, &BTreeSet::from(["P".to_string(), "N".to_string()]));
    assert_eq!(hops.first_order.len(), 3);
    assert_eq!(hops.second_order.len(), 10);

    let g = assemble_dataset(&records, &spec, &BTreeMap::new()).unwrap();
    let kept: Vec<_> = g.edges().iter().filter(|e| e.dst == "u").collect();
    assert_eq!(kept.len(), 3);
    assert!(kept.iter().all(|e| e.sum >= 7.0));
    let first = g.edges().iter().find(|e| e.src == "u" && e.dst == "P").unwrap();
    assert_eq!((first.count, first.sum), (2, 6.0));
    assert!(g.account("far1").is_none());
    assert_eq!(g.account("N").unwrap().label, Some(false));
    assert_eq!(g.account("P").unwrap().label, Some(true));
}
