//! Raw interaction records to dataset graphs.
//!
//! Around the labeled seed contracts we keep every first-order interaction.
//! Second-order interactions are aggregated into edges, grouped by their
//! exact `count`, and only the top fraction `k` of each group by `sum`
//! survives.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heig::{build_heig, Account, AccountType, Heig, InteractionEdge, InteractionType};
use crate::io::{csv_error, parse_error, reader, writer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub from: String,
    pub to: String,
    pub kind: InteractionType,
    pub value: f64,
    pub timestamp: Option<i64>,
}

#[derive(Deserialize)]
struct RecordRow {
    from: String,
    to: String,
    kind: String,
    value: f64,
    #[serde(default)]
    timestamp: Option<i64>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    from: &'a str,
    to: &'a str,
    kind: &'a str,
    value: f64,
    timestamp: Option<i64>,
}

pub fn parse_records(path: &Path) -> Result<Vec<RawRecord>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row: RecordRow = rec.deserialize(None).map_err(|e| csv_error(path, e))?;
        let kind = row.kind.parse().map_err(|m| parse_error(path, &rec, m))?;
        if !(row.value >= 0.0) || !row.value.is_finite() {
            return Err(parse_error(path, &rec, format!("invalid value {}", row.value)));
        }
        out.push(RawRecord { from: row.from, to: row.to, kind, value: row.value, timestamp: row.timestamp });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(RecordOut {
            from: &r.from,
            to: &r.to,
            kind: r.kind.as_str(),
            value: r.value,
            timestamp: r.timestamp,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records grouped by hop distance from the seed set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TwoHop {
    pub first_order: Vec<RawRecord>,
    pub second_order: Vec<RawRecord>,
}

pub fn expand_two_hop(records: &[RawRecord], seeds: &BTreeSet<String>) -> TwoHop {
    let mut neighbors: BTreeSet<&str> = BTreeSet::new();
    for r in records {
        if seeds.contains(&r.from) {
            neighbors.insert(&r.to);
        }
        if seeds.contains(&r.to) {
            neighbors.insert(&r.from);
        }
    }
    let mut out = TwoHop::default();
    for r in records {
        if seeds.contains(&r.from) || seeds.contains(&r.to) {
            out.first_order.push(r.clone());
        } else if neighbors.contains(r.from.as_str()) || neighbors.contains(r.to.as_str()) {
            out.second_order.push(r.clone());
        }
    }
    out
}

/// Sums records with identical `(from, to, kind)` into one edge, in record
/// order; output is sorted by that key.
pub fn aggregate_records(records: &[RawRecord]) -> Vec<InteractionEdge> {
    let mut acc: BTreeMap<(&str, &str, InteractionType), (u64, f64)> = BTreeMap::new();
    for r in records {
        let slot = acc.entry((&r.from, &r.to, r.kind)).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 += r.value;
    }
    acc.into_iter()
        .map(|((s, d, k), (count, sum))| InteractionEdge::new(s, d, k, count, sum))
        .collect()
}

/// Number of edges kept from a group of `n` at fraction `k`: `ceil(k * n)`,
/// at least one. Products within 1e-9 of an integer are snapped to it so
/// that e.g. `0.1 * 30` keeps 3.
pub fn keep_count(k: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = k * n as f64;
    let nearest = x.round();
    let kept = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { x.ceil() };
    (kept as usize).clamp(1, n)
}

pub fn topk_filter(second_order: &[InteractionEdge], k: f64) -> Result<Vec<InteractionEdge>> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidK(k));
    }
    let mut groups: BTreeMap<u64, Vec<&InteractionEdge>> = BTreeMap::new();
    for e in second_order {
        groups.entry(e.count).or_default().push(e);
    }
    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| b.sum.total_cmp(&a.sum).then_with(|| a.key().cmp(&b.key())));
        let n = keep_count(k, group.len());
        kept.extend(group.into_iter().take(n).cloned());
    }
    kept.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Known labels; every positive becomes a seed, negatives are sampled.
    pub labels: BTreeMap<String, bool>,
    pub negatives: usize,
    pub k: f64,
    pub seed: u64,
}

/// Resolves account types: explicit declarations win; otherwise labeled
/// accounts and call targets are contracts and everything else is an EOA.
pub fn resolve_kinds(
    records: &[RawRecord],
    labels: &BTreeMap<String, bool>,
    declared: &BTreeMap<String, AccountType>,
) -> BTreeMap<String, AccountType> {
    let mut kinds: BTreeMap<String, AccountType> = BTreeMap::new();
    for r in records {
        for id in [&r.from, &r.to] {
            kinds.entry(id.clone()).or_insert(AccountType::Eoa);
        }
        if r.kind == InteractionType::Call {
            kinds.insert(r.to.clone(), AccountType::Ca);
        }
    }
    for id in labels.keys() {
        kinds.insert(id.clone(), AccountType::Ca);
    }
    for (id, &k) in declared {
        if let Some(slot) = kinds.get_mut(id) {
            *slot = k;
        }
    }
    kinds
}

/// Draws the negative seeds uniformly without replacement.
pub fn sample_negatives(spec: &DatasetSpec) -> Result<Vec<String>> {
    let negatives: Vec<&String> = spec.labels.iter().filter(|(_, &l)| !l).map(|(id, _)| id).collect();
    if spec.negatives > negatives.len() {
        return Err(Error::InsufficientNegatives {
            requested: spec.negatives,
            available: negatives.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked: Vec<String> = rand::seq::index::sample(&mut rng, negatives.len(), spec.negatives)
        .into_iter()
        .map(|i| negatives[i].clone())
        .collect();
    picked.sort();
    Ok(picked)
}

pub fn assemble_dataset(
    records: &[RawRecord],
    spec: &DatasetSpec,
    declared_kinds: &BTreeMap<String, AccountType>,
) -> Result<Heig> {
    if !(spec.k > 0.0 && spec.k <= 1.0) {
        return Err(Error::InvalidK(spec.k));
    }
    let negatives = sample_negatives(spec)?;
    let mut seed_labels: BTreeMap<String, bool> =
        spec.labels.iter().filter(|(_, &l)| l).map(|(id, &l)| (id.clone(), l)).collect();
    seed_labels.extend(negatives.into_iter().map(|id| (id, false)));
    let seeds: BTreeSet<String> = seed_labels.keys().cloned().collect();

    let hops = expand_two_hop(records, &seeds);
    let mut edges = aggregate_records(&hops.first_order);
    edges.extend(topk_filter(&aggregate_records(&hops.second_order), spec.k)?);

    let kinds = resolve_kinds(records, &seed_labels, declared_kinds);
    let mut ids: BTreeSet<&str> = seeds.iter().map(String::as_str).collect();
    for e in &edges {
        ids.insert(&e.src);
        ids.insert(&e.dst);
    }
    let accounts = ids
        .into_iter()
        .map(|id| {
            let kind = kinds.get(id).copied().unwrap_or(AccountType::Ca);
            Account::new(id, kind).with_label(seed_labels.get(id).copied())
        })
        .collect();
    build_heig(accounts, edges)
}
