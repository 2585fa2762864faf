//! Fourteen hand-crafted account features computed from incident edges.
//!
//! Layout (index: meaning):
//!
//! | idx | feature |
//! |-----|---------|
//! | 0-3 | trans: out total, out avg, in total, in avg |
//! | 4-7 | call: out total, out avg, in total, in avg |
//! | 8-9 | balance (in − out) for trans, call |
//! | 10-13 | trans initiated, trans received, call initiated, call received |
//!
//! Averages divide by the summed interaction `count`, and are 0 for an
//! empty bucket.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heig::{AccountType, Heig, InteractionEdge, InteractionType, TripletRelation};

pub const FEATURE_DIM: usize = 14;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "trans_out_total",
    "trans_out_avg",
    "trans_in_total",
    "trans_in_avg",
    "call_out_total",
    "call_out_avg",
    "call_in_total",
    "call_in_avg",
    "trans_balance",
    "call_balance",
    "trans_initiated",
    "trans_received",
    "call_initiated",
    "call_received",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn zeros() -> Self {
        FeatureVector([0.0; FEATURE_DIM])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        crate::heig::check_dim("feature vector", values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        let mut out = [0.0; FEATURE_DIM];
        out.copy_from_slice(values);
        Ok(FeatureVector(out))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Running per-(kind, direction) totals for one account.
#[derive(Default)]
struct Tally {
    // [kind][0 = out, 1 = in]
    total: [[f64; 2]; 2],
    count: [[u64; 2]; 2],
}

impl Tally {
    fn add(&mut self, edge: &InteractionEdge, incoming: bool) {
        let k = edge.kind.index();
        let d = incoming as usize;
        self.total[k][d] += edge.sum;
        self.count[k][d] += edge.count;
    }

    fn finish(&self) -> FeatureVector {
        let mut f = [0.0; FEATURE_DIM];
        for kind in InteractionType::ALL {
            let k = kind.index();
            for d in 0..2 {
                let total = self.total[k][d];
                let n = self.count[k][d];
                f[4 * k + 2 * d] = total;
                f[4 * k + 2 * d + 1] = if n == 0 { 0.0 } else { total / n as f64 };
                f[10 + 2 * k + d] = n as f64;
            }
            f[8 + k] = self.total[k][1] - self.total[k][0];
        }
        FeatureVector(f)
    }
}

pub fn account_features(g: &Heig, id: &str) -> Result<FeatureVector> {
    let node = g.node(id).ok_or_else(|| Error::UnknownAccount(id.to_string()))?;
    // (edge position, incoming?) visited in global edge order
    let mut incident = Vec::new();
    for r in TripletRelation::ALL {
        let index = g.relation(r);
        if r.src() == node.kind {
            incident.extend(index.outgoing[node.local].iter().map(|&p| (index.edges[p], false)));
        }
        if r.dst() == node.kind {
            incident.extend(index.incoming[node.local].iter().map(|&p| (index.edges[p], true)));
        }
    }
    incident.sort_unstable();
    let mut tally = Tally::default();
    for (e, incoming) in incident {
        tally.add(&g.edges()[e], incoming);
    }
    Ok(tally.finish())
}

/// `n_kind x 14` matrix, rows in ascending account-id order.
pub fn feature_matrix(g: &Heig, kind: AccountType) -> Array2<f64> {
    let n = g.count(kind);
    let mut tallies: Vec<Tally> = (0..n).map(|_| Tally::default()).collect();
    for edge in g.edges() {
        // self-loops contribute to both directions
        let src = g.node(&edge.src).expect("edge endpoints exist");
        if src.kind == kind {
            tallies[src.local].add(edge, false);
        }
        let dst = g.node(&edge.dst).expect("edge endpoints exist");
        if dst.kind == kind {
            tallies[dst.local].add(edge, true);
        }
    }
    let mut out = Array2::zeros((n, FEATURE_DIM));
    for (i, t) in tallies.iter().enumerate() {
        for (j, v) in t.finish().0.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Computes and stores the feature vector on every account.
pub fn initialize_features(g: &mut Heig) {
    let mats = AccountType::ALL.map(|k| feature_matrix(g, k));
    let rows: Vec<(AccountType, usize)> =
        g.accounts().map(|a| (a.kind, g.node(&a.id).expect("known").local)).collect();
    for (account, (kind, row)) in g.accounts_mut().zip(rows) {
        let m = &mats[kind.index()];
        let mut f = [0.0; FEATURE_DIM];
        for (j, slot) in f.iter_mut().enumerate() {
            *slot = m[[row, j]];
        }
        account.features = Some(FeatureVector(f));
    }
}

/// Per-type column standardization applied before the CVAE and the
/// classifier see any features.
///
/// Raw amounts are heavy-tailed, so every value first goes through the
/// signed transform `sign(x) * ln(1 + |x|)`; each column is then shifted
/// and scaled to zero mean and unit (population) variance. Constant
/// columns keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [Vec<f64>; 2],
    pub scale: [Vec<f64>; 2],
}

fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

impl Standardizer {
    pub fn fit(raw: &[Array2<f64>; 2]) -> Self {
        let mut mean = [vec![0.0; FEATURE_DIM], vec![0.0; FEATURE_DIM]];
        let mut scale = [vec![1.0; FEATURE_DIM], vec![1.0; FEATURE_DIM]];
        for t in 0..2 {
            let m = raw[t].mapv(signed_log1p);
            let n = m.nrows();
            if n == 0 {
                continue;
            }
            for j in 0..FEATURE_DIM {
                let col = m.column(j);
                let mu = col.sum() / n as f64;
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                mean[t][j] = mu;
                scale[t][j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, kind: AccountType, raw: &Array2<f64>) -> Array2<f64> {
        let t = kind.index();
        let mut out = raw.mapv(signed_log1p);
        for mut row in out.rows_mut() {
            for j in 0..FEATURE_DIM {
                row[j] = (row[j] - self.mean[t][j]) / self.scale[t][j];
            }
        }
        out
    }
}

/// Raw and standardized feature matrices for both account types.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub raw: [Array2<f64>; 2],
    pub standardized: [Array2<f64>; 2],
    pub standardizer: Standardizer,
}

impl FeatureTable {
    pub fn compute(g: &Heig) -> Self {
        let raw = AccountType::ALL.map(|k| feature_matrix(g, k));
        let standardizer = Standardizer::fit(&raw);
        Self::with_standardizer(raw, standardizer)
    }

    pub fn with_standardizer(raw: [Array2<f64>; 2], standardizer: Standardizer) -> Self {
        let standardized = [
            standardizer.apply(AccountType::Ca, &raw[0]),
            standardizer.apply(AccountType::Eoa, &raw[1]),
        ];
        FeatureTable { raw, standardized, standardizer }
    }

    pub fn standardized(&self, kind: AccountType) -> &Array2<f64> {
        &self.standardized[kind.index()]
    }
}
