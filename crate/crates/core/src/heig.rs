//! Heterogeneous Ethereum interaction graph (HEIG).
//!
//! Accounts are either contract accounts (CA) or externally owned accounts
//! (EOA); interactions are either Ether transfers or contract calls. Every
//! directed interaction falls into exactly one of six triplet relations,
//! and the graph keeps a per-relation adjacency index over them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccountType {
    #[serde(rename = "ca")]
    Ca,
    #[serde(rename = "eoa")]
    Eoa,
}

impl AccountType {
    pub const ALL: [AccountType; 2] = [AccountType::Ca, AccountType::Eoa];

    pub fn index(self) -> usize {
        match self {
            AccountType::Ca => 0,
            AccountType::Eoa => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AccountType::Ca => "ca",
            AccountType::Eoa => "eoa",
        }
    }
}

impl fmt::Display for AccountType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccountType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ca" => Ok(AccountType::Ca),
            "eoa" => Ok(AccountType::Eoa),
            other => Err(format!("unknown account kind `{other}` (expected ca|eoa)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InteractionType {
    #[serde(rename = "trans")]
    Trans,
    #[serde(rename = "call")]
    Call,
}

impl InteractionType {
    pub const ALL: [InteractionType; 2] = [InteractionType::Trans, InteractionType::Call];

    pub fn index(self) -> usize {
        match self {
            InteractionType::Trans => 0,
            InteractionType::Call => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InteractionType::Trans => "trans",
            InteractionType::Call => "call",
        }
    }
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InteractionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "trans" => Ok(InteractionType::Trans),
            "call" => Ok(InteractionType::Call),
            other => Err(format!("unknown interaction kind `{other}` (expected trans|call)")),
        }
    }
}

/// The six (source type, interaction, target type) patterns. Call edges
/// always target a CA, which is why there are six and not eight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TripletRelation {
    /// CA -call-> CA
    RccC,
    /// CA -trans-> CA
    RccT,
    /// CA -trans-> EOA
    RceT,
    /// EOA -call-> CA
    RecC,
    /// EOA -trans-> CA
    RecT,
    /// EOA -trans-> EOA
    ReeT,
}

impl TripletRelation {
    pub const ALL: [TripletRelation; 6] = [
        TripletRelation::RccC,
        TripletRelation::RccT,
        TripletRelation::RceT,
        TripletRelation::RecC,
        TripletRelation::RecT,
        TripletRelation::ReeT,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parts(self) -> (AccountType, InteractionType, AccountType) {
        use AccountType::*;
        use InteractionType::*;
        match self {
            TripletRelation::RccC => (Ca, Call, Ca),
            TripletRelation::RccT => (Ca, Trans, Ca),
            TripletRelation::RceT => (Ca, Trans, Eoa),
            TripletRelation::RecC => (Eoa, Call, Ca),
            TripletRelation::RecT => (Eoa, Trans, Ca),
            TripletRelation::ReeT => (Eoa, Trans, Eoa),
        }
    }

    pub fn src(self) -> AccountType {
        self.parts().0
    }

    pub fn interaction(self) -> InteractionType {
        self.parts().1
    }

    pub fn dst(self) -> AccountType {
        self.parts().2
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TripletRelation::RccC => "RccC",
            TripletRelation::RccT => "RccT",
            TripletRelation::RceT => "RceT",
            TripletRelation::RecC => "RecC",
            TripletRelation::RecT => "RecT",
            TripletRelation::ReeT => "ReeT",
        }
    }

    /// Column label used in statistics tables, e.g. `R_cc^c`.
    pub fn table_label(self) -> &'static str {
        match self {
            TripletRelation::RccC => "R_cc^c",
            TripletRelation::RccT => "R_cc^t",
            TripletRelation::RceT => "R_ce^t",
            TripletRelation::RecC => "R_ec^c",
            TripletRelation::RecT => "R_ec^t",
            TripletRelation::ReeT => "R_ee^t",
        }
    }
}

impl fmt::Display for TripletRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TripletRelation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TripletRelation::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown triplet relation `{s}`"))
    }
}

pub fn classify_triplet(
    src: AccountType,
    edge: InteractionType,
    dst: AccountType,
) -> Result<TripletRelation> {
    use AccountType::*;
    use InteractionType::*;
    Ok(match (src, edge, dst) {
        (Ca, Call, Ca) => TripletRelation::RccC,
        (Ca, Trans, Ca) => TripletRelation::RccT,
        (Ca, Trans, Eoa) => TripletRelation::RceT,
        (Eoa, Call, Ca) => TripletRelation::RecC,
        (Eoa, Trans, Ca) => TripletRelation::RecT,
        (Eoa, Trans, Eoa) => TripletRelation::ReeT,
        (src, Call, Eoa) => return Err(Error::InvalidCallTarget { src, dst: Eoa }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub id: String,
    pub kind: AccountType,
    /// `Some(true)` marks a known Ponzi contract. Only CAs carry labels.
    pub label: Option<bool>,
    pub features: Option<FeatureVector>,
}

impl Account {
    pub fn new(id: impl Into<String>, kind: AccountType) -> Self {
        Account { id: id.into(), kind, label: None, features: None }
    }

    pub fn with_label(mut self, label: Option<bool>) -> Self {
        self.label = label;
        self
    }
}

/// An aggregated directed interaction: `count` underlying interactions
/// moving `sum` ether in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEdge {
    pub src: String,
    pub dst: String,
    pub kind: InteractionType,
    pub count: u64,
    pub sum: f64,
}

impl InteractionEdge {
    pub fn new(
        src: impl Into<String>,
        dst: impl Into<String>,
        kind: InteractionType,
        count: u64,
        sum: f64,
    ) -> Self {
        InteractionEdge { src: src.into(), dst: dst.into(), kind, count, sum }
    }

    pub fn key(&self) -> (&str, &str, InteractionType) {
        (&self.src, &self.dst, self.kind)
    }
}

/// Position of an account inside its type's row space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub kind: AccountType,
    pub local: usize,
}

/// Edges of one relation in local (per-type row) coordinates.
#[derive(Debug, Clone, Default)]
pub struct RelationIndex {
    /// Positions into [`Heig::edges`].
    pub edges: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// For every target row, positions into this relation's edge list.
    pub incoming: Vec<Vec<usize>>,
    /// For every source row, positions into this relation's edge list.
    pub outgoing: Vec<Vec<usize>>,
}

impl RelationIndex {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn in_neighbors(&self, dst_local: usize) -> impl Iterator<Item = usize> + '_ {
        self.incoming[dst_local].iter().map(move |&p| self.src[p])
    }

    pub fn out_neighbors(&self, src_local: usize) -> impl Iterator<Item = usize> + '_ {
        self.outgoing[src_local].iter().map(move |&p| self.dst[p])
    }
}

#[derive(Debug, Clone)]
pub struct Heig {
    accounts: BTreeMap<String, Account>,
    edges: Vec<InteractionEdge>,
    ids: [Vec<String>; 2],
    lookup: HashMap<String, NodeRef>,
    relations: Vec<RelationIndex>,
    edge_relation: Vec<TripletRelation>,
}

pub fn build_heig(accounts: Vec<Account>, edges: Vec<InteractionEdge>) -> Result<Heig> {
    let mut by_id = BTreeMap::new();
    for account in accounts {
        if account.label.is_some() && account.kind != AccountType::Ca {
            return Err(Error::InvalidAccount {
                id: account.id,
                reason: "only contract accounts may carry a label".into(),
            });
        }
        if let Some(f) = &account.features {
            if f.0.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidAccount {
                    id: account.id,
                    reason: "non-finite feature".into(),
                });
            }
        }
        if by_id.contains_key(&account.id) {
            return Err(Error::DuplicateAccount(account.id));
        }
        by_id.insert(account.id.clone(), account);
    }

    // parallel (src, dst, kind) edges collapse into one aggregate
    let mut merged: BTreeMap<(String, String, InteractionType), (u64, f64)> = BTreeMap::new();
    for e in edges {
        if e.count == 0 || !(e.sum >= 0.0) || !e.sum.is_finite() {
            return Err(Error::InvalidEdge {
                src: e.src,
                dst: e.dst,
                kind: e.kind,
                reason: format!("count={} sum={} (need count >= 1, finite sum >= 0)", e.count, e.sum),
            });
        }
        for endpoint in [&e.src, &e.dst] {
            if !by_id.contains_key(endpoint) {
                return Err(Error::DanglingEndpoint {
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                    missing: endpoint.clone(),
                });
            }
        }
        let slot = merged.entry((e.src, e.dst, e.kind)).or_insert((0, 0.0));
        slot.0 += e.count;
        slot.1 += e.sum;
    }

    let mut ids: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    let mut lookup = HashMap::with_capacity(by_id.len());
    for (id, account) in &by_id {
        let bucket = &mut ids[account.kind.index()];
        lookup.insert(id.clone(), NodeRef { kind: account.kind, local: bucket.len() });
        bucket.push(id.clone());
    }

    let mut relations: Vec<RelationIndex> = TripletRelation::ALL
        .iter()
        .map(|r| RelationIndex {
            incoming: vec![Vec::new(); ids[r.dst().index()].len()],
            outgoing: vec![Vec::new(); ids[r.src().index()].len()],
            ..RelationIndex::default()
        })
        .collect();
    let mut edge_relation = Vec::with_capacity(merged.len());
    let mut flat = Vec::with_capacity(merged.len());
    for ((src, dst, kind), (count, sum)) in merged {
        let s = lookup[&src];
        let d = lookup[&dst];
        let relation = classify_triplet(s.kind, kind, d.kind)?;
        let index = &mut relations[relation.index()];
        let pos = index.edges.len();
        index.edges.push(flat.len());
        index.src.push(s.local);
        index.dst.push(d.local);
        index.incoming[d.local].push(pos);
        index.outgoing[s.local].push(pos);
        edge_relation.push(relation);
        flat.push(InteractionEdge { src, dst, kind, count, sum });
    }

    Ok(Heig { accounts: by_id, edges: flat, ids, lookup, relations, edge_relation })
}

impl Heig {
    pub fn empty() -> Self {
        build_heig(Vec::new(), Vec::new()).expect("empty graph is valid")
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn account(&self, id: &str) -> Option<&Account> {
        self.accounts.get(id)
    }

    pub fn num_accounts(&self) -> usize {
        self.accounts.len()
    }

    /// Edges sorted by `(src, dst, kind)`.
    pub fn edges(&self) -> &[InteractionEdge] {
        &self.edges
    }

    pub fn edge_relation(&self, edge: usize) -> TripletRelation {
        self.edge_relation[edge]
    }

    pub fn count(&self, kind: AccountType) -> usize {
        self.ids[kind.index()].len()
    }

    /// Account ids of one type in ascending order; row `i` of every
    /// per-type matrix corresponds to `ids(kind)[i]`.
    pub fn ids(&self, kind: AccountType) -> &[String] {
        &self.ids[kind.index()]
    }

    pub fn node(&self, id: &str) -> Option<NodeRef> {
        self.lookup.get(id).copied()
    }

    pub fn account_at(&self, kind: AccountType, local: usize) -> &Account {
        &self.accounts[&self.ids[kind.index()][local]]
    }

    pub fn relation(&self, r: TripletRelation) -> &RelationIndex {
        &self.relations[r.index()]
    }

    /// Labeled CAs as `(local CA row, label)`, ascending by row.
    pub fn labeled_cas(&self) -> Vec<(usize, bool)> {
        self.ids[AccountType::Ca.index()]
            .iter()
            .enumerate()
            .filter_map(|(i, id)| self.accounts[id].label.map(|l| (i, l)))
            .collect()
    }

    pub fn max_in_degree(&self) -> usize {
        self.relations
            .iter()
            .flat_map(|r| r.incoming.iter().map(Vec::len))
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn accounts_mut(&mut self) -> impl Iterator<Item = &mut Account> {
        self.accounts.values_mut()
    }

    /// Returns a copy of the graph with labels replaced; labels for ids
    /// not present in `labels` are cleared.
    pub fn relabeled(&self, labels: &BTreeMap<String, bool>) -> Heig {
        let mut g = self.clone();
        for account in g.accounts.values_mut() {
            account.label = if account.kind == AccountType::Ca {
                labels.get(&account.id).copied()
            } else {
                None
            };
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RelationStats {
    pub ca: usize,
    pub eoa: usize,
    pub per_relation: [usize; 6],
}

impl RelationStats {
    pub fn header() -> String {
        let mut cols = vec!["CA".to_string(), "EOA".to_string()];
        cols.extend(TripletRelation::ALL.iter().map(|r| r.table_label().to_string()));
        cols.join("\t")
    }

    pub fn row(&self) -> String {
        let mut cols = vec![self.ca.to_string(), self.eoa.to_string()];
        cols.extend(self.per_relation.iter().map(|c| c.to_string()));
        cols.join("\t")
    }

    pub fn get(&self, r: TripletRelation) -> usize {
        self.per_relation[r.index()]
    }
}

pub fn relation_stats(g: &Heig) -> RelationStats {
    let mut per_relation = [0; 6];
    for r in TripletRelation::ALL {
        per_relation[r.index()] = g.relation(r).len();
    }
    RelationStats {
        ca: g.count(AccountType::Ca),
        eoa: g.count(AccountType::Eoa),
        per_relation,
    }
}

pub(crate) fn check_dim(context: &'static str, actual: usize) -> Result<()> {
    if actual != FEATURE_DIM {
        return Err(Error::DimensionMismatch { context, expected: FEATURE_DIM, actual });
    }
    Ok(())
}
