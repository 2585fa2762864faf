//! Synthetic interaction graphs with planted Ponzi-like contracts.
//!
//! A Ponzi contract takes EOA deposits in staged waves. After each wave
//! it pays part of the new money (ratio below 1) to some investors of
//! earlier waves, so the last wave is never paid. Normal contracts serve
//! users through calls and transfers and return roughly what they take
//! in, to whoever they like. A share of EOAs ("regulars") are more likely
//! to invest in Ponzi contracts, which gives the graph structure signal
//! beyond each contract's own features. Background contracts and random
//! edges in every relation add noise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heig::{build_heig, classify_triplet, Account, AccountType, Heig, InteractionType, TripletRelation};
use crate::ingest::{aggregate_records, RawRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amount {
    /// Parameters of the log-normal value distribution.
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub ponzi: usize,
    pub normal: usize,
    pub eoas: usize,
    /// Unlabeled contracts used only as interaction partners.
    pub background_cas: usize,
    pub investors: [usize; 2],
    pub waves: [usize; 2],
    /// Share of earlier investors paid after each wave.
    pub payout_fraction: [f64; 2],
    /// Payouts as a share of the wave's deposits.
    pub payout_ratio: [f64; 2],
    /// Probability that a deposit is made through a call.
    pub call_investment: [f64; 2],
    pub normal_users: [usize; 2],
    /// Normal contract outflow as a share of its transfer inflow.
    pub normal_balance: [f64; 2],
    /// Share of EOAs that invest preferentially in Ponzi contracts.
    pub regular_fraction: f64,
    /// Probability that an investor is drawn from the regulars.
    pub regular_bias: f64,
    pub amounts: BTreeMap<TripletRelation, Amount>,
    /// Expected random edges per source-type account, per relation.
    pub background: BTreeMap<TripletRelation, f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        use TripletRelation::*;
        let amount = |mu, sigma| Amount { mu, sigma };
        SynthSpec {
            ponzi: 200,
            normal: 200,
            eoas: 5000,
            background_cas: 50,
            investors: [10, 50],
            waves: [2, 5],
            payout_fraction: [0.2, 0.7],
            payout_ratio: [0.3, 0.95],
            call_investment: [0.0, 0.6],
            normal_users: [5, 50],
            normal_balance: [0.7, 1.5],
            regular_fraction: 0.2,
            regular_bias: 0.8,
            amounts: [
                (RccC, amount(-2.0, 1.0)),
                (RccT, amount(-1.0, 1.0)),
                (RceT, amount(0.0, 1.0)),
                (RecC, amount(-1.0, 1.0)),
                (RecT, amount(0.0, 1.0)),
                (ReeT, amount(0.0, 1.2)),
            ]
            .into(),
            background: [(RccC, 0.3), (RccT, 0.1), (RceT, 0.3), (RecC, 0.3), (RecT, 0.3), (ReeT, 1.0)].into(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        for (name, [lo, hi]) in [("investors", self.investors), ("waves", self.waves), ("normal_users", self.normal_users)] {
            if lo > hi || lo == 0 {
                return bad(format!("{name} range [{lo}, {hi}] must be non-empty and positive"));
            }
        }
        for (name, [lo, hi]) in [
            ("payout_fraction", self.payout_fraction),
            ("payout_ratio", self.payout_ratio),
            ("call_investment", self.call_investment),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} range [{lo}, {hi}] must lie in [0, 1]"));
            }
        }
        if self.payout_ratio[1] >= 1.0 {
            return bad("payout ratio must stay below 1".into());
        }
        let [lo, hi] = self.normal_balance;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return bad(format!("normal_balance range [{lo}, {hi}] invalid"));
        }
        for (name, f) in [("regular_fraction", self.regular_fraction), ("regular_bias", self.regular_bias)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0, 1]"));
            }
        }
        for r in TripletRelation::ALL {
            match self.amounts.get(&r) {
                Some(a) if a.mu.is_finite() && a.sigma.is_finite() && a.sigma >= 0.0 => {}
                _ => return bad(format!("missing or invalid amount distribution for {r}")),
            }
            if let Some(d) = self.background.get(&r) {
                if !(d.is_finite() && *d >= 0.0) {
                    return bad(format!("background density for {r} must be non-negative"));
                }
            }
        }
        let cas = self.ponzi + self.normal + self.background_cas;
        if cas > 0 && self.eoas < 2 {
            return bad("contracts need at least 2 EOAs to interact with".into());
        }
        Ok(())
    }
}

/// Exact bookkeeping of what was emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLedger {
    pub ca: usize,
    pub eoa: usize,
    /// Distinct `(src, dst, kind)` edges per relation.
    pub per_relation: BTreeMap<TripletRelation, usize>,
    pub records: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub graph: Heig,
    pub labels: BTreeMap<String, bool>,
    pub ledger: GenerationLedger,
    pub records: Vec<RawRecord>,
    /// Every account with its type, including isolated ones.
    pub accounts: Vec<Account>,
}

struct Emitter {
    rng: ChaCha8Rng,
    records: Vec<RawRecord>,
    keys: BTreeSet<(usize, usize, InteractionType)>,
    per_relation: BTreeMap<TripletRelation, usize>,
    amounts: BTreeMap<TripletRelation, LogNormal<f64>>,
    ids: Vec<String>,
    kinds: Vec<AccountType>,
}

impl Emitter {
    fn draw(&mut self, r: TripletRelation) -> f64 {
        self.amounts[&r].sample(&mut self.rng)
    }

    /// Emits one record between account handles; `value` defaults to a
    /// draw from the relation's distribution.
    fn emit(&mut self, from: usize, to: usize, kind: InteractionType, value: Option<f64>) {
        let r = classify_triplet(self.kinds[from], kind, self.kinds[to]).expect("generator respects call targets");
        let value = value.unwrap_or_else(|| self.draw(r));
        let ts = self.records.len() as i64;
        self.records.push(RawRecord {
            from: self.ids[from].clone(),
            to: self.ids[to].clone(),
            kind,
            value,
            timestamp: Some(ts),
        });
        if self.keys.insert((from, to, kind)) {
            *self.per_relation.entry(r).or_insert(0) += 1;
        }
    }

    fn uniform_usize(&mut self, [lo, hi]: [usize; 2]) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn uniform(&mut self, [lo, hi]: [f64; 2]) -> f64 {
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..hi)
        }
    }

    /// `k` distinct picks from `pool`.
    fn pick(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        let k = k.min(pool.len());
        sample(&mut self.rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    }
}

fn address<R: Rng>(rng: &mut R, used: &mut BTreeSet<String>) -> String {
    loop {
        let id = format!("0x{:08x}{:032x}", rng.random::<u32>(), rng.random::<u128>());
        if used.insert(id.clone()) {
            return id;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Ponzi,
    Normal,
    Background,
}

/// Splits `budget` over `n` recipients with random positive weights.
fn shares<R: Rng>(rng: &mut R, n: usize, budget: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| budget * x / total).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut roles: Vec<Role> = std::iter::repeat_n(Role::Ponzi, spec.ponzi)
        .chain(std::iter::repeat_n(Role::Normal, spec.normal))
        .chain(std::iter::repeat_n(Role::Background, spec.background_cas))
        .collect();
    rand::seq::SliceRandom::shuffle(roles.as_mut_slice(), &mut rng);
    let n_ca = roles.len();
    let mut used = BTreeSet::new();
    let mut ids = Vec::with_capacity(n_ca + spec.eoas);
    let mut kinds = Vec::with_capacity(n_ca + spec.eoas);
    for _ in 0..n_ca {
        ids.push(address(&mut rng, &mut used));
        kinds.push(AccountType::Ca);
    }
    for _ in 0..spec.eoas {
        ids.push(address(&mut rng, &mut used));
        kinds.push(AccountType::Eoa);
    }
    let cas: Vec<usize> = (0..n_ca).collect();
    let eoas: Vec<usize> = (n_ca..n_ca + spec.eoas).collect();
    let n_regular = (spec.regular_fraction * spec.eoas as f64).round() as usize;
    let (regulars, others) = eoas.split_at(n_regular.min(eoas.len()));
    let amounts = spec
        .amounts
        .iter()
        .map(|(&r, a)| (r, LogNormal::new(a.mu, a.sigma).expect("validated")))
        .collect();
    let mut em = Emitter {
        rng,
        records: Vec::new(),
        keys: BTreeSet::new(),
        per_relation: BTreeMap::new(),
        amounts,
        ids,
        kinds,
    };
    let (regulars, others) = (regulars.to_vec(), others.to_vec());

    for (ca, &role) in roles.iter().enumerate() {
        let creator = eoas[em.rng.random_range(0..eoas.len())];
        em.emit(creator, ca, InteractionType::Call, None);
        match role {
            Role::Ponzi => ponzi_motif(&mut em, spec, ca, &regulars, &others, &eoas),
            Role::Normal => normal_motif(&mut em, spec, ca, &regulars, &others, &cas),
            Role::Background => {
                let users = em.uniform_usize(spec.normal_users);
                for u in em.pick(&eoas, users) {
                    em.emit(u, ca, InteractionType::Call, None);
                }
            }
        }
        if em.rng.random_bool(0.3) && n_ca > 1 {
            let other = cas[em.rng.random_range(0..n_ca)];
            em.emit(ca, other, InteractionType::Call, None);
        }
    }

    for r in TripletRelation::ALL {
        let density = spec.background.get(&r).copied().unwrap_or(0.0);
        let (src_pool, dst_pool) = (pool(&cas, &eoas, r.src()), pool(&cas, &eoas, r.dst()));
        if density == 0.0 || src_pool.is_empty() || dst_pool.is_empty() {
            continue;
        }
        let n = (density * src_pool.len() as f64).round() as usize;
        for _ in 0..n {
            let s = src_pool[em.rng.random_range(0..src_pool.len())];
            let d = dst_pool[em.rng.random_range(0..dst_pool.len())];
            em.emit(s, d, r.interaction(), None);
        }
    }

    let mut labels = BTreeMap::new();
    for (ca, role) in roles.iter().enumerate() {
        match role {
            Role::Ponzi => labels.insert(em.ids[ca].clone(), true),
            Role::Normal => labels.insert(em.ids[ca].clone(), false),
            Role::Background => None,
        };
    }
    let accounts: Vec<Account> = em
        .ids
        .iter()
        .zip(&em.kinds)
        .map(|(id, &k)| Account::new(id.clone(), k).with_label(labels.get(id).copied()))
        .collect();
    let edges = aggregate_records(&em.records);
    let graph = build_heig(accounts.clone(), edges)?;
    let ledger = GenerationLedger {
        ca: n_ca,
        eoa: spec.eoas,
        per_relation: TripletRelation::ALL.into_iter().map(|r| (r, em.per_relation.get(&r).copied().unwrap_or(0))).collect(),
        records: em.records.len(),
        seed: spec.seed,
    };
    Ok(SynthOutput { graph, labels, ledger, records: em.records, accounts })
}

fn pool<'a>(cas: &'a [usize], eoas: &'a [usize], kind: AccountType) -> &'a [usize] {
    match kind {
        AccountType::Ca => cas,
        AccountType::Eoa => eoas,
    }
}

fn ponzi_motif(em: &mut Emitter, spec: &SynthSpec, ca: usize, regulars: &[usize], others: &[usize], eoas: &[usize]) {
    let n = em.uniform_usize(spec.investors).min(eoas.len());
    let from_regulars = (0..n).filter(|_| em.rng.random_bool(spec.regular_bias)).count().min(regulars.len());
    let mut investors = em.pick(regulars, from_regulars);
    let rest = em.pick(others, n - from_regulars);
    investors.extend(rest);
    if investors.len() < n {
        let missing: Vec<usize> = eoas.iter().copied().filter(|e| !investors.contains(e)).collect();
        let extra = em.pick(&missing, n - investors.len());
        investors.extend(extra);
    }
    rand::seq::SliceRandom::shuffle(investors.as_mut_slice(), &mut em.rng);

    let waves = em.uniform_usize(spec.waves).min(investors.len()).max(1);
    let fraction = em.uniform(spec.payout_fraction);
    let ratio = em.uniform(spec.payout_ratio);
    let call_prob = em.uniform(spec.call_investment);
    let per_wave = investors.len().div_ceil(waves);
    for (w, wave) in investors.chunks(per_wave).enumerate() {
        let mut inflow = 0.0;
        for &inv in wave {
            for _ in 0..em.rng.random_range(1..=3) {
                let kind = if em.rng.random_bool(call_prob) { InteractionType::Call } else { InteractionType::Trans };
                let r = if kind == InteractionType::Call { TripletRelation::RecC } else { TripletRelation::RecT };
                let value = em.draw(r);
                inflow += value;
                em.emit(inv, ca, kind, Some(value));
            }
        }
        let earlier = &investors[..w * per_wave];
        let paid = ((fraction * earlier.len() as f64).round() as usize).min(earlier.len());
        if paid == 0 {
            continue;
        }
        let payees = em.pick(earlier, paid);
        let amounts = shares(&mut em.rng, payees.len(), ratio * inflow);
        for (p, a) in payees.into_iter().zip(amounts) {
            em.emit(ca, p, InteractionType::Trans, Some(a));
        }
    }
}

fn normal_motif(em: &mut Emitter, spec: &SynthSpec, ca: usize, regulars: &[usize], others: &[usize], cas: &[usize]) {
    let n = em.uniform_usize(spec.normal_users);
    // regulars show up at normal contracts too, at their population share
    let from_regulars = (0..n).filter(|_| em.rng.random_bool(spec.regular_fraction)).count().min(regulars.len());
    let mut users = em.pick(regulars, from_regulars);
    let rest = em.pick(others, n - from_regulars);
    users.extend(rest);
    let eoas: Vec<usize> = regulars.iter().chain(others).copied().collect();
    let eoas = &eoas[..];
    let call_prob = em.rng.random_range(0.3..0.9);
    let mut inflow = 0.0;
    for &u in &users {
        for _ in 0..em.rng.random_range(1..=3) {
            if em.rng.random_bool(call_prob) {
                em.emit(u, ca, InteractionType::Call, None);
            } else {
                let value = em.draw(TripletRelation::RecT);
                inflow += value;
                em.emit(u, ca, InteractionType::Trans, Some(value));
            }
        }
    }
    let balance = em.uniform(spec.normal_balance);
    let share = em.rng.random_range(0.3..1.0);
    let recipients = em.pick(eoas, ((share * n as f64).round() as usize).max(1));
    let budget = if inflow > 0.0 { balance * inflow } else { em.draw(TripletRelation::RceT) };
    let amounts = shares(&mut em.rng, recipients.len(), budget);
    for (r, a) in recipients.into_iter().zip(amounts) {
        em.emit(ca, r, InteractionType::Trans, Some(a));
    }
    if em.rng.random_bool(0.3) && cas.len() > 1 {
        let other = cas[em.rng.random_range(0..cas.len())];
        em.emit(ca, other, InteractionType::Trans, None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heig::relation_stats;

    fn small() -> SynthSpec {
        SynthSpec { ponzi: 10, normal: 10, eoas: 300, background_cas: 5, seed: 7, ..SynthSpec::default() }
    }

    #[test]
    fn empty_spec_gives_empty_graph() {
        let out = generate(&SynthSpec { ponzi: 0, normal: 0, eoas: 0, background_cas: 0, ..SynthSpec::default() }).unwrap();
        assert_eq!(out.graph.num_accounts(), 0);
        assert!(out.graph.edges().is_empty());
        assert!(out.labels.is_empty());
    }

    #[test]
    fn ledger_matches_relation_stats() {
        let out = generate(&small()).unwrap();
        let stats = relation_stats(&out.graph);
        for r in TripletRelation::ALL {
            assert_eq!(stats.get(r), out.ledger.per_relation[&r], "{r}");
        }
        assert_eq!(stats.ca, out.ledger.ca);
        assert_eq!(stats.eoa, out.ledger.eoa);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.labels, b.labels);
        let c = generate(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            generate(&SynthSpec { payout_ratio: [0.5, 1.0], ..small() }),
            Err(Error::InvalidSpec(_))
        ));
        assert!(generate(&SynthSpec { investors: [5, 2], ..small() }).is_err());
        assert!(generate(&SynthSpec { eoas: 1, ..small() }).is_err());
        assert!(generate(&SynthSpec { regular_bias: 1.5, ..small() }).is_err());
    }
}
