//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mahgnn-cli --test acceptance`. Set
//! `ACCEPTANCE_ONLY=5,6` to run a subset while iterating.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mahgnn_core::augment::{augment_features, pretrain_relations, FeatureGroupSet};
use mahgnn_core::cvae::{gaussian_kl, pretrain, CvaeConfig, GaussianLatents, TripletCvae, ZeroLatents};
use mahgnn_core::features::{feature_matrix, FeatureTable, FeatureVector, FEATURE_DIM};
use mahgnn_core::heig::{classify_triplet, relation_stats};
use mahgnn_core::ingest::topk_filter;
use mahgnn_core::model::{eval_hetero_layer, mean_pool_views, prediction_loss, MahgnnParams, MessageGraph, ModelConfig};
use mahgnn_core::synthgen::{generate, SynthSpec};
use mahgnn_core::trainer::{fit, sample_neighbors, shuffle_labels, TrainConfig};
use mahgnn_core::{build_heig, Account, AccountType, Error, Heig, InteractionEdge, InteractionType, TripletRelation};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- 1

fn taxonomy() -> Outcome {
    let start = Instant::now();
    let mut relations = BTreeSet::new();
    let mut invalid = 0;
    for src in AccountType::ALL {
        for kind in InteractionType::ALL {
            for dst in AccountType::ALL {
                match classify_triplet(src, kind, dst) {
                    Ok(r) => {
                        ensure(r.parts() == (src, kind, dst), || format!("{r} has parts {:?}", r.parts()))?;
                        relations.insert(r);
                    }
                    Err(Error::InvalidCallTarget { .. }) => {
                        ensure(kind == InteractionType::Call && dst == AccountType::Eoa, || {
                            format!("({src}, {kind}, {dst}) rejected")
                        })?;
                        invalid += 1;
                    }
                    Err(e) => return Err(format!("unexpected error {e}")),
                }
            }
        }
    }
    ensure(relations.len() == 6 && relations == TripletRelation::ALL.into_iter().collect(), || {
        format!("relations {relations:?}")
    })?;
    ensure(invalid == 2, || format!("{invalid} InvalidCallTarget errors"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("6 relations, 2 InvalidCallTarget, {:.1?}", start.elapsed()))
}

// ---------------------------------------------------------------- 2

fn random_graph(rng: &mut ChaCha8Rng) -> (Vec<Account>, Vec<InteractionEdge>) {
    let n = rng.random_range(1..=50);
    let accounts: Vec<Account> = (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.4) { AccountType::Ca } else { AccountType::Eoa };
            Account::new(format!("acct{i:02}"), kind)
        })
        .collect();
    let m = rng.random_range(0..=300);
    let mut keys = BTreeSet::new();
    let mut edges = Vec::new();
    for _ in 0..m {
        let s = rng.random_range(0..n);
        let d = rng.random_range(0..n);
        let kind = if accounts[d].kind == AccountType::Ca && rng.random_bool(0.5) {
            InteractionType::Call
        } else {
            InteractionType::Trans
        };
        if keys.insert((s, d, kind)) {
            let count = rng.random_range(1..=20);
            let sum = rng.random_range(0.0..1000.0);
            edges.push(InteractionEdge::new(accounts[s].id.clone(), accounts[d].id.clone(), kind, count, sum));
        }
    }
    (accounts, edges)
}

/// Recount by scanning every edge for one account.
fn brute_features(id: &str, edges: &[InteractionEdge]) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    let (mut t_out, mut t_in, mut c_out, mut c_in) = (0.0, 0.0, 0.0, 0.0);
    let (mut nt_out, mut nt_in, mut nc_out, mut nc_in) = (0u64, 0u64, 0u64, 0u64);
    for e in edges {
        let trans = e.kind == InteractionType::Trans;
        if e.src == id {
            if trans {
                t_out += e.sum;
                nt_out += e.count;
            } else {
                c_out += e.sum;
                nc_out += e.count;
            }
        }
        if e.dst == id {
            if trans {
                t_in += e.sum;
                nt_in += e.count;
            } else {
                c_in += e.sum;
                nc_in += e.count;
            }
        }
    }
    let avg = |t: f64, n: u64| if n == 0 { 0.0 } else { t / n as f64 };
    f[0] = t_out;
    f[1] = avg(t_out, nt_out);
    f[2] = t_in;
    f[3] = avg(t_in, nt_in);
    f[4] = c_out;
    f[5] = avg(c_out, nc_out);
    f[6] = c_in;
    f[7] = avg(c_in, nc_in);
    f[8] = t_in - t_out;
    f[9] = c_in - c_out;
    f[10] = nt_out as f64;
    f[11] = nt_in as f64;
    f[12] = nc_out as f64;
    f[13] = nc_in as f64;
    f
}

fn feature_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows = 0;
    let mut worst_balance: f64 = 0.0;
    for trial in 0..100 {
        let (accounts, edges) = random_graph(&mut rng);
        let g = build_heig(accounts, edges.clone()).map_err(|e| format!("graph {trial}: {e}"))?;
        let mut balance = [0.0f64; 2];
        for kind in AccountType::ALL {
            let m = feature_matrix(&g, kind);
            for (row, id) in g.ids(kind).iter().enumerate() {
                let expect = brute_features(id, &edges);
                for j in 0..FEATURE_DIM {
                    let (a, b) = (m[[row, j]], expect[j]);
                    ensure(a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()), || {
                        format!("graph {trial}, {id}, column {j}: {a} vs {b}")
                    })?;
                }
                balance[0] += m[[row, 8]];
                balance[1] += m[[row, 9]];
                rows += 1;
            }
        }
        for b in balance {
            worst_balance = worst_balance.max(b.abs());
            ensure(b.abs() <= 1e-9, || format!("graph {trial}: balance sum {b}"))?;
        }
    }
    Ok(format!("100 graphs, {rows} rows match the edge scan; max |Σ balance| = {worst_balance:.1e}"))
}

// ---------------------------------------------------------------- 3

/// Keeps `ceil(p * n / 1000)` edges (at least 1) of each count group by
/// sorting on (sum descending, key ascending) and slicing.
fn sort_and_slice(edges: &[InteractionEdge], per_mille: u64) -> Vec<InteractionEdge> {
    let mut by_count: BTreeMap<u64, Vec<InteractionEdge>> = BTreeMap::new();
    for e in edges {
        by_count.entry(e.count).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for (_, mut group) in by_count {
        group.sort_by(|a, b| (&a.src, &a.dst, a.kind).cmp(&(&b.src, &b.dst, b.kind)));
        group.sort_by(|a, b| b.sum.partial_cmp(&a.sum).unwrap());
        let n = group.len() as u64;
        let keep = ((per_mille * n).div_ceil(1000)).max(1) as usize;
        out.extend(group.into_iter().take(keep));
    }
    out
}

fn keys(edges: &[InteractionEdge]) -> BTreeSet<(String, String, InteractionType)> {
    edges.iter().map(|e| (e.src.clone(), e.dst.clone(), e.kind)).collect()
}

fn filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut groups = 0;
    while groups < 1000 {
        let counts = rng.random_range(1..=5);
        let mut edges = Vec::new();
        for c in 0..counts {
            let size = rng.random_range(1..=60);
            for i in 0..size {
                // few distinct sums, so ties are common
                let sum = rng.random_range(0..8) as f64 * 2.5;
                let kind = if rng.random_bool(0.5) { InteractionType::Trans } else { InteractionType::Call };
                edges.push(InteractionEdge::new(format!("s{i:03}"), format!("d{c}"), kind, c as u64 + 1, sum));
            }
            groups += 1;
        }
        // duplicate keys are impossible: (s_i, d_c, kind) may repeat only across kinds
        let mut seen = BTreeSet::new();
        edges.retain(|e| seen.insert((e.src.clone(), e.dst.clone(), e.kind)));
        let per_mille = rng.random_range(1..=1000);
        let k = per_mille as f64 / 1000.0;
        let got = topk_filter(&edges, k).map_err(|e| e.to_string())?;
        let expect = sort_and_slice(&edges, per_mille);
        ensure(keys(&got) == keys(&expect) && got.len() == expect.len(), || {
            format!("k = {k}: filter kept {} edges, oracle {}", got.len(), expect.len())
        })?;

        let mut previous: Option<BTreeSet<_>> = None;
        for k in [0.001, 0.01, 0.1, 1.0] {
            let kept = keys(&topk_filter(&edges, k).map_err(|e| e.to_string())?);
            if let Some(prev) = &previous {
                ensure(prev.is_subset(&kept), || format!("k = {k} drops edges kept at a smaller k"))?;
            }
            previous = Some(kept);
        }
        ensure(previous.as_ref().map(BTreeSet::len) == Some(edges.len()), || "k = 1 must keep everything".into())?;
    }
    Ok(format!("{groups} count groups match sort-and-slice; nested k monotone"))
}

// ---------------------------------------------------------------- 4

fn cvae_numerics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=16);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(1e-3..5.0)).collect();
        let kl = gaussian_kl(&mu, &sigma);
        ensure(kl >= 0.0 && kl.is_finite(), || format!("KL {kl} for mu {mu:?} sigma {sigma:?}"))?;
        min_kl = min_kl.min(kl);
    }

    // gradient check on a toy configuration
    let cfg = CvaeConfig { latent_dim: 3, hidden: vec![5], seed: 11, ..CvaeConfig::default() };
    let mut model = TripletCvae::new(TripletRelation::RecT, cfg).map_err(|e| e.to_string())?;
    let xu = Array2::from_shape_fn((4, FEATURE_DIM), |_| rng.random_range(-1.0..1.0));
    let xv = Array2::from_shape_fn((4, FEATURE_DIM), |_| rng.random_range(-1.0..1.0));
    let eps = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
    let (_, grads) = model.batch_elbo_with_grads(&xu, &xv, &eps).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        let dim = model.params().get(p).dim();
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let (numeric, analytic) = central_difference(
                    &mut model,
                    |m| m.params_mut(),
                    |m| m.batch_elbo(&xu, &xv, &eps).unwrap().total,
                    p,
                    (i, j),
                    grads[p][[i, j]],
                );
                let rel = relative(numeric, analytic);
                worst = worst.max(rel);
                ensure(rel <= 1e-4, || format!("{}[{i},{j}]: {numeric} vs {analytic}", model.params().name(p)))?;
                checked += 1;
            }
        }
    }

    // pre-training on correlated pairs
    let mut decreased = 0;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let pairs: Vec<(FeatureVector, FeatureVector)> = (0..200)
            .map(|_| {
                let v: Vec<f64> = (0..FEATURE_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
                let u: Vec<f64> = v.iter().map(|x| 0.8 * x + 0.2 * r.random_range(-1.0..1.0)).collect();
                (FeatureVector::from_slice(&v).unwrap(), FeatureVector::from_slice(&u).unwrap())
            })
            .collect();
        let cfg = CvaeConfig { seed, ..CvaeConfig::default() };
        let m = pretrain(TripletRelation::RceT, &pairs, &cfg).map_err(|e| e.to_string())?;
        let (first, last) = (m.history.first().unwrap().total, m.history.last().unwrap().total);
        if last < first {
            decreased += 1;
        }
    }
    ensure(decreased >= 19, || format!("loss decreased in {decreased}/20 runs"))?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "min KL {min_kl:.2e} over 10000 draws; {checked} gradients, worst rel. error {worst:.1e}; loss decreased in {decreased}/20 runs; {:.1?}",
        start.elapsed()
    ))
}

fn relative(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-5)
}

fn central_difference<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut mahgnn_core::params::ParamStore,
    loss: impl Fn(&M) -> f64,
    p: usize,
    idx: (usize, usize),
    analytic: f64,
) -> (f64, f64) {
    let h = 1e-6;
    let orig = store(model).get(p)[idx];
    store(model).get_mut(p)[idx] = orig + h;
    let up = loss(model);
    store(model).get_mut(p)[idx] = orig - h;
    let down = loss(model);
    store(model).get_mut(p)[idx] = orig;
    ((up - down) / (2.0 * h), analytic)
}

// ---------------------------------------------------------------- 5

/// Deterministic groups: initial features plus two views drawn with zero
/// latents, so every member is a row-wise function of the features.
fn row_wise_groups(g: &Heig, cvaes: &BTreeMap<TripletRelation, TripletCvae>, views: usize) -> FeatureGroupSet {
    let table = FeatureTable::compute(g);
    augment_features(table.standardized.clone(), cvaes, views, &mut ZeroLatents).unwrap()
}

fn toy_cvaes() -> BTreeMap<TripletRelation, TripletCvae> {
    TripletRelation::ALL
        .into_iter()
        .map(|r| {
            let cfg = CvaeConfig { latent_dim: 2, hidden: vec![4], seed: r.index() as u64, ..CvaeConfig::default() };
            (r, TripletCvae::new(r, cfg).unwrap())
        })
        .collect()
}

fn labeled_graph(rng: &mut ChaCha8Rng, names: &dyn Fn(usize) -> String, n_ca: usize, n_eoa: usize, m: usize) -> Heig {
    let mut accounts = Vec::new();
    for i in 0..n_ca {
        accounts.push(Account::new(names(i), AccountType::Ca).with_label(Some(i % 2 == 0)));
    }
    for i in 0..n_eoa {
        accounts.push(Account::new(names(n_ca + i), AccountType::Eoa));
    }
    let mut keys = BTreeSet::new();
    let mut edges = Vec::new();
    for _ in 0..m {
        let s = rng.random_range(0..n_ca + n_eoa);
        let d = rng.random_range(0..n_ca + n_eoa);
        let kind = if d < n_ca && rng.random_bool(0.5) { InteractionType::Call } else { InteractionType::Trans };
        if s != d && keys.insert((s, d, kind)) {
            edges.push(InteractionEdge::new(names(s), names(d), kind, rng.random_range(1..5), rng.random_range(0.1..50.0)));
        }
    }
    build_heig(accounts, edges).unwrap()
}

fn model_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cvaes = toy_cvaes();

    // attention normalization on a synthetic graph
    let spec = SynthSpec { ponzi: 20, normal: 20, eoas: 300, background_cas: 5, seed: 5, ..SynthSpec::default() };
    let g = generate(&spec).map_err(|e| e.to_string())?.graph;
    let model = MahgnnParams::init(ModelConfig { projected_dim: 8, reduced_dim: 8, heads: 4, views: 1, seed: 5, ..ModelConfig::default() })
        .map_err(|e| e.to_string())?;
    let h = [
        Array2::from_shape_fn((g.count(AccountType::Ca), 8), |_| rng.random_range(-2.0..2.0)),
        Array2::from_shape_fn((g.count(AccountType::Eoa), 8), |_| rng.random_range(-2.0..2.0)),
    ];
    let full = MessageGraph::full(&g);
    let (_, att) = eval_hetero_layer(model.params(), model.view_layer(0), [&h[0], &h[1]], &full.view_stage)
        .map_err(|e| e.to_string())?;
    let mut worst_sum: f64 = 0.0;
    let mut targets = 0;
    for (alpha, seg) in att.iter().flatten() {
        let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (row, &s) in seg.iter().enumerate() {
            for head in 0..alpha.ncols() {
                *sums.entry((s, head)).or_default() += alpha[[row, head]];
            }
        }
        targets += sums.len();
        for v in sums.values() {
            worst_sum = worst_sum.max((v - 1.0).abs());
        }
    }
    ensure(targets > 0 && worst_sum <= 1e-6, || format!("attention rows deviate from 1 by {worst_sum}"))?;

    // permutation equivariance: renaming accounts permutes rows
    let (n_ca, n_eoa) = (12, 18);
    let perm = {
        let mut p: Vec<usize> = (0..n_ca + n_eoa).collect();
        rand::seq::SliceRandom::shuffle(&mut p[..], &mut rng);
        p
    };
    let g1 = labeled_graph(&mut ChaCha8Rng::seed_from_u64(55), &|i| format!("a{i:03}"), n_ca, n_eoa, 120);
    let g2 = labeled_graph(&mut ChaCha8Rng::seed_from_u64(55), &|i| format!("a{:03}", perm[i]), n_ca, n_eoa, 120);
    let model = MahgnnParams::init(ModelConfig { projected_dim: 8, reduced_dim: 8, heads: 2, views: 2, seed: 9, ..ModelConfig::default() })
        .map_err(|e| e.to_string())?;
    let l1 = model.forward(&row_wise_groups(&g1, &cvaes, 2), &g1).map_err(|e| e.to_string())?;
    let l2 = model.forward(&row_wise_groups(&g2, &cvaes, 2), &g2).map_err(|e| e.to_string())?;
    let mut worst_perm: f64 = 0.0;
    for i in 0..n_ca {
        let r1 = g1.node(&format!("a{i:03}")).unwrap().local;
        let r2 = g2.node(&format!("a{:03}", perm[i])).unwrap().local;
        for c in 0..2 {
            worst_perm = worst_perm.max((l1[[r1, c]] - l2[[r2, c]]).abs());
        }
    }
    ensure(worst_perm <= 1e-6, || format!("permuted logits differ by {worst_perm}"))?;

    // full-pipeline gradient check, 10 nodes, d' = d'' = 4, 1 head
    let tiny = labeled_graph(&mut ChaCha8Rng::seed_from_u64(8), &|i| format!("t{i}"), 4, 6, 30);
    let groups = row_wise_groups(&tiny, &cvaes, 2);
    let mut model = MahgnnParams::init(ModelConfig { projected_dim: 4, reduced_dim: 4, heads: 1, views: 2, seed: 3, ..ModelConfig::default() })
        .map_err(|e| e.to_string())?;
    let graph = MessageGraph::full(&tiny);
    let labeled: Vec<(usize, bool)> = tiny.labeled_cas();
    let y: Vec<usize> = graph.targets.iter().map(|&r| labeled.iter().find(|(row, _)| *row == r).unwrap().1 as usize).collect();
    let pairs: Vec<(usize, bool)> = y.iter().enumerate().map(|(i, &l)| (i, l == 1)).collect();
    let (_, grads) = model.loss_and_grads(&groups, &graph, &y, None).map_err(|e| e.to_string())?;
    let mut worst_grad: f64 = 0.0;
    let mut checked = 0;
    for p in 0..model.params().len() {
        let dim = model.params().get(p).dim();
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let (numeric, analytic) = central_difference(
                    &mut model,
                    |m| m.params_mut(),
                    |m| prediction_loss(&m.forward_graph(&groups, &graph).unwrap(), &pairs).unwrap(),
                    p,
                    (i, j),
                    grads[p][[i, j]],
                );
                let rel = relative(numeric, analytic);
                worst_grad = worst_grad.max(rel);
                ensure(rel <= 1e-4, || format!("{}[{i},{j}]: {numeric} vs {analytic}", model.params().name(p)))?;
                checked += 1;
            }
        }
    }

    // mean-pool identities
    let a = [
        Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
        Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0)),
    ];
    let neg = [a[0].mapv(|x| -x), a[1].mapv(|x| -x)];
    let one = mean_pool_views(std::slice::from_ref(&a)).map_err(|e| e.to_string())?;
    ensure(one == a, || "M = 1 pooling is not the identity".into())?;
    let zero = mean_pool_views(&[a.clone(), neg]).map_err(|e| e.to_string())?;
    ensure(zero.iter().all(|m| m.iter().all(|&x| x == 0.0)), || "{H, -H} does not pool to 0".into())?;

    Ok(format!(
        "attention |Σ-1| ≤ {worst_sum:.1e} over {targets} (node, head) pairs; permutation Δ {worst_perm:.1e}; {checked} gradients, worst rel. error {worst_grad:.1e}; pooling identities exact"
    ))
}

// ---------------------------------------------------------------- 6

fn sampling_equivalence() -> Outcome {
    let spec = SynthSpec { ponzi: 40, normal: 40, eoas: 800, background_cas: 10, seed: 6, ..SynthSpec::default() };
    let g = generate(&spec).map_err(|e| e.to_string())?.graph;
    let cvaes = toy_cvaes();
    let groups = row_wise_groups(&g, &cvaes, 2);
    let model = MahgnnParams::init(ModelConfig { projected_dim: 16, reduced_dim: 16, heads: 4, views: 2, seed: 6, ..ModelConfig::default() })
        .map_err(|e| e.to_string())?;
    let full = model.forward(&groups, &g).map_err(|e| e.to_string())?;
    let fanout = g.max_in_degree().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = g.count(AccountType::Ca);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let size = rng.random_range(1..=32);
        let batch: Vec<usize> = rand::seq::index::sample(&mut rng, n, size).into_vec();
        let mg = sample_neighbors(&g, &batch, fanout, 2, &mut rng).into_message_graph().map_err(|e| e.to_string())?;
        let logits = model.forward_graph(&groups, &mg).map_err(|e| e.to_string())?;
        let expect = full.select(Axis(0), &batch);
        ensure(logits.dim() == expect.dim(), || format!("shape {:?} vs {:?}", logits.dim(), expect.dim()))?;
        for (a, b) in logits.iter().zip(expect.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("mini-batch logits differ by {worst}"))?;
    Ok(format!("fanout {fanout} (max in-degree), 10 batches, max |Δ logit| = {worst:.1e}"))
}

// ---------------------------------------------------------------- 7, 8

struct Detection {
    mahgnn: Vec<f64>,
    backbone: Vec<f64>,
    control: Vec<f64>,
    summary: String,
    took: Duration,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn acceptance_train_config() -> TrainConfig {
    TrainConfig { epochs: 30, patience: 8, batch_size: 128, seed: 0, ..TrainConfig::default() }
}

fn detection_experiment() -> Result<Detection, String> {
    let start = Instant::now();
    let data = generate(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let g = data.graph;
    let stats = relation_stats(&g);
    ensure(TripletRelation::ALL.iter().all(|&r| stats.get(r) > 0), || format!("empty relation in {stats:?}"))?;
    let positives = g.labeled_cas().iter().filter(|(_, l)| *l).count();
    ensure(positives == 200 && g.labeled_cas().len() == 400, || "expected 200 + 200 labeled contracts".into())?;

    let table = FeatureTable::compute(&g);
    let cvaes = pretrain_relations(&g, &table.standardized, &CvaeConfig::default()).map_err(|e| e.to_string())?;
    let mut latents = GaussianLatents(ChaCha8Rng::seed_from_u64(0));
    let groups = augment_features(table.standardized.clone(), &cvaes, 4, &mut latents).map_err(|e| e.to_string())?;

    let cfg = acceptance_train_config();
    let mahgnn = fit(&g, &groups, &cfg).map_err(|e| e.to_string())?.report;
    let backbone = fit(&g, &groups, &TrainConfig { augmented: false, ..cfg.clone() }).map_err(|e| e.to_string())?.report;
    let control_cfg = TrainConfig { learning_rates: vec![0.01], hidden: vec![16], views: vec![1], ..cfg };
    let control = fit(&shuffle_labels(&g, 99), &groups, &control_cfg).map_err(|e| e.to_string())?.report;
    let summary = format!(
        "{} CA / {} EOA; chosen lr {} hidden {} M {}",
        stats.ca, stats.eoa, mahgnn.chosen.lr, mahgnn.chosen.hidden, mahgnn.chosen.views
    );
    Ok(Detection { mahgnn: mahgnn.test_f1, backbone: backbone.test_f1, control: control.test_f1, summary, took: start.elapsed() })
}

fn end_to_end(d: &Detection) -> Outcome {
    let m = mean(&d.mahgnn);
    let c = mean(&d.control);
    ensure(d.mahgnn.len() == 5 && d.control.len() == 5, || "expected 5 runs".into())?;
    ensure(m >= 0.90, || format!("mean test Micro-F1 {m:.4} < 0.90 (runs {:?})", d.mahgnn))?;
    ensure((c - 0.5).abs() <= 0.1, || format!("shuffled control {c:.4} outside 0.5 ± 0.1 (runs {:?})", d.control))?;
    ensure(d.took < Duration::from_secs(15 * 60), || format!("took {:.1?}", d.took))?;
    Ok(format!(
        "MAHGNN mean {m:.4} (runs {:?}); shuffled control {c:.4}; {}; {:.1?}",
        d.mahgnn.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
        d.summary,
        d.took
    ))
}

fn ablation(d: &Detection) -> Outcome {
    let (m, b) = (mean(&d.mahgnn), mean(&d.backbone));
    ensure(m >= b, || format!("MAHGNN {m:.4} < augmentation-off {b:.4}"))?;
    Ok(format!("MAHGNN {m:.4} ≥ augmentation-off {b:.4}"))
}

// ---------------------------------------------------------------- 9

fn pipeline_config(workdir: &Path) -> String {
    format!(
        r#"seed = 3

[paths]
workdir = "{}"

[synth]
ponzi = 60
normal = 60
eoas = 1850
background_cas = 30

[dataset]
negatives = 60
k = 1.0

[train]
learning_rates = [0.01]
hidden = [16, 32]
views = [1, 2]
epochs = 20
patience = 5
"#,
        workdir.display()
    )
}

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let stages = ["synth", "build-graph", "features", "pretrain-cvae", "augment", "train", "eval", "stats"];
    let dirs = ["synth", "graph", "features", "cvae", "augment", "train", "eval", "stats"];
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let work = root.path().join(name);
        let cfg = root.path().join(format!("{name}.toml"));
        std::fs::write(&cfg, pipeline_config(&work)).map_err(|e| e.to_string())?;
        for stage in stages {
            let out = Command::new(env!("CARGO_BIN_EXE_mahgnn"))
                .args(["--config", cfg.to_str().unwrap(), stage])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), || format!("{name} {stage}: {}", String::from_utf8_lossy(&out.stderr)))?;
        }
        runs.push(work);
    }
    let read = |w: &Path, f: &str| std::fs::read(w.join(f)).map_err(|e| format!("{f}: {e}"));
    for dir in dirs {
        let f = format!("{dir}/manifest.json");
        ensure(read(&runs[0], &f)? == read(&runs[1], &f)?, || format!("{f} differs"))?;
    }
    let report = "eval/report.json";
    ensure(read(&runs[0], report)? == read(&runs[1], report)?, || "EvalReports differ".into())?;
    Ok(format!("{} stage manifests and the EvalReport identical across two runs", dirs.len()))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS  criterion {n}: {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {n}: {name}: {why}")
            }
        }
    };
    let simple: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "triplet taxonomy", taxonomy),
        (2, "feature oracle equivalence", feature_oracle),
        (3, "top-k filter correctness", filter_oracle),
        (4, "CVAE numerics", cvae_numerics),
        (5, "model numerics", model_numerics),
        (6, "sampling equivalence", sampling_equivalence),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            report(n, name, f());
        }
    }
    if wanted(7) || wanted(8) {
        match detection_experiment() {
            Ok(d) => {
                if wanted(7) {
                    report(7, "end-to-end synthetic detection", end_to_end(&d));
                }
                if wanted(8) {
                    report(8, "augmentation ablation direction", ablation(&d));
                }
            }
            Err(e) => {
                for (n, name) in [(7, "end-to-end synthetic detection"), (8, "augmentation ablation direction")] {
                    if wanted(n) {
                        report(n, name, Err(e.clone()));
                    }
                }
            }
        }
    }
    if wanted(9) {
        report(9, "pipeline reproducibility", reproducibility());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
