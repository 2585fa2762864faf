//! Splitting, neighbor sampling, optimization, grid search and Micro-F1.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::FeatureGroupSet;
use crate::error::{Error, Result};
use crate::heig::{AccountType, Heig, TripletRelation};
use crate::model::{predict, prediction_loss, LayerEdges, MahgnnParams, MessageGraph, ModelConfig, RelEdges};
use crate::params::{Adam, AdamConfig};

pub const LEARNING_RATES: [f64; 2] = [0.01, 0.001];
pub const HIDDEN_SIZES: [usize; 3] = [16, 32, 64];
pub const VIEW_COUNTS: [usize; 4] = [1, 2, 3, 4];
pub const MIN_PER_CLASS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub runs: usize,
    pub learning_rates: Vec<f64>,
    pub hidden: Vec<usize>,
    pub views: Vec<usize>,
    pub fanout: usize,
    pub layers: usize,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub heads: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    /// `false` trains the backbone on initial features only.
    pub augmented: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            runs: 5,
            learning_rates: LEARNING_RATES.to_vec(),
            hidden: HIDDEN_SIZES.to_vec(),
            views: VIEW_COUNTS.to_vec(),
            fanout: 100,
            layers: 2,
            epochs: 300,
            patience: 30,
            batch_size: 64,
            heads: 4,
            dropout: 0.0,
            weight_decay: 0.0,
            augmented: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {ratios:?} must be positive and sum to 1"));
        }
        if self.learning_rates.is_empty() || self.hidden.is_empty() || self.views.is_empty() {
            return bad("hyperparameter grid must not be empty".into());
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !LEARNING_RATES.contains(lr)) {
            return bad(format!("learning rate {lr} not in {LEARNING_RATES:?}"));
        }
        if let Some(h) = self.hidden.iter().find(|h| !HIDDEN_SIZES.contains(h)) {
            return bad(format!("hidden size {h} not in {HIDDEN_SIZES:?}"));
        }
        if let Some(m) = self.views.iter().find(|m| !VIEW_COUNTS.contains(m)) {
            return bad(format!("view count {m} not in {VIEW_COUNTS:?}"));
        }
        if self.layers != 2 {
            return bad(format!("the model propagates over exactly 2 layers, got {}", self.layers));
        }
        if self.runs == 0 || self.fanout == 0 || self.epochs == 0 || self.batch_size == 0 || self.heads == 0 {
            return bad("runs, fanout, epochs, batch size and heads must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || self.weight_decay < 0.0 {
            return bad("dropout must be in [0, 1) and weight decay non-negative".into());
        }
        Ok(())
    }

    /// Grid points in evaluation order; a single view count without augmentation.
    pub fn grid(&self) -> Vec<GridPoint> {
        let views: Vec<usize> = if self.augmented { self.views.clone() } else { vec![1] };
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &hidden in &self.hidden {
                for &views in &views {
                    out.push(GridPoint { lr, hidden, views });
                }
            }
        }
        out
    }

    pub fn model_config(&self, point: &GridPoint, seed: u64) -> ModelConfig {
        ModelConfig {
            projected_dim: point.hidden,
            reduced_dim: point.hidden,
            heads: self.heads,
            views: point.views,
            augmented: self.augmented,
            dropout: self.dropout,
            seed,
        }
    }

    /// Seed of run `run`; split and initialization both derive from it.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub hidden: usize,
    pub views: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split of `(ca_row, label)` pairs; every part is sorted.
pub fn split<R: Rng + ?Sized>(labeled: &[(usize, bool)], ratios: (f64, f64, f64), rng: &mut R) -> Result<Split> {
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in [false, true] {
        let mut members: Vec<usize> = labeled.iter().filter(|(_, l)| *l == class).map(|(r, _)| *r).collect();
        if members.len() < MIN_PER_CLASS {
            return Err(Error::TooFewLabels { class, required: MIN_PER_CLASS, found: members.len() });
        }
        members.sort_unstable();
        members.shuffle(rng);
        let n = members.len() as f64;
        let n_train = (n * ratios.0).round() as usize;
        let n_val = ((n * ratios.1).round() as usize).min(members.len() - n_train);
        out.train.extend(&members[..n_train]);
        out.val.extend(&members[n_train..n_train + n_val]);
        out.test.extend(&members[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// A layered subgraph: `layers[0]` feeds the first propagation layer,
/// the last entry the layer that produces the batch outputs.
#[derive(Debug, Clone)]
pub struct SampledSubgraph {
    /// Graph rows per type, sorted; local position = index in this list.
    pub nodes: [Vec<usize>; 2],
    pub layers: Vec<LayerEdges>,
    /// Local CA positions of the batch, in batch order.
    pub targets: Vec<usize>,
}

impl SampledSubgraph {
    pub fn into_message_graph(self) -> Result<MessageGraph> {
        let [view_stage, final_stage]: [LayerEdges; 2] = self
            .layers
            .try_into()
            .map_err(|l: Vec<_>| Error::Config(format!("expected 2 sampled layers, got {}", l.len())))?;
        let [ca, eoa] = self.nodes;
        Ok(MessageGraph { nodes: [Rc::new(ca), Rc::new(eoa)], view_stage, final_stage, targets: Rc::new(self.targets) })
    }
}

/// Samples, per target node, per relation and per layer, up to `fanout`
/// distinct in-edges uniformly at random.
pub fn sample_neighbors<R: Rng + ?Sized>(
    g: &Heig,
    batch: &[usize],
    fanout: usize,
    layers: usize,
    rng: &mut R,
) -> SampledSubgraph {
    let mut frontier: [BTreeSet<usize>; 2] = [batch.iter().copied().collect(), BTreeSet::new()];
    let mut picked: Vec<[(Vec<usize>, Vec<usize>); 6]> = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut edges: [(Vec<usize>, Vec<usize>); 6] = Default::default();
        let mut next = frontier.clone();
        for r in TripletRelation::ALL {
            let index = g.relation(r);
            let (src, dst) = &mut edges[r.index()];
            for &node in &frontier[r.dst().index()] {
                let incoming = &index.incoming[node];
                let mut take = |p: usize| {
                    src.push(index.src[p]);
                    dst.push(node);
                    next[r.src().index()].insert(index.src[p]);
                };
                if incoming.len() <= fanout {
                    incoming.iter().for_each(|&p| take(p));
                } else {
                    let mut chosen = rand::seq::index::sample(rng, incoming.len(), fanout).into_vec();
                    chosen.sort_unstable();
                    chosen.into_iter().for_each(|i| take(incoming[i]));
                }
            }
        }
        picked.push(edges);
        frontier = next;
    }
    picked.reverse();
    let nodes: [Vec<usize>; 2] = frontier.map(|s| s.into_iter().collect());
    let local = |kind: AccountType, row: usize| nodes[kind.index()].binary_search(&row).expect("sampled node");
    let layers = picked
        .into_iter()
        .map(|edges| {
            let mut out = LayerEdges::default();
            for r in TripletRelation::ALL {
                let (src, dst) = &edges[r.index()];
                out.relations[r.index()] = RelEdges {
                    src: Rc::new(src.iter().map(|&s| local(r.src(), s)).collect()),
                    dst: Rc::new(dst.iter().map(|&d| local(r.dst(), d)).collect()),
                };
            }
            out
        })
        .collect();
    let targets = batch.iter().map(|&b| local(AccountType::Ca, b)).collect();
    SampledSubgraph { nodes, layers, targets }
}

/// Micro-averaged F1 over both classes.
pub fn micro_f1(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("micro_f1 predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch { context: "micro_f1", expected: labels.len(), actual: predictions.len() });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for class in [false, true] {
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub val_f1: f64,
    pub val_loss: f64,
    pub test_f1: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Mean mini-batch loss, weighted by batch size.
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_f1: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub chosen: GridPoint,
    pub config_hash: String,
    pub augmented: bool,
    pub runs: Vec<RunSummary>,
    /// Validation Micro-F1 of run 0 at every grid point.
    pub grid: Vec<(GridPoint, f64)>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Rows of `method, Micro-F1 ± std` in percent.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<width$}  Micro-F1(%)\n", "Method");
    for (method, r) in rows {
        let _ = writeln!(out, "{:<width$}  {:.2} ± {:.2}", method, 100.0 * r.mean, 100.0 * r.std);
    }
    out
}

/// Labels of every CA row (`None` when unlabeled).
pub fn ca_labels(g: &Heig) -> Vec<Option<bool>> {
    let mut out = vec![None; g.count(AccountType::Ca)];
    for (row, label) in g.labeled_cas() {
        out[row] = Some(label);
    }
    out
}

/// The complete 2-hop computation graph of `rows`: every in-edge is kept,
/// so its logits equal the full-graph logits of those rows.
pub fn exact_graph(g: &Heig, rows: &[usize]) -> Result<MessageGraph> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    sample_neighbors(g, rows, usize::MAX, 2, &mut unused).into_message_graph()
}

/// Micro-F1 and mean cross-entropy of `logits`, whose row `i` belongs to
/// CA row `rows[i]`.
fn scores(logits: &Array2<f64>, rows: &[usize], labels: &[Option<bool>]) -> Result<(f64, f64)> {
    let l: Vec<bool> = rows.iter().map(|&r| labels[r].expect("split rows are labeled")).collect();
    let pairs: Vec<(usize, bool)> = l.iter().copied().enumerate().collect();
    Ok((micro_f1(&predict(logits), &l)?, prediction_loss(logits, &pairs)?))
}

/// Trains one model on `split.train` with early stopping on validation
/// Micro-F1 (ties broken by lower validation loss) and returns the best
/// parameters.
pub fn train_once(
    g: &Heig,
    groups: &FeatureGroupSet,
    split: &Split,
    model_cfg: ModelConfig,
    lr: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MahgnnParams, RunSummary)> {
    let labels = ca_labels(g);
    let val_graph = exact_graph(g, &split.val)?;
    let mut model = MahgnnParams::init(model_cfg)?;
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::with_lr(lr) }, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut order = split.train.clone();
    let mut best = (model.clone(), f64::NEG_INFINITY, f64::INFINITY, 0usize);
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let graph = sample_neighbors(g, batch, cfg.fanout, cfg.layers, &mut rng).into_message_graph()?;
            let y: Vec<usize> = batch.iter().map(|&r| labels[r].expect("train rows are labeled") as usize).collect();
            let drop = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
            let (loss, grads) = model.loss_and_grads(groups, &graph, &y, drop)?;
            opt.step(model.params_mut(), &grads);
            train_loss += loss * batch.len() as f64 / order.len() as f64;
        }
        if !model.params().all_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        let logits = model.forward_graph(groups, &val_graph)?;
        let (f1, loss) = scores(&logits, &split.val, &labels)?;
        history.push(EpochMetrics { train_loss, val_f1: f1, val_loss: loss });
        if f1 > best.1 || (f1 == best.1 && loss < best.2) {
            best = (model.clone(), f1, loss, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (model, val_f1, val_loss, best_epoch) = best;
    let logits = model.forward_graph(groups, &exact_graph(g, &split.test)?)?;
    let (test_f1, _) = scores(&logits, &split.test, &labels)?;
    let epochs_run = history.len();
    Ok((model, RunSummary { seed, val_f1, val_loss, test_f1, best_epoch, epochs_run, history }))
}

fn run_split(g: &Heig, cfg: &TrainConfig, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    split(&g.labeled_cas(), (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio), &mut rng)
}

fn groups_for(groups: &FeatureGroupSet, cfg: &TrainConfig, views: usize) -> Result<FeatureGroupSet> {
    if !cfg.augmented {
        return Ok(FeatureGroupSet::initial_only(groups.initial.clone()));
    }
    if groups.views.len() < views {
        return Err(Error::Config(format!("{} augmented view(s) available, grid needs {views}", groups.views.len())));
    }
    Ok(groups.truncated(views))
}

/// Parameters of every run plus the report.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub models: Vec<MahgnnParams>,
    pub report: EvalReport,
}

/// Selects the grid point on run 0's validation score, then trains the
/// remaining runs at that point.
pub fn fit(g: &Heig, groups: &FeatureGroupSet, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let seed0 = cfg.run_seed(0);
    let split0 = run_split(g, cfg, seed0)?;
    let mut grid = Vec::new();
    let mut best: Option<(GridPoint, MahgnnParams, RunSummary)> = None;
    for point in cfg.grid() {
        let gs = groups_for(groups, cfg, point.views)?;
        let (model, summary) = train_once(g, &gs, &split0, cfg.model_config(&point, seed0), point.lr, cfg, seed0)?;
        grid.push((point, summary.val_f1));
        let better = match &best {
            None => true,
            Some((_, _, b)) => summary.val_f1 > b.val_f1 || (summary.val_f1 == b.val_f1 && summary.val_loss < b.val_loss),
        };
        if better {
            best = Some((point, model, summary));
        }
    }
    let (chosen, model0, run0) = best.expect("grid is non-empty");
    let gs = groups_for(groups, cfg, chosen.views)?;
    let mut models = vec![model0];
    let mut runs = vec![run0];
    for run in 1..cfg.runs {
        let seed = cfg.run_seed(run);
        let split = run_split(g, cfg, seed)?;
        let (model, summary) = train_once(g, &gs, &split, cfg.model_config(&chosen, seed), chosen.lr, cfg, seed)?;
        models.push(model);
        runs.push(summary);
    }
    let test_f1: Vec<f64> = runs.iter().map(|r| r.test_f1).collect();
    let (mean, std) = mean_std(&test_f1);
    let report = EvalReport { test_f1, mean, std, chosen, config_hash: cfg.hash(), augmented: cfg.augmented, runs, grid };
    Ok(FitOutput { models, report })
}

/// Recomputes per-run test scores of trained models, regenerating each
/// run's split from its seed.
pub fn evaluate(g: &Heig, groups: &FeatureGroupSet, cfg: &TrainConfig, models: &[MahgnnParams]) -> Result<Vec<f64>> {
    let labels = ca_labels(g);
    models
        .iter()
        .enumerate()
        .map(|(run, model)| {
            let split = run_split(g, cfg, cfg.run_seed(run))?;
            let gs = groups_for(groups, cfg, model.config.views)?;
            let logits = model.forward_graph(&gs, &exact_graph(g, &split.test)?)?;
            Ok(scores(&logits, &split.test, &labels)?.0)
        })
        .collect()
}

/// The graph with its CA labels randomly permuted among the labeled CAs.
pub fn shuffle_labels(g: &Heig, seed: u64) -> Heig {
    let labeled = g.labeled_cas();
    let mut values: Vec<bool> = labeled.iter().map(|(_, l)| *l).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let ids = g.ids(AccountType::Ca);
    let map = labeled.iter().zip(values).map(|((row, _), l)| (ids[*row].clone(), l)).collect();
    g.relabeled(&map)
}
