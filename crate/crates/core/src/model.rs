//! Multi-view heterogeneous graph classifier for contract accounts.
//!
//! Per view: every feature-group member is projected with a type-specific
//! `Tanh(X Θ_t)`, the members are concatenated and linearly reduced, and a
//! view-specific heterogeneous attention layer propagates over the graph.
//! Views are mean-pooled, passed through one more heterogeneous layer, and
//! a linear head scores the CA rows.
//!
//! The heterogeneous layer follows the transformer-style recipe with
//! per-type key/query/value projections, per-relation attention and
//! message matrices (one block per head), a learnable per-relation head
//! prior, softmax over each target's in-edges across all relations, and a
//! skip path from the layer input:
//!
//! `out_t = Tanh(agg_t W_out + h_t W_skip + b)`

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::FeatureGroupSet;
use crate::error::{Error, Result};
use crate::features::FEATURE_DIM;
use crate::heig::{AccountType, Heig, TripletRelation};
use crate::params::{glorot, ParamStore};
use crate::tape::{fast_tanh, Index, Tape, Var};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// d': width of each projected member.
    pub projected_dim: usize,
    /// d'': width after reduction, also the hidden width of every layer.
    pub reduced_dim: usize,
    pub heads: usize,
    pub views: usize,
    /// Without augmentation each group has only the initial member.
    pub augmented: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { projected_dim: 32, reduced_dim: 32, heads: 4, views: 1, augmented: true, dropout: 0.0, seed: 0 }
    }
}

impl ModelConfig {
    pub fn members(&self) -> usize {
        if self.augmented {
            4
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projected_dim == 0 || self.reduced_dim == 0 || self.heads == 0 || self.views == 0 {
            return Err(Error::Config("model dims, heads and views must be positive".into()));
        }
        if self.reduced_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} attention heads do not divide hidden width {}",
                self.heads, self.reduced_dim
            )));
        }
        if !self.augmented && self.views != 1 {
            return Err(Error::Config("without augmentation there is exactly one view".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Edges of one relation in local positions of a [`MessageGraph`].
#[derive(Debug, Clone, Default)]
pub struct RelEdges {
    pub src: Index,
    pub dst: Index,
}

impl RelEdges {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Edges used by one propagation stage, per relation.
#[derive(Debug, Clone, Default)]
pub struct LayerEdges {
    pub relations: [RelEdges; 6],
}

impl LayerEdges {
    pub fn relation(&self, r: TripletRelation) -> &RelEdges {
        &self.relations[r.index()]
    }

    pub fn num_edges(&self) -> usize {
        self.relations.iter().map(RelEdges::len).sum()
    }
}

/// The nodes and edges a forward pass runs over.
///
/// `nodes[t][i]` is the graph row of local node `i` of type `t`;
/// `view_stage` drives the per-view layers, `final_stage` the final layer,
/// and `targets` lists the local CA positions whose logits are returned.
#[derive(Debug, Clone)]
pub struct MessageGraph {
    pub nodes: [Index; 2],
    pub view_stage: LayerEdges,
    pub final_stage: LayerEdges,
    pub targets: Index,
}

impl MessageGraph {
    /// Every node, every edge, logits for every CA.
    pub fn full(g: &Heig) -> Self {
        let mut edges = LayerEdges::default();
        for r in TripletRelation::ALL {
            let index = g.relation(r);
            edges.relations[r.index()] = RelEdges { src: Rc::new(index.src.clone()), dst: Rc::new(index.dst.clone()) };
        }
        let nc = g.count(AccountType::Ca);
        MessageGraph {
            nodes: [Rc::new((0..nc).collect()), Rc::new((0..g.count(AccountType::Eoa)).collect())],
            view_stage: edges.clone(),
            final_stage: edges,
            targets: Rc::new((0..nc).collect()),
        }
    }

    pub fn num_nodes(&self, kind: AccountType) -> usize {
        self.nodes[kind.index()].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TypeSlots {
    key: usize,
    query: usize,
    value: usize,
    out: usize,
    skip: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct RelationSlots {
    attention: usize,
    message: usize,
    prior: usize,
}

/// Parameter positions of one heterogeneous layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeteroLayerParams {
    types: [TypeSlots; 2],
    relations: [RelationSlots; 6],
    heads: usize,
}

impl HeteroLayerParams {
    fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let dk = d / heads;
        let types = AccountType::ALL.map(|t| TypeSlots {
            key: store.push(format!("{prefix}.{t}.key"), glorot(rng, d_in, d)),
            query: store.push(format!("{prefix}.{t}.query"), glorot(rng, d_in, d)),
            value: store.push(format!("{prefix}.{t}.value"), glorot(rng, d_in, d)),
            out: store.push(format!("{prefix}.{t}.out"), glorot(rng, d, d)),
            skip: store.push(format!("{prefix}.{t}.skip"), glorot(rng, d_in, d)),
            bias: store.push(format!("{prefix}.{t}.bias"), Array2::zeros((1, d))),
        });
        let block = |rng: &mut ChaCha8Rng| {
            let blocks: Vec<Array2<f64>> = (0..heads).map(|_| glorot(rng, dk, dk)).collect();
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        let relations = TripletRelation::ALL.map(|r| RelationSlots {
            attention: store.push(format!("{prefix}.{r}.attention"), block(rng)),
            message: store.push(format!("{prefix}.{r}.message"), block(rng)),
            prior: store.push(format!("{prefix}.{r}.prior"), Array2::ones((1, heads))),
        });
        HeteroLayerParams { types, relations, heads }
    }
}

/// Output of one heterogeneous layer.
pub struct LayerOutput {
    /// Per-type outputs; `None` for types that were not requested.
    pub out: [Option<Var>; 2],
    /// Attention coefficients per target type: one row per in-edge (edges of
    /// the relations targeting that type, in relation order), one column
    /// per head. `None` when the type has no in-edges.
    pub attention: [Option<Var>; 2],
    /// Target position of every attention row.
    pub segments: [Index; 2],
}

/// Records one heterogeneous attention layer on `tape`. Only the types
/// flagged in `outputs` get an output (and only what they need is
/// computed).
pub fn hetero_layer(
    tape: &Tape,
    vars: &[Var],
    layer: &HeteroLayerParams,
    h: [Var; 2],
    edges: &LayerEdges,
    outputs: [bool; 2],
) -> LayerOutput {
    let heads = layer.heads;
    let d = vars_dim(tape, vars[layer.types[0].key]);
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let mut keys: [Option<Var>; 2] = [None, None];
    let mut values: [Option<Var>; 2] = [None, None];

    let mut out = [None, None];
    let mut attention = [None, None];
    let mut segments: [Index; 2] = [Rc::new(Vec::new()), Rc::new(Vec::new())];
    for t in AccountType::ALL.into_iter().filter(|t| outputs[t.index()]) {
        let ti = t.index();
        let n_t = tape.value(h[ti]).nrows();
        let mut scores = Vec::new();
        let mut messages = Vec::new();
        let mut seg = Vec::new();
        let mut query = None;
        for r in TripletRelation::ALL.into_iter().filter(|r| r.dst() == t) {
            let rel = edges.relation(r);
            if rel.is_empty() {
                continue;
            }
            let slots = layer.relations[r.index()];
            let s = r.src().index();
            let key = *keys[s].get_or_insert_with(|| tape.matmul(h[s], vars[layer.types[s].key]));
            let value = *values[s].get_or_insert_with(|| tape.matmul(h[s], vars[layer.types[s].value]));
            let q = *query.get_or_insert_with(|| tape.matmul(h[ti], vars[layer.types[ti].query]));
            let k = tape.block_matmul(key, vars[slots.attention], heads);
            let dot = tape.edge_dot(k, q, rel.src.clone(), rel.dst.clone(), heads);
            scores.push(tape.scale(tape.mul_row(dot, vars[slots.prior]), scale));
            messages.push((tape.block_matmul(value, vars[slots.message], heads), rel));
            seg.extend(rel.dst.iter().copied());
        }
        let slots = layer.types[ti];
        let skip = tape.matmul(h[ti], vars[slots.skip]);
        let pre = if scores.is_empty() {
            skip
        } else {
            let seg: Index = Rc::new(seg);
            let stacked = if scores.len() == 1 { scores[0] } else { tape.concat_rows(&scores) };
            let alpha = tape.segment_softmax(stacked, seg.clone(), n_t);
            let mut agg = None;
            let mut start = 0;
            for (v, rel) in messages {
                let end = start + rel.len();
                let a = if start == 0 && end == seg.len() { alpha } else { tape.slice_rows(alpha, start, end) };
                let m = tape.edge_message(v, a, rel.src.clone(), rel.dst.clone(), n_t, heads);
                agg = Some(match agg {
                    None => m,
                    Some(acc) => tape.add(acc, m),
                });
                start = end;
            }
            attention[ti] = Some(alpha);
            segments[ti] = seg;
            tape.add(tape.matmul(agg.expect("at least one relation"), vars[slots.out]), skip)
        };
        out[ti] = Some(tape.tanh(tape.add_row(pre, vars[slots.bias])));
    }
    LayerOutput { out, attention, segments }
}

fn vars_dim(tape: &Tape, v: Var) -> usize {
    tape.value(v).ncols()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    projection: [usize; 2],
    reduction: [usize; 2],
    view_layers: Vec<HeteroLayerParams>,
    final_layer: HeteroLayerParams,
    head_weight: usize,
    head_bias: usize,
}

/// Intermediate values of one forward pass, for inspection and tests.
pub struct ForwardTrace {
    /// `projected[view][type][member]`, each `n x d'`.
    pub projected: Vec<[Vec<Var>; 2]>,
    /// `reduced[view][type]`, each `n x d''`.
    pub reduced: Vec<[Var; 2]>,
    pub view_outputs: Vec<LayerOutput>,
    pub pooled: [Var; 2],
    pub final_output: LayerOutput,
    pub logits: Var,
}

/// Model configuration together with every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MahgnnParams {
    pub config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

pub type Dropout<'a> = Option<(f64, &'a mut ChaCha8Rng)>;

fn dropout(tape: &Tape, x: Var, drop: &mut Dropout<'_>) -> Var {
    let Some((p, rng)) = drop else { return x };
    if *p <= 0.0 {
        return x;
    }
    let keep = 1.0 - *p;
    let dim = tape.value(x).dim();
    let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    tape.mul(x, tape.leaf(mask))
}

impl MahgnnParams {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (dp, dr, heads) = (config.projected_dim, config.reduced_dim, config.heads);
        let projection = AccountType::ALL.map(|t| store.push(format!("project.{t}"), glorot(&mut rng, FEATURE_DIM, dp)));
        let reduction = AccountType::ALL
            .map(|t| store.push(format!("reduce.{t}"), glorot(&mut rng, config.members() * dp, dr)));
        let view_layers = (0..config.views)
            .map(|m| HeteroLayerParams::init(&mut store, &format!("view{m}"), dr, dr, heads, &mut rng))
            .collect();
        let final_layer = HeteroLayerParams::init(&mut store, "final", dr, dr, heads, &mut rng);
        let head_weight = store.push("head.weight", glorot(&mut rng, dr, NUM_CLASSES));
        let head_bias = store.push("head.bias", Array2::zeros((1, NUM_CLASSES)));
        let layout = Layout { projection, reduction, view_layers, final_layer, head_weight, head_bias };
        Ok(MahgnnParams { config, params: store, layout })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn projection_slot(&self, kind: AccountType) -> usize {
        self.layout.projection[kind.index()]
    }

    pub fn reduction_slot(&self, kind: AccountType) -> usize {
        self.layout.reduction[kind.index()]
    }

    pub fn head_slots(&self) -> (usize, usize) {
        (self.layout.head_weight, self.layout.head_bias)
    }

    pub fn view_layer(&self, view: usize) -> &HeteroLayerParams {
        &self.layout.view_layers[view]
    }

    pub fn final_layer(&self) -> &HeteroLayerParams {
        &self.layout.final_layer
    }

    fn check_inputs(&self, groups: &FeatureGroupSet, graph: &MessageGraph) -> Result<()> {
        let expected_views = if self.config.augmented { self.config.views } else { 1 };
        if groups.view_count() != expected_views || groups.is_augmented() != self.config.augmented {
            return Err(Error::Config(format!(
                "model expects {} view(s) (augmented: {}), feature groups have {} (augmented: {})",
                expected_views,
                self.config.augmented,
                groups.view_count(),
                groups.is_augmented()
            )));
        }
        groups.check()?;
        for t in AccountType::ALL {
            let n = groups.rows(t);
            if let Some(&bad) = graph.nodes[t.index()].iter().find(|&&row| row >= n) {
                return Err(Error::ShapeMismatch { context: "message graph node row", expected: (n, FEATURE_DIM), actual: (bad, FEATURE_DIM) });
            }
        }
        Ok(())
    }

    /// Records the whole forward pass on `tape`, parameters bound as `vars`.
    pub fn forward_trace(
        &self,
        tape: &Tape,
        vars: &[Var],
        groups: &FeatureGroupSet,
        graph: &MessageGraph,
        mut drop: Dropout<'_>,
    ) -> Result<ForwardTrace> {
        self.check_inputs(groups, graph)?;
        let views = groups.view_count();
        let mut projected = Vec::with_capacity(views);
        let mut reduced = Vec::with_capacity(views);
        let mut view_outputs = Vec::with_capacity(views);
        let project = |member: &Array2<f64>, ti: usize, drop: &mut Dropout<'_>| {
            let x = tape.leaf(member.select(Axis(0), &graph.nodes[ti]));
            let h = tape.tanh(tape.matmul(x, vars[self.layout.projection[ti]]));
            dropout(tape, h, drop)
        };
        // the initial member is shared by every view
        let initial = [0, 1].map(|ti| project(&groups.initial[ti], ti, &mut drop));
        for view in 0..views {
            let mut proj_view: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
            let mut red_view = Vec::with_capacity(2);
            for t in AccountType::ALL {
                let ti = t.index();
                let members = groups.members(view, t);
                for member in &members[..members.len() - 1] {
                    proj_view[ti].push(project(member, ti, &mut drop));
                }
                proj_view[ti].push(initial[ti]);
                let cat = tape.concat_cols(&proj_view[ti]);
                red_view.push(tape.matmul(cat, vars[self.layout.reduction[ti]]));
            }
            let red_view = [red_view[0], red_view[1]];
            view_outputs.push(hetero_layer(
                tape,
                vars,
                &self.layout.view_layers[view],
                red_view,
                &graph.view_stage,
                [true, true],
            ));
            projected.push(proj_view);
            reduced.push(red_view);
        }
        let pooled = AccountType::ALL.map(|t| {
            let ti = t.index();
            let out = |v: &LayerOutput| v.out[ti].expect("view layers produce every type");
            let mut acc = out(&view_outputs[0]);
            for v in &view_outputs[1..] {
                acc = tape.add(acc, out(v));
            }
            let mean = if views == 1 { acc } else { tape.scale(acc, 1.0 / views as f64) };
            dropout(tape, mean, &mut drop)
        });
        // the head reads CA rows only
        let final_output = hetero_layer(tape, vars, &self.layout.final_layer, pooled, &graph.final_stage, [true, false]);
        let ca = tape.gather_rows(final_output.out[0].expect("CA output requested"), graph.targets.clone());
        let logits = tape.add_row(tape.matmul(ca, vars[self.layout.head_weight]), vars[self.layout.head_bias]);
        Ok(ForwardTrace { projected, reduced, view_outputs, pooled, final_output, logits })
    }

    /// Logits (`targets x 2`) in eval mode.
    pub fn forward_graph(&self, groups: &FeatureGroupSet, graph: &MessageGraph) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let trace = self.forward_trace(&tape, &vars, groups, graph, None)?;
        Ok((*tape.value(trace.logits)).clone())
    }

    /// Logits for every CA of `g` (`n_c x 2`), full-graph, eval mode.
    pub fn forward(&self, groups: &FeatureGroupSet, g: &Heig) -> Result<Array2<f64>> {
        for t in AccountType::ALL {
            if groups.rows(t) != g.count(t) {
                return Err(Error::ShapeMismatch {
                    context: "feature groups vs graph",
                    expected: (g.count(t), FEATURE_DIM),
                    actual: (groups.rows(t), FEATURE_DIM),
                });
            }
        }
        self.forward_graph(groups, &MessageGraph::full(g))
    }

    /// Mean cross-entropy over the graph's targets and its gradient for
    /// every parameter (store order). `labels[i]` is the class of target `i`.
    pub fn loss_and_grads(
        &self,
        groups: &FeatureGroupSet,
        graph: &MessageGraph,
        labels: &[usize],
        drop: Dropout<'_>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if labels.is_empty() {
            return Err(Error::EmptyMask);
        }
        if labels.len() != graph.targets.len() {
            return Err(Error::DimensionMismatch { context: "loss labels", expected: graph.targets.len(), actual: labels.len() });
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let trace = self.forward_trace(&tape, &vars, groups, graph, drop)?;
        let loss = tape.cross_entropy(trace.logits, Rc::new(labels.to_vec()));
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("prediction loss"));
        }
        Ok((value, self.params.collect_grads(&tape.backward(loss), &vars)))
    }

    /// Per-view projections in eval mode: `[view][type][member]`.
    pub fn project(&self, groups: &FeatureGroupSet) -> Result<Vec<[Vec<Array2<f64>>; 2]>> {
        let mut out = Vec::new();
        for view in 0..groups.view_count() {
            let mut per_type: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
            for t in AccountType::ALL {
                let theta = self.params.get(self.layout.projection[t.index()]);
                for m in groups.members(view, t) {
                    if m.ncols() != theta.nrows() {
                        return Err(Error::ShapeMismatch { context: "projection input", expected: (m.nrows(), theta.nrows()), actual: m.dim() });
                    }
                    per_type[t.index()].push(m.dot(theta).mapv(fast_tanh));
                }
            }
            out.push(per_type);
        }
        Ok(out)
    }

    /// Concatenates one type's projected members in order and applies the
    /// (activation-free) reduction.
    pub fn concat_reduce(&self, kind: AccountType, members: &[Array2<f64>]) -> Result<Array2<f64>> {
        let theta = self.params.get(self.layout.reduction[kind.index()]);
        let views: Vec<_> = members.iter().map(|m| m.view()).collect();
        let cat = ndarray::concatenate(Axis(1), &views).map_err(|_| Error::ShapeMismatch {
            context: "concat members",
            expected: (members.first().map_or(0, |m| m.nrows()), self.config.projected_dim),
            actual: (0, 0),
        })?;
        if cat.ncols() != theta.nrows() {
            return Err(Error::ShapeMismatch { context: "reduction input", expected: (cat.nrows(), theta.nrows()), actual: cat.dim() });
        }
        Ok(cat.dot(theta))
    }
}

/// Evaluates one heterogeneous layer outside a training tape.
/// Returns per-type outputs and per-type `(attention, target segments)`.
#[allow(clippy::type_complexity)]
pub fn eval_hetero_layer(
    params: &ParamStore,
    layer: &HeteroLayerParams,
    h: [&Array2<f64>; 2],
    edges: &LayerEdges,
) -> Result<([Array2<f64>; 2], [Option<(Array2<f64>, Vec<usize>)>; 2])> {
    for t in 0..2 {
        let d_in = params.get(layer.types[t].key).nrows();
        if h[t].ncols() != d_in {
            return Err(Error::ShapeMismatch { context: "hetero layer input", expected: (h[t].nrows(), d_in), actual: h[t].dim() });
        }
    }
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let input = [tape.leaf(h[0].clone()), tape.leaf(h[1].clone())];
    let res = hetero_layer(&tape, &vars, layer, input, edges, [true, true]);
    let out = res.out.map(|v| (*tape.value(v.expect("requested"))).clone());
    let att = [0, 1].map(|t| res.attention[t].map(|a| ((*tape.value(a)).clone(), res.segments[t].to_vec())));
    Ok((out, att))
}

pub fn mean_pool_views(views: &[[Array2<f64>; 2]]) -> Result<[Array2<f64>; 2]> {
    let first = views.first().ok_or(Error::EmptyViewList)?;
    let mut acc = first.clone();
    for v in &views[1..] {
        for t in 0..2 {
            if v[t].dim() != acc[t].dim() {
                return Err(Error::ShapeMismatch { context: "mean pool", expected: acc[t].dim(), actual: v[t].dim() });
            }
            acc[t] += &v[t];
        }
    }
    if views.len() > 1 {
        let m = views.len() as f64;
        for a in &mut acc {
            a.mapv_inplace(|x| x / m);
        }
    }
    Ok(acc)
}

/// Mean cross-entropy of the `(row, label)` pairs of `logits`.
pub fn prediction_loss(logits: &Array2<f64>, labeled: &[(usize, bool)]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for &(row, label) in labeled {
        let r = logits.row(row);
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - r[label as usize];
    }
    Ok(total / labeled.len() as f64)
}

pub fn predict(logits: &Array2<f64>) -> Vec<bool> {
    logits.rows().into_iter().map(|r| r[1] > r[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heig::{build_heig, Account, InteractionEdge, InteractionType};
    use ndarray::array;

    fn toy_graph() -> Heig {
        use InteractionType::*;
        build_heig(
            vec![
                Account::new("c0", AccountType::Ca).with_label(Some(true)),
                Account::new("c1", AccountType::Ca).with_label(Some(false)),
                Account::new("c2", AccountType::Ca),
                Account::new("e0", AccountType::Eoa),
                Account::new("e1", AccountType::Eoa),
            ],
            vec![
                InteractionEdge::new("e0", "c0", Call, 2, 1.5),
                InteractionEdge::new("c0", "e1", Trans, 1, 0.7),
                InteractionEdge::new("c1", "c2", Call, 3, 0.0),
                InteractionEdge::new("c2", "c0", Trans, 1, 2.0),
                InteractionEdge::new("e1", "e0", Trans, 1, 0.1),
                InteractionEdge::new("e1", "c1", Trans, 4, 3.0),
            ],
        )
        .unwrap()
    }

    fn groups(g: &Heig, views: usize) -> FeatureGroupSet {
        let mat = |n: usize, s: f64| Array2::from_shape_fn((n, FEATURE_DIM), |(i, j)| ((i * 5 + j) as f64 * s).sin());
        let nc = g.count(AccountType::Ca);
        let ne = g.count(AccountType::Eoa);
        FeatureGroupSet {
            initial: [mat(nc, 0.3), mat(ne, 0.7)],
            views: (0..views)
                .map(|v| {
                    let s = 1.1 + v as f64;
                    [(0..3).map(|i| mat(nc, s + i as f64)).collect(), (0..3).map(|i| mat(ne, s * 0.5 + i as f64)).collect()]
                })
                .collect(),
        }
    }

    fn small(views: usize, augmented: bool) -> MahgnnParams {
        MahgnnParams::init(ModelConfig { projected_dim: 4, reduced_dim: 4, heads: 2, views, augmented, dropout: 0.0, seed: 5 })
            .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { reduced_dim: 6, heads: 4, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { augmented: false, views: 2, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ModelConfig::default() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn logits_shape_and_determinism() {
        let g = toy_graph();
        let model = small(2, true);
        let a = model.forward(&groups(&g, 2), &g).unwrap();
        assert_eq!(a.dim(), (3, 2));
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, small(2, true).forward(&groups(&g, 2), &g).unwrap());
    }

    #[test]
    fn view_count_must_match() {
        let g = toy_graph();
        assert!(small(2, true).forward(&groups(&g, 3), &g).is_err());
        assert!(small(1, false).forward(&groups(&g, 1), &g).is_err());
        small(1, false).forward(&groups(&g, 0), &g).unwrap();
    }

    #[test]
    fn ablation_has_single_member() {
        let m = small(1, false);
        let d = m.params().get(m.reduction_slot(AccountType::Ca)).dim();
        assert_eq!(d, (4, 4));
        let m = small(3, true);
        assert_eq!(m.params().get(m.reduction_slot(AccountType::Eoa)).dim(), (16, 4));
    }

    #[test]
    fn trace_matches_eval_helpers() {
        let g = toy_graph();
        let gs = groups(&g, 2);
        let model = small(2, true);
        let tape = Tape::new();
        let vars = model.params().bind(&tape);
        let trace = model.forward_trace(&tape, &vars, &gs, &MessageGraph::full(&g), None).unwrap();
        let projected = model.project(&gs).unwrap();
        for v in 0..2 {
            for t in AccountType::ALL {
                let ti = t.index();
                for (i, p) in projected[v][ti].iter().enumerate() {
                    assert_eq!(&*tape.value(trace.projected[v][ti][i]), p);
                }
                let red = model.concat_reduce(t, &projected[v][ti]).unwrap();
                assert!((&*tape.value(trace.reduced[v][ti]) - &red).iter().all(|x| x.abs() < 1e-12));
            }
        }
        let outs: Vec<[Array2<f64>; 2]> =
            trace.view_outputs.iter().map(|o| o.out.map(|v| (*tape.value(v.unwrap())).clone())).collect();
        let pooled = mean_pool_views(&outs).unwrap();
        for t in 0..2 {
            assert!((&*tape.value(trace.pooled[t]) - &pooled[t]).iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn attention_normalizes_per_target() {
        let g = toy_graph();
        let model = small(1, true);
        let h = [
            Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1),
            Array2::from_shape_fn((2, 4), |(i, j)| (i * j) as f64 * 0.2 - 0.1),
        ];
        let full = MessageGraph::full(&g);
        let (out, att) = eval_hetero_layer(model.params(), model.view_layer(0), [&h[0], &h[1]], &full.view_stage).unwrap();
        assert_eq!(out[0].dim(), (3, 4));
        assert_eq!(out[1].dim(), (2, 4));
        for (alpha, seg) in att.iter().flatten() {
            let mut sums = BTreeMapSum::default();
            for (row, &s) in seg.iter().enumerate() {
                for head in 0..2 {
                    *sums.0.entry((s, head)).or_insert(0.0) += alpha[[row, head]];
                }
            }
            assert!(sums.0.values().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[derive(Default)]
    struct BTreeMapSum(std::collections::BTreeMap<(usize, usize), f64>);

    #[test]
    fn isolated_node_gets_skip_path_only() {
        let g = build_heig(vec![Account::new("c", AccountType::Ca)], vec![]).unwrap();
        let model = small(1, true);
        let h = [array![[0.1, -0.2, 0.3, 0.4]], Array2::zeros((0, 4))];
        let layer = model.view_layer(0);
        let (out, att) = eval_hetero_layer(model.params(), layer, [&h[0], &h[1]], &MessageGraph::full(&g).view_stage).unwrap();
        assert!(att[0].is_none());
        let p = model.params();
        let slots = layer.types[0];
        let expect = (h[0].dot(p.get(slots.skip)) + p.get(slots.bias)).mapv(f64::tanh);
        assert!((&out[0] - &expect).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mean_pool_examples() {
        assert!(matches!(mean_pool_views(&[]), Err(Error::EmptyViewList)));
        let a = [array![[1.0, 2.0]], array![[0.0]]];
        let b = [array![[3.0, 4.0]], array![[2.0]]];
        let m = mean_pool_views(&[a.clone(), b]).unwrap();
        assert_eq!(m[0], array![[2.0, 3.0]]);
        assert_eq!(m[1], array![[1.0]]);
        assert_eq!(mean_pool_views(&[a.clone()]).unwrap(), a);
    }

    #[test]
    fn prediction_loss_examples() {
        assert!(matches!(prediction_loss(&array![[0.0, 0.0]], &[]), Err(Error::EmptyMask)));
        let l = prediction_loss(&array![[0.0, 0.0], [5.0, -5.0]], &[(0, true)]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(predict(&array![[0.0, 1.0], [1.0, 0.0]]), vec![true, false]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = toy_graph();
        let gs = groups(&g, 2);
        let mut model = small(2, true);
        let graph = MessageGraph::full(&g);
        let labels = [1, 0, 1];
        let (_, grads) = model.loss_and_grads(&gs, &graph, &labels, None).unwrap();
        let loss = |m: &MahgnnParams| {
            let logits = m.forward_graph(&gs, &graph).unwrap();
            prediction_loss(&logits, &[(0, true), (1, false), (2, true)]).unwrap()
        };
        let h = 1e-6;
        for p in 0..model.params().len() {
            let dim = model.params().get(p).dim();
            for idx in [(0, 0), (dim.0 - 1, dim.1 - 1)] {
                let orig = model.params().get(p)[idx];
                model.params_mut().get_mut(p)[idx] = orig + h;
                let up = loss(&model);
                model.params_mut().get_mut(p)[idx] = orig - h;
                let down = loss(&model);
                model.params_mut().get_mut(p)[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[p][idx];
                assert!(
                    (numeric - analytic).abs() <= 1e-4 * (1.0 + numeric.abs()),
                    "{}: {numeric} vs {analytic}",
                    model.params().name(p)
                );
            }
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let g = toy_graph();
        let mut graph = MessageGraph::full(&g);
        graph.targets = Rc::new(vec![]);
        assert!(matches!(small(1, false).loss_and_grads(&groups(&g, 0), &graph, &[], None), Err(Error::EmptyMask)));
    }
}
