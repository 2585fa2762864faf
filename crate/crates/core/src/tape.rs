//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1 x 1`. A [`Tape`] records
//! operations in evaluation order and [`Tape::backward`] walks them in
//! reverse. Only the operations the models in this crate need are
//! provided, including the graph-specific ones (row gather/scatter,
//! per-segment softmax and per-head products).

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Index = Rc<Vec<usize>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    EdgeDot(Var, Var, Index, Index, usize),
    EdgeMessage(Var, Var, Index, Index, usize),
    GatherRows(Var, Index),
    ScatterRows(Var, Index),
    BlockMatMul(Var, Var, usize),
    HeadDot(Var, Var, usize),
    HeadScale(Var, Var, usize),
    SegmentSoftmax(Var, Index, usize),
    Sum(Var),
    CrossEntropy(Var, Index, Rc<Array2<f64>>),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// `tanh` through a single `exp`; within a few ulps of `f64::tanh` in
/// absolute terms and several times faster than the libm routine.
pub fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        return x * (1.0 - x2 / 3.0 * (1.0 - 0.4 * x2));
    }
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn head_width(cols: usize, heads: usize) -> usize {
    assert!(heads > 0 && cols % heads == 0, "{cols} columns do not split into {heads} heads");
    cols / heads
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "not a scalar");
        value[[0, 0]]
    }

    /// Parameters and constants alike are leaves.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&*self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = &*self.value(a) + &*self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = &*self.value(a) - &*self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = &*self.value(a) + &*r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = &*self.value(a) * &*self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = &*self.value(a) * &*r;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = &*self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).mapv(fast_tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    /// Per-edge, per-head dot products between source rows of `a` and
    /// target rows of `b`: `out[e, h] = a[src[e]] . b[dst[e]]` over the
    /// columns of head `h`. Equivalent to `head_dot` of two gathers
    /// without materializing them.
    pub fn edge_dot(&self, a: Var, b: Var, src: Index, dst: Index, heads: usize) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ncols(), bv.ncols());
        assert_eq!(src.len(), dst.len());
        let d = av.ncols();
        let dk = head_width(d, heads);
        let (av, bv) = (av.as_standard_layout(), bv.as_standard_layout());
        let (a_s, b_s) = (av.as_slice().expect("standard"), bv.as_slice().expect("standard"));
        let mut out = vec![0.0; src.len() * heads];
        for (e, (&i, &j)) in src.iter().zip(dst.iter()).enumerate() {
            let (ra, rb) = (&a_s[i * d..(i + 1) * d], &b_s[j * d..(j + 1) * d]);
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                out[e * heads + h] = ra[cols.clone()].iter().zip(&rb[cols]).map(|(x, y)| x * y).sum();
            }
        }
        let v = Array2::from_shape_vec((src.len(), heads), out).expect("shape");
        drop((av, bv));
        self.push(v, Op::EdgeDot(a, b, src, dst, heads))
    }

    /// Attention-weighted message passing: `out[dst[e]] += alpha[e, h] *
    /// v[src[e]]` on the columns of head `h`, with `rows` output rows.
    pub fn edge_message(&self, v: Var, alpha: Var, src: Index, dst: Index, rows: usize, heads: usize) -> Var {
        let vv = self.value(v);
        let al = self.value(alpha);
        assert_eq!(al.dim(), (src.len(), heads));
        assert_eq!(src.len(), dst.len());
        let d = vv.ncols();
        let dk = head_width(d, heads);
        let vv = vv.as_standard_layout();
        let v_s = vv.as_slice().expect("standard");
        let mut out = vec![0.0; rows * d];
        for (e, (&i, &j)) in src.iter().zip(dst.iter()).enumerate() {
            let rv = &v_s[i * d..(i + 1) * d];
            let ro = &mut out[j * d..(j + 1) * d];
            for h in 0..heads {
                let w = al[[e, h]];
                for c in h * dk..(h + 1) * dk {
                    ro[c] += w * rv[c];
                }
            }
        }
        let value = Array2::from_shape_vec((rows, d), out).expect("shape");
        drop(vv);
        self.push(value, Op::EdgeMessage(v, alpha, src, dst, heads))
    }

    /// `out[i] = a[idx[i]]`
    pub fn gather_rows(&self, a: Var, idx: Index) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// `out[idx[i]] += a[i]`, with `rows` output rows.
    pub fn scatter_rows(&self, a: Var, idx: Index, rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len());
        let mut v = Array2::zeros((rows, src.ncols()));
        for (row, &i) in src.rows().into_iter().zip(idx.iter()) {
            let mut out = v.row_mut(i);
            out += &row;
        }
        self.push(v, Op::ScatterRows(a, idx))
    }

    /// Block-diagonal product: column block `h` of `x` (width `d/heads`)
    /// is multiplied by row block `h` of `w` (`d x d/heads`).
    pub fn block_matmul(&self, x: Var, w: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let dk = head_width(xv.ncols(), heads);
        assert_eq!(wv.dim(), (xv.ncols(), dk));
        let mut v = Array2::zeros(xv.dim());
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let block = xv.slice(s![.., cols.clone()]).dot(&wv.slice(s![cols.clone(), ..]));
            v.slice_mut(s![.., cols]).assign(&block);
        }
        self.push(v, Op::BlockMatMul(x, w, heads))
    }

    /// Row-wise dot product within each head: `n x d, n x d -> n x heads`.
    pub fn head_dot(&self, a: Var, b: Var, heads: usize) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(), bv.dim());
        let dk = head_width(av.ncols(), heads);
        let mut v = Array2::zeros((av.nrows(), heads));
        for ((ra, rb), mut out) in av.rows().into_iter().zip(bv.rows()).zip(v.rows_mut()) {
            for h in 0..heads {
                let mut acc = 0.0;
                for c in h * dk..(h + 1) * dk {
                    acc += ra[c] * rb[c];
                }
                out[h] = acc;
            }
        }
        self.push(v, Op::HeadDot(a, b, heads))
    }

    /// Scales each head's column block of `m` by the matching column of
    /// `alpha` (`n x heads`).
    pub fn head_scale(&self, m: Var, alpha: Var, heads: usize) -> Var {
        let mv = self.value(m);
        let av = self.value(alpha);
        let dk = head_width(mv.ncols(), heads);
        assert_eq!(av.dim(), (mv.nrows(), heads));
        let mut v = (*mv).clone();
        for (mut row, arow) in v.rows_mut().into_iter().zip(av.rows()) {
            for (c, x) in row.iter_mut().enumerate() {
                *x *= arow[c / dk];
            }
        }
        self.push(v, Op::HeadScale(m, alpha, heads))
    }

    /// Softmax over the rows sharing a segment id, independently per
    /// column. `segments` has `segment_count` distinct possible ids.
    pub fn segment_softmax(&self, x: Var, segments: Index, segment_count: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segments.len());
        let cols = xv.ncols();
        let mut max = Array2::from_elem((segment_count, cols), f64::NEG_INFINITY);
        for (row, &sg) in xv.rows().into_iter().zip(segments.iter()) {
            for c in 0..cols {
                if row[c] > max[[sg, c]] {
                    max[[sg, c]] = row[c];
                }
            }
        }
        let mut v = Array2::zeros(xv.dim());
        let mut denom = Array2::<f64>::zeros((segment_count, cols));
        for ((row, mut out), &sg) in xv.rows().into_iter().zip(v.rows_mut()).zip(segments.iter()) {
            for c in 0..cols {
                let e = (row[c] - max[[sg, c]]).exp();
                out[c] = e;
                denom[[sg, c]] += e;
            }
        }
        for (mut out, &sg) in v.rows_mut().into_iter().zip(segments.iter()) {
            for c in 0..cols {
                out[c] /= denom[[sg, c]];
            }
        }
        self.push(v, Op::SegmentSoftmax(x, segments, segment_count))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: Index) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert!(!targets.is_empty());
        let mut probs = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for ((row, mut p), &t) in lv.rows().into_iter().zip(probs.rows_mut()).zip(targets.iter()) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for (pi, x) in p.iter_mut().zip(row.iter()) {
                *pi = (x - lse).exp();
            }
        }
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push(v, Op::CrossEntropy(logits, targets, Rc::new(probs)))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| nodes[v.0].value.clone();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    accumulate(&mut grads, *a, &g * &*bv);
                    accumulate(&mut grads, *b, &g * &*av);
                }
                Op::MulRow(a, row) => {
                    let av = val(*a);
                    let rv = val(*row);
                    accumulate(&mut grads, *row, (&g * &*av).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, &g * &*rv);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&*node.value).for_each(|x, &y| *x *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &*node.value),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.ncols();
                        accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = nodes[p.0].value.nrows();
                        accumulate(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(nodes[a.0].value.dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(nodes[a.0].value.dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::EdgeDot(a, b, src, dst, heads) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let dk = av.ncols() / heads;
                    let mut ga = Array2::zeros(av.dim());
                    let mut gb = Array2::zeros(bv.dim());
                    for (e, (&i, &j)) in src.iter().zip(dst.iter()).enumerate() {
                        for h in 0..*heads {
                            let ge = g[[e, h]];
                            for c in h * dk..(h + 1) * dk {
                                ga[[i, c]] += ge * bv[[j, c]];
                                gb[[j, c]] += ge * av[[i, c]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::EdgeMessage(v, alpha, src, dst, heads) => {
                    let vv = val(*v);
                    let al = val(*alpha);
                    let dk = vv.ncols() / heads;
                    let mut gv = Array2::zeros(vv.dim());
                    let mut galpha = Array2::zeros(al.dim());
                    for (e, (&i, &j)) in src.iter().zip(dst.iter()).enumerate() {
                        for h in 0..*heads {
                            let w = al[[e, h]];
                            let mut acc = 0.0;
                            for c in h * dk..(h + 1) * dk {
                                let go = g[[j, c]];
                                gv[[i, c]] += w * go;
                                acc += go * vv[[i, c]];
                            }
                            galpha[[e, h]] = acc;
                        }
                    }
                    accumulate(&mut grads, *v, gv);
                    accumulate(&mut grads, *alpha, galpha);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(nodes[a.0].value.dim());
                    for (row, &j) in g.rows().into_iter().zip(idx.iter()) {
                        let mut out = ga.row_mut(j);
                        out += &row;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterRows(a, idx) => {
                    let mut ga = Array2::zeros(nodes[a.0].value.dim());
                    for (mut row, &j) in ga.rows_mut().into_iter().zip(idx.iter()) {
                        row.assign(&g.row(j));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BlockMatMul(x, w, heads) => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let dk = wv.ncols();
                    let mut gx = Array2::zeros(xv.dim());
                    let mut gw = Array2::zeros(wv.dim());
                    for h in 0..*heads {
                        let cols = h * dk..(h + 1) * dk;
                        let gh = g.slice(s![.., cols.clone()]);
                        let wh = wv.slice(s![cols.clone(), ..]);
                        let xh = xv.slice(s![.., cols.clone()]);
                        gx.slice_mut(s![.., cols.clone()]).assign(&gh.dot(&wh.t()));
                        gw.slice_mut(s![cols, ..]).assign(&xh.t().dot(&gh));
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::HeadDot(a, b, heads) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let dk = av.ncols() / heads;
                    let mut ga = Array2::zeros(av.dim());
                    let mut gb = Array2::zeros(bv.dim());
                    for e in 0..av.nrows() {
                        for c in 0..av.ncols() {
                            let ge = g[[e, c / dk]];
                            ga[[e, c]] = ge * bv[[e, c]];
                            gb[[e, c]] = ge * av[[e, c]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::HeadScale(m, alpha, heads) => {
                    let mv = val(*m);
                    let av = val(*alpha);
                    let dk = mv.ncols() / heads;
                    let mut gm = Array2::zeros(mv.dim());
                    let mut galpha = Array2::zeros(av.dim());
                    for e in 0..mv.nrows() {
                        for c in 0..mv.ncols() {
                            let h = c / dk;
                            gm[[e, c]] = g[[e, c]] * av[[e, h]];
                            galpha[[e, h]] += g[[e, c]] * mv[[e, c]];
                        }
                    }
                    accumulate(&mut grads, *m, gm);
                    accumulate(&mut grads, *alpha, galpha);
                }
                Op::SegmentSoftmax(x, segments, count) => {
                    let y = &*node.value;
                    let cols = y.ncols();
                    let mut dots = Array2::<f64>::zeros((*count, cols));
                    for ((yr, gr), &sg) in y.rows().into_iter().zip(g.rows()).zip(segments.iter()) {
                        for c in 0..cols {
                            dots[[sg, c]] += yr[c] * gr[c];
                        }
                    }
                    let mut gx = Array2::zeros(y.dim());
                    for (e, &sg) in segments.iter().enumerate() {
                        for c in 0..cols {
                            gx[[e, c]] = y[[e, c]] * (g[[e, c]] - dots[[sg, c]]);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let dim = nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let n = targets.len() as f64;
                    let mut gl = (**probs).clone();
                    for (mut row, &t) in gl.rows_mut().into_iter().zip(targets.iter()) {
                        row[t] -= 1.0;
                    }
                    gl *= g[[0, 0]] / n;
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Gradients(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}
