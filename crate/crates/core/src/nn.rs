//! Reverse-mode differentiation over dense `f64` matrices, a named parameter
//! store and the graph index used for batched message passing.
//!
//! A batch is the disjoint union of several graphs; node rows of graph `g`
//! occupy `offsets[g]..offsets[g + 1]`.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub group: Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Parameters addressed by stable dotted names, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, group: Group) -> ParamId {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        let (r, c) = value.dim();
        self.specs.push(ParamSpec { name, shape: [r, c], group });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.n_scalars())));
        }
        let mut pos = 0;
        for v in &mut self.values {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[pos..pos + n]) {
                *dst = *src;
            }
            pos += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Glorot-normal weight matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Node layout of a batch of disjoint graphs plus neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphIndex {
    pub offsets: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub adj_ptr: Vec<usize>,
    pub adj_idx: Vec<usize>,
}

impl GraphIndex {
    /// `graphs` lists `(node count, directed edges)` with local indices.
    pub fn new(graphs: &[(usize, &[[u32; 2]])]) -> Result<Self> {
        let mut offsets = vec![0];
        let mut node_graph = Vec::new();
        for (g, &(n, _)) in graphs.iter().enumerate() {
            if n == 0 {
                return Err(Error::Shape(format!("graph {g} has no nodes")));
            }
            offsets.push(offsets[g] + n);
            node_graph.extend(std::iter::repeat_n(g, n));
        }
        let total = *offsets.last().unwrap();
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); total];
        for (g, &(n, edges)) in graphs.iter().enumerate() {
            for &[a, b] in edges {
                let (a, b) = (a as usize, b as usize);
                if a >= n || b >= n {
                    return Err(Error::Shape(format!("edge ({a}, {b}) out of range for {n} nodes")));
                }
                neighbors[offsets[g] + a].push(offsets[g] + b);
            }
        }
        let mut adj_ptr = vec![0];
        let mut adj_idx = Vec::new();
        for list in neighbors {
            adj_idx.extend(list);
            adj_ptr.push(adj_idx.len());
        }
        Ok(Self { offsets, node_graph, adj_ptr, adj_idx })
    }

    pub fn n_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj_idx[self.adj_ptr[i]..self.adj_ptr[i + 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Array2<f64>>),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Concat(Vec<Var>),
    MeanAgg(Var, Arc<GraphIndex>),
    SegmentSoftmax(Var, Arc<GraphIndex>),
    SegmentWeightedSum(Var, Var, Arc<GraphIndex>),
    Repeat(Var, Arc<GraphIndex>),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Records operations; parameter values are borrowed from the store.
pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params: &params.values, nodes: Vec::with_capacity(128) }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id.0), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `x + b` with `b` a `1 × d` row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddBias(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, Arc::new(c)), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Mean over each node and its neighbors.
    pub fn mean_agg(&mut self, a: Var, graph: &Arc<GraphIndex>) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..graph.n_nodes() {
            let nb = graph.neighbors(i);
            let mut row = out.row_mut(i);
            for &j in nb {
                row += &x.row(j);
            }
            row /= (1 + nb.len()) as f64;
        }
        self.push(out, Op::MeanAgg(a, graph.clone()), &[a])
    }

    /// Softmax of an `N × 1` score column within each graph.
    pub fn segment_softmax(&mut self, a: Var, graph: &Arc<GraphIndex>) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.raw_dim());
        for g in 0..graph.n_graphs() {
            let r = graph.range(g);
            let col = x.slice(s![r.clone(), 0]);
            let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let e = col.mapv(|v| (v - max).exp());
            let z = e.sum();
            out.slice_mut(s![r, 0]).assign(&(e / z));
        }
        self.push(out, Op::SegmentSoftmax(a, graph.clone()), &[a])
    }

    /// Per graph, `Σ_i w_i h_i` with `w` an `N × 1` column.
    pub fn segment_weighted_sum(&mut self, w: Var, h: Var, graph: &Arc<GraphIndex>) -> Var {
        let (wv, hv) = (self.value(w), self.value(h));
        let mut out = Array2::zeros((graph.n_graphs(), hv.ncols()));
        for (i, &g) in graph.node_graph.iter().enumerate() {
            out.row_mut(g).scaled_add(wv[(i, 0)], &hv.row(i));
        }
        self.push(out, Op::SegmentWeightedSum(w, h, graph.clone()), &[w, h])
    }

    /// Copies row `g` of a `G × d` matrix to every node of graph `g`.
    pub fn repeat(&mut self, a: Var, graph: &Arc<GraphIndex>) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((graph.n_nodes(), x.ncols()));
        for (i, &g) in graph.node_graph.iter().enumerate() {
            out.row_mut(i).assign(&x.row(g));
        }
        self.push(out, Op::Repeat(a, graph.clone()), &[a])
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.param(w);
        let y = self.matmul(x, wv);
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.add_bias(y, bv)
            }
            None => y,
        }
    }

    /// Inverted dropout; identity when `p == 0` or `rng` is `None`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut StreamRng>) -> Var {
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        use rand::Rng;
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_simple_fn(self.value(x).raw_dim(), || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        self.mul_const(x, mask)
    }

    /// Accumulates gradients from `seeds` back to parameters; returns one
    /// gradient per store entry (zeros where untouched).
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        let mut out: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => out[*i] += &g,
                Op::MatMul(a, b) => {
                    if need(a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(x, b) => {
                    if need(b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if need(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if need(b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c.as_ref()),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| *gi *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap();
                    accumulate(&mut grads, *a, g * y);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if need(p) {
                            accumulate(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::MeanAgg(a, graph) => {
                    let mut ga = Array2::zeros(g.raw_dim());
                    for i in 0..graph.n_nodes() {
                        let nb = graph.neighbors(i);
                        let share = g.row(i).to_owned() / (1 + nb.len()) as f64;
                        ga.row_mut(i).scaled_add(1.0, &share);
                        for &j in nb {
                            ga.row_mut(j).scaled_add(1.0, &share);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, graph) => {
                    let w = node.value.as_ref().unwrap();
                    let mut ga = Array2::zeros(g.raw_dim());
                    for gi in 0..graph.n_graphs() {
                        let r = graph.range(gi);
                        let dot: f64 = r.clone().map(|i| w[(i, 0)] * g[(i, 0)]).sum();
                        for i in r {
                            ga[(i, 0)] = w[(i, 0)] * (g[(i, 0)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentWeightedSum(w, h, graph) => {
                    let (wv, hv) = (self.value(*w), self.value(*h));
                    if need(w) {
                        let mut gw = Array2::zeros(wv.raw_dim());
                        for (i, &gi) in graph.node_graph.iter().enumerate() {
                            gw[(i, 0)] = g.row(gi).dot(&hv.row(i));
                        }
                        accumulate(&mut grads, *w, gw);
                    }
                    if need(h) {
                        let mut gh = Array2::zeros(hv.raw_dim());
                        for (i, &gi) in graph.node_graph.iter().enumerate() {
                            gh.row_mut(i).scaled_add(wv[(i, 0)], &g.row(gi));
                        }
                        accumulate(&mut grads, *h, gh);
                    }
                }
                Op::Repeat(a, graph) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (i, &gi) in graph.node_graph.iter().enumerate() {
                        ga.row_mut(gi).scaled_add(1.0, &g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn path_graph(n: usize) -> Vec<[u32; 2]> {
        (0..n as u32 - 1).flat_map(|i| [[i, i + 1], [i + 1, i]]).collect()
    }

    #[test]
    fn mean_agg_isolated_and_complete() {
        let mut store = ParamStore::new();
        let _ = store.add("unused", Array2::zeros((1, 1)), Group::Backbone);
        let g = Arc::new(GraphIndex::new(&[(1, &[]), (3, &[[0, 1], [1, 0], [0, 2], [2, 0], [1, 2], [2, 1]])]).unwrap());
        let mut tape = Tape::new(&store);
        let x = tape.leaf(ndarray::array![[5.0], [1.0], [2.0], [3.0]]);
        let y = tape.mean_agg(x, &g);
        assert_eq!(tape.value(y), &ndarray::array![[5.0], [2.0], [2.0], [2.0]]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    /// Central differences through every op, with a random linear probe.
    #[test]
    fn tape_gradients_match_central_differences() {
        let mut r = rng::stream(3, 0, 0);
        let edges = path_graph(4);
        let tri = [[0u32, 1], [1, 0], [1, 2], [2, 1], [0, 2], [2, 0]];
        let graph = Arc::new(GraphIndex::new(&[(4, &edges), (3, &tri)]).unwrap());
        let mut store = ParamStore::new();
        let w1 = store.add("w1", glorot(3, 4, &mut r), Group::Backbone);
        let b1 = store.add("b1", glorot(1, 4, &mut r), Group::Backbone);
        let q = store.add("q", glorot(4, 1, &mut r), Group::Head);
        let wz = store.add("wz", glorot(4, 2, &mut r), Group::Head);
        let x = glorot(7, 3, &mut r);
        let mask = glorot(7, 4, &mut r);
        let probe_nodes = glorot(7, 6, &mut r);
        let probe_graph = glorot(2, 2, &mut r);

        let eval = |store: &ParamStore| -> (f64, Vec<Array2<f64>>) {
            let mut t = Tape::new(store);
            let xv = t.leaf(x.clone());
            let h = t.linear(xv, w1, Some(b1));
            let h = t.gelu(h);
            let h = t.mul_const(h, mask.clone());
            let agg = t.mean_agg(h, &graph);
            let h = t.add(h, agg);
            let hh = t.mul(h, h);
            let h = t.scale(hh, 0.3);
            let qv = t.param(q);
            let a = t.matmul(h, qv);
            let w = t.segment_softmax(a, &graph);
            let hg = t.segment_weighted_sum(w, h, &graph);
            let zl = t.linear(hg, wz, None);
            let z = t.exp(zl);
            let rep = t.repeat(z, &graph);
            let out = t.concat(&[h, rep]);
            let loss = (t.value(out) * &probe_nodes).sum() + (t.value(z) * &probe_graph).sum();
            let grads = t.backward(vec![(out, probe_nodes.clone()), (z, probe_graph.clone())]);
            (loss, grads)
        };

        let (_, grads) = eval(&store);
        let eps = 1e-6;
        for p in 0..store.len() {
            for k in 0..store.values[p].len() {
                let mut plus = store.clone();
                plus.values[p].as_slice_mut().unwrap()[k] += eps;
                let mut minus = store.clone();
                minus.values[p].as_slice_mut().unwrap()[k] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let an = grads[p].as_slice().unwrap()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param {p}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut r = rng::stream(1, 0, 0);
        let mut store = ParamStore::new();
        store.add("a", glorot(2, 3, &mut r), Group::Backbone);
        store.add("b", glorot(1, 3, &mut r), Group::Head);
        let flat = store.flatten();
        let mut other = store.clone();
        other.values[0].fill(0.0);
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, store);
        assert!(other.assign_flat(&flat[1..]).is_err());
    }
}
