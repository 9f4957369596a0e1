//! Symbolic subgraph-order analysis of stacked self-attention.
//!
//! A sentence is a directed multigraph over its words; a representation is a
//! sum of subgraph representations, and attention combines a query-side
//! subgraph with a key/value-side subgraph into one whose order (node count)
//! is at most the sum of the two. These functions track order intervals
//! through a layer stack and check the supporting algebra.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::params::seeded;

/// Closed interval `[lo, hi]` of subgraph orders, `1 <= lo <= hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OrderInterval {
    pub lo: u64,
    pub hi: u64,
}

impl OrderInterval {
    pub fn new(lo: u64, hi: u64) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(contract(format!("invalid order interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn hull(self, other: Self) -> Self {
        Self {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    /// Orders newly generated when a query subgraph attends over a key/value
    /// subgraph. The union can reach `hi_q + hi_kv` nodes; anything at or
    /// below the larger input order was already available.
    pub fn combine(q: Self, kv: Self) -> Self {
        Self {
            lo: q.hi.max(kv.hi),
            hi: q.hi + kv.hi,
        }
    }
}

impl fmt::Display for OrderInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

const MAX_LAYER: usize = 62;

/// Orders generated by layer `i` of a vanilla stack: `[2^(i-1), 2^i]`.
pub fn layer_order_interval(i: usize) -> Result<OrderInterval> {
    if !(1..=MAX_LAYER).contains(&i) {
        return Err(contract(format!(
            "layer index {i} outside [1, {MAX_LAYER}]"
        )));
    }
    OrderInterval::new(1 << (i - 1), 1 << i)
}

/// Low, middle and high order bands for index `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupBands {
    pub low: OrderInterval,
    pub middle: OrderInterval,
    pub high: OrderInterval,
}

/// `low = [1, 2^(n-2)]`, `middle = [2^(n-2), 2^(n-1)]`, `high = [2^(n-1), 2^n]`.
/// There is no middle band for `n = 1`.
pub fn group_order_intervals(n: usize) -> Result<GroupBands> {
    if !(2..=MAX_LAYER).contains(&n) {
        return Err(contract(format!("band index {n} outside [2, {MAX_LAYER}]")));
    }
    Ok(GroupBands {
        low: OrderInterval::new(1, 1 << (n - 2))?,
        middle: OrderInterval::new(1 << (n - 2), 1 << (n - 1))?,
        high: OrderInterval::new(1 << (n - 1), 1 << n)?,
    })
}

/// One layer of a vanilla stack: generated orders and the cumulative hull.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VanillaLayer {
    pub generated: OrderInterval,
    pub cumulative: OrderInterval,
}

/// Vanilla self-attention: every layer attends the whole representation
/// over itself.
pub fn propagate_vanilla(n_layers: usize) -> Result<Vec<VanillaLayer>> {
    check_depth(n_layers)?;
    let mut state = OrderInterval { lo: 1, hi: 1 };
    Ok((0..n_layers)
        .map(|_| {
            let generated = OrderInterval::combine(state, state);
            state = state.hull(generated);
            VanillaLayer {
                generated,
                cumulative: state,
            }
        })
        .collect())
}

fn check_depth(n_layers: usize) -> Result<()> {
    if !(1..=MAX_LAYER - 1).contains(&n_layers) {
        return Err(contract(format!(
            "layer count {n_layers} outside [1, {}]",
            MAX_LAYER - 1
        )));
    }
    Ok(())
}

/// Stream orders entering and leaving one layer of the split architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamOrders {
    pub layer: usize,
    pub prev_in: OrderInterval,
    pub inc_in: OrderInterval,
    /// Incremental over incremental.
    pub high: OrderInterval,
    /// Incremental query over previous keys/values.
    pub mid_inc_query: OrderInterval,
    /// Previous query over incremental keys/values.
    pub mid_prev_query: OrderInterval,
    pub prev_out: OrderInterval,
    pub inc_out: OrderInterval,
}

impl StreamOrders {
    pub fn full_out(&self) -> OrderInterval {
        self.prev_out.hull(self.inc_out)
    }
}

/// How to read the band index `n`: as the layer's own index, or as the total
/// number of layers in the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexReading {
    LayerIndex,
    TotalLayers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderTrace {
    pub n_layers: usize,
    pub layers: Vec<StreamOrders>,
    pub vanilla: Vec<VanillaLayer>,
}

impl OrderTrace {
    /// Reference bands for layer `i` (1-based) under a reading; `None` where
    /// the index is below 2.
    pub fn bands(&self, layer: usize, reading: IndexReading) -> Option<GroupBands> {
        let n = match reading {
            IndexReading::LayerIndex => layer,
            IndexReading::TotalLayers => self.n_layers,
        };
        group_order_intervals(n).ok()
    }
}

/// Propagate order intervals through the split architecture. Both streams
/// start as single words; each layer's three parts combine the streams per
/// their query/key-value wiring, the new incremental stream is the hull of
/// the parts, and the new previous stream is the hull of the inputs.
pub fn propagate_orders(n_layers: usize) -> Result<OrderTrace> {
    check_depth(n_layers)?;
    let word = OrderInterval { lo: 1, hi: 1 };
    let (mut prev, mut inc) = (word, word);
    let mut layers = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let high = OrderInterval::combine(inc, inc);
        let mid_inc_query = OrderInterval::combine(inc, prev);
        let mid_prev_query = OrderInterval::combine(prev, inc);
        let s = StreamOrders {
            layer,
            prev_in: prev,
            inc_in: inc,
            high,
            mid_inc_query,
            mid_prev_query,
            prev_out: prev.hull(inc),
            inc_out: high.hull(mid_inc_query).hull(mid_prev_query),
        };
        (prev, inc) = (s.prev_out, s.inc_out);
        layers.push(s);
    }
    Ok(OrderTrace {
        n_layers,
        layers,
        vanilla: propagate_vanilla(n_layers)?,
    })
}

impl fmt::Display for OrderTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer  generated(vanilla)  cumulative  prev_in  inc_in  high  mid(q=inc)  mid(q=prev)  prev_out  inc_out  bands(n=layer)  bands(n={})", self.n_layers)?;
        for (s, v) in self.layers.iter().zip(&self.vanilla) {
            let show = |b: Option<GroupBands>| {
                b.map_or("-".to_string(), |b| {
                    format!("{} {} {}", b.low, b.middle, b.high)
                })
            };
            writeln!(
                f,
                "{:>5}  {}  {}  {}  {}  {}  {}  {}  {}  {}  {}  {}",
                s.layer,
                v.generated,
                v.cumulative,
                s.prev_in,
                s.inc_in,
                s.high,
                s.mid_inc_query,
                s.mid_prev_query,
                s.prev_out,
                s.inc_out,
                show(self.bands(s.layer, IndexReading::LayerIndex)),
                show(self.bands(s.layer, IndexReading::TotalLayers)),
            )?;
        }
        Ok(())
    }
}

/// Result of checking that attention scores between two sums of subgraph
/// representations equal the sum of all pairwise subgraph scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionReport {
    pub trials: usize,
    /// Largest `max|lhs - rhs| / max|rhs|` over trials.
    pub max_deviation: f64,
}

/// For random `sub_i^a` (`i < n_a`) and `sub_j^b` (`j < n_b`), each
/// `rows × dims`, compare `(Σ sub_i^a)(Σ sub_j^b)ᵀ` with
/// `Σ_i Σ_j sub_i^a (sub_j^b)ᵀ` in 32-bit arithmetic.
pub fn verify_decomposition(
    n_a: usize,
    n_b: usize,
    rows: usize,
    dims: usize,
    trials: usize,
    seed: u64,
) -> Result<DecompositionReport> {
    if trials == 0 || n_a == 0 || n_b == 0 || rows == 0 || dims == 0 {
        return Err(contract(
            "verify_decomposition needs positive sizes and trials",
        ));
    }
    let mut rng = seeded(seed);
    let mut max_deviation = 0.0f64;
    let mut random = |n: usize| -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| {
                (0..rows * dims)
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let scores = |a: &[f32], b: &[f32]| -> Vec<f32> {
        let bt = crate::kernels::transpose(b, rows, dims);
        let mut out = vec![0.0f32; rows * rows];
        crate::kernels::matmul_into(a, &bt, rows, dims, rows, &mut out);
        out
    };
    let sum = |subs: &[Vec<f32>]| -> Vec<f32> {
        let mut s = vec![0.0f32; rows * dims];
        for m in subs {
            for (x, y) in s.iter_mut().zip(m) {
                *x += y;
            }
        }
        s
    };
    for _ in 0..trials {
        let (a, b) = (random(n_a), random(n_b));
        let lhs = scores(&sum(&a), &sum(&b));
        let mut rhs = vec![0.0f32; rows * rows];
        for ai in &a {
            for bj in &b {
                for (r, x) in rhs.iter_mut().zip(scores(ai, bj)) {
                    *r += x;
                }
            }
        }
        let scale = rhs
            .iter()
            .fold(0.0f64, |m, &x| m.max(f64::from(x).abs()))
            .max(f64::MIN_POSITIVE);
        let dev = lhs
            .iter()
            .zip(&rhs)
            .fold(0.0f64, |m, (&l, &r)| m.max(f64::from(l - r).abs()));
        max_deviation = max_deviation.max(dev / scale);
    }
    Ok(DecompositionReport {
        trials,
        max_deviation,
    })
}

/// An edge of the sentence multigraph: from node `sn` of subgraph `sub_k`
/// to node `tn` of subgraph `sub_h`. Parallel edges are allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuaternionEdge {
    pub sn: usize,
    pub tn: usize,
    pub sub_k: usize,
    pub sub_h: usize,
}

/// Directed multigraph over `nodes` words with a registry of subgraphs
/// (node sets as bitmasks).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Multigraph {
    pub nodes: usize,
    pub subgraphs: Vec<u32>,
    pub edges: Vec<QuaternionEdge>,
}

impl Multigraph {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes == 0 || nodes > 32 {
            return Err(contract(format!("node count {nodes} outside [1, 32]")));
        }
        Ok(Self {
            nodes,
            ..Default::default()
        })
    }

    pub fn add_subgraph(&mut self, mask: u32) -> Result<usize> {
        if mask == 0 || (self.nodes < 32 && mask >> self.nodes != 0) {
            return Err(contract(format!(
                "subgraph mask {mask:#b} outside the node set"
            )));
        }
        self.subgraphs.push(mask);
        Ok(self.subgraphs.len() - 1)
    }

    /// Add an edge; `sn` must lie in subgraph `sub_k` and `tn` in `sub_h`.
    pub fn add_edge(&mut self, edge: QuaternionEdge) -> Result<()> {
        let member =
            |sub: usize, node: usize| self.subgraphs.get(sub).is_some_and(|m| m >> node & 1 == 1);
        if !member(edge.sub_k, edge.sn) || !member(edge.sub_h, edge.tn) {
            return Err(contract(format!(
                "edge {edge:?} endpoints outside their subgraphs"
            )));
        }
        self.edges.push(edge);
        Ok(())
    }
}

/// One enumerated subgraph of the complete directed word graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphInfo {
    /// Sorted word positions.
    pub nodes: Vec<usize>,
    /// Directed edges between distinct nodes, both directions per pair.
    pub edges: Vec<(usize, usize)>,
}

impl SubgraphInfo {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration {
    pub subgraphs: Vec<SubgraphInfo>,
    /// `(a, b)`: subgraph `a` must be generated before subgraph `b`, which
    /// extends it by one node and its connecting edges.
    pub generation_order: Vec<(usize, usize)>,
}

impl Enumeration {
    pub fn count_of_order(&self, order: usize) -> usize {
        self.subgraphs.iter().filter(|s| s.order() == order).count()
    }
}

pub const MAX_ENUMERATION_LEN: usize = 5;

/// Enumerate connected subgraphs of the complete directed word graph over
/// `sentence_len` words, up to `max_order` nodes, by growing each subgraph
/// one neighbouring word at a time from single words.
pub fn enumerate_subgraphs(sentence_len: usize, max_order: usize) -> Result<Enumeration> {
    if sentence_len == 0 || sentence_len > MAX_ENUMERATION_LEN {
        return Err(contract(format!(
            "sentence length {sentence_len} outside [1, {MAX_ENUMERATION_LEN}]"
        )));
    }
    let mut levels: Vec<BTreeSet<Vec<usize>>> = vec![(0..sentence_len).map(|i| vec![i]).collect()];
    while levels.len() < max_order.min(sentence_len) {
        let grown: BTreeSet<Vec<usize>> = levels
            .last()
            .expect("nonempty")
            .iter()
            .flat_map(|s| {
                (0..sentence_len).filter(|n| !s.contains(n)).map(move |n| {
                    let mut t = s.clone();
                    t.push(n);
                    t.sort_unstable();
                    t
                })
            })
            .collect();
        levels.push(grown);
    }
    if max_order == 0 {
        levels.clear();
    }
    let subgraphs: Vec<SubgraphInfo> = levels
        .into_iter()
        .flatten()
        .map(|nodes| {
            let edges = nodes
                .iter()
                .flat_map(|&a| nodes.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
                .collect();
            SubgraphInfo { nodes, edges }
        })
        .collect();
    let mut generation_order = Vec::new();
    for (j, big) in subgraphs.iter().enumerate() {
        for (i, small) in subgraphs.iter().enumerate() {
            if small.order() + 1 == big.order() && small.nodes.iter().all(|n| big.nodes.contains(n))
            {
                generation_order.push((i, j));
            }
        }
    }
    Ok(Enumeration {
        subgraphs,
        generation_order,
    })
}
