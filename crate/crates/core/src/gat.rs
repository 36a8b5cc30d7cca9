//! Graph attention layers over the local road graph of each input window.

use nncore::{Graph, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{LocalGraph, NeighborMask};

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// One attention head: shared map `w: [F, F']` and attention vector
/// `a: [1, 2F']`, whose halves score the receiving and the sending node.
#[derive(Clone, Debug)]
pub struct GatHead {
    pub w: ParamId,
    pub a: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub in_dim: usize,
    pub head_dim: usize,
    pub slope: f64,
    pub activation: Activation,
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || head_dim == 0 {
            return Err(Error::invalid("a graph attention layer needs at least one head of width >= 1"));
        }
        let heads = (0..n_heads)
            .map(|m| GatHead {
                w: store.add_uniform(format!("{name}.head{m}.w"), &[in_dim, head_dim], in_dim, rng),
                a: store.add_uniform(format!("{name}.head{m}.a"), &[1, 2 * head_dim], 2 * head_dim, rng),
            })
            .collect();
        Ok(Self {
            heads,
            in_dim,
            head_dim,
            slope: DEFAULT_SLOPE,
            activation: Activation::Relu,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }

    /// `h: [T, F]` node features. Returns `[T, M·F']` and each head's
    /// coefficients `[E]`, one per edge of `edges`. Rows of nodes that
    /// receive no edge are zero before the activation.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<(Var, Vec<Var>)> {
        let f = self.head_dim;
        let n = g.shape(h)[0];
        if n != edges.n_nodes {
            return Err(Error::invalid(format!("{n} feature rows for {} graph nodes", edges.n_nodes)));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = g.param(store, head.w);
            let wh = g.matmul(h, w)?;
            let a = g.param(store, head.a);
            let a_recv = g.slice_last(a, 0, f)?;
            let a_send = g.slice_last(a, f, f)?;
            let a_recv = g.transpose(a_recv)?;
            let a_send = g.transpose(a_send)?;
            let s_recv = g.matmul(wh, a_recv)?;
            let s_send = g.matmul(wh, a_send)?;
            let e_recv = g.gather(s_recv, &edges.dst)?;
            let e_send = g.gather(s_send, &edges.src)?;
            let e = g.add(e_recv, e_send)?;
            let e = g.leaky_relu(e, self.slope);
            let e = g.reshape(e, &[edges.len()])?;
            let alpha = g.segment_softmax(e, &edges.offsets)?;
            let msgs = g.gather(wh, &edges.src)?;
            let weighted = g.mul_rows(msgs, alpha)?;
            let agg = g.index_add(weighted, &edges.dst, n)?;
            outs.push(match self.activation {
                Activation::Relu => g.relu(agg),
                Activation::Identity => agg,
            });
            alphas.push(alpha);
        }
        let out = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        Ok((out, alphas))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, edges: &EdgeIndex) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, h, edges)?.0)
    }
}

/// Attention edges `src → dst` grouped by receiving node. Group `k` covers
/// `offsets[k]..offsets[k + 1]` and every edge in it has the same `dst`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeIndex {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl EdgeIndex {
    /// Edges `j → i` for every `j` in `neigh[i]`, for the receiving nodes
    /// `receivers` (all nodes when `None`).
    pub fn from_neighborhoods(neigh: &[Vec<usize>], receivers: Option<&[usize]>) -> Result<Self> {
        let mut out = Self {
            n_nodes: neigh.len(),
            offsets: vec![0],
            ..Self::default()
        };
        let all: Vec<usize> = (0..neigh.len()).collect();
        out.append(neigh, 0, receivers.unwrap_or(&all))?;
        Ok(out)
    }

    fn append(&mut self, neigh: &[Vec<usize>], base: usize, receivers: &[usize]) -> Result<()> {
        for &i in receivers {
            if neigh[i].is_empty() {
                return Err(Error::EmptyNeighborhood(i));
            }
            for &j in &neigh[i] {
                self.src.push(base + j);
                self.dst.push(base + i);
            }
            self.offsets.push(self.src.len());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Local graphs of a batch of windows, stacked into one node list.
#[derive(Clone, Debug, PartialEq)]
pub struct GatBatch {
    pub batch: usize,
    /// Node tokens, graph after graph.
    pub tokens: Vec<usize>,
    /// Every edge of every graph.
    pub full: EdgeIndex,
    /// Only edges into window nodes, enough for the last layer.
    pub last: EdgeIndex,
    /// Node row of each window position, `[batch · L]`.
    pub positions: Vec<usize>,
    pub window_len: usize,
}

/// Local token graph of one window.
pub fn window_graph(window: &[usize], mask: &NeighborMask) -> LocalGraph<usize> {
    LocalGraph::closure(window, |t| mask.successors(t), |t| mask.predecessors(t))
}

pub fn build_gat_batch(
    windows: &[&[usize]],
    mask: &NeighborMask,
    bidirectional: bool,
    self_loops: bool,
) -> Result<GatBatch> {
    let window_len = windows.first().map_or(0, |w| w.len());
    if windows.iter().any(|w| w.len() != window_len) {
        return Err(Error::invalid("windows in one batch must share a length"));
    }
    for w in windows {
        if let Some(&t) = w.iter().find(|&&t| t >= mask.n_tokens() || mask.is_special(t)) {
            return Err(Error::UnknownToken(t));
        }
    }
    let mut tokens = Vec::new();
    let mut full = EdgeIndex {
        offsets: vec![0],
        ..EdgeIndex::default()
    };
    let mut last = full.clone();
    let mut positions = Vec::with_capacity(windows.len() * window_len);
    for w in windows {
        let lg = window_graph(w, mask);
        let neigh = lg.neighborhoods(bidirectional, self_loops);
        let base = tokens.len();
        let all: Vec<usize> = (0..lg.nodes.len()).collect();
        full.append(&neigh, base, &all)?;
        let distinct = lg.nodes.len() - lg.nodes.iter().filter(|t| !w.contains(t)).count();
        let window_nodes: Vec<usize> = (0..distinct).collect();
        last.append(&neigh, base, &window_nodes)?;
        for t in w.iter() {
            let p = lg.nodes.iter().position(|x| x == t).expect("window tokens lead the node list");
            positions.push(base + p);
        }
        tokens.extend_from_slice(&lg.nodes);
    }
    full.n_nodes = tokens.len();
    last.n_nodes = tokens.len();
    Ok(GatBatch {
        batch: windows.len(),
        tokens,
        full,
        last,
        positions,
        window_len,
    })
}

/// Stacked graph attention layers over embedded node tokens.
#[derive(Clone, Debug, Default)]
pub struct SpatialEncoder {
    pub layers: Vec<GatLayer>,
}

impl SpatialEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::invalid(format!("d_model {d_model} is not divisible by {n_heads} GAT heads")));
        }
        let layers = (0..n_layers)
            .map(|i| GatLayer::new(store, &format!("{name}.{i}"), d_model, n_heads, d_model / n_heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Node features `table[tokens]` through every layer, gathered back to
    /// window order as `[B, L, d]`. Also returns every head's coefficients,
    /// layer by layer.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: Var,
        batch: &GatBatch,
    ) -> Result<(Var, Vec<Var>)> {
        let mut x = g.gather(table, &batch.tokens)?;
        let mut alphas = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let edges = if i + 1 == self.layers.len() { &batch.last } else { &batch.full };
            let (y, a) = l.forward_with_attention(g, store, x, edges)?;
            x = y;
            alphas.extend(a);
        }
        let w = *g.shape(x).last().expect("2-d");
        let rows = g.gather(x, &batch.positions)?;
        Ok((g.reshape(rows, &[batch.batch, batch.window_len, w])?, alphas))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, table: Var, batch: &GatBatch) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, table, batch)?.0)
    }
}
