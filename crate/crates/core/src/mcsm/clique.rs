//! Threshold pruning of the concept map and maximal clique enumeration.

use crate::error::{Error, Result};
use crate::neural::Tensor;

pub const DEFAULT_CLIQUE_CAP: usize = 100_000;

/// Fixed-width bit set over node ids.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn empty(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }

    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn remove(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }

    fn contains(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    fn and(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }

    fn and_not(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a & !b).collect())
    }

    fn or(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a | b).collect())
    }

    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(k * 64 + b)
            })
        })
    }
}

/// Simple undirected graph over `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunedGraph {
    n: usize,
    adj: Vec<Bits>,
}

impl PrunedGraph {
    pub fn new(n: usize) -> Self {
        PrunedGraph {
            n,
            adj: vec![Bits::empty(n); n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = PrunedGraph::new(n);
        for &(u, v) in edges {
            g.add_edge(u, v);
        }
        g
    }

    /// Self pairs are ignored.
    pub fn add_edge(&mut self, u: usize, v: usize) {
        if u != v {
            self.adj[u].insert(v);
            self.adj[v].insert(u);
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].contains(v)
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adj[u].count()
    }

    /// Edges `(u, v)` with `u < v` in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|u| self.adj[u].iter().filter(move |&v| v > u).map(move |v| (u, v)))
            .collect()
    }

    pub fn is_clique(&self, nodes: &[usize]) -> bool {
        nodes
            .iter()
            .enumerate()
            .all(|(i, &u)| nodes[i + 1..].iter().all(|&v| self.has_edge(u, v)))
    }

    /// Vertices in the order of repeatedly removing a minimum-degree vertex
    /// (lowest id on ties).
    pub fn degeneracy_order(&self) -> Vec<usize> {
        let mut deg: Vec<usize> = (0..self.n).map(|u| self.degree(u)).collect();
        let mut gone = vec![false; self.n];
        let mut order = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let v = (0..self.n)
                .filter(|&u| !gone[u])
                .min_by_key(|&u| (deg[u], u))
                .expect("vertex left");
            gone[v] = true;
            order.push(v);
            for u in self.adj[v].iter() {
                if !gone[u] {
                    deg[u] -= 1;
                }
            }
        }
        order
    }
}

/// Keeps `(i, j)` when both directions of the map reach `tau`.
pub fn prune_graph(concept_map: &Tensor, tau: f64) -> PrunedGraph {
    let n = concept_map.rows();
    assert_eq!(concept_map.cols(), n, "concept map must be square");
    let mut g = PrunedGraph::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if concept_map.get(i, j).min(concept_map.get(j, i)) >= tau {
                g.add_edge(i, j);
            }
        }
    }
    g
}

/// Every maximal clique exactly once, each sorted ascending, the list sorted
/// lexicographically. Isolated vertices are singleton cliques. More than
/// `cap` cliques is a resource error.
pub fn enumerate_maximal_cliques(g: &PrunedGraph, cap: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let order = g.degeneracy_order();
    let mut position = vec![0; g.n];
    for (i, &v) in order.iter().enumerate() {
        position[v] = i;
    }
    let mut r = Vec::new();
    for &v in &order {
        let mut p = Bits::empty(g.n);
        let mut x = Bits::empty(g.n);
        for u in g.adj[v].iter() {
            if position[u] > position[v] {
                p.insert(u);
            } else {
                x.insert(u);
            }
        }
        r.push(v);
        expand(g, &mut r, p, x, &mut out, cap)?;
        r.pop();
    }
    out.sort();
    Ok(out)
}

fn expand(g: &PrunedGraph, r: &mut Vec<usize>, mut p: Bits, mut x: Bits, out: &mut Vec<Vec<usize>>, cap: usize) -> Result<()> {
    if p.is_empty() {
        if x.is_empty() {
            if out.len() == cap {
                return Err(Error::Resource(format!(
                    "more than {cap} maximal cliques in a {}-node graph",
                    g.n
                )));
            }
            let mut c = r.clone();
            c.sort_unstable();
            out.push(c);
        }
        return Ok(());
    }
    let pivot = p
        .or(&x)
        .iter()
        .max_by_key(|&u| (p.and(&g.adj[u]).count(), std::cmp::Reverse(u)))
        .expect("non-empty");
    let branch: Vec<usize> = p.and_not(&g.adj[pivot]).iter().collect();
    for v in branch {
        r.push(v);
        expand(g, r, p.and(&g.adj[v]), x.and(&g.adj[v]), out, cap)?;
        r.pop();
        p.remove(v);
        x.insert(v);
    }
    Ok(())
}

/// Reference enumeration over all `2^n` vertex subsets. Intended for small
/// graphs only (the oracle for [`enumerate_maximal_cliques`]).
pub fn brute_force_maximal_cliques(g: &PrunedGraph) -> Vec<Vec<usize>> {
    let n = g.n;
    assert!(n <= 24, "brute force is exponential");
    let nbr: Vec<u32> = (0..n)
        .map(|u| (0..n).filter(|&v| g.has_edge(u, v)).fold(0u32, |m, v| m | 1 << v))
        .collect();
    let is_clique = |mask: u32| (0..n).all(|u| mask >> u & 1 == 0 || (mask & !(1 << u)) & !nbr[u] == 0);
    let mut out = Vec::new();
    for mask in 1u32..(1u32 << n) {
        if !is_clique(mask) {
            continue;
        }
        let extendable = (0..n).any(|v| mask >> v & 1 == 0 && is_clique(mask | 1 << v));
        if !extendable {
            out.push((0..n).filter(|&u| mask >> u & 1 == 1).collect());
        }
    }
    out.sort();
    out
}
