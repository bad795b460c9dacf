//! Slow, obvious reference implementations shared by property and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use deepedit::kg::{KnowledgeGraph, Triplet};
use rand::Rng;

/// Weighted mean of post/pre chain retention, weight 1/sqrt(len), over chains
/// whose pre retention is nonzero.
pub fn naive_ifr(chains: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (pre, post) in chains {
        let mut r = 1.0;
        for p in pre {
            r *= p;
        }
        if r == 0.0 {
            continue;
        }
        let mut r2 = 1.0;
        for p in post {
            r2 *= p;
        }
        let w = 1.0 / (pre.len() as f64).sqrt();
        num += w * r2 / r;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn naive_ckp(facts: &[(f64, f64)]) -> f64 {
    let ratios: Vec<f64> = facts.iter().filter(|f| f.0 != 0.0).map(|f| f.1 / f.0).collect();
    if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

pub fn grid_prob<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(0..=20) as f64 * 0.05
}

pub fn random_chains<R: Rng>(rng: &mut R) -> Vec<(Vec<f64>, Vec<f64>)> {
    let count = rng.random_range(0..=12);
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=5);
            let pre = (0..len).map(|_| grid_prob(rng)).collect();
            let post = (0..len).map(|_| grid_prob(rng)).collect();
            (pre, post)
        })
        .collect()
}

/// Small directed graph over nodes `n0..`, at most one edge per ordered pair.
#[derive(Debug, Clone)]
pub struct SmallGraph {
    pub nodes: usize,
    pub edges: BTreeMap<(usize, usize), String>,
}

pub fn label(i: usize) -> String {
    format!("n{i}")
}

impl SmallGraph {
    pub fn random<R: Rng>(rng: &mut R, max_nodes: usize, max_density: f64) -> Self {
        let nodes = rng.random_range(2..=max_nodes);
        let density = rng.random_range(0.0..=max_density);
        let mut edges = BTreeMap::new();
        for s in 0..nodes {
            for o in 0..nodes {
                if s != o && rng.random_bool(density) {
                    edges.insert((s, o), ["r", "q", "p"][rng.random_range(0..3)].to_string());
                }
            }
        }
        SmallGraph { nodes, edges }
    }

    pub fn build(&self) -> KnowledgeGraph {
        let seed = Triplet::new("n0", "seed", "n1").unwrap();
        let edges = self
            .edges
            .iter()
            .map(|(&(s, o), r)| Triplet::new(&label(s), r, &label(o)).unwrap());
        KnowledgeGraph::from_parts("g".into(), seed, (0..self.nodes).map(label), edges).unwrap()
    }

    /// All node sequences without repeats from `source` to `target` with at
    /// most `max_len` hops where every step is an edge, by exhaustive search
    /// over sequences rather than graph traversal.
    pub fn brute_paths(&self, source: usize, target: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if source == target {
            return out;
        }
        let others: Vec<usize> = (0..self.nodes).filter(|&n| n != source && n != target).collect();
        for inner in 0..max_len {
            for mid in arrangements(&others, inner) {
                let mut seq = vec![source];
                seq.extend(mid);
                seq.push(target);
                if seq.windows(2).all(|w| self.edges.contains_key(&(w[0], w[1]))) {
                    out.push(seq);
                }
            }
        }
        out
    }

    /// Brute-force paths as triplets, in the documented chain order.
    pub fn brute_chains(&self, source: usize, target: usize, max_len: usize) -> Vec<Vec<Triplet>> {
        let mut chains: Vec<Vec<Triplet>> = self
            .brute_paths(source, target, max_len)
            .into_iter()
            .map(|seq| {
                seq.windows(2)
                    .map(|w| Triplet::new(&label(w[0]), &self.edges[&(w[0], w[1])], &label(w[1])).unwrap())
                    .collect()
            })
            .collect();
        chains.sort_by_key(|c| {
            let mut names = vec![c[0].subject().to_string()];
            names.extend(c.iter().map(|e| e.object().to_string()));
            let rels: Vec<String> = c.iter().map(|e| e.relation().to_string()).collect();
            (c.len(), names, rels)
        });
        chains
    }
}

/// Ordered selections of `k` distinct items.
fn arrangements(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in arrangements(&rest, k - 1) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

/// Checks enumeration against brute force for every pair and cap.
/// Returns the first mismatch.
pub fn enumeration_mismatch(g: &SmallGraph) -> Option<String> {
    let graph = g.build();
    for s in 0..g.nodes {
        for o in 0..g.nodes {
            for max_len in 1..=5 {
                let got = graph.enumerate_chains(&label(s), &label(o), max_len).unwrap();
                let want = g.brute_chains(s, o, max_len);
                if got != want {
                    return Some(format!("{g:?} n{s}->n{o} cap {max_len}: {got:?} vs {want:?}"));
                }
            }
        }
    }
    None
}
