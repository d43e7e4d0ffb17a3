//! Small graph families used by tests, demos and the synthetic benchmark.

use rand::Rng;

use super::Graph;
use crate::error::{Error, Result};

pub fn path(n: usize, label: usize) -> Result<Graph> {
    Graph::new(n, (1..n).map(|i| (i - 1, i)), label)
}

pub fn cycle(n: usize, label: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::Data(format!("cycle needs at least 3 nodes, got {n}")));
    }
    Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)), label)
}

/// `K_{1,leaves}` with the centre at node 0.
pub fn star(leaves: usize, label: usize) -> Result<Graph> {
    Graph::new(leaves + 1, (1..=leaves).map(|i| (0, i)), label)
}

pub fn complete(n: usize, label: usize) -> Result<Graph> {
    Graph::new(
        n,
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))),
        label,
    )
}

/// G(n, p): each unordered pair is an edge independently with probability `p`.
pub fn erdos_renyi<R: Rng>(n: usize, p: f64, label: usize, rng: &mut R) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, edges, label).expect("generated edges are in range")
}
