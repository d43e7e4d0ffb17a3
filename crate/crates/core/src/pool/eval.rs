//! Value-level versions of the pooling operations, for inspection and demos.

use ndarray::Array2;

use super::{
    coarsen, harden, HardGradient, LayerGraph, PoolMode, PoolParams, AssignmentBundle,
};
use crate::error::Result;
use crate::mdgnn::{md_gnn, TopologySet};
use crate::numerics::Tape;

fn all_real(n: usize) -> Vec<bool> {
    vec![true; n]
}

fn cluster_of(s_hard: &Array2<f64>) -> Vec<Option<usize>> {
    s_hard
        .rows()
        .into_iter()
        .map(|r| r.iter().position(|&v| v == 1.0))
        .collect()
}

/// Node attention weights for a given hard assignment.
pub fn node_attention(
    z: &Array2<f64>,
    s_hard: &Array2<f64>,
    node_weight: &Array2<f64>,
    node_vector: &Array2<f64>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let w = tape.constant(node_weight.clone());
    let a = tape.constant(node_vector.clone());
    let alpha = super::node_attention(&mut tape, zv, &cluster_of(s_hard), w, a)?;
    Ok(tape.value(alpha).iter().copied().collect())
}

/// Edge attention matrix for a given hard assignment.
pub fn edge_attention(
    z: &Array2<f64>,
    adjacency: &Array2<f64>,
    s_hard: &Array2<f64>,
    edge_weight: &Array2<f64>,
    edge_vector: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let av = tape.constant(adjacency.clone());
    let w = tape.constant(edge_weight.clone());
    let a = tape.constant(edge_vector.clone());
    let e = super::edge_attention(&mut tape, zv, av, None, &cluster_of(s_hard), s_hard.ncols(), w, a)?;
    Ok(tape.value(e).clone())
}

/// `S_Hᵀ diag(α) Z`.
pub fn pool_features(z: &Array2<f64>, alpha: &[f64], s_hard: &Array2<f64>) -> Array2<f64> {
    let mut weighted = z.clone();
    for (mut row, &a) in weighted.rows_mut().into_iter().zip(alpha) {
        row *= a;
    }
    s_hard.t().dot(&weighted)
}

/// `S_Hᵀ (E ⊙ A) S_H`.
pub fn pool_adjacency(edge: &Array2<f64>, adjacency: &Array2<f64>, s_hard: &Array2<f64>) -> Array2<f64> {
    let weighted = edge * adjacency;
    s_hard.t().dot(&weighted).dot(s_hard)
}

/// `Sᵀ Z`.
pub fn diffpool_features(z: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    s.t().dot(z)
}

/// `Sᵀ A S`.
pub fn diffpool_adjacency(adjacency: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    s.t().dot(adjacency).dot(s)
}

/// Result of [`pool_graph`].
#[derive(Debug, Clone)]
pub struct PooledGraph {
    pub features: Array2<f64>,
    pub adjacency: Array2<f64>,
    pub bundle: AssignmentBundle,
}

/// One full pooling step on an unpadded graph. `embeddings` is the `Z` fed to
/// the attention and pooling; the assignment network reads `features`.
pub fn pool_graph(
    adjacency: &Array2<f64>,
    features: &Array2<f64>,
    embeddings: &Array2<f64>,
    params: &PoolParams,
    mode: PoolMode,
) -> Result<PooledGraph> {
    params.validate()?;
    let hops = params.assign.weights.len().saturating_sub(1);
    let topologies = TopologySet::from_adjacency(adjacency, hops).normalized();
    let mut tape = Tape::new();
    let tops: Vec<_> = topologies.into_iter().map(|t| tape.constant(t)).collect();
    let vars = params.record(&mut tape, false);
    let x = tape.constant(features.clone());
    let z = tape.constant(embeddings.clone());
    let a = tape.constant(adjacency.clone());
    let h = md_gnn(&mut tape, &tops, x, &vars.assign)?;
    let s = super::assignment_from_embedding(&mut tape, h, &vars)?;
    let mask = all_real(adjacency.nrows());
    let hard = if mode.is_hard() {
        Some(harden(&mut tape, s, &mask, HardGradient::StraightThrough, None)?)
    } else {
        None
    };
    let graph = LayerGraph {
        adjacency: a,
        embeddings: z,
        mask: &mask,
        support: None,
    };
    let out = coarsen(&mut tape, graph, s, hard, &vars, mode)?;
    Ok(PooledGraph {
        features: tape.value(out.x_next).clone(),
        adjacency: tape.value(out.a_next).clone(),
        bundle: out.bundle.values(&tape),
    })
}
