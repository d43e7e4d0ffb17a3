//! Hard-assignment pooling with node- and edge-attention coarsening, plus the
//! soft-assignment baseline.
//!
//! One pooling step on a graph with adjacency `A`, features `X` and embeddings `Z`:
//!
//! 1. `S = softmax_rows(MDGNN_pool(A, X) · P + b)` and `S_H = onehot(S)`.
//! 2. Node attention `m_i = a_mᵀ leaky_relu(W_mᵀ z_i)`, softmax-normalized inside
//!    each cluster, gives `X' = S_Hᵀ diag(α) Z`.
//! 3. Edge attention `s_ij = leaky_relu(a_eᵀ [W_eᵀ z_i ‖ W_eᵀ z_j])`, softmax-normalized
//!    over the existing edges between the same pair of clusters, gives
//!    `A' = S_Hᵀ (E ⊙ A) S_H`.
//!
//! Both attention scores are computed for all nodes (or node pairs) in one
//! vectorized pass; cluster membership only enters through the softmax groups.
//! Weight matrices are stored column-major in the sense of right multiplication:
//! `W_m`, `W_e` are `d × d′` and applied as `Z · W`.

pub mod eval;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdgnn::{md_gnn, GcnParams, REACH_TOL};
use crate::numerics::{onehot_rows, Tape, Var, LEAKY_SLOPE};

/// Which coarsening path a pooling layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolMode {
    /// Node attention for features; plain hard sum `S_Hᵀ A S_H` for adjacency.
    #[serde(rename = "N")]
    Node,
    /// Uniform `1/|p|` node weights; edge attention for adjacency.
    #[serde(rename = "E")]
    Edge,
    /// Node and edge attention.
    #[serde(rename = "NE")]
    NodeEdge,
    /// Soft assignment: `Sᵀ Z` and `Sᵀ A S`.
    #[serde(rename = "soft")]
    Soft,
}

impl PoolMode {
    pub const ALL: [PoolMode; 4] = [PoolMode::Soft, PoolMode::Node, PoolMode::Edge, PoolMode::NodeEdge];

    pub fn is_hard(self) -> bool {
        self != PoolMode::Soft
    }

    pub fn node_attention(self) -> bool {
        matches!(self, PoolMode::Node | PoolMode::NodeEdge)
    }

    pub fn edge_attention(self) -> bool {
        matches!(self, PoolMode::Edge | PoolMode::NodeEdge)
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Node => "N",
            PoolMode::Edge => "E",
            PoolMode::NodeEdge => "NE",
            PoolMode::Soft => "soft",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(PoolMode::Node),
            "E" | "e" => Ok(PoolMode::Edge),
            "NE" | "ne" => Ok(PoolMode::NodeEdge),
            "soft" | "SOFT" => Ok(PoolMode::Soft),
            other => Err(Error::Config(format!(
                "unknown pooling mode `{other}` (expected N, E, NE or soft)"
            ))),
        }
    }
}

/// Gradient rule for the hard assignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardGradient {
    /// Forward one-hot, backward identity.
    #[default]
    StraightThrough,
    /// Forward one-hot, no gradient into the assignment network.
    StopGradient,
}

/// A hard assignment captured at one parameter point and replayed at nearby
/// points, so that finite differences see the straight-through surrogate
/// `S_H(θ) = hard + S(θ) - soft` instead of a piecewise-constant argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAssignment {
    pub hard: Array2<f64>,
    pub soft: Array2<f64>,
}

/// Parameter values of one pooling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    /// Per-hop GCN weights of the assignment network.
    pub assign: GcnParams,
    /// `(H+1)·d_out × K` projection to cluster logits.
    pub assign_proj: Array2<f64>,
    /// `1 × K`
    pub assign_bias: Array2<f64>,
    /// `d × d′`
    pub node_weight: Array2<f64>,
    /// `d′ × 1`
    pub node_vector: Array2<f64>,
    /// `d × d′`
    pub edge_weight: Array2<f64>,
    /// `2d′ × 1`
    pub edge_vector: Array2<f64>,
}

impl PoolParams {
    pub fn clusters(&self) -> usize {
        self.assign_proj.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d_att = self.node_weight.ncols();
        let d_edge = self.edge_weight.ncols();
        if d_att == 0 || d_edge == 0 {
            return Err(Error::Config("attention width must be positive".into()));
        }
        if self.node_vector.dim() != (d_att, 1) {
            return Err(Error::dim(
                "node attention vector",
                &[d_att, 1],
                &[self.node_vector.nrows(), self.node_vector.ncols()],
            ));
        }
        if self.edge_vector.dim() != (2 * d_edge, 1) {
            return Err(Error::dim(
                "edge attention vector",
                &[2 * d_edge, 1],
                &[self.edge_vector.nrows(), self.edge_vector.ncols()],
            ));
        }
        if self.assign_bias.dim() != (1, self.clusters()) {
            return Err(Error::dim(
                "assignment bias",
                &[1, self.clusters()],
                &[self.assign_bias.nrows(), self.assign_bias.ncols()],
            ));
        }
        Ok(())
    }

    /// Records every field on the tape.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> PoolVars {
        let mut leaf = |a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        PoolVars {
            assign: self.assign.weights.iter().map(&mut leaf).collect(),
            assign_proj: leaf(&self.assign_proj),
            assign_bias: leaf(&self.assign_bias),
            node_weight: leaf(&self.node_weight),
            node_vector: leaf(&self.node_vector),
            edge_weight: leaf(&self.edge_weight),
            edge_vector: leaf(&self.edge_vector),
        }
    }
}

/// Pooling parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct PoolVars {
    pub assign: Vec<Var>,
    pub assign_proj: Var,
    pub assign_bias: Var,
    pub node_weight: Var,
    pub node_vector: Var,
    pub edge_weight: Var,
    pub edge_vector: Var,
}

/// Assignment and attention values of one pooling step.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentBundle {
    /// `N × K` row-stochastic.
    pub s: Array2<f64>,
    /// `N × K` one-hot rows; `None` in soft mode.
    pub s_hard: Option<Array2<f64>>,
    /// Per-node weights; `None` in soft mode.
    pub alpha: Option<Vec<f64>>,
    /// `N × N` edge attention; `None` when edge attention is off.
    pub edge: Option<Array2<f64>>,
    /// Cluster of each real node under the hard assignment.
    pub cluster_of: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct BundleVars {
    pub s: Var,
    pub s_hard: Option<Var>,
    pub alpha: Option<Var>,
    pub edge: Option<Var>,
    pub cluster_of: Vec<Option<usize>>,
}

impl BundleVars {
    pub fn values(&self, tape: &Tape) -> AssignmentBundle {
        AssignmentBundle {
            s: tape.value(self.s).clone(),
            s_hard: self.s_hard.map(|v| tape.value(v).clone()),
            alpha: self.alpha.map(|v| tape.value(v).iter().copied().collect()),
            edge: self.edge.map(|v| tape.value(v).clone()),
            cluster_of: self.cluster_of.clone(),
        }
    }
}

/// Output of a pooling step.
#[derive(Debug, Clone)]
pub struct PoolOutput {
    /// `K × d` coarsened features.
    pub x_next: Var,
    /// `K × K` coarsened adjacency.
    pub a_next: Var,
    pub bundle: BundleVars,
    /// Clusters holding at least one real node.
    pub next_mask: Vec<bool>,
}

fn check_mask(tape: &Tape, v: Var, mask: &[bool]) -> Result<()> {
    let n = tape.shape(v).0;
    if mask.len() != n {
        return Err(Error::dim("node mask", &[n], &[mask.len()]));
    }
    Ok(())
}

/// Zeroes the rows of `v` whose mask entry is false.
pub fn mask_rows(tape: &mut Tape, v: Var, mask: &[bool]) -> Result<Var> {
    check_mask(tape, v, mask)?;
    if mask.iter().all(|&m| m) {
        return Ok(v);
    }
    let (n, c) = tape.shape(v);
    let m = Array2::from_shape_fn((n, c), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
    let m = tape.constant(m);
    tape.hadamard(v, m)
}

/// `S = softmax_rows(MDGNN_pool(A, X) · P + b)`.
pub fn soft_assignment(tape: &mut Tape, topologies: &[Var], x: Var, params: &PoolVars) -> Result<Var> {
    let h = md_gnn(tape, topologies, x, &params.assign)?;
    assignment_from_embedding(tape, h, params)
}

/// Cluster logits and softmax from an already computed assignment-network output.
pub fn assignment_from_embedding(tape: &mut Tape, h: Var, params: &PoolVars) -> Result<Var> {
    let logits = tape.linear(h, params.assign_proj, params.assign_bias)?;
    Ok(tape.softmax_rows(logits))
}

/// Hard one-hot assignment and the cluster of each real node.
pub fn harden(
    tape: &mut Tape,
    s: Var,
    mask: &[bool],
    rule: HardGradient,
    frozen: Option<&FrozenAssignment>,
) -> Result<(Var, Vec<Option<usize>>)> {
    check_mask(tape, s, mask)?;
    let hard = match frozen {
        Some(f) => {
            if f.hard.dim() != tape.shape(s) {
                return Err(Error::dim(
                    "frozen assignment",
                    &[f.hard.nrows(), f.hard.ncols()],
                    &[tape.shape(s).0, tape.shape(s).1],
                ));
            }
            f.hard.clone()
        }
        None => onehot_rows(tape.value(s)),
    };
    let cluster_of = (0..hard.nrows())
        .map(|i| {
            mask[i]
                .then(|| hard.row(i).iter().position(|&v| v == 1.0))
                .flatten()
        })
        .collect();
    let s_hard = match (rule, frozen) {
        (HardGradient::StopGradient, _) => tape.constant(hard),
        (HardGradient::StraightThrough, None) => tape.pass_through(s, hard)?,
        (HardGradient::StraightThrough, Some(f)) => {
            let value = &hard + &(tape.value(s) - &f.soft);
            tape.pass_through(s, value)?
        }
    };
    Ok((s_hard, cluster_of))
}

/// `α = softmax_p(a_mᵀ leaky_relu(W_mᵀ z_i))`, one score per node for all
/// nodes at once, normalized within clusters. Unassigned nodes get 0.
pub fn node_attention(
    tape: &mut Tape,
    z: Var,
    cluster_of: &[Option<usize>],
    node_weight: Var,
    node_vector: Var,
) -> Result<Var> {
    let hidden = tape.matmul(z, node_weight)?;
    let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE);
    let scores = tape.matmul(hidden, node_vector)?;
    tape.grouped_softmax(scores, cluster_of.to_vec())
}

/// `α_i = 1/|p|` for every node `i` of cluster `p`.
pub fn uniform_weights(tape: &mut Tape, cluster_of: &[Option<usize>]) -> Var {
    let k = cluster_of.iter().flatten().max().map_or(0, |m| m + 1);
    let mut size = vec![0usize; k];
    for p in cluster_of.iter().flatten() {
        size[*p] += 1;
    }
    let alpha = Array2::from_shape_fn((cluster_of.len(), 1), |(i, _)| {
        cluster_of[i].map_or(0.0, |p| 1.0 / size[p] as f64)
    });
    tape.constant(alpha)
}

/// `X' = S_Hᵀ diag(α) Z`.
pub fn pool_features(tape: &mut Tape, z: Var, alpha: Var, s_hard: Var) -> Result<Var> {
    let weighted = tape.scale_rows(z, alpha)?;
    let st = tape.transpose(s_hard);
    tape.matmul(st, weighted)
}

/// Softmax groups of the existing edges, one per ordered cluster pair.
pub fn edge_groups(adjacency: &Array2<f64>, cluster_of: &[Option<usize>], clusters: usize) -> Vec<Option<usize>> {
    let n = adjacency.nrows();
    let mut groups = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let g = match (cluster_of[i], cluster_of[j]) {
                (Some(p), Some(q)) if adjacency[[i, j]] > REACH_TOL => Some(p * clusters + q),
                _ => None,
            };
            groups.push(g);
        }
    }
    groups
}

/// Edge attention `E`: for each edge `(i, j)`,
/// `s_ij = leaky_relu(a_eᵀ [W_eᵀ z_i ‖ W_eᵀ z_j])`, softmax-normalized over the
/// edges joining cluster(i) to cluster(j). Non-edges get 0. Edges are read
/// from `support` when given, else from the values of `adjacency`.
///
/// `a_eᵀ [u ‖ v]` splits as `a_1ᵀ u + a_2ᵀ v`, so all scores come from two
/// projections and an outer sum.
#[allow(clippy::too_many_arguments)]
pub fn edge_attention(
    tape: &mut Tape,
    z: Var,
    adjacency: Var,
    support: Option<&Array2<f64>>,
    cluster_of: &[Option<usize>],
    clusters: usize,
    edge_weight: Var,
    edge_vector: Var,
) -> Result<Var> {
    let n = tape.shape(z).0;
    let d_edge = tape.shape(edge_weight).1;
    if tape.shape(edge_vector) != (2 * d_edge, 1) {
        let (r, c) = tape.shape(edge_vector);
        return Err(Error::dim("edge attention vector", &[2 * d_edge, 1], &[r, c]));
    }
    let first: Vec<usize> = (0..d_edge).collect();
    let second: Vec<usize> = (d_edge..2 * d_edge).collect();
    let a1 = tape.select(edge_vector, &first, &[0])?;
    let a2 = tape.select(edge_vector, &second, &[0])?;
    let projected = tape.matmul(z, edge_weight)?;
    let u = tape.matmul(projected, a1)?;
    let v = tape.matmul(projected, a2)?;
    let ones_row = tape.constant(Array2::ones((1, n)));
    let ones_col = tape.constant(Array2::ones((n, 1)));
    let vt = tape.transpose(v);
    let left = tape.matmul(u, ones_row)?;
    let right = tape.matmul(ones_col, vt)?;
    let scores = tape.add(left, right)?;
    let scores = tape.leaky_relu(scores, LEAKY_SLOPE);
    let groups = match support {
        Some(s) => edge_groups(s, cluster_of, clusters),
        None => edge_groups(tape.value(adjacency), cluster_of, clusters),
    };
    tape.grouped_softmax(scores, groups)
}

/// `A' = S_Hᵀ (E ⊙ A) S_H`.
pub fn pool_adjacency(tape: &mut Tape, edge: Var, adjacency: Var, s_hard: Var) -> Result<Var> {
    let weighted = tape.hadamard(edge, adjacency)?;
    cluster_sum(tape, weighted, s_hard)
}

/// `Sᵀ M S`.
fn cluster_sum(tape: &mut Tape, m: Var, s: Var) -> Result<Var> {
    let st = tape.transpose(s);
    let left = tape.matmul(st, m)?;
    tape.matmul(left, s)
}

/// `X' = Sᵀ Z`.
pub fn diffpool_features(tape: &mut Tape, z: Var, s: Var) -> Result<Var> {
    let st = tape.transpose(s);
    tape.matmul(st, z)
}

/// `A' = Sᵀ A S`.
pub fn diffpool_adjacency(tape: &mut Tape, adjacency: Var, s: Var) -> Result<Var> {
    cluster_sum(tape, adjacency, s)
}

/// Inputs shared by [`coarsen`] and [`pool_layer`].
#[derive(Debug, Clone, Copy)]
pub struct LayerGraph<'a> {
    pub adjacency: Var,
    pub embeddings: Var,
    /// Real (non-padding) nodes.
    pub mask: &'a [bool],
    /// Fixed edge set for the attention softmax groups; `None` reads it from
    /// the adjacency values.
    pub support: Option<&'a Array2<f64>>,
}

/// Coarsens a graph under a given soft assignment `S` (and its hardening, for hard modes).
pub fn coarsen(
    tape: &mut Tape,
    graph: LayerGraph<'_>,
    s: Var,
    hard: Option<(Var, Vec<Option<usize>>)>,
    params: &PoolVars,
    mode: PoolMode,
) -> Result<PoolOutput> {
    let LayerGraph {
        adjacency,
        embeddings: z,
        mask,
        support,
    } = graph;
    check_mask(tape, z, mask)?;
    let clusters = tape.shape(s).1;
    let z = mask_rows(tape, z, mask)?;

    if mode == PoolMode::Soft {
        let s_masked = mask_rows(tape, s, mask)?;
        let x_next = diffpool_features(tape, z, s_masked)?;
        let a_next = diffpool_adjacency(tape, adjacency, s_masked)?;
        let any_real = mask.iter().any(|&m| m);
        return Ok(PoolOutput {
            x_next,
            a_next,
            bundle: BundleVars {
                s,
                s_hard: None,
                alpha: None,
                edge: None,
                cluster_of: vec![None; mask.len()],
            },
            next_mask: vec![any_real; clusters],
        });
    }

    let (s_hard, cluster_of) =
        hard.ok_or_else(|| Error::Usage(format!("mode {mode} needs a hard assignment")))?;
    let s_hard_m = mask_rows(tape, s_hard, mask)?;

    let alpha = if mode.node_attention() {
        node_attention(tape, z, &cluster_of, params.node_weight, params.node_vector)?
    } else {
        uniform_weights(tape, &cluster_of)
    };
    let x_next = pool_features(tape, z, alpha, s_hard_m)?;

    let (a_next, edge) = if mode.edge_attention() {
        let e = edge_attention(
            tape,
            z,
            adjacency,
            support,
            &cluster_of,
            clusters,
            params.edge_weight,
            params.edge_vector,
        )?;
        (pool_adjacency(tape, e, adjacency, s_hard_m)?, Some(e))
    } else {
        (cluster_sum(tape, adjacency, s_hard_m)?, None)
    };

    let mut next_mask = vec![false; clusters];
    for p in cluster_of.iter().flatten() {
        next_mask[*p] = true;
    }
    Ok(PoolOutput {
        x_next,
        a_next,
        bundle: BundleVars {
            s,
            s_hard: Some(s_hard),
            alpha: Some(alpha),
            edge,
            cluster_of,
        },
        next_mask,
    })
}

/// Soft assignment, hardening and coarsening in one step.
///
/// `topologies` are the normalized multi-distance topologies of `graph.adjacency`
/// and `features` the layer input `X` used by the assignment network.
#[allow(clippy::too_many_arguments)]
pub fn pool_layer(
    tape: &mut Tape,
    graph: LayerGraph<'_>,
    topologies: &[Var],
    features: Var,
    params: &PoolVars,
    mode: PoolMode,
    rule: HardGradient,
    frozen: Option<&FrozenAssignment>,
) -> Result<PoolOutput> {
    let s = soft_assignment(tape, topologies, features, params)?;
    pool_from_assignment(tape, graph, s, params, mode, rule, frozen)
}

/// [`pool_layer`] after the softmax: hardens `s` when needed and coarsens.
pub fn pool_from_assignment(
    tape: &mut Tape,
    graph: LayerGraph<'_>,
    s: Var,
    params: &PoolVars,
    mode: PoolMode,
    rule: HardGradient,
    frozen: Option<&FrozenAssignment>,
) -> Result<PoolOutput> {
    let hard = if mode.is_hard() {
        Some(harden(tape, s, graph.mask, rule, frozen)?)
    } else {
        None
    };
    coarsen(tape, graph, s, hard, params, mode)
}
