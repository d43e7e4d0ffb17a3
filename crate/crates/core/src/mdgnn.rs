//! Multi-distance graph convolution.
//!
//! For hops `h = 0..=H` the adjacency power `A^h` is masked down to node pairs
//! whose shortest walk has length exactly `h`, giving disjoint topologies
//! `T_h = U_h ⊙ A^h`. One GCN runs per topology and the outputs are concatenated
//! column-wise.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numerics::{row_normalize_guarded, Tape, Var};

/// `h ∈ {0..5}`: six convolutions per multi-distance layer.
pub const DEFAULT_HOPS: usize = 5;

/// Entries of `A^h` above this count as reachable.
pub const REACH_TOL: f64 = 1e-12;

/// `A^0 = I, A^1, ..., A^H` with exact walk counts.
pub fn adjacency_powers(adjacency: &Array2<f64>, hops: usize) -> Vec<Array2<f64>> {
    let n = adjacency.nrows();
    let mut out = Vec::with_capacity(hops + 1);
    out.push(Array2::eye(n));
    for h in 1..=hops {
        let next = if h == 1 {
            adjacency.clone()
        } else {
            out[h - 1].dot(adjacency)
        };
        out.push(next);
    }
    out
}

fn binarize(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| if v > REACH_TOL { 1.0 } else { 0.0 })
}

/// `R_h(i,j) = 1` iff `(A^h)(i,j) > 0`, for `h = 0..=hops`.
pub fn reachability_matrices(adjacency: &Array2<f64>, hops: usize) -> Vec<Array2<f64>> {
    adjacency_powers(adjacency, hops).iter().map(binarize).collect()
}

/// `U_h = clip(R_h - Σ_{x<h} R_x, 0, 1)`: `U_h(i,j) = 1` iff the shortest walk
/// from `i` to `j` has length exactly `h`.
pub fn exact_distance_masks(reach: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(reach.len());
    let Some(first) = reach.first() else {
        return out;
    };
    let mut covered = Array2::<f64>::zeros(first.dim());
    for r in reach {
        out.push((r - &covered).mapv(|v| v.clamp(0.0, 1.0)));
        covered += r;
    }
    out
}

/// Masked walk-count topologies `T_0..T_H` of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySet {
    pub topologies: Vec<Array2<f64>>,
    pub hop_count: usize,
}

impl TopologySet {
    pub fn from_adjacency(adjacency: &Array2<f64>, hops: usize) -> Self {
        let powers = adjacency_powers(adjacency, hops);
        let masks = exact_distance_masks(&powers.iter().map(binarize).collect::<Vec<_>>());
        Self {
            topologies: masks.iter().zip(&powers).map(|(u, p)| u * p).collect(),
            hop_count: hops,
        }
    }

    pub fn node_count(&self) -> usize {
        self.topologies.first().map_or(0, Array2::nrows)
    }

    /// Row-normalized topologies fed to the GCNs.
    pub fn normalized(&self) -> Vec<Array2<f64>> {
        self.topologies.iter().map(row_normalize_guarded).collect()
    }
}

/// `T_h = U_h ⊙ A^h` for masks computed from the same adjacency.
pub fn masked_topologies(masks: &[Array2<f64>], adjacency: &Array2<f64>, hops: usize) -> Result<TopologySet> {
    if masks.len() != hops + 1 {
        return Err(Error::Config(format!(
            "{} masks for {} hops",
            masks.len(),
            hops
        )));
    }
    let powers = adjacency_powers(adjacency, hops);
    let mut topologies = Vec::with_capacity(hops + 1);
    for (u, p) in masks.iter().zip(&powers) {
        if u.dim() != p.dim() {
            return Err(Error::dim(
                "masked_topologies",
                &[u.nrows(), u.ncols()],
                &[p.nrows(), p.ncols()],
            ));
        }
        topologies.push(u * p);
    }
    Ok(TopologySet {
        topologies,
        hop_count: hops,
    })
}

/// Breadth-first distances; `None` for unreachable pairs.
pub fn bfs_distances(adjacency: &Array2<f64>) -> Vec<Vec<Option<usize>>> {
    let n = adjacency.nrows();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| adjacency[[i, j]] > REACH_TOL).collect())
        .collect();
    (0..n)
        .map(|src| {
            let mut dist = vec![None; n];
            dist[src] = Some(0);
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                let du = dist[u].expect("queued nodes have a distance");
                for &v in &neighbours[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(du + 1);
                        queue.push_back(v);
                    }
                }
            }
            dist
        })
        .collect()
}

/// Per-hop GCN weights `W_0..W_H`, each `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Array2<f64>>,
}

impl GcnParams {
    pub fn d_in(&self) -> usize {
        self.weights.first().map_or(0, Array2::nrows)
    }

    pub fn d_out(&self) -> usize {
        self.weights.first().map_or(0, Array2::ncols)
    }
}

/// Records the row-normalized layer-0 topologies as constants.
pub fn constant_topologies(tape: &mut Tape, set: &TopologySet) -> Vec<Var> {
    set.normalized().into_iter().map(|t| tape.constant(t)).collect()
}

/// `U_0..U_H` of one adjacency.
pub fn distance_masks(adjacency: &Array2<f64>, hops: usize) -> Vec<Array2<f64>> {
    exact_distance_masks(&reachability_matrices(adjacency, hops))
}

/// Differentiable topologies of a real-valued adjacency already on the tape.
///
/// Masks are read from the forward values and held constant; walk counts and
/// row normalization stay on the tape.
pub fn tape_topologies(tape: &mut Tape, adjacency: Var, hops: usize) -> Result<Vec<Var>> {
    tape_topologies_with_masks(tape, adjacency, hops, None)
}

/// [`tape_topologies`] with the distance masks supplied by the caller, e.g.
/// masks frozen at another parameter point.
pub fn tape_topologies_with_masks(
    tape: &mut Tape,
    adjacency: Var,
    hops: usize,
    masks: Option<&[Array2<f64>]>,
) -> Result<Vec<Var>> {
    let (n, m) = tape.shape(adjacency);
    if n != m {
        return Err(Error::dim("tape_topologies", &[n, m], &[n, n]));
    }
    if let Some(masks) = masks {
        if masks.len() != hops + 1 || masks.iter().any(|u| u.dim() != (n, n)) {
            return Err(Error::Config(format!(
                "expected {} distance masks of size {n}",
                hops + 1
            )));
        }
    }
    let identity = tape.constant(Array2::eye(n));
    let mut powers = vec![identity];
    for h in 1..=hops {
        let next = if h == 1 {
            adjacency
        } else {
            tape.matmul(powers[h - 1], adjacency)?
        };
        powers.push(next);
    }
    let masks = match masks {
        Some(m) => m.to_vec(),
        None => {
            let reach: Vec<Array2<f64>> = powers.iter().map(|&p| binarize(tape.value(p))).collect();
            exact_distance_masks(&reach)
        }
    };
    let mut out = Vec::with_capacity(hops + 1);
    for (h, (mask, power)) in masks.into_iter().zip(powers).enumerate() {
        if h == 0 {
            out.push(power);
            continue;
        }
        let mask = tape.constant(mask);
        let t = tape.hadamard(mask, power)?;
        out.push(tape.row_normalize(t));
    }
    Ok(out)
}

/// `concat_h relu(T̂_h · X · W_h)` on the tape.
pub fn md_gnn(tape: &mut Tape, topologies: &[Var], x: Var, weights: &[Var]) -> Result<Var> {
    if topologies.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} topologies for {} weight matrices",
            topologies.len(),
            weights.len()
        )));
    }
    let d_in = tape.shape(x).1;
    let mut parts = Vec::with_capacity(weights.len());
    for (h, (&t, &w)) in topologies.iter().zip(weights).enumerate() {
        let expected = tape.shape(w).0;
        if expected != d_in {
            return Err(Error::HopDimension {
                hop: h,
                expected,
                found: d_in,
            });
        }
        let xw = tape.matmul(x, w)?;
        // T̂_0 is the identity.
        let msg = if h == 0 { xw } else { tape.matmul(t, xw)? };
        parts.push(tape.relu(msg));
    }
    tape.concat_cols(&parts)
}

/// Value-only multi-distance forward pass.
pub fn md_gnn_forward(topologies: &TopologySet, x: &Array2<f64>, params: &GcnParams) -> Result<Array2<f64>> {
    if params.weights.len() != topologies.topologies.len() {
        return Err(Error::Config(format!(
            "{} weight matrices for {} topologies",
            params.weights.len(),
            topologies.topologies.len()
        )));
    }
    let mut tape = Tape::new();
    let t = constant_topologies(&mut tape, topologies);
    let xv = tape.constant(x.clone());
    let w: Vec<Var> = params.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let z = md_gnn(&mut tape, &t, xv, &w)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::{complete, cycle, erdos_renyi, path};
    use crate::numerics::{finite_difference_check_many, GradCheckOptions};
    use ndarray::{array, s};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn path_reachability_counts_walks_of_exact_length() {
        let a = path(3, 0).unwrap().dense_adjacency();
        let r = reachability_matrices(&a, 2);
        assert_eq!(r[0], Array2::<f64>::eye(3));
        // 1→2→3 and 1→2→1
        assert_eq!(r[2][[0, 2]], 1.0);
        assert_eq!(r[2][[0, 0]], 1.0);
    }

    #[test]
    fn empty_graph_reaches_nothing() {
        let r = reachability_matrices(&Array2::<f64>::zeros((4, 4)), 3);
        assert_eq!(r[0], Array2::<f64>::eye(4));
        for m in &r[1..] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn path_masks() {
        let a = path(3, 0).unwrap().dense_adjacency();
        let u = exact_distance_masks(&reachability_matrices(&a, 2));
        assert_eq!(u[0], Array2::<f64>::eye(3));
        assert_eq!(u[2][[0, 0]], 0.0);
        assert_eq!(u[2][[0, 2]], 1.0);
    }

    #[test]
    fn four_cycle_matches_bfs() {
        let a = cycle(4, 0).unwrap().dense_adjacency();
        let u = exact_distance_masks(&reachability_matrices(&a, 3));
        let d = bfs_distances(&a);
        for (h, m) in u.iter().enumerate() {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(m[[i, j]] == 1.0, d[i][j] == Some(h), "h={h} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn topology_examples() {
        let a = path(3, 0).unwrap().dense_adjacency();
        let t = TopologySet::from_adjacency(&a, 2);
        assert_eq!(t.topologies[0], Array2::<f64>::eye(3));
        assert_eq!(t.topologies[2][[0, 2]], 1.0);

        let k3 = complete(3, 0).unwrap().dense_adjacency();
        let t = TopologySet::from_adjacency(&k3, 2);
        assert!(t.topologies[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_topologies_agrees_with_from_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = erdos_renyi(9, 0.3, 0, &mut rng).dense_adjacency();
        let u = exact_distance_masks(&reachability_matrices(&a, 4));
        assert_eq!(masked_topologies(&u, &a, 4).unwrap(), TopologySet::from_adjacency(&a, 4));
        assert!(masked_topologies(&u, &a, 3).is_err());
    }

    #[test]
    fn walk_counts_survive_masking() {
        // In C6 nodes 0 and 2 are joined by exactly one walk of length 2; 0 and 3 by two of length 3.
        let a = cycle(6, 0).unwrap().dense_adjacency();
        let t = TopologySet::from_adjacency(&a, 3);
        assert_eq!(t.topologies[2][[0, 2]], 1.0);
        assert_eq!(t.topologies[3][[0, 3]], 2.0);
        assert_eq!(t.topologies[3][[0, 1]], 0.0);
    }

    #[test]
    fn single_hop_is_dense_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = erdos_renyi(5, 0.5, 0, &mut rng).dense_adjacency();
        let x = random(&mut rng, 5, 3);
        let w = random(&mut rng, 3, 4);
        let t = TopologySet::from_adjacency(&a, 0);
        let z = md_gnn_forward(&t, &x, &GcnParams { weights: vec![w.clone()] }).unwrap();
        assert_eq!(z, x.dot(&w).mapv(|v| v.max(0.0)));
    }

    #[test]
    fn zero_features_give_zero_output() {
        let a = cycle(5, 0).unwrap().dense_adjacency();
        let t = TopologySet::from_adjacency(&a, 2);
        let params = GcnParams {
            weights: vec![Array2::ones((3, 2)); 3],
        };
        let z = md_gnn_forward(&t, &Array2::zeros((5, 3)), &params).unwrap();
        assert_eq!(z.dim(), (5, 6));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concatenation_equals_independent_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = erdos_renyi(5, 0.5, 0, &mut rng).dense_adjacency();
        let x = random(&mut rng, 5, 3);
        let weights: Vec<Array2<f64>> = (0..3).map(|_| random(&mut rng, 3, 4)).collect();
        let t = TopologySet::from_adjacency(&a, 2);
        let z = md_gnn_forward(&t, &x, &GcnParams { weights: weights.clone() }).unwrap();
        assert_eq!(z.dim(), (5, 12));
        for (h, w) in weights.iter().enumerate() {
            let t_hat = row_normalize_guarded(&t.topologies[h]);
            let single = t_hat.dot(&x.dot(w)).mapv(|v| v.max(0.0));
            let got = z.slice(s![.., 4 * h..4 * (h + 1)]);
            for (g, e) in got.iter().zip(single.iter()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hop_mismatch_names_hop() {
        let t = TopologySet::from_adjacency(&array![[0.0, 1.0], [1.0, 0.0]], 1);
        let params = GcnParams {
            weights: vec![Array2::zeros((3, 2)), Array2::zeros((4, 2))],
        };
        match md_gnn_forward(&t, &Array2::zeros((2, 3)), &params).unwrap_err() {
            Error::HopDimension { hop, .. } => assert_eq!(hop, 1),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn supports_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = erdos_renyi(12, 0.25, 0, &mut rng).dense_adjacency();
            let u = exact_distance_masks(&reachability_matrices(&a, 5));
            let total = u.iter().fold(Array2::<f64>::zeros((12, 12)), |acc, m| acc + m);
            assert!(total.iter().all(|&v| v <= 1.0));
        }
    }

    #[test]
    fn tape_topologies_match_constant_path_on_binary_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = erdos_renyi(8, 0.35, 0, &mut rng).dense_adjacency();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let on_tape = tape_topologies(&mut tape, av, 4).unwrap();
        let expected = TopologySet::from_adjacency(&a, 4).normalized();
        for (v, e) in on_tape.iter().zip(&expected) {
            assert_eq!(tape.value(*v), e);
        }
    }

    #[test]
    fn md_gnn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = erdos_renyi(6, 0.5, 0, &mut rng).dense_adjacency();
        let topo = TopologySet::from_adjacency(&a, 2);
        let x = random(&mut rng, 6, 3);
        let mut inputs = vec![x];
        inputs.extend((0..3).map(|_| random(&mut rng, 3, 4)));
        let probe = random(&mut rng, 6, 12);
        let report = finite_difference_check_many(
            |t, v| {
                let topo = constant_topologies(t, &topo);
                let z = md_gnn(t, &topo, v[0], &v[1..])?;
                let p = t.constant(probe.clone());
                let zp = t.hadamard(z, p)?;
                Ok(t.sum(zp))
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gradient_through_weighted_adjacency_powers() {
        // Strictly positive off-diagonal weights keep every mask fixed under perturbation.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut a = random(&mut rng, 5, 5).mapv(|v| v.abs() + 0.1);
        a = &a + &a.t();
        a.diag_mut().fill(0.0);
        let x = random(&mut rng, 5, 2);
        let w: Vec<Array2<f64>> = (0..3).map(|_| random(&mut rng, 2, 3)).collect();
        let mut inputs = vec![a];
        inputs.extend(w);
        let probe = random(&mut rng, 5, 9);
        let report = finite_difference_check_many(
            |t, v| {
                let topo = tape_topologies(t, v[0], 2)?;
                let xv = t.constant(x.clone());
                let z = md_gnn(t, &topo, xv, &v[1..])?;
                let p = t.constant(probe.clone());
                let zp = t.hadamard(z, p)?;
                Ok(t.sum(zp))
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn masks_match_bfs(seed in any::<u64>(), n in 1usize..20, p in 0.0f64..0.7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = erdos_renyi(n, p, 0, &mut rng).dense_adjacency();
                let u = exact_distance_masks(&reachability_matrices(&a, DEFAULT_HOPS));
                let d = bfs_distances(&a);
                for (h, m) in u.iter().enumerate() {
                    for i in 0..n {
                        for j in 0..n {
                            prop_assert_eq!(m[[i, j]] == 1.0, d[i][j] == Some(h));
                        }
                    }
                }
            }
        }
    }
}
