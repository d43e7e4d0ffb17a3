//! WebAssembly bindings for the browser demo. Every export returns a JSON
//! string: the result object, or `{"error": "..."}`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use enadpool::graphdata::{cycle, erdos_renyi, path, star, Graph};
use enadpool::mdgnn::{bfs_distances, distance_masks, GcnParams, TopologySet};
use enadpool::model::check::micro_gradient_check;
use enadpool::pool::eval::pool_graph;
use enadpool::pool::PoolParams;
use enadpool::PoolMode;

const MAX_NODES: usize = 64;

fn matrix(m: &Array2<f64>) -> Value {
    Value::from(m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

fn render(result: Result<Value, String>) -> String {
    result.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn check_size(n: usize) -> Result<(), String> {
    if (1..=MAX_NODES).contains(&n) {
        Ok(())
    } else {
        Err(format!("node count {n} outside 1..={MAX_NODES}"))
    }
}

fn build_graph(kind: &str, n: usize, density: f64, seed: u64) -> Result<Graph, String> {
    check_size(n)?;
    let g = match kind {
        "path" => path(n, 0),
        "cycle" => cycle(n, 0),
        "star" => star(n.saturating_sub(1), 0),
        "random" => {
            if !(0.0..=1.0).contains(&density) {
                return Err(format!("edge density {density} outside [0, 1]"));
            }
            Ok(erdos_renyi(n, density, 0, &mut ChaCha8Rng::seed_from_u64(seed)))
        }
        other => return Err(format!("unknown graph kind `{other}`; use path, cycle, star or random")),
    };
    g.map_err(|e| e.to_string())
}

fn edge_list(g: &Graph) -> Value {
    Value::from(g.edges().iter().map(|&(i, j)| vec![i, j]).collect::<Vec<_>>())
}

fn masks_report(kind: &str, n: usize, density: f64, hops: usize, seed: u64) -> Result<Value, String> {
    if hops > 10 {
        return Err(format!("hops {hops} outside 0..=10"));
    }
    let g = build_graph(kind, n, density, seed)?;
    let adjacency = g.dense_adjacency();
    let masks = distance_masks(&adjacency, hops);
    let topologies = TopologySet::from_adjacency(&adjacency, hops).topologies;
    let bfs: Vec<Vec<Option<usize>>> = bfs_distances(&adjacency);
    Ok(json!({
        "nodes": g.node_count(),
        "edges": edge_list(&g),
        "masks": masks.iter().map(matrix).collect::<Vec<_>>(),
        "topologies": topologies.iter().map(matrix).collect::<Vec<_>>(),
        "bfs": bfs,
    }))
}

/// Exact-distance masks `U_0..U_H`, walk-count topologies and BFS distances
/// of a generated graph. `kind` is `path`, `cycle`, `star` or `random`.
#[wasm_bindgen(js_name = distanceMasks)]
pub fn distance_masks_json(kind: &str, nodes: usize, density: f64, hops: usize, seed: u32) -> String {
    render(masks_report(kind, nodes, density, hops, seed.into()))
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

fn pooling_report(nodes: usize, density: f64, clusters: usize, mode: &str, seed: u64) -> Result<Value, String> {
    let mode: PoolMode = mode.parse().map_err(|e: enadpool::Error| e.to_string())?;
    if clusters == 0 || clusters > nodes {
        return Err(format!("cluster count {clusters} outside 1..={nodes}"));
    }
    let g = build_graph("random", nodes, density, seed)?;
    let adjacency = g.dense_adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (d_in, hops, width, d_emb, d_att) = (4, 2, 6, 5, 4);
    let features = random(&mut rng, nodes, d_in);
    let embeddings = random(&mut rng, nodes, d_emb);
    let params = PoolParams {
        assign: GcnParams {
            weights: (0..=hops).map(|_| random(&mut rng, d_in, width)).collect(),
        },
        assign_proj: random(&mut rng, (hops + 1) * width, clusters).mapv(|v| 3.0 * v),
        assign_bias: random(&mut rng, 1, clusters),
        node_weight: random(&mut rng, d_emb, d_att),
        node_vector: random(&mut rng, d_att, 1),
        edge_weight: random(&mut rng, d_emb, d_att),
        edge_vector: random(&mut rng, 2 * d_att, 1),
    };
    let pooled = pool_graph(&adjacency, &features, &embeddings, &params, mode).map_err(|e| e.to_string())?;
    let b = &pooled.bundle;
    Ok(json!({
        "nodes": nodes,
        "edges": edge_list(&g),
        "mode": mode.to_string(),
        "clusters": clusters,
        "cluster_of": b.cluster_of,
        "soft_assignment": matrix(&b.s),
        "node_attention": b.alpha,
        "edge_attention": b.edge.as_ref().map(matrix),
        "pooled_adjacency": matrix(&pooled.adjacency),
        "pooled_features": matrix(&pooled.features),
    }))
}

/// One pooling step with random weights on a random graph.
#[wasm_bindgen(js_name = poolRandomGraph)]
pub fn pool_random_graph_json(nodes: usize, density: f64, clusters: usize, mode: &str, seed: u32) -> String {
    render(pooling_report(nodes, density, clusters, mode, seed.into()))
}

fn gradcheck_report(mode: &str, seed: u64) -> Result<Value, String> {
    let mode: PoolMode = mode.parse().map_err(|e: enadpool::Error| e.to_string())?;
    let report = micro_gradient_check(mode, seed, None).map_err(|e| e.to_string())?;
    Ok(json!({
        "mode": mode.to_string(),
        "max_rel_error": report.max_rel_error,
        "coordinates": report.coordinates,
        "pass": report.max_rel_error < 1e-4,
    }))
}

/// Finite-difference check of the small end-to-end model.
#[wasm_bindgen(js_name = gradientCheck)]
pub fn gradient_check_json(mode: &str, seed: u32) -> String {
    render(gradcheck_report(mode, seed.into()))
}
