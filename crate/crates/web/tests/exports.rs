use serde_json::Value;

use enadpool_web::{distance_masks_json, gradient_check_json, pool_random_graph_json};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn path_masks_follow_distances() {
    let v = parse(distance_masks_json("path", 4, 0.0, 3, 0));
    let u3 = &v["masks"][3];
    assert_eq!(u3[0][3], 1.0);
    assert_eq!(u3[3][0], 1.0);
    assert_eq!(u3[1][3], 0.0);
    assert_eq!(v["bfs"][0][3], 3);
    assert_eq!(v["masks"].as_array().unwrap().len(), 4);
}

#[test]
fn unreachable_pairs_have_null_distance() {
    let v = parse(distance_masks_json("random", 12, 0.0, 2, 1));
    assert!(v["bfs"][0][1].is_null());
    assert_eq!(v["edges"].as_array().unwrap().len(), 0);
}

#[test]
fn bad_arguments_return_an_error_object() {
    assert!(parse(distance_masks_json("torus", 5, 0.0, 2, 0))["error"].is_string());
    assert!(parse(distance_masks_json("path", 0, 0.0, 2, 0))["error"].is_string());
    assert!(parse(pool_random_graph_json(10, 0.3, 11, "NE", 0))["error"].is_string());
    assert!(parse(pool_random_graph_json(10, 0.3, 3, "Q", 0))["error"].is_string());
    assert!(parse(gradient_check_json("nope", 0))["error"].is_string());
}

#[test]
fn pooling_output_is_consistent() {
    let v = parse(pool_random_graph_json(14, 0.3, 4, "NE", 5));
    let k = 4;
    let cluster_of: Vec<usize> = v["cluster_of"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap() as usize).collect();
    assert_eq!(cluster_of.len(), 14);
    let alpha: Vec<f64> = v["node_attention"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    for p in 0..k {
        let members: Vec<usize> = (0..14).filter(|&i| cluster_of[i] == p).collect();
        if !members.is_empty() {
            let total: f64 = members.iter().map(|&i| alpha[i]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(v["pooled_adjacency"].as_array().unwrap().len(), k);
    let soft = parse(pool_random_graph_json(14, 0.3, 4, "soft", 5));
    assert!(soft["node_attention"].is_null() && soft["edge_attention"].is_null());
}

#[test]
fn gradient_check_passes() {
    let v = parse(gradient_check_json("E", 3));
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn random_assignments_use_several_clusters() {
    for seed in 0..10 {
        let v = parse(pool_random_graph_json(16, 0.25, 4, "NE", seed));
        let mut used: Vec<u64> = v["cluster_of"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
        used.sort_unstable();
        used.dedup();
        assert!(used.len() >= 2, "seed {seed}: {used:?}");
    }
}
