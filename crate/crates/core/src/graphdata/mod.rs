//! Graph collections, node features and dense padded batches.

mod synthetic;
mod tu;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use synthetic::{complete, cycle, erdos_renyi, path, star};
pub use tu::{parse_tu_dataset, write_tu_dataset};

use crate::error::{Error, Result};

/// Default padded size of a graph.
pub const DEFAULT_N_MAX: usize = 512;

/// Undirected simple graph with node features and a class label.
///
/// The adjacency is held as a sorted, deduplicated edge list `(i, j)` with
/// `i < j`; [`Graph::dense_adjacency`] materializes the symmetric 0/1 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    pub node_features: Array2<f64>,
    pub label: usize,
    pub node_labels: Option<Vec<i64>>,
}

impl Graph {
    /// Builds a graph from possibly directed, duplicated edge pairs. Self-loops are dropped.
    pub fn new<I>(node_count: usize, edges: I, label: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::Data(format!(
                    "edge ({i}, {j}) out of range for {node_count} nodes"
                )));
            }
            if i != j {
                set.insert((i.min(j), i.max(j)));
            }
        }
        Ok(Self {
            node_count,
            edges: set.into_iter().collect(),
            node_features: Array2::zeros((node_count, 0)),
            label,
            node_labels: None,
        })
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.node_count {
            return Err(Error::dim(
                "with_features",
                &[self.node_count],
                &[features.nrows(), features.ncols()],
            ));
        }
        self.node_features = features;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn dense_adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.node_count, self.node_count));
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    /// Keeps the first `n_max` nodes and the edges among them.
    pub fn truncated(&self, n_max: usize) -> Graph {
        if self.node_count <= n_max {
            return self.clone();
        }
        Graph {
            node_count: n_max,
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|&(_, j)| j < n_max)
                .collect(),
            node_features: self.node_features.slice(s![..n_max, ..]).to_owned(),
            label: self.label,
            node_labels: self.node_labels.as_ref().map(|l| l[..n_max].to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphCollection {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Original label value of each class index, in sorted order.
    pub class_values: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollectionStats {
    pub graphs: usize,
    pub classes: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub max_nodes: usize,
}

impl GraphCollection {
    /// Wraps graphs whose labels are already contiguous class indices.
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let num_classes = graphs.iter().map(|g| g.label + 1).max().unwrap_or(0);
        let feature_dim = graphs.first().map_or(0, Graph::feature_dim);
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != feature_dim) {
            return Err(Error::Data(format!(
                "feature_dim {} differs from collection feature_dim {feature_dim}",
                g.feature_dim()
            )));
        }
        Ok(Self {
            name: name.into(),
            graphs,
            num_classes,
            feature_dim,
            class_values: (0..num_classes as i64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn stats(&self) -> CollectionStats {
        let n = self.graphs.len().max(1) as f64;
        CollectionStats {
            graphs: self.graphs.len(),
            classes: self.num_classes,
            mean_nodes: self.graphs.iter().map(|g| g.node_count() as f64).sum::<f64>() / n,
            mean_edges: self.graphs.iter().map(|g| g.edge_count() as f64).sum::<f64>() / n,
            max_nodes: self.graphs.iter().map(Graph::node_count).max().unwrap_or(0),
        }
    }

    /// Subset in the given order.
    pub fn subset(&self, ids: &[usize]) -> GraphCollection {
        GraphCollection {
            name: self.name.clone(),
            graphs: ids.iter().map(|&i| self.graphs[i].clone()).collect(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            class_values: self.class_values.clone(),
        }
    }

    /// Checks the invariants training relies on.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, found {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Data("collection has no node features".into()));
        }
        Ok(())
    }
}

/// One-hot node degrees, capped: `feature_dim = max_degree_cap + 1`.
pub fn derive_degree_features(collection: &GraphCollection, max_degree_cap: usize) -> GraphCollection {
    let mut out = collection.clone();
    for g in &mut out.graphs {
        let mut x = Array2::zeros((g.node_count(), max_degree_cap + 1));
        for (i, d) in g.degrees().into_iter().enumerate() {
            x[[i, d.min(max_degree_cap)]] = 1.0;
        }
        g.node_features = x;
    }
    out.feature_dim = max_degree_cap + 1;
    out
}

/// One-hot encoding of integer node labels over the collection's label alphabet.
pub fn one_hot_label_features(collection: &GraphCollection) -> Result<GraphCollection> {
    let alphabet: BTreeSet<i64> = collection
        .graphs
        .iter()
        .filter_map(|g| g.node_labels.as_ref())
        .flatten()
        .copied()
        .collect();
    let index: BTreeMap<i64, usize> = alphabet.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut out = collection.clone();
    for (gi, g) in out.graphs.iter_mut().enumerate() {
        let labels = g
            .node_labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("graph {gi} has no node labels")))?;
        let mut x = Array2::zeros((g.node_count(), index.len()));
        for (i, l) in labels.iter().enumerate() {
            x[[i, index[l]]] = 1.0;
        }
        g.node_features = x;
    }
    out.feature_dim = index.len();
    Ok(out)
}

/// Node labels when every graph has them, otherwise capped degrees.
pub fn default_features(collection: &GraphCollection, max_degree_cap: usize) -> Result<GraphCollection> {
    if !collection.is_empty() && collection.graphs.iter().all(|g| g.node_labels.is_some()) {
        one_hot_label_features(collection)
    } else {
        Ok(derive_degree_features(collection, max_degree_cap))
    }
}

/// Dense padded batch. Entries beyond each graph's node count are zero.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `B × N_max × d₀`
    pub features: Array3<f64>,
    /// `B × N_max × N_max`
    pub adjacency: Array3<f64>,
    /// `B × N_max`, 1 for real nodes.
    pub node_mask: Array2<f64>,
    pub labels: Vec<usize>,
    /// Index of each member in the source collection.
    pub graph_ids: Vec<usize>,
}

impl GraphBatch {
    pub fn assemble(collection: &GraphCollection, ids: &[usize], n_max: usize) -> Result<Self> {
        if n_max < 1 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        let b = ids.len();
        let d = collection.feature_dim;
        let mut features = Array3::zeros((b, n_max, d));
        let mut adjacency = Array3::zeros((b, n_max, n_max));
        let mut node_mask = Array2::zeros((b, n_max));
        let mut labels = Vec::with_capacity(b);
        for (k, &id) in ids.iter().enumerate() {
            let g = collection.graphs[id].truncated(n_max);
            let n = g.node_count();
            features.slice_mut(s![k, ..n, ..]).assign(&g.node_features);
            for &(i, j) in g.edges() {
                adjacency[[k, i, j]] = 1.0;
                adjacency[[k, j, i]] = 1.0;
            }
            node_mask.slice_mut(s![k, ..n]).fill(1.0);
            labels.push(g.label);
        }
        Ok(Self {
            features,
            adjacency,
            node_mask,
            labels,
            graph_ids: ids.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.node_mask.ncols()
    }

    pub fn node_count(&self, k: usize) -> usize {
        self.node_mask.row(k).iter().filter(|&&m| m > 0.0).count()
    }

    /// Features and adjacency of member `k` restricted to its real nodes.
    pub fn compact(&self, k: usize) -> (Array2<f64>, Array2<f64>) {
        let n = self.node_count(k);
        (
            self.features.slice(s![k, ..n, ..]).to_owned(),
            self.adjacency.slice(s![k, ..n, ..n]).to_owned(),
        )
    }
}

/// Partitions `0..len` into consecutive batches, optionally after a seeded shuffle.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Padded batches over the whole collection. Graphs larger than `n_max` keep their first `n_max` nodes.
pub fn make_batches(
    collection: &GraphCollection,
    batch_size: usize,
    n_max: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<GraphBatch>> {
    if n_max < 1 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    batch_indices(collection.len(), batch_size, shuffle_seed)?
        .iter()
        .map(|ids| GraphBatch::assemble(collection, ids, n_max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn toy_collection(n: usize) -> GraphCollection {
        let graphs = (0..n)
            .map(|k| cycle(3 + k % 4, k % 2).unwrap())
            .collect();
        derive_degree_features(&GraphCollection::new("toy", graphs).unwrap(), 4)
    }

    #[test]
    fn degree_features_of_triangle() {
        let c = GraphCollection::new("t", vec![cycle(3, 0).unwrap()]).unwrap();
        let x = &derive_degree_features(&c, 5).graphs[0].node_features;
        assert_eq!(x.ncols(), 6);
        for row in x.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn degree_features_isolated_and_capped() {
        let isolated = Graph::new(1, [], 0).unwrap();
        let c = GraphCollection::new("t", vec![isolated, star(4, 1).unwrap()]).unwrap();
        let five = derive_degree_features(&c, 5);
        assert_eq!(five.graphs[0].node_features.row(0)[0], 1.0);
        let three = derive_degree_features(&c, 3);
        // centre has degree 4 > cap
        assert_eq!(three.graphs[1].node_features.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(three.feature_dim, 4);
    }

    #[test]
    fn label_one_hot() {
        let mut g = path(3, 0).unwrap();
        g.node_labels = Some(vec![0, 1, 0]);
        let c = one_hot_label_features(&GraphCollection::new("t", vec![g]).unwrap()).unwrap();
        assert_eq!(c.graphs[0].node_features, array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);

        let mut g = path(2, 0).unwrap();
        g.node_labels = Some(vec![7, 7]);
        let c = one_hot_label_features(&GraphCollection::new("t", vec![g]).unwrap()).unwrap();
        assert_eq!(c.graphs[0].node_features, array![[1.0], [1.0]]);
    }

    #[test]
    fn batch_sizes() {
        let batches = make_batches(&toy_collection(10), 4, 8, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(GraphBatch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn padding_rows_are_zero() {
        let c = derive_degree_features(
            &GraphCollection::new("t", vec![path(3, 0).unwrap()]).unwrap(),
            3,
        );
        let b = &make_batches(&c, 1, 5, None).unwrap()[0];
        assert_eq!(b.node_mask.row(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        for r in 3..5 {
            assert!(b.adjacency.slice(s![0, r, ..]).iter().all(|&v| v == 0.0));
            assert!(b.adjacency.slice(s![0, .., r]).iter().all(|&v| v == 0.0));
            assert!(b.features.slice(s![0, r, ..]).iter().all(|&v| v == 0.0));
        }
        let (x, a) = b.compact(0);
        assert_eq!(a, c.graphs[0].dense_adjacency());
        assert_eq!(x, c.graphs[0].node_features);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let c = toy_collection(13);
        let ids = |seed| {
            make_batches(&c, 3, 8, Some(seed))
                .unwrap()
                .into_iter()
                .flat_map(|b| b.graph_ids)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(5), ids(5));
        assert_ne!(ids(5), ids(6));
    }

    #[test]
    fn oversized_graphs_truncate() {
        let c = derive_degree_features(&GraphCollection::new("t", vec![cycle(9, 0).unwrap()]).unwrap(), 2);
        let b = &make_batches(&c, 1, 4, None).unwrap()[0];
        assert_eq!(b.node_count(0), 4);
        // path 0-1-2-3 remains of the 9-cycle
        let (_, a) = b.compact(0);
        assert_eq!(a.sum_axis(Axis(1)).to_vec(), vec![1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_n_max_is_config_error() {
        assert!(matches!(
            make_batches(&toy_collection(2), 1, 0, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn self_loops_and_duplicates_are_dropped() {
        let g = Graph::new(3, [(0, 1), (1, 0), (2, 2), (1, 2)], 0).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        let a = g.dense_adjacency();
        assert_eq!(a, a.t());
        assert!(a.diag().iter().all(|&v| v == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn padding_is_masked(seed in 0u64..500, n_max in 2usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let graphs = (0..5)
                    .map(|k| erdos_renyi(3 + (seed as usize + k) % 10, 0.4, k % 2, &mut rng))
                    .collect();
                let c = derive_degree_features(&GraphCollection::new("p", graphs).unwrap(), 6);
                for b in make_batches(&c, 2, n_max, Some(seed)).unwrap() {
                    for k in 0..b.len() {
                        let n = c.graphs[b.graph_ids[k]].node_count().min(n_max);
                        prop_assert_eq!(b.node_count(k), n);
                        for r in 0..n_max {
                            if b.node_mask[[k, r]] == 0.0 {
                                prop_assert!(b.features.slice(s![k, r, ..]).iter().all(|&v| v == 0.0));
                                prop_assert!(b.adjacency.slice(s![k, r, ..]).iter().all(|&v| v == 0.0));
                            }
                        }
                    }
                }
            }
        }
    }
}
