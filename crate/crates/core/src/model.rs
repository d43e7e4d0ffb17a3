//! The graph classifier: stacked multi-distance GNN + pooling blocks, a sum
//! readout after every block, auxiliary heads on intermediate blocks and a main
//! head on the last one.
//!
//! Graphs are processed one at a time on their real nodes only. After each
//! pooling step the clusters that received no node are dropped, which is
//! equivalent to keeping them as masked rows of a fixed-size layer.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{Graph, GraphBatch, GraphCollection, DEFAULT_N_MAX};
use crate::mdgnn::{distance_masks, md_gnn, tape_topologies_with_masks, TopologySet, DEFAULT_HOPS};
use crate::numerics::{argmax, Tape, Var};
use crate::pool::{
    assignment_from_embedding, pool_from_assignment, AssignmentBundle, BundleVars, FrozenAssignment,
    HardGradient, LayerGraph, PoolMode, PoolVars,
};

pub mod check;

pub const CHECKPOINT_MAGIC: &str = "ENADPOOL-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters. Field names double as configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Graphs are truncated to this many nodes; also sets the cluster counts.
    pub n_max: usize,
    pub pooling_layers: usize,
    pub cluster_ratio: f64,
    /// Output width of each per-hop GCN.
    pub gcn_width: usize,
    pub hops: usize,
    pub mode: PoolMode,
    pub hidden_main: usize,
    pub hidden_aux: usize,
    pub dropout_conv: f64,
    pub dropout_head: f64,
    pub aux_weight: f64,
    pub num_classes: usize,
    pub hard_gradient: HardGradient,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            pooling_layers: 2,
            cluster_ratio: 0.25,
            gcn_width: 32,
            hops: DEFAULT_HOPS,
            mode: PoolMode::NodeEdge,
            hidden_main: 256,
            hidden_aux: 128,
            dropout_conv: 0.25,
            dropout_head: 0.5,
            aux_weight: 0.2,
            num_classes: 2,
            hard_gradient: HardGradient::StraightThrough,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_max == 0 {
            return fail("n_max must be at least 1".into());
        }
        if self.pooling_layers == 0 {
            return fail("pooling_layers must be at least 1".into());
        }
        if !(self.cluster_ratio > 0.0 && self.cluster_ratio <= 1.0) {
            return fail(format!("cluster_ratio {} outside (0, 1]", self.cluster_ratio));
        }
        if self.gcn_width == 0 || self.hidden_main == 0 || self.hidden_aux == 0 {
            return fail("layer widths must be positive".into());
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return fail(format!("aux_weight {} must be a non-negative number", self.aux_weight));
        }
        for (name, rate) in [("dropout_conv", self.dropout_conv), ("dropout_head", self.dropout_head)] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} {rate} outside [0, 1)"));
            }
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes is {}, need at least 2", self.num_classes));
        }
        Ok(())
    }

    /// Cluster count of each pooling layer: `round(n_max · ratio^l)`, at least 1.
    pub fn cluster_counts(&self) -> Vec<usize> {
        (1..=self.pooling_layers)
            .map(|l| {
                let k = (self.n_max as f64 * self.cluster_ratio.powi(l as i32)).round();
                (k as usize).max(1)
            })
            .collect()
    }

    /// Width of the node embeddings and of the pooled features.
    pub fn embedding_width(&self) -> usize {
        (self.hops + 1) * self.gcn_width
    }
}

/// One named parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone)]
struct HeadLayout {
    hidden_w: usize,
    hidden_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    embed: Vec<usize>,
    assign: Vec<usize>,
    proj: usize,
    bias: usize,
    node_weight: usize,
    node_vector: usize,
    edge_weight: usize,
    edge_vector: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<BlockLayout>,
    aux: Vec<HeadLayout>,
    main: HeadLayout,
}

struct LayoutBuilder<'r> {
    params: Vec<Parameter>,
    rng: &'r mut ChaCha8Rng,
}

impl LayoutBuilder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.params.push(Parameter { name, value });
        self.params.len() - 1
    }

    fn bias(&mut self, name: String, cols: usize) -> usize {
        self.params.push(Parameter {
            name,
            value: Array2::zeros((1, cols)),
        });
        self.params.len() - 1
    }

    fn head(&mut self, prefix: &str, d_in: usize, hidden: usize, classes: usize) -> HeadLayout {
        HeadLayout {
            hidden_w: self.weight(format!("{prefix}.hidden.weight"), d_in, hidden),
            hidden_b: self.bias(format!("{prefix}.hidden.bias"), hidden),
            out_w: self.weight(format!("{prefix}.out.weight"), hidden, classes),
            out_b: self.bias(format!("{prefix}.out.bias"), classes),
        }
    }
}

fn build_layout(config: &ModelConfig, feature_dim: usize, rng: &mut ChaCha8Rng) -> (Layout, Vec<Parameter>) {
    let d = config.embedding_width();
    let w = config.gcn_width;
    let mut b = LayoutBuilder {
        params: Vec::new(),
        rng,
    };
    let mut blocks = Vec::new();
    for (l, &k) in config.cluster_counts().iter().enumerate() {
        let d_in = if l == 0 { feature_dim } else { d };
        let p = format!("block{l}");
        let embed = (0..=config.hops)
            .map(|h| b.weight(format!("{p}.embed.hop{h}"), d_in, w))
            .collect();
        let assign = (0..=config.hops)
            .map(|h| b.weight(format!("{p}.assign.hop{h}"), d_in, w))
            .collect();
        blocks.push(BlockLayout {
            embed,
            assign,
            proj: b.weight(format!("{p}.assign.proj"), d, k),
            bias: b.bias(format!("{p}.assign.bias"), k),
            node_weight: b.weight(format!("{p}.node_attention.weight"), d, d),
            node_vector: b.weight(format!("{p}.node_attention.vector"), d, 1),
            edge_weight: b.weight(format!("{p}.edge_attention.weight"), d, d),
            edge_vector: b.weight(format!("{p}.edge_attention.vector"), 2 * d, 1),
        });
    }
    let aux = (0..config.pooling_layers - 1)
        .map(|l| b.head(&format!("aux{l}"), d, config.hidden_aux, config.num_classes))
        .collect();
    let main = b.head("head", d, config.hidden_main, config.num_classes);
    (Layout { blocks, aux, main }, b.params)
}

/// A graph ready for the forward pass: dense adjacency, features and,
/// optionally, the cached first-layer topologies.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub topologies: Option<Vec<Array2<f64>>>,
}

impl GraphInput {
    pub fn new(adjacency: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n || features.nrows() != n {
            return Err(Error::dim(
                "graph input",
                &[n, adjacency.ncols()],
                &[features.nrows(), features.ncols()],
            ));
        }
        if n == 0 {
            return Err(Error::Data("graph without nodes".into()));
        }
        Ok(Self {
            adjacency,
            features,
            topologies: None,
        })
    }

    /// First `n_max` nodes of `graph`.
    pub fn from_graph(graph: &Graph, n_max: usize) -> Result<Self> {
        let g = if graph.node_count() > n_max {
            graph.truncated(n_max)
        } else {
            graph.clone()
        };
        Self::new(g.dense_adjacency(), g.node_features.clone())
    }

    pub fn with_cached_topologies(mut self, hops: usize) -> Self {
        self.topologies = Some(TopologySet::from_adjacency(&self.adjacency, hops).normalized());
        self
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }
}

/// Inputs for every graph of a collection. First-layer topologies are cached
/// while their total size stays under `cache_bytes`.
pub fn prepare_inputs(
    collection: &GraphCollection,
    n_max: usize,
    hops: usize,
    cache_bytes: usize,
) -> Result<Vec<GraphInput>> {
    let mut used = 0usize;
    collection
        .graphs
        .iter()
        .map(|g| {
            let input = GraphInput::from_graph(g, n_max)?;
            let n = input.node_count();
            let cost = (hops + 1) * n * n * std::mem::size_of::<f64>();
            if used + cost <= cache_bytes {
                used += cost;
                Ok(input.with_cached_topologies(hops))
            } else {
                Ok(input)
            }
        })
        .collect()
}

/// Discrete decisions of one pooling layer at a fixed parameter point: the
/// hard assignment, the edge set and the distance masks of the layer input.
/// Replaying them turns the forward pass into a smooth function of the
/// parameters whose derivative is exactly the straight-through gradient.
#[derive(Debug, Clone)]
pub struct FrozenLayer {
    pub assignment: Option<FrozenAssignment>,
    pub support: Array2<f64>,
    pub masks: Vec<Array2<f64>>,
}

/// How a forward pass treats dropout and the discrete decisions.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
    Replay(&'a [FrozenLayer]),
}

/// Tape handles of one graph's forward pass.
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// `1 × C`
    pub main: Var,
    /// One `1 × C` per intermediate block.
    pub aux: Vec<Var>,
    pub bundles: Vec<BundleVars>,
    /// Adjacency fed to each block.
    pub adjacency: Vec<Var>,
}

impl GraphForward {
    /// Captures the discrete decisions for [`Pass::Replay`].
    pub fn freeze(&self, tape: &Tape, hops: usize) -> Vec<FrozenLayer> {
        self.bundles
            .iter()
            .zip(&self.adjacency)
            .map(|(b, &a)| {
                let support = tape.value(a).clone();
                FrozenLayer {
                    assignment: b.s_hard.map(|h| FrozenAssignment {
                        hard: tape.value(h).clone(),
                        soft: tape.value(b.s).clone(),
                    }),
                    masks: distance_masks(&support, hops),
                    support,
                }
            })
            .collect()
    }
}

/// Parameters recorded on a tape, in store order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub vars: Vec<Var>,
}

/// Batch logits and pooling diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × C`
    pub main: Array2<f64>,
    /// One `B × C` matrix per intermediate block.
    pub aux: Vec<Array2<f64>>,
    /// Per graph, per block.
    pub bundles: Vec<Vec<AssignmentBundle>>,
}

/// Extra facts stored alongside a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMetadata {
    pub dataset: Option<String>,
    pub dataset_fingerprint: Option<String>,
    pub fold: Option<usize>,
    pub epoch: Option<usize>,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    /// Degree cap used when node features were derived from degrees.
    pub degree_cap: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    config: ModelConfig,
    feature_dim: usize,
    metadata: CheckpointMetadata,
    params: Vec<StoredParam>,
}

/// Stacks per-graph `1 × C` logits and, per intermediate block, the auxiliary logits.
fn stack_outputs(tape: &mut Tape, outs: &[GraphForward]) -> Result<(Var, Vec<Var>)> {
    let main: Vec<Var> = outs.iter().map(|o| o.main).collect();
    let main = tape.stack_rows(&main)?;
    let blocks = outs.first().map_or(0, |o| o.aux.len());
    let aux = (0..blocks)
        .map(|k| {
            let rows: Vec<Var> = outs.iter().map(|o| o.aux[k]).collect();
            tape.stack_rows(&rows)
        })
        .collect::<Result<_>>()?;
    Ok((main, aux))
}

/// `CE(main) + ω · Σ_k CE(aux_k)`, each cross-entropy averaged over the rows.
pub fn combined_loss(tape: &mut Tape, main: Var, aux: &[Var], labels: &[usize], aux_weight: f64) -> Result<Var> {
    let mut total = tape.softmax_cross_entropy(main, labels)?;
    for &a in aux {
        let ce = tape.softmax_cross_entropy(a, labels)?;
        let ce = tape.scalar_mul(ce, aux_weight);
        total = tape.add(total, ce)?;
    }
    Ok(total)
}

/// [`combined_loss`] on plain logits.
pub fn loss(main: &Array2<f64>, aux: &[Array2<f64>], labels: &[usize], aux_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(main.clone());
    let a: Vec<Var> = aux.iter().map(|x| tape.constant(x.clone())).collect();
    let l = combined_loss(&mut tape, m, &a, labels, aux_weight)?;
    Ok(tape.value(l)[[0, 0]])
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predictions(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| argmax(&r.to_vec()).unwrap_or(0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    feature_dim: usize,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    layout: Layout,
}

impl Model {
    /// Fresh model with weights uniform in `±1/√fan_in` and zero biases.
    pub fn new(config: ModelConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&config, feature_dim, &mut rng);
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self {
            config,
            feature_dim,
            params,
            index,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Names of parameters used only by the auxiliary heads.
    pub fn auxiliary_parameters(&self) -> Vec<&str> {
        self.layout
            .aux
            .iter()
            .flat_map(|h| [h.hidden_w, h.hidden_b, h.out_w, h.out_b])
            .map(|i| self.params[i].name.as_str())
            .collect()
    }

    /// Copies parameter values from another model with the same layout.
    pub fn set_params(&mut self, values: &[Array2<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.dim() != v.dim() {
                return Err(Error::dim("set_params", &[p.value.nrows(), p.value.ncols()], &[v.nrows(), v.ncols()]));
            }
            p.value.assign(v);
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        ModelVars { vars }
    }

    fn pool_vars(&self, block: &BlockLayout, v: &[Var]) -> PoolVars {
        PoolVars {
            assign: block.assign.iter().map(|&i| v[i]).collect(),
            assign_proj: v[block.proj],
            assign_bias: v[block.bias],
            node_weight: v[block.node_weight],
            node_vector: v[block.node_vector],
            edge_weight: v[block.edge_weight],
            edge_vector: v[block.edge_vector],
        }
    }

    fn head(&self, tape: &mut Tape, head: &HeadLayout, v: &[Var], readout: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let hidden = tape.linear(readout, v[head.hidden_w], v[head.hidden_b])?;
        let mut hidden = tape.relu(hidden);
        if let Some(rng) = rng {
            hidden = tape.dropout(hidden, self.config.dropout_head, rng)?;
        }
        tape.linear(hidden, v[head.out_w], v[head.out_b])
    }

    /// Forward pass of one graph on `tape`.
    pub fn forward_graph(&self, tape: &mut Tape, vars: &ModelVars, input: &GraphInput, mut pass: Pass<'_>) -> Result<GraphForward> {
        if input.features.ncols() != self.feature_dim {
            return Err(Error::Config(format!(
                "model expects {} node features, graph has {}",
                self.feature_dim,
                input.features.ncols()
            )));
        }
        if let Pass::Replay(layers) = &pass {
            if layers.len() != self.layout.blocks.len() {
                return Err(Error::Usage(format!(
                    "replay holds {} layers, model has {}",
                    layers.len(),
                    self.layout.blocks.len()
                )));
            }
        }
        let v = &vars.vars;
        let hops = self.config.hops;
        let mut x = tape.constant(input.features.clone());
        let mut a = tape.constant(input.adjacency.clone());
        let mut out = GraphForward {
            main: x,
            aux: Vec::new(),
            bundles: Vec::new(),
            adjacency: Vec::new(),
        };
        let last = self.layout.blocks.len() - 1;
        for (l, block) in self.layout.blocks.iter().enumerate() {
            let frozen = match &pass {
                Pass::Replay(layers) => Some(&layers[l]),
                _ => None,
            };
            let topologies = if l == 0 {
                let cached;
                let tops = match &input.topologies {
                    Some(t) => t,
                    None => {
                        cached = TopologySet::from_adjacency(&input.adjacency, hops).normalized();
                        &cached
                    }
                };
                tops.iter().map(|t| tape.constant(t.clone())).collect()
            } else {
                tape_topologies_with_masks(tape, a, hops, frozen.map(|f| f.masks.as_slice()))?
            };

            let embed: Vec<Var> = block.embed.iter().map(|&i| v[i]).collect();
            let pool = self.pool_vars(block, v);
            let mut z = md_gnn(tape, &topologies, x, &embed)?;
            let mut h = md_gnn(tape, &topologies, x, &pool.assign)?;
            if let Pass::Train(rng) = &mut pass {
                z = tape.dropout(z, self.config.dropout_conv, *rng)?;
                h = tape.dropout(h, self.config.dropout_conv, *rng)?;
            }
            let s = assignment_from_embedding(tape, h, &pool)?;
            let mask = vec![true; tape.shape(x).0];
            let graph = LayerGraph {
                adjacency: a,
                embeddings: z,
                mask: &mask,
                support: frozen.map(|f| &f.support),
            };
            let pooled = pool_from_assignment(
                tape,
                graph,
                s,
                &pool,
                self.config.mode,
                self.config.hard_gradient,
                frozen.and_then(|f| f.assignment.as_ref()),
            )?;
            out.adjacency.push(a);

            let readout = tape.sum_rows(pooled.x_next);
            let rng = match &mut pass {
                Pass::Train(rng) => Some(&mut **rng),
                _ => None,
            };
            if l < last {
                let logits = self.head(tape, &self.layout.aux[l], v, readout, rng)?;
                out.aux.push(logits);
            } else {
                out.main = self.head(tape, &self.layout.main, v, readout, rng)?;
            }

            let keep: Vec<usize> = (0..pooled.next_mask.len()).filter(|&p| pooled.next_mask[p]).collect();
            if keep.len() < pooled.next_mask.len() {
                x = tape.select_rows(pooled.x_next, &keep)?;
                a = tape.select(pooled.a_next, &keep, &keep)?;
            } else {
                x = pooled.x_next;
                a = pooled.a_next;
            }
            out.bundles.push(pooled.bundle);
        }
        Ok(out)
    }

    /// Logits and diagnostics for a batch of unpadded graphs, no dropout.
    pub fn forward_inputs(&self, inputs: &[&GraphInput]) -> Result<ForwardOutput> {
        let c = self.config.num_classes;
        let b = inputs.len();
        let aux_count = self.layout.aux.len();
        let mut main = Array2::zeros((b, c));
        let mut aux = vec![Array2::zeros((b, c)); aux_count];
        let mut bundles = Vec::with_capacity(b);
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let base = tape.len();
        for (g, input) in inputs.iter().enumerate() {
            let out = self.forward_graph(&mut tape, &vars, input, Pass::Eval)?;
            main.row_mut(g).assign(&tape.value(out.main).row(0));
            for (k, &a) in out.aux.iter().enumerate() {
                aux[k].row_mut(g).assign(&tape.value(a).row(0));
            }
            bundles.push(out.bundles.iter().map(|bv| bv.values(&tape)).collect());
            tape.truncate(base);
        }
        Ok(ForwardOutput { main, aux, bundles })
    }

    /// Forward pass over a padded batch. With an `rng`, dropout is active.
    pub fn forward(&self, batch: &GraphBatch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        if batch.n_max() > self.config.n_max || batch.features.shape()[2] != self.feature_dim {
            return Err(Error::Config(format!(
                "batch of {} nodes × {} features does not fit the model ({} × {})",
                batch.n_max(),
                batch.features.shape()[2],
                self.config.n_max,
                self.feature_dim
            )));
        }
        let inputs = (0..batch.len())
            .map(|k| {
                let (x, a) = batch.compact(k);
                GraphInput::new(a, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        match rng {
            None => self.forward_inputs(&refs),
            Some(rng) => {
                let c = self.config.num_classes;
                let mut tape = Tape::new();
                let vars = self.record(&mut tape, false);
                let base = tape.len();
                let mut main = Array2::zeros((refs.len(), c));
                let mut aux = vec![Array2::zeros((refs.len(), c)); self.layout.aux.len()];
                let mut bundles = Vec::new();
                for (g, input) in refs.iter().enumerate() {
                    let out = self.forward_graph(&mut tape, &vars, input, Pass::Train(rng))?;
                    main.row_mut(g).assign(&tape.value(out.main).row(0));
                    for (k, &a) in out.aux.iter().enumerate() {
                        aux[k].row_mut(g).assign(&tape.value(a).row(0));
                    }
                    bundles.push(out.bundles.iter().map(|bv| bv.values(&tape)).collect());
                    tape.truncate(base);
                }
                Ok(ForwardOutput { main, aux, bundles })
            }
        }
    }

    /// Main-head class predictions; auxiliary heads are not evaluated.
    pub fn predict(&self, inputs: &[&GraphInput]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.record_main_path(&mut tape);
        let base = tape.len();
        let mut out = Vec::with_capacity(inputs.len());
        for input in inputs {
            let g = self.forward_graph(&mut tape, &vars, input, Pass::Eval)?;
            out.push(predictions(tape.value(g.main))[0]);
            tape.truncate(base);
        }
        Ok(out)
    }

    /// Records the parameters with auxiliary-head weights replaced by zeros,
    /// so nothing downstream can depend on them.
    fn record_main_path(&self, tape: &mut Tape) -> ModelVars {
        let aux: std::collections::HashSet<&str> = self.auxiliary_parameters().into_iter().collect();
        let vars = self
            .params
            .iter()
            .map(|p| {
                if aux.contains(p.name.as_str()) {
                    tape.constant(Array2::zeros(p.value.dim()))
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        ModelVars { vars }
    }

    /// Accuracy of the main head.
    pub fn accuracy(&self, inputs: &[&GraphInput], labels: &[usize]) -> Result<f64> {
        if inputs.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(inputs)?;
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / inputs.len() as f64)
    }

    /// Mean combined loss of a batch and its gradient for every parameter.
    ///
    /// Graphs are processed in chunks whose summed squared node count stays
    /// under `chunk_budget`, one tape per chunk; chunk gradients are summed in
    /// order. `rng` enables dropout.
    pub fn loss_and_gradients(
        &self,
        inputs: &[&GraphInput],
        labels: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
        chunk_budget: usize,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::Usage(format!(
                "{} graphs with {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let b = inputs.len() as f64;
        let mut grads: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        let mut total = 0.0;
        let mut start = 0;
        while start < inputs.len() {
            let mut end = start;
            let mut cost = 0usize;
            while end < inputs.len() {
                let n = inputs[end].node_count();
                if end > start && cost + n * n > chunk_budget {
                    break;
                }
                cost += n * n;
                end += 1;
            }
            let mut tape = Tape::new();
            let vars = self.record(&mut tape, true);
            let mut outs = Vec::with_capacity(end - start);
            for input in &inputs[start..end] {
                let pass = match rng.as_deref_mut() {
                    Some(r) => Pass::Train(r),
                    None => Pass::Eval,
                };
                outs.push(self.forward_graph(&mut tape, &vars, input, pass)?);
            }
            let (main, aux) = stack_outputs(&mut tape, &outs)?;
            let l = combined_loss(&mut tape, main, &aux, &labels[start..end], self.config.aux_weight)?;
            let l = tape.scalar_mul(l, (end - start) as f64 / b);
            total += tape.value(l)[[0, 0]];
            let g = tape.backward(l)?;
            for (acc, &v) in grads.iter_mut().zip(&vars.vars) {
                if let Some(d) = g.get(v) {
                    *acc += d;
                }
            }
            start = end;
        }
        Ok((total, grads))
    }

    /// Loss of `inputs` as a function of parameter variables already on the
    /// tape, in evaluation mode. With `replay`, graph `g` replays `replay[g]`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        inputs: &[&GraphInput],
        labels: &[usize],
        replay: Option<&[Vec<FrozenLayer>]>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(inputs.len());
        for (g, input) in inputs.iter().enumerate() {
            let pass = match replay {
                Some(r) => Pass::Replay(&r[g]),
                None => Pass::Eval,
            };
            outs.push(self.forward_graph(tape, vars, input, pass)?);
        }
        let (main, aux) = stack_outputs(tape, &outs)?;
        combined_loss(tape, main, &aux, labels, self.config.aux_weight)
    }

    /// Discrete decisions of each graph at the current parameters.
    pub fn freeze(&self, inputs: &[&GraphInput]) -> Result<Vec<Vec<FrozenLayer>>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let base = tape.len();
        inputs
            .iter()
            .map(|input| {
                let out = self.forward_graph(&mut tape, &vars, input, Pass::Eval)?;
                let frozen = out.freeze(&tape, self.config.hops);
                tape.truncate(base);
                Ok(frozen)
            })
            .collect()
    }

    pub fn save(&self, path: &Path, metadata: &CheckpointMetadata) -> Result<()> {
        let body = CheckpointBody {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            metadata: metadata.clone(),
            params: self
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    data: p.value.iter().copied().collect(),
                })
                .collect(),
        };
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(file, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        serde_json::to_writer(&mut file, &body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMetadata)> {
        let file = fs::File::open(path).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let body: CheckpointBody = serde_json::from_reader(reader).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Model::new(body.config, body.feature_dim, 0)?;
        if body.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, layout has {}",
                body.params.len(),
                model.params.len()
            )));
        }
        for stored in body.params {
            let slot = model
                .index
                .get(&stored.name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", stored.name)))?;
            let value = Array2::from_shape_vec((stored.shape[0], stored.shape[1]), stored.data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", stored.name)))?;
            if value.dim() != model.params[slot].value.dim() {
                return Err(Error::Checkpoint(format!("shape of `{}` does not match the layout", stored.name)));
            }
            model.params[slot].value = value;
        }
        Ok((model, body.metadata))
    }
}
