//! End-to-end gradient check of a small model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FrozenLayer, GraphInput, Model, ModelConfig, ModelVars};
use crate::error::Result;
use crate::numerics::{finite_difference_check_many, BackwardFault, GradCheckOptions, GradCheckReport};
use crate::pool::PoolMode;

pub const MICRO_FEATURES: usize = 3;

/// `n_max` 16, two hops, GCN width 4, two pooling layers (16 → 4 → 1 clusters).
pub fn micro_config(mode: PoolMode) -> ModelConfig {
    ModelConfig {
        n_max: 16,
        pooling_layers: 2,
        cluster_ratio: 0.25,
        gcn_width: 4,
        hops: 2,
        mode,
        hidden_main: 8,
        hidden_aux: 8,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

/// Two random graphs (9 and 12 nodes) with edge weights in `[0.5, 1.5]`.
///
/// Generic weights keep every guard and activation away from its kink, so
/// central differences see a smooth function.
pub fn micro_inputs(seed: u64) -> Vec<GraphInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [9usize, 12]
        .iter()
        .map(|&n| {
            let mut a = Array2::zeros((n, n));
            for i in 0..n {
                // A path keeps the graph connected; extra chords add cycles.
                let mut link = |i: usize, j: usize, rng: &mut ChaCha8Rng| {
                    let w = rng.random_range(0.5..1.5);
                    a[[i, j]] = w;
                    a[[j, i]] = w;
                };
                if i + 1 < n {
                    link(i, i + 1, &mut rng);
                }
                for j in i + 2..n {
                    if rng.random_bool(0.2) {
                        link(i, j, &mut rng);
                    }
                }
            }
            let x = Array2::from_shape_simple_fn((n, MICRO_FEATURES), || rng.random_range(-1.0..1.0));
            GraphInput::new(a, x).expect("square adjacency with matching features")
        })
        .collect()
}

/// Compares the analytic gradient of the combined loss against central
/// differences for every parameter coordinate.
///
/// Hard assignments and layer structure are frozen at the current
/// parameters, so the reference derivative is the straight-through one.
pub fn gradient_check(
    model: &Model,
    inputs: &[&GraphInput],
    labels: &[usize],
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let frozen: Vec<Vec<FrozenLayer>> = model.freeze(inputs)?;
    let values: Vec<Array2<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    finite_difference_check_many(
        |tape, vars| {
            let vars = ModelVars { vars: vars.to_vec() };
            model.loss_on_tape(tape, &vars, inputs, labels, Some(&frozen))
        },
        &values,
        GradCheckOptions {
            fault,
            ..GradCheckOptions::default()
        },
    )
}

/// Gradient check of a freshly initialized micro model on [`micro_inputs`].
pub fn micro_gradient_check(mode: PoolMode, seed: u64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let model = Model::new(micro_config(mode), MICRO_FEATURES, seed)?;
    let inputs = micro_inputs(seed);
    let refs: Vec<&GraphInput> = inputs.iter().collect();
    gradient_check(&model, &refs, &[0, 1], fault)
}
