//! Dense reverse-mode differentiation and the numerical helpers built on it.

mod gradcheck;
mod softmax;
mod tape;

use ndarray::Array2;
use rand::Rng;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_many, relative_error, GradCheckOptions,
    GradCheckReport,
};
pub use softmax::{grouped_softmax_values, stable_softmax_over_groups};
pub use tape::{BackwardFault, Gradients, Tape, Var};

use crate::error::Result;

/// Negative slope used by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// One-hot at the argmax; ties go to the lowest index.
pub fn straight_through_onehot(s_row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s_row.len()];
    if let Some(best) = argmax(s_row) {
        out[best] = 1.0;
    }
    out
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn onehot_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(s.dim());
    for (i, row) in s.rows().into_iter().enumerate() {
        if let Some(j) = argmax(&row.to_vec()) {
            out[[i, j]] = 1.0;
        }
    }
    out
}

/// `T(i,·) / max(1, Σ_j T(i,j))`; all-zero rows stay zero.
pub fn row_normalize_guarded(t: &Array2<f64>) -> Array2<f64> {
    let mut out = t.clone();
    for mut row in out.rows_mut() {
        let total = row.sum();
        if total > 1.0 {
            row.mapv_inplace(|x| x / total);
        }
    }
    out
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(rng: &mut R, dim: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn(dim, || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

impl Tape {
    /// Forward: row-wise one-hot at the argmax. Backward: identity.
    pub fn straight_through_onehot(&mut self, s: Var) -> Result<Var> {
        let hard = onehot_rows(self.value(s));
        self.pass_through(s, hard)
    }

    /// Applies inverted dropout with a fixed mask drawn from `rng`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(rng, self.shape(x), rate);
        let mask = self.constant(mask);
        self.hadamard(x, mask)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let transposed: Vec<Var> = parts.iter().map(|&p| self.transpose(p)).collect();
        let wide = self.concat_cols(&transposed)?;
        Ok(self.transpose(wide))
    }

    /// `x · W + b` with a `1 × c` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }
}
