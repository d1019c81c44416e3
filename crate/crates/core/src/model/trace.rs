use super::weights::LayerNormParams;
use crate::tensor::{Matrix, Scalar};

/// Internals of one attention layer for every timestep of a forward pass.
///
/// Positions are 0-based: timestep `i` in the usual 1-based notation is `pos = i - 1`,
/// and its attention vector has `pos + 1` entries. `value(h, j)` is the head's
/// combined value-output vector for position `j`: the value projection followed by
/// that head's block of the output projection, plus the value bias and an equal
/// `1/H` share of the output bias. With these vectors the fused attention output
/// is exactly `Σ_h Σ_j a[h][pos][j] · value(h, j)`.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    layer: usize,
    ln_eps: f64,
    attention: Vec<Vec<T>>,
    values: Vec<Matrix<T>>,
    residual: Matrix<T>,
    normed_input: Matrix<T>,
    output: Matrix<T>,
    ln_out: LayerNormParams<T>,
    ln_out_scale: Vec<T>,
}

impl<T: Scalar> AttentionTrace<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        layer: usize,
        ln_eps: f64,
        attention: Vec<Vec<T>>,
        values: Vec<Matrix<T>>,
        residual: Matrix<T>,
        normed_input: Matrix<T>,
        output: Matrix<T>,
        ln_out: LayerNormParams<T>,
        ln_out_scale: Vec<T>,
    ) -> Self {
        AttentionTrace {
            layer,
            ln_eps,
            attention,
            values,
            residual,
            normed_input,
            output,
            ln_out,
            ln_out_scale,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn n_heads(&self) -> usize {
        self.values.len()
    }

    pub fn d_model(&self) -> usize {
        self.residual.cols()
    }

    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.residual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ln_eps(&self) -> f64 {
        self.ln_eps
    }

    /// Attention of head `h` at position `pos` over positions `0..=pos`.
    pub fn attention(&self, h: usize, pos: usize) -> &[T] {
        let start = pos * (pos + 1) / 2;
        &self.attention[h][start..start + pos + 1]
    }

    pub fn value(&self, h: usize, j: usize) -> &[T] {
        self.values[h].row(j)
    }

    /// Mutable access to one value vector; only useful for checker self-tests.
    pub fn value_mut(&mut self, h: usize, j: usize) -> &mut [T] {
        self.values[h].row_mut(j)
    }

    pub fn values(&self, h: usize) -> &Matrix<T> {
        &self.values[h]
    }

    /// Layer input `x` (the residual stream entering the block).
    pub fn residual(&self) -> &Matrix<T> {
        &self.residual
    }

    /// Mutable residual stream; only useful for perturbation tests.
    pub fn residual_mut(&mut self) -> &mut Matrix<T> {
        &mut self.residual
    }

    /// `LN_in(x)`.
    pub fn normed_input(&self) -> &Matrix<T> {
        &self.normed_input
    }

    /// Fused multi-head attention output `o`.
    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }

    pub fn ln_out(&self) -> &LayerNormParams<T> {
        &self.ln_out
    }

    /// `s(o + x)` at each position, including the epsilon.
    pub fn ln_out_scale(&self, pos: usize) -> T {
        self.ln_out_scale[pos]
    }

    pub fn set_ln_out_scale(&mut self, pos: usize, s: T) {
        self.ln_out_scale[pos] = s;
    }

    /// `Σ_h Σ_j a[h][pos][j] · value(h, j)` accumulated in f64.
    pub fn reconstruct_output(&self, pos: usize) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.d_model()];
        for h in 0..self.n_heads() {
            for (j, &a) in self.attention(h, pos).iter().enumerate() {
                let a = a.as_f64();
                for (s, &v) in acc.iter_mut().zip(self.value(h, j)) {
                    *s += a * v.as_f64();
                }
            }
        }
        acc
    }
}
