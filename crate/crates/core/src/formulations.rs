//! Attention-weight formulations over a traced layer.
//!
//! * [`Formulation::Weights`]: the softmax attention weights as-is.
//! * [`Formulation::Norm`]: weights scaled by the norm of each position's combined
//!   value-output vector, renormalised over the context.
//! * [`Formulation::ResidualNorm`]: weights scaled by the norm of each position's
//!   contribution after the residual connection and the output LayerNorm have been
//!   distributed over positions, renormalised over the context.
//!
//! The free functions ([`attn_w`], [`attn_n`], [`decompose_residual_ln`],
//! [`attn_rln`]) compute each formulation directly from the trace.
//! [`FormulationContext`] precomputes per-position norms once per trace so that a
//! whole window costs `O(H·n²)` instead of `O(H·n²·d)`; its output is checked
//! against the direct functions in tests.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::AttentionTrace;
use crate::par::{self, Execution};
use crate::tensor::Scalar;

/// Floor for the self-attention weight when the residual is spread over it.
pub const SELF_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Formulation {
    Weights,
    Norm,
    ResidualNorm,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [
        Formulation::Weights,
        Formulation::Norm,
        Formulation::ResidualNorm,
    ];

    /// Short tag used in column names and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Formulation::Weights => "w",
            Formulation::Norm => "n",
            Formulation::ResidualNorm => "rln",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w" | "attn_w" | "attn-w" => Ok(Formulation::Weights),
            "n" | "attn_n" | "attn-n" => Ok(Formulation::Norm),
            "rln" | "rl-n" | "attn_rln" | "attnrl-n" => Ok(Formulation::ResidualNorm),
            _ => Err(Error::InvalidInput(format!(
                "unknown formulation `{s}` (expected w, n or rln)"
            ))),
        }
    }
}

/// A nonnegative distribution over context positions `0..=pos` for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub formulation: Formulation,
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
    /// Every norm × weight product was zero, so `weights` fell back to uniform.
    pub degenerate: bool,
    /// The self-attention weight was below [`SELF_WEIGHT_FLOOR`] and was clamped.
    pub self_weight_clamped: bool,
}

impl WeightVector {
    /// 1-based timestep, equal to the number of weights.
    pub fn timestep(&self) -> usize {
        self.weights.len()
    }
}

/// Raw attention weights.
pub fn attn_w<T: Scalar>(trace: &AttentionTrace<T>, head: usize, pos: usize) -> WeightVector {
    WeightVector {
        formulation: Formulation::Weights,
        layer: trace.layer(),
        head,
        weights: trace
            .attention(head, pos)
            .iter()
            .map(|a| a.as_f64())
            .collect(),
        degenerate: false,
        self_weight_clamped: false,
    }
}

/// Attention weights scaled by `‖v_{h,j}‖₂` and renormalised.
pub fn attn_n<T: Scalar>(trace: &AttentionTrace<T>, head: usize, pos: usize) -> WeightVector {
    let norms: Vec<f64> = (0..=pos)
        .map(|j| l2(trace.value(head, j).iter().map(|v| v.as_f64())))
        .collect();
    let a = trace.attention(head, pos);
    let (weights, degenerate) = normalize_products(&norms, a);
    WeightVector {
        formulation: Formulation::Norm,
        layer: trace.layer(),
        head,
        weights,
        degenerate,
        self_weight_clamped: false,
    }
}

/// Per-position contribution vectors after residual + output LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedColumns {
    /// `columns[j]` is the `d`-vector contributed by position `j`.
    pub columns: Vec<Vec<f64>>,
    pub self_weight_clamped: bool,
}

/// Spreads the residual connection and the output LayerNorm over the positions
/// attended by `head` at `pos`:
///
/// ```text
/// col_j = (y_j − m(y_j)) / s(o + x) ⊙ c_out + b_out / H
/// y_j   = v_{h,j}                        for j ≠ pos
/// y_pos = v_{h,pos} + x_pos / (H · a_pos)
/// ```
///
/// Weighted by the attention weights and summed over heads, the columns
/// reproduce `LN_out(o + x)` at `pos`.
pub fn decompose_residual_ln<T: Scalar>(
    trace: &AttentionTrace<T>,
    head: usize,
    pos: usize,
) -> DecomposedColumns {
    let h = trace.n_heads() as f64;
    let a = trace.attention(head, pos);
    let (self_weight, clamped) = guarded_self_weight(a[pos].as_f64());
    let scale = trace.ln_out_scale(pos).as_f64();
    let gain: Vec<f64> = trace.ln_out().gain.iter().map(|g| g.as_f64()).collect();
    let bias: Vec<f64> = trace.ln_out().bias.iter().map(|b| b.as_f64() / h).collect();
    let columns = (0..=pos)
        .map(|j| {
            let mut y: Vec<f64> = trace.value(head, j).iter().map(|v| v.as_f64()).collect();
            if j == pos {
                for (yk, xk) in y.iter_mut().zip(trace.residual().row(pos)) {
                    *yk += xk.as_f64() / (h * self_weight);
                }
            }
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            y.iter()
                .zip(gain.iter().zip(&bias))
                .map(|(&yk, (&c, &b))| (yk - mean) / scale * c + b)
                .collect()
        })
        .collect();
    DecomposedColumns {
        columns,
        self_weight_clamped: clamped,
    }
}

/// Attention weights scaled by the norms of the [`decompose_residual_ln`] columns.
pub fn attn_rln<T: Scalar>(trace: &AttentionTrace<T>, head: usize, pos: usize) -> WeightVector {
    let cols = decompose_residual_ln(trace, head, pos);
    let norms: Vec<f64> = cols.columns.iter().map(|c| l2(c.iter().copied())).collect();
    let (weights, degenerate) = normalize_products(&norms, trace.attention(head, pos));
    WeightVector {
        formulation: Formulation::ResidualNorm,
        layer: trace.layer(),
        head,
        weights,
        degenerate,
        self_weight_clamped: cols.self_weight_clamped,
    }
}

/// Largest ∞-norm gap between `Σ_h Σ_j a_j · col_j` and `LN_out(o + x)` at `pos`.
pub fn residual_ln_reconstruction_error<T: Scalar>(trace: &AttentionTrace<T>, pos: usize) -> f64 {
    let d = trace.d_model();
    let mut acc = vec![0.0f64; d];
    for h in 0..trace.n_heads() {
        let cols = decompose_residual_ln(trace, h, pos);
        for (col, &a) in cols.columns.iter().zip(trace.attention(h, pos)) {
            let a = a.as_f64();
            for (s, &c) in acc.iter_mut().zip(col) {
                *s += a * c;
            }
        }
    }
    let target = ln_out_reference(trace, pos);
    acc.iter()
        .zip(&target)
        .map(|(a, t)| (a - t).abs())
        .fold(0.0, f64::max)
}

/// `LN_out(o + x)` at `pos`, computed in f64 from the trace.
pub fn ln_out_reference<T: Scalar>(trace: &AttentionTrace<T>, pos: usize) -> Vec<f64> {
    let y: Vec<f64> = trace
        .output()
        .row(pos)
        .iter()
        .zip(trace.residual().row(pos))
        .map(|(o, x)| o.as_f64() + x.as_f64())
        .collect();
    let gain: Vec<f64> = trace.ln_out().gain.iter().map(|g| g.as_f64()).collect();
    let bias: Vec<f64> = trace.ln_out().bias.iter().map(|b| b.as_f64()).collect();
    crate::tensor::layer_norm(&y, &gain, &bias, trace.ln_eps())
        .expect("trace dimensions are consistent")
}

fn guarded_self_weight(a: f64) -> (f64, bool) {
    if a < SELF_WEIGHT_FLOOR {
        (SELF_WEIGHT_FLOOR, true)
    } else {
        (a, false)
    }
}

fn l2(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// `norm_j · a_j / Σ_k norm_k · a_k`, or uniform with the degenerate flag set.
pub fn normalize_products<T: Scalar>(norms: &[f64], attention: &[T]) -> (Vec<f64>, bool) {
    let products: Vec<f64> = norms
        .iter()
        .zip(attention)
        .map(|(&n, a)| n * a.as_f64())
        .collect();
    let total: f64 = products.iter().sum();
    if total > 0.0 && total.is_finite() {
        (products.iter().map(|p| p / total).collect(), false)
    } else {
        let k = products.len() as f64;
        (vec![1.0 / k; products.len()], true)
    }
}

/// Per-trace cache of the quantities every formulation needs.
///
/// For `j ≠ pos` the RL-N column is `u_j / s + β` with `u_j = (v_j − m(v_j)) ⊙ c_out`
/// and `β = b_out / H`, so `‖col_j‖² = ‖u_j‖²/s² + 2·(u_j·β)/s + ‖β‖²`; only the
/// self column needs the full vector.
pub struct FormulationContext<'a, T> {
    trace: &'a AttentionTrace<T>,
    value_norms: Vec<Vec<f64>>,
    centered_sq: Vec<Vec<f64>>,
    centered_dot_bias: Vec<Vec<f64>>,
    bias_sq: f64,
}

impl<'a, T: Scalar> FormulationContext<'a, T> {
    pub fn new(trace: &'a AttentionTrace<T>, exec: Execution) -> Self {
        let n_heads = trace.n_heads();
        let h = n_heads as f64;
        let gain: Vec<f64> = trace.ln_out().gain.iter().map(|g| g.as_f64()).collect();
        let bias: Vec<f64> = trace.ln_out().bias.iter().map(|b| b.as_f64() / h).collect();
        let per_head = par::map_range(exec, n_heads, |head| {
            let mut norms = Vec::with_capacity(trace.len());
            let mut sq = Vec::with_capacity(trace.len());
            let mut dotb = Vec::with_capacity(trace.len());
            for j in 0..trace.len() {
                let v: Vec<f64> = trace.value(head, j).iter().map(|x| x.as_f64()).collect();
                norms.push(l2(v.iter().copied()));
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let (mut s, mut db) = (0.0, 0.0);
                for ((&vk, &c), &b) in v.iter().zip(&gain).zip(&bias) {
                    let u = (vk - mean) * c;
                    s += u * u;
                    db += u * b;
                }
                sq.push(s);
                dotb.push(db);
            }
            (norms, sq, dotb)
        });
        let mut value_norms = Vec::with_capacity(n_heads);
        let mut centered_sq = Vec::with_capacity(n_heads);
        let mut centered_dot_bias = Vec::with_capacity(n_heads);
        for (n, s, d) in per_head {
            value_norms.push(n);
            centered_sq.push(s);
            centered_dot_bias.push(d);
        }
        let bias_sq = bias.iter().map(|b| b * b).sum();
        FormulationContext {
            trace,
            value_norms,
            centered_sq,
            centered_dot_bias,
            bias_sq,
        }
    }

    pub fn trace(&self) -> &AttentionTrace<T> {
        self.trace
    }

    pub fn weights(&self, formulation: Formulation, head: usize, pos: usize) -> WeightVector {
        match formulation {
            Formulation::Weights => attn_w(self.trace, head, pos),
            Formulation::Norm => {
                let (weights, degenerate) = normalize_products(
                    &self.value_norms[head][..=pos],
                    self.trace.attention(head, pos),
                );
                WeightVector {
                    formulation,
                    layer: self.trace.layer(),
                    head,
                    weights,
                    degenerate,
                    self_weight_clamped: false,
                }
            }
            Formulation::ResidualNorm => self.residual_norm(head, pos),
        }
    }

    fn residual_norm(&self, head: usize, pos: usize) -> WeightVector {
        let trace = self.trace;
        let a = trace.attention(head, pos);
        let s = trace.ln_out_scale(pos).as_f64();
        let mut norms: Vec<f64> = (0..pos)
            .map(|j| {
                let sq = self.centered_sq[head][j] / (s * s)
                    + 2.0 * self.centered_dot_bias[head][j] / s
                    + self.bias_sq;
                sq.max(0.0).sqrt()
            })
            .collect();

        let h = trace.n_heads() as f64;
        let (self_weight, clamped) = guarded_self_weight(a[pos].as_f64());
        let mut y: Vec<f64> = trace
            .value(head, pos)
            .iter()
            .zip(trace.residual().row(pos))
            .map(|(v, x)| v.as_f64() + x.as_f64() / (h * self_weight))
            .collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        for ((yk, g), b) in y
            .iter_mut()
            .zip(&trace.ln_out().gain)
            .zip(&trace.ln_out().bias)
        {
            *yk = (*yk - mean) / s * g.as_f64() + b.as_f64() / h;
        }
        norms.push(l2(y.into_iter()));

        let (weights, degenerate) = normalize_products(&norms, a);
        WeightVector {
            formulation: Formulation::ResidualNorm,
            layer: trace.layer(),
            head,
            weights,
            degenerate,
            self_weight_clamped: clamped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::tensor::Matrix;

    fn trace_f64(n_heads: usize, seed: u64, len: usize) -> AttentionTrace<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads,
            d_model: 8,
            vocab_size: 17,
            max_context: 32,
            ln_eps: 1e-5,
        };
        let model = Model::<f64>::random(cfg, seed).unwrap();
        let ids: Vec<u32> = (0..len).map(|k| ((k * 7 + 3) % 17) as u32).collect();
        model.forward(&ids).unwrap().trace
    }

    fn assert_prob(w: &[f64]) {
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attn_w_is_the_softmax_output() {
        let t = trace_f64(2, 1, 6);
        assert_eq!(attn_w(&t, 0, 0).weights, vec![1.0]);
        for pos in 0..6 {
            let w = attn_w(&t, 1, pos);
            assert_eq!(w.weights.as_slice(), t.attention(1, pos));
            assert_eq!(w.timestep(), pos + 1);
        }
        assert_prob(&attn_w(&t, 0, 4).weights);
    }

    #[test]
    fn norm_products_hand_example() {
        let (w, deg) = normalize_products(&[3.0, 1.0], &[0.5f64, 0.5]);
        assert!(!deg);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equal_norms_reproduce_attention() {
        let a = [0.2f64, 0.3, 0.5];
        let (w, _) = normalize_products(&[2.5, 2.5, 2.5], &a);
        for (x, y) in w.iter().zip(a) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_norm_gets_zero_weight() {
        let (w, _) = normalize_products(&[0.0, 1.0, 2.0], &[0.9f64, 0.05, 0.05]);
        assert_eq!(w[0], 0.0);
        assert_prob(&w);
    }

    #[test]
    fn all_zero_products_fall_back_to_uniform() {
        let (w, deg) = normalize_products(&[0.0, 0.0], &[0.5f64, 0.5]);
        assert!(deg);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn residual_ln_columns_reconstruct_layer_norm() {
        for heads in [1, 2, 4] {
            let t = trace_f64(heads, 10 + heads as u64, 9);
            for pos in 0..9 {
                let err = residual_ln_reconstruction_error(&t, pos);
                assert!(err < 1e-10, "heads {heads} pos {pos}: {err}");
            }
        }
    }

    #[test]
    fn single_head_first_position_is_ln_of_sum() {
        let t = trace_f64(1, 3, 4);
        let cols = decompose_residual_ln(&t, 0, 0);
        assert_eq!(cols.columns.len(), 1);
        let expect = ln_out_reference(&t, 0);
        for (c, e) in cols.columns[0].iter().zip(&expect) {
            assert!((c - e).abs() < 1e-10);
        }
        assert_eq!(attn_rln(&t, 0, 0).weights, vec![1.0]);
    }

    #[test]
    fn residual_only_touches_self_column() {
        let t = trace_f64(2, 4, 6);
        let mut perturbed = t.clone();
        for v in perturbed.residual_mut().row_mut(5) {
            *v += 0.75;
        }
        let before = decompose_residual_ln(&t, 1, 5);
        let after = decompose_residual_ln(&perturbed, 1, 5);
        for j in 0..5 {
            assert_eq!(before.columns[j], after.columns[j]);
        }
        assert_ne!(before.columns[5], after.columns[5]);
    }

    #[test]
    fn plain_layer_norm_makes_rln_proportional_to_n() {
        // c_out = 1, b_out = 0, x = 0 and zero-mean values: every column is v_j / s,
        // so the common 1/s cancels in the normalisation.
        let d = 4;
        let values = Matrix::from_rows(&[
            vec![1.0, -1.0, 2.0, -2.0],
            vec![0.5, 0.5, -0.5, -0.5],
            vec![3.0, 0.0, -3.0, 0.0],
        ])
        .unwrap();
        let attention = vec![vec![1.0, 0.3, 0.7, 0.2, 0.5, 0.3]];
        let trace = AttentionTrace::new(
            0,
            1e-5,
            attention,
            vec![values],
            Matrix::zeros(3, d),
            Matrix::zeros(3, d),
            Matrix::zeros(3, d),
            crate::model::LayerNormParams {
                gain: vec![1.0; d],
                bias: vec![0.0; d],
            },
            vec![1.7, 2.3, 0.9],
        );
        let n = attn_n(&trace, 0, 2);
        let r = attn_rln(&trace, 0, 2);
        for (a, b) in n.weights.iter().zip(&r.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_self_weight_is_clamped_and_flagged() {
        let trace = AttentionTrace::new(
            0,
            1e-5,
            vec![vec![1.0, 1.0, 0.0]],
            vec![Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.0]]).unwrap()],
            Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0]]).unwrap(),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            crate::model::LayerNormParams {
                gain: vec![1.0; 2],
                bias: vec![0.0; 2],
            },
            vec![1.0, 1.0],
        );
        let w = attn_rln(&trace, 0, 1);
        assert!(w.self_weight_clamped);
        assert!(w.weights.iter().all(|x| x.is_finite()));
        let ctx = FormulationContext::new(&trace, Execution::Sequential);
        assert!(
            ctx.weights(Formulation::ResidualNorm, 0, 1)
                .self_weight_clamped
        );
    }

    #[test]
    fn context_matches_direct_functions() {
        let t = trace_f64(4, 21, 12);
        let ctx = FormulationContext::new(&t, Execution::Parallel);
        for h in 0..4 {
            for pos in 0..12 {
                for (f, direct) in [
                    (Formulation::Weights, attn_w(&t, h, pos)),
                    (Formulation::Norm, attn_n(&t, h, pos)),
                    (Formulation::ResidualNorm, attn_rln(&t, h, pos)),
                ] {
                    let fast = ctx.weights(f, h, pos);
                    assert_prob(&fast.weights);
                    for (a, b) in fast.weights.iter().zip(&direct.weights) {
                        assert!((a - b).abs() < 1e-12, "{f} h{h} pos{pos}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn rln_differs_from_n_on_random_models() {
        let t = trace_f64(2, 22, 8);
        let n = attn_n(&t, 0, 7);
        let r = attn_rln(&t, 0, 7);
        let gap: f64 = n
            .weights
            .iter()
            .zip(&r.weights)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(gap > 1e-3);
    }

    #[test]
    fn parses_tags() {
        for f in Formulation::ALL {
            assert_eq!(f.tag().parse::<Formulation>().unwrap(), f);
        }
        assert!("x".parse::<Formulation>().is_err());
    }
}
