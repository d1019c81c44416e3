//! GPT-2 forward pass with a per-head trace of one attention layer.

mod config;
mod trace;
mod weights;

use std::path::Path;

pub use config::ModelConfig;
pub use trace::AttentionTrace;
pub use weights::{HeadWeights, LayerNormParams, LayerWeights, ModelWeights};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{self, Matrix, Scalar};

/// Which layer to trace during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LayerSelector {
    #[default]
    Top,
    Index(usize),
}

impl LayerSelector {
    pub fn resolve(self, config: &ModelConfig) -> Result<usize> {
        match self {
            LayerSelector::Top => Ok(config.top_layer()),
            LayerSelector::Index(l) if l < config.n_layers => Ok(l),
            LayerSelector::Index(l) => Err(Error::InvalidInput(format!(
                "layer {l} out of range for a {}-layer model",
                config.n_layers
            ))),
        }
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(LayerSelector::Top),
            n => n.parse().map(LayerSelector::Index).map_err(|_| {
                Error::InvalidInput(format!("layer must be `top` or an index, got `{s}`"))
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub layer: LayerSelector,
    pub exec: Execution,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Matrix<T>,
    pub trace: AttentionTrace<T>,
}

/// Base of the logarithm used for surprisal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogBase {
    #[default]
    Two,
    E,
}

impl LogBase {
    fn ln_base(self) -> f64 {
        match self {
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::E => 1.0,
        }
    }
}

impl std::str::FromStr for LogBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" => Ok(LogBase::Two),
            "e" | "E" => Ok(LogBase::E),
            _ => Err(Error::InvalidInput(format!(
                "log base must be `2` or `e`, got `{s}`"
            ))),
        }
    }
}

/// Immutable, thread-shareable model.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    weights: ModelWeights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &weights)?;
        Ok(Model { config, weights })
    }

    pub fn load(weights_path: impl AsRef<Path>, config_path: impl AsRef<Path>) -> Result<Self> {
        let config = ModelConfig::load(config_path)?;
        let weights = ModelWeights::load(weights_path, &config)?;
        Model::new(config, weights)
    }

    /// Loads `model.safetensors` and `config.json` from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join("model.safetensors"), dir.join("config.json"))
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::random(&config, seed)?;
        Model::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<T>> {
        self.forward_with(ids, &ForwardOptions::default())
    }

    pub fn forward_with(&self, ids: &[u32], opts: &ForwardOptions) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let n = ids.len();
        if n == 0 || n > cfg.max_context {
            return Err(Error::InvalidInput(format!(
                "sequence length {n} outside 1..={}",
                cfg.max_context
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        let traced = opts.layer.resolve(cfg)?;
        let exec = opts.exec;
        let d = cfg.d_model;
        let eps = cfg.ln_eps;

        let mut hidden = Matrix::<T>::zeros(n, d);
        for (pos, &id) in ids.iter().enumerate() {
            let tok = self.weights.token_embedding.row(id as usize);
            let posv = self.weights.position_embedding.row(pos);
            for ((h, &t), &p) in hidden.row_mut(pos).iter_mut().zip(tok).zip(posv) {
                *h = t + p;
            }
        }

        let mut trace = None;
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let normed = layer_norm_rows(exec, &hidden, &layer.ln_in, eps)?;
            let heads = par::try_map_range(exec, cfg.n_heads, |h| {
                attend(
                    &layer.heads[h],
                    &normed,
                    cfg.d_head(),
                    Execution::Sequential,
                )
            })?;

            let mut mixed = Matrix::<T>::zeros(n, d);
            let mut out_proj = Vec::with_capacity(d * d);
            for (h, head) in heads.iter().enumerate() {
                let dh = cfg.d_head();
                for pos in 0..n {
                    mixed.row_mut(pos)[h * dh..(h + 1) * dh].copy_from_slice(head.mixed.row(pos));
                }
                out_proj.extend_from_slice(layer.heads[h].output.data());
            }
            let out_proj = Matrix::new(d, d, out_proj)?;
            let mut output = tensor::matmul_with(exec, &mixed, &out_proj)?;
            output.add_row_vector(&layer.output_bias);

            let mut sum = output.clone();
            for pos in 0..n {
                for (s, &x) in sum.row_mut(pos).iter_mut().zip(hidden.row(pos)) {
                    *s = *s + x;
                }
            }

            if l == traced {
                trace = Some(self.capture(
                    l,
                    &layer_ref(layer),
                    heads,
                    &hidden,
                    normed,
                    &output,
                    &sum,
                    exec,
                )?);
            }

            let post = layer_norm_rows(exec, &sum, &layer.ln_out, eps)?;
            let mut inner = tensor::matmul_with(exec, &post, &layer.ff_in)?;
            inner.add_row_vector(&layer.ff_in_bias);
            let activated = Matrix::new(inner.rows(), inner.cols(), tensor::gelu(inner.data()))?;
            let mut ff = tensor::matmul_with(exec, &activated, &layer.ff_out)?;
            ff.add_row_vector(&layer.ff_out_bias);
            for pos in 0..n {
                for ((h, &s), &f) in hidden
                    .row_mut(pos)
                    .iter_mut()
                    .zip(sum.row(pos))
                    .zip(ff.row(pos))
                {
                    *h = s + f;
                }
            }
        }

        let final_normed = layer_norm_rows(exec, &hidden, &self.weights.ln_final, eps)?;
        let logits =
            tensor::matmul_transposed_with(exec, &final_normed, &self.weights.token_embedding)?;
        let trace = trace.expect("traced layer index was validated");
        Ok(ForwardOutput { logits, trace })
    }

    #[allow(clippy::too_many_arguments)]
    fn capture(
        &self,
        layer: usize,
        weights: &LayerRef<'_, T>,
        heads: Vec<HeadOutput<T>>,
        residual: &Matrix<T>,
        normed_input: Matrix<T>,
        output: &Matrix<T>,
        sum: &Matrix<T>,
        exec: Execution,
    ) -> Result<AttentionTrace<T>> {
        let cfg = &self.config;
        let share = T::from_usize(cfg.n_heads);
        let bias: Vec<T> = weights.output_bias.iter().map(|&b| b / share).collect();
        let mut attention = Vec::with_capacity(cfg.n_heads);
        let mut values = Vec::with_capacity(cfg.n_heads);
        for (h, head) in heads.into_iter().enumerate() {
            let mut v = tensor::matmul_with(exec, &head.values, &weights.heads[h].output)?;
            v.add_row_vector(&bias);
            values.push(v);
            attention.push(head.attention);
        }
        let ln_out_scale = (0..sum.rows())
            .map(|pos| tensor::mean_and_scale(sum.row(pos), cfg.ln_eps).1)
            .collect();
        Ok(AttentionTrace::new(
            layer,
            cfg.ln_eps,
            attention,
            values,
            residual.clone(),
            normed_input,
            output.clone(),
            weights.ln_out.clone(),
            ln_out_scale,
        ))
    }
}

struct LayerRef<'a, T> {
    heads: &'a [HeadWeights<T>],
    output_bias: &'a [T],
    ln_out: &'a LayerNormParams<T>,
}

fn layer_ref<T>(layer: &LayerWeights<T>) -> LayerRef<'_, T> {
    LayerRef {
        heads: &layer.heads,
        output_bias: &layer.output_bias,
        ln_out: &layer.ln_out,
    }
}

struct HeadOutput<T> {
    /// Packed lower-triangular attention weights, row `i` holding `i + 1` entries.
    attention: Vec<T>,
    /// Value-transformed inputs (`n × d_head`), before the output projection.
    values: Matrix<T>,
    /// Attention-weighted values (`n × d_head`).
    mixed: Matrix<T>,
}

fn project<T: Scalar>(exec: Execution, x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    let mut out = tensor::matmul_with(exec, x, w)?;
    out.add_row_vector(b);
    Ok(out)
}

fn attend<T: Scalar>(
    head: &HeadWeights<T>,
    normed: &Matrix<T>,
    dh: usize,
    exec: Execution,
) -> Result<HeadOutput<T>> {
    let n = normed.rows();
    let q = project(exec, normed, &head.query, &head.query_bias)?;
    let k = project(exec, normed, &head.key, &head.key_bias)?;
    let values = project(exec, normed, &head.value, &head.value_bias)?;
    let scale = T::from_usize(dh).sqrt();
    let mut attention = Vec::with_capacity(n * (n + 1) / 2);
    let mut mixed = Matrix::zeros(n, dh);
    let mut scores = vec![T::zero(); n];
    for i in 0..n {
        for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
            *s = tensor::dot(q.row(i), k.row(j)) / scale;
        }
        let probs = tensor::masked_softmax_row(&scores, i + 1)?;
        let row = mixed.row_mut(i);
        for (j, &p) in probs[..=i].iter().enumerate() {
            for (m, &v) in row.iter_mut().zip(values.row(j)) {
                *m = *m + p * v;
            }
        }
        attention.extend_from_slice(&probs[..=i]);
    }
    Ok(HeadOutput {
        attention,
        values,
        mixed,
    })
}

fn layer_norm_rows<T: Scalar>(
    exec: Execution,
    x: &Matrix<T>,
    params: &LayerNormParams<T>,
    eps: f64,
) -> Result<Matrix<T>> {
    let rows = par::try_map_range(exec, x.rows(), |r| {
        tensor::layer_norm(x.row(r), &params.gain, &params.bias, eps)
    })?;
    Matrix::from_rows(&rows)
}

fn check_shapes<T: Scalar>(cfg: &ModelConfig, w: &ModelWeights<T>) -> Result<()> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let mut problems = Vec::new();
    let mut expect = |what: String, got: (usize, usize), want: (usize, usize)| {
        if got != want {
            problems.push(format!("{what}: {got:?} != {want:?}"));
        }
    };
    expect(
        "token embedding".into(),
        w.token_embedding.shape(),
        (cfg.vocab_size, d),
    );
    expect(
        "position embedding".into(),
        w.position_embedding.shape(),
        (cfg.max_context, d),
    );
    expect("layers".into(), (w.layers.len(), 0), (cfg.n_layers, 0));
    expect(
        "final norm".into(),
        (w.ln_final.gain.len(), w.ln_final.bias.len()),
        (d, d),
    );
    for (l, layer) in w.layers.iter().enumerate() {
        expect(
            format!("layer {l} heads"),
            (layer.heads.len(), 0),
            (cfg.n_heads, 0),
        );
        for (h, head) in layer.heads.iter().enumerate() {
            for (name, m, want) in [
                ("query", &head.query, (d, dh)),
                ("key", &head.key, (d, dh)),
                ("value", &head.value, (d, dh)),
                ("output", &head.output, (dh, d)),
            ] {
                expect(format!("layer {l} head {h} {name}"), m.shape(), want);
            }
            for (name, b) in [
                ("query", &head.query_bias),
                ("key", &head.key_bias),
                ("value", &head.value_bias),
            ] {
                expect(
                    format!("layer {l} head {h} {name} bias"),
                    (b.len(), 0),
                    (dh, 0),
                );
            }
        }
        let ff = layer.ff_in.cols();
        expect(format!("layer {l} ff_in"), layer.ff_in.shape(), (d, ff));
        expect(format!("layer {l} ff_out"), layer.ff_out.shape(), (ff, d));
        expect(
            format!("layer {l} ff biases"),
            (layer.ff_in_bias.len(), layer.ff_out_bias.len()),
            (ff, d),
        );
        expect(
            format!("layer {l} output bias"),
            (layer.output_bias.len(), 0),
            (d, 0),
        );
        expect(
            format!("layer {l} ln_in"),
            (layer.ln_in.gain.len(), layer.ln_in.bias.len()),
            (d, d),
        );
        expect(
            format!("layer {l} ln_out"),
            (layer.ln_out.gain.len(), layer.ln_out.bias.len()),
            (d, d),
        );
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ModelLoad(format!(
            "weights do not match config: {}",
            problems.join("; ")
        )))
    }
}

/// Per-token surprisal `−log p(token_i | tokens_<i)`; position 0 has no context and is `None`.
pub fn surprisal<T: Scalar>(
    logits: &Matrix<T>,
    ids: &[u32],
    base: LogBase,
) -> Result<Vec<Option<f64>>> {
    if logits.rows() != ids.len() {
        return Err(Error::shape(
            "surprisal",
            format!("{} logit rows for {} tokens", logits.rows(), ids.len()),
        ));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (pos, &id) in ids.iter().enumerate() {
        if pos == 0 {
            out.push(None);
            continue;
        }
        let row = logits.row(pos - 1);
        if id as usize >= row.len() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: row.len(),
            });
        }
        out.push(Some(neg_log_softmax(row, id as usize) / base.ln_base()));
    }
    Ok(out)
}

fn neg_log_softmax<T: Scalar>(row: &[T], k: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - row[k].as_f64()
}

/// Largest ∞-norm gap between the fused attention output and its per-head
/// reconstruction `Σ_h Σ_j a_{h,i,j} v_{h,j}`, over all timesteps.
pub fn verify_head_decomposition<T: Scalar>(trace: &AttentionTrace<T>) -> f64 {
    let mut worst = 0.0f64;
    for pos in 0..trace.len() {
        let rebuilt = trace.reconstruct_output(pos);
        for (r, &o) in rebuilt.iter().zip(trace.output().row(pos)) {
            worst = worst.max((r - o.as_f64()).abs());
        }
    }
    worst
}
