//! Checkpoint tensors and the safetensors archive reader/writer.
//!
//! Published GPT-2 checkpoints store every projection as a `Conv1D` weight of shape
//! `[in, out]`, i.e. transposed relative to a conventional `Linear` layer
//! (`[out, in]`). We keep the `[in, out]` orientation in memory because every
//! projection here is computed as `x · W` on row vectors; the fused `c_attn`
//! weight is split into per-head query/key/value blocks on load and the
//! `c_proj` weight into per-head row blocks.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

/// Projections belonging to one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub query: Matrix<T>,
    pub query_bias: Vec<T>,
    pub key: Matrix<T>,
    pub key_bias: Vec<T>,
    pub value: Matrix<T>,
    pub value_bias: Vec<T>,
    /// Rows of the output projection that act on this head's slice (`d_head × d`).
    pub output: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln_in: LayerNormParams<T>,
    pub heads: Vec<HeadWeights<T>>,
    pub output_bias: Vec<T>,
    pub ln_out: LayerNormParams<T>,
    pub ff_in: Matrix<T>,
    pub ff_in_bias: Vec<T>,
    pub ff_out: Matrix<T>,
    pub ff_out_bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub ln_final: LayerNormParams<T>,
}

struct Archive<'a> {
    tensors: SafeTensors<'a>,
    prefix: &'static str,
}

impl<'a> Archive<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let tensors = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::ModelLoad(format!("not a valid tensor archive: {e}")))?;
        // Checkpoints saved from a full LM-head model prefix every name.
        let prefix = if tensors.tensor("wte.weight").is_err()
            && tensors.tensor("transformer.wte.weight").is_ok()
        {
            "transformer."
        } else {
            ""
        };
        Ok(Archive { tensors, prefix })
    }

    fn fetch<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let full = format!("{}{name}", self.prefix);
        let view = self
            .tensors
            .tensor(&full)
            .map_err(|_| Error::ModelLoad(format!("missing tensor `{name}`")))?;
        if view.shape() != shape {
            return Err(Error::ModelLoad(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                view.shape()
            )));
        }
        let values = decode(&view, name)?;
        if let Some(k) = values.iter().position(|v: &T| !v.is_finite()) {
            return Err(Error::ModelLoad(format!(
                "tensor `{name}` has a non-finite value at flat index {k}"
            )));
        }
        Ok(values)
    }

    fn matrix<T: Scalar>(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<T>> {
        Matrix::new(rows, cols, self.fetch(name, &[rows, cols])?)
    }

    fn vector<T: Scalar>(&self, name: &str, len: usize) -> Result<Vec<T>> {
        self.fetch(name, &[len])
    }

    fn shape_of(&self, name: &str) -> Option<Vec<usize>> {
        self.tensors
            .tensor(&format!("{}{name}", self.prefix))
            .ok()
            .map(|v| v.shape().to_vec())
    }
}

fn decode<T: Scalar>(view: &TensorView<'_>, name: &str) -> Result<Vec<T>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))))
            .collect(),
        other => {
            return Err(Error::ModelLoad(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )));
        }
    };
    Ok(out)
}

impl<T: Scalar> ModelWeights<T> {
    /// Parses a safetensors archive held in memory.
    pub fn from_safetensors(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let ar = Archive::new(bytes)?;
        let d = config.d_model;
        let dh = config.d_head();
        let token_embedding = ar.matrix("wte.weight", config.vocab_size, d)?;
        let position_embedding = ar.matrix("wpe.weight", config.max_context, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |suffix: &str| format!("h.{l}.{suffix}");
            let ff = match ar.shape_of(&p("mlp.c_fc.weight")) {
                Some(s) if s.len() == 2 => s[1],
                _ => 4 * d,
            };
            let qkv = ar.matrix::<T>(&p("attn.c_attn.weight"), d, 3 * d)?;
            let qkv_bias = ar.vector::<T>(&p("attn.c_attn.bias"), 3 * d)?;
            let proj = ar.matrix::<T>(&p("attn.c_proj.weight"), d, d)?;
            let heads = (0..config.n_heads)
                .map(|h| {
                    let cols = |part: usize| (part * d + h * dh, part * d + (h + 1) * dh);
                    let (q0, q1) = cols(0);
                    let (k0, k1) = cols(1);
                    let (v0, v1) = cols(2);
                    HeadWeights {
                        query: qkv.col_slice(q0, q1),
                        query_bias: qkv_bias[q0..q1].to_vec(),
                        key: qkv.col_slice(k0, k1),
                        key_bias: qkv_bias[k0..k1].to_vec(),
                        value: qkv.col_slice(v0, v1),
                        value_bias: qkv_bias[v0..v1].to_vec(),
                        output: proj.row_slice(h * dh, (h + 1) * dh),
                    }
                })
                .collect();
            layers.push(LayerWeights {
                ln_in: LayerNormParams {
                    gain: ar.vector(&p("ln_1.weight"), d)?,
                    bias: ar.vector(&p("ln_1.bias"), d)?,
                },
                heads,
                output_bias: ar.vector(&p("attn.c_proj.bias"), d)?,
                ln_out: LayerNormParams {
                    gain: ar.vector(&p("ln_2.weight"), d)?,
                    bias: ar.vector(&p("ln_2.bias"), d)?,
                },
                ff_in: ar.matrix(&p("mlp.c_fc.weight"), d, ff)?,
                ff_in_bias: ar.vector(&p("mlp.c_fc.bias"), ff)?,
                ff_out: ar.matrix(&p("mlp.c_proj.weight"), ff, d)?,
                ff_out_bias: ar.vector(&p("mlp.c_proj.bias"), d)?,
            });
        }
        let ln_final = LayerNormParams {
            gain: ar.vector("ln_f.weight", d)?,
            bias: ar.vector("ln_f.bias", d)?,
        };
        Ok(ModelWeights {
            token_embedding,
            position_embedding,
            layers,
            ln_final,
        })
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_safetensors(&bytes, config)
    }

    /// Serialises to the published GPT-2 layout (`Conv1D` orientation, fused `c_attn`).
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut put = |name: String, shape: Vec<usize>, values: &[T]| {
            let bytes = match T::PRECISION {
                crate::tensor::Precision::F32 => values
                    .iter()
                    .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
                    .collect(),
                crate::tensor::Precision::F64 => values
                    .iter()
                    .flat_map(|v| v.as_f64().to_le_bytes())
                    .collect(),
            };
            tensors.push((name, shape, bytes));
        };
        let mat = |m: &Matrix<T>| (vec![m.rows(), m.cols()], m.data().to_vec());
        let (s, v) = mat(&self.token_embedding);
        put("wte.weight".into(), s, &v);
        let (s, v) = mat(&self.position_embedding);
        put("wpe.weight".into(), s, &v);
        for (l, layer) in self.layers.iter().enumerate() {
            let d = layer.output_bias.len();
            let mut qkv = Matrix::<T>::zeros(d, 3 * d);
            let mut qkv_bias = vec![T::zero(); 3 * d];
            let mut proj = Vec::with_capacity(d * d);
            let mut col = 0;
            for part in 0..3 {
                for head in &layer.heads {
                    let (w, b) = match part {
                        0 => (&head.query, &head.query_bias),
                        1 => (&head.key, &head.key_bias),
                        _ => (&head.value, &head.value_bias),
                    };
                    for r in 0..d {
                        for c in 0..w.cols() {
                            qkv.set(r, col + c, w.get(r, c));
                        }
                    }
                    qkv_bias[col..col + b.len()].copy_from_slice(b);
                    col += w.cols();
                }
            }
            for head in &layer.heads {
                proj.extend_from_slice(head.output.data());
            }
            put(format!("h.{l}.ln_1.weight"), vec![d], &layer.ln_in.gain);
            put(format!("h.{l}.ln_1.bias"), vec![d], &layer.ln_in.bias);
            put(
                format!("h.{l}.attn.c_attn.weight"),
                vec![d, 3 * d],
                qkv.data(),
            );
            put(format!("h.{l}.attn.c_attn.bias"), vec![3 * d], &qkv_bias);
            put(format!("h.{l}.attn.c_proj.weight"), vec![d, d], &proj);
            put(
                format!("h.{l}.attn.c_proj.bias"),
                vec![d],
                &layer.output_bias,
            );
            put(format!("h.{l}.ln_2.weight"), vec![d], &layer.ln_out.gain);
            put(format!("h.{l}.ln_2.bias"), vec![d], &layer.ln_out.bias);
            let (s, v) = mat(&layer.ff_in);
            put(format!("h.{l}.mlp.c_fc.weight"), s, &v);
            put(
                format!("h.{l}.mlp.c_fc.bias"),
                vec![layer.ff_in_bias.len()],
                &layer.ff_in_bias,
            );
            let (s, v) = mat(&layer.ff_out);
            put(format!("h.{l}.mlp.c_proj.weight"), s, &v);
            put(
                format!("h.{l}.mlp.c_proj.bias"),
                vec![d],
                &layer.ff_out_bias,
            );
        }
        put(
            "ln_f.weight".into(),
            vec![self.ln_final.gain.len()],
            &self.ln_final.gain,
        );
        put(
            "ln_f.bias".into(),
            vec![self.ln_final.bias.len()],
            &self.ln_final.bias,
        );

        let dtype = match T::PRECISION {
            crate::tensor::Precision::F32 => Dtype::F32,
            crate::tensor::Precision::F64 => Dtype::F64,
        };
        let views = tensors
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::ModelLoad(format!("cannot serialise `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::tensor::serialize(views, None::<HashMap<String, String>>)
            .map_err(|e| Error::ModelLoad(format!("cannot serialise archive: {e}")))
    }

    /// Seeded random weights for tests and the self-test. Projections are drawn
    /// with standard deviation `1/√fan_in` so activations stay O(1) at any width.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
        let d = config.d_model;
        let dh = config.d_head();
        let ff = 4 * d;
        let token_embedding = s.projection(config.vocab_size, d);
        let position_embedding = s.projection(config.max_context, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln_in: s.layer_norm(d),
                heads: (0..config.n_heads)
                    .map(|_| HeadWeights {
                        query: s.projection(d, dh),
                        query_bias: s.normal(dh, 0.0, 0.1),
                        key: s.projection(d, dh),
                        key_bias: s.normal(dh, 0.0, 0.1),
                        value: s.projection(d, dh),
                        value_bias: s.normal(dh, 0.0, 0.1),
                        output: s.projection_scaled(dh, d, d),
                    })
                    .collect(),
                output_bias: s.normal(d, 0.0, 0.1),
                ln_out: s.layer_norm(d),
                ff_in: s.projection(d, ff),
                ff_in_bias: s.normal(ff, 0.0, 0.1),
                ff_out: s.projection(ff, d),
                ff_out_bias: s.normal(d, 0.0, 0.1),
            })
            .collect();
        let ln_final = s.layer_norm(d);
        Ok(ModelWeights {
            token_embedding,
            position_embedding,
            layers,
            ln_final,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let ln = |p: &LayerNormParams<T>| LayerNormParams {
            gain: cast_vec(&p.gain),
            bias: cast_vec(&p.bias),
        };
        ModelWeights {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln_in: ln(&l.ln_in),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadWeights {
                            query: h.query.cast(),
                            query_bias: cast_vec(&h.query_bias),
                            key: h.key.cast(),
                            key_bias: cast_vec(&h.key_bias),
                            value: h.value.cast(),
                            value_bias: cast_vec(&h.value_bias),
                            output: h.output.cast(),
                        })
                        .collect(),
                    output_bias: cast_vec(&l.output_bias),
                    ln_out: ln(&l.ln_out),
                    ff_in: l.ff_in.cast(),
                    ff_in_bias: cast_vec(&l.ff_in_bias),
                    ff_out: l.ff_out.cast(),
                    ff_out_bias: cast_vec(&l.ff_out_bias),
                })
                .collect(),
            ln_final: ln(&self.ln_final),
        }
    }
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn normal<T: Scalar>(&mut self, n: usize, mean: f64, sd: f64) -> Vec<T> {
        let dist = Normal::new(mean, sd).expect("valid normal");
        (0..n)
            .map(|_| T::from_f64(dist.sample(&mut self.0)))
            .collect()
    }

    fn projection<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        self.projection_scaled(rows, cols, rows)
    }

    fn projection_scaled<T: Scalar>(
        &mut self,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> Matrix<T> {
        let data = self.normal(rows * cols, 0.0, 1.0 / (fan_in as f64).sqrt());
        Matrix::new(rows, cols, data).expect("shape")
    }

    fn layer_norm<T: Scalar>(&mut self, d: usize) -> LayerNormParams<T> {
        LayerNormParams {
            gain: self.normal(d, 1.0, 0.2),
            bias: self.normal(d, 0.0, 0.1),
        }
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64(x.as_f64())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_context: 6,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn archive_round_trip() {
        let cfg = tiny();
        let w = ModelWeights::<f32>::random(&cfg, 5).unwrap();
        let bytes = w.to_safetensors().unwrap();
        let back = ModelWeights::<f32>::from_safetensors(&bytes, &cfg).unwrap();
        assert_eq!(w, back);
        // Header length prefix is little-endian u64, followed by a JSON header.
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(
            header["h.1.attn.c_attn.weight"]["shape"],
            serde_json::json!([8, 24])
        );
        assert_eq!(header["wte.weight"]["dtype"], "F32");
    }

    #[test]
    fn missing_tensor_is_named() {
        let cfg = tiny();
        let w = ModelWeights::<f32>::random(&cfg, 5).unwrap();
        let bytes = w.to_safetensors().unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let kept: Vec<(String, TensorView<'_>)> = st
            .tensors()
            .into_iter()
            .filter(|(n, _)| n != "ln_f.weight")
            .collect();
        let pruned = safetensors::tensor::serialize(kept, None).unwrap();
        let err = ModelWeights::<f32>::from_safetensors(&pruned, &cfg).unwrap_err();
        assert!(err.to_string().contains("ln_f.weight"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = tiny();
        let w = ModelWeights::<f32>::random(&cfg, 5).unwrap();
        let bytes = w.to_safetensors().unwrap();
        let wider = ModelConfig {
            vocab_size: 12,
            ..cfg
        };
        let err = ModelWeights::<f32>::from_safetensors(&bytes, &wider).unwrap_err();
        assert!(err.to_string().contains("wte.weight"), "{err}");
    }

    #[test]
    fn non_finite_value_is_rejected() {
        let cfg = tiny();
        let mut w = ModelWeights::<f32>::random(&cfg, 5).unwrap();
        w.layers[1].ff_out_bias[3] = f32::NAN;
        let bytes = w.to_safetensors().unwrap();
        let err = ModelWeights::<f32>::from_safetensors(&bytes, &cfg).unwrap_err();
        assert!(err.to_string().contains("h.1.mlp.c_proj.bias"), "{err}");
    }

    #[test]
    fn prefixed_names_are_accepted() {
        let cfg = tiny();
        let w = ModelWeights::<f32>::random(&cfg, 6).unwrap();
        let bytes = w.to_safetensors().unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let renamed: Vec<(String, TensorView<'_>)> = st
            .tensors()
            .into_iter()
            .map(|(n, v)| (format!("transformer.{n}"), v))
            .collect();
        let prefixed = safetensors::tensor::serialize(renamed, None).unwrap();
        assert_eq!(
            ModelWeights::<f32>::from_safetensors(&prefixed, &cfg).unwrap(),
            w
        );
    }
}
