//! Sequential models built from [`Block`]s, with seeded initialization and
//! parameter (de)serialization.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, NormDivisor};
use crate::error::{Error, Result};
use crate::layers::*;
use crate::tensor::{PatchGeometry, Tensor};

#[derive(Clone, Debug)]
pub struct Model {
    pub params: Vec<Param>,
    pub blocks: Vec<Block>,
    /// Shape of one record, without the batch axis.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Model {
    /// Runs the model on a batch and returns the forward state and the
    /// logits node. With `retain`, layer caches are recorded and their
    /// pre-activations retained on the tape.
    pub fn forward(&self, x: &Tensor, retain: bool) -> Result<(Forward, NodeId)> {
        if x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects records of shape {:?}, got batch {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut f = Forward::new(&self.params, retain);
        let mut h = f.tape.input(x.clone());
        for b in &self.blocks {
            h = b.forward(&mut f, h)?;
        }
        let shape = f.tape.shape(h);
        if shape.len() != 2 || shape[1] != self.num_classes {
            return Err(Error::Dimension(format!("model output {shape:?} is not [τ, {}] logits", self.num_classes)));
        }
        Ok((f, h))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of distinct parameter groups (parametrized layers).
    pub fn group_count(&self) -> usize {
        let mut groups: Vec<usize> = self.params.iter().map(|p| p.group).collect();
        groups.sort_unstable();
        groups.dedup();
        groups.len()
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Writes `<stem>.bin` (little-endian f64 values) and `<stem>.json`
    /// (names, shapes, element offsets).
    pub fn save_params(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.param_count() * 8);
        let mut manifest = Vec::new();
        let mut offset = 0;
        for p in &self.params {
            manifest.push(ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
            offset += p.value.len();
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(with_ext(stem, "bin"), bytes)?;
        fs::write(with_ext(stem, "json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads parameters written by [`Model::save_params`] into a model of
    /// the same architecture.
    pub fn load_params(&mut self, stem: &Path) -> Result<()> {
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(with_ext(stem, "json"))?)?;
        let bytes = fs::read(with_ext(stem, "bin"))?;
        if manifest.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "manifest lists {} tensors, model has {}",
                manifest.len(),
                self.params.len()
            )));
        }
        if bytes.len() != self.param_count() * 8 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("expected {} bytes of parameters", self.param_count() * 8),
            });
        }
        for (i, entry) in manifest.iter().enumerate() {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let chunk = bytes.get(start..start + n * 8).ok_or(Error::Format {
                offset: start,
                msg: format!("tensor {} runs past the end of the file", entry.name),
            })?;
            let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            self.set_param(ParamId(i), Tensor::new(entry.shape.clone(), data)?)?;
        }
        Ok(())
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Appends layers to a model, creating their parameters with seeded
/// Glorot-uniform weights and zero biases.
pub struct ModelBuilder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    blocks: Vec<Block>,
    groups: usize,
    input_shape: Vec<usize>,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            blocks: Vec::new(),
            groups: 0,
            input_shape: input_shape.to_vec(),
        }
    }

    fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param { name: format!("{}.{name}", self.groups), value: Arc::new(value), group: self.groups });
        id
    }

    fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    fn finish_layer(&mut self, block: Block) -> &mut Self {
        self.groups += 1;
        self.blocks.push(block);
        self
    }

    pub fn linear(&mut self, input: usize, output: usize) -> &mut Self {
        let w = self.glorot(&[output, input], input, output);
        let weight = self.add_param("weight", w);
        let bias = self.add_param("bias", Tensor::zeros(&[output]));
        self.finish_layer(Block::Linear(Linear { weight, bias, in_features: input, out_features: output }))
    }

    /// Stride-1 unpadded convolution; `kernel` has 2 or 3 entries.
    pub fn conv(&mut self, c_in: usize, c_out: usize, kernel: &[usize]) -> &mut Self {
        let k: usize = kernel.iter().product();
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        let w = self.glorot(&shape, c_in * k, c_out * k);
        let weight = self.add_param("weight", w);
        let bias = self.add_param("bias", Tensor::zeros(&[c_out]));
        self.finish_layer(Block::Conv(Conv {
            weight,
            bias,
            in_channels: c_in,
            out_channels: c_out,
            geometry: PatchGeometry::new(kernel, 1),
        }))
    }

    fn recurrent_params(&mut self, input: usize, hidden: usize, rows: usize) -> (ParamId, ParamId, ParamId) {
        let wh = self.glorot(&[rows, hidden], hidden, rows);
        let wx = self.glorot(&[rows, input], input, rows);
        (self.add_param("weight_h", wh), self.add_param("weight_x", wx), self.add_param("bias", Tensor::zeros(&[rows])))
    }

    pub fn rnn(&mut self, input: usize, hidden: usize) -> &mut Self {
        let (weight_h, weight_x, bias) = self.recurrent_params(input, hidden, hidden);
        self.finish_layer(Block::Rnn(Rnn { weight_h, weight_x, bias, input, hidden }))
    }

    pub fn lstm(&mut self, input: usize, hidden: usize) -> &mut Self {
        let (weight_h, weight_x, bias) = self.recurrent_params(input, hidden, 4 * hidden);
        self.finish_layer(Block::Lstm(Lstm { weight_h, weight_x, bias, input, hidden }))
    }

    pub fn layer_norm(&mut self, width: usize, divisor: NormDivisor) -> &mut Self {
        let gamma = self.add_param("gamma", Tensor::full(&[width], 1.0));
        let beta = self.add_param("beta", Tensor::zeros(&[width]));
        self.finish_layer(Block::LayerNorm(LayerNorm { gamma, beta, width, divisor }))
    }

    pub fn attention(&mut self, d_model: usize, heads: usize, scaling: AttentionScaling) -> &mut Self {
        let weights = ["wq", "wk", "wv", "wo"].map(|n| {
            let w = self.glorot(&[d_model, d_model], d_model, d_model);
            self.add_param(n, w)
        });
        self.finish_layer(Block::Attention(Attention { weights, d_model, heads, scaling }))
    }

    /// Token embedding with a random table; frozen unless `trainable`.
    pub fn embedding(&mut self, vocab: usize, dim: usize, positional: bool, trainable: bool) -> &mut Self {
        let table = self.glorot(&[vocab, dim], vocab, dim);
        if trainable {
            let id = self.add_param("table", table);
            self.finish_layer(Block::Embedding(Embedding {
                table: Arc::clone(&self.params[id.0].value),
                trainable: Some(id),
                positional,
            }))
        } else {
            self.blocks.push(Block::Embedding(Embedding { table: Arc::new(table), trainable: None, positional }));
            self
        }
    }

    pub fn activation(&mut self, a: Activation) -> &mut Self {
        self.blocks.push(Block::Activation(a));
        self
    }

    pub fn max_pool2d(&mut self, kernel: usize, stride: usize) -> &mut Self {
        self.blocks.push(Block::MaxPool2d { kernel, stride });
        self
    }

    pub fn flatten(&mut self) -> &mut Self {
        self.blocks.push(Block::Flatten);
        self
    }

    pub fn mean_over_sequence(&mut self) -> &mut Self {
        self.blocks.push(Block::MeanOverSequence);
        self
    }

    /// Wraps the layers added by `inner` in a skip connection.
    pub fn residual(&mut self, inner: impl FnOnce(&mut Self)) -> &mut Self {
        let outer = std::mem::take(&mut self.blocks);
        inner(self);
        let body = std::mem::replace(&mut self.blocks, outer);
        self.blocks.push(Block::Residual(body));
        self
    }

    pub fn build(&mut self, num_classes: usize) -> Model {
        Model {
            params: std::mem::take(&mut self.params),
            blocks: std::mem::take(&mut self.blocks),
            input_shape: self.input_shape.clone(),
            num_classes,
        }
    }
}
