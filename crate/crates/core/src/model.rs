//! Minimal GPT-2-style evaluator: pre-LayerNorm blocks, causal multi-head
//! attention, exact-erf GELU MLPs. Scores full sequences only; records MLP
//! hidden activations and supports zeroing individual hidden units.
//!
//! Weight archive schema (`.nta`, metadata key `config` holds the JSON
//! [`ModelConfig`]):
//!
//! | entry                    | shape                      |
//! |--------------------------|----------------------------|
//! | `wte`                    | `[vocab_size, d_model]`    |
//! | `wpe`                    | `[max_seq_len, d_model]`   |
//! | `layer.{i}.ln1.weight`   | `[d_model]` (also `.bias`) |
//! | `layer.{i}.attn.w_qkv`   | `[d_model, 3·d_model]`     |
//! | `layer.{i}.attn.b_qkv`   | `[3·d_model]`              |
//! | `layer.{i}.attn.w_o`     | `[d_model, d_model]`       |
//! | `layer.{i}.attn.b_o`     | `[d_model]`                |
//! | `layer.{i}.ln2.weight`   | `[d_model]` (also `.bias`) |
//! | `layer.{i}.mlp.w_in`     | `[d_model, d_mlp]`         |
//! | `layer.{i}.mlp.b_in`     | `[d_mlp]`                  |
//! | `layer.{i}.mlp.w_out`    | `[d_mlp, d_model]`         |
//! | `layer.{i}.mlp.b_out`    | `[d_model]`                |
//! | `ln_f.weight`, `ln_f.bias` | `[d_model]`              |
//! | `unembed` (optional)     | `[d_model, vocab_size]`, tied to `wteᵀ` when absent |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{read_archive, write_archive, ArchiveReader, Tensor, TensorArchive};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: u16,
    pub d_model: u32,
    pub n_heads: u16,
    pub d_mlp: u32,
    pub vocab_size: u32,
    pub max_seq_len: u32,
    #[serde(default = "default_eps")]
    pub layernorm_eps: f32,
}

fn default_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("n_layers, d_model and n_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads as u32) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_mlp == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_mlp, vocab_size and max_seq_len must be positive".into()));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn total_neurons(&self) -> u64 {
        self.n_layers as u64 * self.d_mlp as u64
    }
}

/// An MLP hidden unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: u16,
    pub index: u32,
}

impl NeuronId {
    pub fn new(layer: u16, index: u32) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub w_qkv: Array2<f32>,
    pub b_qkv: Array1<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
    pub ln2: LayerNorm,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    pub wte: Array2<f32>,
    pub wpe: Array2<f32>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: LayerNorm,
    pub unembed: Array2<f32>,
}

fn check_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{name}: shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

fn check_finite<'a>(name: &str, values: impl IntoIterator<Item = &'a f32>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn config_from_metadata(metadata: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let raw = metadata
        .get("config")
        .ok_or_else(|| Error::Config("weight archive has no `config` metadata".into()))?;
    let config: ModelConfig = serde_json::from_str(raw).map_err(|e| Error::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

impl ModelWeights {
    /// Validates shapes and finiteness against `config`.
    pub fn new(
        config: ModelConfig,
        wte: Array2<f32>,
        wpe: Array2<f32>,
        blocks: Vec<BlockWeights>,
        ln_f: LayerNorm,
        unembed: Array2<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let w = Self {
            config,
            wte,
            wpe,
            blocks,
            ln_f,
            unembed,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        let (d, m, v, t) = (
            c.d_model as usize,
            c.d_mlp as usize,
            c.vocab_size as usize,
            c.max_seq_len as usize,
        );
        check_shape("wte", self.wte.shape(), &[v, d])?;
        check_shape("wpe", self.wpe.shape(), &[t, d])?;
        check_shape("unembed", self.unembed.shape(), &[d, v])?;
        check_shape("ln_f.weight", self.ln_f.weight.shape(), &[d])?;
        check_shape("ln_f.bias", self.ln_f.bias.shape(), &[d])?;
        if self.blocks.len() != c.n_layers as usize {
            return Err(Error::Shape(format!(
                "{} blocks for n_layers {}",
                self.blocks.len(),
                c.n_layers
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("layer.{i}.{n}");
            check_shape(&p("ln1.weight"), b.ln1.weight.shape(), &[d])?;
            check_shape(&p("ln1.bias"), b.ln1.bias.shape(), &[d])?;
            check_shape(&p("attn.w_qkv"), b.w_qkv.shape(), &[d, 3 * d])?;
            check_shape(&p("attn.b_qkv"), b.b_qkv.shape(), &[3 * d])?;
            check_shape(&p("attn.w_o"), b.w_o.shape(), &[d, d])?;
            check_shape(&p("attn.b_o"), b.b_o.shape(), &[d])?;
            check_shape(&p("ln2.weight"), b.ln2.weight.shape(), &[d])?;
            check_shape(&p("ln2.bias"), b.ln2.bias.shape(), &[d])?;
            check_shape(&p("mlp.w_in"), b.w_in.shape(), &[d, m])?;
            check_shape(&p("mlp.b_in"), b.b_in.shape(), &[m])?;
            check_shape(&p("mlp.w_out"), b.w_out.shape(), &[m, d])?;
            check_shape(&p("mlp.b_out"), b.b_out.shape(), &[d])?;
        }
        for (name, t) in self.named_tensors() {
            check_finite(&name, t.data.iter())?;
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let vec1 = |name: String, a: &Array1<f32>| {
            let t = Tensor {
                name: name.clone(),
                shape: vec![a.len() as u64],
                data: a.to_vec(),
            };
            (name, t)
        };
        let mat = |name: String, a: &Array2<f32>| (name.clone(), Tensor::from_array2(name, a.view()));
        let mut tensors = vec![mat("wte".into(), &self.wte), mat("wpe".into(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("layer.{i}.{n}");
            tensors.push(vec1(p("ln1.weight"), &b.ln1.weight));
            tensors.push(vec1(p("ln1.bias"), &b.ln1.bias));
            tensors.push(mat(p("attn.w_qkv"), &b.w_qkv));
            tensors.push(vec1(p("attn.b_qkv"), &b.b_qkv));
            tensors.push(mat(p("attn.w_o"), &b.w_o));
            tensors.push(vec1(p("attn.b_o"), &b.b_o));
            tensors.push(vec1(p("ln2.weight"), &b.ln2.weight));
            tensors.push(vec1(p("ln2.bias"), &b.ln2.bias));
            tensors.push(mat(p("mlp.w_in"), &b.w_in));
            tensors.push(vec1(p("mlp.b_in"), &b.b_in));
            tensors.push(mat(p("mlp.w_out"), &b.w_out));
            tensors.push(vec1(p("mlp.b_out"), &b.b_out));
        }
        tensors.push(vec1("ln_f.weight".into(), &self.ln_f.weight));
        tensors.push(vec1("ln_f.bias".into(), &self.ln_f.bias));
        tensors.push(mat("unembed".into(), &self.unembed));
        tensors
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            metadata: BTreeMap::from([
                ("kind".to_string(), "gpt2_weights".to_string()),
                (
                    "config".to_string(),
                    serde_json::to_string(&self.config).expect("config serializes"),
                ),
            ]),
            tensors: self.named_tensors().into_iter().map(|(_, t)| t).collect(),
        }
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let config = config_from_metadata(&archive.metadata)?;
        let mat = |name: &str| archive.require(name)?.to_array2();
        let vec1 = |name: &str| -> Result<Array1<f32>> {
            let t = archive.require(name)?;
            if t.shape.len() != 1 {
                return Err(Error::Shape(format!("{name}: expected rank 1, got {:?}", t.shape)));
            }
            Ok(Array1::from(t.data.clone()))
        };
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: vec1(&format!("{prefix}.weight"))?,
                bias: vec1(&format!("{prefix}.bias"))?,
            })
        };
        let blocks = (0..config.n_layers)
            .map(|i| {
                let p = |n: &str| format!("layer.{i}.{n}");
                Ok(BlockWeights {
                    ln1: ln(&p("ln1"))?,
                    w_qkv: mat(&p("attn.w_qkv"))?,
                    b_qkv: vec1(&p("attn.b_qkv"))?,
                    w_o: mat(&p("attn.w_o"))?,
                    b_o: vec1(&p("attn.b_o"))?,
                    ln2: ln(&p("ln2"))?,
                    w_in: mat(&p("mlp.w_in"))?,
                    b_in: vec1(&p("mlp.b_in"))?,
                    w_out: mat(&p("mlp.w_out"))?,
                    b_out: vec1(&p("mlp.b_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let wte = mat("wte")?;
        let unembed = match archive.get("unembed") {
            Some(t) => t.to_array2()?,
            None => wte.t().to_owned(),
        };
        Self::new(config, wte, mat("wpe")?, blocks, ln("ln_f")?, unembed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&read_archive(path)?)
    }

    /// Reads only the header of a weight archive.
    pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
        config_from_metadata(ArchiveReader::open(path)?.metadata())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_archive(&self.to_archive(), path)
    }

    /// Zeroes row `index` of the MLP output projection in `layer`, removing
    /// the neuron's contribution to the residual stream.
    pub fn zero_mlp_output_row(&mut self, n: NeuronId) -> Result<()> {
        self.check_neuron(n)?;
        self.blocks[n.layer as usize]
            .w_out
            .row_mut(n.index as usize)
            .fill(0.0);
        Ok(())
    }

    fn check_neuron(&self, n: NeuronId) -> Result<()> {
        if n.layer >= self.config.n_layers || n.index >= self.config.d_mlp {
            return Err(Error::InvalidArgument(format!(
                "neuron {n} outside {} layers × {} neurons",
                self.config.n_layers, self.config.d_mlp
            )));
        }
        Ok(())
    }
}

/// Neurons whose post-GELU activation is forced to zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AblationMask {
    zeroed: BTreeSet<NeuronId>,
}

impl AblationMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(neurons: impl IntoIterator<Item = NeuronId>) -> Self {
        Self {
            zeroed: neurons.into_iter().collect(),
        }
    }

    /// Every neuron of every layer.
    pub fn all(config: &ModelConfig) -> Self {
        Self::new(
            (0..config.n_layers)
                .flat_map(|l| (0..config.d_mlp).map(move |k| NeuronId::new(l, k))),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.zeroed.is_empty()
    }

    pub fn len(&self) -> usize {
        self.zeroed.len()
    }

    pub fn neurons(&self) -> impl Iterator<Item = &NeuronId> {
        self.zeroed.iter()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self
            .zeroed
            .iter()
            .find(|n| n.layer >= config.n_layers || n.index >= config.d_mlp)
        {
            Some(n) => Err(Error::InvalidArgument(format!(
                "ablation mask neuron {n} outside {} layers × {} neurons",
                config.n_layers, config.d_mlp
            ))),
            None => Ok(()),
        }
    }

    fn layer_indices(&self, layer: u16) -> Vec<usize> {
        self.zeroed
            .range(NeuronId::new(layer, 0)..=NeuronId::new(layer, u32::MAX))
            .map(|n| n.index as usize)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// positions × vocab
    pub logits: Array2<f32>,
    /// Per layer, positions × d_mlp post-GELU hidden activations as they
    /// entered the output projection (masked units read zero).
    pub mlp_activations: Option<Vec<Array2<f32>>>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: ArrayView2<f32>, ln: &LayerNorm, eps: f32) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros(x.raw_dim());
    let d = x.ncols() as f64;
    for (row, mut o) in x.outer_iter().zip(out.outer_iter_mut()) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, o) in o.iter_mut().enumerate() {
            *o = ((row[j] as f64 - mean) * inv * ln.weight[j] as f64 + ln.bias[j] as f64) as f32;
        }
    }
    out
}

fn affine(x: ArrayView2<f32>, w: &Array2<f32>, b: &Array1<f32>) -> Array2<f32> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn attention(x: ArrayView2<f32>, b: &BlockWeights, n_heads: usize) -> Array2<f32> {
    let (t, d) = x.dim();
    let dh = d / n_heads;
    let qkv = affine(x, &b.w_qkv, &b.b_qkv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = Array2::<f32>::zeros((t, d));
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let scores = q.dot(&k.t());
        let mut probs = Array2::<f32>::zeros((t, t));
        for i in 0..t {
            let row = scores.row(i);
            let max = (0..=i)
                .map(|j| row[j] as f64 * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = (0..=i).map(|j| (row[j] as f64 * scale - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[[i, j]] = (e / z) as f32;
            }
        }
        merged
            .slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&probs.dot(&v));
    }
    affine(merged.view(), &b.w_o, &b.b_o)
}

/// Scores `tokens` with `weights`, zeroing the hidden units in `mask`.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    mask: &AblationMask,
    record: bool,
) -> Result<ForwardOutput> {
    let c = weights.config();
    if tokens.len() > c.max_seq_len as usize {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: c.max_seq_len as usize,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: c.vocab_size,
        });
    }
    mask.validate(c)?;

    let t = tokens.len();
    let d = c.d_model as usize;
    let mut resid = Array2::<f32>::zeros((t, d));
    for (p, &tok) in tokens.iter().enumerate() {
        let mut row = resid.row_mut(p);
        row.assign(&weights.wte.row(tok as usize));
        row += &weights.wpe.row(p);
    }

    let mut recorded = record.then(|| Vec::with_capacity(c.n_layers as usize));
    for (l, b) in weights.blocks.iter().enumerate() {
        let a = attention(
            layer_norm(resid.view(), &b.ln1, c.layernorm_eps).view(),
            b,
            c.n_heads as usize,
        );
        resid += &a;

        let h_in = layer_norm(resid.view(), &b.ln2, c.layernorm_eps);
        let mut hidden = affine(h_in.view(), &b.w_in, &b.b_in);
        hidden.mapv_inplace(|v| gelu(v as f64) as f32);
        for k in mask.layer_indices(l as u16) {
            hidden.column_mut(k).fill(0.0);
        }
        let mlp_out = affine(hidden.view(), &b.w_out, &b.b_out);
        resid += &mlp_out;
        if let Some(r) = recorded.as_mut() {
            r.push(hidden);
        }
    }

    let fin = layer_norm(resid.view(), &weights.ln_f, c.layernorm_eps);
    let logits = fin.dot(&weights.unembed);
    check_finite("logits", logits.iter())?;
    Ok(ForwardOutput {
        logits,
        mlp_activations: recorded,
    })
}

/// Row-wise log-softmax in f64.
pub fn log_softmax(logits: ArrayView1<f32>) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max
        + logits
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Sum of next-token cross-entropy over positions `0..n-1` and the number
/// of predicted positions.
pub fn loss_sum(logits: ArrayView2<f32>, tokens: &[u32]) -> Result<(f64, u64)> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(
            "loss needs at least 2 tokens".into(),
        ));
    }
    if logits.nrows() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} tokens",
            logits.nrows(),
            tokens.len()
        )));
    }
    let v = logits.ncols();
    let mut total = 0.0;
    for (p, &next) in tokens.iter().enumerate().skip(1) {
        if next as usize >= v {
            return Err(Error::TokenOutOfRange {
                id: next,
                vocab_size: v as u32,
            });
        }
        total -= log_softmax(logits.row(p - 1))[next as usize];
    }
    Ok((total, tokens.len() as u64 - 1))
}

/// Mean next-token cross-entropy.
pub fn loss(logits: ArrayView2<f32>, tokens: &[u32]) -> Result<f64> {
    let (sum, n) = loss_sum(logits, tokens)?;
    Ok(sum / n as f64)
}

/// KL(P‖Q) for two probability rows, with `0·log(0/q) = 0`.
pub fn kl_from_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// KL(P_t‖Q_t) for one pair of logit rows. Both rows are softmax inputs, so
/// Q_t never has an exact zero and no flooring is applied.
pub fn kl_logit_row(original: ArrayView1<f32>, ablated: ArrayView1<f32>) -> f64 {
    let lp = log_softmax(original);
    let lq = log_softmax(ablated);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    // rounding can push the sum of a near-zero divergence slightly negative
    kl.max(0.0)
}

/// Sum over positions of per-position KL and the number of positions.
pub fn kl_sum(original: ArrayView2<f32>, ablated: ArrayView2<f32>) -> Result<(f64, u64)> {
    if original.dim() != ablated.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {:?}",
            original.dim(),
            ablated.dim()
        )));
    }
    let total = original
        .axis_iter(Axis(0))
        .zip(ablated.axis_iter(Axis(0)))
        .map(|(p, q)| kl_logit_row(p, q))
        .sum();
    Ok((total, original.nrows() as u64))
}

/// Mean over positions of KL(original_t ‖ ablated_t).
pub fn kl_divergence(original: &ForwardOutput, ablated: &ForwardOutput) -> Result<f64> {
    let (sum, n) = kl_sum(original.logits.view(), ablated.logits.view())?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Row sums of softmax(logits), for invariant checks.
pub fn softmax_row_sums(logits: ArrayView2<f32>) -> Vec<f64> {
    logits
        .outer_iter()
        .map(|r| log_softmax(r).iter().map(|v| v.exp()).sum())
        .collect()
}

pub fn max_abs_diff(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f32 {
    let mut m = 0.0f32;
    Zip::from(a).and(b).for_each(|&x, &y| m = m.max((x - y).abs()));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_weights, InitScale};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 12,
            vocab_size: 17,
            max_seq_len: 10,
            layernorm_eps: 1e-5,
        }
    }

    fn toy(seed: u64) -> ModelWeights {
        random_weights(&toy_config(), &InitScale::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gelu_matches_reference_values() {
        // GELU(x) = x·Φ(x); Φ(1) = 0.841344746068543, Φ(-0.5) = 0.308537538725987
        assert!((gelu(1.0) - 0.841344746068543).abs() < 1e-14);
        assert!((gelu(-0.5) + 0.5 * 0.308537538725987).abs() < 1e-14);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let w = toy(0);
        assert!(matches!(
            forward(&w, &[17], &AblationMask::empty(), false),
            Err(Error::TokenOutOfRange { id: 17, .. })
        ));
        assert!(matches!(
            forward(&w, &[0; 11], &AblationMask::empty(), false),
            Err(Error::SequenceTooLong { .. })
        ));
        let bad = AblationMask::new([NeuronId::new(0, 12)]);
        assert!(forward(&w, &[0, 1], &bad, false).is_err());
    }

    #[test]
    fn non_finite_weights_rejected() {
        let mut a = toy(1).to_archive();
        let t = a.tensors.iter_mut().find(|t| t.name == "layer.1.mlp.w_in").unwrap();
        t.data[3] = f32::NAN;
        assert!(matches!(
            ModelWeights::from_archive(&a),
            Err(Error::NonFinite(n)) if n == "layer.1.mlp.w_in"
        ));
    }

    #[test]
    fn archive_round_trip_and_tied_unembed() {
        let d = tempfile::tempdir().unwrap();
        let w = toy(2);
        w.save(d.path().join("w.nta")).unwrap();
        assert_eq!(ModelWeights::load(d.path().join("w.nta")).unwrap(), w);
        assert_eq!(&ModelWeights::read_config(d.path().join("w.nta")).unwrap(), w.config());

        let mut a = w.to_archive();
        a.tensors.retain(|t| t.name != "unembed");
        let tied = ModelWeights::from_archive(&a).unwrap();
        assert_eq!(tied.unembed, w.wte.t());
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let w = toy(3);
        let toks = [1, 5, 16, 0, 3, 3, 9];
        let a = forward(&w, &toks, &AblationMask::empty(), true).unwrap();
        let b = forward(&w, &toks, &AblationMask::empty(), true).unwrap();
        assert_eq!(a, b);
        for s in softmax_row_sums(a.logits.view()) {
            assert!((s - 1.0).abs() < 1e-5);
        }
        let acts = a.mlp_activations.unwrap();
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[0].dim(), (7, 12));
    }

    #[test]
    fn causal_prefix_invariance() {
        let w = toy(4);
        let full = forward(&w, &[4, 2, 8, 1, 9], &AblationMask::empty(), false).unwrap();
        let prefix = forward(&w, &[4, 2, 8], &AblationMask::empty(), false).unwrap();
        assert!(max_abs_diff(full.logits.slice(s![..3, ..]), prefix.logits.view()) < 1e-5);
    }

    #[test]
    fn masked_neuron_reads_zero_and_matches_zeroed_row() {
        let mut w = toy(5);
        let toks = [3, 1, 4, 1, 5, 9, 2, 6];
        let n = NeuronId::new(1, 7);
        let masked = forward(&w, &toks, &AblationMask::new([n]), true).unwrap();
        let acts = masked.mlp_activations.as_ref().unwrap();
        assert!(acts[1].column(7).iter().all(|&v| v == 0.0));
        w.zero_mlp_output_row(n).unwrap();
        let zeroed = forward(&w, &toks, &AblationMask::empty(), false).unwrap();
        assert!(max_abs_diff(masked.logits.view(), zeroed.logits.view()) < 1e-5);
        // once the output row is zero, masking the unit changes nothing bitwise
        let both = forward(&w, &toks, &AblationMask::new([n]), false).unwrap();
        assert_eq!(both.logits, zeroed.logits);
    }

    #[test]
    fn loss_cases() {
        // probability ~1 on the correct next token at every position
        let mut logits = Array2::<f32>::from_elem((3, 4), -1e4);
        let toks = [0u32, 2, 3];
        logits[[0, 2]] = 0.0;
        logits[[1, 3]] = 0.0;
        assert_eq!(loss(logits.view(), &toks).unwrap(), 0.0);

        let uniform = Array2::<f32>::zeros((2, 50257));
        let l = loss(uniform.view(), &[7, 11]).unwrap();
        assert!((l - 50257f64.ln()).abs() < 1e-9);
        assert!((l - 10.825).abs() < 1e-3);

        assert!(loss(uniform.slice(s![..1, ..]), &[7]).is_err());
    }

    /// Independent cross-entropy: explicit softmax then -ln p.
    fn reference_cross_entropy(logits: &Array2<f32>, tokens: &[u32]) -> f64 {
        let mut total = 0.0;
        for p in 0..tokens.len() - 1 {
            let row: Vec<f64> = logits.row(p).iter().map(|&v| v as f64).collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let prob = (row[tokens[p + 1] as usize] - m).exp() / z;
            total += -prob.ln();
        }
        total / (tokens.len() - 1) as f64
    }

    #[test]
    fn loss_matches_reference_on_random_model() {
        let w = toy(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..20 {
            let toks: Vec<u32> = (0..rng.random_range(2..=10))
                .map(|_| rng.random_range(0..17))
                .collect();
            let out = forward(&w, &toks, &AblationMask::empty(), false).unwrap();
            let l = loss(out.logits.view(), &toks).unwrap();
            assert!(l >= 0.0);
            assert!((l - reference_cross_entropy(&out.logits, &toks)).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_cases() {
        let x = ForwardOutput {
            logits: array![[0.3f32, -1.0, 2.0], [5.0, 5.0, -3.0]],
            mlp_activations: None,
        };
        assert_eq!(kl_divergence(&x, &x).unwrap(), 0.0);
        let ln2 = kl_from_probs(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-12);
        let y = ForwardOutput {
            logits: array![[0.3f32, -1.0]],
            mlp_activations: None,
        };
        assert!(kl_divergence(&x, &y).is_err());
        assert!(kl_from_probs(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_matches_compensated_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let (t, v) = (rng.random_range(1..6), rng.random_range(2..40));
            let p = Array2::from_shape_fn((t, v), |_| rng.random_range(-4.0f32..4.0));
            let q = Array2::from_shape_fn((t, v), |_| rng.random_range(-4.0f32..4.0));
            let ours = kl_divergence(
                &ForwardOutput { logits: p.clone(), mlp_activations: None },
                &ForwardOutput { logits: q.clone(), mlp_activations: None },
            )
            .unwrap();
            // direct p·ln(p/q) with Neumaier summation
            let probs = |row: ArrayView1<f32>| {
                let m = row.iter().fold(f32::MIN, |a, &b| a.max(b)) as f64;
                let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect::<Vec<_>>()
            };
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for r in 0..t {
                let (pp, qq) = (probs(p.row(r)), probs(q.row(r)));
                for (a, b) in pp.iter().zip(&qq) {
                    let term = a * (a / b).ln();
                    let s = sum + term;
                    comp += if sum.abs() >= term.abs() { (sum - s) + term } else { (term - s) + sum };
                    sum = s;
                }
            }
            let oracle = (sum + comp) / t as f64;
            assert!((ours - oracle).abs() < 1e-8, "{ours} vs {oracle}");
        }
    }
}
