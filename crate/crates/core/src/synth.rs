//! Seeded toy models and corpora, including the planted-universality pair:
//! two independently initialized models that share a known subset of MLP
//! neurons in one layer.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{BlockWeights, LayerNorm, ModelConfig, ModelWeights, NeuronId};
use crate::tensor_io::TokenCorpus;

/// Standard deviations used by [`random_weights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScale {
    pub embedding: f32,
    pub positional: f32,
    /// Multiplies `1/sqrt(fan_in)` for input-side projections.
    pub projection: f32,
    /// Std of attention and MLP output projections (residual writes).
    pub residual: f32,
    pub bias: f32,
}

impl Default for InitScale {
    fn default() -> Self {
        Self {
            embedding: 1.0,
            positional: 0.5,
            projection: 1.0,
            residual: 0.02,
            bias: 0.1,
        }
    }
}

fn normal(shape: (usize, usize), std: f32, rng: &mut impl Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || {
        std * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
    })
}

fn normal1(n: usize, std: f32, rng: &mut impl Rng) -> Array1<f32> {
    Array1::from_shape_simple_fn(n, || {
        std * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
    })
}

fn unit_ln(d: usize) -> LayerNorm {
    LayerNorm {
        weight: Array1::ones(d),
        bias: Array1::zeros(d),
    }
}

/// Random GPT-2-style weights. Panics only if `config` is invalid.
pub fn random_weights(config: &ModelConfig, scale: &InitScale, rng: &mut impl Rng) -> ModelWeights {
    config.validate().expect("valid config");
    let d = config.d_model as usize;
    let m = config.d_mlp as usize;
    let v = config.vocab_size as usize;
    let proj_std = |fan_in: usize| scale.projection / (fan_in as f32).sqrt();

    let wte = normal((v, d), scale.embedding, rng);
    let wpe = normal((config.max_seq_len as usize, d), scale.positional, rng);
    let blocks = (0..config.n_layers)
        .map(|_| BlockWeights {
            ln1: unit_ln(d),
            w_qkv: normal((d, 3 * d), proj_std(d), rng),
            b_qkv: normal1(3 * d, scale.bias, rng),
            w_o: normal((d, d), scale.residual, rng),
            b_o: normal1(d, scale.bias * scale.residual, rng),
            ln2: unit_ln(d),
            w_in: normal((d, m), proj_std(d), rng),
            b_in: normal1(m, scale.bias, rng),
            w_out: normal((m, d), scale.residual, rng),
            b_out: normal1(d, scale.bias * scale.residual, rng),
        })
        .collect();
    let unembed = normal((d, v), proj_std(d), rng);
    ModelWeights::new(*config, wte, wpe, blocks, unit_ln(d), unembed)
        .expect("generated weights are consistent")
}

/// Approximate argmin of GELU.
pub const STATIONARY_BIAS: f32 = -0.75;

/// Parameters of the planted-universality construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantSpec {
    pub layer: u16,
    /// Fraction of `d_mlp` neurons shared between the two models.
    pub fraction: f64,
    /// Gain applied to planted output rows so the shared features carry
    /// more of the model's function than a typical neuron.
    pub output_gain: f32,
    /// Gain on the planted input columns.
    pub input_gain: f32,
    /// Replaces the planted input biases when set. Biasing a unit to the
    /// GELU stationary point with a small input gain makes its response
    /// mostly even, so random linear mixtures of the layer correlate with
    /// it only weakly.
    pub input_bias: Option<f32>,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            layer: 1,
            fraction: 0.25,
            output_gain: 16.0,
            input_gain: 0.5,
            input_bias: Some(STATIONARY_BIAS),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedPair {
    pub reference: ModelWeights,
    pub other: ModelWeights,
    /// Planted neurons; same indices in both models.
    pub planted: Vec<NeuronId>,
}

/// Two models with independent weights except for the token/positional
/// embeddings (the shared input both models read) and a random subset of
/// MLP neurons in `spec.layer`, whose input column, input bias and output
/// row are copied from the reference into the other model.
pub fn planted_pair(
    config: &ModelConfig,
    scale: &InitScale,
    spec: &PlantSpec,
    rng: &mut impl Rng,
) -> Result<PlantedPair> {
    check_spec(config, spec)?;
    let mut reference = random_weights(config, scale, rng);
    let mut other = random_weights(config, scale, rng);
    let m = config.d_mlp as usize;
    let n_planted = (spec.fraction * m as f64).round() as usize;
    let mut idx: Vec<u32> = sample(rng, m, n_planted).into_iter().map(|k| k as u32).collect();
    idx.sort_unstable();
    plant(&mut reference, std::slice::from_mut(&mut other), spec, &idx);
    Ok(PlantedPair {
        reference,
        other,
        planted: idx.into_iter().map(|k| NeuronId::new(spec.layer, k)).collect(),
    })
}

/// Shares the embeddings of `reference` with every model in `others` and
/// copies the planted units of `spec.layer` (after applying the gains and
/// bias to the reference).
fn plant(reference: &mut ModelWeights, others: &mut [ModelWeights], spec: &PlantSpec, idx: &[u32]) {
    let l = spec.layer as usize;
    for &k in idx {
        let k = k as usize;
        let r = &mut reference.blocks[l];
        r.w_out.row_mut(k).mapv_inplace(|v| v * spec.output_gain);
        r.w_in.column_mut(k).mapv_inplace(|v| v * spec.input_gain);
        if let Some(b) = spec.input_bias {
            r.b_in[k] = b;
        }
    }
    for other in others {
        other.wte.assign(&reference.wte);
        other.wpe.assign(&reference.wpe);
        let (src, dst) = (&reference.blocks[l], &mut other.blocks[l]);
        for &k in idx {
            let k = k as usize;
            dst.w_in.column_mut(k).assign(&src.w_in.column(k));
            dst.b_in[k] = src.b_in[k];
            dst.w_out.row_mut(k).assign(&src.w_out.row(k));
        }
    }
}

/// A reference model, several targets and several checkpoints, all
/// sharing one embedding table. Checkpoint `i` plants a window of a fixed
/// neuron permutation that slides by a quarter of its width per
/// checkpoint, so consecutive planted sets overlap by 75%.
#[derive(Debug, Clone)]
pub struct PlantedSuite {
    /// `models[c][m]`: checkpoint `c`, model `m` (model 0 is the reference).
    pub models: Vec<Vec<ModelWeights>>,
    pub planted: Vec<Vec<NeuronId>>,
}

pub fn planted_suite(
    config: &ModelConfig,
    scale: &InitScale,
    spec: &PlantSpec,
    n_models: usize,
    n_checkpoints: usize,
    rng: &mut impl Rng,
) -> Result<PlantedSuite> {
    if n_models < 2 || n_checkpoints == 0 {
        return Err(Error::InvalidArgument(
            "a suite needs at least two models and one checkpoint".into(),
        ));
    }
    check_spec(config, spec)?;
    let m = config.d_mlp as usize;
    let width = (spec.fraction * m as f64).round() as usize;
    let step = (width / 4).max(1);
    if width + step * (n_checkpoints - 1) > m {
        return Err(Error::InvalidArgument(format!(
            "{n_checkpoints} sliding windows of {width} neurons do not fit in d_mlp {m}"
        )));
    }
    let order = sample(rng, m, m).into_vec();
    let embeddings = random_weights(config, scale, rng);
    let mut models = Vec::with_capacity(n_checkpoints);
    let mut planted = Vec::with_capacity(n_checkpoints);
    for c in 0..n_checkpoints {
        let mut idx: Vec<u32> = order[c * step..c * step + width].iter().map(|&k| k as u32).collect();
        idx.sort_unstable();
        let mut reference = random_weights(config, scale, rng);
        reference.wte.assign(&embeddings.wte);
        reference.wpe.assign(&embeddings.wpe);
        let mut others: Vec<ModelWeights> = (1..n_models).map(|_| random_weights(config, scale, rng)).collect();
        plant(&mut reference, &mut others, spec, &idx);
        let mut row = vec![reference];
        row.extend(others);
        models.push(row);
        planted.push(idx.into_iter().map(|k| NeuronId::new(spec.layer, k)).collect());
    }
    Ok(PlantedSuite { models, planted })
}

fn check_spec(config: &ModelConfig, spec: &PlantSpec) -> Result<()> {
    if spec.layer >= config.n_layers {
        return Err(Error::InvalidArgument(format!(
            "plant layer {} outside {} layers",
            spec.layer, config.n_layers
        )));
    }
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::InvalidArgument("plant fraction must be in [0, 1]".into()));
    }
    Ok(())
}

/// Uniform random token corpus of `n_sequences × seq_len` ids.
pub fn random_corpus(vocab_size: u32, seq_len: u32, n_sequences: usize, rng: &mut impl Rng) -> TokenCorpus {
    let tokens = (0..n_sequences * seq_len as usize)
        .map(|_| rng.random_range(0..vocab_size))
        .collect();
    TokenCorpus::from_tokens(vocab_size, seq_len, tokens)
        .expect("ids in range")
        .0
}
