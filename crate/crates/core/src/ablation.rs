//! Ablation experiments: zero a neuron set during inference and measure the
//! token-weighted loss change and mean KL(original ‖ ablated).

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, kl_sum, loss_sum, AblationMask, ModelConfig, ModelWeights, NeuronId};
use crate::seed::derive_rng;
use crate::tensor_io::TokenCorpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    AllLayers,
    Layer(u16),
}

impl Scope {
    pub fn contains(&self, n: NeuronId) -> bool {
        match self {
            Scope::AllLayers => true,
            Scope::Layer(l) => n.layer == *l,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Scope::AllLayers => "all".into(),
            Scope::Layer(l) => l.to_string(),
        }
    }

    fn neurons(&self, config: &ModelConfig) -> Vec<NeuronId> {
        let layers = match self {
            Scope::AllLayers => 0..config.n_layers,
            Scope::Layer(l) => *l..*l + 1,
        };
        layers
            .flat_map(|l| (0..config.d_mlp).map(move |k| NeuronId::new(l, k)))
            .collect()
    }
}

/// What gets zeroed, relative to the target set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    /// The target neurons themselves.
    None,
    /// Every in-scope neuron outside the target set.
    Complement,
    /// As many in-scope non-target neurons as there are in-scope targets,
    /// drawn uniformly with the given seed.
    SizeMatchedRandom { seed: u64 },
}

impl Control {
    pub fn kind_label(&self) -> &'static str {
        match self {
            Control::None => "universal",
            Control::Complement => "non_universal",
            Control::SizeMatchedRandom { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub model_id: String,
    pub checkpoint: u64,
    pub target: BTreeSet<NeuronId>,
    pub scope: Scope,
    pub control: Control,
}

impl AblationSpec {
    /// The neurons this spec zeroes, or `None` when the target set has no
    /// members in scope.
    pub fn mask(&self, config: &ModelConfig) -> Result<Option<AblationMask>> {
        if let Scope::Layer(l) = self.scope {
            if l >= config.n_layers {
                return Err(Error::InvalidArgument(format!(
                    "scope layer {l} outside {} layers",
                    config.n_layers
                )));
            }
        }
        AblationMask::new(self.target.iter().copied()).validate(config)?;
        let in_scope: Vec<NeuronId> = self
            .target
            .iter()
            .copied()
            .filter(|n| self.scope.contains(*n))
            .collect();
        if in_scope.is_empty() {
            return Ok(None);
        }
        let complement = || -> Vec<NeuronId> {
            self.scope
                .neurons(config)
                .into_iter()
                .filter(|n| !self.target.contains(n))
                .collect()
        };
        let mask = match self.control {
            Control::None => AblationMask::new(in_scope),
            Control::Complement => AblationMask::new(complement()),
            Control::SizeMatchedRandom { seed } => {
                let pool = complement();
                let n = in_scope.len().min(pool.len());
                let mut rng = derive_rng("control", &[&seed.to_le_bytes()]);
                AblationMask::new(sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]))
            }
        };
        Ok(Some(mask))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mean_kl: f64,
    pub mean_loss_original: f64,
    pub mean_loss_ablated: f64,
    pub loss_delta: f64,
    /// Positions contributing to the KL mean.
    pub n_tokens_evaluated: u64,
    pub n_ablated: usize,
}

/// Caches the unablated logits of a corpus so many masks can be compared
/// against one baseline.
pub struct AblationHarness<'a> {
    weights: &'a ModelWeights,
    corpus: &'a TokenCorpus,
    baseline: Vec<Array2<f32>>,
    baseline_loss_sum: f64,
    loss_positions: u64,
}

impl<'a> AblationHarness<'a> {
    pub fn new(weights: &'a ModelWeights, corpus: &'a TokenCorpus) -> Result<Self> {
        if corpus.vocab_size() != weights.config().vocab_size {
            return Err(Error::InvalidArgument(format!(
                "corpus vocab {} does not match model vocab {}",
                corpus.vocab_size(),
                weights.config().vocab_size
            )));
        }
        if corpus.n_sequences() == 0 {
            return Err(Error::InvalidArgument("empty evaluation corpus".into()));
        }
        let seqs: Vec<&[u32]> = corpus.sequences().collect();
        let runs = seqs
            .par_iter()
            .map(|s| {
                let out = forward(weights, s, &AblationMask::empty(), false)?;
                let (l, n) = loss_sum(out.logits.view(), s)?;
                Ok((out.logits, l, n))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut baseline = Vec::with_capacity(runs.len());
        let (mut loss, mut positions) = (0.0, 0);
        for (logits, l, n) in runs {
            baseline.push(logits);
            loss += l;
            positions += n;
        }
        Ok(Self {
            weights,
            corpus,
            baseline,
            baseline_loss_sum: loss,
            loss_positions: positions,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        self.weights
    }

    pub fn mean_loss_original(&self) -> f64 {
        self.baseline_loss_sum / self.loss_positions as f64
    }

    pub fn run_mask(&self, mask: &AblationMask) -> Result<AblationReport> {
        mask.validate(self.weights.config())?;
        let original = self.mean_loss_original();
        if mask.is_empty() {
            let n: usize = self.baseline.iter().map(|b| b.nrows()).sum();
            return Ok(AblationReport {
                mean_kl: 0.0,
                mean_loss_original: original,
                mean_loss_ablated: original,
                loss_delta: 0.0,
                n_tokens_evaluated: n as u64,
                n_ablated: 0,
            });
        }
        let seqs: Vec<&[u32]> = self.corpus.sequences().collect();
        let parts = seqs
            .par_iter()
            .zip(self.baseline.par_iter())
            .map(|(s, base)| {
                let out = forward(self.weights, s, mask, false)?;
                let (l, _) = loss_sum(out.logits.view(), s)?;
                let (kl, n) = kl_sum(base.view(), out.logits.view())?;
                Ok((l, kl, n))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut loss, mut kl, mut n) = (0.0, 0.0, 0u64);
        for (l, k, c) in parts {
            loss += l;
            kl += k;
            n += c;
        }
        let ablated = loss / self.loss_positions as f64;
        Ok(AblationReport {
            mean_kl: kl / n as f64,
            mean_loss_original: original,
            mean_loss_ablated: ablated,
            loss_delta: ablated - original,
            n_tokens_evaluated: n,
            n_ablated: mask.len(),
        })
    }

    /// `None` when the ablation spec has no target neurons in scope.
    pub fn run(&self, spec: &AblationSpec) -> Result<Option<AblationReport>> {
        match spec.mask(self.weights.config())? {
            Some(mask) => self.run_mask(&mask).map(Some),
            None => Ok(None),
        }
    }

    /// Runs `template` once per layer with the scope narrowed to that layer.
    pub fn layer_sweep(&self, template: &AblationSpec) -> Result<Vec<LayerAblation>> {
        (0..self.weights.config().n_layers)
            .map(|layer| {
                let spec = AblationSpec {
                    scope: Scope::Layer(layer),
                    ..template.clone()
                };
                Ok(LayerAblation {
                    layer,
                    report: self.run(&spec)?,
                })
            })
            .collect()
    }
}

/// One layer of a sweep; `report` is `None` (skipped) when the layer holds
/// no target neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAblation {
    pub layer: u16,
    pub report: Option<AblationReport>,
}

/// Single experiment. Errors when the target set has no in-scope members.
pub fn run_ablation(spec: &AblationSpec, weights: &ModelWeights, corpus: &TokenCorpus) -> Result<AblationReport> {
    AblationHarness::new(weights, corpus)?
        .run(spec)?
        .ok_or_else(|| Error::InvalidArgument("ablation target set is empty in scope".into()))
}

pub fn layer_sweep(template: &AblationSpec, weights: &ModelWeights, corpus: &TokenCorpus) -> Result<Vec<LayerAblation>> {
    AblationHarness::new(weights, corpus)?.layer_sweep(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_corpus, random_weights, InitScale};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_mlp: 10,
            vocab_size: 20,
            max_seq_len: 8,
            layernorm_eps: 1e-5,
        }
    }

    fn setup() -> (ModelWeights, TokenCorpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (
            random_weights(&cfg(), &InitScale::default(), &mut rng),
            random_corpus(20, 8, 6, &mut rng),
        )
    }

    fn spec(target: &[(u16, u32)], scope: Scope, control: Control) -> AblationSpec {
        AblationSpec {
            model_id: "a".into(),
            checkpoint: 1,
            target: target.iter().map(|&(l, k)| NeuronId::new(l, k)).collect(),
            scope,
            control,
        }
    }

    #[test]
    fn zero_output_rows_give_zero_effect() {
        let (mut w, c) = setup();
        let target = [(1u16, 2u32), (2, 7)];
        for &(l, k) in &target {
            w.zero_mlp_output_row(NeuronId::new(l, k)).unwrap();
        }
        let r = run_ablation(&spec(&target, Scope::AllLayers, Control::None), &w, &c).unwrap();
        assert_eq!(r.mean_kl, 0.0);
        assert_eq!(r.loss_delta, 0.0);
        assert_eq!(r.n_tokens_evaluated, 48);
    }

    #[test]
    fn empty_mask_is_exactly_zero() {
        let (w, c) = setup();
        let h = AblationHarness::new(&w, &c).unwrap();
        let r = h.run_mask(&AblationMask::empty()).unwrap();
        assert_eq!((r.mean_kl, r.loss_delta), (0.0, 0.0));
    }

    #[test]
    fn report_invariants_hold() {
        let (w, c) = setup();
        let h = AblationHarness::new(&w, &c).unwrap();
        let r = h
            .run(&spec(&[(0, 1), (0, 3), (2, 2)], Scope::AllLayers, Control::None))
            .unwrap()
            .unwrap();
        assert!(r.mean_kl > 0.0);
        assert_eq!(r.loss_delta, r.mean_loss_ablated - r.mean_loss_original);
        assert_eq!(r.n_ablated, 3);
        let again = h
            .run(&spec(&[(0, 1), (0, 3), (2, 2)], Scope::AllLayers, Control::None))
            .unwrap()
            .unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn control_masks() {
        let c = cfg();
        let s = spec(&[(0, 1), (0, 3), (2, 2)], Scope::Layer(0), Control::Complement);
        let m = s.mask(&c).unwrap().unwrap();
        assert_eq!(m.len(), 8);
        assert!(m.neurons().all(|n| n.layer == 0 && n.index != 1 && n.index != 3));

        let r = spec(&[(0, 1), (0, 3), (2, 2)], Scope::AllLayers, Control::SizeMatchedRandom { seed: 4 });
        let m1 = r.mask(&c).unwrap().unwrap();
        assert_eq!(m1.len(), 3);
        assert!(m1.neurons().all(|n| !r.target.contains(n)));
        assert_eq!(m1, r.mask(&c).unwrap().unwrap());
        let other = AblationSpec {
            control: Control::SizeMatchedRandom { seed: 5 },
            ..r.clone()
        };
        assert_ne!(m1, other.mask(&c).unwrap().unwrap());

        assert!(spec(&[(1, 0)], Scope::Layer(0), Control::None).mask(&c).unwrap().is_none());
        assert!(spec(&[(1, 0)], Scope::Layer(3), Control::None).mask(&c).is_err());
        assert!(spec(&[(1, 10)], Scope::AllLayers, Control::None).mask(&c).is_err());
    }

    #[test]
    fn sweep_skips_layers_without_targets() {
        let (w, c) = setup();
        let sweep = layer_sweep(&spec(&[(0, 4), (0, 5)], Scope::AllLayers, Control::None), &w, &c).unwrap();
        assert_eq!(sweep.len(), 3);
        assert!(sweep[0].report.is_some());
        assert!(sweep[1].report.is_none() && sweep[2].report.is_none());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let (w, _) = setup();
        let c = random_corpus(19, 8, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(AblationHarness::new(&w, &c).is_err());
    }
}
