//! Fixtures shared by the integration suites: planted toy models written
//! to disk together with corpora and a run manifest.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use unineuron::manifest::{ModelEntry, DEFAULT_THRESHOLDS};
use unineuron::synth::{planted_pair, planted_suite, random_corpus, InitScale, PlantSpec};
use unineuron::{MatchScope, ModelConfig, ModelWeights, NeuronId, PairingMode, RunManifest};

pub const SEQ_LEN: u32 = 64;
pub const VOCAB: u32 = 64;

pub fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_mlp: 64,
        vocab_size: VOCAB,
        max_seq_len: SEQ_LEN,
        layernorm_eps: 1e-5,
    }
}

pub struct Fixture {
    pub dir: TempDir,
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
    /// Planted neurons per checkpoint, in manifest checkpoint order.
    pub planted: Vec<Vec<NeuronId>>,
}

impl Fixture {
    pub fn out(&self) -> &Path {
        &self.manifest.output_dir
    }

    pub fn weights(&self, model: usize, checkpoint: u64) -> ModelWeights {
        let m = &self.manifest;
        ModelWeights::load(m.weights_path(&m.models[model], checkpoint)).unwrap()
    }

    /// Rewrites the manifest file after edits to `self.manifest`.
    pub fn save(&mut self) {
        self.manifest.save(&self.manifest_path).unwrap();
        self.manifest = RunManifest::load(&self.manifest_path).unwrap();
    }
}

fn write_fixture(
    models: Vec<Vec<ModelWeights>>,
    checkpoints: &[u64],
    planted: Vec<Vec<NeuronId>>,
    corpus_tokens: usize,
    seed: u64,
) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("weights")).unwrap();
    let n_models = models[0].len();
    let mut entries: Vec<ModelEntry> = (0..n_models)
        .map(|i| ModelEntry {
            id: char::from(b'a' + i as u8).to_string(),
            weights: BTreeMap::new(),
        })
        .collect();
    for (c, &ckpt) in checkpoints.iter().enumerate() {
        for (m, e) in entries.iter_mut().enumerate() {
            let rel = PathBuf::from(format!("weights/{}_{ckpt}.nta", e.id));
            models[c][m].save(root.join(&rel)).unwrap();
            e.weights.insert(ckpt.to_string(), rel);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_seqs = corpus_tokens / SEQ_LEN as usize;
    random_corpus(VOCAB, SEQ_LEN, n_seqs, &mut rng).write(root.join("corpus.tok")).unwrap();
    random_corpus(VOCAB, SEQ_LEN, n_seqs, &mut rng).write(root.join("eval.tok")).unwrap();
    let manifest = RunManifest {
        master_seed: seed,
        corpus: "corpus.tok".into(),
        eval_corpus: Some("eval.tok".into()),
        eval_sequences: None,
        output_dir: "out".into(),
        checkpoints: checkpoints.to_vec(),
        thresholds: DEFAULT_THRESHOLDS.to_vec(),
        match_scope: MatchScope::Layer,
        pairing: PairingMode::PerPair,
        chunk_tokens: 1000,
        control_seeds: 3,
        models: entries,
    };
    let manifest_path = root.join("manifest.toml");
    manifest.save(&manifest_path).unwrap();
    Fixture {
        manifest: RunManifest::load(&manifest_path).unwrap(),
        dir,
        manifest_path,
        planted,
    }
}

/// Two models sharing a planted 25% of layer-1 neurons, one checkpoint.
pub fn pair_fixture(seed: u64, corpus_tokens: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = planted_pair(&config(), &InitScale::default(), &PlantSpec::default(), &mut rng).unwrap();
    write_fixture(vec![vec![p.reference, p.other]], &[100_000], vec![p.planted], corpus_tokens, seed)
}

/// `n_models` models over several checkpoints with sliding planted sets.
pub fn suite_fixture(seed: u64, n_models: usize, checkpoints: &[u64], corpus_tokens: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = planted_suite(
        &config(),
        &InitScale::default(),
        &PlantSpec::default(),
        n_models,
        checkpoints.len(),
        &mut rng,
    )
    .unwrap();
    write_fixture(s.models, checkpoints, s.planted, corpus_tokens, seed)
}

/// Every regular file under `dir` with the given extension, with contents,
/// keyed by path relative to `dir`.
pub fn snapshot(dir: &Path, ext: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
