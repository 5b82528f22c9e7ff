//! Run manifest: a TOML file naming the models, their checkpoints, the
//! corpora and every analysis knob.
//!
//! ```toml
//! master_seed = 7
//! corpus = "corpus.tok"
//! eval_corpus = "eval.tok"      # optional, defaults to `corpus`
//! eval_sequences = 64           # optional cap on ablation sequences
//! output_dir = "out"
//! checkpoints = [100000, 200000, 300000]
//! thresholds = [0.4, 0.5, 0.6]  # optional
//! match_scope = "layer"         # or "all"
//! pairing = "per-pair"          # or "intersection"
//! chunk_tokens = 4096
//! control_seeds = 5
//!
//! [[models]]                    # the first model is the reference
//! id = "a"
//! [models.weights]
//! 100000 = "a-100k.nta"
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correlation::MatchScope;
use crate::error::{Error, Result};
use crate::universality::PairingMode;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

fn default_chunk() -> u64 {
    4096
}

fn default_control_seeds() -> u32 {
    5
}

fn default_scope() -> MatchScope {
    MatchScope::Layer
}

fn default_pairing() -> PairingMode {
    PairingMode::PerPair
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    /// Checkpoint (as a decimal string key) → weight archive.
    pub weights: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub master_seed: u64,
    pub corpus: PathBuf,
    #[serde(default)]
    pub eval_corpus: Option<PathBuf>,
    #[serde(default)]
    pub eval_sequences: Option<usize>,
    pub output_dir: PathBuf,
    pub checkpoints: Vec<u64>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_scope")]
    pub match_scope: MatchScope,
    #[serde(default = "default_pairing")]
    pub pairing: PairingMode,
    #[serde(default = "default_chunk")]
    pub chunk_tokens: u64,
    #[serde(default = "default_control_seeds")]
    pub control_seeds: u32,
    pub models: Vec<ModelEntry>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            m.resolve_paths(base);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        if let Some(p) = self.eval_corpus.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
        for m in &mut self.models {
            for p in m.weights.values_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.len() < 2 {
            return Err(Error::Config("need a reference model and at least one target".into()));
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model ids must be unique".into()));
        }
        if self.checkpoints.is_empty() {
            return Err(Error::Config("no checkpoints listed".into()));
        }
        let mut sorted = self.checkpoints.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.checkpoints {
            return Err(Error::Config("checkpoints must be strictly increasing".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("thresholds must be finite and non-empty".into()));
        }
        if self.chunk_tokens == 0 {
            return Err(Error::Config("chunk_tokens must be >= 1".into()));
        }
        for m in &self.models {
            let ok = !m.id.is_empty()
                && m.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return Err(Error::Config(format!(
                    "model id {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                    m.id
                )));
            }
            for k in m.weights.keys() {
                k.parse::<u64>().map_err(|_| {
                    Error::Config(format!("model {}: checkpoint key {k:?} is not an integer", m.id))
                })?;
            }
            for c in &self.checkpoints {
                if !m.weights.contains_key(&c.to_string()) {
                    return Err(Error::Config(format!(
                        "model {} has no weights for checkpoint {c}",
                        m.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn reference(&self) -> &ModelEntry {
        &self.models[0]
    }

    pub fn targets(&self) -> &[ModelEntry] {
        &self.models[1..]
    }

    pub fn weights_path<'a>(&self, model: &'a ModelEntry, checkpoint: u64) -> &'a Path {
        &model.weights[&checkpoint.to_string()]
    }

    pub fn eval_corpus_path(&self) -> &Path {
        self.eval_corpus.as_deref().unwrap_or(&self.corpus)
    }

    /// Ordered checkpoint pairs `(earlier, later)`.
    pub fn intervals(&self) -> Vec<(u64, u64)> {
        let c = &self.checkpoints;
        let mut out = Vec::new();
        // adjacent intervals first, then longer spans
        for span in 1..c.len() {
            for i in 0..c.len() - span {
                out.push((c[i], c[i + span]));
            }
        }
        out
    }
}
