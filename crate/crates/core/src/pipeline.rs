//! End-to-end orchestration driven by a [`RunManifest`].
//!
//! Stages run in order and each later stage pulls in the earlier ones:
//!
//! | stage              | outputs under `output_dir`                                |
//! |--------------------|-----------------------------------------------------------|
//! | `dump-activations` | `activations/{model}_{ckpt}_L{layer}.nta`                 |
//! | `excess`           | `excess/{ckpt}/{target}.csv`, `excess/{ckpt}/{target}.exc` |
//! | `universal`        | `universal_sets.csv`, `universal_counts.csv`              |
//! | `persist`          | `persistence.csv`                                         |
//! | `ablate`           | `ablation.csv`                                            |
//!
//! Dumps, excess tables and ablation results are cached next to their
//! outputs in `.key` files holding a SHA-256 over the stage's input file
//! hashes and parameters; a stage whose key matches is not recomputed.
//! Conditions that skip work without failing (a single checkpoint, an
//! empty universal set) are collected as notices and written to
//! `notices.txt`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{AblationHarness, AblationReport, AblationSpec, Control, Scope};
use crate::correlation::{
    correlate_files, excess_from_blocks, ExcessCorrelationTable, MatchScope, RotationBaseline,
};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::model::{forward, AblationMask, ModelConfig, ModelWeights};
use crate::seed::derive_u64;
use crate::tensor_io::{read_activation_meta, ActivationMeta, ActivationWriter, TokenCorpus};
use crate::universality::{persistence, select_universal, PersistenceStat, TargetTable, UniversalSet};

pub const UNIVERSAL_SETS_FILE: &str = "universal_sets.csv";
pub const UNIVERSAL_COUNTS_FILE: &str = "universal_counts.csv";
pub const PERSISTENCE_FILE: &str = "persistence.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const NOTICES_FILE: &str = "notices.txt";

/// Label of the all-layers row in persistence and ablation CSVs.
pub const ALL_LAYERS: &str = "all";

const CACHE_VERSION: &str = "1";
const DUMP_BATCH: usize = 32;

/// One row of `universal_sets.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalMemberRow {
    pub checkpoint: u64,
    pub threshold: f64,
    pub pairing: String,
    pub layer: u16,
    pub neuron: u32,
}

/// One row of `universal_counts.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalCountRow {
    pub checkpoint: u64,
    pub threshold: f64,
    pub pairing: String,
    pub n_universal: u64,
    pub total_neurons: u64,
    pub percent: f64,
}

/// One row of `persistence.csv`. `layer` is a layer index or `all`;
/// `persistence` is empty when `n_from` is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceRow {
    pub from_checkpoint: u64,
    pub to_checkpoint: u64,
    pub threshold: f64,
    pub pairing: String,
    pub layer: String,
    pub n_from: u64,
    pub n_kept: u64,
    pub persistence: Option<f64>,
}

/// One row of `ablation.csv`. `scope` is a layer index or `all`;
/// `target_kind` is `universal`, `non_universal` or `random` (the mean over
/// the manifest's control seeds). Measurement cells are empty when the
/// universal set has no members in scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub checkpoint: u64,
    pub pairing: String,
    pub threshold: f64,
    pub scope: String,
    pub target_kind: String,
    pub mean_kl: Option<f64>,
    pub loss_delta: Option<f64>,
    pub n_tokens: Option<u64>,
    pub n_ablated: Option<u64>,
    pub mean_loss_original: Option<f64>,
    pub mean_loss_ablated: Option<f64>,
}

impl AblationRow {
    fn new(checkpoint: u64, set: &UniversalSet, scope: Scope, kind: &str, report: Option<&AblationReport>) -> Self {
        Self {
            checkpoint,
            pairing: set.pairing_label(),
            threshold: set.threshold,
            scope: scope.label(),
            target_kind: kind.to_string(),
            mean_kl: report.map(|r| r.mean_kl),
            loss_delta: report.map(|r| r.loss_delta),
            n_tokens: report.map(|r| r.n_tokens_evaluated),
            n_ablated: report.map(|r| r.n_ablated as u64),
            mean_loss_original: report.map(|r| r.mean_loss_original),
            mean_loss_ablated: report.map(|r| r.mean_loss_ablated),
        }
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const UNIVERSAL_SETS_HEADER: &[&str] = &["checkpoint", "threshold", "pairing", "layer", "neuron"];
pub const UNIVERSAL_COUNTS_HEADER: &[&str] = &[
    "checkpoint",
    "threshold",
    "pairing",
    "n_universal",
    "total_neurons",
    "percent",
];
pub const PERSISTENCE_HEADER: &[&str] = &[
    "from_checkpoint",
    "to_checkpoint",
    "threshold",
    "pairing",
    "layer",
    "n_from",
    "n_kept",
    "persistence",
];
pub const ABLATION_HEADER: &[&str] = &[
    "checkpoint",
    "pairing",
    "threshold",
    "scope",
    "target_kind",
    "mean_kl",
    "loss_delta",
    "n_tokens",
    "n_ablated",
    "mean_loss_original",
    "mean_loss_ablated",
];

/// Length-prefixed SHA-256 over a stage's inputs.
struct StageKey(Sha256);

impl StageKey {
    fn new(stage: &str) -> Self {
        let mut k = Self(Sha256::new());
        k.str(CACHE_VERSION).str(stage);
        k
    }

    fn str(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn is_fresh(key_path: &Path, key: &str, outputs: &[PathBuf]) -> bool {
    outputs.iter().all(|p| p.is_file())
        && fs::read_to_string(key_path).map(|k| k.trim() == key).unwrap_or(false)
}

fn store_key(key_path: &Path, key: &str) -> Result<()> {
    fs::write(key_path, format!("{key}\n")).map_err(|e| Error::io(key_path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn rename(from: &Path, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(|e| Error::io(to, e))
}

/// Activation dumps of one (model, checkpoint), one file per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpSet {
    pub model_id: String,
    pub checkpoint: u64,
    pub key: String,
    pub layers: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetExcess {
    pub target_model: String,
    pub table: ExcessCorrelationTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointExcess {
    pub checkpoint: u64,
    pub targets: Vec<TargetExcess>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub output_dir: PathBuf,
    pub n_dumps: usize,
    pub n_universal_sets: usize,
    pub n_persistence_rows: usize,
    pub n_ablation_rows: usize,
    pub notices: Vec<String>,
}

pub struct Pipeline {
    manifest: RunManifest,
    notices: Vec<String>,
    dumps: Option<Vec<DumpSet>>,
    excess: Option<Vec<CheckpointExcess>>,
    universal: Option<Vec<UniversalSet>>,
}

impl Pipeline {
    pub fn new(manifest: RunManifest) -> Result<Self> {
        manifest.validate()?;
        Ok(Self {
            manifest,
            notices: Vec::new(),
            dumps: None,
            excess: None,
            universal: None,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn notices(&self) -> &[String] {
        &self.notices
    }

    fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.manifest.output_dir.join(rel)
    }

    fn notice(&mut self, msg: String) {
        info!("{msg}");
        if !self.notices.contains(&msg) {
            self.notices.push(msg);
        }
    }

    pub fn dump_path(&self, model_id: &str, checkpoint: u64, layer: u16) -> PathBuf {
        self.out(format!("activations/{model_id}_{checkpoint}_L{layer}.nta"))
    }

    pub fn excess_paths(&self, checkpoint: u64, target: &str) -> (PathBuf, PathBuf) {
        let dir = self.out(format!("excess/{checkpoint}"));
        (dir.join(format!("{target}.csv")), dir.join(format!("{target}.exc")))
    }

    fn reference_config(&self, checkpoint: u64) -> Result<ModelConfig> {
        let m = &self.manifest;
        ModelWeights::read_config(m.weights_path(m.reference(), checkpoint))
    }

    /// One dump per (model, checkpoint, layer) over the manifest corpus.
    pub fn dump_activations(&mut self) -> Result<Vec<DumpSet>> {
        if let Some(d) = &self.dumps {
            return Ok(d.clone());
        }
        let dumps = self.run_dumps().map_err(|e| e.in_stage("dump-activations"))?;
        self.dumps = Some(dumps.clone());
        Ok(dumps)
    }

    fn run_dumps(&self) -> Result<Vec<DumpSet>> {
        let m = &self.manifest;
        create_dir(&self.out("activations"))?;
        let corpus_hash = hash_file(&m.corpus)?;
        let mut corpus: Option<TokenCorpus> = None;
        let jobs: Vec<(&str, u64)> = m
            .models
            .iter()
            .flat_map(|model| m.checkpoints.iter().map(move |&c| (model.id.as_str(), c)))
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        let mut pending = Vec::new();
        for (id, ckpt) in jobs {
            let model = m.models.iter().find(|x| x.id == id).expect("job model exists");
            let wpath = m.weights_path(model, ckpt);
            let config = ModelWeights::read_config(wpath)?;
            let key = {
                let mut k = StageKey::new("dump");
                k.str(&hash_file(wpath)?).str(&corpus_hash).str(id).u64(ckpt);
                k.finish()
            };
            let layers: Vec<PathBuf> = (0..config.n_layers).map(|l| self.dump_path(id, ckpt, l)).collect();
            let key_path = self.out(format!("activations/{id}_{ckpt}.key"));
            let set = DumpSet {
                model_id: id.to_string(),
                checkpoint: ckpt,
                key: key.clone(),
                layers,
            };
            if is_fresh(&key_path, &key, &set.layers) {
                info!("dump {id}@{ckpt}: cached");
            } else {
                if corpus.is_none() {
                    corpus = Some(TokenCorpus::read(&m.corpus)?);
                }
                pending.push((set.clone(), wpath.to_path_buf(), key_path));
            }
            out.push(set);
        }
        if let Some(corpus) = &corpus {
            pending.par_iter().try_for_each(|(set, wpath, key_path)| {
                info!("dump {}@{}: recording", set.model_id, set.checkpoint);
                let weights = ModelWeights::load(wpath)?;
                dump_model(&weights, corpus, set)?;
                store_key(key_path, &set.key)
            })?;
        }
        Ok(out)
    }

    /// Excess-correlation tables of the reference against every target,
    /// per checkpoint.
    pub fn excess(&mut self) -> Result<Vec<CheckpointExcess>> {
        if let Some(e) = &self.excess {
            return Ok(e.clone());
        }
        let dumps = self.dump_activations()?;
        let excess = self.run_excess(&dumps).map_err(|e| e.in_stage("excess"))?;
        self.excess = Some(excess.clone());
        Ok(excess)
    }

    fn run_excess(&self, dumps: &[DumpSet]) -> Result<Vec<CheckpointExcess>> {
        let m = &self.manifest;
        let find = |id: &str, c: u64| {
            dumps
                .iter()
                .find(|d| d.model_id == id && d.checkpoint == c)
                .expect("dump stage covers every model and checkpoint")
        };
        let mut out = Vec::new();
        for &ckpt in &m.checkpoints {
            let reference = find(&m.reference().id, ckpt);
            let mut targets = Vec::new();
            for target in m.targets() {
                let t = find(&target.id, ckpt);
                let (csv_path, cache_path) = self.excess_paths(ckpt, &target.id);
                let key = {
                    let mut k = StageKey::new("excess");
                    k.str(&reference.key)
                        .str(&t.key)
                        .u64(m.master_seed)
                        .str(scope_label(m.match_scope))
                        .u64(m.chunk_tokens);
                    k.finish()
                };
                let key_path = cache_path.with_extension("key");
                let outputs = [csv_path.clone(), cache_path.clone()];
                let table = if is_fresh(&key_path, &key, &outputs) {
                    info!("excess {}@{ckpt}: cached", target.id);
                    ExcessCorrelationTable::read_cache(&cache_path)?
                } else {
                    info!("excess {}@{ckpt}: correlating", target.id);
                    create_dir(csv_path.parent().expect("excess path has a parent"))?;
                    let table = self.correlate_target(reference, t)?;
                    table.write_csv(partial(&csv_path))?;
                    table.write_cache(partial(&cache_path))?;
                    rename(&partial(&csv_path), &csv_path)?;
                    rename(&partial(&cache_path), &cache_path)?;
                    store_key(&key_path, &key)?;
                    table
                };
                targets.push(TargetExcess {
                    target_model: target.id.clone(),
                    table,
                });
            }
            out.push(CheckpointExcess {
                checkpoint: ckpt,
                targets,
            });
        }
        Ok(out)
    }

    fn correlate_target(&self, reference: &DumpSet, target: &DumpSet) -> Result<ExcessCorrelationTable> {
        let m = &self.manifest;
        let rotations = target
            .layers
            .iter()
            .enumerate()
            .map(|(l, path)| {
                let meta = read_activation_meta(path)?;
                Ok(RotationBaseline::derive(
                    m.master_seed,
                    &target.model_id,
                    target.checkpoint,
                    l as u16,
                    meta.n_neurons as usize,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let tables = reference
            .layers
            .par_iter()
            .enumerate()
            .map(|(l, x)| {
                let pairs: Vec<(&Path, &RotationBaseline)> = match m.match_scope {
                    MatchScope::Layer => {
                        let y = target.layers.get(l).ok_or_else(|| {
                            Error::Shape(format!(
                                "target {} has no layer {l} to match the reference",
                                target.model_id
                            ))
                        })?;
                        vec![(y.as_path(), &rotations[l])]
                    }
                    MatchScope::All => target
                        .layers
                        .iter()
                        .zip(&rotations)
                        .map(|(y, r)| (y.as_path(), r))
                        .collect(),
                };
                let blocks = correlate_files(x, &pairs, m.chunk_tokens)?;
                excess_from_blocks(&blocks, l as u16)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExcessCorrelationTable::concat(tables))
    }

    /// Universal sets for every (checkpoint, threshold) under the manifest's
    /// pairing mode; writes `universal_sets.csv` and `universal_counts.csv`.
    pub fn universal(&mut self) -> Result<Vec<UniversalSet>> {
        if let Some(u) = &self.universal {
            return Ok(u.clone());
        }
        let excess = self.excess()?;
        let sets = self.run_universal(&excess).map_err(|e| e.in_stage("universal"))?;
        for s in sets.iter().filter(|s| s.is_empty()) {
            let msg = format!(
                "no universal neurons at checkpoint {} threshold {} pairing {}",
                s.checkpoint,
                s.threshold,
                s.pairing_label()
            );
            self.notice(msg);
        }
        self.universal = Some(sets.clone());
        Ok(sets)
    }

    fn run_universal(&self, excess: &[CheckpointExcess]) -> Result<Vec<UniversalSet>> {
        let m = &self.manifest;
        let mut thresholds = m.thresholds.clone();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let mut sets = Vec::new();
        for ce in excess {
            let config = self.reference_config(ce.checkpoint)?;
            let tables: Vec<TargetTable<'_>> = ce
                .targets
                .iter()
                .map(|t| TargetTable {
                    target_model: &t.target_model,
                    table: &t.table,
                })
                .collect();
            for &th in &thresholds {
                sets.extend(select_universal(
                    &m.reference().id,
                    ce.checkpoint,
                    config.n_layers,
                    &tables,
                    th,
                    m.pairing,
                )?);
            }
        }
        let mut members = Vec::new();
        let mut counts = Vec::new();
        for s in &sets {
            let total = self.reference_config(s.checkpoint)?.total_neurons();
            members.extend(s.members.iter().map(|n| UniversalMemberRow {
                checkpoint: s.checkpoint,
                threshold: s.threshold,
                pairing: s.pairing_label(),
                layer: n.layer,
                neuron: n.index,
            }));
            counts.push(UniversalCountRow {
                checkpoint: s.checkpoint,
                threshold: s.threshold,
                pairing: s.pairing_label(),
                n_universal: s.len() as u64,
                total_neurons: total,
                percent: 100.0 * s.len() as f64 / total as f64,
            });
        }
        create_dir(&m.output_dir)?;
        write_rows(&self.out(UNIVERSAL_SETS_FILE), &members, UNIVERSAL_SETS_HEADER)?;
        write_rows(&self.out(UNIVERSAL_COUNTS_FILE), &counts, UNIVERSAL_COUNTS_HEADER)?;
        Ok(sets)
    }

    /// Persistence over every ordered checkpoint pair; writes
    /// `persistence.csv` (header only, plus a notice, with one checkpoint).
    pub fn persistence(&mut self) -> Result<Vec<PersistenceStat>> {
        let sets = self.universal()?;
        let intervals = self.manifest.intervals();
        if intervals.is_empty() {
            self.notice("persistence skipped: manifest lists a single checkpoint".into());
        }
        let run = || -> Result<Vec<PersistenceStat>> {
            let mut stats = Vec::new();
            for (t1, t2) in intervals {
                for u1 in sets.iter().filter(|s| s.checkpoint == t1) {
                    let u2 = sets
                        .iter()
                        .find(|s| {
                            s.checkpoint == t2
                                && s.threshold == u1.threshold
                                && s.target_models == u1.target_models
                        })
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "no set at checkpoint {t2} matches threshold {} pairing {}",
                                u1.threshold,
                                u1.pairing_label()
                            ))
                        })?;
                    stats.push(persistence(u1, u2)?);
                }
            }
            let rows: Vec<PersistenceRow> = stats.iter().flat_map(persistence_rows).collect();
            create_dir(&self.manifest.output_dir)?;
            write_rows(&self.out(PERSISTENCE_FILE), &rows, PERSISTENCE_HEADER)?;
            Ok(stats)
        };
        run().map_err(|e| e.in_stage("persist"))
    }

    /// Universal, complement and size-matched random ablations of the
    /// reference model for every universal set, over all layers and per
    /// layer; writes `ablation.csv`.
    pub fn ablation(&mut self) -> Result<Vec<AblationRow>> {
        let sets = self.universal()?;
        self.run_ablation(&sets).map_err(|e| e.in_stage("ablate"))
    }

    fn run_ablation(&self, sets: &[UniversalSet]) -> Result<Vec<AblationRow>> {
        let m = &self.manifest;
        create_dir(&self.out("ablation"))?;
        let eval_hash = hash_file(m.eval_corpus_path())?;
        let mut all = Vec::new();
        for &ckpt in &m.checkpoints {
            let wpath = m.weights_path(m.reference(), ckpt);
            let ckpt_sets: Vec<&UniversalSet> = sets.iter().filter(|s| s.checkpoint == ckpt).collect();
            let key = {
                let mut k = StageKey::new("ablate");
                k.str(&hash_file(wpath)?)
                    .str(&eval_hash)
                    .u64(m.eval_sequences.map_or(u64::MAX, |n| n as u64))
                    .u64(m.master_seed)
                    .u64(m.control_seeds as u64);
                for s in &ckpt_sets {
                    k.u64(s.threshold.to_bits()).str(&s.pairing_label()).u64(s.len() as u64);
                    for n in &s.members {
                        k.u64(n.layer as u64).u64(n.index as u64);
                    }
                }
                k.finish()
            };
            let path = self.out(format!("ablation/{ckpt}.csv"));
            let key_path = path.with_extension("key");
            let rows = if is_fresh(&key_path, &key, std::slice::from_ref(&path)) {
                info!("ablate {ckpt}: cached");
                read_rows(&path)?
            } else {
                info!("ablate {ckpt}: running");
                let weights = ModelWeights::load(wpath)?;
                let mut corpus = TokenCorpus::read(m.eval_corpus_path())?;
                if let Some(n) = m.eval_sequences {
                    corpus = corpus.truncated(n);
                }
                let harness = AblationHarness::new(&weights, &corpus)?;
                let mut memo = BTreeMap::new();
                let mut rows = Vec::new();
                for s in &ckpt_sets {
                    rows.extend(ablate_set(&harness, &mut memo, m, ckpt, s)?);
                }
                write_rows(&partial(&path), &rows, ABLATION_HEADER)?;
                rename(&partial(&path), &path)?;
                store_key(&key_path, &key)?;
                rows
            };
            all.extend(rows);
        }
        write_rows(&self.out(ABLATION_FILE), &all, ABLATION_HEADER)?;
        Ok(all)
    }

    pub fn write_notices(&self) -> Result<()> {
        create_dir(&self.manifest.output_dir)?;
        let path = self.out(NOTICES_FILE);
        let mut text = self.notices.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Every stage in order, then `notices.txt`.
    pub fn run(&mut self) -> Result<PipelineSummary> {
        let dumps = self.dump_activations()?;
        let sets = self.universal()?;
        let persistence = self.persistence()?;
        let ablation = self.ablation()?;
        self.write_notices()?;
        Ok(PipelineSummary {
            output_dir: self.manifest.output_dir.clone(),
            n_dumps: dumps.iter().map(|d| d.layers.len()).sum(),
            n_universal_sets: sets.len(),
            n_persistence_rows: persistence.iter().map(|p| p.per_layer.len() + 1).sum(),
            n_ablation_rows: ablation.len(),
            notices: self.notices.clone(),
        })
    }
}

fn scope_label(scope: MatchScope) -> &'static str {
    match scope {
        MatchScope::Layer => "layer",
        MatchScope::All => "all",
    }
}

fn dump_model(weights: &ModelWeights, corpus: &TokenCorpus, set: &DumpSet) -> Result<()> {
    let config = weights.config();
    let mut writers = set
        .layers
        .iter()
        .enumerate()
        .map(|(l, path)| {
            let meta = ActivationMeta {
                model_id: set.model_id.clone(),
                checkpoint: set.checkpoint,
                layer: l as u16,
                n_neurons: config.d_mlp,
                n_tokens: corpus.n_tokens(),
                seq_len: corpus.seq_len(),
            };
            ActivationWriter::create(partial(path), &meta)
        })
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<&[u32]> = corpus.sequences().collect();
    for batch in seqs.chunks(DUMP_BATCH) {
        let outs = batch
            .par_iter()
            .map(|s| forward(weights, s, &AblationMask::empty(), true))
            .collect::<Result<Vec<_>>>()?;
        for out in outs {
            let acts = out.mlp_activations.expect("recording run returns activations");
            for (w, a) in writers.iter_mut().zip(&acts) {
                w.append(a.view())?;
            }
        }
    }
    for w in writers {
        w.finish()?;
    }
    for path in &set.layers {
        rename(&partial(path), path)?;
    }
    Ok(())
}

/// Seed of the `i`-th random control for one (checkpoint, set, scope).
pub fn control_seed(master_seed: u64, checkpoint: u64, set: &UniversalSet, scope: Scope, i: u32) -> u64 {
    derive_u64(
        "control-seed",
        &[
            &master_seed.to_le_bytes(),
            &checkpoint.to_le_bytes(),
            set.pairing_label().as_bytes(),
            &set.threshold.to_bits().to_le_bytes(),
            scope.label().as_bytes(),
            &i.to_le_bytes(),
        ],
    )
}

/// Reports keyed by mask; sets shared across thresholds and pairings
/// are evaluated once.
type Memo = BTreeMap<AblationMask, AblationReport>;

fn run_memo(harness: &AblationHarness<'_>, memo: &mut Memo, spec: &AblationSpec) -> Result<Option<AblationReport>> {
    let Some(mask) = spec.mask(harness.weights().config())? else {
        return Ok(None);
    };
    if let Some(r) = memo.get(&mask) {
        return Ok(Some(r.clone()));
    }
    let r = harness.run_mask(&mask)?;
    memo.insert(mask, r.clone());
    Ok(Some(r))
}

fn ablate_set(
    harness: &AblationHarness<'_>,
    memo: &mut Memo,
    m: &RunManifest,
    ckpt: u64,
    set: &UniversalSet,
) -> Result<Vec<AblationRow>> {
    let n_layers = harness.weights().config().n_layers;
    let scopes = std::iter::once(Scope::AllLayers).chain((0..n_layers).map(Scope::Layer));
    let mut rows = Vec::new();
    for scope in scopes {
        let spec = |control| AblationSpec {
            model_id: m.reference().id.clone(),
            checkpoint: ckpt,
            target: set.members.clone(),
            scope,
            control,
        };
        let universal = run_memo(harness, memo, &spec(Control::None))?;
        let complement = run_memo(harness, memo, &spec(Control::Complement))?;
        let mut random = Vec::new();
        for i in 0..m.control_seeds {
            let seed = control_seed(m.master_seed, ckpt, set, scope, i);
            random.extend(run_memo(harness, memo, &spec(Control::SizeMatchedRandom { seed }))?);
        }
        let random = mean_report(&random);
        rows.push(AblationRow::new(ckpt, set, scope, Control::None.kind_label(), universal.as_ref()));
        rows.push(AblationRow::new(ckpt, set, scope, Control::Complement.kind_label(), complement.as_ref()));
        rows.push(AblationRow::new(
            ckpt,
            set,
            scope,
            Control::SizeMatchedRandom { seed: 0 }.kind_label(),
            random.as_ref(),
        ));
    }
    Ok(rows)
}

fn mean_report(reports: &[AblationReport]) -> Option<AblationReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&AblationReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(AblationReport {
        mean_kl: mean(|r| r.mean_kl),
        mean_loss_original: first.mean_loss_original,
        mean_loss_ablated: mean(|r| r.mean_loss_ablated),
        loss_delta: mean(|r| r.loss_delta),
        n_tokens_evaluated: first.n_tokens_evaluated,
        n_ablated: first.n_ablated,
    })
}

fn persistence_rows(p: &PersistenceStat) -> Vec<PersistenceRow> {
    let row = |layer: String, n_from: u64, n_kept: u64, value: Option<f64>| PersistenceRow {
        from_checkpoint: p.from_checkpoint,
        to_checkpoint: p.to_checkpoint,
        threshold: p.threshold,
        pairing: p.pairing.clone(),
        layer,
        n_from,
        n_kept,
        persistence: value,
    };
    let mut rows = vec![row(ALL_LAYERS.into(), p.total_from(), p.total_kept(), p.overall)];
    for (l, v) in p.per_layer.iter().enumerate() {
        rows.push(row(l.to_string(), p.from_count[l], p.kept_count[l], *v));
    }
    rows
}
