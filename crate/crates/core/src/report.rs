//! Plot-ready tables derived from a pipeline output directory.
//!
//! All files land in `{dir}/report/`:
//!
//! - `table1_universal_percent.csv`: `threshold,<checkpoint>...`; each cell
//!   is the mean over pairings of the universal percentage.
//! - `fig1_persistence_by_layer.csv`:
//!   `from_checkpoint,to_checkpoint,threshold,layer,n_from,n_kept,persistence`,
//!   counts pooled over pairings.
//! - `figA_persistence_by_pairing.csv`: the same per pairing.
//! - `fig2_ablation_kl.csv`: `checkpoint,pairing,threshold,target_kind,mean_kl`
//!   for all-layer ablations.
//! - `figB1_ablation_loss.csv`: as above with `loss_delta`.
//! - `figB2_layer_ablation.csv`:
//!   `checkpoint,threshold,layer,target_kind,mean_kl,loss_delta,n_pairings`,
//!   per-layer ablations averaged over the pairings where the layer holds
//!   universal neurons.
//!
//! Undefined cells are empty.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    read_rows, write_rows, AblationRow, PersistenceRow, UniversalCountRow, ABLATION_FILE, ALL_LAYERS,
    PERSISTENCE_FILE, PERSISTENCE_HEADER, UNIVERSAL_COUNTS_FILE,
};

pub const REPORT_DIR: &str = "report";
pub const TABLE1_FILE: &str = "table1_universal_percent.csv";
pub const FIG1_FILE: &str = "fig1_persistence_by_layer.csv";
pub const FIGA_FILE: &str = "figA_persistence_by_pairing.csv";
pub const FIG2_FILE: &str = "fig2_ablation_kl.csv";
pub const FIGB1_FILE: &str = "figB1_ablation_loss.csv";
pub const FIGB2_FILE: &str = "figB2_layer_ablation.csv";

pub const FIG1_HEADER: &[&str] = &[
    "from_checkpoint",
    "to_checkpoint",
    "threshold",
    "layer",
    "n_from",
    "n_kept",
    "persistence",
];
pub const FIG2_HEADER: &[&str] = &["checkpoint", "pairing", "threshold", "target_kind", "mean_kl"];
pub const FIGB1_HEADER: &[&str] = &["checkpoint", "pairing", "threshold", "target_kind", "loss_delta"];
pub const FIGB2_HEADER: &[&str] = &[
    "checkpoint",
    "threshold",
    "layer",
    "target_kind",
    "mean_kl",
    "loss_delta",
    "n_pairings",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledPersistenceRow {
    pub from_checkpoint: u64,
    pub to_checkpoint: u64,
    pub threshold: f64,
    pub layer: String,
    pub n_from: u64,
    pub n_kept: u64,
    pub persistence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub checkpoint: u64,
    pub pairing: String,
    pub threshold: f64,
    pub target_kind: String,
    pub mean_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub checkpoint: u64,
    pub pairing: String,
    pub threshold: f64,
    pub target_kind: String,
    pub loss_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAblationRow {
    pub checkpoint: u64,
    pub threshold: f64,
    pub layer: u16,
    pub target_kind: String,
    pub mean_kl: Option<f64>,
    pub loss_delta: Option<f64>,
    pub n_pairings: u64,
}

/// Threshold × checkpoint grid of mean universal percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub checkpoints: Vec<u64>,
    pub thresholds: Vec<f64>,
    /// `cells[i][j]`: threshold `i`, checkpoint `j`.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Table1 {
    pub fn from_counts(rows: &[UniversalCountRow]) -> Self {
        let mut checkpoints: Vec<u64> = rows.iter().map(|r| r.checkpoint).collect();
        checkpoints.sort_unstable();
        checkpoints.dedup();
        let mut thresholds: Vec<f64> = rows.iter().map(|r| r.threshold).collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let cells = thresholds
            .iter()
            .map(|&t| {
                checkpoints
                    .iter()
                    .map(|&c| {
                        let vals: Vec<f64> = rows
                            .iter()
                            .filter(|r| r.threshold == t && r.checkpoint == c)
                            .map(|r| r.percent)
                            .collect();
                        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                    })
                    .collect()
            })
            .collect();
        Self {
            checkpoints,
            thresholds,
            cells,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["threshold".to_string()];
        header.extend(self.checkpoints.iter().map(|c| c.to_string()));
        w.write_record(&header)?;
        for (t, row) in self.thresholds.iter().zip(&self.cells) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Keys in first-appearance order with their grouped values.
fn group_by<T, K: PartialEq + Clone>(items: impl IntoIterator<Item = T>, key: impl Fn(&T) -> K) -> Vec<(K, Vec<T>)> {
    let mut groups: Vec<(K, Vec<T>)> = Vec::new();
    for item in items {
        let k = key(&item);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(item),
            None => groups.push((k, vec![item])),
        }
    }
    groups
}

/// Sums counts over pairings for each (interval, threshold, layer).
pub fn pool_persistence(rows: &[PersistenceRow]) -> Vec<PooledPersistenceRow> {
    group_by(rows, |r| (r.from_checkpoint, r.to_checkpoint, r.threshold.to_bits(), r.layer.clone()))
        .into_iter()
        .map(|((from, to, t, layer), rs)| {
            let n_from: u64 = rs.iter().map(|r| r.n_from).sum();
            let n_kept: u64 = rs.iter().map(|r| r.n_kept).sum();
            PooledPersistenceRow {
                from_checkpoint: from,
                to_checkpoint: to,
                threshold: f64::from_bits(t),
                layer,
                n_from,
                n_kept,
                persistence: (n_from > 0).then(|| n_kept as f64 / n_from as f64),
            }
        })
        .collect()
}

pub fn kl_rows(rows: &[AblationRow]) -> Vec<KlRow> {
    rows.iter()
        .filter(|r| r.scope == ALL_LAYERS)
        .map(|r| KlRow {
            checkpoint: r.checkpoint,
            pairing: r.pairing.clone(),
            threshold: r.threshold,
            target_kind: r.target_kind.clone(),
            mean_kl: r.mean_kl,
        })
        .collect()
}

pub fn loss_rows(rows: &[AblationRow]) -> Vec<LossRow> {
    rows.iter()
        .filter(|r| r.scope == ALL_LAYERS)
        .map(|r| LossRow {
            checkpoint: r.checkpoint,
            pairing: r.pairing.clone(),
            threshold: r.threshold,
            target_kind: r.target_kind.clone(),
            loss_delta: r.loss_delta,
        })
        .collect()
}

/// Per-layer ablations averaged over pairings; one row per
/// (checkpoint, threshold, layer, target kind).
pub fn layer_rows(rows: &[AblationRow]) -> Result<Vec<LayerAblationRow>> {
    let per_layer = rows
        .iter()
        .filter(|r| r.scope != ALL_LAYERS)
        .map(|r| {
            let layer = r
                .scope
                .parse::<u16>()
                .map_err(|_| Error::InvalidArgument(format!("ablation scope {:?} is not a layer", r.scope)))?;
            Ok((layer, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(group_by(per_layer, |(layer, r)| {
        (r.checkpoint, r.threshold.to_bits(), *layer, r.target_kind.clone())
    })
    .into_iter()
    .map(|((checkpoint, t, layer, target_kind), rs)| {
        let defined: Vec<&AblationRow> = rs.iter().map(|(_, r)| *r).filter(|r| r.mean_kl.is_some()).collect();
        let mean = |f: fn(&AblationRow) -> Option<f64>| {
            let v: Vec<f64> = defined.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        LayerAblationRow {
            checkpoint,
            threshold: f64::from_bits(t),
            layer,
            target_kind,
            mean_kl: mean(|r| r.mean_kl),
            loss_delta: mean(|r| r.loss_delta),
            n_pairings: defined.len() as u64,
        }
    })
    .collect())
}

fn upstream(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::InvalidArgument(format!(
            "missing upstream file {}; run the pipeline first",
            p.display()
        )))
    }
}

/// Reads the pipeline CSVs in `dir` and writes every report table.
/// Returns the written paths.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let counts: Vec<UniversalCountRow> = read_rows(&upstream(dir, UNIVERSAL_COUNTS_FILE)?)?;
    let persistence: Vec<PersistenceRow> = read_rows(&upstream(dir, PERSISTENCE_FILE)?)?;
    let ablation: Vec<AblationRow> = read_rows(&upstream(dir, ABLATION_FILE)?)?;

    let out = dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let p = |name: &str| out.join(name);

    Table1::from_counts(&counts).write_csv(&p(TABLE1_FILE))?;
    write_rows(&p(FIG1_FILE), &pool_persistence(&persistence), FIG1_HEADER)?;
    write_rows(&p(FIGA_FILE), &persistence, PERSISTENCE_HEADER)?;
    write_rows(&p(FIG2_FILE), &kl_rows(&ablation), FIG2_HEADER)?;
    write_rows(&p(FIGB1_FILE), &loss_rows(&ablation), FIGB1_HEADER)?;
    write_rows(&p(FIGB2_FILE), &layer_rows(&ablation)?, FIGB2_HEADER)?;
    Ok([TABLE1_FILE, FIG1_FILE, FIGA_FILE, FIG2_FILE, FIGB1_FILE, FIGB2_FILE]
        .iter()
        .map(|n| p(n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(checkpoint: u64, threshold: f64, pairing: &str, percent: f64) -> UniversalCountRow {
        UniversalCountRow {
            checkpoint,
            threshold,
            pairing: pairing.into(),
            n_universal: 0,
            total_neurons: 100,
            percent,
        }
    }

    #[test]
    fn table1_averages_pairings() {
        let t = Table1::from_counts(&[
            count(200, 0.5, "b", 4.0),
            count(200, 0.5, "c", 6.0),
            count(100, 0.5, "b", 1.0),
            count(100, 0.4, "b", 2.0),
        ]);
        assert_eq!(t.checkpoints, vec![100, 200]);
        assert_eq!(t.thresholds, vec![0.4, 0.5]);
        assert_eq!(t.cells, vec![vec![Some(2.0), None], vec![Some(1.0), Some(5.0)]]);
        let d = tempfile::tempdir().unwrap();
        t.write_csv(&d.path().join("t.csv")).unwrap();
        assert_eq!(
            std::fs::read_to_string(d.path().join("t.csv")).unwrap(),
            "threshold,100,200\n0.4,2,\n0.5,1,5\n"
        );
    }

    fn prow(pairing: &str, layer: &str, n_from: u64, n_kept: u64) -> PersistenceRow {
        PersistenceRow {
            from_checkpoint: 1,
            to_checkpoint: 2,
            threshold: 0.5,
            pairing: pairing.into(),
            layer: layer.into(),
            n_from,
            n_kept,
            persistence: (n_from > 0).then(|| n_kept as f64 / n_from as f64),
        }
    }

    #[test]
    fn persistence_pools_counts() {
        let pooled = pool_persistence(&[prow("b", "0", 4, 1), prow("b", "1", 0, 0), prow("c", "0", 4, 3), prow("c", "1", 0, 0)]);
        assert_eq!(pooled.len(), 2);
        assert_eq!((pooled[0].n_from, pooled[0].n_kept, pooled[0].persistence), (8, 4, Some(0.5)));
        assert_eq!(pooled[1].persistence, None);
    }

    fn arow(pairing: &str, scope: &str, kind: &str, kl: Option<f64>) -> AblationRow {
        AblationRow {
            checkpoint: 1,
            pairing: pairing.into(),
            threshold: 0.5,
            scope: scope.into(),
            target_kind: kind.into(),
            mean_kl: kl,
            loss_delta: kl.map(|k| k / 2.0),
            n_tokens: kl.map(|_| 10),
            n_ablated: kl.map(|_| 1),
            mean_loss_original: kl.map(|_| 1.0),
            mean_loss_ablated: kl.map(|k| 1.0 + k / 2.0),
        }
    }

    #[test]
    fn ablation_views() {
        let rows = [
            arow("b", "all", "universal", Some(1.0)),
            arow("b", "0", "universal", None),
            arow("b", "1", "universal", Some(2.0)),
            arow("c", "all", "universal", Some(3.0)),
            arow("c", "0", "universal", Some(1.0)),
            arow("c", "1", "universal", Some(4.0)),
        ];
        let kl = kl_rows(&rows);
        assert_eq!(kl.len(), 2);
        assert_eq!(kl[1].mean_kl, Some(3.0));
        assert_eq!(loss_rows(&rows)[0].loss_delta, Some(0.5));
        let layers = layer_rows(&rows).unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!((layers[0].layer, layers[0].mean_kl, layers[0].n_pairings), (0, Some(1.0), 1));
        assert_eq!((layers[1].mean_kl, layers[1].n_pairings), (Some(3.0), 2));
        assert!(layer_rows(&[arow("b", "x", "universal", None)]).is_err());
    }

    #[test]
    fn missing_upstream_files_error() {
        let d = tempfile::tempdir().unwrap();
        let e = write_report(d.path()).unwrap_err();
        assert!(e.to_string().contains(UNIVERSAL_COUNTS_FILE));
    }
}
