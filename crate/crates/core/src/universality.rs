//! Threshold-based universal-neuron sets and their persistence across
//! checkpoints.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::correlation::ExcessCorrelationTable;
use crate::error::{Error, Result};
use crate::model::NeuronId;

/// How excess tables against several target models combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// One set per (reference, target) pair.
    PerPair,
    /// Neurons universal with respect to every target.
    Intersection,
}

pub const INTERSECTION_LABEL: &str = "intersection";

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalSet {
    pub reference_model: String,
    pub target_models: Vec<String>,
    pub checkpoint: u64,
    pub threshold: f64,
    pub n_layers: u16,
    pub members: BTreeSet<NeuronId>,
    /// Excess against each target, in `target_models` order.
    pub per_target_excess: BTreeMap<NeuronId, Vec<f64>>,
}

impl UniversalSet {
    /// Target id for a per-pair set, `"intersection"` otherwise.
    pub fn pairing_label(&self) -> String {
        match self.target_models.as_slice() {
            [one] => one.clone(),
            _ => INTERSECTION_LABEL.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn count_in_layer(&self, layer: u16) -> usize {
        self.members
            .range(NeuronId::new(layer, 0)..=NeuronId::new(layer, u32::MAX))
            .count()
    }
}

/// One reference-layer-complete excess table per target model.
#[derive(Debug, Clone)]
pub struct TargetTable<'a> {
    pub target_model: &'a str,
    pub table: &'a ExcessCorrelationTable,
}

/// Neurons whose excess correlation strictly exceeds `threshold`.
pub fn select_universal(
    reference_model: &str,
    checkpoint: u64,
    n_layers: u16,
    tables: &[TargetTable<'_>],
    threshold: f64,
    mode: PairingMode,
) -> Result<Vec<UniversalSet>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidArgument("no excess tables".into()))?;
    let ids: Vec<NeuronId> = first
        .table
        .rows
        .iter()
        .map(|r| NeuronId::new(r.layer, r.neuron))
        .collect();
    for t in tables {
        let same = t.table.rows.len() == ids.len()
            && t
                .table
                .rows
                .iter()
                .zip(&ids)
                .all(|(r, id)| r.layer == id.layer && r.neuron == id.index);
        if !same {
            return Err(Error::Shape(format!(
                "excess table for {} does not share the reference neuron index space",
                t.target_model
            )));
        }
    }
    let excess = |t: &TargetTable<'_>, i: usize| t.table.rows[i].excess;

    let build = |group: &[TargetTable<'_>]| {
        let mut members = BTreeSet::new();
        let mut per_target_excess = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            let values: Option<Vec<f64>> = group.iter().map(|t| excess(t, i)).collect();
            if let Some(values) = values {
                if values.iter().all(|&e| e > threshold) {
                    members.insert(*id);
                    per_target_excess.insert(*id, values);
                }
            }
        }
        UniversalSet {
            reference_model: reference_model.to_string(),
            target_models: group.iter().map(|t| t.target_model.to_string()).collect(),
            checkpoint,
            threshold,
            n_layers,
            members,
            per_target_excess,
        }
    };

    Ok(match mode {
        PairingMode::PerPair => tables.iter().map(|t| build(std::slice::from_ref(t))).collect(),
        PairingMode::Intersection => vec![build(tables)],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceStat {
    pub from_checkpoint: u64,
    pub to_checkpoint: u64,
    pub threshold: f64,
    pub pairing: String,
    /// `|U1 ∩ U2| / |U1|`; `None` when `U1` is empty.
    pub overall: Option<f64>,
    /// Per layer; `None` when `U1` has no members in that layer.
    pub per_layer: Vec<Option<f64>>,
    pub from_count: Vec<u64>,
    pub kept_count: Vec<u64>,
}

impl PersistenceStat {
    pub fn total_from(&self) -> u64 {
        self.from_count.iter().sum()
    }

    pub fn total_kept(&self) -> u64 {
        self.kept_count.iter().sum()
    }

    /// Per-layer rates weighted by `U1` layer counts. Each product
    /// `rate · count` is a kept count up to one rounding step, so it is
    /// rounded back to that integer before summing.
    pub fn aggregate_per_layer(&self) -> Option<f64> {
        let total = self.total_from();
        if total == 0 {
            return None;
        }
        let weighted: f64 = self
            .per_layer
            .iter()
            .zip(&self.from_count)
            .filter_map(|(p, &n)| p.map(|p| (p * n as f64).round()))
            .sum();
        Some(weighted / total as f64)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// P(universal at `u2`'s checkpoint | universal at `u1`'s checkpoint),
/// overall and per layer.
pub fn persistence(u1: &UniversalSet, u2: &UniversalSet) -> Result<PersistenceStat> {
    if u1.reference_model != u2.reference_model {
        return Err(Error::InvalidArgument(format!(
            "reference models differ: {} vs {}",
            u1.reference_model, u2.reference_model
        )));
    }
    if u1.threshold.total_cmp(&u2.threshold) != Ordering::Equal {
        return Err(Error::InvalidArgument(format!(
            "thresholds differ: {} vs {}",
            u1.threshold, u2.threshold
        )));
    }
    if u1.target_models != u2.target_models {
        return Err(Error::InvalidArgument(format!(
            "pairings differ: {:?} vs {:?}",
            u1.target_models, u2.target_models
        )));
    }
    if u1.n_layers != u2.n_layers {
        return Err(Error::InvalidArgument("layer counts differ".into()));
    }
    if u1.checkpoint == u2.checkpoint {
        return Err(Error::InvalidArgument(format!(
            "both sets are from checkpoint {}",
            u1.checkpoint
        )));
    }
    let n_layers = u1.n_layers as usize;
    let mut from_count = vec![0u64; n_layers];
    let mut kept_count = vec![0u64; n_layers];
    for n in &u1.members {
        let l = n.layer as usize;
        if l >= n_layers {
            return Err(Error::InvalidArgument(format!("neuron {n} outside {n_layers} layers")));
        }
        from_count[l] += 1;
        if u2.members.contains(n) {
            kept_count[l] += 1;
        }
    }
    let per_layer = from_count
        .iter()
        .zip(&kept_count)
        .map(|(&f, &k)| ratio(k, f))
        .collect();
    Ok(PersistenceStat {
        from_checkpoint: u1.checkpoint,
        to_checkpoint: u2.checkpoint,
        threshold: u1.threshold,
        pairing: u1.pairing_label(),
        overall: ratio(kept_count.iter().sum(), from_count.iter().sum()),
        per_layer,
        from_count,
        kept_count,
    })
}

/// Mean universal percentage over pairings for one (threshold, checkpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub threshold: f64,
    pub checkpoint: u64,
    pub percent: f64,
    pub n_pairings: usize,
}

/// Cells sorted by threshold, then checkpoint.
pub fn universality_summary(sets: &[UniversalSet], total_neurons: u64) -> Result<Vec<SummaryCell>> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no universal sets to summarize".into()));
    }
    if total_neurons == 0 {
        return Err(Error::InvalidArgument("total_neurons must be positive".into()));
    }
    let mut sorted: Vec<&UniversalSet> = sets.iter().collect();
    sorted.sort_by(|a, b| {
        a.threshold
            .total_cmp(&b.threshold)
            .then(a.checkpoint.cmp(&b.checkpoint))
    });
    let mut cells: Vec<SummaryCell> = Vec::new();
    for group in sorted.chunk_by(|a, b| {
        a.threshold.total_cmp(&b.threshold) == Ordering::Equal && a.checkpoint == b.checkpoint
    }) {
        let mean = group
            .iter()
            .map(|s| 100.0 * s.len() as f64 / total_neurons as f64)
            .sum::<f64>()
            / group.len() as f64;
        cells.push(SummaryCell {
            threshold: group[0].threshold,
            checkpoint: group[0].checkpoint,
            percent: mean,
            n_pairings: group.len(),
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::ExcessRow;

    fn table(excess: &[Option<f64>]) -> ExcessCorrelationTable {
        ExcessCorrelationTable {
            rows: excess
                .iter()
                .enumerate()
                .map(|(i, &e)| ExcessRow {
                    neuron: i as u32 % 2,
                    layer: (i / 2) as u16,
                    max_rho: e,
                    max_rho_rotated: e.map(|_| 0.0),
                    excess: e,
                    partner: e.map(|_| 0),
                })
                .collect(),
        }
    }

    fn set(ckpt: u64, members: &[(u16, u32)]) -> UniversalSet {
        UniversalSet {
            reference_model: "a".into(),
            target_models: vec!["b".into()],
            checkpoint: ckpt,
            threshold: 0.5,
            n_layers: 3,
            members: members.iter().map(|&(l, i)| NeuronId::new(l, i)).collect(),
            per_target_excess: BTreeMap::new(),
        }
    }

    #[test]
    fn strict_threshold_selection() {
        let t = table(&[Some(0.7), Some(0.3), Some(0.5), None]);
        let tt = [TargetTable { target_model: "b", table: &t }];
        let s = select_universal("a", 100, 2, &tt, 0.5, PairingMode::PerPair).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].members, BTreeSet::from([NeuronId::new(0, 0)]));
        assert_eq!(s[0].per_target_excess[&NeuronId::new(0, 0)], vec![0.7]);
        assert_eq!(s[0].pairing_label(), "b");
    }

    #[test]
    fn pairing_modes() {
        let tb = table(&[Some(0.7), Some(0.6), Some(0.1), Some(0.9)]);
        let tc = table(&[Some(0.8), Some(0.2), Some(0.9), Some(0.9)]);
        let tt = [
            TargetTable { target_model: "b", table: &tb },
            TargetTable { target_model: "c", table: &tc },
        ];
        let per = select_universal("a", 1, 2, &tt, 0.5, PairingMode::PerPair).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].len(), 3);
        assert_eq!(per[1].len(), 3);
        let inter = select_universal("a", 1, 2, &tt, 0.5, PairingMode::Intersection).unwrap();
        assert_eq!(inter.len(), 1);
        assert_eq!(
            inter[0].members,
            BTreeSet::from([NeuronId::new(0, 0), NeuronId::new(1, 1)])
        );
        assert_eq!(inter[0].pairing_label(), INTERSECTION_LABEL);
        assert!(select_universal("a", 1, 2, &[], 0.5, PairingMode::PerPair).is_err());
    }

    #[test]
    fn mismatched_index_spaces_rejected() {
        let tb = table(&[Some(0.7), Some(0.6)]);
        let tc = table(&[Some(0.7)]);
        let tt = [
            TargetTable { target_model: "b", table: &tb },
            TargetTable { target_model: "c", table: &tc },
        ];
        assert!(select_universal("a", 1, 1, &tt, 0.5, PairingMode::PerPair).is_err());
    }

    #[test]
    fn persistence_cases() {
        let u = set(100, &[(0, 1), (1, 2)]);
        let same = persistence(&u, &set(200, &[(0, 1), (1, 2)])).unwrap();
        assert_eq!(same.overall, Some(1.0));
        assert_eq!(same.per_layer, vec![Some(1.0), Some(1.0), None]);

        let u1 = set(100, &[(0, 0), (0, 1), (1, 0), (2, 5)]);
        let u2 = set(200, &[(0, 1), (2, 5), (1, 9)]);
        let p = persistence(&u1, &u2).unwrap();
        assert_eq!(p.overall, Some(0.5));
        assert_eq!(p.per_layer, vec![Some(0.5), Some(0.0), Some(1.0)]);
        assert_eq!(p.aggregate_per_layer(), p.overall);

        let back = persistence(&u2, &u1).unwrap();
        assert_eq!(back.overall, Some(2.0 / 3.0));

        let empty = persistence(&set(100, &[]), &u2).unwrap();
        assert_eq!(empty.overall, None);
        assert!(empty.per_layer.iter().all(Option::is_none));
    }

    #[test]
    fn persistence_rejects_mismatches() {
        let u1 = set(100, &[(0, 0)]);
        assert!(persistence(&u1, &set(100, &[])).is_err());
        let mut other = set(200, &[]);
        other.threshold = 0.4;
        assert!(persistence(&u1, &other).is_err());
        let mut other = set(200, &[]);
        other.target_models = vec!["c".into()];
        assert!(persistence(&u1, &other).is_err());
        let mut other = set(200, &[]);
        other.reference_model = "z".into();
        assert!(persistence(&u1, &other).is_err());
    }

    #[test]
    fn summary_percentages() {
        let one = universality_summary(&[set(100, &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)])], 100).unwrap();
        assert_eq!(one[0].percent, 5.0);
        let four: Vec<_> = (0..4).map(|i| (0u16, i)).collect();
        let six: Vec<_> = (0..6).map(|i| (1u16, i)).collect();
        let mut b = set(100, &six);
        b.target_models = vec!["c".into()];
        let two = universality_summary(&[set(100, &four), b], 100).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].percent, 5.0);
        assert_eq!(two[0].n_pairings, 2);
        assert!(universality_summary(&[], 100).is_err());
    }
}
