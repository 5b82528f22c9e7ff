//! Streaming all-pairs Pearson correlation between the neurons of two
//! layers, the random Gaussian rotation baseline, and per-neuron excess
//! correlation.
//!
//! Moments are held as means plus centered second moments and merged with
//! the pairwise (Chan et al.) update, so accumulators built on disjoint
//! token ranges combine in any order. Raw sums (`sum_x`, `sum_xy`, ...) are
//! available as derived quantities.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::{derive_rng, derive_u64};
use crate::tensor_io::stream_activations;

/// Pairs whose centered sum of squares `n·sum_xx − sum_x²` is at or below
/// this value are degenerate (dead neurons).
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    mean_x: Array1<f64>,
    mean_y: Array1<f64>,
    m2_x: Array1<f64>,
    m2_y: Array1<f64>,
    /// Σ_t (x_kt − μ_k)(y_lt − μ_l), K × L
    comoment: Array2<f64>,
}

impl MomentAccumulator {
    pub fn new(k: usize, l: usize) -> Self {
        Self {
            n: 0,
            mean_x: Array1::zeros(k),
            mean_y: Array1::zeros(l),
            m2_x: Array1::zeros(k),
            m2_y: Array1::zeros(l),
            comoment: Array2::zeros((k, l)),
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dims(&self) -> (usize, usize) {
        self.comoment.dim()
    }

    pub fn sum_x(&self) -> Array1<f64> {
        &self.mean_x * self.n as f64
    }

    pub fn sum_y(&self) -> Array1<f64> {
        &self.mean_y * self.n as f64
    }

    pub fn sum_xx(&self) -> Array1<f64> {
        &self.m2_x + &(&self.mean_x * &self.mean_x * self.n as f64)
    }

    pub fn sum_yy(&self) -> Array1<f64> {
        &self.m2_y + &(&self.mean_y * &self.mean_y * self.n as f64)
    }

    pub fn sum_xy(&self) -> Array2<f64> {
        let n = self.n as f64;
        let outer = outer(&self.mean_x, &self.mean_y);
        &self.comoment + &(outer * n)
    }

    /// `n·sum_xx − sum_x²` per x neuron, computed without cancellation.
    pub fn centered_ss_x(&self) -> Array1<f64> {
        &self.m2_x * self.n as f64
    }

    pub fn centered_ss_y(&self) -> Array1<f64> {
        &self.m2_y * self.n as f64
    }

    /// Adds a chunk of `t` tokens: `x` is K × t, `y` is L × t.
    pub fn accumulate(&mut self, x: ArrayView2<f32>, y: ArrayView2<f32>) -> Result<()> {
        self.accumulate_f64(x.mapv(f64::from).view(), y.mapv(f64::from).view())
    }

    pub fn accumulate_f64(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
        let (k, l) = self.dims();
        if x.ncols() != y.ncols() {
            return Err(Error::Shape(format!(
                "chunk widths differ: x has {} tokens, y has {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if x.nrows() != k || y.nrows() != l {
            return Err(Error::Shape(format!(
                "chunk rows {}×{} for accumulator {k}×{l}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument("empty chunk".into()));
        }
        let chunk = Self::from_chunk(x, y);
        self.merge(&chunk)
    }

    fn from_chunk(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Self {
        let t = x.ncols();
        let mean_x = x.mean_axis(Axis(1)).expect("t >= 1");
        let mean_y = y.mean_axis(Axis(1)).expect("t >= 1");
        let xc = &x - &mean_x.view().insert_axis(Axis(1));
        let yc = &y - &mean_y.view().insert_axis(Axis(1));
        let m2_x = xc.map_axis(Axis(1), |r| r.dot(&r));
        let m2_y = yc.map_axis(Axis(1), |r| r.dot(&r));
        let comoment = xc.dot(&yc.t());
        Self {
            n: t as u64,
            mean_x,
            mean_y,
            m2_x,
            m2_y,
            comoment,
        }
    }

    /// Combines the statistics of a disjoint token range.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "merging accumulators {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dx = &other.mean_x - &self.mean_x;
        let dy = &other.mean_y - &self.mean_y;
        let w = na * nb / n;
        self.m2_x = &self.m2_x + &other.m2_x + &(&dx * &dx * w);
        self.m2_y = &self.m2_y + &other.m2_y + &(&dy * &dy * w);
        self.comoment += &other.comoment;
        self.comoment.scaled_add(w, &outer(&dx, &dy));
        self.mean_x.scaled_add(nb / n, &dx);
        self.mean_y.scaled_add(nb / n, &dy);
        self.n += other.n;
        Ok(())
    }

    /// Pearson correlation for every (x, y) pair.
    pub fn finalize(&self) -> Result<CorrelationMatrix> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "correlation needs n >= 2 tokens, have {}",
                self.n
            )));
        }
        let ss_x = self.centered_ss_x();
        let ss_y = self.centered_ss_y();
        let degenerate_rows: BTreeSet<usize> = (0..ss_x.len())
            .filter(|&k| ss_x[k].is_nan() || ss_x[k] <= VARIANCE_FLOOR)
            .collect();
        let degenerate_cols: BTreeSet<usize> = (0..ss_y.len())
            .filter(|&l| ss_y[l].is_nan() || ss_y[l] <= VARIANCE_FLOOR)
            .collect();
        let mut rho = Array2::<f64>::from_elem(self.dims(), f64::NAN);
        for ((k, l), r) in rho.indexed_iter_mut() {
            if !degenerate_rows.contains(&k) && !degenerate_cols.contains(&l) {
                *r = self.comoment[[k, l]] / (self.m2_x[k] * self.m2_y[l]).sqrt();
            }
        }
        Ok(CorrelationMatrix {
            rho,
            degenerate_rows,
            degenerate_cols,
        })
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

/// Pearson correlations, K × L. Entries of degenerate rows or columns are
/// NaN and must be read through [`CorrelationMatrix::get`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub rho: Array2<f64>,
    pub degenerate_rows: BTreeSet<usize>,
    pub degenerate_cols: BTreeSet<usize>,
}

impl CorrelationMatrix {
    pub fn dims(&self) -> (usize, usize) {
        self.rho.dim()
    }

    pub fn get(&self, k: usize, l: usize) -> Option<f64> {
        if self.degenerate_rows.contains(&k) || self.degenerate_cols.contains(&l) {
            None
        } else {
            Some(self.rho[[k, l]])
        }
    }

    /// Largest correlation in row `k` over non-degenerate columns, with its
    /// column. Ties resolve to the lowest column index.
    pub fn row_max(&self, k: usize) -> Option<(f64, usize)> {
        if self.degenerate_rows.contains(&k) {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for (l, &r) in self.rho.row(k).iter().enumerate() {
            if self.degenerate_cols.contains(&l) {
                continue;
            }
            if best.is_none_or(|(b, _)| r > b) {
                best = Some((r, l));
            }
        }
        best
    }

    /// Joins matrices over the same rows side by side (target neurons from
    /// several layers). Column indices of later blocks are offset.
    pub fn hconcat(parts: &[CorrelationMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no correlation blocks".into()))?;
        let k = first.dims().0;
        let views: Vec<_> = parts.iter().map(|p| p.rho.view()).collect();
        let rho = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let mut degenerate_cols = BTreeSet::new();
        let mut offset = 0;
        for p in parts {
            if p.dims().0 != k || p.degenerate_rows != first.degenerate_rows {
                return Err(Error::Shape("blocks disagree on rows".into()));
            }
            degenerate_cols.extend(p.degenerate_cols.iter().map(|c| c + offset));
            offset += p.dims().1;
        }
        Ok(Self {
            rho,
            degenerate_rows: first.degenerate_rows.clone(),
            degenerate_cols,
        })
    }

    /// Long-format CSV: `row,col,rho`, degenerate cells left empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["row", "col", "rho"])?;
        for ((k, l), _) in self.rho.indexed_iter() {
            let cell = self.get(k, l).map(|r| r.to_string()).unwrap_or_default();
            w.write_record([k.to_string(), l.to_string(), cell])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// A fixed Gaussian mixing matrix applied to one target layer's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationBaseline {
    pub seed: u64,
    pub layer: u16,
    /// L × L, i.i.d. standard normal entries.
    pub matrix: Array2<f64>,
}

impl RotationBaseline {
    /// Draws the rotation for (`model_id`, `checkpoint`, `layer`) of width
    /// `n_neurons` from the run's master seed.
    pub fn derive(master_seed: u64, model_id: &str, checkpoint: u64, layer: u16, n_neurons: usize) -> Self {
        let parts: [&[u8]; 5] = [
            &master_seed.to_le_bytes(),
            model_id.as_bytes(),
            &checkpoint.to_le_bytes(),
            &layer.to_le_bytes(),
            &(n_neurons as u64).to_le_bytes(),
        ];
        let mut rng = derive_rng("rotation", &parts);
        let matrix = Array2::from_shape_simple_fn((n_neurons, n_neurons), || {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self {
            seed: derive_u64("rotation", &parts),
            layer,
            matrix,
        }
    }

    /// Uses `matrix` as is (tests inject the identity or scaled draws).
    pub fn from_matrix(layer: u16, matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape(format!("rotation must be square, got {:?}", matrix.dim())));
        }
        Ok(Self {
            seed: 0,
            layer,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `G · y` for an L × t chunk.
    pub fn rotate_chunk(&self, y: ArrayView2<f32>) -> Result<Array2<f64>> {
        self.rotate_chunk_f64(y.mapv(f64::from).view())
    }

    pub fn rotate_chunk_f64(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.nrows() != self.dim() {
            return Err(Error::Shape(format!(
                "rotation is {0}×{0}, chunk has {1} rows",
                self.dim(),
                y.nrows()
            )));
        }
        Ok(self.matrix.dot(&y))
    }
}

/// Per-neuron maxima and excess correlation. `None` marks rows where no
/// non-degenerate pair exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcessRow {
    pub neuron: u32,
    pub layer: u16,
    pub max_rho: Option<f64>,
    pub max_rho_rotated: Option<f64>,
    pub excess: Option<f64>,
    pub partner: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExcessCorrelationTable {
    pub rows: Vec<ExcessRow>,
}

/// Excess correlation of each row neuron of `layer`: max real correlation
/// minus max correlation against the rotated target.
pub fn excess_table(
    rho_real: &CorrelationMatrix,
    rho_rotated: &CorrelationMatrix,
    layer: u16,
) -> Result<ExcessCorrelationTable> {
    let k = rho_real.dims().0;
    if rho_rotated.dims().0 != k {
        return Err(Error::Shape(format!(
            "real has {k} rows, rotated has {}",
            rho_rotated.dims().0
        )));
    }
    let rows = (0..k)
        .map(|i| {
            let real = rho_real.row_max(i);
            let rot = rho_rotated.row_max(i).map(|(r, _)| r);
            let max_rho = real.map(|(r, _)| r);
            ExcessRow {
                neuron: i as u32,
                layer,
                max_rho,
                max_rho_rotated: rot,
                excess: max_rho.zip(rot).map(|(a, b)| a - b),
                partner: real.map(|(_, l)| l as u32),
            }
        })
        .collect();
    Ok(ExcessCorrelationTable { rows })
}

const EXCESS_MAGIC: &[u8; 4] = b"EXC1";

fn opt_f64(w: &mut impl Write, v: Option<f64>) -> std::io::Result<()> {
    w.write_all(&[v.is_some() as u8])?;
    w.write_all(&v.unwrap_or(0.0).to_le_bytes())
}

fn read_opt_f64(r: &mut impl Read) -> std::io::Result<Option<f64>> {
    let mut flag = [0u8; 1];
    let mut b = [0u8; 8];
    r.read_exact(&mut flag)?;
    r.read_exact(&mut b)?;
    Ok((flag[0] == 1).then(|| f64::from_le_bytes(b)))
}

impl ExcessCorrelationTable {
    pub fn concat(tables: impl IntoIterator<Item = ExcessCorrelationTable>) -> Self {
        Self {
            rows: tables.into_iter().flat_map(|t| t.rows).collect(),
        }
    }

    /// CSV with header `neuron,layer,max_rho,max_rho_rotated,excess,partner`;
    /// undefined cells are empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["neuron", "layer", "max_rho", "max_rho_rotated", "excess", "partner"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.neuron.to_string(),
                r.layer.to_string(),
                cell(r.max_rho),
                cell(r.max_rho_rotated),
                cell(r.excess),
                r.partner.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Binary cache: `"EXC1" | u64 rows | per row: u32 neuron, u16 layer,
    /// 3 × (u8 defined, f64), u8 defined, u32 partner` (all LE).
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut body = || -> std::io::Result<()> {
            w.write_all(EXCESS_MAGIC)?;
            w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
            for r in &self.rows {
                w.write_all(&r.neuron.to_le_bytes())?;
                w.write_all(&r.layer.to_le_bytes())?;
                opt_f64(&mut w, r.max_rho)?;
                opt_f64(&mut w, r.max_rho_rotated)?;
                opt_f64(&mut w, r.excess)?;
                w.write_all(&[r.partner.is_some() as u8])?;
                w.write_all(&r.partner.unwrap_or(0).to_le_bytes())?;
            }
            w.flush()
        };
        body().map_err(io)
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != EXCESS_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "EXC1",
            });
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n).map_err(io)?;
        let n = u64::from_le_bytes(n);
        let mut rows = Vec::with_capacity(n.min(1 << 20) as usize);
        for _ in 0..n {
            let mut b4 = [0u8; 4];
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b4).map_err(io)?;
            let neuron = u32::from_le_bytes(b4);
            r.read_exact(&mut b2).map_err(io)?;
            let layer = u16::from_le_bytes(b2);
            let max_rho = read_opt_f64(&mut r).map_err(io)?;
            let max_rho_rotated = read_opt_f64(&mut r).map_err(io)?;
            let excess = read_opt_f64(&mut r).map_err(io)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(io)?;
            r.read_exact(&mut b4).map_err(io)?;
            rows.push(ExcessRow {
                neuron,
                layer,
                max_rho,
                max_rho_rotated,
                excess,
                partner: (flag[0] == 1).then(|| u32::from_le_bytes(b4)),
            });
        }
        Ok(Self { rows })
    }
}

/// Which target neurons a reference neuron is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MatchScope {
    /// Same layer index in the target model.
    Layer,
    /// Every layer of the target model; partners are reported as
    /// `layer · d_mlp + index`.
    All,
}

/// Real and rotated correlation of one reference layer against one target
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCorrelation {
    pub real: CorrelationMatrix,
    pub rotated: CorrelationMatrix,
}

/// Streams the reference dump `x` against each target dump in lockstep and
/// returns the real and rotated correlation matrices per target.
pub fn correlate_files(
    x: &Path,
    targets: &[(&Path, &RotationBaseline)],
    chunk_tokens: u64,
) -> Result<Vec<LayerCorrelation>> {
    targets
        .par_iter()
        .map(|(y, rot)| correlate_pair(x, y, rot, chunk_tokens))
        .collect()
}

fn correlate_pair(x: &Path, y: &Path, rot: &RotationBaseline, chunk_tokens: u64) -> Result<LayerCorrelation> {
    let xs = stream_activations(x, chunk_tokens)?;
    let ys = stream_activations(y, chunk_tokens)?;
    if xs.meta().n_tokens != ys.meta().n_tokens {
        return Err(Error::Shape(format!(
            "{} has {} tokens, {} has {}",
            x.display(),
            xs.meta().n_tokens,
            y.display(),
            ys.meta().n_tokens
        )));
    }
    let (k, l) = (xs.meta().n_neurons as usize, ys.meta().n_neurons as usize);
    if rot.dim() != l {
        return Err(Error::Shape(format!("rotation is {}-wide, target layer has {l} neurons", rot.dim())));
    }
    let mut real = MomentAccumulator::new(k, l);
    let mut rotated = MomentAccumulator::new(k, l);
    for (xc, yc) in xs.zip(ys) {
        let (xc, yc) = (xc?, yc?);
        let x64 = xc.values.mapv(f64::from);
        let y64 = yc.values.mapv(f64::from);
        real.accumulate_f64(x64.view(), y64.view())?;
        rotated.accumulate_f64(x64.view(), rot.rotate_chunk_f64(y64.view())?.view())?;
    }
    Ok(LayerCorrelation {
        real: real.finalize()?,
        rotated: rotated.finalize()?,
    })
}

/// Excess table for one reference layer given its correlations against the
/// target layers in scope (one block for [`MatchScope::Layer`], all target
/// layers in order for [`MatchScope::All`]).
pub fn excess_from_blocks(blocks: &[LayerCorrelation], ref_layer: u16) -> Result<ExcessCorrelationTable> {
    let real: Vec<_> = blocks.iter().map(|b| b.real.clone()).collect();
    let rot: Vec<_> = blocks.iter().map(|b| b.rotated.clone()).collect();
    excess_table(
        &CorrelationMatrix::hconcat(&real)?,
        &CorrelationMatrix::hconcat(&rot)?,
        ref_layer,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    fn corr(x: &Array2<f32>, y: &Array2<f32>) -> CorrelationMatrix {
        let mut acc = MomentAccumulator::new(x.nrows(), y.nrows());
        acc.accumulate(x.view(), y.view()).unwrap();
        acc.finalize().unwrap()
    }

    #[test]
    fn identical_and_reversed_rows() {
        let x = array![[1.0f32, 2.0, 3.0]];
        let y = array![[3.0f32, 2.0, 1.0]];
        assert_eq!(corr(&x, &x).get(0, 0), Some(1.0));
        assert!((corr(&x, &y).get(0, 0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_row_is_degenerate() {
        let x = array![[5.0f32, 5.0, 5.0], [1.0, 2.0, 4.0]];
        let y = array![[1.0f32, 0.0, 2.0]];
        let c = corr(&x, &y);
        assert!(c.degenerate_rows.contains(&0));
        assert_eq!(c.get(0, 0), None);
        assert_eq!(c.row_max(0), None);
        assert!(c.get(1, 0).is_some());
    }

    #[test]
    fn errors() {
        let mut acc = MomentAccumulator::new(1, 1);
        assert!(acc
            .accumulate(array![[1.0f32, 2.0]].view(), array![[1.0f32]].view())
            .is_err());
        acc.accumulate(array![[1.0f32]].view(), array![[1.0f32]].view()).unwrap();
        assert!(acc.finalize().is_err());
        let g = RotationBaseline::from_matrix(0, Array2::eye(3)).unwrap();
        assert!(g.rotate_chunk(Array2::<f32>::zeros((2, 4)).view()).is_err());
        let a = corr(&array![[1.0f32, 2.0, 0.0]], &array![[1.0f32, 0.0, 3.0]]);
        let b = corr(&array![[1.0f32, 2.0, 0.0], [0.0, 1.0, 1.0]], &array![[1.0f32, 0.0, 3.0]]);
        assert!(excess_table(&a, &b, 0).is_err());
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((8, 64), |_| rng.random_range(-2.0f32..2.0));
        let y = Array2::from_shape_fn((8, 64), |_| rng.random_range(-2.0f32..2.0) + 3.0);
        let c = corr(&x, &y);
        for k in 0..8 {
            for l in 0..8 {
                let xs: Vec<f64> = x.row(k).iter().map(|&v| v as f64).collect();
                let ys: Vec<f64> = y.row(l).iter().map(|&v| v as f64).collect();
                assert!((c.get(k, l).unwrap() - pearson_two_pass(&xs, &ys)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn derived_sums_agree_with_direct_sums() {
        let x = array![[1.0f32, 2.0, 4.0, -1.0]];
        let y = array![[0.5f32, 0.0, 1.0, 3.0], [2.0, 2.0, 1.0, 0.0]];
        let mut acc = MomentAccumulator::new(1, 2);
        acc.accumulate(x.slice(ndarray::s![.., ..1]), y.slice(ndarray::s![.., ..1])).unwrap();
        acc.accumulate(x.slice(ndarray::s![.., 1..]), y.slice(ndarray::s![.., 1..])).unwrap();
        assert_eq!(acc.n(), 4);
        assert!((acc.sum_x()[0] - 6.0).abs() < 1e-12);
        assert!((acc.sum_xx()[0] - 22.0).abs() < 1e-12);
        assert!((acc.sum_yy()[1] - 9.0).abs() < 1e-12);
        // 1·0.5 + 2·0 + 4·1 − 1·3
        assert!((acc.sum_xy()[[0, 0]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identity_rotation_is_noop_and_draws_are_deterministic() {
        let y = array![[1.0f32, -2.0], [0.5, 4.0]];
        let id = RotationBaseline::from_matrix(0, Array2::eye(2)).unwrap();
        assert_eq!(id.rotate_chunk(y.view()).unwrap(), y.mapv(f64::from));
        let a = RotationBaseline::derive(9, "b", 100, 3, 16);
        let b = RotationBaseline::derive(9, "b", 100, 3, 16);
        assert_eq!(a, b);
        assert_ne!(a.matrix, RotationBaseline::derive(9, "c", 100, 3, 16).matrix);
        assert_ne!(a.matrix, RotationBaseline::derive(9, "b", 200, 3, 16).matrix);
        assert_ne!(a.matrix, RotationBaseline::derive(9, "b", 100, 2, 16).matrix);
        let y = Array2::from_shape_fn((16, 5), |(i, j)| (i * 5 + j) as f32);
        let ra = a.rotate_chunk(y.view()).unwrap();
        let rb = b.rotate_chunk(y.view()).unwrap();
        assert!(ra.iter().zip(rb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn excess_arithmetic() {
        let real = CorrelationMatrix {
            rho: array![[0.9, 0.1], [0.3, -0.2]],
            degenerate_rows: BTreeSet::new(),
            degenerate_cols: BTreeSet::new(),
        };
        let rot = CorrelationMatrix {
            rho: array![[0.2, -0.5], [0.4, 0.1]],
            degenerate_rows: BTreeSet::new(),
            degenerate_cols: BTreeSet::new(),
        };
        let t = excess_table(&real, &rot, 2).unwrap();
        assert!((t.rows[0].excess.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(t.rows[0].partner, Some(0));
        assert!((t.rows[1].excess.unwrap() + 0.1).abs() < 1e-15);
        assert_eq!(t.rows[1].layer, 2);
    }

    #[test]
    fn all_degenerate_row_is_undefined() {
        let x = array![[1.0f32, 1.0, 1.0]];
        let y = array![[1.0f32, 2.0, 0.0]];
        let c = corr(&x, &y);
        let t = excess_table(&c, &c, 0).unwrap();
        assert_eq!(t.rows[0].excess, None);
        assert_eq!(t.rows[0].partner, None);
    }

    #[test]
    fn cache_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let t = ExcessCorrelationTable {
            rows: vec![
                ExcessRow {
                    neuron: 0,
                    layer: 1,
                    max_rho: Some(0.75),
                    max_rho_rotated: Some(0.1),
                    excess: Some(0.65),
                    partner: Some(9),
                },
                ExcessRow {
                    neuron: 1,
                    layer: 1,
                    max_rho: None,
                    max_rho_rotated: None,
                    excess: None,
                    partner: None,
                },
            ],
        };
        let p = d.path().join("e.exc");
        t.write_cache(&p).unwrap();
        assert_eq!(ExcessCorrelationTable::read_cache(&p).unwrap(), t);
        t.write_csv(d.path().join("e.csv")).unwrap();
        let text = std::fs::read_to_string(d.path().join("e.csv")).unwrap();
        assert_eq!(
            text,
            "neuron,layer,max_rho,max_rho_rotated,excess,partner\n0,1,0.75,0.1,0.65,9\n1,1,,,,\n"
        );
    }

    #[test]
    fn hconcat_offsets_degenerate_columns() {
        let x = array![[1.0f32, 2.0, 3.0, 5.0]];
        let a = corr(&x, &array![[1.0f32, 1.0, 1.0, 1.0], [0.0, 1.0, 0.0, 1.0]]);
        let b = corr(&x, &array![[2.0f32, 2.0, 2.0, 2.0], [4.0, 3.0, 2.0, 1.0]]);
        let c = CorrelationMatrix::hconcat(&[a, b]).unwrap();
        assert_eq!(c.degenerate_cols, BTreeSet::from([0, 2]));
        assert_eq!(c.row_max(0).unwrap().1, 1);
    }
}
