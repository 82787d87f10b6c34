//! Embedding datasets: ingestion, standardization, serialization, resampling.
//!
//! A dataset is an empirical joint distribution over (feature vector, label)
//! pairs, with features already extracted by some frozen encoder. Two file
//! formats are supported: a little-endian binary container (bit-exact round
//! trips) and CSV (interoperable with any feature-extraction pipeline).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EMBD";
const FORMAT_VERSION: u32 = 1;

/// On-disk representation of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    /// Magic "EMBD", version, n, d, K header followed by raw labels/features.
    Binary,
    /// Header line `label,f0,...,f{d-1}`, one sample per row.
    Csv,
}

/// An empirical task distribution: n feature vectors of dimension d with
/// integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    name: String,
    features: Array2<f64>,
    labels: Vec<usize>,
    k: usize,
}

impl EmbeddingDataset {
    /// Validates invariants: n >= 1, d >= 1, finite features, labels in [0, K).
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        k: usize,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidData(format!(
                "dataset must have n >= 1 and d >= 1, got n={n}, d={d}"
            )));
        }
        if labels.len() != n {
            return Err(Error::InvalidData(format!(
                "label count {} does not match sample count {n}",
                labels.len()
            )));
        }
        if k == 0 {
            return Err(Error::InvalidData("class count K must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidData(format!(
                "label {bad} out of range for K={k}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            k,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of samples.
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Indices of samples belonging to each class, in sample order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.k];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// New dataset holding the given sample indices (duplicates allowed).
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidData("selection must be non-empty".into()));
        }
        let d = self.d();
        let mut feats = Array2::zeros((indices.len(), d));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            feats.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(name, feats, labels, self.k)
    }

    /// Restrict to the given classes, relabelling them 0..classes.len() in the
    /// order provided. Used to subsample a reference task down to K_T classes.
    pub fn restrict_classes(&self, classes: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.k];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.k {
                return Err(Error::InvalidData(format!(
                    "class {old} out of range for K={}",
                    self.k
                )));
            }
            if remap[old] != usize::MAX {
                return Err(Error::InvalidData(format!("class {old} listed twice")));
            }
            remap[old] = new;
        }
        let keep: Vec<usize> = (0..self.n())
            .filter(|&i| remap[self.labels[i]] != usize::MAX)
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidData(
                "no samples left after class restriction".into(),
            ));
        }
        let mut out = self.select(&keep, name)?;
        for y in &mut out.labels {
            *y = remap[*y];
        }
        out.k = classes.len();
        Ok(out)
    }
}

/// A probability vector over class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    weights: Vec<f64>,
}

impl ClassPrior {
    /// Validates non-negativity and unit total mass (within 1e-9).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidData("prior must be non-empty".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidData(
                "prior entries must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData(format!(
                "prior must sum to 1 within 1e-9, got {total}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

/// Per-dimension affine normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Loads a dataset from `path` in the given format.
pub fn load_dataset(path: impl AsRef<Path>, format: FileFormat) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let file = File::open(path)
        .map_err(|e| Error::InvalidData(format!("cannot open {}: {e}", path.display())))?;
    match format {
        FileFormat::Binary => read_binary(BufReader::new(file), name),
        FileFormat::Csv => read_csv(BufReader::new(file), name),
    }
}

/// Saves a dataset to `path`. Binary round trips are bit-exact for features
/// representable in f32; CSV uses shortest round-trip decimal text.
pub fn save_dataset(
    ds: &EmbeddingDataset,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    match format {
        FileFormat::Binary => write_binary(ds, &mut w)?,
        FileFormat::Csv => write_csv(ds, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn read_binary<R: Read>(mut r: R, name: String) -> Result<EmbeddingDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let k = r.read_u32::<LittleEndian>()? as usize;
    if n == 0 || d == 0 || k == 0 {
        return Err(Error::Format(format!(
            "degenerate header: n={n}, d={d}, K={k}"
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.read_u32::<LittleEndian>()? as usize;
        if y >= k {
            return Err(Error::Format(format!("label {y} out of range for K={k}")));
        }
        labels.push(y);
    }
    let mut values = vec![0f32; n * d];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|_| Error::Format("truncated feature block".into()))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()));
    }
    let features = Array2::from_shape_vec((n, d), values.iter().map(|&v| v as f64).collect())
        .expect("shape checked above");
    EmbeddingDataset::new(name, features, labels, k)
}

fn write_binary<W: Write>(ds: &EmbeddingDataset, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(ds.n() as u64)?;
    w.write_u32::<LittleEndian>(ds.d() as u32)?;
    w.write_u32::<LittleEndian>(ds.k() as u32)?;
    for &y in ds.labels() {
        w.write_u32::<LittleEndian>(y as u32)?;
    }
    for &v in ds.features.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_csv<R: Read>(r: R, name: String) -> Result<EmbeddingDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    {
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("csv header: {e}")))?;
        if headers.get(0) != Some("label") {
            return Err(Error::Format(
                "csv header must start with 'label'".into(),
            ));
        }
    }
    let mut labels = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut d = None;
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv row {line}: {e}")))?;
        if record.len() < 2 {
            return Err(Error::Format(format!("csv row {line}: no feature columns")));
        }
        let row_d = record.len() - 1;
        match d {
            None => d = Some(row_d),
            Some(d0) if d0 != row_d => {
                return Err(Error::Format(format!(
                    "csv row {line}: expected {d0} features, found {row_d}"
                )))
            }
            _ => {}
        }
        let y: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("csv row {line}: bad label {:?}", &record[0])))?;
        labels.push(y);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("csv row {line}: bad value {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("csv row {line}: non-finite value")));
            }
            values.push(v);
        }
    }
    let n = labels.len();
    let d = d.ok_or_else(|| Error::Format("csv has no data rows".into()))?;
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let features =
        Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))?;
    EmbeddingDataset::new(name, features, labels, k)
}

fn write_csv<W: Write>(ds: &EmbeddingDataset, w: &mut W) -> Result<()> {
    write!(w, "label")?;
    for j in 0..ds.d() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for i in 0..ds.n() {
        write!(w, "{}", ds.labels[i])?;
        for &v in ds.features.row(i) {
            // f32 shortest round-trip text keeps csv exact for file-backed data
            write!(w, ",{}", v as f32)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Centers each dimension and scales it to unit population standard
/// deviation. Constant dimensions get std clamped to 1 so the affine map
/// stays defined (they become all-zero).
pub fn standardize(ds: &EmbeddingDataset) -> Result<(EmbeddingDataset, StandardizationStats)> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::InvalidData(
            "standardization requires at least 2 samples".into(),
        ));
    }
    let d = ds.d();
    let mut mean = vec![0.0; d];
    for row in ds.features.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in ds.features.rows() {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
            let c = v - m;
            *s += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let stats = StandardizationStats { mean, std };
    Ok((apply_standardization(ds, &stats)?, stats))
}

/// Applies previously computed stats, e.g. to held-out data.
pub fn apply_standardization(
    ds: &EmbeddingDataset,
    stats: &StandardizationStats,
) -> Result<EmbeddingDataset> {
    if stats.mean.len() != ds.d() || stats.std.len() != ds.d() {
        return Err(Error::InvalidData(format!(
            "stats dimension {} does not match dataset dimension {}",
            stats.mean.len(),
            ds.d()
        )));
    }
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidData("std entries must be > 0".into()));
    }
    let mut features = ds.features.clone();
    for mut row in features.rows_mut() {
        for ((v, &m), &s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    EmbeddingDataset::new(ds.name.clone(), features, ds.labels.clone(), ds.k)
}

/// Relative class frequencies of the dataset.
pub fn empirical_prior(ds: &EmbeddingDataset) -> ClassPrior {
    let mut counts = vec![0usize; ds.k()];
    for &y in ds.labels() {
        counts[y] += 1;
    }
    let n = ds.n() as f64;
    ClassPrior {
        weights: counts.iter().map(|&c| c as f64 / n).collect(),
    }
}

/// Sampling discipline for [`subsample_by_prior`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    With,
    Without,
}

/// Draws `m` samples whose class frequencies follow `prior`.
///
/// With replacement, each draw picks a class from the prior and then a
/// uniform member of that class. Without replacement, per-class counts are
/// apportioned by largest remainder and filled by a seeded shuffle, so using
/// the empirical prior with m = n yields a permutation of the dataset.
pub fn subsample_by_prior(
    ds: &EmbeddingDataset,
    prior: &ClassPrior,
    m: usize,
    seed: u64,
    replacement: Replacement,
) -> Result<EmbeddingDataset> {
    if prior.k() != ds.k() {
        return Err(Error::InvalidData(format!(
            "prior has {} classes, dataset has {}",
            prior.k(),
            ds.k()
        )));
    }
    if m == 0 {
        return Err(Error::InvalidData("cannot sample 0 points".into()));
    }
    let by_class = ds.class_indices();
    for (c, members) in by_class.iter().enumerate() {
        if prior.weight(c) > 0.0 && members.is_empty() {
            return Err(Error::Infeasible(format!(
                "prior assigns mass {} to empty class {c}",
                prior.weight(c)
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = match replacement {
        Replacement::With => {
            let dist = WeightedIndex::new(prior.weights())
                .map_err(|e| Error::InvalidData(format!("bad prior weights: {e}")))?;
            (0..m)
                .map(|_| {
                    let c = dist.sample(&mut rng);
                    by_class[c][rng.gen_range(0..by_class[c].len())]
                })
                .collect::<Vec<_>>()
        }
        Replacement::Without => {
            let counts = apportion(prior.weights(), m);
            let mut indices = Vec::with_capacity(m);
            for (c, &want) in counts.iter().enumerate() {
                if want > by_class[c].len() {
                    return Err(Error::Infeasible(format!(
                        "class {c} has {} samples but {want} requested without replacement",
                        by_class[c].len()
                    )));
                }
                let mut members = by_class[c].clone();
                members.shuffle(&mut rng);
                indices.extend_from_slice(&members[..want]);
            }
            indices
        }
    };
    ds.select(&indices, format!("{}[resampled]", ds.name))
}

/// Largest-remainder apportionment of `m` slots to fractional shares.
fn apportion(weights: &[f64], m: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|&w| (w * m as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(c, &w)| (w * m as f64 - counts[c] as f64, c))
        .collect();
    // stable tie-break: larger remainder first, then lower class index
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..m.saturating_sub(assigned) {
        counts[remainders[k % remainders.len()].1] += 1;
    }
    counts
}
