//! Vector-label datasets.
//!
//! A dataset is a JSON-lines manifest plus a vector bank holding unit-norm
//! rows. The bank lives next to the manifest with the `.sivb` extension.

pub mod bank;
pub mod ingest;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::tokenizer::EOT_MARKER;

pub use bank::VectorBank;
pub use ingest::{extract_contrastive, extract_contrastive_pooled, ingest_sae, middle_half_layers, Contrastive, Topic};

/// Allowed deviation of a stored vector's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    SaeDecoder,
    ContrastiveTopic,
    Synthetic,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub row: usize,
    pub layer: usize,
    pub labels: Vec<String>,
    pub origin: Origin,
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

/// Records plus their vectors. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    bank: VectorBank,
}

/// Everything about a record except its vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordMeta {
    pub id: String,
    pub layer: usize,
    pub labels: Vec<String>,
    pub origin: Origin,
    pub extras: BTreeMap<String, serde_json::Value>,
}

/// Collects raw vectors, normalizes them and reports every degenerate one.
#[derive(Debug)]
pub struct DatasetBuilder {
    d: usize,
    records: Vec<Record>,
    data: Vec<f32>,
    degenerate: Vec<String>,
    ids: BTreeSet<String>,
}

impl DatasetBuilder {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            records: Vec::new(),
            data: Vec::new(),
            degenerate: Vec::new(),
            ids: BTreeSet::new(),
        }
    }

    /// Add a record. `reference_norm` sets the scale below which the vector
    /// counts as degenerate (`norm <= 1e-9 * reference_norm`, or exactly 0).
    pub fn push(&mut self, mut meta: RecordMeta, raw: &[f64], reference_norm: f64) -> Result<()> {
        if raw.len() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: raw.len(),
            });
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { id: meta.id });
        }
        check_labels(&meta.id, &meta.labels)?;
        if !self.ids.insert(meta.id.clone()) {
            return Err(Error::invalid(format!("duplicate id {}", meta.id)));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || norm <= 1e-9 * reference_norm {
            self.degenerate.push(meta.id);
            return Ok(());
        }
        meta.extras.insert("raw_norm".into(), serde_json::json!(norm));
        self.data.extend(raw.iter().map(|x| (x / norm) as f32));
        self.records.push(Record {
            id: meta.id,
            row: self.records.len(),
            layer: meta.layer,
            labels: meta.labels,
            origin: meta.origin,
            extras: meta.extras,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<Dataset> {
        if !self.degenerate.is_empty() {
            return Err(Error::DegenerateVectors {
                ids: self.degenerate,
            });
        }
        let n = self.records.len();
        Ok(Dataset {
            records: self.records,
            bank: VectorBank::new(n, self.d, self.data)?,
        })
    }
}

fn check_labels(id: &str, labels: &[String]) -> Result<()> {
    if labels.is_empty() || labels.iter().any(|l| l.trim().is_empty()) {
        return Err(Error::invalid(format!("record {id} has an empty label list or blank label")));
    }
    Ok(())
}

fn row_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl Dataset {
    /// Validate records against a bank.
    pub fn from_parts(records: Vec<Record>, bank: VectorBank) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.row >= bank.n {
                return Err(Error::Shape(format!(
                    "record {} points at row {} of a {}-row bank",
                    r.id, r.row, bank.n
                )));
            }
            if !seen.insert(&r.id) {
                return Err(Error::invalid(format!("duplicate id {}", r.id)));
            }
            check_labels(&r.id, &r.labels)?;
            let v = bank.row(r.row);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { id: r.id.clone() });
            }
            let norm = row_norm(v);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "record {} has norm {norm}, expected unit norm",
                    r.id
                )));
            }
        }
        Ok(Self { records, bank })
    }

    pub fn d(&self) -> usize {
        self.bank.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn bank(&self) -> &VectorBank {
        &self.bank
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        self.bank.row(self.records[i].row)
    }

    pub fn vector_f64(&self, i: usize) -> Vec<f64> {
        self.vector(i).iter().map(|&x| x as f64).collect()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Every `(record index, label index)` pair: one training example each.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .enumerate()
            .flat_map(|(i, r)| (0..r.labels.len()).map(move |j| (i, j)))
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Keep the records at `indices` (in that order), compacting the bank.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let d = self.d();
        let mut records = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * d);
        for (row, &i) in indices.iter().enumerate() {
            let mut r = self.records[i].clone();
            data.extend_from_slice(self.bank.row(r.row));
            r.row = row;
            records.push(r);
        }
        Ok(Self {
            records,
            bank: VectorBank::new(indices.len(), d, data)?,
        })
    }

    fn map_labels(&self, f: impl Fn(&Record) -> Result<Vec<String>>) -> Result<Self> {
        let mut out = self.clone();
        for r in &mut out.records {
            r.labels = f(r)?;
            check_labels(&r.id, &r.labels)?;
        }
        Ok(out)
    }

    /// Keep at most the first `k` labels per record (label-count control).
    pub fn with_max_labels(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("label count must be at least 1"));
        }
        self.map_labels(|r| Ok(r.labels.iter().take(k).cloned().collect()))
    }

    /// Mean of the stored vectors.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d()];
        for i in 0..self.len() {
            for (a, &x) in m.iter_mut().zip(self.vector(i)) {
                *a += x as f64;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// Bank path used for a manifest path.
    pub fn bank_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("sivb")
    }

    pub fn save(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut f = fs::File::create(manifest).map_err(|e| Error::io(manifest, e))?;
        f.write_all(&buf).map_err(|e| Error::io(manifest, e))?;
        self.bank.write(Self::bank_path(manifest))
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: manifest.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        let bank = VectorBank::read(Self::bank_path(manifest))?;
        Self::from_parts(records, bank).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Manifest {
                path: manifest.to_path_buf(),
                line: 0,
                reason: other.to_string(),
            },
        })
    }

    /// Hex digest of records and vectors.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("records serialize"));
            for x in self.bank.row(r.row) {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// How a raw label is turned into the training target text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    /// `label` + `"` + end-of-turn.
    #[default]
    QuoteEot,
    /// The label as is.
    Raw,
}

impl LabelFormat {
    pub fn apply(self, raw: &str) -> Result<String> {
        match self {
            LabelFormat::QuoteEot => format_label_for_training(raw),
            LabelFormat::Raw if raw.is_empty() => Err(Error::EmptyLabel),
            LabelFormat::Raw => Ok(raw.to_string()),
        }
    }
}

/// Append a closing quote and the end-of-turn marker. Always appended, even
/// if the label already ends in a quote.
pub fn format_label_for_training(raw: &str) -> Result<String> {
    if raw.is_empty() {
        return Err(Error::EmptyLabel);
    }
    Ok(format!("{raw}\"{EOT_MARKER}"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelTransform {
    Uppercase,
    /// Extra labels per record id, appended after the existing ones.
    ParaphraseImport(BTreeMap<String, Vec<String>>),
}

pub fn transform_labels(ds: &Dataset, transform: &LabelTransform) -> Result<Dataset> {
    match transform {
        LabelTransform::Uppercase => ds.map_labels(|r| Ok(r.labels.iter().map(|l| l.to_uppercase()).collect())),
        LabelTransform::ParaphraseImport(map) => {
            let known: BTreeSet<&str> = ds.ids().collect();
            let unknown: Vec<String> = map
                .keys()
                .filter(|k| !known.contains(k.as_str()))
                .cloned()
                .collect();
            if !unknown.is_empty() {
                return Err(Error::UnknownIds { ids: unknown });
            }
            ds.map_labels(|r| {
                let mut labels = r.labels.clone();
                if let Some(extra) = map.get(&r.id) {
                    labels.extend(extra.iter().cloned());
                }
                Ok(labels)
            })
        }
    }
}

/// Deterministic per-id sort key.
fn id_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

fn keyed_order(ds: &Dataset, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.sort_by_cached_key(|&i| id_key(seed, &ds.records[i].id));
    idx
}

/// Vector-level subsample. Smaller fractions under the same seed are always
/// subsets of larger ones; the original record order is kept.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} not in (0, 1]")));
    }
    let keep = (fraction * ds.len() as f64).round() as usize;
    if keep == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} records selects nothing",
            ds.len()
        )));
    }
    let mut chosen: Vec<usize> = keyed_order(ds, seed)[..keep].to_vec();
    chosen.sort_unstable();
    ds.select(&chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Partition by vector id. Membership depends only on ids and the seed.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fr:?} must be non-negative and sum to 1")));
    }
    let n = ds.len();
    let order = keyed_order(ds, spec.seed);
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train);
    let part = |range: &[usize]| {
        let mut v = range.to_vec();
        v.sort_unstable();
        ds.select(&v)
    };
    Ok(Splits {
        train: part(&order[..n_train])?,
        val: part(&order[n_train..n_train + n_val])?,
        test: part(&order[n_train + n_val..])?,
    })
}

/// Concatenate datasets (e.g. several layers), keeping each record's layer.
pub fn pool(parts: &[Dataset]) -> Result<Dataset> {
    let d = parts.first().map(Dataset::d).ok_or_else(|| Error::invalid("nothing to pool"))?;
    let mut records = Vec::new();
    let mut data = Vec::new();
    for p in parts {
        if p.d() != d {
            return Err(Error::Dimension {
                expected: d,
                got: p.d(),
            });
        }
        for (i, r) in p.records.iter().enumerate() {
            let mut r = r.clone();
            r.row = records.len();
            data.extend_from_slice(p.vector(i));
            records.push(r);
        }
    }
    let n = records.len();
    Dataset::from_parts(records, VectorBank::new(n, d, data)?)
}

/// Cumulative share of variance explained by principal components, sorted
/// by decreasing eigenvalue. Non-decreasing and ending at exactly 1.
pub fn pca_cumulative_variance(ds: &Dataset) -> Result<Vec<f64>> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two vectors"));
    }
    let d = ds.d();
    let mean = ds.mean_vector();
    let x = DMatrix::<f64>::from_fn(n, d, |i, j| ds.vector(i)[j] as f64 - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    if total <= 1e-12 {
        return Err(Error::invalid("all vectors are identical (rank-0 data)"));
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = eig
        .iter()
        .map(|l| {
            acc += l;
            (acc / total).min(1.0)
        })
        .collect();
    *out.last_mut().expect("d >= 1") = 1.0;
    Ok(out)
}
