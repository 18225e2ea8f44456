//! Datasets of fixed-length multichannel series.

mod csv_import;
mod synthetic;
mod tsd;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

pub use csv_import::import_csv;
pub use synthetic::{make_synthetic, SYNTHETIC_BASE_CYCLES};
pub use tsd::{load_dataset, read_tsd, read_tsd_header, save_dataset, write_tsd, TsdHeader, TSD_MAGIC, TSD_VERSION};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Label value marking an unlabeled sample.
pub const UNLABELED: i64 = -1;

/// `N` samples of shape `(C, T)` with per-sample labels (`-1` = unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor<f32>,
    labels: Vec<i64>,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(samples: Tensor<f32>, labels: Vec<i64>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if samples.rank() != 3 {
            return Err(Error::shape(format!("samples must be (N, C, T), got {:?}", samples.shape())));
        }
        if samples.dim(1) == 0 || samples.dim(2) == 0 {
            return Err(Error::shape("channels and length must be positive"));
        }
        if num_classes == 0 {
            return Err(Error::data("num_classes must be positive"));
        }
        if labels.len() != samples.dim(0) {
            return Err(Error::data(format!(
                "{} labels for {} samples",
                labels.len(),
                samples.dim(0)
            )));
        }
        if !samples.is_finite() {
            return Err(Error::data("non-finite sample value"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != UNLABELED && !(0..num_classes as i64).contains(&y)) {
            return Err(Error::data(format!(
                "label out of range: {bad} (num_classes = {num_classes})"
            )));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.dim(1)
    }

    pub fn length(&self) -> usize {
        self.samples.dim(2)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn samples(&self) -> &Tensor<f32> {
        &self.samples
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.samples.row(i)
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(|&y| y >= 0)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (c, t) = (self.channels(), self.length());
        let mut data = Vec::with_capacity(indices.len() * c * t);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            samples: Tensor::new(vec![indices.len(), c, t], data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    pub fn with_labels(&self, labels: Vec<i64>) -> Result<Self> {
        Self::new(self.samples.clone(), labels, self.num_classes, self.name.clone())
    }

    /// Concatenate two datasets with matching shapes.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if (self.channels(), self.length(), self.num_classes) != (other.channels(), other.length(), other.num_classes) {
            return Err(Error::shape("cannot concatenate datasets of different shapes"));
        }
        let mut data = self.samples.data().to_vec();
        data.extend_from_slice(other.samples.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(
            Tensor::new(vec![self.len() + other.len(), self.channels(), self.length()], data)?,
            labels,
            self.num_classes,
            self.name.clone(),
        )
    }

    /// Number of samples per class, ignoring unlabeled rows.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            if y >= 0 {
                counts[y as usize] += 1;
            }
        }
        counts
    }
}

/// Read access used by training loops. Phases that must stay label-blind
/// only ever call the sample accessors.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn channels(&self) -> usize;
    fn length(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn sample(&self, i: usize) -> &[f32];
    fn label(&self, i: usize) -> i64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }
    fn channels(&self) -> usize {
        Dataset::channels(self)
    }
    fn length(&self) -> usize {
        Dataset::length(self)
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn sample(&self, i: usize) -> &[f32] {
        Dataset::sample(self, i)
    }
    fn label(&self, i: usize) -> i64 {
        self.labels[i]
    }
}

/// Stack the samples at `indices` into a `(B, C, T)` tensor.
pub fn gather_samples<S: SampleSource + ?Sized>(src: &S, indices: &[usize]) -> Tensor<f32> {
    let (c, t) = (src.channels(), src.length());
    let mut data = Vec::with_capacity(indices.len() * c * t);
    for &i in indices {
        data.extend_from_slice(src.sample(i));
    }
    Tensor::new(vec![indices.len(), c, t], data).expect("gather shape")
}

/// Per-channel min/max fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl MinMaxStats {
    pub fn fit(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::data("cannot fit normalization on an empty dataset"));
        }
        let (c, t) = (d.channels(), d.length());
        let mut min = vec![f32::INFINITY; c];
        let mut max = vec![f32::NEG_INFINITY; c];
        for n in 0..d.len() {
            let s = d.sample(n);
            for ch in 0..c {
                for &v in &s[ch * t..(ch + 1) * t] {
                    min[ch] = min[ch].min(v);
                    max[ch] = max[ch].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }

    /// `(x - min) / (max - min)` per channel; constant channels map to 0.
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if self.min.len() != d.channels() {
            return Err(Error::shape(format!(
                "normalization fitted on {} channels, data has {}",
                self.min.len(),
                d.channels()
            )));
        }
        let (c, t) = (d.channels(), d.length());
        let mut data = d.samples().data().to_vec();
        for row in data.chunks_exact_mut(c * t) {
            for ch in 0..c {
                let (lo, hi) = (self.min[ch] as f64, self.max[ch] as f64);
                let span = hi - lo;
                for v in &mut row[ch * t..(ch + 1) * t] {
                    *v = if span > 0.0 { ((*v as f64 - lo) / span) as f32 } else { 0.0 };
                }
            }
        }
        Dataset::new(
            Tensor::new(d.samples().shape().to_vec(), data)?,
            d.labels().to_vec(),
            d.num_classes(),
            d.name(),
        )
    }
}

/// Min-max scale every channel of `d` to `[0, 1]` using its own statistics.
pub fn normalize_minmax(d: &Dataset) -> Result<Dataset> {
    MinMaxStats::fit(d)?.apply(d)
}

/// A labeled/unlabeled partition of a fully labeled dataset.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub fraction: f64,
    pub seed: u64,
    /// Source rows of `labeled`, ascending.
    pub labeled_indices: Vec<usize>,
    /// Source rows of `unlabeled`, ascending.
    pub unlabeled_indices: Vec<usize>,
}

/// Keep `round(fraction * N)` labels, chosen by seeded shuffle with at least
/// one sample of every class; the remaining rows are relabeled `-1`.
pub fn split_labeled_subset(d: &Dataset, fraction: f64, seed: u64) -> Result<LabeledSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("labels fraction must be in (0, 1], got {fraction}")));
    }
    if !d.is_fully_labeled() {
        return Err(Error::data("split source must be fully labeled"));
    }
    let n = d.len();
    let k = d.num_classes();
    if fraction * (n as f64) < k as f64 {
        return Err(Error::data(format!(
            "fraction too small for stratified split: {fraction} of {n} samples < {k} classes"
        )));
    }
    let counts = d.class_counts();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("class {missing} has no samples to label")));
    }
    let target = ((fraction * n as f64).round() as usize).clamp(k, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).named("split").rng());

    let mut chosen = BTreeSet::new();
    let mut seen = vec![false; k];
    for &i in &order {
        let y = d.labels()[i] as usize;
        if !seen[y] {
            seen[y] = true;
            chosen.insert(i);
        }
    }
    for &i in &order {
        if chosen.len() >= target {
            break;
        }
        chosen.insert(i);
    }

    let labeled_indices: Vec<usize> = chosen.iter().copied().collect();
    let unlabeled_indices: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
    let labeled = d.subset(&labeled_indices);
    let unlabeled = d.subset(&unlabeled_indices);
    let unlabeled = unlabeled.with_labels(vec![UNLABELED; unlabeled.len()])?;
    Ok(LabeledSplit {
        labeled,
        unlabeled,
        fraction,
        seed,
        labeled_indices,
        unlabeled_indices,
    })
}

/// A mini-batch of rows drawn from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(B, C, T)`
    pub x: Tensor<f32>,
    pub y: Vec<i64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Partition `0..n` into consecutive chunks of `batch_size`, after a seeded
/// shuffle when `shuffle_seed` is given.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut SeedStream::new(seed).named("batches").rng());
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Iterator over one epoch of mini-batches.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.chunks.next()?;
        Some(Batch {
            x: gather_samples(self.data, &idx),
            y: idx.iter().map(|&i| self.data.labels()[i]).collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.chunks.size_hint()
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

pub fn batch_iterator(d: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> BatchIter<'_> {
    BatchIter {
        data: d,
        chunks: batch_indices(d.len(), batch_size, shuffle_seed).into_iter(),
    }
}
