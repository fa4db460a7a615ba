//! Datasets: loading, splitting, batching, augmentation.

mod augment;
mod formats;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamId};
use crate::tensor::{Element, Tensor};

pub use augment::{augment, augment_image_with, AugmentConfig, CropMode};
pub use formats::{
    parse_cifar_records, parse_idx_images, parse_idx_labels, read_maybe_gz, CifarRecords, CifarVariant,
    IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Images `[N, C, H, W]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset images", images.shape(), &[0, 0, 0, 0]));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset labels", &[labels.len()], &images.shape()[..1]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            num_classes,
            split,
        })
    }

    /// Builds a dataset from u8 pixels, scaling by 1/255.
    pub fn from_u8(
        name: impl Into<String>,
        shape: [usize; 4],
        pixels: &[u8],
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Self::new(name, Tensor::new(&shape, data)?, labels, num_classes, split)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The given rows, in the given order.
    pub fn subset(&self, rows: &[usize], split: Split) -> Result<Self> {
        let images = if rows.is_empty() {
            let mut shape = self.images.shape().to_vec();
            shape[0] = 0;
            Tensor::zeros(&shape)
        } else {
            self.images.select_rows(rows)?
        };
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.name.clone(), images, labels, self.num_classes, split)
    }

    /// At most `n` samples chosen uniformly at random, kept in original order.
    pub fn limit(&self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut rows = RngStream::new(seed, StreamId::Subsample).permutation(self.len());
        rows.truncate(n);
        rows.sort_unstable();
        self.subset(&rows, self.split)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Images as `T`, e.g. for a whole-set evaluation pass.
    pub fn images_as<T: Element>(&self) -> Tensor<T> {
        self.images.cast()
    }

    pub(crate) fn images_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.images
    }
}

/// Decodes an IDX image/label file pair. `num_classes` defaults to the
/// largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::format(
            "IDX pair",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::from_u8(name, [images.count, 1, images.rows, images.cols], &images.pixels, labels, c, split)
}

fn cifar_files(dir: &Path, names: &[&str], variant: CifarVariant, name: &str, split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in names {
        let rec = parse_cifar_records(&read_maybe_gz(&dir.join(f))?, variant)?;
        labels.extend(rec.labels.into_iter().map(usize::from));
        pixels.extend(rec.pixels);
    }
    Dataset::from_u8(name, [labels.len(), 3, 32, 32], &pixels, labels, variant.num_classes(), split)
}

/// Loads `(train, test)` from a directory of upstream CIFAR binary batches.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    match variant {
        CifarVariant::Cifar10 => {
            let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
            let train: Vec<&str> = train.iter().map(String::as_str).collect();
            Ok((
                cifar_files(dir, &train, variant, "cifar10", Split::Train)?,
                cifar_files(dir, &["test_batch.bin"], variant, "cifar10", Split::Test)?,
            ))
        }
        CifarVariant::Cifar100 => Ok((
            cifar_files(dir, &["train.bin"], variant, "cifar100", Split::Train)?,
            cifar_files(dir, &["test.bin"], variant, "cifar100", Split::Test)?,
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }

    /// `[C, H, W]`.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [1, 28, 28],
            _ => [3, 32, 32],
        }
    }

    /// Horizontal flips suit natural images, not digits or garments.
    pub fn default_flip(self) -> bool {
        matches!(self, DatasetKind::Cifar10 | DatasetKind::Cifar100)
    }

    /// Subdirectory of the data root holding the upstream files.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
        }
    }

    /// Loads `(train, test)` from `<root>/<subdir>`.
    pub fn load(self, root: &Path) -> Result<(Dataset, Dataset)> {
        let dir = root.join(self.subdir());
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => {
                let load = |prefix: &str, split| -> Result<Dataset> {
                    let mut ds = load_idx(
                        &dir.join(format!("{prefix}-images-idx3-ubyte")),
                        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
                        Some(10),
                        split,
                    )?;
                    ds.name = self.name().to_string();
                    Ok(ds)
                };
                Ok((load("train", Split::Train)?, load("t10k", Split::Test)?))
            }
            DatasetKind::Cifar10 => load_cifar(&dir, CifarVariant::Cifar10),
            DatasetKind::Cifar100 => load_cifar(&dir, CifarVariant::Cifar100),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mnist" => DatasetKind::Mnist,
            "fashion-mnist" | "fashion" => DatasetKind::FashionMnist,
            "cifar10" | "cifar-10" => DatasetKind::Cifar10,
            "cifar100" | "cifar-100" => DatasetKind::Cifar100,
            other => return Err(Error::arg(format!("unknown dataset `{other}`"))),
        })
    }
}

/// Stratified split: each class gives `max(1, ⌊fraction·N_c⌋)` randomly chosen
/// samples to the validation set. Both parts keep the original order.
pub fn split_validation(ds: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut val = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        match members.len() {
            0 => continue,
            1 => return Err(Error::arg(format!("class {c} has a single sample; cannot split"))),
            n => {
                let k = ((fraction * n as f64).floor() as usize).max(1);
                rng.shuffle(&mut members);
                val.extend_from_slice(&members[..k]);
            }
        }
    }
    val.sort_unstable();
    let mut in_val = vec![false; ds.len()];
    for &i in &val {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !in_val[i]).collect();
    Ok((ds.subset(&train, ds.split)?, ds.subset(&val, Split::Val)?))
}

/// Per-channel mean and standard deviation, computed on a training split and
/// applied to every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(ds: &Dataset) -> Result<Self> {
        let [c, h, w] = ds.image_shape().try_into().expect("rank checked");
        let n = ds.len();
        if n == 0 {
            return Err(Error::arg("channel statistics of an empty dataset"));
        }
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in ds.images.data().chunks_exact(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (n * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        let c = ds.image_shape()[0];
        if c != self.mean.len() {
            return Err(Error::shape("channel stats", &[self.mean.len()], &[c]));
        }
        let plane = ds.image_shape()[1] * ds.image_shape()[2];
        for img in ds.images_mut().data_mut().chunks_exact_mut(c * plane) {
            for ch in 0..c {
                let (m, s) = (self.mean[ch] as f32, self.std[ch] as f32);
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }
}

/// One mini-batch. `indices` are rows of the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Element> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches in a fixed order; the last batch may be short.
pub struct BatchIter<'a, T: Element> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _elem: std::marker::PhantomData<T>,
}

impl<T: Element> Iterator for BatchIter<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self.ds.images.select_rows(&indices).expect("indices in range").cast();
        let labels = indices.iter().map(|&i| self.ds.labels[i]).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl<T: Element> ExactSizeIterator for BatchIter<'_, T> {}

/// Shuffled batches for one epoch. The order is drawn from the shuffle stream
/// of `seed` at index `epoch`, so every epoch is reproducible on its own.
pub fn batch_iter<T: Element>(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_, T>> {
    let order = RngStream::derived(seed, StreamId::Shuffle, epoch).permutation(ds.len());
    ordered_batches(ds, batch_size, order)
}

/// Batches in dataset order, for evaluation.
pub fn sequential_batches<T: Element>(ds: &Dataset, batch_size: usize) -> Result<BatchIter<'_, T>> {
    ordered_batches(ds, batch_size, (0..ds.len()).collect())
}

fn ordered_batches<T: Element>(ds: &Dataset, batch_size: usize, order: Vec<usize>) -> Result<BatchIter<'_, T>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        pos: 0,
        _elem: std::marker::PhantomData,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i % 256) as u8).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::from_u8("toy", [n, 1, 2, 2], &pixels, labels, classes, Split::Train).unwrap()
    }

    #[test]
    fn batches_partition_the_epoch() {
        let ds = toy(10, 2);
        let sizes: Vec<usize> = batch_iter::<f32>(&ds, 3, 1, 0).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batch_iter::<f32>(&ds, 3, 1, 0).unwrap().flat_map(|b| b.indices).collect();
        let e0 = all.clone();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let e1: Vec<usize> = batch_iter::<f32>(&ds, 3, 1, 1).unwrap().flat_map(|b| b.indices).collect();
        assert_ne!(e0, e1);
        let again: Vec<usize> = batch_iter::<f32>(&ds, 3, 1, 0).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(e0, again);
        assert!(batch_iter::<f32>(&ds, 0, 1, 0).is_err());
    }

    #[test]
    fn batch_contents_follow_indices() {
        let ds = toy(5, 5);
        for b in batch_iter::<f64>(&ds, 2, 9, 3).unwrap() {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.labels[k], ds.labels()[i]);
                assert_eq!(b.images.data()[k * 4] as f32, ds.images().data()[i * 4]);
            }
        }
    }

    #[test]
    fn split_is_stratified_partition() {
        let ds = toy(103, 4);
        let (tr, va) = split_validation(&ds, 0.1, &mut RngStream::new(2, StreamId::Shuffle)).unwrap();
        assert_eq!(tr.len() + va.len(), 103);
        // Class sizes 26, 26, 26, 25 → 2 each.
        assert_eq!(va.class_counts(), vec![2, 2, 2, 2]);
        assert_eq!(va.split(), Split::Val);
        let (tr2, va2) = split_validation(&ds, 0.1, &mut RngStream::new(2, StreamId::Shuffle)).unwrap();
        assert_eq!((tr, va), (tr2, va2));
        assert!(split_validation(&ds, 1.0, &mut RngStream::new(2, StreamId::Shuffle)).is_err());
        let single = toy(3, 3);
        assert!(split_validation(&single, 0.5, &mut RngStream::new(2, StreamId::Shuffle)).is_err());
    }

    #[test]
    fn limit_and_subset() {
        let ds = toy(50, 5);
        let a = ds.limit(20, 4).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, ds.limit(20, 4).unwrap());
        assert_eq!(ds.limit(80, 4).unwrap(), ds);
        assert!(Dataset::from_u8("x", [2, 1, 1, 1], &[0, 1], vec![0, 3], 3, Split::Test).is_err());
    }

    #[test]
    fn channel_stats_standardize() {
        let mut ds = toy(40, 2);
        let stats = ChannelStats::compute(&ds).unwrap();
        stats.apply(&mut ds).unwrap();
        let again = ChannelStats::compute(&ds).unwrap();
        assert!(again.mean[0].abs() < 1e-5);
        assert!((again.std[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dataset_kind_parsing() {
        assert_eq!("Fashion_MNIST".parse::<DatasetKind>().unwrap(), DatasetKind::FashionMnist);
        assert!("imagenet".parse::<DatasetKind>().is_err());
        assert!(DatasetKind::Cifar10.default_flip() && !DatasetKind::Mnist.default_flip());
    }
}
