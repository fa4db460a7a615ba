//! Generalized Discrimination Value.
//!
//! For a labeled point cloud in `D` dimensions with `C` classes,
//!
//! ```text
//! GDV = (1/√D) · [ (1/C) Σ_c intra(c) − 2/(C(C−1)) Σ_{c<m} inter(c, m) ]
//! ```
//!
//! where `intra` is the mean Euclidean distance over distinct pairs of one
//! class and `inter` the mean over all cross pairs of two classes. Points are
//! z-scored per dimension to standard deviation 0.5 first (optional). With
//! that normalization shuffled labels score ≈ 0 and perfectly separated
//! classes approach −1.
//!
//! Summation order is canonical: points within a class are sorted
//! lexicographically and per-class / per-pair means are summed in ascending
//! order, so the result is bit-identical under row permutation and class
//! relabeling.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hcl::Backbone;
use crate::nn::Mode;
use crate::rng::{RngStream, StreamId};
use crate::tensor::{Element, Tensor};

/// Points `[N, D]` with one class label per row.
#[derive(Debug, Clone)]
pub struct LabeledRepresentation {
    points: Tensor<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledRepresentation {
    pub fn new(points: Tensor<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, d) = match *points.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::shape("gdv points", points.shape(), &[0, 0])),
        };
        if n < 2 || d < 1 {
            return Err(Error::arg("GDV needs N >= 2 points of dimension >= 1"));
        }
        if labels.len() != n {
            return Err(Error::shape("gdv labels", &[labels.len()], &[n]));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in &labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::arg(format!("label {l} out of range for {num_classes} classes")))? += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::arg(format!("class {c} has no points")));
        }
        Ok(Self {
            points,
            labels,
            num_classes,
        })
    }

    pub fn points(&self) -> &Tensor<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }
}

/// Per-dimension shift to mean 0 and scale to (population) standard
/// deviation 0.5. Constant dimensions become all zeros.
pub fn normalize_for_gdv(points: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = match *points.shape() {
        [n, d] if n >= 2 => (n, d),
        _ => return Err(Error::arg("normalization needs an [N >= 2, D] matrix")),
    };
    let x = points.data();
    let mut out = vec![0.0; n * d];
    let mut col = vec![0.0; n];
    for j in 0..d {
        // Sorted accumulation keeps the statistics independent of row order.
        for (i, c) in col.iter_mut().enumerate() {
            *c = x[i * d + j];
        }
        col.sort_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std == 0.0 || std <= 1e-12 * mean.abs() {
            continue;
        }
        let scale = 0.5 / std;
        for i in 0..n {
            out[i * d + j] = (x[i * d + j] - mean) * scale;
        }
    }
    Tensor::new(points.shape(), out)
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            let t = x[k] - y[k];
            acc[k] += t * t;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x - y) * (x - y);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail).sqrt()
}

fn rows(points: &Tensor<f64>) -> Vec<&[f64]> {
    let d = points.shape()[1];
    points.data().chunks_exact(d).collect()
}

fn intra_of(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += euclid(rows[i], rows[j]);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

fn inter_of(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += euclid(x, y);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Mean distance over distinct pairs of an `[N, D]` point set; 0 for a
/// singleton.
pub fn mean_intra(points: &Tensor<f64>) -> f64 {
    intra_of(&rows(points))
}

/// Mean distance over all cross pairs of two point sets.
pub fn mean_inter(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    inter_of(&rows(a), &rows(b))
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn lex_blocks(a: &[&[f64]], b: &[&[f64]]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| lex(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdvBreakdown {
    pub value: f64,
    /// Mean intra-class distance, indexed by class.
    pub mean_intra: Vec<f64>,
    /// `(c, m, mean inter-class distance)` for every `c < m`.
    pub mean_inter: Vec<(usize, usize, f64)>,
    pub dim: usize,
    pub n_points: usize,
}

pub fn gdv(rep: &LabeledRepresentation, normalize: bool) -> Result<f64> {
    Ok(gdv_breakdown(rep, normalize)?.value)
}

pub fn gdv_breakdown(rep: &LabeledRepresentation, normalize: bool) -> Result<GdvBreakdown> {
    let c = rep.num_classes;
    if c < 2 {
        return Err(Error::arg("GDV needs at least two classes"));
    }
    let normalized;
    let points = if normalize {
        normalized = normalize_for_gdv(&rep.points)?;
        &normalized
    } else {
        &rep.points
    };
    let all = rows(points);
    let mut classes: Vec<Vec<&[f64]>> = vec![Vec::new(); c];
    for (row, &l) in all.iter().zip(&rep.labels) {
        classes[l].push(row);
    }
    for class in &mut classes {
        class.sort_by(|a, b| lex(a, b));
    }

    let mean_intra: Vec<f64> = classes.par_iter().map(|k| intra_of(k)).collect();
    let pairs: Vec<(usize, usize)> = (0..c).flat_map(|a| (a + 1..c).map(move |b| (a, b))).collect();
    let mean_inter: Vec<(usize, usize, f64)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (x, y) = (&classes[a], &classes[b]);
            let v = match lex_blocks(x, y) {
                Ordering::Greater => inter_of(y, x),
                _ => inter_of(x, y),
            };
            (a, b, v)
        })
        .collect();

    let d = rep.dim() as f64;
    let intra_term = sorted_sum(mean_intra.clone()) / c as f64;
    let inter_term = sorted_sum(mean_inter.iter().map(|t| t.2).collect()) * 2.0 / (c * (c - 1)) as f64;
    let value = (intra_term - inter_term) / d.sqrt();
    if !value.is_finite() {
        return Err(Error::Numeric("GDV is not finite".into()));
    }
    Ok(GdvBreakdown {
        value,
        mean_intra,
        mean_inter,
        dim: rep.dim(),
        n_points: rep.labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdvOptions {
    pub normalize: bool,
    /// Cap on points per class; larger classes are subsampled.
    pub max_per_class: Option<usize>,
    pub seed: u64,
    /// Forward-pass chunk size.
    pub batch_size: usize,
}

impl Default for GdvOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            max_per_class: Some(2000),
            seed: 0,
            batch_size: 256,
        }
    }
}

/// Seeded per-class subsample; returns sorted row indices.
pub fn subsample_per_class(labels: &[usize], num_classes: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < num_classes {
            by_class[l].push(i);
        }
    }
    let mut rng = RngStream::new(seed, StreamId::Subsample);
    let mut keep = Vec::new();
    for mut members in by_class {
        if members.len() > cap {
            rng.shuffle(&mut members);
            members.truncate(cap);
        }
        keep.extend(members);
    }
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdvLayerRecord {
    pub layer_index: usize,
    pub layer_kind: &'static str,
    pub gdv: f64,
    pub mean_intra: Vec<f64>,
    pub mean_inter: Vec<(usize, usize, f64)>,
    pub dim: usize,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdvReport {
    pub layers: Vec<GdvLayerRecord>,
}

impl GdvReport {
    pub const CSV_HEADER: &'static str = "layer_index,layer_kind,gdv,D,n_points";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer_index, r.layer_kind, r.gdv, r.dim, r.n_points
            ));
        }
        out
    }
}

/// Flattened eval-mode outputs of one layer for the given rows, as `[N, D]`.
fn layer_outputs<T: Element>(
    backbone: &Backbone<T>,
    images: &Tensor<T>,
    rows: &[usize],
    layer: usize,
    batch_size: usize,
) -> Result<Tensor<f64>> {
    let d = backbone.spec.output_numel(layer);
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut rng = RngStream::new(0, StreamId::Dropout);
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = images.select_rows(chunk)?;
        let trace = backbone.forward(&batch, Mode::Eval, &mut rng)?;
        data.extend(trace.layer(layer).data().iter().map(|v| v.as_f64()));
    }
    Tensor::new(&[rows.len(), d], data)
}

/// GDV of every backbone layer's flattened eval-mode output.
pub fn gdv_profile<T: Element>(
    backbone: &Backbone<T>,
    images: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
    opts: &GdvOptions,
) -> Result<GdvReport> {
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("gdv_profile", images.shape(), &[labels.len()]));
    }
    let rows = match opts.max_per_class {
        Some(cap) => subsample_per_class(labels, num_classes, cap, opts.seed),
        None => (0..labels.len()).collect(),
    };
    let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let mut layers = Vec::with_capacity(backbone.spec.len());
    for (i, layer) in backbone.spec.layers().iter().enumerate() {
        let points = layer_outputs(backbone, images, &rows, i, opts.batch_size)?;
        let rep = LabeledRepresentation::new(points, sub_labels.clone(), num_classes)?;
        let b = gdv_breakdown(&rep, opts.normalize)?;
        layers.push(GdvLayerRecord {
            layer_index: i,
            layer_kind: layer.kind(),
            gdv: b.value,
            mean_intra: b.mean_intra,
            mean_inter: b.mean_inter,
            dim: b.dim,
            n_points: b.n_points,
        });
    }
    Ok(GdvReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(n: usize, d: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[n, d], v).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let out = normalize_for_gdv(&pts(2, 1, &[-1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[-0.5, 0.5]);
        let out = normalize_for_gdv(&pts(3, 1, &[3.0, 3.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
        let x = pts(4, 2, &[1.0, 5.0, 2.0, -1.0, 7.0, 0.5, -3.0, 2.0]);
        let once = normalize_for_gdv(&x).unwrap();
        let twice = normalize_for_gdv(&once).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn intra_and_inter_examples() {
        assert_eq!(mean_intra(&pts(1, 1, &[4.0])), 0.0);
        assert_eq!(mean_intra(&pts(2, 1, &[0.0, 2.0])), 2.0);
        assert!((mean_intra(&pts(3, 1, &[0.0, 1.0, 2.0])) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_inter(&pts(1, 1, &[0.0]), &pts(1, 1, &[1.0])), 1.0);
        assert_eq!(mean_inter(&pts(2, 1, &[0.0, 2.0]), &pts(1, 1, &[1.0])), 1.0);
    }

    #[test]
    fn inter_of_identical_clouds() {
        // Cross pairs of a cloud with itself include the N zero self-pairs and
        // every unordered pair twice: inter = intra · (N−1)/N.
        let a = pts(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 2.0, 2.0]);
        let n = 4.0;
        assert!((mean_inter(&a, &a) - mean_intra(&a) * (n - 1.0) / n).abs() < 1e-12);
    }

    #[test]
    fn opposite_singletons_score_minus_one() {
        let rep = LabeledRepresentation::new(pts(2, 1, &[-1.0, 1.0]), vec![0, 1], 2).unwrap();
        assert!((gdv(&rep, true).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_score_zero() {
        let rep = LabeledRepresentation::new(pts(4, 2, &[1.0; 8]), vec![0, 1, 0, 1], 2).unwrap();
        assert_eq!(gdv(&rep, true).unwrap(), 0.0);
        assert_eq!(gdv(&rep, false).unwrap(), 0.0);
    }

    #[test]
    fn representation_validation() {
        assert!(LabeledRepresentation::new(pts(2, 1, &[0.0, 1.0]), vec![0, 0], 2).is_err());
        assert!(LabeledRepresentation::new(pts(2, 1, &[0.0, 1.0]), vec![0, 2], 2).is_err());
        assert!(LabeledRepresentation::new(pts(1, 1, &[0.0]), vec![0], 1).is_err());
        let one_class = LabeledRepresentation::new(pts(2, 1, &[0.0, 1.0]), vec![0, 0], 1).unwrap();
        assert!(gdv(&one_class, true).is_err());
    }

    #[test]
    fn subsample_caps_each_class() {
        let labels: Vec<usize> = (0..100).map(|i| if i < 70 { 0 } else { 1 }).collect();
        let keep = subsample_per_class(&labels, 2, 20, 3);
        assert_eq!(keep.iter().filter(|&&i| labels[i] == 0).count(), 20);
        assert_eq!(keep.iter().filter(|&&i| labels[i] == 1).count(), 20);
        assert_eq!(keep, subsample_per_class(&labels, 2, 20, 3));
    }
}
