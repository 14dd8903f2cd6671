//! Datasets, client partitioning, unlearn-set selection and the
//! random-relabel/combine step performed by unlearning clients.
//!
//! Labels are 0-indexed throughout: a `C`-class problem uses `0..C`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::seed;

/// Labelled samples. `ids` records each row's index in the dataset it was
/// originally drawn from, so provenance survives partitioning and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(inputs, labels, num_classes, ids)
    }

    pub fn with_ids(
        inputs: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        ids: Vec<usize>,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows, {} labels, {} ids",
                inputs.rows(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::OutOfRange(format!("label {bad} >= {num_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// First `at` rows and the rest.
    pub fn split_at(&self, at: usize) -> (Self, Self) {
        let head: Vec<usize> = (0..at.min(self.len())).collect();
        let tail: Vec<usize> = (at.min(self.len())..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Gaussian class clusters with class-balanced counts.
///
/// Centroids are standard-normal in every dimension; each sample is its
/// class centroid plus isotropic noise of standard deviation `spread`.
/// Sample `i` belongs to class `i % classes`.
pub fn generate_blobs(
    n: usize,
    dims: usize,
    classes: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::InvalidConfig(format!(
            "need n >= classes >= 1 (n = {n}, classes = {classes})"
        )));
    }
    if dims == 0 {
        return Err(Error::InvalidConfig("dims must be >= 1".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidConfig("spread must be >= 0".into()));
    }
    let mut rng = seed::rng(seed);
    let centroids: Vec<f64> = (0..classes * dims)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for d in 0..dims {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(centroids[c * dims + d] + spread * noise);
        }
        labels.push(c);
    }
    Dataset::new(Matrix::new(n, dims, data)?, labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Load an MNIST-layout IDX image/label pair. Pixels are scaled to `[0, 1]`
/// by dividing by 255; the class count is `max(label) + 1` (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip)?;
    let labels = fs::read(lp)?;

    let magic = read_be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: ip.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lp.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_img = read_be_u32(&images, 4, ip)? as usize;
    let rows = read_be_u32(&images, 8, ip)? as usize;
    let cols = read_be_u32(&images, 12, ip)? as usize;
    let n_lab = read_be_u32(&labels, 4, lp)? as usize;
    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let dims = rows * cols;
    let need_img = 16 + n_img * dims;
    if images.len() < need_img {
        return Err(Error::Truncated {
            path: ip.to_path_buf(),
            expected: need_img,
            found: images.len(),
        });
    }
    let need_lab = 8 + n_lab;
    if labels.len() < need_lab {
        return Err(Error::Truncated {
            path: lp.to_path_buf(),
            expected: need_lab,
            found: labels.len(),
        });
    }
    let pixels = images[16..need_img]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let ys: Vec<usize> = labels[8..need_lab]
        .iter()
        .map(|&b| usize::from(b))
        .collect();
    let classes = ys.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Matrix::new(n_img, dims, pixels)?, ys, classes)
}

/// Read a tabular CSV with header `feature_0,…,feature_{d-1},label`.
/// When `num_classes` is `None` it is inferred as `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let d = headers.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|i| format!("feature_{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::MalformedCsv(format!(
            "expected header feature_0..feature_{{d-1}},label, got {:?}",
            headers
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for field in rec.iter().take(d) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::MalformedCsv(format!("row {}: {e}", line + 1)))?,
            );
        }
        labels.push(
            rec[d]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::MalformedCsv(format!("row {} label: {e}", line + 1)))?,
        );
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(Matrix::new(labels.len(), d, data)?, labels, classes)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.dims()).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.inputs.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionScheme {
    IidUniform,
    LabelSkew { dirichlet_alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

/// Split `ds` into `num_clients` disjoint parts covering every row.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let k = spec.num_clients;
    let n = ds.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("num_clients must be >= 1".into()));
    }
    if k > n {
        return Err(Error::TooManyClients {
            clients: k,
            samples: n,
        });
    }
    let mut rng = seed::rng(spec.seed);
    let mut buckets: Vec<Vec<usize>> = match spec.scheme {
        PartitionScheme::IidUniform => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (base, extra) = (n / k, n % k);
            let mut out = Vec::with_capacity(k);
            let mut at = 0;
            for c in 0..k {
                let size = base + usize::from(c < extra);
                out.push(order[at..at + size].to_vec());
                at += size;
            }
            out
        }
        PartitionScheme::LabelSkew { dirichlet_alpha } => {
            if !(dirichlet_alpha.is_finite() && dirichlet_alpha > 0.0) {
                return Err(Error::InvalidConfig("dirichlet_alpha must be > 0".into()));
            }
            let gamma = Gamma::new(dirichlet_alpha, 1.0)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut out = vec![Vec::new(); k];
            for class in 0..ds.num_classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let m = members.len();
                // Cumulative cut points; the last client absorbs rounding.
                let mut acc = 0.0;
                let mut start = 0;
                for (c, d) in draws.iter().enumerate() {
                    acc += if total > 0.0 {
                        d / total
                    } else {
                        1.0 / k as f64
                    };
                    let end = if c + 1 == k {
                        m
                    } else {
                        ((acc * m as f64).round() as usize).clamp(start, m)
                    };
                    out[c].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            // Every client needs at least one sample: take from the largest.
            for c in 0..k {
                if out[c].is_empty() {
                    let donor = (0..k).max_by_key(|&j| (out[j].len(), k - j)).unwrap();
                    let moved = out[donor].pop().unwrap();
                    out[c].push(moved);
                }
            }
            out
        }
    };
    Ok(buckets
        .iter_mut()
        .map(|idx| {
            idx.sort_unstable();
            ds.subset(idx)
        })
        .collect())
}

/// A client's data split into the retained part and the part to forget.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub remain: Dataset,
    pub unlearn: Dataset,
    /// Row positions of `unlearn` within the client dataset, ascending.
    pub unlearn_indices: Vec<usize>,
}

impl ClientSplit {
    fn from_indices(ds: &Dataset, mut chosen: Vec<usize>) -> Self {
        chosen.sort_unstable();
        let mut is_chosen = vec![false; ds.len()];
        chosen.iter().for_each(|&i| is_chosen[i] = true);
        let rest: Vec<usize> = (0..ds.len()).filter(|&i| !is_chosen[i]).collect();
        Self {
            remain: ds.subset(&rest),
            unlearn: ds.subset(&chosen),
            unlearn_indices: chosen,
        }
    }
}

/// Which samples an unlearning client asks to forget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UnlearnTarget {
    /// `⌊ratio·n⌋` samples uniformly without replacement.
    Samples,
    /// Every sample of one class.
    Class { class: usize },
}

fn floor_count(ratio: f64, n: usize) -> usize {
    // Guard against 0.29 * 100 = 28.999…
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Choose `⌊ratio·|ds|⌋` rows uniformly without replacement to forget.
///
/// The rows are a prefix of one seeded permutation, so for a fixed seed a
/// larger ratio selects a superset of a smaller one.
pub fn select_unlearn(ds: &Dataset, ratio: f64, seed: u64) -> Result<ClientSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::OutOfRange(format!(
            "unlearn ratio {ratio} not in (0, 1)"
        )));
    }
    let k = floor_count(ratio, ds.len());
    if k == 0 {
        return Err(Error::EmptyUnlearnSelection {
            ratio,
            samples: ds.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(k);
    Ok(ClientSplit::from_indices(ds, order))
}

/// Forget every sample of `class`.
pub fn select_unlearn_class(ds: &Dataset, class: usize) -> Result<ClientSplit> {
    if class >= ds.num_classes {
        return Err(Error::OutOfRange(format!(
            "class {class} >= {}",
            ds.num_classes
        )));
    }
    let chosen: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
    if chosen.is_empty() {
        return Err(Error::EmptyUnlearnSelection {
            ratio: 0.0,
            samples: ds.len(),
        });
    }
    Ok(ClientSplit::from_indices(ds, chosen))
}

/// Redraw every label i.i.d. uniform over all classes. With
/// `exclude_original` the draw is uniform over the other `C − 1` classes.
pub fn relabel_random(unlearn: &Dataset, seed: u64, exclude_original: bool) -> Dataset {
    let c = unlearn.num_classes;
    let mut out = unlearn.clone();
    if c <= 1 {
        return out;
    }
    let mut rng = seed::rng(seed);
    for y in out.labels.iter_mut() {
        *y = if exclude_original {
            let draw = rng.random_range(0..c - 1);
            if draw >= *y {
                draw + 1
            } else {
                draw
            }
        } else {
            rng.random_range(0..c)
        };
    }
    out
}

/// Relabelled rows first, then the retained rows.
pub fn combine(relabeled: &Dataset, remain: &Dataset) -> Result<Dataset> {
    if relabeled.num_classes != remain.num_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} classes",
            relabeled.num_classes, remain.num_classes
        )));
    }
    if !relabeled.is_empty() && !remain.is_empty() && relabeled.dims() != remain.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} features",
            relabeled.dims(),
            remain.dims()
        )));
    }
    let inputs = relabeled.inputs.vstack(&remain.inputs)?;
    let labels = relabeled
        .labels
        .iter()
        .chain(&remain.labels)
        .copied()
        .collect();
    let ids = relabeled.ids.iter().chain(&remain.ids).copied().collect();
    Dataset::with_ids(inputs, labels, relabeled.num_classes, ids)
}

/// Concatenate any number of datasets with equal class counts.
pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
    let Some(first) = parts.first() else {
        return Err(Error::EmptyInput("no datasets to concatenate".into()));
    };
    let mut acc = (*first).clone();
    for p in &parts[1..] {
        acc = combine(&acc, p)?;
    }
    Ok(acc)
}
