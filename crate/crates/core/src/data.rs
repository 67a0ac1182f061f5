//! Datasets, minibatching and the raw tensor file format.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Partition;
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 binary record: one label byte, then 32x32 R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const TENSOR_MAGIC: &[u8; 4] = b"DTNS";

/// Class ids kept apart from the samples; only evaluation code reads them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth(Vec<usize>);

impl GroundTruth {
    pub fn new(labels: Vec<usize>) -> Self {
        GroundTruth(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn partition(&self) -> Partition {
        Partition::from_labels(&self.0)
    }

    pub fn num_classes(&self) -> usize {
        self.partition().num_clusters()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Bytes divided by 255.
    UnitInterval,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    samples: Tensor,
    truth: Option<GroundTruth>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Tensor, truth: Option<GroundTruth>) -> Result<Self> {
        if samples.rank() < 2 {
            return Err(Error::dim("dataset", format!("samples need a leading batch axis, got {:?}", samples.shape())));
        }
        if let Some(t) = &truth {
            if t.len() != samples.shape()[0] {
                return Err(Error::LengthMismatch { left: t.len(), right: samples.shape()[0] });
            }
        }
        Ok(Dataset { name: name.into(), samples, truth, normalization: Normalization::None })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// Samples at `indices`, stacked along a new leading axis.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.samples.select(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: self.samples.select(indices),
            truth: self.truth.as_ref().map(|t| GroundTruth(indices.iter().map(|&i| t.0[i]).collect())),
            normalization: self.normalization.clone(),
        }
    }

    /// Keeps the first `limit` samples of each listed class, relabelled as
    /// `0..classes.len()` in list order.
    pub fn filter_classes(&self, classes: &[usize], limit_per_class: Option<usize>) -> Result<Dataset> {
        let truth = self
            .truth
            .as_ref()
            .ok_or_else(|| Error::Contract("class filter needs ground truth".into()))?;
        let mut taken = vec![0usize; classes.len()];
        let mut idx = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in truth.0.iter().enumerate() {
            if let Some(c) = classes.iter().position(|&k| k == l) {
                if limit_per_class.is_none_or(|m| taken[c] < m) {
                    taken[c] += 1;
                    idx.push(i);
                    labels.push(c);
                }
            }
        }
        Ok(Dataset {
            name: format!("{}[{classes:?}]", self.name),
            samples: self.samples.select(&idx),
            truth: Some(GroundTruth(labels)),
            normalization: self.normalization.clone(),
        })
    }
}

/// Reads CIFAR-10 binary batch files, scaling pixels to `[0, 1]`.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(Error::Format(format!(
                "{}: {} bytes is not a multiple of {CIFAR_RECORD}; trailing partial record at byte offset {whole}",
                path.display(),
                bytes.len()
            )));
        }
        if bytes.is_empty() {
            warn!("{}: empty CIFAR file", path.display());
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format(format!(
                    "{}: label byte {} > 9 at byte offset {}",
                    path.display(),
                    rec[0],
                    r * CIFAR_RECORD
                )));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let samples = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    let mut ds = Dataset::new("cifar10", samples, Some(GroundTruth(labels)))?;
    ds.normalization = Normalization::UnitInterval;
    Ok(ds)
}

/// Encodes `(label, [3, 32, 32] pixels in [0, 1])` records in CIFAR-10 layout.
pub fn encode_cifar_records(records: &[(u8, Vec<f64>)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for (label, px) in records {
        if px.len() != CIFAR_RECORD - 1 {
            return Err(Error::LengthMismatch { left: px.len(), right: CIFAR_RECORD - 1 });
        }
        out.push(*label);
        out.extend(px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec { clusters: 4, per_cluster: 100, dim: 16, separation: 10.0, sigma: 1.0, seed: 0 }
    }
}

/// Isotropic Gaussian clusters with centres at least `separation` apart.
pub fn generate_blobs(spec: &BlobsSpec) -> Result<Dataset> {
    let BlobsSpec { clusters, per_cluster, dim, separation, sigma, seed } = *spec;
    if clusters < 2 || dim == 0 || per_cluster == 0 {
        return Err(Error::Config(format!("blobs need K >= 2, dim >= 1, per-cluster >= 1; got {spec:?}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("bad sigma {sigma} or separation {separation}")));
    }
    const RETRIES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = separation * (clusters as f64).powf(1.0 / dim as f64);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(clusters);
    for k in 0..clusters {
        let mut placed = false;
        for _ in 0..RETRIES {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-half..=half)).collect();
            let far = centres.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation
            });
            if far {
                centres.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place centre {k} at separation {separation} after {RETRIES} tries"
            )));
        }
    }
    let mut data = Vec::with_capacity(clusters * per_cluster * dim);
    let mut labels = Vec::with_capacity(clusters * per_cluster);
    for (k, c) in centres.iter().enumerate() {
        for _ in 0..per_cluster {
            data.extend(c.iter().map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal)));
            labels.push(k);
        }
    }
    let samples = Tensor::new(vec![clusters * per_cluster, dim], data)?;
    Dataset::new("blobs", samples, Some(GroundTruth(labels)))
}

/// Shuffled index chunks of `batch_size`; a trailing chunk shorter than two
/// samples is dropped.
pub fn minibatches_with(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} outside [2, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn minibatches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    minibatches_with(n, batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Serializes a tensor as `DTNS`, u32 rank, u64 dims, little-endian f64 data.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = crate::checkpoint::ByteReader::new(bytes);
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic (expected DTNS)".into()));
    }
    let t = r.tensor_body()?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after tensor", r.remaining())));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Ground truth for a tensor dataset lives next to it with this suffix.
pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

/// Writes samples (and labels, if any) as `DTNS` files.
pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    write_tensor(path, ds.samples())?;
    if let Some(t) = ds.ground_truth() {
        let l = Tensor::vector(t.labels().iter().map(|&v| v as f64).collect());
        write_tensor(labels_path(path), &l)?;
    }
    Ok(())
}

/// Reads a tensor dataset, or CIFAR-10 binary when the extension is `.bin`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "bin") {
        return load_cifar_binary(&[path]);
    }
    let samples = read_tensor(path)?;
    let lp = labels_path(path);
    let truth = if lp.exists() {
        let l = read_tensor(&lp)?;
        let labels = l
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("{}: label {v} is not a class id", lp.display())))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Some(GroundTruth(labels))
    } else {
        None
    };
    let name = path.file_stem().map_or("tensor".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, samples, truth)
}
