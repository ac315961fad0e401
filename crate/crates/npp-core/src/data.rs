//! Dataset ingestion: IDX directories, CSV tables, and seeded synthetic
//! Gaussian blobs.

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

/// One split of a dataset: row-major inputs, class labels, stable ids.
#[derive(Debug, Clone)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Split {
    pub fn new(inputs: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if inputs.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Argument(format!(
                "split with {} rows, {} labels, {} ids",
                inputs.rows(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { inputs, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Gather the given row indices into a batch.
    pub fn batch(&self, idxs: &[usize]) -> Result<Batch> {
        if idxs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(idxs.len() * d);
        let mut labels = Vec::with_capacity(idxs.len());
        let mut ids = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::Argument(format!(
                    "row index {i} out of range ({} rows)",
                    self.len()
                )));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        Batch::new(Tensor::from_rows(idxs.len(), d, data)?, labels, ids)
    }

    /// Subset view by row indices, keeping original ids.
    pub fn subset(&self, idxs: &[usize]) -> Result<Split> {
        let b = self.batch(idxs)?;
        Split::new(b.inputs, b.labels, b.ids)
    }

    /// Row index of a sample id.
    pub fn index_of_id(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

/// Train and test splits plus class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
}

impl Dataset {
    /// Number of distinct samples across both splits (tiny datasets alias
    /// the test split onto the training rows).
    pub fn total_len(&self) -> usize {
        let ids: std::collections::BTreeSet<u64> = self
            .train
            .ids
            .iter()
            .chain(&self.test.ids)
            .copied()
            .collect();
        ids.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    fn validate(&self) -> Result<()> {
        for &l in self.train.labels.iter().chain(&self.test.labels) {
            if l >= self.num_classes {
                return Err(Error::Format(format!(
                    "label {l} exceeds class count {}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Directory with `train-images-idx3-ubyte` / `train-labels-idx1-ubyte`
    /// and optionally the matching `t10k-*` test files.
    IdxDir(PathBuf),
    /// CSV table with a header row and a column named `label`.
    Csv(PathBuf),
    /// Seeded Gaussian blobs with class-separated means.
    SyntheticBlobs {
        classes: usize,
        dim: usize,
        n: usize,
        seed: u64,
    },
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    let ds = match source {
        DataSource::IdxDir(dir) => load_idx_dir(dir)?,
        DataSource::Csv(path) => load_csv(path)?,
        DataSource::SyntheticBlobs {
            classes,
            dim,
            n,
            seed,
        } => synthetic_blobs(*classes, *dim, *n, *seed)?,
    };
    ds.validate()?;
    Ok(ds)
}

// ── Synthetic blobs ──────────────────────────────────────────────────

// Geometry of the blob task. Classes come in pairs sharing a well-separated
// coarse center, and the pair bit is written twice. A "micro" block carries
// it linearly at low amplitude with very low noise: the cleanest signal, the
// first thing a trained readout leans on, yet below half an activation-
// quantizer step, so few-level arithmetic erases it. An "agreement" block of
// coordinate pairs (s*h + eps, h + eps) carries the same bit in a sign
// product at high amplitude, immune to coarse arithmetic. The per-sample
// coin h is biased, which leaves a weak linear trace of the bit in the first
// coordinate: enough for pretraining to place real weights on these
// coordinates (and to keep a degraded model above chance), while the full
// product structure stays unlearned as long as the micro shortcut drives the
// loss to zero. When quantization erases the shortcut, retraining pushes
// through those inherited weights and demodulates the product via |a + b|,
// which needs only a rank-1 input direction.
const BLOB_CENTER_NORM: f64 = 10.0;
const BLOB_NOISE_STD: f64 = 0.4;
const BLOB_MICRO_COORDS: usize = 8;
const BLOB_MICRO_AMP: f64 = 0.15;
const BLOB_MICRO_NOISE: f64 = 0.03;
const BLOB_AGREE_PAIRS: usize = 4;
const BLOB_AGREE_AMP: f64 = 1.0;
const BLOB_AGREE_NOISE: f64 = 0.12;
const BLOB_AGREE_COIN_P: f64 = 0.72;
const BLOB_AGREE_B_LEAK: f64 = 0.3;

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct BlobGeometry {
    /// Per-class means over the coarse coordinates.
    centers: Vec<Vec<f64>>,
    /// Pair side per class: +1 / -1 within a pair, 0 for an unpaired class.
    side: Vec<f64>,
    /// Fixed +-1 pattern over the micro coordinates.
    micro_pattern: Vec<f64>,
    coarse_dim: usize,
    agree_pairs: usize,
}

fn blob_geometry(classes: usize, dim: usize, seed: u64) -> BlobGeometry {
    let mut rng = substream(seed, "blobs.means");
    // Shrink the side blocks on low-dimensional inputs.
    let agree_pairs = BLOB_AGREE_PAIRS.min(dim / 8);
    let micro_dim = BLOB_MICRO_COORDS.min(dim / 3).max(1);
    let coarse_dim = dim - micro_dim - 2 * agree_pairs;
    let groups = classes.div_ceil(2);
    let mut centers = Vec::with_capacity(classes);
    let mut side = Vec::with_capacity(classes);
    for _ in 0..groups {
        let center: Vec<f64> = unit_vector(coarse_dim, &mut rng)
            .into_iter()
            .map(|v| v * BLOB_CENTER_NORM)
            .collect();
        for s in 0..2 {
            let class = centers.len();
            if class >= classes {
                break;
            }
            centers.push(center.clone());
            // The last class of an odd count has no mate and a neutral side.
            if classes % 2 == 1 && class == classes - 1 {
                side.push(0.0);
            } else {
                side.push(if s == 0 { 1.0 } else { -1.0 });
            }
        }
    }
    let micro_pattern: Vec<f64> = (0..micro_dim)
        .map(|_| if rng.random_range(0..2) == 1 { 1.0 } else { -1.0 })
        .collect();
    BlobGeometry {
        centers,
        side,
        micro_pattern,
        coarse_dim,
        agree_pairs,
    }
}

fn sample_blob_split(geo: &BlobGeometry, n: usize, id_base: u64, rng: &mut impl Rng) -> Result<Split> {
    let classes = geo.centers.len();
    let dim = geo.coarse_dim + geo.micro_pattern.len() + 2 * geo.agree_pairs;
    let coarse_noise = Normal::new(0.0, BLOB_NOISE_STD).expect("noise std");
    let micro_noise = Normal::new(0.0, BLOB_MICRO_NOISE).expect("micro noise std");
    let agree_noise = Normal::new(0.0, BLOB_AGREE_NOISE).expect("agree noise std");
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(geo.centers[c].iter().map(|&m| m + coarse_noise.sample(rng)));
        data.extend(
            geo.micro_pattern
                .iter()
                .map(|&p| geo.side[c] * BLOB_MICRO_AMP * p + micro_noise.sample(rng)),
        );
        for _ in 0..geo.agree_pairs {
            let h: f64 = if rng.random_range(0.0..1.0) < BLOB_AGREE_COIN_P { 1.0 } else { -1.0 };
            data.push(geo.side[c] * h * BLOB_AGREE_AMP + agree_noise.sample(rng));
            data.push((h + BLOB_AGREE_B_LEAK * geo.side[c]) * BLOB_AGREE_AMP + agree_noise.sample(rng));
        }
    }
    Split::new(
        Tensor::from_rows(n, dim, data)?,
        labels,
        (id_base..id_base + n as u64).collect(),
    )
}

/// Gaussian blobs with class-separated means: `n` training samples plus a
/// test split of `max(classes, n/5)` samples, labels assigned round-robin.
/// Fully determined by `seed`.
pub fn synthetic_blobs(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("blobs need at least 2 classes".into()));
    }
    if n < classes {
        return Err(Error::Config(format!(
            "{n} samples cannot cover {classes} classes"
        )));
    }
    if dim < 4 {
        return Err(Error::Config("blobs need at least 4 dimensions".into()));
    }
    let geo = blob_geometry(classes, dim, seed);
    let n_test = (n / 5).max(classes);
    let mut train_rng = substream(seed, "blobs.train");
    let mut test_rng = substream(seed, "blobs.test");
    Ok(Dataset {
        train: sample_blob_split(&geo, n, 0, &mut train_rng)?,
        test: sample_blob_split(&geo, n_test, n as u64, &mut test_rng)?,
        num_classes: classes,
    })
}

// ── IDX files ────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, path: &Path, offset: usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| {
        Error::Format(format!(
            "{}: truncated at byte offset {offset}",
            path.display()
        ))
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, path, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:#010x} at byte offset 0 (expected {IDX_IMAGES_MAGIC:#010x})",
            path.display()
        )));
    }
    let count = read_u32_be(&mut r, path, 4)? as usize;
    let rows = read_u32_be(&mut r, path, 8)? as usize;
    let cols = read_u32_be(&mut r, path, 12)? as usize;
    let mut bytes = vec![0u8; count * rows * cols];
    r.read_exact(&mut bytes).map_err(|_| {
        Error::Format(format!(
            "{}: pixel payload shorter than {}x{}x{} declared at offset 16",
            path.display(),
            count,
            rows,
            cols
        ))
    })?;
    // Pixels scaled to [0, 1].
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows * cols, data))
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, path, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:#010x} at byte offset 0 (expected {IDX_LABELS_MAGIC:#010x})",
            path.display()
        )));
    }
    let count = read_u32_be(&mut r, path, 4)? as usize;
    let mut bytes = vec![0u8; count];
    r.read_exact(&mut bytes).map_err(|_| {
        Error::Format(format!(
            "{}: label payload shorter than {count} declared at offset 8",
            path.display()
        ))
    })?;
    Ok(bytes.into_iter().map(usize::from).collect())
}

fn idx_split(images: &Path, labels: &Path, id_base: u64) -> Result<Split> {
    let (count, dim, data) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            count,
            labels.len()
        )));
    }
    Split::new(
        Tensor::from_rows(count, dim, data)?,
        labels,
        (id_base..id_base + count as u64).collect(),
    )
}

fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    let train = idx_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        0,
    )?;
    let t10k_images = dir.join("t10k-images-idx3-ubyte");
    let t10k_labels = dir.join("t10k-labels-idx1-ubyte");
    let num_classes = |s: &Split| s.labels.iter().copied().max().unwrap_or(0) + 1;
    if t10k_images.exists() && t10k_labels.exists() {
        let test = idx_split(&t10k_images, &t10k_labels, train.len() as u64)?;
        let classes = num_classes(&train).max(num_classes(&test));
        Ok(Dataset {
            train,
            test,
            num_classes: classes,
        })
    } else {
        let classes = num_classes(&train);
        Ok(split_eighty_twenty(train, classes)?)
    }
}

// ── CSV files ────────────────────────────────────────────────────────

fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: no column named \"label\" in header",
                path.display()
            ))
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Format(format!(
            "{}: no feature columns besides the label",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row_ix, record) in reader.records().enumerate() {
        // The csv error message carries the offending line number.
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let label: usize = field.trim().parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: bad label {field:?}",
                        path.display(),
                        row_ix + 2
                    ))
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: bad numeric field {field:?}",
                        path.display(),
                        row_ix + 2
                    ))
                })?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let n = labels.len();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let split = Split::new(
        Tensor::from_rows(n, dim, data)?,
        labels,
        (0..n as u64).collect(),
    )?;
    split_eighty_twenty(split, classes)
}

/// Deterministic 80/20 split by position; datasets too small to carve a test
/// slice evaluate on the full set.
fn split_eighty_twenty(full: Split, num_classes: usize) -> Result<Dataset> {
    let n = full.len();
    let n_test = n / 5;
    if n_test == 0 {
        return Ok(Dataset {
            train: full.clone(),
            test: full,
            num_classes,
        });
    }
    let train_idx: Vec<usize> = (0..n - n_test).collect();
    let test_idx: Vec<usize> = (n - n_test..n).collect();
    Ok(Dataset {
        train: full.subset(&train_idx)?,
        test: full.subset(&test_idx)?,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_seed_deterministic() {
        let a = synthetic_blobs(10, 32, 100, 7).unwrap();
        let b = synthetic_blobs(10, 32, 100, 7).unwrap();
        assert_eq!(a.train.inputs.data(), b.train.inputs.data());
        assert_eq!(a.test.inputs.data(), b.test.inputs.data());
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn blobs_cover_all_classes() {
        let d = synthetic_blobs(3, 8, 30, 5).unwrap();
        for c in 0..3 {
            assert!(d.train.labels.contains(&c));
            assert!(d.test.labels.contains(&c));
        }
        assert_eq!(d.num_classes, 3);
    }

    #[test]
    fn idx_wrong_magic_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("train-images-idx3-ubyte");
        let lbl = dir.path().join("train-labels-idx1-ubyte");
        std::fs::write(&img, 0xdeadbeefu32.to_be_bytes()).unwrap();
        std::fs::write(&lbl, []).unwrap();
        match load_dataset(&DataSource::IdxDir(dir.path().to_path_buf())) {
            Err(Error::Format(msg)) => assert!(msg.contains("byte offset 0"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_roundtrip_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Vec::new();
        img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend(4u32.to_be_bytes()); // count
        img.extend(2u32.to_be_bytes()); // rows
        img.extend(1u32.to_be_bytes()); // cols
        img.extend([0u8, 255, 128, 64, 32, 16, 8, 4]);
        let mut lbl = Vec::new();
        lbl.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend(4u32.to_be_bytes());
        lbl.extend([0u8, 1, 1, 0]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lbl).unwrap();
        let ds = load_dataset(&DataSource::IdxDir(dir.path().to_path_buf())).unwrap();
        assert_eq!(ds.total_len(), 4);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.train.inputs.data()[1], 1.0); // 255 -> 1.0
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn csv_three_rows_two_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "x0,label,x1").unwrap();
        writeln!(f, "0.5,0,1.5").unwrap();
        writeln!(f, "-1.0,1,2.0").unwrap();
        writeln!(f, "0.25,0,-0.5").unwrap();
        drop(f);
        let ds = load_dataset(&DataSource::Csv(path)).unwrap();
        assert_eq!(ds.total_len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn csv_missing_label_column_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        match load_dataset(&DataSource::Csv(path)) {
            Err(Error::Format(msg)) => assert!(msg.contains("label"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_ragged_row_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "a,label\n1,0\n2,1,9\n").unwrap();
        match load_dataset(&DataSource::Csv(path)) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("line") || msg.contains("record"), "{msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
