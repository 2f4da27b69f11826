//! Datasets: IDX image loading, Gaussian blobs and seeded batching.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic 0x{got:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, got: u32 },
    #[error("{path}: truncated file, need {expected} bytes, found {got}")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} outside [0, {classes})")]
    InvalidLabel { index: usize, label: usize, classes: usize },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = DataError> = std::result::Result<T, E>;

/// Labeled samples: `inputs` is `[count, n]`, one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    inputs: Tensor<S>,
    labels: Vec<usize>,
    class_count: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(inputs: Tensor<S>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(DataError::Invalid(format!("inputs must be rank 2, got shape {:?}", inputs.shape())));
        }
        if inputs.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::InvalidLabel {
                index,
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            inputs: inputs.with_requires_grad(false),
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor<S> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input width `n`.
    pub fn width(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(inputs, labels, self.class_count)
    }

    /// The first `count` samples after a seeded shuffle of all indices.
    pub fn shuffled_subset(&self, count: usize, seed: u64) -> Result<Self> {
        if count > self.len() {
            return Err(DataError::Invalid(format!("subset of {count} from {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(count);
        self.select(&idx)
    }

    /// Fraction of rows whose argmax in `probs` differs from the label.
    pub fn error_rate(&self, probs: &Tensor<S>) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let wrong = (0..self.len()).filter(|&i| argmax(probs.row(i)) != self.labels[i]).count();
        wrong as f64 / self.len() as f64
    }

    /// Writes pixels as `round(255·v)`; values must lie in [0, 1].
    pub fn write_idx(&self, images_path: &Path, labels_path: &Path, image_dims: [usize; 2]) -> Result<()> {
        if image_dims[0] * image_dims[1] != self.width() {
            return Err(DataError::Invalid(format!(
                "image dims {image_dims:?} do not match width {}",
                self.width()
            )));
        }
        let mut pixels = Vec::with_capacity(self.inputs.len());
        for &v in self.inputs.data() {
            let v = v.to_f64_lossy();
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Invalid(format!("pixel value {v} outside [0, 1]")));
            }
            pixels.push((v * 255.0).round() as u8);
        }
        let labels = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit in u8"))))
            .collect::<Result<Vec<_>>>()?;
        write_idx_raw(images_path, labels_path, &pixels, image_dims, &labels)
    }
}

/// Index of the first maximum.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let got = BigEndian::read_u32(bytes);
    if got != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            got,
        });
    }
    Ok(())
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255 and images
/// flattened row-major; the class count is one past the largest label.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>> {
    read_idx(images_path, labels_path)?.to_dataset(None)
}

/// Same samples as `load_idx(..)?.shuffled_subset(count, seed)`, without
/// converting the whole file first.
pub fn load_idx_subset<S: Scalar>(images_path: &Path, labels_path: &Path, count: usize, seed: u64) -> Result<Dataset<S>> {
    let raw = read_idx(images_path, labels_path)?;
    if count > raw.labels.len() {
        return Err(DataError::Invalid(format!("subset of {count} from {} samples", raw.labels.len())));
    }
    let mut idx: Vec<usize> = (0..raw.labels.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(count);
    raw.to_dataset(Some(&idx))
}

struct IdxRaw {
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl IdxRaw {
    fn to_dataset<S: Scalar>(&self, indices: Option<&[usize]>) -> Result<Dataset<S>> {
        let all: Vec<usize>;
        let indices = match indices {
            Some(i) => i,
            None => {
                all = (0..self.labels.len()).collect();
                &all
            }
        };
        let n = self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.pixels[i * n..(i + 1) * n].iter().map(|&p| S::of(p as f64) / S::of(255.0)));
        }
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i] as usize).collect();
        // class count comes from the whole file so subsets agree on it
        let classes = self.labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        Dataset::new(Tensor::new([indices.len(), n], data)?, labels, classes)
    }
}

fn read_idx(images_path: &Path, labels_path: &Path) -> Result<IdxRaw> {
    let mut img = read_file(images_path)?;
    check_magic(images_path, &img, IDX_IMAGES_MAGIC)?;
    need(images_path, &img, 16)?;
    let count = BigEndian::read_u32(&img[4..]) as usize;
    let rows = BigEndian::read_u32(&img[8..]) as usize;
    let cols = BigEndian::read_u32(&img[12..]) as usize;
    let n = rows * cols;
    need(images_path, &img, 16 + count * n)?;

    let mut lab = read_file(labels_path)?;
    check_magic(labels_path, &lab, IDX_LABELS_MAGIC)?;
    need(labels_path, &lab, 8)?;
    let label_count = BigEndian::read_u32(&lab[4..]) as usize;
    need(labels_path, &lab, 8 + label_count)?;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    img.drain(..16);
    img.truncate(count * n);
    lab.drain(..8);
    lab.truncate(count);
    Ok(IdxRaw {
        width: n,
        pixels: img,
        labels: lab,
    })
}

/// Writes raw IDX files; `pixels` holds `labels.len()` images of `dims`.
pub fn write_idx_raw(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    dims: [usize; 2],
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != labels.len() * dims[0] * dims[1] {
        return Err(DataError::CountMismatch {
            images: pixels.len() / (dims[0] * dims[1]).max(1),
            labels: labels.len(),
        });
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| DataError::Invalid(format!("{v} exceeds u32")));

    let mut w = BufWriter::new(fs::File::create(images_path).map_err(io(images_path))?);
    let header = [IDX_IMAGES_MAGIC, as_u32(labels.len())?, as_u32(dims[0])?, as_u32(dims[1])?];
    for h in header {
        w.write_u32::<BigEndian>(h).map_err(io(images_path))?;
    }
    w.write_all(pixels).map_err(io(images_path))?;
    w.flush().map_err(io(images_path))?;

    let mut w = BufWriter::new(fs::File::create(labels_path).map_err(io(labels_path))?);
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC).map_err(io(labels_path))?;
    w.write_u32::<BigEndian>(as_u32(labels.len())?).map_err(io(labels_path))?;
    w.write_all(labels).map_err(io(labels_path))?;
    w.flush().map_err(io(labels_path))?;
    Ok(())
}

/// Class centers with every pairwise distance ≥ `max(4·spread, 1)`.
///
/// When `dims ≥ k−1` the centers form a regular simplex with exactly that
/// side under a random orthonormal embedding. Otherwise they are drawn
/// uniformly in a box and rejected until separated.
pub fn blob_centers(k_classes: usize, dims: usize, spread: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    check_blob_params(k_classes, dims, 1, spread)?;
    let side = center_separation(spread);
    if dims + 1 >= k_classes {
        return Ok(simplex_centers(k_classes, dims, side, rng));
    }
    let half = side * k_classes as f64;
    for _ in 0..10_000 {
        let cand: Vec<Vec<f64>> = (0..k_classes)
            .map(|_| (0..dims).map(|_| rng.random_range(-half..half)).collect())
            .collect();
        let separated = (0..k_classes).all(|i| (0..i).all(|j| dist(&cand[i], &cand[j]) >= side));
        if separated {
            return Ok(cand);
        }
    }
    Err(DataError::Invalid(format!(
        "could not place {k_classes} separated centers in {dims} dimensions"
    )))
}

/// Side of the center simplex: `4·spread`, floored at 1 so that shrinking
/// `spread` tightens the clusters without collapsing the centers.
pub fn center_separation(spread: f64) -> f64 {
    (4.0 * spread).max(1.0)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Orthonormal columns by modified Gram-Schmidt; redraws degenerate vectors.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn simplex_centers(k: usize, dims: usize, side: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    // Vertices e_i − centroid in R^k have side √2; coordinates in an
    // orthonormal basis of their (k−1)-dim span, then embed randomly.
    let inner = k - 1;
    let centered: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64).collect())
        .collect();
    let mut span: Vec<Vec<f64>> = Vec::with_capacity(inner);
    for v in centered.iter().take(inner) {
        let mut v = v.clone();
        for b in &span {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        span.push(v);
    }
    let embed = random_orthonormal(dims, inner, rng);
    let scale = side / std::f64::consts::SQRT_2;
    centered
        .iter()
        .map(|v| {
            let coords: Vec<f64> = span.iter().map(|b| b.iter().zip(v).map(|(x, y)| x * y).sum()).collect();
            (0..dims)
                .map(|r| scale * coords.iter().zip(&embed).map(|(c, col)| c * col[r]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn check_blob_params(k_classes: usize, dims: usize, per_class: usize, spread: f64) -> Result<()> {
    if k_classes < 2 {
        return Err(DataError::Invalid(format!("k_classes must be ≥ 2, got {k_classes}")));
    }
    if dims < 1 {
        return Err(DataError::Invalid("dims must be ≥ 1".into()));
    }
    if per_class < 1 {
        return Err(DataError::Invalid("per_class must be ≥ 1".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(DataError::Invalid(format!("spread must be positive, got {spread}")));
    }
    Ok(())
}

fn sample_blobs<S: Scalar>(centers: &[Vec<f64>], per_class: usize, spread: f64, rng: &mut ChaCha8Rng) -> Result<Dataset<S>> {
    let k = centers.len();
    let dims = centers[0].len();
    let mut order: Vec<usize> = (0..k * per_class).map(|i| i / per_class).collect();
    order.shuffle(rng);
    let mut data = Vec::with_capacity(order.len() * dims);
    for &c in &order {
        for &m in &centers[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(S::of(m + spread * z));
        }
    }
    Dataset::new(Tensor::new([order.len(), dims], data)?, order, k)
}

/// `k_classes·per_class` Gaussian points (std `spread`) around
/// [`blob_centers`], balanced and shuffled.
pub fn gen_blobs<S: Scalar>(k_classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset<S>> {
    check_blob_params(k_classes, dims, per_class, spread)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(k_classes, dims, spread, &mut rng)?;
    sample_blobs(&centers, per_class, spread, &mut rng)
}

/// Train and test sets drawn around the same centers.
pub fn gen_blobs_split<S: Scalar>(
    k_classes: usize,
    dims: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>)> {
    check_blob_params(k_classes, dims, train_per_class.min(test_per_class), spread)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(k_classes, dims, spread, &mut rng)?;
    let train = sample_blobs(&centers, train_per_class, spread, &mut rng)?;
    let test = sample_blobs(&centers, test_per_class, spread, &mut rng)?;
    Ok((train, test))
}

/// Seeded per-epoch shuffles over `count` samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    seed: u64,
    batch_size: usize,
    count: usize,
    epochs: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize, count: usize, epochs: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(DataError::Invalid("batch_size must be ≥ 1".into()));
        }
        if count == 0 {
            return Err(DataError::Invalid("cannot batch an empty dataset".into()));
        }
        Ok(Self {
            seed,
            batch_size,
            count,
            epochs,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// `⌈count/b⌉`.
    pub fn batches_per_epoch(&self) -> usize {
        self.count.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.batches_per_epoch() * self.epochs) as u64
    }

    /// Sample order for `epoch`; each epoch uses its own ChaCha stream.
    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        assert!(epoch < self.epochs, "epoch {epoch} out of range for a {}-epoch plan", self.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut perm: Vec<usize> = (0..self.count).collect();
        perm.shuffle(&mut rng);
        perm
    }
}

/// One mini-batch with the dataset indices it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub inputs: Tensor<S>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over the batches of one epoch.
pub struct Batches<'a, S> {
    dataset: &'a Dataset<S>,
    perm: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<S: Scalar> Iterator for Batches<'_, S> {
    type Item = Batch<S>;

    fn next(&mut self) -> Option<Batch<S>> {
        if self.pos >= self.perm.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.perm.len());
        let indices = self.perm[self.pos..end].to_vec();
        self.pos = end;
        let inputs = self.dataset.inputs.gather_rows(&indices).expect("plan indices are in range");
        let labels = indices.iter().map(|&i| self.dataset.labels[i]).collect();
        Some(Batch { inputs, labels, indices })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.perm.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl<S: Scalar> ExactSizeIterator for Batches<'_, S> {}

/// Batches of `epoch` under `plan`. Panics if the plan was built for a
/// different sample count or `epoch` is out of range.
pub fn batches<'a, S: Scalar>(dataset: &'a Dataset<S>, plan: &BatchPlan, epoch: usize) -> Batches<'a, S> {
    assert_eq!(plan.count, dataset.len(), "batch plan built for a different dataset size");
    Batches {
        dataset,
        perm: plan.permutation(epoch),
        batch_size: plan.batch_size,
        pos: 0,
    }
}
