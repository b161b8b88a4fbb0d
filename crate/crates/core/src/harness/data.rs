//! Synthetic tasks, IDX ingestion and train/val/test splitting.

use std::fs;
use std::path::{Path, PathBuf};

use crate::diffcore::rng::{streams, RngStream};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dims("dataset rows/labels", x.shape(), &[y.len()]));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Index {
                context: "dataset label",
                index: bad,
                bound: num_classes,
            });
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gaussians,
    Spirals,
    Idx,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(Self::Gaussians),
            "spirals" => Ok(Self::Spirals),
            "idx" | "idx-images" => Ok(Self::Idx),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Gaussians only; spirals are always 2-D.
    pub input_dim: usize,
    pub noise: f64,
    /// Distance between neighbouring Gaussian centres.
    pub spacing: f64,
    /// Number of half-turns each spiral arm makes.
    pub spiral_turns: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// train / val / test.
    pub fractions: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spirals,
            classes: 3,
            samples_per_class: 300,
            input_dim: 2,
            noise: 0.1,
            spacing: 4.0,
            spiral_turns: 2.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            fractions: [0.81, 0.09, 0.10],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let s: f64 = self.fractions.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::Config(format!("split fractions {:?} must be >= 0 and sum to 1", self.fractions)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        if self.kind == DatasetKind::Gaussians && self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        Ok(())
    }

    /// Input dimension of the generated samples.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Spirals => 2,
            _ => self.input_dim,
        }
    }
}

/// Generates a Gaussian-cluster or spiral task and splits it.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    if spec.samples_per_class == 0 {
        return Err(Error::Input("samples_per_class is 0".into()));
    }
    let mut rng = RngStream::new(seed, streams::DATA);
    let k = spec.classes;
    let n = k * spec.samples_per_class;
    let dim = spec.feature_dim();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        DatasetKind::Gaussians => {
            let centres = gaussian_centres(k, dim, spec.spacing);
            for (c, centre) in centres.iter().enumerate() {
                for _ in 0..spec.samples_per_class {
                    data.extend(centre.iter().map(|m| m + spec.noise * rng.normal()));
                    labels.push(c);
                }
            }
        }
        DatasetKind::Spirals => {
            let m = spec.samples_per_class;
            for c in 0..k {
                for i in 0..m {
                    let t = (i as f64 + 0.5) / m as f64;
                    let r = 0.05 + 0.95 * t;
                    let angle = std::f64::consts::TAU * c as f64 / k as f64
                        + std::f64::consts::PI * spec.spiral_turns * t
                        + spec.noise * rng.normal();
                    data.push(r * angle.cos());
                    data.push(r * angle.sin());
                    labels.push(c);
                }
            }
        }
        DatasetKind::Idx => {
            return Err(Error::Config("idx datasets are loaded with load_idx".into()));
        }
    }
    let all = Dataset::new(Tensor::matrix(n, dim, data)?, labels, k)?;
    split(&all, spec.fractions, &mut rng)
}

/// Centres on a regular polygon with neighbour distance `spacing`
/// (on a line when `dim == 1`).
fn gaussian_centres(k: usize, dim: usize, spacing: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut centre = vec![0.0; dim];
            if dim == 1 || k == 2 {
                centre[0] = spacing * (c as f64 - (k as f64 - 1.0) / 2.0);
            } else {
                let radius = spacing / (2.0 * (std::f64::consts::PI / k as f64).sin());
                let a = std::f64::consts::TAU * c as f64 / k as f64;
                centre[0] = radius * a.cos();
                centre[1] = radius * a.sin();
            }
            centre
        })
        .collect()
}

/// Shuffles and cuts a dataset into disjoint, exhaustive train/val/test parts.
pub fn split(all: &Dataset, fractions: [f64; 3], rng: &mut RngStream) -> Result<Splits> {
    let n = all.len();
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    Ok(Splits {
        train: all.subset(&idx[..n_train]),
        val: all.subset(&idx[n_train..n_train + n_val]),
        test: all.subset(&idx[n_train + n_val..]),
    })
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels in [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::Format {
            offset: 16,
            message: format!("expected {want} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, rows, cols, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            offset: 8,
            message: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label IDX pair as a flattened dataset.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    if y.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {} labels", y.len()),
        });
    }
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::matrix(n, rows * cols, pixels)?, y, classes)
}

/// Loads IDX files. With separate test files, 10% of the training file is
/// carved out for validation; otherwise the configured fractions are used.
pub fn load_idx(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    let missing = || Error::Config("idx dataset needs train_images and train_labels".into());
    let train = load_idx_pair(
        spec.train_images.as_deref().ok_or_else(missing)?,
        spec.train_labels.as_deref().ok_or_else(missing)?,
    )?;
    let mut rng = RngStream::new(seed, streams::DATA);
    match (&spec.test_images, &spec.test_labels) {
        (Some(ti), Some(tl)) => {
            let mut test = load_idx_pair(ti, tl)?;
            let parts = split(&train, [0.9, 0.1, 0.0], &mut rng)?;
            let classes = train.num_classes.max(test.num_classes);
            test.num_classes = classes;
            let mut out = Splits {
                train: parts.train,
                val: parts.val,
                test,
            };
            out.train.num_classes = classes;
            out.val.num_classes = classes;
            Ok(out)
        }
        _ => split(&train, spec.fractions, &mut rng),
    }
}

/// Builds the splits described by a spec.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    match spec.kind {
        DatasetKind::Idx => load_idx(spec, seed),
        _ => generate_synthetic(spec, seed),
    }
}
