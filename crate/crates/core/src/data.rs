//! Dataset ingestion, seeded splitting and a synthetic dataset for tests.
//!
//! Images are NHWC `f32` tensors scaled to `[0, 1]`; no further normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::ImageDims;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("split sizes: {0}")]
    Size(String),
}

fn format_err(field: &'static str, detail: impl Into<String>) -> DataError {
    DataError::Format {
        field,
        detail: detail.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    images: Tensor,
    labels: Vec<usize>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        let [n, ..] = images
            .dims4("split")
            .map_err(|e| format_err("images", e.to_string()))?;
        if n != labels.len() {
            return Err(format_err(
                "labels",
                format!("{} labels for {n} images", labels.len()),
            ));
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        let s = self.images.shape();
        ImageDims {
            height: s[1],
            width: s[2],
            channels: s[3],
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            images: self.images.gather_outer(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check_labels(&self, num_classes: usize) -> Result<(), DataError> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(format_err(
                "labels",
                format!("label {l} outside [0, {num_classes})"),
            )),
            None => Ok(()),
        }
    }
}

/// Train, validation and test splits sharing image dimensions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        train: Split,
        val: Split,
        test: Split,
    ) -> Result<Self, DataError> {
        let dims = train.dims();
        for (field, s) in [("val", &val), ("test", &test)] {
            if s.dims() != dims {
                return Err(format_err(field, format!("dims {:?} differ from train {dims:?}", s.dims())));
            }
        }
        for s in [&train, &val, &test] {
            s.check_labels(num_classes)?;
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            train,
            val,
            test,
        })
    }

    pub fn dims(&self) -> ImageDims {
        self.train.dims()
    }
}

fn be_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(field, "truncated header"))
}

/// Decodes an IDX image file (magic 0x803, dims `[n, rows, cols]`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    let magic = be_u32(bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err("image magic", format!("{magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "image rows")? as usize;
    let cols = be_u32(bytes, 12, "image cols")? as usize;
    let pixels = &bytes[16..];
    let want = n * rows * cols;
    if pixels.len() != want {
        return Err(format_err(
            "image data",
            format!("{} pixel bytes, header implies {want}", pixels.len()),
        ));
    }
    Tensor::new(
        vec![n, rows, cols, 1],
        pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
    )
    .map_err(|e| format_err("image data", e.to_string()))
}

/// Decodes an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err("label magic", format!("{magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let labels = &bytes[8..];
    if labels.len() != n {
        return Err(format_err(
            "label data",
            format!("{} label bytes, header implies {n}", labels.len()),
        ));
    }
    Ok(labels.iter().map(|&l| usize::from(l)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Split, DataError> {
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(format_err(
            "label count",
            format!("{} labels for {} images", labels.len(), images.shape()[0]),
        ));
    }
    Split::new(images, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            Self::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
            ),
            Self::Cifar100 => (vec!["train.bin"], "test.bin"),
        }
    }
}

/// Decodes CIFAR binary records: label byte(s) then channel-planar 32x32 RGB.
/// CIFAR-100 keeps the fine label.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Split, DataError> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(format_err(
            "record size",
            format!("{} bytes is not a multiple of {rec}", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0f32; n * CIFAR_PIXELS];
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = usize::from(record[variant.label_bytes() - 1]);
        if label >= variant.num_classes() {
            return Err(format_err("label", format!("record {i} has label {label}")));
        }
        labels.push(label);
        let pixels = &record[variant.label_bytes()..];
        let out = &mut data[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for c in 0..3 {
            for p in 0..plane {
                out[p * 3 + c] = f32::from(pixels[c * plane + p]) / 255.0;
            }
        }
    }
    let images = Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], data)
        .map_err(|e| format_err("image data", e.to_string()))?;
    Split::new(images, labels)
}

fn concat(parts: Vec<Split>) -> Result<Split, DataError> {
    let n: usize = parts.iter().map(Split::len).sum();
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend_from_slice(&p.labels);
        data.extend(p.images.into_data());
    }
    let images = Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], data)
        .map_err(|e| format_err("image data", e.to_string()))?;
    Split::new(images, labels)
}

/// A training pool plus, when the source ships one, its standard test set.
#[derive(Clone, Debug)]
pub struct Pool {
    pub train: Split,
    pub test: Option<Split>,
    pub num_classes: usize,
}

pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<Pool, DataError> {
    let (train_files, test_file) = variant.files();
    let parts = train_files
        .iter()
        .map(|f| parse_cifar(&read(&dir.join(f))?, variant))
        .collect::<Result<Vec<_>, _>>()?;
    let test_path = dir.join(test_file);
    let test = if test_path.exists() {
        Some(parse_cifar(&read(&test_path)?, variant)?)
    } else {
        None
    };
    Ok(Pool {
        train: concat(parts)?,
        test,
        num_classes: variant.num_classes(),
    })
}

/// Loads the standard MNIST-style file quartet from `dir` (uncompressed).
pub fn load_idx_dir(dir: &Path, num_classes: usize) -> Result<Pool, DataError> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test_images = dir.join("t10k-images-idx3-ubyte");
    let test = if test_images.exists() {
        Some(load_idx(&test_images, &dir.join("t10k-labels-idx1-ubyte"))?)
    } else {
        None
    };
    Ok(Pool {
        train,
        test,
        num_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    /// Zero with a standard test set means "use all of it".
    pub test: usize,
}

/// Seeded split of a pool.
///
/// The pool is permuted once; train is the front of the permutation and
/// validation the back. The test split is the pool's standard test set when
/// present (a seeded subset if `sizes.test` is smaller), otherwise it is
/// carved from the permutation right after train.
pub fn split(pool: &Pool, sizes: SplitSizes, seed: u64, name: &str) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pool.train.len();
    let carved_test = if pool.test.is_some() { 0 } else { sizes.test };
    let need = sizes.train + sizes.val + carved_test;
    if need > n {
        return Err(DataError::Size(format!("need {need} pool examples, have {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let train = pool.train.subset(&perm[..sizes.train]);
    let val = pool.train.subset(&perm[n - sizes.val..]);
    let test = match &pool.test {
        Some(t) if sizes.test == 0 || sizes.test == t.len() => t.clone(),
        Some(t) => {
            if sizes.test > t.len() {
                return Err(DataError::Size(format!(
                    "need {} test examples, standard test set has {}",
                    sizes.test,
                    t.len()
                )));
            }
            let mut tp: Vec<usize> = (0..t.len()).collect();
            tp.shuffle(&mut rng);
            t.subset(&tp[..sizes.test])
        }
        None => pool.train.subset(&perm[sizes.train..sizes.train + sizes.test]),
    };
    Dataset::new(name, pool.num_classes, train, val, test)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_per_class: usize,
    /// Noise amplitude relative to the gap between class intensities.
    pub difficulty: f64,
}

fn synth_split(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Split {
    let per_image = spec.height * spec.width * spec.channels;
    let n = spec.num_classes * spec.n_per_class;
    let gap = 1.0 / spec.num_classes as f64;
    let mut data = Vec::with_capacity(n * per_image);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        let level = (class as f64 + 0.5) * gap;
        labels.push(class);
        for _ in 0..per_image {
            let noise = if spec.difficulty > 0.0 {
                rng.random_range(-0.5..0.5) * spec.difficulty * gap
            } else {
                0.0
            };
            data.push((level + noise).clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor::new(vec![n, spec.height, spec.width, spec.channels], data)
        .expect("shape matches data");
    Split::new(images, labels).expect("one label per image")
}

/// Class-conditional constant-intensity images plus uniform noise scaled by
/// `difficulty`. Each split holds exactly `n_per_class` examples per class.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synth_split(spec, &mut rng);
    let val = synth_split(spec, &mut rng);
    let test = synth_split(spec, &mut rng);
    Dataset::new("synthetic", spec.num_classes, train, val, test).expect("consistent by construction")
}
