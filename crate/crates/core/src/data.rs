//! Dataset ingestion and task-stream construction.
//!
//! Inputs are stored flattened as `f32` (the 4-byte unit used for memory
//! accounting) and widened to `f64` when a batch is assembled.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "ACL_DATA_DIR";

/// Images and labels from one IDX file pair.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    /// `len × rows·cols` pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.dim()..(i + 1) * self.dim()]
    }
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: RawDataset,
    pub test: RawDataset,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Length {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX3 image file: returns (count, rows, cols, pixels scaled by
/// 1/255).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an image/label IDX pair; gzip-compressed files are detected by
/// their header.
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    Ok(RawDataset {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Resolves the dataset directory: an explicit path, then `ACL_DATA_DIR`,
/// then `./data`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    let alt = stem.replace("-idx", ".idx");
    [dir.to_path_buf(), dir.join("mnist")]
        .iter()
        .flat_map(|d| {
            [
                d.join(stem),
                d.join(format!("{stem}.gz")),
                d.join(&alt),
                d.join(format!("{alt}.gz")),
            ]
        })
        .find(|p| p.is_file())
}

/// Loads the four standard MNIST files from `dir` (or `dir/mnist`).
pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let get = |stem: &str| {
        find_file(dir, stem).ok_or_else(|| {
            Error::Data(format!("{stem} not found under {}", dir.display()))
        })
    };
    Ok(Mnist {
        train: load_idx(
            &get("train-images-idx3-ubyte")?,
            &get("train-labels-idx1-ubyte")?,
        )?,
        test: load_idx(
            &get("t10k-images-idx3-ubyte")?,
            &get("t10k-labels-idx1-ubyte")?,
        )?,
    })
}

/// Flattened samples with within-task labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    /// Index of each sample in its source collection.
    pub source: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f32], y: usize, source: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
        self.source.push(source);
    }

    /// Rows `idx` as a dense `f64` matrix.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            out.extend(self.row(i).iter().map(|&v| f64::from(v)));
        }
        out
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }

    fn subsample(&self, fraction: f64) -> Samples {
        let keep = ((self.len() as f64) * fraction).floor() as usize;
        let mut out = Samples::new(self.dim);
        for i in 0..keep.min(self.len()) {
            out.push(self.row(i), self.y[i], self.source[i]);
        }
        out
    }
}

/// Train/valid/test samples for one task. Every sample carries task label
/// `task` (1-based).
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task: usize,
    pub classes: usize,
    /// `(original label, within-task label)` pairs.
    pub class_map: Vec<(usize, usize)>,
    pub train: Samples,
    pub valid: Samples,
    pub test: Samples,
}

impl TaskDataset {
    pub fn input_dim(&self) -> usize {
        self.train.dim
    }

    /// Keeps the leading `fraction` of the (already shuffled) train and valid
    /// samples; test data is untouched.
    pub fn downsample(&self, fraction: f64) -> TaskDataset {
        TaskDataset {
            train: self.train.subsample(fraction),
            valid: self.valid.subsample(fraction),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SplitMnist {
        #[serde(default = "default_pairs")]
        pairs: Vec<(u8, u8)>,
        #[serde(default = "default_valid_fraction")]
        valid_fraction: f64,
        #[serde(default = "one")]
        train_fraction: f64,
    },
    PermutedMnist {
        tasks: usize,
        #[serde(default = "default_valid_fraction")]
        valid_fraction: f64,
        #[serde(default = "one")]
        train_fraction: f64,
    },
    Synthetic {
        tasks: usize,
        classes: usize,
        input_dim: usize,
        per_class: usize,
    },
}

pub fn default_pairs() -> Vec<(u8, u8)> {
    vec![(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
}

pub fn default_valid_fraction() -> f64 {
    0.15
}

fn one() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn task_count(&self) -> usize {
        match self {
            DatasetSpec::SplitMnist { pairs, .. } => pairs.len(),
            DatasetSpec::PermutedMnist { tasks, .. } | DatasetSpec::Synthetic { tasks, .. } => {
                *tasks
            }
        }
    }

    pub fn classes_per_task(&self) -> usize {
        match self {
            DatasetSpec::SplitMnist { .. } => 2,
            DatasetSpec::PermutedMnist { .. } => 10,
            DatasetSpec::Synthetic { classes, .. } => *classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSpec::SplitMnist { .. } | DatasetSpec::PermutedMnist { .. } => 784,
            DatasetSpec::Synthetic { input_dim, .. } => *input_dim,
        }
    }

    pub fn needs_mnist(&self) -> bool {
        !matches!(self, DatasetSpec::Synthetic { .. })
    }

    /// Materializes the task stream. `mnist` must be provided for the MNIST
    /// variants.
    pub fn build(&self, mnist: Option<&Mnist>, seed: u64) -> Result<Vec<TaskDataset>> {
        let need = || mnist.ok_or_else(|| Error::Data("MNIST data not loaded".into()));
        let tasks = match self {
            DatasetSpec::SplitMnist {
                pairs,
                valid_fraction,
                train_fraction,
            } => {
                let m = need()?;
                let tasks = make_split_tasks(&m.train, &m.test, pairs, *valid_fraction, seed)?;
                maybe_downsample(tasks, *train_fraction)
            }
            DatasetSpec::PermutedMnist {
                tasks,
                valid_fraction,
                train_fraction,
            } => {
                let m = need()?;
                make_permuted_tasks(&m.train, &m.test, *tasks, *valid_fraction, *train_fraction, seed)?
            }
            DatasetSpec::Synthetic {
                tasks,
                classes,
                input_dim,
                per_class,
            } => make_synthetic_tasks(*tasks, *classes, *input_dim, *per_class, seed)?,
        };
        Ok(tasks)
    }
}

fn maybe_downsample(tasks: Vec<TaskDataset>, fraction: f64) -> Vec<TaskDataset> {
    if fraction >= 1.0 {
        tasks
    } else {
        tasks.iter().map(|t| t.downsample(fraction)).collect()
    }
}

fn check_fraction(key: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::config(key, format!("{v} is not in [0, 1)")));
    }
    Ok(())
}

/// Splits the ten digits into binary tasks. Within each task the first digit
/// of the pair is class 0. The validation set is the first
/// `floor(valid_fraction · n)` samples of a seeded shuffle.
pub fn make_split_tasks(
    train: &RawDataset,
    test: &RawDataset,
    pairs: &[(u8, u8)],
    valid_fraction: f64,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    check_fraction("dataset.valid_fraction", valid_fraction)?;
    let mut seen = [false; 256];
    for &(a, b) in pairs {
        for d in [a, b] {
            if std::mem::replace(&mut seen[d as usize], true) || a == b {
                return Err(Error::config("dataset.pairs", format!("digit {d} appears twice")));
            }
        }
    }
    let dim = train.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(pairs.len());
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let within = |label: u8| -> Option<usize> {
            if label == a {
                Some(0)
            } else if label == b {
                Some(1)
            } else {
                None
            }
        };
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| within(train.labels[i]).is_some()).collect();
        idx.shuffle(&mut rng);
        let n_valid = (idx.len() as f64 * valid_fraction).floor() as usize;
        let mut valid = Samples::new(dim);
        let mut tr = Samples::new(dim);
        for (j, &i) in idx.iter().enumerate() {
            let y = within(train.labels[i]).expect("filtered");
            let dst = if j < n_valid { &mut valid } else { &mut tr };
            dst.push(train.image(i), y, i);
        }
        let mut te = Samples::new(dim);
        for i in 0..test.len() {
            if let Some(y) = within(test.labels[i]) {
                te.push(test.image(i), y, i);
            }
        }
        tasks.push(TaskDataset {
            task: k + 1,
            classes: 2,
            class_map: vec![(a as usize, 0), (b as usize, 1)],
            train: tr,
            valid,
            test: te,
        });
    }
    Ok(tasks)
}

/// Pixel permutation of task `task` (1-based); task 1 is the identity.
pub fn task_permutation(dim: usize, task: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if task > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        perm.shuffle(&mut rng);
    }
    perm
}

fn permuted(src: &[f32], perm: &[usize]) -> Vec<f32> {
    perm.iter().map(|&p| src[p]).collect()
}

/// Ten-way tasks over the full digit set, each with its own fixed pixel
/// permutation (`out[j] = in[perm[j]]`). The train/valid partition is shared
/// by all tasks; `train_fraction < 1` keeps that leading fraction of the
/// train and valid samples.
pub fn make_permuted_tasks(
    train: &RawDataset,
    test: &RawDataset,
    tasks: usize,
    valid_fraction: f64,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    check_fraction("dataset.valid_fraction", valid_fraction)?;
    if tasks == 0 {
        return Err(Error::config("dataset.tasks", "must be at least 1"));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::config("dataset.train_fraction", "must be in (0, 1]"));
    }
    let dim = train.dim();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (idx.len() as f64 * valid_fraction).floor() as usize;
    let (valid_idx, train_idx) = idx.split_at(n_valid);
    let keep = |v: &[usize]| -> Vec<usize> {
        let n = ((v.len() as f64) * train_fraction).floor() as usize;
        v[..n].to_vec()
    };
    let (train_idx, valid_idx) = (keep(train_idx), keep(valid_idx));

    let class_map: Vec<(usize, usize)> = (0..10).map(|d| (d, d)).collect();
    let mut out = Vec::with_capacity(tasks);
    for k in 1..=tasks {
        let perm = task_permutation(dim, k, seed);
        let collect = |raw: &RawDataset, indices: &mut dyn Iterator<Item = usize>| {
            let mut s = Samples::new(dim);
            for i in indices {
                s.push(&permuted(raw.image(i), &perm), raw.labels[i] as usize, i);
            }
            s
        };
        out.push(TaskDataset {
            task: k,
            classes: 10,
            class_map: class_map.clone(),
            train: collect(train, &mut train_idx.iter().copied()),
            valid: collect(train, &mut valid_idx.iter().copied()),
            test: collect(test, &mut (0..test.len())),
        });
    }
    Ok(out)
}

/// Gaussian-cluster tasks for fast tests. Each task has `classes` clusters
/// with unit covariance whose means are random directions scaled to norm 3.
/// Train, valid and test each hold `per_class` samples per class.
pub fn make_synthetic_tasks(
    tasks: usize,
    classes: usize,
    input_dim: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    if tasks == 0 || classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::config("dataset", "synthetic counts must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut out = Vec::with_capacity(tasks);
    let mut counter = 0usize;
    for k in 1..=tasks {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..input_dim).map(|_| normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| 3.0 * x / norm).collect()
            })
            .collect();
        let mut split = |rng: &mut ChaCha8Rng| {
            let mut s = Samples::new(input_dim);
            for _ in 0..per_class {
                for (c, mean) in means.iter().enumerate() {
                    let x: Vec<f32> = mean.iter().map(|m| (m + normal(rng)) as f32).collect();
                    s.push(&x, c, counter);
                    counter += 1;
                }
            }
            s
        };
        let train = split(&mut rng);
        let valid = split(&mut rng);
        let test = split(&mut rng);
        out.push(TaskDataset {
            task: k,
            classes,
            class_map: (0..classes).map(|c| (c, c)).collect(),
            train,
            valid,
            test,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    #[test]
    fn idx_parsing_and_scaling() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, 3, 3, 255)).unwrap();
        assert_eq!((n, r, c), (2, 3, 3));
        assert!(px.iter().all(|&v| v == 1.0));

        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_images(1, 2, 2, 0);
        bad[3] = 0x01;
        match parse_idx_images(&bad) {
            Err(Error::Format(msg)) => assert!(msg.contains("0x00000801")),
            other => panic!("{other:?}"),
        }
        let short = idx_images(2, 2, 2, 0);
        assert!(matches!(
            parse_idx_images(&short[..short.len() - 1]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn gzip_files_are_accepted() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_images(1, 2, 2, 51)).unwrap();
        fs::write(&img, enc.finish().unwrap()).unwrap();
        let lab = dir.path().join("l");
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(4);
        fs::write(&lab, labels).unwrap();
        let raw = load_idx(&img, &lab).unwrap();
        assert_eq!(raw.len(), 1);
        assert_eq!(raw.image(0), &[0.2f32; 4]);
    }

    fn toy_raw(n: usize) -> RawDataset {
        RawDataset {
            rows: 2,
            cols: 2,
            pixels: (0..n * 4).map(|i| (i % 256) as f32 / 255.0).collect(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        }
    }

    #[test]
    fn split_tasks_are_disjoint_and_labelled() {
        let (train, test) = (toy_raw(200), toy_raw(50));
        let tasks = make_split_tasks(&train, &test, &default_pairs(), 0.15, 3).unwrap();
        assert_eq!(tasks.len(), 5);
        let mut all: Vec<usize> = Vec::new();
        for t in &tasks {
            assert_eq!(t.train.len() + t.valid.len(), 40);
            assert_eq!(t.valid.len(), 6);
            assert_eq!(t.test.len(), 10);
            assert!(t.train.y.iter().all(|&y| y < 2));
            all.extend(&t.train.source);
            all.extend(&t.valid.source);
        }
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        let again = make_split_tasks(&train, &test, &default_pairs(), 0.15, 3).unwrap();
        assert_eq!(again[2].valid.source, tasks[2].valid.source);
    }

    #[test]
    fn overlapping_pairs_rejected() {
        let raw = toy_raw(20);
        assert!(matches!(
            make_split_tasks(&raw, &raw, &[(0, 1), (1, 2)], 0.15, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn permutations_are_bijections_and_invertible() {
        let raw = toy_raw(30);
        let tasks = make_permuted_tasks(&raw, &raw, 3, 0.15, 1.0, 4).unwrap();
        assert_eq!(tasks[0].test.x, raw.pixels);
        for k in 1..=3 {
            let perm = task_permutation(4, k, 4);
            let mut sorted = perm.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
            let mut inverse = vec![0; 4];
            for (j, &p) in perm.iter().enumerate() {
                inverse[p] = j;
            }
            let t = &tasks[k - 1];
            for i in 0..t.test.len() {
                let restored: Vec<f32> = (0..4).map(|p| t.test.row(i)[inverse[p]]).collect();
                assert_eq!(restored, raw.image(i));
            }
        }
        let bijective = task_permutation(784, 7, 1);
        let mut s = bijective.clone();
        s.sort();
        assert_eq!(s, (0..784).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_sizes_and_determinism() {
        let a = make_synthetic_tasks(3, 4, 8, 5, 11).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].train.len(), 20);
        assert_eq!(a[0].train.class_counts(4), vec![5; 4]);
        assert_eq!(a[2].task, 3);
        let b = make_synthetic_tasks(3, 4, 8, 5, 11).unwrap();
        assert_eq!(a[1].test.x, b[1].test.x);
    }
}
