//! Datasets: synthetic class-conditional blobs and the CIFAR-10 binary
//! format.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One split of labelled images.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the samples at `indices` into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let feat = self.images.features_per_sample();
        let (c, h, w) = self.images.feature_shape();
        let mut data = Vec::with_capacity(indices.len() * feat);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(indices.len(), c, h, w, data), labels)
    }
}

/// A train/test pair. The two splits are disjoint by construction.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: SplitData,
    pub test: SplitData,
    pub num_classes: usize,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: file length {len} is not a multiple of the {record} byte record size")]
    RecordLength { path: String, len: u64, record: u64 },
    #[error("no CIFAR-10 batch files found in {0}")]
    MissingFiles(String),
}

/// Deterministic class-conditional Gaussian blobs.
///
/// Each class gets a fixed prototype image with entries from N(0,1); samples
/// add N(0, 0.25^2) pixel noise. In a 3*size*size dimensional space the
/// expected inter-class centroid distance is sqrt(2d) (about 19.6 for
/// size 8) against a within-class spread of 0.25*sqrt(d), so a
/// nearest-centroid classifier separates the classes with margin to spare.
/// The first 80% of each class goes to the train split, the rest to test.
pub fn make_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Dataset {
    assert!(num_classes >= 1 && samples_per_class >= 1 && image_size >= 1);
    const NOISE: f64 = 0.25;
    let mut rng = substream(seed, "synthetic");
    let channels = 3usize;
    let feat = channels * image_size * image_size;
    let prototypes: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| (0..feat).map(|_| sample_normal(&mut rng) as f32).collect())
        .collect();

    let train_per_class = ((samples_per_class * 4) / 5).max(1).min(samples_per_class);
    let mut train_data = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_data = Vec::new();
    let mut test_labels = Vec::new();
    for class in 0..num_classes {
        for s in 0..samples_per_class {
            let pixels: Vec<f32> = prototypes[class]
                .iter()
                .map(|&p| p + (NOISE * sample_normal(&mut rng)) as f32)
                .collect();
            if s < train_per_class {
                train_data.extend_from_slice(&pixels);
                train_labels.push(class);
            } else {
                test_data.extend_from_slice(&pixels);
                test_labels.push(class);
            }
        }
    }
    let n_train = train_labels.len();
    let n_test = test_labels.len();
    Dataset {
        train: SplitData {
            images: Tensor::from_vec(n_train, channels, image_size, image_size, train_data),
            labels: train_labels,
            split: Split::Train,
        },
        test: SplitData {
            images: Tensor::from_vec(n_test.max(0), channels, image_size, image_size, test_data),
            labels: test_labels,
            split: Split::Test,
        },
        num_classes,
    }
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const CIFAR_RECORD: u64 = 3073;
const CIFAR_DIM: usize = 32;

/// Loads CIFAR-10 from its binary batch format: records of one label byte
/// followed by 3072 channel-planar pixel bytes. With `normalize` on, pixels
/// are standardized per channel with the usual CIFAR statistics; off, they
/// stay in [0,1].
pub fn load_cifar10(dir: impl AsRef<Path>, normalize: bool) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let train_files: Vec<_> =
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect();
    let test_file = dir.join("test_batch.bin");
    if train_files.is_empty() && !test_file.exists() {
        return Err(DataError::MissingFiles(dir.display().to_string()));
    }

    let mut train = (Vec::new(), Vec::new());
    for f in &train_files {
        read_cifar_file(f, normalize, &mut train.0, &mut train.1)?;
    }
    let mut test = (Vec::new(), Vec::new());
    if test_file.exists() {
        read_cifar_file(&test_file, normalize, &mut test.0, &mut test.1)?;
    }
    let n_train = train.1.len();
    let n_test = test.1.len();
    Ok(Dataset {
        train: SplitData {
            images: Tensor::from_vec(n_train, 3, CIFAR_DIM, CIFAR_DIM, train.0),
            labels: train.1,
            split: Split::Train,
        },
        test: SplitData {
            images: Tensor::from_vec(n_test, 3, CIFAR_DIM, CIFAR_DIM, test.0),
            labels: test.1,
            split: Split::Test,
        },
        num_classes: 10,
    })
}

fn read_cifar_file(
    path: &Path,
    normalize: bool,
    data: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
    const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
    let bytes = std::fs::read(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    if bytes.len() as u64 % CIFAR_RECORD != 0 {
        return Err(DataError::RecordLength {
            path: path.display().to_string(),
            len: bytes.len() as u64,
            record: CIFAR_RECORD,
        });
    }
    for record in bytes.chunks_exact(CIFAR_RECORD as usize) {
        labels.push(record[0] as usize);
        for (c, plane) in record[1..].chunks_exact(CIFAR_DIM * CIFAR_DIM).enumerate() {
            for &b in plane {
                let v = b as f32 / 255.0;
                data.push(if normalize { (v - MEAN[c]) / STD[c] } else { v });
            }
        }
    }
    Ok(())
}

/// Accuracy of classifying each test sample by its nearest train-split class
/// centroid. Serves as the separability oracle for synthetic data.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let feat = data.train.images.features_per_sample();
    let mut centroids = vec![vec![0.0f64; feat]; data.num_classes];
    let mut counts = vec![0usize; data.num_classes];
    for i in 0..data.train.len() {
        let class = data.train.labels[i];
        counts[class] += 1;
        for (acc, &v) in centroids[class].iter_mut().zip(data.train.images.sample(i)) {
            *acc += v as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        if *n > 0 {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
    }
    let mut correct = 0;
    for i in 0..data.test.len() {
        let sample = data.test.images.sample(i);
        let mut best = (f64::INFINITY, 0);
        for (class, centroid) in centroids.iter().enumerate() {
            let d: f64 =
                centroid.iter().zip(sample).map(|(&c, &x)| (x as f64 - c).powi(2)).sum();
            if d < best.0 {
                best = (d, class);
            }
        }
        if best.1 == data.test.labels[i] {
            correct += 1;
        }
    }
    100.0 * correct as f64 / data.test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(4, 100, 8, 1);
        let b = make_synthetic(4, 100, 8, 1);
        assert_eq!(a.train.images.data, b.train.images.data);
        assert_eq!(a.test.labels, b.test.labels);
        assert_eq!(a.train.len(), 320);
        assert_eq!(a.test.len(), 80);
    }

    #[test]
    fn synthetic_labels_cover_all_classes() {
        let d = make_synthetic(5, 10, 6, 2);
        for class in 0..5 {
            assert!(d.train.labels.contains(&class));
            assert!(d.test.labels.contains(&class));
        }
    }

    #[test]
    fn nearest_centroid_oracle_separates_classes() {
        let d = make_synthetic(4, 100, 8, 3);
        assert!(nearest_centroid_accuracy(&d) >= 99.0);
    }

    #[test]
    fn cifar_two_record_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = vec![7u8];
        record.extend(std::iter::repeat(128u8).take(3072));
        let mut second = vec![2u8];
        second.extend((0..3072).map(|i| (i % 256) as u8));
        let mut bytes = record.clone();
        bytes.extend_from_slice(&second);
        std::fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let d = load_cifar10(dir.path(), false).unwrap();
        assert_eq!(d.train.len(), 2);
        assert_eq!(d.train.labels, vec![7, 2]);
        assert_eq!(d.test.len(), 0);
    }

    #[test]
    fn cifar_bad_length_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 3072]).unwrap();
        match load_cifar10(dir.path(), false) {
            Err(DataError::RecordLength { .. }) => {}
            other => panic!("expected RecordLength, got {other:?}"),
        }
    }

    #[test]
    fn cifar_pixels_land_in_unit_interval_without_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![1u8];
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
        std::fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let d = load_cifar10(dir.path(), false).unwrap();
        assert!(d.train.images.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.train.images.data[1], 1.0 / 255.0);
    }

    #[test]
    fn missing_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path(), false), Err(DataError::MissingFiles(_))));
    }
}
