//! Datasets, forget/retain splits and the `LTDS` dataset file format.
//!
//! Images live in normalized pixel space (`[n×C×S×S]`, roughly zero-mean) and
//! are never re-normalized at runtime. Every random choice is driven by an
//! explicit `u64` seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binfmt::{byte_sum, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"LTDS";
pub const DATASET_VERSION: u32 = 1;

/// Images with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::dim(
                "dataset",
                format!("images must be [n×C×S×S], got {shape:?}"),
            ));
        }
        if shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::dim(
                "dataset",
                format!("{} images with {} labels", shape[0], labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Label {
                index,
                label,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Pixel values of sample `i`.
    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Stacks the given samples into a batch tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::from_parts(shape, data), labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let (images, labels) = self.gather(indices)?;
        LabeledDataset::new(images, labels, self.class_count)
    }

    /// Same samples with `labels` substituted.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(self.images.clone(), labels, self.class_count)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(28 + self.images.numel() * 4 + self.len() * 2);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [s[0], self.class_count, s[2], s[1]] {
            let v = u32::try_from(v).map_err(|_| Error::Contract("dataset too large".into()))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        let start = out.len();
        for &p in self.images.data() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        for &l in &self.labels {
            let l = u16::try_from(l).map_err(|_| Error::Contract("label exceeds u16".into()))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
        let checksum = byte_sum(&out[start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<LabeledDataset> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION, "dataset")?;
        let n = r.u32("sample count")? as usize;
        let classes = r.u32("class count")? as usize;
        let size = r.u32("image size")? as usize;
        let channels = r.u32("channel count")? as usize;
        let pixels = [n, channels, size, size]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|p| p.checked_mul(4).is_some_and(|b| b <= r.remaining()));
        let Some(pixels) = pixels else {
            return r.fail(format!("{n}×{channels}×{size}×{size} pixels exceed the file"));
        };
        let payload_start = r.offset() as usize;
        let raw = r.take(pixels * 4, "pixels")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let labels_at = r.offset();
        let raw_labels = r.take(n * 2, "labels")?;
        let labels: Vec<usize> = raw_labels
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let computed = byte_sum(&bytes[payload_start..r.offset() as usize]);
        let checksum_at = r.offset();
        let stored = r.u64("checksum")?;
        if stored != computed {
            return Err(Error::Format {
                offset: checksum_at,
                reason: format!("checksum mismatch: stored {stored}, computed {computed}"),
            });
        }
        if r.remaining() != 0 {
            return r.fail(format!("{} trailing bytes after checksum", r.remaining()));
        }
        let images = Tensor::new(vec![n, channels, size, size], data).map_err(|_| Error::Format {
            offset: payload_start as u64,
            reason: "pixels hold non-finite values".into(),
        })?;
        LabeledDataset::new(images, labels, classes).map_err(|e| Error::Format {
            offset: labels_at,
            reason: e.to_string(),
        })
    }
}

pub fn save_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    std::fs::write(path, dataset.encode()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::decode(&std::fs::read(path)?)
}

/// Partition of the training indices into forget and retain sets, plus the
/// held-out test set.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    forget: Vec<usize>,
    retain: Vec<usize>,
}

impl DataSplit {
    /// Checks that `forget` and `retain` are disjoint and cover every training
    /// index exactly once.
    pub fn new(train: LabeledDataset, test: LabeledDataset, mut forget: Vec<usize>, mut retain: Vec<usize>) -> Result<Self> {
        forget.sort_unstable();
        retain.sort_unstable();
        let mut seen = vec![0u8; train.len()];
        for &i in forget.iter().chain(&retain) {
            if i >= train.len() {
                return Err(Error::Index {
                    index: i,
                    bound: train.len(),
                });
            }
            seen[i] = seen[i].saturating_add(1);
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Config(format!(
                "forget/retain is not a partition: training index {i} appears {} times",
                seen[i]
            )));
        }
        if test.class_count() != train.class_count() {
            return Err(Error::Config("train and test class counts differ".into()));
        }
        Ok(DataSplit {
            train,
            test,
            forget,
            retain,
        })
    }

    pub fn random_forget(train: LabeledDataset, test: LabeledDataset, ratio: f64, seed: u64) -> Result<Self> {
        let (forget, retain) = split_random_forget(train.len(), ratio, seed)?;
        DataSplit::new(train, test, forget, retain)
    }

    pub fn forget(&self) -> &[usize] {
        &self.forget
    }

    pub fn retain(&self) -> &[usize] {
        &self.retain
    }

    pub fn forget_set(&self) -> Result<LabeledDataset> {
        self.train.subset(&self.forget)
    }

    pub fn retain_set(&self) -> Result<LabeledDataset> {
        self.train.subset(&self.retain)
    }
}

/// Draws `floor(ratio·n)` forget indices uniformly without replacement; the
/// rest are retained. Both lists are sorted ascending.
pub fn split_random_forget(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("forget ratio {ratio} must lie in (0, 1)")));
    }
    let k = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut forget = order[..k].to_vec();
    let mut retain = order[k..].to_vec();
    forget.sort_unstable();
    retain.sort_unstable();
    Ok((forget, retain))
}

/// Parameters of the synthetic dataset.
///
/// Each class is an oriented sinusoidal grating (class-level structure shared
/// by every sample of the class). Each sample adds a few small high-contrast
/// square marks at random positions and per-pixel Gaussian noise, which are
/// the sample-specific details a model can memorize.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub marks: usize,
    pub mark_size: usize,
    pub mark_amplitude: f64,
    pub pattern_amplitude: f64,
    /// Grating cycles per image along each lattice step of the class
    /// direction. With the default 8 cycles over 32 pixels the pattern repeats
    /// every 4 pixels.
    pub frequency: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            classes: 3,
            per_class: 200,
            image_size: 32,
            channels: 1,
            marks: 3,
            mark_size: 4,
            mark_amplitude: 2.5,
            pattern_amplitude: 0.15,
            frequency: 8.0,
            noise_std: 0.8,
            seed: 0,
        }
    }
}

/// Integer wave vector of a class: eight lattice directions, then the same
/// directions at double frequency and so on. Integer components keep the
/// grating periodic over the image.
fn grating_direction(class: usize) -> (f64, f64) {
    const DIRS: [(f64, f64); 8] = [
        (1.0, 0.0),
        (0.0, 1.0),
        (1.0, 1.0),
        (1.0, -1.0),
        (2.0, 1.0),
        (1.0, 2.0),
        (2.0, -1.0),
        (1.0, -2.0),
    ];
    let (dx, dy) = DIRS[class % DIRS.len()];
    let scale = (1 + class / DIRS.len()) as f64;
    (dx * scale, dy * scale)
}

pub fn generate_toy_dataset(spec: &ToySpec) -> Result<LabeledDataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::Config(format!("toy dataset spec has an empty dimension: {spec:?}")));
    }
    if spec.mark_size > spec.image_size {
        return Err(Error::Config("mark size exceeds image size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let (dx, dy) = grating_direction(class);
        let phase: f64 = rng.random_range(-0.4..0.4);
        let mut img = vec![0.0; spec.channels * s * s];
        for c in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * dx + y as f64 * dy) / s as f64;
                    let g = spec.pattern_amplitude * (2.0 * PI * spec.frequency * u + phase).sin();
                    let noise: f64 = rng.sample(StandardNormal);
                    img[(c * s + y) * s + x] = g + spec.noise_std * noise;
                }
            }
        }
        for _ in 0..spec.marks {
            let top = rng.random_range(0..=s - spec.mark_size);
            let left = rng.random_range(0..=s - spec.mark_size);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for c in 0..spec.channels {
                for y in top..top + spec.mark_size {
                    for x in left..left + spec.mark_size {
                        img[(c * s + y) * s + x] = sign * spec.mark_amplitude;
                    }
                }
            }
        }
        // keep values exactly representable in the f32 file format
        data.extend(img.into_iter().map(|v| f64::from(v as f32)));
        labels.push(class);
    }
    let images = Tensor::new(vec![n, spec.channels, s, s], data)?;
    LabeledDataset::new(images, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        generate_toy_dataset(&ToySpec {
            per_class: 4,
            image_size: 8,
            mark_size: 2,
            ..ToySpec::default()
        })
        .unwrap()
    }

    #[test]
    fn split_sizes_follow_floor() {
        let (f, r) = split_random_forget(100, 0.10, 3).unwrap();
        assert_eq!((f.len(), r.len()), (10, 90));
        let (f, _) = split_random_forget(7, 0.5, 3).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(split_random_forget(100, 0.10, 3).unwrap().0, f_of(100, 0.10, 3));
    }

    fn f_of(n: usize, r: f64, s: u64) -> Vec<usize> {
        split_random_forget(n, r, s).unwrap().0
    }

    #[test]
    fn split_ratio_must_be_open_interval() {
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(split_random_forget(10, bad, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn split_rejects_overlap() {
        let d = tiny();
        let err = DataSplit::new(d.clone(), d.clone(), vec![0, 1], (1..d.len()).collect());
        assert!(matches!(err, Err(Error::Config(_))));
        let missing = DataSplit::new(d.clone(), d.clone(), vec![0], (2..d.len()).collect());
        assert!(matches!(missing, Err(Error::Config(_))));
    }

    #[test]
    fn toy_dataset_is_deterministic_and_samples_differ() {
        let a = tiny();
        assert_eq!(a, tiny());
        assert_eq!(a.labels()[0], a.labels()[3]);
        assert_ne!(a.image(0), a.image(3));
    }

    #[test]
    fn corrupted_dataset_checksum_is_rejected() {
        let mut bytes = tiny().encode().unwrap();
        bytes[30] ^= 1;
        let at = bytes.len() as u64 - 8;
        match LabeledDataset::decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_version_bump_is_rejected() {
        let mut bytes = tiny().encode().unwrap();
        bytes[4] = 9;
        match LabeledDataset::decode(&bytes) {
            Err(Error::Format { offset: 4, reason }) => assert!(reason.contains("version 9")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_dataset_names_offset() {
        let bytes = tiny().encode().unwrap();
        assert!(matches!(LabeledDataset::decode(&bytes[..20]), Err(Error::Format { offset: 20, .. })));
    }
}
