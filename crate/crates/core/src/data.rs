//! Datasets: the CIFAR-10 binary layout and a labelled synthetic generator.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::hsv_to_rgb;
use crate::compute::Tensor;
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::{Domain, StreamKey};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parameters that fully determine a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n_per_class: 500, classes: 4, size: 32, noise_sigma: 0.05, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config_err!("synthetic data needs at least 2 classes, got {}", self.classes));
        }
        if self.size < 8 {
            return Err(config_err!("synthetic image side must be at least 8, got {}", self.size));
        }
        if self.n_per_class == 0 {
            return Err(config_err!("synthetic data needs at least one image per class"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(config_err!("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Cifar10 { files: Vec<PathBuf> },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    source: DatasetSource,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, source: DatasetSource) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 || h != w {
            return Err(dim_err!("dataset images must be [N×3×S×S], got {:?}", images.shape()));
        }
        if labels.len() != n {
            return Err(dim_err!("{} labels for {n} images", labels.len()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::CorruptRecord { index: i, msg: format!("label {l} outside [0, {class_count})") });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(config_err!("dataset pixels must lie in [0, 1]"));
        }
        Ok(Dataset { images, labels, class_count, source })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
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

    pub fn source(&self) -> &DatasetSource {
        &self.source
    }

    pub fn image(&self, i: usize) -> Tensor {
        let s = self.side();
        let plane = 3 * s * s;
        Tensor::new(vec![3, s, s], self.images.data()[i * plane..(i + 1) * plane].to_vec())
            .expect("image slice matches its shape")
    }

    /// Images at `indices` as one `[B×3×S×S]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let s = self.side();
        self.images.gather_rows(indices).reshape(vec![indices.len(), 3, s, s]).expect("batch shape")
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse concatenated CIFAR-10 records. `first_index` offsets record indices
/// in error messages.
pub fn parse_cifar10(bytes: &[u8], first_index: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            msg: format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::CorruptRecord { index: first_index + r, msg: format!("label {label} ≥ {CIFAR_CLASSES}") });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        let (p, l) = parse_cifar10(&bytes, labels.len()).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, DatasetSource::Cifar10 { files: paths.to_vec() })
}

/// Encode a 32×32, ≤10-class dataset in the CIFAR-10 binary layout.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.side() != CIFAR_SIDE || ds.class_count() > CIFAR_CLASSES {
        return Err(config_err!(
            "CIFAR-10 layout needs 32×32 images and at most 10 classes, got side {} and {} classes",
            ds.side(),
            ds.class_count()
        ));
    }
    let plane = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &l) in ds.labels().iter().enumerate() {
        out.push(l as u8);
        out.extend(ds.images().data()[i * plane..(i + 1) * plane].iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar10_bin(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_cifar10(ds)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Base RGB colour of class `c` out of `classes`.
pub fn class_color(c: usize, classes: usize) -> [f64; 3] {
    let (r, g, b) = hsv_to_rgb(c as f64 / classes as f64, 0.8, 0.7);
    [r, g, b]
}

/// Labelled synthetic images, ordered class-major. Sample `i` of class `c`
/// draws its noise from stream `(seed, c, i)`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.size;
    let root = StreamKey::new(Domain::Synthetic, spec.seed);
    let per_image = 3 * s * s;
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * per_image);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let color = class_color(c, spec.classes);
        let freq = 2.0 * std::f64::consts::PI * (1 + c) as f64 / s as f64;
        let clean: Vec<f64> = (0..per_image)
            .map(|i| {
                let (ch, y, x) = (i / (s * s), (i / s) % s, i % s);
                color[ch] + 0.2 * (freq * (x + y) as f64).sin()
            })
            .collect();
        for i in 0..spec.n_per_class {
            let mut rng = root.derive_path(&[c as u64, i as u64]).rng();
            data.extend(clean.iter().map(|&v| {
                let noise = if spec.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_sigma * z
                } else {
                    0.0
                };
                (v + noise).clamp(0.0, 1.0) as f32
            }));
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, 3, s, s], data)?;
    Dataset::new(images, labels, spec.classes, DatasetSource::Synthetic(spec.clone()))
}

/// Fisher–Yates permutation of `0..n` from `key`.
pub fn permutation(n: usize, key: StreamKey) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut key.rng());
    idx
}

/// Shuffled index batches for one epoch; the final partial batch is dropped.
pub fn batch_iter(n: usize, batch: usize, epoch_key: StreamKey) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > n {
        return Err(config_err!("batch size {batch} must lie in 1..={n}"));
    }
    let perm = permutation(n, epoch_key);
    Ok(perm.chunks_exact(batch).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_record_fixture() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[1 + 1024] = 51;
        bytes[CIFAR_RECORD] = 9;
        bytes[2 * CIFAR_RECORD - 1] = 102;
        let (px, labels) = parse_cifar10(&bytes, 0).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(px.len(), 2 * 3072);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1024], 0.2);
        assert_eq!(px[2 * 3072 - 1], 0.4);
        assert_eq!(px.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn truncated_and_bad_label() {
        match parse_cifar10(&vec![0u8; 3072], 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_cifar10(&vec![0u8; CIFAR_RECORD + 5], 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        assert!(matches!(parse_cifar10(&bytes, 4), Err(Error::CorruptRecord { index: 5, .. })));
    }

    #[test]
    fn empty_file_list() {
        let ds = load_cifar10_bin(&[]).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.class_count(), 10);
    }

    #[test]
    fn zero_noise_classes_are_constant() {
        let ds = gen_synthetic(&SyntheticSpec { n_per_class: 3, classes: 3, size: 8, noise_sigma: 0.0, seed: 1 }).unwrap();
        for c in 0..3 {
            let a = ds.image(3 * c);
            assert_eq!(a, ds.image(3 * c + 1));
            assert_eq!(a, ds.image(3 * c + 2));
        }
        assert_ne!(ds.image(0), ds.image(3));
    }

    #[test]
    fn invalid_synthetic_sizes() {
        let base = SyntheticSpec::default();
        assert!(matches!(gen_synthetic(&SyntheticSpec { classes: 1, ..base.clone() }), Err(Error::Config(_))));
        assert!(matches!(gen_synthetic(&SyntheticSpec { size: 7, ..base }), Err(Error::Config(_))));
    }

    #[test]
    fn batches_drop_the_tail() {
        let key = StreamKey::new(Domain::DataOrder, 0).derive(0);
        let perm = permutation(10, key);
        let b = batch_iter(10, 3, key).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.concat(), perm[..9].to_vec());
        assert!(matches!(batch_iter(10, 11, key), Err(Error::Config(_))));
    }
}
