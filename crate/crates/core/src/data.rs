//! Datasets, preprocessing and batching.

use std::path::Path;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::binio::read_file;
use crate::error::{Error, Result};

/// Per-channel standardization applied after scaling pixels to [0, 1].
pub const CHANNEL_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
pub const CHANNEL_STD: [f32; 3] = [0.5, 0.5, 0.5];

/// CIFAR-100 record: coarse label, fine label, 3072 planar RGB bytes.
pub const CIFAR_RECORD_LEN: usize = 2 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 100;

/// An 8-bit RGB image stored height × width × channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}×{width}×3 image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of every example, grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// SHA-256 over class count, labels and pixels.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"edkd-dataset");
        h.update((self.class_count as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for (img, &l) in self.images.iter().zip(&self.labels) {
            h.update((l as u64).to_le_bytes());
            h.update((img.height as u32).to_le_bytes());
            h.update((img.width as u32).to_le_bytes());
            h.update(&img.data);
        }
        h.finalize().into()
    }
}

/// Parses concatenated CIFAR-100 binary records, keeping fine labels.
pub fn parse_cifar100(bytes: &[u8], path: &Path, name: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::format(
            path,
            format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD_LEN}-byte record size",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CIFAR_CLASSES {
            return Err(Error::Validation(format!(
                "{}: record {i} has fine label {fine}",
                path.display()
            )));
        }
        let planes = &rec[2..];
        let mut data = Vec::with_capacity(3 * 1024);
        for p in 0..1024 {
            data.extend_from_slice(&[planes[p], planes[1024 + p], planes[2048 + p]]);
        }
        images.push(Image {
            height: 32,
            width: 32,
            data,
        });
        labels.push(fine);
    }
    Dataset::new(name, images, labels, CIFAR_CLASSES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads `train.bin` or `test.bin` from a CIFAR-100 binary directory.
pub fn load_cifar100(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let path = dir.as_ref().join(file);
    if !path.is_file() {
        return Err(Error::format(&path, "missing CIFAR-100 file"));
    }
    let bytes = read_file(&path)?;
    parse_cifar100(&bytes, &path, &format!("cifar100-{file}"))
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Class-separable images: each class has a base hue and a stripe
/// orientation; each image gets a random stripe phase, a brightness shift and
/// per-pixel Gaussian noise. Deterministic per seed.
pub fn synthetic_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Dataset {
    const STRIPE_AMPLITUDE: f64 = 45.0;
    const NOISE_STD: f64 = 40.0;
    const BRIGHTNESS_JITTER: f64 = 30.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for class in 0..num_classes {
            let frac = class as f64 / num_classes as f64;
            let base = hue_to_rgb(frac).map(|v| 60.0 + 120.0 * v);
            let angle = std::f64::consts::PI * frac;
            let (dy, dx) = (angle.sin(), angle.cos());
            let freq = 2.0 * std::f64::consts::PI * 2.0 / image_size as f64;
            let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            let shift = (rng.random::<f64>() * 2.0 - 1.0) * BRIGHTNESS_JITTER;
            let mut data = Vec::with_capacity(image_size * image_size * 3);
            for y in 0..image_size {
                for x in 0..image_size {
                    let stripe = (freq * (x as f64 * dx + y as f64 * dy) + phase).sin() * STRIPE_AMPLITUDE;
                    for b in base {
                        let v = b + stripe + shift + noise.sample(&mut rng);
                        data.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            images.push(Image {
                height: image_size,
                width: image_size,
                data,
            });
            labels.push(class);
        }
    }
    Dataset::new(
        format!("synthetic-{num_classes}x{per_class}-{image_size}px-seed{seed}"),
        images,
        labels,
        num_classes,
    )
    .expect("labels are in range by construction")
}

fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize to `target × target` using half-pixel centers
/// (align-corners off), source coordinates clamped at the border, rounded to
/// the nearest integer. Returns a copy when the size already matches.
pub fn resize_bilinear(image: &Image, target: usize) -> Image {
    resize_bilinear_to(image, target, target)
}

pub fn resize_bilinear_to(image: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "target size must be positive");
    if image.height == height && image.width == width {
        return image.clone();
    }
    let ys: Vec<_> = (0..height).map(|y| bilinear_taps(y, image.height, height)).collect();
    let xs: Vec<_> = (0..width).map(|x| bilinear_taps(x, image.width, width)).collect();
    let mut data = Vec::with_capacity(height * width * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = image.get(y0, x0, c) as f64 * (1.0 - fx) + image.get(y0, x1, c) as f64 * fx;
                let bot = image.get(y1, x0, c) as f64 * (1.0 - fx) + image.get(y1, x1, c) as f64 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image { height, width, data }
}

/// A mini-batch of standardized images, `B × H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub images: Array4<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Standardized float tensor for the given examples, resized to `size` when
/// the stored images differ.
pub fn prepare_images(dataset: &Dataset, indices: &[usize], size: usize) -> Array4<f32> {
    let mut out = Array4::zeros((indices.len(), size, size, 3));
    for (b, &i) in indices.iter().enumerate() {
        let src = &dataset.images[i];
        let resized;
        let img = if src.height == size && src.width == size {
            src
        } else {
            resized = resize_bilinear(src, size);
            &resized
        };
        let mut dst = out.index_axis_mut(ndarray::Axis(0), b);
        for ((y, x, c), v) in dst.indexed_iter_mut() {
            *v = (img.get(y, x, c) as f32 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
    out
}

/// Example order for one epoch: a permutation keyed by `(seed, epoch)`.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Iterates over one shuffled epoch; the final short batch is kept.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    image_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let labels = indices.iter().map(|&i| self.dataset.labels[i]).collect();
        let images = prepare_images(self.dataset, &indices, self.image_size);
        Some(Batch { indices, labels, images })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Batches at the dataset's native image size.
pub fn batch_iterator(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: usize) -> BatchIter<'_> {
    let size = dataset.images.first().map_or(0, |i| i.height);
    batch_iterator_sized(dataset, batch_size, shuffle_seed, epoch, size)
}

/// Batches resized to `image_size`.
pub fn batch_iterator_sized(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    image_size: usize,
) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    BatchIter {
        dataset,
        order: epoch_order(dataset.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
        image_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_record(fine: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![3, fine];
        r.extend((0..3072).map(|i| fill.wrapping_add((i / 1024) as u8)));
        r
    }

    #[test]
    fn cifar_parses_planar_layout() {
        let mut bytes = cifar_record(7, 10);
        bytes.extend(cifar_record(99, 20));
        let ds = parse_cifar100(&bytes, Path::new("mem"), "t").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![7, 99]);
        assert_eq!(ds.class_count, 100);
        assert_eq!(ds.images[0].get(0, 0, 0), 10);
        assert_eq!(ds.images[0].get(31, 31, 1), 11);
        assert_eq!(ds.images[1].get(5, 9, 2), 22);
        assert_eq!(ds.len() * CIFAR_RECORD_LEN, bytes.len());
    }

    #[test]
    fn cifar_rejects_bad_framing_and_labels() {
        let mut bytes = cifar_record(1, 0);
        bytes.pop();
        assert!(matches!(parse_cifar100(&bytes, Path::new("m"), "t"), Err(Error::Format { .. })));
        assert!(matches!(parse_cifar100(&[], Path::new("m"), "t"), Err(Error::Format { .. })));
        let bad = cifar_record(255, 0);
        assert!(matches!(parse_cifar100(&bad, Path::new("m"), "t"), Err(Error::Validation(_))));
    }

    #[test]
    fn cifar_missing_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar100(dir.path(), Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_examples() {
        let ds = synthetic_dataset(10, 50, 16, 3);
        assert_eq!(ds.len(), 500);
        let counts = ds.class_indices().iter().map(Vec::len).collect::<Vec<_>>();
        assert!(counts.iter().all(|&c| c == 50));
        assert_eq!(ds, synthetic_dataset(10, 50, 16, 3));
        assert_ne!(ds.digest(), synthetic_dataset(10, 50, 16, 4).digest());
        let one = synthetic_dataset(4, 1, 8, 0);
        assert_eq!(one.len(), 4);
    }

    #[test]
    fn resize_identity_and_constants() {
        let ds = synthetic_dataset(2, 1, 32, 1);
        assert_eq!(resize_bilinear(&ds.images[0], 32), ds.images[0]);
        let flat = Image::filled(5, 5, [17, 200, 3]);
        for size in [1, 3, 8, 13] {
            assert_eq!(resize_bilinear(&flat, size), Image::filled(size, size, [17, 200, 3]));
        }
    }

    #[test]
    fn resize_two_by_two_matches_hand_weights() {
        // rows 0 and 255; output rows sample source y at -0.25→0, 0.25, 0.75, 1.25→1
        let img = Image::new(2, 2, [[0u8; 3], [0; 3], [255; 3], [255; 3]].concat()).unwrap();
        let out = resize_bilinear(&img, 4);
        let expected_rows = [0u8, 64, 191, 255];
        for (y, &want) in expected_rows.iter().enumerate() {
            for x in 0..4 {
                assert_eq!(out.get(y, x, 0), want, "({y},{x})");
            }
        }
    }

    #[test]
    fn batches_cover_epoch_once() {
        let ds = synthetic_dataset(4, 25, 8, 0);
        let batches: Vec<_> = batch_iterator(&ds, 64, 1, 0).collect();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![64, 36]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.labels[k], ds.labels[i]);
            }
        }
    }

    #[test]
    fn shuffle_is_keyed_by_seed_and_epoch() {
        assert_eq!(epoch_order(100, 5, 2), epoch_order(100, 5, 2));
        assert_ne!(epoch_order(100, 5, 2), epoch_order(100, 5, 3));
        let mut a = epoch_order(100, 5, 3);
        a.sort_unstable();
        assert_eq!(a, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn standardization_maps_to_unit_range() {
        let ds = Dataset::new("t", vec![Image::filled(2, 2, [0, 255, 128])], vec![0], 1).unwrap();
        let t = prepare_images(&ds, &[0], 2);
        assert_eq!(t[[0, 1, 1, 0]], -1.0);
        assert_eq!(t[[0, 1, 1, 1]], 1.0);
        assert_eq!(prepare_images(&ds, &[0], 4).dim(), (1, 4, 4, 3));
    }
}
