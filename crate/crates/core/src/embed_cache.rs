//! Class-averaged teacher embedding table and its `.edkc` file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EDKC"      magic, 4 bytes
//! u16         format version (1)
//! u32         N_c, number of classes
//! u32         D_t, teacher embedding dim
//! u32         samples per class
//! u64         sampling seed
//! [u8; 32]    teacher digest
//! [u8; 32]    dataset digest
//! N_c·D_t     f32 values, row-major
//! ```

use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_file_atomic, Reader};
use crate::data::{prepare_images, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::real::Real;

pub const CACHE_MAGIC: &[u8; 4] = b"EDKC";
pub const CACHE_VERSION: u16 = 1;
pub const CACHE_HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 4 + 8 + 32 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    /// `N_c × D_t` mean teacher CLS embedding per class.
    pub table: Array2<f32>,
    pub samples_per_class: u32,
    pub teacher_digest: [u8; 32],
    pub dataset_digest: [u8; 32],
    pub seed: u64,
}

/// Digests a loaded cache must match; `None` skips that check.
#[derive(Debug, Clone, Copy, Default)]
pub struct CacheExpectation {
    pub teacher_digest: Option<[u8; 32]>,
    pub dataset_digest: Option<[u8; 32]>,
}

/// Up to `n` distinct example indices per class, drawn uniformly without
/// replacement (the whole class when it has fewer than `n`), sorted.
/// Each class uses its own ChaCha stream so the draw for one class does not
/// depend on any other.
pub fn sample_per_class(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    dataset
        .class_indices()
        .into_iter()
        .enumerate()
        .map(|(class, members)| {
            if members.is_empty() {
                return Err(Error::Data(format!("class {class} has no examples")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(class as u64);
            let take = n.min(members.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), take)
                .into_iter()
                .map(|k| members[k])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect()
}

/// Averages teacher CLS embeddings per class, using the teacher's own
/// [`ModelWeights::digest`] as provenance.
pub fn build_cache<T: Real>(teacher: &ModelWeights<T>, dataset: &Dataset, n: usize, seed: u64) -> Result<EmbeddingCache> {
    build_cache_with(teacher, teacher.digest(), dataset, n, seed, 32)
}

/// Like [`build_cache`] with an explicit teacher digest and forward batch size.
///
/// The teacher runs inference-only on images resized to its own input size.
/// Sums accumulate in `f64` in index order, so the table does not depend on
/// `batch_size` beyond what the forward pass itself contributes.
pub fn build_cache_with<T: Real>(
    teacher: &ModelWeights<T>,
    teacher_digest: [u8; 32],
    dataset: &Dataset,
    n: usize,
    seed: u64,
    batch_size: usize,
) -> Result<EmbeddingCache> {
    if teacher.config.num_classes != dataset.class_count {
        return Err(Error::Shape(format!(
            "teacher has {} classes, dataset {}",
            teacher.config.num_classes, dataset.class_count
        )));
    }
    if n == 0 || batch_size == 0 {
        return Err(Error::Validation("samples per class and batch size must be positive".into()));
    }
    let samples = sample_per_class(dataset, n, seed)?;
    let size = teacher.config.image_size;
    let dim = teacher.config.embed_dim;
    let mut table = Array2::<f32>::zeros((dataset.class_count, dim));
    for (class, indices) in samples.iter().enumerate() {
        let mut sum = vec![0.0f64; dim];
        for chunk in indices.chunks(batch_size) {
            let images = prepare_images(dataset, chunk, size).mapv(|v| T::from_f64_lossy(v as f64));
            let out = teacher.forward(images.view())?;
            for row in out.cls_embedding.outer_iter() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v.to_f64_lossy();
                }
            }
        }
        let count = indices.len() as f64;
        for (dst, s) in table.row_mut(class).iter_mut().zip(&sum) {
            *dst = (s / count) as f32;
        }
    }
    let samples_per_class = u32::try_from(n).map_err(|_| Error::Validation("samples per class exceeds u32".into()))?;
    Ok(EmbeddingCache {
        table,
        samples_per_class,
        teacher_digest,
        dataset_digest: dataset.digest(),
        seed,
    })
}

impl EmbeddingCache {
    pub fn num_classes(&self) -> usize {
        self.table.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.table.ncols()
    }

    /// File size: fixed header plus `N_c · D_t · 4`.
    pub fn byte_size(&self) -> usize {
        CACHE_HEADER_BYTES + self.table.len() * 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.samples_per_class.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.teacher_digest);
        out.extend_from_slice(&self.dataset_digest);
        for v in self.table.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4, "magic")? != CACHE_MAGIC {
            return Err(Error::format(path, "bad magic, not an EDKC cache"));
        }
        let version = r.u16("version")?;
        if version != CACHE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let classes = r.u32("class count")? as usize;
        let dim = r.u32("embedding dim")? as usize;
        let samples_per_class = r.u32("samples per class")?;
        let seed = r.u64("seed")?;
        let teacher_digest: [u8; 32] = r.take(32, "teacher digest")?.try_into().unwrap();
        let dataset_digest: [u8; 32] = r.take(32, "dataset digest")?.try_into().unwrap();
        if classes == 0 || dim == 0 {
            return Err(Error::format(path, "empty embedding table"));
        }
        if teacher_digest == [0; 32] || dataset_digest == [0; 32] {
            return Err(Error::format(path, "missing provenance digest"));
        }
        let values = r.f32s(classes.saturating_mul(dim), "table")?;
        r.finish()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "table has non-finite values"));
        }
        Ok(Self {
            table: Array2::from_shape_vec((classes, dim), values).expect("length checked"),
            samples_per_class,
            teacher_digest,
            dataset_digest,
            seed,
        })
    }

    /// Returns a staleness error when a provided digest differs.
    pub fn verify(&self, expect: &CacheExpectation) -> Result<()> {
        if let Some(t) = expect.teacher_digest {
            if t != self.teacher_digest {
                return Err(Error::Stale(format!(
                    "cache was built from teacher {}, expected {}",
                    hex::encode(&self.teacher_digest[..8]),
                    hex::encode(&t[..8])
                )));
            }
        }
        if let Some(d) = expect.dataset_digest {
            if d != self.dataset_digest {
                return Err(Error::Stale(format!(
                    "cache was built from dataset {}, expected {}",
                    hex::encode(&self.dataset_digest[..8]),
                    hex::encode(&d[..8])
                )));
            }
        }
        Ok(())
    }
}

pub fn save_cache(cache: &EmbeddingCache, path: impl AsRef<Path>) -> Result<()> {
    write_file_atomic(path.as_ref(), &cache.encode())
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<EmbeddingCache> {
    let path = path.as_ref();
    EmbeddingCache::decode(&read_file(path)?, path)
}

/// Loads and checks provenance in one step.
pub fn load_cache_checked(path: impl AsRef<Path>, expect: &CacheExpectation) -> Result<EmbeddingCache> {
    let cache = load_cache(path)?;
    cache.verify(expect)?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, Image};
    use crate::model::ModelConfig;

    fn cache() -> EmbeddingCache {
        EmbeddingCache {
            table: Array2::from_shape_fn((3, 4), |(i, j)| i as f32 - 0.25 * j as f32),
            samples_per_class: 7,
            teacher_digest: [1; 32],
            dataset_digest: [2; 32],
            seed: 99,
        }
    }

    #[test]
    fn round_trip_and_size() {
        let c = cache();
        let bytes = c.encode();
        assert_eq!(bytes.len(), c.byte_size());
        assert_eq!(bytes.len(), CACHE_HEADER_BYTES + 3 * 4 * 4);
        assert_eq!(EmbeddingCache::decode(&bytes, Path::new("m")).unwrap(), c);
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let bytes = cache().encode();
        for cut in [0, 2, 4, 6, 30, CACHE_HEADER_BYTES, bytes.len() - 1] {
            assert!(matches!(
                EmbeddingCache::decode(&bytes[..cut], Path::new("m")),
                Err(Error::Format { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[1] = b'!';
        assert!(matches!(EmbeddingCache::decode(&bad, Path::new("m")), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(EmbeddingCache::decode(&bad, Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn staleness_checks() {
        let c = cache();
        c.verify(&CacheExpectation::default()).unwrap();
        c.verify(&CacheExpectation {
            teacher_digest: Some([1; 32]),
            dataset_digest: Some([2; 32]),
        })
        .unwrap();
        let err = c.verify(&CacheExpectation {
            teacher_digest: Some([9; 32]),
            dataset_digest: None,
        });
        assert!(matches!(err, Err(Error::Stale(_))));
        let err = c.verify(&CacheExpectation {
            teacher_digest: None,
            dataset_digest: Some([9; 32]),
        });
        assert!(matches!(err, Err(Error::Stale(_))));
    }

    #[test]
    fn sampling_examples() {
        let ds = synthetic_dataset(5, 12, 4, 1);
        let s = sample_per_class(&ds, 4, 3).unwrap();
        assert_eq!(s.len(), 5);
        for (class, idx) in s.iter().enumerate() {
            assert_eq!(idx.len(), 4);
            assert!(idx.iter().all(|&i| ds.labels[i] == class));
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(s, sample_per_class(&ds, 4, 3).unwrap());
        let all = sample_per_class(&ds, 50, 3).unwrap();
        assert!(all.iter().all(|v| v.len() == 12));
    }

    #[test]
    fn sampling_rejects_empty_class() {
        let ds = Dataset::new("t", vec![Image::filled(4, 4, [0, 0, 0])], vec![0], 2).unwrap();
        let err = sample_per_class(&ds, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("class 1")));
    }

    #[test]
    fn identical_images_give_their_embedding() {
        let imgs = vec![Image::filled(8, 8, [10, 20, 30]); 3];
        let ds = Dataset::new("t", imgs, vec![0, 0, 0], 1).unwrap();
        let teacher = ModelWeights::<f64>::init(&ModelConfig::new(1, 8, 2, 16, 4, 8, 1), 2).unwrap();
        let cache = build_cache(&teacher, &ds, 3, 0).unwrap();
        let single = teacher
            .forward(prepare_images(&ds, &[0], 8).mapv(f64::from).view())
            .unwrap();
        for (a, b) in cache.table.row(0).iter().zip(single.cls_embedding.row(0)) {
            assert_eq!(*a, *b as f32);
        }
    }
}
