//! Dataset ingestion: IDX files and a deterministic synthetic benchmark.
//!
//! Images are stored flattened ([n × S²]) and already normalized to
//! mean 0.5 / std 0.5 in pixel units, i.e. pixel byte p maps to
//! (p/255 − 0.5)/0.5 ∈ [−1, 1].

use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX payload size mismatch: need {need} bytes, found {have}")]
    Truncated { need: usize, have: usize },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} of sample {index} outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("images are {rows}×{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labeled image set, flattened and normalized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Collect the given samples into a batch.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let px = self.images.cols();
        let mut images = Tensor::zeros(&[idx.len(), px]);
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            images.data_mut()[row * px..(row + 1) * px]
                .copy_from_slice(self.images.row_slice(i));
            labels.push(self.labels[i]);
        }
        (images, labels)
    }

    /// Deterministic shuffled split; the second part holds round(n·fraction)
    /// samples, clamped so both parts are non-empty.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        assert!(self.len() >= 2, "need at least two samples to split");
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let take = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let (held_out, kept) = order.split_at(take);
        (self.subset(kept), self.subset(held_out))
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.gather(idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            image_size: self.image_size,
        }
    }
}

/// Shuffled epoch batches; the final batch may be short.
pub fn epoch_batches<R: Rng>(len: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    assert!(batch > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Deterministic Gaussian-blob benchmark: class c's images share a blob
/// centered at a class-specific point on a circle, plus optional pixel
/// noise. Labels cycle 0,1,…,C−1 so class counts are balanced exactly;
/// at noise 0 every class collapses to one distinct point, making the set
/// linearly separable.
pub fn synth_data<R: Rng>(
    classes: usize,
    samples: usize,
    image_size: usize,
    noise: f32,
    rng: &mut R,
) -> Dataset {
    assert!(classes >= 2, "need at least two classes");
    assert!(samples >= classes, "need at least one sample per class");
    let s = image_size as f32;
    let radius = s / 4.0;
    let sigma = s / 8.0;
    let px = image_size * image_size;
    let mut prototypes = vec![0.0f32; classes * px];
    for c in 0..classes {
        let angle = std::f32::consts::TAU * c as f32 / classes as f32;
        let cx = s / 2.0 + radius * angle.cos();
        let cy = s / 2.0 + radius * angle.sin();
        for y in 0..image_size {
            for x in 0..image_size {
                let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                prototypes[c * px + y * image_size + x] = 2.0 * g - 1.0;
            }
        }
    }
    let mut images = Tensor::zeros(&[samples, px]);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c);
        let row = &mut images.data_mut()[i * px..(i + 1) * px];
        row.copy_from_slice(&prototypes[c * px..(c + 1) * px]);
        if noise > 0.0 {
            for v in row.iter_mut() {
                let n: f32 = StandardNormal.sample(rng);
                *v += noise * n;
            }
        }
    }
    Dataset {
        images,
        labels,
        num_classes: classes,
        image_size,
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Parse an IDX image/label file pair already read into memory.
pub fn parse_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    num_classes: usize,
) -> Result<Dataset, DataError> {
    let magic = read_u32_be(image_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(image_bytes, 4)? as usize;
    let rows = read_u32_be(image_bytes, 8)? as usize;
    let cols = read_u32_be(image_bytes, 12)? as usize;
    if rows != cols {
        return Err(DataError::NotSquare { rows, cols });
    }
    let need = 16 + count * rows * cols;
    if image_bytes.len() != need {
        return Err(DataError::Truncated {
            need,
            have: image_bytes.len(),
        });
    }

    let lmagic = read_u32_be(label_bytes, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let lcount = read_u32_be(label_bytes, 4)? as usize;
    let lneed = 8 + lcount;
    if label_bytes.len() != lneed {
        return Err(DataError::Truncated {
            need: lneed,
            have: label_bytes.len(),
        });
    }
    if count != lcount {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    if count == 0 {
        return Err(DataError::Empty);
    }

    let px = rows * cols;
    let mut images = Tensor::zeros(&[count, px]);
    for (v, &b) in images.data_mut().iter_mut().zip(&image_bytes[16..]) {
        *v = b as f32 / 127.5 - 1.0;
    }
    let mut labels = Vec::with_capacity(count);
    for (index, &b) in label_bytes[8..].iter().enumerate() {
        if (b as usize) >= num_classes {
            return Err(DataError::LabelOutOfRange {
                index,
                label: b,
                classes: num_classes,
            });
        }
        labels.push(b as usize);
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        image_size: rows,
    })
}

/// Load an IDX image/label file pair from disk.
pub fn load_idx(
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
    num_classes: usize,
) -> Result<Dataset, DataError> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    parse_idx(&image_bytes, &label_bytes, num_classes)
}
