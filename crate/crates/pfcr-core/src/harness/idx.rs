use super::dataset::{Dataset, Split};
use super::HarnessError;
use crate::tensor::Tensor;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, HarnessError> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, HarnessError> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| HarnessError::Truncated { path: path.into(), expected: (offset + 4) as u64, actual: bytes.len() as u64 })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Big-endian IDX image file: magic, count, rows, cols, then raw u8 pixels.
/// Pixels come back scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize), HarnessError> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(HarnessError::BadMagic { path: path.into(), expected: IMAGE_MAGIC, actual: magic });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(HarnessError::Truncated { path: path.into(), expected: expected as u64, actual: bytes.len() as u64 });
    }
    let images = (0..n)
        .map(|i| {
            bytes[16 + i * rows * cols..16 + (i + 1) * rows * cols]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect()
        })
        .collect();
    Ok((images, rows, cols))
}

/// Big-endian IDX label file: magic, count, then raw u8 labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>, HarnessError> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(HarnessError::BadMagic { path: path.into(), expected: LABEL_MAGIC, actual: magic });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(HarnessError::Truncated { path: path.into(), expected: expected as u64, actual: bytes.len() as u64 });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label pair and centers each image on an
/// `image_size x image_size` canvas (zero padding, or cropping when larger).
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path, image_size: usize, split: Split) -> Result<Dataset, HarnessError> {
    let (raw, rows, cols) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != raw.len() {
        return Err(HarnessError::LabelCount { images: raw.len(), labels: labels.len() });
    }
    let n = raw.len();
    let mut data = vec![0.0f32; n * image_size * image_size];
    // Signed offsets handle both padding (positive) and cropping (negative).
    let dy = image_size as isize - rows as isize;
    let dx = image_size as isize - cols as isize;
    for (i, img) in raw.iter().enumerate() {
        for r in 0..rows {
            let tr = r as isize + dy / 2;
            if tr < 0 || tr >= image_size as isize {
                continue;
            }
            for c in 0..cols {
                let tc = c as isize + dx / 2;
                if tc < 0 || tc >= image_size as isize {
                    continue;
                }
                data[i * image_size * image_size + tr as usize * image_size + tc as usize] = img[r * cols + c];
            }
        }
    }
    Ok(Dataset { images: Tensor::new(vec![n, 1, image_size, image_size], data), labels, split })
}
