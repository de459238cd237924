use super::HarnessError;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Labeled image set; images are `[n, C, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_dims(&self) -> (usize, usize, usize) {
        (self.images.shape[1], self.images.shape[2], self.images.shape[3])
    }

    /// Copy of the samples at `indices`, in order.
    pub fn select(&self, indices: &[usize], split: Split) -> Dataset {
        let (c, h, w) = self.image_dims();
        let px = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        Dataset { images: Tensor::new(vec![indices.len(), c, h, w], data), labels, split }
    }
}

/// Class-conditional blob images: each class owns a fixed mixture of
/// Gaussian bumps (independent of `seed`, so train and eval splits share
/// class geometry); the seed drives label order and per-pixel noise. Same
/// seed, same tensors.
pub fn make_synthetic(num_classes: usize, n: usize, image_size: usize, seed: u64, noise: f64) -> Dataset {
    assert!(num_classes > 0 && n > 0 && image_size > 0, "make_synthetic: all sizes must be positive");
    let px = image_size * image_size;

    let mut patterns = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut pattern_rng = ChaCha8Rng::seed_from_u64(0xb10b_0000 + class as u64);
        let mut field = vec![0.0f64; px];
        for _ in 0..3 {
            let cx: f64 = pattern_rng.gen_range(0.15..0.85) * image_size as f64;
            let cy: f64 = pattern_rng.gen_range(0.15..0.85) * image_size as f64;
            let sigma: f64 = pattern_rng.gen_range(0.10..0.22) * image_size as f64;
            let amp: f64 = pattern_rng.gen_range(0.5..1.0);
            for y in 0..image_size {
                for x in 0..image_size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    field[y * image_size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let peak = field.iter().copied().fold(f64::MIN, f64::max).max(1e-9);
        for v in field.iter_mut() {
            *v = *v / peak * 0.85;
        }
        patterns.push(field);
    }

    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    // Near-balanced label multiset, shuffled: every class appears floor or
    // ceil of n/k times.
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for i in (1..labels.len()).rev() {
        let j = sample_rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut data = Vec::with_capacity(n * px);
    for &class in &labels {
        for &p in &patterns[class] {
            let u1: f64 = sample_rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = sample_rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push((p + noise * z).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset { images: Tensor::new(vec![n, 1, image_size, image_size], data), labels, split: Split::Train }
}

/// Reconstruction sample count when the config leaves it unset.
pub fn default_recon_count(dataset_len: usize) -> usize {
    1024.min(dataset_len / 4).max(1)
}

/// Disjoint uniform random subsets without replacement: calibration first,
/// reconstruction second.
pub fn sample_calibration(
    data: &Dataset,
    n_calib: usize,
    n_recon: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), HarnessError> {
    let need = n_calib + n_recon;
    if need > data.len() {
        return Err(HarnessError::InsufficientData { need, have: data.len() });
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let calib = data.select(&indices[..n_calib], Split::Train);
    let recon = data.select(&indices[n_calib..need], Split::Train);
    Ok((calib, recon))
}

/// Splits a dataset's images into batches of `batch` (the tail batch may be
/// smaller).
pub fn image_batches(data: &Dataset, batch: usize) -> Vec<Tensor<f32>> {
    assert!(batch > 0, "batch size must be positive");
    let (c, h, w) = (data.images.shape[1], data.images.shape[2], data.images.shape[3]);
    let px = c * h * w;
    let mut out = Vec::new();
    let mut i = 0;
    while i < data.len() {
        let e = (i + batch).min(data.len());
        out.push(Tensor::new(vec![e - i, c, h, w], data.images.data[i * px..e * px].to_vec()));
        i = e;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = make_synthetic(10, 50, 16, 7, 0.25);
        let b = make_synthetic(10, 50, 16, 7, 0.25);
        assert_eq!(a, b);
        let c = make_synthetic(10, 50, 16, 8, 0.25);
        assert_ne!(a.images.data, c.images.data);
    }

    #[test]
    fn synthetic_class_balance_within_20_percent() {
        let ds = make_synthetic(10, 1000, 16, 0, 0.25);
        let mut counts = vec![0usize; 10];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            assert!((80..=120).contains(&n), "class {c} has {n} samples");
        }
    }

    #[test]
    fn synthetic_pixels_in_unit_range() {
        let ds = make_synthetic(3, 20, 8, 3, 0.3);
        assert!(ds.images.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn calibration_split_is_disjoint_and_seeded() {
        let ds = make_synthetic(4, 200, 8, 5, 0.2);
        let (c1, r1) = sample_calibration(&ds, 16, 64, 42).unwrap();
        let (c2, r2) = sample_calibration(&ds, 16, 64, 42).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(r1, r2);
        assert_eq!(c1.len(), 16);
        assert_eq!(r1.len(), 64);

        // Disjointness via exact image matching: every calib image must not
        // appear among recon images.
        let px = 64;
        for i in 0..c1.len() {
            let ci = &c1.images.data[i * px..(i + 1) * px];
            for j in 0..r1.len() {
                assert_ne!(ci, &r1.images.data[j * px..(j + 1) * px], "calib {i} == recon {j}");
            }
        }
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let ds = make_synthetic(4, 50, 8, 5, 0.2);
        assert!(matches!(
            sample_calibration(&ds, 40, 40, 0),
            Err(HarnessError::InsufficientData { need: 80, have: 50 })
        ));
    }

    #[test]
    fn default_recon_count_scales() {
        assert_eq!(default_recon_count(8192), 1024);
        assert_eq!(default_recon_count(2000), 500);
        assert_eq!(default_recon_count(2), 1);
    }

    #[test]
    fn batching_covers_all_samples() {
        let ds = make_synthetic(2, 10, 8, 1, 0.1);
        let batches = image_batches(&ds, 4);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].shape[0], 4);
        assert_eq!(batches[2].shape[0], 2);
    }
}
