//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, CIFAR-style
//! augmentation, and seeded synthetic blob datasets for fast tests.
//!
//! Pixels are always scaled to [-0.5, 0.5] via x/255 - 0.5 at load time.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::stage_rng;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073; // 1 label byte + 3*32*32 pixels

/// An immutable labeled image set. Images are [N, C, H, W] in [-0.5, 0.5].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
    /// Number of classes.
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// [C, H, W] of a single example.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn item_len(&self) -> usize {
        let [c, h, w] = self.item_shape();
        c * h * w
    }

    /// One image as a [1, C, H, W] tensor.
    pub fn image(&self, idx: usize) -> Tensor {
        let d = self.item_len();
        let [c, h, w] = self.item_shape();
        Tensor::new(vec![1, c, h, w], self.images.data()[idx * d..(idx + 1) * d].to_vec())
            .expect("slice length matches item shape")
    }

    /// Gathers the given indices into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.item_len();
        let [c, h, w] = self.item_shape();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent extents");
        (images, labels)
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&indices);
        Dataset { images, labels, split: self.split.clone(), num_classes: self.num_classes }
    }

    fn validate(&self) -> Result<()> {
        for (i, &v) in self.images.data().iter().enumerate() {
            if !(-0.5..=0.5).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} out of [-0.5,0.5]: {v}"
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Parse(format!("truncated reading {what} at offset {offset}")));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn scale_pixel(p: u8) -> f64 {
    p as f64 / 255.0 - 0.5
}

/// Parses an IDX image/label file pair into a dataset.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: &str) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let img_magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if img_magic != IDX_IMAGE_MAGIC {
        return Err(Error::Parse(format!(
            "bad IDX image magic {img_magic:#010x} at offset 0 (want {IDX_IMAGE_MAGIC:#010x})"
        )));
    }
    let n = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let h = read_be_u32(&img_bytes, 8, "rows")? as usize;
    let w = read_be_u32(&img_bytes, 12, "cols")? as usize;
    let expected = 16 + n * h * w;
    if img_bytes.len() != expected {
        return Err(Error::Parse(format!(
            "IDX image payload is {} bytes, header wants {expected} (offset 16)",
            img_bytes.len()
        )));
    }

    let lbl_magic = read_be_u32(&lbl_bytes, 0, "label magic")?;
    if lbl_magic != IDX_LABEL_MAGIC {
        return Err(Error::Parse(format!(
            "bad IDX label magic {lbl_magic:#010x} at offset 0 (want {IDX_LABEL_MAGIC:#010x})"
        )));
    }
    let n_lbl = read_be_u32(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() != 8 + n_lbl {
        return Err(Error::Parse(format!(
            "IDX label payload is {} bytes, header wants {} (offset 8)",
            lbl_bytes.len(),
            8 + n_lbl
        )));
    }
    if n != n_lbl {
        return Err(Error::Parse(format!(
            "image count {n} does not match label count {n_lbl}"
        )));
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&p| scale_pixel(p)).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let ds = Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        split: split.to_string(),
        num_classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parses CIFAR-10 binary batch files (3073-byte records, channel-major RGB).
pub fn load_cifar_binary(paths: &[impl AsRef<Path>], split: &str) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Parse(format!(
                "{} is {} bytes, not a multiple of the {CIFAR_RECORD}-byte record",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| scale_pixel(b)));
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse("no CIFAR records found".into()));
    }
    let n = labels.len();
    let ds = Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        split: split.to_string(),
        num_classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

/// CIFAR training augmentation: zero-pad each 32x32 image to 40x40, take a
/// seeded random 32x32 crop, then a seeded random horizontal flip.
pub fn augment_cifar(batch: &Tensor, seed: u64) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[2] != 32 || s[3] != 32 {
        return Err(Error::shape("augment_cifar", format!("want [N,C,32,32], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let mut rng = stage_rng(seed, "augment");
    let mut out = vec![0.0; batch.numel()];
    for item in 0..n {
        let oy = rng.gen_range(0..=8usize);
        let ox = rng.gen_range(0..=8usize);
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let src = &batch.data()[(item * c + ch) * 1024..][..1024];
            let dst = &mut out[(item * c + ch) * 1024..][..1024];
            for y in 0..32usize {
                // position in the padded 40x40 canvas
                let py = y as isize + oy as isize - 4;
                for x in 0..32usize {
                    let px = x as isize + ox as isize - 4;
                    let v = if (0..32).contains(&py) && (0..32).contains(&px) {
                        src[py as usize * 32 + px as usize]
                    } else {
                        0.0
                    };
                    let xo = if flip { 31 - x } else { x };
                    dst[y * 32 + xo] = v;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// L well-separated Gaussian clusters with seeded centers, clamped into the
/// pixel domain. `dim` must be a perfect square; examples come out as
/// [N, 1, k, k] images so the same model code runs on them.
pub fn synthetic_blobs(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation <= 0.0 {
        return Err(Error::InvalidArgument(format!("separation must be positive, got {separation}")));
    }
    if num_classes < 2 || n_per_class == 0 {
        return Err(Error::InvalidArgument("need >= 2 classes and >= 1 point per class".into()));
    }
    let k = (dim as f64).sqrt().round() as usize;
    if k * k != dim {
        return Err(Error::InvalidArgument(format!(
            "dim {dim} is not a perfect square, cannot shape as an image"
        )));
    }
    let mut rng = stage_rng(seed, "blobs");
    // Rejection-sample centers until pairwise distances reach `separation`.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while centers.len() < num_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {num_classes} centers with separation {separation} in dim {dim}"
            )));
        }
        let cand: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.35..0.35)).collect();
        let ok = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= separation
        });
        if ok {
            centers.push(cand);
        }
    }
    let sigma = (separation / 10.0).min(0.05);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (cls, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &cv in center {
                let v: f64 = cv + normal.sample(&mut rng);
                data.push(v.clamp(-0.5, 0.5));
            }
            labels.push(cls);
        }
    }
    let ds = Dataset {
        images: Tensor::new(vec![n, 1, k, k], data)?,
        labels,
        split: "synthetic".to_string(),
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, n: usize, h: usize, w: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("imgs");
        let lbl = dir.join("lbls");
        let mut f = fs::File::create(&img).unwrap();
        f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        let pixels: Vec<u8> = (0..n * h * w).map(|i| (i % 256) as u8).collect();
        f.write_all(&pixels).unwrap();
        let mut f = fs::File::create(&lbl).unwrap();
        f.write_all(&IDX_LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        f.write_all(&labels).unwrap();
        (img, lbl)
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 3, 4, 4);
        let ds = load_mnist_idx(&img, &lbl, "train").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images.shape(), &[3, 1, 4, 4]);
        for (i, &v) in ds.images.data().iter().enumerate() {
            assert_eq!(v, (i % 256) as f64 / 255.0 - 0.5);
        }
        assert_eq!(ds.labels, vec![0, 1, 2]);
    }

    #[test]
    fn idx_pixel_endpoints() {
        assert_eq!(scale_pixel(0), -0.5);
        assert_eq!(scale_pixel(255), 0.5);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 2, 2, 2);
        let mut bytes = fs::read(&img).unwrap();
        bytes[3] = 0x99;
        fs::write(&img, &bytes).unwrap();
        let err = load_mnist_idx(&img, &lbl, "train").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn idx_rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 2, 2, 2);
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_mnist_idx(&img, &lbl, "t").is_err());

        let (img, lbl) = write_idx_pair(dir.path(), 2, 2, 2);
        let mut lbytes = fs::read(&lbl).unwrap();
        lbytes[7] = 3; // claim 3 labels
        lbytes.push(0);
        fs::write(&lbl, &lbytes).unwrap();
        let err = load_mnist_idx(&img, &lbl, "t").unwrap_err();
        assert!(err.to_string().contains("match"), "{err}");
    }

    #[test]
    fn cifar_record_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![9u8]; // label byte 9 -> class 9
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        fs::write(&path, &rec).unwrap();
        let ds = load_cifar_binary(&[&path], "train").unwrap();
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.labels, vec![9]);
        assert_eq!(ds.images.data()[0], -0.5);
    }

    #[test]
    fn cifar_rejects_partial_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, vec![0u8; CIFAR_RECORD + 1]).unwrap();
        assert!(load_cifar_binary(&[&path], "train").is_err());
    }

    #[test]
    fn blobs_deterministic_and_exact_counts() {
        let a = synthetic_blobs(3, 20, 16, 0.8, 7).unwrap();
        let b = synthetic_blobs(3, 20, 16, 0.8, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 60);
        for cls in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == cls).count(), 20);
        }
        assert!(a.images.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn blobs_reject_bad_dims() {
        assert!(synthetic_blobs(3, 5, 15, 0.5, 1).is_err());
        assert!(synthetic_blobs(3, 5, 16, 0.0, 1).is_err());
    }

    #[test]
    fn augment_preserves_range_and_shape() {
        let ds = synthetic_blobs(2, 4, 1024, 0.6, 3).unwrap();
        let imgs = Tensor::new(vec![8, 1, 32, 32], ds.images.data().to_vec()).unwrap();
        let aug = augment_cifar(&imgs, 11).unwrap();
        assert_eq!(aug.shape(), imgs.shape());
        assert!(aug.data().iter().all(|v| (-0.5..=0.5).contains(v)));
        // determinism under the seed
        let aug2 = augment_cifar(&imgs, 11).unwrap();
        assert_eq!(aug.data(), aug2.data());
    }
}
