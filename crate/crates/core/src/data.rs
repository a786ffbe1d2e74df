//! Image datasets: CIFAR-10 binary batches and a synthetic shapes corpus.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with shape (N, C, H, W) and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("{} labels for images {:?}", labels.len(), images.shape()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W).
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, converted to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.select_batch(indices)?.cast();
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` items (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset::new(self.images.select_batch(&idx)?, idx.iter().map(|&i| self.labels[i]).collect(), self.classes, self.split)
    }

    /// Count of each label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parses concatenated CIFAR-10 binary records (1 label byte + 3072 pixel
/// bytes, channel-major) in file order.
pub fn parse_cifar(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let complete = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format(format!(
            "CIFAR data truncated: record {complete} starting at offset {} has {} of {CIFAR_RECORD} bytes",
            complete * CIFAR_RECORD,
            bytes.len() - complete * CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label {label} at offset {} is not below 10", r * CIFAR_RECORD)));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, CIFAR_CLASSES, split)
}

/// Loads CIFAR-10 from a binary batch file, or from a directory holding
/// `data_batch_{1..5}.bin` (train) and `test_batch.bin` (test).
pub fn load_cifar(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = std::fs::read(f).map_err(|e| Error::Format(format!("cannot read {}: {e}", f.display())))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return parse_cifar(&chunk, split).map_err(|e| Error::Format(format!("{}: {e}", f.display())));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes, split)
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Class-conditioned shapes on random backgrounds.
///
/// Class `c` fixes the shape (square, disk or cross), the foreground hue and
/// an anchor position on a ring around the centre. Each sample jitters the
/// position, size and colour and draws a random background colour plus a
/// faint pixel noise, so the class is learnable while the exact image is
/// not predictable from the label. Labels are stratified and shuffled.
pub fn synth_dataset(n: usize, classes: usize, size: usize, seed: u64, split: Split) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!("need n >= classes >= 2, got n={n}, classes={classes}")));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image side must be at least 8, got {size}")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let stream = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    Rng::derive(seed, stream).shuffle(&mut labels);
    let s = size as f64;
    let plane = size * size;
    let mut pixels = vec![0f32; n * 3 * plane];
    for (i, &c) in labels.iter().enumerate() {
        let mut rng = Rng::derive(seed, 1000 + 2 * i as u64 + stream);
        let ang = TAU * c as f64 / classes as f64;
        let cx = s / 2.0 + 0.25 * s * ang.cos() + rng.uniform(-0.06, 0.06) * s;
        let cy = s / 2.0 + 0.25 * s * ang.sin() + rng.uniform(-0.06, 0.06) * s;
        let r = s * rng.uniform(0.14, 0.2);
        let fg = hue_to_rgb((c as f64 / classes as f64 + rng.uniform(-0.03, 0.03)).rem_euclid(1.0));
        let bg = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        let bright = rng.uniform(0.7, 1.0);
        let shape = c % 3;
        let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match shape {
                    0 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                    1 => dx * dx + dy * dy <= r * r,
                    _ => (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r),
                };
                for ch in 0..3 {
                    let base = if inside { fg[ch] * bright } else { bg[ch] };
                    let v = base + 0.03 * rng.gaussian();
                    img[ch * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 3, size, size], pixels)?, labels, classes, split)
}

/// Shuffled mini-batch index lists covering `0..n`; a trailing batch smaller
/// than `min_batch` is dropped.
pub fn batches(n: usize, batch_size: usize, min_batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size.max(1)).filter(|c| c.len() >= min_batch).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(CIFAR_PIXELS));
        r
    }

    #[test]
    fn cifar_fixture_parses() {
        let mut bytes = record(3, 255);
        bytes.extend(record(7, 0));
        bytes[1 + 5] = 51;
        let ds = parse_cifar(&bytes, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.images.data()[0], 1.0);
        assert!((ds.images.data()[5] - 0.2).abs() < 1e-7);
        assert_eq!(ds.images.data()[CIFAR_PIXELS], 0.0);
    }

    #[test]
    fn cifar_errors_name_the_offset() {
        let mut bytes = record(1, 0);
        bytes.extend(&record(2, 0)[..100]);
        let err = parse_cifar(&bytes, Split::Test).unwrap_err().to_string();
        assert!(err.contains("3073"), "{err}");
        let err = parse_cifar(&record(10, 0), Split::Test).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn cifar_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), [record(4, 9), record(5, 9)].concat()).unwrap();
        let ds = load_cifar(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.labels, vec![4, 5]);
        assert!(load_cifar(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn synth_is_deterministic_balanced_and_bounded() {
        let a = synth_dataset(103, 10, 32, 4, Split::Train).unwrap();
        let b = synth_dataset(103, 10, 32, 4, Split::Train).unwrap();
        assert_eq!(a, b);
        let h = a.histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let t = synth_dataset(103, 10, 32, 4, Split::Test).unwrap();
        assert_ne!(a.images, t.images);
        assert!(synth_dataset(5, 10, 32, 0, Split::Train).is_err());
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = Rng::new(0);
        let bs = batches(10, 4, 1, &mut rng);
        let mut all: Vec<usize> = bs.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 4, 3, &mut rng).len(), 2);
    }
}
