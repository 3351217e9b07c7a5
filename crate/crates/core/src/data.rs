//! Image corpora: the built-in synthetic shapes generator and a directory loader.
//!
//! Synthetic recipe, per image of class `c` (all draws from a ChaCha8 stream
//! seeded by the dataset seed):
//! - shape `c mod 8`: disk, square, triangle, cross, ring, horizontal bars,
//!   vertical bars, diamond;
//! - foreground colour from an 8-entry palette indexed by `(c / 8 + c) mod 8`,
//!   each channel jittered by ±0.15;
//! - centre jittered by ±15% of the side, radius 22–38% of the side;
//! - background a dark tint in [-0.9, -0.5] per channel plus ±0.05 pixel noise.
//!
//! Labels are assigned round-robin, then the corpus is shuffled and split
//! into train and validation parts.

use std::path::Path;

use jointok_autograd::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::ImageBatch;

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.85, 0.3],
    [0.25, 0.4, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.9],
    [0.2, 0.9, 0.9],
    [0.98, 0.6, 0.2],
    [0.95, 0.95, 0.95],
];

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r && ax <= (dy + r) * 0.6,
        3 => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        5 => ax <= r && ay <= r && ((dy + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        6 => ax <= r && ay <= r && ((dx + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        _ => ax + ay <= r,
    }
}

/// Renders one synthetic image `[size, size, 3]` of class `class` in [-1, 1].
pub fn render_shape<R: Rng>(class: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let shape = class % 8;
    let base = PALETTE[(class / 8 + class) % 8];
    let color: Vec<f64> = base.iter().map(|&c| (c + rng.random_range(-0.15..=0.15)).clamp(0.0, 1.0) * 2.0 - 1.0).collect();
    let bg: Vec<f64> = (0..3).map(|_| rng.random_range(-0.9..=-0.5)).collect();
    let s = size as f64;
    let cx = s * (0.5 + rng.random_range(-0.15..=0.15));
    let cy = s * (0.5 + rng.random_range(-0.15..=0.15));
    let r = s * rng.random_range(0.22..=0.38);
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let fg = inside(shape, dx, dy, r);
            for ch in 0..3 {
                let v = if fg { color[ch] } else { bg[ch] } + rng.random_range(-0.05..=0.05);
                out.push(v.clamp(-1.0, 1.0));
            }
        }
    }
    out
}

/// An in-memory labelled image corpus with `[H, W, C]` images.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn synthetic(count: usize, size: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % num_classes;
            images.push(Tensor::from_f64(vec![size, size, 3], &render_shape(class, size, &mut rng)));
            labels.push(class);
        }
        Self { images, labels, image_size: size, channels: 3, num_classes }
    }

    /// Loads `root/<class>/<image>`; class directories are sorted by name.
    /// Every image must already be `size × size`.
    pub fn from_dir(root: &Path, size: usize) -> Result<Self> {
        let mut classes: Vec<_> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        classes.sort();
        if classes.is_empty() {
            return Err(Error::Dataset(format!("{} has no class sub-directories", root.display())));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, dir) in classes.iter().enumerate() {
            let mut files: Vec<_> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for path in files {
                let img = image::open(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?.to_rgb8();
                if img.width() as usize != size || img.height() as usize != size {
                    return Err(Error::Dataset(format!(
                        "{}: resolution {}x{} does not match configured {size}x{size}",
                        path.display(),
                        img.width(),
                        img.height()
                    )));
                }
                let data: Vec<T> = img.as_raw().iter().map(|&b| T::of(b as f64 / 127.5 - 1.0)).collect();
                images.push(Tensor::from_vec(vec![size, size, 3], data));
                labels.push(label);
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!("{} contains no images", root.display())));
        }
        Ok(Self { images, labels, image_size: size, channels: 3, num_classes: classes.len() })
    }

    /// Deterministic shuffled split into `(train, val)` with `val_size` validation images.
    pub fn split(self, val_size: usize, seed: u64) -> Result<(Self, Self)> {
        if val_size == 0 || val_size >= self.len() {
            return Err(Error::Dataset(format!("cannot split {} images with {val_size} for validation", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0511));
        let pick = |idx: &[usize]| Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            image_size: self.image_size,
            channels: self.channels,
            num_classes: self.num_classes,
        };
        let (val, train) = order.split_at(val_size);
        Ok((pick(train), pick(val)))
    }

    /// Stacks the given indices into a batch.
    pub fn gather(&self, idx: &[usize]) -> ImageBatch<T> {
        let (s, c) = (self.image_size, self.channels);
        let mut data = Vec::with_capacity(idx.len() * s * s * c);
        for &i in idx {
            data.extend_from_slice(self.images[i].data());
        }
        ImageBatch { pixels: Tensor::from_vec(vec![idx.len(), s, s, c], data), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Consecutive chunks in storage order, last one possibly partial.
    pub fn chunks(&self, batch: usize) -> impl Iterator<Item = ImageBatch<T>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch.max(1)).map(|c| self.gather(c)).collect::<Vec<_>>().into_iter()
    }
}

/// Seeded epoch-wise batching. The batch of any step is a pure function of
/// `(seed, step)`, which is what makes resumed runs exact.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    pub len: usize,
    pub batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.len / self.batch_size
        } else {
            self.len.div_ceil(self.batch_size)
        }
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64));
        order
    }

    /// Dataset indices of the `i`-th batch of `epoch`.
    pub fn batch(&self, epoch: usize, i: usize) -> Vec<usize> {
        let order = self.epoch_order(epoch);
        let start = i * self.batch_size;
        order[start..(start + self.batch_size).min(self.len)].to_vec()
    }

    pub fn for_step(&self, step: usize) -> Result<Vec<usize>> {
        let per = self.batches_per_epoch();
        if per == 0 {
            return Err(Error::Dataset(format!("{} images cannot fill a batch of {}", self.len, self.batch_size)));
        }
        Ok(self.batch(step / per, step % per))
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch()).map(|i| self.batch(epoch, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = Dataset::<f32>::synthetic(16, 32, 8, 3);
        let b = Dataset::<f32>::synthetic(16, 32, 8, 3);
        assert_eq!(a.images, b.images);
        assert!(a.images.iter().all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(a.labels[..8], [0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn classes_differ() {
        let d = Dataset::<f64>::synthetic(8, 16, 8, 0);
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(d.images[i].max_abs_diff(&d.images[j]) > 0.3);
            }
        }
    }

    #[test]
    fn batch_counts() {
        let s = BatchSchedule { len: 10, batch_size: 4, drop_last: false, seed: 0 };
        assert_eq!(s.batches_per_epoch(), 3);
        assert_eq!(s.epoch(0).iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let s = BatchSchedule { drop_last: true, ..s };
        assert_eq!(s.batches_per_epoch(), 2);
        assert_eq!(s.for_step(2).unwrap().len(), 4);
    }

    #[test]
    fn split_is_deterministic() {
        let (t1, v1) = Dataset::<f64>::synthetic(20, 8, 4, 1).split(5, 9).unwrap();
        let (t2, v2) = Dataset::<f64>::synthetic(20, 8, 4, 1).split(5, 9).unwrap();
        assert_eq!((t1.len(), v1.len()), (15, 5));
        assert_eq!(v1.labels, v2.labels);
        assert_eq!(t1.images, t2.images);
    }
}
