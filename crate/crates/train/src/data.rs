//! Image datasets: the `CMTD` binary format, normalisation and batching.
//!
//! Layout (little-endian): magic `CMTD`, then `version, classes, count, H, W,
//! C` as u32, `count·H·W·C` pixel bytes in NHWC order, and `count` u16 labels.

use std::io::{Read, Write};
use std::path::Path;

use cmtkd_core::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMTD";
pub const VERSION: u32 = 1;
/// Zero padding (in pixels) used by the random-crop augmentation.
pub const CROP_PAD: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        classes: usize,
        [height, width, channels]: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let d = Dataset {
            classes,
            height,
            width,
            channels,
            pixels,
            labels,
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.classes == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Data("zero-sized dimension".into()));
        }
        if self.pixels.len() != self.labels.len() * self.image_len() {
            return Err(Error::Data(format!(
                "{} pixel bytes do not match {} images of {}",
                self.pixels.len(),
                self.labels.len(),
                self.image_len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Data(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `[C, H, W]` as the networks see it.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.pixels.len() + 2 * self.labels.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.classes as u32, self.len() as u32, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Data("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Data(format!("bad magic {magic:?}")));
        }
        let mut words = [0u32; 6];
        for w in &mut words {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Data("truncated header".into()))?;
            *w = u32::from_le_bytes(b);
        }
        let [version, classes, count, h, w, c] = words.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(Error::Data(format!("unsupported version {version}")));
        }
        let npix = count
            .checked_mul(h * w * c)
            .ok_or_else(|| Error::Data("header sizes overflow".into()))?;
        if r.len() != npix + 2 * count {
            return Err(Error::Data(format!("expected {} payload bytes, found {}", npix + 2 * count, r.len())));
        }
        let pixels = r[..npix].to_vec();
        let labels = r[npix..].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        Dataset::new(classes, [h, w, c], pixels, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
        f.write_all(&self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Train and test splits stored side by side in one directory.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn train_path(dir: &Path) -> std::path::PathBuf {
        dir.join("train.cmtd")
    }

    pub fn test_path(dir: &Path) -> std::path::PathBuf {
        dir.join("test.cmtd")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = Dataset::load(&Self::train_path(dir))?;
        let test = Dataset::load(&Self::test_path(dir))?;
        if (train.classes, train.input_shape()) != (test.classes, test.input_shape()) {
            return Err(Error::Data("train and test splits disagree on shape or classes".into()));
        }
        Ok(Splits { train, test })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.train.save(&Self::train_path(dir))?;
        self.test.save(&Self::test_path(dir))
    }
}

/// Per-channel mean and standard deviation in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("cannot normalise an empty dataset".into()));
        }
        let c = data.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &p) in data.pixels.iter().enumerate() {
            let v = p as f64;
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
        let n = (data.pixels.len() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Normalization { mean, std })
    }
}

/// Random crop offset and flip applied to one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub dy: isize,
    pub dx: isize,
}

impl Augment {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let pad = CROP_PAD as i64;
        Augment {
            flip: rng.random_bool(0.5),
            dy: rng.random_range(-pad..=pad) as isize,
            dx: rng.random_range(-pad..=pad) as isize,
        }
    }
}

/// One batch in network layout `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Normalised NCHW batch of `indices`. Augmentation crops from the
    /// zero-padded (post-normalisation) image and optionally mirrors it.
    pub fn batch<T: Scalar>(&self, indices: &[usize], norm: &Normalization, augment: Option<&[Augment]>) -> Result<Batch<T>> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![T::zero(); indices.len() * self.image_len()];
        let scale: Vec<(f64, f64)> = (0..c).map(|ch| (norm.mean[ch], 1.0 / norm.std[ch])).collect();
        for (b, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::Data(format!("index {idx} outside {} images", self.len())));
            }
            let aug = augment.map(|a| a[b]).unwrap_or_default();
            let img = &self.pixels[idx * self.image_len()..(idx + 1) * self.image_len()];
            for y in 0..h {
                let sy = y as isize + aug.dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if aug.flip { w - 1 - x } else { x };
                    let sx = xx as isize + aug.dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    for (ch, &(m, inv)) in scale.iter().enumerate() {
                        let p = img[(sy as usize * w + sx as usize) * c + ch] as f64;
                        data[((b * c + ch) * h + y) * w + x] = T::of((p - m) * inv);
                    }
                }
            }
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data)?;
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok(Batch { images, labels })
    }
}

/// Shuffled mini-batch order for one epoch. The trailing partial batch is
/// dropped when it would hold a single sample (batch norm needs two).
pub fn epoch_order<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

/// Sequential batches covering every index once, for evaluation.
pub fn sequential(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..len).collect::<Vec<_>>().chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
