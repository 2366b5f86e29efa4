//! Synthetic desk-scale image classification data.
//!
//! Each class owns a mirror-symmetric prototype built from smooth Gaussian
//! bumps (so horizontal flips never change the label). A sample is its
//! prototype, randomly shifted and rescaled, blended with a distractor from
//! another class and corrupted by pixel noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// Pixel noise standard deviation relative to the prototype's.
    pub noise: f64,
    /// Largest blend weight of the distractor prototype.
    pub distractor: f64,
    /// Largest shift in pixels.
    pub max_shift: usize,
}

impl GeneratorConfig {
    pub fn new(classes: usize, per_class: usize, [height, width]: [usize; 2], seed: u64) -> Self {
        GeneratorConfig {
            classes,
            per_class,
            test_per_class: (per_class / 4).max(1),
            height,
            width,
            channels: 1,
            seed,
            noise: 1.4,
            distractor: 0.8,
            max_shift: 3,
        }
    }
}

struct Prototype {
    /// `[C][H·W]`, unit standard deviation per channel.
    field: Vec<Vec<f64>>,
}

fn prototype(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Prototype {
    let (h, w) = (cfg.height, cfg.width);
    let scale = (h.min(w) as f64) / 16.0;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64 / 2.0);
            let s = rng.random_range(1.2..3.0) * scale;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (cy, cx, s, sign * rng.random_range(0.6..1.2))
        })
        .collect();
    let mut base = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mirror = (w - 1 - x) as f64;
            base[y * w + x] = bumps
                .iter()
                .map(|&(cy, cx, s, a)| {
                    let dy = y as f64 - cy;
                    let g = |xx: f64| (-(dy * dy + (xx - cx) * (xx - cx)) / (2.0 * s * s)).exp();
                    a * (g(x as f64) + g(mirror))
                })
                .sum();
        }
    }
    let field = (0..cfg.channels)
        .map(|_| {
            let tint = rng.random_range(0.5..1.5);
            let mut f: Vec<f64> = base.iter().map(|v| v * tint).collect();
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt().max(1e-9);
            f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            f
        })
        .collect();
    Prototype { field }
}

fn shifted(p: &[f64], h: usize, w: usize, y: usize, x: usize, dy: isize, dx: isize) -> f64 {
    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
    p[sy * w + sx]
}

fn split(cfg: &GeneratorConfig, protos: &[Prototype], per_class: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut labels: Vec<u16> = (0..cfg.classes).flat_map(|k| std::iter::repeat_n(k as u16, per_class)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    let shift = cfg.max_shift as i64;
    let offset_of = |rng: &mut ChaCha8Rng| rng.random_range(-shift..=shift) as isize;
    let mut pixels = Vec::with_capacity(labels.len() * h * w * c);
    for &label in &labels {
        let k = label as usize;
        let other = (k + rng.random_range(1..cfg.classes.max(2))) % cfg.classes;
        let amp = rng.random_range(0.6..1.4);
        let blend = rng.random_range(0.0..=cfg.distractor);
        let offset = rng.random_range(-0.3..0.3);
        let (dy, dx) = (offset_of(rng), offset_of(rng));
        let (oy, ox) = (offset_of(rng), offset_of(rng));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let main = shifted(&protos[k].field[ch], h, w, y, x, dy, dx);
                    let dist = shifted(&protos[other].field[ch], h, w, y, x, oy, ox);
                    let noise: f64 = {
                        // Box-Muller on two uniforms
                        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.random();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    };
                    let v = amp * main + blend * dist + cfg.noise * noise + offset;
                    pixels.push((128.0 + 40.0 * v).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(cfg.classes, [h, w, c], pixels, labels)
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Splits> {
    if cfg.classes == 0 || cfg.classes > u16::MAX as usize {
        return Err(Error::Data(format!("class count {} unsupported", cfg.classes)));
    }
    if cfg.per_class == 0 || cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 {
        return Err(Error::Data("sizes must be positive".into()));
    }
    let protos: Vec<Prototype> = (0..cfg.classes)
        .map(|k| prototype(cfg, &mut stream(cfg.seed, &format!("prototype.{k}"))))
        .collect();
    let train = split(cfg, &protos, cfg.per_class, &mut stream(cfg.seed, "samples.train"))?;
    let test = split(cfg, &protos, cfg.test_per_class, &mut stream(cfg.seed, "samples.test"))?;
    Ok(Splits { train, test })
}
