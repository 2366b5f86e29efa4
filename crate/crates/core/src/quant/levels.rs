//! MSE-optimal uniform level sets for a unit Gaussian source.
//!
//! Full-wave sets hold `2^b` symmetric mid-rise levels `(j - (2^b-1)/2)·Δ`.
//! Half-wave sets reserve level 0 for `x <= 0` and spend the remaining
//! `2^b - 1` codes on `Δ, 2Δ, …`; the target there is `max(x, 0)`.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_BITS: u8 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLevels {
    pub bits: u8,
    pub half_wave: bool,
    /// Spacing between adjacent levels, in units of the source std.
    pub step: f64,
    /// Increasing level values (half-wave: `levels[0] == 0`).
    pub levels: Vec<f64>,
    /// `thresholds[j]` is the inclusive upper decision bound of `levels[j]`.
    pub thresholds: Vec<f64>,
    /// Expected squared error for a unit Gaussian source.
    pub mse: f64,
}

impl GaussianLevels {
    pub fn max_level(&self) -> f64 {
        *self.levels.last().expect("level set is never empty")
    }

    /// Index of the level `x` (in source-std units) maps to. Boundary ties go low.
    pub fn index_of(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&t| x > t)
    }
}

fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Decision segments `(lo, hi, level)` in multiples of the step. `lo`/`hi`
/// may be infinite; the half-wave zero segment is omitted (it has no error).
fn segments(bits: u8, half_wave: bool) -> Vec<(f64, f64, f64)> {
    let n = 1usize << bits;
    let mut segs = Vec::with_capacity(n);
    if half_wave {
        let positive = n - 1;
        for k in 1..=positive {
            let lo = if k == 1 { 0.0 } else { k as f64 - 0.5 };
            let hi = if k == positive { f64::INFINITY } else { k as f64 + 0.5 };
            segs.push((lo, hi, k as f64));
        }
    } else {
        let centre = (n as f64 - 1.0) / 2.0;
        for j in 0..n {
            let level = j as f64 - centre;
            let lo = if j == 0 { f64::NEG_INFINITY } else { level - 0.5 };
            let hi = if j == n - 1 { f64::INFINITY } else { level + 0.5 };
            segs.push((lo, hi, level));
        }
    }
    segs
}

fn scaled(bound: f64, step: f64) -> f64 {
    if bound.is_infinite() {
        bound
    } else {
        bound * step
    }
}

/// `E[(x - Q(x))²]` for `x ~ N(0,1)` at spacing `step`, from closed-form
/// segment integrals of the Gaussian density.
pub fn gaussian_mse(bits: u8, half_wave: bool, step: f64) -> f64 {
    // ∫ (x-q)² φ = (1+q²)Φ(x) + (2q - x)φ(x)
    let antideriv = |x: f64, q: f64| {
        let tail = if x.is_infinite() { 0.0 } else { (2.0 * q - x) * pdf(x) };
        (1.0 + q * q) * cdf(x) + tail
    };
    segments(bits, half_wave)
        .into_iter()
        .map(|(lo, hi, c)| {
            let q = c * step;
            antideriv(scaled(hi, step), q) - antideriv(scaled(lo, step), q)
        })
        .sum()
}

/// `d/dΔ` of [`gaussian_mse`]. Midpoint boundaries contribute nothing, so only
/// the level terms remain.
fn gaussian_mse_slope(bits: u8, half_wave: bool, step: f64) -> f64 {
    segments(bits, half_wave)
        .into_iter()
        .map(|(lo, hi, c)| {
            let (a, b) = (scaled(lo, step), scaled(hi, step));
            let first_moment = pdf(a) - pdf(b);
            let mass = cdf(b) - cdf(a);
            -2.0 * c * (first_moment - c * step * mass)
        })
        .sum()
}

fn solve(bits: u8, half_wave: bool) -> GaussianLevels {
    // Coarse scan to bracket the minimum, then bisect the analytic slope.
    let upper = 8.0 / ((1u32 << bits) as f64 - 0.5).max(1.0) + 1.0;
    let samples = 4000;
    let grid = |i: usize| upper * (i as f64 + 1.0) / samples as f64;
    let best = (0..samples)
        .min_by(|&a, &b| {
            gaussian_mse(bits, half_wave, grid(a)).total_cmp(&gaussian_mse(bits, half_wave, grid(b)))
        })
        .expect("non-empty scan");
    let mut lo = if best == 0 { 1e-9 } else { grid(best - 1) };
    let mut hi = grid((best + 1).min(samples - 1));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gaussian_mse_slope(bits, half_wave, mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let step = 0.5 * (lo + hi);

    let segs = segments(bits, half_wave);
    let mut levels = Vec::with_capacity(segs.len() + 1);
    let mut thresholds = Vec::with_capacity(segs.len());
    if half_wave {
        levels.push(0.0);
        thresholds.push(0.0);
    }
    for (i, &(_, hi, c)) in segs.iter().enumerate() {
        levels.push(c * step);
        if i + 1 < segs.len() {
            thresholds.push(hi * step);
        }
    }
    GaussianLevels {
        bits,
        half_wave,
        step,
        levels,
        thresholds,
        mse: gaussian_mse(bits, half_wave, step),
    }
}

type Cache = Mutex<HashMap<(u8, bool), Arc<GaussianLevels>>>;

/// Optimal uniform level set for `bits` in `1..=8`, computed once per process.
pub fn design_gaussian_levels(bits: u8, half_wave: bool) -> Result<Arc<GaussianLevels>> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(
            "design_gaussian_levels",
            format!("bits must be in 1..={MAX_BITS}, got {bits}"),
        ));
    }
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("level cache poisoned");
    Ok(guard
        .entry((bits, half_wave))
        .or_insert_with(|| Arc::new(solve(bits, half_wave)))
        .clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_levels_are_conditional_means() {
        let hw = design_gaussian_levels(1, true).unwrap();
        assert_eq!(hw.levels.len(), 2);
        assert!((hw.levels[1] - (2.0 / PI).sqrt()).abs() < 1e-10);
        let fw = design_gaussian_levels(1, false).unwrap();
        assert!((fw.levels[1] - (2.0 / PI).sqrt()).abs() < 1e-10);
        assert!((fw.mse - (1.0 - 2.0 / PI)).abs() < 1e-10);
    }

    #[test]
    fn matches_classic_uniform_gaussian_quantizer_table() {
        // Max (1960): optimum uniform quantizer for a unit Gaussian.
        let four = design_gaussian_levels(2, false).unwrap();
        assert!((four.step - 0.9957).abs() < 1e-4, "{}", four.step);
        assert!((four.mse - 0.1188).abs() < 1e-4, "{}", four.mse);
        let eight = design_gaussian_levels(3, false).unwrap();
        assert!((eight.step - 0.5860).abs() < 1e-4, "{}", eight.step);
    }

    #[test]
    fn mse_decreases_with_bits() {
        for hw in [false, true] {
            let mut prev = f64::INFINITY;
            for b in 1..=MAX_BITS {
                let l = design_gaussian_levels(b, hw).unwrap();
                assert!(l.mse < prev, "bits {b} half_wave {hw}");
                prev = l.mse;
            }
        }
    }

    #[test]
    fn level_sets_are_well_formed() {
        for hw in [false, true] {
            for b in 1..=MAX_BITS {
                let l = design_gaussian_levels(b, hw).unwrap();
                assert_eq!(l.levels.len(), 1 << b);
                assert_eq!(l.thresholds.len(), l.levels.len() - 1);
                assert!(l.levels.windows(2).all(|w| w[0] < w[1]));
                if hw {
                    assert_eq!(l.levels[0], 0.0);
                    assert!(l.levels.iter().all(|&q| q >= 0.0));
                }
            }
        }
    }

    #[test]
    fn bits_out_of_range() {
        assert!(design_gaussian_levels(0, true).is_err());
        assert!(design_gaussian_levels(9, false).is_err());
    }

    #[test]
    fn index_ties_round_down() {
        let l = design_gaussian_levels(2, false).unwrap();
        let t = l.thresholds[1];
        assert_eq!(l.index_of(t), 1);
        assert_eq!(l.index_of(t + 1e-12), 2);
        let hw = design_gaussian_levels(2, true).unwrap();
        assert_eq!(hw.index_of(0.0), 0);
        assert_eq!(hw.index_of(-3.0), 0);
        assert_eq!(hw.index_of(1e-9), 1);
    }
}
