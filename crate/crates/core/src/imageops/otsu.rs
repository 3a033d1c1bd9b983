//! Two-class Otsu thresholding over a fixed 256-bin histogram.

use super::Grid2D;
use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

/// Histogram of `values` over 256 uniform bins spanning their own `[min, max]`.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub counts: [u64; OTSU_BINS],
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn of(values: &[f64]) -> Result<Histogram> {
        let mut iter = values.iter().copied().filter(|v| v.is_finite());
        let first = iter.next().ok_or(Error::DegenerateHistogram)?;
        let (min, max) = iter.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let mut counts = [0u64; OTSU_BINS];
        for v in values.iter().copied().filter(|v| v.is_finite()) {
            counts[bin_of(v, min, max)] += 1;
        }
        Ok(Histogram { counts, min, max })
    }

    pub fn bin_of(&self, v: f64) -> usize {
        bin_of(v, self.min, self.max)
    }

    /// Lower edge of bin `b` in value units.
    pub fn bin_edge(&self, b: usize) -> f64 {
        self.min + (self.max - self.min) * b as f64 / OTSU_BINS as f64
    }
}

#[inline]
fn bin_of(v: f64, min: f64, max: f64) -> usize {
    if max <= min {
        return 0;
    }
    let b = ((v - min) / (max - min) * OTSU_BINS as f64).floor();
    (b.max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Result of a two-class split: pixels in bins `> bin` form the high class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub bin: usize,
    /// Value at the upper edge of `bin`; values `>= threshold` are high class.
    pub threshold: f64,
}

/// Best split of a 256-bin histogram by between-class variance.
///
/// Candidate `t` puts bins `0..=t` in the low class. Ties resolve to the
/// lowest `t`. Comparisons are exact in integer arithmetic so the result does
/// not depend on summation order.
pub fn otsu_split_bins(counts: &[u64]) -> Result<usize> {
    let occupied = counts.iter().filter(|&&c| c > 0).count();
    if occupied < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total_n: u128 = counts.iter().map(|&c| c as u128).sum();
    let total_s: u128 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..counts.len() - 1 {
        n0 += counts[t] as u128;
        s0 += t as u128 * counts[t] as u128;
        let n1 = total_n - n0;
        let s1 = total_s - s0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // σ_b²·N² = (s0·n1 − s1·n0)² / (n0·n1)
        let diff = (s0 * n1).abs_diff(s1 * n0);
        let num = diff * diff;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => greater(num, den, bn, bd),
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t).ok_or(Error::DegenerateHistogram)
}

/// `a/b > c/d` for non-negative integers without overflow.
fn greater(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64) / (b as f64) > (c as f64) / (d as f64),
    }
}

/// Two-class Otsu split of the finite values in `values`.
pub fn otsu_split(values: &[f64]) -> Result<OtsuSplit> {
    let hist = Histogram::of(values)?;
    let bin = otsu_split_bins(&hist.counts)?;
    Ok(OtsuSplit {
        bin,
        threshold: hist.bin_edge(bin + 1),
    })
}

/// Thresholds separating `classes` Otsu classes. Only two classes are supported.
pub fn otsu_thresholds(img: &Grid2D, classes: usize) -> Result<Vec<f64>> {
    if classes != 2 {
        return Err(Error::Parameter(format!(
            "only 2-class Otsu is supported, got {classes}"
        )));
    }
    Ok(vec![otsu_split(img.values())?.threshold])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_histogram() {
        let img = Grid2D::from_fn(8, 8, |x, _| if x < 3 { 0.0 } else { 255.0 }).unwrap();
        let t = otsu_thresholds(&img, 2).unwrap()[0];
        assert!(t > 0.0 && t < 255.0);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = Grid2D::filled(5, 5, 7.0).unwrap();
        assert!(matches!(otsu_thresholds(&img, 2), Err(Error::DegenerateHistogram)));
    }

    #[test]
    fn only_two_classes() {
        let img = Grid2D::from_fn(4, 4, |x, _| x as f64).unwrap();
        assert!(otsu_thresholds(&img, 3).is_err());
    }

    #[test]
    fn tie_prefers_lowest_threshold() {
        // Two equal masses at bins 0 and 3: every split between them ties.
        let mut counts = [0u64; OTSU_BINS];
        counts[0] = 10;
        counts[3] = 10;
        assert_eq!(otsu_split_bins(&counts).unwrap(), 0);
    }
}
