//! Separable Gaussian-family convolutions.
//!
//! Every filter uses reflect-101 borders (`dcb|abcd|cba`) and kernels truncated
//! at `ceil(4·sigma)` taps on each side. The derivative kernels are scaled so
//! that they respond exactly to polynomials of their order: the first
//! derivative kernel returns `a` on the ramp `a·x`, and the second derivative
//! kernel has zero sum and returns `2` on `x²`.

use super::Grid2D;
use crate::error::{Error, Result};

/// Truncation radius in taps for a Gaussian of standard deviation `sigma`.
pub fn kernel_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Normalized Gaussian taps `g[-r..=r]`, summing to one.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// First-derivative taps. Correlating a ramp `a·x` yields `a`.
pub fn gaussian_d1_kernel(sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel(sigma);
    let r = (g.len() / 2) as isize;
    // Correlation taps: out[x] = Σ k[i]·f[x+i]; for f = x this is Σ i·k[i].
    let mut k: Vec<f64> = (-r..=r)
        .zip(&g)
        .map(|(i, gi)| i as f64 * gi)
        .collect();
    let moment: f64 = (-r..=r).zip(&k).map(|(i, ki)| i as f64 * ki).sum();
    k.iter_mut().for_each(|v| *v /= moment);
    k
}

/// Second-derivative taps: zero sum, and correlating `x²` yields `2`.
pub fn gaussian_d2_kernel(sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel(sigma);
    let r = (g.len() / 2) as isize;
    let s2 = sigma * sigma;
    let mut k: Vec<f64> = (-r..=r)
        .zip(&g)
        .map(|(i, gi)| ((i * i) as f64 - s2) / (s2 * s2) * gi)
        .collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let moment: f64 = (-r..=r).zip(&k).map(|(i, ki)| (i * i) as f64 * ki).sum();
    k.iter_mut().for_each(|v| *v *= 2.0 / moment);
    k
}

/// Reflect-101 index into `0..n` for any signed offset.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Correlates each row with `taps`.
fn correlate_rows(img: &Grid2D, taps: &[f64]) -> Grid2D {
    let (w, h) = img.dims();
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r as usize];
    for y in 0..h {
        let row = img.row(y);
        for (p, slot) in padded.iter_mut().enumerate() {
            *slot = row[reflect101(p as isize - r, w)];
        }
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, d) in dst.iter_mut().enumerate() {
            let window = &padded[x..x + taps.len()];
            *d = window.iter().zip(taps).map(|(a, b)| a * b).sum();
        }
    }
    Grid2D::from_vec(w, h, out).expect("dims preserved")
}

/// Correlates each column with `taps`.
fn correlate_cols(img: &Grid2D, taps: &[f64]) -> Grid2D {
    let (w, h) = img.dims();
    let r = (taps.len() / 2) as isize;
    let src = img.values();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (t, &k) in taps.iter().enumerate() {
            let sy = reflect101(y as isize + t as isize - r, h);
            let srow = &src[sy * w..(sy + 1) * w];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += k * s;
            }
        }
    }
    Grid2D::from_vec(w, h, out).expect("dims preserved")
}

/// Separable correlation: `row_taps` along x, then `col_taps` along y.
pub fn separable(img: &Grid2D, row_taps: &[f64], col_taps: &[f64]) -> Grid2D {
    correlate_cols(&correlate_rows(img, row_taps), col_taps)
}

pub fn gaussian_blur(img: &Grid2D, sigma: f64) -> Result<Grid2D> {
    check_sigma(sigma)?;
    let g = gaussian_kernel(sigma);
    Ok(separable(img, &g, &g))
}

/// Derivative responses `(Gx, Gy)` of the Gaussian-smoothed image.
pub fn gaussian_gradient(img: &Grid2D, sigma: f64) -> Result<(Grid2D, Grid2D)> {
    check_sigma(sigma)?;
    let g = gaussian_kernel(sigma);
    let d = gaussian_d1_kernel(sigma);
    Ok((separable(img, &d, &g), separable(img, &g, &d)))
}

pub fn gaussian_gradient_magnitude(img: &Grid2D, sigma: f64) -> Result<Grid2D> {
    let (gx, gy) = gaussian_gradient(img, sigma)?;
    let mag: Vec<f64> = gx
        .values()
        .iter()
        .zip(gy.values())
        .map(|(a, b)| a.hypot(*b))
        .collect();
    Grid2D::from_vec(img.width(), img.height(), mag)
}

/// Laplacian of Gaussian: `∂²/∂x² + ∂²/∂y²` of the smoothed image.
pub fn gaussian_laplace(img: &Grid2D, sigma: f64) -> Result<Grid2D> {
    check_sigma(sigma)?;
    let g = gaussian_kernel(sigma);
    let d2 = gaussian_d2_kernel(sigma);
    let mut out = separable(img, &d2, &g);
    let yy = separable(img, &g, &d2);
    out.values_mut()
        .iter_mut()
        .zip(yy.values())
        .for_each(|(a, b)| *a += b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101_mirrors_without_repeating_edge() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect101(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect101(-5, 1), 0);
        // Offsets wider than the image still land in range.
        assert!((-40..40).all(|i| reflect101(i, 3) < 3));
    }

    #[test]
    fn kernel_moments() {
        for sigma in [0.5, 1.0, 3.0] {
            let g = gaussian_kernel(sigma);
            assert_eq!(g.len(), 2 * kernel_radius(sigma) + 1);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let d2 = gaussian_d2_kernel(sigma);
            assert!(d2.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn non_positive_sigma_rejected() {
        let img = Grid2D::filled(4, 4, 1.0).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_gradient_magnitude(&img, -1.0).is_err());
        assert!(gaussian_laplace(&img, f64::NAN).is_err());
    }

    #[test]
    fn constant_grid_is_fixed_point_of_blur() {
        let img = Grid2D::filled(17, 11, 42.5).unwrap();
        for sigma in [0.5, 1.0, 3.0, 5.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!(out.values().iter().all(|v| (v - 42.5).abs() < 1e-9));
        }
    }

    #[test]
    fn constant_grid_has_zero_derivatives() {
        let img = Grid2D::filled(20, 20, 313.0).unwrap();
        let gm = gaussian_gradient_magnitude(&img, 3.0).unwrap();
        let lg = gaussian_laplace(&img, 1.0).unwrap();
        assert!(gm.values().iter().all(|v| v.abs() < 1e-9));
        assert!(lg.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn blur_preserves_ramp_on_interior() {
        let img = Grid2D::from_fn(40, 12, |x, _| x as f64).unwrap();
        let out = gaussian_blur(&img, 2.0).unwrap();
        let r = kernel_radius(2.0);
        for y in 0..12 {
            for x in r..40 - r {
                assert!((out.get(x, y) - x as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_of_ramp_is_slope() {
        let a = -2.75;
        let img = Grid2D::from_fn(48, 30, |x, _| a * x as f64).unwrap();
        let gm = gaussian_gradient_magnitude(&img, 3.0).unwrap();
        let r = kernel_radius(3.0);
        for y in 0..30 {
            for x in r..48 - r {
                assert!((gm.get(x, y) - a.abs()).abs() < 1e-6, "{}", gm.get(x, y));
            }
        }
    }

    #[test]
    fn log_of_paraboloid_is_four() {
        let img = Grid2D::from_fn(30, 30, |x, y| {
            let (x, y) = (x as f64 - 15.0, y as f64 - 15.0);
            x * x + y * y
        })
        .unwrap();
        let lg = gaussian_laplace(&img, 1.0).unwrap();
        assert!((lg.get(15, 15) - 4.0).abs() < 1e-9);
    }
}
