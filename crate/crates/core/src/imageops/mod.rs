//! Pure 2D numerical kernels shared by calibration and feature extraction.

mod filters;
mod grid;
mod label;
mod otsu;
mod reduce;

pub use filters::{
    gaussian_blur, gaussian_d1_kernel, gaussian_d2_kernel, gaussian_gradient,
    gaussian_gradient_magnitude, gaussian_kernel, gaussian_laplace, kernel_radius, reflect101,
    separable,
};
pub use grid::{Grid, Grid2D};
pub use label::{label_components, label_mask, Connectivity, LabelGrid};
pub use otsu::{otsu_split, otsu_split_bins, otsu_thresholds, Histogram, OtsuSplit, OTSU_BINS};
pub use reduce::{fold_max_argmax, ReductionState, NEVER_UPDATED};

/// Binary dilation of a row-major mask by a disk of `radius` pixels.
pub fn dilate(mask: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = vec![false; w * h];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for &(dx, dy) in &offsets {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                out[ny as usize * w + nx as usize] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::dilate;

    #[test]
    fn dilation_is_a_disk() {
        let mut m = vec![false; 49];
        m[24] = true;
        let d = dilate(&m, 7, 7, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 13);
        assert!(d[24 - 2] && d[24 + 14] && !d[24 - 16]);
    }
}
