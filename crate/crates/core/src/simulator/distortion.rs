use rand::Rng;

use crate::error::{Error, Result};
use crate::spatial::{estimate_homography, Homography, PixelGridFrame, PointCorrespondence};

/// Random camera perspective: the corners of the 150 mm plate square are
/// pushed `min_mm..=max_mm` in random directions. The returned homography maps
/// corrected-grid pixels to raw pixels.
pub fn random_plate_distortion<R: Rng>(
    rng: &mut R,
    grid: &PixelGridFrame,
    min_mm: f64,
    max_mm: f64,
) -> Result<Homography> {
    if !(min_mm >= 0.0 && max_mm >= min_mm) {
        return Err(Error::Parameter(format!(
            "distortion range {min_mm}..{max_mm} mm is empty"
        )));
    }
    let px_per_mm = 1.0 / grid.pitch_mm();
    let corners = [(-75.0, -75.0), (75.0, -75.0), (75.0, 75.0), (-75.0, 75.0)];
    for _ in 0..64 {
        let corr: Vec<PointCorrespondence> = corners
            .iter()
            .map(|&c| {
                let p = grid.world_to_pixel(c);
                let r = rng.gen_range(min_mm..=max_mm) * px_per_mm;
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                PointCorrespondence {
                    image: p,
                    world: (p.0 + r * a.cos(), p.1 + r * a.sin()),
                }
            })
            .collect();
        if let Ok(est) = estimate_homography(&corr) {
            return Ok(est.homography);
        }
    }
    Err(Error::Degenerate("could not draw a non-degenerate distortion".into()))
}
