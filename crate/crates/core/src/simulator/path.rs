use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LayerMask;

fn default_speed() -> f64 {
    960.0
}
fn default_hatch() -> f64 {
    110.0
}
fn default_stripe_width() -> f64 {
    10.0
}
fn default_overlap() -> f64 {
    0.08
}
fn default_rotation() -> f64 {
    66.7
}
fn default_thickness() -> f64 {
    40.0
}
fn default_sample() -> f64 {
    0.02
}

/// Stripe infill parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanParameters {
    /// mm/s
    #[serde(default = "default_speed")]
    pub scan_speed: f64,
    /// Hatch line spacing, µm.
    #[serde(default = "default_hatch")]
    pub hatch: f64,
    /// mm
    #[serde(default = "default_stripe_width")]
    pub stripe_width: f64,
    /// mm
    #[serde(default = "default_overlap")]
    pub stripe_overlap: f64,
    /// Degrees added to the stripe orientation each layer.
    #[serde(default = "default_rotation")]
    pub rotation_per_layer: f64,
    /// µm
    #[serde(default = "default_thickness")]
    pub layer_thickness: f64,
    /// Path sampling step, mm.
    #[serde(default = "default_sample")]
    pub sample_step: f64,
}

impl Default for ScanParameters {
    fn default() -> Self {
        ScanParameters {
            scan_speed: default_speed(),
            hatch: default_hatch(),
            stripe_width: default_stripe_width(),
            stripe_overlap: default_overlap(),
            rotation_per_layer: default_rotation(),
            layer_thickness: default_thickness(),
            sample_step: default_sample(),
        }
    }
}

impl ScanParameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scan_speed", self.scan_speed),
            ("hatch", self.hatch),
            ("stripe_width", self.stripe_width),
            ("rotation_per_layer", self.rotation_per_layer),
            ("layer_thickness", self.layer_thickness),
            ("sample_step", self.sample_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("scan parameter {name} must be positive, got {v}")));
            }
        }
        if !(self.stripe_overlap >= 0.0 && self.stripe_overlap < self.stripe_width) {
            return Err(Error::Config(format!(
                "stripe_overlap must be in [0, stripe_width), got {}",
                self.stripe_overlap
            )));
        }
        if self.sample_step > self.hatch / 1000.0 {
            return Err(Error::Config("sample_step must not exceed the hatch spacing".into()));
        }
        Ok(())
    }

    /// Stripe orientation of a layer in degrees, in `[0, 180)`.
    pub fn angle_deg(&self, layer: usize) -> f64 {
        (layer as f64 * self.rotation_per_layer).rem_euclid(180.0)
    }

    /// Path length travelled between consecutive frames, mm.
    pub fn advance_per_frame(&self, fps: f64) -> f64 {
        self.scan_speed / fps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub pixel: (usize, usize),
    /// Seconds after the laser starts the layer.
    pub time: f64,
    /// Plate position, mm.
    pub position: (f64, f64),
}

/// Timed laser path over one layer, clipped to the part.
#[derive(Debug, Clone)]
pub struct ScanPath {
    pub layer: usize,
    pub angle_deg: f64,
    pub stripes: usize,
    pub hatch_lines: usize,
    pub samples: Vec<PathSample>,
    /// In-part path length, mm.
    pub length_mm: f64,
    pub duration_s: f64,
    /// Pixels whose centers lie where neighbouring stripes overlap.
    pub overlap_pixels: Vec<(usize, usize)>,
}

impl ScanPath {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Bi-directional stripe hatching of the mask.
///
/// Stripes are bands `stripe_width` wide across the layer orientation,
/// stepped by `stripe_width − stripe_overlap` and visited in order. Inside a
/// stripe, hatch lines run across the band `hatch` apart, alternating
/// direction. Time advances only while the laser is over the part.
pub fn generate_scan_path(mask: &LayerMask, params: &ScanParameters, layer: usize) -> Result<ScanPath> {
    params.validate()?;
    let angle_deg = params.angle_deg(layer);
    let mut path = ScanPath {
        layer,
        angle_deg,
        stripes: 0,
        hatch_lines: 0,
        samples: Vec::new(),
        length_mm: 0.0,
        duration_s: 0.0,
        overlap_pixels: Vec::new(),
    };
    if mask.is_empty() {
        return Ok(path);
    }
    let reg = &mask.registration;
    let (w, h) = reg.dims();
    let inside = mask.to_bitmap();
    let theta = angle_deg.to_radians();
    let along = (theta.cos(), theta.sin());
    let across = (-theta.sin(), theta.cos());
    let dot = |p: (f64, f64), d: (f64, f64)| p.0 * d.0 + p.1 * d.1;

    let half = reg.pitch_mm() / 2.0;
    let (mut amin, mut amax, mut nmin, mut nmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &mask.pixels {
        let c = reg.pixel_to_world((x as f64, y as f64));
        for (dx, dy) in [(-half, -half), (half, -half), (-half, half), (half, half)] {
            let p = (c.0 + dx, c.1 + dy);
            amin = amin.min(dot(p, along));
            amax = amax.max(dot(p, along));
            nmin = nmin.min(dot(p, across));
            nmax = nmax.max(dot(p, across));
        }
    }
    let step = params.stripe_width - params.stripe_overlap;
    let extent = nmax - nmin;
    let stripes = ((extent - params.stripe_overlap) / step - 1e-9).ceil().max(1.0) as usize;
    path.stripes = stripes;

    let hatch = params.hatch / 1000.0;
    let ds = params.sample_step;
    let mut t = 0.0;
    let mut line_index = 0usize;
    for k in 0..stripes {
        let n0 = nmin + k as f64 * step;
        let n1 = (n0 + params.stripe_width).min(nmax);
        let samples_per_line = ((n1 - n0) / ds).floor() as usize + 1;
        let mut a = amin + hatch / 2.0;
        while a < amax {
            let forward = line_index % 2 == 0;
            line_index += 1;
            for s in 0..samples_per_line {
                let n = if forward { n0 + s as f64 * ds } else { n1 - s as f64 * ds };
                let pos = (a * along.0 + n * across.0, a * along.1 + n * across.1);
                let Some((px, py)) = reg.pixel_of(pos) else { continue };
                if !inside[py * w + px] {
                    continue;
                }
                path.samples.push(PathSample {
                    pixel: (px, py),
                    time: t,
                    position: pos,
                });
                t += ds / params.scan_speed;
            }
            a += hatch;
        }
    }
    path.hatch_lines = line_index;
    path.length_mm = path.samples.len() as f64 * ds;
    path.duration_s = t;

    if stripes > 1 {
        for &(x, y) in &mask.pixels {
            let n = dot(reg.pixel_to_world((x as f64, y as f64)), across) - nmin;
            let in_band = (1..stripes).any(|k| {
                let lo = k as f64 * step;
                n >= lo - half && n <= lo + params.stripe_overlap + half
            });
            if in_band {
                path.overlap_pixels.push((x, y));
            }
        }
    }
    debug_assert!(path.samples.iter().all(|s| s.pixel.0 < w && s.pixel.1 < h));
    Ok(path)
}

/// Visit time of each mask pixel: the time of the path sample closest to its
/// center (earliest on ties). Row-major over the registration frame.
pub fn pixel_visit_times(path: &ScanPath, mask: &LayerMask) -> Vec<Option<f64>> {
    let reg = &mask.registration;
    let (w, h) = reg.dims();
    let mut best: Vec<Option<(f64, f64)>> = vec![None; w * h];
    for s in &path.samples {
        let c = reg.pixel_to_world((s.pixel.0 as f64, s.pixel.1 as f64));
        let d2 = (s.position.0 - c.0).powi(2) + (s.position.1 - c.1).powi(2);
        let slot = &mut best[s.pixel.1 * w + s.pixel.0];
        match slot {
            Some((bd, _)) if *bd <= d2 => {}
            _ => *slot = Some((d2, s.time)),
        }
    }
    best.into_iter().map(|b| b.map(|(_, t)| t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{layer_mask, voxelize_parts, TriangleMesh, DEFAULT_PITCH_UM};
    use crate::spatial::PixelGridFrame;

    fn square_mask(side_mm: f64) -> LayerMask {
        let h = side_mm / 2.0;
        let b = TriangleMesh::cuboid([-h, -h, 0.0], [h, h, 0.04]);
        let v = voxelize_parts(&[("sq".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        layer_mask(&v, 0, &PixelGridFrame::centered(360.0, 120, 100).unwrap()).unwrap()
    }

    #[test]
    fn demo_block_has_two_stripes() {
        let m = square_mask(19.44);
        assert_eq!(m.len(), 54 * 54);
        let p = generate_scan_path(&m, &ScanParameters::default(), 0).unwrap();
        assert_eq!(p.stripes, 2);
        assert!((p.duration_s - p.length_mm / 960.0).abs() < 1e-9);
        let visits = pixel_visit_times(&p, &m);
        assert_eq!(visits.iter().flatten().count(), m.len());
        assert!(!p.overlap_pixels.is_empty());
    }

    #[test]
    fn rotation_between_layers() {
        let s = ScanParameters::default();
        assert!((s.angle_deg(1) - s.angle_deg(0) - 66.7).abs() < 1e-12);
        assert!((s.angle_deg(3) - (200.1 - 180.0)).abs() < 1e-9);
        assert!((s.advance_per_frame(30.0) - 32.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_gives_empty_path() {
        let reg = PixelGridFrame::centered(360.0, 10, 10).unwrap();
        let p = generate_scan_path(&LayerMask::empty(0, reg), &ScanParameters::default(), 0).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn hatch_lines_alternate_direction() {
        let m = square_mask(3.6);
        let p = generate_scan_path(&m, &ScanParameters::default(), 0).unwrap();
        // At 0° the hatch lines run along y; consecutive lines reverse.
        let first = &p.samples[0];
        let later = p.samples.iter().find(|s| (s.position.0 - first.position.0).abs() > 0.1).unwrap();
        let next = p.samples.iter().skip_while(|s| s.time <= later.time).next().unwrap();
        assert!(first.position.1 < p.samples[1].position.1);
        assert!(next.position.1 < later.position.1);
    }
}
