//! Perspective correction: homography estimation from plate markers, frame
//! warping, and the metric pixel grid anchored at the plate center.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::imageops::{Grid, Grid2D};

/// 3×3 projective map, normalized so `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: Matrix3::identity(),
        }
    }

    /// Builds from row-major coefficients and normalizes.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        Self::from_matrix(m)
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite homography coefficient".into()));
        }
        let s = m[(2, 2)];
        if s.abs() < 1e-15 {
            return Err(Error::Degenerate("h33 is zero; cannot normalize".into()));
        }
        let m = m / s;
        if m.determinant().abs() <= 1e-12 {
            return Err(Error::Degenerate(format!(
                "homography is singular (det {:e})",
                m.determinant()
            )));
        }
        Ok(Homography { m })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.m[(i, j)];
            }
        }
        r
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography not invertible".into()))?;
        Homography::from_matrix(inv)
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.m * first.m)
    }

    pub fn is_identity(&self) -> bool {
        self.m == Matrix3::identity()
    }

    pub fn apply(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        apply_homography(p, self)
    }
}

/// Multiply in homogeneous coordinates, then divide by the third component.
pub fn apply_homography(p: (f64, f64), h: &Homography) -> Result<(f64, f64)> {
    let v = h.m * Vector3::new(p.0, p.1, 1.0);
    let scale = h.m[(2, 0)].abs() * p.0.abs() + h.m[(2, 1)].abs() * p.1.abs() + 1.0;
    if v.z.abs() <= 1e-12 * scale {
        return Err(Error::Horizon { x: p.0, y: p.1 });
    }
    Ok((v.x / v.z, v.y / v.z))
}

/// A plate marker seen in the raw frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCorrespondence {
    /// Raw frame position, pixels.
    pub image: (f64, f64),
    /// Plate position, mm from the plate center.
    pub world: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct HomographyEstimate {
    /// Maps `image` coordinates onto `world` coordinates.
    pub homography: Homography,
    /// Largest distance between a mapped image point and its world point.
    pub max_residual: f64,
}

/// Similarity transform moving points to zero mean and mean distance √2.
fn normalizing_transform(pts: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.0 / n, sy + p.1 / n));
    let mean_dist = pts
        .iter()
        .map(|p| (p.0 - cx).hypot(p.1 - cy))
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform_all(t: &Matrix3<f64>, pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    pts.iter()
        .map(|p| {
            let v = t * Vector3::new(p.0, p.1, 1.0);
            (v.x / v.z, v.y / v.z)
        })
        .collect()
}

fn check_no_three_collinear(pts: &[(f64, f64)]) -> Result<()> {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let area = ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs();
                let scale = (b.0 - a.0).hypot(b.1 - a.1) * (c.0 - a.0).hypot(c.1 - a.1);
                if area <= 1e-9 * scale.max(1e-300) {
                    return Err(Error::Degenerate(format!(
                        "points {i}, {j}, {k} are collinear"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Exact solution for four correspondences with `h33 = 1`.
fn solve_four(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y, u, v) = (s.0, s.1, d.0, d.1);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("4-point system is singular".into()))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Least-squares DLT: right singular vector of the smallest singular value.
fn solve_dlt(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = src.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y, u, v) = (s.0, s.1, d.0, d.1);
        let r = 2 * i;
        let row0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(r, c)] = row0[c];
            a[(r + 1, c)] = row1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] <= 1e-12 * sv[order[8]] {
        return Err(Error::Degenerate(
            "design matrix rank below 8; correspondences do not fix a homography".into(),
        ));
    }
    let h = v_t.row(smallest);
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]))
}

/// Estimates the homography mapping each correspondence's `image` point to its
/// `world` point.
pub fn estimate_homography(corr: &[PointCorrespondence]) -> Result<HomographyEstimate> {
    if corr.len() < 4 {
        return Err(Error::Parameter(format!(
            "need at least 4 correspondences, got {}",
            corr.len()
        )));
    }
    if corr
        .iter()
        .any(|c| !(c.image.0.is_finite() && c.image.1.is_finite() && c.world.0.is_finite() && c.world.1.is_finite()))
    {
        return Err(Error::Parameter("non-finite correspondence coordinate".into()));
    }
    let src: Vec<(f64, f64)> = corr.iter().map(|c| c.image).collect();
    let dst: Vec<(f64, f64)> = corr.iter().map(|c| c.world).collect();
    let t_src = normalizing_transform(&src)?;
    let t_dst = normalizing_transform(&dst)?;
    let src_n = transform_all(&t_src, &src);
    let dst_n = transform_all(&t_dst, &dst);

    let h_n = if corr.len() == 4 {
        check_no_three_collinear(&src)?;
        check_no_three_collinear(&dst)?;
        solve_four(&src_n, &dst_n)?
    } else {
        solve_dlt(&src_n, &dst_n)?
    };
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
    let homography = Homography::from_matrix(t_dst_inv * h_n * t_src)?;

    let mut max_residual: f64 = 0.0;
    for c in corr {
        let p = homography.apply(c.image)?;
        max_residual = max_residual.max((p.0 - c.world.0).hypot(p.1 - c.world.1));
    }
    Ok(HomographyEstimate {
        homography,
        max_residual,
    })
}

/// Output of [`warp_frame`]: resampled values plus a coverage mask.
#[derive(Debug, Clone)]
pub struct WarpedFrame {
    pub grid: Grid2D,
    /// `false` where the source frame did not cover the output pixel; the grid
    /// holds [`WARP_FILL`] there.
    pub valid: Grid<bool>,
}

pub const WARP_FILL: f64 = 0.0;

/// Bilinear inverse-mapped warp. `h` maps source pixel coordinates to output
/// pixel coordinates (pixel centers at integer coordinates).
pub fn warp_frame<T>(frame: &Grid<T>, h: &Homography, out_dims: (usize, usize)) -> Result<WarpedFrame>
where
    T: Copy + Into<f64>,
{
    let inv = h.inverse()?;
    let (sw, sh) = frame.dims();
    let (ow, oh) = out_dims;
    let mut vals = vec![WARP_FILL; ow * oh];
    let mut valid = vec![false; ow * oh];
    let tol = 1e-9;
    for oy in 0..oh {
        for ox in 0..ow {
            let Ok((sx, sy)) = inv.apply((ox as f64, oy as f64)) else {
                continue;
            };
            if sx < -tol || sy < -tol || sx > (sw - 1) as f64 + tol || sy > (sh - 1) as f64 + tol {
                continue;
            }
            let sx = sx.clamp(0.0, (sw - 1) as f64);
            let sy = sy.clamp(0.0, (sh - 1) as f64);
            let x0 = (sx.floor() as usize).min(sw.saturating_sub(2));
            let y0 = (sy.floor() as usize).min(sh.saturating_sub(2));
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let v00: f64 = frame.get(x0, y0).into();
            let v10: f64 = frame.get(x1, y0).into();
            let v01: f64 = frame.get(x0, y1).into();
            let v11: f64 = frame.get(x1, y1).into();
            let top = v00 + fx * (v10 - v00);
            let bottom = v01 + fx * (v11 - v01);
            let i = oy * ow + ox;
            vals[i] = top + fy * (bottom - top);
            valid[i] = true;
        }
    }
    Ok(WarpedFrame {
        grid: Grid2D::from_vec(ow, oh, vals)?,
        valid: Grid::from_vec(ow, oh, valid)?,
    })
}

/// µm per pixel from two pixel positions a known distance apart.
pub fn estimate_pixel_pitch(p1: (f64, f64), p2: (f64, f64), known_length_mm: f64) -> Result<f64> {
    if !(known_length_mm > 0.0) {
        return Err(Error::Parameter(format!(
            "known length must be positive, got {known_length_mm}"
        )));
    }
    let d = (p2.0 - p1.0).hypot(p2.1 - p1.1);
    if !(d > 0.0) {
        return Err(Error::Parameter("pixel points coincide".into()));
    }
    Ok(known_length_mm * 1000.0 / d)
}

/// Metric pixel grid of perspective-corrected frames.
///
/// Pixel `(i, j)` covers plate coordinates
/// `[(i − ox)·p, (i − ox + 1)·p) × [(j − oy)·p, (j − oy + 1)·p)` in mm, so the
/// plate center is the lower corner of `origin_pixel` and a plate position
/// `k·p` along x lands in pixel `ox + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGridFrame {
    pub pitch_um: f64,
    pub origin_pixel: (usize, usize),
    pub width: usize,
    pub height: usize,
}

impl PixelGridFrame {
    pub fn new(pitch_um: f64, origin_pixel: (usize, usize), width: usize, height: usize) -> Result<Self> {
        if !(pitch_um > 0.0) {
            return Err(Error::Parameter(format!("pitch must be positive, got {pitch_um}")));
        }
        if origin_pixel.0 >= width || origin_pixel.1 >= height {
            return Err(Error::Parameter(format!(
                "origin pixel {origin_pixel:?} outside {width}x{height}"
            )));
        }
        Ok(PixelGridFrame {
            pitch_um,
            origin_pixel,
            width,
            height,
        })
    }

    /// Grid of the given size with the plate center in the middle.
    pub fn centered(pitch_um: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(pitch_um, (width / 2, height / 2), width, height)
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pitch_um / 1000.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Continuous pixel coordinates (pixel centers at integers) of a plate point.
    pub fn world_to_pixel(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.pitch_mm();
        (
            self.origin_pixel.0 as f64 + p.0 / s - 0.5,
            self.origin_pixel.1 as f64 + p.1 / s - 0.5,
        )
    }

    pub fn pixel_to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.pitch_mm();
        (
            (p.0 + 0.5 - self.origin_pixel.0 as f64) * s,
            (p.1 + 0.5 - self.origin_pixel.1 as f64) * s,
        )
    }

    /// Pixel containing a plate point, if inside the frame.
    pub fn pixel_of(&self, p: (f64, f64)) -> Option<(usize, usize)> {
        let (u, v) = self.world_to_pixel(p);
        let (i, j) = ((u + 0.5).floor(), (v + 0.5).floor());
        (i >= 0.0 && j >= 0.0 && i < self.width as f64 && j < self.height as f64)
            .then_some((i as usize, j as usize))
    }
}

/// Correction homography mapping raw pixel coordinates onto `grid` pixels,
/// from plate-marker correspondences.
pub fn correction_homography(corr: &[PointCorrespondence], grid: &PixelGridFrame) -> Result<HomographyEstimate> {
    let in_pixels: Vec<PointCorrespondence> = corr
        .iter()
        .map(|c| PointCorrespondence {
            image: c.image,
            world: grid.world_to_pixel(c.world),
        })
        .collect();
    estimate_homography(&in_pixels)
}

/// Calibration plate hole positions (mm): the four corners of the 50, 100 and
/// 150 mm squares, innermost first.
pub fn plate_square_corners() -> Vec<(f64, f64)> {
    [50.0, 100.0, 150.0]
        .iter()
        .flat_map(|side| {
            let h = side / 2.0;
            [(-h, -h), (h, -h), (h, h), (-h, h)]
        })
        .collect()
}

/// All plate holes: corners and edge midpoints of the three squares, plus the center.
pub fn plate_markers() -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0)];
    for side in [50.0, 100.0, 150.0] {
        let h: f64 = side / 2.0;
        out.extend([
            (-h, -h),
            (0.0, -h),
            (h, -h),
            (h, 0.0),
            (h, h),
            (0.0, h),
            (-h, h),
            (-h, 0.0),
        ]);
    }
    out
}

/// Parses `world_x_mm,world_y_mm,image_x_px,image_y_px` lines; `#` starts a comment.
pub fn parse_correspondences(text: &str) -> Result<Vec<PointCorrespondence>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "correspondence line {}: expected 4 fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| {
                Error::Config(format!("correspondence line {}: bad number {f:?}", n + 1))
            })?;
        }
        out.push(PointCorrespondence {
            world: (v[0], v[1]),
            image: (v[2], v[3]),
        });
    }
    Ok(out)
}

pub fn format_correspondences(corr: &[PointCorrespondence]) -> String {
    let mut s = String::from("# world_x_mm,world_y_mm,image_x_px,image_y_px\n");
    for c in corr {
        s.push_str(&format!(
            "{},{},{},{}\n",
            c.world.0, c.world.1, c.image.0, c.image.1
        ));
    }
    s
}
