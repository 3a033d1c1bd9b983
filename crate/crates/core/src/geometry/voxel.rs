use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stl::{BoundingBox, Triangle, TriangleMesh};
use crate::error::{Error, Result};
use crate::imageops::Grid2D;
use crate::spatial::PixelGridFrame;

pub const DEFAULT_PITCH_UM: [f64; 3] = [360.0, 360.0, 40.0];

/// Relative size of the deterministic ray offset used after a degenerate hit.
const PERTURBATION: f64 = 1e-4;
const MAX_PERTURBATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub id: u16,
    pub name: String,
    pub voxel_count: u32,
}

/// Part geometry sampled on a camera-aligned voxel grid.
///
/// Voxel `(i, j, k)` spans `origin + [i, i+1)·pitch` in x and y and
/// `[k, k+1)·pitch.z` in z, so `k` is the build layer it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMesh {
    pitch_um: [f64; 3],
    origin_mm: [f64; 2],
    dims: [usize; 3],
    occupancy: Vec<u64>,
    part_of: Vec<u16>,
    parts: Vec<Part>,
    exact: bool,
}

impl VoxelMesh {
    pub fn pitch_um(&self) -> [f64; 3] {
        self.pitch_um
    }

    pub fn origin_mm(&self) -> [f64; 2] {
        self.origin_mm
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_total(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    /// False when any input mesh was not watertight.
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords_of(&self, index: usize) -> (usize, usize, usize) {
        let [nx, ny, _] = self.dims;
        (index % nx, (index / nx) % ny, index / (nx * ny))
    }

    pub fn is_occupied(&self, index: usize) -> bool {
        self.occupancy[index / 64] >> (index % 64) & 1 == 1
    }

    pub fn occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.is_occupied(self.linear_index(i, j, k))
    }

    /// Part id of a voxel, 0 when empty.
    pub fn part_at(&self, index: usize) -> u16 {
        self.part_of[index]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn layer_count(&self, k: usize) -> usize {
        let [nx, ny, _] = self.dims;
        (k * nx * ny..(k + 1) * nx * ny).filter(|&v| self.is_occupied(v)).count()
    }

    pub fn layer_of(&self, index: usize) -> usize {
        self.coords_of(index).2
    }

    /// Occupied voxel indices in increasing order.
    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.voxel_total()).filter(|&v| self.is_occupied(v))
    }

    /// Rebuilds a mesh from stored parts; `part_of` holds one id per voxel.
    pub fn from_parts(
        pitch_um: [f64; 3],
        origin_mm: [f64; 2],
        dims: [usize; 3],
        part_of: Vec<u16>,
        parts: Vec<Part>,
        exact: bool,
    ) -> Result<Self> {
        let total: usize = dims.iter().product();
        if part_of.len() != total || total == 0 {
            return Err(Error::Parameter(format!(
                "voxel part map has {} entries for dims {dims:?}",
                part_of.len()
            )));
        }
        let mut occupancy = vec![0u64; total.div_ceil(64)];
        for (v, &p) in part_of.iter().enumerate() {
            if p != 0 {
                occupancy[v / 64] |= 1 << (v % 64);
            }
        }
        Ok(VoxelMesh {
            pitch_um,
            origin_mm,
            dims,
            occupancy,
            part_of,
            parts,
            exact,
        })
    }
}

fn validate_pitch(pitch_um: [f64; 3]) -> Result<()> {
    if pitch_um.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::Parameter(format!("voxel pitch must be positive, got {pitch_um:?}")));
    }
    Ok(())
}

/// Grid corner snapped down to a whole number of pitches from the plate
/// center, so voxel columns coincide with corrected-frame pixels.
pub fn aligned_origin(bbox: &BoundingBox, pitch_um: [f64; 3]) -> [f64; 2] {
    let (px, py) = (pitch_um[0] / 1000.0, pitch_um[1] / 1000.0);
    [snap_floor(bbox.min[0] / px) * px, snap_floor(bbox.min[1] / py) * py]
}

fn snap_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.floor()
    }
}

fn snap_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.ceil()
    }
}

pub fn voxelize(mesh: &TriangleMesh, pitch_um: [f64; 3], origin_mm: [f64; 2]) -> Result<VoxelMesh> {
    voxelize_parts(&[("part".to_string(), mesh.clone())], pitch_um, Some(origin_mm))
}

/// Voxelizes several parts into one grid. With no origin given, the grid
/// corner is snapped with [`aligned_origin`]. Where parts overlap the first
/// part keeps the voxel.
pub fn voxelize_parts(
    parts: &[(String, TriangleMesh)],
    pitch_um: [f64; 3],
    origin_mm: Option<[f64; 2]>,
) -> Result<VoxelMesh> {
    validate_pitch(pitch_um)?;
    if parts.is_empty() {
        return Err(Error::Parameter("no parts to voxelize".into()));
    }
    if parts.len() > u16::MAX as usize {
        return Err(Error::Parameter(format!("too many parts: {}", parts.len())));
    }
    let mut bbox = parts[0].1.bounding_box();
    for (_, m) in &parts[1..] {
        let b = m.bounding_box();
        for a in 0..3 {
            bbox.min[a] = bbox.min[a].min(b.min[a]);
            bbox.max[a] = bbox.max[a].max(b.max[a]);
        }
    }
    if bbox.min[2] < -1e-9 {
        return Err(Error::Parameter(format!("geometry extends below the plate (z = {})", bbox.min[2])));
    }
    let origin = origin_mm.unwrap_or_else(|| aligned_origin(&bbox, pitch_um));
    let p = pitch_um.map(|v| v / 1000.0);
    let extent = |a: usize, lo: f64| snap_ceil((bbox.max[a] - lo) / p[a]).max(1.0) as usize;
    let dims = [extent(0, origin[0]), extent(1, origin[1]), extent(2, 0.0)];
    let total: usize = dims.iter().product();
    if total > u32::MAX as usize {
        return Err(Error::Parameter(format!("voxel grid {dims:?} too large for 32-bit indices")));
    }

    let mut part_of = vec![0u16; total];
    let mut table = Vec::with_capacity(parts.len());
    let mut exact = true;
    for (n, (name, mesh)) in parts.iter().enumerate() {
        let id = n as u16 + 1;
        if !mesh.is_watertight() {
            log::warn!("part '{name}' is not watertight; voxelization is best effort");
            exact = false;
        }
        let inside = voxelize_one(mesh, p, origin, dims);
        let mut count = 0u32;
        let mut overlap = 0usize;
        for (v, hit) in inside.into_iter().enumerate() {
            if !hit {
                continue;
            }
            if part_of[v] == 0 {
                part_of[v] = id;
                count += 1;
            } else {
                overlap += 1;
            }
        }
        if overlap > 0 {
            log::warn!("part '{name}' overlaps earlier parts in {overlap} voxel(s)");
        }
        table.push(Part {
            id,
            name: name.clone(),
            voxel_count: count,
        });
    }
    VoxelMesh::from_parts(pitch_um, origin, dims, part_of, table, exact)
}

enum Crossing {
    Miss,
    Hit(f64),
    Degenerate,
}

/// Intersection of the line `{(t, y, z)}` with a triangle.
fn cross_x(t: &Triangle, y: f64, z: f64) -> Crossing {
    let [a, b, c] = t.vertices;
    let det = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2]);
    let scale = ((b[1] - a[1]).abs() + (c[1] - a[1]).abs()) * ((b[2] - a[2]).abs() + (c[2] - a[2]).abs());
    if det.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        // Triangle contains the x direction; parity ignores it unless the ray
        // runs inside its plane.
        return Crossing::Miss;
    }
    let (dy, dz) = (y - a[1], z - a[2]);
    let u = (dy * (c[2] - a[2]) - (c[1] - a[1]) * dz) / det;
    let v = ((b[1] - a[1]) * dz - dy * (b[2] - a[2])) / det;
    let w = 1.0 - u - v;
    const EPS: f64 = 1e-9;
    if u < -EPS || v < -EPS || w < -EPS {
        return Crossing::Miss;
    }
    if u < EPS || v < EPS || w < EPS {
        return Crossing::Degenerate;
    }
    Crossing::Hit(w * a[0] + u * b[0] + v * c[0])
}

fn row_crossings(tris: &[&Triangle], y: f64, z: f64) -> Option<Vec<f64>> {
    let mut xs = Vec::new();
    for t in tris {
        match cross_x(t, y, z) {
            Crossing::Miss => {}
            Crossing::Hit(x) => xs.push(x),
            Crossing::Degenerate => return None,
        }
    }
    xs.sort_by(f64::total_cmp);
    Some(xs)
}

fn voxelize_one(mesh: &TriangleMesh, p: [f64; 3], origin: [f64; 2], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let slices: Vec<Vec<bool>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let zc = (k as f64 + 0.5) * p[2];
            let tris: Vec<&Triangle> = mesh
                .triangles
                .iter()
                .filter(|t| {
                    let lo = t.vertices.iter().map(|v| v[2]).fold(f64::INFINITY, f64::min);
                    let hi = t.vertices.iter().map(|v| v[2]).fold(f64::NEG_INFINITY, f64::max);
                    lo <= zc + p[2] && hi >= zc - p[2]
                })
                .collect();
            let mut slice = vec![false; nx * ny];
            for j in 0..ny {
                let yc = origin[1] + (j as f64 + 0.5) * p[1];
                let mut xs = None;
                for attempt in 0..=MAX_PERTURBATIONS {
                    let s = attempt as f64 * PERTURBATION;
                    xs = row_crossings(&tris, yc + s * p[1], zc + 0.618_033_988_75 * s * p[2]);
                    if xs.is_some() {
                        break;
                    }
                }
                let Some(xs) = xs else {
                    log::warn!("unresolved degenerate ray at row j={j}, layer {k}; treated as empty");
                    continue;
                };
                for i in 0..nx {
                    let xc = origin[0] + (i as f64 + 0.5) * p[0];
                    let beyond = xs.len() - xs.partition_point(|&x| x <= xc);
                    slice[j * nx + i] = beyond % 2 == 1;
                }
            }
            slice
        })
        .collect();
    slices.concat()
}

/// Pixels covered by one voxel layer, in increasing voxel-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub layer: usize,
    pub pixels: Vec<(usize, usize)>,
    pub voxel_indices: Vec<u32>,
    pub registration: PixelGridFrame,
}

impl LayerMask {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Row-major boolean image of the mask.
    pub fn to_bitmap(&self) -> Vec<bool> {
        let (w, h) = self.registration.dims();
        let mut out = vec![false; w * h];
        for &(x, y) in &self.pixels {
            out[y * w + x] = true;
        }
        out
    }

    /// Mask with no pixels, for layers above the part.
    pub fn empty(layer: usize, registration: PixelGridFrame) -> Self {
        LayerMask {
            layer,
            pixels: Vec::new(),
            voxel_indices: Vec::new(),
            registration,
        }
    }
}

/// Offset in whole pitches of the voxel grid corner from the plate center.
fn grid_offset(origin_mm: f64, pitch_um: f64) -> Result<i64> {
    let steps = origin_mm * 1000.0 / pitch_um;
    let r = steps.round();
    if (steps - r).abs() > 1e-6 {
        return Err(Error::Parameter(format!(
            "voxel grid origin {origin_mm} mm is not a whole number of {pitch_um} um pitches from the plate center"
        )));
    }
    Ok(r as i64)
}

/// Registers one voxel layer onto the corrected pixel grid: the voxel whose
/// footprint starts at the plate center lands on `origin_pixel`, and each
/// voxel step is one pixel.
pub fn layer_mask(vox: &VoxelMesh, layer: usize, reg: &PixelGridFrame) -> Result<LayerMask> {
    let [nx, ny, nz] = vox.dims;
    if layer >= nz {
        return Err(Error::Parameter(format!("layer {layer} outside voxel grid of {nz} layers")));
    }
    for a in 0..2 {
        if (vox.pitch_um[a] - reg.pitch_um).abs() > 1e-9 * reg.pitch_um {
            return Err(Error::Parameter(format!(
                "voxel pitch {} um differs from pixel pitch {} um",
                vox.pitch_um[a], reg.pitch_um
            )));
        }
    }
    let gx = grid_offset(vox.origin_mm[0], vox.pitch_um[0])? + reg.origin_pixel.0 as i64;
    let gy = grid_offset(vox.origin_mm[1], vox.pitch_um[1])? + reg.origin_pixel.1 as i64;
    let mut pixels = Vec::new();
    let mut voxel_indices = Vec::new();
    let mut outside: Option<(usize, usize)> = None;
    let mut outside_count = 0;
    let base = layer * nx * ny;
    for j in 0..ny {
        for i in 0..nx {
            let v = base + j * nx + i;
            if !vox.is_occupied(v) {
                continue;
            }
            let (x, y) = (gx + i as i64, gy + j as i64);
            if x < 0 || y < 0 || x >= reg.width as i64 || y >= reg.height as i64 {
                outside_count += 1;
                outside.get_or_insert((i, j));
                continue;
            }
            pixels.push((x as usize, y as usize));
            voxel_indices.push(v as u32);
        }
    }
    if let Some((i, j)) = outside {
        return Err(Error::OutOfFrame {
            layer,
            count: outside_count,
            width: reg.width,
            height: reg.height,
            i,
            j,
        });
    }
    Ok(LayerMask {
        layer,
        pixels,
        voxel_indices,
        registration: *reg,
    })
}

/// Samples a feature grid at the mask pixels, one `(voxel index, value)` per pixel.
pub fn map_layer_feature(feature: &Grid2D, mask: &LayerMask) -> Result<Vec<(u32, f64)>> {
    if feature.dims() != mask.registration.dims() {
        return Err(Error::Dimensions {
            expected: mask.registration.dims(),
            actual: feature.dims(),
        });
    }
    Ok(mask
        .voxel_indices
        .iter()
        .zip(&mask.pixels)
        .map(|(&v, &(x, y))| (v, feature.get(x, y)))
        .collect())
}

/// Inverse of [`map_layer_feature`]: paints entries back onto a full frame.
pub fn unmap_layer_feature(entries: &[(u32, f64)], mask: &LayerMask, fill: f64) -> Result<Grid2D> {
    let (w, h) = mask.registration.dims();
    let mut out = Grid2D::filled(w, h, fill)?;
    let mut cursor = 0;
    for &(v, value) in entries {
        // Both lists are sorted by voxel index.
        while cursor < mask.voxel_indices.len() && mask.voxel_indices[cursor] < v {
            cursor += 1;
        }
        if mask.voxel_indices.get(cursor) != Some(&v) {
            return Err(Error::Parameter(format!("voxel {v} is not part of layer {}", mask.layer)));
        }
        let (x, y) = mask.pixels[cursor];
        out.set(x, y, value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plate(w: usize, h: usize) -> PixelGridFrame {
        PixelGridFrame::centered(360.0, w, h).unwrap()
    }

    #[test]
    fn box_fills_exact_count() {
        let b = TriangleMesh::cuboid([0.0; 3], [3.6, 3.6, 0.4]);
        let v = voxelize(&b, DEFAULT_PITCH_UM, [0.0, 0.0]).unwrap();
        assert_eq!(v.dims(), [10, 10, 10]);
        assert_eq!(v.occupied_count(), 1000);
        assert!(v.is_exact());
    }

    #[test]
    fn shift_by_pitch_moves_indices() {
        let b = TriangleMesh::cuboid([0.0; 3], [3.6, 3.6, 0.4]);
        let shifted = b.translated([0.36, 0.0, 0.0]);
        let v = voxelize(&shifted, DEFAULT_PITCH_UM, [0.0, 0.0]).unwrap();
        assert_eq!(v.occupied_count(), 1000);
        assert!(!v.occupied(0, 0, 0));
        assert!(v.occupied(1, 0, 0) && v.occupied(10, 9, 9));
    }

    #[test]
    fn single_voxel_registers_at_origin_pixel() {
        let b = TriangleMesh::cuboid([0.0; 3], [0.36, 0.36, 0.04]);
        let v = voxelize_parts(&[("a".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        let reg = plate(20, 10);
        let m = layer_mask(&v, 0, &reg).unwrap();
        assert_eq!(m.pixels, vec![reg.origin_pixel]);
    }

    #[test]
    fn step_in_x_is_one_pixel() {
        let b = TriangleMesh::cuboid([0.36, 0.0, 0.0], [0.72, 0.36, 0.04]);
        let v = voxelize_parts(&[("a".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        let reg = plate(20, 10);
        let m = layer_mask(&v, 0, &reg).unwrap();
        assert_eq!(m.pixels, vec![(reg.origin_pixel.0 + 1, reg.origin_pixel.1)]);
    }

    #[test]
    fn out_of_frame_is_reported() {
        let b = TriangleMesh::cuboid([-3.6, -3.6, 0.0], [3.6, 3.6, 0.04]);
        let v = voxelize_parts(&[("a".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        match layer_mask(&v, 0, &plate(12, 12)) {
            Err(Error::OutOfFrame { count, .. }) => assert_eq!(count, 400 - 144),
            other => panic!("expected out-of-frame, got {other:?}"),
        }
    }

    #[test]
    fn two_parts_share_grid() {
        let a = TriangleMesh::cuboid([0.0; 3], [0.72, 0.72, 0.08]);
        let b = TriangleMesh::cuboid([1.08, 0.0, 0.0], [1.44, 0.36, 0.04]);
        let v = voxelize_parts(&[("a".into(), a), ("b".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        assert_eq!(v.parts()[0].voxel_count, 8);
        assert_eq!(v.parts()[1].voxel_count, 1);
        assert_eq!(v.part_at(v.linear_index(3, 0, 0)), 2);
        assert_eq!(v.layer_count(1), 4);
    }

    #[test]
    fn open_mesh_flagged_inexact() {
        let mut b = TriangleMesh::cuboid([0.0; 3], [0.72, 0.72, 0.08]);
        b.triangles.pop();
        let v = voxelize(&b, DEFAULT_PITCH_UM, [0.0, 0.0]).unwrap();
        assert!(!v.is_exact());
    }

    #[test]
    fn map_and_unmap_round_trip() {
        let b = TriangleMesh::cuboid([0.0; 3], [1.08, 0.72, 0.04]);
        let v = voxelize_parts(&[("a".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        let reg = plate(8, 8);
        let m = layer_mask(&v, 0, &reg).unwrap();
        let f = Grid2D::from_fn(8, 8, |x, y| (x * 8 + y) as f64).unwrap();
        let e = map_layer_feature(&f, &m).unwrap();
        assert_eq!(e.len(), 6);
        let g = unmap_layer_feature(&e, &m, f64::NAN).unwrap();
        assert_eq!(map_layer_feature(&g, &m).unwrap(), e);
    }
}
