use std::fmt::Write as _;

use super::VoxelFeatureStore;
use crate::error::{Error, Result};
use crate::features::FeatureId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Vtk,
    Pgm,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "vtk" => Ok(ExportFormat::Vtk),
            "pgm" | "heatmap" => Ok(ExportFormat::Pgm),
            _ => Err(Error::Config(format!("unknown export format {s:?}; expected csv, vtk or pgm"))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Vtk => "vtk",
            ExportFormat::Pgm => "pgm",
        }
    }

    pub fn export(self, store: &VoxelFeatureStore, layer: u32, feature_id: u8) -> Result<Vec<u8>> {
        match self {
            ExportFormat::Csv => export_csv(store, layer, feature_id).map(String::into_bytes),
            ExportFormat::Vtk => export_vtk(store, layer, feature_id).map(String::into_bytes),
            ExportFormat::Pgm => export_pgm(store, layer, feature_id),
        }
    }
}

/// `i,j,layer,value` rows for the valid entries of one block.
pub fn export_csv(store: &VoxelFeatureStore, layer: u32, feature_id: u8) -> Result<String> {
    let block = store.block(layer, feature_id)?;
    let mut out = String::from("i,j,layer,value\n");
    for &(v, x) in &block.entries {
        if x.is_nan() {
            continue;
        }
        let (i, j, _) = store.header.coords_of(v);
        writeln!(out, "{i},{j},{layer},{x}").unwrap();
    }
    Ok(out)
}

/// One layer of a feature as a dense plane; NaN where absent or invalid.
fn layer_plane(store: &VoxelFeatureStore, layer: u32, feature_id: u8) -> Result<Vec<f32>> {
    let block = store.block(layer, feature_id)?;
    let [nx, ny, _] = store.header.dims;
    let mut plane = vec![f32::NAN; nx as usize * ny as usize];
    for &(v, x) in &block.entries {
        let (i, j, _) = store.header.coords_of(v);
        plane[(j * nx + i) as usize] = x;
    }
    Ok(plane)
}

fn field_name(feature_id: u8) -> String {
    FeatureId::from_code(feature_id).map_or_else(|| format!("feature_{feature_id}"), |f| f.name().to_string())
}

/// Legacy ASCII VTK structured-points dataset holding one layer.
pub fn export_vtk(store: &VoxelFeatureStore, layer: u32, feature_id: u8) -> Result<String> {
    let plane = layer_plane(store, layer, feature_id)?;
    let [nx, ny, _] = store.header.dims;
    let [px, py, pz] = store.header.pitch_um.map(|p| p as f64 / 1000.0);
    let [ox, oy] = store.origin_mm().unwrap_or([0.0, 0.0]);
    let mut out = String::new();
    writeln!(out, "# vtk DataFile Version 3.0").unwrap();
    writeln!(out, "{} layer {layer}", field_name(feature_id)).unwrap();
    writeln!(out, "ASCII").unwrap();
    writeln!(out, "DATASET STRUCTURED_POINTS").unwrap();
    writeln!(out, "DIMENSIONS {nx} {ny} 1").unwrap();
    // Point data sits at voxel centers.
    writeln!(out, "ORIGIN {} {} {}", ox + px / 2.0, oy + py / 2.0, (layer as f64 + 0.5) * pz).unwrap();
    writeln!(out, "SPACING {px} {py} {pz}").unwrap();
    writeln!(out, "POINT_DATA {}", plane.len()).unwrap();
    writeln!(out, "SCALARS {} float 1", field_name(feature_id)).unwrap();
    writeln!(out, "LOOKUP_TABLE default").unwrap();
    for row in plane.chunks(nx as usize) {
        let line: Vec<String> = row
            .iter()
            .map(|v| if v.is_nan() { "nan".to_string() } else { v.to_string() })
            .collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    debug_assert_eq!(plane.len(), (nx * ny) as usize);
    Ok(out)
}

/// Grid read back from a VTK structured-points file.
#[derive(Debug, Clone, PartialEq)]
pub struct VtkGrid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub name: String,
    pub values: Vec<f32>,
}

/// Minimal reader for the files [`export_vtk`] writes.
pub fn parse_vtk(text: &str) -> Result<VtkGrid> {
    let bad = |m: &str| Error::Format(format!("vtk: {m}"));
    let mut lines = text.lines();
    if !lines.next().is_some_and(|l| l.starts_with("# vtk DataFile")) {
        return Err(bad("missing version line"));
    }
    lines.next();
    if lines.next().map(str::trim) != Some("ASCII") {
        return Err(bad("only ASCII files are supported"));
    }
    let mut dims = None;
    let mut origin = [0.0; 3];
    let mut spacing = [1.0; 3];
    let mut name = String::new();
    let mut values = Vec::new();
    let mut in_data = false;
    let three = |rest: &[&str]| -> Result<[f64; 3]> {
        if rest.len() != 3 {
            return Err(bad("expected three numbers"));
        }
        let mut v = [0.0; 3];
        for (slot, s) in v.iter_mut().zip(rest) {
            *slot = s.parse().map_err(|_| bad("bad number"))?;
        }
        Ok(v)
    };
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        if in_data {
            for t in tok {
                values.push(t.parse::<f32>().map_err(|_| bad("bad scalar"))?);
            }
            continue;
        }
        match tok[0] {
            "DATASET" if tok.get(1) != Some(&"STRUCTURED_POINTS") => return Err(bad("not structured points")),
            "DIMENSIONS" => dims = Some(three(&tok[1..])?.map(|d| d as usize)),
            "ORIGIN" => origin = three(&tok[1..])?,
            "SPACING" | "ASPECT_RATIO" => spacing = three(&tok[1..])?,
            "SCALARS" => name = tok.get(1).unwrap_or(&"").to_string(),
            "LOOKUP_TABLE" => in_data = true,
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| bad("missing DIMENSIONS"))?;
    if values.len() != dims.iter().product::<usize>() {
        return Err(bad(&format!("{} values for dimensions {dims:?}", values.len())));
    }
    Ok(VtkGrid {
        dims,
        origin,
        spacing,
        name,
        values,
    })
}

/// 16-bit binary PGM heat map, normalized over the valid values; invalid
/// pixels are black.
pub fn export_pgm(store: &VoxelFeatureStore, layer: u32, feature_id: u8) -> Result<Vec<u8>> {
    let plane = layer_plane(store, layer, feature_id)?;
    let [nx, ny, _] = store.header.dims;
    let (lo, hi) = plane
        .iter()
        .filter(|v| !v.is_nan())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
    for &v in &plane {
        let level: u16 = if v.is_nan() {
            0
        } else if hi > lo {
            (((v - lo) / (hi - lo)) as f64 * 65535.0).round() as u16
        } else {
            65535
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}
