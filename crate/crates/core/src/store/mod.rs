//! Sparse per-voxel feature store.
//!
//! ```text
//! magic "IRVX" | version u32 | pitch_um f32 x3 | dims u32 x3
//! | part_count u32 | { id u16 | name_len u16 | name | voxel_count u32 }*
//! | { layer u32 | feature_id u8 | count u32 | { voxel u32 | value f32 }* }*
//! ```
//!
//! All little-endian. Blocks are ordered by `(layer, feature_id)`; entry
//! indices increase strictly within a block. Invalid feature values are NaN.

mod export;

use std::path::Path;

pub use export::{export_csv, export_pgm, export_vtk, parse_vtk, ExportFormat, VtkGrid};

use crate::error::{Error, Result};
use crate::geometry::{Part, VoxelMesh};

pub const STORE_MAGIC: &[u8; 4] = b"IRVX";
pub const STORE_VERSION: u32 = 1;
/// Block carrying the grid origin (entries 0 and 1, in pitches) and the
/// exactness flag (entry 2).
pub const GRID_BLOCK_ID: u8 = 0xFE;
/// Block holding a voxel cache's part ids.
pub const OCCUPANCY_BLOCK_ID: u8 = 0xFF;

const BLOCK_HEADER_LEN: usize = 9;
const ENTRY_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreHeader {
    pub pitch_um: [f32; 3],
    pub dims: [u32; 3],
    pub parts: Vec<Part>,
}

impl StoreHeader {
    pub fn for_mesh(vox: &VoxelMesh) -> Self {
        let d = vox.dims();
        StoreHeader {
            pitch_um: vox.pitch_um().map(|p| p as f32),
            dims: [d[0] as u32, d[1] as u32, d[2] as u32],
            parts: vox.parts().to_vec(),
        }
    }

    pub fn voxel_total(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    /// `(i, j, k)` of a linear voxel index.
    pub fn coords_of(&self, index: u32) -> (u32, u32, u32) {
        let [nx, ny, _] = self.dims;
        (index % nx, (index / nx) % ny, index / (nx * ny))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub layer: u32,
    pub feature_id: u8,
    pub entries: Vec<(u32, f32)>,
}

impl FeatureBlock {
    /// Values compared by bit pattern, so NaN entries round-trip.
    pub fn bits_eq(&self, other: &FeatureBlock) -> bool {
        self.layer == other.layer
            && self.feature_id == other.feature_id
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureStore {
    pub header: StoreHeader,
    pub blocks: Vec<FeatureBlock>,
}

impl VoxelFeatureStore {
    pub fn new(header: StoreHeader) -> Self {
        VoxelFeatureStore {
            header,
            blocks: Vec::new(),
        }
    }

    /// Adds a block, keeping blocks ordered.
    pub fn insert(&mut self, block: FeatureBlock) -> Result<()> {
        let key = (block.layer, block.feature_id);
        match self.blocks.binary_search_by_key(&key, |b| (b.layer, b.feature_id)) {
            Ok(_) => Err(Error::Parameter(format!(
                "layer {} feature {} already stored",
                block.layer, block.feature_id
            ))),
            Err(pos) => {
                self.blocks.insert(pos, block);
                Ok(())
            }
        }
    }

    pub fn block(&self, layer: u32, feature_id: u8) -> Result<&FeatureBlock> {
        self.blocks
            .binary_search_by_key(&(layer, feature_id), |b| (b.layer, b.feature_id))
            .map(|i| &self.blocks[i])
            .map_err(|_| Error::NotFound { layer, feature_id })
    }

    pub fn layers(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.blocks.iter().map(|b| b.layer).collect();
        l.dedup();
        l
    }

    /// Grid origin in mm from the plate center, when recorded.
    pub fn origin_mm(&self) -> Option<[f64; 2]> {
        let b = self.blocks.iter().find(|b| b.feature_id == GRID_BLOCK_ID)?;
        let get = |i: u32| b.entries.iter().find(|e| e.0 == i).map(|e| e.1 as f64);
        Some([
            get(0)? * self.header.pitch_um[0] as f64 / 1000.0,
            get(1)? * self.header.pitch_um[1] as f64 / 1000.0,
        ])
    }

    pub fn set_origin_mm(&mut self, origin_mm: [f64; 2], exact: bool) -> Result<()> {
        self.blocks.retain(|b| b.feature_id != GRID_BLOCK_ID);
        let steps = |o: f64, p: f32| (o * 1000.0 / p as f64).round() as f32;
        self.insert(FeatureBlock {
            layer: 0,
            feature_id: GRID_BLOCK_ID,
            entries: vec![
                (0, steps(origin_mm[0], self.header.pitch_um[0])),
                (1, steps(origin_mm[1], self.header.pitch_um[1])),
                (2, if exact { 1.0 } else { 0.0 }),
            ],
        })
    }

    pub fn bits_eq(&self, other: &VoxelFeatureStore) -> bool {
        self.header == other.header
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.bits_eq(b))
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.header.voxel_total();
        for w in self.blocks.windows(2) {
            if (w[0].layer, w[0].feature_id) >= (w[1].layer, w[1].feature_id) {
                return Err(Error::Parameter(format!(
                    "blocks out of order or repeated at layer {} feature {}",
                    w[1].layer, w[1].feature_id
                )));
            }
        }
        for b in &self.blocks {
            for w in b.entries.windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(Error::Parameter(format!(
                        "layer {} feature {}: voxel indices not strictly increasing at {}",
                        b.layer, b.feature_id, w[1].0
                    )));
                }
            }
            if b.feature_id < GRID_BLOCK_ID {
                if let Some(last) = b.entries.last() {
                    if last.0 as u64 >= total {
                        return Err(Error::Parameter(format!(
                            "layer {} feature {}: voxel {} outside grid of {total}",
                            b.layer, b.feature_id, last.0
                        )));
                    }
                }
            }
        }
        for p in &self.header.parts {
            if p.name.len() > u16::MAX as usize {
                return Err(Error::Parameter(format!("part name of {} bytes too long", p.name.len())));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for p in self.header.pitch_um {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for d in self.header.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.header.parts.len() as u32).to_le_bytes());
        for p in &self.header.parts {
            out.extend_from_slice(&p.id.to_le_bytes());
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.voxel_count.to_le_bytes());
        }
        for b in &self.blocks {
            out.extend_from_slice(&b.layer.to_le_bytes());
            out.push(b.feature_id);
            out.extend_from_slice(&(b.entries.len() as u32).to_le_bytes());
            for &(v, x) in &b.entries {
                out.extend_from_slice(&v.to_le_bytes());
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    fn encoded_len(&self) -> usize {
        let parts: usize = self.header.parts.iter().map(|p| 8 + p.name.len()).sum();
        let blocks: usize = self.blocks.iter().map(|b| BLOCK_HEADER_LEN + ENTRY_LEN * b.entries.len()).sum();
        36 + parts + blocks
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != STORE_MAGIC {
            return Err(Error::Format("not a voxel feature store (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let pitch_um = [r.f32("pitch")?, r.f32("pitch")?, r.f32("pitch")?];
        let dims = [r.u32("dims")?, r.u32("dims")?, r.u32("dims")?];
        let part_count = r.u32("part count")? as usize;
        // Each part needs at least 8 bytes; refuse counts the file cannot hold.
        if part_count > r.remaining() / 8 {
            return Err(r.corrupt(format!("{part_count} parts declared, file too short")));
        }
        let mut parts = Vec::with_capacity(part_count);
        for _ in 0..part_count {
            let id = r.u16("part id")?;
            let len = r.u16("part name length")? as usize;
            let name = String::from_utf8(r.take(len, "part name")?.to_vec())
                .map_err(|_| r.corrupt("part name is not UTF-8".into()))?;
            let voxel_count = r.u32("part voxel count")?;
            parts.push(Part { id, name, voxel_count });
        }
        let header = StoreHeader { pitch_um, dims, parts };
        let mut blocks = Vec::new();
        while r.remaining() > 0 {
            let start = r.pos;
            let layer = r.u32("block layer")?;
            let feature_id = r.take(1, "block feature id")?[0];
            let count = r.u32("block entry count")? as usize;
            let needed = count.checked_mul(ENTRY_LEN);
            if needed.map_or(true, |n| n > r.remaining()) {
                return Err(Error::Corrupt {
                    offset: start,
                    message: format!(
                        "block for layer {layer} feature {feature_id} declares {count} entries, {} bytes remain",
                        r.remaining()
                    ),
                });
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                entries.push((r.u32("entry")?, r.f32("entry")?));
            }
            blocks.push(FeatureBlock {
                layer,
                feature_id,
                entries,
            });
        }
        let store = VoxelFeatureStore { header, blocks };
        store.validate().map_err(|e| Error::Corrupt {
            offset: bytes.len(),
            message: e.to_string(),
        })?;
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn corrupt(&self, message: String) -> Error {
        Error::Corrupt {
            offset: self.pos,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Saves a voxel mesh in the store format: one occupancy block per layer
/// holding part ids, plus the grid block.
pub fn voxel_cache_store(vox: &VoxelMesh) -> Result<VoxelFeatureStore> {
    let mut store = VoxelFeatureStore::new(StoreHeader::for_mesh(vox));
    let [nx, ny, nz] = vox.dims();
    for k in 0..nz {
        let base = k * nx * ny;
        let entries: Vec<(u32, f32)> = (base..base + nx * ny)
            .filter(|&v| vox.is_occupied(v))
            .map(|v| (v as u32, vox.part_at(v) as f32))
            .collect();
        if !entries.is_empty() {
            store.insert(FeatureBlock {
                layer: k as u32,
                feature_id: OCCUPANCY_BLOCK_ID,
                entries,
            })?;
        }
    }
    store.set_origin_mm(vox.origin_mm(), vox.is_exact())?;
    Ok(store)
}

pub fn write_voxel_cache(vox: &VoxelMesh, path: &Path) -> Result<u64> {
    voxel_cache_store(vox)?.write(path)
}

pub fn read_voxel_cache(path: &Path) -> Result<VoxelMesh> {
    let store = VoxelFeatureStore::read(path)?;
    voxel_mesh_from_store(&store)
}

pub fn voxel_mesh_from_store(store: &VoxelFeatureStore) -> Result<VoxelMesh> {
    let h = &store.header;
    let origin = store
        .origin_mm()
        .ok_or_else(|| Error::Format("voxel cache lacks a grid block".into()))?;
    let exact = store
        .blocks
        .iter()
        .find(|b| b.feature_id == GRID_BLOCK_ID)
        .and_then(|b| b.entries.iter().find(|e| e.0 == 2))
        .map_or(true, |e| e.1 != 0.0);
    let total = h.voxel_total();
    if total > (1u64 << 32) {
        return Err(Error::Format(format!("voxel grid of {total} cells too large")));
    }
    let mut part_of = vec![0u16; total as usize];
    for b in store.blocks.iter().filter(|b| b.feature_id == OCCUPANCY_BLOCK_ID) {
        for &(v, id) in &b.entries {
            part_of[v as usize] = id as u16;
        }
    }
    VoxelMesh::from_parts(
        h.pitch_um.map(|p| p as f64),
        origin,
        h.dims.map(|d| d as usize),
        part_of,
        h.parts.clone(),
        exact,
    )
}

/// Raw-versus-stored size comparison of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionReport {
    pub raw_bytes: u64,
    pub stored_bytes: u64,
    pub ratio: f64,
}

/// The reduction the store should reach on full builds.
pub const REDUCTION_CLAIM: f64 = 0.99;

impl ReductionReport {
    pub fn meets_claim(&self) -> bool {
        self.ratio >= REDUCTION_CLAIM
    }
}

/// `ratio = 1 − stored/raw`, floored at 0 when the store is larger.
pub fn reduction_report(raw_bytes: u64, stored_bytes: u64) -> Result<ReductionReport> {
    if raw_bytes == 0 {
        return Err(Error::Parameter("raw byte count must be positive".into()));
    }
    Ok(ReductionReport {
        raw_bytes,
        stored_bytes,
        ratio: (1.0 - stored_bytes as f64 / raw_bytes as f64).max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{voxelize_parts, TriangleMesh, DEFAULT_PITCH_UM};

    fn sample() -> VoxelFeatureStore {
        let mut s = VoxelFeatureStore::new(StoreHeader {
            pitch_um: [360.0, 360.0, 40.0],
            dims: [4, 3, 2],
            parts: vec![Part {
                id: 1,
                name: "block".into(),
                voxel_count: 5,
            }],
        });
        s.insert(FeatureBlock {
            layer: 1,
            feature_id: 3,
            entries: vec![(12, 1.5), (13, f32::NAN), (20, -2.0)],
        })
        .unwrap();
        s.insert(FeatureBlock {
            layer: 0,
            feature_id: 200,
            entries: vec![(0, 7.0)],
        })
        .unwrap();
        s
    }

    #[test]
    fn round_trip_with_unknown_ids_and_nan() {
        let s = sample();
        assert_eq!(s.blocks[0].layer, 0);
        let back = VoxelFeatureStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert!(back.bits_eq(&s));
        assert_eq!(back.block(0, 200).unwrap().entries, vec![(0, 7.0)]);
        assert!(matches!(back.block(5, 1), Err(Error::NotFound { layer: 5, feature_id: 1 })));
    }

    #[test]
    fn empty_store_round_trips() {
        let s = VoxelFeatureStore::new(StoreHeader {
            pitch_um: [1.0, 1.0, 1.0],
            dims: [1, 1, 1],
            parts: vec![],
        });
        let b = s.to_bytes().unwrap();
        assert_eq!(b.len(), 36);
        assert_eq!(VoxelFeatureStore::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn truncation_names_block() {
        let b = sample().to_bytes().unwrap();
        let err = VoxelFeatureStore::from_bytes(&b[..b.len() - 3]).unwrap_err();
        match err {
            Error::Corrupt { message, .. } => assert!(message.contains("layer 1 feature 3"), "{message}"),
            e => panic!("{e}"),
        }
        let mut bad = b.clone();
        bad[0] = b'J';
        assert!(matches!(VoxelFeatureStore::from_bytes(&bad), Err(Error::Format(_))));
        bad = b.clone();
        bad[4] = 9;
        assert!(matches!(VoxelFeatureStore::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn huge_declared_counts_fail_without_allocating() {
        let mut b = sample().to_bytes().unwrap();
        // Part count field sits right after the fixed header.
        b[32..36].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(VoxelFeatureStore::from_bytes(&b), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn invalid_blocks_rejected() {
        let mut s = sample();
        assert!(s
            .insert(FeatureBlock {
                layer: 1,
                feature_id: 3,
                entries: vec![]
            })
            .is_err());
        s.blocks[1].entries = vec![(5, 1.0), (5, 2.0)];
        assert!(s.to_bytes().is_err());
        s.blocks[1].entries = vec![(24, 1.0)];
        assert!(s.to_bytes().is_err());
    }

    #[test]
    fn voxel_cache_round_trip() {
        let b = TriangleMesh::cuboid([-1.0, -1.0, 0.0], [1.0, 0.5, 0.12]);
        let v = voxelize_parts(&[("b".into(), b)], DEFAULT_PITCH_UM, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.vox");
        write_voxel_cache(&v, &p).unwrap();
        let back = read_voxel_cache(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.origin_mm(), v.origin_mm());
        assert_eq!(back.parts(), v.parts());
        assert!(back.occupied_indices().eq(v.occupied_indices()));
    }

    #[test]
    fn reduction_arithmetic() {
        let raw = 640 * 480 * 2 * 200 * 20;
        let r = reduction_report(raw, 3000 * 10 * 8 * 20).unwrap();
        assert!((r.ratio - 0.99802).abs() < 1e-4);
        assert!(r.meets_claim());
        assert_eq!(reduction_report(100, 100).unwrap().ratio, 0.0);
        assert!(reduction_report(0, 1).is_err());
    }
}
