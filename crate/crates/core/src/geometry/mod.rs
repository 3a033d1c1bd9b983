//! Part geometry: STL input, voxelization at camera pitch and registration
//! of voxel layers to corrected pixel coordinates.

mod stl;
mod voxel;

pub use stl::{
    face_normal, parse_stl, read_stl, write_ascii_stl, write_binary_stl, BoundingBox, Triangle, TriangleMesh, Vec3,
};
pub use voxel::{
    aligned_origin, layer_mask, map_layer_feature, unmap_layer_feature, voxelize, voxelize_parts, LayerMask,
    Part, VoxelMesh, DEFAULT_PITCH_UM,
};
