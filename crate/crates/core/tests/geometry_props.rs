use irmap::geometry::*;
use irmap::imageops::Grid2D;
use irmap::spatial::PixelGridFrame;
use proptest::prelude::*;

const P: [f64; 3] = DEFAULT_PITCH_UM;

fn block_strategy() -> impl Strategy<Value = TriangleMesh> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.0..1.0f64, 0.3..8.0f64, 0.3..8.0f64, 0.05..1.0f64)
        .prop_map(|(x, y, z, dx, dy, dz)| TriangleMesh::cuboid([x, y, z], [x + dx, y + dy, z + dz]))
}

fn shape_strategy() -> impl Strategy<Value = TriangleMesh> {
    prop_oneof![
        block_strategy(),
        (-10.0..10.0f64, -10.0..10.0f64, 1.0..4.0f64)
            .prop_map(|(x, y, r)| TriangleMesh::uv_sphere([x, y, r + 0.1], r, 24, 12)),
    ]
}

fn bitset(v: &VoxelMesh) -> Vec<usize> {
    v.occupied_indices().collect()
}

fn frame() -> PixelGridFrame {
    PixelGridFrame::centered(360.0, 160, 160).unwrap()
}

#[test]
fn reference_box_fills_exactly_one_thousand_voxels() {
    let b = TriangleMesh::cuboid([0.0, 0.0, 0.0], [3.6, 3.6, 0.4]);
    let v = voxelize_parts(&[("box".into(), b)], P, None).unwrap();
    assert_eq!(v.occupied_count(), 1000);
    assert_eq!(v.dims(), [10, 10, 10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn voxelization_is_deterministic(mesh in shape_strategy()) {
        let parts = [("p".to_string(), mesh)];
        let a = voxelize_parts(&parts, P, None).unwrap();
        let b = voxelize_parts(&parts, P, None).unwrap();
        prop_assert_eq!(bitset(&a), bitset(&b));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn count_survives_whole_pitch_translation(mesh in shape_strategy(), di in -30i32..30, dj in -30i32..30, dk in 0i32..5) {
        let a = voxelize_parts(&[("p".into(), mesh.clone())], P, None).unwrap();
        let shift = [di as f64 * 0.36, dj as f64 * 0.36, dk as f64 * 0.04];
        let b = voxelize_parts(&[("p".into(), mesh.translated(shift))], P, None).unwrap();
        prop_assert_eq!(a.occupied_count(), b.occupied_count());
    }

    #[test]
    fn mask_size_equals_layer_occupancy(mesh in shape_strategy()) {
        let v = voxelize_parts(&[("p".into(), mesh)], P, None).unwrap();
        for k in 0..v.dims()[2] {
            let m = layer_mask(&v, k, &frame()).unwrap();
            prop_assert_eq!(m.len(), v.layer_count(k));
        }
    }

    #[test]
    fn remapping_is_idempotent(mesh in block_strategy(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let v = voxelize_parts(&[("p".into(), mesh)], P, None).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = frame();
        let (w, h) = f.dims();
        let img = Grid2D::from_fn(w, h, |_, _| rng.gen_range(0.0..500.0)).unwrap();
        for k in 0..v.dims()[2] {
            let m = layer_mask(&v, k, &f).unwrap();
            let entries = map_layer_feature(&img, &m).unwrap();
            prop_assert_eq!(entries.len(), m.len());
            let full = unmap_layer_feature(&entries, &m, f64::NAN).unwrap();
            prop_assert_eq!(map_layer_feature(&full, &m).unwrap(), entries);
        }
    }
}
