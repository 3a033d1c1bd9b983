#![allow(dead_code)]

pub mod oracles;

use irmap::config::GridSpec;
use irmap::geometry::{voxelize_parts, TriangleMesh, DEFAULT_PITCH_UM};
use irmap::simulator::{Simulation, SimulationSpec, SpatterSpec};

/// Square block centered on the plate, `side` mm wide and `height` mm tall.
pub fn block_sim(side: f64, height: f64, spec: SimulationSpec) -> Simulation {
    let h = side / 2.0;
    let mesh = TriangleMesh::cuboid([-h, -h, 0.0], [h, h, height]);
    let vox = voxelize_parts(&[("block".into(), mesh)], DEFAULT_PITCH_UM, None).unwrap();
    Simulation::new(spec, vox).unwrap()
}

/// 96×96-pixel build of a 7.2 mm block, short enough for property tests.
pub fn small_spec(seed: u64, frames: usize, spatters: usize, noise: f64) -> SimulationSpec {
    SimulationSpec {
        seed,
        frames_per_layer: frames,
        noise_sigma_counts: Some(noise),
        grid: GridSpec { width: 96, height: 96, ..GridSpec::default() },
        spatter: SpatterSpec { per_layer: spatters, ..SpatterSpec::default() },
        ..SimulationSpec::default()
    }
}

pub fn small_sim(seed: u64, frames: usize, spatters: usize, noise: f64) -> Simulation {
    block_sim(7.2, 0.12, small_spec(seed, frames, spatters, noise))
}
