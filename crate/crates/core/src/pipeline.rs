//! End-to-end run: frames (read or simulated) → spatial correction →
//! per-layer feature extraction → voxel mapping → store and manifest.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{GridSpec, LayerRange, RunConfig};
use crate::error::{Error, Result};
use crate::features::{extract_layer, FeatureId, LayerSummary, SpatterRecord};
use crate::framestack::{layer_path, list_layers, LayerStack};
use crate::geometry::{layer_mask, map_layer_feature, read_stl, voxelize_parts, LayerMask, VoxelMesh};
use crate::imageops::Grid;
use crate::radiometry::{quantize_counts, CalibrationProfile};
use crate::simulator::{GroundTruth, Simulation};
use crate::spatial::{correction_homography, parse_correspondences, warp_frame, Homography, PixelGridFrame};
use crate::store::{
    read_voxel_cache, reduction_report, write_voxel_cache, FeatureBlock, ReductionReport, StoreHeader,
    VoxelFeatureStore,
};

pub const DEFAULT_LAYER_THICKNESS_UM: f64 = 40.0;

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Keep the simulator's ground truth of every processed layer.
    pub keep_truth: bool,
}

enum Source {
    Simulation(Box<Simulation>),
    Frames(PathBuf),
}

/// Everything a run needs, resolved from the config.
pub struct RunInputs {
    source: Source,
    pub voxels: VoxelMesh,
    pub grid: PixelGridFrame,
    pub profile: CalibrationProfile,
    /// Raw-to-corrected pixel homography applied to every frame.
    pub correction: Option<Homography>,
    pub layers: LayerRange,
    pub features: Vec<FeatureId>,
    /// Input files in a fixed order, for hashing.
    pub input_files: Vec<(String, PathBuf)>,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

fn display(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

impl RunInputs {
    pub fn resolve(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let paths = &cfg.paths;
        let mut input_files = Vec::new();
        for p in paths
            .simulation
            .iter()
            .chain(&paths.frames_dir)
            .chain(&paths.stl)
            .chain(&paths.correspondences)
            .chain(&paths.calibration)
        {
            require(&cfg.resolve(p))?;
        }

        let source = match (&paths.simulation, &paths.frames_dir) {
            (Some(spec_path), None) => {
                let full = cfg.resolve(spec_path);
                input_files.push((display(spec_path), full.clone()));
                let mut sim = Simulation::load(&full)?;
                let sim_dir = full.parent().unwrap_or(Path::new("."));
                let rel_dir = spec_path.parent().unwrap_or(Path::new(""));
                for stl in &sim.spec.stl {
                    input_files.push((display(&rel_dir.join(stl)), sim_dir.join(stl)));
                }
                if let Some(seed) = cfg.seed {
                    sim.spec.seed = seed;
                }
                Source::Simulation(Box::new(sim))
            }
            (None, Some(dir)) => Source::Frames(cfg.resolve(dir)),
            _ => return Err(Error::Config("set paths.simulation or paths.frames_dir".into())),
        };
        let sim = match &source {
            Source::Simulation(s) => Some(s.as_ref()),
            Source::Frames(_) => None,
        };

        let grid = match (cfg.grid, sim) {
            (Some(g), _) => g.frame()?,
            (None, Some(s)) => s.grid,
            (None, None) => GridSpec::default().frame()?,
        };
        let profile = match (&paths.calibration, sim) {
            (Some(p), _) => {
                let full = cfg.resolve(p);
                input_files.push((display(p), full.clone()));
                let text = std::fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?;
                CalibrationProfile::from_toml(&text)?
            }
            (None, Some(s)) => s.spec.calibration,
            (None, None) => CalibrationProfile::default(),
        };
        let correction = match &paths.correspondences {
            Some(p) => {
                let full = cfg.resolve(p);
                input_files.push((display(p), full.clone()));
                let text = std::fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?;
                let est = correction_homography(&parse_correspondences(&text)?, &grid)?;
                log::info!("correction homography max residual {:.3} px", est.max_residual);
                Some(est.homography)
            }
            None => None,
        };

        let thickness = cfg
            .layer_thickness_um
            .or(sim.map(|s| s.spec.scan.layer_thickness))
            .unwrap_or(DEFAULT_LAYER_THICKNESS_UM);
        let pitch = [grid.pitch_um, grid.pitch_um, thickness];
        for p in &paths.stl {
            input_files.push((display(p), cfg.resolve(p)));
        }
        let cache = paths.voxel_cache.as_ref().map(|p| cfg.resolve(p));
        let voxels = match (&cache, paths.stl.is_empty(), sim) {
            (Some(c), _, _) if c.exists() => read_voxel_cache(c)?,
            (_, false, _) => {
                let parts = paths
                    .stl
                    .iter()
                    .map(|p| {
                        let full = cfg.resolve(p);
                        let name = full.file_stem().map_or("part".into(), |s| s.to_string_lossy().into_owned());
                        Ok((name, read_stl(&full)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                voxelize_parts(&parts, pitch, None)?
            }
            (_, true, Some(s)) => s.voxels.clone(),
            (_, true, None) => return Err(Error::Config("no geometry: list paths.stl or a voxel_cache".into())),
        };
        if let Some(c) = &cache {
            if !c.exists() {
                write_voxel_cache(&voxels, c)?;
            }
        }
        if voxels.pitch_um()[0] != grid.pitch_um || voxels.pitch_um()[1] != grid.pitch_um {
            return Err(Error::Config(format!(
                "voxel pitch {:?} um does not match the {} um pixel grid",
                voxels.pitch_um(),
                grid.pitch_um
            )));
        }

        let available = match &source {
            Source::Simulation(s) => (0..s.layer_count()).collect::<Vec<_>>(),
            Source::Frames(dir) => list_layers(dir)?,
        };
        let Some(&last) = available.last() else {
            return Err(Error::Config("no layers available to process".into()));
        };
        let layers = match cfg.layer_range()? {
            Some(r) => {
                if r.end > last + 1 {
                    return Err(Error::Config(format!("layer range {r} exceeds the {} available layers", last + 1)));
                }
                r
            }
            None => LayerRange {
                start: available[0],
                end: last + 1,
            },
        };
        if let Source::Frames(dir) = &source {
            for l in layers.layers() {
                let p = layer_path(dir, l);
                require(&p)?;
                input_files.push((display(&Path::new("frames").join(p.file_name().unwrap())), p));
            }
        }
        Ok(RunInputs {
            source,
            voxels,
            grid,
            profile,
            correction,
            layers,
            features: cfg.selected_features()?,
            input_files,
        })
    }

    pub fn simulation(&self) -> Option<&Simulation> {
        match &self.source {
            Source::Simulation(s) => Some(s),
            Source::Frames(_) => None,
        }
    }

    pub fn mask(&self, layer: usize) -> Result<LayerMask> {
        if layer < self.voxels.dims()[2] {
            layer_mask(&self.voxels, layer, &self.grid)
        } else {
            Ok(LayerMask::empty(layer, self.grid))
        }
    }

    /// Perspective-corrected frames of one layer, with ground truth for
    /// simulated input.
    pub fn load_layer(&self, layer: usize) -> Result<(LayerStack, Option<GroundTruth>)> {
        let (mut stack, truth) = match &self.source {
            Source::Simulation(s) => {
                let (st, t) = s.render(layer)?;
                (st, Some(t))
            }
            Source::Frames(dir) => (LayerStack::read(&layer_path(dir, layer))?, None),
        };
        if stack.layer != layer {
            return Err(Error::Format(format!("frame file for layer {layer} declares layer {}", stack.layer)));
        }
        if stack.dims() != self.grid.dims() {
            return Err(Error::Dimensions {
                expected: self.grid.dims(),
                actual: stack.dims(),
            });
        }
        if let Some(h) = &self.correction {
            let dims = self.grid.dims();
            for f in &mut stack.frames {
                let warped = warp_frame(f, h, dims)?;
                *f = Grid::from_vec(dims.0, dims.1, warped.grid.values().iter().map(|&c| quantize_counts(c)).collect())?;
            }
        }
        Ok((stack, truth))
    }
}

/// Per-layer result of a run.
#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub summary: LayerSummary,
    pub blocks: Vec<FeatureBlock>,
    pub spatters: Vec<SpatterRecord>,
    pub raw_bytes: u64,
    pub elapsed: Duration,
    pub truth: Option<GroundTruth>,
}

/// Runs the extractors on one layer and maps the maps onto its voxels.
/// Invalid values are stored as NaN.
pub fn process_layer(inputs: &RunInputs, cfg: &RunConfig, layer: usize, keep_truth: bool) -> Result<LayerOutcome> {
    let start = Instant::now();
    let (stack, truth) = inputs.load_layer(layer)?;
    let mask = inputs.mask(layer)?;
    let raw_bytes = stack.raw_bytes();
    let (summary, blocks, spatters) = if mask.is_empty() {
        let summary = LayerSummary {
            layer,
            frames: stack.len(),
            first_active_frame: None,
            prescan_frames: 0,
            scanned_pixels: 0,
            part_pixels: 0,
            spatter_count: 0,
            crop: [0, 0, 0, 0],
        };
        let blocks = inputs
            .features
            .iter()
            .map(|f| FeatureBlock {
                layer: layer as u32,
                feature_id: f.code(),
                entries: Vec::new(),
            })
            .collect();
        (summary, blocks, Vec::new())
    } else {
        let out = extract_layer(&stack, &mask, &inputs.profile, &cfg.extraction, &inputs.features)?;
        let mut blocks = Vec::with_capacity(out.maps.len());
        for m in &out.maps {
            let masked = m.grid.map(|v| v);
            let mut grid = masked;
            for (v, ok) in grid.values_mut().iter_mut().zip(m.validity.values()) {
                if !ok.is_usable() {
                    *v = f64::NAN;
                }
            }
            let entries = map_layer_feature(&grid, &mask)?
                .into_iter()
                .map(|(i, v)| (i, v as f32))
                .collect();
            blocks.push(FeatureBlock {
                layer: layer as u32,
                feature_id: m.feature.code(),
                entries,
            });
        }
        (out.summary, blocks, out.spatters)
    };
    if blocks.len() != inputs.features.len() {
        return Err(Error::Invariant(format!(
            "layer {layer} produced {} feature maps, {} requested",
            blocks.len(),
            inputs.features.len()
        )));
    }
    Ok(LayerOutcome {
        summary,
        blocks,
        spatters,
        raw_bytes,
        elapsed: start.elapsed(),
        truth: truth.filter(|_| keep_truth),
    })
}

#[derive(Debug, Serialize)]
struct ManifestRun {
    tool: &'static str,
    version: &'static str,
    source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    layers: String,
    features: Vec<&'static str>,
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct ManifestThresholds {
    activity_counts: f64,
    melt_counts: f64,
}

#[derive(Debug, Serialize)]
struct ManifestLayer {
    #[serde(flatten)]
    summary: LayerSummary,
    raw_bytes: u64,
    /// First voxel-mapped value count of the layer's blocks.
    stored_entries: usize,
}

#[derive(Debug, Serialize)]
struct ManifestReduction {
    raw_bytes: u64,
    stored_bytes: u64,
    ratio: f64,
    meets_claim: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    run: ManifestRun,
    config: &'a RunConfig,
    calibration: CalibrationProfile,
    thresholds: ManifestThresholds,
    #[serde(skip_serializing_if = "Option::is_none")]
    correction_homography: Option<[[f64; 3]; 3]>,
    inputs: Vec<ManifestFile>,
    store: ManifestFile,
    reduction: ManifestReduction,
    layers: Vec<ManifestLayer>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub store_path: PathBuf,
    pub manifest_path: PathBuf,
    pub timing_path: PathBuf,
    pub report: ReductionReport,
    pub layers: Vec<LayerOutcome>,
    pub store: VoxelFeatureStore,
}

pub fn manifest_path_for(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

fn timing_path_for(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".timing.txt");
    PathBuf::from(s)
}

pub fn output_path(cfg: &RunConfig) -> PathBuf {
    cfg.resolve(cfg.paths.output.as_deref().unwrap_or(Path::new("out/store.irvx")))
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    run_pipeline_with(cfg, &PipelineOptions::default())
}

/// Processes every configured layer (in parallel over `cfg.jobs` workers),
/// writes the store, its manifest and a timing sidecar.
pub fn run_pipeline_with(cfg: &RunConfig, options: &PipelineOptions) -> Result<RunOutcome> {
    let inputs = RunInputs::resolve(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    let started = Instant::now();
    let layers: Vec<usize> = inputs.layers.layers().collect();
    let results: Vec<Result<LayerOutcome>> = pool.install(|| {
        layers
            .par_iter()
            .map(|&l| {
                let r = process_layer(&inputs, cfg, l, options.keep_truth).map_err(|e| e.in_layer(l));
                if let Ok(o) = &r {
                    log::info!("layer {l}: {} spatters, {:.2?}", o.spatters.len(), o.elapsed);
                }
                r
            })
            .collect()
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut store = VoxelFeatureStore::new(StoreHeader::for_mesh(&inputs.voxels));
    store.set_origin_mm(inputs.voxels.origin_mm(), inputs.voxels.is_exact())?;
    for o in &outcomes {
        for b in &o.blocks {
            store.insert(b.clone())?;
        }
    }
    let store_path = output_path(cfg);
    let bytes = store.to_bytes()?;
    if let Some(dir) = store_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&store_path, &bytes).map_err(|e| Error::io(&store_path, e))?;
    let raw: u64 = outcomes.iter().map(|o| o.raw_bytes).sum();
    let report = reduction_report(raw, bytes.len() as u64)?;

    let th = cfg.extraction.thresholds(&inputs.profile)?;
    let inputs_hashed = inputs
        .input_files
        .iter()
        .map(|(name, p)| {
            Ok(ManifestFile {
                path: name.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        run: ManifestRun {
            tool: "irmap",
            version: env!("CARGO_PKG_VERSION"),
            source: if inputs.simulation().is_some() { "simulation" } else { "frames" },
            seed: inputs.simulation().map(|s| s.spec.seed),
            layers: inputs.layers.to_string(),
            features: inputs.features.iter().map(|f| f.name()).collect(),
        },
        config: cfg,
        calibration: inputs.profile,
        thresholds: ManifestThresholds {
            activity_counts: th.activity,
            melt_counts: th.melt,
        },
        correction_homography: inputs.correction.map(|h| h.rows()),
        inputs: inputs_hashed,
        store: ManifestFile {
            path: store_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        },
        reduction: ManifestReduction {
            raw_bytes: report.raw_bytes,
            stored_bytes: report.stored_bytes,
            ratio: report.ratio,
            meets_claim: report.meets_claim(),
        },
        layers: outcomes
            .iter()
            .map(|o| ManifestLayer {
                summary: o.summary.clone(),
                raw_bytes: o.raw_bytes,
                stored_entries: o.blocks.first().map_or(0, |b| b.entries.len()),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Invariant(format!("manifest: {e}")))?;
    let manifest_path = manifest_path_for(&store_path);
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let mut timing = String::from("# layer seconds\n");
    for o in &outcomes {
        timing.push_str(&format!("{} {:.3}\n", o.summary.layer, o.elapsed.as_secs_f64()));
    }
    timing.push_str(&format!("total {:.3}\n", started.elapsed().as_secs_f64()));
    let timing_path = timing_path_for(&store_path);
    std::fs::write(&timing_path, timing).map_err(|e| Error::io(&timing_path, e))?;

    Ok(RunOutcome {
        store_path,
        manifest_path,
        timing_path,
        report,
        layers: outcomes,
        store,
    })
}
